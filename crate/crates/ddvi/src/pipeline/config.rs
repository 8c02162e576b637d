//! Flat `key = value` run configuration.
//!
//! A config file assigns any subset of the fields; unknown keys are errors
//! so typos fail loudly. Command-line overrides reuse the same key/value
//! parser, and `to_text` emits every field in a fixed order, which is the
//! canonical form embedded in checkpoints.

use crate::error::{Error, Result};
use crate::model::{Architecture, Likelihood, Method, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitZ {
    /// First-layer inducing inputs copy a shuffled subset of training rows.
    Data,
    /// All inducing inputs start standard normal.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub method: Method,
    pub layers: usize,
    pub inducing: usize,
    pub hidden_cap: usize,
    pub score_hidden: Vec<usize>,
    pub lr: f64,
    pub lr_final: f64,
    pub batch: usize,
    pub iterations: usize,
    pub n_mc: usize,
    pub eval_mc: usize,
    pub lambda: f64,
    pub g: f64,
    pub sigma2: f64,
    pub t_end: f64,
    pub steps: usize,
    pub seed: u64,
    pub jitter: f64,
    pub split_ratio: f64,
    pub n_targets: usize,
    pub header: bool,
    pub trainable: Trainable,
    pub init_z: InitZ,
    pub pca: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Regression,
            method: Method::Ddvi,
            layers: 2,
            inducing: 128,
            hidden_cap: 8,
            score_hidden: vec![128, 128],
            lr: 0.01,
            lr_final: 0.0,
            batch: 256,
            iterations: 20_000,
            n_mc: 4,
            eval_mc: 128,
            lambda: 0.5,
            g: 1.0,
            sigma2: 1.0,
            t_end: 1.0,
            steps: 30,
            seed: 0,
            jitter: 1e-6,
            split_ratio: 0.9,
            n_targets: 1,
            header: false,
            trainable: Trainable::All,
            init_z: InitZ::Data,
            pca: 0,
            checkpoint_every: 1000,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

impl TrainConfig {
    /// Apply one assignment. Every config key routes through here, from
    /// files and from command-line overrides alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => {
                self.task = match value {
                    "regression" => TaskKind::Regression,
                    "classification" => TaskKind::Classification,
                    _ => return Err(Error::Config(format!("bad value for task: {value:?}"))),
                }
            }
            "method" => {
                self.method = match value {
                    "ddvi" => Method::Ddvi,
                    "dsvi" => Method::Dsvi,
                    _ => return Err(Error::Config(format!("bad value for method: {value:?}"))),
                }
            }
            "layers" => self.layers = parse_num(key, value)?,
            "inducing" => self.inducing = parse_num(key, value)?,
            "hidden_cap" => self.hidden_cap = parse_num(key, value)?,
            "score_hidden" => {
                let parts: Result<Vec<usize>> = value
                    .split(',')
                    .map(|p| parse_num(key, p.trim()))
                    .collect();
                self.score_hidden = parts?;
            }
            "lr" => self.lr = parse_num(key, value)?,
            "lr_final" => self.lr_final = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "n_mc" => self.n_mc = parse_num(key, value)?,
            "eval_mc" => self.eval_mc = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "g" => self.g = parse_num(key, value)?,
            "sigma2" => self.sigma2 = parse_num(key, value)?,
            "t_end" => self.t_end = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "jitter" => self.jitter = parse_num(key, value)?,
            "split_ratio" => self.split_ratio = parse_num(key, value)?,
            "n_targets" => self.n_targets = parse_num(key, value)?,
            "header" => {
                self.header = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::Config(format!("bad value for header: {value:?}"))),
                }
            }
            "trainable" => {
                self.trainable = match value {
                    "all" => Trainable::All,
                    "score-only" => Trainable::ScoreOnly,
                    "posterior-only" => Trainable::PosteriorOnly,
                    _ => return Err(Error::Config(format!("bad value for trainable: {value:?}"))),
                }
            }
            "init_z" => {
                self.init_z = match value {
                    "data" => InitZ::Data,
                    "random" => InitZ::Random,
                    _ => return Err(Error::Config(format!("bad value for init_z: {value:?}"))),
                }
            }
            "pca" => self.pca = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over this config. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization: every field, fixed order, parseable by
    /// `from_text`.
    pub fn to_text(&self) -> String {
        let task = match self.task {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        };
        let method = match self.method {
            Method::Ddvi => "ddvi",
            Method::Dsvi => "dsvi",
        };
        let trainable = match self.trainable {
            Trainable::All => "all",
            Trainable::ScoreOnly => "score-only",
            Trainable::PosteriorOnly => "posterior-only",
        };
        let init_z = match self.init_z {
            InitZ::Data => "data",
            InitZ::Random => "random",
        };
        let score_hidden = self
            .score_hidden
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "task = {task}\n\
             method = {method}\n\
             layers = {}\n\
             inducing = {}\n\
             hidden_cap = {}\n\
             score_hidden = {score_hidden}\n\
             lr = {}\n\
             lr_final = {}\n\
             batch = {}\n\
             iterations = {}\n\
             n_mc = {}\n\
             eval_mc = {}\n\
             lambda = {}\n\
             g = {}\n\
             sigma2 = {}\n\
             t_end = {}\n\
             steps = {}\n\
             seed = {}\n\
             jitter = {}\n\
             split_ratio = {}\n\
             n_targets = {}\n\
             header = {}\n\
             trainable = {trainable}\n\
             init_z = {init_z}\n\
             pca = {}\n\
             checkpoint_every = {}\n",
            self.layers,
            self.inducing,
            self.hidden_cap,
            self.lr,
            self.lr_final,
            self.batch,
            self.iterations,
            self.n_mc,
            self.eval_mc,
            self.lambda,
            self.g,
            self.sigma2,
            self.t_end,
            self.steps,
            self.seed,
            self.jitter,
            self.split_ratio,
            self.n_targets,
            self.header,
            self.pca,
            self.checkpoint_every,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be 1..=5, got {}", self.layers)));
        }
        for (name, v) in [
            ("inducing", self.inducing),
            ("batch", self.batch),
            ("iterations", self.iterations),
            ("n_mc", self.n_mc),
            ("eval_mc", self.eval_mc),
            ("steps", self.steps),
            ("n_targets", self.n_targets),
            ("hidden_cap", self.hidden_cap),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_final", self.lr_final),
            ("g", self.g),
            ("sigma2", self.sigma2),
            ("t_end", self.t_end),
            ("jitter", self.jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number")));
            }
        }
        if self.sigma2 == 0.0 || self.t_end == 0.0 {
            return Err(Error::Config("sigma2 and t_end must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must be in (0,1)".into()));
        }
        if self.score_hidden.is_empty() || self.score_hidden.iter().any(|w| *w == 0) {
            return Err(Error::Config("score_hidden needs positive widths".into()));
        }
        Ok(())
    }

    /// Step size at `iter`: constant `lr`, or a linear ramp down to
    /// `lr_final` over the run when that is set nonzero.
    pub fn effective_lr(&self, iter: usize) -> f64 {
        if self.lr_final <= 0.0 || self.iterations <= 1 {
            return self.lr;
        }
        let frac = iter as f64 / (self.iterations - 1) as f64;
        self.lr + (self.lr_final - self.lr) * frac
    }

    /// Model shape for a given post-projection input width and output count.
    pub fn architecture(&self, input_dim: usize, out_dim: usize) -> Result<Architecture> {
        Architecture::with_defaults(input_dim, self.layers, self.inducing, self.hidden_cap, out_dim)
    }

    pub fn likelihood(&self, classes: usize) -> Likelihood {
        match self.task {
            TaskKind::Regression => Likelihood::Gaussian,
            TaskKind::Classification => Likelihood::Categorical { classes },
        }
    }
}
