//! Minibatch training loop.
//!
//! Every iteration rebuilds the objective graph from the parameter store,
//! backpropagates, and applies one Adam ascent step. All randomness is
//! derived from (seed, iteration), never from mutable generator state, so a
//! run resumed from a checkpoint continues bit-identically to the
//! uninterrupted run. Metric rows stream to `metrics.csv`; checkpoints go
//! to `checkpoint.ddvi` atomically, with a final write at the last
//! iteration and an emergency write if the objective turns non-finite.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::diffusion::DiffusionSchedule;
use crate::elbo::{ddvi_elbo, dsvi_elbo, Batch, ElboBreakdown};
use crate::error::{Error, Result};
use crate::model::{init_params, Likelihood, Method, ParamStore, TargetBatch, Tensor};
use crate::pipeline::checkpoint::{self, Checkpoint};
use crate::pipeline::config::{InitZ, TaskKind, TrainConfig};
use crate::pipeline::data::{self, Dataset, Normalization, Pca, SplitNormalized, Targets};
use crate::rng::{self, stream};
use crate::tape::Graph;

pub const CHECKPOINT_FILE: &str = "checkpoint.ddvi";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TEST_SPLIT_FILE: &str = "test_split.csv";
pub const METRICS_HEADER: &str = "iter,elbo,prior,lik,l1,fix,wall_ms";

/// Adam first/second moments per trainable parameter, stored flat so they
/// serialize exactly like the parameters they track.
pub struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(store: &ParamStore, trainable: crate::model::Trainable) -> Adam {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in store.iter() {
            if trainable.includes(name) {
                m.insert(name.clone(), vec![0.0; t.data.len()]);
                v.insert(name.clone(), vec![0.0; t.data.len()]);
            }
        }
        Adam { m, v, t: 0 }
    }

    /// One ascent step over sorted parameter names.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_B1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_B2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment for every trainable");
            let v = self.v.get_mut(name).expect("moment for every trainable");
            let p = &mut store.get_mut(name)?.data;
            for i in 0..g.len() {
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] += lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub iterations_run: usize,
    pub final_breakdown: Option<ElboBreakdown>,
}

struct PreparedData {
    split: SplitNormalized,
    pca: Option<Pca>,
    /// Model-space training features (normalized, projected).
    x: Vec<f64>,
    input_dim: usize,
    out_dim: usize,
    classes: usize,
}

fn prepare_data(cfg: &TrainConfig, ds: &Dataset) -> Result<PreparedData> {
    let split = data::split_normalize(ds, cfg.split_ratio, cfg.seed)?;
    let (pca, x, input_dim) = if cfg.pca > 0 {
        let p = data::fit_pca(&split.train.x, split.train.n, split.train.d, cfg.pca, cfg.seed)?;
        let x = p.apply(&split.train.x, split.train.n);
        let k = p.k;
        (Some(p), x, k)
    } else {
        (None, split.train.x.clone(), split.train.d)
    };
    let (out_dim, classes) = match (&cfg.task, &split.train.targets) {
        (TaskKind::Regression, Targets::Real { per_row, .. }) => (*per_row, 0),
        (TaskKind::Classification, Targets::Labels { classes, .. }) => {
            if *classes < 2 {
                return Err(Error::Invalid(format!(
                    "classification needs at least 2 classes, found {classes}"
                )));
            }
            (*classes, *classes)
        }
        _ => return Err(Error::Invalid("task does not match target columns".into())),
    };
    Ok(PreparedData { split, pca, x, input_dim, out_dim, classes })
}

fn write_test_split(ds: &Dataset, split: &SplitNormalized, path: &Path) -> Result<()> {
    // Raw rows, so the file feeds back through the normal load path.
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    for &i in &split.test_idx {
        let mut rec: Vec<String> =
            ds.x[i * ds.d..(i + 1) * ds.d].iter().map(|v| v.to_string()).collect();
        match &ds.targets {
            Targets::Real { y, per_row } => {
                rec.extend(y[i * per_row..(i + 1) * per_row].iter().map(|v| v.to_string()));
            }
            Targets::Labels { y, .. } => rec.push(y[i].to_string()),
        }
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

fn build_checkpoint(
    cfg: &TrainConfig,
    store: &ParamStore,
    adam: &Adam,
    iter_next: usize,
    prep: &PreparedData,
) -> Checkpoint {
    let mut cp = Checkpoint::new(cfg.to_text());
    for (name, t) in store.iter() {
        cp.insert(name, t.clone());
    }
    for (name, m) in &adam.m {
        cp.insert(&format!("adam.m.{name}"), Tensor::new(&[m.len()], m.clone()));
    }
    for (name, v) in &adam.v {
        cp.insert(&format!("adam.v.{name}"), Tensor::new(&[v.len()], v.clone()));
    }
    cp.insert("meta.iter", Tensor::new(&[1], vec![iter_next as f64]));
    cp.insert("meta.classes", Tensor::new(&[1], vec![prep.classes as f64]));
    let norm = &prep.split.norm;
    cp.insert("norm.feat_min", Tensor::new(&[norm.feat_min.len()], norm.feat_min.clone()));
    cp.insert("norm.feat_max", Tensor::new(&[norm.feat_max.len()], norm.feat_max.clone()));
    if !norm.y_mean.is_empty() {
        cp.insert("norm.y_mean", Tensor::new(&[norm.y_mean.len()], norm.y_mean.clone()));
        cp.insert("norm.y_std", Tensor::new(&[norm.y_std.len()], norm.y_std.clone()));
    }
    if let Some(p) = &prep.pca {
        cp.insert("pca.mean", Tensor::new(&[p.d], p.mean.clone()));
        cp.insert("pca.components", Tensor::new(&[p.k, p.d], p.components.clone()));
        cp.insert("pca.scale", Tensor::new(&[1], vec![p.scale]));
    }
    cp
}

/// Restore normalization and projection from checkpoint arrays.
pub fn restore_transforms(cp: &Checkpoint) -> Result<(Normalization, Option<Pca>)> {
    let norm = Normalization {
        feat_min: cp.get("norm.feat_min")?.data.clone(),
        feat_max: cp.get("norm.feat_max")?.data.clone(),
        y_mean: cp.arrays.get("norm.y_mean").map(|t| t.data.clone()).unwrap_or_default(),
        y_std: cp.arrays.get("norm.y_std").map(|t| t.data.clone()).unwrap_or_default(),
    };
    let pca = match cp.arrays.get("pca.components") {
        Some(t) => {
            let (k, d) = (t.shape[0], t.shape[1]);
            Some(Pca {
                mean: cp.get("pca.mean")?.data.clone(),
                components: t.data.clone(),
                scale: cp.scalar("pca.scale")?,
                k,
                d,
            })
        }
        None => None,
    };
    Ok((norm, pca))
}

fn minibatch_indices(n: usize, batch: usize, seed: u64, iter: u64) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::rng_for(seed, &[stream::MINIBATCH, iter]);
    idx.shuffle(&mut r);
    idx.truncate(batch);
    idx
}

fn gather_rows(x: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    out
}

/// Train on a loaded dataset. When `resume` points at a checkpoint, the
/// stored parameters, optimizer moments and iteration counter are restored
/// and the loop continues where it stopped; the resumed config must match
/// the stored one except for the iteration target and checkpoint cadence.
pub fn train(
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    let prep = prepare_data(cfg, ds)?;
    let arch = cfg.architecture(prep.input_dim, prep.out_dim)?;
    let lik = cfg.likelihood(prep.classes);
    let sched = DiffusionSchedule::new(cfg.lambda, cfg.g, cfg.sigma2, cfg.t_end, cfg.steps)?;
    let n_train = prep.split.train.n;

    let (mut store, mut adam, start_iter) = match resume {
        None => {
            let z_rows = match cfg.init_z {
                InitZ::Random => None,
                InitZ::Data => {
                    let mut idx: Vec<usize> = (0..n_train).collect();
                    let mut r = rng::rng_for(cfg.seed, &[stream::PARAM_INIT, u64::MAX]);
                    idx.shuffle(&mut r);
                    // Cycle when there are fewer rows than inducing points.
                    let rows: Vec<usize> =
                        (0..arch.inducing).map(|i| idx[i % n_train]).collect();
                    Some(gather_rows(&prep.x, prep.input_dim, &rows))
                }
            };
            let store = init_params(
                &arch,
                &lik,
                cfg.method,
                &cfg.score_hidden,
                cfg.seed,
                z_rows.as_deref(),
                cfg.jitter,
            )?;
            let adam = Adam::new(&store, cfg.trainable);
            (store, adam, 0usize)
        }
        Some(path) => {
            let cp = checkpoint::load(path)?;
            let mut stored_cfg = TrainConfig::from_text(&cp.config_echo)?;
            stored_cfg.iterations = cfg.iterations;
            stored_cfg.checkpoint_every = cfg.checkpoint_every;
            if stored_cfg != *cfg {
                return Err(Error::Invalid(
                    "resume config differs from the checkpoint beyond iterations/cadence".into(),
                ));
            }
            let store = cp.param_store();
            let mut adam = Adam::new(&store, cfg.trainable);
            for name in adam.m.keys().cloned().collect::<Vec<_>>() {
                adam.m.insert(name.clone(), cp.get(&format!("adam.m.{name}"))?.data.clone());
                adam.v.insert(name.clone(), cp.get(&format!("adam.v.{name}"))?.data.clone());
            }
            let start = cp.scalar("meta.iter")? as usize;
            adam.t = start as u64;
            (store, adam, start)
        }
    };

    if start_iter > cfg.iterations {
        return Err(Error::Invalid(format!(
            "checkpoint is at iteration {start_iter}, past the target {}",
            cfg.iterations
        )));
    }

    write_test_split(ds, &prep.split, &out_dir.join(TEST_SPLIT_FILE))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = {
        let fresh = start_iter == 0 || !metrics_path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&metrics_path)
            .map_err(Error::Io)?;
        let mut w = std::io::BufWriter::new(file);
        if fresh {
            writeln!(w, "{METRICS_HEADER}").map_err(Error::Io)?;
        }
        w
    };

    let y_all = &prep.split.train.targets;
    let started = Instant::now();
    let mut last: Option<ElboBreakdown> = None;

    for iter in start_iter..cfg.iterations {
        let idx = minibatch_indices(n_train, cfg.batch, cfg.seed, iter as u64);
        let bx = gather_rows(&prep.x, prep.input_dim, &idx);
        let (y_real, y_labels);
        let y_batch = match y_all {
            Targets::Real { y, per_row } => {
                y_real = gather_rows(y, *per_row, &idx);
                TargetBatch::Real(&y_real)
            }
            Targets::Labels { y, .. } => {
                y_labels = idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
                TargetBatch::Classes(&y_labels)
            }
        };
        let batch = Batch { x: &bx, rows: idx.len(), y: y_batch };
        let iter_seed = rng::derive_seed(cfg.seed, &[stream::ELBO, iter as u64]);

        let step = (|| -> Result<ElboBreakdown> {
            let mut g = Graph::new();
            let vars = store.wire(&mut g, cfg.trainable);
            let (total, bd) = match cfg.method {
                Method::Ddvi => {
                    let eg = ddvi_elbo(
                        &mut g, &vars, &arch, &lik, &sched, &cfg.score_hidden, &batch,
                        n_train, cfg.n_mc, cfg.jitter, iter_seed,
                    )?;
                    (eg.total, eg.breakdown(&g, cfg.n_mc))
                }
                Method::Dsvi => {
                    let dg = dsvi_elbo(
                        &mut g, &vars, &arch, &lik, &batch, n_train, cfg.n_mc, cfg.jitter,
                        iter_seed,
                    )?;
                    let b = dg.breakdown(&g, cfg.n_mc);
                    // Shared metric schema: the divergence rides in the l1
                    // column, prior and fix stay zero.
                    (
                        dg.total,
                        ElboBreakdown {
                            total: b.total,
                            prior: 0.0,
                            lik: b.lik,
                            l1: b.kl,
                            fix: 0.0,
                            n_mc: b.n_mc,
                        },
                    )
                }
            };
            g.backward(total)?;
            let mut grads = BTreeMap::new();
            for (name, v) in &vars {
                if cfg.trainable.includes(name) {
                    let gr = g.grad(*v);
                    if gr.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of {name}")));
                    }
                    grads.insert(name.clone(), gr);
                }
            }
            adam.step(&mut store, &grads, cfg.effective_lr(iter))?;
            Ok(bd)
        })();

        let bd = match step {
            Ok(bd) => bd,
            Err(e) if e.is_numerical() => {
                // Parameters have not been touched this iteration; save them
                // as the last good state before giving up.
                let cp = build_checkpoint(cfg, &store, &adam, iter, &prep);
                checkpoint::save(&cp, &ckpt_path)?;
                metrics.flush().map_err(Error::Io)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };

        writeln!(
            metrics,
            "{},{},{},{},{},{},{}",
            iter,
            bd.total,
            bd.prior,
            bd.lik,
            bd.l1,
            bd.fix,
            started.elapsed().as_millis()
        )
        .map_err(Error::Io)?;
        last = Some(bd);

        let done = iter + 1 == cfg.iterations;
        if done || (iter + 1) % cfg.checkpoint_every == 0 {
            let cp = build_checkpoint(cfg, &store, &adam, iter + 1, &prep);
            checkpoint::save(&cp, &ckpt_path)?;
            metrics.flush().map_err(Error::Io)?;
        }
    }

    // Zero-iteration runs still leave a checkpoint behind.
    if start_iter == cfg.iterations {
        let cp = build_checkpoint(cfg, &store, &adam, cfg.iterations, &prep);
        checkpoint::save(&cp, &ckpt_path)?;
    }
    metrics.flush().map_err(Error::Io)?;

    Ok(TrainOutcome {
        checkpoint_path: ckpt_path,
        iterations_run: cfg.iterations - start_iter,
        final_breakdown: last,
    })
}

/// Convenience wrapper-level likelihood accessor for downstream consumers.
pub fn likelihood_from_checkpoint(cp: &Checkpoint) -> Result<(TrainConfig, Likelihood)> {
    let cfg = TrainConfig::from_text(&cp.config_echo)?;
    let classes = cp.scalar("meta.classes").unwrap_or(0.0) as usize;
    let lik = cfg.likelihood(classes);
    Ok((cfg, lik))
}
