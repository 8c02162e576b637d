//! Model assembly: architecture, likelihoods, and the named parameter store.
//!
//! All trainable state lives in a `ParamStore`, a name -> tensor map with a
//! deterministic order. Each training step wires the store into a fresh
//! graph (`wire`), builds the objective, and reads gradients back by name.
//! Optimizer state and checkpoints use the same names, so the store is the
//! single source of truth for what the model is.

use std::collections::BTreeMap;

use crate::diffusion::{WiredScoreNet, TIME_EMBED_DIM};
use crate::error::{Error, Result};
use crate::gp::{build_layer, LayerGraph};
use crate::kernels::{chol_with_jitter, rbf_gram};
use crate::rng::{self, stream};
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ddvi,
    Dsvi,
}

/// Deep GP shape: layer i maps in_dims()[i] -> layer_dims[i], with `inducing`
/// inducing points per layer. The flattened inducing block stacks row-major
/// inducing-by-output matrices in layer order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    pub inducing: usize,
}

impl Architecture {
    /// Hidden widths default to min(input_dim, cap); the last layer emits
    /// `out_dim` functions (targets for regression, logits for classes).
    pub fn with_defaults(
        input_dim: usize,
        depth: usize,
        inducing: usize,
        hidden_cap: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Invalid("depth must be at least 1".into()));
        }
        let hidden = input_dim.min(hidden_cap).max(1);
        let mut layer_dims = vec![hidden; depth - 1];
        layer_dims.push(out_dim);
        let a = Architecture {
            input_dim,
            layer_dims,
            inducing,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.inducing == 0 || self.layer_dims.is_empty() {
            return Err(Error::Invalid(format!(
                "architecture must have positive sizes: input_dim={}, inducing={}, layers={}",
                self.input_dim,
                self.inducing,
                self.layer_dims.len()
            )));
        }
        if self.layer_dims.iter().any(|d| *d == 0) {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layer_dims.len()
    }

    /// Input dimension of each layer.
    pub fn in_dims(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.depth());
        v.push(self.input_dim);
        v.extend_from_slice(&self.layer_dims[..self.depth() - 1]);
        v
    }

    /// Length of the flattened inducing-variable vector.
    pub fn flat_dim(&self) -> usize {
        self.inducing * self.layer_dims.iter().sum::<usize>()
    }
}

/// Observation model. `lik.log_noise` (ln of the Gaussian observation
/// variance) is the only trainable likelihood parameter; the two-component
/// mixture is a fixed diagnostic likelihood whose conditional density is
/// weight * N(y | f, sd0^2) + (1 - weight) * N(y | f + offset, sd1^2).
#[derive(Clone, Debug, PartialEq)]
pub enum Likelihood {
    Gaussian,
    Categorical { classes: usize },
    GaussianMixture { weight: f64, offset: f64, sd0: f64, sd1: f64 },
}

impl Likelihood {
    pub fn validate(&self) -> Result<()> {
        match self {
            Likelihood::Gaussian => Ok(()),
            Likelihood::Categorical { classes } => {
                if *classes < 2 {
                    Err(Error::Invalid("classification needs at least 2 classes".into()))
                } else {
                    Ok(())
                }
            }
            Likelihood::GaussianMixture { weight, offset, sd0, sd1 } => {
                if !(*weight > 0.0 && *weight < 1.0) {
                    Err(Error::Invalid(format!("mixture weight must be in (0,1), got {weight}")))
                } else if !(*sd0 > 0.0 && *sd1 > 0.0 && offset.is_finite()) {
                    Err(Error::Invalid("mixture components must have positive sds".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Targets for one minibatch, matched to the likelihood.
pub enum TargetBatch<'a> {
    /// Row-major batch-by-targets matrix for the Gaussian likelihoods.
    Real(&'a [f64]),
    /// Class index per row for the categorical likelihood.
    Classes(&'a [usize]),
}

// ---- parameter store -------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }
}

/// Which parameters receive gradients when wiring a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Score network only; kernel, inducing, and likelihood stay fixed.
    ScoreOnly,
    /// Variational state for either method (score network or mean-field
    /// factors); model hyperparameters stay fixed.
    PosteriorOnly,
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::ScoreOnly => name.starts_with("score."),
            Trainable::PosteriorOnly => name.starts_with("score.") || name.starts_with("q."),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Materialize every tensor on the graph: gradient leaves for names the
    /// filter includes, constants otherwise. Iteration order is the sorted
    /// name order, so node ids are reproducible across calls.
    pub fn wire(&self, g: &mut Graph, trainable: Trainable) -> BTreeMap<String, Var> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.map {
            let v = if trainable.includes(name) {
                g.param(&t.shape, t.data.clone())
            } else {
                g.constant(&t.shape, t.data.clone())
            };
            out.insert(name.clone(), v);
        }
        out
    }
}

// ---- initialization --------------------------------------------------------

/// Score net layer widths: input is flat_dim + time embedding, output is
/// flat_dim.
pub fn score_widths(arch: &Architecture, hidden: &[usize]) -> Vec<usize> {
    let h = arch.flat_dim();
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(h + TIME_EMBED_DIM);
    w.extend_from_slice(hidden);
    w.push(h);
    w
}

/// Build a freshly initialized parameter store.
///
/// Kernel hyperparameters start at lengthscale 1 and signal variance 1
/// (zero in log space); the Gaussian observation variance starts at 0.1.
/// When `z_data` rows are given, every layer's inducing inputs start at
/// those rows truncated or zero-padded to the layer's input width, keeping
/// them at the data's scale; hidden outputs start near zero, so standard
/// normal inner inducing inputs would sit far outside the propagated cloud
/// and flatline the kernel. Without `z_data` all layers are standard normal.
/// Score weights are N(0, 1/fan_in) with a zeroed output layer, so the
/// initial reverse process is the plain reference bridge. The mean-field
/// variant starts the output layer at the prior (zero mean, scale factors
/// from the Cholesky of the initial inducing covariance) and hidden layers
/// near-deterministic at identity-like means (inducing inputs truncated to
/// the layer width).
pub fn init_params(
    arch: &Architecture,
    lik: &Likelihood,
    method: Method,
    score_hidden: &[usize],
    seed: u64,
    z_data: Option<&[f64]>,
    jitter: f64,
) -> Result<ParamStore> {
    arch.validate()?;
    lik.validate()?;
    let m = arch.inducing;
    let in_dims = arch.in_dims();
    let mut store = ParamStore::new();

    let d0 = in_dims[0];
    if let Some(rows) = z_data {
        if rows.len() != m * d0 {
            return Err(Error::Invalid(format!(
                "inducing initializer has {} values, expected {} ({} x {})",
                rows.len(),
                m * d0,
                m,
                d0
            )));
        }
    }
    for (i, &d_in) in in_dims.iter().enumerate() {
        let li = i as u64;
        let z = match z_data {
            Some(rows) => {
                let mut z = vec![0.0; m * d_in];
                let w = d_in.min(d0);
                for r in 0..m {
                    z[r * d_in..r * d_in + w].copy_from_slice(&rows[r * d0..r * d0 + w]);
                }
                z
            }
            None => {
                rng::normal_vec(&mut rng::rng_for(seed, &[stream::PARAM_INIT, li, 0]), m * d_in)
            }
        };
        store.insert(&format!("l{i}.z"), Tensor::new(&[m, d_in], z));
        store.insert(&format!("l{i}.log_ls"), Tensor::zeros(&[d_in]));
        store.insert(&format!("l{i}.log_sv"), Tensor::zeros(&[]));
    }

    if matches!(lik, Likelihood::Gaussian) {
        store.insert("lik.log_noise", Tensor::new(&[], vec![0.1f64.ln()]));
    }

    match method {
        Method::Ddvi => {
            let widths = score_widths(arch, score_hidden);
            let n_layers = widths.len() - 1;
            for j in 0..n_layers {
                let (fan_in, fan_out) = (widths[j], widths[j + 1]);
                let w = if j == n_layers - 1 {
                    vec![0.0; fan_in * fan_out]
                } else {
                    let sc = 1.0 / (fan_in as f64).sqrt();
                    rng::normal_vec(
                        &mut rng::rng_for(seed, &[stream::PARAM_INIT, 100 + j as u64]),
                        fan_in * fan_out,
                    )
                    .iter()
                    .map(|x| x * sc)
                    .collect()
                };
                store.insert(&format!("score.w{j}"), Tensor::new(&[fan_in, fan_out], w));
                store.insert(&format!("score.b{j}"), Tensor::zeros(&[fan_out]));
            }
        }
        Method::Dsvi => {
            let last = arch.layer_dims.len() - 1;
            for (i, (&d_in, &d_out)) in in_dims.iter().zip(&arch.layer_dims).enumerate() {
                // Hidden-layer means start at the layer's inducing inputs
                // truncated to its width, so each hidden layer approximates
                // the identity on inducing rows and the stack carries
                // row-varying features from the first iteration. Zero means
                // would leave hidden outputs constant, and with them the
                // gradient into every upstream layer. The output layer
                // starts at zero.
                let mean = if i == last {
                    vec![0.0; m * d_out]
                } else {
                    let z = &store.get(&format!("l{i}.z"))?.data;
                    let w = d_out.min(d_in);
                    let mut mu = vec![0.0; m * d_out];
                    for r in 0..m {
                        mu[r * d_out..r * d_out + w].copy_from_slice(&z[r * d_in..r * d_in + w]);
                    }
                    mu
                };
                store.insert(&format!("q.l{i}.m"), Tensor::new(&[m, d_out], mean));
                // Output-layer scales start at the prior Cholesky (zero KL).
                // Hidden-layer scales start near-deterministic: at prior
                // scale the sampling noise drowns the identity-like means
                // and the KL pull erases them before the likelihood can
                // latch onto the features they carry. The KL re-inflates
                // the scales once the data supports it.
                let raw = if i == last {
                    let z = store.get(&format!("l{i}.z"))?;
                    prior_chol_raw(&z.data, m, d_in, jitter)?
                } else {
                    let mut raw = vec![0.0; m * m];
                    for r in 0..m {
                        raw[r * m + r] = 0.01f64.ln();
                    }
                    raw
                };
                for d in 0..d_out {
                    store.insert(&format!("q.l{i}.s{d}"), Tensor::new(&[m, m], raw.clone()));
                }
            }
        }
    }

    Ok(store)
}

/// Raw lower-triangular parameterization of chol(K_ZZ) at the initial
/// hyperparameters: strictly-lower entries stored as-is, diagonal stored in
/// log so positivity never binds. Upper entries are zero and stay unused.
fn prior_chol_raw(z: &[f64], m: usize, d_in: usize, jitter: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let zc = g.constant(&[m, d_in], z.to_vec());
    let ls = g.constant(&[d_in], vec![0.0; d_in]);
    let sv = g.constant(&[], vec![0.0]);
    let k = rbf_gram(&mut g, zc, zc, ls, sv)?;
    let jc = chol_with_jitter(&mut g, k, jitter)?;
    let l = g.values(jc.l);
    let mut raw = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..i {
            raw[i * m + j] = l[i * m + j];
        }
        raw[i * m + i] = l[i * m + i].ln();
    }
    Ok(raw)
}

// ---- wiring ----------------------------------------------------------------

/// Look up a wired variable by name.
pub fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("missing wired parameter {name}")))
}

/// Build every GP layer (kernel gram plus jittered Cholesky) from wired
/// parameters.
pub fn wire_layers(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    arch: &Architecture,
    jitter: f64,
) -> Result<Vec<LayerGraph>> {
    let mut layers = Vec::with_capacity(arch.depth());
    for i in 0..arch.depth() {
        let z = var(vars, &format!("l{i}.z"))?;
        let log_ls = var(vars, &format!("l{i}.log_ls"))?;
        let log_sv = var(vars, &format!("l{i}.log_sv"))?;
        layers.push(build_layer(g, z, log_ls, log_sv, jitter)?);
    }
    Ok(layers)
}

/// Collect the score MLP weights in layer order.
pub fn wire_score(
    vars: &BTreeMap<String, Var>,
    arch: &Architecture,
    score_hidden: &[usize],
) -> Result<WiredScoreNet> {
    let widths = score_widths(arch, score_hidden);
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for j in 0..widths.len() - 1 {
        let w = var(vars, &format!("score.w{j}"))?;
        let b = var(vars, &format!("score.b{j}"))?;
        layers.push((w, b));
    }
    Ok(WiredScoreNet { layers, h: arch.flat_dim() })
}

/// Mean-field posterior for one layer: a shared mean matrix and one scale
/// factor per output dimension.
pub struct LayerQ {
    /// Inducing-by-outputs mean matrix.
    pub mean: Var,
    /// Lower-triangular scale factor per output dimension.
    pub scale: Vec<Var>,
}

/// Assemble the mean-field factors from raw storage: L = strict_lower(raw)
/// + diag(exp(diag(raw))). The mask construction keeps the map
/// differentiable while pinning the upper triangle at zero.
pub fn wire_dsvi_q(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    arch: &Architecture,
) -> Result<Vec<LayerQ>> {
    let m = arch.inducing;
    let mut strict = vec![0.0; m * m];
    let mut eye = vec![0.0; m * m];
    for i in 0..m {
        eye[i * m + i] = 1.0;
        for j in 0..i {
            strict[i * m + j] = 1.0;
        }
    }

    let mut out = Vec::with_capacity(arch.depth());
    for (i, &d_out) in arch.layer_dims.iter().enumerate() {
        let mean = var(vars, &format!("q.l{i}.m"))?;
        let mut scale = Vec::with_capacity(d_out);
        for d in 0..d_out {
            let raw = var(vars, &format!("q.l{i}.s{d}"))?;
            let smask = g.constant(&[m, m], strict.clone());
            let emask = g.constant(&[m, m], eye.clone());
            let lower = g.mul(raw, smask)?;
            let dvec = g.diag_part(raw)?;
            let dexp = g.exp(dvec);
            let dcols = g.bcast_col(dexp, m)?;
            let dmat = g.mul(dcols, emask)?;
            scale.push(g.add(lower, dmat)?);
        }
        out.push(LayerQ { mean, scale });
    }
    Ok(out)
}

// ---- likelihood ------------------------------------------------------------

/// Sum over the batch of log p(y_i | f_i). `f` is the batch-by-outputs final
/// layer sample; `log_noise` must be the wired `lik.log_noise` for the
/// Gaussian likelihood and is ignored otherwise.
pub fn log_likelihood(
    g: &mut Graph,
    lik: &Likelihood,
    f: Var,
    y: &TargetBatch,
    log_noise: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "log_likelihood",
            details: format!("expected matrix of function values, got {shape:?}"),
        });
    }
    let (b, t) = (shape[0], shape[1]);

    match (lik, y) {
        (Likelihood::Gaussian, TargetBatch::Real(yd)) => {
            if yd.len() != b * t {
                return Err(Error::ShapeMismatch {
                    op: "log_likelihood",
                    details: format!("targets have {} values, expected {}", yd.len(), b * t),
                });
            }
            let log_noise = log_noise
                .ok_or_else(|| Error::Invalid("gaussian likelihood needs lik.log_noise".into()))?;
            let yc = g.constant(&[b, t], yd.to_vec());
            let diff = g.sub(yc, f)?;
            let sq = g.mul(diff, diff)?;
            let ssum = g.sum(sq);
            let neg_ln = g.neg(log_noise);
            let inv = g.exp(neg_ln);
            let quad = g.mul(ssum, inv)?;
            let quad = g.scale(quad, 0.5);
            let count = (b * t) as f64;
            let norm = g.scale(log_noise, 0.5 * count);
            let tot = g.add(quad, norm)?;
            let tot = g.add_scalar(tot, 0.5 * count * crate::kernels::LN_2PI);
            Ok(g.neg(tot))
        }
        (Likelihood::Categorical { classes }, TargetBatch::Classes(idx)) => {
            if t != *classes {
                return Err(Error::ShapeMismatch {
                    op: "log_likelihood",
                    details: format!("{t} logits per row but {classes} classes"),
                });
            }
            if idx.len() != b {
                return Err(Error::ShapeMismatch {
                    op: "log_likelihood",
                    details: format!("{} labels for batch of {b}", idx.len()),
                });
            }
            if let Some(bad) = idx.iter().find(|c| **c >= *classes) {
                return Err(Error::Invalid(format!("class label {bad} out of range")));
            }
            let picked = g.select_cols(f, idx)?;
            let norm = g.row_logsumexp(f)?;
            let picked_sum = g.sum(picked);
            let norm_sum = g.sum(norm);
            g.sub(picked_sum, norm_sum)
        }
        (Likelihood::GaussianMixture { weight, offset, sd0, sd1 }, TargetBatch::Real(yd)) => {
            if t != 1 {
                return Err(Error::ShapeMismatch {
                    op: "log_likelihood",
                    details: format!("mixture likelihood is univariate, got {t} outputs"),
                });
            }
            if yd.len() != b {
                return Err(Error::ShapeMismatch {
                    op: "log_likelihood",
                    details: format!("targets have {} values, expected {b}", yd.len()),
                });
            }
            let yc = g.constant(&[b, 1], yd.to_vec());
            let comp = |g: &mut Graph, f: Var, shift: f64, w: f64, sd: f64| -> Result<Var> {
                let fs = g.add_scalar(f, shift);
                let d = g.sub(yc, fs)?;
                let q = g.mul(d, d)?;
                let q = g.scale(q, -0.5 / (sd * sd));
                Ok(g.add_scalar(q, w.ln() - 0.5 * crate::kernels::LN_2PI - sd.ln()))
            };
            let la = comp(g, f, 0.0, *weight, *sd0)?;
            let lb = comp(g, f, *offset, 1.0 - *weight, *sd1)?;
            // log(e^a + e^b) = b + softplus(a - b), stable for either sign.
            let diff = g.sub(la, lb)?;
            let sp = g.softplus(diff);
            let per_row = g.add(lb, sp)?;
            Ok(g.sum(per_row))
        }
        _ => Err(Error::Invalid(
            "target kind does not match the likelihood".into(),
        )),
    }
}
