//! Sparse GP layers: conditional moments given inducing variables,
//! reparameterized sampling through a stack of layers, and the prior density
//! of the inducing variables themselves.
//!
//! Only marginal (diagonal) conditional variances are propagated; every
//! sample path is differentiable end to end, including through the kernel
//! hyperparameters and inducing inputs.

use crate::error::{Error, Result};
use crate::kernels::{self, JitteredChol};
use crate::tape::{Graph, Var};

/// Conditional variances are clamped here before the square root.
pub const VAR_FLOOR: f64 = 1e-12;

/// Per-layer pieces that depend only on parameters, built once per graph and
/// shared by every sample and by the prior.
#[derive(Clone, Copy)]
pub struct LayerGraph {
    pub z: Var,
    pub log_ls: Var,
    pub log_sv: Var,
    pub chol: JitteredChol,
}

pub fn build_layer(
    g: &mut Graph,
    z: Var,
    log_ls: Var,
    log_sv: Var,
    base_jitter: f64,
) -> Result<LayerGraph> {
    let kzz = kernels::rbf_gram(g, z, z, log_ls, log_sv)?;
    let chol = kernels::chol_with_jitter(g, kzz, base_jitter)?;
    Ok(LayerGraph {
        z,
        log_ls,
        log_sv,
        chol,
    })
}

/// One draw of all inducing variables, flattened to a single vector with
/// per-layer matrix views. The flat layout is the row-major entries of each
/// layer's M x D_l matrix, layers in order.
pub struct PosteriorDraw {
    pub flat: Var,
    pub layers: Vec<Var>,
}

impl PosteriorDraw {
    pub fn from_flat(g: &mut Graph, flat: Var, m: usize, layer_dims: &[usize]) -> Result<Self> {
        let h: usize = layer_dims.iter().map(|d| m * d).sum();
        match g.shape(flat) {
            [n] if *n == h => {}
            other => {
                return Err(Error::Invalid(format!(
                    "flat draw has shape {other:?}, expected [{h}] for m={m} dims={layer_dims:?}"
                )))
            }
        }
        let mut layers = Vec::with_capacity(layer_dims.len());
        let mut off = 0;
        for &d in layer_dims {
            let chunk = g.slice(flat, off, m * d)?;
            layers.push(g.reshape(chunk, &[m, d])?);
            off += m * d;
        }
        Ok(PosteriorDraw { flat, layers })
    }
}

/// Mean (B x D) and marginal variance (length B, shared across output dims)
/// of the layer outputs at `x` given inducing values `u`.
pub fn conditional_moments(
    g: &mut Graph,
    layer: &LayerGraph,
    x: Var,
    u: Var,
) -> Result<(Var, Var)> {
    let b = match g.shape(x) {
        [b, _] => *b,
        _ => return Err(Error::Invalid("conditional_moments expects x as a matrix".into())),
    };
    let l = layer.chol.l;

    let k_fz = kernels::rbf_gram(g, x, layer.z, layer.log_ls, layer.log_sv)?;

    let w1 = g.tri_solve(l, u, false)?;
    let alpha = g.tri_solve(l, w1, true)?;
    let mean = g.matmul(k_fz, alpha)?;

    let k_zf = g.transpose(k_fz)?;
    let w = g.tri_solve(l, k_zf, false)?;
    let wsq = g.mul(w, w)?;
    let nystrom = g.sum_rows(wsq)?;

    let sv = g.exp(layer.log_sv);
    let ones = g.constant(&[b], vec![1.0; b]);
    let prior_diag = g.mul(ones, sv)?;
    let var_raw = g.sub(prior_diag, nystrom)?;
    let var = g.clamp_min(var_raw, VAR_FLOOR);
    Ok((mean, var))
}

/// mean + sqrt(var) * eps, with `eps` a B x D constant of standard normals.
pub fn sample_layer(
    g: &mut Graph,
    layer: &LayerGraph,
    x: Var,
    u: Var,
    eps: Var,
) -> Result<Var> {
    let (mean, var) = conditional_moments(g, layer, x, u)?;
    let d = g.shape(mean)[1];
    let sd = g.sqrt(var);
    let sd_m = g.bcast_col(sd, d)?;
    let noise = g.mul(sd_m, eps)?;
    g.add(mean, noise)
}

/// Pushes a batch through every layer, one fresh eps per layer, returning
/// all layer outputs (the last is the function values for the likelihood).
pub fn propagate(
    g: &mut Graph,
    layers: &[LayerGraph],
    draw: &PosteriorDraw,
    x: Var,
    eps: &[Var],
) -> Result<Vec<Var>> {
    if layers.len() != draw.layers.len() || layers.len() != eps.len() {
        return Err(Error::Invalid(format!(
            "propagate arity mismatch: {} layers, {} draws, {} noise blocks",
            layers.len(),
            draw.layers.len(),
            eps.len()
        )));
    }
    let mut f = x;
    let mut outs = Vec::with_capacity(layers.len());
    for ((layer, &u), &e) in layers.iter().zip(&draw.layers).zip(eps) {
        f = sample_layer(g, layer, f, u, e)?;
        outs.push(f);
    }
    Ok(outs)
}

/// Sum over layers and output dims of log N(u_{l,d} | 0, K_ZZ^l).
pub fn dgp_prior_logp(g: &mut Graph, layers: &[LayerGraph], draw: &PosteriorDraw) -> Result<Var> {
    if layers.len() != draw.layers.len() {
        return Err(Error::Invalid("dgp_prior_logp arity mismatch".into()));
    }
    let mut total: Option<Var> = None;
    for (layer, &u) in layers.iter().zip(&draw.layers) {
        let lp = kernels::gaussian_logpdf_zero_mean(g, u, layer.chol.l)?;
        total = Some(match total {
            None => lp,
            Some(t) => g.add(t, lp)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("dgp_prior_logp needs at least one layer".into()))
}
