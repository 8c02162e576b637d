//! Variational objectives and the exact conjugate-model oracle.
//!
//! The diffusion bound draws inducing variables by simulating the learned
//! reverse SDE and scores the terminal draw under the deep GP prior, the
//! minibatch likelihood, the path divergence from the reference bridge, and
//! the fixed start density evaluated at the same terminal draw:
//!   total = prior + lik - l1 - fix.
//! The mean-field bound uses per-dimension Gaussian factors with a closed
//! form divergence from the layer priors. Both are Monte Carlo estimates
//! whose randomness is fully determined by the seed argument, with the
//! reduction over samples performed in sample order.

use std::collections::BTreeMap;

use crate::diffusion::{path_kl, simulate_reverse, DiffusionSchedule, Score};
use crate::error::{Error, Result};
use crate::gp::{propagate, dgp_prior_logp, PosteriorDraw};
use crate::kernels::{rbf_gram, LN_2PI};
use crate::linalg;
use crate::model::{
    var, wire_dsvi_q, wire_layers, wire_score, Architecture, LayerQ, Likelihood, TargetBatch,
};
use crate::rng::{self, stream};
use crate::tape::{Graph, Var};

/// One minibatch: row-major batch-by-feature inputs plus matched targets.
pub struct Batch<'a> {
    pub x: &'a [f64],
    pub rows: usize,
    pub y: TargetBatch<'a>,
}

impl Batch<'_> {
    fn x_const(&self, g: &mut Graph, input_dim: usize) -> Result<Var> {
        if self.rows == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if self.x.len() != self.rows * input_dim {
            return Err(Error::ShapeMismatch {
                op: "batch",
                details: format!(
                    "{} input values for {} rows of dim {input_dim}",
                    self.x.len(),
                    self.rows
                ),
            });
        }
        Ok(g.constant(&[self.rows, input_dim], self.x.to_vec()))
    }
}

/// Objective terms still on the tape; call `backward` on `total`.
pub struct ElboGraph {
    pub total: Var,
    pub prior: Var,
    pub lik: Var,
    pub l1: Var,
    pub fix: Var,
}

/// Scalar snapshot of the objective. `total` is assembled in the documented
/// order ((prior + lik) - l1) - fix, bit-identical to the graph value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    pub prior: f64,
    pub lik: f64,
    pub l1: f64,
    pub fix: f64,
    pub n_mc: usize,
}

impl ElboGraph {
    pub fn breakdown(&self, g: &Graph, n_mc: usize) -> ElboBreakdown {
        ElboBreakdown {
            total: g.scalar_value(self.total),
            prior: g.scalar_value(self.prior),
            lik: g.scalar_value(self.lik),
            l1: g.scalar_value(self.l1),
            fix: g.scalar_value(self.fix),
            n_mc,
        }
    }
}

/// log N(u | 0, sigma2 I) at a wired vector, differentiable in u.
fn log_p_fix(g: &mut Graph, u: Var, sigma2: f64) -> Var {
    let h = g.values(u).len() as f64;
    let sq = g.mul(u, u).expect("u is a vector");
    let ssum = g.sum(sq);
    let quad = g.scale(ssum, -0.5 / sigma2);
    g.add_scalar(quad, -0.5 * h * (LN_2PI + sigma2.ln()))
}

fn mc_average(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t).expect("scalar terms");
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Diffusion variational bound on the log marginal likelihood.
///
/// Each Monte Carlo sample runs one reverse simulation, propagates the batch
/// through the deep GP with a single fresh path sample, and accumulates the
/// four terms. The likelihood sum is scaled by n_total / batch.rows. All
/// randomness derives from `seed`; callers vary the seed per iteration.
#[allow(clippy::too_many_arguments)]
pub fn ddvi_elbo(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    arch: &Architecture,
    lik: &Likelihood,
    sched: &DiffusionSchedule,
    score_hidden: &[usize],
    batch: &Batch,
    n_total: usize,
    n_mc: usize,
    jitter: f64,
    seed: u64,
) -> Result<ElboGraph> {
    if n_mc == 0 {
        return Err(Error::Invalid("n_mc must be at least 1".into()));
    }
    if n_total < batch.rows {
        return Err(Error::Invalid(format!(
            "n_total {} smaller than batch {}",
            n_total, batch.rows
        )));
    }
    let x = batch.x_const(g, arch.input_dim)?;
    let layers = wire_layers(g, vars, arch, jitter)?;
    let net = wire_score(vars, arch, score_hidden)?;
    let score = Score::Net(&net);
    let log_noise = var(vars, "lik.log_noise").ok();
    let scale_lik = n_total as f64 / batch.rows as f64;
    let h = arch.flat_dim();

    let mut priors = Vec::with_capacity(n_mc);
    let mut liks = Vec::with_capacity(n_mc);
    let mut l1s = Vec::with_capacity(n_mc);
    let mut fixes = Vec::with_capacity(n_mc);

    for s in 0..n_mc {
        let si = s as u64;
        let mut sde_rng = rng::rng_for(seed, &[stream::ELBO, si, 0]);
        let traj = simulate_reverse(g, &score, sched, h, &mut sde_rng)?;
        let u = traj.terminal();
        let draw = PosteriorDraw::from_flat(g, u, arch.inducing, &arch.layer_dims)?;

        priors.push(dgp_prior_logp(g, &layers, &draw)?);

        let mut path_rng = rng::rng_for(seed, &[stream::ELBO, si, 1]);
        let eps: Vec<Var> = arch
            .layer_dims
            .iter()
            .map(|&d| {
                let e = rng::normal_vec(&mut path_rng, batch.rows * d);
                g.constant(&[batch.rows, d], e)
            })
            .collect();
        let outs = propagate(g, &layers, &draw, x, &eps)?;
        let f = *outs.last().unwrap();
        let ll = crate::model::log_likelihood(g, lik, f, &batch.y, log_noise)?;
        liks.push(g.scale(ll, scale_lik));

        l1s.push(path_kl(g, &traj, sched)?);
        fixes.push(log_p_fix(g, u, sched.sigma2));
    }

    let prior = mc_average(g, &priors);
    let lik_t = mc_average(g, &liks);
    let l1 = mc_average(g, &l1s);
    let fix = mc_average(g, &fixes);
    let data = g.add(prior, lik_t)?;
    let bound = g.sub(data, l1)?;
    let total = g.sub(bound, fix)?;

    if !g.scalar_value(total).is_finite() {
        return Err(Error::NonFinite("diffusion bound".into()));
    }
    Ok(ElboGraph {
        total,
        prior,
        lik: lik_t,
        l1,
        fix,
    })
}

// ---- mean-field baseline ---------------------------------------------------

pub struct DsviGraph {
    pub total: Var,
    pub lik: Var,
    pub kl: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsviBreakdown {
    pub total: f64,
    pub lik: f64,
    pub kl: f64,
    pub n_mc: usize,
}

impl DsviGraph {
    pub fn breakdown(&self, g: &Graph, n_mc: usize) -> DsviBreakdown {
        DsviBreakdown {
            total: g.scalar_value(self.total),
            lik: g.scalar_value(self.lik),
            kl: g.scalar_value(self.kl),
            n_mc,
        }
    }
}

/// Column d of a row-major rows-by-cols matrix as a column vector.
fn column(g: &mut Graph, m: Var, rows: usize, cols: usize, d: usize) -> Result<Var> {
    let t = g.transpose(m)?;
    let flat = g.reshape(t, &[rows * cols])?;
    let col = g.slice(flat, d * rows, rows)?;
    g.reshape(col, &[rows, 1])
}

/// Mean-field bound: reparameterized likelihood samples minus the closed
/// form divergence sum_{layer, dim} KL(N(m, L L^T) || N(0, K_ZZ)).
#[allow(clippy::too_many_arguments)]
/// One reparameterized draw of all inducing variables from the mean-field
/// posterior: per dimension m_d + L_d eps, assembled into the same [M, D]
/// per-layer and flat layouts the prior uses.
pub fn dsvi_sample(
    g: &mut Graph,
    q: &[LayerQ],
    arch: &Architecture,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PosteriorDraw> {
    let m = arch.inducing;
    let mut layer_draws = Vec::with_capacity(q.len());
    for (i, lq) in q.iter().enumerate() {
        let d_out = arch.layer_dims[i];
        let mut cols = Vec::with_capacity(d_out);
        for d in 0..d_out {
            let e = rng::normal_vec(rng, m);
            let e = g.constant(&[m, 1], e);
            let le = g.matmul(lq.scale[d], e)?;
            let mc = column(g, lq.mean, m, d_out, d)?;
            let col = g.add(mc, le)?;
            cols.push(g.reshape(col, &[m])?);
        }
        let stacked = g.concat(&cols)?;
        let bycol = g.reshape(stacked, &[d_out, m])?;
        layer_draws.push(g.transpose(bycol)?);
    }
    let flat_parts: Vec<Var> = layer_draws
        .iter()
        .zip(&arch.layer_dims)
        .map(|(&u, &d)| g.reshape(u, &[m * d]))
        .collect::<Result<_>>()?;
    let flat = g.concat(&flat_parts)?;
    Ok(PosteriorDraw {
        flat,
        layers: layer_draws,
    })
}

pub fn dsvi_elbo(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    arch: &Architecture,
    lik: &Likelihood,
    batch: &Batch,
    n_total: usize,
    n_mc: usize,
    jitter: f64,
    seed: u64,
) -> Result<DsviGraph> {
    if n_mc == 0 {
        return Err(Error::Invalid("n_mc must be at least 1".into()));
    }
    let x = batch.x_const(g, arch.input_dim)?;
    let layers = wire_layers(g, vars, arch, jitter)?;
    let q = wire_dsvi_q(g, vars, arch)?;
    let log_noise = var(vars, "lik.log_noise").ok();
    let scale_lik = n_total as f64 / batch.rows as f64;
    let m = arch.inducing;

    // Closed-form divergence: 0.5 (tr(K^-1 S) + m^T K^-1 m - M
    // + logdet K - logdet S) per layer and output dimension.
    let mut kl_acc: Option<Var> = None;
    for (layer, lq) in layers.iter().zip(&q) {
        let d_out = lq.scale.len();
        let lk = layer.chol.l;
        let dk = g.diag_part(lk)?;
        let ldk = g.log(dk);
        let ldk_sum = g.sum(ldk);
        for d in 0..d_out {
            let ls = lq.scale[d];
            let a = g.tri_solve(lk, ls, false)?;
            let aa = g.mul(a, a)?;
            let trace = g.sum(aa);

            let mc = column(g, lq.mean, m, d_out, d)?;
            let w = g.tri_solve(lk, mc, false)?;
            let ww = g.mul(w, w)?;
            let quad = g.sum(ww);

            let ds = g.diag_part(ls)?;
            let lds = g.log(ds);
            let lds_sum = g.sum(lds);

            let logdets = g.sub(ldk_sum, lds_sum)?;
            let logdets = g.scale(logdets, 2.0);
            let t1 = g.add(trace, quad)?;
            let t2 = g.add(t1, logdets)?;
            let t3 = g.add_scalar(t2, -(m as f64));
            let kl_d = g.scale(t3, 0.5);
            kl_acc = Some(match kl_acc {
                None => kl_d,
                Some(acc) => g.add(acc, kl_d)?,
            });
        }
    }
    let kl = kl_acc.expect("at least one layer");

    let mut liks = Vec::with_capacity(n_mc);
    for s in 0..n_mc {
        let si = s as u64;
        let mut u_rng = rng::rng_for(seed, &[stream::ELBO, si, 0]);
        let draw = dsvi_sample(g, &q, arch, &mut u_rng)?;

        let mut path_rng = rng::rng_for(seed, &[stream::ELBO, si, 1]);
        let eps: Vec<Var> = arch
            .layer_dims
            .iter()
            .map(|&d| {
                let e = rng::normal_vec(&mut path_rng, batch.rows * d);
                g.constant(&[batch.rows, d], e)
            })
            .collect();
        let outs = propagate(g, &layers, &draw, x, &eps)?;
        let f = *outs.last().unwrap();
        let ll = crate::model::log_likelihood(g, lik, f, &batch.y, log_noise)?;
        liks.push(g.scale(ll, scale_lik));
    }
    let lik_t = mc_average(g, &liks);
    let total = g.sub(lik_t, kl)?;

    if !g.scalar_value(total).is_finite() {
        return Err(Error::NonFinite("mean-field bound".into()));
    }
    Ok(DsviGraph {
        total,
        lik: lik_t,
        kl,
    })
}

// ---- exact conjugate oracle ------------------------------------------------

/// Exact posterior over the inducing variables of a single-layer, single-
/// output GP regression model, plus the dense-model log marginal likelihood.
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub log_marginal: f64,
}

/// Dense kernel matrix between two point sets as host values; shared by the
/// exact oracle and external verification tooling.
pub fn gram_host(
    a: &[f64],
    ra: usize,
    b: &[f64],
    rb: usize,
    d: usize,
    log_ls: &[f64],
    log_sv: f64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let av = g.constant(&[ra, d], a.to_vec());
    let ls = g.constant(&[d], log_ls.to_vec());
    let sv = g.constant(&[], vec![log_sv]);
    let k = if std::ptr::eq(a, b) && ra == rb {
        rbf_gram(&mut g, av, av, ls, sv)?
    } else {
        let bv = g.constant(&[rb, d], b.to_vec());
        rbf_gram(&mut g, av, bv, ls, sv)?
    };
    Ok(g.values(k).to_vec())
}

/// Conjugate-model oracle, computed densely and independently of the
/// variational machinery. With A = K_XZ K_ZZ^-1 and
/// C = K_XX - A K_ZX + noise I:
///   covariance = (K_ZZ^-1 + A^T C^-1 A)^-1,
///   mean       = covariance A^T C^-1 y,
///   log_marginal = log N(y | 0, K_XX + noise I).
/// `jitter` is added to K_ZZ, matching the stabilization the sampled model
/// applies to the same gram matrix.
#[allow(clippy::too_many_arguments)]
pub fn exact_gaussian_posterior(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[f64],
    z: &[f64],
    m: usize,
    log_ls: &[f64],
    log_sv: f64,
    noise_var: f64,
    jitter: f64,
) -> Result<ExactPosterior> {
    if x.len() != n * d || z.len() != m * d || y.len() != n {
        return Err(Error::Invalid("exact posterior shape mismatch".into()));
    }
    if noise_var <= 0.0 {
        return Err(Error::Invalid("noise variance must be positive".into()));
    }
    let mut kzz = gram_host(z, m, z, m, d, log_ls, log_sv)?;
    for i in 0..m {
        kzz[i * m + i] += jitter;
    }
    let kxx = gram_host(x, n, x, n, d, log_ls, log_sv)?;
    let kxz = gram_host(x, n, z, m, d, log_ls, log_sv)?;
    let kzx = linalg::transpose(&kxz, n, m);

    // A = K_XZ K_ZZ^-1 via A^T = K_ZZ^-1 K_ZX.
    let at = linalg::spd_solve(&kzz, &kzx, m, n)
        .ok_or_else(|| Error::CholeskyFailed { jitter, details: "inducing gram".into() })?;
    let a = linalg::transpose(&at, m, n);

    let mut c = vec![0.0; n * n];
    let akzx = linalg::matmul(&a, &kzx, n, m, n);
    for i in 0..n * n {
        c[i] = kxx[i] - akzx[i];
    }
    for i in 0..n {
        c[i * n + i] += noise_var;
    }

    let cinv_a = linalg::spd_solve(&c, &a, n, m)
        .ok_or_else(|| Error::CholeskyFailed { jitter, details: "conditional covariance".into() })?;
    let at_cinv_a = linalg::matmul(&at, &cinv_a, m, n, m);
    let kzz_inv = linalg::spd_inverse(&kzz, m)
        .ok_or_else(|| Error::CholeskyFailed { jitter, details: "inducing gram".into() })?;
    let mut prec = vec![0.0; m * m];
    for i in 0..m * m {
        prec[i] = kzz_inv[i] + at_cinv_a[i];
    }
    let covariance = linalg::spd_inverse(&prec, m)
        .ok_or_else(|| Error::CholeskyFailed { jitter, details: "posterior precision".into() })?;

    let cinv_y = linalg::spd_solve(&c, y, n, 1)
        .ok_or_else(|| Error::CholeskyFailed { jitter, details: "conditional covariance".into() })?;
    let at_cinv_y = linalg::matmul(&at, &cinv_y, m, n, 1);
    let mean = linalg::matmul(&covariance, &at_cinv_y, m, m, 1);

    let mut ky = kxx;
    for i in 0..n {
        ky[i * n + i] += noise_var;
    }
    let log_marginal = linalg::gaussian_logpdf_dense(y, &ky, n)
        .ok_or_else(|| Error::CholeskyFailed { jitter: 0.0, details: "dense marginal covariance".into() })?;

    Ok(ExactPosterior {
        mean,
        covariance,
        log_marginal,
    })
}
