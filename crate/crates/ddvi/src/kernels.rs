//! Squared-exponential ARD kernel, jittered Cholesky and the zero-mean
//! Gaussian log density, all built on the tape so hyperparameter gradients
//! flow.
//!
//! Lengthscales and signal variance live in log space; callers hand in the
//! log-parameter leaves and everything here stays differentiable through
//! them as well as through the input locations.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tape::{Graph, Var};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Gram matrix of the ARD squared-exponential kernel:
/// k(a, b) = exp(log_sv) * exp(-0.5 * sum_d (a_d - b_d)^2 / l_d^2).
///
/// `a` is n_a x d, `b` is n_b x d, `log_ls` has length d, `log_sv` is scalar.
/// When `a` and `b` are the same node the diagonal is exactly exp(log_sv)
/// and the result is exactly symmetric.
pub fn rbf_gram(g: &mut Graph, a: Var, b: Var, log_ls: Var, log_sv: Var) -> Result<Var> {
    let (na, da) = match g.shape(a) {
        [n, d] => (*n, *d),
        _ => return Err(Error::Invalid("rbf_gram expects a matrix of rows".into())),
    };
    let (nb, db) = match g.shape(b) {
        [n, d] => (*n, *d),
        _ => return Err(Error::Invalid("rbf_gram expects a matrix of rows".into())),
    };
    let d = match g.shape(log_ls) {
        [d] => *d,
        _ => return Err(Error::Invalid("rbf_gram lengthscales must be a vector".into())),
    };
    if da != db || da != d {
        return Err(Error::Invalid(format!(
            "rbf_gram feature dims disagree: a {da}, b {db}, lengthscales {d}"
        )));
    }

    let neg_log_ls = g.neg(log_ls);
    let inv_ls = g.exp(neg_log_ls);
    let ls_row_a = g.bcast_row(inv_ls, na)?;
    let a_s = g.mul(a, ls_row_a)?;
    let b_s = if a == b {
        a_s
    } else {
        let ls_row_b = g.bcast_row(inv_ls, nb)?;
        g.mul(b, ls_row_b)?
    };

    let a_sq = g.mul(a_s, a_s)?;
    let ra = g.sum_cols(a_sq)?;
    let rb = if a == b {
        ra
    } else {
        let b_sq = g.mul(b_s, b_s)?;
        g.sum_cols(b_sq)?
    };

    let b_t = g.transpose(b_s)?;
    let cross = g.matmul(a_s, b_t)?;
    let ra_m = g.bcast_col(ra, nb)?;
    let rb_m = g.bcast_row(rb, na)?;
    let twice = g.scale(cross, 2.0);
    let sums = g.add(ra_m, rb_m)?;
    let d2 = g.sub(sums, twice)?;

    let expo = g.scale(d2, -0.5);
    let k01 = g.exp(expo);
    let sv = g.exp(log_sv);
    g.mul(k01, sv)
}

/// Cholesky factor of `k` plus the smallest jitter from the escalation
/// ladder `base, 10*base, ...` (capped at 1e-2) that makes it factor.
#[derive(Clone, Copy, Debug)]
pub struct JitteredChol {
    pub l: Var,
    pub jitter: f64,
}

pub const MAX_JITTER: f64 = 1e-2;

pub fn chol_with_jitter(g: &mut Graph, k: Var, base_jitter: f64) -> Result<JitteredChol> {
    let n = match g.shape(k) {
        [r, c] if r == c => *r,
        _ => return Err(Error::Invalid("chol_with_jitter expects a square matrix".into())),
    };
    if !(base_jitter > 0.0) {
        return Err(Error::Invalid(format!("jitter must be positive, got {base_jitter}")));
    }

    let mut jitter = base_jitter;
    loop {
        // Probe on raw values first so only the successful level ends up on
        // the tape.
        let mut probe = g.values(k).to_vec();
        for i in 0..n {
            probe[i * n + i] += jitter;
        }
        if linalg::cholesky_lower(&probe, n).is_some() {
            let shifted = g.add_diag(k, jitter)?;
            let l = g.cholesky(shifted)?;
            return Ok(JitteredChol { l, jitter });
        }
        if jitter >= MAX_JITTER {
            let diag: Vec<f64> = (0..n).map(|i| g.values(k)[i * n + i]).collect();
            let dmax = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(Error::CholeskyFailed {
                jitter,
                details: format!(
                    "{n}x{n} matrix stayed indefinite; diagonal range [{dmin:.3e}, {dmax:.3e}], \
                     condition roughly > {:.1e}",
                    dmax.abs().max(1.0) / jitter
                ),
            });
        }
        jitter *= 10.0;
    }
}

/// log N(u | 0, L L^T) where L is a Cholesky factor. A matrix `u` is treated
/// as independent columns and the column densities are summed.
pub fn gaussian_logpdf_zero_mean(g: &mut Graph, u: Var, l: Var) -> Result<Var> {
    let n = match g.shape(l) {
        [r, c] if r == c => *r,
        _ => return Err(Error::Invalid("gaussian_logpdf_zero_mean expects square L".into())),
    };
    let (rows, cols) = match g.shape(u) {
        [r] => (*r, 1usize),
        [r, c] => (*r, *c),
        _ => return Err(Error::Invalid("gaussian_logpdf_zero_mean expects vector or matrix u".into())),
    };
    if rows != n {
        return Err(Error::Invalid(format!(
            "gaussian_logpdf_zero_mean dimension mismatch: u has {rows} rows, L is {n}x{n}"
        )));
    }

    let w = g.tri_solve(l, u, false)?;
    let wsq = g.mul(w, w)?;
    let quad = g.sum(wsq);
    let diag = g.diag_part(l)?;
    let logdiag = g.log(diag);
    let half_logdet = g.sum(logdiag);

    let t1 = g.scale(quad, -0.5);
    let t2 = g.scale(half_logdet, -(cols as f64));
    let t = g.add(t1, t2)?;
    Ok(g.add_scalar(t, -0.5 * (cols * n) as f64 * LN_2PI))
}
