//! Posterior predictive sampling and held-out metrics from a checkpoint.
//!
//! Evaluation replays the stored feature normalization and projection, then
//! draws latent function values by the same mechanism training used: the
//! reverse diffusion for the diffusion posterior, reparameterized factor
//! draws for the mean-field one. Densities are computed in normalized
//! target space and shifted by the stored scale, so reported likelihoods
//! refer to the raw targets.

use crate::diffusion::{simulate_reverse, DiffusionSchedule, Score};
use crate::elbo::dsvi_sample;
use crate::error::{Error, Result};
use crate::gp::{propagate, PosteriorDraw};
use crate::kernels::LN_2PI;
use crate::model::{wire_dsvi_q, wire_layers, wire_score, Method, Trainable};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TaskKind;
use crate::pipeline::data::{Dataset, Targets};
use crate::pipeline::train::{likelihood_from_checkpoint, restore_transforms};
use crate::rng::{self, stream};
use crate::tape::Graph;

/// Monte Carlo draws of the latent outputs at a set of inputs, in
/// normalized target space. `samples` is laid out [draw][row][output].
pub struct Prediction {
    pub samples: Vec<f64>,
    pub n_samples: usize,
    pub rows: usize,
    pub out_dim: usize,
    /// Per (row, output) mean over draws.
    pub mean: Vec<f64>,
    /// Per (row, output) population variance over draws.
    pub variance: Vec<f64>,
    /// Draw-averaged softmax per (row, class); classification only.
    pub probs: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMetrics {
    Regression { rmse: f64, nll: f64 },
    Classification { accuracy: f64, nll: f64, auc: Option<f64> },
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Draw latent outputs at `x_model` (already normalized and projected,
/// `rows` by the model input dimension). Draw k uses streams
/// (seed, PREDICT, k, 0) for inducing variables and (seed, PREDICT, k, 1)
/// for the propagation noise, independent of the training streams.
pub fn predict(
    cp: &Checkpoint,
    x_model: &[f64],
    rows: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Prediction> {
    if n_samples == 0 {
        return Err(Error::Invalid("need at least one predictive sample".into()));
    }
    let (cfg, lik) = likelihood_from_checkpoint(cp)?;
    let classes = cp.scalar("meta.classes").unwrap_or(0.0) as usize;
    let out_dim = if classes > 0 { classes } else { cfg.n_targets };
    if rows == 0 || x_model.len() % rows != 0 {
        return Err(Error::Invalid(format!(
            "{} feature values do not fill {rows} rows",
            x_model.len()
        )));
    }
    let input_dim = x_model.len() / rows;
    let arch = cfg.architecture(input_dim, out_dim)?;
    lik.validate()?;
    let store = cp.param_store();
    let h = arch.flat_dim();

    let mut samples = Vec::with_capacity(n_samples * rows * out_dim);
    for k in 0..n_samples {
        // Fresh graph per draw keeps peak memory at one trajectory.
        let mut g = Graph::new();
        let vars = store.wire(&mut g, Trainable::All);
        let layers = wire_layers(&mut g, &vars, &arch, cfg.jitter)?;
        let x = g.constant(&[rows, input_dim], x_model.to_vec());

        let mut u_rng = rng::rng_for(seed, &[stream::PREDICT, k as u64, 0]);
        let draw = match cfg.method {
            Method::Ddvi => {
                let sched =
                    DiffusionSchedule::new(cfg.lambda, cfg.g, cfg.sigma2, cfg.t_end, cfg.steps)?;
                let net = wire_score(&vars, &arch, &cfg.score_hidden)?;
                let traj = simulate_reverse(&mut g, &Score::Net(&net), &sched, h, &mut u_rng)?;
                PosteriorDraw::from_flat(&mut g, traj.terminal(), arch.inducing, &arch.layer_dims)?
            }
            Method::Dsvi => {
                let q = wire_dsvi_q(&mut g, &vars, &arch)?;
                dsvi_sample(&mut g, &q, &arch, &mut u_rng)?
            }
        };

        let mut path_rng = rng::rng_for(seed, &[stream::PREDICT, k as u64, 1]);
        let eps: Vec<_> = arch
            .layer_dims
            .iter()
            .map(|&d| {
                let e = rng::normal_vec(&mut path_rng, rows * d);
                g.constant(&[rows, d], e)
            })
            .collect();
        let outs = propagate(&mut g, &layers, &draw, x, &eps)?;
        let f = g.values(*outs.last().unwrap());
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("predictive draw {k}")));
        }
        samples.extend_from_slice(f);
    }

    let per = rows * out_dim;
    let kf = n_samples as f64;
    let mut mean = vec![0.0; per];
    for k in 0..n_samples {
        for i in 0..per {
            mean[i] += samples[k * per + i];
        }
    }
    for m in mean.iter_mut() {
        *m /= kf;
    }
    let mut variance = vec![0.0; per];
    for k in 0..n_samples {
        for i in 0..per {
            let d = samples[k * per + i] - mean[i];
            variance[i] += d * d;
        }
    }
    for v in variance.iter_mut() {
        *v /= kf;
    }

    let probs = (classes > 0).then(|| {
        let mut p = vec![0.0; rows * classes];
        let mut row = vec![0.0; classes];
        for k in 0..n_samples {
            for i in 0..rows {
                let logits = &samples[k * per + i * classes..k * per + (i + 1) * classes];
                softmax_row(logits, &mut row);
                for c in 0..classes {
                    p[i * classes + c] += row[c] / kf;
                }
            }
        }
        p
    });

    Ok(Prediction {
        samples,
        n_samples,
        rows,
        out_dim,
        mean,
        variance,
        probs,
    })
}

/// Full evaluation path: normalize raw features with the stored statistics,
/// project, draw, and score against the raw targets.
pub fn evaluate(
    cp: &Checkpoint,
    ds: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<(Prediction, EvalMetrics)> {
    let (cfg, lik) = likelihood_from_checkpoint(cp)?;
    let (norm, pca) = restore_transforms(cp)?;
    if ds.d != norm.feat_min.len() {
        return Err(Error::Invalid(format!(
            "data has {} features, checkpoint expects {}",
            ds.d,
            norm.feat_min.len()
        )));
    }
    match (&cfg.task, &ds.targets) {
        (TaskKind::Regression, Targets::Real { .. })
        | (TaskKind::Classification, Targets::Labels { .. }) => {}
        _ => return Err(Error::Invalid("dataset targets do not match the trained task".into())),
    }
    let x_norm = norm.apply_features(&ds.x, ds.n);
    let x_model = match &pca {
        Some(p) => p.apply(&x_norm, ds.n),
        None => x_norm,
    };
    let pred = predict(cp, &x_model, ds.n, n_samples, seed)?;

    let metrics = match &ds.targets {
        Targets::Real { y, per_row } => {
            if *per_row != pred.out_dim {
                return Err(Error::Invalid(format!(
                    "data has {per_row} targets per row, model predicts {}",
                    pred.out_dim
                )));
            }
            let noise_var = match lik {
                crate::model::Likelihood::Gaussian => Some(cp.scalar("lik.log_noise")?.exp()),
                _ => None,
            };
            regression_metrics(&pred, &lik, noise_var, &norm.y_mean, &norm.y_std, y)?
        }
        Targets::Labels { y, .. } => classification_metrics(&pred, y)?,
    };
    Ok((pred, metrics))
}

/// Raw-space squared error of the de-normalized predictive mean, plus the
/// negative log predictive density
///   -log (1/K) sum_k p(y_norm | f_k) + sum_j log y_std_j
/// averaged over rows; the additive term converts the normalized density to
/// a raw-target density.
pub fn regression_metrics(
    pred: &Prediction,
    lik: &crate::model::Likelihood,
    noise_var: Option<f64>,
    y_mean: &[f64],
    y_std: &[f64],
    y_raw: &[f64],
) -> Result<EvalMetrics> {
    use crate::model::Likelihood;
    let (rows, t, k) = (pred.rows, pred.out_dim, pred.n_samples);
    if y_mean.len() != t || y_std.len() != t {
        return Err(Error::Invalid(format!(
            "target statistics cover {} outputs, prediction has {t}",
            y_mean.len()
        )));
    }
    if y_raw.len() != rows * t {
        return Err(Error::Invalid(format!(
            "{} target values do not fill {rows} rows of {t}",
            y_raw.len()
        )));
    }
    let log_c: f64 = y_std.iter().map(|s| s.ln()).sum();

    let mut sse = 0.0;
    let mut nll_sum = 0.0;
    let mut lks = vec![0.0; k];
    for i in 0..rows {
        for j in 0..t {
            let f_raw = pred.mean[i * t + j] * y_std[j] + y_mean[j];
            let d = f_raw - y_raw[i * t + j];
            sse += d * d;
        }
        for (s, lk) in lks.iter_mut().enumerate() {
            let mut lp = 0.0;
            for j in 0..t {
                let yn = (y_raw[i * t + j] - y_mean[j]) / y_std[j];
                let f = pred.samples[s * rows * t + i * t + j];
                lp += match lik {
                    Likelihood::Gaussian => {
                        let v = noise_var
                            .ok_or_else(|| Error::Invalid("missing observation noise".into()))?;
                        let d = yn - f;
                        -0.5 * (LN_2PI + v.ln()) - d * d / (2.0 * v)
                    }
                    Likelihood::GaussianMixture { weight, offset, sd0, sd1 } => {
                        let comp = |mu: f64, sd: f64| {
                            let d = yn - mu;
                            -0.5 * (LN_2PI + 2.0 * sd.ln()) - d * d / (2.0 * sd * sd)
                        };
                        logsumexp(&[
                            weight.ln() + comp(f, *sd0),
                            (1.0 - weight).ln() + comp(f + offset, *sd1),
                        ])
                    }
                    Likelihood::Categorical { .. } => {
                        return Err(Error::Invalid(
                            "categorical likelihood has no real-valued density".into(),
                        ))
                    }
                };
            }
            *lk = lp;
        }
        nll_sum -= logsumexp(&lks) - (k as f64).ln() - log_c;
    }
    Ok(EvalMetrics::Regression {
        rmse: (sse / (rows * t) as f64).sqrt(),
        nll: nll_sum / rows as f64,
    })
}

/// Accuracy and negative log probability of the draw-averaged class
/// probabilities, plus the rank-based area under the ROC curve for binary
/// problems (ties get average ranks).
pub fn classification_metrics(pred: &Prediction, y: &[usize]) -> Result<EvalMetrics> {
    let probs = pred
        .probs
        .as_ref()
        .ok_or_else(|| Error::Invalid("prediction carries no class probabilities".into()))?;
    let (rows, c) = (pred.rows, pred.out_dim);
    if y.len() != rows {
        return Err(Error::Invalid(format!("{} labels for {rows} rows", y.len())));
    }
    let mut correct = 0usize;
    let mut nll_sum = 0.0;
    for i in 0..rows {
        let row = &probs[i * c..(i + 1) * c];
        if y[i] >= c {
            return Err(Error::Invalid(format!("label {} outside {c} classes", y[i])));
        }
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if arg == y[i] {
            correct += 1;
        }
        nll_sum -= row[y[i]].ln();
    }
    let auc = (c == 2).then(|| binary_auc(probs, y, c)).flatten();
    Ok(EvalMetrics::Classification {
        accuracy: correct as f64 / rows as f64,
        nll: nll_sum / rows as f64,
        auc,
    })
}

fn binary_auc(probs: &[f64], y: &[usize], c: usize) -> Option<f64> {
    let scores: Vec<f64> = (0..y.len()).map(|i| probs[i * c + 1]).collect();
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks across tied scores, then the Mann-Whitney identity.
    let mut rank = vec![0.0; y.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            rank[o] = avg;
        }
        i = j + 1;
    }
    let rank_pos: f64 = (0..y.len()).filter(|&i| y[i] == 1).map(|i| rank[i]).sum();
    let u = rank_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Flat inducing-variable draws from the posterior, one row of length
/// `flat_dim` per requested sample; same streams as `predict`.
pub fn sample_inducing(cp: &Checkpoint, n: usize, seed: u64) -> Result<(Vec<f64>, usize)> {
    let (cfg, _) = likelihood_from_checkpoint(cp)?;
    let classes = cp.scalar("meta.classes").unwrap_or(0.0) as usize;
    let out_dim = if classes > 0 { classes } else { cfg.n_targets };
    let input_dim = match cp.arrays.get("pca.components") {
        Some(t) => t.shape[0],
        None => cp.get("norm.feat_min")?.data.len(),
    };
    let arch = cfg.architecture(input_dim, out_dim)?;
    let store = cp.param_store();
    let h = arch.flat_dim();

    let mut out = Vec::with_capacity(n * h);
    for k in 0..n {
        let mut g = Graph::new();
        let vars = store.wire(&mut g, Trainable::All);
        let mut u_rng = rng::rng_for(seed, &[stream::PREDICT, k as u64, 0]);
        let flat = match cfg.method {
            Method::Ddvi => {
                let sched =
                    DiffusionSchedule::new(cfg.lambda, cfg.g, cfg.sigma2, cfg.t_end, cfg.steps)?;
                let net = wire_score(&vars, &arch, &cfg.score_hidden)?;
                let traj = simulate_reverse(&mut g, &Score::Net(&net), &sched, h, &mut u_rng)?;
                traj.terminal()
            }
            Method::Dsvi => {
                let q = wire_dsvi_q(&mut g, &vars, &arch)?;
                dsvi_sample(&mut g, &q, &arch, &mut u_rng)?.flat
            }
        };
        out.extend_from_slice(g.values(flat));
    }
    Ok((out, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Likelihood;
    use crate::pipeline::config::TrainConfig;
    use crate::pipeline::train::{self, CHECKPOINT_FILE, TEST_SPLIT_FILE};
    use crate::pipeline::{checkpoint, data};

    fn constant_prediction(rows: usize, t: usize, values: &[f64]) -> Prediction {
        Prediction {
            samples: values.to_vec(),
            n_samples: 1,
            rows,
            out_dim: t,
            mean: values.to_vec(),
            variance: vec![0.0; rows * t],
            probs: None,
        }
    }

    #[test]
    fn perfect_mean_gives_zero_rmse() {
        let y = [1.0, -2.0, 0.5];
        let pred = constant_prediction(3, 1, &y);
        let m = regression_metrics(&pred, &Likelihood::Gaussian, Some(0.25), &[0.0], &[1.0], &y)
            .unwrap();
        match m {
            EvalMetrics::Regression { rmse, nll } => {
                assert_eq!(rmse, 0.0);
                // Exact density at the mean of N(y, 0.25).
                let want = 0.5 * (LN_2PI + 0.25f64.ln());
                assert!((nll - want).abs() < 1e-12);
            }
            _ => panic!("wrong metric kind"),
        }
    }

    #[test]
    fn two_sample_predictive_mixes_densities() {
        // Draws at f = 0 and f = 2, observation y = 0, unit stats.
        let pred = Prediction {
            samples: vec![0.0, 2.0],
            n_samples: 2,
            rows: 1,
            out_dim: 1,
            mean: vec![1.0],
            variance: vec![1.0],
            probs: None,
        };
        let v: f64 = 0.5;
        let m =
            regression_metrics(&pred, &Likelihood::Gaussian, Some(v), &[0.0], &[1.0], &[0.0])
                .unwrap();
        let lp0 = -0.5 * (LN_2PI + v.ln());
        let lp1 = -0.5 * (LN_2PI + v.ln()) - 4.0 / (2.0 * v);
        let want = -(((lp0.exp() + lp1.exp()) / 2.0).ln());
        match m {
            EvalMetrics::Regression { nll, .. } => assert!((nll - want).abs() < 1e-12),
            _ => panic!("wrong metric kind"),
        }
    }

    #[test]
    fn target_scaling_shifts_density_and_rescales_rmse() {
        let pred = constant_prediction(2, 1, &[0.0, 1.0]);
        // Raw targets produced by de-normalizing [0, 1] with std 3, mean 5.
        let y_raw = [5.0, 8.0];
        let with_scale = regression_metrics(
            &pred,
            &Likelihood::Gaussian,
            Some(1.0),
            &[5.0],
            &[3.0],
            &y_raw,
        )
        .unwrap();
        let unit = regression_metrics(
            &pred,
            &Likelihood::Gaussian,
            Some(1.0),
            &[0.0],
            &[1.0],
            &[0.0, 1.0],
        )
        .unwrap();
        match (with_scale, unit) {
            (
                EvalMetrics::Regression { rmse: r1, nll: n1 },
                EvalMetrics::Regression { rmse: r0, nll: n0 },
            ) => {
                assert_eq!(r1, 0.0);
                assert_eq!(r0, 0.0);
                assert!((n1 - (n0 + 3.0f64.ln())).abs() < 1e-12);
            }
            _ => panic!("wrong metric kind"),
        }
    }

    #[test]
    fn mixture_density_uses_both_components() {
        let lik = Likelihood::GaussianMixture {
            weight: 0.5,
            offset: 2.0,
            sd0: 1.0,
            sd1: 1.0,
        };
        // One draw at f = 0; y sits exactly on the second mode.
        let pred = constant_prediction(1, 1, &[0.0]);
        let m = regression_metrics(&pred, &lik, None, &[0.0], &[1.0], &[2.0]).unwrap();
        let comp = |d: f64| -0.5 * LN_2PI - d * d / 2.0;
        let want = -logsumexp(&[0.5f64.ln() + comp(2.0), 0.5f64.ln() + comp(0.0)]);
        match m {
            EvalMetrics::Regression { nll, .. } => assert!((nll - want).abs() < 1e-12),
            _ => panic!("wrong metric kind"),
        }
    }

    fn probs_prediction(rows: usize, c: usize, probs: Vec<f64>) -> Prediction {
        Prediction {
            samples: vec![0.0; rows * c],
            n_samples: 1,
            rows,
            out_dim: c,
            mean: vec![0.0; rows * c],
            variance: vec![0.0; rows * c],
            probs: Some(probs),
        }
    }

    #[test]
    fn classification_metrics_count_and_rank() {
        let pred = probs_prediction(
            4,
            2,
            vec![0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.4, 0.6],
        );
        let m = classification_metrics(&pred, &[0, 0, 1, 1]).unwrap();
        match m {
            EvalMetrics::Classification { accuracy, nll, auc } => {
                assert_eq!(accuracy, 1.0);
                let want = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln()) / 4.0;
                assert!((nll - want).abs() < 1e-12);
                // Positive scores 0.7, 0.6 both above negatives 0.1, 0.2.
                assert_eq!(auc, Some(1.0));
            }
            _ => panic!("wrong metric kind"),
        }
    }

    #[test]
    fn auc_with_fully_tied_scores_is_half() {
        let pred = probs_prediction(4, 2, vec![0.5; 8]);
        match classification_metrics(&pred, &[0, 1, 0, 1]).unwrap() {
            EvalMetrics::Classification { auc, .. } => assert_eq!(auc, Some(0.5)),
            _ => panic!("wrong metric kind"),
        }
    }

    #[test]
    fn auc_absent_beyond_two_classes_or_one_sided_labels() {
        let pred3 = probs_prediction(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        match classification_metrics(&pred3, &[2, 0]).unwrap() {
            EvalMetrics::Classification { auc, .. } => assert_eq!(auc, None),
            _ => panic!("wrong metric kind"),
        }
        let pred2 = probs_prediction(2, 2, vec![0.9, 0.1, 0.8, 0.2]);
        match classification_metrics(&pred2, &[0, 0]).unwrap() {
            EvalMetrics::Classification { auc, .. } => assert_eq!(auc, None),
            _ => panic!("wrong metric kind"),
        }
    }

    fn trained_checkpoint(dir: &std::path::Path) -> checkpoint::Checkpoint {
        let n = 24;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 4.0 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        let ds = data::Dataset {
            x,
            n,
            d: 1,
            targets: data::Targets::Real { y, per_row: 1 },
            name: "line".into(),
        };
        let mut cfg = TrainConfig::default();
        cfg.layers = 1;
        cfg.inducing = 4;
        cfg.score_hidden = vec![8];
        cfg.batch = 16;
        cfg.iterations = 30;
        cfg.n_mc = 1;
        cfg.steps = 5;
        cfg.checkpoint_every = 30;
        train::train(&cfg, &ds, dir, None).unwrap();
        checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap()
    }

    #[test]
    fn end_to_end_eval_is_deterministic_and_finite() {
        let dir = tempfile::tempdir().unwrap();
        let cp = trained_checkpoint(dir.path());
        let held = data::load_csv(&dir.path().join(TEST_SPLIT_FILE), false, 1, false).unwrap();
        let (p1, m1) = evaluate(&cp, &held, 8, 11).unwrap();
        let (p2, m2) = evaluate(&cp, &held, 8, 11).unwrap();
        assert_eq!(p1.samples, p2.samples);
        assert_eq!(m1, m2);
        assert_eq!(p1.rows, held.n);
        assert_eq!(p1.mean.len(), held.n);
        match m1 {
            EvalMetrics::Regression { rmse, nll } => {
                assert!(rmse.is_finite() && rmse >= 0.0);
                assert!(nll.is_finite());
            }
            _ => panic!("wrong metric kind"),
        }
        let (p3, _) = evaluate(&cp, &held, 8, 12).unwrap();
        assert_ne!(p1.samples, p3.samples, "seed must matter");
    }

    #[test]
    fn sample_inducing_shapes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cp = trained_checkpoint(dir.path());
        let (u1, h) = sample_inducing(&cp, 3, 5).unwrap();
        let (u2, _) = sample_inducing(&cp, 3, 5).unwrap();
        assert_eq!(h, 4);
        assert_eq!(u1.len(), 12);
        assert_eq!(u1, u2);
        assert!(u1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_rejects_mismatched_features() {
        let dir = tempfile::tempdir().unwrap();
        let cp = trained_checkpoint(dir.path());
        let ds = data::Dataset {
            x: vec![0.0; 6],
            n: 3,
            d: 2,
            targets: data::Targets::Real { y: vec![0.0; 3], per_row: 1 },
            name: "wide".into(),
        };
        assert!(evaluate(&cp, &ds, 4, 0).is_err());
    }
}
