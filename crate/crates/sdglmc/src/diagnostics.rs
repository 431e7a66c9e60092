//! Model assessment: deviance information criterion, posterior-predictive
//! calibration, between-chain convergence, and replicate-study error
//! indices.

use crate::summary::EffectComponents;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::distribution::{ContinuousCDF, Gamma as GammaDist};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("at least two chains are required")]
    TooFewChains,
    #[error("chains must have equal nonzero lengths")]
    UnequalChains,
    #[error("no retained draws available")]
    EmptyDraws,
    #[error("no latent draws stored; re-run the fit with a latent subsample")]
    NoLatentDraws,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Poisson deviance `-2 sum log p(y | mu)` for a mean surface.
pub fn poisson_deviance(y: &DMatrix<f64>, mu: &DMatrix<f64>) -> f64 {
    let mut ll = 0.0;
    for (yv, mv) in y.iter().zip(mu.iter()) {
        let m = mv.max(1e-300);
        ll += yv * m.ln() - m - ln_gamma(yv + 1.0);
    }
    -2.0 * ll
}

#[derive(Debug, Clone, Copy)]
pub struct Dic {
    pub dic: f64,
    pub d_bar: f64,
    pub p_d: f64,
}

/// `DIC = 2 D_bar - D(mu_bar)`: twice the posterior mean deviance minus the
/// deviance at the posterior mean of the Poisson mean surface.
pub fn dic_from_parts(
    deviance: &[f64],
    mu_mean: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<Dic, DiagError> {
    if deviance.is_empty() {
        return Err(DiagError::EmptyDraws);
    }
    if mu_mean.shape() != y.shape() {
        return Err(DiagError::DimensionMismatch(format!(
            "mu is {:?}, y is {:?}",
            mu_mean.shape(),
            y.shape()
        )));
    }
    let d_bar = deviance.iter().sum::<f64>() / deviance.len() as f64;
    let d_hat = poisson_deviance(y, mu_mean);
    Ok(Dic {
        dic: 2.0 * d_bar - d_hat,
        d_bar,
        p_d: d_bar - d_hat,
    })
}

#[derive(Debug, Clone)]
pub struct BayesPValues {
    /// Per-cell `Pr(y > y_rep) + Pr(y = y_rep) / 2`.
    pub per_cell: DMatrix<f64>,
    pub mean: f64,
    pub draws_used: usize,
}

/// Posterior-predictive calibration from stored latent draws: replicate
/// counts are sampled from each retained log-mean surface (at most
/// `max_draws` of them) and compared cell by cell against the observations.
pub fn bayes_pvalues_from_latent<R: Rng + ?Sized>(
    latent_draws: &[DMatrix<f64>],
    y: &DMatrix<f64>,
    max_draws: usize,
    rng: &mut R,
) -> Result<BayesPValues, DiagError> {
    if latent_draws.is_empty() {
        return Err(DiagError::NoLatentDraws);
    }
    let (n, t_len) = y.shape();
    if latent_draws[0].shape() != (n, t_len) {
        return Err(DiagError::DimensionMismatch(
            "latent draw shape differs from counts".into(),
        ));
    }
    let stride = latent_draws.len().div_ceil(max_draws.max(1)).max(1);
    let mut greater = DMatrix::<f64>::zeros(n, t_len);
    let mut equal = DMatrix::<f64>::zeros(n, t_len);
    let mut used = 0usize;
    for theta in latent_draws.iter().step_by(stride) {
        used += 1;
        for t in 0..t_len {
            for i in 0..n {
                let mu = theta[(i, t)].exp();
                let y_rep = if mu > 0.0 && mu.is_finite() {
                    Poisson::new(mu).map(|p| p.sample(rng)).unwrap_or(0.0)
                } else {
                    0.0
                };
                let obs = y[(i, t)];
                if obs > y_rep {
                    greater[(i, t)] += 1.0;
                } else if obs == y_rep {
                    equal[(i, t)] += 1.0;
                }
            }
        }
    }
    let per_cell = DMatrix::from_fn(n, t_len, |i, t| {
        (greater[(i, t)] + 0.5 * equal[(i, t)]) / used as f64
    });
    let mean = per_cell.sum() / (n * t_len) as f64;
    Ok(BayesPValues {
        per_cell,
        mean,
        draws_used: used,
    })
}

/// Potential scale reduction factor over two or more equal-length chains.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64, DiagError> {
    if chains.len() < 2 {
        return Err(DiagError::TooFewChains);
    }
    let len = chains[0].len();
    if len < 2 || chains.iter().any(|c| c.len() != len) {
        return Err(DiagError::UnequalChains);
    }
    let m = chains.len() as f64;
    let n = len as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = chain_means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0)
        * chain_means
            .iter()
            .map(|cm| (cm - grand).powi(2))
            .sum::<f64>();
    let w = chains
        .iter()
        .zip(&chain_means)
        .map(|(c, cm)| c.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        // Degenerate chains (all values identical) are trivially converged.
        return Ok(1.0);
    }
    let v_hat = (n - 1.0) / n * w + b / n;
    Ok((v_hat / w).sqrt())
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ComponentMetrics {
    pub mse_avg: f64,
    pub mab: f64,
    pub mae_avg: f64,
}

/// Replicate-averaged error indices for each component of the effect
/// surface, computed on the percent-change scale. For each cell the squared
/// and absolute deviations of the per-replicate posterior means from the
/// matching truths are averaged over replicates; `mse_avg`/`mae_avg` then
/// average over cells while `mab` takes the worst cell.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub overall: ComponentMetrics,
    pub baseline: ComponentMetrics,
    pub temporal: ComponentMetrics,
    pub spatial: ComponentMetrics,
    pub replicates: usize,
}

pub fn study_metrics(
    estimates: &[EffectComponents],
    truths: &[EffectComponents],
) -> Result<MetricReport, DiagError> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(DiagError::DimensionMismatch(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let r = estimates.len();
    let shape = estimates[0].overall.shape();
    for (e, t) in estimates.iter().zip(truths) {
        if e.overall.shape() != shape || t.overall.shape() != shape {
            return Err(DiagError::DimensionMismatch("overall surface shapes".into()));
        }
    }
    let (n, t_len) = shape;

    let metrics_over =
        |cells: usize, diff: &dyn Fn(usize, usize) -> f64| -> ComponentMetrics {
            // diff(cell, replicate)
            let mut mse = 0.0;
            let mut mae = 0.0;
            let mut mab: f64 = 0.0;
            for c in 0..cells {
                let mut se = 0.0;
                let mut ae = 0.0;
                for j in 0..r {
                    let d = diff(c, j);
                    se += d * d;
                    ae += d.abs();
                }
                se /= r as f64;
                ae /= r as f64;
                mse += se;
                mae += ae;
                mab = mab.max(ae);
            }
            ComponentMetrics {
                mse_avg: mse / cells as f64,
                mab,
                mae_avg: mae / cells as f64,
            }
        };

    let overall = metrics_over(n * t_len, &|c, j| {
        let (i, t) = (c % n, c / n);
        estimates[j].overall[(i, t)] - truths[j].overall[(i, t)]
    });
    let baseline = metrics_over(1, &|_, j| estimates[j].baseline - truths[j].baseline);
    let temporal = metrics_over(t_len, &|t, j| estimates[j].temporal[t] - truths[j].temporal[t]);
    let spatial = metrics_over(n, &|i, j| estimates[j].spatial[i] - truths[j].spatial[i]);

    Ok(MetricReport {
        overall,
        baseline,
        temporal,
        spatial,
        replicates: r,
    })
}

/// `Pr(X <= x)` for an inverse-gamma with the given shape and rate,
/// evaluated through the gamma CDF of `1/X`.
pub fn inverse_gamma_cdf(shape: f64, rate: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let g = GammaDist::new(shape, rate).expect("valid inverse-gamma parameters");
    1.0 - g.cdf(1.0 / x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dic_hand_arithmetic() {
        // Two draws with deviances 10 and 14 and plug-in deviance 11:
        // D_bar = 12, p_D = 1, DIC = 13.
        let y = DMatrix::from_element(1, 1, 2.0);
        // Find mu with deviance 11: solve -2(y ln m - m - ln y!) = 11.
        let target = 11.0;
        let mut lo = 2.0;
        let mut hi = 20.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if poisson_deviance(&y, &DMatrix::from_element(1, 1, mid)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mu = DMatrix::from_element(1, 1, 0.5 * (lo + hi));
        let dic = dic_from_parts(&[10.0, 14.0], &mu, &y).unwrap();
        assert_abs_diff_eq!(dic.d_bar, 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dic.p_d, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(dic.dic, 13.0, epsilon = 1e-6);
    }

    #[test]
    fn dic_constant_deviance_has_zero_pd() {
        let y = DMatrix::from_element(2, 2, 3.0);
        let mu = DMatrix::from_element(2, 2, 3.0);
        let d = poisson_deviance(&y, &mu);
        let dic = dic_from_parts(&[d, d, d], &mu, &y).unwrap();
        assert_abs_diff_eq!(dic.p_d, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(dic.dic, dic.d_bar, epsilon = 1e-10);
    }

    #[test]
    fn pvalue_degenerate_cases() {
        let y = DMatrix::from_element(2, 3, 4.0);
        // Latent so large that replicates always exceed the observation.
        let latent = vec![DMatrix::from_element(2, 3, 12.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = bayes_pvalues_from_latent(&latent, &y, 100, &mut rng).unwrap();
        assert_abs_diff_eq!(p.mean, 0.0, epsilon = 1e-12);

        assert!(matches!(
            bayes_pvalues_from_latent(&[], &y, 100, &mut rng),
            Err(DiagError::NoLatentDraws)
        ));
    }

    #[test]
    fn pvalue_tie_tally() {
        // Force mu ~ 0 so y_rep = 0 almost surely; with y = 0 everywhere the
        // tie term gives exactly one half.
        let y = DMatrix::zeros(2, 2);
        let latent = vec![DMatrix::from_element(2, 2, -40.0); 8];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = bayes_pvalues_from_latent(&latent, &y, 8, &mut rng).unwrap();
        assert_abs_diff_eq!(p.mean, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gelman_rubin_cases() {
        let a: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = gelman_rubin(&[&a, &a]).unwrap();
        assert!((r - 1.0).abs() < 0.01, "identical chains gave {r}");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let c1: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let c2: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() + 5.0).collect();
        let r = gelman_rubin(&[&c1, &c2]).unwrap();
        assert!(r > 2.0, "separated chains gave {r}");

        assert!(matches!(gelman_rubin(&[&a[..]]), Err(DiagError::TooFewChains)));
    }

    fn comp(n: usize, t: usize, value: f64) -> EffectComponents {
        EffectComponents {
            baseline: value,
            temporal: DVector::from_element(t, value),
            spatial: DVector::from_element(n, value),
            overall: DMatrix::from_element(n, t, value),
        }
    }

    #[test]
    fn metrics_hand_cases() {
        // Perfect estimates: all indices zero.
        let est = vec![comp(2, 2, 5.0)];
        let truth = vec![comp(2, 2, 5.0)];
        let m = study_metrics(&est, &truth).unwrap();
        assert_eq!(
            (m.overall.mse_avg, m.overall.mab, m.overall.mae_avg),
            (0.0, 0.0, 0.0)
        );

        // One replicate, estimate 6 against truth 5.
        let m = study_metrics(&[comp(1, 1, 6.0)], &[comp(1, 1, 5.0)]).unwrap();
        assert_abs_diff_eq!(m.overall.mse_avg, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.overall.mab, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.overall.mae_avg, 1.0, epsilon = 1e-12);

        // Two replicates 4 and 6 against truth 5.
        let m = study_metrics(
            &[comp(1, 1, 4.0), comp(1, 1, 6.0)],
            &[comp(1, 1, 5.0), comp(1, 1, 5.0)],
        )
        .unwrap();
        assert_abs_diff_eq!(m.baseline.mse_avg, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.baseline.mab, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.baseline.mae_avg, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn jensen_bound_on_random_inputs() {
        // Cell-wise, the squared mean absolute deviation never exceeds the
        // mean squared deviation.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let est: Vec<EffectComponents> = (0..6)
            .map(|_| comp(3, 4, rng.gen_range(-2.0..2.0)))
            .collect();
        let truth: Vec<EffectComponents> = (0..6).map(|_| comp(3, 4, rng.gen_range(-2.0..2.0))).collect();
        let m = study_metrics(&est, &truth).unwrap();
        assert!(m.overall.mae_avg.powi(2) <= m.overall.mse_avg + 1e-12);
        assert!(m.temporal.mae_avg.powi(2) <= m.temporal.mse_avg + 1e-12);
    }

    #[test]
    fn inverse_gamma_tail() {
        // Monotone in x and consistent at a hand-checkable point:
        // IG(1, 1) has CDF exp(-1/x).
        let c = inverse_gamma_cdf(1.0, 1.0, 2.0);
        assert_abs_diff_eq!(c, (-0.5f64).exp(), epsilon = 1e-9);
        assert!(inverse_gamma_cdf(10.0, 0.001, 1e-5) < inverse_gamma_cdf(10.0, 0.001, 1e-3));
    }
}
