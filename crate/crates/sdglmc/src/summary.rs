//! Reduction of posterior chains to effect estimates on the reporting
//! (percent-change) scale, and the estimator adapters used by replicate
//! studies.

use crate::competitors::{
    build_design, fit_hierarchical, summarize_paths, CompetitorKind, CompetitorOptions,
    CompetitorSpec, DesignContext, HierarchicalDraws, PathSummary,
};
use crate::model::{percent_change10, PanelData, PriorConfig};
use crate::rng::stream_rng;
use crate::sampler::{fit_model, FitOptions, PosteriorDraws};
use crate::simulator::{decompose_surface, EffectEstimator};
use nalgebra::{DMatrix, DVector};

/// One effect surface broken into baseline, temporal, and spatial parts.
/// Used both for ground truth and for posterior-mean estimates; the scale
/// (coefficient or percent change) is the caller's contract.
#[derive(Debug, Clone)]
pub struct EffectComponents {
    pub baseline: f64,
    pub temporal: DVector<f64>,
    pub spatial: DVector<f64>,
    pub overall: DMatrix<f64>,
}

impl EffectComponents {
    /// Applies the percent-change transform elementwise.
    pub fn to_percent_scale(&self) -> Self {
        Self {
            baseline: percent_change10(self.baseline),
            temporal: self.temporal.map(percent_change10),
            spatial: self.spatial.map(percent_change10),
            overall: self.overall.map(percent_change10),
        }
    }
}

/// Posterior means of the percent-change effect components implied by the
/// dynamic model's chains (pooled).
///
/// Per retained draw the slope surface factors into
/// `exp(10 b) * exp(10 s_i) * exp(10 c_t)`, so the overall surface mean
/// accumulates as rank-one updates.
pub fn sdglmc_components_percent(chains: &[PosteriorDraws]) -> EffectComponents {
    let first = &chains[0];
    let (n, t_len) = (first.n, first.t_len);
    let mut baseline = 0.0;
    let mut temporal = DVector::zeros(t_len);
    let mut spatial = DVector::zeros(n);
    let mut overall = DMatrix::zeros(n, t_len);
    let mut total = 0usize;
    for chain in chains {
        for d in 0..chain.n_draws() {
            let s = (10.0 * chain.delta1_bar[d]).exp();
            let b = DVector::from_fn(n, |i, _| (10.0 * chain.spatial1[(d, i)]).exp());
            let c = DVector::from_fn(t_len, |t, _| (10.0 * chain.temporal1[(d, t)]).exp());
            baseline += 100.0 * (s - 1.0);
            for t in 0..t_len {
                temporal[t] += 100.0 * (c[t] - 1.0);
            }
            for i in 0..n {
                spatial[i] += 100.0 * (b[i] - 1.0);
            }
            // overall += 100 (s * b c' - 1)
            overall.ger(100.0 * s, &b, &c, 1.0);
            total += 1;
        }
    }
    let total = total.max(1) as f64;
    baseline /= total;
    temporal /= total;
    spatial /= total;
    overall /= total;
    overall.add_scalar_mut(-100.0);
    EffectComponents {
        baseline,
        temporal,
        spatial,
        overall,
    }
}

/// Posterior mean and 95% interval of the space-averaged percent-change
/// effect path of the dynamic model.
pub fn sdglmc_temporal_path(chains: &[PosteriorDraws]) -> PathSummary {
    let t_len = chains[0].t_len;
    let n_total: usize = chains.iter().map(|c| c.n_draws()).sum();
    let mut per_draw = DMatrix::zeros(n_total, t_len);
    let mut row = 0;
    for chain in chains {
        for d in 0..chain.n_draws() {
            for t in 0..t_len {
                per_draw[(row, t)] =
                    percent_change10(chain.delta1_bar[d] + chain.temporal1[(d, t)]);
            }
            row += 1;
        }
    }
    summarize_paths(&per_draw)
}

/// Posterior mean and 95% interval of the per-unit spatial deviation of the
/// percent-change effect.
pub fn sdglmc_spatial_path(chains: &[PosteriorDraws]) -> PathSummary {
    let n = chains[0].n;
    let n_total: usize = chains.iter().map(|c| c.n_draws()).sum();
    let mut per_draw = DMatrix::zeros(n_total, n);
    let mut row = 0;
    for chain in chains {
        for d in 0..chain.n_draws() {
            for i in 0..n {
                per_draw[(row, i)] = percent_change10(chain.spatial1[(d, i)]);
            }
            row += 1;
        }
    }
    summarize_paths(&per_draw)
}

/// Posterior means of the percent-change components implied by a benchmark
/// fit: the per-draw effect surface from the area coefficients is decomposed
/// into grand mean plus temporal and spatial deviations, then transformed.
pub fn competitor_components_percent(
    draws: &HierarchicalDraws,
    spec: &CompetitorSpec,
) -> EffectComponents {
    let (n, t_len) = spec.effect_basis[0].shape();
    let mut baseline = 0.0;
    let mut temporal = DVector::zeros(t_len);
    let mut spatial = DVector::zeros(n);
    let mut overall = DMatrix::zeros(n, t_len);
    let n_draws = draws.n_draws().max(1);
    for a in &draws.a_draws {
        let surface = spec.effect_surface(a);
        let (grand, dev_t, dev_i) = decompose_surface(&surface);
        baseline += percent_change10(grand);
        for t in 0..t_len {
            temporal[t] += percent_change10(dev_t[t]);
        }
        for i in 0..n {
            spatial[i] += percent_change10(dev_i[i]);
        }
        for t in 0..t_len {
            for i in 0..n {
                overall[(i, t)] += percent_change10(surface[(i, t)]);
            }
        }
    }
    let total = n_draws as f64;
    EffectComponents {
        baseline: baseline / total,
        temporal: temporal / total,
        spatial: spatial / total,
        overall: overall / total,
    }
}

/// Replicate-study adapter for the dynamic model.
pub struct SdglmcEstimator {
    pub label: String,
    pub options: FitOptions,
    pub priors: PriorConfig,
}

impl SdglmcEstimator {
    pub fn new(label: &str, options: FitOptions) -> Self {
        Self {
            label: label.to_string(),
            options,
            priors: PriorConfig::default(),
        }
    }
}

impl EffectEstimator for SdglmcEstimator {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn estimate(
        &self,
        panel: &PanelData,
        coords: &[(f64, f64)],
        seed: u64,
    ) -> Result<EffectComponents, String> {
        let mut options = self.options.clone();
        options.seed = seed;
        let fit = fit_model(panel, coords, &self.priors, &options).map_err(|e| e.to_string())?;
        Ok(sdglmc_components_percent(&fit.chains))
    }
}

/// Replicate-study adapter for the benchmark family.
pub struct CompetitorEstimator {
    pub kind: CompetitorKind,
    pub options: CompetitorOptions,
    pub context: DesignContext,
    /// Trend basis dimensions for the detrended benchmark.
    pub trend_df: (usize, usize),
}

impl CompetitorEstimator {
    pub fn new(kind: CompetitorKind, options: CompetitorOptions, context: DesignContext) -> Self {
        Self {
            kind,
            options,
            context,
            trend_df: (5, 20),
        }
    }
}

impl EffectEstimator for CompetitorEstimator {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn estimate(
        &self,
        panel: &PanelData,
        coords: &[(f64, f64)],
        seed: u64,
    ) -> Result<EffectComponents, String> {
        let mut ctx = self.context.clone();
        if self.kind == CompetitorKind::Jdz && ctx.trend.is_none() {
            ctx.trend = Some(
                crate::basis::fit_space_time_trend(
                    &panel.exposure,
                    coords,
                    self.trend_df.0,
                    self.trend_df.1,
                )
                .map_err(|e| e.to_string())?,
            );
        }
        let spec = build_design(self.kind, panel, coords, &ctx).map_err(|e| e.to_string())?;
        let mut options = self.options.clone();
        options.seed = seed;
        let mut rng = stream_rng(seed, 0);
        let draws = fit_hierarchical(&spec, panel, &options, &mut rng).map_err(|e| e.to_string())?;
        Ok(competitor_components_percent(&draws, &spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InteractionType;
    use crate::sampler::Variant;
    use approx::assert_abs_diff_eq;

    fn dummy_chain(n: usize, t_len: usize, n_draws: usize) -> PosteriorDraws {
        PosteriorDraws {
            interaction: InteractionType::T1,
            variant: Variant::Full,
            iterations: n_draws,
            burn_in: 0,
            thin: 1,
            seed: 0,
            stream: 0,
            n,
            t_len,
            n_alpha: 0,
            delta0_bar: vec![0.0; n_draws],
            delta1_bar: vec![0.01; n_draws],
            alpha: DMatrix::zeros(n_draws, 0),
            temporal0: DMatrix::zeros(n_draws, t_len),
            temporal1: DMatrix::zeros(n_draws, t_len),
            spatial0: DMatrix::zeros(n_draws, n),
            spatial1: DMatrix::zeros(n_draws, n),
            variance_names: vec![],
            variances: DMatrix::zeros(n_draws, 0),
            deviance: vec![0.0; n_draws],
            mu_mean: DMatrix::zeros(n, t_len),
            interaction_mean: DMatrix::zeros(n, t_len),
            latent_draws: vec![],
            mh_acceptance: 0.4,
            runtime_secs: 0.0,
        }
    }

    #[test]
    fn constant_chain_components() {
        let chain = dummy_chain(3, 4, 10);
        let comp = sdglmc_components_percent(&[chain]);
        let expected = percent_change10(0.01);
        assert_abs_diff_eq!(comp.baseline, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(comp.temporal[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(comp.spatial[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(comp.overall[(1, 2)], expected, epsilon = 1e-12);
    }

    #[test]
    fn temporal_path_combines_baseline_and_deviation() {
        let mut chain = dummy_chain(2, 3, 5);
        for d in 0..5 {
            chain.temporal1[(d, 1)] = 0.002;
        }
        let path = sdglmc_temporal_path(&[chain]);
        assert_abs_diff_eq!(path.mean[0], percent_change10(0.01), epsilon = 1e-12);
        assert_abs_diff_eq!(path.mean[1], percent_change10(0.012), epsilon = 1e-12);
    }
}
