//! Gibbs/Metropolis sampler for the dynamic Poisson model.
//!
//! One iteration updates, in order: the baseline block, the spatial block,
//! the temporal block, the interaction block, then re-centers the effects,
//! draws the innovation variances, refreshes the latent log-means cell by
//! cell with random-walk Metropolis steps, and finally draws the
//! measurement-error variance. Every Gaussian coefficient block is drawn
//! jointly over all time points through a sparse Cholesky of its full
//! conditional precision.

use crate::basis::TrendFit;
use crate::graph::{GraphError, SpatialGraph};
use crate::linalg::{
    sample_gaussian_dense, standard_normal_vector, BlockTridiag, LinalgError, TridiagCholesky,
};
use crate::model::{IgPair, InteractionType, ModelError, PanelData, PriorConfig};
use crate::rng::stream_rng;
use crate::stacked::{build_stacked_system, DesignCache, StackedSystem, StarPrecision};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Random-walk proposal adaptation: per-cell acceptance targeted during
/// burn-in, scales frozen afterwards.
const MH_TARGET_ACCEPTANCE: f64 = 0.44;
const MH_ADAPT_WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler options: {0}")]
    InvalidOptions(String),
    #[error("cholesky factorization failed while drawing block {block}: the full-conditional precision is not positive definite (check prior configuration)")]
    CholeskyFailure { block: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Model variants toggled in the fitting routine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Detrended exposure, measured confounders included.
    Full,
    /// One-step fit on the raw exposure (no detrending).
    SingleStep,
    /// Detrended exposure, measured confounders excluded.
    NoConfounders,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Some(Self::Full),
            "single_step" => Some(Self::SingleStep),
            "no_confounders" => Some(Self::NoConfounders),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Full => "full",
            Self::SingleStep => "single_step",
            Self::NoConfounders => "no_confounders",
        };
        f.write_str(s)
    }
}

/// Chain length, variant and reproducibility settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub variant: Variant,
    pub interaction: InteractionType,
    pub n_chains: usize,
    pub seed: u64,
    /// Cap on stored latent draws (posterior-predictive checks).
    pub latent_subsample: usize,
    /// Detrending basis dimensions used by [`fit_model`].
    pub spatial_df: usize,
    pub temporal_df: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            burn_in: 500,
            thin: 1,
            variant: Variant::Full,
            interaction: InteractionType::T4,
            n_chains: 1,
            seed: 1,
            latent_subsample: 200,
            spatial_df: 5,
            temporal_df: 20,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.burn_in > self.iterations {
            return Err(SamplerError::InvalidOptions(format!(
                "burn_in {} exceeds iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(SamplerError::InvalidOptions("thin must be >= 1".into()));
        }
        if self.n_chains == 0 {
            return Err(SamplerError::InvalidOptions("n_chains must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of retained draws implied by the schedule.
    pub fn n_draws(&self) -> usize {
        if self.iterations <= self.burn_in {
            0
        } else {
            (self.iterations - self.burn_in).div_ceil(self.thin)
        }
    }
}

/// Innovation variances of the state.
#[derive(Debug, Clone)]
pub struct VarianceState {
    pub sigma2_w0: f64,
    pub sigma2_delta0: f64,
    /// One entry for the homogeneous interaction walks, `n` entries for the
    /// heterogeneous walk, empty when the interaction is absent.
    pub sigma2_w0_star: Vec<f64>,
    pub sigma2_w1: f64,
    pub sigma2_delta1: f64,
    pub tau2: f64,
}

/// Full sampler state.
#[derive(Debug, Clone)]
pub struct McmcState {
    /// Interaction field, stacked time slice by time slice (`n * T`, empty
    /// when the interaction is absent).
    pub gamma1: DVector<f64>,
    /// Temporal effects, interleaved `(d0_t, d1_t)` pairs (`2 T`).
    pub gamma2: DVector<f64>,
    /// Spatial effects, intercept stacked over slope (`2 n`).
    pub gamma3: DVector<f64>,
    /// Baselines then confounder coefficients (`2 + p`).
    pub gamma4: DVector<f64>,
    pub variances: VarianceState,
    /// Latent log-means (`n x T`).
    pub latent: DMatrix<f64>,
    /// Per-cell random-walk proposal standard deviations.
    pub mh_scale: DMatrix<f64>,
}

impl McmcState {
    pub fn delta0_bar(&self) -> f64 {
        self.gamma4[0]
    }

    pub fn delta1_bar(&self) -> f64 {
        self.gamma4[1]
    }

    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_fn(self.gamma4.len() - 2, |k, _| self.gamma4[2 + k])
    }

    pub fn temporal(&self, k: usize) -> DVector<f64> {
        let t_len = self.gamma2.len() / 2;
        DVector::from_fn(t_len, |t, _| self.gamma2[2 * t + k])
    }

    pub fn spatial(&self, k: usize) -> DVector<f64> {
        let n = self.gamma3.len() / 2;
        DVector::from_fn(n, |i, _| self.gamma3[k * n + i])
    }

    /// Interaction field as an `n x T` matrix (zeros when absent).
    pub fn interaction_field(&self, n: usize, t_len: usize) -> DMatrix<f64> {
        if self.gamma1.is_empty() {
            DMatrix::zeros(n, t_len)
        } else {
            DMatrix::from_fn(n, t_len, |i, t| self.gamma1[t * n + i])
        }
    }
}

/// One random-walk Metropolis step against an arbitrary scalar log-target.
pub fn rw_mh_step<R: Rng + ?Sized, F: Fn(f64) -> f64>(
    current: f64,
    scale: f64,
    log_target: F,
    rng: &mut R,
) -> (f64, bool) {
    let proposal = current + scale * rng.sample::<f64, _>(StandardNormal);
    let log_ratio = log_target(proposal) - log_target(current);
    if log_ratio >= 0.0 || rng.gen::<f64>().ln() < log_ratio {
        (proposal, true)
    } else {
        (current, false)
    }
}

/// Draws `x ~ IG(shape, rate)` via `rate / Gamma(shape, 1)`.
pub fn draw_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("shape validated by priors");
    rate / g.sample(rng)
}

/// Conditional parameters for a random-walk innovation variance:
/// `IG(a + (T-1)/2, b + sum of squared increments / 2)`.
pub fn temporal_variance_conditional(prior: IgPair, path: &[f64]) -> (f64, f64) {
    let t_len = path.len();
    let ssq: f64 = path.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    (
        prior.shape + (t_len.saturating_sub(1)) as f64 / 2.0,
        prior.rate + 0.5 * ssq,
    )
}

/// Conditional parameters for a spatial effect variance:
/// `IG(a + (n-1)/2, b + pairwise-difference quadratic form / 2)`.
pub fn spatial_variance_conditional(
    prior: IgPair,
    graph: &SpatialGraph,
    deltas: &DVector<f64>,
) -> (f64, f64) {
    (
        prior.shape + (graph.n().saturating_sub(1)) as f64 / 2.0,
        prior.rate + 0.5 * graph.quadratic_form(deltas),
    )
}

/// Conditional parameters for the interaction variance, shaped by the
/// interaction type.
#[derive(Debug, Clone, PartialEq)]
pub enum StarConditional {
    Absent,
    Scalar(f64, f64),
    PerArea(Vec<(f64, f64)>),
}

pub fn interaction_variance_conditional(
    interaction: InteractionType,
    prior: IgPair,
    graph: &SpatialGraph,
    field: &DMatrix<f64>,
) -> StarConditional {
    let (n, t_len) = field.shape();
    let nf = n as f64;
    let tf = t_len as f64;
    match interaction {
        InteractionType::T1 => StarConditional::Absent,
        InteractionType::T2 => {
            let mut ssq = 0.0;
            for t in 1..t_len {
                for i in 0..n {
                    ssq += (field[(i, t)] - field[(i, t - 1)]).powi(2);
                }
            }
            StarConditional::Scalar(prior.shape + nf * (tf - 1.0) / 2.0, prior.rate + 0.5 * ssq)
        }
        InteractionType::T3 => {
            let mut qf = 0.0;
            for t in 0..t_len {
                qf += graph.quadratic_form(&field.column(t).into_owned());
            }
            StarConditional::Scalar(prior.shape + (nf - 1.0) * tf / 2.0, prior.rate + 0.5 * qf)
        }
        InteractionType::T4 => {
            let mut qf = 0.0;
            for t in 1..t_len {
                let diff = field.column(t) - field.column(t - 1);
                qf += graph.quadratic_form(&diff);
            }
            StarConditional::Scalar(
                prior.shape + (nf - 1.0) * (tf - 1.0) / 2.0,
                prior.rate + 0.5 * qf,
            )
        }
        InteractionType::T5 => {
            let mut params = Vec::with_capacity(n);
            for i in 0..n {
                let ssq: f64 = (1..t_len)
                    .map(|t| (field[(i, t)] - field[(i, t - 1)]).powi(2))
                    .sum();
                params.push((prior.shape + (tf - 1.0) / 2.0, prior.rate + 0.5 * ssq));
            }
            StarConditional::PerArea(params)
        }
    }
}

/// Conditional parameters for the measurement-error variance:
/// `IG(a + nT/2, b + residual sum of squares / 2)`.
pub fn noise_variance_conditional(prior: IgPair, residual: &DMatrix<f64>) -> (f64, f64) {
    (
        prior.shape + (residual.nrows() * residual.ncols()) as f64 / 2.0,
        prior.rate + 0.5 * residual.norm_squared(),
    )
}

/// The Gibbs machinery for one panel. Immutable once constructed; all chain
/// state lives in [`McmcState`].
pub struct GibbsSampler<'a> {
    data: &'a PanelData,
    pub design: DesignCache,
    pub priors: PriorConfig,
    pub interaction: InteractionType,
}

impl<'a> GibbsSampler<'a> {
    /// `regressor` is the exposure column carried by the slope terms:
    /// detrended for the two-step variants, raw for the single-step fit.
    pub fn new(
        data: &'a PanelData,
        regressor: DMatrix<f64>,
        priors: PriorConfig,
        interaction: InteractionType,
        include_confounders: bool,
    ) -> Result<Self, SamplerError> {
        priors.validate()?;
        data.graph.require_connected()?;
        let design = DesignCache::new(data, regressor, include_confounders)?;
        Ok(Self {
            data,
            design,
            priors,
            interaction,
        })
    }

    pub fn data(&self) -> &PanelData {
        self.data
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn t_len(&self) -> usize {
        self.data.t_len()
    }

    /// Blocks at zero, variances at prior initial values, latent at a
    /// data-driven starting point, proposal scales at a generic width.
    pub fn init_state(&self) -> McmcState {
        let (n, t_len) = (self.n(), self.t_len());
        let gamma1_len = match self.interaction {
            InteractionType::T1 => 0,
            _ => n * t_len,
        };
        let star_init = match self.interaction {
            InteractionType::T1 => Vec::new(),
            InteractionType::T5 => vec![self.priors.sigma2_w0_star.init_value(); n],
            _ => vec![self.priors.sigma2_w0_star.init_value()],
        };
        let latent = DMatrix::from_fn(n, t_len, |i, t| {
            (self.data.y[(i, t)] + 0.5).ln() - self.data.offset[(i, t)]
        });
        McmcState {
            gamma1: DVector::zeros(gamma1_len),
            gamma2: DVector::zeros(2 * t_len),
            gamma3: DVector::zeros(2 * n),
            gamma4: DVector::zeros(2 + self.design.n_alpha),
            variances: VarianceState {
                sigma2_w0: self.priors.sigma2_w0.init_value(),
                sigma2_delta0: self.priors.sigma2_delta0.init_value(),
                sigma2_w0_star: star_init,
                sigma2_w1: self.priors.sigma2_w1.init_value(),
                sigma2_delta1: self.priors.sigma2_delta1.init_value(),
                tau2: self.priors.tau2.init_value(),
            },
            latent,
            mh_scale: DMatrix::from_element(n, t_len, 0.1),
        }
    }

    /// Variance-scaled precision pieces for the current state.
    pub fn build_system(&self, state: &McmcState) -> StackedSystem {
        build_stacked_system(
            self.interaction,
            &self.priors,
            state.variances.sigma2_w0,
            state.variances.sigma2_w1,
            state.variances.sigma2_delta0,
            state.variances.sigma2_delta1,
            &state.variances.sigma2_w0_star,
        )
    }

    /// Observation-operator image of one block (`G_j gamma_j` as `n x T`).
    pub fn block_contribution(&self, j: usize, state: &McmcState) -> DMatrix<f64> {
        let (n, t_len) = (self.n(), self.t_len());
        let x = &self.design.regressor;
        match j {
            1 => state.interaction_field(n, t_len),
            2 => DMatrix::from_fn(n, t_len, |i, t| {
                state.gamma2[2 * t] + state.gamma2[2 * t + 1] * x[(i, t)]
            }),
            3 => DMatrix::from_fn(n, t_len, |i, t| {
                state.gamma3[i] + state.gamma3[n + i] * x[(i, t)]
            }),
            4 => {
                let mut out = DMatrix::from_fn(n, t_len, |i, t| {
                    state.gamma4[0] + state.gamma4[1] * x[(i, t)]
                });
                if self.design.n_alpha > 0 {
                    let alpha = state.alpha();
                    for t in 0..t_len {
                        let m_alpha = self.data.confounder_slice(t) * &alpha;
                        for i in 0..n {
                            out[(i, t)] += m_alpha[i];
                        }
                    }
                }
                out
            }
            _ => panic!("block index must be 1..=4"),
        }
    }

    /// Sum of all block contributions (the systematic part of the latent
    /// mean, excluding the offset).
    pub fn fitted(&self, state: &McmcState) -> DMatrix<f64> {
        let mut out = self.block_contribution(4, state);
        out += self.block_contribution(3, state);
        out += self.block_contribution(2, state);
        if !state.gamma1.is_empty() {
            out += self.block_contribution(1, state);
        }
        out
    }

    /// `latent - offset - fitted`.
    pub fn residual(&self, state: &McmcState) -> DMatrix<f64> {
        let mut out = state.latent.clone();
        out -= &self.data.offset;
        out -= self.fitted(state);
        out
    }

    /// Joint log density of counts and the Gaussian noise term as a function
    /// of the coefficient state (used to verify centering invariance).
    pub fn log_target(&self, state: &McmcState) -> f64 {
        let mut ll = 0.0;
        for t in 0..self.t_len() {
            for i in 0..self.n() {
                let v = state.latent[(i, t)];
                ll += self.data.y[(i, t)] * v - v.exp();
            }
        }
        ll - self.residual(state).norm_squared() / (2.0 * state.variances.tau2)
    }

    /// Exact joint draw of coefficient block `j` from its Gaussian full
    /// conditional.
    pub fn draw_gamma_block(
        &self,
        j: usize,
        state: &mut McmcState,
        system: &StackedSystem,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), SamplerError> {
        let tau2 = state.variances.tau2;
        // eta_j = latent - offset - sum of the other blocks.
        let mut eta = self.residual(state);
        if j != 1 || !state.gamma1.is_empty() {
            eta += self.block_contribution(j, state);
        }
        match j {
            1 => self.draw_interaction_block(state, system, &eta, tau2, rng),
            2 => self.draw_temporal_block(state, system, &eta, tau2, rng),
            3 => self.draw_spatial_block(state, system, &eta, tau2, rng),
            4 => self.draw_baseline_block(state, system, &eta, tau2, rng),
            _ => panic!("block index must be 1..=4"),
        }
    }

    fn draw_interaction_block(
        &self,
        state: &mut McmcState,
        system: &StackedSystem,
        eta: &DMatrix<f64>,
        tau2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), SamplerError> {
        let (n, t_len) = (self.n(), self.t_len());
        let inv_tau2 = 1.0 / tau2;
        match self.interaction {
            InteractionType::T1 => Ok(()),
            InteractionType::T2 | InteractionType::T5 => {
                // The walk decouples into one tridiagonal system per unit.
                let mut diag = vec![0.0; t_len];
                let mut sub = vec![0.0; t_len.saturating_sub(1)];
                let mut rhs = vec![0.0; t_len];
                for i in 0..n {
                    let w = match &system.star_prec {
                        StarPrecision::Scalar(v) => *v,
                        StarPrecision::PerArea(v) => v[i],
                    };
                    for t in 0..t_len {
                        let mut d = if t == 0 { system.inv_v_star } else { w };
                        if t + 1 < t_len {
                            d += w;
                        }
                        diag[t] = d + inv_tau2;
                        rhs[t] = eta[(i, t)] * inv_tau2;
                    }
                    for s in sub.iter_mut() {
                        *s = -w;
                    }
                    let chol = TridiagCholesky::factor(&diag, &sub)
                        .map_err(|_| SamplerError::CholeskyFailure { block: 1 })?;
                    chol.sample_in_place(&mut rhs, rng);
                    for t in 0..t_len {
                        state.gamma1[t * n + i] = rhs[t];
                    }
                }
                Ok(())
            }
            InteractionType::T3 => {
                // No temporal coupling: one spatially structured solve per
                // slice, all sharing the same precision.
                let w = match &system.star_prec {
                    StarPrecision::Scalar(v) => *v,
                    StarPrecision::PerArea(_) => unreachable!(),
                };
                let q = self.data.graph.icar_precision().q;
                let mut prec = q * w;
                for i in 0..n {
                    prec[(i, i)] += inv_tau2;
                }
                let chol = prec
                    .cholesky()
                    .ok_or(SamplerError::CholeskyFailure { block: 1 })?;
                let lt = chol.l().transpose();
                for t in 0..t_len {
                    let rhs = eta.column(t) * inv_tau2;
                    let mean = chol.solve(&rhs);
                    let z = standard_normal_vector(n, rng);
                    let noise = lt
                        .solve_upper_triangular(&z)
                        .ok_or(SamplerError::CholeskyFailure { block: 1 })?;
                    for i in 0..n {
                        state.gamma1[t * n + i] = mean[i] + noise[i];
                    }
                }
                Ok(())
            }
            InteractionType::T4 => {
                let w = match &system.star_prec {
                    StarPrecision::Scalar(v) => *v,
                    StarPrecision::PerArea(_) => unreachable!(),
                };
                let q_scaled = self.data.graph.icar_precision().q * w;
                let mut bt = BlockTridiag::zeros(n, t_len);
                for t in 0..t_len {
                    let block = &mut bt.diag[t];
                    if t == 0 {
                        for i in 0..n {
                            block[(i, i)] = system.inv_v_star;
                        }
                    } else {
                        block.copy_from(&q_scaled);
                    }
                    if t + 1 < t_len {
                        *block += &q_scaled;
                    }
                    for i in 0..n {
                        block[(i, i)] += inv_tau2;
                    }
                }
                for t in 0..t_len.saturating_sub(1) {
                    bt.sub[t].copy_from(&q_scaled);
                    bt.sub[t].neg_mut();
                }
                let mut rhs = DVector::zeros(n * t_len);
                for t in 0..t_len {
                    for i in 0..n {
                        rhs[t * n + i] = eta[(i, t)] * inv_tau2;
                    }
                }
                let chol = bt
                    .factor()
                    .map_err(|_| SamplerError::CholeskyFailure { block: 1 })?;
                state.gamma1 = chol.sample(&rhs, rng);
                Ok(())
            }
        }
    }

    fn draw_temporal_block(
        &self,
        state: &mut McmcState,
        system: &StackedSystem,
        eta: &DMatrix<f64>,
        tau2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), SamplerError> {
        let (n, t_len) = (self.n(), self.t_len());
        let inv_tau2 = 1.0 / tau2;
        let mut bt = BlockTridiag::zeros(2, t_len);
        let mut rhs = DVector::zeros(2 * t_len);
        for t in 0..t_len {
            let block = &mut bt.diag[t];
            for c in 0..2 {
                let mut d = if t == 0 {
                    system.inv_v_delta[c]
                } else {
                    system.inv_sigma2_w[c]
                };
                if t + 1 < t_len {
                    d += system.inv_sigma2_w[c];
                }
                block[(c, c)] = d;
            }
            block[(0, 0)] += n as f64 * inv_tau2;
            block[(0, 1)] += self.design.col_sum_x[t] * inv_tau2;
            block[(1, 0)] += self.design.col_sum_x[t] * inv_tau2;
            block[(1, 1)] += self.design.col_sum_x2[t] * inv_tau2;

            let eta_t = eta.column(t);
            rhs[2 * t] = eta_t.sum() * inv_tau2;
            rhs[2 * t + 1] = eta_t.dot(&self.design.regressor.column(t)) * inv_tau2;
        }
        for t in 0..t_len.saturating_sub(1) {
            bt.sub[t][(0, 0)] = -system.inv_sigma2_w[0];
            bt.sub[t][(1, 1)] = -system.inv_sigma2_w[1];
        }
        let chol = bt
            .factor()
            .map_err(|_| SamplerError::CholeskyFailure { block: 2 })?;
        state.gamma2 = chol.sample(&rhs, rng);
        Ok(())
    }

    fn draw_spatial_block(
        &self,
        state: &mut McmcState,
        system: &StackedSystem,
        eta: &DMatrix<f64>,
        tau2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), SamplerError> {
        let n = self.n();
        let inv_tau2 = 1.0 / tau2;
        let q = self.data.graph.icar_precision().q;
        let mut prec = DMatrix::zeros(2 * n, 2 * n);
        prec.view_mut((0, 0), (n, n))
            .copy_from(&(&q * system.inv_sigma2_delta[0]));
        prec.view_mut((n, n), (n, n))
            .copy_from(&(&q * system.inv_sigma2_delta[1]));
        let t_len = self.t_len() as f64;
        for i in 0..n {
            prec[(i, i)] += t_len * inv_tau2;
            prec[(n + i, n + i)] += self.design.row_sum_x2[i] * inv_tau2;
            prec[(i, n + i)] += self.design.row_sum_x[i] * inv_tau2;
            prec[(n + i, i)] += self.design.row_sum_x[i] * inv_tau2;
        }
        let mut rhs = DVector::zeros(2 * n);
        for t in 0..self.t_len() {
            let eta_t = eta.column(t);
            let x_t = self.design.regressor.column(t);
            for i in 0..n {
                rhs[i] += eta_t[i];
                rhs[n + i] += eta_t[i] * x_t[i];
            }
        }
        rhs *= inv_tau2;
        state.gamma3 = sample_gaussian_dense(&prec, &rhs, rng)
            .map_err(|_| SamplerError::CholeskyFailure { block: 3 })?;
        Ok(())
    }

    fn draw_baseline_block(
        &self,
        state: &mut McmcState,
        system: &StackedSystem,
        eta: &DMatrix<f64>,
        tau2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), SamplerError> {
        let inv_tau2 = 1.0 / tau2;
        let m = 2 + self.design.n_alpha;
        let mut prec = &self.design.g4_gram * inv_tau2;
        for k in 0..m {
            prec[(k, k)] += system.slab_prec;
        }
        let mut rhs = DVector::zeros(m);
        for t in 0..self.t_len() {
            let eta_t = eta.column(t);
            rhs[0] += eta_t.sum();
            rhs[1] += eta_t.dot(&self.design.regressor.column(t));
            if self.design.n_alpha > 0 {
                let m_t = self.data.confounder_slice(t);
                for k in 0..self.design.n_alpha {
                    rhs[2 + k] += m_t.column(k).dot(&eta_t);
                }
            }
        }
        rhs *= inv_tau2;
        state.gamma4 = sample_gaussian_dense(&prec, &rhs, rng)
            .map_err(|_| SamplerError::CholeskyFailure { block: 4 })?;
        Ok(())
    }

    /// Conjugate draws for all innovation variances.
    pub fn draw_variances(&self, state: &mut McmcState, rng: &mut ChaCha8Rng) {
        let d0: Vec<f64> = state.temporal(0).iter().cloned().collect();
        let d1: Vec<f64> = state.temporal(1).iter().cloned().collect();
        let (a, b) = temporal_variance_conditional(self.priors.sigma2_w0, &d0);
        state.variances.sigma2_w0 = draw_inverse_gamma(a, b, rng);
        let (a, b) = temporal_variance_conditional(self.priors.sigma2_w1, &d1);
        state.variances.sigma2_w1 = draw_inverse_gamma(a, b, rng);

        let (a, b) =
            spatial_variance_conditional(self.priors.sigma2_delta0, &self.data.graph, &state.spatial(0));
        state.variances.sigma2_delta0 = draw_inverse_gamma(a, b, rng);
        let (a, b) =
            spatial_variance_conditional(self.priors.sigma2_delta1, &self.data.graph, &state.spatial(1));
        state.variances.sigma2_delta1 = draw_inverse_gamma(a, b, rng);

        let field = state.interaction_field(self.n(), self.t_len());
        match interaction_variance_conditional(
            self.interaction,
            self.priors.sigma2_w0_star,
            &self.data.graph,
            &field,
        ) {
            StarConditional::Absent => {}
            StarConditional::Scalar(a, b) => {
                state.variances.sigma2_w0_star = vec![draw_inverse_gamma(a, b, rng)];
            }
            StarConditional::PerArea(params) => {
                state.variances.sigma2_w0_star = params
                    .into_iter()
                    .map(|(a, b)| draw_inverse_gamma(a, b, rng))
                    .collect();
            }
        }
    }

    /// One Metropolis sweep over the latent log-means. Returns
    /// `(accepted, attempted)`.
    pub fn draw_latent(
        &self,
        state: &mut McmcState,
        fitted: &DMatrix<f64>,
        rng: &mut ChaCha8Rng,
    ) -> (usize, usize) {
        let (n, t_len) = (self.n(), self.t_len());
        let tau2 = state.variances.tau2;
        let mut accepted = 0;
        for t in 0..t_len {
            for i in 0..n {
                let y = self.data.y[(i, t)];
                let center = self.data.offset[(i, t)] + fitted[(i, t)];
                let target =
                    |v: f64| y * v - v.exp() - (v - center) * (v - center) / (2.0 * tau2);
                let (new, acc) = rw_mh_step(state.latent[(i, t)], state.mh_scale[(i, t)], target, rng);
                state.latent[(i, t)] = new;
                accepted += usize::from(acc);
            }
        }
        (accepted, n * t_len)
    }

    /// Conjugate draw of the measurement-error variance.
    pub fn draw_noise_variance(
        &self,
        state: &mut McmcState,
        fitted: &DMatrix<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let mut resid = state.latent.clone();
        resid -= &self.data.offset;
        resid -= fitted;
        let (a, b) = noise_variance_conditional(self.priors.tau2, &resid);
        state.variances.tau2 = draw_inverse_gamma(a, b, rng);
    }

    /// Re-centers all effects so that temporal, spatial, and interaction
    /// components have zero means, preserving the total linear predictor.
    ///
    /// Interaction row means are absorbed into the spatial effect, column
    /// means into the temporal effect, temporal and spatial means into the
    /// baselines.
    pub fn center_effects(&self, state: &mut McmcState) {
        let (n, t_len) = (self.n(), self.t_len());
        if !state.gamma1.is_empty() {
            let mut row_mean = vec![0.0; n];
            let mut col_mean = vec![0.0; t_len];
            let mut grand = 0.0;
            for t in 0..t_len {
                for i in 0..n {
                    let v = state.gamma1[t * n + i];
                    row_mean[i] += v;
                    col_mean[t] += v;
                    grand += v;
                }
            }
            for v in row_mean.iter_mut() {
                *v /= t_len as f64;
            }
            for v in col_mean.iter_mut() {
                *v /= n as f64;
            }
            grand /= (n * t_len) as f64;
            for t in 0..t_len {
                for i in 0..n {
                    state.gamma1[t * n + i] -= row_mean[i] + col_mean[t] - grand;
                }
            }
            for i in 0..n {
                state.gamma3[i] += row_mean[i] - grand;
            }
            for t in 0..t_len {
                state.gamma2[2 * t] += col_mean[t] - grand;
            }
            state.gamma4[0] += grand;
        }

        for k in 0..2 {
            let mean_t: f64 =
                (0..t_len).map(|t| state.gamma2[2 * t + k]).sum::<f64>() / t_len as f64;
            for t in 0..t_len {
                state.gamma2[2 * t + k] -= mean_t;
            }
            state.gamma4[k] += mean_t;

            let mean_s: f64 = (0..n).map(|i| state.gamma3[k * n + i]).sum::<f64>() / n as f64;
            for i in 0..n {
                state.gamma3[k * n + i] -= mean_s;
            }
            state.gamma4[k] += mean_s;
        }
    }
}

/// Thinned chains and running summaries from one chain.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub interaction: InteractionType,
    pub variant: Variant,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub stream: u64,
    pub n: usize,
    pub t_len: usize,
    pub n_alpha: usize,
    pub delta0_bar: Vec<f64>,
    pub delta1_bar: Vec<f64>,
    /// Confounder coefficients, draws by `p`.
    pub alpha: DMatrix<f64>,
    /// Temporal effects, draws by `T`.
    pub temporal0: DMatrix<f64>,
    pub temporal1: DMatrix<f64>,
    /// Spatial effects, draws by `n`.
    pub spatial0: DMatrix<f64>,
    pub spatial1: DMatrix<f64>,
    pub variance_names: Vec<String>,
    /// Variance chains, draws by `variance_names.len()`.
    pub variances: DMatrix<f64>,
    /// Poisson deviance per retained draw.
    pub deviance: Vec<f64>,
    /// Posterior mean of the Poisson mean surface.
    pub mu_mean: DMatrix<f64>,
    /// Posterior mean of the interaction field.
    pub interaction_mean: DMatrix<f64>,
    /// Subsampled latent draws for posterior-predictive checks.
    pub latent_draws: Vec<DMatrix<f64>>,
    pub mh_acceptance: f64,
    pub runtime_secs: f64,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.delta0_bar.len()
    }
}

/// Runs one chain of the Gibbs sampler.
///
/// `trend` must be supplied for the detrended variants and omitted for the
/// single-step variant, whose regressor is the raw exposure.
pub fn run_chain(
    data: &PanelData,
    trend: Option<&TrendFit>,
    priors: &PriorConfig,
    options: &FitOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PosteriorDraws, SamplerError> {
    options.validate()?;
    let regressor = match options.variant {
        Variant::SingleStep => {
            if trend.is_some() {
                return Err(SamplerError::InvalidOptions(
                    "the single-step variant fits the raw exposure; omit the trend".into(),
                ));
            }
            data.exposure.clone()
        }
        Variant::Full | Variant::NoConfounders => trend
            .ok_or_else(|| {
                SamplerError::InvalidOptions("detrended variants require a trend fit".into())
            })?
            .residual
            .clone(),
    };
    let include_confounders = options.variant != Variant::NoConfounders;
    let sampler = GibbsSampler::new(
        data,
        regressor,
        priors.clone(),
        options.interaction,
        include_confounders,
    )?;
    run_prepared_chain(&sampler, options, rng)
}

/// Runs one chain on an already-constructed sampler.
pub fn run_prepared_chain(
    sampler: &GibbsSampler<'_>,
    options: &FitOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PosteriorDraws, SamplerError> {
    let start = std::time::Instant::now();
    let (n, t_len) = (sampler.n(), sampler.t_len());
    let n_draws = options.n_draws();
    let n_alpha = sampler.design.n_alpha;

    let variance_names = variance_column_names(sampler.interaction, n);
    let mut draws = PosteriorDraws {
        interaction: sampler.interaction,
        variant: options.variant,
        iterations: options.iterations,
        burn_in: options.burn_in,
        thin: options.thin,
        seed: options.seed,
        stream: rng.get_stream(),
        n,
        t_len,
        n_alpha,
        delta0_bar: Vec::with_capacity(n_draws),
        delta1_bar: Vec::with_capacity(n_draws),
        alpha: DMatrix::zeros(n_draws, n_alpha),
        temporal0: DMatrix::zeros(n_draws, t_len),
        temporal1: DMatrix::zeros(n_draws, t_len),
        spatial0: DMatrix::zeros(n_draws, n),
        spatial1: DMatrix::zeros(n_draws, n),
        variances: DMatrix::zeros(n_draws, variance_names.len()),
        variance_names,
        deviance: Vec::with_capacity(n_draws),
        mu_mean: DMatrix::zeros(n, t_len),
        interaction_mean: DMatrix::zeros(n, t_len),
        latent_draws: Vec::new(),
        mh_acceptance: 0.0,
        runtime_secs: 0.0,
    };
    let latent_stride = if options.latent_subsample == 0 || n_draws == 0 {
        0
    } else {
        n_draws.div_ceil(options.latent_subsample).max(1)
    };

    let mut state = sampler.init_state();
    let mut accepted_post = 0usize;
    let mut attempted_post = 0usize;
    let mut window_accepted = DMatrix::<f64>::zeros(n, t_len);
    let mut window_count = 0usize;
    let mut draw_idx = 0usize;

    for iter in 0..options.iterations {
        let system = sampler.build_system(&state);
        for j in [4, 3, 2, 1] {
            if j == 1 && sampler.interaction == InteractionType::T1 {
                continue;
            }
            sampler.draw_gamma_block(j, &mut state, &system, rng)?;
        }
        sampler.center_effects(&mut state);
        sampler.draw_variances(&mut state, rng);

        let fitted = sampler.fitted(&state);
        let (acc, att) = draw_latent_adaptive(
            sampler,
            &mut state,
            &fitted,
            &mut window_accepted,
            &mut window_count,
            iter < options.burn_in,
            rng,
        );
        if iter >= options.burn_in {
            accepted_post += acc;
            attempted_post += att;
        }
        sampler.draw_noise_variance(&mut state, &fitted, rng);

        if iter >= options.burn_in && (iter - options.burn_in) % options.thin == 0 {
            record_draw(sampler, &state, &mut draws, draw_idx);
            if latent_stride > 0 && draw_idx % latent_stride == 0 {
                draws.latent_draws.push(state.latent.clone());
            }
            draw_idx += 1;
        }
    }

    if draw_idx > 0 {
        draws.mu_mean /= draw_idx as f64;
        draws.interaction_mean /= draw_idx as f64;
    }
    draws.mh_acceptance = if attempted_post > 0 {
        accepted_post as f64 / attempted_post as f64
    } else {
        0.0
    };
    draws.runtime_secs = start.elapsed().as_secs_f64();
    Ok(draws)
}

fn variance_column_names(interaction: InteractionType, n: usize) -> Vec<String> {
    let mut names = vec![
        "sigma2_w0".to_string(),
        "sigma2_delta0".to_string(),
        "sigma2_w1".to_string(),
        "sigma2_delta1".to_string(),
        "tau2".to_string(),
    ];
    match interaction {
        InteractionType::T1 => {}
        InteractionType::T5 => {
            for i in 0..n {
                names.push(format!("sigma2_w0_star_{i:04}"));
            }
        }
        _ => names.push("sigma2_w0_star".to_string()),
    }
    names
}

fn record_draw(
    sampler: &GibbsSampler<'_>,
    state: &McmcState,
    draws: &mut PosteriorDraws,
    idx: usize,
) {
    draws.delta0_bar.push(state.delta0_bar());
    draws.delta1_bar.push(state.delta1_bar());
    for k in 0..draws.n_alpha {
        draws.alpha[(idx, k)] = state.gamma4[2 + k];
    }
    for t in 0..draws.t_len {
        draws.temporal0[(idx, t)] = state.gamma2[2 * t];
        draws.temporal1[(idx, t)] = state.gamma2[2 * t + 1];
    }
    for i in 0..draws.n {
        draws.spatial0[(idx, i)] = state.gamma3[i];
        draws.spatial1[(idx, i)] = state.gamma3[draws.n + i];
    }
    let v = &state.variances;
    draws.variances[(idx, 0)] = v.sigma2_w0;
    draws.variances[(idx, 1)] = v.sigma2_delta0;
    draws.variances[(idx, 2)] = v.sigma2_w1;
    draws.variances[(idx, 3)] = v.sigma2_delta1;
    draws.variances[(idx, 4)] = v.tau2;
    for (k, s) in v.sigma2_w0_star.iter().enumerate() {
        draws.variances[(idx, 5 + k)] = *s;
    }

    let mut deviance = 0.0;
    for t in 0..draws.t_len {
        for i in 0..draws.n {
            let theta = state.latent[(i, t)];
            let mu = theta.exp();
            draws.mu_mean[(i, t)] += mu;
            let y = sampler.data().y[(i, t)];
            deviance += y * theta - mu - statrs::function::gamma::ln_gamma(y + 1.0);
        }
    }
    draws.deviance.push(-2.0 * deviance);
    if !state.gamma1.is_empty() {
        for t in 0..draws.t_len {
            for i in 0..draws.n {
                draws.interaction_mean[(i, t)] += state.gamma1[t * draws.n + i];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_latent_adaptive(
    sampler: &GibbsSampler<'_>,
    state: &mut McmcState,
    fitted: &DMatrix<f64>,
    window_accepted: &mut DMatrix<f64>,
    window_count: &mut usize,
    adapting: bool,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let (n, t_len) = (sampler.n(), sampler.t_len());
    let tau2 = state.variances.tau2;
    let mut accepted = 0usize;
    for t in 0..t_len {
        for i in 0..n {
            let y = sampler.data().y[(i, t)];
            let center = sampler.data().offset[(i, t)] + fitted[(i, t)];
            let target = |v: f64| y * v - v.exp() - (v - center) * (v - center) / (2.0 * tau2);
            let (new, acc) = rw_mh_step(state.latent[(i, t)], state.mh_scale[(i, t)], target, rng);
            state.latent[(i, t)] = new;
            if acc {
                accepted += 1;
                if adapting {
                    window_accepted[(i, t)] += 1.0;
                }
            }
        }
    }
    if adapting {
        *window_count += 1;
        if *window_count == MH_ADAPT_WINDOW {
            for t in 0..t_len {
                for i in 0..n {
                    let rate = window_accepted[(i, t)] / MH_ADAPT_WINDOW as f64;
                    let factor = (0.8 * (rate - MH_TARGET_ACCEPTANCE)).exp();
                    state.mh_scale[(i, t)] =
                        (state.mh_scale[(i, t)] * factor).clamp(1e-4, 10.0);
                }
            }
            window_accepted.fill(0.0);
            *window_count = 0;
        }
    }
    (accepted, n * t_len)
}

/// One fitted model: the per-chain draw stores plus the trend used.
pub struct FitResult {
    pub chains: Vec<PosteriorDraws>,
    pub trend: Option<TrendFit>,
}

impl FitResult {
    pub fn primary(&self) -> &PosteriorDraws {
        &self.chains[0]
    }
}

/// Computes the exposure trend (when the variant detrends) and runs
/// `n_chains` chains on independent RNG streams.
pub fn fit_model(
    data: &PanelData,
    coords: &[(f64, f64)],
    priors: &PriorConfig,
    options: &FitOptions,
) -> Result<FitResult, SamplerError> {
    options.validate()?;
    let trend = match options.variant {
        Variant::SingleStep => None,
        _ => Some(
            crate::basis::fit_space_time_trend(
                &data.exposure,
                coords,
                options.spatial_df,
                options.temporal_df,
            )
            .map_err(|e| SamplerError::InvalidOptions(format!("trend fit failed: {e}")))?,
        ),
    };
    let chains: Result<Vec<PosteriorDraws>, SamplerError> = if options.n_chains == 1 {
        let mut rng = stream_rng(options.seed, 0);
        Ok(vec![run_chain(data, trend.as_ref(), priors, options, &mut rng)?])
    } else {
        use rayon::prelude::*;
        (0..options.n_chains)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream_rng(options.seed, c as u64);
                run_chain(data, trend.as_ref(), priors, options, &mut rng)
            })
            .collect()
    };
    Ok(FitResult {
        chains: chains?,
        trend,
    })
}
