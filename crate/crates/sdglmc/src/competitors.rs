//! Pooled hierarchical Poisson benchmarks sharing one sampler skeleton.
//!
//! Each benchmark regresses the latent log-means on an exposure block `A`
//! with area-level coefficients drawn from a common Gaussian, and a nuisance
//! block `C` (intercept, measured confounders, and a smooth function of time
//! where the benchmark uses one). The blocks differ only in how the exposure
//! enters: raw, detrended, interacted with season indicators, harmonics, or
//! confounders.

use crate::basis::{natural_cubic_basis, seasonal_harmonics, BasisError, TrendFit};
use crate::linalg::{sample_gaussian_dense, LinalgError};
use crate::model::{IgPair, ModelError, PanelData};
use crate::sampler::{draw_inverse_gamma, noise_variance_conditional, rw_mh_step};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompetitorError {
    #[error("this benchmark needs the exposure trend; supply a trend fit")]
    MissingTrend,
    #[error("this benchmark needs a season calendar")]
    MissingCalendar,
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("cholesky failure in hierarchical block: {0}")]
    Cholesky(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

/// The benchmark family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompetitorKind {
    /// Exposure only; no adjustment for unmeasured confounding.
    Null,
    /// Adds a natural cubic spline of time to the nuisance block.
    GlmAdj,
    /// Season-specific exposure effects via indicator interactions.
    Dummy,
    /// Exposure effect as a first-harmonic sinusoid.
    Periodic,
    /// Detrended exposure with the trend and a reduced spline as nuisance.
    Jdz,
    /// Exposure interacted with each measured confounder.
    GlmInt,
    /// Exposure interacted with smoothed confounders.
    GlmIntSmooth,
}

impl CompetitorKind {
    pub const ALL: [CompetitorKind; 7] = [
        CompetitorKind::Null,
        CompetitorKind::GlmAdj,
        CompetitorKind::Dummy,
        CompetitorKind::Periodic,
        CompetitorKind::Jdz,
        CompetitorKind::GlmInt,
        CompetitorKind::GlmIntSmooth,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "null" => Some(Self::Null),
            "glmadj" | "glm_adj" => Some(Self::GlmAdj),
            "dummy" => Some(Self::Dummy),
            "periodic" => Some(Self::Periodic),
            "jdz" => Some(Self::Jdz),
            "glmint" | "glm_int" => Some(Self::GlmInt),
            "glmint_smooth" | "glmintsmooth" => Some(Self::GlmIntSmooth),
            _ => None,
        }
    }
}

impl std::fmt::Display for CompetitorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Null => "null",
            Self::GlmAdj => "glmadj",
            Self::Dummy => "dummy",
            Self::Periodic => "periodic",
            Self::Jdz => "jdz",
            Self::GlmInt => "glmint",
            Self::GlmIntSmooth => "glmint_smooth",
        };
        f.write_str(s)
    }
}

/// Four-season calendar over a configurable period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeasonCalendar {
    pub period: usize,
    /// Ascending season start days within the period; the stretch from the
    /// last start wraps around to the first.
    pub starts: [usize; 4],
}

impl SeasonCalendar {
    /// Calendar seasons of a 365-day year (spring from March 1).
    pub fn calendar_year() -> Self {
        Self {
            period: 365,
            starts: [59, 151, 243, 334],
        }
    }

    /// Four equal quarters of an arbitrary period.
    pub fn quarters(period: usize) -> Self {
        assert!(period >= 4);
        Self {
            period,
            starts: [0, period / 4, period / 2, 3 * period / 4],
        }
    }

    pub fn season_of(&self, t: usize) -> usize {
        let d = t % self.period;
        if d < self.starts[0] {
            return 3;
        }
        for j in (0..4).rev() {
            if d >= self.starts[j] {
                return j;
            }
        }
        3
    }
}

/// Inputs that some benchmarks require.
#[derive(Debug, Clone, Default)]
pub struct DesignContext {
    pub trend: Option<TrendFit>,
    pub season: Option<SeasonCalendar>,
    /// Degrees of freedom of the nuisance time spline.
    pub df_time: usize,
    /// Period of the harmonic exposure effect.
    pub harmonic_period: f64,
    /// Basis dimensions for the smoothed-confounder benchmark.
    pub smooth_df: (usize, usize),
}

impl DesignContext {
    pub fn new(df_time: usize) -> Self {
        Self {
            trend: None,
            season: None,
            df_time,
            harmonic_period: 365.0,
            smooth_df: (15, 15),
        }
    }
}

/// Assembled benchmark design.
#[derive(Debug, Clone)]
pub struct CompetitorSpec {
    pub kind: CompetitorKind,
    /// Exposure-block covariates, `n T x p_a`, row `t * n + i`.
    pub a_design: DMatrix<f64>,
    /// Nuisance covariates, `n T x p_c`.
    pub c_design: DMatrix<f64>,
    /// Per-column effect patterns: the implied exposure effect at `(i, t)`
    /// is the area coefficient vector dotted with these surfaces.
    pub effect_basis: Vec<DMatrix<f64>>,
    pub df_time: usize,
}

impl CompetitorSpec {
    pub fn p_a(&self) -> usize {
        self.a_design.ncols()
    }

    pub fn p_c(&self) -> usize {
        self.c_design.ncols()
    }

    /// Implied exposure-effect surface for one coefficient matrix
    /// (`n x p_a` rows of area coefficients).
    pub fn effect_surface(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, t_len) = self.effect_basis[0].shape();
        let mut out = DMatrix::zeros(n, t_len);
        for (k, phi) in self.effect_basis.iter().enumerate() {
            for t in 0..t_len {
                for i in 0..n {
                    out[(i, t)] += a[(i, k)] * phi[(i, t)];
                }
            }
        }
        out
    }
}

/// Builds the exposure and nuisance designs for a benchmark.
pub fn build_design(
    kind: CompetitorKind,
    data: &PanelData,
    coords: &[(f64, f64)],
    ctx: &DesignContext,
) -> Result<CompetitorSpec, CompetitorError> {
    let (n, t_len) = data.y.shape();
    let p = data.n_confounders();
    let times: Vec<f64> = (0..t_len).map(|t| t as f64).collect();

    let time_spline = |df: usize| -> Result<DMatrix<f64>, CompetitorError> {
        Ok(natural_cubic_basis(&times, df)?.design)
    };

    // Nuisance block: intercept, confounders, and optionally the time spline
    // (plus the trend itself for the detrended benchmark).
    let mut c_cols: Vec<DVector<f64>> = vec![DVector::from_element(n * t_len, 1.0)];
    for k in 0..p {
        c_cols.push(data.confounders.column(k).into_owned());
    }
    let ones = DMatrix::from_element(n, t_len, 1.0);

    let push_time_cols = |c_cols: &mut Vec<DVector<f64>>, b: &DMatrix<f64>| {
        for k in 0..b.ncols() {
            let mut col = DVector::zeros(n * t_len);
            for t in 0..t_len {
                for i in 0..n {
                    col[t * n + i] = b[(t, k)];
                }
            }
            c_cols.push(col);
        }
    };

    let flat = |m: &DMatrix<f64>| -> DVector<f64> {
        let mut col = DVector::zeros(n * t_len);
        for t in 0..t_len {
            for i in 0..n {
                col[t * n + i] = m[(i, t)];
            }
        }
        col
    };

    let x_flat = flat(&data.exposure);

    let (a_cols, effect_basis): (Vec<DVector<f64>>, Vec<DMatrix<f64>>) = match kind {
        CompetitorKind::Null => {
            (vec![x_flat.clone()], vec![ones.clone()])
        }
        CompetitorKind::GlmAdj => {
            push_time_cols(&mut c_cols, &time_spline(ctx.df_time)?);
            (vec![x_flat.clone()], vec![ones.clone()])
        }
        CompetitorKind::Dummy => {
            let season = ctx.season.as_ref().ok_or(CompetitorError::MissingCalendar)?;
            push_time_cols(&mut c_cols, &time_spline(ctx.df_time)?);
            let mut cols = Vec::with_capacity(4);
            let mut basis = Vec::with_capacity(4);
            for j in 0..4 {
                let ind = DMatrix::from_fn(n, t_len, |_, t| {
                    if season.season_of(t) == j {
                        1.0
                    } else {
                        0.0
                    }
                });
                cols.push(flat(&data.exposure.component_mul(&ind)));
                basis.push(ind);
            }
            (cols, basis)
        }
        CompetitorKind::Periodic => {
            push_time_cols(&mut c_cols, &time_spline(ctx.df_time)?);
            let harm = seasonal_harmonics(&times, ctx.harmonic_period)?;
            let cosm = DMatrix::from_fn(n, t_len, |_, t| harm[(t, 0)]);
            let sinm = DMatrix::from_fn(n, t_len, |_, t| harm[(t, 1)]);
            (
                vec![
                    x_flat.clone(),
                    flat(&data.exposure.component_mul(&cosm)),
                    flat(&data.exposure.component_mul(&sinm)),
                ],
                vec![ones.clone(), cosm, sinm],
            )
        }
        CompetitorKind::Jdz => {
            let trend = ctx.trend.as_ref().ok_or(CompetitorError::MissingTrend)?;
            c_cols.push(flat(&trend.fitted));
            if ctx.df_time > 1 {
                push_time_cols(&mut c_cols, &time_spline(ctx.df_time - 1)?);
            }
            (vec![flat(&trend.residual)], vec![ones.clone()])
        }
        CompetitorKind::GlmInt => {
            push_time_cols(&mut c_cols, &time_spline(ctx.df_time)?);
            let mut cols = vec![x_flat.clone()];
            let mut basis = vec![ones.clone()];
            for k in 0..p {
                let mk = DMatrix::from_fn(n, t_len, |i, t| data.confounders[(t * n + i, k)]);
                cols.push(flat(&data.exposure.component_mul(&mk)));
                basis.push(mk);
            }
            (cols, basis)
        }
        CompetitorKind::GlmIntSmooth => {
            push_time_cols(&mut c_cols, &time_spline(ctx.df_time)?);
            let (sdf, tdf) = ctx.smooth_df;
            let mut cols = vec![x_flat.clone()];
            let mut basis = vec![ones.clone()];
            for k in 0..p {
                let mk = DMatrix::from_fn(n, t_len, |i, t| data.confounders[(t * n + i, k)]);
                let smooth = crate::basis::fit_space_time_trend(
                    &mk,
                    coords,
                    sdf.min(n),
                    tdf.min(t_len),
                )?;
                cols.push(flat(&data.exposure.component_mul(&smooth.fitted)));
                basis.push(smooth.fitted);
            }
            (cols, basis)
        }
    };

    let a_design = DMatrix::from_columns(&a_cols);
    let c_design = DMatrix::from_columns(&c_cols);
    Ok(CompetitorSpec {
        kind,
        a_design,
        c_design,
        effect_basis,
        df_time: ctx.df_time,
    })
}

/// Chain settings and hyperparameters of the benchmark hierarchy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompetitorOptions {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub latent_subsample: usize,
    pub tau_eps_prior: IgPair,
    /// Slab variance of the nuisance coefficients and the pooled mean.
    pub slab_var: f64,
    /// Inverse-Wishart shape is `p_a + iw_shape_offset`.
    pub iw_shape_offset: f64,
    /// Inverse-Wishart scale matrix is `iw_scale * I`.
    pub iw_scale: f64,
}

impl Default for CompetitorOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            burn_in: 500,
            thin: 1,
            seed: 1,
            latent_subsample: 200,
            tau_eps_prior: IgPair::new(1.0, 2.1e-5),
            slab_var: 1e6,
            iw_shape_offset: 1.1,
            iw_scale: 1e-4,
        }
    }
}

/// Posterior chains from the hierarchical benchmark.
#[derive(Debug, Clone)]
pub struct HierarchicalDraws {
    pub kind: CompetitorKind,
    pub p_a: usize,
    /// Pooled exposure coefficients, draws by `p_a`.
    pub mu_a: DMatrix<f64>,
    /// Between-area covariance draws.
    pub sigma_a: Vec<DMatrix<f64>>,
    /// Area-level exposure coefficients per draw (`n x p_a`).
    pub a_draws: Vec<DMatrix<f64>>,
    pub tau_eps: Vec<f64>,
    pub deviance: Vec<f64>,
    pub mu_mean: DMatrix<f64>,
    pub latent_draws: Vec<DMatrix<f64>>,
    pub mh_acceptance: f64,
}

impl HierarchicalDraws {
    pub fn n_draws(&self) -> usize {
        self.tau_eps.len()
    }
}

/// Draws from an inverse-Wishart with shape `nu` and scale matrix `psi`
/// (density proportional to `|S|^{-(nu + p + 1) / 2} exp(-tr(psi S^-1) / 2)`),
/// by inverting a Bartlett-decomposed Wishart draw.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    nu: f64,
    psi: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>, CompetitorError> {
    let p = psi.nrows();
    if nu <= (p - 1) as f64 {
        return Err(CompetitorError::InvalidOptions(format!(
            "inverse-Wishart shape {nu} must exceed p - 1 = {}",
            p - 1
        )));
    }
    let psi_inv = psi
        .clone()
        .cholesky()
        .ok_or_else(|| CompetitorError::Cholesky("IW scale not positive definite".into()))?
        .solve(&DMatrix::identity(p, p));
    let l = psi_inv
        .cholesky()
        .ok_or_else(|| CompetitorError::Cholesky("IW scale inverse not positive definite".into()))?
        .unpack();
    let mut bart = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi2 = Gamma::new((nu - i as f64) / 2.0, 2.0)
            .map_err(|e| CompetitorError::InvalidOptions(e.to_string()))?;
        bart[(i, i)] = chi2.sample(rng).sqrt();
        for j in 0..i {
            bart[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * bart;
    let w = &la * la.transpose();
    let sigma = w
        .cholesky()
        .ok_or_else(|| CompetitorError::Cholesky("Wishart draw singular".into()))?
        .solve(&DMatrix::identity(p, p));
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Fits the benchmark hierarchy by Gibbs sampling with the same latent
/// Metropolis kernel as the main model.
pub fn fit_hierarchical(
    spec: &CompetitorSpec,
    data: &PanelData,
    options: &CompetitorOptions,
    rng: &mut ChaCha8Rng,
) -> Result<HierarchicalDraws, CompetitorError> {
    if options.burn_in > options.iterations || options.thin == 0 {
        return Err(CompetitorError::InvalidOptions(
            "burn_in must not exceed iterations and thin must be >= 1".into(),
        ));
    }
    let (n, t_len) = data.y.shape();
    let p_a = spec.p_a();
    let p_c = spec.p_c();
    let m = p_a + p_c;
    if p_a >= n {
        log::warn!(
            "between-area covariance weakly identified: p_a = {p_a} with only {n} areas"
        );
    }

    // Per-area design rows and Gram matrices, fixed across iterations.
    let mut r_i: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut rtr: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = DMatrix::zeros(t_len, m);
        for t in 0..t_len {
            for k in 0..p_a {
                r[(t, k)] = spec.a_design[(t * n + i, k)];
            }
            for k in 0..p_c {
                r[(t, p_a + k)] = spec.c_design[(t * n + i, k)];
            }
        }
        rtr.push(r.transpose() * &r);
        r_i.push(r);
    }

    let nu0 = p_a as f64 + options.iw_shape_offset;
    let psi0 = DMatrix::identity(p_a, p_a) * options.iw_scale;

    // State.
    let mut theta = DMatrix::<f64>::zeros(m, n);
    let mut mu_a = DVector::<f64>::zeros(p_a);
    let mut sigma_a = DMatrix::<f64>::identity(p_a, p_a) * 0.01;
    let mut tau_eps = options.tau_eps_prior.init_value();
    let mut latent = DMatrix::from_fn(n, t_len, |i, t| {
        (data.y[(i, t)] + 0.5).ln() - data.offset[(i, t)]
    });
    let mut mh_scale = DMatrix::from_element(n, t_len, 0.1);

    let n_draws = if options.iterations <= options.burn_in {
        0
    } else {
        (options.iterations - options.burn_in).div_ceil(options.thin)
    };
    let latent_stride = if options.latent_subsample == 0 || n_draws == 0 {
        0
    } else {
        n_draws.div_ceil(options.latent_subsample).max(1)
    };
    let mut draws = HierarchicalDraws {
        kind: spec.kind,
        p_a,
        mu_a: DMatrix::zeros(n_draws, p_a),
        sigma_a: Vec::with_capacity(n_draws),
        a_draws: Vec::with_capacity(n_draws),
        tau_eps: Vec::with_capacity(n_draws),
        deviance: Vec::with_capacity(n_draws),
        mu_mean: DMatrix::zeros(n, t_len),
        latent_draws: Vec::new(),
        mh_acceptance: 0.0,
    };

    let mut accepted_post = 0usize;
    let mut attempted_post = 0usize;
    let mut window_acc = DMatrix::<f64>::zeros(n, t_len);
    let mut window_count = 0usize;
    let mut draw_idx = 0usize;

    for iter in 0..options.iterations {
        let sigma_a_inv = sigma_a
            .clone()
            .cholesky()
            .ok_or_else(|| CompetitorError::Cholesky("between-area covariance".into()))?
            .solve(&DMatrix::identity(p_a, p_a));

        // Area coefficient blocks.
        let inv_tau = 1.0 / tau_eps;
        let prior_mean_part = &sigma_a_inv * &mu_a;
        for i in 0..n {
            let mut prec = &rtr[i] * inv_tau;
            for a in 0..p_a {
                for b in 0..p_a {
                    prec[(a, b)] += sigma_a_inv[(a, b)];
                }
            }
            for c in 0..p_c {
                prec[(p_a + c, p_a + c)] += 1.0 / options.slab_var;
            }
            let resid = DVector::from_fn(t_len, |t, _| latent[(i, t)] - data.offset[(i, t)]);
            let mut rhs = r_i[i].transpose() * resid * inv_tau;
            for a in 0..p_a {
                rhs[a] += prior_mean_part[a];
            }
            let drawn = sample_gaussian_dense(&prec, &rhs, rng)
                .map_err(|e| CompetitorError::Cholesky(e.to_string()))?;
            theta.set_column(i, &drawn);
        }

        // Pooled mean.
        let mut prec = &sigma_a_inv * n as f64;
        for a in 0..p_a {
            prec[(a, a)] += 1.0 / options.slab_var;
        }
        let mut sum_a = DVector::zeros(p_a);
        for i in 0..n {
            for a in 0..p_a {
                sum_a[a] += theta[(a, i)];
            }
        }
        let rhs = &sigma_a_inv * sum_a;
        mu_a = sample_gaussian_dense(&prec, &rhs, rng)
            .map_err(|e| CompetitorError::Cholesky(e.to_string()))?;

        // Between-area covariance.
        let mut scatter = psi0.clone();
        for i in 0..n {
            let dev = DVector::from_fn(p_a, |a, _| theta[(a, i)] - mu_a[a]);
            scatter += &dev * dev.transpose();
        }
        sigma_a = sample_inverse_wishart(nu0 + n as f64, &scatter, rng)?;

        // Latent field.
        let mut fitted = DMatrix::zeros(n, t_len);
        for i in 0..n {
            let f = &r_i[i] * theta.column(i);
            for t in 0..t_len {
                fitted[(i, t)] = f[t];
            }
        }
        let mut accepted = 0usize;
        for t in 0..t_len {
            for i in 0..n {
                let y = data.y[(i, t)];
                let center = data.offset[(i, t)] + fitted[(i, t)];
                let target =
                    |v: f64| y * v - v.exp() - (v - center) * (v - center) / (2.0 * tau_eps);
                let (new, acc) = rw_mh_step(latent[(i, t)], mh_scale[(i, t)], target, rng);
                latent[(i, t)] = new;
                if acc {
                    accepted += 1;
                    if iter < options.burn_in {
                        window_acc[(i, t)] += 1.0;
                    }
                }
            }
        }
        if iter < options.burn_in {
            window_count += 1;
            if window_count == 50 {
                for t in 0..t_len {
                    for i in 0..n {
                        let rate = window_acc[(i, t)] / 50.0;
                        let factor = (0.8 * (rate - 0.44)).exp();
                        mh_scale[(i, t)] = (mh_scale[(i, t)] * factor).clamp(1e-4, 10.0);
                    }
                }
                window_acc.fill(0.0);
                window_count = 0;
            }
        } else {
            accepted_post += accepted;
            attempted_post += n * t_len;
        }

        // Measurement-error variance.
        let mut resid = latent.clone();
        resid -= &data.offset;
        resid -= &fitted;
        let (a, b) = noise_variance_conditional(options.tau_eps_prior, &resid);
        tau_eps = draw_inverse_gamma(a, b, rng);

        if iter >= options.burn_in && (iter - options.burn_in) % options.thin == 0 {
            for k in 0..p_a {
                draws.mu_a[(draw_idx, k)] = mu_a[k];
            }
            draws.sigma_a.push(sigma_a.clone());
            draws
                .a_draws
                .push(DMatrix::from_fn(n, p_a, |i, k| theta[(k, i)]));
            draws.tau_eps.push(tau_eps);
            let mut deviance = 0.0;
            for t in 0..t_len {
                for i in 0..n {
                    let v = latent[(i, t)];
                    let mu = v.exp();
                    draws.mu_mean[(i, t)] += mu;
                    deviance +=
                        data.y[(i, t)] * v - mu - statrs::function::gamma::ln_gamma(data.y[(i, t)] + 1.0);
                }
            }
            draws.deviance.push(-2.0 * deviance);
            if latent_stride > 0 && draw_idx % latent_stride == 0 {
                draws.latent_draws.push(latent.clone());
            }
            draw_idx += 1;
        }
    }

    if draw_idx > 0 {
        draws.mu_mean /= draw_idx as f64;
    }
    draws.mh_acceptance = if attempted_post > 0 {
        accepted_post as f64 / attempted_post as f64
    } else {
        0.0
    };
    Ok(draws)
}

/// Posterior summary of the pooled time-`t` exposure effect implied by the
/// benchmark, on the percent-change scale.
pub struct PathSummary {
    pub mean: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

pub fn pooled_effect_path(draws: &HierarchicalDraws, spec: &CompetitorSpec) -> PathSummary {
    let (n, t_len) = spec.effect_basis[0].shape();
    // Spatial averages of each effect pattern.
    let phi_bar = DMatrix::from_fn(spec.p_a(), t_len, |k, t| {
        spec.effect_basis[k].column(t).sum() / n as f64
    });
    let n_draws = draws.n_draws();
    let mut per_draw = DMatrix::zeros(n_draws, t_len);
    for d in 0..n_draws {
        for t in 0..t_len {
            let mut v = 0.0;
            for k in 0..spec.p_a() {
                v += draws.mu_a[(d, k)] * phi_bar[(k, t)];
            }
            per_draw[(d, t)] = crate::model::percent_change10(v);
        }
    }
    summarize_paths(&per_draw)
}

/// Column-wise mean and central 95% interval.
pub fn summarize_paths(per_draw: &DMatrix<f64>) -> PathSummary {
    let (n_draws, t_len) = per_draw.shape();
    let mut mean = DVector::zeros(t_len);
    let mut lower = DVector::zeros(t_len);
    let mut upper = DVector::zeros(t_len);
    let mut buf = vec![0.0; n_draws];
    for t in 0..t_len {
        for d in 0..n_draws {
            buf[d] = per_draw[(d, t)];
        }
        mean[t] = buf.iter().sum::<f64>() / n_draws.max(1) as f64;
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower[t] = quantile_sorted(&buf, 0.025);
        upper[t] = quantile_sorted(&buf, 0.975);
    }
    PathSummary { mean, lower, upper }
}

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SpatialGraph;
    use approx::assert_abs_diff_eq;

    fn small_panel(p: usize) -> PanelData {
        let g = SpatialGraph::lattice(2, 3);
        let (n, t_len) = (6, 20);
        let mut rng = crate::rng::stream_rng(3, 0);
        use rand::Rng;
        let y = DMatrix::from_fn(n, t_len, |_, _| rng.gen_range(0.0_f64..30.0).floor());
        let offset = DMatrix::from_element(n, t_len, (10.0f64).ln());
        let exposure = DMatrix::from_fn(n, t_len, |i, t| {
            10.0 + (t as f64 * 0.3).sin() * 3.0 + i as f64 + rng.gen_range(-1.0..1.0)
        });
        let conf = DMatrix::from_fn(n * t_len, p, |r, k| {
            ((r as f64) * 0.01 + k as f64).sin()
        });
        PanelData::new(y, offset, exposure, conf, g).unwrap()
    }

    #[test]
    fn null_design_shapes() {
        let data = small_panel(2);
        let coords = SpatialGraph::lattice_coords(2, 3);
        let spec = build_design(CompetitorKind::Null, &data, &coords, &DesignContext::new(4)).unwrap();
        assert_eq!(spec.p_a(), 1);
        // intercept + 2 confounders
        assert_eq!(spec.p_c(), 3);
        // A equals the raw exposure.
        for t in 0..20 {
            for i in 0..6 {
                assert_eq!(spec.a_design[(t * 6 + i, 0)], data.exposure[(i, t)]);
            }
        }
    }

    #[test]
    fn periodic_design_at_time_zero() {
        let data = small_panel(0);
        let coords = SpatialGraph::lattice_coords(2, 3);
        let mut ctx = DesignContext::new(3);
        ctx.harmonic_period = 10.0;
        let spec = build_design(CompetitorKind::Periodic, &data, &coords, &ctx).unwrap();
        assert_eq!(spec.p_a(), 3);
        // At t = 0 the harmonic pair is (1, 0), so the columns are (X, X, 0).
        for i in 0..6 {
            assert_eq!(spec.a_design[(i, 0)], data.exposure[(i, 0)]);
            assert_abs_diff_eq!(spec.a_design[(i, 1)], data.exposure[(i, 0)], epsilon = 1e-12);
            assert_abs_diff_eq!(spec.a_design[(i, 2)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dummy_needs_calendar_and_steps() {
        let data = small_panel(0);
        let coords = SpatialGraph::lattice_coords(2, 3);
        assert!(matches!(
            build_design(CompetitorKind::Dummy, &data, &coords, &DesignContext::new(3)),
            Err(CompetitorError::MissingCalendar)
        ));
        let mut ctx = DesignContext::new(3);
        ctx.season = Some(SeasonCalendar::quarters(20));
        let spec = build_design(CompetitorKind::Dummy, &data, &coords, &ctx).unwrap();
        assert_eq!(spec.p_a(), 4);
        // Exactly one indicator active per time.
        for t in 0..20 {
            let active: f64 = (0..4).map(|j| spec.effect_basis[j][(0, t)]).sum();
            assert_eq!(active, 1.0);
        }
    }

    #[test]
    fn jdz_detrended_mean_near_zero() {
        let data = small_panel(1);
        let coords = SpatialGraph::lattice_coords(2, 3);
        let trend =
            crate::basis::fit_space_time_trend(&data.exposure, &coords, 3, 5).unwrap();
        assert!(matches!(
            build_design(CompetitorKind::Jdz, &data, &coords, &DesignContext::new(4)),
            Err(CompetitorError::MissingTrend)
        ));
        let mut ctx = DesignContext::new(4);
        ctx.trend = Some(trend);
        let spec = build_design(CompetitorKind::Jdz, &data, &coords, &ctx).unwrap();
        // Residual property: detrended exposure averages to zero because the
        // basis spans the intercept.
        let mean = spec.a_design.column(0).sum() / spec.a_design.nrows() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn glmint_adds_confounder_interactions() {
        let data = small_panel(2);
        let coords = SpatialGraph::lattice_coords(2, 3);
        let spec =
            build_design(CompetitorKind::GlmInt, &data, &coords, &DesignContext::new(3)).unwrap();
        assert_eq!(spec.p_a(), 3);
        for t in 0..20 {
            for i in 0..6 {
                let r = t * 6 + i;
                assert_abs_diff_eq!(
                    spec.a_design[(r, 1)],
                    data.exposure[(i, t)] * data.confounders[(r, 0)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn brute_force_design_oracle() {
        // Row-by-row reconstruction of every kind (smooth variant excluded:
        // its columns come from a fitted surface checked elsewhere).
        let data = small_panel(2);
        let coords = SpatialGraph::lattice_coords(2, 3);
        let trend = crate::basis::fit_space_time_trend(&data.exposure, &coords, 3, 5).unwrap();
        let season = SeasonCalendar::quarters(20);
        let times: Vec<f64> = (0..20).map(|t| t as f64).collect();
        let b = natural_cubic_basis(&times, 3).unwrap().design;
        for kind in [
            CompetitorKind::Null,
            CompetitorKind::GlmAdj,
            CompetitorKind::Dummy,
            CompetitorKind::Periodic,
            CompetitorKind::Jdz,
            CompetitorKind::GlmInt,
        ] {
            let mut ctx = DesignContext::new(3);
            ctx.trend = Some(trend.clone());
            ctx.season = Some(season.clone());
            ctx.harmonic_period = 10.0;
            let spec = build_design(kind, &data, &coords, &ctx).unwrap();
            for t in 0..20 {
                for i in 0..6 {
                    let r = t * 6 + i;
                    let x = data.exposure[(i, t)];
                    let expected_a: Vec<f64> = match kind {
                        CompetitorKind::Null | CompetitorKind::GlmAdj => vec![x],
                        CompetitorKind::Dummy => (0..4)
                            .map(|j| if season.season_of(t) == j { x } else { 0.0 })
                            .collect(),
                        CompetitorKind::Periodic => {
                            let w = 2.0 * std::f64::consts::PI * t as f64 / 10.0;
                            vec![x, x * w.cos(), x * w.sin()]
                        }
                        CompetitorKind::Jdz => vec![x - trend.fitted[(i, t)]],
                        CompetitorKind::GlmInt => {
                            let mut v = vec![x];
                            for k in 0..2 {
                                v.push(x * data.confounders[(r, k)]);
                            }
                            v
                        }
                        CompetitorKind::GlmIntSmooth => unreachable!(),
                    };
                    for (k, e) in expected_a.iter().enumerate() {
                        assert_abs_diff_eq!(spec.a_design[(r, k)], *e, epsilon = 1e-10);
                    }
                    // Shared nuisance structure: intercept then confounders.
                    assert_eq!(spec.c_design[(r, 0)], 1.0);
                    for k in 0..2 {
                        assert_eq!(spec.c_design[(r, 1 + k)], data.confounders[(r, k)]);
                    }
                    if kind == CompetitorKind::GlmAdj {
                        for c in 0..3 {
                            assert_abs_diff_eq!(
                                spec.c_design[(r, 3 + c)],
                                b[(t, c)],
                                epsilon = 1e-12
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn season_calendar_wraps() {
        let cal = SeasonCalendar::calendar_year();
        assert_eq!(cal.season_of(0), 3); // early January is the wrap season
        assert_eq!(cal.season_of(60), 0);
        assert_eq!(cal.season_of(200), 1);
        assert_eq!(cal.season_of(250), 2);
        assert_eq!(cal.season_of(340), 3);
        assert_eq!(cal.season_of(365), 3); // next year wraps
    }

    #[test]
    fn inverse_wishart_precision_moment() {
        // E[S^-1] = nu * Psi^-1 for the Wishart underneath, which holds for
        // any shape above p - 1, including the near-degenerate default.
        let mut rng = crate::rng::stream_rng(10, 0);
        let p = 2;
        let nu = p as f64 + 1.1;
        let psi = DMatrix::identity(p, p) * 1e-4;
        let mut acc = DMatrix::zeros(p, p);
        let n = 40_000;
        for _ in 0..n {
            let s = sample_inverse_wishart(nu, &psi, &mut rng).unwrap();
            acc += s
                .cholesky()
                .unwrap()
                .solve(&DMatrix::identity(p, p));
        }
        let emp = acc / n as f64;
        let expected = DMatrix::identity(p, p) * (nu / 1e-4);
        assert!(
            (emp.clone() - &expected).norm() / expected.norm() < 0.05,
            "empirical {emp}"
        );
    }

    #[test]
    fn inverse_wishart_mean_when_it_exists() {
        // E[S] = Psi / (nu - p - 1) when nu > p + 1.
        let mut rng = crate::rng::stream_rng(11, 0);
        let p = 2;
        let nu = p as f64 + 5.0;
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mut acc = DMatrix::zeros(p, p);
        let n = 60_000;
        for _ in 0..n {
            acc += sample_inverse_wishart(nu, &psi, &mut rng).unwrap();
        }
        let emp = acc / n as f64;
        let expected = &psi / (nu - p as f64 - 1.0);
        assert!((emp - &expected).norm() / expected.norm() < 0.05);
    }

    #[test]
    fn quantile_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_abs_diff_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_abs_diff_eq!(quantile_sorted(&v, 1.0), 5.0);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.25), 2.0);
    }
}
