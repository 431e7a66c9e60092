//! Synthetic panel generation: correlated exposure/confounder fields as
//! stationary spatial VAR(1) processes with spatially structured innovations,
//! harmonic mean surfaces, and Poisson outcomes under configurable true
//! effect surfaces.

use crate::graph::{GraphError, SpatialGraph};
use crate::model::{ModelError, PanelData};
use crate::rng::{derive_seed, stream_rng};
use crate::summary::EffectComponents;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("temporal autocorrelation must lie in [0, 1), got {0}")]
    PhiTemporalOutOfRange(f64),
    #[error("graph with no edges cannot carry spatially structured innovations")]
    DegenerateGraph,
    #[error("scenario config invalid: {0}")]
    InvalidConfig(String),
    #[error("linear predictor overflow: theta = {0:.2} at unit {1}, time {2} (check scales)")]
    OverflowGuard(f64, usize, usize),
    #[error("estimator `{name}` failed: {reason}")]
    Estimator { name: String, reason: String },
}

/// Harmonic mean surface `level + sum_k amplitude_k sin(2 pi t / period_k + phase_k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanSpec {
    pub level: f64,
    pub harmonics: Vec<Harmonic>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl MeanSpec {
    pub fn constant(level: f64) -> Self {
        Self {
            level,
            harmonics: Vec::new(),
        }
    }

    pub fn annual(level: f64, amplitude: f64, period: f64) -> Self {
        Self {
            level,
            harmonics: vec![Harmonic {
                amplitude,
                period,
                phase: 0.0,
            }],
        }
    }

    pub fn eval(&self, t: usize) -> f64 {
        let tf = t as f64;
        self.level
            + self
                .harmonics
                .iter()
                .map(|h| h.amplitude * (2.0 * std::f64::consts::PI * tf / h.period + h.phase).sin())
                .sum::<f64>()
    }
}

/// True slope surface of the generated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EffectSurface {
    /// Additive truth: baseline plus a centered sinusoidal temporal path and
    /// a centered radial spatial pattern (lower toward the domain centre).
    Components {
        baseline: f64,
        temporal_amplitude: f64,
        temporal_period: f64,
        spatial_amplitude: f64,
    },
    /// Cubic exposure-response: the outcome uses
    /// `f(x) = g0 + g1 x + g2 x^2 + g3 x^3` and the true local slope is the
    /// analytic derivative evaluated at the large-scale trend,
    /// `g1 + 2 g2 xhat + 3 g3 xhat^2`.
    TrendPolynomial { g0: f64, g1: f64, g2: f64, g3: f64 },
}

impl EffectSurface {
    /// Constant truth at the stated percent change for a 10-unit increase.
    pub fn constant_percent(percent: f64) -> Self {
        EffectSurface::Components {
            baseline: (1.0 + percent / 100.0).ln() / 10.0,
            temporal_amplitude: 0.0,
            temporal_period: 1.0,
            spatial_amplitude: 0.0,
        }
    }
}

/// All knobs of the data-generating mechanism.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub t_len: usize,
    pub phi_x_s: f64,
    pub phi_x_t: f64,
    pub phi_z_s: f64,
    pub phi_z_t: f64,
    pub rho_xz: f64,
    pub tau_x2: f64,
    pub tau_z2: f64,
    pub tau_u2: f64,
    pub beta0: f64,
    pub effect: EffectSurface,
    pub mean_x: MeanSpec,
    pub mean_z: MeanSpec,
    /// Constant expected count behind the offset.
    pub expected_count: f64,
    /// Basis dimensions used when the truth needs the exposure trend.
    pub trend_spatial_df: usize,
    pub trend_temporal_df: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    fn base(name: &str, n: usize, t_len: usize) -> Self {
        Self {
            name: name.to_string(),
            n,
            t_len,
            phi_x_s: 0.2,
            phi_x_t: 0.2,
            phi_z_s: 0.98,
            phi_z_t: 0.98,
            rho_xz: 0.5,
            tau_x2: 4e-4,
            tau_z2: 1e-3,
            tau_u2: 1e-3,
            beta0: 0.1,
            effect: EffectSurface::Components {
                baseline: (1.05f64).ln() / 10.0,
                temporal_amplitude: 0.002,
                temporal_period: 365.0,
                spatial_amplitude: 0.001,
            },
            mean_x: MeanSpec::annual(18.0, 10.0, 365.0),
            mean_z: MeanSpec::annual(0.0, 0.1, 365.0),
            expected_count: 100.0,
            trend_spatial_df: 5,
            trend_temporal_df: 20,
            seed: 1,
        }
    }

    /// Confounder smoother than the exposure in both space and time.
    pub fn s1(n: usize, t_len: usize) -> Self {
        Self::base("S1", n, t_len)
    }

    /// Confounder smoother than the exposure only in space.
    pub fn s2(n: usize, t_len: usize) -> Self {
        let mut cfg = Self::base("S2", n, t_len);
        cfg.phi_x_t = 0.98;
        cfg.phi_z_t = 0.2;
        cfg
    }

    /// Confounder smoother than the exposure only in time.
    pub fn s3(n: usize, t_len: usize) -> Self {
        let mut cfg = Self::base("S3", n, t_len);
        cfg.phi_x_s = 0.98;
        cfg.phi_z_s = 0.2;
        cfg
    }

    pub fn preset(name: &str, n: usize, t_len: usize) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s1" => Some(Self::s1(n, t_len)),
            "s2" => Some(Self::s2(n, t_len)),
            "s3" => Some(Self::s3(n, t_len)),
            _ => None,
        }
    }

    /// Desk-scale re-dimensioning: shortens the seasonal period to `period`
    /// and rescales the innovation sizes so the local effect stays
    /// identifiable on a small lattice with a short window. The
    /// autocorrelation structure and the cross-correlation are untouched.
    pub fn desk_scale(mut self, period: f64) -> Self {
        for h in self.mean_x.harmonics.iter_mut() {
            h.period = period;
        }
        for h in self.mean_z.harmonics.iter_mut() {
            h.period = period;
        }
        self.mean_z.harmonics[0].amplitude = 0.05;
        if let EffectSurface::Components {
            temporal_period, ..
        } = &mut self.effect
        {
            *temporal_period = period;
        }
        // Exposure innovations of a couple of micrograms, confounder
        // innovations an order of magnitude below the seasonal signal.
        self.tau_x2 = 9.0;
        self.tau_z2 = 2.5e-4;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.phi_x_s) || !in_unit(self.phi_z_s) {
            return Err(SimError::InvalidConfig(
                "spatial autocorrelations must lie in (0, 1)".into(),
            ));
        }
        for phi in [self.phi_x_t, self.phi_z_t] {
            if !(0.0..1.0).contains(&phi) {
                return Err(SimError::PhiTemporalOutOfRange(phi));
            }
        }
        if !(-1.0..1.0).contains(&self.rho_xz) {
            return Err(SimError::InvalidConfig(format!(
                "rho_xz = {} outside (-1, 1)",
                self.rho_xz
            )));
        }
        for (name, v) in [
            ("tau_x2", self.tau_x2),
            ("tau_z2", self.tau_z2),
            ("expected_count", self.expected_count),
        ] {
            if !(v > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} = {v}")));
            }
        }
        if self.tau_u2 < 0.0 {
            return Err(SimError::InvalidConfig("tau_u2 negative".into()));
        }
        Ok(())
    }
}

/// Kronecker-structured stationary covariance of a spatial VAR(1) process:
/// an AR(1) correlation across time with zero-lag block
/// `C(0) = tau2 / (1 - phi_t^2) * Omega^{-1}`.
///
/// The handle stores only the Cholesky factor of `C(0)` and the AR
/// coefficient; fields are coloured by the AR recursion without ever
/// materializing the `nT x nT` matrix.
#[derive(Debug, Clone)]
pub struct Var1Covariance {
    l_zero_lag: DMatrix<f64>,
    phi_t: f64,
}

pub fn var1_covariance(
    g: &SpatialGraph,
    phi_s: f64,
    phi_t: f64,
    tau2: f64,
) -> Result<Var1Covariance, SimError> {
    if !(0.0..1.0).contains(&phi_t) {
        return Err(SimError::PhiTemporalOutOfRange(phi_t));
    }
    if g.n_edges() == 0 {
        return Err(SimError::DegenerateGraph);
    }
    let omega = g.pcar_precision(phi_s)?.omega;
    let n = g.n();
    let omega_inv = omega
        .cholesky()
        .ok_or(SimError::DegenerateGraph)?
        .solve(&DMatrix::identity(n, n));
    let c0 = omega_inv * (tau2 / (1.0 - phi_t * phi_t));
    // Symmetrize against round-off before factoring.
    let c0 = (&c0 + c0.transpose()) * 0.5;
    let l_zero_lag = c0
        .cholesky()
        .ok_or(SimError::DegenerateGraph)?
        .unpack();
    Ok(Var1Covariance { l_zero_lag, phi_t })
}

impl Var1Covariance {
    /// Zero-lag covariance `C(0)`.
    pub fn zero_lag(&self) -> DMatrix<f64> {
        &self.l_zero_lag * self.l_zero_lag.transpose()
    }

    /// Lag-`h` cross-covariance block `phi_t^h C(0)`.
    pub fn lag_cov(&self, h: usize) -> DMatrix<f64> {
        self.zero_lag() * self.phi_t.powi(h as i32)
    }

    /// Dense `nT x nT` covariance (AR(1) correlation Kronecker the zero-lag
    /// block), for oracle tests at small sizes.
    pub fn dense_cov(&self, t_len: usize) -> DMatrix<f64> {
        let n = self.l_zero_lag.nrows();
        let c0 = self.zero_lag();
        let mut out = DMatrix::zeros(n * t_len, n * t_len);
        for s in 0..t_len {
            for t in 0..t_len {
                let block = &c0 * self.phi_t.powi((s as i32 - t as i32).abs());
                out.view_mut((s * n, t * n), (n, n)).copy_from(&block);
            }
        }
        out
    }

    /// Colours an `n x T` standard-normal matrix into the stationary field:
    /// first column from the stationary law, later columns by the AR
    /// recursion. This applies the Kronecker square root
    /// (AR-factor Cholesky times the zero-lag Cholesky) to the innovations.
    pub fn color(&self, innovations: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, t_len) = innovations.shape();
        assert_eq!(n, self.l_zero_lag.nrows());
        let mut out = DMatrix::zeros(n, t_len);
        let scale = (1.0 - self.phi_t * self.phi_t).sqrt();
        for t in 0..t_len {
            let coloured = &self.l_zero_lag * innovations.column(t);
            if t == 0 {
                out.set_column(0, &coloured);
            } else {
                let prev = out.column(t - 1) * self.phi_t + coloured * scale;
                out.set_column(t, &prev);
            }
        }
        out
    }
}

/// Draws the exposure field from its marginal law and the confounder from
/// its conditional law given the exposure.
///
/// Writing the exposure as `mu_x + Sx^(1/2) xi` with standard normal `xi`,
/// the conditional mean `rho Sz^(1/2) Sx^(-1/2) (x - mu_x)` reduces to
/// `rho Sz^(1/2) xi` and the conditional covariance to `(1 - rho^2) Sz`, so
/// the confounder is coloured from `rho xi + sqrt(1 - rho^2) eps`.
pub fn sample_joint_xz(
    cfg: &ScenarioConfig,
    g: &SpatialGraph,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SimError> {
    cfg.validate()?;
    if g.n() != cfg.n {
        return Err(SimError::InvalidConfig(format!(
            "config has n = {}, graph has {}",
            cfg.n,
            g.n()
        )));
    }
    let cov_x = var1_covariance(g, cfg.phi_x_s, cfg.phi_x_t, cfg.tau_x2)?;
    let cov_z = var1_covariance(g, cfg.phi_z_s, cfg.phi_z_t, cfg.tau_z2)?;
    let (n, t_len) = (cfg.n, cfg.t_len);
    let xi = DMatrix::from_fn(n, t_len, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = DMatrix::from_fn(n, t_len, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mixed = &xi * cfg.rho_xz + eps * (1.0 - cfg.rho_xz * cfg.rho_xz).sqrt();

    let mut x = cov_x.color(&xi);
    let mut z = cov_z.color(&mixed);
    for t in 0..t_len {
        let mx = cfg.mean_x.eval(t);
        let mz = cfg.mean_z.eval(t);
        for i in 0..n {
            x[(i, t)] += mx;
            z[(i, t)] += mz;
        }
    }
    Ok((x, z))
}

/// Generated panel with its ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    /// The unmeasured confounder surface.
    pub z: DMatrix<f64>,
    /// True local slope surface.
    pub beta1_true: DMatrix<f64>,
    pub beta0: f64,
    /// ANOVA-style decomposition of the true slope surface, on the
    /// coefficient scale.
    pub truth: EffectComponents,
}

/// Centered spatial pattern that dips toward the domain centre, scaled to
/// `amplitude` at its largest deviation.
fn radial_spatial_pattern(coords: &[(f64, f64)], amplitude: f64) -> DVector<f64> {
    let n = coords.len();
    if amplitude == 0.0 || n == 1 {
        return DVector::zeros(n);
    }
    let cx = coords.iter().map(|c| c.0).sum::<f64>() / n as f64;
    let cy = coords.iter().map(|c| c.1).sum::<f64>() / n as f64;
    let mut d = DVector::from_fn(n, |i, _| {
        ((coords[i].0 - cx).powi(2) + (coords[i].1 - cy).powi(2)).sqrt()
    });
    let mean = d.mean();
    d.apply(|v| *v -= mean);
    let max = d.amax();
    if max > 0.0 {
        d * (amplitude / max)
    } else {
        DVector::zeros(n)
    }
}

/// ANOVA decomposition of a surface: grand mean, column deviations, row
/// deviations.
pub fn decompose_surface(surface: &DMatrix<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    let (n, t_len) = surface.shape();
    let grand = surface.sum() / (n * t_len) as f64;
    let temporal = DVector::from_fn(t_len, |t, _| surface.column(t).mean() - grand);
    let spatial = DVector::from_fn(n, |i, _| surface.row(i).mean() - grand);
    (grand, temporal, spatial)
}

/// Samples the outcome given exposure and confounder fields.
pub fn generate_outcome(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    cfg: &ScenarioConfig,
    g: &SpatialGraph,
    coords: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedPanel, SimError> {
    let (n, t_len) = x.shape();
    let offset_val = cfg.expected_count.ln();

    // True slope surface and the exposure contribution to the predictor.
    let (beta1_true, f_part): (DMatrix<f64>, DMatrix<f64>) = match &cfg.effect {
        EffectSurface::Components {
            baseline,
            temporal_amplitude,
            temporal_period,
            spatial_amplitude,
        } => {
            let mut temporal = DVector::from_fn(t_len, |t, _| {
                temporal_amplitude
                    * (2.0 * std::f64::consts::PI * t as f64 / temporal_period).sin()
            });
            let tmean = temporal.mean();
            temporal.apply(|v| *v -= tmean);
            let spatial = radial_spatial_pattern(coords, *spatial_amplitude);
            let beta1 = DMatrix::from_fn(n, t_len, |i, t| baseline + temporal[t] + spatial[i]);
            let f = beta1.component_mul(x);
            (beta1, f)
        }
        EffectSurface::TrendPolynomial { g0, g1, g2, g3 } => {
            let trend = crate::basis::fit_space_time_trend(
                x,
                coords,
                cfg.trend_spatial_df.min(n),
                cfg.trend_temporal_df.min(t_len),
            )
            .map_err(|e| SimError::InvalidConfig(format!("trend for truth failed: {e}")))?;
            let beta1 = DMatrix::from_fn(n, t_len, |i, t| {
                let xh = trend.fitted[(i, t)];
                g1 + 2.0 * g2 * xh + 3.0 * g3 * xh * xh
            });
            let f = DMatrix::from_fn(n, t_len, |i, t| {
                let v = x[(i, t)];
                g0 + g1 * v + g2 * v * v + g3 * v * v * v
            });
            (beta1, f)
        }
    };

    let mut y = DMatrix::zeros(n, t_len);
    let offset = DMatrix::from_element(n, t_len, offset_val);
    let tau_u = cfg.tau_u2.sqrt();
    for t in 0..t_len {
        for i in 0..n {
            let u: f64 = rng.sample::<f64, _>(StandardNormal) * tau_u;
            let theta = offset_val + cfg.beta0 + f_part[(i, t)] + z[(i, t)] + u;
            if theta > 30.0 {
                return Err(SimError::OverflowGuard(theta, i, t));
            }
            let mu = theta.exp();
            y[(i, t)] = if mu > 0.0 {
                Poisson::new(mu)
                    .map_err(|_| SimError::OverflowGuard(theta, i, t))?
                    .sample(rng)
            } else {
                0.0
            };
        }
    }

    let (baseline, temporal, spatial) = decompose_surface(&beta1_true);
    let truth = EffectComponents {
        baseline,
        temporal,
        spatial,
        overall: beta1_true.clone(),
    };
    let panel = PanelData::new(y, offset, x.clone(), DMatrix::zeros(n * t_len, 0), g.clone())?;
    Ok(SimulatedPanel {
        panel,
        z: z.clone(),
        beta1_true,
        beta0: cfg.beta0,
        truth,
    })
}

/// Generates one full replicate (exposure, confounder, outcome) on its own
/// RNG stream.
pub fn generate_replicate(
    cfg: &ScenarioConfig,
    g: &SpatialGraph,
    coords: &[(f64, f64)],
    replicate: u64,
) -> Result<SimulatedPanel, SimError> {
    let mut rng = stream_rng(cfg.seed, (1 << 32) | replicate);
    let (x, z) = sample_joint_xz(cfg, g, &mut rng)?;
    generate_outcome(&x, &z, cfg, g, coords, &mut rng)
}

/// A fitting procedure evaluated in replicate studies. Implementations
/// return effect components on the percent-change scale.
pub trait EffectEstimator: Sync {
    fn name(&self) -> String;
    fn estimate(
        &self,
        panel: &PanelData,
        coords: &[(f64, f64)],
        seed: u64,
    ) -> Result<EffectComponents, String>;
}

/// Per-replicate estimates for each estimator, plus the matching truths,
/// all on the percent-change scale.
pub struct ReplicateStudy {
    pub estimator_names: Vec<String>,
    /// `estimates[e][r]` is estimator `e` on replicate `r`.
    pub estimates: Vec<Vec<EffectComponents>>,
    pub truths: Vec<EffectComponents>,
}

/// Runs `n_reps` generate-and-fit cycles, replicates in parallel.
pub fn run_replicates(
    cfg: &ScenarioConfig,
    g: &SpatialGraph,
    coords: &[(f64, f64)],
    n_reps: usize,
    estimators: &[&dyn EffectEstimator],
) -> Result<ReplicateStudy, SimError> {
    use rayon::prelude::*;
    let results: Result<Vec<(EffectComponents, Vec<EffectComponents>)>, SimError> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let sim = generate_replicate(cfg, g, coords, rep as u64)?;
            let truth = sim.truth.to_percent_scale();
            let mut per_est = Vec::with_capacity(estimators.len());
            for (e, est) in estimators.iter().enumerate() {
                let seed = derive_seed(cfg.seed, (rep * estimators.len() + e + 1) as u64);
                let components = est
                    .estimate(&sim.panel, coords, seed)
                    .map_err(|reason| SimError::Estimator {
                        name: est.name(),
                        reason,
                    })?;
                per_est.push(components);
            }
            Ok((truth, per_est))
        })
        .collect();
    let results = results?;
    let mut truths = Vec::with_capacity(n_reps);
    let mut estimates: Vec<Vec<EffectComponents>> =
        (0..estimators.len()).map(|_| Vec::with_capacity(n_reps)).collect();
    for (truth, per_est) in results {
        truths.push(truth);
        for (e, comp) in per_est.into_iter().enumerate() {
            estimates[e].push(comp);
        }
    }
    Ok(ReplicateStudy {
        estimator_names: estimators.iter().map(|e| e.name()).collect(),
        estimates,
        truths,
    })
}
