//! Core domain types: panel data, the coefficient decomposition, prior
//! configuration, and the risk-change reporting transform.

use crate::basis::TrendFit;
use crate::graph::SpatialGraph;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("counts must be nonnegative integers; found {0} at unit {1}, time {2}")]
    InvalidCount(f64, usize, usize),
    #[error("offset must be finite; found {0} at unit {1}, time {2}")]
    InvalidOffset(f64, usize, usize),
    #[error("prior configuration invalid: {0}")]
    InvalidPrior(String),
    #[error("csv {path}: {reason}")]
    Csv { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inverse-gamma hyperparameter pair, shape `a` and rate `b`
/// (density proportional to `x^{-a-1} exp(-b / x)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgPair {
    pub shape: f64,
    pub rate: f64,
}

impl IgPair {
    pub const fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }

    /// Prior mean when it exists, otherwise `rate / shape` as a finite
    /// stand-in used for initialization.
    pub fn init_value(&self) -> f64 {
        if self.shape > 1.0 {
            self.rate / (self.shape - 1.0)
        } else {
            self.rate / self.shape
        }
    }
}

/// Space-time interaction structure for the intercept field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionType {
    /// No interaction; the field is identically zero.
    T1,
    /// Independent random walk per unit, shared innovation variance.
    T2,
    /// Independent spatially structured slice per time point.
    T3,
    /// Random walk of spatially structured increments.
    T4,
    /// Independent random walk per unit, unit-specific innovation variances.
    T5,
}

impl InteractionType {
    pub const ALL: [InteractionType; 5] = [
        InteractionType::T1,
        InteractionType::T2,
        InteractionType::T3,
        InteractionType::T4,
        InteractionType::T5,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Some(Self::T1),
            "t2" => Some(Self::T2),
            "t3" => Some(Self::T3),
            "t4" => Some(Self::T4),
            "t5" => Some(Self::T5),
            _ => None,
        }
    }
}

impl std::fmt::Display for InteractionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::T1 => "T1",
            Self::T2 => "T2",
            Self::T3 => "T3",
            Self::T4 => "T4",
            Self::T5 => "T5",
        };
        f.write_str(s)
    }
}

/// Every hyperparameter of the hierarchy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Initial-state variance of the intercept's temporal effect.
    pub v_delta0: f64,
    /// Initial-state variance of the slope's temporal effect.
    pub v_delta1: f64,
    /// Diagonal scale of the interaction field's initial-state variance.
    pub v_delta_star: f64,
    pub sigma2_w0: IgPair,
    pub sigma2_delta0: IgPair,
    pub sigma2_w0_star: IgPair,
    pub sigma2_w1: IgPair,
    pub sigma2_delta1: IgPair,
    pub tau2: IgPair,
    /// Slab variance for the baselines and measured-confounder coefficients.
    pub slab_var: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            v_delta0: 4.0,
            v_delta1: 4e-6,
            v_delta_star: 10.0,
            sigma2_w0: IgPair::new(0.01, 0.01),
            sigma2_delta0: IgPair::new(0.01, 0.01),
            sigma2_w0_star: IgPair::new(0.01, 0.01),
            sigma2_w1: IgPair::new(10.0, 0.001),
            sigma2_delta1: IgPair::new(1.0, 0.01),
            tau2: IgPair::new(1.0, 2.1e-5),
            slab_var: 1e6,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positives = [
            ("v_delta0", self.v_delta0),
            ("v_delta1", self.v_delta1),
            ("v_delta_star", self.v_delta_star),
            ("slab_var", self.slab_var),
            ("sigma2_w0.shape", self.sigma2_w0.shape),
            ("sigma2_w0.rate", self.sigma2_w0.rate),
            ("sigma2_delta0.shape", self.sigma2_delta0.shape),
            ("sigma2_delta0.rate", self.sigma2_delta0.rate),
            ("sigma2_w0_star.shape", self.sigma2_w0_star.shape),
            ("sigma2_w0_star.rate", self.sigma2_w0_star.rate),
            ("sigma2_w1.shape", self.sigma2_w1.shape),
            ("sigma2_w1.rate", self.sigma2_w1.rate),
            ("sigma2_delta1.shape", self.sigma2_delta1.shape),
            ("sigma2_delta1.rate", self.sigma2_delta1.rate),
            ("tau2.shape", self.tau2.shape),
            ("tau2.rate", self.tau2.rate),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidPrior(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Counts, offsets, exposure and measured confounders on an `n x T` grid,
/// tied to the adjacency graph of the units.
#[derive(Debug, Clone)]
pub struct PanelData {
    /// Observed counts (validated nonnegative integers, stored as f64).
    pub y: DMatrix<f64>,
    /// Log expected counts.
    pub offset: DMatrix<f64>,
    /// Exposure on the raw scale.
    pub exposure: DMatrix<f64>,
    /// Measured confounders, `n * T` rows (unit `i` at time `t` in row
    /// `t * n + i`) by `p` columns. Zero columns when none are measured.
    pub confounders: DMatrix<f64>,
    pub graph: SpatialGraph,
}

impl PanelData {
    pub fn new(
        y: DMatrix<f64>,
        offset: DMatrix<f64>,
        exposure: DMatrix<f64>,
        confounders: DMatrix<f64>,
        graph: SpatialGraph,
    ) -> Result<Self, ModelError> {
        let (n, t_len) = y.shape();
        if n != graph.n() {
            return Err(ModelError::DimensionMismatch(format!(
                "counts have {n} units, graph has {}",
                graph.n()
            )));
        }
        for (mat, name) in [(&offset, "offset"), (&exposure, "exposure")] {
            if mat.shape() != (n, t_len) {
                return Err(ModelError::DimensionMismatch(format!(
                    "{name} is {:?}, counts are {:?}",
                    mat.shape(),
                    (n, t_len)
                )));
            }
        }
        if confounders.nrows() != n * t_len && confounders.ncols() > 0 {
            return Err(ModelError::DimensionMismatch(format!(
                "confounders have {} rows, expected {}",
                confounders.nrows(),
                n * t_len
            )));
        }
        for t in 0..t_len {
            for i in 0..n {
                let v = y[(i, t)];
                if !(v >= 0.0) || v.fract() != 0.0 || !v.is_finite() {
                    return Err(ModelError::InvalidCount(v, i, t));
                }
                let o = offset[(i, t)];
                if !o.is_finite() {
                    return Err(ModelError::InvalidOffset(o, i, t));
                }
            }
        }
        Ok(Self {
            y,
            offset,
            exposure,
            confounders,
            graph,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_confounders(&self) -> usize {
        self.confounders.ncols()
    }

    /// Confounder rows for time slice `t` (an `n x p` view).
    pub fn confounder_slice(&self, t: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.confounders
            .view((t * self.n(), 0), (self.n(), self.confounders.ncols()))
    }

    /// Reads the long-format panel CSV `unit,time,y,offset,x,m1..mp`.
    /// Units and times must form a complete grid matching the graph.
    pub fn from_csv(path: &Path, graph: SpatialGraph) -> Result<Self, ModelError> {
        let csv_err = |reason: String| ModelError::Csv {
            path: path.display().to_string(),
            reason,
        };
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| csv_err(e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| csv_err(e.to_string()))?
            .clone();
        let expected = ["unit", "time", "y", "offset", "x"];
        for (k, name) in expected.iter().enumerate() {
            if headers.get(k).map(str::trim) != Some(*name) {
                return Err(csv_err(format!(
                    "expected column {k} to be `{name}`, found `{}`",
                    headers.get(k).unwrap_or("")
                )));
            }
        }
        let p = headers.len() - expected.len();
        let n = graph.n();

        let mut rows = Vec::new();
        let mut t_max = 0usize;
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            let field = |k: usize| -> Result<f64, ModelError> {
                rec.get(k)
                    .ok_or_else(|| csv_err(format!("missing field {k}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| csv_err(format!("field {k}: {e}")))
            };
            let unit = field(0)? as usize;
            let time = field(1)? as usize;
            if unit >= n {
                return Err(csv_err(format!("unit {unit} out of range for n = {n}")));
            }
            t_max = t_max.max(time);
            let mut vals = Vec::with_capacity(3 + p);
            for k in 2..headers.len() {
                vals.push(field(k)?);
            }
            rows.push((unit, time, vals));
        }
        let t_len = t_max + 1;
        if rows.len() != n * t_len {
            return Err(csv_err(format!(
                "expected {} rows for a complete {n} x {t_len} grid, found {}",
                n * t_len,
                rows.len()
            )));
        }
        let mut y = DMatrix::zeros(n, t_len);
        let mut offset = DMatrix::zeros(n, t_len);
        let mut exposure = DMatrix::zeros(n, t_len);
        let mut confounders = DMatrix::zeros(n * t_len, p);
        let mut seen = vec![false; n * t_len];
        for (unit, time, vals) in rows {
            let idx = time * n + unit;
            if seen[idx] {
                return Err(csv_err(format!("duplicate cell unit={unit}, time={time}")));
            }
            seen[idx] = true;
            y[(unit, time)] = vals[0];
            offset[(unit, time)] = vals[1];
            exposure[(unit, time)] = vals[2];
            for k in 0..p {
                confounders[(idx, k)] = vals[3 + k];
            }
        }
        Self::new(y, offset, exposure, confounders, graph)
    }

    /// Writes the long-format panel CSV.
    pub fn to_csv(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| ModelError::Csv {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let p = self.n_confounders();
        let mut header = vec![
            "unit".to_string(),
            "time".to_string(),
            "y".to_string(),
            "offset".to_string(),
            "x".to_string(),
        ];
        for k in 0..p {
            header.push(format!("m{}", k + 1));
        }
        let io_err = |e: csv::Error| ModelError::Csv {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        w.write_record(&header).map_err(io_err)?;
        for t in 0..self.t_len() {
            for i in 0..self.n() {
                let mut rec = vec![
                    i.to_string(),
                    t.to_string(),
                    format!("{}", self.y[(i, t)]),
                    format!("{}", self.offset[(i, t)]),
                    format!("{}", self.exposure[(i, t)]),
                ];
                for k in 0..p {
                    rec.push(format!("{}", self.confounders[(t * self.n() + i, k)]));
                }
                w.write_record(&rec).map_err(io_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Additive decomposition of one spacetime-varying coefficient.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub baseline: f64,
    /// Per-unit deviations (length `n`, sums to zero after centering).
    pub spatial: DVector<f64>,
    /// Per-time deviations (length `T`, sums to zero after centering).
    pub temporal: DVector<f64>,
    /// Interaction deviations (`n x T`; identically zero for the slope).
    pub interaction: DMatrix<f64>,
}

impl CoefficientField {
    pub fn zeros(n: usize, t_len: usize) -> Self {
        Self {
            baseline: 0.0,
            spatial: DVector::zeros(n),
            temporal: DVector::zeros(t_len),
            interaction: DMatrix::zeros(n, t_len),
        }
    }

    /// Elementwise sum of the four components.
    pub fn compose(&self) -> DMatrix<f64> {
        let (n, t_len) = self.interaction.shape();
        DMatrix::from_fn(n, t_len, |i, t| {
            self.baseline + self.spatial[i] + self.temporal[t] + self.interaction[(i, t)]
        })
    }
}

/// Composes the linear predictor
/// `offset + beta0 + beta1 * (x - x_hat) + m' alpha + u`.
///
/// The slope field must carry a zero interaction component.
pub fn linear_predictor(
    data: &PanelData,
    beta0: &CoefficientField,
    beta1: &CoefficientField,
    alpha: &DVector<f64>,
    trend: &TrendFit,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    let (n, t_len) = data.y.shape();
    debug_assert!(
        beta1.interaction.iter().all(|&v| v == 0.0),
        "slope interaction must be identically zero"
    );
    if alpha.len() != data.n_confounders() {
        return Err(ModelError::DimensionMismatch(format!(
            "alpha has {} entries for {} confounders",
            alpha.len(),
            data.n_confounders()
        )));
    }
    if trend.residual.shape() != (n, t_len) || u.shape() != (n, t_len) {
        return Err(ModelError::DimensionMismatch(
            "trend residual / noise shape".into(),
        ));
    }
    let b0 = beta0.compose();
    let b1 = beta1.compose();
    let mut out = DMatrix::zeros(n, t_len);
    for t in 0..t_len {
        let m_t = data.confounder_slice(t);
        let m_alpha = if alpha.is_empty() {
            DVector::zeros(n)
        } else {
            &m_t * alpha
        };
        for i in 0..n {
            out[(i, t)] = data.offset[(i, t)]
                + b0[(i, t)]
                + b1[(i, t)] * trend.residual[(i, t)]
                + m_alpha[i]
                + u[(i, t)];
        }
    }
    Ok(out)
}

/// Percent change in risk for a `delta_exposure` increase of the exposure:
/// `100 (exp(delta * beta) - 1)`.
pub fn percent_change(beta: f64, delta_exposure: f64) -> f64 {
    100.0 * ((delta_exposure * beta).exp() - 1.0)
}

/// The reporting convention used throughout: a 10-unit exposure increase.
pub fn percent_change10(beta: f64) -> f64 {
    percent_change(beta, 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn compose_hand_example() {
        let f = CoefficientField {
            baseline: 0.1,
            spatial: DVector::from_vec(vec![0.2, -0.2]),
            temporal: DVector::from_vec(vec![0.3, -0.3]),
            interaction: DMatrix::zeros(2, 2),
        };
        let b = f.compose();
        let expected = DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.2, -0.4]);
        assert_abs_diff_eq!((b - expected).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn compose_trivial_cases() {
        let z = CoefficientField::zeros(3, 4);
        assert_eq!(z.compose(), DMatrix::zeros(3, 4));
        let mut c = CoefficientField::zeros(3, 4);
        c.baseline = 0.5;
        assert_eq!(c.compose(), DMatrix::from_element(3, 4, 0.5));
    }

    #[test]
    fn percent_change_examples() {
        assert_abs_diff_eq!(percent_change10(0.0), 0.0, epsilon = 1e-15);
        // Inverting the transform: a 5% change corresponds to ln(1.05)/10.
        let beta = (1.05f64).ln() / 10.0;
        assert_abs_diff_eq!(percent_change10(beta), 5.0, epsilon = 1e-10);
        assert_abs_diff_eq!(beta, 0.004879016417, epsilon = 1e-10);
        // Reported labelled value round-trips through the same transform.
        let beta = (1.05282f64).ln() / 10.0;
        assert_abs_diff_eq!(percent_change10(beta), 5.282, epsilon = 1e-9);
    }

    fn tiny_panel() -> PanelData {
        let graph = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 4.0, 1.0, 3.0]);
        let offset = DMatrix::from_element(2, 3, 0.0);
        let exposure = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, 0.0, 2.0, -0.5]);
        let confounders = DMatrix::from_fn(6, 1, |r, _| r as f64 * 0.1);
        PanelData::new(y, offset, exposure, confounders, graph).unwrap()
    }

    #[test]
    fn linear_predictor_zero_case() {
        let data = tiny_panel();
        let trend = TrendFit {
            fitted: data.exposure.clone(),
            residual: DMatrix::zeros(2, 3),
            spatial_df: 1,
            temporal_df: 1,
        };
        let theta = linear_predictor(
            &data,
            &CoefficientField::zeros(2, 3),
            &CoefficientField::zeros(2, 3),
            &DVector::zeros(1),
            &trend,
            &DMatrix::zeros(2, 3),
        )
        .unwrap();
        assert_eq!(theta, DMatrix::zeros(2, 3));
    }

    #[test]
    fn linear_predictor_constant_slope() {
        let data = tiny_panel();
        // Residual exposure exactly one everywhere.
        let trend = TrendFit {
            fitted: &data.exposure - DMatrix::from_element(2, 3, 1.0),
            residual: DMatrix::from_element(2, 3, 1.0),
            spatial_df: 1,
            temporal_df: 1,
        };
        let mut beta1 = CoefficientField::zeros(2, 3);
        beta1.baseline = 0.7;
        let theta = linear_predictor(
            &data,
            &CoefficientField::zeros(2, 3),
            &beta1,
            &DVector::zeros(1),
            &trend,
            &DMatrix::zeros(2, 3),
        )
        .unwrap();
        assert_abs_diff_eq!((theta - DMatrix::from_element(2, 3, 0.7)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn linear_predictor_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data = tiny_panel();
        let mut r = |_: usize| rng.gen_range(-0.5..0.5);
        let trend = TrendFit {
            fitted: DMatrix::zeros(2, 3),
            residual: DMatrix::from_fn(2, 3, |_, _| r(0)),
            spatial_df: 1,
            temporal_df: 1,
        };
        let beta0 = CoefficientField {
            baseline: r(0),
            spatial: DVector::from_fn(2, |_, _| r(0)),
            temporal: DVector::from_fn(3, |_, _| r(0)),
            interaction: DMatrix::from_fn(2, 3, |_, _| r(0)),
        };
        let mut beta1 = CoefficientField::zeros(2, 3);
        beta1.baseline = r(0);
        beta1.spatial = DVector::from_fn(2, |_, _| r(0));
        beta1.temporal = DVector::from_fn(3, |_, _| r(0));
        let alpha = DVector::from_fn(1, |_, _| r(0));
        let u = DMatrix::from_fn(2, 3, |_, _| r(0));
        let theta = linear_predictor(&data, &beta0, &beta1, &alpha, &trend, &u).unwrap();

        for t in 0..3 {
            for i in 0..2 {
                let b0 = beta0.baseline + beta0.spatial[i] + beta0.temporal[t] + beta0.interaction[(i, t)];
                let b1 = beta1.baseline + beta1.spatial[i] + beta1.temporal[t];
                let expect = data.offset[(i, t)]
                    + b0
                    + b1 * trend.residual[(i, t)]
                    + data.confounders[(t * 2 + i, 0)] * alpha[0]
                    + u[(i, t)];
                assert_abs_diff_eq!(theta[(i, t)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn panel_csv_round_trip() {
        let data = tiny_panel();
        let dir = std::env::temp_dir().join("sdglmc_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("panel.csv");
        data.to_csv(&path).unwrap();
        let back = PanelData::from_csv(&path, data.graph.clone()).unwrap();
        assert_eq!(back.y, data.y);
        assert_eq!(back.offset, data.offset);
        assert_eq!(back.exposure, data.exposure);
        assert_eq!(back.confounders, data.confounders);
    }

    #[test]
    fn panel_rejects_bad_counts() {
        let graph = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        let mut y = DMatrix::from_element(2, 2, 1.0);
        y[(0, 0)] = -1.0;
        let z = DMatrix::zeros(2, 2);
        assert!(matches!(
            PanelData::new(y, z.clone(), z.clone(), DMatrix::zeros(4, 0), graph.clone()),
            Err(ModelError::InvalidCount(..))
        ));
        let mut y = DMatrix::from_element(2, 2, 1.0);
        y[(1, 1)] = 1.5;
        assert!(PanelData::new(y, z.clone(), z.clone(), DMatrix::zeros(4, 0), graph.clone()).is_err());
        let y = DMatrix::from_element(2, 2, 1.0);
        let mut bad_offset = z.clone();
        bad_offset[(0, 1)] = f64::NAN;
        assert!(matches!(
            PanelData::new(y, bad_offset, z.clone(), DMatrix::zeros(4, 0), graph),
            Err(ModelError::InvalidOffset(..))
        ));
    }

    #[test]
    fn prior_default_validates() {
        PriorConfig::default().validate().unwrap();
        let mut p = PriorConfig::default();
        p.sigma2_w1.rate = 0.0;
        assert!(p.validate().is_err());
    }
}
