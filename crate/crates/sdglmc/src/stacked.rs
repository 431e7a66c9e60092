//! Stacked observation/prior structure for the four coefficient blocks.
//!
//! Stacking the observation equation over all time points gives
//! `theta = o + G_1 g_1 + G_2 g_2 + G_3 g_3 + G_4 g_4 + noise` with
//!
//! * block 1: the interaction field, stacked time slice by time slice;
//! * block 2: the temporal effects, interleaved `(d0_t, d1_t)` pairs;
//! * block 3: the two spatial effect vectors;
//! * block 4: the baselines and measured-confounder coefficients.
//!
//! Each block has prior precision `K_j = H_j' S_j^{-1} H_j` where `H_j`
//! first-differences random-walk blocks and `S_j^{-1}` holds initial-state
//! and innovation precisions. Only the variance scalings change between
//! iterations; the data-dependent Gram pieces are cached in [`DesignCache`].

use crate::graph::SpatialGraph;
use crate::model::{InteractionType, ModelError, PanelData, PriorConfig};
use nalgebra::{DMatrix, DVector};

/// Innovation precision of the interaction field: shared scalar for the
/// homogeneous walks, one value per unit for the heterogeneous walk.
#[derive(Debug, Clone)]
pub enum StarPrecision {
    Scalar(f64),
    PerArea(DVector<f64>),
}

impl StarPrecision {
    pub fn for_area(&self, i: usize) -> f64 {
        match self {
            StarPrecision::Scalar(v) => *v,
            StarPrecision::PerArea(v) => v[i],
        }
    }
}

/// Variance-dependent precision scalings of all four blocks. Rebuilt each
/// iteration; everything structural lives in [`DesignCache`] and the graph.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub interaction: InteractionType,
    /// `1 / v_delta_star` for the interaction initial state.
    pub inv_v_star: f64,
    /// Interaction innovation precision (`1 / sigma2_w0_star`).
    pub star_prec: StarPrecision,
    /// Initial-state precisions of the temporal pair.
    pub inv_v_delta: [f64; 2],
    /// Innovation precisions of the temporal pair.
    pub inv_sigma2_w: [f64; 2],
    /// Spatial effect precisions (`1 / sigma2_delta_k`).
    pub inv_sigma2_delta: [f64; 2],
    /// Slab precision for baselines and confounder coefficients.
    pub slab_prec: f64,
}

impl StackedSystem {
    /// Dense `K_1` for oracle comparison; `None` when the interaction is
    /// absent.
    pub fn dense_k1(&self, graph: &SpatialGraph, t_len: usize) -> Option<DMatrix<f64>> {
        let n = graph.n();
        let q = graph.icar_precision().q;
        let eye = DMatrix::<f64>::identity(n, n);
        match self.interaction {
            InteractionType::T1 => None,
            InteractionType::T3 => {
                // No temporal coupling: block diagonal of scaled structures.
                let prec = self.star_scalar();
                let mut k = DMatrix::zeros(n * t_len, n * t_len);
                for t in 0..t_len {
                    k.view_mut((t * n, t * n), (n, n)).copy_from(&(&q * prec));
                }
                Some(k)
            }
            InteractionType::T2 | InteractionType::T5 => {
                let innov = |i: usize| self.star_prec.for_area(i);
                let mut k = DMatrix::zeros(n * t_len, n * t_len);
                for i in 0..n {
                    for t in 0..t_len {
                        let d = t * n + i;
                        let mut v = if t == 0 { self.inv_v_star } else { innov(i) };
                        if t + 1 < t_len {
                            v += innov(i);
                        }
                        k[(d, d)] = v;
                        if t + 1 < t_len {
                            k[(d + n, d)] = -innov(i);
                            k[(d, d + n)] = -innov(i);
                        }
                    }
                }
                Some(k)
            }
            InteractionType::T4 => {
                let prec = self.star_scalar();
                let qs = &q * prec;
                let mut k = DMatrix::zeros(n * t_len, n * t_len);
                for t in 0..t_len {
                    let mut block = if t == 0 {
                        &eye * self.inv_v_star
                    } else {
                        qs.clone()
                    };
                    if t + 1 < t_len {
                        block += &qs;
                    }
                    k.view_mut((t * n, t * n), (n, n)).copy_from(&block);
                    if t + 1 < t_len {
                        k.view_mut(((t + 1) * n, t * n), (n, n)).copy_from(&(-&qs));
                        k.view_mut((t * n, (t + 1) * n), (n, n)).copy_from(&(-&qs));
                    }
                }
                Some(k)
            }
        }
    }

    fn star_scalar(&self) -> f64 {
        match &self.star_prec {
            StarPrecision::Scalar(v) => *v,
            StarPrecision::PerArea(_) => {
                unreachable!("per-area precisions only arise for the heterogeneous walk")
            }
        }
    }

    /// Dense `K_2` (block tridiagonal with 2x2 diagonal blocks).
    pub fn dense_k2(&self, t_len: usize) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(2 * t_len, 2 * t_len);
        let innov = self.inv_sigma2_w;
        for t in 0..t_len {
            for c in 0..2 {
                let d = 2 * t + c;
                let mut v = if t == 0 { self.inv_v_delta[c] } else { innov[c] };
                if t + 1 < t_len {
                    v += innov[c];
                }
                k[(d, d)] = v;
                if t + 1 < t_len {
                    k[(d + 2, d)] = -innov[c];
                    k[(d, d + 2)] = -innov[c];
                }
            }
        }
        k
    }

    /// Dense `K_3` (two scaled copies of the pairwise-difference precision).
    pub fn dense_k3(&self, graph: &SpatialGraph) -> DMatrix<f64> {
        let n = graph.n();
        let q = graph.icar_precision().q;
        let mut k = DMatrix::zeros(2 * n, 2 * n);
        k.view_mut((0, 0), (n, n))
            .copy_from(&(&q * self.inv_sigma2_delta[0]));
        k.view_mut((n, n), (n, n))
            .copy_from(&(&q * self.inv_sigma2_delta[1]));
        k
    }

    /// Dense `K_4` (slab precision).
    pub fn dense_k4(&self, n_coef: usize) -> DMatrix<f64> {
        DMatrix::identity(n_coef, n_coef) * self.slab_prec
    }
}

/// Data-dependent design aggregates shared by every iteration.
#[derive(Debug, Clone)]
pub struct DesignCache {
    /// Regressor carried by the slope block (detrended or raw exposure).
    pub regressor: DMatrix<f64>,
    /// Per-time sums of the regressor and its square.
    pub col_sum_x: Vec<f64>,
    pub col_sum_x2: Vec<f64>,
    /// Per-unit sums over time of the regressor and its square.
    pub row_sum_x: DVector<f64>,
    pub row_sum_x2: DVector<f64>,
    /// Gram matrix of the baseline/confounder design.
    pub g4_gram: DMatrix<f64>,
    /// Number of confounder coefficients carried by block 4.
    pub n_alpha: usize,
}

impl DesignCache {
    pub fn new(
        data: &PanelData,
        regressor: DMatrix<f64>,
        include_confounders: bool,
    ) -> Result<Self, ModelError> {
        let (n, t_len) = data.y.shape();
        if regressor.shape() != (n, t_len) {
            return Err(ModelError::DimensionMismatch(format!(
                "regressor is {:?}, panel is {:?}",
                regressor.shape(),
                (n, t_len)
            )));
        }
        let n_alpha = if include_confounders {
            data.n_confounders()
        } else {
            0
        };
        let col_sum_x: Vec<f64> = (0..t_len).map(|t| regressor.column(t).sum()).collect();
        let col_sum_x2: Vec<f64> = (0..t_len)
            .map(|t| regressor.column(t).iter().map(|v| v * v).sum())
            .collect();
        let row_sum_x = DVector::from_fn(n, |i, _| regressor.row(i).sum());
        let row_sum_x2 = DVector::from_fn(n, |i, _| regressor.row(i).iter().map(|v| v * v).sum());

        // G_4 columns: intercept, regressor, then confounders.
        let m = 2 + n_alpha;
        let mut g4_gram = DMatrix::zeros(m, m);
        g4_gram[(0, 0)] = (n * t_len) as f64;
        g4_gram[(0, 1)] = col_sum_x.iter().sum();
        g4_gram[(1, 0)] = g4_gram[(0, 1)];
        g4_gram[(1, 1)] = col_sum_x2.iter().sum();
        if n_alpha > 0 {
            let mut ones_m = DVector::zeros(n_alpha);
            let mut x_m = DVector::zeros(n_alpha);
            let mut mm = DMatrix::zeros(n_alpha, n_alpha);
            for t in 0..t_len {
                let m_t = data.confounder_slice(t);
                let x_t = regressor.column(t);
                for k in 0..n_alpha {
                    let col = m_t.column(k);
                    ones_m[k] += col.sum();
                    x_m[k] += col.dot(&x_t);
                }
                mm.gemm_tr(1.0, &m_t, &m_t, 1.0);
            }
            for k in 0..n_alpha {
                g4_gram[(0, 2 + k)] = ones_m[k];
                g4_gram[(2 + k, 0)] = ones_m[k];
                g4_gram[(1, 2 + k)] = x_m[k];
                g4_gram[(2 + k, 1)] = x_m[k];
                for l in 0..n_alpha {
                    g4_gram[(2 + k, 2 + l)] = mm[(k, l)];
                }
            }
        }
        Ok(Self {
            regressor,
            col_sum_x,
            col_sum_x2,
            row_sum_x,
            row_sum_x2,
            g4_gram,
            n_alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.regressor.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.regressor.ncols()
    }

    /// Dense `G_2` (`nT x 2T`), for oracle tests.
    pub fn dense_g2(&self) -> DMatrix<f64> {
        let (n, t_len) = self.regressor.shape();
        let mut g = DMatrix::zeros(n * t_len, 2 * t_len);
        for t in 0..t_len {
            for i in 0..n {
                g[(t * n + i, 2 * t)] = 1.0;
                g[(t * n + i, 2 * t + 1)] = self.regressor[(i, t)];
            }
        }
        g
    }

    /// Dense `G_3` (`nT x 2n`), for oracle tests.
    pub fn dense_g3(&self) -> DMatrix<f64> {
        let (n, t_len) = self.regressor.shape();
        let mut g = DMatrix::zeros(n * t_len, 2 * n);
        for t in 0..t_len {
            for i in 0..n {
                g[(t * n + i, i)] = 1.0;
                g[(t * n + i, n + i)] = self.regressor[(i, t)];
            }
        }
        g
    }

    /// Dense `G_4` (`nT x (2 + p)`), for oracle tests.
    pub fn dense_g4(&self, data: &PanelData) -> DMatrix<f64> {
        let (n, t_len) = self.regressor.shape();
        let mut g = DMatrix::zeros(n * t_len, 2 + self.n_alpha);
        for t in 0..t_len {
            let m_t = data.confounder_slice(t);
            for i in 0..n {
                g[(t * n + i, 0)] = 1.0;
                g[(t * n + i, 1)] = self.regressor[(i, t)];
                for k in 0..self.n_alpha {
                    g[(t * n + i, 2 + k)] = m_t[(i, k)];
                }
            }
        }
        g
    }
}

/// Assembles the variance-scaled precision pieces for the current state.
///
/// `sigma2_w0_star` carries one entry for the homogeneous interaction types
/// and `n` entries for the heterogeneous walk.
pub fn build_stacked_system(
    interaction: InteractionType,
    priors: &PriorConfig,
    sigma2_w0: f64,
    sigma2_w1: f64,
    sigma2_delta0: f64,
    sigma2_delta1: f64,
    sigma2_w0_star: &[f64],
) -> StackedSystem {
    let star_prec = match interaction {
        InteractionType::T5 => StarPrecision::PerArea(DVector::from_fn(sigma2_w0_star.len(), |i, _| {
            1.0 / sigma2_w0_star[i]
        })),
        _ => StarPrecision::Scalar(1.0 / sigma2_w0_star.first().copied().unwrap_or(1.0)),
    };
    StackedSystem {
        interaction,
        inv_v_star: 1.0 / priors.v_delta_star,
        star_prec,
        inv_v_delta: [1.0 / priors.v_delta0, 1.0 / priors.v_delta1],
        inv_sigma2_w: [1.0 / sigma2_w0, 1.0 / sigma2_w1],
        inv_sigma2_delta: [1.0 / sigma2_delta0, 1.0 / sigma2_delta1],
        slab_prec: 1.0 / priors.slab_var,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SpatialGraph;
    use approx::assert_abs_diff_eq;

    fn system(interaction: InteractionType, n: usize) -> StackedSystem {
        let priors = PriorConfig::default();
        let star: Vec<f64> = match interaction {
            InteractionType::T5 => (0..n).map(|i| 0.5 + i as f64).collect(),
            _ => vec![0.25],
        };
        build_stacked_system(interaction, &priors, 0.5, 2.0, 0.2, 4.0, &star)
    }

    #[test]
    fn t4_first_block_layout() {
        // n = 2, T = 2: the leading block is the initial-state precision plus
        // the scaled pairwise-difference matrix.
        let g = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        let sys = system(InteractionType::T4, 2);
        let k1 = sys.dense_k1(&g, 2).unwrap();
        let q = g.icar_precision().q;
        let expected = DMatrix::<f64>::identity(2, 2) * (1.0 / 10.0) + &q * 4.0;
        assert_abs_diff_eq!(
            (k1.view((0, 0), (2, 2)).into_owned() - expected).norm(),
            0.0,
            epsilon = 1e-12
        );
        // Off-diagonal couples with -Q / sigma2.
        assert_abs_diff_eq!(
            (k1.view((2, 0), (2, 2)).into_owned() + &q * 4.0).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn k2_hand_assembly_t3() {
        let sys = system(InteractionType::T1, 2);
        let k2 = sys.dense_k2(3);
        // First block: initial-state precision plus one innovation.
        assert_abs_diff_eq!(k2[(0, 0)], 1.0 / 4.0 + 1.0 / 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(k2[(1, 1)], 1.0 / 4e-6 + 1.0 / 2.0, epsilon = 1e-6);
        // Middle block: two innovations.
        assert_abs_diff_eq!(k2[(2, 2)], 2.0 / 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(k2[(3, 3)], 2.0 / 2.0, epsilon = 1e-12);
        // Last block: one innovation.
        assert_abs_diff_eq!(k2[(4, 4)], 1.0 / 0.5, epsilon = 1e-12);
        // Off-diagonal: minus the innovation precision; zero cross terms.
        assert_abs_diff_eq!(k2[(2, 0)], -1.0 / 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(k2[(3, 1)], -1.0 / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k2[(2, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn t1_has_no_first_block() {
        let g = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        assert!(system(InteractionType::T1, 2).dense_k1(&g, 3).is_none());
    }
}
