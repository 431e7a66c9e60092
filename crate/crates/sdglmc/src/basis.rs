//! Spline bases and the exposure detrending step.
//!
//! The large-scale exposure surface is estimated by ordinary least squares on
//! a tensor product of a polynomial basis in unit centroids and a natural
//! cubic spline basis in time. The regression residual is the detrended
//! exposure carried into the dynamic model.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("requested {df} degrees of freedom but only {distinct} distinct values are available")]
    InsufficientDistinctValues { df: usize, distinct: usize },
    #[error("degrees of freedom must be at least 1")]
    ZeroDf,
    #[error("knots must be strictly increasing")]
    NonIncreasingKnots,
    #[error("period must be positive, got {0}")]
    NonPositivePeriod(f64),
    #[error("basis is rank deficient and no usable columns remain")]
    RankDeficientBasis,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    NaturalCubic,
    Fourier,
    Indicator,
}

/// A fitted basis: the design evaluated on the input grid plus enough
/// metadata to evaluate at new points.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    pub kind: BasisKind,
    pub df: usize,
    /// Knot locations on the original scale (natural cubic only).
    pub knots: Vec<f64>,
    /// Design matrix, one row per input value.
    pub design: DMatrix<f64>,
    scale: (f64, f64),
}

impl SplineBasis {
    /// Evaluates the natural cubic basis at new points.
    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        assert_eq!(self.kind, BasisKind::NaturalCubic);
        let (lo, span) = self.scale;
        let std: Vec<f64> = x.iter().map(|&v| (v - lo) / span).collect();
        let knots_std: Vec<f64> = self.knots.iter().map(|&v| (v - lo) / span).collect();
        natural_cubic_design(&std, &knots_std)
    }
}

/// Natural cubic spline basis with `df` columns (intercept excluded).
///
/// Uses `df + 1` knots: the boundary values of `x` plus `df - 1` interior
/// knots at equispaced quantiles. With no interior knots the basis is the
/// identity map of `x`, so `df = 1` is a linear trend.
pub fn natural_cubic_basis(x: &[f64], df: usize) -> Result<SplineBasis, BasisError> {
    if df == 0 {
        return Err(BasisError::ZeroDf);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    if sorted.len() < df + 1 {
        return Err(BasisError::InsufficientDistinctValues {
            df,
            distinct: sorted.len(),
        });
    }
    // Boundary knots at the extremes, interior at equispaced quantiles.
    let n_knots = df + 1;
    let mut knots = Vec::with_capacity(n_knots);
    for k in 0..n_knots {
        let q = k as f64 / (n_knots - 1) as f64;
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        knots.push(sorted[lo] * (1.0 - frac) + sorted[hi] * frac);
    }
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if knots.len() != n_knots {
        return Err(BasisError::InsufficientDistinctValues {
            df,
            distinct: knots.len().saturating_sub(1),
        });
    }
    natural_cubic_basis_with_knots(x, &knots)
}

/// Natural cubic spline basis with explicit knots (first and last act as
/// boundary knots). Produces `knots.len() - 1` columns.
pub fn natural_cubic_basis_with_knots(x: &[f64], knots: &[f64]) -> Result<SplineBasis, BasisError> {
    if knots.len() < 2 {
        return Err(BasisError::ZeroDf);
    }
    if knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BasisError::NonIncreasingKnots);
    }
    // Standardize to [0, 1] over the knot range; cubed magnitudes stay tame.
    let lo = knots[0];
    let span = (knots[knots.len() - 1] - lo).max(f64::MIN_POSITIVE);
    let x_std: Vec<f64> = x.iter().map(|&v| (v - lo) / span).collect();
    let knots_std: Vec<f64> = knots.iter().map(|&v| (v - lo) / span).collect();
    let design = natural_cubic_design(&x_std, &knots_std);
    Ok(SplineBasis {
        kind: BasisKind::NaturalCubic,
        df: knots.len() - 1,
        knots: knots.to_vec(),
        design,
        scale: (lo, span),
    })
}

/// Truncated-power natural cubic design: columns are `x` followed by the
/// curvature terms `d_k(x) - d_{K-1}(x)`, which are linear beyond the
/// boundary knots.
fn natural_cubic_design(x: &[f64], knots: &[f64]) -> DMatrix<f64> {
    let k = knots.len();
    let df = k - 1;
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |j: usize, v: f64| (cube(v - knots[j]) - cube(v - knots[k - 1])) / (knots[k - 1] - knots[j]);
    DMatrix::from_fn(x.len(), df, |r, c| {
        let v = x[r];
        if c == 0 {
            v
        } else {
            d(c - 1, v) - d(k - 2, v)
        }
    })
}

/// Two-column design `(cos(2 pi t / period), sin(2 pi t / period))`.
pub fn seasonal_harmonics(t: &[f64], period: f64) -> Result<DMatrix<f64>, BasisError> {
    if !(period > 0.0) {
        return Err(BasisError::NonPositivePeriod(period));
    }
    let w = 2.0 * std::f64::consts::PI / period;
    Ok(DMatrix::from_fn(t.len(), 2, |r, c| {
        if c == 0 {
            (w * t[r]).cos()
        } else {
            (w * t[r]).sin()
        }
    }))
}

/// Result of regressing an `n x T` surface on the space-time trend basis.
#[derive(Debug, Clone)]
pub struct TrendFit {
    /// Fitted large-scale surface.
    pub fitted: DMatrix<f64>,
    /// `input - fitted`; orthogonal to every basis column used.
    pub residual: DMatrix<f64>,
    pub spatial_df: usize,
    pub temporal_df: usize,
}

/// Polynomial spatial basis: columns ordered by total degree
/// (1, x, y, x^2, xy, y^2, x^3, ...), truncated to `df` columns.
/// Coordinates are standardized before expansion.
fn spatial_polynomial_basis(coords: &[(f64, f64)], df: usize) -> DMatrix<f64> {
    let n = coords.len();
    let mean = |f: fn(&(f64, f64)) -> f64| coords.iter().map(f).sum::<f64>() / n as f64;
    let mx = mean(|c| c.0);
    let my = mean(|c| c.1);
    let sd = |f: &dyn Fn(&(f64, f64)) -> f64, m: f64| {
        (coords.iter().map(|c| (f(c) - m).powi(2)).sum::<f64>() / n as f64)
            .sqrt()
            .max(f64::MIN_POSITIVE)
    };
    let sx = sd(&|c: &(f64, f64)| c.0, mx);
    let sy = sd(&|c: &(f64, f64)| c.1, my);

    // Enumerate (px, py) exponent pairs by total degree, then by descending px.
    let mut exps = Vec::with_capacity(df);
    let mut deg = 0usize;
    'outer: loop {
        for px in (0..=deg).rev() {
            exps.push((px, deg - px));
            if exps.len() == df {
                break 'outer;
            }
        }
        deg += 1;
    }
    DMatrix::from_fn(n, df, |r, c| {
        let (px, py) = exps[c];
        let u = (coords[r].0 - mx) / sx;
        let v = (coords[r].1 - my) / sy;
        u.powi(px as i32) * v.powi(py as i32)
    })
}

/// Orthonormal column basis via column-pivoted QR; rank-deficient columns are
/// dropped with a warning.
fn orthonormal_basis(design: DMatrix<f64>, label: &str) -> Result<DMatrix<f64>, BasisError> {
    let cols = design.ncols();
    let qr = design.clone().col_piv_qr();
    let r = qr.r();
    let lead = r[(0, 0)].abs().max(f64::MIN_POSITIVE);
    let rank = (0..cols.min(r.nrows()))
        .take_while(|&i| r[(i, i)].abs() > 1e-10 * lead)
        .count();
    if rank == 0 {
        return Err(BasisError::RankDeficientBasis);
    }
    let design = if rank < cols {
        log::warn!("{label} basis rank deficient: keeping {rank} of {cols} columns");
        // Recover the pivot order: the permutation maps original column
        // positions to their pivoted slots.
        let perm = qr.p();
        let mut order = DVector::from_fn(cols, |i, _| i as f64);
        perm.permute_rows(&mut order);
        let mut kept = DMatrix::zeros(design.nrows(), rank);
        for k in 0..rank {
            kept.set_column(k, &design.column(order[k] as usize));
        }
        kept
    } else {
        design
    };
    let (q, _) = design.qr().unpack();
    Ok(q)
}

/// Least-squares fit of an `n x T` surface on the tensor product of a
/// `spatial_df`-column polynomial basis in centroids and a
/// `temporal_df`-column temporal basis (intercept plus natural cubic spline).
///
/// The tensor-product least squares problem separates: with orthonormal
/// factor bases `Qs`, `Qt` the fit is `Qs (Qs' X Qt) Qt'`, which equals the
/// full OLS projection on all `spatial_df * temporal_df` product columns.
pub fn fit_space_time_trend(
    x: &DMatrix<f64>,
    coords: &[(f64, f64)],
    spatial_df: usize,
    temporal_df: usize,
) -> Result<TrendFit, BasisError> {
    let (n, t_len) = x.shape();
    if coords.len() != n {
        return Err(BasisError::Dimension(format!(
            "{} coordinates for {} units",
            coords.len(),
            n
        )));
    }
    if spatial_df == 0 || temporal_df == 0 {
        return Err(BasisError::ZeroDf);
    }
    if spatial_df > n || temporal_df > t_len {
        return Err(BasisError::InsufficientDistinctValues {
            df: spatial_df.max(temporal_df),
            distinct: n.min(t_len),
        });
    }

    let s = spatial_polynomial_basis(coords, spatial_df);
    let times: Vec<f64> = (0..t_len).map(|t| t as f64).collect();
    let b = temporal_trend_basis(&times, temporal_df)?;

    let qs = orthonormal_basis(s, "spatial")?;
    let qt = orthonormal_basis(b, "temporal")?;

    let core = qs.transpose() * x * &qt;
    let fitted = &qs * core * qt.transpose();
    let residual = x - &fitted;
    Ok(TrendFit {
        fitted,
        residual,
        spatial_df,
        temporal_df,
    })
}

/// Intercept column plus a natural cubic spline with `df - 1` columns.
pub fn temporal_trend_basis(times: &[f64], df: usize) -> Result<DMatrix<f64>, BasisError> {
    let t_len = times.len();
    let mut b = DMatrix::zeros(t_len, df);
    b.column_mut(0).fill(1.0);
    if df > 1 {
        let spline = natural_cubic_basis(times, df - 1)?;
        b.view_mut((0, 1), (t_len, df - 1)).copy_from(&spline.design);
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn df1_is_monotone_single_column() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let b = natural_cubic_basis(&x, 1).unwrap();
        assert_eq!(b.design.ncols(), 1);
        for w in b.design.column(0).iter().collect::<Vec<_>>().windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn df4_full_rank_via_qr() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b = natural_cubic_basis(&x, 4).unwrap();
        assert_eq!(b.design.ncols(), 4);
        let r = b.design.clone().col_piv_qr().r();
        let lead = r[(0, 0)].abs();
        let rank = (0..4).filter(|&i| r[(i, i)].abs() > 1e-10 * lead).count();
        assert_eq!(rank, 4);
    }

    #[test]
    fn natural_boundary_second_derivative_zero() {
        let x: Vec<f64> = (0..200).map(|i| i as f64 / 10.0).collect();
        let b = natural_cubic_basis(&x, 5).unwrap();
        let h = 1e-4;
        for &edge in &[0.0, 19.9] {
            let pts = [edge - h, edge, edge + h];
            let vals = b.evaluate(&pts);
            for c in 0..vals.ncols() {
                let second = (vals[(0, c)] - 2.0 * vals[(1, c)] + vals[(2, c)]) / (h * h);
                assert_abs_diff_eq!(second, 0.0, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn rejects_too_few_distinct_values() {
        let x = vec![1.0, 1.0, 2.0, 2.0];
        assert!(matches!(
            natural_cubic_basis(&x, 4),
            Err(BasisError::InsufficientDistinctValues { .. })
        ));
    }

    #[test]
    fn harmonics_values() {
        let design = seasonal_harmonics(&[0.0], 365.0).unwrap();
        assert_abs_diff_eq!(design[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(design[(0, 1)], 0.0, epsilon = 1e-12);

        let design = seasonal_harmonics(&[365.0 / 4.0], 365.0).unwrap();
        assert_abs_diff_eq!(design[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(design[(0, 1)], 1.0, epsilon = 1e-12);

        let design = seasonal_harmonics(&[365.0], 365.0).unwrap();
        assert_abs_diff_eq!(design[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(design[(0, 1)], 0.0, epsilon = 1e-10);

        assert!(seasonal_harmonics(&[0.0], 0.0).is_err());
    }

    fn demo_coords(n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| ((i % 4) as f64, (i / 4) as f64)).collect()
    }

    #[test]
    fn constant_surface_reproduced() {
        let x = DMatrix::from_element(12, 30, 3.25);
        let fit = fit_space_time_trend(&x, &demo_coords(12), 3, 5).unwrap();
        assert_abs_diff_eq!((fit.fitted - &x).norm(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.residual.norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn basis_column_surface_has_zero_residual() {
        // Build the surface from a temporal basis column itself.
        let t_len = 40;
        let times: Vec<f64> = (0..t_len).map(|t| t as f64).collect();
        let b = temporal_trend_basis(&times, 6).unwrap();
        let col = b.column(3).into_owned();
        let x = DMatrix::from_fn(12, t_len, |_, t| col[t]);
        let fit = fit_space_time_trend(&x, &demo_coords(12), 3, 6).unwrap();
        assert!(fit.residual.norm() < 1e-8 * x.norm().max(1.0));
    }

    #[test]
    fn orthogonality_and_pythagoras() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(12, 50, |_, _| rng.gen_range(-1.0..1.0));
        let fit = fit_space_time_trend(&x, &demo_coords(12), 4, 8).unwrap();

        // fitted + residual reproduces the input exactly.
        assert_abs_diff_eq!((&fit.fitted + &fit.residual - &x).norm(), 0.0, epsilon = 1e-12);

        // Least-squares Pythagoras at 1e-8 relative.
        let total = x.norm_squared();
        let parts = fit.fitted.norm_squared() + fit.residual.norm_squared();
        assert!((total - parts).abs() < 1e-8 * total);

        // Residual orthogonal to fitted surface.
        let cross = fit.fitted.iter().zip(fit.residual.iter()).map(|(a, b)| a * b).sum::<f64>();
        assert!(cross.abs() < 1e-8 * total);
    }

    #[test]
    fn detrending_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(12, 50, |_, _| rng.gen_range(-1.0..1.0));
        let fit = fit_space_time_trend(&x, &demo_coords(12), 4, 8).unwrap();
        let refit = fit_space_time_trend(&fit.residual, &demo_coords(12), 4, 8).unwrap();
        assert!(refit.fitted.norm() < 1e-8 * x.norm());
    }

    #[test]
    fn collinear_spatial_columns_dropped() {
        // All units on one row: y coordinate is constant, so any y term is
        // collinear with the intercept.
        let coords: Vec<(f64, f64)> = (0..12).map(|i| (i as f64, 0.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(12, 30, |_, _| rng.gen_range(-1.0..1.0));
        let fit = fit_space_time_trend(&x, &coords, 4, 5).unwrap();
        assert_abs_diff_eq!((&fit.fitted + &fit.residual - &x).norm(), 0.0, epsilon = 1e-12);
    }
}
