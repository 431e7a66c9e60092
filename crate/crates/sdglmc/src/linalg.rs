//! Factorizations and Gaussian draws for the structured precision matrices
//! used by the samplers.
//!
//! All conditionals here have the form `N(P^-1 b, P^-1)` with a sparse
//! symmetric positive definite precision `P`. Each solver factors `P = L L'`,
//! computes the mean by forward/backward substitution, and adds noise by one
//! extra backward solve `L' w = z` so that all time points of a coefficient
//! block are drawn jointly in a single pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("precision matrix is not positive definite (block {0})")]
    NotPositiveDefinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Fills a vector with independent standard normal draws.
pub fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Draw from `N(P^-1 rhs, P^-1)` for a dense SPD precision `P`.
pub fn sample_gaussian_dense<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, LinalgError> {
    let chol = precision
        .clone()
        .cholesky()
        .ok_or(LinalgError::NotPositiveDefinite(0))?;
    let mean = chol.solve(rhs);
    let z = standard_normal_vector(rhs.len(), rng);
    // L' w = z  =>  w ~ N(0, P^-1)
    let w = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(LinalgError::NotPositiveDefinite(0))?;
    Ok(mean + w)
}

/// Symmetric positive definite block-tridiagonal system with square blocks
/// of size `m` and `nb` diagonal blocks. `sub[t]` couples block `t+1` to
/// block `t`.
#[derive(Debug, Clone)]
pub struct BlockTridiag {
    pub m: usize,
    pub diag: Vec<DMatrix<f64>>,
    pub sub: Vec<DMatrix<f64>>,
}

impl BlockTridiag {
    pub fn zeros(m: usize, nb: usize) -> Self {
        Self {
            m,
            diag: (0..nb).map(|_| DMatrix::zeros(m, m)).collect(),
            sub: (0..nb.saturating_sub(1)).map(|_| DMatrix::zeros(m, m)).collect(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        self.m * self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let m = self.m;
        let mut out = DMatrix::zeros(n, n);
        for (t, d) in self.diag.iter().enumerate() {
            out.view_mut((t * m, t * m), (m, m)).copy_from(d);
        }
        for (t, s) in self.sub.iter().enumerate() {
            out.view_mut(((t + 1) * m, t * m), (m, m)).copy_from(s);
            out.view_mut((t * m, (t + 1) * m), (m, m))
                .copy_from(&s.transpose());
        }
        out
    }

    /// In-place block Cholesky `P = L L'`. After success `diag[t]` holds the
    /// lower Cholesky factor `L_t` and `sub[t]` the subdiagonal factor `C_{t+1}`.
    pub fn factor(mut self) -> Result<BlockCholesky, LinalgError> {
        let nb = self.n_blocks();
        for t in 0..nb {
            if t > 0 {
                // C_t = S_t L_{t-1}^{-T}: solve via triangular substitution.
                let lt_prev = &self.diag[t - 1];
                let c = transposed_lower_solve(lt_prev, &self.sub[t - 1]);
                // D~_t = D_t - C_t C_t'
                let update = &c * c.transpose();
                self.diag[t] -= update;
                self.sub[t - 1] = c;
            }
            let chol = self.diag[t]
                .clone()
                .cholesky()
                .ok_or(LinalgError::NotPositiveDefinite(t))?;
            self.diag[t] = chol.unpack();
        }
        Ok(BlockCholesky {
            m: self.m,
            l_diag: self.diag,
            l_sub: self.sub,
        })
    }
}

/// Computes `X = B L^{-T}` for lower-triangular `L`, i.e. solves `X L' = B`.
fn transposed_lower_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    // X L' = B  <=>  L X' = B'
    let mut xt = b.transpose();
    l.solve_lower_triangular_mut(&mut xt);
    xt.transpose()
}

/// Block Cholesky factor of a [`BlockTridiag`] precision.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    m: usize,
    l_diag: Vec<DMatrix<f64>>,
    l_sub: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    pub fn dim(&self) -> usize {
        self.m * self.l_diag.len()
    }

    /// Solves `P x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        self.forward_in_place(&mut y);
        self.backward_in_place(&mut y);
        y
    }

    /// `L y = b`, blockwise.
    fn forward_in_place(&self, v: &mut DVector<f64>) {
        let m = self.m;
        let nb = self.l_diag.len();
        for t in 0..nb {
            if t > 0 {
                let prev = v.rows(m * (t - 1), m).into_owned();
                let mut cur = v.rows_mut(m * t, m);
                cur.gemv(-1.0, &self.l_sub[t - 1], &prev, 1.0);
            }
            let mut cur = v.rows_mut(m * t, m);
            let mut tmp = cur.clone_owned();
            self.l_diag[t].solve_lower_triangular_mut(&mut tmp);
            cur.copy_from(&tmp);
        }
    }

    /// `L' x = y`, blockwise.
    fn backward_in_place(&self, v: &mut DVector<f64>) {
        let m = self.m;
        let nb = self.l_diag.len();
        for t in (0..nb).rev() {
            if t + 1 < nb {
                let next = v.rows(m * (t + 1), m).into_owned();
                let mut cur = v.rows_mut(m * t, m);
                cur.gemv_tr(-1.0, &self.l_sub[t], &next, 1.0);
            }
            let mut cur = v.rows_mut(m * t, m);
            let mut tmp = cur.clone_owned();
            self.l_diag[t].tr_solve_lower_triangular_mut(&mut tmp);
            cur.copy_from(&tmp);
        }
    }

    /// Draw from `N(P^-1 rhs, P^-1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rhs: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mut mean = rhs.clone();
        self.forward_in_place(&mut mean);
        self.backward_in_place(&mut mean);
        let mut noise = standard_normal_vector(self.dim(), rng);
        self.backward_in_place(&mut noise);
        mean + noise
    }
}

/// Scalar symmetric positive definite tridiagonal system, used for the
/// per-area random-walk blocks which decouple across areas.
#[derive(Debug, Clone)]
pub struct TridiagCholesky {
    d: Vec<f64>,
    e: Vec<f64>,
}

impl TridiagCholesky {
    /// Factors a tridiagonal SPD matrix with diagonal `diag` and subdiagonal
    /// `sub` into `L L'` with `L` lower bidiagonal.
    pub fn factor(diag: &[f64], sub: &[f64]) -> Result<Self, LinalgError> {
        if sub.len() + 1 != diag.len() {
            return Err(LinalgError::Dimension(format!(
                "tridiagonal sizes {} / {}",
                diag.len(),
                sub.len()
            )));
        }
        let n = diag.len();
        let mut d = vec![0.0; n];
        let mut e = vec![0.0; n.saturating_sub(1)];
        for t in 0..n {
            let mut v = diag[t];
            if t > 0 {
                let c = sub[t - 1] / d[t - 1];
                e[t - 1] = c;
                v -= c * c;
            }
            if v <= 0.0 || !v.is_finite() {
                return Err(LinalgError::NotPositiveDefinite(t));
            }
            d[t] = v.sqrt();
        }
        Ok(Self { d, e })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    fn forward(&self, v: &mut [f64]) {
        for t in 0..self.d.len() {
            if t > 0 {
                v[t] -= self.e[t - 1] * v[t - 1];
            }
            v[t] /= self.d[t];
        }
    }

    fn backward(&self, v: &mut [f64]) {
        for t in (0..self.d.len()).rev() {
            if t + 1 < self.d.len() {
                v[t] -= self.e[t] * v[t + 1];
            }
            v[t] /= self.d[t];
        }
    }

    /// Solves `P x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward(b);
        self.backward(b);
    }

    /// Draw from `N(P^-1 rhs, P^-1)`, writing over `rhs`.
    pub fn sample_in_place<R: Rng + ?Sized>(&self, rhs: &mut [f64], rng: &mut R) {
        self.forward(rhs);
        self.backward(rhs);
        let mut noise: Vec<f64> = (0..self.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.backward(&mut noise);
        for (r, z) in rhs.iter_mut().zip(noise) {
            *r += z;
        }
    }
}
