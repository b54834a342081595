//! Numerical kernels shared by both algorithms: the masked least-squares loss
//! and its two partial gradients, the ridge and ℓ1 proximal maps, the
//! Frobenius Lipschitz rules, and power iteration for small Gram matrices.

use ndarray::{Array1, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_factor_shapes, MaskedMatrix};
use crate::{Error, Matrix, Result};

/// Lower bound applied to every Lipschitz constant and step-size eigenvalue.
pub const LIPSCHITZ_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    /// `R_i(U) = λ/2 ‖U‖²_F`, `R(V) = γ/2 ‖V‖²_F`.
    #[serde(alias = "l2")]
    Ridge,
    /// `R_i(U) = λ ‖U‖_1`, `R(V) = γ ‖V‖_1`.
    L1,
}

/// Client-side (`λ`) and server-side (`γ`) regularization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    pub lambda: f64,
    pub gamma: f64,
}

impl RegularizerSpec {
    pub fn ridge(lambda: f64, gamma: f64) -> Self {
        RegularizerSpec {
            kind: RegKind::Ridge,
            lambda,
            gamma,
        }
    }

    pub fn l1(lambda: f64, gamma: f64) -> Self {
        RegularizerSpec {
            kind: RegKind::L1,
            lambda,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    fn value(&self, x: &Matrix, weight: f64) -> f64 {
        match self.kind {
            RegKind::Ridge => 0.5 * weight * frob_sq(x),
            RegKind::L1 => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
        }
    }

    /// `R_i(U)`.
    pub fn client_value(&self, u: &Matrix) -> f64 {
        self.value(u, self.lambda)
    }

    /// `R(V)`.
    pub fn server_value(&self, v: &Matrix) -> f64 {
        self.value(v, self.gamma)
    }

    /// One proximal gradient step on `U`:
    /// `argmin_X ⟨G, X⟩ + (L/2)‖X − U‖² + R_i(X)`.
    pub fn client_prox_step(&self, u: &Matrix, grad: &Matrix, lipschitz: f64) -> Matrix {
        match self.kind {
            RegKind::Ridge => {
                let denom = lipschitz + self.lambda;
                Zip::from(u)
                    .and(grad)
                    .map_collect(|&x, &g| (lipschitz * x - g) / denom)
            }
            RegKind::L1 => {
                let tau = self.lambda / lipschitz;
                Zip::from(u)
                    .and(grad)
                    .map_collect(|&x, &g| shrink(x - g / lipschitz, tau))
            }
        }
    }
}

/// `½‖P_Ω(UW − M)‖²_F`.
pub fn masked_loss(m: &MaskedMatrix, u: &Matrix, w: &Matrix) -> f64 {
    let mut acc = 0.0;
    for t in 0..m.rows() {
        let u_row = u.row(t);
        let (cols, vals) = m.row(t);
        for (&j, &x) in cols.iter().zip(vals) {
            let r = u_row.dot(&w.column(j)) - x;
            acc += r * r;
        }
    }
    0.5 * acc
}

/// `∇_U f(U, W) = P_Ω(UW − M) Wᵀ`, an `m_i × r` matrix.
pub fn grad_u(m: &MaskedMatrix, u: &Matrix, w: &Matrix) -> Matrix {
    let rank = u.ncols();
    let mut g = Array2::zeros((m.rows(), rank));
    for t in 0..m.rows() {
        let u_row = u.row(t);
        let (cols, vals) = m.row(t);
        let mut g_row = g.row_mut(t);
        for (&j, &x) in cols.iter().zip(vals) {
            let w_col = w.column(j);
            let r = u_row.dot(&w_col) - x;
            g_row.scaled_add(r, &w_col);
        }
    }
    g
}

/// `∇_V f(U, W) = Uᵀ P_Ω(UW − M)`, an `r × n` matrix.
pub fn grad_v(m: &MaskedMatrix, u: &Matrix, w: &Matrix) -> Matrix {
    let rank = u.ncols();
    let mut g = Array2::zeros((rank, m.cols()));
    for t in 0..m.rows() {
        let u_row = u.row(t);
        let (cols, vals) = m.row(t);
        for (&j, &x) in cols.iter().zip(vals) {
            let r = u_row.dot(&w.column(j)) - x;
            g.column_mut(j).scaled_add(r, &u_row);
        }
    }
    g
}

/// Checked wrapper over [`grad_v`] for public callers.
pub fn grad_v_checked(m: &MaskedMatrix, u: &Matrix, w: &Matrix) -> Result<Matrix> {
    check_factor_shapes(m, u, w)?;
    Ok(grad_v(m, u, w))
}

#[inline]
fn shrink(x: f64, tau: f64) -> f64 {
    let mag = x.abs() - tau;
    if mag > 0.0 {
        mag.copysign(x)
    } else {
        0.0
    }
}

/// Entrywise soft-thresholding `[|q| − τ]₊ · sign(q)`.
pub fn soft_threshold(q: &Matrix, tau: f64) -> Result<Matrix> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Domain(format!("soft-threshold level must be >= 0, got {tau}")));
    }
    Ok(q.mapv(|x| shrink(x, tau)))
}

pub fn frob_sq(x: &Matrix) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn frob(x: &Matrix) -> f64 {
    frob_sq(x).sqrt()
}

pub(crate) fn frob_dist_sq(a: &Matrix, b: &Matrix) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

fn ensure_finite(x: &Matrix, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has non-finite entries")))
    }
}

/// Lipschitz constant of `∇_U f(·, W)`: `max(‖W Wᵀ‖_F, floor)`.
pub fn lipschitz_for_u_step(w: &Matrix) -> Result<f64> {
    ensure_finite(w, "W")?;
    Ok(frob(&w.dot(&w.t())).max(LIPSCHITZ_FLOOR))
}

/// Lipschitz constant of `∇_V f(U, ·)`: `max(‖UᵀU‖_F, floor)`.
pub fn lipschitz_for_w_step(u: &Matrix) -> Result<f64> {
    ensure_finite(u, "U")?;
    Ok(frob(&u.t().dot(u)).max(LIPSCHITZ_FLOOR))
}

/// The two step constants in effect for one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimates {
    /// Constant of `∇_U f_i(·, W)`, used by the U-steps.
    pub l_w: f64,
    /// Constant of `∇_V f_i(U, ·)`, used by the W-steps.
    pub l_u: f64,
}

impl LipschitzEstimates {
    pub fn from_factors(u: &Matrix, w: &Matrix) -> Result<Self> {
        Ok(LipschitzEstimates {
            l_w: lipschitz_for_u_step(w)?,
            l_u: lipschitz_for_w_step(u)?,
        })
    }
}

pub const SPECTRAL_TOL: f64 = 1e-6;
pub const SPECTRAL_MAX_ITERS: usize = 200;
const SPECTRAL_START_SEED: u64 = 0x005e_ed0f_e16e;

/// Largest eigenvalue of a small symmetric positive semidefinite matrix by
/// power iteration from a fixed pseudo-random start vector.
///
/// Each iteration applies the current power `A^(2^k)` and then squares it, so
/// close leading eigenvalues still separate within a few dozen iterations.
/// Stops once the eigen-residual `‖Ax − μx‖` of the Rayleigh quotient `μ` is
/// at most `tol·μ`.
pub fn spectral_max(a: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("{}x{} is not square", n, a.ncols())));
    }
    ensure_finite(a, "matrix")?;
    if n == 0 {
        return Ok(0.0);
    }
    let scale = a.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-10 * scale {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }
    if a.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SPECTRAL_START_SEED);
    let mut x: Array1<f64> = Array1::from_shape_fn(n, |_| rng.random_range(0.5..1.5));
    x /= x.dot(&x).sqrt();
    let mut power = a / scale;
    let mut rayleigh = 0.0;
    for _ in 0..max_iters {
        let y = power.dot(&x);
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        x = y / norm;
        let ax = a.dot(&x);
        rayleigh = x.dot(&ax);
        let residual = (&ax - &(&x * rayleigh)).dot(&(&ax - &(&x * rayleigh))).sqrt();
        if residual <= tol * rayleigh.abs() {
            break;
        }
        power = power.dot(&power);
        let p_scale = power.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        if p_scale == 0.0 {
            break;
        }
        power /= p_scale;
    }
    Ok(rayleigh)
}
