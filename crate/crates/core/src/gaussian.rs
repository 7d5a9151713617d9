//! The 2D Gaussian weight `G = exp(−½ dᵀ Σ⁻¹ d)`, `d = π − x`, and its
//! derivatives with respect to the projected centre and covariance.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

/// All derivatives of the weight, in full 2×2 tensor form. Covariance
/// derivatives are symmetrised over each `(p, l)` index pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeight {
    pub g: f64,
    pub d_pi: Vector2<f64>,
    pub d2_pi: Matrix2<f64>,
    pub d_sigma: Matrix2<f64>,
    /// `d2_sigma[p][l][(g, h)] = ∂²G/∂Σ_pl∂Σ_gh`
    pub d2_sigma: [[Matrix2<f64>; 2]; 2],
    /// `d2_pi_sigma[i][(p, l)] = ∂²G/∂π_i∂Σ_pl`
    pub d2_pi_sigma: [Matrix2<f64>; 2],
}

pub fn invert_cov2d(sigma: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let det = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
    if !(det > 1e-300) || !det.is_finite() {
        return Err(Error::NumericalDegeneracy(format!("2D covariance is singular (det = {det:e})")));
    }
    Ok(Matrix2::new(sigma[(1, 1)], -sigma[(0, 1)], -sigma[(1, 0)], sigma[(0, 0)]) / det)
}

/// Value of the weight given a precomputed inverse covariance.
#[inline]
pub fn weight(inv: &Matrix2<f64>, pi: &Vector2<f64>, x: &Vector2<f64>) -> f64 {
    let d = pi - x;
    let e = inv[(0, 0)] * d.x * d.x + 2.0 * inv[(0, 1)] * d.x * d.y + inv[(1, 1)] * d.y * d.y;
    (-0.5 * e).exp()
}

pub fn gaussian_weight(sigma: &Matrix2<f64>, pi: &Vector2<f64>, x: &Vector2<f64>) -> Result<GaussianWeight> {
    let q = invert_cov2d(sigma)?;
    let g = weight(&q, pi, x);
    let y = q * (pi - x);
    let d_pi = -y * g;
    let d2_pi = (y * y.transpose() - q) * g;
    let d_sigma = y * y.transpose() * (0.5 * g);
    let mut d2_sigma = [[Matrix2::zeros(); 2]; 2];
    let raw = |p: usize, l: usize, a: usize, b: usize| {
        0.25 * g * y[p] * y[l] * y[a] * y[b] - 0.5 * g * y[b] * (q[(p, a)] * y[l] + q[(l, a)] * y[p])
    };
    for p in 0..2 {
        for l in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    d2_sigma[p][l][(a, b)] =
                        0.25 * (raw(p, l, a, b) + raw(l, p, a, b) + raw(p, l, b, a) + raw(l, p, b, a));
                }
            }
        }
    }
    let mut d2_pi_sigma = [Matrix2::zeros(); 2];
    for (i, m) in d2_pi_sigma.iter_mut().enumerate() {
        for p in 0..2 {
            for l in 0..2 {
                let r = |p: usize, l: usize| -0.5 * g * y[p] * y[l] * y[i] + g * q[(i, p)] * y[l];
                m[(p, l)] = 0.5 * (r(p, l) + r(l, p));
            }
        }
    }
    Ok(GaussianWeight {
        g,
        d_pi,
        d2_pi,
        d_sigma,
        d2_sigma,
        d2_pi_sigma,
    })
}

/// The weight as a function of the five free screen-space quantities
/// `z = (π_x, π_y, Σ₀₀, Σ₀₁, Σ₁₁)`; the off-diagonal entry moves both
/// `Σ₀₁` and `Σ₁₀`. This is the form the solvers contract against.
#[derive(Debug, Clone, Copy)]
pub struct WeightJet {
    pub g: f64,
    pub grad: [f64; 5],
    pub hess: [[f64; 5]; 5],
}

#[inline]
pub fn weight_grad(inv: &Matrix2<f64>, pi: &Vector2<f64>, x: &Vector2<f64>, g: f64) -> [f64; 5] {
    let d = pi - x;
    let y0 = inv[(0, 0)] * d.x + inv[(0, 1)] * d.y;
    let y1 = inv[(1, 0)] * d.x + inv[(1, 1)] * d.y;
    let h = -0.5 * g;
    [
        h * 2.0 * y0,
        h * 2.0 * y1,
        -h * y0 * y0,
        -h * 2.0 * y0 * y1,
        -h * y1 * y1,
    ]
}

pub fn weight_jet(inv: &Matrix2<f64>, pi: &Vector2<f64>, x: &Vector2<f64>, g: f64) -> WeightJet {
    let d = pi - x;
    let y = inv * d;
    let (y0, y1) = (y.x, y.y);
    let de = [2.0 * y0, 2.0 * y1, -y0 * y0, -2.0 * y0 * y1, -y1 * y1];
    // E_α y for the three symmetric unit perturbations
    let ey = [Vector2::new(y0, 0.0), Vector2::new(y1, y0), Vector2::new(0.0, y1)];
    let mut dde = [[0.0; 5]; 5];
    dde[0][0] = 2.0 * inv[(0, 0)];
    dde[0][1] = 2.0 * inv[(0, 1)];
    dde[1][0] = 2.0 * inv[(1, 0)];
    dde[1][1] = 2.0 * inv[(1, 1)];
    let qey: [Vector2<f64>; 3] = [inv * ey[0], inv * ey[1], inv * ey[2]];
    for a in 0..3 {
        for i in 0..2 {
            let v = -2.0 * qey[a][i];
            dde[i][2 + a] = v;
            dde[2 + a][i] = v;
        }
        for b in a..3 {
            let v = 2.0 * ey[a].dot(&qey[b]);
            dde[2 + a][2 + b] = v;
            dde[2 + b][2 + a] = v;
        }
    }
    let mut grad = [0.0; 5];
    let mut hess = [[0.0; 5]; 5];
    for i in 0..5 {
        grad[i] = -0.5 * g * de[i];
        for j in 0..5 {
            hess[i][j] = g * (0.25 * de[i] * de[j] - 0.5 * dde[i][j]);
        }
    }
    WeightJet { g, grad, hess }
}
