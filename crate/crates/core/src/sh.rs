//! Real spherical harmonics up to degree 3: basis values, their derivatives
//! with respect to the view direction, and the chained derivatives of the
//! view-dependent colour with respect to the kernel position.
//!
//! The basis uses the sign pattern `(−r_y, r_z, −r_x)` for degree 1 with the
//! standard real-SH normalisation constants folded in. Colours carry a +0.5
//! offset and are clamped at zero; a clamped channel has zero derivatives.

use nalgebra::{Matrix3, Vector3};

use crate::camera::{view_direction, Camera};
use crate::error::{Error, Result};
use crate::scene::{GaussianKernel, SH_COEFFS};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values with first and second derivatives w.r.t. the direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ShBasis {
    pub values: [f64; SH_COEFFS],
    pub jacobian: [Vector3<f64>; SH_COEFFS],
    pub hessian: [Matrix3<f64>; SH_COEFFS],
}

/// Evaluates the basis at a unit direction; entries above `degree` are zero.
pub fn eval_sh_basis(r: &Vector3<f64>, degree: u8) -> Result<ShBasis> {
    if (r.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("direction norm {} is not unit", r.norm())));
    }
    Ok(sh_polynomials(r, degree))
}

/// The basis polynomials evaluated at an arbitrary point of R³ (no unit check).
pub fn sh_polynomials(r: &Vector3<f64>, degree: u8) -> ShBasis {
    let (x, y, z) = (r.x, r.y, r.z);
    let mut v = [0.0; SH_COEFFS];
    let mut g = [Vector3::zeros(); SH_COEFFS];
    let mut h = [Matrix3::zeros(); SH_COEFFS];
    // symmetric Hessian from (xx, xy, xz, yy, yz, zz)
    let sym = |e: [f64; 6], c: f64| Matrix3::new(e[0], e[1], e[2], e[1], e[3], e[4], e[2], e[4], e[5]) * c;

    v[0] = SH_C0;
    if degree >= 1 {
        v[1] = -SH_C1 * y;
        v[2] = SH_C1 * z;
        v[3] = -SH_C1 * x;
        g[1] = Vector3::new(0.0, -SH_C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, SH_C1);
        g[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        let c = SH_C2;
        v[4] = c[0] * x * y;
        v[5] = c[1] * y * z;
        v[6] = c[2] * (2.0 * z * z - x * x - y * y);
        v[7] = c[3] * x * z;
        v[8] = c[4] * (x * x - y * y);
        g[4] = Vector3::new(y, x, 0.0) * c[0];
        g[5] = Vector3::new(0.0, z, y) * c[1];
        g[6] = Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z) * c[2];
        g[7] = Vector3::new(z, 0.0, x) * c[3];
        g[8] = Vector3::new(2.0 * x, -2.0 * y, 0.0) * c[4];
        h[4] = sym([0.0, 1.0, 0.0, 0.0, 0.0, 0.0], c[0]);
        h[5] = sym([0.0, 0.0, 0.0, 0.0, 1.0, 0.0], c[1]);
        h[6] = sym([-2.0, 0.0, 0.0, -2.0, 0.0, 4.0], c[2]);
        h[7] = sym([0.0, 0.0, 1.0, 0.0, 0.0, 0.0], c[3]);
        h[8] = sym([2.0, 0.0, 0.0, -2.0, 0.0, 0.0], c[4]);
    }
    if degree >= 3 {
        let c = SH_C3;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v[9] = c[0] * y * (3.0 * xx - yy);
        v[10] = c[1] * x * y * z;
        v[11] = c[2] * y * (4.0 * zz - xx - yy);
        v[12] = c[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        v[13] = c[4] * x * (4.0 * zz - xx - yy);
        v[14] = c[5] * z * (xx - yy);
        v[15] = c[6] * x * (xx - 3.0 * yy);
        g[9] = Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0) * c[0];
        g[10] = Vector3::new(y * z, x * z, x * y) * c[1];
        g[11] = Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z) * c[2];
        g[12] = Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy) * c[3];
        g[13] = Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z) * c[4];
        g[14] = Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy) * c[5];
        g[15] = Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0) * c[6];
        h[9] = sym([6.0 * y, 6.0 * x, 0.0, -6.0 * y, 0.0, 0.0], c[0]);
        h[10] = sym([0.0, z, y, 0.0, x, 0.0], c[1]);
        h[11] = sym([-2.0 * y, -2.0 * x, 0.0, -6.0 * y, 8.0 * z, 8.0 * y], c[2]);
        h[12] = sym([-6.0 * z, 0.0, -6.0 * x, -6.0 * z, -6.0 * y, 12.0 * z], c[3]);
        h[13] = sym([-6.0 * x, -2.0 * y, 8.0 * z, -2.0 * x, 0.0, 8.0 * x], c[4]);
        h[14] = sym([2.0 * z, 0.0, 2.0 * x, -2.0 * z, -2.0 * y, 0.0], c[5]);
        h[15] = sym([6.0 * x, -6.0 * y, 0.0, -6.0 * x, 0.0, 0.0], c[6]);
    }
    ShBasis {
        values: v,
        jacobian: g,
        hessian: h,
    }
}

/// View-dependent colour `max(0, Φ·c + 0.5)` per channel, with a flag telling
/// whether the channel is unclamped (and therefore differentiable).
pub fn eval_view_color(basis: &ShBasis, sh: &[[f64; SH_COEFFS]; 3]) -> ([f64; 3], [bool; 3]) {
    let mut color = [0.0; 3];
    let mut active = [false; 3];
    for ch in 0..3 {
        let raw: f64 = basis.values.iter().zip(&sh[ch]).map(|(b, c)| b * c).sum::<f64>() + 0.5;
        active[ch] = raw > 0.0;
        color[ch] = raw.max(0.0);
    }
    (color, active)
}

/// Position derivatives of the view-dependent colour: row `ch` of the first
/// matrix is `∂c̃_ch/∂p`, and `hess[ch]` is `∂²c̃_ch/∂p²`.
#[derive(Debug, Clone)]
pub struct ColorPositionDerivs {
    pub color: [f64; 3],
    pub active: [bool; 3],
    pub grad: [Vector3<f64>; 3],
    pub hess: [Matrix3<f64>; 3],
}

pub fn sh_color_derivs_wrt_position(
    camera: &Camera,
    kernel: &GaussianKernel,
    degree: u8,
) -> Result<ColorPositionDerivs> {
    let r = view_direction(camera, &kernel.position)?;
    let rho = (kernel.position - camera.center).norm();
    let basis = sh_polynomials(&r, degree);
    let (color, active) = eval_view_color(&basis, &kernel.sh);

    // ∂r/∂p = (I − r rᵀ)/ρ
    let dr = (Matrix3::identity() - r * r.transpose()) / rho;
    // ∂²r_i/∂p_j∂p_k = −(δ_ij r_k + δ_ik r_j + δ_jk r_i − 3 r_i r_j r_k)/ρ²
    let d2r = |i: usize, j: usize, k: usize| {
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        -(d(i, j) * r[k] + d(i, k) * r[j] + d(j, k) * r[i] - 3.0 * r[i] * r[j] * r[k]) / (rho * rho)
    };
    let mut grad = [Vector3::zeros(); 3];
    let mut hess = [Matrix3::zeros(); 3];
    if degree == 0 {
        return Ok(ColorPositionDerivs {
            color,
            active,
            grad,
            hess,
        });
    }
    let n = crate::scene::sh_coeffs_for_degree(degree);
    for ch in 0..3 {
        if !active[ch] {
            continue;
        }
        let coeffs = &kernel.sh[ch];
        let mut g_r = Vector3::zeros();
        let mut h_r = Matrix3::zeros();
        for b in 1..n {
            g_r += basis.jacobian[b] * coeffs[b];
            h_r += basis.hessian[b] * coeffs[b];
        }
        grad[ch] = dr.transpose() * g_r;
        let mut hp = dr.transpose() * h_r * dr;
        for j in 0..3 {
            for k in 0..3 {
                hp[(j, k)] += (0..3).map(|i| g_r[i] * d2r(i, j, k)).sum::<f64>();
            }
        }
        hess[ch] = hp;
    }
    Ok(ColorPositionDerivs {
        color,
        active,
        grad,
        hess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use nalgebra::{Quaternion, Rotation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.2 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn degree_zero_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let b = eval_sh_basis(&random_unit(&mut rng), 0).unwrap();
            assert_eq!(b.values[0], SH_C0);
            assert_eq!(b.jacobian[0], Vector3::zeros());
            assert!(b.values[1..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn degree_one_sign_pattern() {
        let b = eval_sh_basis(&Vector3::new(0.0, 0.0, 1.0), 1).unwrap();
        assert_eq!(&b.values[1..4], &[0.0, SH_C1, 0.0]);
        let b = eval_sh_basis(&Vector3::new(0.6, 0.8, 0.0), 1).unwrap();
        assert!((b.values[1] + SH_C1 * 0.8).abs() < 1e-15);
        assert!((b.values[3] + SH_C1 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        assert!(eval_sh_basis(&Vector3::new(0.0, 0.0, 1.1), 3).is_err());
    }

    #[test]
    fn basis_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let r = random_unit(&mut rng);
            let b = sh_polynomials(&r, 3);
            let x: [f64; 3] = r.into();
            let num = fd::jacobian(|v| sh_polynomials(&Vector3::new(v[0], v[1], v[2]), 3).values.to_vec(), &x, 1e-5);
            for i in 0..16 {
                let ana: Vec<f64> = b.jacobian[i].iter().copied().collect();
                assert!(fd::rel_err(&ana, &num[i], 1e-6) < 1e-5, "basis {i}");
            }
            for i in 0..16 {
                let num2 = fd::jacobian(
                    |v| sh_polynomials(&Vector3::new(v[0], v[1], v[2]), 3).jacobian[i].iter().copied().collect(),
                    &x,
                    1e-5,
                );
                let ana: Vec<f64> = b.hessian[i].iter().copied().collect();
                let numv: Vec<f64> = (0..3).flat_map(|c| (0..3).map(move |rr| (rr, c))).map(|(rr, c)| num2[rr][c]).collect();
                assert!(fd::rel_err(&ana, &numv, 1e-6) < 1e-5, "basis {i}");
            }
        }
    }

    #[test]
    fn zero_coefficients_give_half_grey() {
        let b = eval_sh_basis(&Vector3::z(), 3).unwrap();
        let (c, active) = eval_view_color(&b, &[[0.0; 16]; 3]);
        assert_eq!(c, [0.5; 3]);
        assert_eq!(active, [true; 3]);
    }

    #[test]
    fn degree_zero_colour_is_view_independent() {
        let mut sh = [[0.0; 16]; 3];
        sh[0][0] = 0.7;
        sh[1][0] = -0.3;
        sh[2][0] = 1.1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = eval_view_color(&eval_sh_basis(&Vector3::z(), 3).unwrap(), &sh).0;
        for _ in 0..10 {
            let c = eval_view_color(&eval_sh_basis(&random_unit(&mut rng), 3).unwrap(), &sh).0;
            for ch in 0..3 {
                assert!((c[ch] - base[ch]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn colour_is_linear_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = eval_sh_basis(&random_unit(&mut rng), 3).unwrap();
        let mut c1 = [[0.0; 16]; 3];
        let mut c2 = [[0.0; 16]; 3];
        for v in c1.iter_mut().flatten().chain(c2.iter_mut().flatten()) {
            *v = rng.random_range(-0.1..0.1);
        }
        let (a, b_) = (0.7, -0.4);
        let mut mix = [[0.0; 16]; 3];
        for ch in 0..3 {
            for i in 0..16 {
                mix[ch][i] = a * c1[ch][i] + b_ * c2[ch][i];
            }
        }
        let e1 = eval_view_color(&b, &c1).0;
        let e2 = eval_view_color(&b, &c2).0;
        let em = eval_view_color(&b, &mix).0;
        for ch in 0..3 {
            let want = a * (e1[ch] - 0.5) + b_ * (e2[ch] - 0.5) + 0.5;
            assert!((em[ch] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn degree_one_rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let r = random_unit(&mut rng);
            let rot = Rotation3::from_scaled_axis(random_unit(&mut rng) * rng.random_range(0.0..3.0));
            let mut sh = [[0.0; 16]; 3];
            for row in sh.iter_mut() {
                for v in row.iter_mut().take(4) {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
            // degree-1 part is Φ₁·c = −C1 (c₁ y − c₂ z + c₃ x) = C1 a·r, a = (−c₃, −c₁, c₂)
            let mut rotated = sh;
            for ch in 0..3 {
                let a = Vector3::new(-sh[ch][3], -sh[ch][1], sh[ch][2]);
                let ar = rot * a;
                rotated[ch][3] = -ar.x;
                rotated[ch][1] = -ar.y;
                rotated[ch][2] = ar.z;
            }
            let c0 = eval_view_color(&eval_sh_basis(&r, 1).unwrap(), &sh).0;
            let c1 = eval_view_color(&eval_sh_basis(&(rot * r), 1).unwrap(), &rotated).0;
            for ch in 0..3 {
                assert!((c0[ch] - c1[ch]).abs() < 1e-10);
            }
        }
    }

    fn test_camera() -> Camera {
        Camera::look_at(Vector3::new(0.2, 0.1, -3.0), Vector3::zeros(), -Vector3::y(), 0.9, 32, 32).unwrap()
    }

    fn random_kernel(rng: &mut impl Rng) -> GaussianKernel {
        let mut k = GaussianKernel::new(
            Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            Vector3::new(0.1, 0.1, 0.1),
            Quaternion::identity(),
            0.5,
        );
        for v in k.sh.iter_mut().flatten() {
            *v = rng.random_range(-0.3..0.3);
        }
        k
    }

    #[test]
    fn colour_position_derivatives_match_finite_differences() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let k = random_kernel(&mut rng);
            let d = sh_color_derivs_wrt_position(&cam, &k, 3).unwrap();
            let p: [f64; 3] = k.position.into();
            let color_at = |x: &[f64]| {
                let mut kk = k.clone();
                kk.position = Vector3::new(x[0], x[1], x[2]);
                sh_color_derivs_wrt_position(&cam, &kk, 3).unwrap()
            };
            let num = fd::jacobian(|x| color_at(x).color.to_vec(), &p, 1e-5);
            for ch in 0..3 {
                if !d.active[ch] {
                    continue;
                }
                let ana: Vec<f64> = d.grad[ch].iter().copied().collect();
                assert!(fd::rel_err(&ana, &num[ch], 1e-8) < 1e-4);
                let num2 = fd::jacobian(|x| color_at(x).grad[ch].iter().copied().collect(), &p, 1e-5);
                let ana2: Vec<f64> = d.hess[ch].iter().copied().collect();
                let numv: Vec<f64> = (0..3).flat_map(|c| (0..3).map(move |r| (r, c))).map(|(r, c)| num2[r][c]).collect();
                assert!(fd::rel_err(&ana2, &numv, 1e-8) < 1e-4);
            }
        }
    }

    #[test]
    fn degree_zero_and_clamped_channels_have_zero_derivatives() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = random_kernel(&mut rng);
        let d = sh_color_derivs_wrt_position(&cam, &k, 0).unwrap();
        assert!(d.grad.iter().all(|g| *g == Vector3::zeros()));
        assert!(d.hess.iter().all(|h| *h == Matrix3::zeros()));
        let mut k = random_kernel(&mut rng);
        k.sh[1][0] = -10.0;
        let d = sh_color_derivs_wrt_position(&cam, &k, 3).unwrap();
        assert!(!d.active[1]);
        assert_eq!(d.color[1], 0.0);
        assert_eq!(d.grad[1], Vector3::zeros());
        assert_eq!(d.hess[1], Matrix3::zeros());
    }
}
