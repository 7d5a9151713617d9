//! First-order loss gradients for every kernel attribute, used by the GD and
//! Adam baselines.
//!
//! Rotation is differentiated along the tangent `ω` of `q ← exp(ω)·q`, so a
//! gradient step never leaves the unit sphere.

use nalgebra::{SMatrix, SVector, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::camera::{camera_covariance, cov2d_position_terms, perspective_jets};
use crate::error::{Error, Result};
use crate::gaussian::weight_grad;
use crate::newton::ViewTerms;
use crate::scene::{renormalize_quaternion, sh_coeffs_for_degree, skew, GaussianKernel, SH_COEFFS};
use crate::sh::sh_color_derivs_wrt_position;

type Vector5 = SVector<f64, 5>;
type Matrix5x3 = SMatrix<f64, 5, 3>;

/// Flat parameter layout: position, rotation tangent, scale, opacity, SH.
pub const PARAMS_PER_KERNEL: usize = 10 + 3 * SH_COEFFS;
pub const POSITION: std::ops::Range<usize> = 0..3;
pub const ROTATION: std::ops::Range<usize> = 3..6;
pub const SCALE: std::ops::Range<usize> = 6..9;
pub const OPACITY: usize = 9;
pub const SH: std::ops::Range<usize> = 10..PARAMS_PER_KERNEL;

pub type KernelGradient = [f64; PARAMS_PER_KERNEL];

/// Loss gradient of every kernel in one captured view.
pub fn scene_gradient(kernels: &[GaussianKernel], view: &ViewTerms, sh_degree: u8) -> Result<Vec<KernelGradient>> {
    (0..kernels.len())
        .into_par_iter()
        .map(|id| kernel_gradient(&kernels[id], id, view, sh_degree))
        .collect()
}

pub fn kernel_gradient(kernel: &GaussianKernel, id: usize, view: &ViewTerms, sh_degree: u8) -> Result<KernelGradient> {
    let mut out = [0.0; PARAMS_PER_KERNEL];
    let Some(entry) = view.list.entry_for(id) else {
        return Ok(out);
    };
    if view.capture.kernel_count(id) == 0 {
        return Ok(out);
    }
    let cam = view.camera;
    let jets = match perspective_jets(cam, &kernel.position, false) {
        Ok(j) => j,
        Err(Error::BehindCamera(_)) => return Ok(out),
        Err(e) => return Err(e),
    };
    let w3 = cam.view_rotation();
    let m = camera_covariance(cam, kernel)?;
    let (ds, _) = cov2d_position_terms(&jets, &m, &w3);
    let dpi = jets.j * w3;
    let sym = |s: &nalgebra::Matrix2<f64>| Vector5::new(0.0, 0.0, s[(0, 0)], s[(0, 1)], s[(1, 1)]);
    let mut zp = Matrix5x3::zeros();
    for i in 0..3 {
        let mut c = sym(&ds[i]);
        c[0] = dpi[(0, i)];
        c[1] = dpi[(1, i)];
        zp.set_column(i, &c);
    }
    // rotation tangent: dA/dω_k = K_k A − A K_k
    let a = kernel.covariance()?;
    let jw = entry.proj.jacobian * w3;
    let mut zr = Matrix5x3::zeros();
    for k in 0..3 {
        let kk = skew(&Vector3::ith(k, 1.0));
        let da = kk * a - a * kk;
        let s = jw * da * jw.transpose();
        zr.set_column(k, &sym(&((s + s.transpose()) * 0.5)));
    }
    let mr = jw * kernel.rotation_matrix()?;
    let mut zs = Matrix5x3::zeros();
    for j in 0..3 {
        let mj = mr.column(j);
        zs.set_column(j, &sym(&(mj * mj.transpose() * (2.0 * kernel.scale[j]))));
    }
    let col = sh_color_derivs_wrt_position(cam, kernel, sh_degree)?;
    let nc = sh_coeffs_for_degree(sh_degree);
    let grid = view.list.grid;
    let sigma = entry.opacity;
    let mut gz = Vector5::zeros();
    let mut gp_color = Vector3::zeros();
    for rec in view.capture.for_kernel(id) {
        let p = rec.pixel as usize;
        let x = grid.center(p % grid.cols, p / grid.cols);
        let gl = view.loss.g[p];
        let dg = Vector5::from(weight_grad(&entry.inv_cov, &entry.proj.pi, &x, rec.g));
        let w = rec.alpha * rec.t;
        let mut dl_dg = 0.0;
        for ch in 0..3 {
            let diff = entry.color[ch] - rec.suffix[ch];
            dl_dg += gl[ch] * rec.t * diff * sigma;
            out[OPACITY] += gl[ch] * rec.t * diff * rec.g;
            if entry.color_active[ch] {
                gp_color += col.grad[ch] * (gl[ch] * w);
                for i in 0..nc {
                    out[SH.start + ch * SH_COEFFS + i] += gl[ch] * w * entry.basis[i];
                }
            }
        }
        gz += dg * dl_dg;
    }
    let gp = zp.transpose() * gz + gp_color;
    let gr = zr.transpose() * gz;
    let gs = zs.transpose() * gz;
    out[POSITION].copy_from_slice(gp.as_slice());
    out[ROTATION].copy_from_slice(gr.as_slice());
    out[SCALE].copy_from_slice(gs.as_slice());
    Ok(out)
}

/// Kernel moved by a flat parameter step (rotation through the tangent).
pub fn apply_step(kernel: &GaussianKernel, step: &KernelGradient) -> Result<GaussianKernel> {
    let mut k = kernel.clone();
    k.position += Vector3::from_column_slice(&step[POSITION]);
    let omega = Vector3::from_column_slice(&step[ROTATION]);
    if omega.norm() > 0.0 {
        let dq = UnitQuaternion::from_scaled_axis(omega).into_inner();
        k.rotation = renormalize_quaternion(&(dq * kernel.rotation))?;
    }
    k.scale += Vector3::from_column_slice(&step[SCALE]);
    k.opacity += step[OPACITY];
    for ch in 0..3 {
        for i in 0..SH_COEFFS {
            k.sh[ch][i] += step[SH.start + ch * SH_COEFFS + i];
        }
    }
    Ok(k)
}
