//! Per-kernel, per-attribute local Newton solves.
//!
//! Every solve contracts the captured per-pixel contributions of one kernel
//! with the per-pixel loss derivatives, giving a small dense system
//! `H Δy = −g` in a reduced coordinate `y` of that attribute:
//!
//! | attribute | `y`                                 | dim    |
//! |-----------|-------------------------------------|--------|
//! | position  | `p = p₀ + U v`, `U ⟂ r`             | 2      |
//! | rotation  | `q = (cos θ, sin θ r)·q₀`           | 1      |
//! | scaling   | `s = s₀ + T⁺ Δλ` (screen eigenvalues)| 2     |
//! | opacity   | `σ`                                 | 1      |
//! | colour    | SH coefficients per channel         | 3 × nc |
//!
//! `r` is the primary view direction to the kernel. The Hessian is the
//! Gauss-Newton term plus the colour-curvature term `gᵀ ∂²c/∂y²`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{
    DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x2, Quaternion, SMatrix, SVector, SymmetricEigen, Vector2,
    Vector3,
};

use crate::camera::{camera_covariance, cov2d_position_terms, perspective_jets, project_kernel, view_direction, Camera};
use crate::error::{Error, Result};
use crate::gaussian::{weight_grad, weight_jet};
use crate::loss::PixelLossDerivatives;
use crate::raster::{Capture, SplatEntry, SplatList, SplatRecord};
use crate::scene::{renormalize_quaternion, sh_coeffs_for_degree, skew, GaussianKernel, OPACITY_EPS};
use crate::secondary::accumulate_secondary_terms;
use crate::sh::sh_color_derivs_wrt_position;

type Vector5 = SVector<f64, 5>;
type Matrix5 = SMatrix<f64, 5, 5>;
type Matrix5x3 = SMatrix<f64, 5, 3>;

/// Smallest eigenvalue a safeguarded Hessian may have.
pub const MU_MIN: f64 = 1e-8;
/// Rotation steps are limited to this angle (radians of `θ`).
pub const MAX_ROTATION_STEP: f64 = std::f64::consts::PI / 8.0;
const MAX_BACKTRACKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Position,
    Rotation,
    Scaling,
    Opacity,
    Color,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Position,
        Attribute::Rotation,
        Attribute::Scaling,
        Attribute::Opacity,
        Attribute::Color,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Position => "position",
            Attribute::Rotation => "rotation",
            Attribute::Scaling => "scaling",
            Attribute::Opacity => "opacity",
            Attribute::Color => "color",
        }
    }

    /// Whether updating it changes where and how large the kernel is drawn.
    pub fn is_geometric(self) -> bool {
        matches!(self, Attribute::Position | Attribute::Rotation | Attribute::Scaling)
    }

    /// Dimension of the reduced coordinate.
    pub fn dim(self, sh_degree: u8) -> usize {
        match self {
            Attribute::Position | Attribute::Scaling => 2,
            Attribute::Rotation | Attribute::Opacity => 1,
            Attribute::Color => 3 * sh_coeffs_for_degree(sh_degree),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pos" | "position" => Ok(Attribute::Position),
            "rot" | "rotation" => Ok(Attribute::Rotation),
            "scale" | "scaling" => Ok(Attribute::Scaling),
            "opacity" | "sigma" => Ok(Attribute::Opacity),
            "color" | "colour" | "sh" => Ok(Attribute::Color),
            other => Err(Error::InvalidInput(format!("unknown attribute '{other}'"))),
        }
    }
}

/// Parses a comma-separated permutation of the five attributes.
pub fn parse_order(s: &str) -> Result<Vec<Attribute>> {
    let order = s.split(',').map(str::parse).collect::<Result<Vec<Attribute>>>()?;
    check_order(&order)?;
    Ok(order)
}

pub fn check_order(order: &[Attribute]) -> Result<()> {
    let mut sorted = order.to_vec();
    sorted.sort();
    if sorted != Attribute::ALL {
        return Err(Error::InvalidInput(format!(
            "attribute order must be a permutation of position, rotation, scaling, opacity, color (got {order:?})"
        )));
    }
    Ok(())
}

/// One rendered view as seen by the solvers.
#[derive(Clone, Copy)]
pub struct ViewTerms<'a> {
    pub camera: &'a Camera,
    pub list: &'a SplatList,
    pub capture: &'a Capture,
    pub loss: &'a PixelLossDerivatives,
}

/// Orthonormal basis of the plane perpendicular to the view direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionSubspace {
    pub u: Matrix3x2<f64>,
}

impl PositionSubspace {
    pub fn new(r: &Vector3<f64>) -> Self {
        let up = if r.y.abs() > 0.99 { Vector3::z() } else { Vector3::y() };
        let uy = (up - r * r.dot(&up)).normalize();
        let ux = r.cross(&uy);
        Self {
            u: Matrix3x2::from_columns(&[ux, uy]),
        }
    }
}

/// Screen-space eigen-frame of the primary-view covariance and the linear
/// map from scale changes to eigenvalue changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSubspace {
    /// `(λ_min, λ_max)`
    pub eigvals: Vector2<f64>,
    /// Columns are the matching eigenvectors.
    pub eigvecs: Matrix2<f64>,
    /// `T[i][j] = ∂λ_i/∂s_j = 2 s_j (v_i · m_j)²`
    pub t: Matrix2x3<f64>,
    /// Minimum-norm right inverse `Tᵀ(TTᵀ)⁻¹`.
    pub pinv: Matrix3x2<f64>,
}

impl ScalingSubspace {
    pub fn new(camera: &Camera, kernel: &GaussianKernel, lowpass: f64) -> Result<Self> {
        let proj = project_kernel(camera, kernel, lowpass)?;
        let eig = SymmetricEigen::new(proj.cov2d);
        let (lo, hi) = if eig.eigenvalues[0] <= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
        let eigvals = Vector2::new(eig.eigenvalues[lo], eig.eigenvalues[hi]);
        let eigvecs = if eigvals.y - eigvals.x <= 1e-9 * eigvals.y.abs() {
            // repeated eigenvalue: any orthonormal pair works, use the image axes
            Matrix2::identity()
        } else {
            Matrix2::from_columns(&[eig.eigenvectors.column(lo).into_owned(), eig.eigenvectors.column(hi).into_owned()])
        };
        let m = proj.jacobian * camera.view_rotation() * kernel.rotation_matrix()?;
        let mut t = Matrix2x3::zeros();
        for i in 0..2 {
            let v = eigvecs.column(i);
            for j in 0..3 {
                let d = v.dot(&m.column(j));
                t[(i, j)] = 2.0 * kernel.scale[j] * d * d;
            }
        }
        let ttt = t * t.transpose();
        let ridge = 1e-12 * ttt.trace().max(f64::MIN_POSITIVE);
        let inv = (ttt + Matrix2::identity() * ridge)
            .try_inverse()
            .ok_or_else(|| Error::NumericalDegeneracy("scale-to-eigenvalue map is singular".into()))?;
        Ok(Self {
            eigvals,
            eigvecs,
            t,
            pinv: t.transpose() * inv,
        })
    }
}

/// Log barrier `B(σ) = −α (ln σ + ln(1 − σ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpacityBarrier {
    pub alpha: f64,
}

impl OpacityBarrier {
    pub const DEFAULT_ALPHA: f64 = 1e-4;
    pub const MIN_ALPHA: f64 = 1e-6;

    pub fn value(&self, sigma: f64) -> f64 {
        -self.alpha * (sigma.ln() + (1.0 - sigma).ln())
    }

    pub fn grad(&self, sigma: f64) -> f64 {
        -self.alpha * (1.0 / sigma - 1.0 / (1.0 - sigma))
    }

    pub fn hess(&self, sigma: f64) -> f64 {
        self.alpha * (1.0 / (sigma * sigma) + 1.0 / ((1.0 - sigma) * (1.0 - sigma)))
    }

    /// Weight after `epochs` halvings, floored.
    pub fn decayed(&self, epochs: usize) -> Self {
        let alpha = (self.alpha * 0.5f64.powi(epochs.min(1000) as i32)).max(Self::MIN_ALPHA.min(self.alpha));
        Self { alpha }
    }
}

impl Default for OpacityBarrier {
    fn default() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
        }
    }
}

/// Kernel-local constructions taken from the primary view.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    pub r: Vector3<f64>,
    pub position: PositionSubspace,
    pub scaling: ScalingSubspace,
}

pub fn local_frame(primary: &Camera, kernel: &GaussianKernel, lowpass: f64) -> Result<LocalFrame> {
    let r = view_direction(primary, &kernel.position)?;
    Ok(LocalFrame {
        r,
        position: PositionSubspace::new(&r),
        scaling: ScalingSubspace::new(primary, kernel, lowpass)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings {
    pub sh_degree: u8,
    pub lowpass: f64,
    pub barrier: OpacityBarrier,
    /// Step caps on position, rotation and scaling.
    pub step_caps: bool,
    /// Eigenvalues are floored at this fraction of the largest one.
    pub relative_floor: f64,
    /// The same for the colour blocks, whose view bases are often nearly
    /// parallel.
    pub color_floor: f64,
    /// Fraction of the Newton step applied.
    pub relaxation: f64,
    /// Include the `gᵀ ∂²c/∂y²` term for position, rotation and scaling.
    /// Without it those systems are pure Gauss-Newton.
    pub geometric_curvature: bool,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            sh_degree: 3,
            lowpass: crate::camera::DEFAULT_LOWPASS,
            barrier: OpacityBarrier::default(),
            step_caps: true,
            relative_floor: 0.0,
            color_floor: 0.0,
            relaxation: 1.0,
            geometric_curvature: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalNewtonSystem {
    pub kernel: usize,
    pub attribute: Attribute,
    /// Safeguarded Hessian.
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub delta: DVector<f64>,
    pub accepted: bool,
}

impl LocalNewtonSystem {
    fn zero(kernel: usize, attribute: Attribute, n: usize) -> Self {
        Self {
            kernel,
            attribute,
            h: DMatrix::identity(n, n) * MU_MIN,
            g: DVector::zeros(n),
            delta: DVector::zeros(n),
            accepted: true,
        }
    }
}

/// Raises every eigenvalue of a symmetric matrix to at least [`MU_MIN`]:
/// small systems clamp eigenvalues individually, larger ones shift the whole
/// spectrum by a ridge.
pub fn psd_safeguard(h: &DMatrix<f64>) -> DMatrix<f64> {
    psd_safeguard_relative(h, 0.0)
}

/// Like [`psd_safeguard`], but with the floor raised to `rel · λ_max`; every
/// eigenvalue below it is clamped.
pub fn psd_safeguard_relative(h: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let n = h.nrows();
    if n == 0 {
        return h.clone();
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    let floor = MU_MIN.max(rel * eig.eigenvalues.max());
    if min >= floor {
        return h.clone();
    }
    if n <= 2 || rel > 0.0 {
        let clamped = eig.eigenvalues.map(|v| v.max(floor));
        let q = &eig.eigenvectors;
        let out = q * DMatrix::from_diagonal(&clamped) * q.transpose();
        (&out + out.transpose()) * 0.5
    } else {
        sym + DMatrix::identity(n, n) * (MU_MIN - min)
    }
}

/// Newton step `−H⁻¹ g` on a safeguarded Hessian.
fn newton_step(h: &DMatrix<f64>, g: &DVector<f64>, rel: f64) -> (DMatrix<f64>, DVector<f64>) {
    let hs = psd_safeguard_relative(h, rel);
    let delta = match hs.clone().cholesky() {
        Some(c) => -c.solve(g),
        None => -(hs.clone().pseudo_inverse(0.0).unwrap_or_else(|_| DMatrix::zeros(g.len(), g.len())) * g),
    };
    (hs, delta)
}

/// Per-record quantities shared by every attribute.
struct RecordView<'a> {
    rec: &'a SplatRecord,
    x: Vector2<f64>,
    gl: [f64; 3],
    hl: [f64; 3],
}

fn records<'a>(view: &'a ViewTerms<'a>, kernel_id: usize) -> impl Iterator<Item = RecordView<'a>> + 'a {
    let grid = view.list.grid;
    view.capture.for_kernel(kernel_id).map(move |rec| {
        let p = rec.pixel as usize;
        RecordView {
            rec,
            x: grid.center(p % grid.cols, p / grid.cols),
            gl: view.loss.g[p],
            hl: view.loss.h[p],
        }
    })
}

#[inline]
fn sym3(s: &Matrix2<f64>) -> [f64; 3] {
    [s[(0, 0)], s[(0, 1)], s[(1, 1)]]
}

#[inline]
fn dz_from_sigma(s: &Matrix2<f64>) -> Vector5 {
    Vector5::new(0.0, 0.0, s[(0, 0)], s[(0, 1)], s[(1, 1)])
}

/// Gradient and Hessian of one view's loss in the attribute's reduced
/// coordinate. A kernel with no captured records contributes nothing.
pub fn view_terms(
    attr: Attribute,
    frame: &LocalFrame,
    kernel: &GaussianKernel,
    kernel_id: usize,
    view: &ViewTerms,
    settings: &SolveSettings,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = attr.dim(settings.sh_degree);
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    let cw = if settings.geometric_curvature { 1.0 } else { 0.0 };
    let Some(entry) = view.list.entry_for(kernel_id) else {
        return Ok((g, h));
    };
    if view.capture.kernel_count(kernel_id) == 0 {
        return Ok((g, h));
    }
    match attr {
        Attribute::Position => position_terms(frame, kernel, kernel_id, entry, view, settings, cw, &mut g, &mut h)?,
        Attribute::Rotation => rotation_terms(frame, kernel, kernel_id, entry, view, cw, &mut g, &mut h)?,
        Attribute::Scaling => scaling_terms(frame, kernel, kernel_id, entry, view, cw, &mut g, &mut h)?,
        Attribute::Opacity => {
            for rv in records(view, kernel_id) {
                for ch in 0..3 {
                    let dc = rv.rec.t * (entry.color[ch] - rv.rec.suffix[ch]) * rv.rec.g;
                    g[0] += rv.gl[ch] * dc;
                    h[(0, 0)] += rv.hl[ch] * dc * dc;
                }
            }
        }
        Attribute::Color => {
            // every pixel of a view sees the same SH basis: a rank-1 block per channel
            let nc = sh_coeffs_for_degree(settings.sh_degree);
            let basis = &entry.basis[..nc];
            let mut sg = [0.0; 3];
            let mut sh = [0.0; 3];
            for rv in records(view, kernel_id) {
                let w = rv.rec.alpha * rv.rec.t;
                for ch in 0..3 {
                    sg[ch] += rv.gl[ch] * w;
                    sh[ch] += rv.hl[ch] * w * w;
                }
            }
            for ch in 0..3 {
                if !entry.color_active[ch] {
                    continue;
                }
                let off = ch * nc;
                for i in 0..nc {
                    g[off + i] += sg[ch] * basis[i];
                    for j in 0..nc {
                        h[(off + i, off + j)] += sh[ch] * basis[i] * basis[j];
                    }
                }
            }
        }
    }
    Ok((g, h))
}

#[allow(clippy::too_many_arguments)]
fn position_terms(
    frame: &LocalFrame,
    kernel: &GaussianKernel,
    kernel_id: usize,
    entry: &SplatEntry,
    view: &ViewTerms,
    settings: &SolveSettings,
    cw: f64,
    g_out: &mut DVector<f64>,
    h_out: &mut DMatrix<f64>,
) -> Result<()> {
    let cam = view.camera;
    let jets = perspective_jets(cam, &kernel.position, true)?;
    let w3 = cam.view_rotation();
    let m = camera_covariance(cam, kernel)?;
    let (ds, dds) = cov2d_position_terms(&jets, &m, &w3);
    let dpi = jets.j * w3;
    let d2pi: [Matrix3<f64>; 2] =
        std::array::from_fn(|a| w3.transpose() * Matrix3::from_fn(|b, c| jets.dj[c][(a, b)]) * w3);
    // ∂z/∂p and ∂²z/∂p² for z = (π, Σ₀₀, Σ₀₁, Σ₁₁)
    let mut z1 = Matrix5x3::zeros();
    for i in 0..3 {
        z1[(0, i)] = dpi[(0, i)];
        z1[(1, i)] = dpi[(1, i)];
        let s = sym3(&ds[i]);
        for a in 0..3 {
            z1[(2 + a, i)] = s[a];
        }
    }
    let mut z2 = [Matrix3::zeros(); 5];
    z2[0] = d2pi[0];
    z2[1] = d2pi[1];
    for i in 0..3 {
        for k in 0..3 {
            let s = sym3(&dds[i][k]);
            for a in 0..3 {
                z2[2 + a][(i, k)] = s[a];
            }
        }
    }
    let col = sh_color_derivs_wrt_position(cam, kernel, settings.sh_degree)?;
    let sigma = entry.opacity;
    let mut gp = Vector3::zeros();
    let mut hp = Matrix3::zeros();
    for rv in records(view, kernel_id) {
        let (g5, h5) = weight_derivs(entry, &rv, cw != 0.0);
        let dg = z1.transpose() * g5;
        let d2g = h5.map(|h5| {
            let mut d2g = z1.transpose() * h5 * z1;
            for z in 0..5 {
                d2g += z2[z] * g5[z];
            }
            d2g
        });
        let (t, a) = (rv.rec.t, rv.rec.alpha);
        for ch in 0..3 {
            let diff = entry.color[ch] - rv.rec.suffix[ch];
            let dct = &col.grad[ch];
            let dc = (dg * (diff * sigma) + dct * a) * t;
            gp += dc * rv.gl[ch];
            hp += dc * dc.transpose() * rv.hl[ch];
            if let Some(d2g) = &d2g {
                let cross = dg * dct.transpose();
                let d2c = (d2g * (diff * sigma) + (cross + cross.transpose()) * sigma + col.hess[ch] * a) * t;
                hp += d2c * (rv.gl[ch] * cw);
            }
        }
    }
    let u = &frame.position.u;
    let gv = u.transpose() * gp;
    let hv = u.transpose() * hp * u;
    for i in 0..2 {
        g_out[i] += gv[i];
        for j in 0..2 {
            h_out[(i, j)] += hv[(i, j)];
        }
    }
    Ok(())
}

/// Gradient of the Gaussian weight in `z`, and its Hessian when asked for.
#[inline]
fn weight_derivs(entry: &SplatEntry, rv: &RecordView, second: bool) -> (Vector5, Option<Matrix5>) {
    if second {
        let jet = weight_jet(&entry.inv_cov, &entry.proj.pi, &rv.x, rv.rec.g);
        (Vector5::from(jet.grad), Some(Matrix5::from_fn(|i, j| jet.hess[i][j])))
    } else {
        (Vector5::from(weight_grad(&entry.inv_cov, &entry.proj.pi, &rv.x, rv.rec.g)), None)
    }
}

/// Projects a camera-space covariance derivative to screen space.
#[inline]
fn screen(j: &Matrix2x3<f64>, w3: &Matrix3<f64>, d: &Matrix3<f64>) -> Matrix2<f64> {
    let s = j * w3 * d * w3.transpose() * j.transpose();
    (s + s.transpose()) * 0.5
}

#[allow(clippy::too_many_arguments)]
fn rotation_terms(
    frame: &LocalFrame,
    kernel: &GaussianKernel,
    kernel_id: usize,
    entry: &SplatEntry,
    view: &ViewTerms,
    cw: f64,
    g_out: &mut DVector<f64>,
    h_out: &mut DMatrix<f64>,
) -> Result<()> {
    let a = kernel.covariance()?;
    let k = skew(&frame.r);
    let da = (k * a - a * k) * 2.0;
    let dda = (k * k * a - k * a * k * 2.0 + a * k * k) * 4.0;
    let w3 = view.camera.view_rotation();
    let j = &entry.proj.jacobian;
    let dz = dz_from_sigma(&screen(j, &w3, &da));
    let ddz = dz_from_sigma(&screen(j, &w3, &dda));
    let sigma = entry.opacity;
    for rv in records(view, kernel_id) {
        let (g5, h5) = weight_derivs(entry, &rv, cw != 0.0);
        let dg = g5.dot(&dz);
        let d2g = h5.map_or(0.0, |h5| (dz.transpose() * h5 * dz)[(0, 0)] + g5.dot(&ddz));
        for ch in 0..3 {
            let f = rv.rec.t * (entry.color[ch] - rv.rec.suffix[ch]) * sigma;
            let dc = f * dg;
            g_out[0] += rv.gl[ch] * dc;
            h_out[(0, 0)] += rv.hl[ch] * dc * dc + rv.gl[ch] * f * d2g * cw;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn scaling_terms(
    frame: &LocalFrame,
    kernel: &GaussianKernel,
    kernel_id: usize,
    entry: &SplatEntry,
    view: &ViewTerms,
    cw: f64,
    g_out: &mut DVector<f64>,
    h_out: &mut DMatrix<f64>,
) -> Result<()> {
    let w3 = view.camera.view_rotation();
    let m = entry.proj.jacobian * w3 * kernel.rotation_matrix()?;
    // Σ = Σ_j s_j² m_j m_jᵀ + λ_lp I
    let mut dz = [Vector5::zeros(); 3];
    let mut ddz = [Vector5::zeros(); 3];
    for jx in 0..3 {
        let mj = m.column(jx);
        let mm = mj * mj.transpose();
        dz[jx] = dz_from_sigma(&(mm * (2.0 * kernel.scale[jx])));
        ddz[jx] = dz_from_sigma(&(mm * 2.0));
    }
    let sigma = entry.opacity;
    let mut gs = Vector3::zeros();
    let mut hs = Matrix3::zeros();
    for rv in records(view, kernel_id) {
        let (g5, h5) = weight_derivs(entry, &rv, cw != 0.0);
        let dg = Vector3::from_fn(|j, _| g5.dot(&dz[j]));
        let d2g = h5.map(|h5| {
            let mut d2g = Matrix3::from_fn(|i, j| (dz[i].transpose() * h5 * dz[j])[(0, 0)]);
            for jx in 0..3 {
                d2g[(jx, jx)] += g5.dot(&ddz[jx]);
            }
            d2g
        });
        for ch in 0..3 {
            let f = rv.rec.t * (entry.color[ch] - rv.rec.suffix[ch]) * sigma;
            let dc = dg * f;
            gs += dc * rv.gl[ch];
            hs += dc * dc.transpose() * rv.hl[ch];
            if let Some(d2g) = &d2g {
                hs += d2g * (f * rv.gl[ch] * cw);
            }
        }
    }
    let p = &frame.scaling.pinv;
    let gl = p.transpose() * gs;
    let hl = p.transpose() * hs * p;
    for i in 0..2 {
        g_out[i] += gl[i];
        for j in 0..2 {
            h_out[(i, j)] += hl[(i, j)];
        }
    }
    Ok(())
}

/// Primary plus secondary terms; `views[0]` is the primary view.
pub fn assemble(
    attr: Attribute,
    frame: &LocalFrame,
    kernel: &GaussianKernel,
    kernel_id: usize,
    views: &[ViewTerms],
    settings: &SolveSettings,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let Some((primary, rest)) = views.split_first() else {
        let n = attr.dim(settings.sh_degree);
        return Ok((DVector::zeros(n), DMatrix::zeros(n, n)));
    };
    let base = view_terms(attr, frame, kernel, kernel_id, primary, settings)?;
    let secondary = rest
        .iter()
        .map(|v| view_terms(attr, frame, kernel, kernel_id, v, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(accumulate_secondary_terms(base, &secondary))
}

/// Kernel after moving its reduced coordinate by `y`, with no safeguards.
pub fn apply_reduced(attr: Attribute, kernel: &GaussianKernel, frame: &LocalFrame, y: &[f64]) -> Result<GaussianKernel> {
    let mut k = kernel.clone();
    match attr {
        Attribute::Position => k.position += frame.position.u * Vector2::new(y[0], y[1]),
        Attribute::Rotation => {
            let (s, c) = y[0].sin_cos();
            let r = frame.r * s;
            let dq = Quaternion::new(c, r.x, r.y, r.z);
            k.rotation = renormalize_quaternion(&(dq * kernel.rotation))?;
        }
        Attribute::Scaling => k.scale += frame.scaling.pinv * Vector2::new(y[0], y[1]),
        Attribute::Opacity => k.opacity += y[0],
        Attribute::Color => {
            let nc = y.len() / 3;
            for ch in 0..3 {
                for i in 0..nc {
                    k.sh[ch][i] += y[ch * nc + i];
                }
            }
        }
    }
    Ok(k)
}

/// Applies a solved step, enforcing the feasibility rules: position and
/// rotation step caps, positive scales by halving, opacity clamped to the
/// interior band.
pub fn apply_delta(
    attr: Attribute,
    kernel: &GaussianKernel,
    frame: &LocalFrame,
    delta: &DVector<f64>,
    settings: &SolveSettings,
) -> Result<(GaussianKernel, DVector<f64>)> {
    let mut d = delta.clone();
    match attr {
        Attribute::Position if settings.step_caps => {
            let cap = 3.0 * kernel.scale.max();
            let n = d.norm();
            if n > cap {
                d *= cap / n;
            }
        }
        Attribute::Rotation if settings.step_caps => d[0] = d[0].clamp(-MAX_ROTATION_STEP, MAX_ROTATION_STEP),
        Attribute::Scaling => {
            if settings.step_caps {
                let ds = frame.scaling.pinv * Vector2::new(d[0], d[1]);
                let cap = kernel.scale.max();
                let n = ds.amax();
                if n > cap {
                    d *= cap / n;
                }
            }
            let mut tries = 0;
            while (kernel.scale + frame.scaling.pinv * Vector2::new(d[0], d[1])).iter().any(|s| *s <= 0.0) {
                if tries == MAX_BACKTRACKS {
                    d.fill(0.0);
                    break;
                }
                d *= 0.5;
                tries += 1;
            }
        }
        Attribute::Opacity => {
            let target = (kernel.opacity + d[0]).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
            d[0] = target - kernel.opacity;
        }
        _ => {}
    }
    let mut k = apply_reduced(attr, kernel, frame, d.as_slice())?;
    if attr == Attribute::Opacity {
        k.opacity = k.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    }
    Ok((k, d))
}

/// Builds, safeguards and solves one kernel's system for one attribute.
/// Returns the system and the updated kernel.
pub fn solve_attribute(
    attr: Attribute,
    kernel: &GaussianKernel,
    kernel_id: usize,
    views: &[ViewTerms],
    settings: &SolveSettings,
) -> Result<(LocalNewtonSystem, GaussianKernel)> {
    let n = attr.dim(settings.sh_degree);
    let Some(primary) = views.first() else {
        return Ok((LocalNewtonSystem::zero(kernel_id, attr, n), kernel.clone()));
    };
    let frame = match local_frame(primary.camera, kernel, settings.lowpass) {
        Ok(f) => f,
        Err(Error::BehindCamera(_)) | Err(Error::DegenerateGeometry(_)) => {
            return Ok((LocalNewtonSystem::zero(kernel_id, attr, n), kernel.clone()))
        }
        Err(e) => return Err(e),
    };
    let (mut g, mut h) = assemble(attr, &frame, kernel, kernel_id, views, settings)?;
    if attr == Attribute::Opacity {
        // The barrier is re-centred at the current σ: its curvature keeps the
        // step inside (0, 1) while the gradient term vanishes, so fixed
        // points of the data term stay fixed.
        h[(0, 0)] += settings.barrier.hess(kernel.opacity);
    }
    let (hs, delta) = if attr == Attribute::Color {
        solve_blocks(&h, &g, 3, settings.color_floor)
    } else {
        newton_step(&h, &g, settings.relative_floor)
    };
    let delta = delta * settings.relaxation;
    if !delta.iter().all(|v| v.is_finite()) {
        g.fill(0.0);
        h.fill(0.0);
        let mut sys = LocalNewtonSystem::zero(kernel_id, attr, n);
        sys.accepted = false;
        return Ok((sys, kernel.clone()));
    }
    let (updated, applied) = apply_delta(attr, kernel, &frame, &delta, settings)?;
    Ok((
        LocalNewtonSystem {
            kernel: kernel_id,
            attribute: attr,
            h: hs,
            g,
            delta: applied,
            accepted: true,
        },
        updated,
    ))
}

/// Re-applies `alpha` times a solved step to the kernel it was solved for.
pub fn rescale_step(
    sys: &LocalNewtonSystem,
    kernel: &GaussianKernel,
    primary: &Camera,
    alpha: f64,
    settings: &SolveSettings,
) -> Result<GaussianKernel> {
    if !sys.accepted || sys.delta.iter().all(|d| *d == 0.0) {
        return Ok(kernel.clone());
    }
    let frame = local_frame(primary, kernel, settings.lowpass)?;
    Ok(apply_delta(sys.attribute, kernel, &frame, &(&sys.delta * alpha), settings)?.0)
}

/// Solves a block-diagonal system block by block.
fn solve_blocks(h: &DMatrix<f64>, g: &DVector<f64>, blocks: usize, rel: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = g.len();
    let b = n / blocks;
    let mut hs = DMatrix::zeros(n, n);
    let mut delta = DVector::zeros(n);
    for i in 0..blocks {
        let hb = h.view((i * b, i * b), (b, b)).into_owned();
        let gb = g.rows(i * b, b).into_owned();
        let (s, d) = newton_step(&hb, &gb, rel);
        hs.view_mut((i * b, i * b), (b, b)).copy_from(&s);
        delta.rows_mut(i * b, b).copy_from(&d);
    }
    (hs, delta)
}

macro_rules! solve_fn {
    ($name:ident, $attr:expr) => {
        pub fn $name(
            kernel: &GaussianKernel,
            kernel_id: usize,
            views: &[ViewTerms],
            settings: &SolveSettings,
        ) -> Result<(LocalNewtonSystem, GaussianKernel)> {
            solve_attribute($attr, kernel, kernel_id, views, settings)
        }
    };
}

solve_fn!(solve_position, Attribute::Position);
solve_fn!(solve_rotation, Attribute::Rotation);
solve_fn!(solve_scaling, Attribute::Scaling);
solve_fn!(solve_opacity, Attribute::Opacity);
solve_fn!(solve_color, Attribute::Color);

/// Writes local systems as `kernel,attribute,kind,i,j,value` rows, with
/// `kind` one of `g`, `H`, `delta`.
pub fn write_systems_csv<W: Write>(systems: &[LocalNewtonSystem], mut out: W) -> std::io::Result<()> {
    writeln!(out, "kernel,attribute,kind,i,j,value")?;
    for s in systems {
        for i in 0..s.g.len() {
            writeln!(out, "{},{},g,{},0,{:e}", s.kernel, s.attribute, i, s.g[i])?;
        }
        for i in 0..s.h.nrows() {
            for j in 0..s.h.ncols() {
                writeln!(out, "{},{},H,{},{},{:e}", s.kernel, s.attribute, i, j, s.h[(i, j)])?;
            }
        }
        for i in 0..s.delta.len() {
            writeln!(out, "{},{},delta,{},0,{:e}", s.kernel, s.attribute, i, s.delta[i])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::DEFAULT_LOWPASS;
    use crate::loss::{total_loss, total_loss_derivs, LossConfig};
    use crate::raster::{render, RenderSettings};
    use crate::scene::Scene;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    const RES: usize = 48;

    fn camera() -> Camera {
        Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::y(), 0.6, RES, RES).unwrap()
    }

    fn blob() -> GaussianKernel {
        let q = UnitQuaternion::from_euler_angles(0.2, -0.3, 0.4).into_inner();
        GaussianKernel::new(Vector3::new(0.05, -0.03, 0.1), Vector3::new(0.35, 0.15, 0.2), q, 0.6)
            .with_base_color([0.8, 0.4, 0.2])
    }

    fn l2() -> LossConfig {
        LossConfig {
            lambda: 0.0,
            ..Default::default()
        }
    }

    fn exact() -> SolveSettings {
        SolveSettings {
            sh_degree: 0,
            barrier: OpacityBarrier { alpha: 0.0 },
            ..Default::default()
        }
    }

    fn scene(k: GaussianKernel) -> Scene {
        Scene::new(vec![k], Vector3::zeros(), 0)
    }

    /// One solve of `attr` on a single kernel against the render of `truth`.
    /// Returns the updated kernel and the loss before and after.
    fn one_solve(attr: Attribute, start: &GaussianKernel, truth: &GaussianKernel) -> (GaussianKernel, f64, f64) {
        let cam = camera();
        let settings = RenderSettings::exact();
        let (_, target) = render(&scene(truth.clone()), &cam, cam.full_grid(), &settings, false).unwrap();
        let (list, rt) = render(&scene(start.clone()), &cam, cam.full_grid(), &settings, true).unwrap();
        let (before, d) = total_loss_derivs(&rt.image, &target.image, &l2()).unwrap();
        let views = [ViewTerms {
            camera: &cam,
            list: &list,
            capture: rt.capture.as_ref().unwrap(),
            loss: &d,
        }];
        let (_, k) = solve_attribute(attr, start, 0, &views, &exact()).unwrap();
        let (_, after) = render(&scene(k.clone()), &cam, cam.full_grid(), &settings, false).unwrap();
        (k.clone(), before, total_loss(&after.image, &target.image, &l2()).unwrap())
    }

    #[test]
    fn safeguard_keeps_positive_definite_matrices() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(psd_safeguard(&h), h);
    }

    #[test]
    fn safeguard_clamps_small_systems() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -3.0]);
        let s = psd_safeguard(&h);
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((s[(1, 1)] - MU_MIN).abs() < 1e-15);
    }

    #[test]
    fn safeguard_shifts_large_systems_by_a_ridge() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, -1.0]));
        let s = psd_safeguard(&h);
        let shift = 1.0 + MU_MIN;
        for (i, v) in [2.0, 1.0, -1.0].iter().enumerate() {
            assert!((s[(i, i)] - (v + shift)).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_floor_tracks_the_largest_eigenvalue() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 0.01, 50.0]));
        let s = psd_safeguard_relative(&h, 0.1);
        let eig = SymmetricEigen::new(s).eigenvalues;
        assert!((eig.min() - 10.0).abs() < 1e-9);
        assert!((eig.max() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn barrier_derivatives_match_differences() {
        let b = OpacityBarrier { alpha: 0.3 };
        for s in [0.1, 0.5, 0.93] {
            let h = 1e-6;
            let g = (b.value(s + h) - b.value(s - h)) / (2.0 * h);
            let hh = (b.grad(s + h) - b.grad(s - h)) / (2.0 * h);
            assert!((g - b.grad(s)).abs() < 1e-6 * b.grad(s).abs().max(1.0));
            assert!((hh - b.hess(s)).abs() < 1e-5 * b.hess(s));
        }
        assert_eq!(b.grad(0.5), 0.0);
        assert_eq!(b.decayed(2).alpha, 0.075);
        assert_eq!(b.decayed(100).alpha, OpacityBarrier::MIN_ALPHA);
    }

    #[test]
    fn order_parsing() {
        assert_eq!(parse_order("pos,rot,scale,opacity,color").unwrap(), Attribute::ALL.to_vec());
        assert!(parse_order("pos,rot,scale,opacity").is_err());
        assert!(parse_order("pos,pos,scale,opacity,color").is_err());
        assert!(parse_order("pos,rot,scale,opacity,hue").is_err());
    }

    #[test]
    fn screen_plane_shift_is_mostly_recovered() {
        let truth = blob();
        let mut start = truth.clone();
        // the camera looks along +z, so x and y span the solve plane
        start.position += Vector3::new(0.04, -0.03, 0.0);
        let (k, before, after) = one_solve(Attribute::Position, &start, &truth);
        let left = (k.position - truth.position).norm() / 0.05;
        assert!(left <= 0.1, "remaining {left}");
        assert!(after < before);
    }

    #[test]
    fn in_plane_rotation_is_mostly_recovered() {
        let truth = blob();
        let mut start = truth.clone();
        let r = view_direction(&camera(), &truth.position).unwrap();
        let angle = 10f64.to_radians();
        start.rotation = (UnitQuaternion::from_scaled_axis(r * angle) * UnitQuaternion::new_normalize(truth.rotation))
            .into_inner();
        let (k, before, after) = one_solve(Attribute::Rotation, &start, &truth);
        let rel = UnitQuaternion::new_normalize(k.rotation) * UnitQuaternion::new_normalize(truth.rotation).inverse();
        let left = rel.angle() / angle;
        assert!(left <= 0.2, "remaining {left}");
        assert!(after < before);
    }

    #[test]
    fn doubled_scale_converges_in_a_few_steps() {
        let truth = blob();
        let mut k = truth.clone();
        k.scale *= 2.0;
        let eig = |k: &GaussianKernel| ScalingSubspace::new(&camera(), k, DEFAULT_LOWPASS).unwrap().eigvals;
        let (mut first, mut last) = (None, 0.0);
        for _ in 0..6 {
            let (next, before, after) = one_solve(Attribute::Scaling, &k, &truth);
            assert!(after < before);
            first.get_or_insert(before);
            k = next;
            last = after;
        }
        // the solve moves eigenvalues only, so the screen orientation can lag
        let rel = (eig(&k) - eig(&truth)).norm() / eig(&truth).norm();
        assert!(rel < 0.05, "screen eigenvalues off by {rel}");
        assert!(last < 1e-2 * first.unwrap());
    }

    #[test]
    fn opacity_is_recovered_in_one_step() {
        // on a black background the image is linear in σ, so L2 is quadratic
        let truth = blob();
        let mut start = truth.clone();
        start.opacity = 0.3;
        let (k, _, after) = one_solve(Attribute::Opacity, &start, &truth);
        assert!((k.opacity - truth.opacity).abs() < 1e-9, "{}", k.opacity);
        assert!(after < 1e-18);
    }

    #[test]
    fn colour_is_recovered_in_one_step() {
        let truth = blob();
        let start = blob().with_base_color([0.5, 0.5, 0.5]);
        let (k, _, after) = one_solve(Attribute::Color, &start, &truth);
        for ch in 0..3 {
            assert!((k.sh[ch][0] - truth.sh[ch][0]).abs() < 1e-9);
        }
        assert!(after < 1e-18);
    }

    struct Rendered {
        cam: Camera,
        list: SplatList,
        capture: Capture,
        loss: PixelLossDerivatives,
    }

    fn view_from(eye: Vector3<f64>, start: &GaussianKernel, truth: &GaussianKernel) -> Rendered {
        let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 0.6, RES, RES).unwrap();
        let settings = RenderSettings::exact();
        let (_, target) = render(&scene(truth.clone()), &cam, cam.full_grid(), &settings, false).unwrap();
        let (list, rt) = render(&scene(start.clone()), &cam, cam.full_grid(), &settings, true).unwrap();
        let (_, loss) = total_loss_derivs(&rt.image, &target.image, &l2()).unwrap();
        Rendered {
            cam,
            list,
            capture: rt.capture.unwrap(),
            loss,
        }
    }

    fn terms(r: &Rendered) -> ViewTerms<'_> {
        ViewTerms {
            camera: &r.cam,
            list: &r.list,
            capture: &r.capture,
            loss: &r.loss,
        }
    }

    #[test]
    fn duplicated_secondary_doubles_the_system() {
        let start = blob();
        let mut truth = blob();
        truth.position += Vector3::new(0.08, 0.05, 0.0);
        truth.opacity = 0.7;
        let v = view_from(Vector3::new(0.0, 0.0, -4.0), &start, &truth);
        let frame = local_frame(&v.cam, &start, DEFAULT_LOWPASS).unwrap();
        for attr in Attribute::ALL {
            let (g1, h1) = assemble(attr, &frame, &start, 0, &[terms(&v)], &exact()).unwrap();
            let (g2, h2) = assemble(attr, &frame, &start, 0, &[terms(&v), terms(&v)], &exact()).unwrap();
            assert!((&g2 - &g1 * 2.0).norm() <= 1e-12 * (1.0 + g1.norm()), "{attr:?}");
            assert!((&h2 - &h1 * 2.0).norm() <= 1e-12 * (1.0 + h1.norm()), "{attr:?}");
        }
    }

    #[test]
    fn secondary_order_does_not_matter() {
        let start = blob();
        let mut truth = blob();
        truth.position += Vector3::new(-0.05, 0.04, 0.03);
        truth.scale *= 1.2;
        let p = view_from(Vector3::new(0.0, 0.0, -4.0), &start, &truth);
        let a = view_from(Vector3::new(1.5, 0.3, -3.6), &start, &truth);
        let b = view_from(Vector3::new(-1.2, -0.8, -3.7), &start, &truth);
        let frame = local_frame(&p.cam, &start, DEFAULT_LOWPASS).unwrap();
        for attr in Attribute::ALL {
            let (g1, h1) = assemble(attr, &frame, &start, 0, &[terms(&p), terms(&a), terms(&b)], &exact()).unwrap();
            let (g2, h2) = assemble(attr, &frame, &start, 0, &[terms(&p), terms(&b), terms(&a)], &exact()).unwrap();
            assert!((&g2 - &g1).norm() <= 1e-12 * (1.0 + g1.norm()), "{attr:?}");
            assert!((&h2 - &h1).norm() <= 1e-12 * (1.0 + h1.norm()), "{attr:?}");
        }
    }

    #[test]
    fn fixed_point_gives_zero_steps() {
        let truth = blob();
        for attr in Attribute::ALL {
            let (k, before, after) = one_solve(attr, &truth, &truth);
            assert_eq!(before, 0.0);
            assert!(after < 1e-20, "{attr}");
            assert!((k.position - truth.position).norm() < 1e-12);
            assert!((k.scale - truth.scale).norm() < 1e-12);
        }
    }

    fn symmetric(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2.0..2.0f64, n * n).prop_map(move |v| {
            let m = DMatrix::from_vec(n, n, v);
            (&m + m.transpose()) * 0.5
        })
    }

    proptest! {
        #[test]
        fn safeguarded_steps_descend(h in symmetric(3), g in proptest::collection::vec(-1.0..1.0f64, 3), rel in 0.0..0.5f64) {
            let g = DVector::from_vec(g);
            let (hs, delta) = newton_step(&h, &g, rel);
            let eig = SymmetricEigen::new(hs.clone()).eigenvalues;
            prop_assert!(eig.min() >= MU_MIN * (1.0 - 1e-6) - 1e-12);
            prop_assert!(g.dot(&delta) <= 1e-12);
            // delta minimises the safeguarded quadratic model
            let resid = &hs * &delta + &g;
            prop_assert!(resid.norm() <= 1e-6 * (1.0 + g.norm() * hs.norm() / eig.min().max(MU_MIN)));
        }

        #[test]
        fn position_subspace_is_orthonormal_and_perpendicular(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
            let r = Vector3::new(x, y, z);
            prop_assume!(r.norm() > 1e-3);
            let r = r.normalize();
            let u = PositionSubspace::new(&r).u;
            prop_assert!((u.transpose() * u - Matrix2::identity()).norm() < 1e-12);
            prop_assert!((u.transpose() * r).norm() < 1e-12);
        }

        #[test]
        fn scaling_map_reproduces_screen_eigenvalues(
            sx in 0.05..0.5f64, sy in 0.05..0.5f64, sz in 0.05..0.5f64,
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64,
        ) {
            let mut k = blob();
            k.scale = Vector3::new(sx, sy, sz);
            k.rotation = UnitQuaternion::from_scaled_axis(Vector3::new(ax, ay, az)).into_inner();
            let lowpass = 0.3;
            let s = ScalingSubspace::new(&camera(), &k, lowpass).unwrap();
            // eigenvalues are quadratic forms in s, so ½ T s recovers them
            let half_ts = s.t * k.scale * 0.5;
            prop_assert!((half_ts + Vector2::repeat(lowpass) - s.eigvals).norm() < 1e-9 * s.eigvals.norm());
            prop_assert!((s.t * s.pinv - Matrix2::identity()).norm() < 1e-6);
        }
    }
}
