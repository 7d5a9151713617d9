//! Trainable scene representation: Gaussian kernels and their local geometry.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opacity is kept inside `(OPACITY_EPS, 1 - OPACITY_EPS)`.
pub const OPACITY_EPS: f64 = 1e-4;
/// Coefficients per colour channel (SH degree 3).
pub const SH_COEFFS: usize = 16;
pub const MAX_SH_DEGREE: u8 = 3;

/// Number of SH coefficients per channel used by a given degree.
pub const fn sh_coeffs_for_degree(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1)
}

/// One splat's trainable attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub position: Vector3<f64>,
    /// Per-axis standard deviation, stored linearly.
    pub scale: Vector3<f64>,
    /// Unit quaternion; `nalgebra` stores (w, i, j, k) as `Quaternion::new(w, x, y, z)`.
    pub rotation: Quaternion<f64>,
    pub opacity: f64,
    /// Channel-major SH coefficients: `sh[channel][basis]`.
    pub sh: [[f64; SH_COEFFS]; 3],
}

impl GaussianKernel {
    pub fn new(position: Vector3<f64>, scale: Vector3<f64>, rotation: Quaternion<f64>, opacity: f64) -> Self {
        Self {
            position,
            scale,
            rotation,
            opacity,
            sh: [[0.0; SH_COEFFS]; 3],
        }
    }

    /// Sets the view-independent (degree-0) colour so the kernel renders as `rgb`.
    pub fn with_base_color(mut self, rgb: [f64; 3]) -> Self {
        for (ch, value) in rgb.iter().enumerate() {
            self.sh[ch][0] = (value - 0.5) / crate::sh::SH_C0;
        }
        self
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance_3d(&self.rotation, &self.scale)
    }

    pub fn rotation_matrix(&self) -> Result<Matrix3<f64>> {
        quaternion_to_rotation(&self.rotation)
    }

    /// Checks the kernel invariants: unit quaternion, interior opacity, positive scale.
    pub fn check_invariants(&self, quat_tol: f64) -> Result<()> {
        let n = self.rotation.norm();
        if (n - 1.0).abs() > quat_tol {
            return Err(Error::InvalidInput(format!("quaternion norm {n} is not unit")));
        }
        if !(self.opacity > OPACITY_EPS * (1.0 - 1e-12) && self.opacity < 1.0 - OPACITY_EPS * (1.0 - 1e-12)) {
            return Err(Error::InvalidInput(format!("opacity {} outside interior band", self.opacity)));
        }
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput(format!("non-positive scale {:?}", self.scale)));
        }
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.sh.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite kernel attribute".into()));
        }
        Ok(())
    }
}

/// A set of kernels rendered against a constant background.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub kernels: Vec<GaussianKernel>,
    pub background: Vector3<f64>,
    pub sh_degree: u8,
}

impl Scene {
    pub fn new(kernels: Vec<GaussianKernel>, background: Vector3<f64>, sh_degree: u8) -> Self {
        Self {
            kernels,
            background,
            sh_degree: sh_degree.min(MAX_SH_DEGREE),
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn check_invariants(&self, quat_tol: f64) -> Result<()> {
        for (id, k) in self.kernels.iter().enumerate() {
            k.check_invariants(quat_tol)
                .map_err(|e| Error::InvalidInput(format!("kernel {id}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = SceneFile {
            background: self.background.into(),
            sh_degree: self.sh_degree,
            kernels: self.kernels.iter().map(KernelRecord::from).collect(),
        };
        serde_json::to_string_pretty(&file).expect("scene serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.sh_degree > MAX_SH_DEGREE {
            return Err(format!("sh_degree {} exceeds {}", file.sh_degree, MAX_SH_DEGREE));
        }
        let kernels = file
            .kernels
            .iter()
            .map(KernelRecord::to_kernel)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Scene::new(kernels, Vector3::from(file.background), file.sh_degree))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    background: [f64; 3],
    sh_degree: u8,
    kernels: Vec<KernelRecord>,
}

#[derive(Serialize, Deserialize)]
struct KernelRecord {
    p: [f64; 3],
    s: [f64; 3],
    /// (w, x, y, z)
    q: [f64; 4],
    sigma: f64,
    sh: Vec<f64>,
}

impl From<&GaussianKernel> for KernelRecord {
    fn from(k: &GaussianKernel) -> Self {
        let q = &k.rotation;
        Self {
            p: k.position.into(),
            s: k.scale.into(),
            q: [q.w, q.i, q.j, q.k],
            sigma: k.opacity,
            sh: k.sh.iter().flatten().copied().collect(),
        }
    }
}

impl KernelRecord {
    fn to_kernel(&self) -> std::result::Result<GaussianKernel, String> {
        if self.sh.len() != 3 * SH_COEFFS {
            return Err(format!("expected {} SH coefficients, got {}", 3 * SH_COEFFS, self.sh.len()));
        }
        let mut sh = [[0.0; SH_COEFFS]; 3];
        for (ch, row) in sh.iter_mut().enumerate() {
            row.copy_from_slice(&self.sh[ch * SH_COEFFS..(ch + 1) * SH_COEFFS]);
        }
        Ok(GaussianKernel {
            position: Vector3::from(self.p),
            scale: Vector3::from(self.s),
            rotation: Quaternion::new(self.q[0], self.q[1], self.q[2], self.q[3]),
            opacity: self.sigma,
            sh,
        })
    }
}

/// Returns `q / |q|`.
pub fn renormalize_quaternion(q: &Quaternion<f64>) -> Result<Quaternion<f64>> {
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!("cannot normalize quaternion of norm {n}")));
    }
    let mut out = q / n;
    // one refinement pass pulls the norm to within an ulp of 1
    let n2 = out.norm();
    if n2 != 1.0 {
        out /= n2;
    }
    Ok(out)
}

/// Rotation matrix of a (re-normalized) quaternion.
pub fn quaternion_to_rotation(q: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    let n = q.norm();
    let q = if (n - 1.0).abs() > 1e-6 {
        renormalize_quaternion(q)?
    } else if n == 0.0 {
        return Err(Error::InvalidInput("zero quaternion".into()));
    } else {
        *q
    };
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `A = R S Sᵀ Rᵀ`.
pub fn build_covariance_3d(q: &Quaternion<f64>, s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {s:?}")));
    }
    let r = quaternion_to_rotation(q)?;
    let d = Matrix3::from_diagonal(&s.component_mul(s));
    let a = r * d * r.transpose();
    Ok((a + a.transpose()) * 0.5)
}

/// Cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
