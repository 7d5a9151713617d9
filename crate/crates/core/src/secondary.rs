//! Secondary targets: the camera bounding sphere, spherical nearest
//! neighbours between training views, their downsampled ground truth, and
//! the accumulation of their terms into a kernel's local system.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Centroid of the kernel positions and a radius 5% beyond the farthest one.
pub fn fit_bounding_sphere(scene: &Scene) -> Result<CameraSphere> {
    if scene.is_empty() {
        return Err(Error::InvalidInput("cannot fit a bounding sphere to an empty scene".into()));
    }
    let center = scene.kernels.iter().map(|k| k.position).sum::<Vector3<f64>>() / scene.len() as f64;
    let far = scene
        .kernels
        .iter()
        .map(|k| (k.position - center).norm())
        .fold(0.0, f64::max);
    // a single kernel (or coincident ones) still needs a positive radius
    let radius = if far > 0.0 { 1.05 * far } else { 1.0 };
    Ok(CameraSphere { center, radius })
}

impl CameraSphere {
    /// Unit direction of a camera centre as seen from the sphere centre.
    pub fn project(&self, camera: &Camera) -> Result<Vector3<f64>> {
        let d = camera.center - self.center;
        d.try_normalize(1e-12)
            .ok_or_else(|| Error::DegenerateGeometry("camera centre coincides with the sphere centre".into()))
    }
}

/// Great-circle distance between the projections of two camera centres.
pub fn spherical_distance(sphere: &CameraSphere, a: &Camera, b: &Camera) -> Result<f64> {
    let (da, db) = (sphere.project(a)?, sphere.project(b)?);
    Ok(sphere.radius * da.dot(&db).clamp(-1.0, 1.0).acos())
}

/// `neighbors[t]`: the `K` views nearest to `t` on the sphere, closest first,
/// ties broken by view id.
pub fn knn_views(cameras: &[Camera], sphere: &CameraSphere, k: usize) -> Result<Vec<Vec<usize>>> {
    let dirs = cameras.iter().map(|c| sphere.project(c)).collect::<Result<Vec<_>>>()?;
    Ok((0..cameras.len())
        .map(|t| {
            let mut others: Vec<(f64, usize)> = (0..cameras.len())
                .filter(|&j| j != t)
                .map(|j| (sphere.radius * dirs[t].dot(&dirs[j]).clamp(-1.0, 1.0).acos(), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

/// Largest stride `≤ requested` that keeps the sampled image at least
/// `min_side` pixels on each side.
pub fn secondary_stride(width: usize, height: usize, requested: usize, min_side: usize) -> usize {
    let mut f = requested.max(1);
    while f > 1 && (width / f < min_side || height / f < min_side) {
        f -= 1;
    }
    f
}

#[derive(Debug, Clone)]
pub struct SecondaryTargetSet {
    pub neighbors: Vec<Vec<usize>>,
    pub stride: usize,
    /// Downsampled ground truth per view (the pixels a strided grid renders).
    pub images: Vec<Image>,
}

impl SecondaryTargetSet {
    pub fn build(
        cameras: &[Camera],
        images: &[Image],
        sphere: &CameraSphere,
        k: usize,
        stride: usize,
        min_side: usize,
    ) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(Error::InvalidInput(format!(
                "{} cameras but {} images",
                cameras.len(),
                images.len()
            )));
        }
        let neighbors = if k == 0 {
            vec![Vec::new(); cameras.len()]
        } else {
            knn_views(cameras, sphere, k)?
        };
        let stride = images
            .iter()
            .map(|im| secondary_stride(im.width, im.height, stride, min_side))
            .min()
            .unwrap_or(1);
        let images = images.iter().map(|im| im.subsample(stride, stride / 2)).collect();
        Ok(Self {
            neighbors,
            stride,
            images,
        })
    }
}

/// `(g, H)` of the primary view plus every neighbour's.
pub fn accumulate_secondary_terms(
    primary: (DVector<f64>, DMatrix<f64>),
    neighbors: &[(DVector<f64>, DMatrix<f64>)],
) -> (DVector<f64>, DMatrix<f64>) {
    let (mut g, mut h) = primary;
    for (gj, hj) in neighbors {
        g += gj;
        h += hj;
    }
    (g, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianKernel;
    use nalgebra::Quaternion;

    fn kernel_at(p: Vector3<f64>) -> GaussianKernel {
        GaussianKernel::new(p, Vector3::repeat(0.1), Quaternion::identity(), 0.5)
    }

    fn ring(n: usize, radius: f64) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Camera::look_at(
                    Vector3::new(radius * a.cos(), 0.0, radius * a.sin()),
                    Vector3::zeros(),
                    Vector3::y(),
                    0.8,
                    32,
                    32,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn sphere_of_single_and_symmetric_scenes() {
        let s = fit_bounding_sphere(&Scene::new(vec![kernel_at(Vector3::zeros())], Vector3::zeros(), 0)).unwrap();
        assert_eq!(s.center, Vector3::zeros());
        let scene = Scene::new(
            vec![kernel_at(Vector3::new(1.0, 0.0, 0.0)), kernel_at(Vector3::new(-1.0, 0.0, 0.0))],
            Vector3::zeros(),
            0,
        );
        let s = fit_bounding_sphere(&scene).unwrap();
        assert!(s.center.norm() < 1e-15);
        assert!((s.radius - 1.05).abs() < 1e-15);
        assert!(fit_bounding_sphere(&Scene::new(vec![], Vector3::zeros(), 0)).is_err());
    }

    #[test]
    fn spherical_distance_special_angles() {
        let sphere = CameraSphere {
            center: Vector3::zeros(),
            radius: 2.0,
        };
        let cams = ring(4, 5.0);
        assert_eq!(spherical_distance(&sphere, &cams[0], &cams[0]).unwrap(), 0.0);
        assert!((spherical_distance(&sphere, &cams[0], &cams[1]).unwrap() - std::f64::consts::PI).abs() < 1e-12);
        assert!((spherical_distance(&sphere, &cams[0], &cams[2]).unwrap() - 2.0 * std::f64::consts::PI).abs() < 1e-12);
        let at_centre = Camera::look_at(Vector3::zeros(), Vector3::z(), Vector3::y(), 0.8, 32, 32).unwrap();
        assert!(matches!(
            spherical_distance(&sphere, &cams[0], &at_centre),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn knn_on_a_ring() {
        let sphere = CameraSphere {
            center: Vector3::zeros(),
            radius: 1.0,
        };
        let cams = ring(4, 3.0);
        let nn = knn_views(&cams, &sphere, 1).unwrap();
        for (t, n) in nn.iter().enumerate() {
            assert_eq!(n.len(), 1);
            assert!(n[0] == (t + 1) % 4 || n[0] == (t + 3) % 4);
        }
        // exact ties between the two adjacent views go to the lower id
        assert_eq!(nn[0], vec![1]);
        assert_eq!(nn[2], vec![1]);
        let all = knn_views(&cams, &sphere, 10).unwrap();
        assert!(all.iter().enumerate().all(|(t, n)| n.len() == 3 && !n.contains(&t)));
        assert!(knn_views(&cams, &sphere, 0).unwrap().iter().all(Vec::is_empty));
    }

    #[test]
    fn stride_keeps_the_ssim_window() {
        assert_eq!(secondary_stride(64, 64, 4, 11), 4);
        assert_eq!(secondary_stride(48, 48, 4, 11), 4);
        assert_eq!(secondary_stride(40, 40, 4, 11), 3);
        assert_eq!(secondary_stride(16, 16, 4, 11), 1);
    }

    #[test]
    fn accumulation_with_no_neighbours_is_identity() {
        let g = DVector::from_vec(vec![1.0, 2.0]);
        let h = DMatrix::identity(2, 2);
        let (g2, h2) = accumulate_secondary_terms((g.clone(), h.clone()), &[]);
        assert_eq!((g2, h2), (g, h));
    }
}
