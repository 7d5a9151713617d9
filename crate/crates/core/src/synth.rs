//! Seeded synthetic scenes and datasets.

use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitBall, UnitSphere};

use crate::camera::{Camera, DEFAULT_LOWPASS};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::raster::{render, render_reference, RenderSettings};
use crate::scene::{renormalize_quaternion, sh_coeffs_for_degree, GaussianKernel, Scene, OPACITY_EPS};
use crate::sh::SH_C0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraLayout {
    /// Evenly spread over a sphere (Fibonacci lattice).
    Sphere,
    /// Evenly spaced on the horizontal great circle.
    Ring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_kernels: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub sh_degree: u8,
    pub layout: CameraLayout,
    /// Multiplies every perturbation of the initial scene; 0 gives the truth.
    pub perturbation: f64,
    pub camera_distance: f64,
    pub fov_y: f64,
    /// Ground truth from these settings instead of the reference renderer.
    pub render_with: Option<RenderSettings>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_kernels: 100,
            n_views: 8,
            resolution: 64,
            sh_degree: 3,
            layout: CameraLayout::Sphere,
            perturbation: 1.0,
            camera_distance: 4.0,
            fov_y: 0.7,
            render_with: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub truth: Scene,
    /// Perturbed copy used to start training.
    pub init: Scene,
    pub dataset: Dataset,
}

pub fn random_kernel(rng: &mut impl Rng, sh_degree: u8) -> GaussianKernel {
    let p: [f64; 3] = UnitBall.sample(rng);
    let position = Vector3::from(p) * 0.9;
    let scale = Vector3::from_fn(|_, _| 0.06 * 3f64.powf(rng.random::<f64>()));
    let q = Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let rotation = renormalize_quaternion(&q).unwrap_or_else(|_| Quaternion::identity());
    let opacity = rng.random_range(0.35..0.9);
    let base = [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ];
    let mut k = GaussianKernel::new(position, scale, rotation, opacity).with_base_color(base);
    let nc = sh_coeffs_for_degree(sh_degree);
    for ch in 0..3 {
        for c in 1..nc {
            k.sh[ch][c] = rng.random_range(-0.15..0.15);
        }
    }
    k
}

pub fn cameras(cfg: &SynthConfig) -> Result<Vec<Camera>> {
    let n = cfg.n_views;
    (0..n)
        .map(|i| {
            let dir = match cfg.layout {
                CameraLayout::Ring => {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    Vector3::new(a.cos(), 0.0, a.sin())
                }
                CameraLayout::Sphere => {
                    // Fibonacci lattice, kept away from the poles
                    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                    let y = 0.85 * (1.0 - 2.0 * (i as f64 + 0.5) / n as f64);
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    Vector3::new(r * t.cos(), y, r * t.sin())
                }
            };
            Camera::look_at(
                dir * cfg.camera_distance,
                Vector3::zeros(),
                Vector3::y(),
                cfg.fov_y,
                cfg.resolution,
                cfg.resolution,
            )
        })
        .collect()
}

/// Applies the seeded perturbation of the initial scene.
pub fn perturb(scene: &Scene, amount: f64, rng: &mut impl Rng) -> Scene {
    let mut out = scene.clone();
    if amount == 0.0 {
        return out;
    }
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    for k in &mut out.kernels {
        let d: [f64; 3] = UnitSphere.sample(rng);
        k.position += Vector3::from(d) * (0.06 * amount * rng.random::<f64>());
        for j in 0..3 {
            k.scale[j] *= 2f64.powf(amount * rng.random_range(-1.0..1.0));
        }
        k.opacity = (k.opacity + 0.15 * amount * jitter.sample(rng)).clamp(0.05, 0.95);
        for ch in 0..3 {
            k.sh[ch][0] += 0.15 * amount * jitter.sample(rng) / SH_C0;
        }
        k.opacity = k.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    }
    out
}

/// Random truth scene, cameras around it, ground-truth renders, and a
/// perturbed initialization. Fully determined by the config.
pub fn synth_scene(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.n_kernels == 0 {
        return Err(Error::InvalidInput("synthetic scene needs at least one kernel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kernels = (0..cfg.n_kernels).map(|_| random_kernel(&mut rng, cfg.sh_degree)).collect();
    let truth = Scene::new(kernels, Vector3::zeros(), cfg.sh_degree);
    let cams = cameras(cfg)?;
    let images = cams
        .iter()
        .map(|c| match &cfg.render_with {
            Some(s) => render(&truth, c, c.full_grid(), s, false).map(|r| r.1.image),
            None => render_reference(&truth, c, c.full_grid(), DEFAULT_LOWPASS),
        })
        .collect::<Result<Vec<_>>>()?;
    let init = perturb(&truth, cfg.perturbation, &mut rng);
    Ok(SynthOutput {
        truth,
        init,
        dataset: Dataset::new(cams, images)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_kernels: 12,
            n_views: 4,
            resolution: 24,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = synth_scene(&small()).unwrap();
        let b = synth_scene(&small()).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.init, b.init);
        assert_eq!(a.dataset.images, b.dataset.images);
        let c = synth_scene(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn zero_perturbation_starts_at_the_truth() {
        let out = synth_scene(&SynthConfig {
            perturbation: 0.0,
            ..small()
        })
        .unwrap();
        assert_eq!(out.truth, out.init);
    }

    #[test]
    fn kernels_valid_and_in_view() {
        let out = synth_scene(&small()).unwrap();
        out.truth.check_invariants(1e-12).unwrap();
        out.init.check_invariants(1e-12).unwrap();
        assert!(out.truth.kernels.iter().all(|k| k.position.norm() <= 0.9));
        for c in &out.dataset.cameras {
            assert!((c.center.norm() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_layout_is_planar() {
        let cams = cameras(&SynthConfig {
            layout: CameraLayout::Ring,
            n_views: 6,
            ..small()
        })
        .unwrap();
        assert!(cams.iter().all(|c| c.center.y.abs() < 1e-12));
    }
}
