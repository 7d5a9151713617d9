//! Finite-difference verification of every analytic derivative in the
//! pipeline: projection, SH colour, Gaussian weight, image loss and the
//! assembled local Newton gradients.
//!
//! Each quantity is compared as one concatenated vector over all kernels (or
//! sampled pixels) with `‖a − n‖∞ / ‖n‖∞`. Central differences use a step of
//! `1e-4` times the quantity's characteristic scale; a quantity that misses
//! its tolerance is retried with Richardson extrapolation.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::camera::{
    cov2d_derivatives_wrt_position, project_center, project_covariance_2d, projection_derivatives, Camera,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fd;
use crate::gaussian::gaussian_weight;
use crate::image::Image;
use crate::loss::{ssim_loss, ssim_value_and_derivs, ssim_window_stats, total_loss, total_loss_derivs, LossConfig};
use crate::newton::{apply_reduced, assemble, local_frame, Attribute, LocalFrame, SolveSettings, ViewTerms};
use crate::raster::{render, RenderSettings};
use crate::scene::{GaussianKernel, Scene};
use crate::sh::sh_color_derivs_wrt_position;
use crate::synth::{synth_scene, SynthConfig};

/// A view with its ground truth, rendered every `stride`-th pixel.
#[derive(Debug, Clone)]
pub struct CheckView {
    pub camera: Camera,
    /// Target at the strided resolution.
    pub target: Image,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub hessian_tolerance: f64,
    pub loss: LossConfig,
    /// Number of pixels sampled for the loss-derivative checks.
    pub pixel_samples: usize,
    /// Negates the analytic side of the named quantity (fault injection).
    pub fault: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            hessian_tolerance: 1e-3,
            loss: LossConfig::default(),
            pixel_samples: 24,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantityCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<QuantityCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&QuantityCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&QuantityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err / c.tolerance).fold(0.0, f64::max)
    }
}

/// Collects analytic and numeric samples of one quantity; `retry` holds the
/// Richardson-extrapolated numeric values when they were computed.
#[derive(Default)]
struct Samples {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
    retry: Vec<f64>,
}

impl Samples {
    fn push(&mut self, a: f64, n: f64, r: f64) {
        self.analytic.push(a);
        self.numeric.push(n);
        self.retry.push(r);
    }

    fn extend(&mut self, other: Samples) {
        self.analytic.extend(other.analytic);
        self.numeric.extend(other.numeric);
        self.retry.extend(other.retry);
    }
}

fn finish(name: &str, mut s: Samples, tolerance: f64, fault: &Option<String>) -> QuantityCheck {
    if fault.as_deref() == Some(name) {
        s.analytic.iter_mut().for_each(|v| *v = -*v);
    }
    let mut err = rel(&s.analytic, &s.numeric);
    if err > tolerance && s.retry.iter().all(|v| v.is_finite()) {
        err = err.min(rel(&s.analytic, &s.retry));
    }
    QuantityCheck {
        name: name.to_string(),
        max_rel_err: err,
        tolerance,
        samples: s.analytic.len(),
        passed: err <= tolerance,
    }
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let scale = n.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        let worst = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return if worst <= 1e-300 { 0.0 } else { f64::INFINITY };
    }
    fd::rel_err(a, n, scale)
}

/// Central difference with its Richardson refinement.
fn diff2(mut f: impl FnMut(f64) -> f64, h: f64) -> (f64, f64) {
    let c = fd::central(&mut f, 0.0, h);
    let r = fd::richardson(&mut f, 0.0, h);
    (c, r)
}

fn symmetric_entries(m: &Matrix2<f64>) -> [f64; 3] {
    [m[(0, 0)], m[(0, 1)], m[(1, 1)]]
}

fn with_position(k: &GaussianKernel, p: Vector3<f64>) -> GaussianKernel {
    let mut k = k.clone();
    k.position = p;
    k
}

/// Projection and SH-colour derivatives for every kernel visible in `camera`.
fn geometry_checks(scene: &Scene, camera: &Camera, cfg: &GradCheckConfig) -> Vec<QuantityCheck> {
    let per_kernel: Vec<[Samples; 6]> = scene
        .kernels
        .par_iter()
        .filter_map(|k| {
            let (dpi, d2pi) = projection_derivatives(camera, &k.position).ok()?;
            let (ds, dds) = cov2d_derivatives_wrt_position(camera, k).ok()?;
            let col = sh_color_derivs_wrt_position(camera, k, scene.sh_degree).ok()?;
            let h = 1e-4 * k.scale.max();
            let mut out: [Samples; 6] = Default::default();
            for i in 0..3 {
                let at = |t: f64| {
                    let mut p = k.position;
                    p[i] += t;
                    p
                };
                // π
                for a in 0..2 {
                    let (c, r) = diff2(|t| project_center(camera, &at(t)).map(|v| v.0[a]).unwrap_or(f64::NAN), h);
                    out[0].push(dpi[(a, i)], c, r);
                    for j in 0..3 {
                        let (c, r) = diff2(
                            |t| projection_derivatives(camera, &at(t)).map(|v| v.0[(a, j)]).unwrap_or(f64::NAN),
                            h,
                        );
                        out[1].push(d2pi[a][(i, j)], c, r);
                    }
                }
                // Σ
                let sig = |t: f64, e: usize| {
                    project_covariance_2d(camera, &with_position(k, at(t)), cfg_lowpass())
                        .map(|v| symmetric_entries(&v.0)[e])
                        .unwrap_or(f64::NAN)
                };
                for e in 0..3 {
                    let (c, r) = diff2(|t| sig(t, e), h);
                    out[2].push(symmetric_entries(&ds[i])[e], c, r);
                    for j in 0..3 {
                        let (c, r) = diff2(
                            |t| {
                                cov2d_derivatives_wrt_position(camera, &with_position(k, at(t)))
                                    .map(|v| symmetric_entries(&v.0[j])[e])
                                    .unwrap_or(f64::NAN)
                            },
                            h,
                        );
                        out[3].push(symmetric_entries(&dds[i][j])[e], c, r);
                    }
                }
                // c̃
                for ch in 0..3 {
                    if !col.active[ch] {
                        continue;
                    }
                    let (c, r) = diff2(
                        |t| {
                            sh_color_derivs_wrt_position(camera, &with_position(k, at(t)), scene.sh_degree)
                                .map(|v| v.color[ch])
                                .unwrap_or(f64::NAN)
                        },
                        h,
                    );
                    out[4].push(col.grad[ch][i], c, r);
                    for j in 0..3 {
                        let (c, r) = diff2(
                            |t| {
                                sh_color_derivs_wrt_position(camera, &with_position(k, at(t)), scene.sh_degree)
                                    .map(|v| v.grad[ch][j])
                                    .unwrap_or(f64::NAN)
                            },
                            h,
                        );
                        out[5].push(col.hess[ch][(i, j)], c, r);
                    }
                }
            }
            Some(out)
        })
        .collect();
    let mut merged: [Samples; 6] = Default::default();
    for k in per_kernel {
        for (m, s) in merged.iter_mut().zip(k) {
            m.extend(s);
        }
    }
    let names = [
        "camera.dpi_dp",
        "camera.d2pi_dp2",
        "camera.dsigma_dp",
        "camera.d2sigma_dp2",
        "sh.dcolor_dp",
        "sh.d2color_dp2",
    ];
    names
        .iter()
        .zip(merged)
        .map(|(n, s)| finish(n, s, cfg.tolerance, &cfg.fault))
        .collect()
}

fn cfg_lowpass() -> f64 {
    crate::camera::DEFAULT_LOWPASS
}

/// Gaussian weight derivatives at a few pixels around every visible kernel.
fn weight_checks(scene: &Scene, camera: &Camera, cfg: &GradCheckConfig) -> Vec<QuantityCheck> {
    let mut first = Samples::default();
    let mut second = Samples::default();
    for k in &scene.kernels {
        let Ok((sigma, _)) = project_covariance_2d(camera, k, cfg_lowpass()) else {
            continue;
        };
        let Ok((pi, _, _)) = project_center(camera, &k.position) else {
            continue;
        };
        let sd = Vector2::new(sigma[(0, 0)].sqrt(), sigma[(1, 1)].sqrt());
        for off in [Vector2::new(0.7, -0.4), Vector2::new(-1.1, 0.9)] {
            let x = pi + off.component_mul(&sd);
            let Ok(w) = gaussian_weight(&sigma, &pi, &x) else {
                continue;
            };
            let z0 = [pi.x, pi.y, sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 1)]];
            let g_of = |z: &[f64; 5]| {
                let s = Matrix2::new(z[2], z[3], z[3], z[4]);
                gaussian_weight(&s, &Vector2::new(z[0], z[1]), &x).map(|w| w.g).unwrap_or(f64::NAN)
            };
            let scales = [sd.x, sd.y, sigma[(0, 0)], sd.x * sd.y, sigma[(1, 1)]];
            let analytic1 = [
                w.d_pi.x,
                w.d_pi.y,
                w.d_sigma[(0, 0)],
                2.0 * w.d_sigma[(0, 1)],
                w.d_sigma[(1, 1)],
            ];
            // second derivatives along z-coordinates, contracted from the
            // tensor outputs
            let unit = |a: usize| match a {
                0 => Matrix2::new(1.0, 0.0, 0.0, 0.0),
                1 => Matrix2::new(0.0, 1.0, 1.0, 0.0),
                _ => Matrix2::new(0.0, 0.0, 0.0, 1.0),
            };
            let analytic2 = |i: usize, j: usize| -> f64 {
                match (i < 2, j < 2) {
                    (true, true) => w.d2_pi[(i, j)],
                    (true, false) => w.d2_pi_sigma[i].component_mul(&unit(j - 2)).sum(),
                    (false, true) => w.d2_pi_sigma[j].component_mul(&unit(i - 2)).sum(),
                    (false, false) => {
                        let (ea, eb) = (unit(i - 2), unit(j - 2));
                        let mut v = 0.0;
                        for p in 0..2 {
                            for l in 0..2 {
                                v += ea[(p, l)] * w.d2_sigma[p][l].component_mul(&eb).sum();
                            }
                        }
                        v
                    }
                }
            };
            for i in 0..5 {
                let hi = 1e-4 * scales[i];
                let along = |t: f64| {
                    let mut z = z0;
                    z[i] += t;
                    z
                };
                let (c, r) = diff2(|t| g_of(&along(t)), hi);
                first.push(analytic1[i], c, r);
                for j in 0..5 {
                    let hj = 1e-4 * scales[j];
                    let grad_i = |t: f64| {
                        let mut z = z0;
                        z[j] += t;
                        fd::central(
                            |u| {
                                let mut zz = z;
                                zz[i] += u;
                                g_of(&zz)
                            },
                            0.0,
                            hi,
                        )
                    };
                    let (c, r) = diff2(grad_i, hj);
                    second.push(analytic2(i, j), c, r);
                }
            }
        }
    }
    vec![
        finish("raster.dG", first, cfg.tolerance, &cfg.fault),
        finish("raster.d2G", second, cfg.tolerance, &cfg.fault),
    ]
}

/// Loss gradient and SSIM Hessian diagonal at sampled pixels.
fn loss_checks(rendered: &Image, target: &Image, cfg: &GradCheckConfig) -> Result<Vec<QuantityCheck>> {
    let (_, d) = total_loss_derivs(rendered, target, &cfg.loss)?;
    let stats = ssim_window_stats(rendered, target, &cfg.loss)?;
    let (_, ds) = ssim_value_and_derivs(&stats, rendered, target, &cfg.loss)?;
    let n = rendered.len();
    let step = (n / cfg.pixel_samples.max(1)).max(1);
    let pixels: Vec<usize> = (0..n).step_by(step).collect();
    let results: Vec<(Samples, Samples)> = pixels
        .par_iter()
        .map(|&m| {
            let mut g = Samples::default();
            let mut hs = Samples::default();
            for ch in 0..3 {
                let moved = |t: f64| {
                    let mut img = rendered.clone();
                    img.data[m][ch] += t;
                    img
                };
                let (c, r) = diff2(|t| total_loss(&moved(t), target, &cfg.loss).unwrap_or(f64::NAN), 1e-4);
                g.push(d.g[m][ch], c, r);
                let f = |t: f64| ssim_loss(&moved(t), target, &cfg.loss).unwrap_or(f64::NAN);
                let c2 = fd::second(f, 0.0, 1e-3);
                hs.push(ds.h[m][ch], c2, f64::NAN);
            }
            (g, hs)
        })
        .collect();
    let mut g = Samples::default();
    let mut hs = Samples::default();
    for (a, b) in results {
        g.extend(a);
        hs.extend(b);
    }
    Ok(vec![
        finish("loss.dL_dc", g, cfg.tolerance, &cfg.fault),
        finish("loss.ssim_hessian_diag", hs, cfg.hessian_tolerance, &cfg.fault),
    ])
}

/// Total loss of a scene over the check views, rendered without cutoffs.
pub fn scene_loss(scene: &Scene, views: &[CheckView], loss: &LossConfig) -> Result<f64> {
    let settings = RenderSettings::exact();
    let mut total = 0.0;
    for v in views {
        let (_, rt) = render(scene, &v.camera, v.camera.strided_grid(v.stride), &settings, false)?;
        total += total_loss(&rt.image, &v.target, loss)?;
    }
    Ok(total)
}

/// Characteristic step of each attribute's reduced coordinate.
fn reduced_step(attr: Attribute, kernel: &GaussianKernel, frame: &LocalFrame) -> f64 {
    match attr {
        Attribute::Position => 1e-4 * kernel.scale.max(),
        Attribute::Scaling => 1e-4 * frame.scaling.eigvals.y,
        Attribute::Opacity => 1e-4 * kernel.opacity.min(1.0 - kernel.opacity),
        Attribute::Rotation | Attribute::Color => 1e-4,
    }
}

/// Assembled local gradients of all five attributes against differences of
/// the rendered loss. Every view is rendered without cutoffs.
pub fn newton_gradient_checks(scene: &Scene, views: &[CheckView], cfg: &GradCheckConfig) -> Result<Vec<QuantityCheck>> {
    let settings = RenderSettings::exact();
    let solve = SolveSettings {
        sh_degree: scene.sh_degree,
        lowpass: settings.lowpass,
        step_caps: false,
        ..SolveSettings::default()
    };
    let mut rendered = Vec::new();
    for v in views {
        let (list, rt) = render(scene, &v.camera, v.camera.strided_grid(v.stride), &settings, true)?;
        let (_, d) = total_loss_derivs(&rt.image, &v.target, &cfg.loss)?;
        rendered.push((list, rt, d));
    }
    let terms: Vec<ViewTerms> = views
        .iter()
        .zip(&rendered)
        .map(|(v, (list, rt, d))| ViewTerms {
            camera: &v.camera,
            list,
            capture: rt.capture.as_ref().expect("capture requested"),
            loss: d,
        })
        .collect();
    let per_kernel: Vec<Vec<Samples>> = (0..scene.len())
        .into_par_iter()
        .map(|id| -> Result<Vec<Samples>> {
            let kernel = &scene.kernels[id];
            let mut out: Vec<Samples> = (0..5).map(|_| Samples::default()).collect();
            let Ok(frame) = local_frame(&views[0].camera, kernel, settings.lowpass) else {
                return Ok(out);
            };
            for (slot, attr) in Attribute::ALL.into_iter().enumerate() {
                let (g, _) = assemble(attr, &frame, kernel, id, &terms, &solve)?;
                let h = reduced_step(attr, kernel, &frame);
                for i in 0..g.len() {
                    let mut eval = |t: f64| {
                        let mut y = vec![0.0; g.len()];
                        y[i] = t;
                        let mut s = scene.clone();
                        match apply_reduced(attr, kernel, &frame, &y) {
                            Ok(k) => s.kernels[id] = k,
                            Err(_) => return f64::NAN,
                        }
                        scene_loss(&s, views, &cfg.loss).unwrap_or(f64::NAN)
                    };
                    let c = fd::central(&mut eval, 0.0, h);
                    out[slot].push(g[i], c, f64::NAN);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut merged: Vec<Samples> = (0..5).map(|_| Samples::default()).collect();
    for k in per_kernel {
        for (m, s) in merged.iter_mut().zip(k) {
            m.extend(s);
        }
    }
    Ok(Attribute::ALL
        .iter()
        .zip(merged)
        .map(|(a, s)| finish(&format!("newton.{}.g", a.name()), s, cfg.tolerance, &cfg.fault))
        .collect())
}

/// Runs every check. `views[0]` is the primary view; the rest act as
/// secondary targets in the assembled Newton gradients.
pub fn check_derivatives(scene: &Scene, views: &[CheckView], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let Some(primary) = views.first() else {
        return Ok(report);
    };
    report.checks.extend(geometry_checks(scene, &primary.camera, cfg));
    report.checks.extend(weight_checks(scene, &primary.camera, cfg));
    let (_, rt) = render(
        scene,
        &primary.camera,
        primary.camera.strided_grid(primary.stride),
        &RenderSettings::exact(),
        false,
    )?;
    report.checks.extend(loss_checks(&rt.image, &primary.target, cfg)?);
    report.checks.extend(newton_gradient_checks(scene, views, cfg)?);
    Ok(report)
}

/// Check views from a dataset: `primary` at full resolution, then
/// `secondaries` at `stride`.
pub fn dataset_views(dataset: &Dataset, primary: usize, secondaries: &[usize], stride: usize) -> Result<Vec<CheckView>> {
    std::iter::once((primary, 1))
        .chain(secondaries.iter().map(|&j| (j, stride.max(1))))
        .map(|(v, s)| {
            let camera = dataset
                .cameras
                .get(v)
                .ok_or_else(|| Error::InvalidInput(format!("view {v} out of range")))?;
            Ok(CheckView {
                camera: camera.clone(),
                target: dataset.images[v].subsample(s, s / 2),
                stride: s,
            })
        })
        .collect()
}

/// A seeded random scene (perturbed away from its ground truth) with
/// `n_views` views: the first is primary, the rest are strided secondaries.
pub fn random_case(seed: u64, n_kernels: usize, resolution: usize, n_views: usize) -> Result<(Scene, Vec<CheckView>)> {
    let out = synth_scene(&SynthConfig {
        seed,
        n_kernels,
        n_views: n_views.max(1),
        resolution,
        sh_degree: 3,
        ..Default::default()
    })?;
    let rest: Vec<usize> = (1..out.dataset.len()).collect();
    let views = dataset_views(&out.dataset, 0, &rest, 2)?;
    Ok((out.init, views))
}
