//! Stochastic per-image training: local Newton with secondary targets, and
//! the GD / Adam baselines.
//!
//! A Newton step on view `t` renders `t` at full resolution and its
//! neighbours at the secondary stride, then runs the five attribute passes in
//! the configured order. Each pass solves every kernel from the same frozen
//! scene (in parallel) and commits the results in kernel order. The primary
//! capture is refreshed after passes that move or reshape kernels; secondary
//! captures are reused for the whole step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gradient::{apply_step, scene_gradient, KernelGradient, PARAMS_PER_KERNEL};
use crate::image::Image;
use crate::loss::{total_loss, total_loss_derivs, LossConfig, PixelLossDerivatives};
use crate::metrics::{MetricsReport, ViewMetrics};
use crate::newton::{check_order, rescale_step, solve_attribute, Attribute, LocalNewtonSystem, OpacityBarrier, SolveSettings, ViewTerms};
use crate::raster::{render, Capture, RenderSettings, RenderTarget, SplatList};
use crate::scene::{sh_coeffs_for_degree, GaussianKernel, Scene, OPACITY_EPS, SH_COEFFS};
use crate::secondary::{fit_bounding_sphere, SecondaryTargetSet};

/// Sufficient-decrease constant of the pass line search.
const LINE_SEARCH_ARMIJO: f64 = 1e-4;
/// Bounds on a shortened pass.
const LINE_SEARCH_MIN: f64 = 0.1;
const LINE_SEARCH_MAX: f64 = 0.9;

/// Smallest scale a first-order step may leave behind.
const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Newton,
    Gd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "newton" => Ok(Optimizer::Newton),
            "gd" | "sgd" => Ok(Optimizer::Gd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidInput(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Per-attribute step sizes of the first-order baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scaling: f64,
    pub opacity: f64,
    pub color: f64,
}

impl LearningRates {
    /// Adam rates in the range of common splatting defaults.
    pub const ADAM: LearningRates = LearningRates {
        position: 1.6e-4,
        rotation: 1e-3,
        scaling: 5e-3,
        opacity: 5e-2,
        color: 2.5e-3,
    };

    /// Plain GD rates, tuned on the synthetic fixture (loss is a per-pixel
    /// mean, so gradients are small).
    pub const GD: LearningRates = LearningRates {
        position: 0.5,
        rotation: 1.25,
        scaling: 0.5,
        opacity: 10.0,
        color: 20.0,
    };

    pub fn scaled(self, f: f64) -> Self {
        Self {
            position: self.position * f,
            rotation: self.rotation * f,
            scaling: self.scaling * f,
            opacity: self.opacity * f,
            color: self.color * f,
        }
    }

    fn expand(&self) -> KernelGradient {
        let mut out = [0.0; PARAMS_PER_KERNEL];
        out[0..3].fill(self.position);
        out[3..6].fill(self.rotation);
        out[6..9].fill(self.scaling);
        out[9] = self.opacity;
        out[10..].fill(self.color);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// When the primary capture is re-rendered between attribute passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefreshPolicy {
    /// After position, rotation and scaling passes.
    Geometric,
    /// After every pass.
    Every,
}

/// Safeguards applied on top of the local Newton systems.
///
/// Per-kernel solves ignore that neighbouring kernels move at the same time
/// and the SSIM curvature can be negative at single pixels; unguarded unit
/// steps overshoot on overlapping scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stabilization {
    /// Clamp the per-pixel loss curvature at zero.
    pub clamp_pixel_curvature: bool,
    /// Scale the per-pixel curvature by the number of kernels that
    /// effectively share the pixel, `(Σ w)² / Σ w²` with `w = αT`.
    pub overlap_weighting: bool,
    /// Keep the `gᵀ ∂²c` term in the position, rotation and scaling systems.
    pub geometric_curvature: bool,
    /// Eigenvalue floor as a fraction of the largest eigenvalue.
    pub relative_floor: f64,
    /// Eigenvalue floor of the colour blocks.
    pub color_floor: f64,
    /// Fraction of each Newton step applied.
    pub relaxation: f64,
    /// Shorten a pass whose combined primary and secondary loss rises,
    /// using a quadratic fit through the loss before and after and the
    /// directional derivative `Σ gᵀΔ`.
    pub line_search: bool,
}

impl Stabilization {
    /// Plain local Newton: exact curvature, unit steps.
    pub const NONE: Stabilization = Stabilization {
        clamp_pixel_curvature: false,
        overlap_weighting: false,
        geometric_curvature: true,
        relative_floor: 0.0,
        color_floor: 0.0,
        relaxation: 1.0,
        line_search: false,
    };
}

impl Default for Stabilization {
    fn default() -> Self {
        Self {
            clamp_pixel_curvature: true,
            overlap_weighting: true,
            geometric_curvature: false,
            relative_floor: 1e-2,
            color_floor: 0.3,
            relaxation: 0.7,
            line_search: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub order: Vec<Attribute>,
    pub epochs: usize,
    /// Stops early after this many image steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
    /// Secondary targets per view.
    pub knn: usize,
    pub secondary_stride: usize,
    pub learning_rates: LearningRates,
    pub adam: AdamParams,
    /// Probe metrics are computed every this many steps (and after the last).
    pub log_every: usize,
    pub render: RenderSettings,
    pub barrier: OpacityBarrier,
    pub step_caps: bool,
    pub refresh: RefreshPolicy,
    /// Keep the last step's local systems for inspection.
    pub keep_systems: bool,
    pub stabilization: Stabilization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Newton,
            order: Attribute::ALL.to_vec(),
            epochs: 1,
            max_steps: None,
            seed: 0,
            loss: LossConfig::default(),
            knn: 3,
            secondary_stride: 4,
            learning_rates: LearningRates::GD,
            adam: AdamParams::default(),
            log_every: 1,
            render: RenderSettings::default(),
            barrier: OpacityBarrier::default(),
            step_caps: true,
            refresh: RefreshPolicy::Geometric,
            keep_systems: false,
            stabilization: Stabilization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_order(&self.order)?;
        self.loss.validate()?;
        if self.log_every == 0 {
            return Err(Error::InvalidInput("log cadence must be at least 1".into()));
        }
        if self.optimizer != Optimizer::Newton {
            let lr = self.learning_rates;
            let all = [lr.position, lr.rotation, lr.scaling, lr.opacity, lr.color];
            if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput(format!("learning rates must be finite and ≥ 0: {lr:?}")));
            }
        }
        Ok(())
    }
}

/// Probe-set metrics at one moment of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeMetrics {
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    /// 1-based image step.
    pub step: usize,
    pub image_id: usize,
    /// Present on logging steps.
    pub probe: Option<ProbeMetrics>,
    /// Loss of the training view before the step.
    pub view_loss: f64,
    /// `‖Δ‖` over all kernels, per attribute in [`Attribute::ALL`] order.
    pub delta_norms: [f64; 5],
    /// Step time without probe evaluation.
    pub dt_ms: f64,
}

/// Plain gradient descent on a flat parameter vector.
pub fn gd_update(params: &mut [f64], grad: &[f64], lr: &[f64]) {
    for ((p, g), l) in params.iter_mut().zip(grad).zip(lr) {
        *p -= l * g;
    }
}

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(n: usize, params: AdamParams) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            params,
        }
    }

    /// Advances the moments and returns the step to add to the parameters.
    pub fn step(&mut self, grad: &[f64], lr: &[f64]) -> Vec<f64> {
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                -lr[i] * mh / (vh.sqrt() + eps)
            })
            .collect()
    }
}

/// Multiplies each pixel's curvature by its effective kernel count.
pub fn weight_by_overlap(loss: &mut PixelLossDerivatives, capture: &Capture) {
    let n = loss.h.len();
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    for r in &capture.records {
        let w = r.alpha * r.t;
        s1[r.pixel as usize] += w;
        s2[r.pixel as usize] += w * w;
    }
    for (h, (a, b)) in loss.h.iter_mut().zip(s1.iter().zip(&s2)) {
        if *b > 0.0 {
            let m = a * a / b;
            h.iter_mut().for_each(|v| *v *= m);
        }
    }
}

struct Rendered {
    list: SplatList,
    target: RenderTarget,
    loss: PixelLossDerivatives,
    value: f64,
}

impl Rendered {
    fn terms<'a>(&'a self, camera: &'a crate::camera::Camera) -> ViewTerms<'a> {
        ViewTerms {
            camera,
            list: &self.list,
            capture: self.target.capture.as_ref().expect("training renders capture"),
            loss: &self.loss,
        }
    }
}

/// Training state for one run.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub dataset: &'a Dataset,
    pub scene: Scene,
    pub secondary: SecondaryTargetSet,
    pub probe_ids: Vec<usize>,
    pub step: usize,
    pub epoch: usize,
    /// Local systems of the last Newton step, if kept.
    pub last_systems: Vec<LocalNewtonSystem>,
    adam: Option<AdamState>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, scene: Scene, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidInput("dataset has no views".into()));
        }
        let knn = if dataset.len() < 2 { 0 } else { config.knn };
        let sphere = if knn > 0 {
            Some(fit_bounding_sphere(&scene)?)
        } else {
            None
        };
        let secondary = match &sphere {
            Some(s) => SecondaryTargetSet::build(
                &dataset.cameras,
                &dataset.images,
                s,
                knn,
                config.secondary_stride,
                config.loss.window,
            )?,
            None => SecondaryTargetSet {
                neighbors: vec![Vec::new(); dataset.len()],
                stride: 1,
                images: Vec::new(),
            },
        };
        let adam = (config.optimizer == Optimizer::Adam)
            .then(|| AdamState::new(scene.len() * PARAMS_PER_KERNEL, config.adam));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            probe_ids: dataset.probe_ids(),
            config,
            dataset,
            scene,
            secondary,
            step: 0,
            epoch: 0,
            last_systems: Vec::new(),
            adam,
            rng,
        })
    }

    /// Random permutation of the views for the next epoch.
    pub fn epoch_order(&mut self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.dataset.len()).collect();
        ids.shuffle(&mut self.rng);
        ids
    }

    fn render_view(&self, camera: usize, stride: usize, target: &Image) -> Result<Rendered> {
        let cam = &self.dataset.cameras[camera];
        let (list, rt) = render(&self.scene, cam, cam.strided_grid(stride), &self.config.render, true)?;
        let (value, mut loss) = total_loss_derivs(&rt.image, target, &self.config.loss)?;
        let stab = &self.config.stabilization;
        if stab.clamp_pixel_curvature {
            loss.h.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        }
        if stab.overlap_weighting {
            if let Some(cap) = rt.capture.as_ref() {
                weight_by_overlap(&mut loss, cap);
            }
        }
        Ok(Rendered {
            list,
            target: rt,
            loss,
            value,
        })
    }

    fn check_finite(&self, value: f64, view: usize) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        let bad = self
            .scene
            .kernels
            .iter()
            .filter(|k| k.check_invariants(1e-9).is_err())
            .count();
        Err(Error::NonFiniteLoss {
            step: self.step,
            detail: format!("view {view} loss {value}; {bad} kernels violate their invariants"),
        })
    }

    /// Mean loss, PSNR and SSIM over the probe views.
    pub fn probe_metrics(&self) -> Result<ProbeMetrics> {
        let report = evaluate(&self.scene, self.dataset, &self.probe_ids, &self.config.render, &self.config.loss)?;
        Ok(ProbeMetrics {
            loss: report.mean_loss,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
        })
    }

    fn solve_settings(&self) -> SolveSettings {
        SolveSettings {
            sh_degree: self.scene.sh_degree,
            lowpass: self.config.render.lowpass,
            barrier: self.config.barrier.decayed(self.epoch),
            step_caps: self.config.step_caps,
            relative_floor: self.config.stabilization.relative_floor,
            color_floor: self.config.stabilization.color_floor,
            relaxation: self.config.stabilization.relaxation,
            geometric_curvature: self.config.stabilization.geometric_curvature,
        }
    }

    /// One optimizer step on view `t`. Probe metrics are not computed here.
    pub fn train_step(&mut self, t: usize) -> Result<IterationReport> {
        if t >= self.dataset.len() {
            return Err(Error::InvalidInput(format!("view {t} out of range")));
        }
        let start = Instant::now();
        self.step += 1;
        let (view_loss, delta_norms) = match self.config.optimizer {
            Optimizer::Newton => self.newton_step(t)?,
            Optimizer::Gd | Optimizer::Adam => self.first_order_step(t)?,
        };
        Ok(IterationReport {
            step: self.step,
            image_id: t,
            probe: None,
            view_loss,
            delta_norms,
            dt_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn newton_step(&mut self, t: usize) -> Result<(f64, [f64; 5])> {
        let ds = self.dataset;
        let settings = self.solve_settings();
        let line_search = self.config.stabilization.line_search;
        let mut primary = self.render_view(t, 1, &ds.images[t])?;
        let view_loss = primary.value;
        self.check_finite(view_loss, t)?;
        let stride = self.secondary.stride;
        let neighbors = self.secondary.neighbors[t].clone();
        let secondaries = neighbors
            .iter()
            .map(|&j| self.render_view(j, stride, &self.secondary.images[j]))
            .collect::<Result<Vec<_>>>()?;
        let mut objective = primary.value + secondaries.iter().map(|r| r.value).sum::<f64>();
        let mut norms2 = [0.0; 5];
        let mut systems = Vec::new();
        let order = self.config.order.clone();
        for (pass, &attr) in order.iter().enumerate() {
            let mut views = vec![primary.terms(&ds.cameras[t])];
            views.extend(neighbors.iter().zip(&secondaries).map(|(&j, r)| r.terms(&ds.cameras[j])));
            let kernels = &self.scene.kernels;
            let solved = (0..kernels.len())
                .into_par_iter()
                .map(|i| solve_attribute(attr, &kernels[i], i, &views, &settings))
                .collect::<Result<Vec<_>>>()?;
            drop(views);
            let before = std::mem::take(&mut self.scene.kernels);
            let (systems_now, trial): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
            self.scene.kernels = trial;
            let last = pass + 1 == order.len();
            let refresh = match self.config.refresh {
                RefreshPolicy::Geometric => attr.is_geometric(),
                RefreshPolicy::Every => true,
            };
            let mut alpha = 1.0;
            if line_search {
                let slope: f64 = systems_now.iter().map(|s| s.g.dot(&s.delta)).sum();
                let (fresh, f1) = self.combined_objective(t, &neighbors)?;
                let mut fresh = Some(fresh);
                let rise = f1 - objective - slope;
                if f1 > objective + LINE_SEARCH_ARMIJO * slope && rise > 0.0 {
                    alpha = (-slope / (2.0 * rise)).clamp(LINE_SEARCH_MIN, LINE_SEARCH_MAX);
                    let cam = &ds.cameras[t];
                    self.scene.kernels = systems_now
                        .par_iter()
                        .zip(&before)
                        .map(|(sys, k)| rescale_step(sys, k, cam, alpha, &settings))
                        .collect::<Result<Vec<_>>>()?;
                    fresh = None;
                }
                match fresh {
                    Some(r) => {
                        objective = f1;
                        primary = r;
                    }
                    None if !last => {
                        let (r, f) = self.combined_objective(t, &neighbors)?;
                        objective = f;
                        primary = r;
                    }
                    None => {}
                }
                self.check_finite(objective, t)?;
            } else if !last && refresh {
                primary = self.render_view(t, 1, &ds.images[t])?;
                self.check_finite(primary.value, t)?;
            }
            let slot = Attribute::ALL.iter().position(|a| *a == attr).expect("attribute listed");
            for sys in systems_now {
                norms2[slot] += sys.delta.norm_squared() * alpha * alpha;
                if self.config.keep_systems {
                    systems.push(sys);
                }
            }
        }
        if self.config.keep_systems {
            self.last_systems = systems;
        }
        Ok((view_loss, norms2.map(f64::sqrt)))
    }

    /// Fresh primary render of view `t` and the primary plus secondary loss.
    fn combined_objective(&self, t: usize, neighbors: &[usize]) -> Result<(Rendered, f64)> {
        let primary = self.render_view(t, 1, &self.dataset.images[t])?;
        let mut total = primary.value;
        for &j in neighbors {
            let cam = &self.dataset.cameras[j];
            let grid = cam.strided_grid(self.secondary.stride);
            let (_, rt) = render(&self.scene, cam, grid, &self.config.render, false)?;
            total += total_loss(&rt.image, &self.secondary.images[j], &self.config.loss)?;
        }
        Ok((primary, total))
    }

    fn first_order_step(&mut self, t: usize) -> Result<(f64, [f64; 5])> {
        let ds = self.dataset;
        let primary = self.render_view(t, 1, &ds.images[t])?;
        self.check_finite(primary.value, t)?;
        let grads = scene_gradient(&self.scene.kernels, &primary.terms(&ds.cameras[t]), self.scene.sh_degree)?;
        let mut lr = self.config.learning_rates.expand();
        // coefficients above the scene's SH degree stay untouched
        let nc = sh_coeffs_for_degree(self.scene.sh_degree);
        for ch in 0..3 {
            for i in nc..SH_COEFFS {
                lr[10 + ch * SH_COEFFS + i] = 0.0;
            }
        }
        let flat: Vec<f64> = grads.iter().flatten().copied().collect();
        let lrs: Vec<f64> = (0..self.scene.len()).flat_map(|_| lr).collect();
        let steps = match &mut self.adam {
            Some(adam) => adam.step(&flat, &lrs),
            None => {
                let mut s = vec![0.0; flat.len()];
                gd_update(&mut s, &flat, &lrs);
                s
            }
        };
        let mut norms2 = [0.0; 5];
        for (i, chunk) in steps.chunks(PARAMS_PER_KERNEL).enumerate() {
            let step: KernelGradient = chunk.try_into().expect("chunk size");
            let old = &self.scene.kernels[i];
            let mut k = apply_step(old, &step)?;
            project_feasible(&mut k);
            for (slot, range) in [0..3, 3..6, 6..9, 9..10, 10..PARAMS_PER_KERNEL].into_iter().enumerate() {
                norms2[slot] += step[range].iter().map(|v| v * v).sum::<f64>();
            }
            self.scene.kernels[i] = k;
        }
        Ok((primary.value, norms2.map(f64::sqrt)))
    }
}

/// Clamps opacity into its interior band and scales above [`MIN_SCALE`].
fn project_feasible(k: &mut GaussianKernel) {
    k.opacity = k.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    for s in k.scale.iter_mut() {
        *s = s.max(MIN_SCALE);
    }
}

/// Metrics of `scene` on the listed views, rendered with `settings`.
pub fn evaluate(
    scene: &Scene,
    dataset: &Dataset,
    views: &[usize],
    settings: &RenderSettings,
    loss: &LossConfig,
) -> Result<MetricsReport> {
    let per_view = views
        .iter()
        .map(|&v| {
            let cam = &dataset.cameras[v];
            let (_, rt) = render(scene, cam, cam.full_grid(), settings, false)?;
            ViewMetrics::compute(v, &rt.image, &dataset.images[v], loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(per_view))
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// Loss-curve CSV.
    pub log: Option<PathBuf>,
    /// Per-epoch scene checkpoints (and a dump on a non-finite loss).
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub scene: Scene,
    /// Probe metrics before the first step.
    pub initial: ProbeMetrics,
    pub reports: Vec<IterationReport>,
}

impl TrainingRun {
    /// `(step, probe loss)` including the initial point at step 0.
    pub fn curve(&self) -> Vec<(usize, f64)> {
        std::iter::once((0, self.initial.loss))
            .chain(self.reports.iter().filter_map(|r| r.probe.map(|p| (r.step, p.loss))))
            .collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.curve().last().map(|c| c.1).unwrap_or(self.initial.loss)
    }

    /// Mean of `max(0, L(after) − L(before))` over consecutive logged steps.
    pub fn mean_spike(&self) -> f64 {
        let c = self.curve();
        if c.len() < 2 {
            return 0.0;
        }
        c.windows(2).map(|w| (w[1].1 - w[0].1).max(0.0)).sum::<f64>() / (c.len() - 1) as f64
    }

    /// First logged step whose probe loss is at most `target`.
    pub fn steps_to_reach(&self, target: f64) -> Option<usize> {
        self.curve().into_iter().find(|c| c.1 <= target).map(|c| c.0)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,image_id,probe_loss,psnr,ssim,dt_ms")?;
        let i = &self.initial;
        writeln!(out, "0,,{:e},{},{},0", i.loss, i.psnr, i.ssim)?;
        for r in &self.reports {
            if let Some(p) = r.probe {
                writeln!(out, "{},{},{:e},{},{},{:.3}", r.step, r.image_id, p.loss, p.psnr, p.ssim, r.dt_ms)?;
            }
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Trains for the configured epochs (or step budget). Deterministic for a
/// fixed seed and worker count.
pub fn run_training(config: TrainConfig, scene: Scene, dataset: &Dataset, output: &TrainOutput) -> Result<TrainingRun> {
    let mut trainer = Trainer::new(config, scene, dataset)?;
    if let Some(dir) = &output.checkpoint_dir {
        create_dir(dir)?;
    }
    let initial = trainer.probe_metrics()?;
    let mut reports = Vec::new();
    let budget = trainer.config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..trainer.config.epochs {
        trainer.epoch = epoch;
        for t in trainer.epoch_order() {
            if trainer.step >= budget {
                break 'epochs;
            }
            let mut report = match trainer.train_step(t) {
                Ok(r) => r,
                Err(e) => {
                    if let (Error::NonFiniteLoss { .. }, Some(dir)) = (&e, &output.checkpoint_dir) {
                        trainer.scene.save(&dir.join(format!("nonfinite_step_{}.json", trainer.step)))?;
                    }
                    return Err(e);
                }
            };
            let last = trainer.step == budget;
            if report.step % trainer.config.log_every == 0 || last {
                report.probe = Some(trainer.probe_metrics()?);
            }
            reports.push(report);
        }
        if let Some(dir) = &output.checkpoint_dir {
            trainer.scene.save(&dir.join(format!("epoch_{:03}.json", epoch + 1)))?;
        }
    }
    if let Some(last) = reports.last_mut() {
        if last.probe.is_none() {
            last.probe = Some(trainer.probe_metrics()?);
        }
    }
    let run = TrainingRun {
        scene: trainer.scene,
        initial,
        reports,
    };
    if let Some(path) = &output.log {
        let mut buf = Vec::new();
        run.write_csv(&mut buf).expect("writing to memory");
        fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(run)
}
