//! Comparative runs on synthetic fixtures: Newton against GD, the secondary
//! target count ablation and the attribute order ablation.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::newton::Attribute;
use crate::synth::{synth_scene, CameraLayout, SynthConfig, SynthOutput};
use crate::trainer::{run_training, Optimizer, TrainConfig, TrainOutput, TrainingRun};

/// Probe-loss curve of one run, tagged for CSV output.
#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub experiment: String,
    pub seed: u64,
    pub variant: String,
    pub points: Vec<(usize, f64)>,
    /// Mean step time without probe evaluation.
    pub mean_step_ms: f64,
}

impl Curve {
    fn from_run(experiment: &str, seed: u64, variant: &str, run: &TrainingRun) -> Self {
        let n = run.reports.len().max(1) as f64;
        Self {
            experiment: experiment.into(),
            seed,
            variant: variant.into(),
            points: run.curve(),
            mean_step_ms: run.reports.iter().map(|r| r.dt_ms).sum::<f64>() / n,
        }
    }
}

/// Writes `experiment,seed,variant,step,probe_loss` rows.
pub fn write_curves<W: Write>(curves: &[Curve], mut out: W) -> std::io::Result<()> {
    writeln!(out, "experiment,seed,variant,step,probe_loss")?;
    for c in curves {
        for (step, loss) in &c.points {
            writeln!(out, "{},{},\"{}\",{},{:e}", c.experiment, c.seed, c.variant, step, loss)?;
        }
    }
    Ok(())
}

/// The 100-kernel, 8-view, 64×64 fixture.
pub fn standard_fixture(seed: u64) -> Result<SynthOutput> {
    synth_scene(&SynthConfig {
        seed,
        ..Default::default()
    })
}

/// 12 views evenly spaced on a horizontal ring.
pub fn ring_fixture(seed: u64) -> Result<SynthOutput> {
    synth_scene(&SynthConfig {
        seed,
        n_views: 12,
        layout: CameraLayout::Ring,
        ..Default::default()
    })
}

fn train(fixture: &SynthOutput, config: TrainConfig) -> Result<TrainingRun> {
    run_training(config, fixture.init.clone(), &fixture.dataset, &TrainOutput::default())
}

fn budget(base: &TrainConfig, optimizer: Optimizer, steps: usize, log_every: usize) -> TrainConfig {
    TrainConfig {
        optimizer,
        epochs: usize::MAX,
        max_steps: Some(steps),
        log_every,
        ..base.clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceResult {
    pub seed: u64,
    /// GD probe loss after its full budget.
    pub gd_target: f64,
    /// First Newton step at or below `gd_target`.
    pub newton_steps: Option<usize>,
    pub newton_final: f64,
    /// Mean Newton step time over mean GD step time.
    pub cost_ratio: f64,
    pub curves: Vec<Curve>,
}

/// Runs GD for `gd_steps` and Newton for `newton_steps` from the same start.
pub fn convergence(seed: u64, base: &TrainConfig, gd_steps: usize, newton_steps: usize) -> Result<ConvergenceResult> {
    let fx = standard_fixture(seed)?;
    let gd = train(&fx, budget(base, Optimizer::Gd, gd_steps, 10))?;
    let newton = train(&fx, budget(base, Optimizer::Newton, newton_steps, 1))?;
    let gd_curve = Curve::from_run("convergence", seed, "gd", &gd);
    let newton_curve = Curve::from_run("convergence", seed, "newton", &newton);
    let gd_target = gd.final_loss();
    Ok(ConvergenceResult {
        seed,
        gd_target,
        newton_steps: newton.steps_to_reach(gd_target),
        newton_final: newton.final_loss(),
        cost_ratio: newton_curve.mean_step_ms / gd_curve.mean_step_ms,
        curves: vec![gd_curve, newton_curve],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpikeResult {
    pub seed: u64,
    pub knn: usize,
    pub mean_spike: f64,
    pub final_loss: f64,
    pub curve: Curve,
}

/// Newton on the ring fixture with `knn` secondary targets, probing every step.
pub fn overshoot(seed: u64, base: &TrainConfig, knn: usize, steps: usize) -> Result<SpikeResult> {
    let fx = ring_fixture(seed)?;
    let run = train(
        &fx,
        TrainConfig {
            knn,
            ..budget(base, Optimizer::Newton, steps, 1)
        },
    )?;
    Ok(SpikeResult {
        seed,
        knn,
        mean_spike: run.mean_spike(),
        final_loss: run.final_loss(),
        curve: Curve::from_run("overshoot", seed, &format!("k{knn}"), &run),
    })
}

/// Short label such as `pos,rot,scale,opacity,color`.
pub fn order_label(order: &[Attribute]) -> String {
    order
        .iter()
        .map(|a| match a {
            Attribute::Position => "pos",
            Attribute::Rotation => "rot",
            Attribute::Scaling => "scale",
            Attribute::Opacity => "opacity",
            Attribute::Color => "color",
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// The orders compared by the ablation: default, colour first, and the
/// default with rotation and scaling swapped.
pub fn ablation_orders() -> [Vec<Attribute>; 3] {
    use Attribute::*;
    [
        vec![Position, Rotation, Scaling, Opacity, Color],
        vec![Color, Position, Rotation, Scaling, Opacity],
        vec![Position, Scaling, Rotation, Opacity, Color],
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderResult {
    pub seed: u64,
    pub order: String,
    pub final_loss: f64,
    pub curve: Curve,
}

/// Newton on the standard fixture with the given attribute order.
pub fn order_run(seed: u64, base: &TrainConfig, order: &[Attribute], steps: usize) -> Result<OrderResult> {
    let fx = standard_fixture(seed)?;
    let label = order_label(order);
    let run = train(
        &fx,
        TrainConfig {
            order: order.to_vec(),
            ..budget(base, Optimizer::Newton, steps, steps.max(1))
        },
    )?;
    Ok(OrderResult {
        seed,
        final_loss: run.final_loss(),
        curve: Curve::from_run("order", seed, &label, &run),
        order: label,
    })
}
