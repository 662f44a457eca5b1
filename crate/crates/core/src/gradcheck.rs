//! Finite-difference verification of the end-to-end controller gradient.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::agent::AgentDesign;
use crate::error::{Error, Result};
use crate::objectives::{sample_goals, GoalSchedule, ScheduleShape};
use crate::trainer::{episode_gradient, episode_value, thread_pool, Backend, Runner, TrainConfig};

/// Entries whose gradient is below this fraction of the largest entry are
/// compared against that floor instead of their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub steps: usize,
    /// Central-difference half step.
    pub eps: f64,
    /// Seeds the goal and the controller.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { steps: 50, eps: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub backend: Backend,
    pub steps: usize,
    pub num_params: usize,
    pub loss: f64,
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    pub worst_param: usize,
    /// ||analytic - numeric|| / ||numeric||.
    pub norm_rel_error: f64,
    pub elapsed: Duration,
}

impl GradCheckReport {
    /// Acceptance threshold for the backend.
    pub fn threshold(&self) -> f64 {
        match self.backend {
            Backend::MassSpring => 1e-4,
            Backend::Mpm => 1e-3,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold()
    }
}

/// Single-period schedule covering `steps` steps.
pub fn check_schedule(cfg: &TrainConfig, steps: usize, seed: u64) -> Result<GoalSchedule> {
    let shape = ScheduleShape {
        total_steps: steps,
        period: steps,
        velocity_window: (steps / 2).max(1),
    };
    sample_goals(seed, &cfg.goal_bounds, shape)
}

/// Per-entry relative errors, with entries below `RELATIVE_FLOOR` times the
/// largest numeric entry measured against that floor.
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
    let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

/// Compares the backpropagated gradient of the training loss against central
/// finite differences on every controller parameter.
pub fn grad_check(cfg: &TrainConfig, design: &AgentDesign, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.steps == 0 || !(opts.eps > 0.0) {
        return Err(Error::Config("grad-check needs steps >= 1 and eps > 0".into()));
    }
    let start = Instant::now();
    let mut cfg = cfg.clone();
    cfg.seed = opts.seed;
    let schedule = check_schedule(&cfg, opts.steps, opts.seed)?;
    cfg.schedule = schedule.shape;
    let runner = Runner::new(&cfg, design)?;
    let params = cfg.init_params(design);
    let exact = episode_gradient(&params, &schedule, &runner)?;
    let flat = params.to_flat();
    let numeric = thread_pool().install(|| {
        (0..flat.len())
            .into_par_iter()
            .map(|i| {
                let eval = |delta: f64| -> Result<f64> {
                    let mut p = params.clone();
                    let mut q = flat.clone();
                    q[i] += delta;
                    p.set_flat(&q)?;
                    Ok(episode_value(&p, &schedule, &runner, &runner.train_loss)?.total)
                };
                Ok((eval(opts.eps)? - eval(-opts.eps)?) / (2.0 * opts.eps))
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let errors = relative_errors(&exact.grad, &numeric);
    let (worst_param, max_rel_error) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let diff: Vec<f64> = exact.grad.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let numeric_norm = crate::trainer::l2(&numeric);
    Ok(GradCheckReport {
        backend: cfg.backend,
        steps: opts.steps,
        num_params: flat.len(),
        loss: exact.loss.total,
        max_rel_error,
        worst_param,
        norm_rel_error: crate::trainer::l2(&diff) / numeric_norm.max(f64::MIN_POSITIVE),
        elapsed: start.elapsed(),
    })
}
