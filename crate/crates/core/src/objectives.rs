//! Goal schedules and the locomotion losses with their adjoints.
//!
//! States are indexed `0..=T` (the initial state plus one per step) and
//! actuations `0..T`. Period `n` covers states `nP..=(n+1)P`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Vec2;
use crate::error::{Error, Result};

/// Targets held constant during one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    /// Target horizontal velocity.
    #[serde(default)]
    pub g_v: Option<f64>,
    /// Target height of the lowest point at the top of a jump (absolute, m).
    #[serde(default)]
    pub g_h: Option<f64>,
    /// 1 to crawl (keep the highest point low), 0 otherwise.
    #[serde(default)]
    pub g_c: u8,
}

impl Goal {
    pub fn new(g_v: f64, g_h: f64) -> Self {
        Self {
            g_v: Some(g_v),
            g_h: Some(g_h),
            g_c: 0,
        }
    }
}

/// Episode length, goal period and velocity window, in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleShape {
    pub total_steps: usize,
    pub period: usize,
    pub velocity_window: usize,
}

impl Default for ScheduleShape {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            period: 250,
            velocity_window: 100,
        }
    }
}

impl ScheduleShape {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 || self.total_steps == 0 || self.total_steps % self.period != 0 {
            return Err(Error::Config(format!(
                "period {} must divide total_steps {}",
                self.period, self.total_steps
            )));
        }
        if self.velocity_window == 0 || self.velocity_window >= self.period {
            return Err(Error::Config(format!(
                "velocity_window {} must lie in [1, period {})",
                self.velocity_window, self.period
            )));
        }
        Ok(())
    }

    pub fn num_periods(&self) -> usize {
        self.total_steps / self.period
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSchedule {
    #[serde(flatten)]
    pub shape: ScheduleShape,
    pub goals: Vec<Goal>,
}

impl GoalSchedule {
    pub fn new(shape: ScheduleShape, goals: Vec<Goal>) -> Result<Self> {
        shape.validate()?;
        if goals.len() != shape.num_periods() {
            return Err(Error::Config(format!(
                "schedule has {} goals for {} periods",
                goals.len(),
                shape.num_periods()
            )));
        }
        if let Some(g) = goals.iter().find(|g| g.g_c > 1) {
            return Err(Error::Config(format!("g_c must be 0 or 1, got {}", g.g_c)));
        }
        Ok(Self { shape, goals })
    }

    pub fn constant(shape: ScheduleShape, goal: Goal) -> Result<Self> {
        Self::new(shape, vec![goal; shape.num_periods().max(1)])
    }

    /// Goal active when the controller acts at step `t`.
    pub fn goal_at(&self, t: usize) -> &Goal {
        let n = (t / self.shape.period).min(self.goals.len() - 1);
        &self.goals[n]
    }
}

/// Sampling ranges for training goals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalBounds {
    pub velocity: [f64; 2],
    /// `None` disables jumping goals.
    pub height: Option<[f64; 2]>,
    /// Whether crawling goals are sampled.
    pub crawl: bool,
}

impl Default for GoalBounds {
    fn default() -> Self {
        Self {
            velocity: [-0.08, 0.08],
            height: Some([0.1, 0.2]),
            crawl: false,
        }
    }
}

impl GoalBounds {
    pub fn validate(&self) -> Result<()> {
        let ranges = std::iter::once(("velocity", self.velocity))
            .chain(self.height.map(|h| ("height", h)));
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} bounds [{lo}, {hi}] are invalid")));
            }
        }
        Ok(())
    }

    /// Clamps a goal into the bounds. A height target is dropped when jumping
    /// is disabled.
    pub fn clamp(&self, goal: &Goal) -> Goal {
        let [vl, vh] = self.velocity;
        Goal {
            g_v: goal.g_v.map(|v| v.clamp(vl, vh)),
            g_h: match (goal.g_h, self.height) {
                (Some(h), Some([lo, hi])) => Some(h.clamp(lo, hi)),
                _ => None,
            },
            g_c: if self.crawl { goal.g_c.min(1) } else { 0 },
        }
    }

    /// Largest target speed, used as the default actuation normalizer.
    pub fn max_speed(&self) -> f64 {
        self.velocity[0].abs().max(self.velocity[1].abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_h: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    /// Actuation normalizer: the target mean |actuation| is `mu * |g_v|`.
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_h: 1.0,
            lambda_c: 0.1,
            lambda_a: 0.01,
            mu: 1.0 / 0.08,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_v, self.lambda_h, self.lambda_c, self.lambda_a, self.mu];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// How the running loss measures velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityLoss {
    /// Velocity averaged over the trailing window, evaluated after a delay.
    #[default]
    Windowed,
    /// Velocity from consecutive positions at every step.
    Naive,
}

/// Time unit of velocities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityUnit {
    #[default]
    MetersPerSecond,
    MetersPerStep,
}

impl VelocityUnit {
    /// Seconds represented by one step in velocity estimates.
    pub fn step_duration(self, dt: f64) -> f64 {
        match self {
            VelocityUnit::MetersPerSecond => dt,
            VelocityUnit::MetersPerStep => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_h: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Task loss: the weighted sum without the actuation regularizer.
    pub fn task(&self, w: &LossWeights) -> f64 {
        w.lambda_v * self.l_v + w.lambda_h * self.l_h + w.lambda_c * self.l_c
    }

    pub fn is_finite(&self) -> bool {
        [self.l_v, self.l_h, self.l_c, self.l_a, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-state scalar histories an episode loss depends on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub com: Vec<Vec2>,
    /// (node index, height) of the lowest node of each state.
    pub lowest: Vec<(usize, f64)>,
    /// (node index, height) of the highest node of each state.
    pub highest: Vec<(usize, f64)>,
    pub actuation: Vec<Vec<f64>>,
}

/// Loss gradient with respect to each entry of a [`Trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryAdjoint {
    pub com: Vec<Vec2>,
    pub lowest: Vec<f64>,
    pub highest: Vec<f64>,
    pub actuation: Vec<Vec<f64>>,
}

/// Velocity estimate over the trailing window ending at state `t`.
pub fn estimate_velocity(com: &[Vec2], t: usize, window: usize, step_duration: f64) -> Result<Vec2> {
    if t < window || window == 0 {
        return Err(Error::OutOfWindow { t, window });
    }
    if t >= com.len() {
        return Err(Error::Contract(format!("t = {t} beyond history of {} states", com.len())));
    }
    Ok((com[t] - com[t - window]) / (window as f64 * step_duration))
}

fn period_range(history_len: usize, n: usize, period: usize) -> Result<std::ops::RangeInclusive<usize>> {
    let required = (n + 1) * period + 1;
    if history_len < required {
        return Err(Error::IncompletePeriod {
            period: n,
            available: history_len,
            required,
        });
    }
    Ok(n * period..=(n + 1) * period)
}

/// Highest lowest-point height over period `n`, and the earliest state achieving it.
pub fn jump_argmax(lowest: &[f64], n: usize, period: usize) -> Result<(usize, f64)> {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for s in period_range(lowest.len(), n, period)? {
        if lowest[s] > best.1 {
            best = (s, lowest[s]);
        }
    }
    Ok(best)
}

pub fn jump_height(lowest: &[f64], n: usize, period: usize) -> Result<f64> {
    Ok(jump_argmax(lowest, n, period)?.1)
}

/// Loss settings shared by training and validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub velocity_loss: VelocityLoss,
    /// Seconds per step used in velocity estimates.
    pub step_duration: f64,
}

fn check_tape(traj: &Trajectory, schedule: &GoalSchedule) -> Result<()> {
    let t = schedule.shape.total_steps;
    let ok = traj.com.len() == t + 1
        && traj.lowest.len() == t + 1
        && traj.highest.len() == t + 1
        && traj.actuation.len() == t;
    if !ok {
        return Err(Error::Contract(format!(
            "tape has {} states and {} actuations; schedule needs {} and {}",
            traj.com.len(),
            traj.actuation.len(),
            t + 1,
            t
        )));
    }
    Ok(())
}

pub fn episode_loss(traj: &Trajectory, schedule: &GoalSchedule, spec: &LossSpec) -> Result<LossBreakdown> {
    evaluate(traj, schedule, spec, None)
}

pub fn episode_loss_adjoint(
    traj: &Trajectory,
    schedule: &GoalSchedule,
    spec: &LossSpec,
) -> Result<(LossBreakdown, TrajectoryAdjoint)> {
    let mut adj = TrajectoryAdjoint {
        com: vec![Vec2::zeros(); traj.com.len()],
        lowest: vec![0.0; traj.lowest.len()],
        highest: vec![0.0; traj.highest.len()],
        actuation: traj.actuation.iter().map(|a| vec![0.0; a.len()]).collect(),
    };
    let loss = evaluate(traj, schedule, spec, Some(&mut adj))?;
    Ok((loss, adj))
}

fn evaluate(
    traj: &Trajectory,
    schedule: &GoalSchedule,
    spec: &LossSpec,
    mut adj: Option<&mut TrajectoryAdjoint>,
) -> Result<LossBreakdown> {
    check_tape(traj, schedule)?;
    let w = &spec.weights;
    let p = schedule.shape.period;
    let tau = spec.step_duration;
    let lowest: Vec<f64> = traj.lowest.iter().map(|l| l.1).collect();
    let mut out = LossBreakdown::default();

    for (n, goal) in schedule.goals.iter().enumerate() {
        let start = n * p;
        if let Some(gv) = goal.g_v {
            let (first, lag) = match spec.velocity_loss {
                VelocityLoss::Windowed => (schedule.shape.velocity_window, schedule.shape.velocity_window),
                VelocityLoss::Naive => (1, 1),
            };
            let scale = 1.0 / (lag as f64 * tau);
            for t in first..=p {
                let s = start + t;
                let r = (traj.com[s].x - traj.com[s - lag].x) * scale - gv;
                out.l_v += r * r;
                if let Some(adj) = adj.as_deref_mut() {
                    let g = 2.0 * w.lambda_v * r * scale;
                    adj.com[s].x += g;
                    adj.com[s - lag].x -= g;
                }
            }
        }
        if let Some(gh) = goal.g_h {
            let (s, h) = jump_argmax(&lowest, n, p)?;
            let r = h - gh;
            out.l_h += r * r;
            if let Some(adj) = adj.as_deref_mut() {
                adj.lowest[s] += 2.0 * w.lambda_h * r;
            }
        }
        if goal.g_c != 0 {
            let gc = goal.g_c as f64;
            for s in start..=start + p {
                out.l_c += gc * traj.highest[s].1;
                if let Some(adj) = adj.as_deref_mut() {
                    adj.highest[s] += w.lambda_c * gc;
                }
            }
        }
        let target = w.mu * goal.g_v.unwrap_or(0.0).abs();
        for s in start..start + p {
            let a = &traj.actuation[s];
            let m = a.len() as f64;
            let mean = a.iter().map(|v| v.abs()).sum::<f64>() / m;
            let r = mean - target;
            out.l_a += r * r;
            if let Some(adj) = adj.as_deref_mut() {
                let g = 2.0 * w.lambda_a * r / m;
                for (ga, v) in adj.actuation[s].iter_mut().zip(a) {
                    *ga += g * sign(*v);
                }
            }
        }
    }
    out.total = w.lambda_v * out.l_v + w.lambda_h * out.l_h + w.lambda_c * out.l_c + w.lambda_a * out.l_a;
    if !out.is_finite() {
        return Err(Error::Numeric { layer: "loss" });
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Per-period goals drawn i.i.d. uniformly within `bounds`.
pub fn sample_goals(seed: u64, bounds: &GoalBounds, shape: ScheduleShape) -> Result<GoalSchedule> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goals = (0..shape.num_periods())
        .map(|_| Goal {
            g_v: Some(uniform(&mut rng, bounds.velocity)),
            g_h: bounds.height.map(|h| uniform(&mut rng, h)),
            g_c: if bounds.crawl { rng.random_range(0..=1) } else { 0 },
        })
        .collect();
    GoalSchedule::new(shape, goals)
}

fn linspace([lo, hi]: [f64; 2], n: usize) -> Vec<f64> {
    if lo == hi || n < 2 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            lo * (1.0 - f) + hi * f
        })
        .collect()
}

pub const VALIDATION_VELOCITIES: usize = 9;
pub const VALIDATION_HEIGHTS: usize = 3;

/// Fixed validation set: constant-goal schedules over the cross product of
/// evenly spaced velocities and heights (and crawl on/off when enabled).
pub fn validation_goal_grid(bounds: &GoalBounds, shape: ScheduleShape) -> Result<Vec<GoalSchedule>> {
    bounds.validate()?;
    let heights: Vec<Option<f64>> = match bounds.height {
        Some(h) => linspace(h, VALIDATION_HEIGHTS).into_iter().map(Some).collect(),
        None => vec![None],
    };
    let crawl: &[u8] = if bounds.crawl { &[0, 1] } else { &[0] };
    let mut out = Vec::new();
    for &g_c in crawl {
        for &g_h in &heights {
            for g_v in linspace(bounds.velocity, VALIDATION_VELOCITIES) {
                out.push(GoalSchedule::constant(shape, Goal { g_v: Some(g_v), g_h, g_c })?);
            }
        }
    }
    Ok(out)
}
