//! Episode rollouts, backpropagation through time, validation and the
//! batched training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{highest_node, lowest_node, center_of_mass, AgentDesign, SimState};
use crate::checkpoint::Checkpoint;
use crate::controller::{
    assemble_features, feature_adjoint, Activation, ControllerParams, FeatureSpec, ForwardCache,
    DEFAULT_HIDDEN_DIM,
};
use crate::error::{Error, Result};
use crate::mass_spring::MassSpringConfig;
use crate::mpm::MpmConfig;
use crate::objectives::{
    episode_loss, episode_loss_adjoint, sample_goals, validation_goal_grid, Goal, GoalBounds,
    GoalSchedule, LossBreakdown, LossSpec, LossWeights, ScheduleShape, Trajectory,
    TrajectoryAdjoint, VelocityLoss, VelocityUnit,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::sim::{Simulator, StateAdjoint, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    MassSpring,
    Mpm,
}

/// Switches for the ablation studies; all on in the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    pub periodic_signal_on: bool,
    pub state_vector_on: bool,
    pub targets_on: bool,
    pub tailored_loss_on: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            periodic_signal_on: true,
            state_vector_on: true,
            targets_on: true,
            tailored_loss_on: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backend: Backend,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub goal_bounds: GoalBounds,
    pub schedule: ScheduleShape,
    pub loss_weights: LossWeights,
    pub velocity_unit: VelocityUnit,
    /// Validate and checkpoint every this many iterations; 0 disables both
    /// (a checkpoint is still written at exit).
    pub validation_every: usize,
    pub mass_spring: MassSpringConfig,
    pub mpm: MpmConfig,
    pub features: FeatureSpec,
    pub hidden_dim: usize,
    pub activation_hidden: Activation,
    pub activation_output: Activation,
    pub omega0: f64,
    pub ablation: AblationSwitches,
    /// Rescale the batch gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    /// Give every episode of a batch the same goal schedule.
    pub shared_batch_goals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backend: Backend::MassSpring,
            batch_size: 32,
            iterations: 10_000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            goal_bounds: GoalBounds::default(),
            schedule: ScheduleShape::default(),
            loss_weights: LossWeights::default(),
            velocity_unit: VelocityUnit::default(),
            validation_every: 100,
            mass_spring: MassSpringConfig::default(),
            mpm: MpmConfig::default(),
            features: FeatureSpec::default(),
            hidden_dim: DEFAULT_HIDDEN_DIM,
            activation_hidden: Activation::Sin,
            activation_output: Activation::Sin,
            omega0: 1.0,
            ablation: AblationSwitches::default(),
            grad_clip: None,
            shared_batch_goals: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::Config(format!("omega0 must be positive, got {}", self.omega0)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.optimizer.validate()?;
        self.goal_bounds.validate()?;
        self.schedule.validate()?;
        self.loss_weights.validate()?;
        self.effective_features().validate()?;
        match self.backend {
            Backend::MassSpring => self.mass_spring.validate(),
            Backend::Mpm => self.mpm.validate(),
        }
    }

    pub fn simulator(&self) -> Simulator {
        match self.backend {
            Backend::MassSpring => Simulator::MassSpring(self.mass_spring.clone()),
            Backend::Mpm => Simulator::Mpm(self.mpm.clone()),
        }
    }

    /// Feature spec after applying the ablation switches.
    pub fn effective_features(&self) -> FeatureSpec {
        let mut spec = self.features.clone();
        if !self.ablation.periodic_signal_on {
            spec.n_periodic = 0;
        }
        if !self.ablation.state_vector_on {
            spec.include_positions = false;
            spec.include_velocities = false;
        }
        if !self.ablation.targets_on {
            spec.target_channels.clear();
        }
        spec
    }

    fn step_duration(&self) -> f64 {
        self.velocity_unit.step_duration(self.simulator().dt())
    }

    /// Loss optimized during training.
    pub fn training_loss(&self) -> LossSpec {
        LossSpec {
            weights: self.loss_weights,
            velocity_loss: if self.ablation.tailored_loss_on {
                VelocityLoss::Windowed
            } else {
                VelocityLoss::Naive
            },
            step_duration: self.step_duration(),
        }
    }

    /// Loss used for validation; independent of the ablation switches.
    pub fn validation_loss(&self) -> LossSpec {
        LossSpec {
            weights: self.loss_weights,
            velocity_loss: VelocityLoss::Windowed,
            step_duration: self.step_duration(),
        }
    }

    /// The iteration-0 controller.
    pub fn init_params(&self, design: &AgentDesign) -> ControllerParams {
        ControllerParams::init(
            self.effective_features().input_dim(design),
            self.hidden_dim,
            design.num_actuators(),
            (self.activation_hidden, self.activation_output),
            self.omega0,
            self.seed,
        )
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Everything needed to simulate and score one episode.
#[derive(Debug, Clone)]
pub struct Runner {
    pub design: AgentDesign,
    pub sim: Simulator,
    pub features: FeatureSpec,
    pub train_loss: LossSpec,
    pub validation_loss: LossSpec,
}

impl Runner {
    pub fn new(cfg: &TrainConfig, design: &AgentDesign) -> Result<Self> {
        cfg.validate()?;
        let sim = cfg.simulator();
        sim.validate(design)?;
        Ok(Self {
            design: design.clone(),
            sim,
            features: cfg.effective_features(),
            train_loss: cfg.training_loss(),
            validation_loss: cfg.validation_loss(),
        })
    }

    pub fn check_params(&self, params: &ControllerParams) -> Result<()> {
        params.check_shapes()?;
        let input = self.features.input_dim(&self.design);
        if params.input_dim != input || params.output_dim != self.design.num_actuators() {
            return Err(Error::Contract(format!(
                "controller is {}->{}, design and features need {}->{}",
                params.input_dim,
                params.output_dim,
                input,
                self.design.num_actuators()
            )));
        }
        Ok(())
    }

    /// Controller output for `state` under `goal`.
    pub fn act(
        &self,
        params: &ControllerParams,
        state: &SimState,
        goal: &Goal,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let f = assemble_features(state, state.t, goal, &self.features, &self.design)?;
        params.forward(&f)
    }
}

/// Recorded forward pass of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeTape {
    pub records: Vec<StepRecord>,
    pub caches: Vec<ForwardCache>,
    pub trajectory: Trajectory,
    pub final_state: SimState,
}

fn observe(traj: &mut Trajectory, state: &SimState, design: &AgentDesign) {
    traj.com.push(center_of_mass(state, design));
    traj.lowest.push(lowest_node(state));
    traj.highest.push(highest_node(state));
}

/// Runs the closed loop for the full schedule.
pub fn rollout(params: &ControllerParams, schedule: &GoalSchedule, runner: &Runner) -> Result<EpisodeTape> {
    runner.check_params(params)?;
    let steps = schedule.shape.total_steps;
    let mut state = SimState::at_rest(&runner.design);
    let mut traj = Trajectory::default();
    let mut records = Vec::with_capacity(steps);
    let mut caches = Vec::with_capacity(steps);
    observe(&mut traj, &state, &runner.design);
    for t in 0..steps {
        let goal = schedule.goal_at(t);
        let wrap = |e: Error| Error::Rollout {
            goal: Some(*goal),
            source: Box::new(e),
        };
        let (act, cache) = runner.act(params, &state, goal).map_err(wrap)?;
        let (next, record) = runner.sim.step(&state, &act, &runner.design).map_err(wrap)?;
        traj.actuation.push(act);
        caches.push(cache);
        records.push(record);
        state = next;
        observe(&mut traj, &state, &runner.design);
    }
    Ok(EpisodeTape {
        records,
        caches,
        trajectory: traj,
        final_state: state,
    })
}

fn add_loss_adjoint(
    s: usize,
    traj: &Trajectory,
    adj: &TrajectoryAdjoint,
    design: &AgentDesign,
    grad: &mut StateAdjoint,
) {
    let g_com = adj.com[s];
    if g_com != crate::agent::Vec2::zeros() {
        let inv = 1.0 / design.total_mass();
        for (g, m) in grad.x.iter_mut().zip(&design.node_mass) {
            *g += g_com * (m * inv);
        }
    }
    grad.x[traj.lowest[s].0].y += adj.lowest[s];
    grad.x[traj.highest[s].0].y += adj.highest[s];
}

/// Gradient of one episode's training loss.
#[derive(Debug, Clone)]
pub struct EpisodeGradient {
    pub grad: Vec<f64>,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Reverse sweep over a tape: loss adjoints chained through the simulator and
/// controller adjoints back to the first step.
pub fn backprop(
    tape: &EpisodeTape,
    schedule: &GoalSchedule,
    runner: &Runner,
    loss: &LossSpec,
    params: &ControllerParams,
) -> Result<EpisodeGradient> {
    let (breakdown, adj) = episode_loss_adjoint(&tape.trajectory, schedule, loss)?;
    let design = &runner.design;
    let mut grad = vec![0.0; params.num_params()];
    let steps = tape.records.len();
    let mut g_state = StateAdjoint::zeros_like(&tape.final_state);
    add_loss_adjoint(steps, &tape.trajectory, &adj, design, &mut g_state);
    for t in (0..steps).rev() {
        let (mut g_prev, mut g_act) = runner.sim.step_adjoint(&tape.records[t], &g_state, design)?;
        for (g, extra) in g_act.iter_mut().zip(&adj.actuation[t]) {
            *g += extra;
        }
        let g_feat = params.backward_into(&tape.caches[t], &g_act, &mut grad)?;
        feature_adjoint(&g_feat, &runner.features, design, &mut g_prev);
        add_loss_adjoint(t, &tape.trajectory, &adj, design, &mut g_prev);
        if !g_prev.is_finite() || !g_feat.iter().all(|g| g.is_finite()) {
            return Err(Error::GradientExplosion { step: t });
        }
        g_state = g_prev;
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::GradientExplosion { step: 0 });
    }
    let grad_norm = l2(&grad);
    Ok(EpisodeGradient {
        grad,
        loss: breakdown,
        grad_norm,
    })
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rollout followed by backprop of the training loss.
pub fn episode_gradient(
    params: &ControllerParams,
    schedule: &GoalSchedule,
    runner: &Runner,
) -> Result<EpisodeGradient> {
    let tape = rollout(params, schedule, runner)?;
    backprop(&tape, schedule, runner, &runner.train_loss, params).map_err(|e| Error::Rollout {
        goal: schedule.goals.first().copied(),
        source: Box::new(e),
    })
}

/// Training loss of one episode without gradients.
pub fn episode_value(params: &ControllerParams, schedule: &GoalSchedule, runner: &Runner, loss: &LossSpec) -> Result<LossBreakdown> {
    let tape = rollout(params, schedule, runner)?;
    episode_loss(&tape.trajectory, schedule, loss)
}

/// Counter-based seed mixing (splitmix64 finalizer).
pub fn sub_seed(seed: u64, iteration: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ iteration) ^ index)
}

/// Validation losses averaged over the goal grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationLosses {
    /// Weighted running + jumping + crawling loss.
    pub task: f64,
    /// Unweighted running loss.
    pub run: f64,
    /// Unweighted jumping loss.
    pub jump: f64,
}

impl ValidationLosses {
    /// Ratio to a reference; a zero reference maps to 1.
    pub fn normalized_by(&self, reference: &ValidationLosses) -> ValidationLosses {
        let ratio = |a: f64, b: f64| if b == 0.0 { 1.0 } else { a / b };
        ValidationLosses {
            task: ratio(self.task, reference.task),
            run: ratio(self.run, reference.run),
            jump: ratio(self.jump, reference.jump),
        }
    }
}

/// Unnormalized validation losses of `params`.
pub fn raw_validation(
    params: &ControllerParams,
    cfg: &TrainConfig,
    runner: &Runner,
    pool: &rayon::ThreadPool,
) -> Result<ValidationLosses> {
    let grid = validation_goal_grid(&cfg.goal_bounds, cfg.schedule)?;
    let loss = runner.validation_loss;
    let results: Vec<Result<LossBreakdown>> = pool.install(|| {
        grid.par_iter()
            .map(|s| episode_value(params, s, runner, &loss))
            .collect()
    });
    let mut sum = ValidationLosses { task: 0.0, run: 0.0, jump: 0.0 };
    for r in results {
        let b = r?;
        sum.task += b.task(&loss.weights);
        sum.run += b.l_v;
        sum.jump += b.l_h;
    }
    let n = grid.len() as f64;
    Ok(ValidationLosses {
        task: sum.task / n,
        run: sum.run / n,
        jump: sum.jump / n,
    })
}

/// Validation losses normalized by the iteration-0 controller of `cfg`.
pub fn validate(params: &ControllerParams, cfg: &TrainConfig, design: &AgentDesign) -> Result<ValidationLosses> {
    let runner = Runner::new(cfg, design)?;
    let pool = thread_pool();
    let reference = raw_validation(&cfg.init_params(design), cfg, &runner, &pool)?;
    Ok(raw_validation(params, cfg, &runner, &pool)?.normalized_by(&reference))
}

/// Worker pool sized by `DIFFLOCO_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("DIFFLOCO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "iteration,L_v,L_h,L_c,L_a,total,grad_norm,wall_ms";

    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}",
            self.iteration,
            self.loss.l_v,
            self.loss.l_h,
            self.loss.l_c,
            self.loss.l_a,
            self.loss.total,
            self.grad_norm,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub normalized: ValidationLosses,
    pub raw: ValidationLosses,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ControllerParams,
    pub log: Vec<LogRow>,
    pub validations: Vec<ValidationRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub reference: Option<ValidationLosses>,
}

impl TrainOutcome {
    pub fn final_validation(&self) -> Option<&ValidationRecord> {
        self.validations.last()
    }
}

/// Training stopped early; `partial` holds everything up to the last good iteration.
#[derive(Debug, thiserror::Error)]
#[error("training stopped after {iterations} iterations: {error}")]
pub struct TrainError {
    pub iterations: usize,
    #[source]
    pub error: Error,
    pub partial: Option<Box<TrainOutcome>>,
}

impl From<Error> for TrainError {
    fn from(error: Error) -> Self {
        TrainError {
            iterations: 0,
            error,
            partial: None,
        }
    }
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
    norms: BufWriter<File>,
    validation: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            Ok(w)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            log: open("train_log.csv", LogRow::HEADER)?,
            norms: open("grad_norms.csv", "iteration,grad_norm,log10_grad_norm")?,
            validation: open(
                "validation.csv",
                "iteration,task,run,jump,raw_task,raw_run,raw_jump",
            )?,
        })
    }

    fn row(&mut self, row: &LogRow) -> Result<()> {
        let io = |e| Error::io(&self.dir, e);
        writeln!(self.log, "{}", row.csv()).map_err(io)?;
        writeln!(
            self.norms,
            "{},{:e},{:.6}",
            row.iteration,
            row.grad_norm,
            row.grad_norm.log10()
        )
        .map_err(io)?;
        self.log.flush().map_err(io)?;
        self.norms.flush().map_err(io)
    }

    fn validation(&mut self, v: &ValidationRecord) -> Result<()> {
        let io = |e| Error::io(&self.dir, e);
        writeln!(
            self.validation,
            "{},{:.6},{:.6},{:.6},{:e},{:e},{:e}",
            v.iteration,
            v.normalized.task,
            v.normalized.run,
            v.normalized.jump,
            v.raw.task,
            v.raw.run,
            v.raw.jump
        )
        .map_err(io)?;
        self.validation.flush().map_err(io)
    }

    fn checkpoint(
        &self,
        params: &ControllerParams,
        cfg: &TrainConfig,
        design: &AgentDesign,
        iteration: usize,
    ) -> Result<PathBuf> {
        let path = self.dir.join(format!("checkpoint_{iteration:06}.json"));
        Checkpoint::new(params, cfg, design, iteration).save(&path)?;
        Ok(path)
    }
}

/// Trains a controller for `design`. With `out_dir`, writes the training log,
/// gradient norms, validation table and checkpoints there.
pub fn train(cfg: &TrainConfig, design: &AgentDesign, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let runner = Runner::new(cfg, design)?;
    let pool = thread_pool();
    let mut outputs = out_dir.map(Outputs::create).transpose()?;
    let mut params = cfg.init_params(design);
    let mut flat = params.to_flat();
    let mut optimizer = Optimizer::new(cfg.optimizer, flat.len());
    let mut outcome = TrainOutcome {
        params: params.clone(),
        log: Vec::new(),
        validations: Vec::new(),
        checkpoints: Vec::new(),
        reference: None,
    };
    let mut last_checkpoint = None;

    let fail = |mut outcome: TrainOutcome,
                outputs: &Option<Outputs>,
                params: &ControllerParams,
                iteration: usize,
                error: Error| {
        if let Some(out) = outputs {
            if let Ok(path) = out.checkpoint(params, cfg, design, iteration) {
                outcome.checkpoints.push(path);
            }
        }
        outcome.params = params.clone();
        log::error!("training aborted at iteration {iteration}: {error}");
        TrainError {
            iterations: iteration,
            error,
            partial: Some(Box::new(outcome)),
        }
    };

    for it in 0..cfg.iterations {
        let start = Instant::now();
        let schedules = (0..cfg.batch_size)
            .map(|b| {
                let index = if cfg.shared_batch_goals { 0 } else { b as u64 };
                sample_goals(sub_seed(cfg.seed, it as u64, index), &cfg.goal_bounds, cfg.schedule)
            })
            .collect::<Result<Vec<_>>>()?;
        let results: Vec<Result<EpisodeGradient>> = pool.install(|| {
            schedules
                .par_iter()
                .map(|s| episode_gradient(&params, s, &runner))
                .collect()
        });
        let mut grad = vec![0.0; flat.len()];
        let mut loss = LossBreakdown::default();
        for r in results {
            match r {
                Ok(e) => {
                    for (g, x) in grad.iter_mut().zip(&e.grad) {
                        *g += x;
                    }
                    loss.l_v += e.loss.l_v;
                    loss.l_h += e.loss.l_h;
                    loss.l_c += e.loss.l_c;
                    loss.l_a += e.loss.l_a;
                    loss.total += e.loss.total;
                }
                Err(e) => return Err(fail(outcome, &outputs, &params, it, e)),
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        for v in [&mut loss.l_v, &mut loss.l_h, &mut loss.l_c, &mut loss.l_a, &mut loss.total] {
            *v *= inv;
        }
        let grad_norm = l2(&grad);
        if !grad_norm.is_finite() {
            return Err(fail(outcome, &outputs, &params, it, Error::GradientExplosion { step: 0 }));
        }
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let mut next = flat.clone();
        if let Err(e) = optimizer.step(&mut next, &grad) {
            return Err(fail(outcome, &outputs, &params, it, e));
        }
        flat = next;
        params.set_flat(&flat).map_err(TrainError::from)?;

        let row = LogRow {
            iteration: it,
            loss,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "iter {it}: total {:.5} (v {:.5} h {:.5} c {:.5} a {:.5}) |g| {:.3e} {:.0} ms",
            loss.total,
            loss.l_v,
            loss.l_h,
            loss.l_c,
            loss.l_a,
            grad_norm,
            row.wall_ms
        );
        if let Some(out) = outputs.as_mut() {
            out.row(&row)?;
        }
        outcome.log.push(row);

        let done = it + 1;
        if cfg.validation_every > 0 && (done % cfg.validation_every == 0 || done == cfg.iterations) {
            let reference = match outcome.reference {
                Some(r) => r,
                None => {
                    let r = raw_validation(&cfg.init_params(design), cfg, &runner, &pool)?;
                    outcome.reference = Some(r);
                    r
                }
            };
            let raw = match raw_validation(&params, cfg, &runner, &pool) {
                Ok(r) => r,
                Err(e) => return Err(fail(outcome, &outputs, &params, done, e)),
            };
            let record = ValidationRecord {
                iteration: done,
                normalized: raw.normalized_by(&reference),
                raw,
            };
            log::info!(
                "validation at {done}: task {:.4} run {:.4} jump {:.4}",
                record.normalized.task,
                record.normalized.run,
                record.normalized.jump
            );
            if let Some(out) = outputs.as_mut() {
                out.validation(&record)?;
                outcome.checkpoints.push(out.checkpoint(&params, cfg, design, done)?);
                last_checkpoint = Some(done);
            }
            outcome.validations.push(record);
        }
    }
    if let Some(out) = outputs.as_ref() {
        if last_checkpoint != Some(cfg.iterations) {
            outcome.checkpoints.push(out.checkpoint(&params, cfg, design, cfg.iterations)?);
        }
    }
    outcome.params = params;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{DesignKind, Spring, Vec2};

    fn square() -> AgentDesign {
        let p = |x: f64, y: f64| Vec2::new(x * 0.1, 0.1 + y * 0.1);
        let springs = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 3)]
            .iter()
            .map(|&(a, b)| Spring { a, b, stiffness: 1e4, actuated: true })
            .collect();
        AgentDesign::new(
            "square",
            DesignKind::MassSpring,
            vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0)],
            vec![1.0; 4],
            springs,
            None,
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            iterations: 2,
            hidden_dim: 8,
            schedule: ScheduleShape { total_steps: 40, period: 20, velocity_window: 5 },
            validation_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_return_initial_params() {
        let cfg = TrainConfig { iterations: 0, ..small_cfg() };
        let out = train(&cfg, &square(), None).unwrap();
        assert_eq!(out.params, cfg.init_params(&square()));
        assert!(out.log.is_empty());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let cfg = TrainConfig {
            loss_weights: LossWeights { lambda_v: 0.0, lambda_h: 0.0, lambda_c: 0.0, lambda_a: 0.0, mu: 1.0 },
            ..small_cfg()
        };
        let d = square();
        let runner = Runner::new(&cfg, &d).unwrap();
        let s = sample_goals(1, &cfg.goal_bounds, cfg.schedule).unwrap();
        let g = episode_gradient(&cfg.init_params(&d), &s, &runner).unwrap();
        assert!(g.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_gradient_is_mean_of_episode_gradients() {
        let cfg = TrainConfig { iterations: 1, optimizer: OptimizerConfig::Sgd { lr: 1.0 }, ..small_cfg() };
        let d = square();
        let runner = Runner::new(&cfg, &d).unwrap();
        let p0 = cfg.init_params(&d);
        let mut mean = vec![0.0; p0.num_params()];
        for b in 0..cfg.batch_size as u64 {
            let s = sample_goals(sub_seed(cfg.seed, 0, b), &cfg.goal_bounds, cfg.schedule).unwrap();
            let g = episode_gradient(&p0, &s, &runner).unwrap();
            for (m, x) in mean.iter_mut().zip(&g.grad) {
                *m += x / cfg.batch_size as f64;
            }
        }
        let out = train(&cfg, &d, None).unwrap();
        // one SGD step with lr 1 moves params by exactly minus the batch gradient
        let moved: Vec<f64> = p0.to_flat().iter().zip(out.params.to_flat()).map(|(a, b)| a - b).collect();
        for (a, b) in moved.iter().zip(&mean) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!((out.log[0].grad_norm - l2(&mean)).abs() <= 1e-12 * l2(&mean));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg();
        let a = train(&cfg, &square(), None).unwrap();
        let b = train(&cfg, &square(), None).unwrap();
        assert_eq!(a.params, b.params);
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.grad_norm, y.grad_norm);
        }
    }

    #[test]
    fn untrained_controller_validates_to_one() {
        let cfg = small_cfg();
        let d = square();
        let v = validate(&cfg.init_params(&d), &cfg, &d).unwrap();
        assert_eq!(v, ValidationLosses { task: 1.0, run: 1.0, jump: 1.0 });
    }

    #[test]
    fn sub_seeds_differ() {
        let mut seen = std::collections::HashSet::new();
        for it in 0..50 {
            for b in 0..32 {
                assert!(seen.insert(sub_seed(7, it, b)));
            }
        }
    }

    #[test]
    fn ablation_switches_shrink_features() {
        let d = square();
        let full = TrainConfig::default();
        let n = d.num_nodes();
        let base = full.effective_features().input_dim(&d);
        let mut ps = full.clone();
        ps.ablation.periodic_signal_on = false;
        assert_eq!(ps.effective_features().input_dim(&d), base - 8);
        let mut sv = full.clone();
        sv.ablation.state_vector_on = false;
        assert_eq!(sv.effective_features().input_dim(&d), base - 4 * n);
        let mut tg = full.clone();
        tg.ablation.targets_on = false;
        assert_eq!(tg.effective_features().input_dim(&d), base - 32);
        let mut ld = full;
        ld.ablation.tailored_loss_on = false;
        assert_eq!(ld.training_loss().velocity_loss, VelocityLoss::Naive);
        assert_eq!(ld.validation_loss().velocity_loss, VelocityLoss::Windowed);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = small_cfg();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
