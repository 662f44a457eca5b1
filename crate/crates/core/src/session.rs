//! Closed-loop simulation driven by live targets, shared by the WebSocket
//! service and deterministic replays.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{center_of_mass, AgentDesign, SimState};
use crate::checkpoint::Checkpoint;
use crate::controller::ControllerParams;
use crate::error::{Error, Result};
use crate::objectives::{Goal, GoalBounds};
use crate::protocol::{pair, ClientMessage, Frame, Hello, ServerMessage};
use crate::trainer::{Runner, TrainConfig};

/// Frames emitted per simulated second.
pub const FRAME_RATE: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct Session {
    runner: Runner,
    params: ControllerParams,
    bounds: GoalBounds,
    initial: SimState,
    state: SimState,
    substeps: usize,
    /// Targets currently fed to the controller.
    live: Goal,
    /// Most recently commanded targets.
    commanded: Goal,
    /// Ticks over which the live targets move linearly to a new command.
    ramp_frames: usize,
    ramp_from: Goal,
    ramp_left: usize,
}

impl Session {
    pub fn new(params: ControllerParams, cfg: &TrainConfig, design: &AgentDesign) -> Result<Self> {
        let runner = Runner::new(cfg, design)?;
        runner.check_params(&params)?;
        let substeps = ((1.0 / FRAME_RATE) / runner.sim.dt()).round().max(1.0) as usize;
        let bounds = cfg.goal_bounds.clone();
        let start = bounds.clamp(&Goal {
            g_v: Some(0.0),
            g_h: bounds.height.map(|h| h[0]),
            g_c: 0,
        });
        let initial = SimState::at_rest(design);
        Ok(Self {
            runner,
            params,
            bounds,
            state: initial.clone(),
            initial,
            substeps,
            live: start,
            commanded: start,
            ramp_frames: 0,
            ramp_from: start,
            ramp_left: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check()?;
        Self::new(ckpt.params()?, &ckpt.config, &ckpt.agent()?)
    }

    /// Moves targets linearly over `frames` ticks instead of switching at once.
    pub fn with_ramp(mut self, frames: usize) -> Self {
        self.ramp_frames = frames;
        self
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn targets(&self) -> Goal {
        self.live
    }

    pub fn bounds(&self) -> &GoalBounds {
        &self.bounds
    }

    pub fn hello(&self) -> ServerMessage {
        let design = &self.runner.design;
        ServerMessage::Hello(Hello {
            design: Hello::summary(design),
            springs: design.springs.iter().map(|s| [s.a, s.b]).collect(),
            bounds: self.bounds.clone(),
            ground_height: self.runner.sim.ground_height(),
            dt: self.runner.sim.dt(),
            substeps: self.substeps,
            frame_rate: FRAME_RATE,
            targets: self.live,
        })
    }

    pub fn commanded(&self) -> Goal {
        self.commanded
    }

    /// Applies a client command, clamped into the bounds; returns the new
    /// commanded targets.
    pub fn command(&mut self, msg: &ClientMessage) -> Goal {
        self.set_commanded(merge_command(&self.bounds, &self.commanded, msg));
        self.commanded
    }

    /// Sets new targets (clamped) that take effect from the next tick.
    pub fn set_commanded(&mut self, goal: Goal) {
        self.commanded = self.bounds.clamp(&goal);
        if self.ramp_frames == 0 {
            self.live = self.commanded;
        } else {
            self.ramp_from = self.live;
            self.ramp_left = self.ramp_frames;
        }
    }

    fn advance_ramp(&mut self) {
        if self.ramp_left == 0 {
            return;
        }
        self.ramp_left -= 1;
        let f = 1.0 - self.ramp_left as f64 / self.ramp_frames as f64;
        let lerp = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a + (b - a) * f),
            (_, b) => b,
        };
        self.live = Goal {
            g_v: lerp(self.ramp_from.g_v, self.commanded.g_v),
            g_h: lerp(self.ramp_from.g_h, self.commanded.g_h),
            g_c: self.commanded.g_c,
        };
    }

    /// Runs one frame worth of substeps with the controller evaluated every
    /// substep. On failure the agent is put back in its initial pose and the
    /// error is returned.
    pub fn tick(&mut self) -> Result<Frame> {
        self.advance_ramp();
        match self.advance() {
            Ok(frame) => Ok(frame),
            Err(e) => {
                self.state = self.initial.clone();
                Err(e)
            }
        }
    }

    fn advance(&mut self) -> Result<Frame> {
        let mut state = self.state.clone();
        let mut act = Vec::new();
        for _ in 0..self.substeps {
            let (a, _) = self.runner.act(&self.params, &state, &self.live)?;
            let (next, _) = self.runner.sim.step(&state, &a, &self.runner.design)?;
            state = next;
            act = a;
        }
        if !state.is_finite() {
            return Err(Error::Diverged {
                step: state.t,
                reason: "state left the finite range".into(),
            });
        }
        self.state = state;
        Ok(self.frame(act))
    }

    fn frame(&self, actuation: Vec<f64>) -> Frame {
        Frame {
            t: self.state.t,
            positions: self.state.x.iter().map(pair).collect(),
            actuation,
            com: pair(&center_of_mass(&self.state, &self.runner.design)),
            targets: self.live,
        }
    }
}

/// Targets after applying `msg` to `current`: fields the message leaves out
/// keep their value, and the result is clamped into `bounds`.
pub fn merge_command(bounds: &GoalBounds, current: &Goal, msg: &ClientMessage) -> Goal {
    let ClientMessage::SetTargets { g_v, g_h, g_c } = *msg;
    bounds.clamp(&Goal {
        g_v: g_v.or(current.g_v),
        g_h: g_h.or(current.g_h),
        g_c: g_c.unwrap_or(current.g_c),
    })
}

/// A target command applied before the given frame of a replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptCommand {
    pub frame: usize,
    #[serde(default)]
    pub g_v: Option<f64>,
    #[serde(default)]
    pub g_h: Option<f64>,
    #[serde(default)]
    pub g_c: Option<u8>,
}

/// Scripted targets for an offline replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalScript {
    pub frames: usize,
    #[serde(default)]
    pub commands: Vec<ScriptCommand>,
}

impl GoalScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Plays a script through a session and returns the message stream a client
/// would receive, starting with the hello.
pub fn replay(session: &mut Session, script: &GoalScript) -> Vec<ServerMessage> {
    let mut out = vec![session.hello()];
    let mut commands: Vec<&ScriptCommand> = script.commands.iter().collect();
    commands.sort_by_key(|c| c.frame);
    let mut next = commands.into_iter().peekable();
    for frame in 0..script.frames {
        while let Some(c) = next.next_if(|c| c.frame <= frame) {
            session.command(&ClientMessage::SetTargets { g_v: c.g_v, g_h: c.g_h, g_c: c.g_c });
        }
        out.push(match session.tick() {
            Ok(f) => ServerMessage::Frame(f),
            Err(e) => ServerMessage::Error { msg: e.to_string() },
        });
    }
    out
}

/// Writes one JSON message per line.
pub fn write_jsonl(messages: &[ServerMessage], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for m in messages {
        buf.extend_from_slice(m.to_json().as_bytes());
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
