//! Differentiable 2D mass-spring dynamics.
//!
//! Each step applies Hookean spring forces against an actuated rest length
//! `L * (1 + act_limit * a)`, dashpot damping along the spring axis, and
//! gravity, then integrates with semi-implicit Euler. Nodes whose predicted
//! position falls below the ground get their velocity projected by the
//! configured [`Contact`] model before the position update. With
//! `time_of_impact` set, a node that reaches the ground inside the step
//! travels with its free velocity up to the impact time and with the
//! projected velocity afterwards, so it lands on the ground instead of
//! stopping short of it.
//!
//! [`step_adjoint`] is the exact vector-Jacobian product of [`step`], with the
//! contact branch taken in the forward pass differentiated as a linear map.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentDesign, Mat2, SimState, Vec2};
use crate::error::{Error, Result};
use crate::sim::{check_actuation, Contact, StateAdjoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MassSpringConfig {
    /// Time step (s).
    pub dt: f64,
    /// Vertical gravitational acceleration (m/s², negative is down).
    pub gravity: f64,
    /// Dashpot coefficient (N·s/m).
    pub dashpot_coeff: f64,
    /// Largest fractional change of an actuated spring's rest length.
    pub act_limit: f64,
    pub ground_height: f64,
    pub contact: Contact,
    pub time_of_impact: bool,
}

impl Default for MassSpringConfig {
    fn default() -> Self {
        Self {
            dt: 0.004,
            gravity: -9.8,
            dashpot_coeff: 0.45,
            act_limit: 0.2,
            ground_height: 0.1,
            contact: Contact::Sticky,
            time_of_impact: true,
        }
    }
}

impl MassSpringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.act_limit > 0.0 && self.act_limit < 1.0) {
            return Err(Error::Config(format!(
                "act_limit must lie in (0, 1), got {}",
                self.act_limit
            )));
        }
        if !(self.dashpot_coeff >= 0.0 && self.gravity.is_finite() && self.ground_height.is_finite()) {
            return Err(Error::Config("dashpot, gravity and ground height must be finite, dashpot >= 0".into()));
        }
        self.contact.validate()
    }
}

/// What the reverse pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub pre: SimState,
    pub act: Vec<f64>,
    /// Unit direction from `a` to `b` for every spring.
    pub dir: Vec<Vec2>,
    /// Current length of every spring.
    pub len: Vec<f64>,
    /// Contact data for nodes that touched the ground during the step.
    pub contact: Vec<Option<ContactRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactRecord {
    /// Jacobian of the velocity projection.
    pub jac: Mat2,
    /// Velocity before projection.
    pub v_free: Vec2,
    pub v_projected: Vec2,
    /// Time from the start of the step to the impact (0 when the node was
    /// already on the ground or impact timing is disabled).
    pub toi: f64,
    /// Whether `toi` depends on the state (node started above ground, moving down).
    pub timed: bool,
}

/// Scalar force magnitude along the spring axis (positive pulls the
/// endpoints together).
#[inline]
fn axial_force(k: f64, len: f64, rest: f64, c: f64, rel_speed: f64) -> f64 {
    k * (len - rest) + c * rel_speed
}

#[inline]
fn actuated_rest(design: &AgentDesign, cfg: &MassSpringConfig, i: usize, act: &[f64]) -> f64 {
    let rest = design.rest_lengths()[i];
    match design.group_of(i) {
        Some(g) => rest * (1.0 + cfg.act_limit * act[g]),
        None => rest,
    }
}

/// Net spring + dashpot force on every node, plus the per-spring geometry.
pub fn spring_forces(
    state: &SimState,
    act: &[f64],
    cfg: &MassSpringConfig,
    design: &AgentDesign,
) -> Result<(Vec<Vec2>, Vec<Vec2>, Vec<f64>)> {
    let n = design.num_nodes();
    let mut force = vec![Vec2::zeros(); n];
    let mut dirs = Vec::with_capacity(design.springs.len());
    let mut lens = Vec::with_capacity(design.springs.len());
    for (i, s) in design.springs.iter().enumerate() {
        let d = state.x[s.b] - state.x[s.a];
        let len = d.norm();
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::Diverged {
                step: state.t,
                reason: format!("spring {i} has length {len} (nodes {} and {})", s.a, s.b),
            });
        }
        let dir = d / len;
        let rel = (state.v[s.b] - state.v[s.a]).dot(&dir);
        let h = axial_force(
            s.stiffness,
            len,
            actuated_rest(design, cfg, i, act),
            cfg.dashpot_coeff,
            rel,
        );
        force[s.a] += dir * h;
        force[s.b] -= dir * h;
        dirs.push(dir);
        lens.push(len);
    }
    Ok((force, dirs, lens))
}

/// Advances the state by one time step.
pub fn step(
    state: &SimState,
    act: &[f64],
    cfg: &MassSpringConfig,
    design: &AgentDesign,
) -> Result<(SimState, StepRecord)> {
    state.check_matches(design)?;
    check_actuation(act, design)?;
    let (force, dir, len) = spring_forces(state, act, cfg, design)?;
    let dt = cfg.dt;
    let n = design.num_nodes();
    let mut x = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut contact = Vec::with_capacity(n);
    for i in 0..n {
        let m = design.node_mass[i];
        let v_free = state.v[i] + (force[i] / m + Vec2::new(0.0, cfg.gravity)) * dt;
        let predicted = state.x[i].y + dt * v_free.y;
        let (xi, vi) = if predicted < cfg.ground_height {
            let (v_projected, jac) = cfg.contact.project(v_free);
            let timed = cfg.time_of_impact && v_free.y < 0.0 && state.x[i].y > cfg.ground_height;
            let toi = if timed {
                ((cfg.ground_height - state.x[i].y) / v_free.y).min(dt)
            } else {
                0.0
            };
            contact.push(Some(ContactRecord { jac, v_free, v_projected, toi, timed }));
            (state.x[i] + v_free * toi + v_projected * (dt - toi), v_projected)
        } else {
            contact.push(None);
            (state.x[i] + v_free * dt, v_free)
        };
        if !(xi.x.is_finite() && xi.y.is_finite() && vi.x.is_finite() && vi.y.is_finite()) {
            return Err(Error::Diverged {
                step: state.t,
                reason: format!("node {i} left the finite range"),
            });
        }
        x.push(xi);
        v.push(vi);
    }
    let next = SimState {
        t: state.t + 1,
        x,
        v,
        f: Vec::new(),
        c: Vec::new(),
    };
    let record = StepRecord {
        pre: state.clone(),
        act: act.to_vec(),
        dir,
        len,
        contact,
    };
    Ok((next, record))
}

/// Vector-Jacobian product of [`step`]: maps the adjoint of the next state to
/// the adjoint of the previous state and of the actuation vector.
pub fn step_adjoint(
    record: &StepRecord,
    grad_out: &StateAdjoint,
    cfg: &MassSpringConfig,
    design: &AgentDesign,
) -> Result<(StateAdjoint, Vec<f64>)> {
    let pre = &record.pre;
    grad_out.check_shape(pre)?;
    if record.dir.len() != design.springs.len() || record.contact.len() != design.num_nodes() {
        return Err(Error::Contract("step record does not match the design".into()));
    }
    let dt = cfg.dt;
    let n = design.num_nodes();
    let mut grad = StateAdjoint::zeros_like(pre);
    let mut grad_act = vec![0.0; design.num_actuators()];
    // adjoint of the net force on each node
    let mut g_force = vec![Vec2::zeros(); n];
    for i in 0..n {
        let gx = grad_out.x[i];
        grad.x[i] = gx;
        let g_vout = match &record.contact[i] {
            None => grad_out.v[i] + gx * dt,
            Some(c) => {
                // x' = x + toi v_free + (dt - toi) v_projected
                let mut g = gx * c.toi + c.jac.transpose() * (grad_out.v[i] + gx * (dt - c.toi));
                if c.timed {
                    let g_toi = gx.dot(&(c.v_free - c.v_projected));
                    let vy = c.v_free.y;
                    grad.x[i].y -= g_toi / vy;
                    g.y -= g_toi * c.toi / vy;
                }
                g
            }
        };
        // v_free = v + dt (f/m + g)
        grad.v[i] = g_vout;
        g_force[i] = g_vout * (dt / design.node_mass[i]);
    }
    for (i, s) in design.springs.iter().enumerate() {
        let dir = record.dir[i];
        let len = record.len[i];
        let dv = pre.v[s.b] - pre.v[s.a];
        let rel = dv.dot(&dir);
        let h = axial_force(
            s.stiffness,
            len,
            actuated_rest(design, cfg, i, &record.act),
            cfg.dashpot_coeff,
            rel,
        );
        let g_pair = g_force[s.a] - g_force[s.b];
        let g_h = g_pair.dot(&dir);
        let mut g_dir = g_pair * h;
        let g_len = s.stiffness * g_h;
        if let Some(g) = design.group_of(i) {
            grad_act[g] -= s.stiffness * design.rest_lengths()[i] * cfg.act_limit * g_h;
        }
        let c = cfg.dashpot_coeff;
        grad.v[s.b] += dir * (c * g_h);
        grad.v[s.a] -= dir * (c * g_h);
        g_dir += dv * (c * g_h);
        let g_d = (g_dir - dir * g_dir.dot(&dir)) / len + dir * g_len;
        grad.x[s.b] += g_d;
        grad.x[s.a] -= g_d;
    }
    Ok((grad, grad_act))
}
