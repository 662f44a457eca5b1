//! Backend-independent simulation plumbing: ground contact models, state
//! adjoints, and the [`Simulator`] enum that dispatches to the mass-spring or
//! MPM integrator.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentDesign, DesignKind, Mat2, SimState, Vec2};
use crate::error::{Error, Result};
use crate::mass_spring::{self, MassSpringConfig};
use crate::mpm::{self, MpmConfig};

/// Ground contact model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Contact {
    /// Only upward vertical velocity survives; tangential velocity is zeroed.
    Sticky,
    /// Tangential speed is reduced by `mu` times the removed normal speed.
    Coulomb { mu: f64 },
    /// Only the normal component is projected.
    Frictionless,
}

impl Default for Contact {
    fn default() -> Self {
        Contact::Sticky
    }
}

impl Contact {
    pub fn validate(&self) -> Result<()> {
        if let Contact::Coulomb { mu } = self {
            if !(mu.is_finite() && *mu >= 0.0) {
                return Err(Error::Config(format!("friction coefficient must be >= 0, got {mu}")));
            }
        }
        Ok(())
    }

    /// Projects a velocity at a contact point and returns the projected velocity
    /// together with the Jacobian of the branch taken. Ties at the
    /// sticking/slipping boundary resolve to sticking.
    pub fn project(&self, v: Vec2) -> (Vec2, Mat2) {
        let keep_up = if v.y > 0.0 { 1.0 } else { 0.0 };
        match *self {
            Contact::Sticky => (
                Vec2::new(0.0, v.y * keep_up),
                Mat2::new(0.0, 0.0, 0.0, keep_up),
            ),
            Contact::Frictionless => (
                Vec2::new(v.x, v.y * keep_up),
                Mat2::new(1.0, 0.0, 0.0, keep_up),
            ),
            Contact::Coulomb { mu } => {
                if v.y >= 0.0 {
                    return (v, Mat2::identity());
                }
                let impulse = -v.y;
                if v.x.abs() > mu * impulse {
                    let s = v.x.signum();
                    (
                        Vec2::new(v.x + mu * v.y * s, 0.0),
                        Mat2::new(1.0, mu * s, 0.0, 0.0),
                    )
                } else {
                    (Vec2::zeros(), Mat2::zeros())
                }
            }
        }
    }
}

/// Adjoint (reverse-mode sensitivity) of a [`SimState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateAdjoint {
    pub x: Vec<Vec2>,
    pub v: Vec<Vec2>,
    pub f: Vec<Mat2>,
    pub c: Vec<Mat2>,
}

impl StateAdjoint {
    pub fn zeros_like(state: &SimState) -> Self {
        Self {
            x: vec![Vec2::zeros(); state.x.len()],
            v: vec![Vec2::zeros(); state.v.len()],
            f: vec![Mat2::zeros(); state.f.len()],
            c: vec![Mat2::zeros(); state.c.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|p| p.x.is_finite() && p.y.is_finite())
            && self.f.iter().chain(&self.c).all(|m| m.iter().all(|c| c.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.x.iter().chain(&self.v).all(|p| *p == Vec2::zeros())
            && self.f.iter().chain(&self.c).all(|m| *m == Mat2::zeros())
    }

    pub fn add_assign(&mut self, other: &StateAdjoint) {
        for (a, b) in self.x.iter_mut().zip(&other.x) {
            *a += b;
        }
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += b;
        }
        for (a, b) in self.f.iter_mut().zip(&other.f) {
            *a += b;
        }
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += b;
        }
    }

    /// Inner product with a state-shaped perturbation.
    pub fn dot(&self, delta: &SimState) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.x.iter().zip(&delta.x) {
            acc += a.dot(b);
        }
        for (a, b) in self.v.iter().zip(&delta.v) {
            acc += a.dot(b);
        }
        for (a, b) in self.f.iter().zip(&delta.f) {
            acc += a.component_mul(b).sum();
        }
        for (a, b) in self.c.iter().zip(&delta.c) {
            acc += a.component_mul(b).sum();
        }
        acc
    }

    pub(crate) fn check_shape(&self, state: &SimState) -> Result<()> {
        if self.x.len() != state.x.len()
            || self.v.len() != state.v.len()
            || self.f.len() != state.f.len()
            || self.c.len() != state.c.len()
        {
            return Err(Error::Contract(format!(
                "adjoint shape ({} x, {} v, {} F, {} C) does not match state ({}, {}, {}, {})",
                self.x.len(),
                self.v.len(),
                self.f.len(),
                self.c.len(),
                state.x.len(),
                state.v.len(),
                state.f.len(),
                state.c.len()
            )));
        }
        Ok(())
    }
}

/// Forward-pass record of one step of either backend.
#[derive(Debug, Clone)]
pub enum StepRecord {
    MassSpring(mass_spring::StepRecord),
    Mpm(mpm::StepRecord),
}

impl StepRecord {
    pub fn pre_state(&self) -> &SimState {
        match self {
            StepRecord::MassSpring(r) => &r.pre,
            StepRecord::Mpm(r) => &r.pre,
        }
    }

    pub fn actuation(&self) -> &[f64] {
        match self {
            StepRecord::MassSpring(r) => &r.act,
            StepRecord::Mpm(r) => &r.act,
        }
    }
}

/// A configured simulation backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Simulator {
    MassSpring(MassSpringConfig),
    Mpm(MpmConfig),
}

impl Simulator {
    pub fn dt(&self) -> f64 {
        match self {
            Simulator::MassSpring(c) => c.dt,
            Simulator::Mpm(c) => c.dt,
        }
    }

    pub fn ground_height(&self) -> f64 {
        match self {
            Simulator::MassSpring(c) => c.ground_height,
            Simulator::Mpm(c) => c.ground_height,
        }
    }

    pub fn validate(&self, design: &AgentDesign) -> Result<()> {
        let expected = match self {
            Simulator::MassSpring(c) => {
                c.validate()?;
                DesignKind::MassSpring
            }
            Simulator::Mpm(c) => {
                c.validate()?;
                DesignKind::Mpm
            }
        };
        if design.kind != expected {
            return Err(Error::Config(format!(
                "backend expects a {expected:?} design, got {:?}",
                design.kind
            )));
        }
        Ok(())
    }

    pub fn step(
        &self,
        state: &SimState,
        act: &[f64],
        design: &AgentDesign,
    ) -> Result<(SimState, StepRecord)> {
        match self {
            Simulator::MassSpring(cfg) => {
                let (s, r) = mass_spring::step(state, act, cfg, design)?;
                Ok((s, StepRecord::MassSpring(r)))
            }
            Simulator::Mpm(cfg) => {
                let (s, r) = mpm::mpm_step(state, act, cfg, design)?;
                Ok((s, StepRecord::Mpm(r)))
            }
        }
    }

    pub fn step_adjoint(
        &self,
        record: &StepRecord,
        grad_out: &StateAdjoint,
        design: &AgentDesign,
    ) -> Result<(StateAdjoint, Vec<f64>)> {
        match (self, record) {
            (Simulator::MassSpring(cfg), StepRecord::MassSpring(r)) => {
                mass_spring::step_adjoint(r, grad_out, cfg, design)
            }
            (Simulator::Mpm(cfg), StepRecord::Mpm(r)) => {
                mpm::mpm_step_adjoint(r, grad_out, cfg, design)
            }
            _ => Err(Error::Contract(
                "step record was produced by a different backend".into(),
            )),
        }
    }
}

pub(crate) fn check_actuation(act: &[f64], design: &AgentDesign) -> Result<()> {
    if act.len() != design.num_actuators() {
        return Err(Error::Contract(format!(
            "actuation has {} channels, design has {} actuator groups",
            act.len(),
            design.num_actuators()
        )));
    }
    if let Some(a) = act.iter().find(|a| !(a.abs() <= 1.0)) {
        return Err(Error::Contract(format!("actuation {a} outside [-1, 1]")));
    }
    Ok(())
}
