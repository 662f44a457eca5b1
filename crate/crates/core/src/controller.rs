//! Two-layer fully connected controller and its input features.
//!
//! The input vector has three parts: phase-shifted periodic signals, the
//! state relative to the center of mass, and the goal targets repeated
//! `duplication` times each.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{center_of_mass, AgentDesign, SimState};
use crate::error::{Error, Result};
use crate::objectives::Goal;
use crate::sim::StateAdjoint;

pub const DEFAULT_HIDDEN_DIM: usize = 64;

/// Default multiplier on velocity features.
pub const VELOCITY_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sin,
    Tanh,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Sin,
        Activation::Tanh,
        Activation::Relu,
        Activation::Gelu,
        Activation::Sigmoid,
    ];

    /// Hidden-layer nonlinearity and its derivative.
    fn eval(self, z: f64, omega0: f64) -> (f64, f64) {
        match self {
            Activation::Sin => ((omega0 * z).sin(), omega0 * (omega0 * z).cos()),
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Gelu => {
                let k = (2.0 / PI).sqrt();
                let inner = k * (z + 0.044715 * z * z * z);
                let t = inner.tanh();
                let d = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * z * z);
                (0.5 * z * (1.0 + t), d)
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
        }
    }

    /// Output-layer nonlinearity mapped into [-1, 1], with its derivative.
    /// Relu and Gelu are shifted down by one and clamped; the derivative is
    /// zero where the clamp is active.
    fn eval_output(self, z: f64, omega0: f64) -> (f64, f64) {
        match self {
            Activation::Sin | Activation::Tanh => self.eval(z, omega0),
            Activation::Relu | Activation::Gelu => {
                let (y, d) = self.eval(z, omega0);
                let y = y - 1.0;
                if y > 1.0 {
                    (1.0, 0.0)
                } else if y < -1.0 {
                    (-1.0, 0.0)
                } else {
                    (y, d)
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                (2.0 * s - 1.0, 2.0 * s * (1.0 - s))
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetName {
    #[serde(rename = "g_v")]
    Velocity,
    #[serde(rename = "g_h")]
    Height,
    #[serde(rename = "g_c")]
    Crawl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetChannel {
    pub name: TargetName,
    pub duplication: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    /// Number of sine channels; phases are spaced evenly over [0, 2π).
    pub n_periodic: usize,
    /// Period of the sine channels, in steps.
    pub signal_period: f64,
    pub include_positions: bool,
    pub include_velocities: bool,
    /// Multiplier applied to velocity channels.
    pub velocity_scale: f64,
    pub target_channels: Vec<TargetChannel>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            n_periodic: 8,
            signal_period: 200.0,
            include_positions: true,
            include_velocities: true,
            velocity_scale: VELOCITY_SCALE,
            target_channels: vec![
                TargetChannel {
                    name: TargetName::Velocity,
                    duplication: 16,
                },
                TargetChannel {
                    name: TargetName::Height,
                    duplication: 16,
                },
            ],
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_periodic > 0 && !(self.signal_period > 0.0 && self.signal_period.is_finite()) {
            return Err(Error::Config(format!(
                "signal_period must be positive, got {}",
                self.signal_period
            )));
        }
        if !self.velocity_scale.is_finite() {
            return Err(Error::Config(format!("velocity_scale must be finite, got {}", self.velocity_scale)));
        }
        if let Some(c) = self.target_channels.iter().find(|c| c.duplication == 0) {
            return Err(Error::Config(format!("target channel {:?} has duplication 0", c.name)));
        }
        Ok(())
    }

    pub fn phases(&self) -> Vec<f64> {
        (0..self.n_periodic)
            .map(|k| 2.0 * PI * k as f64 / self.n_periodic as f64)
            .collect()
    }

    fn state_offset(&self) -> usize {
        self.n_periodic
    }

    pub fn input_dim(&self, design: &AgentDesign) -> usize {
        let n = design.num_nodes();
        let mut dim = self.n_periodic;
        if self.include_positions {
            dim += 2 * n;
        }
        if self.include_velocities {
            dim += 2 * n;
        }
        dim + self.target_channels.iter().map(|c| c.duplication).sum::<usize>()
    }
}

/// Builds the controller input for `state` at step `t`.
pub fn assemble_features(
    state: &SimState,
    t: usize,
    goal: &Goal,
    spec: &FeatureSpec,
    design: &AgentDesign,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.input_dim(design));
    for phase in spec.phases() {
        out.push((2.0 * PI * t as f64 / spec.signal_period + phase).sin());
    }
    if spec.include_positions {
        let com = center_of_mass(state, design);
        for x in &state.x {
            out.push(x.x - com.x);
            out.push(x.y - com.y);
        }
    }
    if spec.include_velocities {
        for v in &state.v {
            out.push(v.x * spec.velocity_scale);
            out.push(v.y * spec.velocity_scale);
        }
    }
    for channel in &spec.target_channels {
        let value = match channel.name {
            TargetName::Velocity => goal.g_v,
            TargetName::Height => goal.g_h,
            TargetName::Crawl => Some(goal.g_c as f64),
        }
        .ok_or_else(|| {
            Error::Config(format!("goal {goal:?} has no value for target channel {:?}", channel.name))
        })?;
        out.extend(std::iter::repeat_n(value, channel.duplication));
    }
    Ok(out)
}

/// Adds the state adjoint implied by a feature gradient to `grad`.
pub fn feature_adjoint(
    g_features: &[f64],
    spec: &FeatureSpec,
    design: &AgentDesign,
    grad: &mut StateAdjoint,
) {
    let n = design.num_nodes();
    let mut offset = spec.state_offset();
    if spec.include_positions {
        let g = &g_features[offset..offset + 2 * n];
        let mut total = crate::agent::Vec2::zeros();
        for i in 0..n {
            let gi = crate::agent::Vec2::new(g[2 * i], g[2 * i + 1]);
            grad.x[i] += gi;
            total += gi;
        }
        let inv_mass = 1.0 / design.total_mass();
        for i in 0..n {
            grad.x[i] -= total * (design.node_mass[i] * inv_mass);
        }
        offset += 2 * n;
    }
    if spec.include_velocities {
        let g = &g_features[offset..offset + 2 * n];
        for i in 0..n {
            grad.v[i] += crate::agent::Vec2::new(g[2 * i], g[2 * i + 1]) * spec.velocity_scale;
        }
    }
}

/// Weights and biases of the controller. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation_hidden: Activation,
    pub activation_output: Activation,
    pub omega0: f64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    /// Derivative of the hidden activation at each pre-activation.
    d_hidden: Vec<f64>,
    hidden: Vec<f64>,
    /// Derivative of the output mapping at each pre-activation.
    d_output: Vec<f64>,
}

impl ControllerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; output_dim * hidden_dim],
            b2: vec![0.0; output_dim],
            activation_hidden: Activation::Sin,
            activation_output: Activation::Sin,
            omega0: 1.0,
        }
    }

    /// SIREN-style initialization: weights uniform in ±sqrt(6 / fan_in) / omega0,
    /// biases uniform in ±1 / sqrt(fan_in).
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activations: (Activation, Activation),
        omega0: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim, hidden_dim, output_dim);
        p.activation_hidden = activations.0;
        p.activation_output = activations.1;
        p.omega0 = omega0;
        let mut fill = |w: &mut [f64], b: &mut [f64], fan_in: usize| {
            let wb = (6.0 / fan_in.max(1) as f64).sqrt() / omega0;
            let bb = 1.0 / (fan_in.max(1) as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.random_range(-wb..=wb));
            b.iter_mut().for_each(|x| *x = rng.random_range(-bb..=bb));
        };
        fill(&mut p.w1, &mut p.b1, input_dim);
        fill(&mut p.w2, &mut p.b2, hidden_dim);
        p
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} entries, controller has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
        Ok(())
    }

    pub fn check_shapes(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden_dim * self.input_dim
            && self.b1.len() == self.hidden_dim
            && self.w2.len() == self.output_dim * self.hidden_dim
            && self.b2.len() == self.output_dim;
        if !ok {
            return Err(Error::Contract(format!(
                "controller arrays do not match dimensions {}x{}x{}",
                self.input_dim, self.hidden_dim, self.output_dim
            )));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { layer: "parameters" });
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if features.len() != self.input_dim {
            return Err(Error::Contract(format!(
                "feature vector has {} entries, controller expects {}",
                features.len(),
                self.input_dim
            )));
        }
        let mut hidden = Vec::with_capacity(self.hidden_dim);
        let mut d_hidden = Vec::with_capacity(self.hidden_dim);
        for (row, b) in self.w1.chunks_exact(self.input_dim).zip(&self.b1) {
            let z = dot(row, features) + b;
            let (h, d) = self.activation_hidden.eval(z, self.omega0);
            hidden.push(h);
            d_hidden.push(d);
        }
        if !hidden.iter().all(|h| h.is_finite()) {
            return Err(Error::Numeric { layer: "hidden" });
        }
        let mut out = Vec::with_capacity(self.output_dim);
        let mut d_output = Vec::with_capacity(self.output_dim);
        for (row, b) in self.w2.chunks_exact(self.hidden_dim).zip(&self.b2) {
            let z = dot(row, &hidden) + b;
            let (a, d) = self.activation_output.eval_output(z, self.omega0);
            out.push(a);
            d_output.push(d);
        }
        if !out.iter().all(|a| a.is_finite()) {
            return Err(Error::Numeric { layer: "output" });
        }
        Ok((
            out,
            ForwardCache {
                input: features.to_vec(),
                d_hidden,
                hidden,
                d_output,
            },
        ))
    }

    /// Accumulates the parameter gradient into `grad` (same layout as
    /// [`to_flat`](Self::to_flat)) and returns the feature gradient.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_actuation: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if grad_actuation.len() != self.output_dim
            || cache.hidden.len() != self.hidden_dim
            || cache.input.len() != self.input_dim
            || grad.len() != self.num_params()
        {
            return Err(Error::Contract("controller backward shape mismatch".into()));
        }
        let (gw1, rest) = grad.split_at_mut(self.w1.len());
        let (gb1, rest) = rest.split_at_mut(self.b1.len());
        let (gw2, gb2) = rest.split_at_mut(self.w2.len());

        let mut g_hidden = vec![0.0; self.hidden_dim];
        for o in 0..self.output_dim {
            let gz = grad_actuation[o] * cache.d_output[o];
            if gz == 0.0 {
                continue;
            }
            gb2[o] += gz;
            let row = &self.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            let grow = &mut gw2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            for h in 0..self.hidden_dim {
                grow[h] += gz * cache.hidden[h];
                g_hidden[h] += gz * row[h];
            }
        }
        let mut g_input = vec![0.0; self.input_dim];
        for h in 0..self.hidden_dim {
            let gz = g_hidden[h] * cache.d_hidden[h];
            if gz == 0.0 {
                continue;
            }
            gb1[h] += gz;
            let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
            let grow = &mut gw1[h * self.input_dim..(h + 1) * self.input_dim];
            for i in 0..self.input_dim {
                grow[i] += gz * cache.input[i];
                g_input[i] += gz * row[i];
            }
        }
        Ok(g_input)
    }

    /// Returns (parameter gradient, feature gradient).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_actuation: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        let g_input = self.backward_into(cache, grad_actuation, &mut grad)?;
        Ok((grad, g_input))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
