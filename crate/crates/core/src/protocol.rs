//! JSON messages exchanged with interactive clients.
//!
//! Clients send `set_targets`; the server answers with one `hello`, then a
//! stream of `frame` messages, and `error` messages for rejected input or
//! simulation failures.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentDesign, DesignKind, Vec2};
use crate::objectives::{Goal, GoalBounds};

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Fields left out keep their current value.
    SetTargets {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g_v: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g_h: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g_c: Option<u8>,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub name: String,
    pub kind: DesignKind,
    pub nodes: usize,
    pub actuators: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub design: DesignSummary,
    /// Spring endpoints, sent once; empty for MPM designs.
    pub springs: Vec<[usize; 2]>,
    pub bounds: GoalBounds,
    pub ground_height: f64,
    pub dt: f64,
    pub substeps: usize,
    pub frame_rate: f64,
    pub targets: Goal,
}

impl Hello {
    pub fn summary(design: &AgentDesign) -> DesignSummary {
        DesignSummary {
            name: design.name.clone(),
            kind: design.kind,
            nodes: design.num_nodes(),
            actuators: design.num_actuators(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Simulation step count.
    pub t: usize,
    pub positions: Vec<[f64; 2]>,
    pub actuation: Vec<f64>,
    pub com: [f64; 2],
    pub targets: Goal,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    Frame(Frame),
    Error { msg: String },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

pub(crate) fn pair(v: &Vec2) -> [f64; 2] {
    [v.x, v.y]
}
