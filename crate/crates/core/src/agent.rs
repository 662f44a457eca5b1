//! Robot designs, their on-disk format, and the geometric queries shared by
//! both simulation backends.
//!
//! A design is either a mass-spring network (nodes joined by Hookean springs,
//! some of which are actuated) or a set of MPM particle seeds. In both cases
//! actuators are partitioned into *actuator groups*; each group is driven by
//! one controller output channel.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{DesignError, Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Stiffness used when neither the spring nor the file supplies one (N/m).
pub const DEFAULT_STIFFNESS: f64 = 1.0e4;
/// Node mass used when the file does not supply one (kg).
pub const DEFAULT_NODE_MASS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    MassSpring,
    Mpm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub stiffness: f64,
    pub actuated: bool,
}

/// A validated robot design. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDesign {
    pub name: String,
    pub kind: DesignKind,
    pub nodes: Vec<Vec2>,
    pub node_mass: Vec<f64>,
    pub springs: Vec<Spring>,
    pub actuator_groups: Vec<Vec<usize>>,
    /// Material-space muscle direction of MPM particles; always the vertical axis.
    pub muscle_axis: Vec2,
    rest_lengths: Vec<f64>,
    group_of: Vec<Option<usize>>,
    total_mass: f64,
}

impl AgentDesign {
    /// Builds and validates a design. When `actuator_groups` is `None`, a
    /// mass-spring design gets one group per actuated spring and an MPM design
    /// gets a single group containing every particle.
    pub fn new(
        name: impl Into<String>,
        kind: DesignKind,
        nodes: Vec<Vec2>,
        node_mass: Vec<f64>,
        springs: Vec<Spring>,
        actuator_groups: Option<Vec<Vec<usize>>>,
    ) -> Result<Self, DesignError> {
        if nodes.is_empty() {
            return Err(DesignError::Empty);
        }
        if node_mass.len() != nodes.len() {
            return Err(DesignError::MassCountMismatch {
                got: node_mass.len(),
                expected: nodes.len(),
            });
        }
        for (node, p) in nodes.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(DesignError::NonFiniteNode { node });
            }
        }
        for (node, &mass) in node_mass.iter().enumerate() {
            if !(mass.is_finite() && mass > 0.0) {
                return Err(DesignError::NonPositiveMass { node, mass });
            }
        }
        if kind == DesignKind::Mpm && !springs.is_empty() {
            return Err(DesignError::SpringsInMpmDesign {
                count: springs.len(),
            });
        }

        let count = nodes.len();
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        let mut rest_lengths = Vec::with_capacity(springs.len());
        for (i, s) in springs.iter().enumerate() {
            if s.a == s.b {
                return Err(DesignError::DegenerateSpring {
                    spring: i,
                    node: s.a,
                });
            }
            for node in [s.a, s.b] {
                if node >= count {
                    return Err(DesignError::NodeOutOfRange {
                        spring: i,
                        node,
                        count,
                    });
                }
            }
            let key = (s.a.min(s.b), s.a.max(s.b));
            if let Some(&first) = seen.get(&key) {
                return Err(DesignError::DuplicateSpring {
                    spring: i,
                    first,
                    a: s.a,
                    b: s.b,
                });
            }
            seen.insert(key, i);
            if !(s.stiffness.is_finite() && s.stiffness >= 0.0) {
                return Err(DesignError::InvalidStiffness {
                    spring: i,
                    stiffness: s.stiffness,
                });
            }
            let length = (nodes[s.b] - nodes[s.a]).norm();
            if !(length > 0.0) {
                return Err(DesignError::NonPositiveRestLength { spring: i, length });
            }
            rest_lengths.push(length);
        }

        let members = match kind {
            DesignKind::MassSpring => springs.len(),
            DesignKind::Mpm => nodes.len(),
        };
        let actuator_groups = match actuator_groups {
            Some(groups) => groups,
            None => match kind {
                DesignKind::MassSpring => springs
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.actuated)
                    .map(|(i, _)| vec![i])
                    .collect(),
                DesignKind::Mpm => vec![(0..nodes.len()).collect()],
            },
        };
        if actuator_groups.is_empty() {
            return Err(DesignError::NoActuators);
        }
        let mut group_of = vec![None; members];
        for (g, group) in actuator_groups.iter().enumerate() {
            if group.is_empty() {
                return Err(DesignError::EmptyGroup { group: g });
            }
            for &m in group {
                if m >= members {
                    return Err(DesignError::GroupMemberOutOfRange {
                        group: g,
                        member: m,
                        count: members,
                    });
                }
                if let Some(first) = group_of[m] {
                    return Err(DesignError::MultipleGroups {
                        member: m,
                        first,
                        second: g,
                    });
                }
                if kind == DesignKind::MassSpring && !springs[m].actuated {
                    return Err(DesignError::PassiveSpringInGroup {
                        spring: m,
                        group: g,
                    });
                }
                group_of[m] = Some(g);
            }
        }
        if kind == DesignKind::MassSpring {
            if let Some(spring) = springs
                .iter()
                .enumerate()
                .position(|(i, s)| s.actuated && group_of[i].is_none())
            {
                return Err(DesignError::UngroupedActuator { spring });
            }
        }

        let total_mass = node_mass.iter().sum();
        Ok(Self {
            name: name.into(),
            kind,
            nodes,
            node_mass,
            springs,
            actuator_groups,
            muscle_axis: Vec2::new(0.0, 1.0),
            rest_lengths,
            group_of,
            total_mass,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of controller output channels this design needs.
    pub fn num_actuators(&self) -> usize {
        self.actuator_groups.len()
    }

    /// Rest length of every spring, measured from the initial node positions.
    pub fn rest_lengths(&self) -> &[f64] {
        &self.rest_lengths
    }

    /// Actuator group of a spring (mass-spring) or particle (MPM).
    pub fn group_of(&self, member: usize) -> Option<usize> {
        self.group_of[member]
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Axis-aligned bounds of the initial node positions: (min, max).
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::repeat(f64::INFINITY);
        let mut hi = Vec2::repeat(f64::NEG_INFINITY);
        for p in &self.nodes {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn to_file(&self) -> DesignFile {
        DesignFile {
            name: Some(self.name.clone()),
            kind: self.kind,
            nodes: self.nodes.iter().map(|p| [p.x, p.y]).collect(),
            node_mass: Some(NodeMass::PerNode(self.node_mass.clone())),
            default_stiffness: None,
            springs: self
                .springs
                .iter()
                .map(|s| SpringEntry {
                    a: s.a,
                    b: s.b,
                    stiffness: Some(s.stiffness),
                    actuated: s.actuated,
                })
                .collect(),
            actuator_groups: Some(self.actuator_groups.clone()),
        }
    }

    /// Canonical JSON text of this design.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("design serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeMass {
    Uniform(f64),
    PerNode(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpringEntry {
    pub a: usize,
    pub b: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stiffness: Option<f64>,
    #[serde(default)]
    pub actuated: bool,
}

/// On-disk design format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: DesignKind,
    pub nodes: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_mass: Option<NodeMass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_stiffness: Option<f64>,
    #[serde(default)]
    pub springs: Vec<SpringEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuator_groups: Option<Vec<Vec<usize>>>,
}

impl DesignFile {
    pub fn into_design(self, fallback_name: &str) -> Result<AgentDesign, DesignError> {
        let n = self.nodes.len();
        let node_mass = match self.node_mass {
            None => vec![DEFAULT_NODE_MASS; n],
            Some(NodeMass::Uniform(m)) => vec![m; n],
            Some(NodeMass::PerNode(ms)) => ms,
        };
        let default_k = self.default_stiffness.unwrap_or(DEFAULT_STIFFNESS);
        let springs = self
            .springs
            .into_iter()
            .map(|s| Spring {
                a: s.a,
                b: s.b,
                stiffness: s.stiffness.unwrap_or(default_k),
                actuated: s.actuated,
            })
            .collect();
        AgentDesign::new(
            self.name.unwrap_or_else(|| fallback_name.to_string()),
            self.kind,
            self.nodes.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
            node_mass,
            springs,
            self.actuator_groups,
        )
    }
}

/// Parses design JSON. `origin` is used only for diagnostics and the fallback name.
pub fn parse_design(text: &str, origin: &Path) -> Result<AgentDesign> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: DesignFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::MalformedDesign {
            path: origin.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    let fallback = origin
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("design");
    Ok(file.into_design(fallback)?)
}

pub fn load_design(path: impl AsRef<Path>) -> Result<AgentDesign> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_design(&text, path)
}

pub fn save_design(design: &AgentDesign, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, design.to_json()).map_err(|e| Error::io(path, e))
}

/// Positions and velocities of every node (or particle) at one step. MPM
/// states additionally carry per-particle deformation gradients `f` and APIC
/// affine matrices `c`; both are empty for mass-spring states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: usize,
    pub x: Vec<Vec2>,
    pub v: Vec<Vec2>,
    pub f: Vec<Mat2>,
    pub c: Vec<Mat2>,
}

impl SimState {
    /// The design's initial pose at rest.
    pub fn at_rest(design: &AgentDesign) -> Self {
        let n = design.num_nodes();
        let (f, c) = match design.kind {
            DesignKind::MassSpring => (Vec::new(), Vec::new()),
            DesignKind::Mpm => (vec![Mat2::identity(); n], vec![Mat2::zeros(); n]),
        };
        Self {
            t: 0,
            x: design.nodes.clone(),
            v: vec![Vec2::zeros(); n],
            f,
            c,
        }
    }

    pub fn translated(&self, d: Vec2) -> Self {
        let mut s = self.clone();
        s.x.iter_mut().for_each(|p| *p += d);
        s
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|p| p.iter().all(|c| c.is_finite()))
            && self.f.iter().chain(&self.c).all(|m| m.iter().all(|c| c.is_finite()))
    }

    pub(crate) fn check_matches(&self, design: &AgentDesign) -> Result<()> {
        let n = design.num_nodes();
        let mpm = design.kind == DesignKind::Mpm;
        if self.x.len() != n
            || self.v.len() != n
            || (mpm && (self.f.len() != n || self.c.len() != n))
        {
            return Err(Error::Contract(format!(
                "state has {} positions / {} velocities for a {}-node design",
                self.x.len(),
                self.v.len(),
                n
            )));
        }
        Ok(())
    }
}

/// Mass-weighted mean position.
pub fn center_of_mass(state: &SimState, design: &AgentDesign) -> Vec2 {
    let mut acc = Vec2::zeros();
    for (p, m) in state.x.iter().zip(&design.node_mass) {
        acc += p * *m;
    }
    acc / design.total_mass()
}

/// Index and height of the lowest node; ties go to the smallest index.
pub fn lowest_node(state: &SimState) -> (usize, f64) {
    extreme_node(state, |a, b| a < b)
}

/// Index and height of the highest node; ties go to the smallest index.
pub fn highest_node(state: &SimState) -> (usize, f64) {
    extreme_node(state, |a, b| a > b)
}

fn extreme_node(state: &SimState, better: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    let mut best = (0, state.x[0].y);
    for (i, p) in state.x.iter().enumerate().skip(1) {
        if better(p.y, best.1) {
            best = (i, p.y);
        }
    }
    best
}

pub fn lowest_point(state: &SimState, _design: &AgentDesign) -> f64 {
    lowest_node(state).1
}

pub fn highest_point(state: &SimState, _design: &AgentDesign) -> f64 {
    highest_node(state).1
}
