//! Controller checkpoints.
//!
//! A checkpoint stores the network (row-major weight arrays), the feature
//! spec it was trained with, training metadata, and the full training config
//! and design so it can be validated or served on its own.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentDesign, DesignFile};
use crate::controller::{Activation, ControllerParams, FeatureSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activations {
    pub hidden: Activation,
    pub output: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub feature_spec: FeatureSpec,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activations: Activations,
    pub omega0: f64,
    #[serde(rename = "W1")]
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub metadata: Metadata,
    pub config: TrainConfig,
    pub design: DesignFile,
}

impl Checkpoint {
    pub fn new(params: &ControllerParams, cfg: &TrainConfig, design: &AgentDesign, iteration: usize) -> Self {
        Self {
            feature_spec: cfg.effective_features(),
            input_dim: params.input_dim,
            hidden_dim: params.hidden_dim,
            output_dim: params.output_dim,
            activations: Activations {
                hidden: params.activation_hidden,
                output: params.activation_output,
            },
            omega0: params.omega0,
            w1: params.w1.clone(),
            b1: params.b1.clone(),
            w2: params.w2.clone(),
            b2: params.b2.clone(),
            metadata: Metadata {
                iteration,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            },
            config: cfg.clone(),
            design: design.to_file(),
        }
    }

    pub fn params(&self) -> Result<ControllerParams> {
        let p = ControllerParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
            activation_hidden: self.activations.hidden,
            activation_output: self.activations.output,
            omega0: self.omega0,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn agent(&self) -> Result<AgentDesign> {
        Ok(self.design.clone().into_design("checkpoint")?)
    }

    /// Checks that the stored network matches the stored config and design.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.feature_spec != self.config.effective_features() {
            return Err(Error::Config("checkpoint feature_spec disagrees with its config".into()));
        }
        if self.metadata.config_hash != self.config.hash() {
            return Err(Error::Config("checkpoint config hash does not match its config".into()));
        }
        let design = self.agent()?;
        let params = self.params()?;
        if params.input_dim != self.feature_spec.input_dim(&design) || params.output_dim != design.num_actuators() {
            return Err(Error::Config(format!(
                "checkpoint network {}->{} does not fit design `{}`",
                params.input_dim, params.output_dim, design.name
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.check()?;
        Ok(ckpt)
    }
}
