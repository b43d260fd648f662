//! The velocity-completion model family: a rule-based baseline plus MLP,
//! VAE, GNN, RNN and their graph/recurrent/variational combinations.

mod archs;
mod blocks;
mod features;
mod params;
mod rule;

pub use archs::{
    kl_diag_gaussian, model_forward, predict_velocities, BatchFeatures, ForwardOut, LatentMode,
    NoiseStream, Sample,
};
pub use blocks::BnMode;
pub use features::{featurize, FrameFeatures, GraphLayout, TARGET_WIDTH};
pub use params::{expected_param_count, BoundParams, ModelState};
pub use rule::{rule_based_velocity, RuleConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture selector. `add` variants inject the event type and the
/// ball end position as extra features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    RuleBased,
    Mlp,
    Vae,
    Gnn,
    GnnAdd,
    Vgnn,
    VgnnDecAdd,
    Rnn,
    Vrnn,
    Grnn,
    GrnnDecAdd,
    Gvrnn,
    GvrnnDecAdd,
}

impl Arch {
    pub const ALL: [Arch; 13] = [
        Arch::RuleBased,
        Arch::Mlp,
        Arch::Vae,
        Arch::Gnn,
        Arch::GnnAdd,
        Arch::Vgnn,
        Arch::VgnnDecAdd,
        Arch::Rnn,
        Arch::Vrnn,
        Arch::Grnn,
        Arch::GrnnDecAdd,
        Arch::Gvrnn,
        Arch::GvrnnDecAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::RuleBased => "rule_based",
            Arch::Mlp => "mlp",
            Arch::Vae => "vae",
            Arch::Gnn => "gnn",
            Arch::GnnAdd => "gnn_add",
            Arch::Vgnn => "vgnn",
            Arch::VgnnDecAdd => "vgnn_dec_add",
            Arch::Rnn => "rnn",
            Arch::Vrnn => "vrnn",
            Arch::Grnn => "grnn",
            Arch::GrnnDecAdd => "grnn_dec_add",
            Arch::Gvrnn => "gvrnn",
            Arch::GvrnnDecAdd => "gvrnn_dec_add",
        }
    }

    pub fn parse(name: &str) -> Result<Arch> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                let valid: Vec<&str> = Arch::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!(
                    "unknown arch {name:?}; valid: {}",
                    valid.join(", ")
                ))
            })
    }

    /// Consumes event windows (sequences) rather than single frames.
    pub fn is_recurrent(self) -> bool {
        matches!(
            self,
            Arch::Rnn
                | Arch::Vrnn
                | Arch::Grnn
                | Arch::GrnnDecAdd
                | Arch::Gvrnn
                | Arch::GvrnnDecAdd
        )
    }

    /// Message-passes over the ball + players graph.
    pub fn is_graph(self) -> bool {
        matches!(
            self,
            Arch::Gnn
                | Arch::GnnAdd
                | Arch::Vgnn
                | Arch::VgnnDecAdd
                | Arch::Grnn
                | Arch::GrnnDecAdd
                | Arch::Gvrnn
                | Arch::GvrnnDecAdd
        )
    }

    /// Has prior/encoder/decoder Gaussian heads and a KL loss term.
    pub fn is_variational(self) -> bool {
        matches!(
            self,
            Arch::Vae | Arch::Vgnn | Arch::VgnnDecAdd | Arch::Vrnn | Arch::Gvrnn | Arch::GvrnnDecAdd
        )
    }

    /// Uses the event type / ball end position side features.
    pub fn has_add_features(self) -> bool {
        matches!(
            self,
            Arch::GnnAdd | Arch::VgnnDecAdd | Arch::GrnnDecAdd | Arch::GvrnnDecAdd
        )
    }

    /// Inference draws from the prior, so repeated runs differ.
    pub fn is_stochastic(self) -> bool {
        self.is_variational()
    }
}

/// Architecture plus its hyperparameters. Defaults: num_hid 8, rnn_dim 46,
/// num_layer 1, ball velocity included in the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    #[serde(default = "default_num_hid")]
    pub num_hid: usize,
    #[serde(default = "default_rnn_dim")]
    pub rnn_dim: usize,
    #[serde(default = "default_num_layer")]
    pub num_layer: usize,
    #[serde(default = "default_true")]
    pub use_ball_velocity_input: bool,
}

fn default_num_hid() -> usize {
    8
}
fn default_rnn_dim() -> usize {
    46
}
fn default_num_layer() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn new(arch: Arch) -> ModelSpec {
        ModelSpec {
            arch,
            num_hid: default_num_hid(),
            rnn_dim: default_rnn_dim(),
            num_layer: default_num_layer(),
            use_ball_velocity_input: default_true(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch != Arch::RuleBased
            && (self.num_hid == 0 || self.rnn_dim == 0 || self.num_layer == 0)
        {
            return Err(Error::Config(
                "model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_round_trip() {
        for arch in Arch::ALL {
            assert_eq!(Arch::parse(arch.name()).unwrap(), arch);
        }
        let err = Arch::parse("transformer").unwrap_err().to_string();
        assert!(err.contains("grnn"), "{err}");
    }

    #[test]
    fn spec_defaults_match_hyperparameter_table() {
        let spec = ModelSpec::new(Arch::Grnn);
        assert_eq!(spec.num_hid, 8);
        assert_eq!(spec.rnn_dim, 46);
        assert_eq!(spec.num_layer, 1);
        assert!(spec.use_ball_velocity_input);
    }
}
