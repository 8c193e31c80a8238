//! Serializable experiment configurations.
//!
//! Every subcommand is a pure function of its config file and referenced
//! inputs, so a config (plus seeds) fully determines every output byte.

use serde::{Deserialize, Serialize};

use facesim_core::attack::{AttackConfig, AttackMethod, AttackMode};
use facesim_core::geometry::PatchRegion;
use facesim_core::protocol::ProtocolKind;

fn default_model() -> String {
    "modelA".to_string()
}

fn default_texture_res() -> (usize, usize) {
    facesim_core::geometry::DEFAULT_TEXTURE_RES
}

fn default_calibration_identities() -> usize {
    20
}

fn default_calibration_seed() -> u64 {
    1000
}

/// `facesim fit` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCmdConfig {
    /// Target image (PPM) to fit against.
    pub target: String,
    pub init_seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_fit_iters")]
    pub max_iters: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_lambda() -> f64 {
    0.01
}

fn default_fit_iters() -> usize {
    300
}

fn default_lr() -> f64 {
    0.01
}

/// `facesim attack` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCmdConfig {
    pub attacker_seed: u64,
    pub victim_seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    pub region: PatchRegion,
    pub mode: AttackMode,
    pub method: String,
    /// Verification threshold; calibrated when omitted.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_texture_res")]
    pub texture_res: (usize, usize),
    #[serde(default)]
    pub overrides: AttackOverrides,
    #[serde(default = "default_calibration_identities")]
    pub calibration_identities: usize,
    #[serde(default = "default_calibration_seed")]
    pub calibration_base_seed: u64,
}

/// Optional overrides of the per-method attack defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackOverrides {
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub iters: Option<usize>,
    pub momentum_mu: Option<f64>,
    pub sample_count: Option<usize>,
    pub candidate_count: Option<usize>,
    pub use_importance_sampling: Option<bool>,
    pub with_replacement: Option<bool>,
    pub transform2d_sigma: Option<f64>,
    pub rng_seed: Option<u64>,
    pub basis_dim: Option<usize>,
    pub init_from_victim: Option<bool>,
}

impl AttackCmdConfig {
    pub fn build_attack_config(&self) -> anyhow::Result<AttackConfig> {
        let method: AttackMethod = self
            .method
            .parse()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut cfg = AttackConfig::new(self.mode, method);
        let o = &self.overrides;
        if let Some(v) = o.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = o.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = o.iters {
            cfg.iters = v;
        }
        if let Some(v) = o.momentum_mu {
            cfg.momentum_mu = v;
        }
        if let Some(v) = o.sample_count {
            cfg.sample_count = v;
        }
        if let Some(v) = o.candidate_count {
            cfg.candidate_count = v;
        }
        if let Some(v) = o.use_importance_sampling {
            cfg.use_importance_sampling = v;
        }
        if let Some(v) = o.with_replacement {
            cfg.with_replacement = v;
        }
        if let Some(v) = o.transform2d_sigma {
            cfg.transform2d_sigma = v;
        }
        if let Some(v) = o.rng_seed {
            cfg.rng_seed = v;
        }
        if let Some(v) = o.basis_dim {
            cfg.basis_dim = v;
        }
        if let Some(v) = o.init_from_victim {
            cfg.init_from_victim = v;
        }
        Ok(cfg)
    }
}

/// `facesim protocol` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolCmdConfig {
    /// Adversarial texture as raw f32 planes (from `facesim attack`);
    /// evaluates the clean texture when omitted.
    #[serde(default)]
    pub adv_texture: Option<String>,
    pub attacker_seed: u64,
    pub victim_seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    pub mode: AttackMode,
    pub kind: ProtocolKind,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub protocol_seed: u64,
    #[serde(default = "default_texture_res")]
    pub texture_res: (usize, usize),
    #[serde(default = "default_calibration_identities")]
    pub calibration_identities: usize,
    #[serde(default = "default_calibration_seed")]
    pub calibration_base_seed: u64,
    #[serde(default)]
    pub method_label: Option<String>,
}

/// `facesim bench` configuration: everything needed to rerun the full
/// benchmark matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCmdConfig {
    pub identity_seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub models: Vec<String>,
    pub specs: Vec<ProtocolKind>,
    pub mode: AttackMode,
    pub region: PatchRegion,
    #[serde(default)]
    pub overrides: AttackOverrides,
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default = "default_calibration_identities")]
    pub calibration_identities: usize,
    #[serde(default = "default_calibration_seed")]
    pub calibration_base_seed: u64,
}
