//! TOML experiment config.
//!
//! ```toml
//! seed = 0
//! trials = 20
//!
//! [model]
//! layers = 8
//! head_dim = 32
//!
//! [generation]
//! prompt_len = 16
//! gen_len = 64
//! feedback = false
//!
//! [cache]
//! group_size = 8
//! residual_length = 8
//! passthrough = false
//!
//! [policy]
//! l_k = 8        # defaults to model.layers
//! l_v = 0
//! high_bits = 2
//! low_bits = 1
//! ```
//!
//! Every field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::CacheConfig;
use crate::policy::{AsymConfig, ConfigWarning, ModelShape};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub head_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 8,
            head_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub prompt_len: usize,
    pub gen_len: usize,
    /// Feed each run's previous final hidden row back in as the next
    /// generated token instead of drawing a fresh seeded embedding.
    pub feedback: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            prompt_len: 16,
            gen_len: 64,
            feedback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub group_size: usize,
    pub residual_length: usize,
    /// Disable quantization entirely; the quantized run then matches full precision.
    pub passthrough: bool,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            group_size: 8,
            residual_length: 8,
            passthrough: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub l_k: Option<usize>,
    pub l_v: usize,
    pub high_bits: u8,
    pub low_bits: u8,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            l_k: None,
            l_v: 0,
            high_bits: 2,
            low_bits: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub model: ModelSection,
    pub generation: GenerationSection,
    pub cache: CacheSection,
    pub policy: PolicySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            model: ModelSection::default(),
            generation: GenerationSection::default(),
            cache: CacheSection::default(),
            policy: PolicySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn asym_config(&self) -> AsymConfig {
        AsymConfig::new(
            self.policy.l_k.unwrap_or(self.model.layers),
            self.policy.l_v,
            self.policy.high_bits,
            self.policy.low_bits,
            self.model.layers,
        )
    }

    pub fn with_policy(&self, l_k: usize, l_v: usize) -> Self {
        let mut out = self.clone();
        out.policy.l_k = Some(l_k);
        out.policy.l_v = l_v;
        out
    }

    pub fn total_tokens(&self) -> usize {
        self.generation.prompt_len + self.generation.gen_len
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape::new(
            self.model.layers,
            self.model.head_dim,
            self.cache.group_size,
            self.cache.residual_length,
        )
    }

    /// Cache config of layer `i` for the quantized run.
    pub fn cache_config(&self, layer: usize) -> Result<CacheConfig> {
        if self.cache.passthrough {
            CacheConfig::passthrough(self.cache.group_size, self.cache.residual_length, self.model.head_dim)
        } else {
            self.asym_config().cache_config(
                layer,
                self.cache.group_size,
                self.cache.residual_length,
                self.model.head_dim,
            )
        }
    }

    pub fn full_precision_cache_config(&self) -> Result<CacheConfig> {
        CacheConfig::passthrough(self.cache.group_size, self.cache.residual_length, self.model.head_dim)
    }

    pub fn validate(&self) -> Result<Vec<ConfigWarning>> {
        if self.model.layers == 0 || self.model.head_dim == 0 {
            return Err(Error::Config("model.layers and model.head_dim must be positive".into()));
        }
        if self.generation.gen_len == 0 {
            return Err(Error::Config("generation.gen_len must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        let warnings = self.asym_config().validate()?;
        self.full_precision_cache_config()?;
        for layer in 0..self.model.layers {
            self.cache_config(layer)?;
        }
        Ok(warnings)
    }
}
