//! Run configuration shared by every workflow. Unknown keys are rejected and
//! omitted keys take the defaults below.

use serde::{Deserialize, Serialize};

use crate::editing::ToyAttribute;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::inversion::{EncoderTrainConfig, InversionConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanCodeConfig {
    pub k_samples: usize,
}

impl Default for MeanCodeConfig {
    fn default() -> Self {
        Self { k_samples: 50_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub lambdas: Vec<f64>,
    pub n_targets: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0],
            n_targets: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditingConfig {
    pub attribute: ToyAttribute,
    pub n_samples: usize,
    pub alpha: f64,
    pub lec_targets: usize,
}

impl Default for EditingConfig {
    fn default() -> Self {
        Self {
            attribute: ToyAttribute::Brightness,
            n_samples: 2000,
            alpha: 2.0,
            lec_targets: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropertiesConfig {
    pub z_seeds: usize,
    pub z_steps: usize,
}

impl Default for PropertiesConfig {
    fn default() -> Self {
        Self {
            z_seeds: 10,
            z_steps: 20_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub mean_code: MeanCodeConfig,
    pub inversion: InversionConfig,
    pub encoder: EncoderTrainConfig,
    pub ablation: AblationConfig,
    pub editing: EditingConfig,
    pub properties: PropertiesConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.inversion.validate()?;
        self.encoder.validate()?;
        if self.mean_code.k_samples == 0 {
            return Err(Error::invalid("mean_code.k_samples must be >= 1"));
        }
        if self.ablation.lambdas.is_empty()
            || self.ablation.lambdas.windows(2).any(|p| !(p[0] < p[1]))
            || self.ablation.lambdas.iter().any(|l| !(*l >= 0.0))
        {
            return Err(Error::invalid(
                "ablation.lambdas must be non-negative and strictly ascending",
            ));
        }
        if self.ablation.n_targets == 0 {
            return Err(Error::invalid("ablation.n_targets must be >= 1"));
        }
        if !self.editing.alpha.is_finite() {
            return Err(Error::invalid("editing.alpha must be finite"));
        }
        Ok(())
    }
}
