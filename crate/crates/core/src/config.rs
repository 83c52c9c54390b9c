//! Run configuration: one JSON document naming every knob of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{default_registry, BandsetScheme, Dims, GeneratorConfig, ModalityRegistry};
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::maskplan::MaskingConfig;
use crate::model::{ModelConfig, Preset, TargetProjection};
use crate::tokenize::{BandDropoutConfig, ProjectionMode};
use crate::train::{OptimizerConfig, ScheduleConfig};

/// Per-field overrides on top of a size preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_projection: Option<TargetProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub modalities: Vec<String>,
    #[serde(default)]
    pub generator: GeneratorConfig,
}

impl DataConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(self.t, self.h, self.w)
    }

    pub fn registry(&self) -> Result<ModalityRegistry> {
        default_registry().subset(&self.modalities)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "is_default")]
    pub model: ModelOverrides,
    pub scheme: BandsetScheme,
    pub projection: ProjectionMode,
    pub masking: MaskingConfig,
    pub r_max: f64,
    pub loss: ContrastiveConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Checkpoint interval in steps; 0 keeps only the initial and final checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

impl RunConfig {
    /// Desk-scale v1.1 run on the given preset.
    pub fn desk(name: &str, seed: u64, preset: Preset) -> Self {
        Self {
            name: name.into(),
            seed,
            preset,
            model: ModelOverrides::default(),
            scheme: BandsetScheme::SingleBandset,
            projection: ProjectionMode::Nonlinear,
            masking: MaskingConfig::default(),
            r_max: 0.2,
            loss: ContrastiveConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig {
                t: 2,
                h: 16,
                w: 16,
                modalities: ["S1", "S2", "Landsat", "WorldCover", "SRTM"].map(String::from).to_vec(),
                generator: GeneratorConfig::default(),
            },
            output_dir: PathBuf::from("runs").join(name),
            checkpoint_every: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::preset(self.preset);
        let o = &self.model;
        m.width = o.width.unwrap_or(m.width);
        m.encoder_depth = o.encoder_depth.unwrap_or(m.encoder_depth);
        m.decoder_depth = o.decoder_depth.unwrap_or(m.decoder_depth);
        m.decoder_width = o.decoder_width.unwrap_or(if o.width.is_some() { m.width } else { m.decoder_width });
        m.heads = o.heads.unwrap_or(m.heads);
        m.mlp_ratio = o.mlp_ratio.unwrap_or(m.mlp_ratio);
        m.patch_size = o.patch_size.unwrap_or(m.patch_size);
        m.hidden = o.hidden.unwrap_or(m.hidden);
        m.target_projection = o.target_projection.unwrap_or(m.target_projection);
        m.projection = self.projection;
        m.scheme = self.scheme;
        m
    }

    pub fn dropout(&self) -> BandDropoutConfig {
        BandDropoutConfig::with_r_max(self.r_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name: must not be empty".into()));
        }
        self.model_config().validate()?;
        self.masking.validate()?;
        self.dropout().validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.data.dims().validate()?;
        self.data.dims().check_patch(self.model_config().patch_size)?;
        self.data.registry()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_losslessly() {
        let mut cfg = RunConfig::desk("rt", 3, Preset::Nano);
        cfg.model.hidden = Some(16);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn missing_seed_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk("x", 1, Preset::Nano).to_json()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        let err = RunConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk("x", 1, Preset::Nano).to_json()).unwrap();
        v["bogus"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).unwrap_err().to_string().contains("bogus"));
        let mut cfg = RunConfig::desk("x", 1, Preset::Nano);
        cfg.data.h = 18;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk("x", 1, Preset::Nano);
        cfg.data.modalities.push("Nope".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let mut cfg = RunConfig::desk("x", 1, Preset::Base);
        cfg.model.width = Some(32);
        cfg.model.heads = Some(4);
        let m = cfg.model_config();
        assert_eq!((m.width, m.decoder_width, m.heads, m.encoder_depth), (32, 32, 4, 6));
    }
}
