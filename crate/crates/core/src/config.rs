//! The single JSON document that describes a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SceneSpec;
use crate::detection::DetectorConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::model::ModelConfig;
use crate::saliency::SaliencyConfig;
use crate::sr::SrConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    /// Scenes generated for training.
    pub count: usize,
    pub tile_size: Option<usize>,
    pub overlap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            count: 8,
            tile_size: None,
            overlap: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Timing is noisy and slow on CPU, so it is off unless asked for.
    pub measure_fps: bool,
    pub fps_warmup: usize,
    pub fps_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            measure_fps: false,
            fps_warmup: 5,
            fps_runs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub encoder: EncoderConfig,
    pub decoder_sr: SrConfig,
    pub saliency: SaliencyConfig,
    pub filter: FilterConfig,
    pub detector: DetectorConfig,
    pub trainer: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            config_version: CONFIG_VERSION,
            encoder: m.encoder,
            decoder_sr: m.decoder_sr,
            saliency: m.saliency,
            filter: m.filter,
            detector: m.detector,
            trainer: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Eight small scenes and a narrow network that overfit in a few CPU
    /// minutes. Learning rates are raised well above the full-scale values so
    /// both detection and SR converge within the six-epoch schedule.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.encoder.stage_channels = vec![32, 64, 128, 256];
        c.encoder.num_heads = vec![2, 4, 4, 8];
        c.encoder.mlp_ratio = 2.0;
        c.encoder.window_size = 4;
        c.decoder_sr.recon_channels = 16;
        c.saliency.hidden = 8;
        c.detector = DetectorConfig {
            d_model: 32,
            heads: 4,
            points: 2,
            num_queries: 16,
            ffn_dim: 64,
            max_grid: 16,
            ..DetectorConfig::default()
        };
        let lr = 2e-3;
        c.trainer = TrainConfig {
            eta_feat_1: lr,
            eta_det_1: lr,
            eta_feat_2: lr,
            eta_det_2: lr,
            backbone_lr_mult: 1.0,
            rho: 0.5,
            milestones: vec![5],
            epoch_repeats: 60,
            loss_weights: crate::detection::LossWeights {
                sr: 5.0,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        c.data = DataConfig {
            scene: SceneSpec {
                canvas: (64, 64),
                min_objects: 1,
                max_objects: 3,
                min_size: 10.0,
                max_size: 24.0,
                clutter: 0.2,
                seed: 1,
            },
            count: 8,
            tile_size: None,
            overlap: 0,
        };
        c
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder_sr: self.decoder_sr.clone(),
            saliency: self.saliency.clone(),
            filter: self.filter.clone(),
            detector: self.detector.clone(),
        }
    }

    /// Parses a config document, reporting every unknown key and every
    /// invalid value at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let reference = serde_json::to_value(Self::default())?;
        let mut problems = Vec::new();
        unknown_keys(&value, &reference, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(config)
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

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.config_version != CONFIG_VERSION {
            out.push(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }
        if let Err(e) = self.model().validate() {
            out.push(e.to_string());
        }
        out.extend(self.trainer.problems().into_iter().map(|p| format!("trainer: {p}")));
        if let Err(e) = self.data.scene.validate() {
            out.push(format!("data.scene: {e}"));
        }
        if self.detector.num_classes < crate::data::ObjectClass::ALL.len() {
            out.push(format!(
                "detector.num_classes ({}) is smaller than the {} synthetic classes",
                self.detector.num_classes,
                crate::data::ObjectClass::ALL.len()
            ));
        }
        if let Some(t) = self.data.tile_size {
            if self.data.overlap >= t {
                out.push(format!("data.overlap ({}) must be smaller than tile_size ({t})", self.data.overlap));
            }
        }
        out
    }
}

fn unknown_keys(value: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(r)) = (value, reference) else {
        return;
    };
    for (k, child) in v {
        let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match r.get(k) {
            Some(rc) => unknown_keys(child, rc, &p, out),
            None => out.push(format!("unknown key `{p}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(c.problems().is_empty());
        assert!(RunConfig::smoke().problems().is_empty());
    }

    #[test]
    fn all_unknown_keys_are_listed() {
        let err = RunConfig::from_json(r#"{"bogus": 1, "trainer": {"rho": 0.1, "typo": 2}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`bogus`") && msg.contains("`trainer.typo`"), "{msg}");
    }

    #[test]
    fn all_invalid_values_are_listed() {
        let err = RunConfig::from_json(r#"{"config_version": 9, "trainer": {"rho": 2.0, "clip_norm": 0.0}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("config_version") && msg.contains("rho") && msg.contains("clip_norm"), "{msg}");
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_json(r#"{"trainer": {"t_det": 1, "t_tot": 2}}"#).unwrap();
        assert_eq!(c.trainer.t_det, 1);
        assert_eq!(c.encoder, EncoderConfig::default());
    }
}
