//! Experiment configuration: a JSON file whose every field can be
//! overridden with `key.path=value`.

use std::path::{Path, PathBuf};

use ptd_core::corpus::TagCaps;
use ptd_core::decision::{DecisionConfig, EncoderArch, EncoderConfig};
use ptd_core::seq2seq::PredictionConfig;
use ptd_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every stage seed derives from this one.
    pub seed: u64,
    /// JSONL corpus whose dialogues carry a train/valid/test split.
    pub corpus: PathBuf,
    /// Slot table for corpora that are not yet constructed.
    pub slots: Option<PathBuf>,
    /// Share of eligible user turns split into sub-turns during construction.
    pub fraction: f64,
    pub min_freq: usize,
    pub out_dir: PathBuf,
    pub prediction: PredictionConfig,
    pub prediction_train: TrainConfig,
    pub decision: DecisionConfig,
    pub decision_train: TrainConfig,
    /// History-only classifier trained alongside for comparison.
    pub baseline: Option<EncoderConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus: PathBuf::from("corpus.jsonl"),
            slots: None,
            fraction: 0.5,
            min_freq: 1,
            out_dir: PathBuf::from("run"),
            prediction: PredictionConfig {
                d_tok: 32,
                d_turn: 8,
                d_sub: 8,
                d_spk: 8,
                hidden: 64,
                caps: caps(),
                beam_size: 4,
                max_gen_len: 30,
            },
            prediction_train: TrainConfig::default(),
            decision: DecisionConfig {
                encoder: EncoderConfig {
                    caps: caps(),
                    ..EncoderConfig::default()
                },
                ..DecisionConfig::default()
            },
            decision_train: TrainConfig::default(),
            baseline: Some(EncoderConfig {
                arch: EncoderArch::TextCnn,
                caps: caps(),
                ..EncoderConfig::default()
            }),
        }
    }
}

fn caps() -> TagCaps {
    TagCaps::default()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON when they can
    /// and are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut json = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut json;
            for part in key.split('.') {
                slot = match slot {
                    serde_json::Value::Object(map) => map
                        .get_mut(part)
                        .ok_or_else(|| Error::Usage(format!("unknown config key {key:?}")))?,
                    _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
                };
            }
            *slot = value;
        }
        serde_json::from_value(json).map_err(|e| Error::Usage(format!("invalid override: {e}")))
    }

    /// Seed of a pipeline stage.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(stage)
    }
}
