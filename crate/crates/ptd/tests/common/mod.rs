#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ptd::config::ExperimentConfig;
use ptd::io;
use ptd::pipeline::{run_training, RunOutput};
use ptd_core::synth::{self, SynthConfig};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn write_synth(dir: &Path, dialogues: usize, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join(format!("synth-{seed}-{dialogues}.jsonl"));
    let corpus = synth::generate(&SynthConfig {
        dialogues,
        seed,
        hard: false,
    })
    .unwrap();
    io::write_corpus(&path, &corpus).unwrap();
    path
}

/// A few seconds of training; enough to exercise every stage.
pub fn tiny_config(corpus: &Path, out: &Path) -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[
            format!("corpus={}", serde_json::to_string(corpus).unwrap()),
            format!("out_dir={}", serde_json::to_string(out).unwrap()),
            "prediction.d_tok=8".into(),
            "prediction.hidden=16".into(),
            "prediction.max_gen_len=12".into(),
            "prediction_train.max_epochs=2".into(),
            "decision.encoder.d_tok=8".into(),
            "decision.encoder.widths=[1,2]".into(),
            "decision.encoder.n_filters=8".into(),
            "decision.fusion=8".into(),
            "decision.hidden=8".into(),
            "decision_train.max_epochs=2".into(),
            "baseline.d_tok=8".into(),
            "baseline.widths=[1,2]".into(),
            "baseline.n_filters=8".into(),
        ])
        .unwrap()
}

pub fn tiny_run(dir: &Path) -> RunOutput {
    let corpus = write_synth(dir, 40, 3);
    run_training(&tiny_config(&corpus, &dir.join("run"))).unwrap()
}
