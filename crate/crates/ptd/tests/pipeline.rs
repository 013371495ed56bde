mod common;

use std::fs;

use ptd::checkpoint;
use ptd::io::{self, Generation};
use ptd::pipeline::{self, Models, AGENT_CKPT, DECISION_CKPT, GENERATIONS, REPORT, TIMINGS, USER_CKPT};
use ptd_core::corpus::{extract_decision_samples, Dialogue, Speaker, Split, Utterance};
use ptd_core::numerics::init;
use rand::seq::IndexedRandom;

#[test]
fn tiny_run_writes_every_artifact_and_keeps_generators_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let out = common::tiny_run(dir.path());
    for f in [USER_CKPT, AGENT_CKPT, DECISION_CKPT, GENERATIONS, REPORT, TIMINGS, "baseline.ckpt"] {
        assert!(out.out_dir.join(f).exists(), "{f}");
    }
    // The prediction checkpoints are written before decision training; the
    // models used afterwards must be the same parameters.
    let user = checkpoint::load_prediction(&out.out_dir.join(USER_CKPT), Speaker::User).unwrap();
    let agent = checkpoint::load_prediction(&out.out_dir.join(AGENT_CKPT), Speaker::Agent).unwrap();
    assert_eq!(user.params().fingerprint(), out.models.user.params().fingerprint());
    assert_eq!(agent.params().fingerprint(), out.models.agent.params().fingerprint());
    assert_eq!(
        format!("{:016x}", user.params().fingerprint()),
        out.report.training.user_prediction.params
    );
    let report: pipeline::Report = io::read_json(&out.out_dir.join(REPORT)).unwrap();
    assert_eq!(report, out.report);
}

#[test]
fn cached_futures_replay_from_the_generators() {
    let dir = tempfile::tempdir().unwrap();
    let out = common::tiny_run(dir.path());
    let generations: Vec<Generation> = io::read_jsonl(&out.out_dir.join(GENERATIONS)).unwrap();
    let corpus: Vec<Dialogue> = io::read_corpus(&dir.path().join("synth-3-40.jsonl")).unwrap();
    let samples: Vec<_> = corpus.iter().flat_map(extract_decision_samples).collect();
    assert_eq!(generations.len(), samples.len());
    let models = Models::load(&out.out_dir).unwrap();
    let mut rng = init::rng(11);
    for g in generations.choose_multiple(&mut rng, 50) {
        let s = samples.iter().find(|s| s.sample_id == g.sample_id).unwrap();
        assert_eq!(&models.futures(&g.sample_id, &s.history).unwrap(), g);
    }
}

#[test]
fn checkpoints_round_trip_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = common::tiny_run(dir.path());
    let loaded = Models::load(&out.out_dir).unwrap();
    assert_eq!(loaded, out.models);
    for f in [USER_CKPT, AGENT_CKPT, DECISION_CKPT] {
        let path = out.out_dir.join(f);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(checkpoint::to_bytes(&checkpoint::load(&path).unwrap()), bytes, "{f}");
    }
}

#[test]
fn inference_rejects_mismatched_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    let a = common::tiny_run(&dir.path().join("a"));
    let other = dir.path().join("b");
    fs::create_dir_all(&other).unwrap();
    let corpus = common::write_synth(&other, 40, 4);
    let mut config = common::tiny_config(&corpus, &other.join("run"));
    config.min_freq = 3;
    let b = pipeline::run_training(&config).unwrap();
    assert_ne!(a.report.vocab_fingerprint, b.report.vocab_fingerprint);
    fs::copy(b.out_dir.join(DECISION_CKPT), a.out_dir.join(DECISION_CKPT)).unwrap();
    let e = Models::load(&a.out_dir).unwrap_err();
    assert!(e.to_string().contains("vocabulary mismatch"), "{e}");
}

#[test]
fn inference_requires_a_user_final_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = common::tiny_run(dir.path());
    let history = vec![Utterance::from_text("hello how can i help you", 1, 0, Speaker::Agent)];
    let e = out.models.infer(&history).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert_eq!(e.to_string(), "history must end with a user utterance");
    assert!(out.models.infer(&[]).is_err());
}

#[test]
fn empty_train_split_fails_in_the_corpus_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = ptd_core::synth::generate(&ptd_core::synth::SynthConfig {
        dialogues: 10,
        seed: 1,
        hard: false,
    })
    .unwrap();
    for d in &mut corpus {
        d.split = Some(Split::Test);
    }
    let path = dir.path().join("c.jsonl");
    io::write_corpus(&path, &corpus).unwrap();
    let e = pipeline::run_training(&common::tiny_config(&path, &dir.path().join("run"))).unwrap_err();
    assert!(matches!(e, ptd::Error::Stage { stage: "corpus", .. }), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn missing_split_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = pipeline::run_training(&common::tiny_config(&common::fixture("theater.jsonl"), &dir.path().join("run")))
        .unwrap_err();
    assert!(e.to_string().contains("missing split"), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn evaluation_counts_match_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = common::tiny_run(dir.path());
    let corpus = dir.path().join("synth-3-40.jsonl");
    let all = pipeline::evaluate_checkpoints(&out.out_dir, &corpus, None).unwrap();
    let stats = ptd::dataset::stats(&io::read_corpus(&corpus).unwrap(), Default::default());
    assert_eq!((all.wait_samples, all.answer_samples), (stats.wait_samples, stats.answer_samples));
    let test = pipeline::evaluate_checkpoints(&out.out_dir, &corpus, Some(Split::Test)).unwrap();
    assert_eq!(test, out.report.test);
}
