//! Training and inference orchestration.
//!
//! Training runs the prediction models first, then materializes both
//! simulated futures for every decision sample with the frozen generators,
//! trains the decision model on them and evaluates on the test split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ptd_core::baselines::{atlu_decide, ptsu_decide, train_history_classifier, HistoryClassifier};
use ptd_core::corpus::{
    extract_decision_samples, extract_prediction_samples, Action, DecisionSample, Dialogue, PredictionSample,
    SlotTable, Speaker, Split, Utterance, Vocabulary,
};
use ptd_core::decision::{train_decision_model, Decision, DecisionExample, DecisionModel, PreparedPaths};
use ptd_core::metrics::{bleu_cumulative, bleu_sentence_smoothed, classification_report, ClassificationReport};
use ptd_core::seq2seq::{train_prediction_model, PredictionModel};
use ptd_core::training::{TrainConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Model};
use crate::config::ExperimentConfig;
use crate::dataset::{self, DatasetStats};
use crate::error::{Error, Result, StageExt};
use crate::io::{self, Generation};

pub const USER_CKPT: &str = "user.ckpt";
pub const AGENT_CKPT: &str = "agent.ckpt";
pub const DECISION_CKPT: &str = "decision.ckpt";
pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const GENERATIONS: &str = "generations.jsonl";
pub const REPORT: &str = "report.json";
pub const TIMINGS: &str = "timings.json";

const EVAL_BATCH: usize = 64;

/// The trained models of one run. All share one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub user: PredictionModel,
    pub agent: PredictionModel,
    pub decision: DecisionModel,
    pub baseline: Option<HistoryClassifier>,
}

impl Models {
    /// Loads the checkpoints of a run directory; the baseline is optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let user = checkpoint::load_prediction(&dir.join(USER_CKPT), Speaker::User)?;
        let agent_path = dir.join(AGENT_CKPT);
        let agent = checkpoint::load_prediction(&agent_path, Speaker::Agent)?;
        checkpoint::check_vocab(&agent_path, agent.vocab(), user.vocab())?;
        let decision_path = dir.join(DECISION_CKPT);
        let decision = checkpoint::load_decision(&decision_path)?;
        checkpoint::check_vocab(&decision_path, decision.vocab(), user.vocab())?;
        let baseline_path = dir.join(BASELINE_CKPT);
        let baseline = if baseline_path.exists() {
            let b = checkpoint::load_history_classifier(&baseline_path)?;
            checkpoint::check_vocab(&baseline_path, b.vocab(), user.vocab())?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            user,
            agent,
            decision,
            baseline,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.user.vocab()
    }

    /// Both simulated futures of a history ending in a user utterance.
    pub fn futures(&self, sample_id: &str, history: &[Utterance]) -> Result<Generation> {
        let u = self.user.generate(history)?;
        let a = self.agent.generate(history)?;
        Ok(Generation {
            sample_id: sample_id.to_string(),
            r_u: u.tokens,
            r_a: a.tokens,
            logp_u: u.log_prob,
            logp_a: a.log_prob,
        })
    }

    /// Simulates both futures, then decides between them.
    pub fn infer(&self, history: &[Utterance]) -> Result<Decision> {
        check_history(history)?;
        let g = self.futures("", history)?;
        Ok(self.decision.decide(history, &g.r_a, &g.r_u)?)
    }
}

/// Futures for every sample, in sample order. Work is spread over the
/// available cores.
pub fn generate_futures(user: &PredictionModel, agent: &PredictionModel, samples: &[DecisionSample]) -> Result<Vec<Generation>> {
    let models = |s: &DecisionSample| -> Result<Generation> {
        let u = user.generate(&s.history)?;
        let a = agent.generate(&s.history)?;
        Ok(Generation {
            sample_id: s.sample_id.clone(),
            r_u: u.tokens,
            r_a: a.tokens,
            logp_u: u.log_prob,
            logp_a: a.log_prob,
        })
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads <= 1 || samples.len() < 2 {
        return samples.iter().map(models).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(models).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("generation thread panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    /// Corpus BLEU-4 without smoothing.
    pub corpus: f64,
    /// Mean smoothed sentence BLEU-4.
    pub sentence: f64,
    pub samples: usize,
}

/// One prediction model scored against both kinds of reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuRow {
    pub user_targets: Option<BleuScores>,
    pub agent_targets: Option<BleuScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuMatrix {
    pub user_model: BleuRow,
    pub agent_model: BleuRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub wait_samples: usize,
    pub answer_samples: usize,
    pub ptd: ClassificationReport,
    pub baseline: Option<ClassificationReport>,
    pub atlu: ClassificationReport,
    pub ptsu: ClassificationReport,
    pub bleu: BleuMatrix,
}

fn bleu(futures: &BTreeMap<&str, &Generation>, targets: &[PredictionSample], pick: fn(&Generation) -> &Vec<String>) -> Result<Option<BleuScores>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let mut cands = Vec::with_capacity(targets.len());
    let mut refs = Vec::with_capacity(targets.len());
    for t in targets {
        let g = futures
            .get(t.sample_id.as_str())
            .ok_or_else(|| ptd_core::Error::InvalidArgument(format!("no futures for sample {}", t.sample_id)))?;
        cands.push(pick(g).clone());
        refs.push(t.target.tokens.clone());
    }
    Ok(Some(BleuScores {
        corpus: bleu_cumulative(&cands, &refs)?,
        sentence: bleu_sentence_smoothed(&cands, &refs)?,
        samples: targets.len(),
    }))
}

/// Scores every model on the decision and prediction samples of
/// `dialogues`. Futures are looked up in `cached` by sample id and
/// generated when missing.
pub fn evaluate(models: &Models, dialogues: &[Dialogue], cached: &[Generation]) -> Result<Evaluation> {
    let samples: Vec<DecisionSample> = dialogues.iter().flat_map(extract_decision_samples).collect();
    if samples.is_empty() {
        return Err(ptd_core::Error::InvalidArgument("no decision samples to evaluate".into()).into());
    }
    let by_id: BTreeMap<&str, &Generation> = cached.iter().map(|g| (g.sample_id.as_str(), g)).collect();
    let missing: Vec<DecisionSample> = samples
        .iter()
        .filter(|s| !by_id.contains_key(s.sample_id.as_str()))
        .cloned()
        .collect();
    let fresh = generate_futures(&models.user, &models.agent, &missing)?;
    let mut futures = by_id;
    futures.extend(fresh.iter().map(|g| (g.sample_id.as_str(), g)));

    let golds: Vec<Action> = samples.iter().map(|s| s.label).collect();
    let prepared = samples
        .iter()
        .map(|s| {
            let g = futures[s.sample_id.as_str()];
            models.decision.prepare(&s.history, &g.r_a, &g.r_u)
        })
        .collect::<ptd_core::Result<Vec<PreparedPaths>>>()?;
    let mut ptd = Vec::with_capacity(samples.len());
    for chunk in prepared.chunks(EVAL_BATCH) {
        let refs: Vec<&PreparedPaths> = chunk.iter().collect();
        ptd.extend(models.decision.probabilities(&refs)?.iter().map(|p| Decision::label_for(p[1])));
    }
    let baseline = match &models.baseline {
        Some(b) => {
            let seqs = samples.iter().map(|s| b.prepare(&s.history)).collect::<ptd_core::Result<Vec<_>>>()?;
            Some(classification_report(&b.predict_all(&seqs, EVAL_BATCH)?, &golds)?)
        }
        None => None,
    };
    let rule = |f: fn(&[Utterance]) -> ptd_core::Result<ptd_core::baselines::RuleDecision>| -> Result<ClassificationReport> {
        let preds = samples.iter().map(|s| f(&s.history).map(|d| d.label)).collect::<ptd_core::Result<Vec<_>>>()?;
        Ok(classification_report(&preds, &golds)?)
    };

    let user_targets: Vec<PredictionSample> =
        dialogues.iter().flat_map(|d| extract_prediction_samples(d, Speaker::User)).collect();
    let agent_targets: Vec<PredictionSample> =
        dialogues.iter().flat_map(|d| extract_prediction_samples(d, Speaker::Agent)).collect();
    fn r_u(g: &Generation) -> &Vec<String> {
        &g.r_u
    }
    fn r_a(g: &Generation) -> &Vec<String> {
        &g.r_a
    }
    let bleu = BleuMatrix {
        user_model: BleuRow {
            user_targets: bleu(&futures, &user_targets, r_u)?,
            agent_targets: bleu(&futures, &agent_targets, r_u)?,
        },
        agent_model: BleuRow {
            user_targets: bleu(&futures, &user_targets, r_a)?,
            agent_targets: bleu(&futures, &agent_targets, r_a)?,
        },
    };
    Ok(Evaluation {
        wait_samples: golds.iter().filter(|&&a| a == Action::Wait).count(),
        answer_samples: golds.iter().filter(|&&a| a == Action::Answer).count(),
        ptd: classification_report(&ptd, &golds)?,
        baseline,
        atlu: rule(atlu_decide)?,
        ptsu: rule(ptsu_decide)?,
        bleu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub construction: u64,
    pub user_prediction: u64,
    pub agent_prediction: u64,
    pub decision: u64,
    pub baseline: u64,
}

impl StageSeeds {
    pub fn of(config: &ExperimentConfig) -> Self {
        Self {
            construction: config.stage_seed(1),
            user_prediction: config.stage_seed(2),
            agent_prediction: config.stage_seed(3),
            decision: config.stage_seed(4),
            baseline: config.stage_seed(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    /// FNV-1a of the final parameters, in hex.
    pub params: String,
}

impl TrainSummary {
    fn new(log: &TrainLog, fingerprint: u64) -> Self {
        Self {
            epochs: log.epochs.len(),
            best_epoch: log.best_epoch,
            best_score: log.best_score(),
            params: format!("{fingerprint:016x}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Training {
    pub user_prediction: TrainSummary,
    pub agent_prediction: TrainSummary,
    pub decision: TrainSummary,
    pub baseline: Option<TrainSummary>,
}

/// Everything a run reports except wall-clock times, which go to a
/// separate file so that equal seeds give byte-equal reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub seeds: StageSeeds,
    pub corpus: DatasetStats,
    pub decision_samples: SampleCounts,
    pub vocab_size: usize,
    pub vocab_fingerprint: String,
    pub training: Training,
    pub test: Evaluation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Seconds per stage, in execution order.
    pub stages: Vec<(String, f64)>,
    pub total: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: Report,
    pub timings: Timings,
    pub models: Models,
    pub out_dir: PathBuf,
}

struct Clock {
    start: Instant,
    last: Instant,
    timings: Timings,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            timings: Timings::default(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        let secs = (now - self.last).as_secs_f64();
        log::info!("stage {stage} done in {secs:.1}s");
        self.timings.stages.push((stage.to_string(), secs));
        self.last = now;
    }

    fn finish(mut self) -> Timings {
        self.timings.total = self.start.elapsed().as_secs_f64();
        self.timings
    }
}

fn with_seed(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..*train }
}

fn decision_samples(dialogues: &[Dialogue]) -> Vec<DecisionSample> {
    dialogues.iter().flat_map(extract_decision_samples).collect()
}

fn prediction_samples(dialogues: &[Dialogue], role: Speaker) -> Vec<PredictionSample> {
    dialogues.iter().flat_map(|d| extract_prediction_samples(d, role)).collect()
}

fn examples(samples: &[DecisionSample], futures: &BTreeMap<&str, &Generation>) -> Vec<DecisionExample> {
    samples
        .iter()
        .map(|s| {
            let g = futures[s.sample_id.as_str()];
            DecisionExample {
                sample_id: s.sample_id.clone(),
                history: s.history.clone(),
                r_a: g.r_a.clone(),
                r_u: g.r_u.clone(),
                label: s.label,
            }
        })
        .collect()
}

fn save(model: Model, path: &Path) -> Result<Model> {
    checkpoint::save(&model, path)?;
    Ok(model)
}

/// Runs every stage and writes checkpoints, generations, the report and
/// the timings into `config.out_dir`. Checkpoints are written as soon as
/// their model is trained, so a failing later stage leaves them behind.
/// The seeds of the train configs are replaced by the derived stage seeds.
pub fn run_training(config: &ExperimentConfig) -> Result<RunOutput> {
    let seeds = StageSeeds::of(config);
    let out = config.out_dir.clone();
    let mut clock = Clock::new();

    let (corpus, stats) = (|| -> Result<_> {
        let raw = io::read_corpus(&config.corpus)?;
        let slots = match &config.slots {
            Some(p) => io::read_slots(p)?,
            None => SlotTable::default(),
        };
        let (corpus, segment) = dataset::build(&raw, &slots, config.fraction, seeds.construction)?;
        if let Some(d) = corpus.iter().find(|d| d.split.is_none()) {
            return Err(ptd_core::Error::corpus(&d.dialogue_id, "missing split").into());
        }
        if !corpus.iter().any(|d| d.split == Some(Split::Train)) {
            return Err(ptd_core::Error::EmptyTrainSet.into());
        }
        let stats = dataset::stats(&corpus, segment);
        io::create_dir(&out)?;
        Ok((corpus, stats))
    })()
    .stage("corpus")?;
    let train = dataset::split(&corpus, Split::Train);
    let valid = dataset::split(&corpus, Split::Valid);
    let test = dataset::split(&corpus, Split::Test);
    clock.lap("corpus");

    let vocab = Vocabulary::build(
        train.iter().flat_map(|d| d.utterances.iter().flat_map(|u| u.tokens.iter().map(String::as_str))),
        config.min_freq,
    )
    .stage("vocab")?;
    log::info!("vocabulary of {} tokens", vocab.len());
    clock.lap("vocab");

    let mut prediction = |role: Speaker, seed: u64, file: &str, stage: &'static str| -> Result<(PredictionModel, TrainSummary)> {
        let (model, log) = train_prediction_model(
            role,
            &prediction_samples(&train, role),
            &prediction_samples(&valid, role),
            &vocab,
            &config.prediction,
            &with_seed(&config.prediction_train, seed),
        )
        .stage(stage)?;
        let summary = TrainSummary::new(&log, model.params().fingerprint());
        let Model::Prediction(model) = save(Model::Prediction(model), &out.join(file)).stage(stage)? else {
            unreachable!()
        };
        clock.lap(stage);
        Ok((model, summary))
    };
    let (user, user_summary) = prediction(Speaker::User, seeds.user_prediction, USER_CKPT, "user_prediction")?;
    let (agent, agent_summary) = prediction(Speaker::Agent, seeds.agent_prediction, AGENT_CKPT, "agent_prediction")?;

    let (train_s, valid_s, test_s) = (decision_samples(&train), decision_samples(&valid), decision_samples(&test));
    let all: Vec<DecisionSample> = train_s.iter().chain(&valid_s).chain(&test_s).cloned().collect();
    let generations = (|| -> Result<_> {
        let g = generate_futures(&user, &agent, &all)?;
        io::write_jsonl(&out.join(GENERATIONS), &g)?;
        Ok(g)
    })()
    .stage("generation")?;
    clock.lap("generation");
    let futures: BTreeMap<&str, &Generation> = generations.iter().map(|g| (g.sample_id.as_str(), g)).collect();

    let (decision, decision_log) = train_decision_model(
        &examples(&train_s, &futures),
        &examples(&valid_s, &futures),
        &vocab,
        &config.decision,
        &with_seed(&config.decision_train, seeds.decision),
    )
    .stage("decision")?;
    let decision_summary = TrainSummary::new(&decision_log, decision.params().fingerprint());
    let Model::Decision(decision) = save(Model::Decision(decision), &out.join(DECISION_CKPT)).stage("decision")? else {
        unreachable!()
    };
    clock.lap("decision");

    let (baseline, baseline_summary) = match &config.baseline {
        Some(enc) => {
            let (b, log) = train_history_classifier(
                &train_s,
                &valid_s,
                &vocab,
                enc,
                &with_seed(&config.decision_train, seeds.baseline),
            )
            .stage("baseline")?;
            let summary = TrainSummary::new(&log, b.params().fingerprint());
            let Model::HistoryClassifier(b) = save(Model::HistoryClassifier(b), &out.join(BASELINE_CKPT)).stage("baseline")? else {
                unreachable!()
            };
            clock.lap("baseline");
            (Some(b), Some(summary))
        }
        None => (None, None),
    };

    let models = Models {
        user,
        agent,
        decision,
        baseline,
    };
    let test_eval = if test.is_empty() {
        Err(ptd_core::Error::InvalidArgument("the test split is empty".into()).into())
    } else {
        evaluate(&models, &test, &generations)
    }
    .stage("evaluation")?;
    clock.lap("evaluation");

    let report = Report {
        seed: config.seed,
        seeds,
        corpus: stats,
        decision_samples: SampleCounts {
            train: train_s.len(),
            valid: valid_s.len(),
            test: test_s.len(),
        },
        vocab_size: vocab.len(),
        vocab_fingerprint: vocab.fingerprint(),
        training: Training {
            user_prediction: user_summary,
            agent_prediction: agent_summary,
            decision: decision_summary,
            baseline: baseline_summary,
        },
        test: test_eval,
    };
    io::write_json(&out.join(REPORT), &report).stage("report")?;
    let timings = clock.finish();
    io::write_json(&out.join(TIMINGS), &timings).stage("report")?;
    Ok(RunOutput {
        report,
        timings,
        models,
        out_dir: out,
    })
}

/// Evaluates the checkpoints in `dir` on a corpus file, optionally
/// restricted to one split.
pub fn evaluate_checkpoints(dir: &Path, corpus: &Path, split: Option<Split>) -> Result<Evaluation> {
    let models = Models::load(dir)?;
    let dialogues = io::read_corpus(corpus)?;
    let (dialogues, _) = dataset::build(&dialogues, &SlotTable::default(), 0.0, 0)?;
    let dialogues = match split {
        Some(s) => dataset::split(&dialogues, s),
        None => dialogues,
    };
    evaluate(&models, &dialogues, &[])
}

/// Errors unless `history` is a non-empty list ending with a user utterance.
pub fn check_history(history: &[Utterance]) -> Result<()> {
    match history.last() {
        Some(u) if u.speaker() == Speaker::User => Ok(()),
        Some(_) => Err(Error::Core(ptd_core::Error::HistoryEndsWithAgent)),
        None => Err(Error::Core(ptd_core::Error::EmptyHistory)),
    }
}
