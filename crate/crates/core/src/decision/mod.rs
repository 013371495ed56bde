//! The wait-or-answer decision model. Three encoders of the same structure
//! (separate weights, one shared embedding table) read the history `x`, the
//! simulated agent reply `a` and the simulated user supplement `u`:
//!
//! `D_a = W₁[C_x; C_a] + b₁`, `D_u = W₂[C_x; C_u] + b₂`,
//! `P = softmax(W₄ relu(W₃[D_a; D_u] + b₃) + b₄)`, index 1 = answer.

pub mod encoder;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_continuation, encode_history, Action, EncodedSequence, Speaker, Utterance, Vocabulary};
use crate::numerics::init::{self, SeededRng};
use crate::numerics::layers::Linear;
use crate::numerics::{Axis, Bound, ParamStore, Tape, Var};
use crate::training::{dropout_mask, fit, TrainConfig, TrainLog, Trainable};
use crate::{Error, Result};

pub use encoder::{EncoderArch, EncoderConfig, Embeddings, TextEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionConfig {
    pub encoder: EncoderConfig,
    /// Width of each dialogue-path vector `D_a`, `D_u`.
    pub fusion: usize,
    pub hidden: usize,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: 100,
            hidden: 100,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.fusion == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(format!("decision config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub label: Action,
    pub p_answer: f64,
    pub r_u: Vec<String>,
    pub r_a: Vec<String>,
}

impl Decision {
    /// Answers only when the answer probability strictly exceeds one half.
    pub fn label_for(p_answer: f64) -> Action {
        if p_answer > 0.5 {
            Action::Answer
        } else {
            Action::Wait
        }
    }
}

/// A labelled history with both simulated futures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionExample {
    pub sample_id: String,
    pub history: Vec<Utterance>,
    pub r_a: Vec<String>,
    pub r_u: Vec<String>,
    pub label: Action,
}

/// The three encoded inputs of one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPaths {
    pub history: EncodedSequence,
    pub agent: EncodedSequence,
    pub user: EncodedSequence,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    emb: Embeddings,
    history: TextEncoder,
    agent: TextEncoder,
    user: TextEncoder,
    answer_path: Linear,
    wait_path: Linear,
    hidden: Linear,
    output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionModel {
    config: DecisionConfig,
    vocab: Vocabulary,
    store: ParamStore,
    layout: Layout,
}

impl Trainable for DecisionModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

pub(crate) fn require_user_final(history: &[Utterance]) -> Result<()> {
    match history.last() {
        None => Err(Error::EmptyHistory),
        Some(u) if u.speaker_id == Speaker::Agent => Err(Error::HistoryEndsWithAgent),
        Some(_) => Ok(()),
    }
}

impl DecisionModel {
    pub fn new(config: DecisionConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init::rng(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let f = enc.feature_width();
        let emb = Embeddings::new(&mut store, enc, vocab.len(), rng);
        let history = TextEncoder::new(&mut store, "history", enc, rng);
        let agent = TextEncoder::new(&mut store, "agent", enc, rng);
        let user = TextEncoder::new(&mut store, "user", enc, rng);
        let answer_path = Linear::new(&mut store, "answer_path", 2 * f, config.fusion, rng);
        let wait_path = Linear::new(&mut store, "wait_path", 2 * f, config.fusion, rng);
        let hidden = Linear::new(&mut store, "hidden", 2 * config.fusion, config.hidden, rng);
        let output = Linear::new(&mut store, "output", config.hidden, 2, rng);
        Ok(Self {
            config,
            vocab,
            store,
            layout: Layout {
                emb,
                history,
                agent,
                user,
                answer_path,
                wait_path,
                hidden,
                output,
            },
        })
    }

    pub fn config(&self) -> &DecisionConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        crate::seq2seq::check_layout(&self.store, &params)?;
        self.store = params;
        Ok(())
    }

    /// Encodes the history and tags each simulated future as the utterance
    /// that would follow it.
    pub fn prepare(&self, history: &[Utterance], r_a: &[String], r_u: &[String]) -> Result<PreparedPaths> {
        require_user_final(history)?;
        let caps = &self.config.encoder.caps;
        Ok(PreparedPaths {
            history: encode_history(history, &self.vocab, caps)?,
            agent: encode_continuation(history, r_a, Speaker::Agent, &self.vocab, caps)?,
            user: encode_continuation(history, r_u, Speaker::User, &self.vocab, caps)?,
        })
    }

    /// Path features `(C_x, C_a, C_u)`, each `[B, F]`. With `dropout` set,
    /// each feature row is masked with the given generator.
    pub fn encode_path_features(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&PreparedPaths],
        dropout: Option<&mut SeededRng>,
    ) -> Result<(Var, Var, Var)> {
        let l = &self.layout;
        let xs: Vec<&EncodedSequence> = batch.iter().map(|b| &b.history).collect();
        let as_: Vec<&EncodedSequence> = batch.iter().map(|b| &b.agent).collect();
        let us: Vec<&EncodedSequence> = batch.iter().map(|b| &b.user).collect();
        let mut cx = l.history.forward(tape, p, &l.emb, &xs)?;
        let mut ca = l.agent.forward(tape, p, &l.emb, &as_)?;
        let mut cu = l.user.forward(tape, p, &l.emb, &us)?;
        if let Some(rng) = dropout {
            let rate = self.config.encoder.dropout;
            if rate > 0.0 {
                for v in [&mut cx, &mut ca, &mut cu] {
                    let n = tape.value(*v).len();
                    *v = tape.mul_const(*v, dropout_mask(rng, n, rate))?;
                }
            }
        }
        Ok((cx, ca, cu))
    }

    /// Two-way logits `[B, 2]` from path features.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, cx: Var, ca: Var, cu: Var) -> Result<Var> {
        let l = &self.layout;
        let xa = tape.concat(&[cx, ca], Axis::Cols)?;
        let xu = tape.concat(&[cx, cu], Axis::Cols)?;
        let d_a = l.answer_path.forward(tape, p, xa)?;
        let d_u = l.wait_path.forward(tape, p, xu)?;
        let d = tape.concat(&[d_a, d_u], Axis::Cols)?;
        let h = l.hidden.forward(tape, p, d)?;
        let h = tape.relu(h)?;
        l.output.forward(tape, p, h)
    }

    /// Summed negative log-likelihood of the gold actions.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&PreparedPaths],
        labels: &[Action],
        dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let (cx, ca, cu) = self.encode_path_features(tape, p, batch, dropout)?;
        let logits = self.classify(tape, p, cx, ca, cu)?;
        let targets: Vec<usize> = labels.iter().map(|a| a.index()).collect();
        tape.cross_entropy(logits, &targets, None)
    }

    /// `[P(wait), P(answer)]` for each prepared input.
    pub fn probabilities(&self, batch: &[&PreparedPaths]) -> Result<Vec<[f64; 2]>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let (cx, ca, cu) = self.encode_path_features(&mut tape, &p, batch, None)?;
        let logits = self.classify(&mut tape, &p, cx, ca, cu)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).chunks(2).map(|r| [r[0], r[1]]).collect())
    }

    /// Pooled path features of one input, without dropout.
    pub fn path_features(&self, paths: &PreparedPaths) -> Result<[Vec<f64>; 3]> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let (cx, ca, cu) = self.encode_path_features(&mut tape, &p, &[paths], None)?;
        Ok([tape.value(cx).to_vec(), tape.value(ca).to_vec(), tape.value(cu).to_vec()])
    }

    /// `P` from precomputed features.
    pub fn classify_features(&self, cx: &[f64], ca: &[f64], cu: &[f64]) -> Result<[f64; 2]> {
        let f = self.config.encoder.feature_width();
        if [cx.len(), ca.len(), cu.len()].iter().any(|&n| n != f) {
            return Err(Error::shape(
                "classify",
                format!("feature lengths {}, {}, {}; expected {f}", cx.len(), ca.len(), cu.len()),
            ));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let vars: Vec<Var> = [cx, ca, cu]
            .iter()
            .map(|x| tape.constant(&[1, f], x.to_vec()))
            .collect::<Result<_>>()?;
        let logits = self.classify(&mut tape, &p, vars[0], vars[1], vars[2])?;
        let probs = tape.softmax(logits)?;
        let v = tape.value(probs);
        Ok([v[0], v[1]])
    }

    pub fn decide(&self, history: &[Utterance], r_a: &[String], r_u: &[String]) -> Result<Decision> {
        let paths = self.prepare(history, r_a, r_u)?;
        let [probs] = self.probabilities(&[&paths])?[..] else {
            unreachable!("one input gives one row")
        };
        Ok(Decision {
            label: Decision::label_for(probs[1]),
            p_answer: probs[1],
            r_u: r_u.to_vec(),
            r_a: r_a.to_vec(),
        })
    }

    /// Fraction of inputs whose decided label equals the gold one.
    pub fn accuracy(&self, inputs: &[PreparedPaths], labels: &[Action], batch: usize) -> Result<f64> {
        if inputs.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for (chunk, gold) in inputs.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
            let refs: Vec<&PreparedPaths> = chunk.iter().collect();
            for (p, g) in self.probabilities(&refs)?.iter().zip(gold) {
                correct += usize::from(Decision::label_for(p[1]) == *g);
            }
        }
        Ok(correct as f64 / inputs.len() as f64)
    }
}

fn prepare_all(model: &DecisionModel, examples: &[DecisionExample]) -> Result<(Vec<PreparedPaths>, Vec<Action>)> {
    let prepared = examples
        .iter()
        .map(|e| model.prepare(&e.history, &e.r_a, &e.r_u))
        .collect::<Result<Vec<_>>>()?;
    Ok((prepared, examples.iter().map(|e| e.label).collect()))
}

/// Trains on examples whose futures come from frozen prediction models,
/// keeping the epoch with the best validation accuracy (training accuracy
/// when `valid` is empty).
pub fn train_decision_model(
    train: &[DecisionExample],
    valid: &[DecisionExample],
    vocab: &Vocabulary,
    config: &DecisionConfig,
    train_config: &TrainConfig,
) -> Result<(DecisionModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let model = DecisionModel::new(config.clone(), vocab.clone(), train_config.seed)?;
    let (tr, tr_labels) = prepare_all(&model, train)?;
    let (va, va_labels) = prepare_all(&model, valid)?;
    let (eval, eval_labels) = if va.is_empty() { (&tr, &tr_labels) } else { (&va, &va_labels) };
    let lengths: Vec<usize> = tr.iter().map(|p| p.history.len()).collect();
    let bs = train_config.batch_size;
    fit(
        model,
        &lengths,
        train_config,
        |m, tape, p, idx, rng| {
            let batch: Vec<&PreparedPaths> = idx.iter().map(|&i| &tr[i]).collect();
            let labels: Vec<Action> = idx.iter().map(|&i| tr_labels[i]).collect();
            let loss = m.batch_loss(tape, p, &batch, &labels, Some(rng))?;
            tape.mul_const(loss, vec![1.0 / idx.len() as f64])
        },
        |m| m.accuracy(eval, eval_labels, bs),
    )
}
