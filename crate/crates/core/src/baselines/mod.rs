//! Comparison deciders: two length rules and a history-only classifier.
//!
//! Utterance length is the token count after construction (punctuation
//! removed); "preceding utterances" covers both speakers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_history, Action, DecisionSample, EncodedSequence, Utterance, Vocabulary};
use crate::decision::{require_user_final, Decision, EncoderConfig, Embeddings, TextEncoder};
use crate::numerics::init::{self, SeededRng};
use crate::numerics::layers::Linear;
use crate::numerics::{Bound, ParamStore, Tape, Var};
use crate::training::{dropout_mask, fit, TrainConfig, TrainLog, Trainable};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDecision {
    pub label: Action,
    pub last_len: usize,
    /// Longest (ATLU) or shortest (PTSU) preceding length; 0 when there is
    /// no preceding utterance.
    pub reference_len: usize,
}

fn split_last(history: &[Utterance]) -> Result<(usize, impl Iterator<Item = usize> + '_)> {
    require_user_final(history)?;
    let (last, rest) = history.split_last().expect("checked non-empty");
    Ok((last.tokens.len(), rest.iter().map(|u| u.tokens.len())))
}

/// Answers iff the last utterance is strictly longer than every preceding one.
pub fn atlu_decide(history: &[Utterance]) -> Result<RuleDecision> {
    let (last_len, rest) = split_last(history)?;
    let reference_len = rest.max().unwrap_or(0);
    Ok(RuleDecision {
        label: if last_len > reference_len { Action::Answer } else { Action::Wait },
        last_len,
        reference_len,
    })
}

/// Waits iff the last utterance is strictly shorter than every preceding one.
pub fn ptsu_decide(history: &[Utterance]) -> Result<RuleDecision> {
    let (last_len, rest) = split_last(history)?;
    let shortest = rest.min();
    Ok(RuleDecision {
        label: match shortest {
            Some(m) if last_len < m => Action::Wait,
            _ => Action::Answer,
        },
        last_len,
        reference_len: shortest.unwrap_or(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    emb: Embeddings,
    output: Linear,
}

/// Encoder over the history alone, then a linear layer to two classes.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryClassifier {
    config: EncoderConfig,
    vocab: Vocabulary,
    store: ParamStore,
    encoder: TextEncoder,
    layout: Layout,
}

impl Trainable for HistoryClassifier {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl HistoryClassifier {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init::rng(seed);
        let mut store = ParamStore::new();
        let emb = Embeddings::new(&mut store, &config, vocab.len(), &mut rng);
        let encoder = TextEncoder::new(&mut store, "history", &config, &mut rng);
        let output = Linear::new(&mut store, "output", config.feature_width(), 2, &mut rng);
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            layout: Layout { emb, output },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
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

    pub fn prepare(&self, history: &[Utterance]) -> Result<EncodedSequence> {
        require_user_final(history)?;
        encode_history(history, &self.vocab, &self.config.caps)
    }

    /// Two-way logits `[B, 2]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, batch: &[&EncodedSequence], dropout: Option<&mut SeededRng>) -> Result<Var> {
        let mut f = self.encoder.forward(tape, p, &self.layout.emb, batch)?;
        if let Some(rng) = dropout {
            if self.config.dropout > 0.0 {
                let n = tape.value(f).len();
                f = tape.mul_const(f, dropout_mask(rng, n, self.config.dropout))?;
            }
        }
        self.layout.output.forward(tape, p, f)
    }

    /// Summed negative log-likelihood of the gold actions.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&EncodedSequence],
        labels: &[Action],
        dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let logits = self.logits(tape, p, batch, dropout)?;
        let targets: Vec<usize> = labels.iter().map(|a| a.index()).collect();
        tape.cross_entropy(logits, &targets, None)
    }

    pub fn probabilities(&self, batch: &[&EncodedSequence]) -> Result<Vec<[f64; 2]>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let logits = self.logits(&mut tape, &p, batch, None)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).chunks(2).map(|r| [r[0], r[1]]).collect())
    }

    /// Label (ties wait) and answer probability for one history.
    pub fn predict(&self, history: &[Utterance]) -> Result<(Action, f64)> {
        let seq = self.prepare(history)?;
        let p = self.probabilities(&[&seq])?[0][1];
        Ok((Decision::label_for(p), p))
    }

    pub fn predict_all(&self, inputs: &[EncodedSequence], batch: usize) -> Result<Vec<Action>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch.max(1)) {
            let refs: Vec<&EncodedSequence> = chunk.iter().collect();
            out.extend(self.probabilities(&refs)?.iter().map(|p| Decision::label_for(p[1])));
        }
        Ok(out)
    }

    pub fn accuracy(&self, inputs: &[EncodedSequence], labels: &[Action], batch: usize) -> Result<f64> {
        if inputs.is_empty() {
            return Ok(0.0);
        }
        let preds = self.predict_all(inputs, batch)?;
        let correct = preds.iter().zip(labels).filter(|(p, g)| p == g).count();
        Ok(correct as f64 / inputs.len() as f64)
    }
}

fn prepare_all(m: &HistoryClassifier, samples: &[DecisionSample]) -> Result<(Vec<EncodedSequence>, Vec<Action>)> {
    let seqs = samples.iter().map(|s| m.prepare(&s.history)).collect::<Result<Vec<_>>>()?;
    Ok((seqs, samples.iter().map(|s| s.label).collect()))
}

/// Same protocol as the decision model: best validation accuracy, early
/// stopping, learning-rate decay on plateaus.
pub fn train_history_classifier(
    train: &[DecisionSample],
    valid: &[DecisionSample],
    vocab: &Vocabulary,
    config: &EncoderConfig,
    train_config: &TrainConfig,
) -> Result<(HistoryClassifier, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let model = HistoryClassifier::new(config.clone(), vocab.clone(), train_config.seed)?;
    let (tr, tr_labels) = prepare_all(&model, train)?;
    let (va, va_labels) = prepare_all(&model, valid)?;
    let (eval, eval_labels) = if va.is_empty() { (&tr, &tr_labels) } else { (&va, &va_labels) };
    let lengths: Vec<usize> = tr.iter().map(EncodedSequence::len).collect();
    let bs = train_config.batch_size;
    fit(
        model,
        &lengths,
        train_config,
        |m, tape, p, idx, rng| {
            let batch: Vec<&EncodedSequence> = idx.iter().map(|&i| &tr[i]).collect();
            let labels: Vec<Action> = idx.iter().map(|&i| tr_labels[i]).collect();
            let loss = m.batch_loss(tape, p, &batch, &labels, Some(rng))?;
            tape.mul_const(loss, vec![1.0 / idx.len() as f64])
        },
        |m| m.accuracy(eval, eval_labels, bs),
    )
}
