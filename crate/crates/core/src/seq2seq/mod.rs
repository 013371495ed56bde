//! User and agent prediction models: an LSTM encoder over tag-augmented
//! history tokens and an LSTM decoder with multiplicative attention.
//!
//! Per decoder step `t` with encoder states `s_j`:
//! `a_t = softmax_j(h_tᵀ W_a s_j)`, `c_t = Σ_j a_tj s_j`,
//! `h̃_t = tanh(W_c [c_t; h_t] + b_c)`, `p_t = softmax(W_v h̃_t + b_v)`.

mod beam;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_history, EncodedSequence, PredictionSample, Speaker, TagCaps, Utterance, Vocabulary};
use crate::corpus::{BOS, EOS, PAD};
use crate::numerics::init::{self, SeededRng};
use crate::numerics::layers::{Linear, Lstm, RECURRENT_INIT};
use crate::numerics::{Axis, Bound, ParamId, ParamStore, Tape, Var};
use crate::training::{fit, TrainConfig, TrainLog, Trainable};
use crate::{Error, Result};

pub use beam::GenerationResult;

/// Additive attention mask for padded encoder positions.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionConfig {
    pub d_tok: usize,
    pub d_turn: usize,
    pub d_sub: usize,
    pub d_spk: usize,
    pub hidden: usize,
    pub caps: TagCaps,
    pub beam_size: usize,
    /// Decoder steps per generation, the end token included.
    pub max_gen_len: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            d_tok: 64,
            d_turn: 8,
            d_sub: 8,
            d_spk: 8,
            hidden: 128,
            caps: TagCaps::default(),
            beam_size: 4,
            max_gen_len: 30,
        }
    }
}

impl PredictionConfig {
    pub fn input_width(&self) -> usize {
        self.d_tok + self.d_turn + self.d_sub + self.d_spk
    }

    pub fn validate(&self) -> Result<()> {
        self.caps.validate()?;
        if self.d_tok == 0 || self.hidden == 0 || self.beam_size == 0 || self.max_gen_len == 0 {
            return Err(Error::InvalidArgument(format!("prediction config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    tok: ParamId,
    turn: ParamId,
    sub: ParamId,
    spk: ParamId,
    encoder: Lstm,
    decoder: Lstm,
    w_a: ParamId,
    combine: Linear,
    output: Linear,
}

/// A trained or freshly initialised prediction model. Immutable once built;
/// generation takes `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionModel {
    role: Speaker,
    config: PredictionConfig,
    vocab: Vocabulary,
    store: ParamStore,
    layout: Layout,
}

impl Trainable for PredictionModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// History ids and decoder targets, encoded once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub history: EncodedSequence,
    pub target: Vec<usize>,
}

struct Encoded {
    /// `[B,T,h]`
    states: Var,
    h: Var,
    c: Var,
    steps: usize,
    /// Per row, number of leading padded steps.
    pad: Vec<usize>,
}

impl PredictionModel {
    pub fn new(role: Speaker, config: PredictionConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init::rng(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let (v, h) = (vocab.len(), config.hidden);
        let caps = config.caps;
        let emb = |store: &mut ParamStore, rng: &mut SeededRng, name: &str, rows: usize, d: usize| {
            store.add(name, init::uniform(rng, &[rows, d], RECURRENT_INIT))
        };
        let tok = emb(&mut store, rng, "tok_emb", v, config.d_tok);
        let turn = emb(&mut store, rng, "turn_emb", caps.turn_slots(), config.d_turn);
        let sub = emb(&mut store, rng, "sub_emb", caps.sub_turn_slots(), config.d_sub);
        let spk = emb(&mut store, rng, "spk_emb", 2, config.d_spk);
        let encoder = Lstm::new(&mut store, "encoder", config.input_width(), h, rng);
        let decoder = Lstm::new(&mut store, "decoder", config.d_tok, h, rng);
        let w_a = store.add("attn.w_a", init::uniform(rng, &[h, h], RECURRENT_INIT));
        let combine = Linear::new(&mut store, "attn.combine", 2 * h, h, rng);
        let output = Linear::new(&mut store, "output", h, v, rng);
        Ok(Self {
            role,
            config,
            vocab,
            store,
            layout: Layout {
                tok,
                turn,
                sub,
                spk,
                encoder,
                decoder,
                w_a,
                combine,
                output,
            },
        })
    }

    pub fn role(&self) -> Speaker {
        self.role
    }

    pub fn config(&self) -> &PredictionConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Replaces parameter values, checking names and shapes against this
    /// model's layout.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        check_layout(&self.store, &params)?;
        self.store = params;
        Ok(())
    }

    pub fn prepare(&self, sample: &PredictionSample) -> Result<PreparedSample> {
        let history = encode_history(&sample.history, &self.vocab, &self.config.caps)?;
        let mut target = self.vocab.encode(&sample.target.tokens);
        target.push(EOS);
        Ok(PreparedSample { history, target })
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, tok: &[usize], turn: &[usize], sub: &[usize], spk: &[usize]) -> Result<Var> {
        let l = &self.layout;
        let a = tape.embedding_lookup(p[l.tok], tok)?;
        let b = tape.embedding_lookup(p[l.turn], turn)?;
        let c = tape.embedding_lookup(p[l.sub], sub)?;
        let d = tape.embedding_lookup(p[l.spk], spk)?;
        tape.concat(&[a, b, c, d], Axis::Cols)
    }

    /// Runs the encoder over left-padded histories.
    fn encode(&self, tape: &mut Tape, p: &Bound, seqs: &[&EncodedSequence]) -> Result<Encoded> {
        let bsz = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::EmptyHistory);
        }
        let pad: Vec<usize> = seqs.iter().map(|s| steps - s.len()).collect();
        let n = steps * bsz;
        let (mut tok, mut turn, mut sub, mut spk) = (vec![PAD; n], vec![0; n], vec![0; n], vec![0; n]);
        for t in 0..steps {
            for (b, s) in seqs.iter().enumerate() {
                if t >= pad[b] {
                    let i = t - pad[b];
                    let k = t * bsz + b;
                    tok[k] = s.tokens[i];
                    turn[k] = s.turns[i];
                    sub[k] = s.sub_turns[i];
                    spk[k] = s.speakers[i];
                }
            }
        }
        let x = self.embed(tape, p, &tok, &turn, &sub, &spk)?;
        let enc = self.layout.encoder;
        let xp = enc.project_inputs(tape, p, x)?;
        let hd = self.config.hidden;
        let mut h = tape.constant(&[bsz, hd], vec![0.0; bsz * hd])?;
        let mut c = tape.constant(&[bsz, hd], vec![0.0; bsz * hd])?;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.slice(xp, Axis::Rows, t * bsz, bsz)?;
            let keep: Vec<bool> = pad.iter().map(|&q| t >= q).collect();
            (h, c) = enc.step(tape, p, xt, h, c, Some(&keep))?;
            states.push(h);
        }
        let states = tape.stack(&states)?;
        Ok(Encoded { states, h, c, steps, pad })
    }

    /// Attention and output layers for decoder states `dec` of shape
    /// `[B,N,h]`: returns logits `[B·N, |V|]`.
    fn attend(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, dec: Var, n: usize) -> Result<Var> {
        let l = &self.layout;
        let hd = self.config.hidden;
        let bsz = enc.pad.len();
        let flat = tape.reshape(dec, &[bsz * n, hd])?;
        let q = tape.matmul(flat, p[l.w_a])?;
        let q = tape.reshape(q, &[bsz, n, hd])?;
        let mut scores = tape.batch_matmul(q, enc.states, true)?;
        if enc.pad.iter().any(|&q| q > 0) {
            let t = enc.steps;
            let mut mask = vec![0.0; bsz * n * t];
            for (b, &q) in enc.pad.iter().enumerate() {
                for row in mask[b * n * t..(b + 1) * n * t].chunks_mut(t) {
                    row[..q].fill(MASKED);
                }
            }
            let m = tape.constant(&[bsz, n, t], mask)?;
            scores = tape.add(scores, m)?;
        }
        let alpha = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(alpha, enc.states, false)?;
        let ctx = tape.reshape(ctx, &[bsz * n, hd])?;
        let joined = tape.concat(&[ctx, flat], Axis::Cols)?;
        let mixed = l.combine.forward(tape, p, joined)?;
        let mixed = tape.tanh(mixed)?;
        l.output.forward(tape, p, mixed)
    }

    /// Summed teacher-forced negative log-likelihood of the batch targets
    /// (end token included).
    pub fn batch_loss(&self, tape: &mut Tape, p: &Bound, batch: &[&PreparedSample]) -> Result<Var> {
        if batch.iter().any(|s| s.target.is_empty()) {
            return Err(Error::InvalidArgument("empty decoder target".into()));
        }
        let seqs: Vec<&EncodedSequence> = batch.iter().map(|s| &s.history).collect();
        let enc = self.encode(tape, p, &seqs)?;
        let bsz = batch.len();
        let n = batch.iter().map(|s| s.target.len()).max().unwrap_or(0);
        let mut inputs = vec![PAD; n * bsz];
        let mut targets = vec![PAD; bsz * n];
        let mut weights = vec![0.0; bsz * n];
        for (b, s) in batch.iter().enumerate() {
            for (t, &y) in s.target.iter().enumerate() {
                inputs[t * bsz + b] = if t == 0 { BOS } else { s.target[t - 1] };
                targets[b * n + t] = y;
                weights[b * n + t] = 1.0;
            }
        }
        let dec = self.layout.decoder;
        let emb = tape.embedding_lookup(p[self.layout.tok], &inputs)?;
        let xp = dec.project_inputs(tape, p, emb)?;
        let (mut h, mut c) = (enc.h, enc.c);
        let mut outs = Vec::with_capacity(n);
        for t in 0..n {
            let xt = tape.slice(xp, Axis::Rows, t * bsz, bsz)?;
            (h, c) = dec.step(tape, p, xt, h, c, None)?;
            outs.push(h);
        }
        let states = tape.stack(&outs)?;
        let logits = self.attend(tape, p, &enc, states, n)?;
        tape.cross_entropy(logits, &targets, Some(&weights))
    }

    /// `−Σ_t log p_t[gold_t]` for one sample, on the given tape.
    pub fn forward_teacher_forced(&self, tape: &mut Tape, p: &Bound, sample: &PredictionSample) -> Result<Var> {
        let prepared = self.prepare(sample)?;
        self.batch_loss(tape, p, &[&prepared])
    }

    /// Evaluates the teacher-forced loss of one sample.
    pub fn teacher_forced_loss(&self, sample: &PredictionSample) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let l = self.forward_teacher_forced(&mut tape, &p, sample)?;
        Ok(tape.value(l)[0])
    }

    /// Mean per-sample loss over prepared samples, in chunks of `batch`.
    pub fn mean_loss(&self, samples: &[PreparedSample], batch: usize) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in samples.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape)?;
            let refs: Vec<&PreparedSample> = chunk.iter().collect();
            let l = self.batch_loss(&mut tape, &p, &refs)?;
            total += tape.value(l)[0];
        }
        Ok(total / samples.len() as f64)
    }

    /// Log-probability of `tokens` followed by the end token, scored by
    /// teacher forcing.
    pub fn score_continuation(&self, history: &[Utterance], tokens: &[usize], completed: bool) -> Result<f64> {
        let h = encode_history(history, &self.vocab, &self.config.caps)?;
        let mut target = tokens.to_vec();
        if completed {
            target.push(EOS);
        }
        let seqs = [&h];
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let enc = self.encode(&mut tape, &p, &seqs)?;
        let dec = self.layout.decoder;
        let (mut hs, mut cs) = (enc.h, enc.c);
        let mut outs = Vec::new();
        for t in 0..target.len() {
            let prev = if t == 0 { BOS } else { target[t - 1] };
            let e = tape.embedding_lookup(p[self.layout.tok], &[prev])?;
            let xp = dec.project_inputs(&mut tape, &p, e)?;
            (hs, cs) = dec.step(&mut tape, &p, xp, hs, cs, None)?;
            outs.push(hs);
        }
        if outs.is_empty() {
            return Ok(0.0);
        }
        let states = tape.stack(&outs)?;
        let logits = self.attend(&mut tape, &p, &enc, states, target.len())?;
        let logp = tape.log_softmax(logits)?;
        let v = self.vocab.len();
        Ok(target.iter().enumerate().map(|(t, &y)| tape.value(logp)[t * v + y]).sum())
    }

    /// Beam search with the configured width and length.
    pub fn generate(&self, history: &[Utterance]) -> Result<GenerationResult> {
        self.generate_with(history, self.config.beam_size, self.config.max_gen_len)
    }

    pub fn generate_with(&self, history: &[Utterance], beam_size: usize, max_len: usize) -> Result<GenerationResult> {
        let h = encode_history(history, &self.vocab, &self.config.caps)?;
        beam::search(self, &h, beam_size, max_len)
    }
}

/// Errors unless `new` has exactly the names and shapes of `current`.
pub(crate) fn check_layout(current: &ParamStore, new: &ParamStore) -> Result<()> {
    if current.names() != new.names() {
        return Err(Error::InvalidArgument("parameter names do not match the model layout".into()));
    }
    for ((name, a), b) in current.iter().zip(new.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::shape("load_params", format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

/// Teacher-forced training (summed loss per batch, averaged over samples);
/// keeps the epoch with the lowest mean validation loss.
pub fn train_prediction_model(
    role: Speaker,
    train: &[PredictionSample],
    valid: &[PredictionSample],
    vocab: &Vocabulary,
    config: &PredictionConfig,
    train_config: &TrainConfig,
) -> Result<(PredictionModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if let Some(s) = train.iter().chain(valid).find(|s| s.role != role) {
        return Err(Error::InvalidArgument(format!("sample {} has role {:?}", s.sample_id, s.role)));
    }
    let model = PredictionModel::new(role, *config, vocab.clone(), train_config.seed)?;
    let prep = |xs: &[PredictionSample]| xs.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>();
    let train_p = prep(train)?;
    let valid_p = if valid.is_empty() { train_p.clone() } else { prep(valid)? };
    let lengths: Vec<usize> = train_p.iter().map(|s| s.history.len()).collect();
    let bs = train_config.batch_size;
    fit(
        model,
        &lengths,
        train_config,
        |m: &PredictionModel, tape: &mut Tape, p: &Bound, idx: &[usize], _: &mut SeededRng| {
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &train_p[i]).collect();
            let l = m.batch_loss(tape, p, &batch)?;
            tape.mul_const(l, vec![1.0 / idx.len() as f64])
        },
        |m| Ok(-m.mean_loss(&valid_p, bs)?),
    )
}

#[cfg(test)]
mod tests;
