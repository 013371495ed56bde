//! Fixed-length text encoders over tag-augmented token embeddings: a
//! convolutional encoder with max-over-time pooling and a bidirectional GRU.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSequence, TagCaps, PAD};
use crate::numerics::init::{self, SeededRng};
use crate::numerics::layers::Gru;
use crate::numerics::{Axis, Bound, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Embedding init range, as for randomly initialised word vectors in
/// convolutional sentence classifiers.
const EMBEDDING_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    TextCnn,
    BiGru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    pub d_tok: usize,
    pub d_turn: usize,
    pub d_sub: usize,
    pub d_spk: usize,
    /// Convolution filter widths.
    pub widths: Vec<usize>,
    /// Filters per width.
    pub n_filters: usize,
    /// Hidden size per direction of the recurrent encoder.
    pub gru_hidden: usize,
    /// Dropout on pooled features during training.
    pub dropout: f64,
    pub caps: TagCaps,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: EncoderArch::TextCnn,
            d_tok: 32,
            d_turn: 8,
            d_sub: 8,
            d_spk: 8,
            widths: vec![3, 4, 5],
            n_filters: 100,
            gru_hidden: 64,
            dropout: 0.3,
            caps: TagCaps::default(),
        }
    }
}

impl EncoderConfig {
    pub fn input_width(&self) -> usize {
        self.d_tok + self.d_turn + self.d_sub + self.d_spk
    }

    /// Length of the feature vector an encoder produces.
    pub fn feature_width(&self) -> usize {
        match self.arch {
            EncoderArch::TextCnn => self.widths.len() * self.n_filters,
            EncoderArch::BiGru => 2 * self.gru_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.caps.validate()?;
        let bad_arch = match self.arch {
            EncoderArch::TextCnn => self.widths.is_empty() || self.widths.contains(&0) || self.n_filters == 0,
            EncoderArch::BiGru => self.gru_hidden == 0,
        };
        if self.d_tok == 0 || bad_arch || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("encoder config: {self:?}")));
        }
        Ok(())
    }
}

/// Token and tag embedding tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embeddings {
    pub tok: ParamId,
    pub turn: ParamId,
    pub sub: ParamId,
    pub spk: ParamId,
}

impl Embeddings {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, vocab_size: usize, rng: &mut SeededRng) -> Self {
        let mut table = |name: &str, rows: usize, d: usize| store.add(name, init::uniform(rng, &[rows, d], EMBEDDING_INIT));
        Self {
            tok: table("tok_emb", vocab_size, config.d_tok),
            turn: table("turn_emb", config.caps.turn_slots(), config.d_turn),
            sub: table("sub_emb", config.caps.sub_turn_slots(), config.d_sub),
            spk: table("spk_emb", 2, config.d_spk),
        }
    }

    /// `[N, d_in]` rows for the given column-wise ids.
    fn lookup(&self, tape: &mut Tape, p: &Bound, ids: &Columns) -> Result<Var> {
        let a = tape.embedding_lookup(p[self.tok], &ids.tokens)?;
        let b = tape.embedding_lookup(p[self.turn], &ids.turns)?;
        let c = tape.embedding_lookup(p[self.sub], &ids.sub_turns)?;
        let d = tape.embedding_lookup(p[self.spk], &ids.speakers)?;
        tape.concat(&[a, b, c, d], Axis::Cols)
    }
}

/// Flattened batch ids; padding positions carry PAD and zero tags.
struct Columns {
    tokens: Vec<usize>,
    turns: Vec<usize>,
    sub_turns: Vec<usize>,
    speakers: Vec<usize>,
}

impl Columns {
    fn padding(n: usize) -> Self {
        Self {
            tokens: vec![PAD; n],
            turns: vec![0; n],
            sub_turns: vec![0; n],
            speakers: vec![0; n],
        }
    }

    fn set(&mut self, k: usize, s: &EncodedSequence, i: usize) {
        self.tokens[k] = s.tokens[i];
        self.turns[k] = s.turns[i];
        self.sub_turns[k] = s.sub_turns[i];
        self.speakers[k] = s.speakers[i];
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvFilter {
    pub width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextEncoder {
    Cnn(Vec<ConvFilter>),
    BiGru { forward: Gru, backward: Gru },
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let d = config.input_width();
        match config.arch {
            EncoderArch::TextCnn => TextEncoder::Cnn(
                config
                    .widths
                    .iter()
                    .map(|&w| ConvFilter {
                        width: w,
                        weight: store.add(
                            format!("{name}.conv{w}.weight"),
                            init::kaiming_normal(rng, &[w * d, config.n_filters], w * d),
                        ),
                        bias: store.add(format!("{name}.conv{w}.bias"), init::zeros(&[config.n_filters])),
                    })
                    .collect(),
            ),
            EncoderArch::BiGru => TextEncoder::BiGru {
                forward: Gru::new(store, &format!("{name}.fwd"), d, config.gru_hidden, rng),
                backward: Gru::new(store, &format!("{name}.bwd"), d, config.gru_hidden, rng),
            },
        }
    }

    /// Encodes each sequence to a fixed-length feature row: `→ [B, F]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, emb: &Embeddings, seqs: &[&EncodedSequence]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty encoder batch".into()));
        }
        match self {
            TextEncoder::Cnn(filters) => cnn_forward(filters, tape, p, emb, seqs),
            TextEncoder::BiGru { forward, backward } => {
                let f = gru_forward(forward, tape, p, emb, seqs, false)?;
                let b = gru_forward(backward, tape, p, emb, seqs, true)?;
                tape.concat(&[f, b], Axis::Cols)
            }
        }
    }
}

/// Each row is left-padded to the widest filter when shorter, then
/// right-padded to the batch length; pooling only sees a row's own windows,
/// so a row's features do not depend on the rest of the batch.
fn cnn_forward(filters: &[ConvFilter], tape: &mut Tape, p: &Bound, emb: &Embeddings, seqs: &[&EncodedSequence]) -> Result<Var> {
    let wmax = filters.iter().map(|f| f.width).max().unwrap_or(1);
    let rows: Vec<usize> = seqs.iter().map(|s| s.len().max(wmax)).collect();
    let len = rows.iter().copied().max().unwrap_or(wmax);
    let bsz = seqs.len();
    let mut ids = Columns::padding(bsz * len);
    for (b, s) in seqs.iter().enumerate() {
        let offset = rows[b] - s.len();
        for i in 0..s.len() {
            ids.set(b * len + offset + i, s, i);
        }
    }
    let x = emb.lookup(tape, p, &ids)?;
    let d = tape.shape(x)[1];
    let x = tape.reshape(x, &[bsz, len, d])?;
    let mut pooled = Vec::with_capacity(filters.len());
    for f in filters {
        let conv = tape.conv1d(x, p[f.weight], p[f.bias], f.width)?;
        let valid: Vec<usize> = rows.iter().map(|&r| r - f.width + 1).collect();
        pooled.push(tape.max_over_time_pool(conv, &valid)?);
    }
    let features = tape.concat(&pooled, Axis::Cols)?;
    tape.relu(features)
}

/// Final hidden state of a GRU over left-padded rows, optionally reading
/// each row back to front. An empty row encodes to zeros.
fn gru_forward(
    cell: &Gru,
    tape: &mut Tape,
    p: &Bound,
    emb: &Embeddings,
    seqs: &[&EncodedSequence],
    reverse: bool,
) -> Result<Var> {
    let bsz = seqs.len();
    let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let pad: Vec<usize> = seqs.iter().map(|s| steps - s.len()).collect();
    let mut ids = Columns::padding(steps * bsz);
    for (b, s) in seqs.iter().enumerate() {
        let n = s.len();
        for i in 0..n {
            let src = if reverse { n - 1 - i } else { i };
            ids.set((pad[b] + i) * bsz + b, s, src);
        }
    }
    let x = emb.lookup(tape, p, &ids)?;
    let xp = cell.project_inputs(tape, p, x)?;
    let mut h = tape.constant(&[bsz, cell.hidden], vec![0.0; bsz * cell.hidden])?;
    for t in 0..steps {
        let xt = tape.slice(xp, Axis::Rows, t * bsz, bsz)?;
        let keep: Vec<bool> = pad.iter().map(|&q| t >= q).collect();
        h = cell.step(tape, p, xt, h, Some(&keep))?;
    }
    Ok(h)
}
