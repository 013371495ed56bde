use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::PredictionModel;
use crate::corpus::{EncodedSequence, BOS, EOS};
use crate::numerics::{Axis, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated tokens without the end token.
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// Sum of per-step log-probabilities, the end token's included when
    /// `completed`.
    pub log_prob: f64,
    pub completed: bool,
    /// Every finished hypothesis and the surviving live ones, best first.
    pub all_beams: Vec<(Vec<String>, f64)>,
}

struct Hyp {
    ids: Vec<usize>,
    log_prob: f64,
}

/// Beam search without length normalisation. At each step the `beam_size`
/// best extensions over all live hypotheses are kept (ties to the lower
/// token id); extensions ending in the end token are set aside. Search stops
/// when no live hypothesis remains, the best finished one scores at least
/// as well as the best live one, or after `max_len` steps.
pub(super) fn search(
    model: &PredictionModel,
    history: &EncodedSequence,
    beam_size: usize,
    max_len: usize,
) -> Result<GenerationResult> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::InvalidArgument("beam_size and max_len must be positive".into()));
    }
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape)?;
    let enc = model.encode(&mut tape, &p, &[history])?;
    let hd = model.config.hidden;
    let steps = enc.steps;
    // Encoder states as [T,h] and [h,T] for single-row attention.
    let states = tape.value(enc.states).to_vec();
    let mut states_t = vec![0.0; steps * hd];
    for t in 0..steps {
        for j in 0..hd {
            states_t[j * steps + t] = states[t * hd + j];
        }
    }
    let keys = tape.constant(&[hd, steps], states_t)?;
    let values = tape.constant(&[steps, hd], states)?;
    let l = model.layout;
    let vsize = model.vocab.len();

    let mut live = vec![Hyp {
        ids: Vec::new(),
        log_prob: 0.0,
    }];
    let (mut h, mut c) = (enc.h, enc.c);
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let k = live.len();
        let prev: Vec<usize> = live.iter().map(|x| x.ids.last().copied().unwrap_or(BOS)).collect();
        let e = tape.embedding_lookup(p[l.tok], &prev)?;
        let xp = l.decoder.project_inputs(&mut tape, &p, e)?;
        let (h_new, c_new) = l.decoder.step(&mut tape, &p, xp, h, c, None)?;
        let q = tape.matmul(h_new, p[l.w_a])?;
        let scores = tape.matmul(q, keys)?;
        let alpha = tape.softmax(scores)?;
        let ctx = tape.matmul(alpha, values)?;
        let joined = tape.concat(&[ctx, h_new], Axis::Cols)?;
        let mixed = l.combine.forward(&mut tape, &p, joined)?;
        let mixed = tape.tanh(mixed)?;
        let logits = l.output.forward(&mut tape, &p, mixed)?;
        let logp = tape.log_softmax(logits)?;
        let lp = tape.value(logp);

        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(k * vsize);
        for (j, hyp) in live.iter().enumerate() {
            for v in 0..vsize {
                cands.push((hyp.log_prob + lp[j * vsize + v], v, j));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);

        let mut next = Vec::new();
        let mut rows = Vec::new();
        for (score, v, j) in cands {
            let mut ids = live[j].ids.clone();
            if v == EOS {
                done.push(Hyp { ids, log_prob: score });
            } else {
                ids.push(v);
                next.push(Hyp { ids, log_prob: score });
                rows.push(j);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        h = tape.embedding_lookup(h_new, &rows)?;
        c = tape.embedding_lookup(c_new, &rows)?;
        let best_done = done.iter().map(|x| x.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= live[0].log_prob {
            break;
        }
    }

    let by_score = |a: &Hyp, b: &Hyp| b.log_prob.total_cmp(&a.log_prob);
    done.sort_by(by_score);
    live.sort_by(by_score);
    let vocab = &model.vocab;
    let mut all_beams: Vec<(Vec<String>, f64)> =
        done.iter().chain(&live).map(|x| (vocab.decode(&x.ids), x.log_prob)).collect();
    all_beams.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (best, completed) = match done.first() {
        Some(b) => (b, true),
        None => (&live[0], false),
    };
    Ok(GenerationResult {
        tokens: vocab.decode(&best.ids),
        ids: best.ids.clone(),
        log_prob: best.log_prob,
        completed,
        all_beams,
    })
}
