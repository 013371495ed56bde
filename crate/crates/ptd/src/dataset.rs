//! Corpus construction and its summary statistics.

use ptd_core::corpus::{
    construct_corpus, extract_decision_samples, Action, Dialogue, SegmentStats, SlotTable, Speaker, Split,
};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dialogues: usize,
    pub avg_turns: f64,
    /// Utterances per user turn.
    pub avg_user_sub_turns: f64,
    pub wait_samples: usize,
    pub answer_samples: usize,
    /// Multi-sentence user turns that could be split, and how many were.
    pub eligible_turns: usize,
    pub split_turns: usize,
}

/// Constructs every record that is still a source dialogue. A corpus that
/// is already fully constructed passes through unchanged.
pub fn build(dialogues: &[Dialogue], slots: &SlotTable, fraction: f64, seed: u64) -> Result<(Vec<Dialogue>, SegmentStats)> {
    if !dialogues.is_empty() && dialogues.iter().all(Dialogue::is_constructed) {
        for d in dialogues {
            d.validate()?;
        }
        return Ok((dialogues.to_vec(), SegmentStats::default()));
    }
    Ok(construct_corpus(dialogues, slots, fraction, seed)?)
}

pub fn stats(dialogues: &[Dialogue], segment: SegmentStats) -> DatasetStats {
    let mut turns = 0;
    let mut user_turns = 0;
    let mut user_utterances = 0;
    let (mut wait, mut answer) = (0, 0);
    for d in dialogues {
        turns += d.num_turns();
        let mut last_turn = None;
        for u in &d.utterances {
            if u.speaker_id == Speaker::User {
                user_utterances += 1;
                if last_turn != Some(u.turn_id) {
                    user_turns += 1;
                }
            }
            last_turn = Some(u.turn_id);
        }
        for s in extract_decision_samples(d) {
            match s.label {
                Action::Wait => wait += 1,
                Action::Answer => answer += 1,
            }
        }
    }
    let mean = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    DatasetStats {
        dialogues: dialogues.len(),
        avg_turns: mean(turns, dialogues.len()),
        avg_user_sub_turns: mean(user_utterances, user_turns),
        wait_samples: wait,
        answer_samples: answer,
        eligible_turns: segment.eligible,
        split_turns: segment.split,
    }
}

/// Dialogues of one split.
pub fn split(dialogues: &[Dialogue], which: Split) -> Vec<Dialogue> {
    dialogues.iter().filter(|d| d.split == Some(which)).cloned().collect()
}
