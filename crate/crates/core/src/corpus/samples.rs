use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Dialogue, Speaker, Utterance};
use crate::{Error, Result};

/// Wait for another user sub-turn (0) or answer now (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Action {
    Wait,
    Answer,
}

impl Action {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The action whose successor speaker is `next`.
    pub fn for_successor(next: Speaker) -> Self {
        match next {
            Speaker::User => Action::Wait,
            Speaker::Agent => Action::Answer,
        }
    }
}

impl TryFrom<u8> for Action {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Action::Wait),
            1 => Ok(Action::Answer),
            other => Err(Error::Label(other)),
        }
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a.id()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSample {
    /// `"{dialogue_id}:{index of the last history utterance}"`.
    pub sample_id: String,
    pub history: Vec<Utterance>,
    pub label: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSample {
    pub sample_id: String,
    pub history: Vec<Utterance>,
    pub target: Utterance,
    pub role: Speaker,
}

fn sample_id(d: &Dialogue, last: usize) -> String {
    format!("{}:{}", d.dialogue_id, last)
}

/// One sample per user utterance that has a successor, labelled by the
/// successor's speaker.
pub fn extract_decision_samples(d: &Dialogue) -> Vec<DecisionSample> {
    let u = &d.utterances;
    (0..u.len().saturating_sub(1))
        .filter(|&i| u[i].speaker_id == Speaker::User)
        .map(|i| DecisionSample {
            sample_id: sample_id(d, i),
            history: u[..=i].to_vec(),
            label: Action::for_successor(u[i + 1].speaker_id),
        })
        .collect()
}

/// Every (history ending in a user utterance, next utterance by `role`) pair.
pub fn extract_prediction_samples(d: &Dialogue, role: Speaker) -> Vec<PredictionSample> {
    let u = &d.utterances;
    (0..u.len().saturating_sub(1))
        .filter(|&i| u[i].speaker_id == Speaker::User && u[i + 1].speaker_id == role)
        .map(|i| PredictionSample {
            sample_id: sample_id(d, i),
            history: u[..=i].to_vec(),
            target: u[i + 1].clone(),
            role,
        })
        .collect()
}
