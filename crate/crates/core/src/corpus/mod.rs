//! Tagged multi-turn dialogues and the transformations that turn a source
//! corpus into wait/answer and next-utterance training samples.
//!
//! A *source* dialogue lists turns as sentence lists. Construction
//! tokenizes, replaces slot values with placeholders, splits a seeded subset
//! of multi-sentence user turns into one utterance per sentence, removes
//! punctuation and tags every utterance with turn, sub-turn and speaker ids.

mod construct;
mod encode;
mod samples;
mod tokenize;
mod vocab;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use construct::{
    construct_corpus, delexicalize, merge_source_turns, segment_corpus, segment_user_turns, SegmentStats,
    SlotTable,
};
pub use encode::{continuation_tags, encode_continuation, encode_history, EncodedSequence, Position, TagCaps};
pub use samples::{
    extract_decision_samples, extract_prediction_samples, Action, DecisionSample, PredictionSample,
};
pub use tokenize::{is_placeholder, is_punctuation, strip_punctuation, tokenize, PUNCTUATION};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SEP, SPECIALS, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    /// 0 for the user, 1 for the agent.
    pub fn id(self) -> u8 {
        match self {
            Speaker::User => 0,
            Speaker::Agent => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Speaker::User),
            1 => Some(Speaker::Agent),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Speaker::User => Speaker::Agent,
            Speaker::Agent => Speaker::User,
        }
    }
}

mod speaker_code {
    use super::Speaker;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &Speaker, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_u8(s.id())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Speaker, D::Error> {
        let id = u8::deserialize(de)?;
        Speaker::from_id(id).ok_or_else(|| D::Error::custom(alloc::format!("speaker_id {id} is not 0 or 1")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub turn_id: u32,
    pub sub_turn_id: u32,
    #[serde(with = "speaker_code")]
    pub speaker_id: Speaker,
    /// Token offsets where source sentences begin; only populated before
    /// segmentation.
    #[serde(skip)]
    pub(crate) sentence_starts: Vec<usize>,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, turn_id: u32, sub_turn_id: u32, speaker: Speaker) -> Self {
        Self {
            tokens,
            turn_id,
            sub_turn_id,
            speaker_id: speaker,
            sentence_starts: Vec::new(),
        }
    }

    /// Tokenizes whitespace-separated text.
    pub fn from_text(text: &str, turn_id: u32, sub_turn_id: u32, speaker: Speaker) -> Self {
        Self::new(tokenize(text), turn_id, sub_turn_id, speaker)
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker_id
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// One source turn: a speaker and the sentences they said.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTurn {
    pub speaker: Speaker,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<SourceTurn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn is_constructed(&self) -> bool {
        !self.utterances.is_empty()
    }

    pub fn num_turns(&self) -> usize {
        let mut n = 0;
        let mut last = None;
        for u in &self.utterances {
            if last != Some(u.turn_id) {
                n += 1;
                last = Some(u.turn_id);
            }
        }
        n
    }

    /// Checks the invariants of a constructed dialogue.
    pub fn validate(&self) -> Result<()> {
        let id = self.dialogue_id.as_str();
        if self.utterances.is_empty() {
            return Err(Error::corpus(id, "no utterances"));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.tokens.is_empty() {
                return Err(Error::corpus(id, format!("utterance {i} is empty")));
            }
            if let Some(t) = u.tokens.iter().find(|t| t.is_empty() || is_punctuation(t)) {
                return Err(Error::corpus(id, format!("utterance {i} contains punctuation token {t:?}")));
            }
            if u.speaker_id == Speaker::Agent && u.sub_turn_id != 0 {
                return Err(Error::corpus(
                    id,
                    format!("agent turn {} has more than one sub-turn", u.turn_id),
                ));
            }
        }
        if self.utterances[0].sub_turn_id != 0 {
            return Err(Error::corpus(id, "first utterance does not start a turn"));
        }
        for (i, w) in self.utterances.windows(2).enumerate() {
            let (prev, cur) = (&w[0], &w[1]);
            if cur.turn_id == prev.turn_id {
                if cur.speaker_id != prev.speaker_id {
                    return Err(Error::corpus(id, format!("turn {} mixes speakers", cur.turn_id)));
                }
                if cur.sub_turn_id != prev.sub_turn_id + 1 {
                    return Err(Error::corpus(
                        id,
                        format!("utterance {}: sub-turn ids of turn {} are not consecutive", i + 1, cur.turn_id),
                    ));
                }
            } else {
                if cur.turn_id < prev.turn_id {
                    return Err(Error::corpus(id, format!("utterance {}: turn ids decrease", i + 1)));
                }
                if cur.sub_turn_id != 0 {
                    return Err(Error::corpus(
                        id,
                        format!("utterance {}: turn {} does not start at sub-turn 0", i + 1, cur.turn_id),
                    ));
                }
                if cur.speaker_id == prev.speaker_id {
                    return Err(Error::corpus(
                        id,
                        format!("turns {} and {} have the same speaker", prev.turn_id, cur.turn_id),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use alloc::string::ToString;

    fn turn(speaker: Speaker, sentences: &[&str]) -> SourceTurn {
        SourceTurn {
            speaker,
            sentences: sentences.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// A1; U11, U12, U13; A2; U21, U22; A3 before construction.
    pub fn theater_source() -> Dialogue {
        Dialogue {
            dialogue_id: "theater".to_string(),
            split: None,
            turns: alloc::vec![
                turn(Speaker::Agent, &["Good morning. Vane Theater at your service."]),
                turn(
                    Speaker::User,
                    &[
                        "Hello.",
                        "I'm thinking about watching a Chinese traditional opera with a foreign girl.",
                        "What's on this weekend?",
                    ],
                ),
                turn(Speaker::Agent, &["We have Peking opera on Saturday."]),
                turn(Speaker::User, &["Great!", "Two tickets, please."]),
                turn(Speaker::Agent, &["Done, enjoy the show."]),
            ],
            utterances: Vec::new(),
        }
    }

    pub fn theater() -> Dialogue {
        let (mut out, _) = construct_corpus(&[theater_source()], &SlotTable::default(), 1.0, 0).unwrap();
        out.remove(0)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::theater;
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn texts(us: &[Utterance]) -> Vec<String> {
        us.iter().map(Utterance::text).collect()
    }

    #[test]
    fn theater_fixture_shape() {
        let d = theater();
        assert_eq!(d.utterances.len(), 8);
        assert_eq!(d.num_turns(), 5);
        let tags: Vec<(u32, u32, u8)> =
            d.utterances.iter().map(|u| (u.turn_id, u.sub_turn_id, u.speaker_id.id())).collect();
        assert_eq!(
            tags,
            [(1, 0, 1), (2, 0, 0), (2, 1, 0), (2, 2, 0), (3, 0, 1), (4, 0, 0), (4, 1, 0), (5, 0, 1)]
        );
        assert_eq!(d.utterances[3].text(), "what's on this weekend");
    }

    #[test]
    fn theater_decision_samples() {
        let d = theater();
        let s = extract_decision_samples(&d);
        let labels: Vec<u8> = s.iter().map(|x| x.label.id()).collect();
        assert_eq!(labels, [0, 0, 1, 0, 1]);
        assert_eq!(s[0].history.len(), 2);
        assert_eq!(s[2].history.len(), 4);
        assert_eq!(s[2].sample_id, "theater:3");
    }

    #[test]
    fn theater_prediction_samples() {
        let d = theater();
        let u = extract_prediction_samples(&d, Speaker::User);
        let pairs: Vec<(usize, String)> = u.iter().map(|s| (s.history.len(), s.target.text())).collect();
        assert_eq!(pairs[0].0, 2);
        assert_eq!(pairs[1], (3, d.utterances[3].text()));
        assert_eq!(pairs[2], (6, "two tickets please".into()));
        let a = extract_prediction_samples(&d, Speaker::Agent);
        assert_eq!(texts(&[a[0].target.clone(), a[1].target.clone()]), ["we have peking opera on saturday", "done enjoy the show"]);
        assert_eq!((a[0].history.len(), a[1].history.len()), (4, 7));
    }

    #[test]
    fn lone_user_utterance_yields_nothing() {
        let d = Dialogue {
            dialogue_id: "x".into(),
            split: None,
            turns: vec![],
            utterances: vec![Utterance::from_text("hi", 1, 0, Speaker::User)],
        };
        assert!(extract_decision_samples(&d).is_empty());
        assert!(extract_prediction_samples(&d, Speaker::User).is_empty());
    }

    #[test]
    fn validate_rejects_split_agent_turn() {
        let mut d = theater();
        d.utterances.insert(1, Utterance::from_text("more", 1, 1, Speaker::Agent));
        let err = d.validate().unwrap_err();
        assert!(alloc::format!("{err}").contains("theater"));
    }

    #[test]
    fn validate_rejects_gaps_and_punctuation() {
        let mut d = theater();
        d.utterances[2].sub_turn_id = 5;
        assert!(d.validate().is_err());
        let mut d = theater();
        d.utterances[1].tokens.push("?".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let d = theater();
        let s = serde_json::to_string(&d).unwrap();
        let back: Dialogue = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(s.contains("\"speaker_id\":1") && s.contains("\"speaker\":\"agent\""));
    }

    fn arb_dialogue() -> impl Strategy<Value = Dialogue> {
        let word = prop::sample::select(vec!["a", "b", "c", "and", "please"]);
        let utt = prop::collection::vec(word, 1..4);
        let user_turn = prop::collection::vec(utt.clone(), 1..4);
        (any::<bool>(), prop::collection::vec((user_turn, utt), 0..5), prop::option::of(prop::collection::vec(prop::sample::select(vec!["x", "y"]), 1..3)))
            .prop_map(|(agent_first, turns, trailing_user)| {
                let mut us = Vec::new();
                let mut turn = 1u32;
                let mk = |w: &[&str], t, s, sp| Utterance::new(w.iter().map(|x| x.to_string()).collect(), t, s, sp);
                use alloc::string::ToString;
                if agent_first {
                    us.push(mk(&["hello"], turn, 0, Speaker::Agent));
                    turn += 1;
                }
                for (subs, agent) in turns {
                    for (k, s) in subs.iter().enumerate() {
                        us.push(mk(s, turn, k as u32, Speaker::User));
                    }
                    us.push(mk(&agent, turn + 1, 0, Speaker::Agent));
                    turn += 2;
                }
                if let Some(t) = trailing_user {
                    us.push(mk(&t, turn, 0, Speaker::User));
                }
                Dialogue {
                    dialogue_id: "p".into(),
                    split: None,
                    turns: vec![],
                    utterances: us,
                }
            })
    }

    proptest! {
        #[test]
        fn samples_match_replay(d in arb_dialogue()) {
            let u = &d.utterances;
            let dec = extract_decision_samples(&d);
            let mut j = 0;
            for i in 0..u.len() {
                if u[i].speaker_id != Speaker::User || i + 1 == u.len() {
                    continue;
                }
                prop_assert_eq!(&dec[j].history[..], &u[..=i]);
                prop_assert_eq!(dec[j].label.id(), u[i + 1].speaker_id.id());
                j += 1;
            }
            prop_assert_eq!(j, dec.len());
            let us = extract_prediction_samples(&d, Speaker::User);
            let ag = extract_prediction_samples(&d, Speaker::Agent);
            prop_assert_eq!(us.len(), dec.iter().filter(|s| s.label == Action::Wait).count());
            prop_assert_eq!(ag.len(), dec.iter().filter(|s| s.label == Action::Answer).count());
            for s in us.iter().chain(&ag) {
                prop_assert_eq!(s.target.speaker_id, s.role);
                prop_assert_eq!(&u[s.history.len()], &s.target);
            }
        }

        #[test]
        fn generated_dialogues_validate_and_round_trip(d in arb_dialogue()) {
            if !d.utterances.is_empty() {
                prop_assert!(d.validate().is_ok());
            }
            let back: Dialogue = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn segmentation_is_idempotent(sents in prop::collection::vec(prop::collection::vec("[a-c]{1,3}[.!]?", 1..4), 1..5), seed in any::<u64>(), frac in 0.0f64..=1.0) {
            use alloc::string::ToString;
            let turns = sents.iter().flat_map(|s| [
                SourceTurn { speaker: Speaker::Agent, sentences: vec!["ok".to_string()] },
                SourceTurn { speaker: Speaker::User, sentences: s.clone() },
            ]).collect();
            let src = Dialogue { dialogue_id: "s".into(), split: None, turns, utterances: vec![] };
            let (once, _) = construct_corpus(&[src], &SlotTable::default(), frac, seed).unwrap();
            let twice = segment_user_turns(&once[0], frac, seed).unwrap();
            prop_assert_eq!(&twice, &once[0]);
            prop_assert!(once[0].utterances.iter().all(|u| u.tokens.iter().all(|t| !is_punctuation(t))));
        }
    }
}
