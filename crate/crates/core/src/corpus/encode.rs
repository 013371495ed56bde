use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, SEP};
use super::{Speaker, Utterance};
use crate::{Error, Result};

/// Upper bounds for tag ids and sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCaps {
    pub max_turn: u32,
    pub max_sub_turn: u32,
    pub max_len: usize,
}

impl Default for TagCaps {
    fn default() -> Self {
        Self {
            max_turn: 20,
            max_sub_turn: 8,
            max_len: 128,
        }
    }
}

impl TagCaps {
    pub fn validate(&self) -> Result<()> {
        if self.max_turn == 0 || self.max_sub_turn == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(alloc::format!("tag caps must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Rows of the turn-tag embedding table.
    pub fn turn_slots(&self) -> usize {
        self.max_turn as usize + 1
    }

    pub fn sub_turn_slots(&self) -> usize {
        self.max_sub_turn as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub token: usize,
    pub turn: usize,
    pub sub_turn: usize,
    pub speaker: usize,
}

/// Column-wise token and tag ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncodedSequence {
    pub tokens: Vec<usize>,
    pub turns: Vec<usize>,
    pub sub_turns: Vec<usize>,
    pub speakers: Vec<usize>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position(&self, i: usize) -> Position {
        Position {
            token: self.tokens[i],
            turn: self.turns[i],
            sub_turn: self.sub_turns[i],
            speaker: self.speakers[i],
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        (0..self.len()).map(|i| self.position(i))
    }

    fn push(&mut self, token: usize, turn: usize, sub_turn: usize, speaker: usize) {
        self.tokens.push(token);
        self.turns.push(turn);
        self.sub_turns.push(sub_turn);
        self.speakers.push(speaker);
    }

    fn keep_tail(&mut self, n: usize) {
        if self.len() > n {
            let cut = self.len() - n;
            self.tokens.drain(..cut);
            self.turns.drain(..cut);
            self.sub_turns.drain(..cut);
            self.speakers.drain(..cut);
        }
    }

    fn push_tokens(&mut self, tokens: &[String], turn: u32, sub_turn: u32, speaker: Speaker, vocab: &Vocabulary, caps: &TagCaps) {
        let (t, s, p) = (
            turn.min(caps.max_turn) as usize,
            sub_turn.min(caps.max_sub_turn) as usize,
            speaker.id() as usize,
        );
        for tok in tokens {
            self.push(vocab.id(tok), t, s, p);
        }
    }
}

/// Joins utterances with SEP (tagged like the utterance it precedes) and
/// keeps the last `max_len` positions.
pub fn encode_history(history: &[Utterance], vocab: &Vocabulary, caps: &TagCaps) -> Result<EncodedSequence> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut seq = EncodedSequence::default();
    for (i, u) in history.iter().enumerate() {
        if i > 0 {
            seq.push(
                SEP,
                u.turn_id.min(caps.max_turn) as usize,
                u.sub_turn_id.min(caps.max_sub_turn) as usize,
                u.speaker_id.id() as usize,
            );
        }
        seq.push_tokens(&u.tokens, u.turn_id, u.sub_turn_id, u.speaker_id, vocab, caps);
    }
    seq.keep_tail(caps.max_len);
    Ok(seq)
}

/// Tags a simulated next utterance by `speaker` following `history`: an agent
/// reply opens the next turn, a user supplement is the next sub-turn.
pub fn continuation_tags(history: &[Utterance], speaker: Speaker) -> Result<(u32, u32)> {
    let last = history.last().ok_or(Error::EmptyHistory)?;
    Ok(if speaker == last.speaker_id {
        (last.turn_id, last.sub_turn_id + 1)
    } else {
        (last.turn_id + 1, 0)
    })
}

/// Encodes a generated continuation as it would appear after `history`.
pub fn encode_continuation(
    history: &[Utterance],
    tokens: &[String],
    speaker: Speaker,
    vocab: &Vocabulary,
    caps: &TagCaps,
) -> Result<EncodedSequence> {
    let (turn, sub) = continuation_tags(history, speaker)?;
    let mut seq = EncodedSequence::default();
    seq.push_tokens(tokens, turn, sub, speaker, vocab, caps);
    seq.keep_tail(caps.max_len);
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, UNK};
    use alloc::vec;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["hello", "there", "hi"], 1).unwrap()
    }

    #[test]
    fn single_utterance() {
        let v = vocab();
        let h = [Utterance::from_text("hello", 1, 0, Speaker::User)];
        let e = encode_history(&h, &v, &TagCaps::default()).unwrap();
        assert_eq!(
            e.positions().collect::<Vec<_>>(),
            [Position {
                token: v.id("hello"),
                turn: 1,
                sub_turn: 0,
                speaker: 0
            }]
        );
    }

    #[test]
    fn sep_takes_tags_of_following_utterance() {
        let v = vocab();
        let h = [
            Utterance::from_text("hi", 1, 0, Speaker::Agent),
            Utterance::from_text("hello there", 2, 0, Speaker::User),
        ];
        let e = encode_history(&h, &v, &TagCaps::default()).unwrap();
        assert_eq!(e.tokens, [v.id("hi"), SEP, v.id("hello"), v.id("there")]);
        assert_eq!(e.turns, [1, 2, 2, 2]);
        assert_eq!(e.speakers, [1, 0, 0, 0]);
    }

    #[test]
    fn keeps_most_recent_positions_and_caps_tags() {
        let v = vocab();
        let toks: Vec<String> = (0..300).map(|i| alloc::format!("w{i}")).collect();
        let h = [Utterance::new(toks, 30, 12, Speaker::User)];
        let e = encode_history(&h, &v, &TagCaps::default()).unwrap();
        assert_eq!(e.len(), 128);
        assert!(e.tokens.iter().all(|&t| t == UNK));
        assert_eq!((e.turns[0], e.sub_turns[0]), (20, 8));
    }

    #[test]
    fn empty_history_is_an_error() {
        assert_eq!(encode_history(&[], &vocab(), &TagCaps::default()), Err(Error::EmptyHistory));
    }

    #[test]
    fn continuation_tags_follow_speaker() {
        let h = vec![
            Utterance::from_text("hi", 1, 0, Speaker::Agent),
            Utterance::from_text("hello", 2, 1, Speaker::User),
        ];
        assert_eq!(continuation_tags(&h, Speaker::Agent).unwrap(), (3, 0));
        assert_eq!(continuation_tags(&h, Speaker::User).unwrap(), (2, 2));
        let e = encode_continuation(&h, &[], Speaker::User, &vocab(), &TagCaps::default()).unwrap();
        assert!(e.is_empty());
        assert_ne!(BOS, SEP);
    }
}
