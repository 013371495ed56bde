use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tokenize::{is_placeholder, is_punctuation, tokenize};
use super::{Dialogue, Speaker, Utterance};
use crate::{Error, Result};

/// Surface values and the placeholders that replace them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct SlotTable {
    source: BTreeMap<String, String>,
    /// Tokenized values, longest first.
    entries: Vec<(Vec<String>, String)>,
}

impl SlotTable {
    pub fn new(map: BTreeMap<String, String>) -> Result<Self> {
        let mut entries = Vec::with_capacity(map.len());
        for (value, placeholder) in &map {
            if !is_placeholder(placeholder) {
                return Err(Error::InvalidArgument(format!(
                    "slot placeholder {placeholder:?} must be bracketed lowercase without whitespace"
                )));
            }
            let tokens = tokenize(value);
            if tokens.is_empty() {
                return Err(Error::InvalidArgument(format!("slot value {value:?} has no tokens")));
            }
            entries.push((tokens, placeholder.clone()));
        }
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { source: map, entries })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

impl TryFrom<BTreeMap<String, String>> for SlotTable {
    type Error = Error;

    fn try_from(map: BTreeMap<String, String>) -> Result<Self> {
        Self::new(map)
    }
}

impl From<SlotTable> for BTreeMap<String, String> {
    fn from(t: SlotTable) -> Self {
        t.source
    }
}

/// Turns source turns into one tagged utterance per turn, remembering where
/// each sentence starts. Turn ids start at 1.
pub fn merge_source_turns(d: &Dialogue) -> Result<Dialogue> {
    let id = d.dialogue_id.as_str();
    let mut utterances: Vec<Utterance> = Vec::with_capacity(d.turns.len());
    for (i, turn) in d.turns.iter().enumerate() {
        if let Some(prev) = utterances.last() {
            if prev.speaker_id == turn.speaker {
                return Err(Error::corpus(
                    id,
                    format!("turns {} and {} have the same speaker", i, i + 1),
                ));
            }
        }
        let mut tokens = Vec::new();
        let mut starts = Vec::new();
        for sentence in &turn.sentences {
            let t = tokenize(sentence);
            if !t.is_empty() {
                starts.push(tokens.len());
                tokens.extend(t);
            }
        }
        if tokens.is_empty() {
            return Err(Error::corpus(id, format!("turn {} has no tokens", i + 1)));
        }
        let mut u = Utterance::new(tokens, i as u32 + 1, 0, turn.speaker);
        u.sentence_starts = starts;
        utterances.push(u);
    }
    Ok(Dialogue {
        dialogue_id: d.dialogue_id.clone(),
        split: d.split,
        turns: d.turns.clone(),
        utterances,
    })
}

fn delexicalize_utterance(u: &Utterance, slots: &SlotTable) -> Utterance {
    let src = &u.tokens;
    let mut boundary = alloc::vec![false; src.len() + 1];
    for &s in &u.sentence_starts {
        boundary[s] = true;
    }
    let mut tokens = Vec::with_capacity(src.len());
    let mut starts = Vec::with_capacity(u.sentence_starts.len());
    let mut i = 0;
    while i < src.len() {
        if boundary[i] {
            starts.push(tokens.len());
        }
        let hit = slots.entries.iter().find(|(value, _)| {
            let n = value.len();
            i + n <= src.len() && src[i..i + n] == value[..] && !(i + 1..i + n).any(|j| boundary[j])
        });
        match hit {
            Some((value, placeholder)) => {
                tokens.push(placeholder.clone());
                i += value.len();
            }
            None => {
                tokens.push(src[i].clone());
                i += 1;
            }
        }
    }
    Utterance {
        tokens,
        turn_id: u.turn_id,
        sub_turn_id: u.sub_turn_id,
        speaker_id: u.speaker_id,
        sentence_starts: starts,
    }
}

/// Replaces slot values by placeholders, longest value first, scanning left
/// to right. Matches never span two sentences.
pub fn delexicalize(d: &Dialogue, slots: &SlotTable) -> Dialogue {
    let mut out = d.clone();
    if !slots.is_empty() {
        out.utterances = d.utterances.iter().map(|u| delexicalize_utterance(u, slots)).collect();
    }
    out
}

/// Counts from one segmentation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub eligible: usize,
    pub split: usize,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..=1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1]")))
    }
}

/// Indices of single-utterance user turns with more than one sentence.
fn eligible_turns(d: &Dialogue) -> Vec<usize> {
    let u = &d.utterances;
    (0..u.len())
        .filter(|&i| {
            u[i].speaker_id == Speaker::User
                && u[i].sentence_starts.len() >= 2
                && (i == 0 || u[i - 1].turn_id != u[i].turn_id)
                && (i + 1 == u.len() || u[i + 1].turn_id != u[i].turn_id)
        })
        .collect()
}

fn selection_hash(seed: u64, dialogue_id: &str, turn_id: u32) -> u64 {
    use core::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(dialogue_id.as_bytes());
    h.write_u8(0xff);
    h.write(&turn_id.to_le_bytes());
    h.finish()
}

fn target_count(fraction: f64, eligible: usize) -> usize {
    libm::round(fraction * eligible as f64) as usize
}

fn apply_segmentation(d: &Dialogue, selected: &BTreeSet<usize>) -> Result<Dialogue> {
    let id = d.dialogue_id.as_str();
    let mut utterances = Vec::with_capacity(d.utterances.len());
    for (i, u) in d.utterances.iter().enumerate() {
        let clean = |range: &[String]| -> Vec<String> { range.iter().filter(|t| !is_punctuation(t)).cloned().collect() };
        if selected.contains(&i) {
            let mut bounds = u.sentence_starts.clone();
            bounds.push(u.tokens.len());
            let mut sub = 0;
            for w in bounds.windows(2) {
                let piece = clean(&u.tokens[w[0]..w[1]]);
                if !piece.is_empty() {
                    utterances.push(Utterance::new(piece, u.turn_id, sub, u.speaker_id));
                    sub += 1;
                }
            }
            if sub == 0 {
                return Err(Error::corpus(id, format!("turn {} is only punctuation", u.turn_id)));
            }
        } else {
            let tokens = clean(&u.tokens);
            if tokens.is_empty() {
                return Err(Error::corpus(id, format!("turn {} is only punctuation", u.turn_id)));
            }
            utterances.push(Utterance::new(tokens, u.turn_id, u.sub_turn_id, u.speaker_id));
        }
    }
    Ok(Dialogue {
        dialogue_id: d.dialogue_id.clone(),
        split: d.split,
        turns: d.turns.clone(),
        utterances,
    })
}

/// Splits `round(fraction × eligible)` of the dialogue's multi-sentence user
/// turns into one utterance per sentence, then drops punctuation tokens.
/// Turns are ranked by a seeded hash of dialogue id and turn id.
pub fn segment_user_turns(d: &Dialogue, fraction: f64, seed: u64) -> Result<Dialogue> {
    check_fraction(fraction)?;
    let eligible = eligible_turns(d);
    let mut ranked: Vec<(u64, usize)> = eligible
        .iter()
        .map(|&i| (selection_hash(seed, &d.dialogue_id, d.utterances[i].turn_id), i))
        .collect();
    ranked.sort_unstable();
    let n = target_count(fraction, eligible.len());
    let selected = ranked.into_iter().take(n).map(|(_, i)| i).collect();
    apply_segmentation(d, &selected)
}

/// Corpus-wide variant: exactly `round(fraction × eligible)` turns are split
/// across all dialogues.
pub fn segment_corpus(dialogues: &[Dialogue], fraction: f64, seed: u64) -> Result<(Vec<Dialogue>, SegmentStats)> {
    check_fraction(fraction)?;
    let mut ranked: Vec<(u64, usize, usize)> = Vec::new();
    for (di, d) in dialogues.iter().enumerate() {
        for i in eligible_turns(d) {
            ranked.push((selection_hash(seed, &d.dialogue_id, d.utterances[i].turn_id), di, i));
        }
    }
    ranked.sort_unstable();
    let n = target_count(fraction, ranked.len());
    let mut selected: Vec<BTreeSet<usize>> = alloc::vec![BTreeSet::new(); dialogues.len()];
    for &(_, di, i) in ranked.iter().take(n) {
        selected[di].insert(i);
    }
    let out = dialogues
        .iter()
        .zip(&selected)
        .map(|(d, s)| apply_segmentation(d, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        out,
        SegmentStats {
            eligible: ranked.len(),
            split: n,
        },
    ))
}

/// Full construction: merge source turns, delexicalize, segment, validate.
/// Records that already carry utterances skip the merge.
pub fn construct_corpus(
    dialogues: &[Dialogue],
    slots: &SlotTable,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Dialogue>, SegmentStats)> {
    check_fraction(fraction)?;
    let merged = dialogues
        .iter()
        .map(|d| {
            let base = if d.is_constructed() { d.clone() } else { merge_source_turns(d)? };
            Ok(delexicalize(&base, slots))
        })
        .collect::<Result<Vec<_>>>()?;
    let (out, stats) = segment_corpus(&merged, fraction, seed)?;
    for d in &out {
        d.validate()?;
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceTurn;
    use alloc::string::ToString;
    use alloc::vec;

    fn source(id: &str, turns: &[(Speaker, &[&str])]) -> Dialogue {
        Dialogue {
            dialogue_id: id.to_string(),
            split: None,
            turns: turns
                .iter()
                .map(|(s, sent)| SourceTurn {
                    speaker: *s,
                    sentences: sent.iter().map(|x| x.to_string()).collect(),
                })
                .collect(),
            utterances: Vec::new(),
        }
    }

    fn slots(pairs: &[(&str, &str)]) -> SlotTable {
        SlotTable::new(pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()).unwrap()
    }

    fn texts(d: &Dialogue) -> Vec<String> {
        d.utterances.iter().map(Utterance::text).collect()
    }

    #[test]
    fn delexicalizes_address() {
        let d = merge_source_turns(&source("d", &[(Speaker::Agent, &["the address is 12 high street"])])).unwrap();
        let t = slots(&[("12 high street", "[restaurant_address]")]);
        assert_eq!(texts(&delexicalize(&d, &t)), ["the address is [restaurant_address]"]);
    }

    #[test]
    fn empty_slot_table_is_identity() {
        let d = merge_source_turns(&source("d", &[(Speaker::User, &["Hi there.", "Bye!"])])).unwrap();
        assert_eq!(delexicalize(&d, &SlotTable::default()), d);
    }

    #[test]
    fn longest_value_wins() {
        let d = merge_source_turns(&source("d", &[(Speaker::Agent, &["it is on 12 high street."])])).unwrap();
        let t = slots(&[("high street", "[street]"), ("12 high street", "[address]")]);
        assert_eq!(texts(&delexicalize(&d, &t)), ["it is on [address] ."]);
    }

    #[test]
    fn matches_stay_inside_sentences() {
        let d = merge_source_turns(&source("d", &[(Speaker::User, &["go to cherry", "hinton now"])])).unwrap();
        let t = slots(&[("cherry hinton", "[area]")]);
        assert_eq!(texts(&delexicalize(&d, &t)), ["go to cherry hinton now"]);
    }

    #[test]
    fn rejects_bad_placeholders() {
        let m = |p: &str| SlotTable::new([("x".to_string(), p.to_string())].into_iter().collect());
        assert!(m("[Upper]").is_err());
        assert!(m("[two words]").is_err());
        assert!(m("bare").is_err());
        assert!(m("[ok_1]").is_ok());
    }

    #[test]
    fn fraction_zero_keeps_turns_merged_and_strips_punctuation() {
        let d = merge_source_turns(&source(
            "d",
            &[(Speaker::Agent, &["Hello!"]), (Speaker::User, &["I need a taxi.", "Soon, please."])],
        ))
        .unwrap();
        let s = segment_user_turns(&d, 0.0, 1).unwrap();
        assert_eq!(texts(&s), ["hello", "i need a taxi soon please"]);
        assert!(s.utterances.iter().all(|u| u.sub_turn_id == 0));
    }

    #[test]
    fn fraction_one_splits_every_sentence() {
        let d = merge_source_turns(&source("d", &[(Speaker::User, &["one.", "two.", "three."])])).unwrap();
        let s = segment_user_turns(&d, 1.0, 9).unwrap();
        let subs: Vec<u32> = s.utterances.iter().map(|u| u.sub_turn_id).collect();
        assert_eq!(subs, [0, 1, 2]);
        assert_eq!(texts(&s), ["one", "two", "three"]);
        assert_eq!(segment_user_turns(&s, 1.0, 9).unwrap(), s);
    }

    #[test]
    fn half_of_ten_turns_are_split() {
        let turns: Vec<(Speaker, &[&str])> = (0..10)
            .flat_map(|_| [(Speaker::Agent, &["ok"][..]), (Speaker::User, &["a b.", "c d."][..])])
            .collect();
        let d = merge_source_turns(&source("ten", &turns)).unwrap();
        let s = segment_user_turns(&d, 0.5, 42).unwrap();
        let split = s.utterances.iter().filter(|u| u.sub_turn_id == 1).count();
        assert_eq!(split, 5);
        assert_eq!(segment_user_turns(&d, 0.5, 42).unwrap(), s);
    }

    #[test]
    fn corpus_segmentation_counts_across_dialogues() {
        let ds: Vec<Dialogue> = (0..7)
            .map(|i| merge_source_turns(&source(&format!("d{i}"), &[(Speaker::User, &["x.", "y."])])).unwrap())
            .collect();
        let (out, stats) = segment_corpus(&ds, 0.5, 3).unwrap();
        assert_eq!(stats, SegmentStats { eligible: 7, split: 4 });
        assert_eq!(out.iter().filter(|d| d.utterances.len() == 2).count(), 4);
    }

    #[test]
    fn rejects_out_of_range_fraction() {
        let d = merge_source_turns(&source("d", &[(Speaker::User, &["x"])])).unwrap();
        assert!(segment_user_turns(&d, 1.5, 0).is_err());
        assert!(segment_user_turns(&d, -0.1, 0).is_err());
    }

    #[test]
    fn same_speaker_source_turns_are_an_error() {
        let d = source("bad", &[(Speaker::User, &["a"]), (Speaker::User, &["b"])]);
        let err = merge_source_turns(&d).unwrap_err();
        assert!(format!("{err}").contains("bad"));
    }

    #[test]
    fn construction_yields_valid_dialogues() {
        let d = source(
            "fig",
            &[
                (Speaker::Agent, &["Hello, how can I help?"]),
                (Speaker::User, &["I want food.", "Cheap, please!"]),
            ],
        );
        let (out, _) = construct_corpus(&[d], &SlotTable::default(), 1.0, 0).unwrap();
        assert_eq!(texts(&out[0]), vec!["hello how can i help", "i want food", "cheap please"]);
        out[0].validate().unwrap();
    }
}
