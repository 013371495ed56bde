//! Synthetic task-oriented dialogues with a learnable wait-or-answer signal.
//!
//! Each dialogue opens with an agent greeting, then visits two or three
//! distinct domains. In each domain the user speaks for `k ∈ {1,2,3}`
//! sub-turns, stating the domain's facets in a fixed order, and the agent
//! replies with the domain's templated answer. Non-final sub-turns end with
//! a continuation cue (`and`, `also`, `plus`), the final one with a request
//! cue (`please`, `thanks`). In hard mode there are no cues and each domain
//! always uses the same `k`, so only the dialogue structure tells the two
//! cases apart.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, SourceTurn, Speaker, Split, Utterance};
use crate::numerics::init;
use crate::{Error, Result};

pub const CONTINUATION_CUES: [&str; 3] = ["and", "also", "plus"];
pub const REQUEST_CUES: [&str; 2] = ["please", "thanks"];

const GREETING: &str = "hello how can i help you";

struct Family {
    facets: [&'static str; 3],
    reply: &'static str,
    /// Sub-turn count in hard mode.
    hard_k: usize,
}

const FAMILIES: [Family; 5] = [
    Family {
        facets: [
            "i need a place to eat",
            "it should serve [restaurant_food] food",
            "what is the address for [restaurant_name]",
        ],
        reply: "the address is [restaurant_address] can i help you with anything else",
        hard_k: 3,
    },
    Family {
        facets: [
            "i am looking for a guesthouse",
            "it should have free parking",
            "book it for [hotel_stay] nights",
        ],
        reply: "i have booked [hotel_name] your reference is [hotel_reference]",
        hard_k: 2,
    },
    Family {
        facets: [
            "i need a train to [train_destination]",
            "it should leave after [train_leave]",
            "how much is a ticket",
        ],
        reply: "the train [train_id] leaves at [train_leave] it costs [train_price]",
        hard_k: 1,
    },
    Family {
        facets: [
            "can you get me a taxi",
            "pick me up at [taxi_departure]",
            "i want to arrive by [taxi_arrive]",
        ],
        reply: "a [taxi_type] will pick you up the contact number is [taxi_phone]",
        hard_k: 3,
    },
    Family {
        facets: [
            "i want to visit a museum",
            "it should be in the [attraction_area]",
            "what is the entrance fee",
        ],
        reply: "[attraction_name] is free to enter it is on [attraction_address]",
        hard_k: 2,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dialogues: usize,
    pub seed: u64,
    pub hard: bool,
}

/// Split of the dialogue at `index`: the first 80% train, the next 10%
/// valid, the rest test.
pub fn split_for(index: usize, total: usize) -> Split {
    if index < total * 8 / 10 {
        Split::Train
    } else if index < total * 9 / 10 {
        Split::Valid
    } else {
        Split::Test
    }
}

/// Generates constructed dialogues that also keep their source turns (one
/// sentence per sub-turn).
pub fn generate(config: &SynthConfig) -> Result<Vec<Dialogue>> {
    if config.dialogues == 0 {
        return Err(Error::InvalidArgument("at least one dialogue is required".into()));
    }
    let mut rng = init::rng(config.seed);
    let mut out = Vec::with_capacity(config.dialogues);
    for i in 0..config.dialogues {
        let mut order: Vec<usize> = (0..FAMILIES.len()).collect();
        order.shuffle(&mut rng);
        let visits = rng.random_range(2..=3);
        let mut turns = Vec::new();
        let mut utterances = Vec::new();
        let mut push = |speaker: Speaker, sentences: Vec<String>, turns: &mut Vec<SourceTurn>| {
            let turn_id = turns.len() as u32 + 1;
            for (sub, s) in sentences.iter().enumerate() {
                utterances.push(Utterance::from_text(s, turn_id, sub as u32, speaker));
            }
            let sentences = sentences.into_iter().map(|s| format!("{s}.")).collect();
            turns.push(SourceTurn { speaker, sentences });
        };
        push(Speaker::Agent, alloc::vec![GREETING.to_string()], &mut turns);
        for &f in &order[..visits] {
            let family = &FAMILIES[f];
            let k = if config.hard { family.hard_k } else { rng.random_range(1..=3) };
            let sentences = (0..k)
                .map(|j| {
                    let facet = family.facets[j];
                    if config.hard {
                        facet.to_string()
                    } else {
                        let cues: &[&str] = if j + 1 < k { &CONTINUATION_CUES } else { &REQUEST_CUES };
                        format!("{facet} {}", cues.choose(&mut rng).expect("non-empty cue list"))
                    }
                })
                .collect();
            push(Speaker::User, sentences, &mut turns);
            push(Speaker::Agent, alloc::vec![family.reply.to_string()], &mut turns);
        }
        out.push(Dialogue {
            dialogue_id: format!("synth-{}-{i:05}", config.seed),
            split: Some(split_for(i, config.dialogues)),
            turns,
            utterances,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{construct_corpus, extract_decision_samples, Action, SlotTable};

    fn corpus(seed: u64, hard: bool) -> Vec<Dialogue> {
        generate(&SynthConfig {
            dialogues: 600,
            seed,
            hard,
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(corpus(7, false), corpus(7, false));
        assert_ne!(corpus(7, false), corpus(8, false));
    }

    #[test]
    fn answer_fraction_is_near_half() {
        let samples: Vec<_> = corpus(7, false).iter().flat_map(extract_decision_samples).collect();
        let answers = samples.iter().filter(|s| s.label == Action::Answer).count();
        let frac = answers as f64 / samples.len() as f64;
        assert!((0.45..=0.55).contains(&frac), "{frac}");
    }

    #[test]
    fn cues_mark_the_label() {
        for s in corpus(3, false).iter().flat_map(extract_decision_samples) {
            let last = s.history.last().unwrap().tokens.last().unwrap().as_str();
            match s.label {
                Action::Wait => assert!(CONTINUATION_CUES.contains(&last)),
                Action::Answer => assert!(REQUEST_CUES.contains(&last)),
            }
        }
    }

    #[test]
    fn hard_mode_has_no_cues() {
        for d in corpus(3, true) {
            for u in &d.utterances {
                let last = u.tokens.last().unwrap().as_str();
                assert!(!CONTINUATION_CUES.contains(&last) && !REQUEST_CUES.contains(&last));
            }
        }
    }

    #[test]
    fn utterances_equal_construction_of_source_turns() {
        let generated = corpus(5, false);
        let sources: Vec<Dialogue> = generated
            .iter()
            .map(|d| Dialogue {
                utterances: Vec::new(),
                ..d.clone()
            })
            .collect();
        let (built, stats) = construct_corpus(&sources, &SlotTable::default(), 1.0, 0).unwrap();
        assert_eq!(stats.split, stats.eligible);
        for (g, b) in generated.iter().zip(&built) {
            g.validate().unwrap();
            assert_eq!(g.utterances, b.utterances);
        }
    }

    #[test]
    fn splits_are_80_10_10_by_index() {
        let c = corpus(1, false);
        let count = |s: Split| c.iter().filter(|d| d.split == Some(s)).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (480, 60, 60));
        assert_eq!(c[0].dialogue_id, "synth-1-00000");
    }

    #[test]
    fn zero_dialogues_is_an_error() {
        assert!(generate(&SynthConfig {
            dialogues: 0,
            seed: 0,
            hard: false
        })
        .is_err());
    }
}
