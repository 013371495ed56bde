use super::*;
use crate::corpus::{Speaker, Utterance};
use crate::numerics::gradcheck::randomize_params;
use crate::numerics::{grad_check, Optimizer};
use alloc::string::ToString;

fn vocab() -> Vocabulary {
    Vocabulary::build("hello how can i help you want food and please the address is".split(' '), 1).unwrap()
}

fn tiny() -> PredictionConfig {
    PredictionConfig {
        d_tok: 6,
        d_turn: 2,
        d_sub: 2,
        d_spk: 2,
        hidden: 5,
        caps: TagCaps {
            max_turn: 4,
            max_sub_turn: 3,
            max_len: 16,
        },
        beam_size: 3,
        max_gen_len: 8,
    }
}

fn small() -> PredictionConfig {
    PredictionConfig {
        d_tok: 16,
        hidden: 32,
        ..tiny()
    }
}

fn history() -> Vec<Utterance> {
    vec![
        Utterance::from_text("hello how can i help you", 1, 0, Speaker::Agent),
        Utterance::from_text("i want food and", 2, 0, Speaker::User),
    ]
}

fn sample(target: &str) -> PredictionSample {
    PredictionSample {
        sample_id: "t:1".to_string(),
        history: history(),
        target: Utterance::from_text(target, 2, 1, Speaker::User),
        role: Speaker::User,
    }
}

fn model(cfg: PredictionConfig, seed: u64) -> PredictionModel {
    PredictionModel::new(Speaker::User, cfg, vocab(), seed).unwrap()
}

#[test]
fn untrained_loss_is_near_uniform() {
    let m = model(small(), 1);
    let s = sample("the address please");
    let n = 4.0;
    let expected = n * libm::log(m.vocab().len() as f64);
    let loss = m.teacher_forced_loss(&s).unwrap();
    assert!((loss - expected).abs() < 0.2 * expected, "{loss} vs {expected}");
}

#[test]
fn overfits_a_single_sample() {
    let mut m = model(small(), 2);
    let s = sample("the address please");
    let mut opt = Optimizer::adam(0.01).unwrap();
    for _ in 0..500 {
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape).unwrap();
        let l = m.forward_teacher_forced(&mut tape, &p, &s).unwrap();
        tape.backward(l).unwrap();
        m.store.accumulate(&tape, &p).unwrap();
        opt.step(m.store.tensors_mut()).unwrap();
    }
    let loss = m.teacher_forced_loss(&s).unwrap();
    assert!(loss < 0.1, "loss {loss}");
    let g = m.generate(&history()).unwrap();
    assert_eq!(g.tokens, ["the", "address", "please"]);
    assert!(g.completed);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut m = model(tiny(), 3);
    let a = m.prepare(&sample("the address")).unwrap();
    let mut short = sample("please");
    short.history.remove(0);
    let b = m.prepare(&short).unwrap();
    let mut store = m.store.clone();
    randomize_params(&mut store, 3, 0.5);
    let report = grad_check(
        &mut store,
        |t, p| m.batch_loss(t, p, &[&a, &b]),
        crate::numerics::gradcheck::DEFAULT_EPS,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    m.store = store;
}

#[test]
fn batch_loss_is_sum_of_sample_losses() {
    let m = model(tiny(), 4);
    let mut short = sample("please");
    short.history.remove(0);
    let samples = [sample("the address is"), short, sample("food")];
    let prepared: Vec<PreparedSample> = samples.iter().map(|s| m.prepare(s).unwrap()).collect();
    let single: f64 = samples.iter().map(|s| m.teacher_forced_loss(s).unwrap()).sum();
    let batch = |order: &[usize]| {
        let mut t = Tape::new();
        let p = m.store.bind(&mut t).unwrap();
        let refs: Vec<&PreparedSample> = order.iter().map(|&i| &prepared[i]).collect();
        let l = m.batch_loss(&mut t, &p, &refs).unwrap();
        t.value(l)[0]
    };
    assert!((batch(&[0, 1, 2]) - single).abs() < 1e-9);
    assert!((batch(&[2, 0, 1]) - single).abs() < 1e-9);
}

/// Greedy decoding by independent rescoring of every one-token extension.
fn greedy_by_rescoring(m: &PredictionModel, max_len: usize) -> (Vec<usize>, bool) {
    let h = history();
    let mut prefix: Vec<usize> = Vec::new();
    for _ in 0..max_len {
        let base = m.score_continuation(&h, &prefix, false).unwrap();
        let mut best = (m.score_continuation(&h, &prefix, true).unwrap() - base, EOS);
        for v in 0..m.vocab().len() {
            if v == EOS {
                continue;
            }
            let mut ext = prefix.clone();
            ext.push(v);
            let s = m.score_continuation(&h, &ext, false).unwrap() - base;
            if s > best.0 || (s == best.0 && v < best.1) {
                best = (s, v);
            }
        }
        if best.1 == EOS {
            return (prefix, true);
        }
        prefix.push(best.1);
    }
    (prefix, false)
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..3 {
        let m = model(tiny(), seed);
        let g = m.generate_with(&history(), 1, 6).unwrap();
        let (ids, completed) = greedy_by_rescoring(&m, 6);
        assert_eq!((g.ids.clone(), g.completed), (ids, completed), "seed {seed}");
    }
}

#[test]
fn returned_log_prob_matches_rescoring() {
    for seed in 0..3 {
        let m = model(small(), seed);
        let g = m.generate_with(&history(), 4, 8).unwrap();
        let s = m.score_continuation(&history(), &g.ids, g.completed).unwrap();
        assert!((g.log_prob - s).abs() < 1e-9, "{} vs {}", g.log_prob, s);
        assert!(g.all_beams.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn certain_end_token_gives_empty_output_with_zero_log_prob() {
    let mut m = model(tiny(), 5);
    let bias = m.layout.output.bias;
    m.store.get_mut(bias).data_mut()[EOS] = 1000.0;
    let g = m.generate(&history()).unwrap();
    assert!(g.tokens.is_empty() && g.completed);
    assert_eq!(g.log_prob, 0.0);
}

#[test]
fn empty_history_is_an_error() {
    let m = model(tiny(), 0);
    assert_eq!(m.generate(&[]), Err(Error::EmptyHistory));
}

#[test]
fn zero_epochs_keep_initial_model() {
    let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
    let (m, _) = train_prediction_model(Speaker::User, &[sample("food")], &[], &vocab(), &tiny(), &cfg).unwrap();
    assert_eq!(m, model(tiny(), 0));
}

#[test]
fn rejects_empty_train_set_and_wrong_role() {
    let cfg = TrainConfig::default();
    assert!(matches!(
        train_prediction_model(Speaker::User, &[], &[], &vocab(), &tiny(), &cfg),
        Err(Error::EmptyTrainSet)
    ));
    assert!(train_prediction_model(Speaker::Agent, &[sample("food")], &[], &vocab(), &tiny(), &cfg).is_err());
}

#[test]
fn batch_size_one_training_is_deterministic() {
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 1,
        seed: 11,
        ..TrainConfig::default()
    };
    let train = [sample("food"), sample("the address"), sample("please")];
    let run = || train_prediction_model(Speaker::User, &train, &[], &vocab(), &tiny(), &cfg).unwrap().0;
    assert_eq!(run().params().fingerprint(), run().params().fingerprint());
}

#[test]
fn layout_mismatch_is_rejected() {
    let mut m = model(tiny(), 0);
    let other = model(small(), 0);
    assert!(m.load_params(other.params().clone()).is_err());
    let same = model(tiny(), 9);
    m.load_params(same.params().clone()).unwrap();
    assert_eq!(m, same);
}
