//! Finite-difference gradient checking with a five-point stencil:
//! `g ≈ (8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::init::{self, SeededRng};
use super::{layers, Axis, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

/// Step used by the default checks.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `max_j |g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Tape and finite-difference gradients at `worst_index`.
    pub worst_pair: (f64, f64),
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of a scalar `loss` built by `fragment` against
/// finite differences with step `eps`, for every value of every parameter.
/// Redraws every parameter from uniform(−bound, bound). Freshly initialised
/// models can have gradients near the finite-difference noise floor; checks
/// run on parameters drawn at a larger scale.
pub fn randomize_params(store: &mut ParamStore, seed: u64, bound: f64) {
    let mut rng = super::init::rng(seed);
    for t in store.tensors_mut() {
        let fresh = super::init::uniform(&mut rng, t.shape(), bound);
        t.data_mut().copy_from_slice(fresh.data());
    }
}

pub fn grad_check<F>(store: &mut ParamStore, mut fragment: F, eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape)?;
    let loss = fragment(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .zip(store.tensors())
        .map(|(v, t)| tape.grad(*v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let loss = fragment(&mut tape, &bound)?;
        Ok(tape.value(loss)[0])
    };

    let mut params = Vec::with_capacity(store.len());
    for p in 0..store.len() {
        let mut worst = (0.0f64, 0usize, (0.0, 0.0));
        for j in 0..store.tensors()[p].len() {
            let orig = store.tensors()[p].data()[j];
            let mut at = |x: f64| -> Result<f64> {
                store.tensors_mut()[p].data_mut()[j] = x;
                eval(store)
            };
            let (p1, m1) = (at(orig + eps)?, at(orig - eps)?);
            let (p2, m2) = (at(orig + 2.0 * eps)?, at(orig - 2.0 * eps)?);
            store.tensors_mut()[p].data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let err = relative_error(analytic[p][j], numeric);
            if err > worst.0 {
                worst = (err, j, (analytic[p][j], numeric));
            }
        }
        params.push(ParamCheck {
            name: store.names()[p].clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            worst_pair: worst.2,
            passed: worst.0 <= tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, params })
}

/// A scalar loss over a small parameter set exercising one operation.
pub struct OpCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub fragment: Box<dyn FnMut(&mut Tape, &Bound) -> Result<Var>>,
}

/// Fixed, non-uniform weighting that reduces any output to a scalar, so
/// every output element contributes a distinct gradient.
fn readout(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let w = (0..n).map(|i| libm::sin(1.3 * i as f64 + 0.7)).collect();
    let y = tape.mul_const(y, w)?;
    tape.sum(y)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let mut t = init::uniform(rng, shape, 1.0);
    for x in t.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

/// One case per differentiable tape operation and per layer, with
/// parameters drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = init::rng(seed);
    let mut cases = Vec::new();
    let mut case = |name: &'static str, shapes: &[&[usize]], rng: &mut SeededRng, f: Box<dyn FnMut(&mut Tape, &Bound, &[ParamId]) -> Result<Var>>| {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(alloc::format!("x{i}"), init::uniform(rng, s, 1.0)))
            .collect();
        let mut f = f;
        cases.push(OpCase {
            name,
            store,
            fragment: Box::new(move |t: &mut Tape, p: &Bound| f(t, p, &ids)),
        });
    };

    case("matmul", &[&[3, 4], &[4, 2]], &mut rng, Box::new(|t, p, x| {
        let y = t.matmul(p[x[0]], p[x[1]])?;
        readout(t, y)
    }));
    case("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], &mut rng, Box::new(|t, p, x| {
        let y = t.batch_matmul(p[x[0]], p[x[1]], false)?;
        readout(t, y)
    }));
    case("batch_matmul_transposed", &[&[2, 3, 4], &[2, 5, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.batch_matmul(p[x[0]], p[x[1]], true)?;
        readout(t, y)
    }));
    case("add", &[&[3, 4], &[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.add(p[x[0]], p[x[1]])?;
        readout(t, y)
    }));
    case("add_broadcast", &[&[3, 4], &[4]], &mut rng, Box::new(|t, p, x| {
        let y = t.add(p[x[0]], p[x[1]])?;
        readout(t, y)
    }));
    case("sub", &[&[3, 4], &[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.sub(p[x[0]], p[x[1]])?;
        readout(t, y)
    }));
    case("mul", &[&[3, 4], &[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.mul(p[x[0]], p[x[1]])?;
        readout(t, y)
    }));
    case("mul_const", &[&[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.mul_const(p[x[0]], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect())?;
        readout(t, y)
    }));
    case("concat_rows", &[&[2, 3], &[1, 3]], &mut rng, Box::new(|t, p, x| {
        let y = t.concat(&[p[x[0]], p[x[1]]], Axis::Rows)?;
        readout(t, y)
    }));
    case("concat_cols", &[&[2, 3], &[2, 2]], &mut rng, Box::new(|t, p, x| {
        let y = t.concat(&[p[x[0]], p[x[1]]], Axis::Cols)?;
        readout(t, y)
    }));
    case("embedding_lookup", &[&[5, 3]], &mut rng, Box::new(|t, p, x| {
        let y = t.embedding_lookup(p[x[0]], &[0, 2, 2, 4])?;
        readout(t, y)
    }));
    case("sigmoid", &[&[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.sigmoid(p[x[0]])?;
        readout(t, y)
    }));
    case("tanh", &[&[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.tanh(p[x[0]])?;
        readout(t, y)
    }));
    case("softmax", &[&[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.softmax(p[x[0]])?;
        readout(t, y)
    }));
    case("log_softmax", &[&[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.log_softmax(p[x[0]])?;
        readout(t, y)
    }));
    case("conv1d", &[&[2, 5, 3], &[6, 4], &[4]], &mut rng, Box::new(|t, p, x| {
        let y = t.conv1d(p[x[0]], p[x[1]], p[x[2]], 2)?;
        readout(t, y)
    }));
    case("cross_entropy", &[&[3, 4]], &mut rng, Box::new(|t, p, x| t.cross_entropy(p[x[0]], &[0, 3, 1], None)));
    case("cross_entropy_weighted", &[&[3, 4]], &mut rng, Box::new(|t, p, x| {
        t.cross_entropy(p[x[0]], &[2, 0, 1], Some(&[1.0, 0.5, 2.0]))
    }));
    case("slice_rows", &[&[4, 3]], &mut rng, Box::new(|t, p, x| {
        let y = t.slice(p[x[0]], Axis::Rows, 1, 2)?;
        readout(t, y)
    }));
    case("slice_cols", &[&[4, 3]], &mut rng, Box::new(|t, p, x| {
        let y = t.slice(p[x[0]], Axis::Cols, 1, 2)?;
        readout(t, y)
    }));
    case("reshape", &[&[4, 3]], &mut rng, Box::new(|t, p, x| {
        let y = t.reshape(p[x[0]], &[2, 6])?;
        let y = t.softmax(y)?;
        readout(t, y)
    }));
    case("stack", &[&[2, 3], &[2, 3], &[2, 3]], &mut rng, Box::new(|t, p, x| {
        let y = t.stack(&[p[x[0]], p[x[1]], p[x[2]]])?;
        readout(t, y)
    }));
    case("select_rows", &[&[3, 2], &[3, 2]], &mut rng, Box::new(|t, p, x| {
        let y = t.select_rows(p[x[0]], p[x[1]], &[true, false, true])?;
        readout(t, y)
    }));
    case("sum", &[&[3, 4]], &mut rng, Box::new(|t, p, x| {
        let y = t.tanh(p[x[0]])?;
        t.sum(y)
    }));

    // Ops with kinks get inputs away from the kink.
    let mut kinked = |name: &'static str, input: Tensor, f: fn(&mut Tape, Var) -> Result<Var>| {
        let mut store = ParamStore::new();
        let id = store.add("x0", input);
        cases.push(OpCase {
            name,
            store,
            fragment: Box::new(move |t: &mut Tape, p: &Bound| {
                let y = f(t, p[id])?;
                readout(t, y)
            }),
        });
    };
    kinked("relu", away_from_zero(&mut rng, &[3, 4]), |t, x| t.relu(x));
    // Distinct values, so the maximum is unique within each valid window.
    kinked("max_over_time_pool", init::uniform(&mut rng, &[2, 4, 3], 1.0), |t, x| t.max_over_time_pool(x, &[4, 2]));

    let mut layer = |name: &'static str, build: fn(&mut ParamStore, &mut SeededRng) -> Box<dyn FnMut(&mut Tape, &Bound) -> Result<Var>>| {
        let mut store = ParamStore::new();
        let fragment = build(&mut store, &mut rng);
        let s = rng.random::<u64>();
        randomize_params(&mut store, s, 0.5);
        cases.push(OpCase { name, store, fragment });
    };
    layer("linear", |store, rng| {
        let l = layers::Linear::new(store, "l", 3, 2, rng);
        let x = init::uniform(rng, &[4, 3], 1.0).into_data();
        Box::new(move |t, p| {
            let x = t.constant(&[4, 3], x.clone())?;
            let y = l.forward(t, p, x)?;
            readout(t, y)
        })
    });
    layer("lstm_step", |store, rng| {
        let l = layers::Lstm::new(store, "l", 3, 2, rng);
        let h0 = store.add("h0", init::uniform(rng, &[3, 2], 1.0));
        let c0 = store.add("c0", init::uniform(rng, &[3, 2], 1.0));
        let x = init::uniform(rng, &[3, 3], 1.0).into_data();
        Box::new(move |t, p| {
            let x = t.constant(&[3, 3], x.clone())?;
            let xp = l.project_inputs(t, p, x)?;
            let (h, c) = l.step(t, p, xp, p[h0], p[c0], Some(&[true, false, true]))?;
            let (h, c) = l.step(t, p, xp, h, c, None)?;
            let a = readout(t, h)?;
            let b = readout(t, c)?;
            t.add(a, b)
        })
    });
    layer("gru_step", |store, rng| {
        let g = layers::Gru::new(store, "g", 3, 2, rng);
        let h0 = store.add("h0", init::uniform(rng, &[3, 2], 1.0));
        let x = init::uniform(rng, &[3, 3], 1.0).into_data();
        Box::new(move |t, p| {
            let x = t.constant(&[3, 3], x.clone())?;
            let xp = g.project_inputs(t, p, x)?;
            let h = g.step(t, p, xp, p[h0], Some(&[false, true, true]))?;
            let h = g.step(t, p, xp, h, None)?;
            readout(t, h)
        })
    });
    cases
}

/// Runs [`grad_check`] on every case of [`op_cases`].
pub fn check_ops(seed: u64, eps: f64, tolerance: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_cases(seed)
        .into_iter()
        .map(|mut c| Ok((c.name, grad_check(&mut c.store, &mut c.fragment, eps, tolerance)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_over_five_seeds() {
        for seed in 0..5 {
            for (name, report) in check_ops(seed, DEFAULT_EPS, 1e-4).unwrap() {
                assert!(report.passed(), "{name} seed {seed}: {:?}", report.failures().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // relu's tape gradient disagrees with finite differences at the kink.
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(&[1], alloc::vec![0.0]).unwrap());
        let r = grad_check(&mut store, |t, p| {
            let y = t.relu(p.vars()[0])?;
            t.sum(y)
        }, DEFAULT_EPS, 1e-4)
        .unwrap();
        assert!(!r.passed());
    }
}
