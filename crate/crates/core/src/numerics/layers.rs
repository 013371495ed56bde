//! Recurrent cells and dense layers composed from tape primitives.

use alloc::format;

use super::init::{self, SeededRng};
use super::{Axis, Bound, ParamId, ParamStore, Tape, Var};
use crate::Result;

/// Recurrent weight init range.
pub const RECURRENT_INIT: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let weight = store.add(format!("{name}.weight"), init::uniform(rng, &[inputs, outputs], RECURRENT_INIT));
        let bias = store.add(format!("{name}.bias"), init::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// Zero-initialised layer; a zero output layer gives uniform logits.
    pub fn zeroed(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init::zeros(&[inputs, outputs]));
        let bias = store.add(format!("{name}.bias"), init::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), init::uniform(rng, &[inputs, 4 * hidden], RECURRENT_INIT));
        let w_hh = store.add(format!("{name}.w_hh"), init::uniform(rng, &[hidden, 4 * hidden], RECURRENT_INIT));
        let bias = store.add(format!("{name}.bias"), init::zeros(&[4 * hidden]));
        Self {
            w_ih,
            w_hh,
            bias,
            inputs,
            hidden,
        }
    }

    /// Input contribution `x·W_ih + b` for a block of rows at once.
    pub fn project_inputs(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w_ih])?;
        tape.add(y, p[self.bias])
    }

    /// One step from projected inputs `[B,4h]`. Rows with `keep[r] == false`
    /// carry their previous state through unchanged.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_proj: Var,
        h: Var,
        c: Var,
        keep: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let rec = tape.matmul(h, p[self.w_hh])?;
        let pre = tape.add(x_proj, rec)?;
        let i = tape.slice(pre, Axis::Cols, 0, hd)?;
        let f = tape.slice(pre, Axis::Cols, hd, hd)?;
        let g = tape.slice(pre, Axis::Cols, 2 * hd, hd)?;
        let o = tape.slice(pre, Axis::Cols, 3 * hd, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        match keep {
            Some(k) if k.iter().any(|&x| !x) => {
                let h_out = tape.select_rows(h_new, h, k)?;
                let c_out = tape.select_rows(c_new, c, k)?;
                Ok((h_out, c_out))
            }
            _ => Ok((h_new, c_new)),
        }
    }
}

/// Single-layer GRU with gate order (reset, update, candidate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), init::uniform(rng, &[inputs, 3 * hidden], RECURRENT_INIT));
        let w_hh = store.add(format!("{name}.w_hh"), init::uniform(rng, &[hidden, 3 * hidden], RECURRENT_INIT));
        let b_ih = store.add(format!("{name}.b_ih"), init::zeros(&[3 * hidden]));
        let b_hh = store.add(format!("{name}.b_hh"), init::zeros(&[3 * hidden]));
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            inputs,
            hidden,
        }
    }

    pub fn project_inputs(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w_ih])?;
        tape.add(y, p[self.b_ih])
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x_proj: Var, h: Var, keep: Option<&[bool]>) -> Result<Var> {
        let hd = self.hidden;
        let rec = tape.matmul(h, p[self.w_hh])?;
        let rec = tape.add(rec, p[self.b_hh])?;
        let xr = tape.slice(x_proj, Axis::Cols, 0, hd)?;
        let xz = tape.slice(x_proj, Axis::Cols, hd, hd)?;
        let xn = tape.slice(x_proj, Axis::Cols, 2 * hd, hd)?;
        let hr = tape.slice(rec, Axis::Cols, 0, hd)?;
        let hz = tape.slice(rec, Axis::Cols, hd, hd)?;
        let hn = tape.slice(rec, Axis::Cols, 2 * hd, hd)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n)?;
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        let h_new = tape.add(n, zd)?;
        match keep {
            Some(k) if k.iter().any(|&x| !x) => tape.select_rows(h_new, h, k),
            _ => Ok(h_new),
        }
    }
}
