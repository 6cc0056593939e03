//! LSTM and GRU cells, and an LSTM whose hidden-state update is wrapped in a
//! residual, Heun or weighted-Heun step.
//!
//! All gate matrices are `(hidden, input + hidden)` and act on the
//! concatenation `[x, h]` of a `[batch, input]` input and `[batch, hidden]`
//! state.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Var};
use crate::blocks::{uniform, Family};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl<'t> LstmState<'t> {
    pub fn new(h: Var<'t>, c: Var<'t>) -> Result<Self> {
        let (hs, cs) = (h.shape(), c.shape());
        if hs != cs {
            return Err(Error::shape("LstmState", &hs, &cs));
        }
        Ok(Self { h, c })
    }

    /// Zero state for `batch` rows, recorded as constants.
    pub fn zeros(bound: &Bound<'t>, batch: usize, hidden: usize) -> Self {
        let tape = bound.vars()[0].tape();
        Self {
            h: tape.constant(Tensor::zeros(&[batch, hidden])),
            c: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Gate {
    weight: ParamId,
    bias: ParamId,
}

impl Gate {
    fn init(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, bias: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(&[hidden, fan_in], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::full(&[hidden], bias)),
        }
    }

    fn pre<'t>(&self, bound: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        z.matmul(bound.var(self.weight).t())?.add_bias(bound.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    input: Gate,
    forget: Gate,
    output: Gate,
    candidate: Gate,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, forget bias `+1`, other
    /// biases zero.
    pub fn init(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input_size + hidden_size;
        Self {
            input: Gate::init(store, &format!("{name}.input"), fan_in, hidden_size, 0.0, rng),
            forget: Gate::init(store, &format!("{name}.forget"), fan_in, hidden_size, 1.0, rng),
            output: Gate::init(store, &format!("{name}.output"), fan_in, hidden_size, 0.0, rng),
            candidate: Gate::init(store, &format!("{name}.candidate"), fan_in, hidden_size, 0.0, rng),
            input_size,
            hidden_size,
        }
    }

    /// Parameter ids in the order input, forget, output, candidate; each gate
    /// contributes `(weight, bias)`.
    pub fn ids(&self) -> [(ParamId, ParamId); 4] {
        [self.input, self.forget, self.output, self.candidate].map(|g| (g.weight, g.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams {
    update: Gate,
    reset: Gate,
    candidate: Gate,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruParams {
    pub fn init(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input_size + hidden_size;
        Self {
            update: Gate::init(store, &format!("{name}.update"), fan_in, hidden_size, 0.0, rng),
            reset: Gate::init(store, &format!("{name}.reset"), fan_in, hidden_size, 0.0, rng),
            candidate: Gate::init(store, &format!("{name}.candidate"), fan_in, hidden_size, 0.0, rng),
            input_size,
            hidden_size,
        }
    }

    /// Parameter ids in the order update, reset, candidate.
    pub fn ids(&self) -> [(ParamId, ParamId); 3] {
        [self.update, self.reset, self.candidate].map(|g| (g.weight, g.bias))
    }
}

fn check_widths(x: Var<'_>, h: Var<'_>, input: usize, hidden: usize) -> Result<()> {
    let (xs, hs) = (x.shape(), h.shape());
    if xs.len() != 2 || hs.len() != 2 || xs[1] != input || hs[1] != hidden || xs[0] != hs[0] {
        return Err(Error::shape("recurrent step", &xs, &hs));
    }
    Ok(())
}

/// One LSTM step:
/// `i, f, o = sigmoid(.)`, `g = tanh(.)`, `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_step<'t>(params: &LstmParams, bound: &Bound<'t>, x: Var<'t>, state: LstmState<'t>) -> Result<LstmState<'t>> {
    check_widths(x, state.h, params.input_size, params.hidden_size)?;
    if state.c.shape() != state.h.shape() {
        return Err(Error::shape("lstm_step", &state.h.shape(), &state.c.shape()));
    }
    let z = x.concat_cols(state.h)?;
    let i = params.input.pre(bound, z)?.sigmoid();
    let f = params.forget.pre(bound, z)?.sigmoid();
    let o = params.output.pre(bound, z)?.sigmoid();
    let g = params.candidate.pre(bound, z)?.tanh();
    let c = f.mul(state.c)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok(LstmState { h, c })
}

/// One GRU step:
/// `z, r = sigmoid(.)`, `n = tanh([x, r*h] W_n^T + b_n)`, `h' = h + z*(n - h)`.
pub fn gru_step<'t>(params: &GruParams, bound: &Bound<'t>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    check_widths(x, h, params.input_size, params.hidden_size)?;
    let xh = x.concat_cols(h)?;
    let z = params.update.pre(bound, xh)?.sigmoid();
    let r = params.reset.pre(bound, xh)?.sigmoid();
    let n = params.candidate.pre(bound, x.concat_cols(r.mul(h)?)?)?.tanh();
    h.add(z.mul(n.sub(h)?)?)
}

/// One LSTM step with the hidden update wrapped by `family`.
///
/// The residual is `F(h) = lstm_step(x, (h, c)).h - h` with the incoming cell
/// state `c` held fixed across both evaluations. The new cell state comes
/// from the corrector evaluation `F(h~)` whenever its weight is nonzero
/// (`Heun`, `ExtendedHeun` with `alpha > 0`) and from the first evaluation
/// otherwise. `Family::Plain` is the unwrapped LSTM step.
pub fn residual_lstm_step<'t>(
    family: Family,
    params: &LstmParams,
    bound: &Bound<'t>,
    x: Var<'t>,
    state: LstmState<'t>,
) -> Result<LstmState<'t>> {
    if family == Family::Plain {
        return lstm_step(params, bound, x, state);
    }
    let cells = RefCell::new(Vec::with_capacity(2));
    let h = family.update(
        |h| {
            let next = lstm_step(params, bound, x, LstmState { h, c: state.c })?;
            cells.borrow_mut().push(next.c);
            next.h.sub(h)
        },
        state.h,
    )?;
    let cells = cells.into_inner();
    let corrector_weight = match family {
        Family::Heun => 0.5,
        Family::ExtendedHeun { alpha } => alpha,
        _ => 0.0,
    };
    let c = if corrector_weight > 0.0 { cells[cells.len() - 1] } else { cells[0] };
    Ok(LstmState { h, c })
}

pub fn lstm_sequence<'t>(
    params: &LstmParams,
    bound: &Bound<'t>,
    inputs: &[Var<'t>],
    init: LstmState<'t>,
) -> Result<Vec<LstmState<'t>>> {
    residual_lstm_sequence(Family::Plain, params, bound, inputs, init)
}

/// Heun-wrapped LSTM over a sequence; returns the state after every step.
pub fn heun_lstm_sequence<'t>(
    params: &LstmParams,
    bound: &Bound<'t>,
    inputs: &[Var<'t>],
    init: LstmState<'t>,
) -> Result<Vec<LstmState<'t>>> {
    residual_lstm_sequence(Family::Heun, params, bound, inputs, init)
}

pub fn residual_lstm_sequence<'t>(
    family: Family,
    params: &LstmParams,
    bound: &Bound<'t>,
    inputs: &[Var<'t>],
    init: LstmState<'t>,
) -> Result<Vec<LstmState<'t>>> {
    family.validate()?;
    let mut state = init;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = residual_lstm_step(family, params, bound, x, state)?;
        out.push(state);
    }
    Ok(out)
}

pub fn gru_sequence<'t>(params: &GruParams, bound: &Bound<'t>, inputs: &[Var<'t>], init: Var<'t>) -> Result<Vec<Var<'t>>> {
    let mut h = init;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru_step(params, bound, x, h)?;
        out.push(h);
    }
    Ok(out)
}

/// Stacks per-step `[1, hidden]` states into a `[steps, hidden]` matrix.
pub fn stack_rows(states: &[Var<'_>]) -> Tensor {
    let rows: Vec<Vec<f64>> = states.iter().map(|s| s.value().data().to_vec()).collect();
    Tensor::from_rows(&rows)
}
