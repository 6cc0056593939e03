//! Finite-difference oracle shared by the integration tests. It only ever
//! evaluates forward values; gradients from the tape are compared against it.

#![allow(dead_code)]

use heunflow::autodiff::{Bound, ParamStore, Tape, Var};
use heunflow::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative error with an absolute floor so
/// that vanishing gradients are not judged on pure rounding noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar through a fixed random projection so every
/// output entry contributes to the checked gradient.
fn project<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Var<'t> {
    if out.shape() == weights.shape() {
        out.mul(tape.constant(weights.clone())).unwrap().sum()
    } else {
        out.sum()
    }
}

fn projection_for<F>(inputs: &[Tensor], f: &F, rng: &mut ChaCha8Rng) -> Tensor
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::inference();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let shape = f(&tape, &vars).shape();
    random_tensor(rng, &shape, 1.0)
}

fn scalar_value<F>(inputs: &[Tensor], f: &F, weights: &Tensor) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::inference();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = project(&tape, f(&tape, &vars), weights);
    let v = out.value().item().unwrap();
    v
}

/// Largest relative error between tape gradients and central differences
/// over every entry of every input.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F, rng: &mut ChaCha8Rng) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let weights = projection_for(inputs, &f, rng);
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = project(&tape, f(&tape, &vars), &weights);
        let grads = tape.backward(out).unwrap();
        vars.iter()
            .map(|v| {
                let g = grads.wrt_or_zero(*v);
                assert_eq!(g.shape(), v.value().shape(), "gradient shape");
                g
            })
            .collect()
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = scalar_value(&probe, &f, &weights);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = scalar_value(&probe, &f, &weights);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    worst
}

/// Same check for models living in a `ParamStore`, with an extra input `x`.
pub fn max_store_grad_error<F>(store: &ParamStore, x: &Tensor, f: F, rng: &mut ChaCha8Rng) -> f64
where
    F: for<'t> Fn(&Bound<'t>, Var<'t>) -> Var<'t>,
{
    let eval = |store: &ParamStore, x: &Tensor, weights: &Tensor| -> f64 {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let out = project(&tape, f(&bound, tape.var(x.clone())), weights);
        let v = out.value().item().unwrap();
        v
    };
    let weights = {
        let tape = Tape::inference();
        let bound = store.bind(&tape);
        let shape = f(&bound, tape.var(x.clone())).shape();
        random_tensor(rng, &shape, 1.0)
    };
    let (param_grads, x_grad) = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let xv = tape.var(x.clone());
        let out = project(&tape, f(&bound, xv), &weights);
        let grads = tape.backward(out).unwrap();
        let pg: Vec<Tensor> = bound.vars().iter().map(|v| grads.wrt_or_zero(*v)).collect();
        (pg, grads.wrt_or_zero(xv))
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (i, grad) in param_grads.iter().enumerate() {
        assert_eq!(grad.shape(), store.params()[i].value.shape());
        for j in 0..grad.len() {
            let orig = store.params()[i].value.data()[j];
            probe.params_mut()[i].value.data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe, x, &weights);
            probe.params_mut()[i].value.data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe, x, &weights);
            probe.params_mut()[i].value.data_mut()[j] = orig;
            worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    let mut xp = x.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        xp.data_mut()[j] = orig + FD_STEP;
        let up = eval(store, &xp, &weights);
        xp.data_mut()[j] = orig - FD_STEP;
        let down = eval(store, &xp, &weights);
        xp.data_mut()[j] = orig;
        worst = worst.max(rel_err(x_grad.data()[j], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}
