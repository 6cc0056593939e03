//! Depth-wise state updates built on a shared transition map `F`.
//!
//! | family            | update                                          |
//! |-------------------|-------------------------------------------------|
//! | plain             | `F(x)`                                          |
//! | resnet            | `x + F(x)`                                      |
//! | heun              | `x~ = x + F(x)`, `x + 0.5 (F(x) + F(x~))`       |
//! | extended heun (a) | `x~ = x + F(x)`, `x + ((1 - a) F(x) + a F(x~))` |
//!
//! These are the Euler, Heun and weighted-Heun steps of `x' = F(x)` with unit
//! step size. `F` is evaluated with the same parameters in both stages and both
//! evaluations are recorded on the tape, so gradients flow through the
//! predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ode::check_alpha;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Plain,
    Resnet,
    Heun,
    ExtendedHeun { alpha: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Family::ExtendedHeun { alpha } => check_alpha(alpha),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Family::Plain => "plain".into(),
            Family::Resnet => "resnet".into(),
            Family::Heun => "heun".into(),
            Family::ExtendedHeun { alpha } => format!("extheun({alpha})"),
        }
    }

    /// Applies one block update with the transition `f`.
    pub fn update<'t, F>(&self, f: F, x: Var<'t>) -> Result<Var<'t>>
    where
        F: Fn(Var<'t>) -> Result<Var<'t>>,
    {
        match *self {
            Family::Plain => {
                let y = f(x)?;
                same_shape(x, y)?;
                Ok(y)
            }
            Family::Resnet => {
                let fx = f(x)?;
                x.add(fx)
            }
            Family::Heun => {
                let fx = f(x)?;
                let predicted = x.add(fx)?;
                let fp = f(predicted)?;
                x.add(fx.add(fp)?.scale(0.5))
            }
            Family::ExtendedHeun { alpha } => {
                check_alpha(alpha)?;
                let fx = f(x)?;
                let predicted = x.add(fx)?;
                let fp = f(predicted)?;
                x.add(fx.scale(1.0 - alpha).add(fp.scale(alpha))?)
            }
        }
    }
}

fn same_shape(x: Var<'_>, y: Var<'_>) -> Result<()> {
    let (a, b) = (x.shape(), y.shape());
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "transition",
            left: a,
            right: b,
        })
    }
}

/// A shape-preserving differentiable map applied inside each block.
pub trait TransitionMap {
    /// Width of the state vector (columns of the `[batch, dim]` input).
    fn dim(&self) -> usize;

    fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>>;
}

/// `F(x) = act(x W^T + b)` with a square `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Activation,
    dim: usize,
}

impl Dense {
    /// Registers a `dim x dim` weight drawn from `U(-scale/sqrt(dim), scale/sqrt(dim))`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        activation: Activation,
        with_bias: bool,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = scale / (dim as f64).sqrt();
        let w = uniform(&[dim, dim], bound, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[dim])));
        Self {
            weight,
            bias,
            activation,
            dim,
        }
    }

    pub fn from_weight(store: &mut ParamStore, name: &str, weight: Tensor, activation: Activation) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("Dense::from_weight", s, &[]));
        }
        let dim = s[0];
        Ok(Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: None,
            activation,
            dim,
        })
    }
}

impl TransitionMap for Dense {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let z = x.matmul(bound.var(self.weight).t())?;
        let z = match self.bias {
            Some(b) => z.add_bias(bound.var(b))?,
            None => z,
        };
        Ok(z.activation(self.activation))
    }
}

/// `F(x) = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroMap(pub usize);

impl TransitionMap for ZeroMap {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply<'t>(&self, _: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.scale(0.0))
    }
}

/// `F(x) = c` for every row of `x`.
#[derive(Debug, Clone)]
pub struct ConstantMap(pub Vec<f64>);

impl TransitionMap for ConstantMap {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn apply<'t>(&self, _: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let c = x.tape().constant(Tensor::vector(self.0.clone()));
        x.scale(0.0).add_bias(c)
    }
}

/// Wraps a closure as a transition map.
pub struct FnMap<F> {
    dim: usize,
    f: F,
}

impl<F> FnMap<F>
where
    F: for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> TransitionMap for FnMap<F>
where
    F: for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        (self.f)(bound, x)
    }
}

fn check_input<M: TransitionMap + ?Sized>(map: &M, x: Var<'_>) -> Result<()> {
    let v = x.value();
    if v.cols() != map.dim() || v.rank() != 2 {
        return Err(Error::shape("block input", v.shape(), &[map.dim()]));
    }
    Ok(())
}

pub fn plain_forward<'t, M: TransitionMap + ?Sized>(map: &M, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    block_forward(Family::Plain, map, bound, x)
}

pub fn resnet_forward<'t, M: TransitionMap + ?Sized>(map: &M, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    block_forward(Family::Resnet, map, bound, x)
}

pub fn heun_forward<'t, M: TransitionMap + ?Sized>(map: &M, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    block_forward(Family::Heun, map, bound, x)
}

pub fn extended_heun_forward<'t, M: TransitionMap + ?Sized>(
    map: &M,
    bound: &Bound<'t>,
    x: Var<'t>,
    alpha: f64,
) -> Result<Var<'t>> {
    check_alpha(alpha)?;
    block_forward(Family::ExtendedHeun { alpha }, map, bound, x)
}

pub fn block_forward<'t, M: TransitionMap + ?Sized>(
    family: Family,
    map: &M,
    bound: &Bound<'t>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    check_input(map, x)?;
    family.update(|s| map.apply(bound, s), x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    #[serde(flatten)]
    pub family: Family,
    pub depth: usize,
    pub share_weights: bool,
}

impl BlockSpec {
    pub fn new(family: Family, depth: usize, share_weights: bool) -> Result<Self> {
        let spec = Self {
            family,
            depth,
            share_weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.depth == 0 {
            return Err(Error::InvalidArgument("block depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of distinct transition maps the stack needs.
    pub fn n_maps(&self) -> usize {
        if self.share_weights {
            1
        } else {
            self.depth
        }
    }
}

/// Applies `spec.depth` block updates. With shared weights `maps` holds one
/// map reused at every layer; otherwise one map per layer.
///
/// Returns the final state and every intermediate state (`depth + 1` entries,
/// starting with `x0`).
pub fn stack_forward<'t, M: TransitionMap>(
    spec: &BlockSpec,
    maps: &[M],
    bound: &Bound<'t>,
    x0: Var<'t>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    spec.validate()?;
    if maps.len() != spec.n_maps() {
        return Err(Error::InvalidArgument(format!(
            "stack needs {} transition maps, got {}",
            spec.n_maps(),
            maps.len()
        )));
    }
    let mut states = Vec::with_capacity(spec.depth + 1);
    states.push(x0);
    let mut x = x0;
    for layer in 0..spec.depth {
        let map = if spec.share_weights { &maps[0] } else { &maps[layer] };
        x = block_forward(spec.family, map, bound, x)?;
        states.push(x);
    }
    Ok((x, states))
}

/// Jacobian `d block(x) / d x` at a single state, one reverse pass per output
/// coordinate. Row `i` holds the gradient of output `i`.
pub fn block_jacobian<M: TransitionMap + ?Sized>(
    family: Family,
    map: &M,
    params: &ParamStore,
    x: &[f64],
) -> Result<Tensor> {
    family.validate()?;
    let n = x.len();
    let mut jac = Vec::with_capacity(n * n);
    for i in 0..n {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let xv = tape.var(Tensor::matrix(1, n, x.to_vec())?);
        let out = block_forward(family, map, &bound, xv)?;
        let root = out.slice_cols(i, 1)?.sum();
        let grads = tape.backward(root)?;
        jac.extend_from_slice(grads.wrt_or_zero(xv).data());
    }
    Tensor::matrix(n, n, jac)
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}
