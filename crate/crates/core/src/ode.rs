//! Explicit one-step integrators for `x' = f(t, x)`: Euler, Heun, and the
//! weighted-Heun family whose corrector slope is `(1 - a) f(x) + a f(x~)`.
//!
//! The weighted step evaluates the corrector slope left to right, so at
//! `a = 0` it reproduces [`euler_step`] and at `a = 0.5` [`heun_step`]
//! bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type State = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Euler,
    Heun,
    WeightedHeun { alpha: f64 },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Euler => "euler".into(),
            Method::Heun => "heun".into(),
            Method::WeightedHeun { alpha } => format!("weighted_heun({alpha})"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Method::WeightedHeun { alpha } => check_alpha(alpha),
            _ => Ok(()),
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::AlphaOutOfRange(alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    pub h: f64,
}

impl SolverSpec {
    pub fn new(method: Method, h: f64) -> Result<Self> {
        let spec = Self { method, h };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_step(self.h)?;
        self.method.validate()
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step size must be > 0, got {h}")))
    }
}

fn finite(x: State, step: usize) -> Result<State> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NonFiniteState { step })
    }
}

/// `x + h f(t, x)`.
pub fn euler_step<F>(f: F, t: f64, x: &[f64], h: f64) -> Result<State>
where
    F: Fn(f64, &[f64]) -> State,
{
    check_step(h)?;
    let k1 = f(t, x);
    let next = x.iter().zip(&k1).map(|(x, k)| x + h * k).collect();
    finite(next, 0)
}

/// Predictor `x~ = x + h f(t, x)`, corrector `x + (h/2)(f(t, x) + f(t + h, x~))`.
pub fn heun_step<F>(f: F, t: f64, x: &[f64], h: f64) -> Result<State>
where
    F: Fn(f64, &[f64]) -> State,
{
    check_step(h)?;
    let k1 = f(t, x);
    let predicted: State = x.iter().zip(&k1).map(|(x, k)| x + h * k).collect();
    let k2 = f(t + h, &predicted);
    let half = h / 2.0;
    let next = x
        .iter()
        .zip(k1.iter().zip(&k2))
        .map(|(x, (a, b))| x + half * (a + b))
        .collect();
    finite(next, 0)
}

/// `x + h((1 - alpha) f(t, x) + alpha f(t + h, x~))` with `alpha` in `[0, 1]`.
pub fn weighted_heun_step<F>(f: F, t: f64, x: &[f64], h: f64, alpha: f64) -> Result<State>
where
    F: Fn(f64, &[f64]) -> State,
{
    check_alpha(alpha)?;
    check_step(h)?;
    let k1 = f(t, x);
    let predicted: State = x.iter().zip(&k1).map(|(x, k)| x + h * k).collect();
    let k2 = f(t + h, &predicted);
    let keep = 1.0 - alpha;
    let next = x
        .iter()
        .zip(k1.iter().zip(&k2))
        .map(|(x, (a, b))| x + h * (keep * a + alpha * b))
        .collect();
    finite(next, 0)
}

pub fn step<F>(method: Method, f: F, t: f64, x: &[f64], h: f64) -> Result<State>
where
    F: Fn(f64, &[f64]) -> State,
{
    match method {
        Method::Euler => euler_step(f, t, x, h),
        Method::Heun => heun_step(f, t, x, h),
        Method::WeightedHeun { alpha } => weighted_heun_step(f, t, x, h, alpha),
    }
}

type Rhs<'a> = Box<dyn Fn(f64, &[f64]) -> State + Send + Sync + 'a>;
type Exact<'a> = Box<dyn Fn(f64) -> State + Send + Sync + 'a>;

pub struct OdeProblem<'a> {
    f: Rhs<'a>,
    x0: State,
    t0: f64,
    t_end: f64,
    analytic: Option<Exact<'a>>,
}

impl<'a> OdeProblem<'a> {
    pub fn new(
        f: impl Fn(f64, &[f64]) -> State + Send + Sync + 'a,
        x0: State,
        t0: f64,
        t_end: f64,
    ) -> Result<Self> {
        if !(t_end > t0) {
            return Err(Error::InvalidArgument(format!(
                "t_end ({t_end}) must exceed t0 ({t0})"
            )));
        }
        Ok(Self {
            f: Box::new(f),
            x0,
            t0,
            t_end,
            analytic: None,
        })
    }

    /// Attaches the exact solution. Rejected unless it reproduces `x0` at `t0`.
    pub fn with_analytic(mut self, exact: impl Fn(f64) -> State + Send + Sync + 'a) -> Result<Self> {
        let at0 = exact(self.t0);
        let scale = self.x0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let ok = at0.len() == self.x0.len()
            && at0
                .iter()
                .zip(&self.x0)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * scale);
        if !ok {
            return Err(Error::InvalidArgument(
                "analytic solution does not match x0 at t0".into(),
            ));
        }
        self.analytic = Some(Box::new(exact));
        Ok(self)
    }

    pub fn rhs(&self, t: f64, x: &[f64]) -> State {
        (self.f)(t, x)
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn exact(&self, t: f64) -> Option<State> {
        self.analytic.as_ref().map(|g| g(t))
    }

    pub fn with_horizon(mut self, t_end: f64) -> Result<Self> {
        if !(t_end > self.t0) {
            return Err(Error::InvalidArgument(format!(
                "t_end ({t_end}) must exceed t0 ({})",
                self.t0
            )));
        }
        self.t_end = t_end;
        Ok(self)
    }
}

/// `x' = 2 sqrt(x)`, `x(0) = 1`, exact solution `(t + 1)^2`.
///
/// The state is clamped at zero before the square root.
pub fn sqrt_growth_problem(t_end: f64) -> Result<OdeProblem<'static>> {
    OdeProblem::new(
        |_t, x: &[f64]| x.iter().map(|v| 2.0 * v.max(0.0).sqrt()).collect(),
        vec![1.0],
        0.0,
        t_end,
    )?
    .with_analytic(|t| vec![(t + 1.0) * (t + 1.0)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn endpoint(&self) -> (f64, &[f64]) {
        let last = self.times.len() - 1;
        (self.times[last], &self.states[last])
    }
}

/// Steps from `t0` to `t_end`; the final step is shortened to land exactly on
/// `t_end`.
pub fn integrate(problem: &OdeProblem<'_>, spec: SolverSpec) -> Result<Trajectory> {
    spec.validate()?;
    let span = problem.t_end - problem.t0;
    // tolerate float noise in span / h so that e.g. 4 / 0.1 gives 40 steps
    let ratio = span / spec.h;
    let mut n_full = ratio.floor() as usize;
    if ratio - n_full as f64 > 1.0 - 1e-9 {
        n_full += 1;
    }
    let remainder = span - n_full as f64 * spec.h;
    let has_tail = remainder > 1e-12 * span.max(1.0);

    let mut times = vec![problem.t0];
    let mut states = vec![problem.x0.clone()];
    let mut x = problem.x0.clone();
    let n_steps = n_full + usize::from(has_tail);
    for i in 0..n_steps {
        let t = problem.t0 + i as f64 * spec.h;
        let (h, t_next) = if i == n_steps - 1 {
            (problem.t_end - t, problem.t_end)
        } else {
            (spec.h, problem.t0 + (i + 1) as f64 * spec.h)
        };
        x = step(spec.method, |t, x| problem.rhs(t, x), t, &x, h).map_err(|e| match e {
            Error::NonFiniteState { .. } => Error::NonFiniteState { step: i },
            other => other,
        })?;
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Max-abs difference between the numeric and exact endpoint.
pub fn endpoint_error(problem: &OdeProblem<'_>, spec: SolverSpec) -> Result<f64> {
    let traj = integrate(problem, spec)?;
    let (t, x) = traj.endpoint();
    let exact = problem.exact(t).ok_or(Error::AnalyticRequired)?;
    Ok(x.iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderEstimate {
    pub order: f64,
    /// `(h, endpoint error)` for every step size, in input order.
    pub errors: Vec<(f64, f64)>,
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn empirical_order(problem: &OdeProblem<'_>, method: Method, h_list: &[f64]) -> Result<OrderEstimate> {
    if problem.analytic.is_none() {
        return Err(Error::AnalyticRequired);
    }
    if h_list.len() < 2 {
        return Err(Error::InvalidArgument(
            "order estimation needs at least two step sizes".into(),
        ));
    }
    let errors = h_list
        .iter()
        .map(|&h| Ok((h, endpoint_error(problem, SolverSpec::new(method, h)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let pts: Vec<(f64, f64)> = errors.iter().map(|(h, e)| (h.ln(), e.ln())).collect();
    Ok(OrderEstimate {
        order: least_squares_slope(&pts),
        errors,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
