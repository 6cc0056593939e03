//! Optimizers, model assembly, training loops and per-epoch metrics.
//!
//! One "iteration" in the metrics is one epoch over the training split.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, LossKind, ParamId, ParamStore, Tape, Target, Var};
use crate::blocks::{stack_forward, uniform, BlockSpec, Dense, Family};
use crate::data::{batch_iter, epoch_order, LabeledDataset, SequenceDataset, SequencePair};
use crate::error::{Error, Result};
use crate::recurrent::{gru_step, residual_lstm_step, GruParams, LstmParams, LstmState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr()
            )));
        }
        Ok(())
    }
}

/// `v = momentum * v + g`, `w -= lr * v`.
pub fn sgd_step(params: &mut ParamStore, velocity: &mut [Tensor], lr: f64, momentum: f64) {
    for (p, v) in params.params_mut().iter_mut().zip(velocity) {
        for ((w, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
            *vel = momentum * *vel + g;
            *w -= lr * *vel;
        }
    }
}

/// Adam with bias correction; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut ParamStore,
    m: &mut [Tensor],
    v: &mut [Tensor],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for ((p, m), v) in params.params_mut().iter_mut().zip(m).zip(v) {
        let grads = p.grad.data();
        for (((w, g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    t: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            t: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => sgd_step(params, &mut self.first, lr, momentum),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => adam_step(params, &mut self.first, &mut self.second, self.t, lr, beta1, beta2, eps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Input projection, a stack of residual-family blocks over a dense
    /// transition map, and a linear head.
    Blocks {
        block: BlockSpec,
        hidden: usize,
        activation: Activation,
        /// Transition weights are drawn from `U(-s/sqrt(hidden), s/sqrt(hidden))`.
        init_scale: f64,
    },
    /// LSTM over `steps` equal column chunks of each sample; the family wraps
    /// the hidden update (`plain` is the ordinary LSTM).
    Lstm {
        #[serde(flatten)]
        family: Family,
        hidden: usize,
        steps: usize,
    },
    Gru {
        hidden: usize,
        steps: usize,
    },
}

impl ModelSpec {
    pub fn blocks(family: Family, depth: usize, hidden: usize) -> Self {
        ModelSpec::Blocks {
            block: BlockSpec {
                family,
                depth,
                share_weights: true,
            },
            hidden,
            activation: Activation::Tanh,
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Blocks { block, hidden, .. } => {
                block.validate()?;
                nonzero("hidden", *hidden)
            }
            ModelSpec::Lstm { family, hidden, steps } => {
                family.validate()?;
                nonzero("hidden", *hidden)?;
                nonzero("steps", *steps)
            }
            ModelSpec::Gru { hidden, steps } => {
                nonzero("hidden", *hidden)?;
                nonzero("steps", *steps)
            }
        }
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::InvalidArgument(format!("{name} must be >= 1")))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Fill `wall_time_s` with measured seconds. Off by default so that runs
    /// with the same config produce identical metrics files.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        nonzero("batch_size", self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(&[output, input], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    fn apply<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(bound.var(self.weight).t())?.add_bias(bound.var(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Blocks {
        input: Linear,
        activation: Activation,
        block: BlockSpec,
        maps: Vec<Dense>,
    },
    Lstm {
        family: Family,
        cell: LstmParams,
        steps: usize,
    },
    Gru {
        cell: GruParams,
        steps: usize,
    },
}

/// Feature vector in, class logits out.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    spec: ModelSpec,
    store: ParamStore,
    body: Body,
    head: Linear,
    n_features: usize,
    n_classes: usize,
}

impl Classifier {
    pub fn new(spec: &ModelSpec, n_features: usize, n_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (body, hidden) = match *spec {
            ModelSpec::Blocks {
                block,
                hidden,
                activation,
                init_scale,
            } => {
                let input = Linear::init(&mut store, "input", n_features, hidden, &mut rng);
                let maps = (0..block.n_maps())
                    .map(|i| Dense::init(&mut store, &format!("block{i}"), hidden, activation, true, init_scale, &mut rng))
                    .collect();
                (
                    Body::Blocks {
                        input,
                        activation,
                        block,
                        maps,
                    },
                    hidden,
                )
            }
            ModelSpec::Lstm { family, hidden, steps } => {
                let width = chunk_width(n_features, steps)?;
                let cell = LstmParams::init(&mut store, "lstm", width, hidden, &mut rng);
                (Body::Lstm { family, cell, steps }, hidden)
            }
            ModelSpec::Gru { hidden, steps } => {
                let width = chunk_width(n_features, steps)?;
                let cell = GruParams::init(&mut store, "gru", width, hidden, &mut rng);
                (Body::Gru { cell, steps }, hidden)
            }
        };
        let head = Linear::init(&mut store, "head", hidden, n_classes, &mut rng);
        Ok(Self {
            spec: *spec,
            store,
            body,
            head,
            n_features,
            n_classes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Logits `[batch, n_classes]` for a `[batch, n_features]` input.
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let width = x.value().cols();
        if width != self.n_features {
            return Err(Error::shape("Classifier::forward", &x.shape(), &[self.n_features]));
        }
        let hidden = match &self.body {
            Body::Blocks {
                input,
                activation,
                block,
                maps,
            } => {
                let h0 = input.apply(bound, x)?.activation(*activation);
                stack_forward(block, maps, bound, h0)?.0
            }
            Body::Lstm { family, cell, steps } => {
                let batch = x.value().rows();
                let mut state = LstmState::zeros(bound, batch, cell.hidden_size);
                let w = width / steps;
                for t in 0..*steps {
                    let xt = x.slice_cols(t * w, w)?;
                    state = residual_lstm_step(*family, cell, bound, xt, state)?;
                }
                state.h
            }
            Body::Gru { cell, steps } => {
                let batch = x.value().rows();
                let mut h = x.tape().constant(Tensor::zeros(&[batch, cell.hidden_size]));
                let w = width / steps;
                for t in 0..*steps {
                    h = gru_step(cell, bound, x.slice_cols(t * w, w)?, h)?;
                }
                h
            }
        };
        self.head.apply(bound, hidden)
    }

    /// Loss on a batch, recorded on `tape`.
    pub fn loss<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, x: &Tensor, labels: &[usize], kind: LossKind) -> Result<Var<'t>> {
        let xv = tape.constant(x.clone());
        self.forward(bound, xv)?.loss(kind, Target::Classes(labels))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::inference();
        let bound = self.store.bind(&tape);
        let logits = self.forward(&bound, tape.constant(x.clone()))?;
        let classes = logits.value().argmax_rows();
        Ok(classes)
    }
}

fn chunk_width(n_features: usize, steps: usize) -> Result<usize> {
    if steps == 0 || !n_features.is_multiple_of(steps) {
        return Err(Error::InvalidArgument(format!(
            "{n_features} features cannot be split into {steps} equal steps"
        )));
    }
    Ok(n_features / steps)
}

const EVAL_CHUNK: usize = 1000;

/// Mean loss and argmax accuracy over a dataset, evaluated without gradient
/// recording.
pub fn evaluate(model: &Classifier, ds: &LabeledDataset, kind: LossKind) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = ds.features.select_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
        let tape = Tape::inference();
        let bound = model.store.bind(&tape);
        let logits = model.forward(&bound, tape.constant(x))?;
        let l = logits.loss(kind, Target::Classes(&labels))?;
        loss += l.value().item().unwrap() * chunk.len() as f64;
        correct += logits
            .value()
            .argmax_rows()
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "iteration,train_loss,eval_loss,eval_accuracy,wall_time_s";

impl MetricsHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Highest eval accuracy and the first iteration reaching it.
    pub fn best_accuracy(&self) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for r in &self.records {
            if best.is_none_or(|(a, _)| r.eval_accuracy > a) {
                best = Some((r.eval_accuracy, r.iteration));
            }
        }
        best
    }

    pub fn accuracy_at(&self, iteration: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.iteration == iteration)
            .map(|r| r.eval_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration,
                fmt_sig(r.train_loss, 9),
                fmt_sig(r.eval_loss, 9),
                fmt_sig(r.eval_accuracy, 9),
                fmt_sig(r.wall_time_s, 9)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::InvalidArgument("missing metrics header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::BadRowLength {
                    line: i + 2,
                    expected: 5,
                    found: f.len(),
                });
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::NonFiniteValue {
                    line: i + 2,
                    value: s.to_string(),
                })
            };
            records.push(EpochRecord {
                iteration: num(f[0])? as usize,
                train_loss: num(f[1])?,
                eval_loss: num(f[2])?,
                eval_accuracy: num(f[3])?,
                wall_time_s: num(f[4])?,
            });
        }
        Ok(Self { records })
    }
}

/// Formats with `digits` significant digits, like C's `%.{digits}g`.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Training failure together with the epochs completed before it.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} completed epochs: {source}", history.records.len())]
pub struct TrainError {
    pub history: MetricsHistory,
    #[source]
    pub source: Error,
}

impl From<Error> for TrainError {
    fn from(source: Error) -> Self {
        Self {
            history: MetricsHistory::default(),
            source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: Classifier,
    pub history: MetricsHistory,
}

/// Mini-batch training with per-epoch evaluation on `test`, which the
/// optimizer never sees. Deterministic for a fixed config.
pub fn train_classifier(config: &TrainConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<TrainedClassifier, TrainError> {
    config.validate()?;
    let mut model = Classifier::new(&config.model, train.n_features(), train.n_classes, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, model.params());
    let mut history = MetricsHistory::default();
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for batch in batch_iter(train, config.batch_size, config.seed, epoch as u64) {
            let step = (|| -> Result<f64> {
                let tape = Tape::new();
                let bound = model.store.bind(&tape);
                let loss = model.loss(&tape, &bound, &batch.features, &batch.labels, config.loss)?;
                let grads = tape.backward(loss)?;
                model.store.zero_grad();
                model.store.accumulate(&bound, &grads);
                let v = loss.value().item().unwrap();
                Ok(v)
            })();
            let value = match step {
                Ok(v) => v,
                Err(source) => return Err(TrainError { history, source }),
            };
            opt.step(&mut model.store);
            total += value * batch.labels.len() as f64;
        }
        let (eval_loss, eval_accuracy) = match evaluate(&model, test, config.loss) {
            Ok(r) => r,
            Err(source) => return Err(TrainError { history, source }),
        };
        history.records.push(EpochRecord {
            iteration: epoch,
            train_loss: total / train.len().max(1) as f64,
            eval_loss,
            eval_accuracy,
            wall_time_s: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(TrainedClassifier { model, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceOptions {
    /// Truncated-BPTT window length.
    pub window: usize,
    /// Offset between consecutive training windows.
    pub stride: usize,
    /// Leading fraction of each series used for training; the rest is held out.
    pub train_fraction: f64,
    /// Free-running steps to generate; `None` means one period of the wave.
    pub horizon: Option<usize>,
    /// A generated value counts as accurate when within this distance of the
    /// true signal.
    pub tolerance: f64,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self {
            window: 32,
            stride: 4,
            train_fraction: 0.75,
            horizon: None,
            tolerance: 0.05,
        }
    }
}

/// Scalar-in, scalar-out recurrent predictor built from an LSTM cell whose
/// hidden update is wrapped by a block family.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    family: Family,
    cell: LstmParams,
    head: Linear,
    store: ParamStore,
}

impl SequenceModel {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let ModelSpec::Lstm { family, hidden, .. } = *spec else {
            return Err(Error::InvalidArgument(
                "sequence prediction needs an LSTM model".into(),
            ));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = LstmParams::init(&mut store, "lstm", 1, hidden, &mut rng);
        let head = Linear::init(&mut store, "head", hidden, 1, &mut rng);
        Ok(Self {
            family,
            cell,
            head,
            store,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn step<'t>(&self, bound: &Bound<'t>, x: Var<'t>, state: LstmState<'t>) -> Result<(Var<'t>, LstmState<'t>)> {
        let next = residual_lstm_step(self.family, &self.cell, bound, x, state)?;
        Ok((self.head.apply(bound, next.h)?, next))
    }

    /// Teacher-forced one-step predictions for a single series.
    pub fn predict_series(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let bound = self.store.bind(&tape);
        let mut state = LstmState::zeros(&bound, 1, self.cell.hidden_size);
        let mut out = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (y, s) = self.step(&bound, tape.constant(Tensor::from_rows(&[[v]])), state)?;
            out.push(y.value().data()[0]);
            state = s;
        }
        Ok(out)
    }

    /// Runs from a zero state over the true `prime` values, then feeds its
    /// own predictions back. Returns `horizon` predictions, the first being
    /// the one made after the last primed value.
    pub fn generate(&self, prime: &[f64], horizon: usize) -> Result<Vec<f64>> {
        if prime.is_empty() {
            return Err(Error::InvalidArgument("generation needs at least one primed value".into()));
        }
        let tape = Tape::inference();
        let bound = self.store.bind(&tape);
        let mut state = LstmState::zeros(&bound, 1, self.cell.hidden_size);
        let mut last = 0.0;
        for &v in prime {
            let (y, s) = self.step(&bound, tape.constant(Tensor::from_rows(&[[v]])), state)?;
            last = y.value().data()[0];
            state = s;
        }
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            out.push(last);
            if out.len() == horizon {
                break;
            }
            let (y, s) = self.step(&bound, tape.constant(Tensor::from_rows(&[[last]])), state)?;
            last = y.value().data()[0];
            state = s;
        }
        Ok(out)
    }

    fn window_loss<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, inputs: &Tensor, targets: &Tensor) -> Result<Var<'t>> {
        let (batch, len) = (inputs.rows(), inputs.cols());
        let x = tape.constant(inputs.clone());
        let mut state = LstmState::zeros(bound, batch, self.cell.hidden_size);
        let mut preds = Vec::with_capacity(len);
        for t in 0..len {
            let (y, s) = self.step(bound, x.slice_cols(t, 1)?, state)?;
            preds.push(y);
            state = s;
        }
        let mut pred = preds[0];
        for p in &preds[1..] {
            pred = pred.concat_cols(*p)?;
        }
        pred.mse(targets)
    }
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub model: SequenceModel,
    pub history: MetricsHistory,
    pub generated: Vec<f64>,
    pub truth: Vec<f64>,
    /// Mean squared error of `generated` against `truth`.
    pub generation_mse: f64,
}

fn split_point(len: usize, fraction: f64) -> usize {
    ((len as f64 * fraction).floor() as usize).clamp(1, len)
}

/// Trains on windows from the leading part of every series. After each epoch
/// the model is primed with the last training window and generates freely
/// into the held-out tail; `eval_loss` and `eval_accuracy` score that
/// generation. The returned wave is the final generation on the first series.
pub fn train_seq_predictor(config: &TrainConfig, opts: &SequenceOptions, ds: &SequenceDataset) -> Result<SequenceRun, TrainError> {
    config.validate()?;
    if config.loss != LossKind::Mse {
        return Err(Error::InvalidArgument("sequence prediction uses the mse loss".into()).into());
    }
    if ds.series.is_empty() || opts.window == 0 || opts.stride == 0 {
        return Err(Error::InvalidArgument("empty sequence task".into()).into());
    }
    let mut model = SequenceModel::new(&config.model, config.seed)?;

    // (series, start) of every training window
    let mut windows = Vec::new();
    for (s, pair) in ds.series.iter().enumerate() {
        let train_len = split_point(pair.input.len(), opts.train_fraction);
        if train_len < opts.window {
            return Err(Error::InvalidArgument(format!(
                "training part ({train_len} steps) shorter than the window ({})",
                opts.window
            ))
            .into());
        }
        let mut start = 0;
        while start + opts.window <= train_len {
            windows.push((s, start));
            start += opts.stride;
        }
    }

    let period = period_steps(&ds.times);
    let mut opt = Optimizer::new(config.optimizer, model.params());
    let mut history = MetricsHistory::default();
    let clock = Instant::now();
    for epoch in 1..=config.epochs {
        let order = epoch_order(windows.len(), config.seed, epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let rows_in: Vec<&[f64]> = chunk
                .iter()
                .map(|&w| {
                    let (s, st) = windows[w];
                    &ds.series[s].input[st..st + opts.window]
                })
                .collect();
            let rows_out: Vec<&[f64]> = chunk
                .iter()
                .map(|&w| {
                    let (s, st) = windows[w];
                    &ds.series[s].target[st..st + opts.window]
                })
                .collect();
            let (xin, yout) = (Tensor::from_rows(&rows_in), Tensor::from_rows(&rows_out));
            let step = (|| -> Result<f64> {
                let tape = Tape::new();
                let bound = model.store.bind(&tape);
                let loss = model.window_loss(&tape, &bound, &xin, &yout)?;
                let grads = tape.backward(loss)?;
                model.store.zero_grad();
                model.store.accumulate(&bound, &grads);
                let v = loss.value().item().unwrap();
                Ok(v)
            })();
            match step {
                Ok(v) => total += v * chunk.len() as f64,
                Err(source) => return Err(TrainError { history, source }),
            }
            opt.step(&mut model.store);
        }

        let mut sq = 0.0;
        let mut hits = 0usize;
        let mut count = 0usize;
        for pair in &ds.series {
            let (generated, truth) = match held_out_generation(&model, pair, opts, period) {
                Ok(g) => g,
                Err(source) => return Err(TrainError { history, source }),
            };
            for (p, t) in generated.iter().zip(&truth) {
                sq += (p - t) * (p - t);
                hits += usize::from((p - t).abs() < opts.tolerance);
                count += 1;
            }
        }
        let eval_loss = if count > 0 { sq / count as f64 } else { 0.0 };
        if !eval_loss.is_finite() {
            return Err(TrainError {
                history,
                source: Error::NonFiniteLoss(eval_loss),
            });
        }
        history.records.push(EpochRecord {
            iteration: epoch,
            train_loss: total / windows.len() as f64,
            eval_loss,
            eval_accuracy: if count > 0 { hits as f64 / count as f64 } else { 0.0 },
            wall_time_s: if config.record_wall_time {
                clock.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    let (generated, truth) = held_out_generation(&model, &ds.series[0], opts, period)?;
    let generation_mse = mse(&generated, &truth);
    Ok(SequenceRun {
        model,
        history,
        generated,
        truth,
        generation_mse,
    })
}

/// Free-running generation into the held-out tail of `pair`, primed with the
/// last `window` training values. Returns `(generated, truth)`.
fn held_out_generation(model: &SequenceModel, pair: &SequencePair, opts: &SequenceOptions, period: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let split = split_point(pair.input.len(), opts.train_fraction);
    let prime = opts.window.min(split);
    let horizon = opts.horizon.unwrap_or(period).min(pair.input.len() - split + 1);
    let generated = model.generate(&pair.input[split - prime..split], horizon)?;
    let truth = pair.target[split - 1..split - 1 + horizon].to_vec();
    Ok((generated, truth))
}

/// Steps per `2 pi` for uniformly spaced sample times.
pub fn period_steps(times: &[f64]) -> usize {
    if times.len() < 2 {
        return 1;
    }
    let dt = times[1] - times[0];
    ((2.0 * std::f64::consts::PI / dt).round() as usize).max(1)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_sine, SequencePair};

    #[test]
    fn sgd_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.0]));
        store.get_mut(w).grad = Tensor::vector(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.0 }, &store);
        opt.step(&mut store);
        assert_eq!(store.get(w).value.data(), &[-0.1]);
        store.zero_grad();
        opt.step(&mut store);
        assert_eq!(store.get(w).value.data(), &[-0.1]);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        for g in [3.0, -0.02, 1e-3] {
            let mut store = ParamStore::new();
            let w = store.add("w", Tensor::vector(vec![1.0]));
            store.get_mut(w).grad = Tensor::vector(vec![g]);
            let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &store);
            opt.step(&mut store);
            let delta = store.get(w).value.data()[0] - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
        }
    }

    #[test]
    fn fmt_sig_matches_printf_g() {
        assert_eq!(fmt_sig(0.0, 9), "0");
        assert_eq!(fmt_sig(0.5, 9), "0.5");
        assert_eq!(fmt_sig(1.0 / 3.0, 9), "0.333333333");
        assert_eq!(fmt_sig(2.0 / 3.0 * 1e-7, 9), "6.66666667e-8");
        assert_eq!(fmt_sig(123456789.0, 9), "123456789");
        assert_eq!(fmt_sig(1234567890.0, 9), "1.23456789e9");
        assert_eq!(fmt_sig(-0.000123, 9), "-0.000123");
        assert_eq!(fmt_sig(0.99999999999, 9), "1");
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let h = MetricsHistory {
            records: vec![EpochRecord {
                iteration: 1,
                train_loss: 0.123456789123,
                eval_loss: 2.5,
                eval_accuracy: 0.75,
                wall_time_s: 0.0,
            }],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("iteration,train_loss,eval_loss,eval_accuracy,wall_time_s\n"));
        assert!(csv.contains("1,0.123456789,2.5,0.75,0\n"));
        let back = MetricsHistory::from_csv(&csv).unwrap();
        assert_eq!(back.records[0].eval_accuracy, 0.75);
    }

    fn separable(n: usize) -> LabeledDataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let a = (i as f64 * 0.37).sin();
            let b = (i as f64 * 0.11).cos();
            let label = usize::from(a + 0.5 * b > 0.0);
            let margin = if label == 1 { 0.3 } else { -0.3 };
            rows.push(vec![a + margin, b + margin]);
            labels.push(label);
        }
        LabeledDataset::new(Tensor::from_rows(&rows), labels, 2).unwrap()
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            model: ModelSpec::blocks(Family::Heun, 2, 8),
            optimizer: OptimizerConfig::adam(0.02),
            epochs,
            batch_size: 16,
            seed: 11,
            loss: LossKind::SoftmaxCrossEntropy,
            record_wall_time: false,
        }
    }

    #[test]
    fn zero_epochs_give_empty_history() {
        let ds = separable(40);
        let run = train_classifier(&small_config(0), &ds, &ds).unwrap();
        assert!(run.history.is_empty());
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let train = separable(200);
        let run = train_classifier(&small_config(50), &train, &train).unwrap();
        assert_eq!(run.history.records.last().unwrap().eval_accuracy, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(64);
        let a = train_classifier(&small_config(3), &ds, &ds).unwrap();
        let b = train_classifier(&small_config(3), &ds, &ds).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn evaluate_matches_train_mode_loss() {
        let ds = separable(30);
        let model = Classifier::new(&ModelSpec::blocks(Family::Resnet, 2, 4), 2, 2, 5).unwrap();
        let (loss, _) = evaluate(&model, &ds, LossKind::SoftmaxCrossEntropy).unwrap();
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let l = model
            .loss(&tape, &bound, &ds.features, &ds.labels, LossKind::SoftmaxCrossEntropy)
            .unwrap();
        assert!((l.value().item().unwrap() - loss).abs() < 1e-14);
    }

    #[test]
    fn perfect_predictor_accuracy() {
        // a 1-feature, 2-class set where the untrained head's sign is fixed by hand
        let ds = LabeledDataset::new(Tensor::from_rows(&[[1.0], [-1.0], [2.0]]), vec![1, 0, 1], 2).unwrap();
        let mut model = Classifier::new(
            &ModelSpec::Blocks {
                block: BlockSpec::new(Family::Resnet, 1, true).unwrap(),
                hidden: 1,
                activation: Activation::Identity,
                init_scale: 0.0,
            },
            1,
            2,
            0,
        )
        .unwrap();
        for p in model.params_mut().params_mut() {
            let v = match p.name.as_str() {
                "input.weight" => vec![1.0],
                "head.weight" => vec![-1.0, 1.0],
                _ => vec![0.0; p.value.len()],
            };
            p.value.data_mut().copy_from_slice(&v);
        }
        let (_, acc) = evaluate(&model, &ds, LossKind::SoftmaxCrossEntropy).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn non_finite_loss_aborts_with_history() {
        let ds = separable(32);
        let mut cfg = small_config(3);
        cfg.optimizer = OptimizerConfig::Sgd { lr: f64::INFINITY, momentum: 0.0 };
        let err = train_classifier(&cfg, &ds, &ds).unwrap_err();
        assert!(matches!(err.source, Error::NonFiniteLoss(_)), "{err}");
    }

    #[test]
    fn recurrent_classifiers_run() {
        let ds = LabeledDataset::new(
            Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]]),
            vec![0, 1],
            2,
        )
        .unwrap();
        for spec in [
            ModelSpec::Lstm { family: Family::Plain, hidden: 3, steps: 2 },
            ModelSpec::Lstm { family: Family::Heun, hidden: 3, steps: 4 },
            ModelSpec::Gru { hidden: 3, steps: 2 },
        ] {
            let cfg = TrainConfig { model: spec, ..small_config(2) };
            let run = train_classifier(&cfg, &ds, &ds).unwrap();
            assert_eq!(run.history.len(), 2);
        }
        let bad = TrainConfig {
            model: ModelSpec::Gru { hidden: 3, steps: 3 },
            ..small_config(1)
        };
        assert!(train_classifier(&bad, &ds, &ds).is_err());
    }

    fn seq_config(family: Family, epochs: usize) -> TrainConfig {
        TrainConfig {
            model: ModelSpec::Lstm { family, hidden: 6, steps: 1 },
            optimizer: OptimizerConfig::adam(0.01),
            epochs,
            batch_size: 8,
            seed: 3,
            loss: LossKind::Mse,
            record_wall_time: false,
        }
    }

    #[test]
    fn constant_zero_series_is_fit() {
        let ds = SequenceDataset::new(
            vec![SequencePair {
                input: vec![0.0; 80],
                target: vec![0.0; 80],
            }],
            (0..81).map(|i| i as f64 * 0.1).collect(),
        )
        .unwrap();
        let opts = SequenceOptions {
            window: 10,
            stride: 5,
            horizon: Some(10),
            ..SequenceOptions::default()
        };
        let run = train_seq_predictor(&seq_config(Family::Heun, 60), &opts, &ds).unwrap();
        let last = run.history.records.last().unwrap();
        assert!(last.train_loss < 1e-4, "{}", last.train_loss);
        assert!(run.generation_mse < 1e-3);
    }

    #[test]
    fn seq_training_is_deterministic() {
        let ds = gen_sine(4.0 * std::f64::consts::PI, 96).unwrap();
        let opts = SequenceOptions {
            window: 12,
            stride: 6,
            ..SequenceOptions::default()
        };
        let a = train_seq_predictor(&seq_config(Family::Heun, 3), &opts, &ds).unwrap();
        let b = train_seq_predictor(&seq_config(Family::Heun, 3), &opts, &ds).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.generated, b.generated);
        let n = ds.series[0].input.len();
        let room = n - split_point(n, 0.75) + 1;
        assert_eq!(a.generated.len(), period_steps(&ds.times).min(room));
    }

    #[test]
    fn seq_requires_mse_and_lstm() {
        let ds = gen_sine(4.0 * std::f64::consts::PI, 96).unwrap();
        let mut cfg = seq_config(Family::Plain, 1);
        cfg.loss = LossKind::SoftmaxCrossEntropy;
        assert!(train_seq_predictor(&cfg, &SequenceOptions::default(), &ds).is_err());
        let mut cfg = seq_config(Family::Plain, 1);
        cfg.model = ModelSpec::Gru { hidden: 2, steps: 1 };
        assert!(train_seq_predictor(&cfg, &SequenceOptions::default(), &ds).is_err());
    }
}
