//! Residual networks read as ODE solvers.
//!
//! A ResNet block `x + F(x)` is an Euler step of `x' = F(x)` with unit step
//! size. This crate pairs that view with the Heun predictor-corrector step and
//! its weighted generalization, and provides everything needed to train and
//! compare the resulting networks:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run
//!   reverse-mode tape.
//! - [`ode`]: Euler, Heun and weighted-Heun integrators plus an empirical
//!   order-of-accuracy estimator.
//! - [`blocks`]: plain, ResNet, Heun and extended-Heun blocks over a shared
//!   transition map, stacks of them, and block Jacobians.
//! - [`recurrent`]: LSTM and GRU cells and the residual/Heun-wrapped LSTM.
//! - [`data`]: MNIST IDX and MIT-BIH heartbeat CSV loaders, the sine task,
//!   stratified splits and seeded batching.
//! - [`training`]: optimizers, models, training loops and metrics.

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod ode;
pub mod recurrent;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
