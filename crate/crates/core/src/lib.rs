//! Physics-informed estimation of single-track vehicle parameters.
//!
//! The crate is organised bottom-up:
//!
//! * [`dynamics`] – drivetrain, Pacejka tire and single-track state equation.
//! * [`simulator`] – deterministic data generator driven by pure pursuit.
//! * [`data`] – CSV I/O, windowing into N-step histories, train/validation split.
//! * [`net`] – reverse-mode tape, recurrent/dense estimator, physics guard layer.
//! * [`training`] – losses, Adam, pretraining, layer-freezing fine-tuning, random search.
//! * [`ekf`] – embedded Kalman denoising stage and coefficient-range adjustment.
//! * [`eval`] – metrics, force-curve sweeps and coefficient differences.

pub mod data;
pub mod dynamics;
pub mod ekf;
pub mod error;
pub mod eval;
pub mod net;
pub mod rng;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
