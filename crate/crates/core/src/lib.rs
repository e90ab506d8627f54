//! Spiking MLPs deployed on simulated RRAM crossbars, adapted online with
//! backpropagation or direct feedback alignment, with a Gaussian-process
//! device-noise model and an energy/latency/area cost model.

pub mod crossbar;
pub mod deployment;
pub mod error;
pub mod harness;
pub mod hwmodel;
pub mod learner;
pub mod noise_gpr;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
