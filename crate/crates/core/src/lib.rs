//! Deterministic CAN bus simulation and clock-skew based intrusion detection.

pub mod attacks;
pub mod bus;
pub mod cli;
pub mod detector;
pub mod error;
pub mod fingerprint;
pub mod frame;
pub mod scenario_file;
pub mod trace_io;

pub use error::{Error, Result};
