//! Disaggregation of PV generation and demand from a feeder's net power flow.
//!
//! The pipeline runs from measured GHI through a bank of transposed
//! plane-of-array irradiances to one of four capacity estimators.

pub mod dsp;
pub mod eval;
pub mod methods;
pub mod optim;
pub mod solar;
pub mod timeseries;
