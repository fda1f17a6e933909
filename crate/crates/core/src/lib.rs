//! Gearbox condition monitoring from wind-turbine SCADA data.
//!
//! The pipeline clusters 10-minute records into operating modes with a
//! Gaussian mixture, fits a generator-vs-rotor speed line per mode, keeps the
//! modes whose line explains at least 99% of the variance, and charts weekly
//! mean residuals of a validation year against the training year.

pub mod ingest;
pub mod mixture;
pub mod modes;
pub mod ratio;
pub mod drift;
pub mod synth;
pub mod report;
pub mod pipeline;
