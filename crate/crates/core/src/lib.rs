//! Low-fidelity surrogates of LEO population evolution.
//!
//! [`ssem`] integrates the multi-shell source-sink model that generates
//! population data; [`sindy`] identifies sparse polynomial dynamics from that
//! data and [`lstm`] trains a recurrent forecaster on it. [`metrics`]
//! scores either surrogate against truth.

pub mod error;
pub mod linalg;
pub mod lstm;
pub mod metrics;
pub mod ode;
pub mod popdata;
pub mod sindy;
pub mod ssem;

pub use error::{Error, Result};
pub use popdata::{EnsembleStats, PopulationSeries, ShellGrid, Species, SpeciesVector};
