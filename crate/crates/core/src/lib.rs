//! Fitting, evaluation and simulation of inhomogeneous phase-type (IPH)
//! distributions whose sub-intensity matrix is piecewise constant in time.

pub mod approx;
pub mod config;
pub mod em;
pub mod error;
pub mod glm;
pub mod io;
pub mod matexp;
pub mod model;
pub mod simulate;

pub use approx::{approx_density, choose_m, materialize_subintensity, min_valid_n, PhApproximation};
pub use config::FitConfig;
pub use em::{
    estep, fit, fit_from, loglik, mstep, Breakpoints, ConditionalStats, EmConfig, FitReport, FitResult,
    WeightedSample,
};
pub use error::{Error, Result};
pub use io::DensityTarget;
pub use glm::{Basis, CovariateRule, RegressionSpec, ThetaEstimate};
pub use matexp::{expm, vanloan_integral, SquareMatrix};
pub use model::{ConditionalLaw, Grid, IphModel, ModelDocument, SmoothnessReport, ValidationOptions, Violation};
pub use simulate::{sample_absorptions, sample_path, sample_paths, Event, SamplePath, SufficientStats};
