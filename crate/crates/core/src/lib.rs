//! Stochastic model predictive control for linear Gaussian systems with
//! online-optimised affine disturbance feedback.
//!
//! The crate covers the whole pipeline:
//!
//! * [`model`]: systems, chance constraints, costs and scenario files,
//! * [`linalg`]: chi-squared quantile, PSD roots, Lyapunov solvers,
//! * [`slp`]: system-level response maps and affine policies,
//! * [`conic`]: conic program builder and the Clarabel backend,
//! * [`terminal`]: terminal gain, terminal cost and the terminal set,
//! * [`controller`]: the initial and reconditioned receding-horizon programs,
//! * [`sim`]: seeded Monte Carlo campaigns and their statistics.

// Links the system OpenBLAS used by the SDP backend.
use openblas_src as _;

pub mod conic;
pub mod controller;
pub mod error;
pub mod linalg;
pub mod matrix_serde;
pub mod model;
pub mod scenarios;
pub mod sim;
pub mod slp;
pub mod terminal;

pub use conic::{ConicProgram, SolveReport, SolveStatus, SolverSettings};
pub use controller::{ControllerState, Method, OfflineDesign};
pub use error::{Error, Result};
pub use model::{load_scenario, ConstraintSpec, LinearGaussianSystem, ScenarioConfig, StageCost};
pub use sim::{CampaignSummary, RolloutRecord};
pub use slp::{NominalTrajectory, Policy, SystemResponse};
pub use terminal::{TailRow, TerminalIngredients, TerminalSet};

pub use nalgebra::{DMatrix, DVector};
