//! Piecewise-linear approximation of nonlinear plants and PSO tuning of PID loops.
//!
//! The pipeline: grid a box into simplices ([`partition`]), interpolate the
//! plant nonlinearity on it ([`pwl`]), simulate the closed loop ([`sim`]),
//! score the step response ([`cost`]) and search gain space ([`pso`]).

pub mod cli;
pub mod cost;
pub mod partition;
pub mod plant;
pub mod pso;
pub mod pwl;
pub mod sim;
pub mod xfer;

pub use cost::{combined, CostReport, CostWeights};
pub use partition::{kuhn_partition, BoxDomain, SimplicialPartition};
pub use plant::{builtin, PlantModel};
pub use pso::{optimize, pinned_eval, tune_pid, PsoConfig, TuneReport, TuningProblem};
pub use pwl::{certify, ApproxCertificate, PwlApprox};
pub use sim::{simulate_paper_model, simulate_state_space, LoopPlant, SimConfig, Trajectory};
pub use xfer::{PidGains, RationalTF};
