pub mod divergence;
pub mod dynamics;
pub mod error;
pub mod gmix;
pub mod gmphd;
pub mod ilqr;
pub mod linalg;
pub mod mpc;
pub mod objective;
pub mod scenario;
pub mod swarmsim;

pub use divergence::{CostQuadratization, DistanceKind};
pub use dynamics::{LinearModel, OrbitParams};
pub use error::{Error, Result};
pub use gmix::{GaussianComponent, GaussianMixture};
pub use gmphd::{PhdModel, PruneParams, SensorModel};
pub use ilqr::{IlqrOptions, IlqrProblem, IlqrSolution};
pub use objective::{HessianMode, StageCostModel};
pub use mpc::{MpcConfig, QuasiNewtonOptions};
pub use scenario::Scenario;
pub use swarmsim::{run_scenario, Agent, SimLog};
