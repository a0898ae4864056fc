//! Economic dispatch and bounded-cobweb peer-to-peer negotiation for
//! zero marginal-cost microgrids with battery storage.

pub mod battery;
pub mod dispatch;
pub mod error;
pub mod experiment;
pub mod negotiation;
pub mod scenario;
pub mod solver;
pub mod utility;

pub use battery::{DischargeScaling, ExtendedBattery, IdealBattery, ViolationReport};
pub use dispatch::{
    solve_centralized, solve_centralized_ext, verify_kkt, AgentSpec, BatteryModel, DispatchSolution, KktReport,
    Scenario,
};
pub use error::{Error, Result};
pub use scenario::{generate_scenario, load_profiles, ProfileSet, ProfileSource, ScenarioRecipe, SyntheticProfiles};
pub use solver::{solve_concave_program, solve_linear_program, ConcaveProgram, SolveResult, SolveStatus};
pub use utility::QuasiCpeUtility;
