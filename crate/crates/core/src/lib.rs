//! Cooperative trajectory optimization and PPO (CoTO-PPO) for a kinematic
//! car on a flag-run task.
//!
//! At every step a receding-horizon trajectory optimizer and a Beta-policy
//! PPO agent each propose an action; the one with the higher simulated
//! one-step shaped reward is executed. RL wins train PPO, TO wins train the
//! policy by behavioral cloning.

pub mod coto;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod plant;
pub mod policy;
pub mod rl;
pub mod seeding;
pub mod trajopt;

pub use coto::{gate_step, run_episode, select_action_horizon, train, CotoConfig, GateDecision, LogRow, ToController, TrainSettings, TrainSummary};
pub use env::{CarFlagRun, EnvConfig, Goal, Observation};
pub use error::{Error, Result};
pub use harness::{emit_plots, run_eval, run_train, Arm, EvalMode, EvalReport, EvalRequest, Manifest, RunConfig};
pub use plant::{Action, CarState, PlantConfig};
pub use policy::{ActionBounds, PolicyParams};
pub use rl::{BcConfig, Learner, PpoConfig, Source};
pub use seeding::Domain;
pub use trajopt::{SolverConfig, TOSolution, TrajectoryOptimizer};
