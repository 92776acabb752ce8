//! Edge-assisted, human-in-the-loop digital twin of a robotic arm, run as a
//! deterministic discrete-event simulation.

pub mod console;
pub mod controller;
pub mod detect;
pub mod kinematics;
pub mod metrics;
pub mod physical;
pub mod planning;
pub mod protocol;
pub mod scenario;
pub mod scene;
pub mod sim;
pub mod time;

pub use scenario::{parse_config, ScenarioConfig};
pub use sim::{run_scenario, Simulation};
pub use time::SimTime;
