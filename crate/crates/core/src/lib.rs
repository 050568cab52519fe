pub mod dmuca;
pub mod expected_delay;
pub mod interference;
pub mod madqn;
pub mod orca;
pub mod prediction;
pub mod rng;
pub mod sim_env;
pub mod sweep;
pub mod timing;
pub mod trajectory;
