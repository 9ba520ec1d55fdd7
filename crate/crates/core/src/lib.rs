pub mod config;
pub mod ensemble;
pub mod env;
pub mod harness;
pub mod kinematics;
pub mod physics;
pub mod policy;
pub mod rules;
pub mod selfplay;
