pub mod stats;
pub mod relations;
pub mod qtree;
pub mod agent;
pub mod envs;
pub mod harness;
