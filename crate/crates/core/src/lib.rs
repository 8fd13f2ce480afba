pub mod sampling;
pub mod bart;
pub mod aft;
pub mod cohort;
pub mod dtr;
pub mod qlearn;
pub mod simulation;
pub mod metrics;
pub mod cli;
