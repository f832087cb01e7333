//! Light-decoder neural construction solvers for the capacitated vehicle
//! routing problem: a small reverse-mode tensor engine, an attention
//! encoder with configurable light decoders, REINFORCE training with the
//! shared-mean multi-trajectory baseline, and exact-oracle evaluation.

pub mod evaluation;
pub mod instance_gen;
pub mod io;
pub mod model;
pub mod numerics;
pub mod rollout;
pub mod training;
pub mod vrp;
