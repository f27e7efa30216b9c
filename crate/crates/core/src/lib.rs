//! Linear-attention token mixers, hybrid linear/full-attention stacks, an
//! analytic FLOP cost model and a small deterministic trainer.

pub mod attention;
pub mod cli;
pub mod costmodel;
pub mod hybrid;
pub mod mixers;
pub mod numerics;
pub mod tasks;
pub mod trainer;
