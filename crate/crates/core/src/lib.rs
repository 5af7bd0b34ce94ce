//! NUMA-aware CPU inference engine for decoder-only transformers.

pub mod bench;
pub mod graph;
pub mod kernels;
pub mod membench;
pub mod memory;
pub mod model;
pub mod numa;
pub mod quant;
pub mod scheduler;
pub mod tensor;
pub mod threads;
pub mod tp;
