//! Collective-communication engine and training-communication simulator.
//!
//! The crate provides Allreduce algorithms (flat, ring reduce-scatter +
//! allgather, recursive vector halving/doubling) over a deterministic
//! simulated network or TCP sockets, a pointer-cache buffer registry,
//! Horovod-style gradient aggregation with tensor fusion, a parameter-server
//! pull protocol, an alpha-beta-gamma cost model with a training-step
//! simulator, and the benchmark drivers used by the `collectium` CLI.

pub mod aggregation;
pub mod bench;
pub mod collectives;
pub mod csvfmt;
pub mod error;
pub mod paramserver;
pub mod registry;
pub mod simcost;
pub mod tensor;
pub mod transport;
mod wire;

pub use error::{Error, Result};
pub use tensor::{chunk_partition, local_reduce, Chunk, DType, GroupSpec, Payload, Rank, ReduceOp, Tensor};
