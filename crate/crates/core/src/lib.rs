//! Layer-wise partitioning of DNN layer graphs and pipelined inference across a
//! chain of networked compute nodes.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`model`]: tensors, the layer graph, shape inference and a
//!   deterministic reference forward pass.
//! - [`partition`]: bridge detection and splitting a graph into sequential
//!   sub-networks.
//! - [`codec`]: tensor serialization (text / fixed-rate binary) with an optional
//!   LZ block-compression stage.
//! - [`wire`]: the chunked, length-prefixed frame protocol and byte counters.
//! - [`node`] and [`dispatcher`]: the two runtimes of a chain.
//! - [`metrics`]: throughput, overhead, payload and the energy model.
//! - [`bench`]: synthetic models and fixtures, link shaping, and the benchmark
//!   driver that produces the CSV datasets.
//!
//! Data-parallel kernels run on rayon when the `parallel` feature is enabled
//! (the default); see [`exec::Exec`].

pub mod bench;
pub mod codec;
pub mod dispatcher;
pub mod exec;
pub mod messages;
pub mod metrics;
pub mod model;
pub mod node;
pub mod partition;
pub mod tensor;
pub mod wire;

pub use codec::{CodecSpec, Compression, EncodedBlob, Serialization};
pub use dispatcher::{configure, ChainConfig, ConfiguredChain, NodeAddress};
pub use exec::Exec;
pub use model::{LayerKind, LayerSpec, ModelGraph};
pub use partition::{auto_cuts, partition_model, validate_chain, CutPoint, Partition};
pub use tensor::Tensor;
