//! Graph-augmented encoder-decoder depth estimation.
//!
//! A small convolutional encoder produces features at 1/4, 1/8, 1/16 and 1/32
//! of the input resolution. GraphSAGE layers over grid or k-NN graphs refine
//! the bottleneck and the first two decoder stages, channel attention gates
//! every skip fusion, and two heads predict depth and per-pixel log-variance.
//! Training uses a heteroscedastic loss and AdamW with clipping and a cosine
//! schedule, all on top of the in-crate reverse-mode engine in [`tensor`].

pub mod ablation;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod layers;
pub mod model;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
