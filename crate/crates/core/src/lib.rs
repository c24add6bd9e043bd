//! Graph-attention regression of score distributions over image feature
//! graphs.
//!
//! Images arrive as stacks of spatial feature maps. Each map cell becomes a
//! graph node carrying the concatenated channel features at that position,
//! so a graph keeps the aspect ratio of the image it came from: a wide
//! image yields a wide grid of nodes, with no resizing to a fixed square.
//! Nodes within one graph are fully connected, and a stack of attention
//! layers learns which regions matter. A gated attention readout pools the
//! node states into one vector per graph, and a small decoder regresses
//! the 10-bin score histogram.
//!
//! The crate is self-contained: a reverse-mode autodiff tape over flat
//! matrices ([`tape`]), neural layers built on it ([`layers`]), the model
//! zoo with checkpointing ([`model`]), training ([`train`]) and evaluation
//! ([`metrics`]), binary graph/manifest formats ([`io`]), a synthetic data
//! generator with planted structure ([`synth`]), and a finite-difference
//! gradient checker ([`gradcheck`]). Everything is seeded and deterministic:
//! the same inputs reproduce losses, checkpoints, and reports bit for bit.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
