//! Visual concept reasoning networks: a small reverse-mode autodiff engine,
//! the concept sampler/reasoner/modulator module, split-transform-attend-
//! interact-modulate-merge blocks, ResNeXt-style networks, training, data
//! loading, checkpoints and exports.

pub mod ablation;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod ema;
pub mod export;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vcr;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor, TensorError};
