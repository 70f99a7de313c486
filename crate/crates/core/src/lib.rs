//! Multiplier-free dynamic fixed-point (MF-DFP) neural networks.
//!
//! Float networks are converted to 8-bit dynamic fixed-point activations with
//! power-of-two weights, executed bit-exactly with shift-accumulate arithmetic,
//! fine-tuned with shadow weights and teacher distillation, and costed on an
//! analytical model of a tile-based accelerator.

pub mod container;
pub mod data;
pub mod accel;
pub mod autodiff;
pub mod cli;
pub mod convert;
pub mod dfp;
pub mod distill;
pub mod engine;
pub mod finetune;
pub mod graph;
pub mod po2;
