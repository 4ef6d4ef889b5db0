//! Story visualization with a context-memory transformer: one shared model
//! generates image tokens from captions and captions from image tokens,
//! carrying a recurrent memory of earlier sentences across the frames of a
//! story.
//!
//! The numeric core is generic over `f32` and `f64`; the aliases below name
//! the common instantiations.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod fsio;
pub mod image;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod storyworld;
pub mod tokenizer;
pub mod trainer;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32<'p> = numerics::Graph<'p, f32>;
pub type Graph64<'p> = numerics::Graph<'p, f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
