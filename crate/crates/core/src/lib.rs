//! Continual learning for neural temporal point processes on event streams.
//!
//! A continuous-time retrieval prompt pool sits on top of a frozen-shape
//! encoder/decoder backbone. Tasks arrive as sliding windows over a stream;
//! only the current window's training data is ever read.

// `!(x > 0.0)` style checks are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments, clippy::type_complexity)]

pub mod autodiff;
pub mod checkpoint;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod event_store;
pub mod harness;
pub mod model;
pub mod params;
pub mod prompt_pool;
pub mod scalar;
pub mod thinning;
pub mod training;

pub use decoder::PromptMode;
pub use encoder::EncoderKind;
pub use error::{Result, TppError};
pub use event_store::{Event, EventSequence};
pub use model::{IntensityModel, ModelConfig, PromptTpp};
pub use prompt_pool::TemporalBlock;
pub use scalar::Scalar;

pub type PromptTpp64 = PromptTpp<f64>;
pub type PromptTpp32 = PromptTpp<f32>;
pub type EventSequence64 = EventSequence<f64>;
pub type EventSequence32 = EventSequence<f32>;
