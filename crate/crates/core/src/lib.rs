//! Event-camera-supported video frame interpolation.
//!
//! The crate bundles the event tooling (streams, voxel grids, a video-to-event
//! simulator and synthetic scenes), a small reverse-mode autodiff engine, the
//! three-branch interpolation model (proxy-guided synthesis, event-guided
//! recurrent warping and attention-based averaging), its losses and metrics,
//! the staged training protocol and the on-disk dataset format.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two concrete instantiations.

pub mod ablation;
pub mod blend;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod events;
pub mod flow;
pub mod fsutil;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod simulator;
pub mod synthesis;
pub mod tensor;
pub mod train;
pub mod warping;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type FlowField32 = flow::FlowField<f32>;
pub type FlowField64 = flow::FlowField<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type LoadedSample32 = dataset::LoadedSample<f32>;
pub type LoadedSample64 = dataset::LoadedSample<f64>;

pub use blend::{interpolate, Interpolation};
pub use events::{Event, EventStream};
pub use flow::FlowField;
pub use model::{InterpInput, Model, ModelConfig};
pub use tensor::Tensor;
