//! A minimal multi-condition diffusion transformer over synthetic grid
//! data: small enough to train on a desktop core in seconds, complete
//! enough to exercise every attention mode, the condition cache, and the
//! timestep samplers end to end.

pub mod data;
pub mod denoise;
pub mod model;
pub mod train;

pub use data::{condition_reconstruction_mse, derive_spatial, make_dataset, SyntheticSample};
pub use denoise::{denoise, DenoiseOptions, DenoiseResult, MaskTraceEntry};
pub use model::{ToyDit, ToyModelConfig};
pub use train::{train, TrainConfig, TrainResult, TraceRow};
