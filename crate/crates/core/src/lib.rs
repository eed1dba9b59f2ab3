//! Joint super-resolution and small-object detection on a shared hierarchical
//! encoder, with saliency-driven token filtering in the detection encoder.
//!
//! [`SdcoNet`] wires the pieces together; [`Trainer`] runs the two-stage
//! schedule; [`metrics`] scores detections and counts operations.

pub mod autograd;
pub mod boxes;
pub mod config;
pub mod data;
pub mod deformable;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod resample;
pub mod saliency;
pub mod spatial;
pub mod sr;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use data::{Annotation, Sample, SceneSpec};
pub use detection::{Detection, DetectorConfig, LossWeights};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use filter::{FilterConfig, FilterSchedule};
pub use metrics::{ApReport, EvalReport, FlopsReport};
pub use model::{LossRecord, ModelConfig, SdcoNet};
pub use params::{ParamGroup, ParamStore};
pub use saliency::SaliencyConfig;
pub use sr::SrConfig;
pub use tensor::Array;
pub use trainer::{TrainConfig, TrainState, Trainer};
