//! Discrete diffusion over token sequences with uniform-noise and
//! absorbing-state corruption, continuous-time variational objectives, and
//! classifier-free and classifier-based guidance.

pub mod autodiff;
pub mod categorical;
pub mod ctmc;
pub mod data;
pub mod error;
pub mod forward;
pub mod guidance;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod verify;
pub mod vocab;

pub use categorical::Categorical;
pub use error::{Error, Result};
pub use forward::{PriorSpec, Step};
pub use guidance::{GuidanceConfig, GuidanceMode};
pub use sampler::{SampleRequest, FinalDecode};
pub use schedule::NoiseSchedule;
pub use vocab::{Sequence, Token, Vocabulary};
