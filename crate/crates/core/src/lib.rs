//! Random-patch diffusion sampling over arbitrarily large canvases.
//!
//! A canvas is denoised by many overlapping patch-level reverse-diffusion
//! steps with per-pixel time-state tracking, conditioned on a segmentation
//! mask through classifier-free guidance. A stationary Gaussian world
//! supplies an exact denoiser and an exact full-canvas reference, and the
//! [`metrics`] module audits generated sets for fidelity and memorization.

pub mod canvas;
pub mod codec;
pub mod config;
pub mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod world;

pub use canvas::{CoveragePlan, LatentCanvas, PatchProjection, TimeStateGrid};
pub use codec::{hann_decode, Codec, IdentityCodec, ScaleCodec};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use mask::{clean_mask, upsample_mask, LabelQuantizer, SegmentationMask};
pub use metrics::FeatureSet;
pub use sampler::{compare_cost, Counters, GuidanceConfig, SampleOutcome, SamplerRun, SchedulerKind};
pub use schedule::{NoiseSchedule, Patch};
pub use train::{train_toy, LinearDenoiser, TrainReport};
pub use world::{AnalyticDenoiser, Denoiser, GaussianWorld, Label};
