//! Guided stochastic exploration for recursive latent reasoning models.
//!
//! A fixed backbone map is unrolled as a noisy inner/outer recursion, a
//! particle cloud is reweighted by a guide score, and diagnostics check the
//! stability and alignment conditions under which the guide can help.

pub mod backbone;
pub mod diagnostics;
mod error;
pub mod filter;
pub mod guide;
pub mod harness;
pub mod proposal;
pub mod rng;
pub mod state;

pub use backbone::{
    deterministic_recursion, inner_rollout, make_affine_backbone, outer_step, AffineBackbone, AffineTestbed,
    Backbone, FnBackbone, LatinBackbone, LatinParams, LatinTestbed, TaskInstance,
};
pub use error::{Error, Result};
pub use filter::{
    run_guided_inference, systematic_resample, tempered_update, weighted_map, weighted_map_decode,
    InferenceConfig, RunTrace, StepRecord,
};
pub use guide::{guide_score, log_sigmoid, potential, FlatGuide, FnGuide, Guide, OracleGuide};
pub use proposal::{trajectory_sampler, NoiseConfig, Transition};
pub use rng::{RngStream, StreamId};
pub use state::{
    decode, ess, normalize_weights, ArgmaxDecoder, JointState, LatentTensor, ParticleCloud, TokenGrid,
    WeightVector,
};
