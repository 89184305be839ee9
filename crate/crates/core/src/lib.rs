//! Context-prediction diffusion models at desk scale.
//!
//! A denoiser is trained with the usual point-wise objective plus an
//! auxiliary term in which every position predicts its `s`-stride
//! neighborhood, either directly ([`context_decoder::FeatureDecoder`]) or as a
//! distribution matched by empirical W2 ([`context_decoder::DistributionDecoder`]).
//! The head only exists during training; [`sampler`] uses the denoiser alone.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the precision for common use.

pub mod autodiff;
pub mod context_decoder;
pub mod corruption;
pub mod denoiser;
pub mod diffusion_core;
pub mod error;
pub mod neighborhood;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod set_losses;

pub use corruption::{ContinuousSchedule, DiscreteTransition, ReverseVariance, TokenMap};
pub use diffusion_core::{
    Batch, ConPreDiff, ContextCfg, DecoderVariant, LambdaSchedule, LossBreakdown, ModelCfg,
    PointWeighting, Process, TrainCfg, TrainState,
};
pub use denoiser::{DenoiserCfg, DenoiserMode, TapLayer};
pub use error::{Error, Result};
pub use neighborhood::NeighborIndex;
pub use scalar::Scalar;

pub type Schedule32 = ContinuousSchedule<f32>;
pub type Schedule64 = ContinuousSchedule<f64>;
pub type Transition32 = DiscreteTransition<f32>;
pub type Transition64 = DiscreteTransition<f64>;
pub type Model32 = ConPreDiff<f32>;
pub type Model64 = ConPreDiff<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
