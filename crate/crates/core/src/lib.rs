//! f-divergence preference optimization over tabular policies.
//!
//! Policies live on finite prompt/response sets, so the optimal policy, its geometric
//! mixtures and every f-divergence are computed exactly. The losses, the trainer and the
//! experiment harness are all generic over the floating-point [`Scalar`]; the aliases at the
//! bottom of this file pin them to `f64` (what the harness uses) or `f32`.

pub mod datagen;
pub mod error;
pub mod generators;
pub mod harness;
pub mod json;
pub mod losses;
pub mod policy;
pub mod scalar;
pub mod trainer;

pub use error::{FpoError, Result};
pub use generators::{AffineShifted, GeneratorFn, ValidityReport};
pub use scalar::Scalar;

pub type Generator = generators::Generator<f64>;
pub type Generator32 = generators::Generator<f32>;
pub type TabularPolicy = policy::TabularPolicy<f64>;
pub type TabularPolicy32 = policy::TabularPolicy<f32>;
pub type RewardTable = policy::RewardTable<f64>;
pub type RewardTable32 = policy::RewardTable<f32>;
pub type Distribution = policy::Distribution<f64>;
pub type Distribution32 = policy::Distribution<f32>;
pub type LossConfig = losses::LossConfig<f64>;
pub type LossConfig32 = losses::LossConfig<f32>;
pub type LossValue = losses::LossValue<f64>;
pub type KSampleBatch = losses::KSampleBatch<f64>;
pub type PairwiseBatch = losses::PairwiseBatch<f64>;
pub type OptimizerConfig = trainer::OptimizerConfig<f64>;
pub type TrainReport = trainer::TrainReport<f64>;
pub type SyntheticTask = datagen::SyntheticTask<f64>;
