//! Cross-city next-location prediction.
//!
//! Locations are encoded from city-agnostic features (POI mix, normalized
//! coordinates, popularity bucket) through a deep & cross network, so one
//! set of parameters scores candidates in any city. Trajectories are split
//! into POI, position and popularity streams plus their fused sum; each
//! layer attends over every stream, runs a specialized expert per
//! foundational stream, and mixes the expert outputs into the fused stream
//! with weights chosen per position by a router that picks between a
//! trajectory gate and a time gate.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision. Gradient checks and checkpoints use `f64`.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geo;
pub mod model;
pub mod optim;
pub mod params;
pub mod samoe;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod traj;

pub use autodiff::{SelectorMode, Tape, Var};
pub use error::{Error, Result};
pub use eval::{acc_at_k, gate_stats, markov_baseline, run_experiment, AblationVariant, EvalReport, ExperimentKind};
pub use geo::{LocationFeatures, RANK_BUCKETS};
pub use model::{GateTrace, ModelConfig, TrajMoe};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use samoe::{AblationFlags, RouterDecision};
pub use scalar::Scalar;
pub use synth::{City, CityDataset, GeneratorConfig, Location};
pub use tensor::Tensor;
pub use train::{finetune, pretrain, Checkpoint, CitySplit, TrainConfig};
pub use traj::{PaddedBatch, Trajectory};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type TrajMoe64 = TrajMoe<f64>;
pub type TrajMoe32 = TrajMoe<f32>;
