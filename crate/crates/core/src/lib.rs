//! Fair clinical trial site selection.
//!
//! A trial and its M candidate sites go through per-modality encoders,
//! masked cross-attention fusion of whatever modalities each site has, and a
//! permutation-equivariant set scorer. Scores define a stochastic top-K
//! policy trained with REINFORCE against a reward that trades enrollment
//! against the racial diversity of the enrolled population.

pub mod autodiff;
pub mod datagen;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod model;
pub mod network;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod scorer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{DatasetManifest, HistoryEntry, Mask, Modality, RankingInstance, SiteRecord, TrialRecord};
pub use tensor::Matrix;
