//! Shape-invariant growth-curve modelling with a neural encoder.
//!
//! An encoder network maps an individual's measurements y (at shared
//! ages t) to random effects u = (a1, b1, c1). A spline decoder turns them
//! back into a curve
//!
//! ```text
//! ŷ(t) = a0 + a1 + Σ_k α_k B_k((t − b0 − b1)·exp(c0 + c1))
//! ```
//!
//! where size shifts the curve, timing slides it along the age axis and
//! intensity stretches it. Encoder weights and α are trained jointly on
//! reconstruction error plus a Mahalanobis penalty on u.

pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod numerics;
pub mod simulator;
pub mod splines;
pub mod trainer;

pub use dataset::{GrowthDataset, Individual, Split};
pub use decoder::{Decoded, FixedEffects, RandomEffects, SitarDecoder};
pub use encoder::{EncoderNet, Standardizer};
pub use error::{Error, Result};
pub use model::{Architecture, TrainedModel};
pub use numerics::{SeededRng, SmallMatrix};
pub use simulator::TruthParams;
pub use splines::BSplineBasis;
pub use trainer::{BatchMode, CovarianceEstimate, TrainConfig, TrainHistory};
