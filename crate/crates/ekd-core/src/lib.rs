//! Evaluation-oriented knowledge distillation for embedding models.
//!
//! A small teacher network is trained with an angular-margin softmax, then a
//! smaller student is distilled against it by matching, per pair, on which
//! side of a set of FPR-anchored decision thresholds the cosine similarity
//! falls. Thresholds are tracked per model with an exponential moving
//! average, the indicator comparison is relaxed with a temperature-scaled
//! sigmoid so it can be optimized with gradients, and both models are scored
//! with the standard TPR-at-FPR verification protocol.
//!
//! Everything runs at desk scale on synthetic identity data: dense f64
//! linear algebra, manual backprop, deterministic seeded RNG, and
//! bit-reproducible training runs.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pairs;
pub mod rng;
pub mod trainer;

pub use error::{EkdError, Result};
pub use numeric::Matrix;
pub use rng::RngState;
