//! Laboratory for language-specific class imbalance in multilingual text
//! classification.
//!
//! The crate covers the whole experimental loop at desk scale:
//!
//! * [`corpus`]: synthetic multilingual corpora with known informative and
//!   filler tokens, plus JSONL ingestion of externally prepared data.
//! * [`sampler`]: paired balanced/imbalanced training subsets sharing the
//!   maximum number of datapoints, and balanced evaluation splits.
//! * [`model`]: a mean-pooled maskable classifier with a `PBL1` checkpoint
//!   format.
//! * [`training`]: per-language class weighting, the masked-input entropy
//!   regulariser, SGD with a linear schedule and evaluation reports.
//! * [`explain`]: exact and permutation-sampled Shapley attributions and the
//!   cumulative SHAP difference report.
//! * [`probe`]: cross-validated logistic-regression language identification
//!   on pooled representations.
//! * [`experiment`]: the end-to-end three-arm protocol driven by a JSON
//!   config.

pub mod corpus;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod model;
pub mod probe;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
