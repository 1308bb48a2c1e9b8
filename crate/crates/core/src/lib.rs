//! Class-activation-map guided cross-modal attention for encoder-decoder
//! report generation.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); the aliases at the
//! crate root fix the double-precision instantiation used for training and
//! gradient checking.

pub mod ablation;
pub mod backbone;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vdm;
pub mod vdmae;
pub mod vtac;

pub use backbone::ModelConfig;
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use model::{LossWeights, ReportModel};
pub use objective::{LossBreakdown, Variant};
pub use scalar::Scalar;
pub use train::{TrainConfig, TrainState};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type AdamState = optim::AdamState<f64>;
pub type Example = model::Example<f64>;
pub type Trainer = train::Trainer<f64>;
