pub mod bundle;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod hls_model;
pub mod metrics;
pub mod pretrain;
pub mod scalar;
pub mod se_encoder;
pub mod segmenter;
pub mod te_encoder;
pub mod tensor;
pub mod token2statement;
pub mod train;

pub use error::{HlsError, Result};
pub use scalar::Scalar;
#[cfg(test)]
mod test_support;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type HlsModel64 = hls_model::HlsModel<f64>;
pub type HlsModel32 = hls_model::HlsModel<f32>;
pub type PretrainModel64 = pretrain::PretrainModel<f64>;
pub type PretrainModel32 = pretrain::PretrainModel<f32>;
pub type Detector64 = finetune::Detector<f64>;
pub type Detector32 = finetune::Detector<f32>;
pub type TrainState64 = train::TrainState<f64>;
pub type TrainState32 = train::TrainState<f32>;
