//! Divide-and-conquer Shapley attribution for image + speech classifiers,
//! with a small from-scratch fusion network to attribute, a log-mel audio
//! front-end, a label-assignment rule, and evaluation metrics.

pub mod attrib;
pub mod audio;
pub mod error;
pub mod fusion;
pub mod io;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod shapley;
pub mod synth;
pub mod tensor;
pub mod train;

pub use attrib::{dnc_shap, modality_scores, Attribution, AttributionConfig, FnPredictor, Predictor};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, ParallelNetMini, Topology};
pub use tensor::Tensor;
