//! Minimal neural-network engine.

mod mlp;
mod model;
mod params;
mod resnet;
mod scalar;
mod spec;

pub use model::{
    build_model, evaluate_batches, gradient, manifest_for, predict_proba, Batch, EvalResult,
    Evaluator, GradientOutput, RunningStatUpdate, DEFAULT_EVAL_BATCH,
};
pub use params::{
    flatten, unflatten, Manifest, NamedTensor, ParamVector, Role, TensorInfo, Values,
};
pub use resnet::{BN_EPS, BN_MOMENTUM};
pub use scalar::Real;
pub use spec::{Architecture, InputShape, ModelSpec, Precision};

pub(crate) use model::{check_conforms, Network};
pub(crate) use resnet::ResnetLayout;
