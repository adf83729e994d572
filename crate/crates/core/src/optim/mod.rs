//! Adam plus the two training drivers: per-pair fitting and dataset
//! learning with fast inference.

mod adam;
mod fit;
mod learn;

pub use adam::Adam;
pub use fit::{fit_pair, fit_pair_observed, FitReport, StopReason};
pub use learn::{
    infer, sample_gradient, train_dataset, train_dataset_resume, EpochSummary, Inference, Resume, Sample, SourceSet,
};

use crate::config::{MomentumUpdate, RegistrationConfig};
use crate::dynamics::{ParamVars, ResidualNetParams};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Var};
use crate::tensor::Tensor;

/// Whether the block weights take part in optimization under `config`.
pub(crate) fn trains_blocks(config: &RegistrationConfig) -> bool {
    config.mode == MomentumUpdate::ResNet
}

/// Mutable views of the tensors optimized under `config`, in a fixed order.
pub(crate) fn trainable_mut<'a, S: Scalar>(
    params: &'a mut ResidualNetParams<S>,
    config: &RegistrationConfig,
) -> Vec<&'a mut Tensor<S>> {
    if trains_blocks(config) {
        params.tensors_mut()
    } else {
        vec![&mut params.z0]
    }
}

pub(crate) fn trainable_vars<'a, S: Scalar>(vars: &'a ParamVars<S>, config: &RegistrationConfig) -> Vec<&'a Var<S>> {
    if trains_blocks(config) {
        vars.vars()
    } else {
        vec![&vars.z0]
    }
}

/// Gradients of the trainable tensors; parameters that did not reach the
/// loss get an explicit zero gradient.
pub(crate) fn collect_grads<S: Scalar>(
    grads: &mut Gradients<S>,
    vars: &ParamVars<S>,
    config: &RegistrationConfig,
) -> Vec<Tensor<S>> {
    trainable_vars(vars, config)
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
        .collect()
}
