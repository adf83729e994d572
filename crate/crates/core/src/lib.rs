//! Residual-network Metamorphosis for 2D image registration.
//!
//! A source image is driven toward a target by a sequence of small steps
//! that combine a smooth deformation with an additive intensity change.
//! Both are generated by one momentum field whose evolution is either
//! learned by per-step convolution blocks or given by the explicit
//! transport equation. Registration runs per pair ([`fit_pair`]) or as a
//! model trained once over a dataset ([`train_dataset`], [`infer`]).
//!
//! The engine is generic over the scalar type ([`Scalar`], `f32` or `f64`);
//! the aliases at the crate root fix it to `f64`.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod conv;
pub mod dataset;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod image_ops;
pub mod io;
pub mod kv;
pub mod metrics;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use checkpoint::{AdamState, Checkpoint};
pub use config::{MomentumUpdate, RegistrationConfig};
pub use dataset::{build_dataset, DatasetManifest, ManifestSources};
pub use dynamics::{
    compare_with_divergence, integrate, integrate_fields, replay_shape, velocity_field, ConvBlock, Integration,
    LayerComparison, MetamorphosisState, ResidualNetParams, TrajectoryRecord,
};
pub use energy::{total_energy_learning, EnergyBreakdown};
pub use error::{Error, Result};
pub use image_ops::{divergence, gaussian_smooth, spatial_gradient, warp};
pub use io::{load_field, load_gray, load_mask, load_trajectory, save_field, save_gray, save_trajectory};
pub use metrics::{dice, diff_panel, ssd, Metrics};
pub use optim::{
    fit_pair, fit_pair_observed, infer, train_dataset, train_dataset_resume, Adam, FitReport, Inference, Resume, Sample,
    StopReason,
};
pub use scalar::Scalar;
pub use synth::{elastic_deform, generate_c_image, generate_cut_c_target, CShape, ElasticDeformConfig};
pub use tape::{Gradients, Tape, Var};

pub type Tensor<S = f64> = tensor::Tensor<S>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ScalarField = image_ops::ScalarField<f64>;
pub type VectorField = image_ops::VectorField<f64>;
pub type ScalarField32 = image_ops::ScalarField<f32>;
pub type VectorField32 = image_ops::VectorField<f32>;
pub type Params = dynamics::ResidualNetParams<f64>;
pub type Params32 = dynamics::ResidualNetParams<f32>;
