use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{collect_grads, trainable_mut, trains_blocks, Adam, FitReport, StopReason};
use crate::config::RegistrationConfig;
use crate::dynamics::{integrate, replay_shape, ResidualNetParams, TrajectoryRecord};
use crate::energy::{data_term, sum_breakdowns, total_energy_optim, EnergyBreakdown};
use crate::error::{Error, Result};
use crate::image_ops::ScalarField;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One training source with its optional localization mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S = f64> {
    pub image: ScalarField<S>,
    pub mask: Option<ScalarField<S>>,
}

impl<S: Scalar> Sample<S> {
    pub fn new(image: ScalarField<S>) -> Self {
        Self { image, mask: None }
    }
}

/// Random-access collection of training sources.
pub trait SourceSet<S: Scalar>: Sync {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<Sample<S>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<S: Scalar> SourceSet<S> for [Sample<S>] {
    fn len(&self) -> usize {
        <[Sample<S>]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample<S>> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("sample {index} out of range")))
    }
}

impl<S: Scalar> SourceSet<S> for Vec<Sample<S>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<Sample<S>> {
        self.as_slice().sample(index)
    }
}

/// Energy and parameter gradients for a single source.
pub fn sample_gradient<S: Scalar>(
    params: &ResidualNetParams<S>,
    sample: &Sample<S>,
    target: &ScalarField<S>,
    config: &RegistrationConfig,
) -> Result<(Vec<Tensor<S>>, EnergyBreakdown)> {
    if sample.image.tensor().shape() != target.tensor().shape() {
        return Err(Error::Shape(format!(
            "source {:?} vs target {:?}",
            sample.image.tensor().shape(),
            target.tensor().shape()
        )));
    }
    let tape = Tape::new();
    let vars = params.attach(&tape, trains_blocks(config));
    let src = tape.constant(sample.image.tensor().clone());
    let tgt = tape.constant(target.tensor().clone());
    let mask = sample.mask.as_ref().map(|m| tape.constant(m.tensor().clone()));
    let run = integrate(&tape, &src, mask.as_ref(), &vars, config, false)?;
    let data = data_term(&tape, &run.final_state.image, &tgt)?;
    let (total, breakdown) = total_energy_optim(
        &tape,
        &data,
        &run.kinetic_sum,
        &run.intensity_sum,
        config.lambda,
        config.mu,
        config.steps,
    )?;
    drop(run);
    let mut grads = tape.backward(&total)?;
    Ok((collect_grads(&mut grads, &vars, config), breakdown))
}

/// Per-epoch progress handed to the training callback.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Learning energy summed over every sample seen this epoch.
    pub energy: f64,
    pub mean_energy: f64,
    pub seconds: f64,
}

/// State to continue training from: parameters and optimizer after
/// `completed_epochs` epochs.
#[derive(Clone, Debug)]
pub struct Resume<S = f64> {
    pub params: ResidualNetParams<S>,
    pub adam: Adam<S>,
    pub completed_epochs: usize,
}

/// Learns shared `theta` and `z_0` aligning every source onto `target` by
/// mini-batch Adam. `on_epoch` runs after each epoch with the current
/// parameters and optimizer state (for checkpointing).
pub fn train_dataset<S: Scalar>(
    sources: &dyn SourceSet<S>,
    target: &ScalarField<S>,
    config: &RegistrationConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary, &ResidualNetParams<S>, &Adam<S>) -> Result<()>,
) -> Result<(ResidualNetParams<S>, FitReport)> {
    train_dataset_resume(sources, target, config, None, on_epoch)
}

/// [`train_dataset`] continuing from saved state. The shuffling sequence is
/// replayed for the completed epochs, so an interrupted run resumed from a
/// checkpoint visits samples in the same order as an uninterrupted one.
pub fn train_dataset_resume<S: Scalar>(
    sources: &dyn SourceSet<S>,
    target: &ScalarField<S>,
    config: &RegistrationConfig,
    resume: Option<Resume<S>>,
    on_epoch: &mut dyn FnMut(&EpochSummary, &ResidualNetParams<S>, &Adam<S>) -> Result<()>,
) -> Result<(ResidualNetParams<S>, FitReport)> {
    config.validate()?;
    let n = sources.len();
    if n == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let (mut params, mut adam, start) = match resume {
        Some(r) => {
            if r.params.resolution() != (target.height(), target.width()) || r.params.steps() != config.steps {
                return Err(Error::Shape("resumed parameters do not match the target or step count".into()));
            }
            (r.params, r.adam, r.completed_epochs)
        }
        None => (
            ResidualNetParams::init(target.height(), target.width(), config),
            Adam::from_config(config),
            0,
        ),
    };
    let mut report = FitReport {
        energies: Vec::new(),
        iteration_seconds: Vec::new(),
        stop_reason: StopReason::MaxIters,
        best_iteration: 0,
    };
    let mut best_energy = f64::INFINITY;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fb_a7c4);

    if config.shuffle {
        for _ in 0..start {
            order.shuffle(&mut rng);
        }
    }

    for epoch in start..config.epochs {
        let epoch_start = Instant::now();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_energy = 0.0;
        for batch in order.chunks(config.batch_size) {
            let started = Instant::now();
            let snapshot = &params;
            let results: Vec<Result<(Vec<Tensor<S>>, EnergyBreakdown)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let sample = sources.sample(i)?;
                        sample_gradient(snapshot, &sample, target, config)
                    })
                    .collect()
            });
            let mut sum: Option<Vec<Tensor<S>>> = None;
            let mut breakdowns = Vec::with_capacity(batch.len());
            for result in results {
                let (grads, breakdown) = match result {
                    Ok(r) => r,
                    Err(Error::Diverged { .. }) => {
                        report.stop_reason = StopReason::Divergence;
                        return Err(Error::FitDiverged {
                            iteration: report.energies.len(),
                            report: Box::new(report),
                        });
                    }
                    Err(e) => return Err(e),
                };
                breakdowns.push(breakdown);
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.axpy(S::one(), g)?;
                        }
                    }
                }
            }
            let batch_energy = sum_breakdowns(&breakdowns)?;
            if !batch_energy.total.is_finite() {
                report.stop_reason = StopReason::Divergence;
                return Err(Error::FitDiverged {
                    iteration: report.energies.len(),
                    report: Box::new(report),
                });
            }
            epoch_energy += batch_energy.total;
            let mean = S::lit(1.0 / batch.len() as f64);
            let grads: Vec<Tensor<S>> = sum
                .expect("non-empty batch")
                .into_iter()
                .map(|g| g.map(|x| x * mean))
                .collect();
            let grad_refs: Vec<_> = grads.iter().map(Some).collect();
            adam.step(&mut trainable_mut(&mut params, config), &grad_refs)?;
            if batch_energy.total < best_energy {
                best_energy = batch_energy.total;
                report.best_iteration = report.energies.len();
            }
            report.energies.push(batch_energy);
            report.iteration_seconds.push(started.elapsed().as_secs_f64());
        }
        let summary = EpochSummary {
            epoch,
            energy: epoch_energy,
            mean_energy: epoch_energy / n as f64,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&summary, &params, &adam)?;
    }
    Ok((params, report))
}

/// Output of a forward pass with trained parameters.
#[derive(Clone, Debug)]
pub struct Inference<S = f64> {
    /// Full deformation: geometry plus appearance.
    pub deformed: ScalarField<S>,
    /// Geometry only: the same velocities replayed without the additive term.
    pub shape_only: ScalarField<S>,
    pub velocities: Vec<Tensor<S>>,
    /// Transported mask, when one was supplied.
    pub final_mask: Option<ScalarField<S>>,
    pub trajectory: Option<TrajectoryRecord<S>>,
}

/// Registers `source` with trained parameters; no gradients are recorded.
pub fn infer<S: Scalar>(
    source: &ScalarField<S>,
    mask: Option<&ScalarField<S>>,
    params: &ResidualNetParams<S>,
    config: &RegistrationConfig,
    record: bool,
) -> Result<Inference<S>> {
    let (h, w) = params.resolution();
    if (source.height(), source.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "model trained at {h}x{w}, source is {}x{}",
            source.height(),
            source.width()
        )));
    }
    let tape = Tape::no_grad();
    let vars = params.attach(&tape, false);
    let src = tape.constant(source.tensor().clone());
    let mask = mask.map(|m| tape.constant(m.tensor().clone()));
    let run = integrate(&tape, &src, mask.as_ref(), &vars, config, record)?;
    let shape_only = replay_shape(source.tensor(), &run.velocities)?;
    Ok(Inference {
        deformed: ScalarField::new(run.final_state.image.value().clone())?,
        shape_only: ScalarField::new(shape_only)?,
        final_mask: run
            .final_state
            .mask
            .as_ref()
            .map(|m| ScalarField::new(m.value().clone()))
            .transpose()?,
        velocities: run.velocities,
        trajectory: run.trajectory,
    })
}
