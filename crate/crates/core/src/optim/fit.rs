use std::fmt;
use std::time::Instant;

use super::{collect_grads, trainable_mut, trains_blocks, Adam};
use crate::config::RegistrationConfig;
use crate::dynamics::{integrate, ResidualNetParams};
use crate::energy::{data_term, total_energy_optim, EnergyBreakdown};
use crate::error::{Error, Result};
use crate::image_ops::ScalarField;
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    Plateau,
    Divergence,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxIters => "max-iters",
            StopReason::Plateau => "plateau",
            StopReason::Divergence => "divergence",
        })
    }
}

/// History of one optimization run.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// One breakdown per iteration executed.
    pub energies: Vec<EnergyBreakdown>,
    /// Wall-clock seconds per iteration.
    pub iteration_seconds: Vec<f64>,
    pub stop_reason: StopReason,
    /// Iteration whose parameters were returned.
    pub best_iteration: usize,
}

impl FitReport {
    fn new() -> Self {
        Self {
            energies: Vec::new(),
            iteration_seconds: Vec::new(),
            stop_reason: StopReason::MaxIters,
            best_iteration: 0,
        }
    }

    pub fn iterations(&self) -> usize {
        self.energies.len()
    }

    pub fn initial(&self) -> Option<&EnergyBreakdown> {
        self.energies.first()
    }

    pub fn best(&self) -> Option<&EnergyBreakdown> {
        self.energies.get(self.best_iteration)
    }

    pub fn total_seconds(&self) -> f64 {
        self.iteration_seconds.iter().sum()
    }
}

/// Optimizes `theta` and `z_0` for one source/target pair.
pub fn fit_pair<S: Scalar>(
    source: &ScalarField<S>,
    target: &ScalarField<S>,
    mask: Option<&ScalarField<S>>,
    config: &RegistrationConfig,
) -> Result<(ResidualNetParams<S>, FitReport)> {
    fit_pair_observed(source, target, mask, config, &mut |_, _| {})
}

/// [`fit_pair`] with a callback invoked after every energy evaluation.
pub fn fit_pair_observed<S: Scalar>(
    source: &ScalarField<S>,
    target: &ScalarField<S>,
    mask: Option<&ScalarField<S>>,
    config: &RegistrationConfig,
    observer: &mut dyn FnMut(usize, &EnergyBreakdown),
) -> Result<(ResidualNetParams<S>, FitReport)> {
    config.validate()?;
    if source.tensor().shape() != target.tensor().shape() {
        return Err(Error::Shape(format!(
            "source {:?} vs target {:?}",
            source.tensor().shape(),
            target.tensor().shape()
        )));
    }
    if let Some(m) = mask {
        if m.tensor().shape() != source.tensor().shape() {
            return Err(Error::Shape(format!(
                "mask {:?} vs source {:?}",
                m.tensor().shape(),
                source.tensor().shape()
            )));
        }
    }
    if config.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }

    let mut params = ResidualNetParams::init(source.height(), source.width(), config);
    let mut adam = Adam::from_config(config);
    let mut report = FitReport::new();
    let mut best = params.clone();
    let mut best_energy = f64::INFINITY;
    // best-so-far energy after each iteration, for the plateau test
    let mut best_history: Vec<f64> = Vec::new();

    for it in 0..config.max_iters {
        let started = Instant::now();
        let tape = Tape::new();
        let vars = params.attach(&tape, trains_blocks(config));
        let src = tape.constant(source.tensor().clone());
        let tgt = tape.constant(target.tensor().clone());
        let mask_var = mask.map(|m| tape.constant(m.tensor().clone()));

        let run = match integrate(&tape, &src, mask_var.as_ref(), &vars, config, false) {
            Ok(run) => run,
            Err(Error::Diverged { .. }) => {
                report.stop_reason = StopReason::Divergence;
                return Err(Error::FitDiverged {
                    iteration: it,
                    report: Box::new(report),
                });
            }
            Err(e) => return Err(e),
        };
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
        if !breakdown.total.is_finite() {
            report.stop_reason = StopReason::Divergence;
            return Err(Error::FitDiverged {
                iteration: it,
                report: Box::new(report),
            });
        }
        observer(it, &breakdown);
        report.energies.push(breakdown);

        if breakdown.total < best_energy {
            best_energy = breakdown.total;
            best = params.clone();
            report.best_iteration = it;
        }
        best_history.push(best_energy);

        let window = config.plateau_window;
        let plateau = it >= window && {
            let before = best_history[it - window];
            before - best_energy <= config.plateau_tol * before.abs()
        };
        let last = it + 1 == config.max_iters;
        if plateau || last {
            report.iteration_seconds.push(started.elapsed().as_secs_f64());
            report.stop_reason = if plateau { StopReason::Plateau } else { StopReason::MaxIters };
            break;
        }

        let mut grads = tape.backward(&total)?;
        let grads = collect_grads(&mut grads, &vars, config);
        drop(vars);
        let grad_refs: Vec<_> = grads.iter().map(Some).collect();
        adam.step(&mut trainable_mut(&mut params, config), &grad_refs)?;
        if !params.all_finite() {
            report.iteration_seconds.push(started.elapsed().as_secs_f64());
            report.stop_reason = StopReason::Divergence;
            return Err(Error::FitDiverged {
                iteration: it,
                report: Box::new(report),
            });
        }
        report.iteration_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok((best, report))
}
