//! Matching energies for pairwise optimization and dataset learning.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Decomposition of one energy evaluation.
///
/// `total = data_term + lambda * (kinetic_term + intensity_term)` where the
/// kinetic term is `sum_t ||v_t||_V^2 / T` and the intensity term is
/// `mu^2 sum_t ||z_t||^2 / T` (mask-weighted when a mask is used).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyBreakdown {
    pub data_term: f64,
    pub kinetic_term: f64,
    pub intensity_term: f64,
    pub total: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl EnergyBreakdown {
    /// Builds a breakdown from the raw accumulated sums of one trajectory.
    pub fn from_sums(data: f64, kinetic_sum: f64, intensity_sum: f64, lambda: f64, mu: f64, steps: usize) -> Self {
        let t = steps as f64;
        let kinetic_term = kinetic_sum / t;
        let intensity_term = mu * mu * intensity_sum / t;
        Self {
            data_term: data,
            kinetic_term,
            intensity_term,
            total: data + lambda * (kinetic_term + intensity_term),
            lambda,
            mu,
        }
    }

    pub fn regularizer(&self) -> f64 {
        self.lambda * (self.kinetic_term + self.intensity_term)
    }

    /// One log line: `total=.. data=.. kinetic=.. intensity=.. lambda=.. mu=..`.
    pub fn log_line(&self) -> String {
        format!(
            "total={:e} data={:e} kinetic={:e} intensity={:e} lambda={:e} mu={}",
            self.total, self.data_term, self.kinetic_term, self.intensity_term, self.lambda, self.mu
        )
    }
}

/// `1/2 sum (I_final - J)^2`.
pub fn data_term<S: Scalar>(tape: &Tape<S>, final_image: &Var<S>, target: &Var<S>) -> Result<Var<S>> {
    let diff = tape.sub(final_image, target)?;
    Ok(tape.scale(&tape.sum_squares(&diff), S::lit(0.5)))
}

/// `||v||_V^2 = <z grad I, K * (z grad I)>`.
pub fn v_norm_sq<S: Scalar>(tape: &Tape<S>, image: &Var<S>, momentum: &Var<S>, sigma: f64) -> Result<Var<S>> {
    if image.shape() != momentum.shape() {
        return Err(Error::Shape(format!("image {:?} vs momentum {:?}", image.shape(), momentum.shape())));
    }
    let grad = tape.spatial_gradient(image)?;
    let p = tape.mul(&tape.stack(&[momentum, momentum])?, &grad)?;
    let kp = tape.gaussian_smooth(&p, sigma)?;
    Ok(tape.sum_all(&tape.mul(&p, &kp)?))
}

/// `sum z^2`, or `sum m z^2` with a mask.
pub fn z_norm_sq<S: Scalar>(tape: &Tape<S>, momentum: &Var<S>, mask: Option<&Var<S>>) -> Result<Var<S>> {
    match mask {
        None => Ok(tape.sum_squares(momentum)),
        Some(m) => {
            let zz = tape.mul(momentum, momentum)?;
            Ok(tape.sum_all(&tape.mul(m, &zz)?))
        }
    }
}

/// Pairwise energy `data + (lambda/T) sum_t [||v_t||_V^2 + mu^2 ||z_t||^2]`,
/// returned both as a differentiable scalar and as a breakdown.
pub fn total_energy_optim<S: Scalar>(
    tape: &Tape<S>,
    data: &Var<S>,
    kinetic_sum: &Var<S>,
    intensity_sum: &Var<S>,
    lambda: f64,
    mu: f64,
    steps: usize,
) -> Result<(Var<S>, EnergyBreakdown)> {
    let t = steps as f64;
    let reg_v = tape.scale(kinetic_sum, S::lit(lambda / t));
    let reg_z = tape.scale(intensity_sum, S::lit(lambda * mu * mu / t));
    let total = tape.add(data, &tape.add(&reg_v, &reg_z)?)?;
    let breakdown = EnergyBreakdown::from_sums(
        data.item().as_f64(),
        kinetic_sum.item().as_f64(),
        intensity_sum.item().as_f64(),
        lambda,
        mu,
        steps,
    );
    Ok((total, breakdown))
}

/// Dataset energy: the sum of the per-sample pairwise energies. Each sample
/// counts the shared `||z_0||^2` once, so a single-sample batch reduces to
/// the pairwise energy exactly.
pub fn total_energy_learning(samples: &[EnergyBreakdown]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("learning energy of an empty batch".into()));
    }
    // fixed left-to-right order keeps the reduction deterministic
    Ok(samples.iter().fold(0.0, |acc, s| acc + s.total))
}

/// Sums breakdowns term by term (same lambda/mu assumed).
pub fn sum_breakdowns(samples: &[EnergyBreakdown]) -> Result<EnergyBreakdown> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("sum of an empty batch".into()))?;
    let mut acc = EnergyBreakdown {
        data_term: 0.0,
        kinetic_term: 0.0,
        intensity_term: 0.0,
        total: 0.0,
        lambda: first.lambda,
        mu: first.mu,
    };
    for s in samples {
        acc.data_term += s.data_term;
        acc.kinetic_term += s.kinetic_term;
        acc.intensity_term += s.intensity_term;
        acc.total += s.total;
    }
    Ok(acc)
}
