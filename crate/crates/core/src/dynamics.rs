//! Discrete geodesic integration of the metamorphosis system.
//!
//! Each of the `T` steps computes the velocity from the current image and
//! momentum (`v = -K * (z grad I)`), advances the momentum either through a
//! residual conv block or through the explicit divergence update, transports
//! the optional mask, and updates the image by semi-Lagrangian back-warping
//! plus the additive `mu^2 z` term. Every step is recorded on the supplied
//! [`Tape`], so the whole trajectory can be differentiated end to end.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MomentumUpdate, RegistrationConfig};
use crate::error::{Error, Result};
use crate::image_ops::{self, ScalarField, VectorField};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameters of one residual block `f_theta_t`: conv -> leaky relu -> conv -> conv.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<S = f64> {
    /// `[C, 2, k, k]`, input channels are `(z_t, I_t)`.
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    /// `[C, C, k, k]`
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    /// `[1, C, k, k]`
    pub w3: Tensor<S>,
    pub b3: Tensor<S>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn zeros(hidden: usize, k: usize) -> Self {
        Self {
            w1: Tensor::zeros([hidden, 2, k, k]),
            b1: Tensor::zeros([hidden]),
            w2: Tensor::zeros([hidden, hidden, k, k]),
            b2: Tensor::zeros([hidden]),
            w3: Tensor::zeros([1, hidden, k, k]),
            b3: Tensor::zeros([1]),
        }
    }

    /// Uniform hidden weights scaled by `gain * sqrt(6 / fan_in)`; the output
    /// layer starts at zero so the block initially contributes nothing.
    pub fn init(hidden: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let mut block = Self::zeros(hidden, k);
        for w in [&mut block.w1, &mut block.w2] {
            let fan_in = (w.shape()[1] * k * k) as f64;
            let bound = gain * (6.0 / fan_in).sqrt();
            for v in w.data_mut() {
                *v = if bound > 0.0 { S::lit(rng.gen_range(-bound..bound)) } else { S::zero() };
            }
        }
        block
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.w1.shape()[2]
    }

    fn tensors(&self) -> [&Tensor<S>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    fn validate(&self) -> Result<()> {
        let (c, k) = (self.hidden(), self.kernel_size());
        let expected: [&[usize]; 6] = [
            &[c, 2, k, k],
            &[c],
            &[c, c, k, k],
            &[c],
            &[1, c, k, k],
            &[1],
        ];
        for (t, want) in self.tensors().iter().zip(expected) {
            if t.shape() != want {
                return Err(Error::Shape(format!(
                    "conv block tensor {:?}, expected {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv kernels must be odd, got {k}")));
        }
        Ok(())
    }
}

const BLOCK_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

/// Per-step block parameters plus the learned initial momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNetParams<S = f64> {
    pub blocks: Vec<ConvBlock<S>>,
    /// Initial momentum `z_0`, `[H, W]`.
    pub z0: Tensor<S>,
}

impl<S: Scalar> ResidualNetParams<S> {
    /// Random hidden layers, zero output layers, zero `z_0`.
    pub fn init(height: usize, width: usize, config: &RegistrationConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = (0..config.steps)
            .map(|_| ConvBlock::init(config.hidden_channels, config.kernel_size, config.init_gain, &mut rng))
            .collect();
        Self {
            blocks,
            z0: Tensor::zeros([height, width]),
        }
    }

    /// All-zero parameters: the integrator is then the identity map.
    pub fn zeros(height: usize, width: usize, config: &RegistrationConfig) -> Self {
        Self {
            blocks: (0..config.steps)
                .map(|_| ConvBlock::zeros(config.hidden_channels, config.kernel_size))
                .collect(),
            z0: Tensor::zeros([height, width]),
        }
    }

    pub fn steps(&self) -> usize {
        self.blocks.len()
    }

    /// `(height, width)` of the grid the parameters were built for.
    pub fn resolution(&self) -> (usize, usize) {
        (self.z0.shape()[0], self.z0.shape()[1])
    }

    /// Named tensors in a fixed order: `z0`, then `block.{t}.{w1,b1,...}`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("z0".to_string(), &self.z0)];
        for (t, block) in self.blocks.iter().enumerate() {
            for (name, tensor) in BLOCK_NAMES.iter().zip(block.tensors()) {
                out.push((format!("block.{t}.{name}"), tensor));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.z0];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out
    }

    /// Rebuilds parameters from tensors in [`named_tensors`](Self::named_tensors) order.
    pub fn from_tensors(mut tensors: Vec<Tensor<S>>) -> Result<Self> {
        if tensors.is_empty() || (tensors.len() - 1) % 6 != 0 {
            return Err(Error::Shape(format!(
                "expected z0 plus 6 tensors per block, got {}",
                tensors.len()
            )));
        }
        let rest = tensors.split_off(1);
        let z0 = tensors.pop().unwrap();
        ScalarField::new(z0.clone())?;
        let mut blocks = Vec::new();
        let mut it = rest.into_iter();
        while let Some(w1) = it.next() {
            let mut next = || it.next().unwrap();
            let block = ConvBlock {
                w1,
                b1: next(),
                w2: next(),
                b2: next(),
                w3: next(),
                b3: next(),
            };
            block.validate()?;
            blocks.push(block);
        }
        Ok(Self { blocks, z0 })
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Registers every tensor on `tape`. Block tensors are tracked only when
    /// `train_blocks` is set (the explicit update does not use them).
    pub fn attach(&self, tape: &Tape<S>, train_blocks: bool) -> ParamVars<S> {
        ParamVars {
            z0: tape.leaf(self.z0.clone(), true),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    w1: tape.leaf(b.w1.clone(), train_blocks),
                    b1: tape.leaf(b.b1.clone(), train_blocks),
                    w2: tape.leaf(b.w2.clone(), train_blocks),
                    b2: tape.leaf(b.b2.clone(), train_blocks),
                    w3: tape.leaf(b.w3.clone(), train_blocks),
                    b3: tape.leaf(b.b3.clone(), train_blocks),
                })
                .collect(),
        }
    }
}

/// Tape handles mirroring [`ConvBlock`].
#[derive(Clone, Debug)]
pub struct BlockVars<S: Scalar = f64> {
    pub w1: Var<S>,
    pub b1: Var<S>,
    pub w2: Var<S>,
    pub b2: Var<S>,
    pub w3: Var<S>,
    pub b3: Var<S>,
}

impl<S: Scalar> BlockVars<S> {
    pub fn vars(&self) -> [&Var<S>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }
}

/// Tape handles mirroring [`ResidualNetParams`].
#[derive(Clone, Debug)]
pub struct ParamVars<S: Scalar = f64> {
    pub z0: Var<S>,
    pub blocks: Vec<BlockVars<S>>,
}

impl<S: Scalar> ParamVars<S> {
    /// Variables in [`ResidualNetParams::named_tensors`] order.
    pub fn vars(&self) -> Vec<&Var<S>> {
        let mut out = vec![&self.z0];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out
    }
}

/// State at one time step.
#[derive(Clone, Debug)]
pub struct MetamorphosisState<S: Scalar = f64> {
    pub image: Var<S>,
    pub momentum: Var<S>,
    /// Always the velocity of the current `(image, momentum)`.
    pub velocity: Var<S>,
    pub mask: Option<Var<S>>,
    pub step: usize,
}

/// Per-step snapshots `t = 0..=T`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord<S = f64> {
    pub images: Vec<Tensor<S>>,
    pub momenta: Vec<Tensor<S>>,
    pub velocities: Vec<Tensor<S>>,
    pub masks: Vec<Tensor<S>>,
}

impl<S: Scalar> TrajectoryRecord<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn push(&mut self, state: &MetamorphosisState<S>) {
        self.images.push(state.image.value().clone());
        self.momenta.push(state.momentum.value().clone());
        self.velocities.push(state.velocity.value().clone());
        if let Some(m) = &state.mask {
            self.masks.push(m.value().clone());
        }
    }
}

/// Everything one forward integration produces.
#[derive(Debug)]
pub struct Integration<S: Scalar = f64> {
    pub final_state: MetamorphosisState<S>,
    /// `sum_{t<T} ||v_t||_V^2`
    pub kinetic_sum: Var<S>,
    /// `sum_{t<T} ||z_t||^2`, or `sum_{t<T} ||sqrt(m_t) z_t||^2` with a mask.
    pub intensity_sum: Var<S>,
    /// `v_0 .. v_{T-1}`, the velocities that moved the image.
    pub velocities: Vec<Tensor<S>>,
    pub trajectory: Option<TrajectoryRecord<S>>,
}

/// Velocity together with the pre-kernel field `p = z grad I` and `K * p`.
struct VelocityParts<S: Scalar> {
    velocity: Var<S>,
    pre_kernel: Var<S>,
    smoothed: Var<S>,
}

fn velocity_parts<S: Scalar>(
    tape: &Tape<S>,
    image: &Var<S>,
    momentum: &Var<S>,
    kernel: &Rc<Vec<S>>,
) -> Result<VelocityParts<S>> {
    if image.shape() != momentum.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs momentum {:?}",
            image.shape(),
            momentum.shape()
        )));
    }
    let grad = tape.spatial_gradient(image)?;
    let z2 = tape.stack(&[momentum, momentum])?;
    let pre_kernel = tape.mul(&z2, &grad)?;
    let smoothed = tape.smooth_with(&pre_kernel, Rc::clone(kernel))?;
    let velocity = tape.scale(&smoothed, -S::one());
    Ok(VelocityParts {
        velocity,
        pre_kernel,
        smoothed,
    })
}

/// `v = -K * (z grad I)` with a componentwise Gaussian kernel.
pub fn velocity_from_momentum<S: Scalar>(
    tape: &Tape<S>,
    image: &Var<S>,
    momentum: &Var<S>,
    sigma: f64,
) -> Result<Var<S>> {
    let kernel = Rc::new(image_ops::gaussian_kernel(sigma)?);
    Ok(velocity_parts(tape, image, momentum, &kernel)?.velocity)
}

/// Evaluates `f_theta(z, I)`: conv -> leaky relu -> conv -> conv, `[H,W]` out.
pub fn block_forward<S: Scalar>(
    tape: &Tape<S>,
    block: &BlockVars<S>,
    momentum: &Var<S>,
    image: &Var<S>,
    negative_slope: f64,
) -> Result<Var<S>> {
    let k = block.w1.shape()[2];
    let pad = (k - 1) / 2;
    let input = tape.stack(&[momentum, image])?;
    let h1 = tape.conv2d(&input, &block.w1, Some(&block.b1), pad)?;
    let a1 = tape.leaky_relu(&h1, S::lit(negative_slope))?;
    let h2 = tape.conv2d(&a1, &block.w2, Some(&block.b2), pad)?;
    let h3 = tape.conv2d(&h2, &block.w3, Some(&block.b3), pad)?;
    tape.reshape(&h3, momentum.shape())
}

fn inverse_steps<S: Scalar>(steps: usize) -> S {
    S::one() / S::lit(steps as f64)
}

/// `z_{t+1} = z_t + f_theta_t(z_t, I_t) / T`.
pub fn momentum_step_resnet<S: Scalar>(
    tape: &Tape<S>,
    state: &MetamorphosisState<S>,
    block: &BlockVars<S>,
    steps: usize,
    negative_slope: f64,
) -> Result<Var<S>> {
    let f = block_forward(tape, block, &state.momentum, &state.image, negative_slope)?;
    tape.add(&state.momentum, &tape.scale(&f, inverse_steps(steps)))
}

/// `z_{t+1} = z_t - div(z_t v_t) / T`.
pub fn momentum_step_pde<S: Scalar>(
    tape: &Tape<S>,
    state: &MetamorphosisState<S>,
    steps: usize,
) -> Result<Var<S>> {
    let z2 = tape.stack(&[&state.momentum, &state.momentum])?;
    let flux = tape.mul(&z2, &state.velocity)?;
    let div = tape.divergence(&flux)?;
    tape.sub(&state.momentum, &tape.scale(&div, inverse_steps(steps)))
}

/// `I_{t+1} = warp(I_t, v_t / T) + (mu^2 / T) (m_t z_t)`, the mask factor
/// applying only when a mask is present. With `mu = 0` the additive term is
/// skipped entirely, leaving a pure warp.
pub fn image_step<S: Scalar>(
    tape: &Tape<S>,
    state: &MetamorphosisState<S>,
    mu: f64,
    steps: usize,
) -> Result<Var<S>> {
    let displacement = tape.scale(&state.velocity, inverse_steps(steps));
    let warped = tape.warp(&state.image, &displacement)?;
    let weight = mu * mu / steps as f64;
    if weight == 0.0 {
        return Ok(warped);
    }
    let residual = match &state.mask {
        Some(m) => tape.mul(m, &state.momentum)?,
        None => state.momentum.clone(),
    };
    tape.add(&warped, &tape.scale(&residual, S::lit(weight)))
}

/// `m_{t+1} = clamp(warp(m_t, v_t / T), 0, 1)`.
pub fn mask_step<S: Scalar>(
    tape: &Tape<S>,
    state: &MetamorphosisState<S>,
    steps: usize,
) -> Result<Var<S>> {
    let mask = state
        .mask
        .as_ref()
        .ok_or_else(|| Error::Contract("mask_step called without a mask".into()))?;
    let displacement = tape.scale(&state.velocity, inverse_steps(steps));
    let warped = tape.warp(mask, &displacement)?;
    Ok(tape.clamp(&warped, S::zero(), S::one()))
}

fn check_finite<S: Scalar>(var: &Var<S>, step: usize, quantity: &'static str) -> Result<()> {
    if var.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, quantity })
    }
}

/// Runs the `T`-step integration from `source` (and optional `mask`).
pub fn integrate<S: Scalar>(
    tape: &Tape<S>,
    source: &Var<S>,
    mask: Option<&Var<S>>,
    params: &ParamVars<S>,
    config: &RegistrationConfig,
    record: bool,
) -> Result<Integration<S>> {
    let steps = config.steps;
    if config.mode == MomentumUpdate::ResNet && params.blocks.len() != steps {
        return Err(Error::Contract(format!(
            "config asks for {steps} steps but parameters hold {} blocks",
            params.blocks.len()
        )));
    }
    let [_, width] = *source.shape() else {
        return Err(Error::Shape(format!("source must be [H,W], got {:?}", source.shape())));
    };
    if params.z0.shape() != source.shape() {
        return Err(Error::Shape(format!(
            "z0 {:?} vs source {:?}",
            params.z0.shape(),
            source.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != source.shape() {
            return Err(Error::Shape(format!("mask {:?} vs source {:?}", m.shape(), source.shape())));
        }
    }
    let kernel = Rc::new(image_ops::gaussian_kernel::<S>(config.sigma_for(width))?);

    let parts = velocity_parts(tape, source, &params.z0, &kernel)?;
    let mut state = MetamorphosisState {
        image: source.clone(),
        momentum: params.z0.clone(),
        velocity: parts.velocity.clone(),
        mask: mask.cloned(),
        step: 0,
    };
    let mut parts = Some(parts);
    let mut kinetic: Option<Var<S>> = None;
    let mut intensity: Option<Var<S>> = None;
    let mut velocities = Vec::with_capacity(steps);
    let mut trajectory = record.then(TrajectoryRecord::default);

    let accumulate = |acc: &mut Option<Var<S>>, term: Var<S>| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(a) => tape.add(&a, &term)?,
            None => term,
        });
        Ok(())
    };

    for t in 0..steps {
        let current = parts.take().expect("velocity parts computed for every step");
        accumulate(&mut kinetic, tape.sum_all(&tape.mul(&current.pre_kernel, &current.smoothed)?))?;
        let z_norm = match &state.mask {
            Some(m) => tape.sum_all(&tape.mul(m, &tape.mul(&state.momentum, &state.momentum)?)?),
            None => tape.sum_squares(&state.momentum),
        };
        accumulate(&mut intensity, z_norm)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(&state);
        }
        velocities.push(state.velocity.value().clone());

        let momentum = match config.mode {
            MomentumUpdate::ResNet => {
                momentum_step_resnet(tape, &state, &params.blocks[t], steps, config.negative_slope)?
            }
            MomentumUpdate::Pde => momentum_step_pde(tape, &state, steps)?,
        };
        let image = image_step(tape, &state, config.mu, steps)?;
        let mask = match state.mask {
            Some(_) => Some(mask_step(tape, &state, steps)?),
            None => None,
        };
        check_finite(&momentum, t + 1, "momentum")?;
        check_finite(&image, t + 1, "image")?;

        let next = velocity_parts(tape, &image, &momentum, &kernel)?;
        check_finite(&next.velocity, t + 1, "velocity")?;
        state = MetamorphosisState {
            image,
            momentum,
            velocity: next.velocity.clone(),
            mask,
            step: t + 1,
        };
        parts = Some(next);
    }
    if let Some(tr) = trajectory.as_mut() {
        tr.push(&state);
    }

    Ok(Integration {
        final_state: state,
        kinetic_sum: kinetic.expect("at least one step"),
        intensity_sum: intensity.expect("at least one step"),
        velocities,
        trajectory,
    })
}

/// Re-applies a velocity sequence to `source` with the additive term
/// suppressed: the geometric part of a trajectory alone.
pub fn replay_shape<S: Scalar>(source: &Tensor<S>, velocities: &[Tensor<S>]) -> Result<Tensor<S>> {
    let steps = velocities.len();
    if steps == 0 {
        return Ok(source.clone());
    }
    let inv = inverse_steps::<S>(steps);
    let mut image = source.clone();
    for v in velocities {
        let displacement = v.map(|x| x * inv);
        image = image_ops::warp_raw(&image, &displacement)?;
    }
    Ok(image)
}

/// Per-step L1 distance and Pearson correlation between the learned update
/// `f_theta_t(z_t, I_t)` and the explicit `-div(z_t v_t)` along a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerComparison {
    pub step: usize,
    pub l1_mean: f64,
    pub pearson: f64,
}

/// Compares each residual block with the divergence term it replaces,
/// evaluated on the states of a ResNet trajectory starting at `source`.
pub fn compare_with_divergence<S: Scalar>(
    source: &Tensor<S>,
    params: &ResidualNetParams<S>,
    config: &RegistrationConfig,
) -> Result<Vec<LayerComparison>> {
    let tape = Tape::no_grad();
    let vars = params.attach(&tape, false);
    let config = RegistrationConfig {
        mode: MomentumUpdate::ResNet,
        ..config.clone()
    };
    let src = tape.constant(source.clone());
    let run = integrate(&tape, &src, None, &vars, &config, true)?;
    let tr = run.trajectory.expect("recorded");
    let mut out = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let z = tape.constant(tr.momenta[t].clone());
        let img = tape.constant(tr.images[t].clone());
        let v = tape.constant(tr.velocities[t].clone());
        let learned = block_forward(&tape, &vars.blocks[t], &z, &img, config.negative_slope)?;
        let flux = tape.mul(&tape.stack(&[&z, &z])?, &v)?;
        let explicit = tape.scale(&tape.divergence(&flux)?, -S::one());
        let a: Vec<f64> = learned.value().data().iter().map(|x| x.as_f64()).collect();
        let b: Vec<f64> = explicit.value().data().iter().map(|x| x.as_f64()).collect();
        out.push(LayerComparison {
            step: t,
            l1_mean: a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64,
            pearson: pearson(&a, &b),
        });
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Convenience for callers holding plain fields: a non-recording forward run.
pub fn integrate_fields<S: Scalar>(
    source: &ScalarField<S>,
    mask: Option<&ScalarField<S>>,
    params: &ResidualNetParams<S>,
    config: &RegistrationConfig,
    record: bool,
) -> Result<(ScalarField<S>, Integration<S>)> {
    let tape = Tape::no_grad();
    let vars = params.attach(&tape, false);
    let src = tape.constant(source.tensor().clone());
    let mask = mask.map(|m| tape.constant(m.tensor().clone()));
    let run = integrate(&tape, &src, mask.as_ref(), &vars, config, record)?;
    let image = ScalarField::new(run.final_state.image.value().clone())?;
    Ok((image, run))
}

/// Velocity of a plain field pair (no tape needed by the caller).
pub fn velocity_field<S: Scalar>(
    image: &ScalarField<S>,
    momentum: &ScalarField<S>,
    sigma: f64,
) -> Result<VectorField<S>> {
    let tape = Tape::no_grad();
    let v = velocity_from_momentum(
        &tape,
        &tape.constant(image.tensor().clone()),
        &tape.constant(momentum.tensor().clone()),
        sigma,
    )?;
    VectorField::new(v.value().clone())
}
