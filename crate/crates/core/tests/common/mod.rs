#![allow(dead_code)]

use metamorph_core::dynamics::{integrate, ResidualNetParams};
use metamorph_core::energy::{data_term, total_energy_optim};
use metamorph_core::optim::{sample_gradient, Sample};
use metamorph_core::tensor::Tensor;
use metamorph_core::{MomentumUpdate, RegistrationConfig, ScalarField, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Central finite differences of `f` at `inputs`, one tensor per input.
pub fn numeric_gradients(inputs: &[Tensor], step: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + step;
            let plus = f(&work);
            work[k].data_mut()[i] = x - step;
            let minus = f(&work);
            work[k].data_mut()[i] = x;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `max |a - n| / max |n|` over all entries of all tensors.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        diff = diff.max(a.max_abs_diff(n).unwrap());
        scale = scale.max(n.max_abs());
    }
    diff / scale.max(1e-300)
}

/// Compares tape gradients of `build` with central differences (step 1e-5).
/// The scalar loss is `sum(build(...) * weights)` with fixed random weights so
/// every output entry contributes a distinct sensitivity.
pub fn check_op(inputs: &[Tensor], seed: u64, build: &dyn Fn(&Tape, &[Var]) -> Var) -> f64 {
    let weights = {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = build(&tape, &vars).shape().to_vec();
        random(&shape, 1.0, &mut rng(seed))
    };
    let loss = |tape: &Tape, vars: &[Var]| {
        let out = build(tape, vars);
        let w = tape.constant(weights.clone());
        tape.sum_all(&tape.mul(&out, &w).unwrap())
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let l = loss(&tape, &vars);
    let grads = tape.backward(&l).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(v).unwrap().clone()).collect();
    let numeric = numeric_gradients(inputs, 1e-5, &|xs| {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        loss(&tape, &vars).item()
    });
    relative_error(&analytic, &numeric)
}

/// Independent dense-stencil divergence of `(z v_x, z v_y)`.
pub fn divergence_oracle(z: &Tensor, v: &Tensor) -> Tensor {
    let (h, w) = (z.shape()[0], z.shape()[1]);
    let fx = |y: usize, x: usize| z.at(&[y, x]) * v.at(&[0, y, x]);
    let fy = |y: usize, x: usize| z.at(&[y, x]) * v.at(&[1, y, x]);
    Tensor::from_fn([h, w], |i| {
        let (y, x) = (i[0], i[1]);
        let dx = if x == 0 {
            fx(y, 1) - fx(y, 0)
        } else if x == w - 1 {
            fx(y, w - 1) - fx(y, w - 2)
        } else {
            (fx(y, x + 1) - fx(y, x - 1)) * 0.5
        };
        let dy = if y == 0 {
            fy(1, x) - fy(0, x)
        } else if y == h - 1 {
            fy(h - 1, x) - fy(h - 2, x)
        } else {
            (fy(y + 1, x) - fy(y - 1, x)) * 0.5
        };
        dx + dy
    })
}

pub fn random_params(config: &RegistrationConfig, n: usize, seed: u64) -> ResidualNetParams {
    let mut params = ResidualNetParams::init(n, n, config);
    let mut r = rng(seed);
    for t in params.tensors_mut() {
        *t = random(t.shape(), 0.3, &mut r);
    }
    params
}

/// Energy of one sample evaluated without recording, for finite differences.
pub fn energy(params: &ResidualNetParams, sample: &Sample, target: &ScalarField, config: &RegistrationConfig) -> f64 {
    let tape = Tape::no_grad();
    let vars = params.attach(&tape, false);
    let src = tape.constant(sample.image.tensor().clone());
    let tgt = tape.constant(target.tensor().clone());
    let mask = sample.mask.as_ref().map(|m| tape.constant(m.tensor().clone()));
    let run = integrate(&tape, &src, mask.as_ref(), &vars, config, false).unwrap();
    let data = data_term(&tape, &run.final_state.image, &tgt).unwrap();
    let (_, breakdown) = total_energy_optim(
        &tape,
        &data,
        &run.kinetic_sum,
        &run.intensity_sum,
        config.lambda,
        config.mu,
        config.steps,
    )
    .unwrap();
    breakdown.total
}

pub fn trajectory_error(mode: MomentumUpdate, masked: bool) -> f64 {
    let n = 8;
    let config = RegistrationConfig {
        steps: 3,
        hidden_channels: 2,
        mu: 0.7,
        lambda: 0.05,
        sigma: Some(1.0),
        mode,
        ..RegistrationConfig::default()
    };
    let params = random_params(&config, n, 31);
    let mut r = rng(32);
    let image = ScalarField::new(random(&[n, n], 1.0, &mut r).map(|v| 0.5 + 0.5 * v)).unwrap();
    let target = ScalarField::new(random(&[n, n], 1.0, &mut r).map(|v| 0.5 + 0.5 * v)).unwrap();
    let mask = masked.then(|| ScalarField::from_fn(n, n, |y, x| if (2..6).contains(&y) && x > 2 { 1.0 } else { 0.0 }));
    let sample = Sample { image, mask };
    let (analytic, _) = sample_gradient(&params, &sample, &target, &config).unwrap();

    let trainable: Vec<Tensor> = match mode {
        MomentumUpdate::ResNet => params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect(),
        MomentumUpdate::Pde => vec![params.z0.clone()],
    };
    let numeric = numeric_gradients(&trainable, 1e-5, &|xs| {
        let mut p = params.clone();
        match mode {
            MomentumUpdate::ResNet => p = ResidualNetParams::from_tensors(xs.to_vec()).unwrap(),
            MomentumUpdate::Pde => p.z0 = xs[0].clone(),
        }
        energy(&p, &sample, &target, &config)
    });
    relative_error(&analytic, &numeric)
}
