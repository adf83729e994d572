//! Integrator invariants: identity start, explicit update oracle, LDDMM
//! limit, mask transport.

mod common;

use common::{divergence_oracle, random, rng};
use metamorph_core::dynamics::{
    image_step, integrate, mask_step, momentum_step_pde, momentum_step_resnet, replay_shape, velocity_from_momentum,
    ConvBlock, MetamorphosisState, ResidualNetParams,
};
use metamorph_core::image_ops::{gaussian_smooth, spatial_gradient, warp};
use metamorph_core::tensor::Tensor;
use metamorph_core::{Error, MomentumUpdate, RegistrationConfig, ScalarField, Tape, Var, VectorField};

fn state(tape: &Tape, image: Tensor, momentum: Tensor, mask: Option<Tensor>, sigma: f64) -> MetamorphosisState {
    let image = tape.constant(image);
    let momentum = tape.constant(momentum);
    let velocity = velocity_from_momentum(tape, &image, &momentum, sigma).unwrap();
    MetamorphosisState {
        image,
        momentum,
        velocity,
        mask: mask.map(|m| tape.constant(m)),
        step: 0,
    }
}

fn state_with_velocity(tape: &Tape, image: Tensor, momentum: Tensor, velocity: Tensor, mask: Option<Tensor>) -> MetamorphosisState {
    MetamorphosisState {
        image: tape.constant(image),
        momentum: tape.constant(momentum),
        velocity: tape.constant(velocity),
        mask: mask.map(|m| tape.constant(m)),
        step: 0,
    }
}

fn small_config(steps: usize) -> RegistrationConfig {
    RegistrationConfig {
        steps,
        hidden_channels: 3,
        sigma: Some(1.5),
        ..RegistrationConfig::default()
    }
}

/// Zero outside a `margin`-pixel border, random inside.
fn interior(n: usize, margin: usize, scale: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let t = random(&[n, n], scale, &mut r);
    Tensor::from_fn([n, n], |i| {
        let inside = (margin..n - margin).contains(&i[0]) && (margin..n - margin).contains(&i[1]);
        if inside {
            t.at(i)
        } else {
            0.0
        }
    })
}

#[test]
fn velocity_zero_cases() {
    let tape = Tape::no_grad();
    let img = random(&[10, 10], 1.0, &mut rng(1));
    let s = state(&tape, img, Tensor::zeros([10, 10]), None, 1.0);
    assert!(s.velocity.value().data().iter().all(|&v| v == 0.0));
    let s = state(&tape, Tensor::full([10, 10], 0.7), random(&[10, 10], 1.0, &mut rng(2)), None, 1.0);
    assert!(s.velocity.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn velocity_matches_composed_image_ops() {
    let mut r = rng(3);
    let img = ScalarField::new(random(&[12, 11], 1.0, &mut r)).unwrap();
    let z = random(&[12, 11], 0.5, &mut r);
    let g = spatial_gradient(&img);
    let p = VectorField::from_fn(12, 11, |y, x| {
        let zz = z.at(&[y, x]);
        (zz * g.tensor().at(&[0, y, x]), zz * g.tensor().at(&[1, y, x]))
    });
    let want = gaussian_smooth(&p, 1.7).unwrap().tensor().map(|v| -v);
    let tape = Tape::no_grad();
    let got = velocity_from_momentum(&tape, &tape.constant(img.tensor().clone()), &tape.constant(z), 1.7).unwrap();
    assert!(got.value().max_abs_diff(&want).unwrap() < 1e-12);
    let bad = tape.constant(Tensor::zeros([12, 12]));
    assert!(matches!(
        velocity_from_momentum(&tape, &tape.constant(img.tensor().clone()), &bad, 1.0),
        Err(Error::Shape(_))
    ));
}

fn block_vars(tape: &Tape, block: &ConvBlock) -> metamorph_core::dynamics::BlockVars {
    let p = ResidualNetParams {
        blocks: vec![block.clone()],
        z0: Tensor::zeros([3, 3]),
    };
    p.attach(tape, false).blocks.remove(0)
}

fn random_block(hidden: usize, seed: u64) -> ConvBlock {
    let mut r = rng(seed);
    ConvBlock {
        w1: random(&[hidden, 2, 3, 3], 0.5, &mut r),
        b1: random(&[hidden], 0.5, &mut r),
        w2: random(&[hidden, hidden, 3, 3], 0.5, &mut r),
        b2: random(&[hidden], 0.5, &mut r),
        w3: random(&[1, hidden, 3, 3], 0.5, &mut r),
        b3: random(&[1], 0.5, &mut r),
    }
}

/// Direct zero-padded cross-correlation with bias.
fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let r = (k / 2) as isize;
    Tensor::from_fn([co, h, w], |i| {
        let (o, y, x) = (i[0], i[1] as isize, i[2] as isize);
        let mut acc = bias.data()[o];
        for c in 0..ci {
            for ky in 0..k as isize {
                for kx in 0..k as isize {
                    let (yy, xx) = (y + ky - r, x + kx - r);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        acc += kernel.at(&[o, c, ky as usize, kx as usize]) * input.at(&[c, yy as usize, xx as usize]);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn resnet_step_matches_layer_composition() {
    let mut r = rng(4);
    let (img, z) = (random(&[7, 8], 1.0, &mut r), random(&[7, 8], 1.0, &mut r));
    let block = random_block(3, 5);
    let input = Tensor::from_fn([2, 7, 8], |i| if i[0] == 0 { z.at(&i[1..]) } else { img.at(&i[1..]) });
    let h1 = conv_oracle(&input, &block.w1, &block.b1).map(|v| if v >= 0.0 { v } else { 0.01 * v });
    let h2 = conv_oracle(&h1, &block.w2, &block.b2);
    let f = conv_oracle(&h2, &block.w3, &block.b3).reshape([7, 8]).unwrap();
    let want = z.zip_map(&f, |a, b| a + b / 4.0).unwrap();

    let tape = Tape::no_grad();
    let s = state(&tape, img, z, None, 1.0);
    let got = momentum_step_resnet(&tape, &s, &block_vars(&tape, &block), 4, 0.01).unwrap();
    assert!(got.value().max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn resnet_step_zero_block_and_step_scaling() {
    let mut r = rng(6);
    let (img, z) = (random(&[6, 6], 1.0, &mut r), random(&[6, 6], 1.0, &mut r));
    let tape = Tape::no_grad();
    let s = state(&tape, img.clone(), z.clone(), None, 1.0);
    let zero = block_vars(&tape, &ConvBlock::zeros(3, 3));
    assert_eq!(momentum_step_resnet(&tape, &s, &zero, 20, 0.01).unwrap().value(), &z);

    // From z = 0 the new momentum is the increment f/T itself.
    let s = state(&tape, img, Tensor::zeros([6, 6]), None, 1.0);
    let block = block_vars(&tape, &random_block(2, 7));
    let a = momentum_step_resnet(&tape, &s, &block, 10, 0.01).unwrap();
    let b = momentum_step_resnet(&tape, &s, &block, 20, 0.01).unwrap();
    assert!(a.value().max_abs() > 0.0);
    assert_eq!(&b.value().map(|v| v * 2.0), a.value());
}

#[test]
fn pde_step_matches_stencil_oracle_exactly() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let (img, z) = (random(&[16, 16], 1.0, &mut r), random(&[16, 16], 1.0, &mut r));
        let tape = Tape::no_grad();
        let s = state(&tape, img, z.clone(), None, 2.0);
        let div = divergence_oracle(&z, s.velocity.value());
        let inv = 1.0 / 20.0;
        let want = z.zip_map(&div, |a, d| a - d * inv).unwrap();
        let got = momentum_step_pde(&tape, &s, 20).unwrap();
        assert_eq!(got.value(), &want, "seed {seed}");
    }
}

#[test]
fn pde_step_fixed_points() {
    let tape = Tape::no_grad();
    let img = random(&[9, 9], 1.0, &mut rng(8));
    let s = state(&tape, img.clone(), Tensor::zeros([9, 9]), None, 1.0);
    assert!(momentum_step_pde(&tape, &s, 5).unwrap().value().data().iter().all(|&v| v == 0.0));

    let v = Tensor::from_fn([2, 9, 9], |i| if i[0] == 0 { 0.3 } else { -0.2 });
    let s = state_with_velocity(&tape, img, Tensor::full([9, 9], 1.5), v, None);
    let z1 = momentum_step_pde(&tape, &s, 5).unwrap();
    assert!(z1.value().data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
}

#[test]
fn pde_mass_drift_below_tolerance() {
    let n = 24;
    let config = RegistrationConfig {
        mode: MomentumUpdate::Pde,
        ..small_config(10)
    };
    let img = ScalarField::new(interior(n, 4, 1.0, 9).map(|v| 0.5 + 0.5 * v)).unwrap();
    let mut params = ResidualNetParams::zeros(n, n, &config);
    params.z0 = interior(n, 8, 0.5, 10);
    let tape = Tape::no_grad();
    let vars = params.attach(&tape, false);
    let src = tape.constant(img.tensor().clone());
    let run = integrate(&tape, &src, None, &vars, &config, true).unwrap();
    let masses: Vec<f64> = run.trajectory.unwrap().momenta.iter().map(|z| z.sum()).collect();
    for w in masses.windows(2) {
        assert!((w[1] - w[0]).abs() < 1e-6, "{w:?}");
    }
}

#[test]
fn image_step_cases() {
    let tape = Tape::no_grad();
    let img = random(&[8, 8], 1.0, &mut rng(11));
    let s = state_with_velocity(&tape, img.clone(), Tensor::zeros([8, 8]), Tensor::zeros([2, 8, 8]), None);
    assert_eq!(image_step(&tape, &s, 0.8, 10).unwrap().value(), &img);

    // Fully masked: only the warp acts, bit for bit.
    let mut r = rng(12);
    let (z, v) = (random(&[8, 8], 1.0, &mut r), random(&[2, 8, 8], 1.5, &mut r));
    let s = state_with_velocity(&tape, img.clone(), z, v.clone(), Some(Tensor::zeros([8, 8])));
    let warped = warp(
        &ScalarField::new(img.clone()).unwrap(),
        &VectorField::new(v.map(|x| x * (1.0 / 10.0))).unwrap(),
    )
    .unwrap();
    assert_eq!(image_step(&tape, &s, 0.8, 10).unwrap().value(), warped.tensor());
}

#[test]
fn lddmm_image_step_preserves_mass_of_interior_images() {
    let n = 20;
    let img = interior(n, 6, 1.0, 13).map(|v| v.abs());
    let v = Tensor::from_fn([2, n, n], |i| if i[0] == 0 { 0.37 } else { -0.21 });
    let tape = Tape::no_grad();
    let s = state_with_velocity(&tape, img.clone(), random(&[n, n], 1.0, &mut rng(14)), v, None);
    let next = image_step(&tape, &s, 0.0, 1).unwrap();
    assert!((next.value().sum() - img.sum()).abs() < 1e-9 * img.sum().max(1.0));
}

#[test]
fn mask_step_cases() {
    let n = 12;
    let tape = Tape::no_grad();
    let img = random(&[n, n], 1.0, &mut rng(15));
    let s = state(&tape, img.clone(), Tensor::zeros([n, n]), None, 1.0);
    assert!(matches!(mask_step(&tape, &s, 4), Err(Error::Contract(_))));

    let mask = Tensor::from_fn([n, n], |i| if i[0] > 3 && i[1] < 7 { 1.0 } else { 0.0 });
    let s = state_with_velocity(&tape, img.clone(), Tensor::zeros([n, n]), Tensor::zeros([2, n, n]), Some(mask.clone()));
    assert_eq!(mask_step(&tape, &s, 4).unwrap().value(), &mask);

    let v = Tensor::from_fn([2, n, n], |i| if i[0] == 0 { 2.0 } else { -1.0 });
    let s = state_with_velocity(&tape, img.clone(), Tensor::zeros([n, n]), v.clone(), Some(mask.clone()));
    let moved = mask_step(&tape, &s, 4).unwrap();
    let oracle = warp(
        &ScalarField::new(mask).unwrap(),
        &VectorField::new(v.map(|x| x / 4.0)).unwrap(),
    )
    .unwrap();
    assert_eq!(moved.value(), oracle.tensor());

    let v = random(&[2, n, n], 3.0, &mut rng(16));
    let s = state_with_velocity(&tape, img, Tensor::zeros([n, n]), v, Some(Tensor::full([n, n], 1.0)));
    let ones = mask_step(&tape, &s, 2).unwrap();
    assert!(ones.value().data().iter().all(|&m| m == 1.0));
}

fn run(
    params: &ResidualNetParams,
    source: &Tensor,
    mask: Option<&Tensor>,
    config: &RegistrationConfig,
) -> metamorph_core::Integration {
    let tape = Tape::no_grad();
    let vars = params.attach(&tape, false);
    let src = tape.constant(source.clone());
    let mask: Option<Var> = mask.map(|m| tape.constant(m.clone()));
    integrate(&tape, &src, mask.as_ref(), &vars, config, true).unwrap()
}

#[test]
fn identity_start_is_exact() {
    let n = 16;
    for (mu, masked) in [(1.0, false), (0.3, true), (0.0, false)] {
        let config = RegistrationConfig { mu, ..small_config(5) };
        let params = ResidualNetParams::init(n, n, &config);
        let src = random(&[n, n], 1.0, &mut rng(17));
        let mask = masked.then(|| interior(n, 3, 1.0, 18).map(|v| if v != 0.0 { 1.0 } else { 0.0 }));
        let out = run(&params, &src, mask.as_ref(), &config);
        assert_eq!(out.final_state.image.value(), &src);
        assert_eq!(out.kinetic_sum.item(), 0.0);
        assert_eq!(out.intensity_sum.item(), 0.0);
        assert_eq!(out.trajectory.unwrap().len(), 6);
    }
}

#[test]
fn lddmm_limit_is_a_pure_warp() {
    let n = 16;
    for mode in [MomentumUpdate::Pde, MomentumUpdate::ResNet] {
        let config = RegistrationConfig {
            mu: 0.0,
            mode,
            ..small_config(4)
        };
        let mut params = ResidualNetParams::init(n, n, &config);
        params.z0 = random(&[n, n], 2.0, &mut rng(19));
        for b in &mut params.blocks {
            b.w3 = random(b.w3.shape(), 0.3, &mut rng(20));
        }
        let src = random(&[n, n], 1.0, &mut rng(21)).map(|v| 0.5 + 0.5 * v);
        let out = run(&params, &src, None, &config);
        assert!(out.velocities.iter().any(|v| v.max_abs() > 1e-3));
        let replay = replay_shape(&src, &out.velocities).unwrap();
        assert_eq!(out.final_state.image.value(), &replay, "{mode}");
    }
}

#[test]
fn resnet_and_pde_first_steps_differ_only_in_momentum() {
    let n = 16;
    let config = small_config(3);
    let mut params = ResidualNetParams::zeros(n, n, &config);
    params.z0 = random(&[n, n], 1.0, &mut rng(22));
    let src = random(&[n, n], 1.0, &mut rng(23));
    let a = run(&params, &src, None, &config);
    let pde = RegistrationConfig {
        mode: MomentumUpdate::Pde,
        ..config.clone()
    };
    let b = run(&params, &src, None, &pde);
    let (ta, tb) = (a.trajectory.unwrap(), b.trajectory.unwrap());
    assert_eq!(ta.images[1], tb.images[1]);
    assert_eq!(ta.momenta[1], params.z0);
    let div = divergence_oracle(&params.z0, &ta.velocities[0]);
    let expected = params.z0.zip_map(&div, |z, d| z - d * (1.0 / 3.0)).unwrap();
    assert_eq!(tb.momenta[1], expected);
}

#[test]
fn trajectory_invariants() {
    let n = 16;
    let config = RegistrationConfig { mu: 0.5, ..small_config(6) };
    let mut params = ResidualNetParams::init(n, n, &config);
    params.z0 = random(&[n, n], 3.0, &mut rng(24));
    for (t, b) in params.blocks.iter_mut().enumerate() {
        b.w3 = random(b.w3.shape(), 0.5, &mut rng(25 + t as u64));
    }
    let src = random(&[n, n], 1.0, &mut rng(40)).map(|v| 0.5 + 0.5 * v);
    let mask = Tensor::from_fn([n, n], |i| if i[0] > 4 && i[1] > 4 && i[0] < 12 { 1.0 } else { 0.0 });
    let out = run(&params, &src, Some(&mask), &config);
    let tr = out.trajectory.unwrap();
    assert_eq!(tr.len(), config.steps + 1);
    assert_eq!(&tr.velocities[..config.steps], &out.velocities[..]);
    for m in &tr.masks {
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    let sigma = config.sigma_for(n);
    let tape = Tape::no_grad();
    for t in 0..=config.steps {
        let img = tape.constant(tr.images[t].clone());
        let z = tape.constant(tr.momenta[t].clone());
        let v = velocity_from_momentum(&tape, &img, &z, sigma).unwrap();
        assert_eq!(v.value(), &tr.velocities[t]);
        let norm = metamorph_core::energy::v_norm_sq(&tape, &img, &z, sigma).unwrap();
        assert!(norm.item() >= -1e-10);
    }
}

#[test]
fn integrate_errors() {
    let n = 8;
    let config = small_config(3);
    let params = ResidualNetParams::init(n, n, &config);
    let tape = Tape::no_grad();
    let vars = params.attach(&tape, false);
    let wrong = RegistrationConfig { steps: 4, ..config.clone() };
    let src = tape.constant(Tensor::zeros([n, n]));
    assert!(matches!(integrate(&tape, &src, None, &vars, &wrong, false), Err(Error::Contract(_))));
    let small = tape.constant(Tensor::zeros([n, n - 1]));
    assert!(matches!(integrate(&tape, &small, None, &vars, &config, false), Err(Error::Shape(_))));

    let mut bad = params.clone();
    bad.z0.data_mut()[20] = f64::INFINITY;
    let vars = bad.attach(&tape, false);
    let src = tape.constant(random(&[n, n], 1.0, &mut rng(41)));
    assert!(matches!(
        integrate(&tape, &src, None, &vars, &config, false),
        Err(Error::Diverged { step: 1, .. })
    ));
}
