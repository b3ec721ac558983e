use aal_core::backbone::{forward, gradient, image_batch, init_backbone, BackboneConfig, BnMode, Head};
use aal_core::episode::Episode;
use aal_core::loss::cross_entropy;
use aal_core::maml::{inner_adapt, meta_gradient, outer_loss, unroll, MamlConfig, MetaParams};
use aal_core::{ImageTensor, RngStream};
use aal_tensor::gradcheck::{central_differences, relative_error, spread_coords};
use aal_tensor::{Array, Tensor};
use rand::Rng;

/// One block, two filters, 4x4 inputs, two-way head: 42 backbone parameters.
fn tiny_config() -> BackboneConfig {
    BackboneConfig { in_channels: 1, side: 4, blocks: 1, filters: 2, head: Head::Linear(2) }
}

fn tiny_episode(seed: u64) -> Episode {
    let mut rng = RngStream::new(seed);
    let mut img = || ImageTensor::new(4, 4, 1, (0..16).map(|_| rng.random::<f32>()).collect()).unwrap();
    let support_images = (0..4).map(|_| img()).collect();
    let target_images = (0..4).map(|_| img()).collect();
    Episode {
        n_way: 2,
        k_shot: 2,
        target_per_class: 2,
        support_images,
        support_labels: vec![0, 1, 1, 0],
        target_images,
        target_labels: vec![1, 0, 0, 1],
        support_sources: (0..4).collect(),
        target_sources: (4..8).collect(),
    }
}

fn config(second_order: bool) -> MamlConfig {
    MamlConfig {
        inner_steps: 2,
        eval_inner_steps: 2,
        second_order,
        msl: false,
        alpha_init: 0.3,
        ..MamlConfig::default()
    }
}

fn meta_params(mc: &MamlConfig, seed: u64) -> MetaParams {
    let theta = init_backbone(tiny_config(), &mut RngStream::new(seed)).unwrap();
    let mut mp = MetaParams::new(theta, mc).unwrap();
    // Move γ and β off their initial values so their gradients are generic.
    let mut rng = RngStream::new(seed + 100);
    for a in mp.theta.tensors.iter_mut().chain(mp.step_affine.iter_mut()) {
        for v in &mut a.data {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    mp
}

fn flatten(mp: &MetaParams) -> Vec<f64> {
    mp.theta.tensors.iter().chain(std::iter::once(&mp.alpha)).chain(&mp.step_affine).flat_map(|a| a.data.clone()).collect()
}

fn unflatten(mp: &mut MetaParams, x: &[f64]) {
    let mut off = 0;
    for a in mp.theta.tensors.iter_mut().chain(std::iter::once(&mut mp.alpha)).chain(mp.step_affine.iter_mut()) {
        let n = a.data.len();
        a.data.copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn flat_grads(grads: &[Array]) -> Vec<f64> {
    grads.iter().flat_map(|a| a.data.clone()).collect()
}

#[test]
fn tiny_model_stays_under_a_hundred_parameters() {
    let mc = config(true);
    let mp = meta_params(&mc, 1);
    assert_eq!(tiny_config().param_count(), 42);
    assert!(flatten(&mp).len() <= 100);
}

#[test]
fn second_order_meta_gradient_matches_finite_differences() {
    let mc = config(true);
    let ep = tiny_episode(3);
    let weights = mc.step_weights(0);
    let mp = meta_params(&mc, 2);
    let x0 = flatten(&mp);
    let (_, _, grads) = meta_gradient(&mut mp.clone(), &mc, std::slice::from_ref(&ep), 0).unwrap();
    let analytic = flat_grads(&grads);
    assert_eq!(analytic.len(), x0.len());
    let coords = spread_coords(x0.len(), 20);
    let fd = central_differences(
        |x| {
            let mut probe = mp.clone();
            unflatten(&mut probe, x);
            outer_loss(&probe, &mc, &ep, &weights).unwrap()
        },
        &x0,
        &coords,
        1e-5,
    );
    for (&c, f) in coords.iter().zip(&fd) {
        let err = relative_error(analytic[c], *f, 1e-6);
        assert!(err <= 1e-3, "coordinate {c}: analytic {} vs fd {f} (rel {err:.2e})", analytic[c]);
    }
}

#[test]
fn first_order_drops_the_second_derivative_term() {
    let ep = tiny_episode(5);
    let mut mp = meta_params(&config(true), 4);
    let (l2, _, g2) = meta_gradient(&mut mp.clone(), &config(true), std::slice::from_ref(&ep), 0).unwrap();
    let (l1, _, g1) = meta_gradient(&mut mp, &config(false), std::slice::from_ref(&ep), 0).unwrap();
    assert!((l1 - l2).abs() < 1e-12, "the forward loss does not depend on the order");
    let (a, b) = (flat_grads(&g1), flat_grads(&g2));
    let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max_diff > 1e-8, "first- and second-order gradients coincide");
}

#[test]
fn msl_with_last_step_weight_reproduces_plain_loss() {
    let ep = tiny_episode(7);
    let plain = config(true);
    let msl = MamlConfig { msl: true, msl_weights: Some(vec![0.0, 1.0]), ..plain.clone() };
    let mp = meta_params(&plain, 6);
    let (lp, _, gp) = meta_gradient(&mut mp.clone(), &plain, std::slice::from_ref(&ep), 3).unwrap();
    let (lm, _, gm) = meta_gradient(&mut mp.clone(), &msl, std::slice::from_ref(&ep), 3).unwrap();
    assert_eq!(lp.to_bits(), lm.to_bits());
    assert_eq!(flat_grads(&gp), flat_grads(&gm));
}

#[test]
fn zero_rates_leave_parameters_unchanged() {
    let mc = config(true);
    let ep = tiny_episode(9);
    let mut mp = meta_params(&mc, 8);
    mp.alpha.data.fill(0.0);
    let traj = inner_adapt(&mp, &mc, &ep.support_images, &ep.support_labels).unwrap();
    for (adapted, init) in traj.params[2].iter().zip(&mp.theta.tensors) {
        assert!(adapted.data().iter().zip(&init.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn two_step_trajectory_matches_manual_unroll() {
    let mc = MamlConfig { bnwb: false, bnrs: false, ..config(false) };
    let ep = tiny_episode(11);
    let mut mp = meta_params(&mc, 10);
    let mut rng = RngStream::new(12);
    for a in &mut mp.alpha.data {
        *a = rng.random_range(0.05..0.5);
    }
    let traj = inner_adapt(&mp, &mc, &ep.support_images, &ep.support_labels).unwrap();

    let bc = tiny_config();
    let x = image_batch(&bc, &ep.support_images).unwrap();
    let mut theta = mp.theta.tensors.clone();
    for s in 0..2 {
        let (_, g) = gradient(&theta, |ps| {
            Ok(cross_entropy(&forward(&bc, ps, &x, BnMode::Batch(None), None)?, &ep.support_labels))
        })
        .unwrap();
        for (l, (p, gl)) in theta.iter_mut().zip(&g).enumerate() {
            let rate = mp.alpha.data[l * 2 + s];
            for (v, d) in p.data.iter_mut().zip(&gl.data) {
                *v -= rate * d;
            }
        }
        for (a, m) in traj.params[s + 1].iter().zip(&theta) {
            let diff = a.data().iter().zip(&m.data).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-10, "step {}: max deviation {diff:e}", s + 1);
        }
    }
}

#[test]
fn quadratic_two_steps_with_per_step_rates() {
    let theta = Tensor::variable(vec![2], vec![0.0, 4.0]);
    let rates = [0.1, 0.25];
    let traj = unroll(&[theta], 2, true, &[], |_, s| Tensor::scalar(rates[s - 1]), |_, ps| {
        Ok(ps[0].add_scalar(-1.0).square().sum().scale(0.5))
    })
    .unwrap();
    let manual = |x0: f64| {
        let x1 = x0 - rates[0] * (x0 - 1.0);
        x1 - rates[1] * (x1 - 1.0)
    };
    for (i, x0) in [0.0, 4.0].into_iter().enumerate() {
        assert!((traj.params[2][0].data()[i] - manual(x0)).abs() <= 1e-12);
    }
}

#[test]
fn per_step_running_statistics_are_separate() {
    let ep = tiny_episode(13);
    let on = config(true);
    let mut mp = meta_params(&on, 14);
    let before = mp.theta.running.clone();
    meta_gradient(&mut mp, &on, std::slice::from_ref(&ep), 0).unwrap();
    assert_eq!(mp.theta.running, before);
    assert_ne!(mp.step_running[0], before);
    assert_ne!(mp.step_running[0], mp.step_running[1]);

    let off = MamlConfig { bnrs: false, ..config(true) };
    let mut mp = meta_params(&off, 14);
    assert!(mp.step_running.is_empty());
    meta_gradient(&mut mp, &off, std::slice::from_ref(&ep), 0).unwrap();
    assert_ne!(mp.theta.running, before);
}

#[test]
fn frozen_alpha_gets_no_gradient() {
    let ep = tiny_episode(15);
    let mc = MamlConfig { learn_alpha: false, ..config(true) };
    let mut mp = meta_params(&mc, 16);
    let (_, _, grads) = meta_gradient(&mut mp, &mc, std::slice::from_ref(&ep), 0).unwrap();
    assert!(grads[tiny_config().param_shapes().len()].data.iter().all(|&g| g == 0.0));
}
