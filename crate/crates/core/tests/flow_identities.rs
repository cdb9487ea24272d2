//! Sampler identities with an oracle velocity field and seed determinism.

use e2p_core::flow::{euler_sample, interpolate, multires_noise, velocity_target, Conditioning, NoiseSchedule};
use e2p_core::nn::train::initial_noise;
use e2p_core::{DenseMap, FlowError, SeededRng, Task};

fn target(seed: u64) -> DenseMap {
    let mut rng = SeededRng::new(seed);
    DenseMap::from_fn(8, 8, 3, Task::Latent, |_, _, _| rng.uniform_range(-1.0, 1.0)).unwrap()
}

#[test]
fn constant_velocity_oracle_reaches_target() {
    let z1 = target(1);
    let z0 = initial_noise(7, z1.shape(), &NoiseSchedule::default(), 0.0).unwrap();
    let v = velocity_target(&z0, &z1).unwrap();
    let oracle = |_: &DenseMap, _: &Conditioning, _: f64| -> Result<DenseMap, FlowError> { Ok(v.clone()) };
    let one = euler_sample(&oracle, &z0, &Conditioning::default(), 1).unwrap();
    assert_eq!(one.data(), z0.zip_map(&v, |a, b| a + b).unwrap().data());
    for (a, b) in one.data().iter().zip(z1.data()) {
        assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
    }
    let many = euler_sample(&oracle, &z0, &Conditioning::default(), 25).unwrap();
    for (a, b) in many.data().iter().zip(z1.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

/// The exact path velocity `(z1 - z_t) / (1 - t)` also integrates to z1.
#[test]
fn state_dependent_oracle_is_exact_on_the_path() {
    let z1 = target(2);
    let z0 = initial_noise(3, z1.shape(), &NoiseSchedule::default(), 0.0).unwrap();
    let oracle = |z: &DenseMap, _: &Conditioning, t: f64| -> Result<DenseMap, FlowError> {
        Ok(z.zip_map(&z1, |a, b| (b - a) / (1.0 - t))?)
    };
    for steps in [1, 2, 4, 10, 25] {
        let out = euler_sample(&oracle, &z0, &Conditioning::default(), steps).unwrap();
        for (a, b) in out.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-9, "steps {steps}");
        }
    }
    let mid = interpolate(&z0, &z1, 0.5).unwrap();
    assert!(mid.data().iter().zip(z0.data().iter().zip(z1.data())).all(|(m, (a, b))| (m - 0.5 * (a + b)).abs() < 1e-15));
}

#[test]
fn fixed_seed_is_bit_identical() {
    let shape = [16, 12, 3];
    let s = NoiseSchedule::default();
    let a = initial_noise(99, shape, &s, 0.0).unwrap();
    let b = initial_noise(99, shape, &s, 0.0).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = initial_noise(100, shape, &s, 0.0).unwrap();
    assert_ne!(a.data(), c.data());
    let z1 = target(5);
    let drift = |z: &DenseMap, _: &Conditioning, t: f64| -> Result<DenseMap, FlowError> { Ok(z.map(|v| (v * 3.0 + t).sin())) };
    let z0 = multires_noise(&mut SeededRng::new(4), z1.shape(), &s, 0.0).unwrap();
    let x = euler_sample(&drift, &z0, &Conditioning::default(), 10).unwrap();
    let y = euler_sample(&drift, &z0, &Conditioning::default(), 10).unwrap();
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn pyramid_noise_has_unit_variance() {
    let s = NoiseSchedule::default();
    for t in [0.0, 0.5, 1.0] {
        let mut acc = (0.0, 0.0, 0usize);
        for seed in 0..40 {
            let z = multires_noise(&mut SeededRng::new(seed), [32, 32, 3], &s, t).unwrap();
            for v in z.data() {
                acc.0 += v;
                acc.1 += v * v;
                acc.2 += 1;
            }
        }
        let n = acc.2 as f64;
        let var = acc.1 / n - (acc.0 / n).powi(2);
        assert!((var - 1.0).abs() < 0.1, "t = {t}: variance {var}");
    }
}
