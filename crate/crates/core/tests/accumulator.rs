use proptest::prelude::*;
use squisher_core::data::{generate, GeneratorSpec};
use squisher_core::fisher::squisher;
use squisher_core::nn::{Activation, Head, MlpSpec};
use squisher_core::optim::{
    ema_time_constant, load_checkpoint, save_checkpoint, Checkpoint, Hyperparams, OptimizerKind, OptimizerState,
};
use squisher_core::params::ParamVector;
use squisher_core::train::{train_checkpoint, TrainConfig};

fn adam(beta2: f64, lr: f64, len: usize) -> OptimizerState {
    let hyper = Hyperparams { lr, beta2, ..Hyperparams::default() };
    OptimizerState::new(OptimizerKind::Adam, &ParamVector::ungrouped(vec![0.0; len]), hyper).unwrap()
}

proptest! {
    #[test]
    fn ema_matches_geometric_sum_and_stays_bounded(
        grads in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..60),
        beta2 in 0.0f64..0.9999,
    ) {
        let mut state = adam(beta2, 0.01, 3);
        let mut params = ParamVector::ungrouped(vec![0.5, -0.5, 0.0]);
        for g in &grads {
            state.step_in_place(&mut params, &ParamVector::ungrouped(g.clone())).unwrap();
        }
        let t = grads.len();
        for i in 0..3 {
            let want: f64 = grads
                .iter()
                .enumerate()
                .map(|(s, g)| (1.0 - beta2) * beta2.powi((t - 1 - s) as i32) * g[i] * g[i])
                .sum();
            let v = state.v.values()[i];
            prop_assert!((v - want).abs() <= 1e-12 * want.max(1.0));
            let max_sq = grads.iter().map(|g| g[i] * g[i]).fold(0.0, f64::max);
            prop_assert!(v >= 0.0 && v <= max_sq * (1.0 + 1e-12));
            let corrected = state.accumulator(true).unwrap().values()[i];
            prop_assert!(corrected >= 0.0 && corrected <= max_sq * (1.0 + 1e-12));
        }
    }
}

#[test]
fn impulse_decays_to_one_over_e_at_the_time_constant() {
    for beta2 in [0.9, 0.99, 0.999] {
        let mut state = adam(beta2, 0.0, 1);
        let mut p = ParamVector::ungrouped(vec![0.0]);
        state.step_in_place(&mut p, &ParamVector::ungrouped(vec![1.0])).unwrap();
        let start = state.v.values()[0];
        let mut steps = 0u64;
        while state.v.values()[0] > start / std::f64::consts::E {
            state.step_in_place(&mut p, &ParamVector::ungrouped(vec![0.0])).unwrap();
            steps += 1;
        }
        let tau = -1.0 / beta2.ln();
        assert_eq!(ema_time_constant(beta2), tau);
        assert!((steps as f64 - tau).abs() <= 0.01 * tau + 1.0, "beta2 {beta2}: {steps} vs {tau}");
    }
    assert!((ema_time_constant(0.999) - 999.5).abs() < 0.01);
}

#[test]
fn bias_corrected_constant_gradient_after_100_steps() {
    let mut state = adam(0.999, 0.0, 2);
    let mut p = ParamVector::ungrouped(vec![1.0, 2.0]);
    let g = ParamVector::ungrouped(vec![0.3, -1.7]);
    for _ in 0..100 {
        state.step_in_place(&mut p, &g).unwrap();
    }
    let v = state.accumulator(true).unwrap();
    for (v, g) in v.values().iter().zip(g.values()) {
        assert!((v - g * g).abs() <= 1e-12);
    }
    assert_eq!(p.values(), &[1.0, 2.0]);
}

fn blobs_checkpoint(beta2: f64, steps: u64) -> Checkpoint {
    let data = generate(&GeneratorSpec::blobs(4, 3, 50, 1.0, 2)).unwrap().tasks.remove(0).train;
    let spec = MlpSpec::new(vec![4, 10, 3], Activation::Relu, Head::SoftmaxXent).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        hyper: Hyperparams { lr: 0.01, beta2, ..Hyperparams::default() },
        batch_size: 16,
        steps,
    };
    train_checkpoint(&spec, &data, &cfg, 7, "blobs").unwrap()
}

#[test]
fn reloaded_checkpoint_gives_bit_identical_squisher() {
    let ckpt = blobs_checkpoint(0.999, 500);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for bias in [true, false] {
        let a = squisher(&ckpt, bias).unwrap();
        let b = squisher(&back, bias).unwrap();
        let bits = |f: &[f64]| f.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.values()), bits(b.values()));
        assert_eq!(a, b);
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(squisher_core::Error::Format { .. })));
}

#[test]
fn lower_beta2_gives_a_different_accumulator() {
    let a = squisher(&blobs_checkpoint(0.95, 200), true).unwrap();
    let b = squisher(&blobs_checkpoint(0.999, 200), true).unwrap();
    assert_ne!(a.values(), b.values());
    assert!(a.values().iter().chain(b.values()).all(|v| *v >= 0.0));
}
