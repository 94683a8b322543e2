use squisher_core::data::Dataset;
use squisher_core::fisher::{
    empirical_fisher, joint_empirical_fisher, minibatch_joint_expectation, oracle_fisher, standard_fisher_mc,
    OracleMode, Scaling,
};
use squisher_core::nn::{self, Activation, Head, Label, LabelSource, MlpSpec};
use squisher_core::params::ParamVector;
use squisher_core::rng;
use squisher_core::tensor::Tensor;
use squisher_core::train::{train, TrainConfig};

/// 2-class logistic model on 2 features: 6 parameters.
fn logistic() -> (MlpSpec, ParamVector, Dataset) {
    let spec = MlpSpec::new(vec![2, 2], Activation::Tanh, Head::SoftmaxXent).unwrap();
    let params = spec.zeros().with_values(vec![0.8, -0.4, -0.3, 0.6, 0.1, -0.2]).unwrap();
    let rows = vec![vec![1.0, 0.5], vec![-0.7, 1.2], vec![0.3, -1.1]];
    let labels = vec![Label::Class(0), Label::Class(1), Label::Class(1)];
    (spec, params, Dataset::new(Tensor::from_rows(&rows).unwrap(), labels, None).unwrap())
}

fn grad(spec: &MlpSpec, p: &ParamVector, x: &[f64], y: usize) -> Vec<f64> {
    let x = Tensor::vector(x.to_vec()).unwrap();
    nn::loss_and_grad(spec, p, &x, &Label::Class(y)).unwrap().1.into_values()
}

#[test]
fn empirical_fisher_is_the_diagonal_of_the_outer_product_sum() {
    let (spec, p, data) = logistic();
    let n = p.len();
    let mut dense = vec![vec![0.0; n]; n];
    for i in 0..data.len() {
        let g = grad(&spec, &p, data.inputs().row(i), data.labels()[i].class().unwrap());
        for a in 0..n {
            for b in 0..n {
                dense[a][b] += g[a] * g[b];
            }
        }
    }
    let f = empirical_fisher(&spec, &p, &data, Scaling::SumOverN).unwrap();
    for a in 0..n {
        assert!((f.values()[a] - dense[a][a]).abs() <= 1e-15);
    }
}

/// Per-coordinate variance of a single-draw standard Fisher sample, from the
/// model's label distribution.
fn single_draw_variance(spec: &MlpSpec, p: &ParamVector, data: &Dataset) -> Vec<f64> {
    let mut var = vec![0.0; p.len()];
    for i in 0..data.len() {
        let x = data.inputs().row(i);
        let probs = nn::class_probabilities(spec, p, x, None).unwrap();
        let sq: Vec<Vec<f64>> = (0..probs.len()).map(|k| grad(spec, p, x, k).iter().map(|g| g * g).collect()).collect();
        for j in 0..p.len() {
            let mean: f64 = (0..probs.len()).map(|k| probs[k] * sq[k][j]).sum();
            let second: f64 = (0..probs.len()).map(|k| probs[k] * sq[k][j] * sq[k][j]).sum();
            var[j] += second - mean * mean;
        }
    }
    var
}

#[test]
fn monte_carlo_standard_fisher_within_five_standard_errors() {
    let (spec, p, data) = logistic();
    let oracle = oracle_fisher(&spec, &p, &data, OracleMode::Standard).unwrap();
    let var = single_draw_variance(&spec, &p, &data);

    let s = 100_000;
    let mc = standard_fisher_mc(&spec, &p, &data, s, &mut rng::stream(1, &[]), Scaling::SumOverN).unwrap();
    for j in 0..p.len() {
        let se = (var[j] / s as f64).sqrt();
        assert!((mc.values()[j] - oracle.values()[j]).abs() <= 5.0 * se, "coordinate {j}");
    }

    let reps = 100_000;
    let mut rng = rng::stream(2, &[]);
    let mut avg = vec![0.0; p.len()];
    for _ in 0..reps {
        let f = standard_fisher_mc(&spec, &p, &data, 1, &mut rng, Scaling::SumOverN).unwrap();
        for (a, v) in avg.iter_mut().zip(f.values()) {
            *a += v / reps as f64;
        }
    }
    for j in 0..p.len() {
        let se = (var[j] / reps as f64).sqrt();
        assert!((avg[j] - oracle.values()[j]).abs() <= 5.0 * se, "coordinate {j}");
    }
}

#[test]
fn monte_carlo_error_shrinks_as_inverse_root_samples() {
    let (spec, p, data) = logistic();
    let oracle = oracle_fisher(&spec, &p, &data, OracleMode::Standard).unwrap();
    let rms_error = |s: usize, seed: u64| {
        let mut rng = rng::stream(seed, &[]);
        let reps = 40;
        let mut total = 0.0;
        for _ in 0..reps {
            let f = standard_fisher_mc(&spec, &p, &data, s, &mut rng, Scaling::SumOverN).unwrap();
            total += f.values().iter().zip(oracle.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        (total / reps as f64).sqrt()
    };
    let ratio = rms_error(100, 3) / rms_error(10_000, 4);
    assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn full_batch_enumeration_is_the_joint_oracle() {
    let (spec, p, data) = logistic();
    let oracle = oracle_fisher(&spec, &p, &data, OracleMode::Joint).unwrap();
    let full = minibatch_joint_expectation(&spec, &p, &data, data.len(), LabelSource::Sampled).unwrap();
    for (a, b) in full.values().iter().zip(oracle.values()) {
        assert!((a - b).abs() <= 1e-15 * b.max(1.0));
    }
    assert!(minibatch_joint_expectation(&spec, &p, &data, 4, LabelSource::Sampled).is_err());
}

#[test]
fn standard_and_joint_oracles_agree_on_a_logistic_model() {
    let (spec, p, data) = logistic();
    let s = oracle_fisher(&spec, &p, &data, OracleMode::Standard).unwrap();
    let j = oracle_fisher(&spec, &p, &data, OracleMode::Joint).unwrap();
    for (a, b) in s.values().iter().zip(j.values()) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn joint_empirical_vanishes_at_a_stationary_point() {
    // Full-batch gradient descent on a linear regression converges to the
    // least-squares solution, where the summed gradient is zero.
    let spec = MlpSpec::new(vec![2, 1], Activation::Tanh, Head::Mse).unwrap();
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]];
    let labels = [0.5, -1.0, 0.3, 2.0].iter().map(|&y| Label::Real(vec![y])).collect();
    let data = Dataset::new(Tensor::from_rows(&rows).unwrap(), labels, None).unwrap();
    let cfg = TrainConfig {
        optimizer: squisher_core::optim::OptimizerKind::Sgd,
        hyper: squisher_core::optim::Hyperparams { lr: 0.2, ..Default::default() },
        batch_size: 4,
        steps: 3000,
    };
    let out = train(&spec, spec.zeros(), &data, &cfg, 0, 0, None).unwrap();
    let joint = joint_empirical_fisher(&spec, &out.params, &data, Scaling::SumOverN).unwrap();
    let empirical = empirical_fisher(&spec, &out.params, &data, Scaling::SumOverN).unwrap();
    assert!(joint.values().iter().all(|v| *v < 1e-24), "{:?}", joint.values());
    assert!(empirical.values().iter().all(|v| *v > 1e-3));
}
