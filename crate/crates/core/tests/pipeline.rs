use netgrow::exact_solver::{StateLattice, DEFAULT_LAYER_CAP};
use netgrow::growth_models::{fit, generate_corpus, FitOptions, ThreadModel, ThreadModelParams, ToyModel};
use netgrow::path_sampler::{estimate_cost_to_go, sample_paths, ExactOptimalPolicy};

#[test]
fn fit_recovers_parameters_from_a_large_corpus() {
    let truth = ThreadModelParams::new(1.0, 0.8, 0.5);
    let corpus = generate_corpus(&ThreadModel::new(truth).unwrap(), 5000, 50, 3).unwrap();
    let report = fit(&corpus, &ThreadModelParams::new(0.5, 0.5, 1.0), &FitOptions::default()).unwrap();
    let p = report.params;
    for (got, want) in [
        (p.popularity_alpha, 1.0),
        (p.novelty_tau, 0.8),
        (p.root_beta, 0.5),
    ] {
        assert!((got - want).abs() < 0.1 * want, "{got} vs {want}");
    }
}

#[test]
fn sampling_the_exact_optimal_policy_has_zero_variance_weights() {
    let model = ToyModel::with_horizon(5);
    let start = model.initial_state();
    let lattice = StateLattice::build(&model, &model, &start, 1, 5, DEFAULT_LAYER_CAP).unwrap();
    let lambda = 0.3;
    let dp = lattice.solve(lambda).unwrap();
    let batch = sample_paths(&ExactOptimalPolicy { dp: &dp }, &model, &start, 1, 5, 2000, lambda, 1).unwrap();
    let est = estimate_cost_to_go(&batch).unwrap();
    assert!((est.value - dp.initial_value()).abs() < 1e-9, "{} vs {}", est.value, dp.initial_value());
}
