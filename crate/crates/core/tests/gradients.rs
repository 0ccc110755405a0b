use fbc_core::nn::gradcheck::layer_suite;

#[test]
fn every_layer_and_loss_matches_central_differences() {
    for seed in [3, 17] {
        for (name, err) in layer_suite(seed).unwrap() {
            assert!(err < 1e-4, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

#[test]
fn suite_errors_are_not_vacuous() {
    let suite = layer_suite(5).unwrap();
    assert!(suite.len() >= 20);
    assert!(suite.iter().any(|(_, e)| *e > 0.0));
}
