use fbc_core::datasets::{
    dsprites_sensitive, make_synthetic_unfair_tabular, sample_dsprites_factors, sample_dsprites_unfair,
    shape_conditional, split, SplitSpec, SyntheticParams, POSITIONS, QUADRANTS, SHAPES,
};
use fbc_core::evaluation::{
    auditor_accuracy, chance_level, default_auditors, demographic_disparity, homogeneity, train_probe, ProbeSpec,
};
use fbc_core::nn::{Graph, LayerSpec, Mode, Network, ParameterSet};
use fbc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn quadrant_shape_counts(n: usize, seed: u64) -> [[f64; SHAPES]; QUADRANTS] {
    let mut counts = [[0.0; SHAPES]; QUADRANTS];
    for f in sample_dsprites_factors(n, seed) {
        counts[dsprites_sensitive(f.orientation).unwrap()][f.shape] += 1.0;
    }
    counts
}

#[test]
fn dsprites_shape_depends_on_quadrant() {
    let counts = quadrant_shape_counts(100_000, 21);
    for (q, row) in counts.iter().enumerate() {
        let total: f64 = row.iter().sum();
        let expected = shape_conditional(q).unwrap();
        let tv = 0.5 * row.iter().zip(expected).map(|(c, e)| (c / total - e).abs()).sum::<f64>();
        assert!(tv < 0.01, "quadrant {q}: TV {tv}");
    }
    // Pearson χ² test of independence on the 4×3 table.
    let n: f64 = counts.iter().flatten().sum();
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..SHAPES).map(|k| counts.iter().map(|r| r[k]).sum()).collect();
    let mut stat = 0.0;
    for (q, row) in counts.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            let e = rows[q] * cols[k] / n;
            stat += (c - e) * (c - e) / e;
        }
    }
    let p = ChiSquared::new(((QUADRANTS - 1) * (SHAPES - 1)) as f64).unwrap().sf(stat);
    assert!(p < 0.01, "χ² = {stat}, p = {p}");
}

#[test]
fn dsprites_positions_are_uniform() {
    let factors = sample_dsprites_factors(64_000, 3);
    let mut counts = [0.0; POSITIONS];
    for f in &factors {
        counts[f.x] += 1.0;
    }
    let e = factors.len() as f64 / POSITIONS as f64;
    let stat: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    let p = ChiSquared::new((POSITIONS - 1) as f64).unwrap().sf(stat);
    assert!(p > 0.001, "χ² = {stat}, p = {p}");
}

#[test]
fn dsprites_batches_hold_binary_images() {
    let batch = sample_dsprites_unfair(50, 16, 1).unwrap();
    assert_eq!(batch.features.shape(), &[50, 1, 16, 16]);
    assert!(batch.features.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(batch.num_sensitive, QUADRANTS);
    assert_eq!(batch.num_labels, SHAPES);
}

#[test]
fn independent_sensitive_features_leave_auditors_at_chance() {
    let data = make_synthetic_unfair_tabular(10_000, 9, 4, 0.0, 5).unwrap().batch;
    let [_, train, eval] = split(&data, &SplitSpec { fractions: [0.2, 0.4, 0.4], seed: 1 }).unwrap();
    let a_s = auditor_accuracy(&train.features, &train.sensitive, &eval.features, &eval.sensitive, &default_auditors())
        .unwrap();
    let chance = chance_level(&eval.sensitive).unwrap();
    assert!((a_s - chance).abs() < 0.03, "A_s {a_s}, chance {chance}");
}

#[test]
fn full_correlation_is_linearly_decodable() {
    let data = SyntheticParams::new(3000, 9, 4, 1.0, 0.0, 6).unwrap().generate().unwrap().batch;
    // Softmax regression: one dense layer, no hidden units.
    let net = Network::new("linear", vec![LayerSpec::dense(9, 4)]).unwrap();
    let mut params = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    net.init(&mut params, &mut rng);
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..3000).partition(|i| i % 3 != 0);
    let train = data.select(&train_idx);
    for _ in 0..600 {
        let idx: Vec<usize> = (0..128).map(|_| rng.gen_range(0..train.len())).collect();
        let mut g = Graph::new();
        let x = g.input(train.features.select_rows(&idx));
        let logits = net.forward(&mut g, &params, x, Mode::Train).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| train.sensitive[i]).collect();
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        g.backward_into(loss, &mut params).unwrap();
        params.adam_step(5e-2).unwrap();
    }
    let test = data.select(&test_idx);
    let logits = net.forward_tensor(&params, &test.features).unwrap();
    let correct = (0..test.len())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best == test.sensitive[i]
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.95, "linear accuracy {acc}");
}

fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn probes_sit_at_chance_on_unrelated_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (tx, ex) = (gaussian_cloud(&mut rng, 2000, 4), gaussian_cloud(&mut rng, 2000, 4));
    let ty: Vec<usize> = (0..2000).map(|_| usize::from(rng.gen_bool(0.3))).collect();
    let ey: Vec<usize> = (0..2000).map(|_| usize::from(rng.gen_bool(0.3))).collect();
    let r = train_probe(&tx, &ty, &ex, &ey, &ProbeSpec::new(64, 2)).unwrap();
    let chance = chance_level(&ey).unwrap();
    assert!((r.accuracy - chance).abs() < 0.05, "{} vs {chance}", r.accuracy);
}

#[test]
fn probes_recover_a_deterministic_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (tx, ex) = (gaussian_cloud(&mut rng, 1500, 3), gaussian_cloud(&mut rng, 1000, 3));
    let label = |x: &Tensor, i: usize| usize::from(x.row(i)[1] > 0.2);
    let ty: Vec<usize> = (0..1500).map(|i| label(&tx, i)).collect();
    let ey: Vec<usize> = (0..1000).map(|i| label(&ex, i)).collect();
    let r = train_probe(&tx, &ty, &ex, &ey, &ProbeSpec::new(128, 2)).unwrap();
    assert!(r.accuracy > 0.95, "{}", r.accuracy);
}

#[test]
fn constant_representation_predicts_the_majority() {
    let tx = Tensor::full(&[400, 2], 0.5);
    let ty: Vec<usize> = (0..400).map(|i| usize::from(i % 4 == 0)).collect();
    let ey: Vec<usize> = (0..200).map(|i| usize::from(i % 5 == 0)).collect();
    let r = train_probe(&tx, &ty, &Tensor::full(&[200, 2], 0.5), &ey, &ProbeSpec::new(64, 2)).unwrap();
    assert_eq!(r.accuracy, chance_level(&ey).unwrap());
}

#[test]
fn auditors_read_a_one_hot_sensitive_code_and_take_the_best() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s_train: Vec<usize> = (0..800).map(|_| rng.gen_range(0..3)).collect();
    let s_eval: Vec<usize> = (0..400).map(|_| rng.gen_range(0..3)).collect();
    let tx = fbc_core::datasets::one_hot(&s_train, 3);
    let ex = fbc_core::datasets::one_hot(&s_eval, 3);
    let specs = default_auditors();
    let best = auditor_accuracy(&tx, &s_train, &ex, &s_eval, &specs).unwrap();
    assert!(best > 0.95);
    for spec in &specs {
        let single = train_probe(&tx, &s_train, &ex, &s_eval, spec).unwrap().accuracy;
        assert!(best >= single);
    }
}

#[test]
fn predictions_independent_of_groups_have_vanishing_disparity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    let s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let t: Vec<usize> = (0..n).map(|_| usize::from(rng.gen_bool(0.4))).collect();
    let d = demographic_disparity(&t, &s, 3).unwrap();
    assert!(d < 0.03, "Δ = {d}");
}

#[test]
fn coincident_groups_have_low_homogeneity() {
    // Group A sits exactly on B points; the cloud is otherwise spread out.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut rows = Vec::new();
    for _ in 0..30 {
        rows.extend([rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
    }
    let b: Vec<usize> = (0..30).collect();
    for i in 0..10 {
        rows.extend([rows[2 * i], rows[2 * i + 1]]);
    }
    let a: Vec<usize> = (30..40).collect();
    let emb = Tensor::matrix(40, 2, rows).unwrap();
    let h = homogeneity(&emb, &a, &b, 1).unwrap();
    assert!(h < 1e-12, "{h}");
    assert!(homogeneity(&emb, &a, &b, 5).unwrap() > 0.0);
}
