use fbc_core::binarizer::{
    hard_binarize_scalar, logistic_form, soft_binarize_derivative, soft_binarize_scalar, straight_through,
};
use fbc_core::datasets::{LabeledBatch, SplitSpec};
use fbc_core::entropy::{make_mask, CodeGrid, EntropyModel, EntropyModelConfig, FilterMode, MaskKind, STAGES};
use fbc_core::evaluation::{
    chance_level, delta_fpr, demographic_disparity, pareto_front, rd_curve, rf_curve, SweepRecord,
};
use fbc_core::info::{empirical_code_entropy, entropy, verify_chain_identity, DiscreteJoint};
use fbc_core::nn::{conv_output_size, conv_transpose_output_size, Graph, ParameterSet};
use fbc_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_joint(arities: Vec<usize>, seed: u64) -> DiscreteJoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = arities.iter().product();
    // A few exact zeros keep the zero-probability branches exercised.
    let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen::<f64>() }).collect();
    let total: f64 = raw.iter().sum::<f64>().max(1e-300);
    let probs = if total > 1e-300 { raw.iter().map(|p| p / total).collect() } else { vec![1.0 / n as f64; n] };
    DiscreteJoint::new(arities, probs).unwrap()
}

fn entropy_model(mode: FilterMode, bits: usize, seed: u64) -> (EntropyModel, ParameterSet) {
    let config = EntropyModelConfig { mode, ..EntropyModelConfig::default() };
    let model = EntropyModel::new(config, bits, "entropy").unwrap();
    let mut params = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.init(&mut params, &mut rng);
    // The output layer starts at zero; scramble everything so q depends on context.
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        for w in params.value_mut(&name).unwrap().data_mut() {
            *w = rng.gen_range(-1.5..1.5);
        }
    }
    model.project(&mut params).unwrap();
    (model, params)
}

fn random_bits(rng: &mut ChaCha8Rng, m: usize) -> Vec<u8> {
    (0..m).map(|_| rng.gen_range(0..2u8)).collect()
}

fn record(rate: f64, distortion: f64, a_s: f64, a_y: f64) -> SweepRecord {
    SweepRecord { method: "fbc".into(), beta: 0.0, seed: 0, rate, distortion, a_s, a_y }
}

fn records_strategy() -> impl Strategy<Value = Vec<SweepRecord>> {
    prop::collection::vec((0.0..10.0f64, 0.0..1.0f64, 0.2..1.0f64, 0.3..1.0f64), 1..25)
        .prop_map(|v| v.into_iter().map(|(r, d, s, y)| record(r, d, s, y)).collect())
}

#[test]
fn mask_layouts() {
    for c in [1, 3, 5, 7] {
        let centre = c * c / 2;
        let a = make_mask(MaskKind::A, c).unwrap();
        let b = make_mask(MaskKind::B, c).unwrap();
        for i in 0..c * c {
            assert_eq!(a.mask[i], if i < centre { 1.0 } else { 0.0 }, "A, c={c}, i={i}");
            assert_eq!(b.mask[i], if i <= centre { 1.0 } else { 0.0 }, "B, c={c}, i={i}");
        }
    }
    assert!(make_mask(MaskKind::A, 4).is_err());
    assert!(make_mask(MaskKind::B, 0).is_err());
}

#[test]
fn conv_shape_tables() {
    // (n, k, s, p) -> out
    for (n, k, s, p, out) in [(64, 4, 2, 1, 32), (32, 4, 2, 1, 16), (8, 4, 2, 1, 4), (5, 3, 1, 1, 5), (7, 3, 2, 0, 3)] {
        assert_eq!(conv_output_size(n, k, s, p), Some(out), "conv {n} {k} {s} {p}");
    }
    for (n, k, s, p, out) in [(4, 4, 2, 1, 8), (16, 4, 2, 1, 32), (3, 3, 1, 1, 3), (3, 3, 2, 0, 7)] {
        assert_eq!(conv_transpose_output_size(n, k, s, p), Some(out), "convT {n} {k} {s} {p}");
    }
}

#[test]
fn masked_learnable_weights_stay_inside_masks_while_training() {
    let (model, mut params) = entropy_model(FilterMode::MaskedLearnable, 10, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let codes: Vec<CodeGrid> = (0..16).map(|_| CodeGrid::from_bits(&random_bits(&mut rng, 10)).unwrap()).collect();
        model.fit_step(&mut params, &codes, 1e-2).unwrap();
        for s in 0..STAGES {
            let w = model.stage_weight(&params, s).unwrap();
            let mask = model.stage_mask_tensor(s);
            for (w, m) in w.data().iter().zip(mask.data()) {
                if *m == 0.0 {
                    assert_eq!(*w, 0.0, "stage {s}");
                }
            }
        }
    }
}

#[test]
fn fixed_mode_has_no_stage_weights() {
    let (model, params) = entropy_model(FilterMode::Fixed, 9, 1);
    assert!((0..STAGES).all(|s| model.stage_weight(&params, s).is_none()));
}

#[test]
fn conditionals_depend_on_in_range_predecessors() {
    // Non-vacuity of the causality check: some flip must move some later q.
    let (model, params) = entropy_model(FilterMode::Fixed, 25, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = CodeGrid::from_bits(&random_bits(&mut rng, 25)).unwrap();
    let base = model.predict_conditionals(&params, std::slice::from_ref(&grid)).unwrap().remove(0);
    let mut moved = 0;
    for j in 0..24 {
        let mut f = grid.clone();
        f.flip(j);
        let q = model.predict_conditionals(&params, std::slice::from_ref(&f)).unwrap().remove(0);
        moved += usize::from(q[j + 1] != base[j + 1]);
    }
    assert!(moved > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causality_holds_in_both_modes(seed in any::<u64>(), learnable in any::<bool>(), m in 17usize..=25) {
        let mode = if learnable { FilterMode::MaskedLearnable } else { FilterMode::Fixed };
        let (model, params) = entropy_model(mode, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let grid = CodeGrid::from_bits(&random_bits(&mut rng, m)).unwrap();
        prop_assert_eq!(model.causality_violations(&params, &grid).unwrap(), 0);
    }

    #[test]
    fn cross_entropy_bounds_empirical_entropy(seed in any::<u64>(), m in 1usize..=9, n in 1usize..200) {
        let (model, params) = entropy_model(FilterMode::Fixed, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        // Skewed codes so the empirical law is far from uniform.
        let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..0.95)).collect();
        let codes: Vec<Vec<u8>> = (0..n).map(|_| p.iter().map(|&p| u8::from(rng.gen_bool(p))).collect()).collect();
        let grids: Vec<CodeGrid> = codes.iter().map(|c| CodeGrid::from_bits(c).unwrap()).collect();
        let h = empirical_code_entropy(&codes, m).unwrap();
        let ce = model.code_cross_entropy(&params, &grids).unwrap();
        prop_assert!(h <= ce + 1e-9, "H = {h}, CE = {ce}");
    }

    #[test]
    fn grid_layout_preserves_bit_order(bits in prop::collection::vec(0u8..2, 1..40)) {
        let grid = CodeGrid::from_bits(&bits).unwrap();
        let side = grid.side();
        prop_assert!(side * side >= bits.len() && (side - 1) * (side - 1) < bits.len());
        prop_assert_eq!(grid.bits(), &bits[..]);
        prop_assert!(grid.cells()[bits.len()..].iter().all(|&c| c == 0));
        prop_assert_eq!(grid.active_mask().iter().filter(|&&a| a).count(), bits.len());
    }

    #[test]
    fn soft_binarizer_identity_and_monotonicity(zbar in 0.0..1.0f64, dz in 1e-6..0.5f64, sigma in 0.01..30.0f64) {
        // Past |σ(2z̄ - 1)| ≈ 36 the logistic rounds to exactly 0 or 1 in f64.
        let v = soft_binarize_scalar(zbar, sigma);
        prop_assert!((v - logistic_form(zbar, sigma)).abs() <= 1e-12);
        prop_assert!(v > 0.0 && v < 1.0);
        if zbar + dz <= 1.0 {
            let w = soft_binarize_scalar(zbar + dz, sigma);
            prop_assert!(w >= v);
            if v < 0.999 {
                prop_assert!(w > v);
            }
        }
        let d = soft_binarize_derivative(zbar, sigma);
        prop_assert!(d > 0.0 && d <= sigma / 2.0 + 1e-15);
    }

    #[test]
    fn straight_through_values_are_bits(zbar in prop::collection::vec(0.0..1.0f64, 1..20), sigma in 0.1..20.0f64) {
        let mut g = Graph::new();
        let n = zbar.len();
        let x = g.variable(Tensor::new(vec![1, n], zbar.clone()).unwrap());
        let z = straight_through(&mut g, x, sigma).unwrap();
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        for (i, &v) in g.value(z).data().iter().enumerate() {
            prop_assert_eq!(v, hard_binarize_scalar(zbar[i]));
            let d = grads.get_or_zero(x).data()[i];
            prop_assert!(d > 0.0 && d <= sigma / 2.0 + 1e-15);
        }
    }

    #[test]
    fn information_is_nonnegative(ax in 1usize..4, as_ in 1usize..4, az in 1usize..4, seed in any::<u64>()) {
        let joint = random_joint(vec![ax, as_, az], seed);
        for vars in [&[0][..], &[1], &[2], &[0, 1], &[0, 1, 2]] {
            prop_assert!(joint.entropy_of(vars).unwrap() >= 0.0);
        }
        prop_assert!(joint.mutual_information(&[0], &[1]).unwrap() >= 0.0);
        prop_assert!(joint.mutual_information(&[2], &[0, 1]).unwrap() >= 0.0);
        prop_assert!(joint.conditional_mutual_information(&[2], &[1], &[0]).unwrap() >= 0.0);
        prop_assert!(entropy(joint.probs()).unwrap() >= 0.0);
    }

    #[test]
    fn chain_rule_of_mutual_information(ax in 1usize..5, as_ in 1usize..4, az in 1usize..4, seed in any::<u64>()) {
        let joint = random_joint(vec![ax, as_, az], seed);
        let lhs = joint.mutual_information(&[2], &[0, 1]).unwrap();
        let rhs = joint.mutual_information(&[2], &[0]).unwrap()
            + joint.conditional_mutual_information(&[2], &[1], &[0]).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn data_processing_and_chain_identity(ax in 2usize..7, as_ in 2usize..4, k in 1usize..5, table_seed in any::<u64>(), seed in any::<u64>()) {
        let xs = random_joint(vec![ax, as_], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(table_seed);
        let table: Vec<usize> = (0..ax).map(|_| rng.gen_range(0..k)).collect();
        let joint = xs.with_function(0, k, |x| table[x]).unwrap();
        prop_assert!(joint.is_function_of(2, 0).unwrap());
        let izs = joint.mutual_information(&[2], &[1]).unwrap();
        let ixs = joint.mutual_information(&[0], &[1]).unwrap();
        prop_assert!(izs <= ixs + 1e-12);
        prop_assert!(verify_chain_identity(&joint, 0, 1, 2).unwrap() < 1e-10);
    }

    #[test]
    fn disparities_ignore_group_relabeling(
        rows in prop::collection::vec((0usize..2, 0usize..2, 0usize..4), 8..60),
        perm_seed in any::<u64>(),
    ) {
        let pred: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let y: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let s: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let mut perm: Vec<usize> = (0..4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let s2: Vec<usize> = s.iter().map(|&v| perm[v]).collect();
        match (demographic_disparity(&pred, &s, 4), demographic_disparity(&pred, &s2, 4)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
        match (delta_fpr(&pred, &y, &s, 4), delta_fpr(&pred, &y, &s2, 4)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn pareto_front_ignores_record_order(records in records_strategy(), seed in any::<u64>()) {
        let mut shuffled = records.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let a = pareto_front(&records, 0.05, None).unwrap();
        let b = pareto_front(&shuffled, 0.05, None).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.edges.windows(2).all(|w| w[0] < w[1]));
        for (q, c) in a.quantiles.iter().zip(&a.counts) {
            prop_assert_eq!(q.is_some(), *c > 0);
        }
    }

    #[test]
    fn curves_are_monotone(records in records_strategy()) {
        let rd = rd_curve(&records);
        prop_assert!(rd.windows(2).all(|w| w[0].0 < w[1].0 && w[1].1 <= w[0].1));
        let rf = rf_curve(&records);
        prop_assert!(rf.windows(2).all(|w| w[0].0 < w[1].0 && w[1].1 >= w[0].1));
    }

    #[test]
    fn splits_partition_the_samples(n in 5usize..400, seed in any::<u64>()) {
        let spec = SplitSpec { fractions: [0.6, 0.2, 0.2], seed };
        let parts = spec.indices(n).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        prop_assert_eq!(parts[0].len(), (n as f64 * 0.6).round() as usize);
        prop_assert_eq!(spec.indices(n).unwrap(), parts);
    }

    #[test]
    fn chance_level_is_the_majority_share(labels in prop::collection::vec(0usize..5, 1..100)) {
        let c = chance_level(&labels).unwrap();
        let best = (0..5).map(|k| labels.iter().filter(|&&l| l == k).count()).max().unwrap();
        prop_assert!((c - best as f64 / labels.len() as f64).abs() < 1e-15);
        prop_assert!(c >= 0.2);
    }

    #[test]
    fn adam_first_step_is_bounded_by_the_learning_rate(
        values in prop::collection::vec(-3.0..3.0f64, 1..12),
        grads in prop::collection::vec(-1e3..1e3f64, 12),
        lr in 1e-5..1e-1f64,
    ) {
        let n = values.len();
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new(vec![n], values.clone()).unwrap());
        params.accumulate_grad("w", &Tensor::new(vec![n], grads[..n].to_vec()).unwrap()).unwrap();
        params.adam_step(lr).unwrap();
        let p = params.parameter("w").unwrap();
        prop_assert_eq!(p.step(), 1);
        prop_assert_eq!(p.grad.shape(), p.value.shape());
        for (after, before) in p.value.data().iter().zip(&values) {
            prop_assert!((after - before).abs() <= lr * (1.0 + 1e-12));
        }
        prop_assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_refuses_non_finite_gradients(values in prop::collection::vec(-3.0..3.0f64, 2..8), at in 0usize..2) {
        let n = values.len();
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new(vec![n], values.clone()).unwrap());
        let mut g = Tensor::full(&[n], 0.5);
        g.data_mut()[at] = f64::NAN;
        params.accumulate_grad("w", &g).unwrap();
        prop_assert!(params.adam_step(1e-2).is_err());
        prop_assert_eq!(params.value("w").unwrap().data(), &values[..]);
        prop_assert_eq!(params.parameter("w").unwrap().step(), 0);
    }

    #[test]
    fn batch_selection_keeps_rows_aligned(n in 2usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 3).map(|_| rng.gen()).collect();
        let s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let batch = LabeledBatch::new(Tensor::new(vec![n, 3], data).unwrap(), s.clone(), 3, Some(y.clone()), 2).unwrap();
        let idx: Vec<usize> = (0..n).rev().step_by(2).collect();
        let sub = batch.select(&idx);
        for (r, &i) in idx.iter().enumerate() {
            prop_assert_eq!(sub.features.row(r), batch.features.row(i));
            prop_assert_eq!(sub.sensitive[r], s[i]);
            prop_assert_eq!(sub.labels.as_ref().unwrap()[r], y[i]);
        }
    }
}
