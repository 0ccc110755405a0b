use fbc_core::entropy::{CodeGrid, EntropyModel, EntropyModelConfig, FilterMode};
use fbc_core::info::entropy;
use fbc_core::nn::ParameterSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fresh(bits: usize, mode: FilterMode, seed: u64) -> (EntropyModel, ParameterSet) {
    let config = EntropyModelConfig { mode, ..EntropyModelConfig::default() };
    let model = EntropyModel::new(config, bits, "entropy").unwrap();
    let mut params = ParameterSet::new();
    model.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
    (model, params)
}

fn bernoulli_codes(rng: &mut ChaCha8Rng, p: &[f64], n: usize) -> Vec<CodeGrid> {
    (0..n)
        .map(|_| {
            let bits: Vec<u8> = p.iter().map(|&p| u8::from(rng.gen_bool(p))).collect();
            CodeGrid::from_bits(&bits).unwrap()
        })
        .collect()
}

/// `E_P[-ln Q(Z)]` by enumerating every code of a product law `P`.
fn exact_cross_entropy(model: &EntropyModel, params: &ParameterSet, p: &[f64]) -> f64 {
    let m = p.len();
    let mut codes = Vec::new();
    let mut probs = Vec::new();
    for k in 0..1usize << m {
        let bits: Vec<u8> = (0..m).map(|i| ((k >> i) & 1) as u8).collect();
        probs.push(bits.iter().zip(p).map(|(&b, &p)| if b == 1 { p } else { 1.0 - p }).product::<f64>());
        codes.push(CodeGrid::from_bits(&bits).unwrap());
    }
    let q = model.predict_conditionals(params, &codes).unwrap();
    codes
        .iter()
        .zip(&q)
        .zip(&probs)
        .map(|((c, q), w)| {
            let nll: f64 = c.bits().iter().zip(q).map(|(&b, &q)| if b == 1 { -q.ln() } else { -(1.0 - q).ln() }).sum();
            w * nll
        })
        .sum()
}

#[test]
fn learns_biased_bits_to_their_entropy() {
    let (model, mut params) = fresh(9, FilterMode::Fixed, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = vec![0.9; 9];
    for _ in 0..200 {
        model.fit_step(&mut params, &bernoulli_codes(&mut rng, &p, 64), 2e-2).unwrap();
    }
    let eval = bernoulli_codes(&mut rng, &p, 4000);
    let per_bit = model.code_cross_entropy(&params, &eval).unwrap() / 9.0;
    let h = entropy(&[0.9, 0.1]).unwrap();
    assert!((h - 0.325083).abs() < 1e-6);
    assert!((per_bit - h).abs() < 0.05, "CE per bit {per_bit} vs H {h}");
}

#[test]
fn cross_entropy_upper_bounds_entropy_with_shrinking_gap() {
    let p = [0.85, 0.3, 0.6, 0.1];
    let h: f64 = p.iter().map(|&p| entropy(&[p, 1.0 - p]).unwrap()).sum();
    let (model, mut params) = fresh(4, FilterMode::Fixed, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gaps = Vec::new();
    for round in 0..4 {
        for _ in 0..if round == 0 { 20 } else { 120 } {
            model.fit_step(&mut params, &bernoulli_codes(&mut rng, &p, 64), 1e-2).unwrap();
        }
        let ce = exact_cross_entropy(&model, &params, &p);
        assert!(ce >= h - 1e-12, "CE {ce} below H {h}");
        gaps.push(ce - h);
    }
    // Translation-equivariant filters cannot tell padding from a zero bit, so
    // a position-dependent law keeps some gap; it must still close markedly.
    assert!(gaps.last().unwrap() < &(0.75 * gaps[0]), "gaps {gaps:?}");
}

#[test]
fn training_curve_trends_down() {
    for mode in [FilterMode::Fixed, FilterMode::MaskedLearnable] {
        let (model, mut params) = fresh(16, mode, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Stationary stream with real dependence: bit i copies bit i-1 w.p. 0.9.
        let stream = |rng: &mut ChaCha8Rng| -> Vec<CodeGrid> {
            (0..64)
                .map(|_| {
                    let mut bits = vec![u8::from(rng.gen_bool(0.5))];
                    for i in 1..16 {
                        let prev = bits[i - 1];
                        bits.push(if rng.gen_bool(0.9) { prev } else { 1 - prev });
                    }
                    CodeGrid::from_bits(&bits).unwrap()
                })
                .collect()
        };
        let ce: Vec<f64> = (0..300).map(|_| model.fit_step(&mut params, &stream(&mut rng), 1e-2).unwrap()).collect();
        let averages: Vec<f64> = ce.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        let early = averages[..3].iter().sum::<f64>() / 3.0;
        let late = averages[averages.len() - 3..].iter().sum::<f64>() / 3.0;
        // Fixed filters leave only batch-norm offsets and the 1x1 output to learn.
        let margin = if mode == FilterMode::Fixed { 0.05 } else { 0.5 };
        assert!(late < early - margin, "{mode:?}: {early} -> {late}");
        // Coarser 50-step blocks must not climb back beyond batch noise.
        let blocks: Vec<f64> = averages.chunks(5).map(|b| b.iter().sum::<f64>() / 5.0).collect();
        assert!(blocks.windows(2).all(|w| w[1] <= w[0] + 0.05), "{mode:?}: {blocks:?}");
    }
}

/// Offsets `(up, right)` a stack of one A and three B stages can see: each
/// stage moves up one row with a column step in `-1..=1`, or left one cell;
/// B stages may also stay put.
fn receptive_field(stages: usize) -> Vec<(usize, isize)> {
    let mut reach = std::collections::BTreeSet::new();
    let moves = [(1usize, -1isize), (1, 0), (1, 1), (0, -1)];
    let mut frontier: Vec<(usize, isize)> = moves.to_vec();
    reach.extend(frontier.iter().copied());
    for _ in 1..stages {
        let mut next = Vec::new();
        for &(r, c) in &frontier {
            for &(dr, dc) in &moves {
                next.push((r + dr, c + dc));
            }
        }
        reach.extend(next.iter().copied());
        frontier = next;
    }
    reach.into_iter().collect()
}

#[test]
fn trained_conditionals_see_exactly_their_receptive_field() {
    let (model, mut params) = fresh(25, FilterMode::MaskedLearnable, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = vec![0.5; 25];
    for _ in 0..30 {
        model.fit_step(&mut params, &bernoulli_codes(&mut rng, &p, 32), 1e-2).unwrap();
    }
    let field = receptive_field(4);
    // Every in-range predecessor except the classic up-right blind spot.
    assert!(field.contains(&(1, 1)) && field.contains(&(2, 2)) && !field.contains(&(1, 2)));
    let side = 5usize;
    let contexts: Vec<CodeGrid> = (0..8u64)
        .map(|t| {
            let mut r = ChaCha8Rng::seed_from_u64(100 + t);
            CodeGrid::from_bits(&(0..25).map(|_| r.gen_range(0..2u8)).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    let base_q = model.predict_conditionals(&params, &contexts).unwrap();
    for i in 1..25 {
        for j in 0..i {
            let up = i / side - j / side;
            let right = (j % side) as isize - (i % side) as isize;
            let visible = field.contains(&(up, right));
            let moved = contexts.iter().zip(&base_q).any(|(ctx, q)| {
                let mut f = ctx.clone();
                f.flip(j);
                model.predict_conditionals(&params, std::slice::from_ref(&f)).unwrap()[0][i] != q[i]
            });
            assert_eq!(moved, visible, "q_{i} vs bit {j} (offset up {up}, right {right})");
        }
    }
}
