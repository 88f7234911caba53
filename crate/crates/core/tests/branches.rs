use bevtrack::branches::*;
use bevtrack::oracle;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jittered(config: BranchConfig, seed: u64) -> BranchParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = BranchParams::init(config, &mut rng).unwrap();
    p.for_each_tensor_mut(|_, t| {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    });
    p
}

fn configs() -> Vec<(BranchConfig, ToyConfig)> {
    vec![
        (
            BranchConfig { dim: 16, heads: 2, blocks: 1, ffn_dim: 32, max_lag: 3, dropout: 0.0 },
            ToyConfig { pedestrians: 3, dim: 16, max_lag: 3, windows: 1, ..ToyConfig::default() },
        ),
        (
            BranchConfig { dim: 8, heads: 1, blocks: 2, ffn_dim: 16, max_lag: 2, dropout: 0.0 },
            ToyConfig { pedestrians: 4, dim: 8, max_lag: 2, windows: 1, ..ToyConfig::default() },
        ),
        (
            BranchConfig { dim: 12, heads: 3, blocks: 2, ffn_dim: 8, max_lag: 4, dropout: 0.0 },
            ToyConfig { pedestrians: 2, dim: 12, max_lag: 4, windows: 1, ..ToyConfig::default() },
        ),
    ]
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, (bc, tc)) in configs().into_iter().enumerate() {
        let params = jittered(bc, 100 + i as u64);
        let window = &toy_windows(&tc, 200 + i as u64).unwrap()[0];
        let report = oracle::gradient_check(&params, window, 20, 1e-5, &mut rng).unwrap();
        assert_eq!(report.len(), params.tensor_names().len());
        for r in report {
            assert!(r.max_rel_error < 1e-4, "config {i} {}: {}", r.tensor, r.max_rel_error);
        }
    }
}

#[test]
fn forward_matches_naive_loops() {
    let bc = BranchConfig { dim: 8, heads: 2, blocks: 2, ffn_dim: 12, max_lag: 2, dropout: 0.0 };
    let params = jittered(bc, 5);
    let tc = ToyConfig { pedestrians: 3, dim: 8, max_lag: 2, windows: 1, ..ToyConfig::default() };
    let tokens = &toy_windows(&tc, 6).unwrap()[0].tokens;
    let fast = motion_branch_forward(&params, tokens).unwrap();
    let slow = oracle::motion_forward(&params, tokens);
    for (a, b) in fast.iter().zip(&slow) {
        match (a, b) {
            (Some(a), Some(b)) => assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12),
            (None, None) => {}
            _ => panic!("lag mask differs"),
        }
    }
    let fast = appearance_branch_forward(&params, tokens).unwrap();
    let slow = oracle::appearance_forward(&params, tokens);
    for r in 0..fast.nrows() {
        for c in 0..fast.ncols() {
            assert!((fast[(r, c)] - slow[r][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_head_predicts_no_motion() {
    let mut params = jittered(BranchConfig { dim: 8, heads: 2, max_lag: 2, ..BranchConfig::default() }, 1);
    params.motion_head_w.fill(0.0);
    params.motion_head_b.fill(0.0);
    let tc = ToyConfig { pedestrians: 2, dim: 8, max_lag: 2, windows: 1, ..ToyConfig::default() };
    let tokens = &toy_windows(&tc, 1).unwrap()[0].tokens;
    for m in motion_branch_forward(&params, tokens).unwrap().into_iter().flatten() {
        assert_eq!(m, [0.0, 0.0]);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let config = BranchConfig { dim: 4, heads: 1, blocks: 1, ffn_dim: 4, max_lag: 0, dropout: 0.0 };
    let mut params = BranchParams::zeros(config);
    let b = &mut params.appearance_blocks[0];
    b.ln1_gamma.fill(1.0);
    b.wv = DMatrix::identity(4, 4);
    b.wo = DMatrix::identity(4, 4);
    let x = DMatrix::from_row_slice(1, 4, &[0.5, -1.0, 2.0, 0.0]);
    let tokens = TokenSet::new(x.clone(), vec![Some(0)], vec![0], 0).unwrap();
    let out = appearance_branch_forward(&params, &tokens).unwrap();
    let embedded = tokens.embedded();
    let mean = embedded.mean();
    let var = embedded.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    for c in 0..4 {
        let normalized = (embedded[(0, c)] - mean) / (var + 1e-5).sqrt();
        assert!((out[(0, c)] - embedded[(0, c)] - normalized).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let params = jittered(BranchConfig { dim: 16, heads: 4, max_lag: 3, ..BranchConfig::default() }, 3);
    let tc = ToyConfig { dim: 16, ..ToyConfig::default() };
    let tokens = &toy_windows(&tc, 3).unwrap()[0].tokens;
    let (motion, appearance) = attention_weights(&params, tokens).unwrap();
    for head in motion.heads.iter().chain(&appearance.heads) {
        for row in head.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    let params = jittered(BranchConfig { dim: 16, heads: 4, max_lag: 3, ..BranchConfig::default() }, 4);
    let tc = ToyConfig { dim: 16, ..ToyConfig::default() };
    let tokens = toy_windows(&tc, 4).unwrap().remove(0).tokens;
    let t = tokens.len();
    let mut perm: Vec<usize> = (0..t).collect();
    perm.reverse();
    perm.swap(0, 3);
    let features = DMatrix::from_fn(t, tokens.dim(), |r, c| tokens.features[(perm[r], c)]);
    let permuted = TokenSet::new(
        features,
        perm.iter().map(|&r| tokens.pedestrians[r]).collect(),
        perm.iter().map(|&r| tokens.lags[r]).collect(),
        tokens.max_lag,
    )
    .unwrap();
    let a = appearance_branch_forward(&params, &tokens).unwrap();
    let b = appearance_branch_forward(&params, &permuted).unwrap();
    let ma = motion_branch_forward(&params, &tokens).unwrap();
    let mb = motion_branch_forward(&params, &permuted).unwrap();
    for r in 0..t {
        for c in 0..a.ncols() {
            assert!((b[(r, c)] - a[(perm[r], c)]).abs() < 1e-12);
        }
        match (mb[r], ma[perm[r]]) {
            (Some(x), Some(y)) => assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12),
            (None, None) => {}
            _ => panic!("lag mask differs"),
        }
    }
}

#[test]
fn tac_loss_is_nonnegative_on_random_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(1..5);
        let k = rng.random_range(1..4);
        let e = 6;
        let t = n * (k + 1);
        let f = DMatrix::from_fn(t, e, |_, _| rng.random_range(-2.0..2.0));
        let ids: Vec<_> = (0..t).map(|r| Some(r / (k + 1))).collect();
        let lags: Vec<_> = (0..t).map(|r| r % (k + 1)).collect();
        assert!(loss_tac(&f, &lags, &ids).unwrap() >= 0.0);
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let params = jittered(BranchConfig { dim: 16, heads: 2, max_lag: 3, ..BranchConfig::default() }, 7);
    let windows = toy_windows(&ToyConfig::default(), 7).unwrap();
    let cfg = TrainConfig { steps: 5, learning_rate: 0.0, ..TrainConfig::default() };
    let out = train(&params, &windows, &cfg).unwrap();
    assert_eq!(out.params, params);
    assert_eq!(out.history.len(), 5);
}

#[test]
fn training_is_deterministic() {
    let params = jittered(BranchConfig { dim: 16, heads: 2, max_lag: 3, ..BranchConfig::default() }, 8);
    let windows = toy_windows(&ToyConfig::default(), 8).unwrap();
    let cfg = TrainConfig { steps: 10, seed: 3, ..TrainConfig::default() };
    let a = train(&params, &windows, &cfg).unwrap();
    let b = train(&params, &windows, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn dropout_training_is_deterministic_and_moves_params() {
    let config = BranchConfig { dim: 16, heads: 2, max_lag: 3, dropout: 0.1, ..BranchConfig::default() };
    let params = jittered(config, 10);
    let windows = toy_windows(&ToyConfig::default(), 10).unwrap();
    let cfg = TrainConfig { steps: 5, seed: 1, ..TrainConfig::default() };
    let a = train(&params, &windows, &cfg).unwrap();
    let b = train(&params, &windows, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, params);
}

fn toy_progress(seed: u64) -> (f64, f64, f64, f64) {
    let config = BranchConfig { dim: 16, heads: 2, blocks: 1, ffn_dim: 32, max_lag: 3, dropout: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = BranchParams::init(config, &mut rng).unwrap();
    let windows = toy_windows(&ToyConfig::default(), seed).unwrap();
    let initial: Vec<_> = windows.iter().map(|w| forward_losses(&params, w).unwrap().report).collect();
    let cfg = TrainConfig { steps: 200, seed, ..TrainConfig::default() };
    let out = train(&params, &windows, &cfg).unwrap();
    let fin: Vec<_> = windows.iter().map(|w| forward_losses(&out.params, w).unwrap().report).collect();
    let mean = |r: &[LossReport], f: fn(&LossReport) -> f64| r.iter().map(f).sum::<f64>() / r.len() as f64;
    (
        mean(&initial, |r| r.l_tmc),
        mean(&fin, |r| r.l_tmc),
        mean(&initial, |r| r.l_tac),
        mean(&fin, |r| r.l_tac),
    )
}

#[test]
fn toy_training_halves_both_losses() {
    for seed in 0..5 {
        let (t0, t1, a0, a1) = toy_progress(seed);
        eprintln!("seed {seed}: tmc {t0:.4} -> {t1:.4}, tac {a0:.4} -> {a1:.4}");
        assert!(t1 <= 0.5 * t0, "seed {seed}: tmc {t0} -> {t1}");
        assert!(a1 <= 0.5 * a0, "seed {seed}: tac {a0} -> {a1}");
    }
}
