//! Training losses and the hand-derived backward pass.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use super::block::{block_backward, block_forward, BlockCache};
use super::{check_tokens, motion_head, BranchParams, TokenSet};
use crate::error::{Result, TrackError};
use crate::geometry::OccupancyMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_det: f64,
    pub l_tmc: f64,
    pub l_tac: f64,
    pub l_all: f64,
}

/// One training window: tokens for lags `0..=K`, ground-truth offsets
/// `p̄ᵗ − p̄ᵗ⁻ᵏ` for tokens with `k ≥ 1` whose pedestrian is present at lag 0,
/// and the (parameter-independent) detection loss of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub tokens: TokenSet,
    pub gt_offsets: Vec<Option<[f64; 2]>>,
    pub l_det: f64,
}

impl TrainingWindow {
    pub fn new(tokens: TokenSet, gt_offsets: Vec<Option<[f64; 2]>>, l_det: f64) -> Result<Self> {
        if gt_offsets.len() != tokens.len() {
            return Err(TrackError::ShapeMismatch(format!(
                "{} offsets for {} tokens",
                gt_offsets.len(),
                tokens.len()
            )));
        }
        if gt_offsets
            .iter()
            .zip(&tokens.lags)
            .any(|(o, &k)| o.is_some() && k == 0)
        {
            return Err(TrackError::ShapeMismatch("lag-0 tokens carry no motion target".into()));
        }
        if !(l_det.is_finite() && l_det >= 0.0) {
            return Err(TrackError::NonFinite("detection loss".into()));
        }
        Ok(Self {
            tokens,
            gt_offsets,
            l_det,
        })
    }
}

/// Mean squared error over all cells of all maps in the window.
pub fn loss_det(predicted: &[OccupancyMap], target: &[OccupancyMap]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(TrackError::ShapeMismatch(format!(
            "{} predicted maps vs {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(target) {
        if p.grid() != t.grid() {
            return Err(TrackError::ShapeMismatch("occupancy grids differ".into()));
        }
        let sq: f64 = p
            .values()
            .iter()
            .zip(t.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq / p.values().len() as f64;
    }
    Ok(total / predicted.len() as f64)
}

/// Mean Euclidean error between predicted motions and ground-truth offsets.
pub fn loss_tmc(motions: &[[f64; 2]], gt_offsets: &[[f64; 2]]) -> Result<f64> {
    Ok(tmc_terms(motions, gt_offsets)?.0)
}

fn tmc_terms(motions: &[[f64; 2]], gt_offsets: &[[f64; 2]]) -> Result<(f64, Vec<[f64; 2]>)> {
    if motions.len() != gt_offsets.len() {
        return Err(TrackError::ShapeMismatch(format!(
            "{} motions vs {} offsets",
            motions.len(),
            gt_offsets.len()
        )));
    }
    if motions.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = motions.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(motions.len());
    for (m, o) in motions.iter().zip(gt_offsets) {
        let (dx, dy) = (m[0] - o[0], m[1] - o[1]);
        let d = dx.hypot(dy);
        total += d;
        grads.push(if d > 0.0 {
            [dx / d / n, dy / d / n]
        } else {
            [0.0, 0.0]
        });
    }
    Ok((total / n, grads))
}

/// Negative log-likelihood of the correct match at every past lag.
///
/// For each lag-0 token of pedestrian `n` and each lag `k ≥ 1` where `n` is
/// present, the probability of `n` among all labelled lag-`k` tokens is a
/// softmax over dot products with the lag-0 feature.
pub fn loss_tac(features: &DMatrix<f64>, lags: &[usize], identities: &[Option<usize>]) -> Result<f64> {
    Ok(tac_terms(features, lags, identities, false)?.0)
}

fn tac_terms(
    features: &DMatrix<f64>,
    lags: &[usize],
    identities: &[Option<usize>],
    want_grad: bool,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    let t = features.nrows();
    if lags.len() != t || identities.len() != t {
        return Err(TrackError::ShapeMismatch(format!(
            "{t} feature rows, {} lags, {} identities",
            lags.len(),
            identities.len()
        )));
    }
    // Labelled candidates per past lag.
    let mut by_lag: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for (r, (&k, id)) in lags.iter().zip(identities).enumerate() {
        if let (true, Some(id)) = (k >= 1, id) {
            by_lag.entry(k).or_default().push((r, *id));
        }
    }
    let mut past_lags: Vec<usize> = by_lag.keys().copied().collect();
    past_lags.sort_unstable();

    let mut terms: Vec<(usize, usize, Vec<f64>, usize)> = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for (q, (&k0, id)) in lags.iter().zip(identities).enumerate() {
        let Some(id) = id else { continue };
        if k0 != 0 {
            continue;
        }
        let dq = features.row(q);
        for &k in &past_lags {
            let cands = &by_lag[&k];
            let Some(target) = cands.iter().position(|(_, c)| c == id) else {
                continue;
            };
            let logits: Vec<f64> = cands.iter().map(|(r, _)| dq.dot(&features.row(*r))).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            total += lse - logits[target];
            count += 1;
            if want_grad {
                let probs = logits.iter().map(|s| (s - lse).exp()).collect();
                terms.push((q, k, probs, target));
            }
        }
    }
    if count == 0 {
        return Ok((0.0, want_grad.then(|| DMatrix::zeros(t, features.ncols()))));
    }
    let loss = total / count as f64;
    if !want_grad {
        return Ok((loss, None));
    }
    let scale = 1.0 / count as f64;
    let mut grad = DMatrix::zeros(t, features.ncols());
    for (q, k, probs, target) in terms {
        let cands = &by_lag[&k];
        for (j, ((r, _), p)) in cands.iter().zip(&probs).enumerate() {
            let g = (p - if j == target { 1.0 } else { 0.0 }) * scale;
            if g == 0.0 {
                continue;
            }
            for c in 0..features.ncols() {
                grad[(q, c)] += g * features[(*r, c)];
                grad[(*r, c)] += g * features[(q, c)];
            }
        }
    }
    Ok((loss, Some(grad)))
}

/// Uncertainty-weighted total: `Σ e^{-wᵢ}·Lᵢ + Σ wᵢ`.
pub fn loss_all(l_det: f64, l_tmc: f64, l_tac: f64, w: [f64; 3]) -> f64 {
    (-w[0]).exp() * l_det + (-w[1]).exp() * l_tmc + (-w[2]).exp() * l_tac + w[0] + w[1] + w[2]
}

/// Everything the backward pass needs from a forward evaluation.
pub struct ForwardPass {
    pub report: LossReport,
    motion_caches: Vec<BlockCache>,
    motion_features: DMatrix<f64>,
    appearance_caches: Vec<BlockCache>,
    /// `∂L_TMC/∂m`, `T × 2`.
    dmotion: DMatrix<f64>,
    /// `∂L_TAC/∂d`, `T × E`.
    dappearance: DMatrix<f64>,
}

/// Runs both branches on a window and evaluates all losses.
pub fn forward_losses(params: &BranchParams, batch: &TrainingWindow) -> Result<ForwardPass> {
    forward_losses_impl(params, batch, None)
}

pub(crate) fn forward_losses_impl(
    params: &BranchParams,
    batch: &TrainingWindow,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass> {
    let tokens = &batch.tokens;
    check_tokens(params, tokens)?;
    let heads = params.config.heads;
    let rate = params.config.dropout;
    let x0 = tokens.embedded();

    let (g, motion_caches) = run_stack(&params.motion_blocks, &x0, heads, rate, dropout_rng.as_deref_mut());
    let (d, appearance_caches) =
        run_stack(&params.appearance_blocks, &x0, heads, rate, dropout_rng);

    let m = motion_head(params, &g);
    let rows: Vec<usize> = (0..tokens.len())
        .filter(|&r| batch.gt_offsets[r].is_some())
        .collect();
    let predicted: Vec<[f64; 2]> = rows.iter().map(|&r| [m[(r, 0)], m[(r, 1)]]).collect();
    let targets: Vec<[f64; 2]> = rows.iter().map(|&r| batch.gt_offsets[r].unwrap()).collect();
    let (l_tmc, tmc_grad) = tmc_terms(&predicted, &targets)?;
    let mut dmotion = DMatrix::zeros(tokens.len(), 2);
    for (&r, g) in rows.iter().zip(&tmc_grad) {
        dmotion[(r, 0)] = g[0];
        dmotion[(r, 1)] = g[1];
    }

    let (l_tac, dappearance) = tac_terms(&d, &tokens.lags, &tokens.pedestrians, true)?;
    let w = [params.w(0), params.w(1), params.w(2)];
    let report = LossReport {
        l_det: batch.l_det,
        l_tmc,
        l_tac,
        l_all: loss_all(batch.l_det, l_tmc, l_tac, w),
    };
    Ok(ForwardPass {
        report,
        motion_caches,
        motion_features: g,
        appearance_caches,
        dmotion,
        dappearance: dappearance.expect("gradient requested"),
    })
}

fn run_stack(
    blocks: &[super::BlockParams],
    x0: &DMatrix<f64>,
    heads: usize,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (DMatrix<f64>, Vec<BlockCache>) {
    let mut x = x0.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let drop = rng.as_deref_mut().map(|r| (r, rate));
        let (out, cache) = block_forward(b, &x, heads, drop);
        caches.push(cache);
        x = out;
    }
    (x, caches)
}

/// Exact gradient of `L_all` with respect to every parameter.
pub fn backward(params: &BranchParams, pass: &ForwardPass) -> BranchParams {
    let heads = params.config.heads;
    let mut grad = BranchParams::zeros(params.config);
    let report = pass.report;
    let coeff = |i: usize| (-params.w(i)).exp();

    let dm = &pass.dmotion * coeff(1);
    grad.motion_head_w = pass.motion_features.transpose() * &dm;
    for r in dm.row_iter() {
        grad.motion_head_b += r;
    }
    let mut dx = &dm * params.motion_head_w.transpose();
    for (i, cache) in pass.motion_caches.iter().enumerate().rev() {
        dx = block_backward(&params.motion_blocks[i], cache, &dx, heads, &mut grad.motion_blocks[i]);
    }

    let mut dx = &pass.dappearance * coeff(2);
    for (i, cache) in pass.appearance_caches.iter().enumerate().rev() {
        dx = block_backward(
            &params.appearance_blocks[i],
            cache,
            &dx,
            heads,
            &mut grad.appearance_blocks[i],
        );
    }

    for (i, l) in [report.l_det, report.l_tmc, report.l_tac].into_iter().enumerate() {
        grad.uncertainty[(0, i)] = 1.0 - coeff(i) * l;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn det_loss_trivial_cases() {
        let grid = BevGrid::new(4, 5, 1.0).unwrap();
        let zeros = OccupancyMap::zeros(grid);
        let ones = OccupancyMap::from_values(grid, vec![1.0; 20]).unwrap();
        assert_eq!(loss_det(std::slice::from_ref(&ones), std::slice::from_ref(&ones)).unwrap(), 0.0);
        assert_eq!(loss_det(std::slice::from_ref(&zeros), std::slice::from_ref(&ones)).unwrap(), 1.0);
        let other = OccupancyMap::zeros(BevGrid::new(5, 4, 1.0).unwrap());
        assert!(loss_det(std::slice::from_ref(&zeros), &[other]).is_err());
        assert!(loss_det(&[zeros.clone(), zeros], &[ones]).is_err());
    }

    #[test]
    fn tmc_loss_trivial_cases() {
        let m = [[1.0, 2.0], [-0.5, 0.25]];
        assert_eq!(loss_tmc(&m, &m).unwrap(), 0.0);
        assert_eq!(loss_tmc(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        assert!(loss_tmc(&m, &m[..1]).is_err());
    }

    #[test]
    fn tac_loss_trivial_cases() {
        // One pedestrian: the only candidate always has probability 1.
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.3, 0.7, -1.0, 2.0]);
        let loss = loss_tac(&f, &[0, 1, 2], &[Some(4), Some(4), Some(4)]).unwrap();
        assert!(loss.abs() < 1e-15);
        // Two pedestrians with identical features: probability 1/2.
        let f = DMatrix::from_element(4, 3, 0.5);
        let loss = loss_tac(&f, &[0, 0, 1, 1], &[Some(0), Some(1), Some(0), Some(1)]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!(loss_tac(&f, &[0, 0, 1], &[Some(0), Some(1), Some(0), Some(1)]).is_err());
    }

    #[test]
    fn loss_all_formula() {
        assert_eq!(loss_all(0.5, 1.5, 2.0, [0.0; 3]), 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let l: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let w: [f64; 3] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let direct = l[0] / w[0].exp() + l[1] / w[1].exp() + l[2] / w[2].exp() + w.iter().sum::<f64>();
            assert!((loss_all(l[0], l[1], l[2], w) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn uncertainty_gradient_vanishes_at_log_loss() {
        let l: [f64; 3] = [0.3, 1.7, 0.9];
        let w = [l[0].ln(), l[1].ln(), l[2].ln()];
        let h = 1e-6;
        for i in 0..3 {
            let mut wp = w;
            wp[i] += h;
            let mut wm = w;
            wm[i] -= h;
            let d = (loss_all(l[0], l[1], l[2], wp) - loss_all(l[0], l[1], l[2], wm)) / (2.0 * h);
            assert!(d.abs() < 1e-8);
        }
    }
}
