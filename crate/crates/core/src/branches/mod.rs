//! Attention-based motion and appearance branches.
//!
//! Both branches share the same layout: tokens (one per pedestrian and lag)
//! receive a sinusoidal temporal embedding and pass through a stack of
//! pre-norm transformer blocks attending over the whole window. The motion
//! branch adds a linear head to ℝ²; the appearance branch returns the block
//! output directly.
//!
//! Gradients are derived by hand for this fixed architecture; see
//! [`backward`].

mod block;
mod checkpoint;
mod loss;
mod toy;
mod train;

pub use block::{AttentionTrace, BlockParams};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{
    backward, forward_losses, loss_all, loss_det, loss_tac, loss_tmc, ForwardPass, LossReport,
    TrainingWindow,
};
pub use toy::{toy_windows, ToyConfig};
pub use train::{train, LearningRateSchedule, TrainConfig, TrainOutcome};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};

/// Architecture hyper-parameters shared by both branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// Token width `E`.
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    /// Window length `K`; lags run over `0..=K`.
    pub max_lag: usize,
    /// Dropout on the attention sublayer output during training. Forward
    /// passes used for inference and gradient checks never apply it.
    pub dropout: f64,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            blocks: 1,
            ffn_dim: 128,
            max_lag: 7,
            dropout: 0.0,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(TrackError::InvalidConfig(format!(
                "head count {} must divide token width {}",
                self.heads, self.dim
            )));
        }
        if self.blocks == 0 || self.ffn_dim == 0 {
            return Err(TrackError::InvalidConfig(
                "branches need at least one block and a non-empty feed-forward layer".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrackError::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Learnable parameters of both branches plus the uncertainty weights.
///
/// The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub config: BranchConfig,
    pub motion_blocks: Vec<BlockParams>,
    /// `E × 2`.
    pub motion_head_w: DMatrix<f64>,
    /// `1 × 2`.
    pub motion_head_b: DMatrix<f64>,
    pub appearance_blocks: Vec<BlockParams>,
    /// `1 × 3`: `w1` (detection), `w2` (motion), `w3` (appearance).
    pub uncertainty: DMatrix<f64>,
}

impl BranchParams {
    pub fn zeros(config: BranchConfig) -> Self {
        let blocks = || {
            (0..config.blocks)
                .map(|_| BlockParams::zeros(config.dim, config.ffn_dim))
                .collect()
        };
        Self {
            config,
            motion_blocks: blocks(),
            motion_head_w: DMatrix::zeros(config.dim, 2),
            motion_head_b: DMatrix::zeros(1, 2),
            appearance_blocks: blocks(),
            uncertainty: DMatrix::zeros(1, 3),
        }
    }

    /// Scaled Gaussian initialization; layer norms start at identity.
    pub fn init<R: Rng>(config: BranchConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let (e, f) = (config.dim as f64, config.ffn_dim as f64);
        let mut fill = |m: &mut DMatrix<f64>, std: f64| {
            m.iter_mut()
                .for_each(|v| *v = std * rng.sample::<f64, _>(StandardNormal));
        };
        for b in p.motion_blocks.iter_mut().chain(p.appearance_blocks.iter_mut()) {
            b.ln1_gamma.fill(1.0);
            b.ln2_gamma.fill(1.0);
            fill(&mut b.wq, e.powf(-0.5));
            fill(&mut b.wk, e.powf(-0.5));
            fill(&mut b.wv, e.powf(-0.5));
            fill(&mut b.wo, 0.5 * e.powf(-0.5));
            fill(&mut b.ff_w1, (2.0 / e).sqrt());
            fill(&mut b.ff_w2, 0.5 * f.powf(-0.5));
        }
        fill(&mut p.motion_head_w, 0.1 * e.powf(-0.5));
        Ok(p)
    }

    /// Adds `scale · I` to the query and key projections of every block, so
    /// attention starts out favouring tokens with similar features.
    pub fn bias_query_key(&mut self, scale: f64) {
        let d = self.config.dim;
        for b in self.motion_blocks.iter_mut().chain(self.appearance_blocks.iter_mut()) {
            for i in 0..d {
                b.wq[(i, i)] += scale;
                b.wk[(i, i)] += scale;
            }
        }
    }

    pub fn w(&self, i: usize) -> f64 {
        self.uncertainty[(0, i)]
    }

    /// Visits every tensor with a stable dotted name.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &DMatrix<f64>)) {
        for (branch, blocks) in [("motion", &self.motion_blocks), ("appearance", &self.appearance_blocks)] {
            for (i, b) in blocks.iter().enumerate() {
                for (name, t) in b.tensors() {
                    f(&format!("{branch}.{i}.{name}"), t);
                }
            }
        }
        f("motion.head.w", &self.motion_head_w);
        f("motion.head.b", &self.motion_head_b);
        f("uncertainty", &self.uncertainty);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut DMatrix<f64>)) {
        for (branch, blocks) in [
            ("motion", &mut self.motion_blocks),
            ("appearance", &mut self.appearance_blocks),
        ] {
            for (i, b) in blocks.iter_mut().enumerate() {
                for (name, t) in b.tensors_mut() {
                    f(&format!("{branch}.{i}.{name}"), t);
                }
            }
        }
        f("motion.head.w", &mut self.motion_head_w);
        f("motion.head.b", &mut self.motion_head_b);
        f("uncertainty", &mut self.uncertainty);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(|n, _| names.push(n.to_string()));
        names
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// All parameters concatenated in tensor order (column-major within a
    /// tensor).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.for_each_tensor(|_, t| out.extend_from_slice(t.as_slice()));
        out
    }

    /// Inverse of [`BranchParams::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.for_each_tensor_mut(|_, t| {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

/// One window of pedestrian features, one token per (pedestrian, lag).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `T × E`, one row per token, before temporal embedding.
    pub features: DMatrix<f64>,
    /// Identity label per token, `None` where unknown (inference, clutter).
    pub pedestrians: Vec<Option<usize>>,
    pub lags: Vec<usize>,
    pub max_lag: usize,
}

impl TokenSet {
    pub fn new(
        features: DMatrix<f64>,
        pedestrians: Vec<Option<usize>>,
        lags: Vec<usize>,
        max_lag: usize,
    ) -> Result<Self> {
        let t = features.nrows();
        if pedestrians.len() != t || lags.len() != t {
            return Err(TrackError::ShapeMismatch(format!(
                "{t} token rows but {} labels and {} lags",
                pedestrians.len(),
                lags.len()
            )));
        }
        if let Some(bad) = lags.iter().find(|&&k| k > max_lag) {
            return Err(TrackError::ShapeMismatch(format!(
                "lag {bad} exceeds window length {max_lag}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(TrackError::NonFinite("token features".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (p, k) in pedestrians.iter().zip(&lags) {
            if let Some(p) = p {
                if !seen.insert((*p, *k)) {
                    return Err(TrackError::ShapeMismatch(format!(
                        "pedestrian {p} has two tokens at lag {k}"
                    )));
                }
            }
        }
        Ok(Self {
            features,
            pedestrians,
            lags,
            max_lag,
        })
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Features with the temporal embedding of each token's lag added.
    pub fn embedded(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let table: Vec<Vec<f64>> = (0..=self.max_lag)
            .map(|k| temporal_embedding(k, dim))
            .collect();
        let mut x = self.features.clone();
        for (r, &k) in self.lags.iter().enumerate() {
            for c in 0..dim {
                x[(r, c)] += table[k][c];
            }
        }
        x
    }
}

/// Sinusoidal embedding: component `2i` is `sin(lag / 10000^(2i/E))`,
/// component `2i+1` the matching cosine.
pub fn temporal_embedding(lag: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = lag as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn check_tokens(params: &BranchParams, tokens: &TokenSet) -> Result<()> {
    if tokens.dim() != params.config.dim {
        return Err(TrackError::ShapeMismatch(format!(
            "token width {} but branches expect {}",
            tokens.dim(),
            params.config.dim
        )));
    }
    Ok(())
}

fn run_blocks(
    blocks: &[BlockParams],
    heads: usize,
    tokens: &TokenSet,
) -> (DMatrix<f64>, Vec<block::BlockCache>) {
    let mut x = tokens.embedded();
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (out, cache) = block::block_forward(b, &x, heads, None);
        caches.push(cache);
        x = out;
    }
    (x, caches)
}

/// Motion per token: `Some([dx, dy])` for lags `1..=K`, `None` at lag 0.
pub fn motion_branch_forward(
    params: &BranchParams,
    tokens: &TokenSet,
) -> Result<Vec<Option<[f64; 2]>>> {
    check_tokens(params, tokens)?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let (g, _) = run_blocks(&params.motion_blocks, params.config.heads, tokens);
    let m = motion_head(params, &g);
    Ok(tokens
        .lags
        .iter()
        .enumerate()
        .map(|(r, &k)| (k >= 1).then(|| [m[(r, 0)], m[(r, 1)]]))
        .collect())
}

fn motion_head(params: &BranchParams, g: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = g * &params.motion_head_w;
    for mut row in m.row_iter_mut() {
        row += &params.motion_head_b;
    }
    m
}

/// Appearance feature per token (`T × E`), rows aligned with the tokens.
pub fn appearance_branch_forward(params: &BranchParams, tokens: &TokenSet) -> Result<DMatrix<f64>> {
    check_tokens(params, tokens)?;
    if tokens.is_empty() {
        return Ok(DMatrix::zeros(0, params.config.dim));
    }
    Ok(run_blocks(&params.appearance_blocks, params.config.heads, tokens).0)
}

/// Attention weights of the first block of each branch, for inspection.
pub fn attention_weights(
    params: &BranchParams,
    tokens: &TokenSet,
) -> Result<(AttentionTrace, AttentionTrace)> {
    check_tokens(params, tokens)?;
    let (_, motion) = run_blocks(&params.motion_blocks, params.config.heads, tokens);
    let (_, appearance) = run_blocks(&params.appearance_blocks, params.config.heads, tokens);
    Ok((motion[0].trace(), appearance[0].trace()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lag_zero_embedding_alternates() {
        let e = temporal_embedding(0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embeddings_distinct_across_lags() {
        let table: Vec<_> = (0..=7).map(|k| temporal_embedding(k, 64)).collect();
        let mut min = f64::INFINITY;
        for a in 0..table.len() {
            for b in (a + 1)..table.len() {
                let d: f64 = table[a]
                    .iter()
                    .zip(&table[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn embedding_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 64;
        for _ in 0..10 {
            let lag = rng.random_range(0..=7usize);
            let c = rng.random_range(0..dim);
            let expo = (2 * (c / 2)) as f64 / dim as f64;
            let expected = if c % 2 == 0 {
                (lag as f64 / 10000f64.powf(expo)).sin()
            } else {
                (lag as f64 / 10000f64.powf(expo)).cos()
            };
            assert_eq!(temporal_embedding(lag, dim)[c], expected);
        }
    }

    #[test]
    fn config_validation() {
        assert!(BranchConfig::default().validate().is_ok());
        let bad = BranchConfig {
            heads: 3,
            ..BranchConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn token_set_rejects_duplicates_and_bad_lags() {
        let f = DMatrix::zeros(2, 4);
        assert!(TokenSet::new(f.clone(), vec![Some(0), Some(0)], vec![1, 1], 2).is_err());
        assert!(TokenSet::new(f.clone(), vec![Some(0), Some(1)], vec![0, 3], 2).is_err());
        assert!(TokenSet::new(f.clone(), vec![None, None], vec![1, 1], 2).is_ok());
        assert!(TokenSet::new(f, vec![None], vec![1], 2).is_err());
    }

    #[test]
    fn tensor_names_are_unique() {
        let p = BranchParams::zeros(BranchConfig {
            blocks: 2,
            ..BranchConfig::default()
        });
        let names = p.tensor_names();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names.len(), 2 * 2 * 12 + 3);
    }

    #[test]
    fn wrong_token_width_is_rejected() {
        let p = BranchParams::zeros(BranchConfig::default());
        let tokens = TokenSet::new(DMatrix::zeros(1, 8), vec![None], vec![0], 7).unwrap();
        assert!(matches!(
            motion_branch_forward(&p, &tokens),
            Err(TrackError::ShapeMismatch(_))
        ));
        assert!(appearance_branch_forward(&p, &tokens).is_err());
    }
}
