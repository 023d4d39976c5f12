//! Token importance recalibration.
//!
//! Patch tokens are projected into the text space, scored against the
//! episode's class embeddings, and marked per class when they are among the
//! `ceil(ratio·M)` most similar tokens of their image. A token's Sum score
//! counts the classes that picked it. Tokens picked by every class get
//! suppressed, tokens picked by a single class get amplified:
//!
//! ```text
//! w = max(0, 1 − β·(Sum − α))   if Sum > 0
//! w = 1                         if Sum = 0
//! ```
//!
//! The weights are computed from forward values only, so gradients see them
//! as constants.

use serde::{Deserialize, Serialize};

use crate::encoder::{LayerHook, VisualEncoder};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{topk_indices, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TirMode {
    FullLinear,
    Simplified,
    SuppressOnly,
    EnhanceOnly,
    Off,
}

impl TirMode {
    pub const ALL: [TirMode; 5] =
        [TirMode::FullLinear, TirMode::Simplified, TirMode::SuppressOnly, TirMode::EnhanceOnly, TirMode::Off];

    pub fn name(self) -> &'static str {
        match self {
            TirMode::FullLinear => "full_linear",
            TirMode::Simplified => "simplified",
            TirMode::SuppressOnly => "suppress_only",
            TirMode::EnhanceOnly => "enhance_only",
            TirMode::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown TIR mode {s:?}")))
    }
}

impl std::fmt::Display for TirMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TirConfig {
    pub topk_ratio: f64,
    /// Neutrality threshold; `(K+1)/2` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Intensity; `2/(K−1)` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Blocks after which the hook re-weights tokens.
    pub insertion_layers: Vec<usize>,
    pub mode: TirMode,
}

impl Default for TirConfig {
    fn default() -> Self {
        Self { topk_ratio: 0.3, alpha: None, beta: None, insertion_layers: vec![3, 4], mode: TirMode::FullLinear }
    }
}

impl TirConfig {
    pub fn with_mode(&self, mode: TirMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// `(alpha, beta)` in effect for `k` classes.
    pub fn alpha_beta(&self, k: usize) -> (f64, f64) {
        let kf = k as f64;
        let alpha = self.alpha.unwrap_or((kf + 1.0) / 2.0);
        let beta = self.beta.unwrap_or(if k > 1 { 2.0 / (kf - 1.0) } else { 0.0 });
        (alpha, beta)
    }

    /// Checks the ratio and the weight endpoints for `k` classes.
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(Error::Config(format!("tir.topk_ratio must be in (0, 1], got {}", self.topk_ratio)));
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("tir.beta must be >= 0, got {b}")));
            }
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() {
                return Err(Error::Config("tir.alpha must be finite".into()));
            }
        }
        if self.mode == TirMode::FullLinear && k > 0 {
            if k < 2 && self.beta.is_none() {
                return Err(Error::Config("full_linear with default beta needs at least 2 classes".into()));
            }
            let (alpha, beta) = self.alpha_beta(k);
            let w1 = 1.0 - beta * (1.0 - alpha);
            let wk = 1.0 - beta * (k as f64 - alpha);
            if !(w1 >= 1.0 && wk >= 0.0) {
                return Err(Error::Config(format!(
                    "tir (alpha={alpha}, beta={beta}) gives weight(1)={w1}, weight({k})={wk}; need weight(1) >= 1 and weight(K) >= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn validate_layers(&self, blocks: usize) -> Result<()> {
        match self.insertion_layers.iter().find(|&&l| l >= blocks) {
            Some(l) => Err(Error::Config(format!("tir.insertion_layers entry {l} >= {blocks} blocks"))),
            None => Ok(()),
        }
    }
}

/// Per-(image, token) selection counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumScoreMap {
    pub batch: usize,
    pub tokens: usize,
    pub classes: usize,
    /// `[B·M]`, values in `0..=K`.
    pub scores: Vec<u32>,
    /// `[B·M·K]` 0/1 indicators.
    pub binary: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub batch: usize,
    pub tokens: usize,
    /// `[B·M]`, non-negative.
    pub w: Vec<f64>,
}

/// Number of tokens each class selects per image.
pub fn k_count(topk_ratio: f64, tokens: usize) -> usize {
    // Guard against 0.3·10 = 3.0000000000000004 rounding up to 4.
    let raw = topk_ratio * tokens as f64;
    let r = raw.round();
    if (raw - r).abs() < 1e-9 {
        r as usize
    } else {
        raw.ceil() as usize
    }
}

/// `LayerNorm(v)·W_p` with the encoder's final-norm parameters.
pub fn project_tokens(v: &Tensor, enc: &VisualEncoder) -> Result<Tensor> {
    enc.project_tokens(v)
}

/// Cosine similarity of every token `[B × M × D_t]` with every class
/// `[K × D_t]`, giving `[B × M × K]`.
pub fn token_class_similarity(v_proj: &Tensor, classes: &Tensor) -> Result<Tensor> {
    let (b, m) = match v_proj.shape() {
        [b, m, _] => (*b, *m),
        [m, _] => (1, *m),
        s => return dim_err("token_class_similarity", s, classes.shape()),
    };
    let d = v_proj.last_dim();
    if classes.shape().len() != 2 || classes.last_dim() != d {
        return dim_err("token_class_similarity", v_proj.shape(), classes.shape());
    }
    let k = classes.rows();
    let mut cn = Vec::with_capacity(k);
    for j in 0..k {
        let n = classes.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numeric(format!("class {j} has norm {n}")));
        }
        cn.push(n);
    }
    let mut out = vec![0.0; b * m * k];
    for r in 0..b * m {
        let t = v_proj.row(r);
        let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numeric(format!("token (b={}, i={}) has norm {n}", r / m, r % m)));
        }
        for j in 0..k {
            let dot: f64 = t.iter().zip(classes.row(j)).map(|(a, c)| a * c).sum();
            out[r * k + j] = (dot / (n * cn[j])).clamp(-1.0, 1.0);
        }
    }
    Tensor::new(vec![b, m, k], out)
}

/// Per image and class, marks the `k_count` most similar tokens (ties to
/// the lower token index) and sums the marks per token.
pub fn binarize_topk(s: &Tensor, topk_ratio: f64) -> Result<SumScoreMap> {
    let (b, m, k) = match s.shape() {
        [b, m, k] => (*b, *m, *k),
        sh => return dim_err("binarize_topk", sh, &[0, 0, 0]),
    };
    if !(topk_ratio > 0.0 && topk_ratio <= 1.0) {
        return Err(Error::Argument(format!("topk_ratio {topk_ratio} outside (0, 1]")));
    }
    let kc = k_count(topk_ratio, m);
    if kc == 0 {
        return Err(Error::Argument("k_count is zero".into()));
    }
    let mut binary = vec![0u8; b * m * k];
    let mut scores = vec![0u32; b * m];
    let mut col = vec![0.0; m];
    for bi in 0..b {
        for j in 0..k {
            for i in 0..m {
                col[i] = s.data()[(bi * m + i) * k + j];
            }
            for i in topk_indices(&col, kc)? {
                binary[(bi * m + i) * k + j] = 1;
                scores[bi * m + i] += 1;
            }
        }
    }
    Ok(SumScoreMap { batch: b, tokens: m, classes: k, scores, binary })
}

/// Weight for one Sum score with `k` classes.
pub fn weight_for_sum(sum: u32, k: usize, cfg: &TirConfig) -> f64 {
    if sum == 0 {
        return 1.0;
    }
    let top = sum as usize == k;
    let single = sum == 1;
    match cfg.mode {
        TirMode::Off => 1.0,
        TirMode::FullLinear => {
            let (alpha, beta) = cfg.alpha_beta(k);
            (1.0 - beta * (sum as f64 - alpha)).max(0.0)
        }
        TirMode::Simplified => {
            if top {
                0.0
            } else if single {
                2.0
            } else {
                1.0
            }
        }
        TirMode::SuppressOnly => {
            if top {
                0.0
            } else {
                1.0
            }
        }
        TirMode::EnhanceOnly => {
            if single && !top {
                2.0
            } else {
                1.0
            }
        }
    }
}

pub fn compute_weights(scores: &SumScoreMap, cfg: &TirConfig, k: usize) -> WeightMap {
    let table: Vec<f64> = (0..=k as u32).map(|s| weight_for_sum(s, k, cfg)).collect();
    WeightMap {
        batch: scores.batch,
        tokens: scores.tokens,
        w: scores.scores.iter().map(|&s| table.get(s as usize).copied().unwrap_or(1.0)).collect(),
    }
}

/// `v_out[b, i, :] = w[b, i] · v[b, i, :]`.
pub fn recalibrate(v: &Tensor, w: &WeightMap) -> Result<Tensor> {
    if v.rows() != w.w.len() {
        return dim_err("recalibrate", v.shape(), &[w.batch, w.tokens]);
    }
    let d = v.last_dim();
    let mut data = v.data().to_vec();
    for (row, &wi) in data.chunks_mut(d).zip(&w.w) {
        row.iter_mut().for_each(|x| *x *= wi);
    }
    Tensor::new(v.shape().to_vec(), data)
}

/// Sum scores of the patch tokens in `tokens` (`[B·(M+1) × D_v]`, CLS first
/// per image) against `classes`.
pub fn score_patch_tokens(
    tokens: &Tensor,
    batch: usize,
    enc: &VisualEncoder,
    classes: &Tensor,
    topk_ratio: f64,
) -> Result<(SumScoreMap, Tensor)> {
    let d = tokens.last_dim();
    if batch == 0 || tokens.rows() % batch != 0 {
        return dim_err("score_patch_tokens", tokens.shape(), &[batch]);
    }
    let t = tokens.rows() / batch;
    let m = t - 1;
    let mut patches = Vec::with_capacity(batch * m * d);
    for b in 0..batch {
        patches.extend_from_slice(&tokens.data()[(b * t + 1) * d..(b + 1) * t * d]);
    }
    let patches = Tensor::new(vec![batch, m, d], patches)?;
    let proj = project_tokens(&patches, enc)?;
    let sim = token_class_similarity(&proj, classes)?;
    Ok((binarize_topk(&sim, topk_ratio)?, sim))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HookRecord {
    pub layer: usize,
    pub scores: SumScoreMap,
    pub weights: WeightMap,
}

/// The TIR layer as an encoder hook. Records the Sum and weight maps of
/// every call while `recording` is set.
pub struct TirHook {
    pub cfg: TirConfig,
    classes: Tensor,
    pub recording: bool,
    pub records: Vec<HookRecord>,
}

impl TirHook {
    pub fn new(cfg: TirConfig, classes: Tensor) -> Result<Self> {
        cfg.validate(classes.rows())?;
        Ok(Self { cfg, classes, recording: true, records: Vec::new() })
    }

    pub fn classes(&self) -> &Tensor {
        &self.classes
    }

    /// Value-level application to one layer's activations: identity for
    /// layers outside the insertion set.
    pub fn apply(&mut self, layer: usize, tokens: &Tensor, batch: usize, enc: &VisualEncoder) -> Result<Tensor> {
        if !self.cfg.insertion_layers.contains(&layer) {
            return Ok(tokens.clone());
        }
        let w = self.token_weights(layer, tokens, batch, enc)?;
        let t = tokens.rows() / batch;
        let mut full = Vec::with_capacity(tokens.rows());
        for b in 0..batch {
            full.push(1.0);
            full.extend_from_slice(&w[b * (t - 1)..(b + 1) * (t - 1)]);
        }
        recalibrate(tokens, &WeightMap { batch, tokens: t, w: full })
    }
}

impl LayerHook for TirHook {
    fn insertion_layers(&self) -> &[usize] {
        &self.cfg.insertion_layers
    }

    fn token_weights(&mut self, layer: usize, tokens: &Tensor, batch: usize, enc: &VisualEncoder) -> Result<Vec<f64>> {
        if self.cfg.mode == TirMode::Off && !self.recording {
            return Ok(vec![1.0; tokens.rows() - batch]);
        }
        let k = self.classes.rows();
        let (scores, _) = score_patch_tokens(tokens, batch, enc, &self.classes, self.cfg.topk_ratio)?;
        let weights = compute_weights(&scores, &self.cfg, k);
        let w = weights.w.clone();
        if self.recording {
            self.records.push(HookRecord { layer, scores, weights });
        }
        Ok(w)
    }
}
