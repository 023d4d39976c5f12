//! Toy dual encoder: a pre-norm ViT-style visual tower over token grids, a
//! frozen class-embedding table in place of the text tower, and the
//! visual-to-text projection.

mod checkpoint;
mod pretrain;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use pretrain::{pretrain_source, PretrainOpts, PretrainReport};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input token width.
    pub d_in: usize,
    /// Patch tokens per image.
    pub tokens: usize,
    pub width: usize,
    pub text_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Blocks with index below this keep the CLS token out of patch
    /// attention (CLS attends only to itself and patches never see it);
    /// from this block on attention is unrestricted. 0 gives a plain ViT.
    pub cls_isolated_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            tokens: 49,
            width: 64,
            text_dim: 32,
            blocks: 6,
            heads: 4,
            mlp_ratio: 2,
            cls_isolated_blocks: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("d_in", self.d_in),
            ("tokens", self.tokens),
            ("width", self.width),
            ("text_dim", self.text_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = pos.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.width {} not divisible by encoder.heads {}",
                self.width, self.heads
            )));
        }
        if self.cls_isolated_blocks > self.blocks {
            return Err(Error::Config(format!(
                "encoder.cls_isolated_blocks {} exceeds encoder.blocks {}",
                self.cls_isolated_blocks, self.blocks
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub cls: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    /// `W_p`, `[width × text_dim]`.
    pub proj: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl VisualEncoder {
    /// Randomly initialised encoder: linear layers uniform in
    /// `±1/sqrt(fan_in)`, layer norms at identity.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let hidden = d * cfg.mlp_ratio;
        let lin = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            (uniform(rng, &[fan_in, fan_out], b), uniform(rng, &[fan_out], b))
        };
        let (embed_w, embed_b) = lin(&mut rng, cfg.d_in, d);
        let cls = normal(&mut rng, &[d], 0.02);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let (wq, bq) = lin(&mut rng, d, d);
            let (wk, bk) = lin(&mut rng, d, d);
            let (wv, bv) = lin(&mut rng, d, d);
            let (wo, bo) = lin(&mut rng, d, d);
            let (w1, b1) = lin(&mut rng, d, hidden);
            let (w2, b2) = lin(&mut rng, hidden, d);
            blocks.push(BlockParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1,
                b1,
                w2,
                b2,
            });
        }
        let proj = normal(&mut rng, &[d, cfg.text_dim], 1.0 / (d as f64).sqrt());
        Ok(Self { cfg, embed_w, embed_b, cls, blocks, ln_g: Tensor::full(&[d], 1.0), ln_b: Tensor::zeros(&[d]), proj })
    }

    /// Every parameter with a stable name, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            vec![("embed.w".into(), &self.embed_w), ("embed.b".into(), &self.embed_b), ("cls".into(), &self.cls)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in block_fields(b) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("ln.g".into(), &self.ln_g));
        out.push(("ln.b".into(), &self.ln_b));
        out.push(("proj".into(), &self.proj));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b, &mut self.cls];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.ln_g, &mut self.ln_b, &mut self.proj]);
        out
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let embed_w = leaf(&self.embed_w);
        let embed_b = leaf(&self.embed_b);
        let cls = leaf(&self.cls);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_g: leaf(&b.ln1_g),
                ln1_b: leaf(&b.ln1_b),
                wq: leaf(&b.wq),
                bq: leaf(&b.bq),
                wk: leaf(&b.wk),
                bk: leaf(&b.bk),
                wv: leaf(&b.wv),
                bv: leaf(&b.bv),
                wo: leaf(&b.wo),
                bo: leaf(&b.bo),
                ln2_g: leaf(&b.ln2_g),
                ln2_b: leaf(&b.ln2_b),
                w1: leaf(&b.w1),
                b1: leaf(&b.b1),
                w2: leaf(&b.w2),
                b2: leaf(&b.b2),
            })
            .collect();
        EncoderVars {
            embed_w,
            embed_b,
            cls,
            blocks,
            ln_g: leaf(&self.ln_g),
            ln_b: leaf(&self.ln_b),
            proj: leaf(&self.proj),
        }
    }

    /// Value-level forward pass. `images` is `[B × M × D_in]` (or flattened
    /// `[B·M × D_in]`); returns the unit-norm CLS embeddings `[B × D_t]`
    /// and the requested per-block activations.
    pub fn forward(
        &self,
        images: &Tensor,
        taps: &[usize],
        hook: Option<&mut dyn LayerHook>,
    ) -> Result<(Tensor, LayerActivations)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward_on_tape(&mut tape, &vars, x, taps, hook, None)?;
        let acts = out.taps.iter().map(|(&l, &v)| (l, tape.value(v).clone())).collect();
        Ok((tape.value(out.cls).clone(), LayerActivations { layers: acts }))
    }

    /// Forward pass recorded on `tape`.
    ///
    /// Taps record each listed block's output before any hook re-weighting.
    /// After a block in the hook's insertion set, the patch tokens are
    /// multiplied by the hook's weights; the CLS token passes through.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        images: Var,
        taps: &[usize],
        mut hook: Option<&mut dyn LayerHook>,
        lora: Option<&LoraVars>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let m = cfg.tokens;
        if let Some(&bad) = taps.iter().find(|&&l| l >= cfg.blocks) {
            return Err(Error::Config(format!("tap layer {bad} >= {} blocks", cfg.blocks)));
        }
        if let Some(h) = hook.as_deref() {
            if let Some(&bad) = h.insertion_layers().iter().find(|&&l| l >= cfg.blocks) {
                return Err(Error::Config(format!("hook layer {bad} >= {} blocks", cfg.blocks)));
            }
        }
        if let Some(l) = lora {
            if l.q.len() != cfg.blocks || l.v.len() != cfg.blocks {
                return Err(Error::Config("adapter count does not match block count".into()));
            }
        }
        let shape = tape.value(images).shape().to_vec();
        if tape.value(images).last_dim() != cfg.d_in || tape.value(images).rows() % m != 0 {
            return dim_err("encoder.forward", &shape, &[m, cfg.d_in]);
        }
        let batch = tape.value(images).rows() / m;
        if batch == 0 {
            return Err(Error::Argument("empty image batch".into()));
        }
        let t = m + 1;
        let flat = tape.reshape(images, &[batch * m, cfg.d_in])?;
        let e = tape.matmul(flat, vars.embed_w)?;
        let e = tape.add_bias(e, vars.embed_b)?;
        let mut x = tape.insert_cls(e, vars.cls, batch)?;
        let embedded = x;
        let mut tapped = BTreeMap::new();
        for (i, bv) in vars.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, bv.ln1_g, bv.ln1_b, LN_EPS)?;
            let linear = |tape: &mut Tape, w: Var, b: Var, ab: Option<(Var, Var)>, s: f64| -> Result<Var> {
                let y = tape.matmul(h, w)?;
                let mut y = tape.add_bias(y, b)?;
                if let Some((a, bb)) = ab {
                    let z = tape.matmul(h, a)?;
                    let z = tape.matmul(z, bb)?;
                    let z = if s == 1.0 { z } else { tape.scale(z, s) };
                    y = tape.add(y, z)?;
                }
                Ok(y)
            };
            let scale = lora.map_or(1.0, |l| l.scale);
            let q = linear(tape, bv.wq, bv.bq, lora.and_then(|l| l.q[i]), scale)?;
            let k = linear(tape, bv.wk, bv.bk, None, scale)?;
            let v = linear(tape, bv.wv, bv.bv, lora.and_then(|l| l.v[i]), scale)?;
            let iso = i < cfg.cls_isolated_blocks;
            let a = tape.attention(q, k, v, batch, t, cfg.heads, iso)?;
            let a = tape.matmul(a, bv.wo)?;
            let a = tape.add_bias(a, bv.bo)?;
            x = tape.add(x, a)?;
            let h2 = tape.layer_norm(x, bv.ln2_g, bv.ln2_b, LN_EPS)?;
            let f = tape.matmul(h2, bv.w1)?;
            let f = tape.add_bias(f, bv.b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, bv.w2)?;
            let f = tape.add_bias(f, bv.b2)?;
            x = tape.add(x, f)?;
            if taps.contains(&i) {
                tapped.insert(i, x);
            }
            if let Some(h) = hook.as_deref_mut() {
                if h.insertion_layers().contains(&i) {
                    let patch_w = h.token_weights(i, tape.value(x), batch, self)?;
                    if patch_w.len() != batch * m {
                        return dim_err("hook weights", &[batch * m], &[patch_w.len()]);
                    }
                    let mut w = Vec::with_capacity(batch * t);
                    for b in 0..batch {
                        w.push(1.0);
                        w.extend_from_slice(&patch_w[b * m..(b + 1) * m]);
                    }
                    x = tape.scale_rows(x, &w)?;
                }
            }
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let c = tape.gather_rows(x, &cls_rows)?;
        let c = tape.layer_norm(c, vars.ln_g, vars.ln_b, LN_EPS)?;
        let c = tape.matmul(c, vars.proj)?;
        let cls = tape.l2_normalize_rows(c)?;
        Ok(ForwardOutput { cls, embedded, taps: tapped, batch })
    }

    /// `LayerNorm(v) · W_p` per token using the encoder's final-norm
    /// parameters; rows are not normalised.
    pub fn project_tokens(&self, v: &Tensor) -> Result<Tensor> {
        ln_project(v, &self.ln_g, &self.ln_b, &self.proj)
    }
}

/// `LayerNorm(v; gamma, beta) · proj` over the last axis of `v`, keeping the
/// leading axes.
pub fn ln_project(v: &Tensor, gamma: &Tensor, beta: &Tensor, proj: &Tensor) -> Result<Tensor> {
    let d = v.last_dim();
    if gamma.len() != d || beta.len() != d || proj.shape().len() != 2 || proj.rows() != d {
        return dim_err("ln_project", v.shape(), proj.shape());
    }
    let rows = v.rows();
    let mut normed = vec![0.0; v.len()];
    for r in 0..rows {
        let row = v.row(r);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            normed[r * d + j] = (row[j] - mu) * rs * gamma.data()[j] + beta.data()[j];
        }
    }
    let normed = Tensor::new(vec![rows, d], normed)?;
    let out = normed.matmul(proj)?;
    let mut shape = v.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = proj.last_dim();
    out.reshape(&shape)
}

fn block_fields(b: &BlockParams) -> [(&'static str, &Tensor); 16] {
    [
        ("ln1.g", &b.ln1_g),
        ("ln1.b", &b.ln1_b),
        ("wq", &b.wq),
        ("bq", &b.bq),
        ("wk", &b.wk),
        ("bk", &b.bk),
        ("wv", &b.wv),
        ("bv", &b.bv),
        ("wo", &b.wo),
        ("bo", &b.bo),
        ("ln2.g", &b.ln2_g),
        ("ln2.b", &b.ln2_b),
        ("w1", &b.w1),
        ("b1", &b.b1),
        ("w2", &b.w2),
        ("b2", &b.b2),
    ]
}

pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Encoder parameters recorded on a tape.
pub struct EncoderVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub cls: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_g: Var,
    pub ln_b: Var,
    pub proj: Var,
}

impl EncoderVars {
    /// Same order as [`VisualEncoder::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed_w, self.embed_b, self.cls];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2,
                b.b2,
            ]);
        }
        out.extend([self.ln_g, self.ln_b, self.proj]);
        out
    }
}

/// Low-rank `(A, B)` pairs added to the query and value projections:
/// `q = h·W_q + b_q + scale · (h·A)·B`. `None` leaves a block unadapted.
pub struct LoraVars {
    pub q: Vec<Option<(Var, Var)>>,
    pub v: Vec<Option<(Var, Var)>>,
    pub scale: f64,
}

pub struct ForwardOutput {
    /// Unit-norm CLS embeddings, `[B × D_t]`.
    pub cls: Var,
    /// Embedded tokens with CLS prepended, before the first block.
    pub embedded: Var,
    pub taps: BTreeMap<usize, Var>,
    pub batch: usize,
}

/// Per-block token activations, `[B·(M+1) × D_v]` with CLS first in each
/// image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerActivations {
    pub layers: BTreeMap<usize, Tensor>,
}

/// Re-weights patch tokens between blocks.
pub trait LayerHook {
    fn insertion_layers(&self) -> &[usize];

    /// Weights for the `B·M` patch tokens of `tokens` (`[B·(M+1) × D_v]`,
    /// CLS rows included), in image-major order.
    fn token_weights(&mut self, layer: usize, tokens: &Tensor, batch: usize, enc: &VisualEncoder) -> Result<Vec<f64>>;
}

/// Hook returning the same constant weight for every patch token.
pub struct ConstantHook {
    pub layers: Vec<usize>,
    pub weight: f64,
}

impl LayerHook for ConstantHook {
    fn insertion_layers(&self) -> &[usize] {
        &self.layers
    }

    fn token_weights(
        &mut self,
        _layer: usize,
        tokens: &Tensor,
        batch: usize,
        _enc: &VisualEncoder,
    ) -> Result<Vec<f64>> {
        Ok(vec![self.weight; tokens.rows() - batch])
    }
}

/// Frozen unit-norm text-side class vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    table: Tensor,
    names: Vec<String>,
}

impl ClassEmbeddings {
    /// Rows are L2-normalised on construction.
    pub fn new(table: Tensor, names: Vec<String>) -> Result<Self> {
        if table.shape().len() != 2 || table.shape()[0] != names.len() {
            return dim_err("class_embeddings", table.shape(), &[names.len()]);
        }
        let d = table.last_dim();
        let mut data = table.into_data();
        for (i, row) in data.chunks_mut(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("class {i} embedding has norm {n}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { table: Tensor::new(vec![names.len(), d], data)?, names })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.last_dim()
    }

    /// Rows `ids`, in order, as a `[ids.len() × D_t]` tensor.
    pub fn subset(&self, ids: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Index(format!("class {i} of {}", self.len())));
            }
            out.extend_from_slice(self.table.row(i));
        }
        Tensor::new(vec![ids.len(), d], out)
    }
}

/// `logits[b, j] = cos(cls_b, t_j) / tau`.
pub fn similarity_logits(cls: &Tensor, classes: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!("tau must be > 0, got {tau}")));
    }
    if cls.last_dim() != classes.last_dim() {
        return dim_err("similarity_logits", cls.shape(), classes.shape());
    }
    let (b, k) = (cls.rows(), classes.rows());
    let mut out = vec![0.0; b * k];
    for i in 0..b {
        let x = cls.row(i);
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 {
            return Err(Error::Numeric(format!("image {i} embedding has zero norm")));
        }
        for j in 0..k {
            let t = classes.row(j);
            let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nt == 0.0 {
                return Err(Error::Numeric(format!("class {j} embedding has zero norm")));
            }
            let dot: f64 = x.iter().zip(t).map(|(a, c)| a * c).sum();
            out[i * k + j] = dot / (nx * nt) / tau;
        }
    }
    Tensor::new(vec![b, k], out)
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
