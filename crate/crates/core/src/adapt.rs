//! Episodic fine-tuning with low-rank adapters on the query/value
//! projections of every block, optionally with the TIR hook in the loop.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{argmax_rows, similarity_logits, LayerActivations, LayerHook, LoraVars, VisualEncoder};
use crate::episodes::{sample_episode, DomainSpec, Episode, ImageSet};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::stats::{mean_ci95, MeanCi};
use crate::tir::{score_patch_tokens, HookRecord, SumScoreMap, TirConfig, TirHook, TirMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptOpts {
    pub epochs: usize,
    /// Peak step size of the cosine schedule.
    pub lr: f64,
    /// Jittered copies of the support set per epoch.
    pub augment_reps: usize,
    /// Per-coordinate std of the Gaussian token jitter.
    pub jitter: f64,
    pub rank: usize,
    pub scale: f64,
    pub tau: f64,
    /// Record token similarity snapshots every this many epochs (0: never).
    pub snapshot_every: usize,
}

impl Default for AdaptOpts {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-2, augment_reps: 1, jitter: 0.05, rank: 4, scale: 1.0, tau: 0.01, snapshot_every: 0 }
    }
}

impl AdaptOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adapt.lr must be >= 0, got {}", self.lr)));
        }
        if self.augment_reps == 0 {
            return Err(Error::Config("adapt.augment_reps must be >= 1".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config("adapt.jitter must be >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("adapt.tau must be > 0".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("adapt.scale must be finite".into()));
        }
        Ok(())
    }
}

/// `(A [d×r], B [r×d])` per block for the query and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub q: Vec<(Tensor, Tensor)>,
    pub v: Vec<(Tensor, Tensor)>,
}

impl LoraAdapter {
    /// `A ~ N(0, 1/d)`, `B = 0`, so the adapter starts as an exact no-op.
    pub fn new(enc: &VisualEncoder, rank: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let d = enc.cfg.width;
        let std = 1.0 / (d as f64).sqrt();
        let pair = |rng: &mut ChaCha8Rng| {
            let a: Vec<f64> = (0..d * rank)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            (Tensor::new(vec![d, rank], a).expect("shape"), Tensor::zeros(&[rank, d]))
        };
        let mut q = Vec::with_capacity(enc.cfg.blocks);
        let mut v = Vec::with_capacity(enc.cfg.blocks);
        for _ in 0..enc.cfg.blocks {
            q.push(pair(rng));
            v.push(pair(rng));
        }
        Self { rank, scale, q, v }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> (LoraVars, Vec<Var>) {
        let mut params = Vec::new();
        let mut side = |pairs: &[(Tensor, Tensor)]| -> Vec<Option<(Var, Var)>> {
            pairs
                .iter()
                .map(|(a, b)| {
                    if self.rank == 0 {
                        return None;
                    }
                    let va = tape.leaf(a.clone(), trainable);
                    let vb = tape.leaf(b.clone(), trainable);
                    params.push(va);
                    params.push(vb);
                    Some((va, vb))
                })
                .collect()
        };
        let q = side(&self.q);
        let v = side(&self.v);
        (LoraVars { q, v, scale: self.scale }, params)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if self.rank == 0 {
            return out;
        }
        for (a, b) in self.q.iter_mut() {
            out.push(a);
            out.push(b);
        }
        for (a, b) in self.v.iter_mut() {
            out.push(a);
            out.push(b);
        }
        out
    }
}

/// A frozen base encoder seen through an adapter, with the TIR layer that
/// was active during fine-tuning.
pub struct AdaptedEncoder<'a> {
    pub base: &'a VisualEncoder,
    pub adapter: Option<LoraAdapter>,
    pub tir: TirConfig,
}

impl<'a> AdaptedEncoder<'a> {
    /// The pretrained encoder with no adapter.
    pub fn zero_shot(base: &'a VisualEncoder, tir: TirConfig) -> Self {
        Self { base, adapter: None, tir }
    }

    /// Forward pass with TIR scored against `classes`. Returns the CLS
    /// embeddings, the requested taps and the hook's records.
    pub fn forward(
        &self,
        images: &Tensor,
        classes: &Tensor,
        taps: &[usize],
        record: bool,
    ) -> Result<(Tensor, LayerActivations, Vec<HookRecord>)> {
        let mut tape = Tape::new();
        let vars = self.base.bind(&mut tape, false);
        let lora = self.adapter.as_ref().map(|a| a.bind(&mut tape, false).0);
        let x = tape.constant(images.clone());
        let mut hook = self.hook(classes, record)?;
        let out = self.base.forward_on_tape(
            &mut tape,
            &vars,
            x,
            taps,
            hook.as_mut().map(|h| h as &mut dyn LayerHook),
            lora.as_ref(),
        )?;
        let acts = LayerActivations { layers: out.taps.iter().map(|(&l, &v)| (l, tape.value(v).clone())).collect() };
        let records = hook.map(|h| h.records).unwrap_or_default();
        Ok((tape.value(out.cls).clone(), acts, records))
    }

    fn hook(&self, classes: &Tensor, record: bool) -> Result<Option<TirHook>> {
        if self.tir.mode == TirMode::Off && !record {
            return Ok(None);
        }
        let mut h = TirHook::new(self.tir.clone(), classes.clone())?;
        h.recording = record;
        Ok(Some(h))
    }
}

/// Fraction of `query` whose nearest class (by cosine) is its label.
/// `classes` rows are indexed by the query labels.
pub fn evaluate_episode(enc: &AdaptedEncoder, classes: &Tensor, query: &ImageSet, tau: f64) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::Argument("empty query set".into()));
    }
    if let Some(&y) = query.labels.iter().find(|&&y| y >= classes.rows()) {
        return Err(Error::Argument(format!("query label {y} outside {} classes", classes.rows())));
    }
    let (f, _, _) = enc.forward(&query.images, classes, &[], false)?;
    let pred = argmax_rows(&similarity_logits(&f, classes, tau)?);
    Ok(pred.iter().zip(&query.labels).filter(|(p, y)| p == y).count() as f64 / query.len() as f64)
}

/// Token similarity state of the support set at one epoch and layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySnapshot {
    pub epoch: usize,
    pub layer: usize,
    pub scores: SumScoreMap,
    /// Mean cosine of each patch token with the episode classes, `[B·M]`.
    pub mean_similarity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub support_accuracy: f64,
    pub query_accuracy: f64,
    pub snapshots: Vec<SimilaritySnapshot>,
    pub seed: u64,
    pub config_hash: String,
}

fn snapshot(
    enc: &AdaptedEncoder,
    support: &ImageSet,
    classes: &Tensor,
    epoch: usize,
    out: &mut Vec<SimilaritySnapshot>,
) -> Result<()> {
    let layers = enc.tir.insertion_layers.clone();
    let (_, acts, _) = enc.forward(&support.images, classes, &layers, false)?;
    for (&layer, a) in &acts.layers {
        let (scores, sim) = score_patch_tokens(a, support.len(), enc.base, classes, enc.tir.topk_ratio)?;
        let k = classes.rows();
        let mean_similarity = sim.data().chunks(k).map(|r| r.iter().sum::<f64>() / k as f64).collect();
        out.push(SimilaritySnapshot { epoch, layer, scores, mean_similarity });
    }
    Ok(())
}

/// Fine-tunes fresh adapters on the episode's support set and evaluates on
/// its query set. `classes` holds one text embedding per way.
pub fn finetune_episode<'a>(
    enc: &'a VisualEncoder,
    classes: &Tensor,
    episode: &Episode,
    tir: &TirConfig,
    opts: &AdaptOpts,
    seed: u64,
    config_hash: &str,
) -> Result<(AdaptedEncoder<'a>, FinetuneReport)> {
    opts.validate()?;
    tir.validate(classes.rows())?;
    tir.validate_layers(enc.cfg.blocks)?;
    if classes.rows() < 2 || classes.rows() != episode.n_way() {
        return Err(Error::Argument(format!(
            "need one class embedding per way (N >= 2), got {} for {} ways",
            classes.rows(),
            episode.n_way()
        )));
    }
    if episode.support.is_empty() {
        return Err(Error::Argument("empty support set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapter = LoraAdapter::new(enc, opts.rank, opts.scale, &mut rng);
    let support = &episode.support;
    let labels: Vec<usize> = (0..opts.augment_reps).flat_map(|_| support.labels.iter().copied()).collect();
    let class_t = classes.transpose()?;
    let std = opts.jitter;
    let mut losses = Vec::with_capacity(opts.epochs);
    let mut snapshots = Vec::new();

    for epoch in 0..opts.epochs {
        if opts.snapshot_every > 0 && epoch % opts.snapshot_every == 0 {
            let view = AdaptedEncoder { base: enc, adapter: Some(adapter.clone()), tir: tir.clone() };
            snapshot(&view, support, classes, epoch, &mut snapshots)?;
        }
        let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / opts.epochs as f64).cos());
        let mut data = Vec::with_capacity(opts.augment_reps * support.images.len());
        for _ in 0..opts.augment_reps {
            data.extend(support.images.data().iter().map(|&v| {
                let n: f64 = StandardNormal.sample(&mut rng);
                v + std * n
            }));
        }
        let mut shape = support.images.shape().to_vec();
        shape[0] *= opts.augment_reps;
        let x = Tensor::new(shape, data)?;

        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape, false);
        let (lora, params) = adapter.bind(&mut tape, true);
        let xv = tape.constant(x);
        let mut hook = if tir.mode == TirMode::Off {
            None
        } else {
            let mut h = TirHook::new(tir.clone(), classes.clone())?;
            h.recording = false;
            Some(h)
        };
        let out = enc.forward_on_tape(
            &mut tape,
            &vars,
            xv,
            &[],
            hook.as_mut().map(|h| h as &mut dyn LayerHook),
            Some(&lora),
        )?;
        let ct = tape.constant(class_t.clone());
        let logits = tape.matmul(out.cls, ct)?;
        let logits = tape.scale(logits, 1.0 / opts.tau);
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training { step: epoch, loss: value });
        }
        losses.push(value);
        if params.is_empty() {
            continue;
        }
        let mut grads = tape.backward(loss)?;
        for (p, v) in adapter.tensors_mut().into_iter().zip(params) {
            if let Some(g) = grads.take_data(v) {
                for (w, gi) in p.data_mut().iter_mut().zip(g) {
                    *w -= lr * gi;
                }
            }
        }
    }

    let adapted = AdaptedEncoder { base: enc, adapter: Some(adapter), tir: tir.clone() };
    if opts.snapshot_every > 0 {
        snapshot(&adapted, support, classes, opts.epochs, &mut snapshots)?;
    }
    let support_accuracy = evaluate_episode(&adapted, classes, support, opts.tau)?;
    let query_accuracy = evaluate_episode(&adapted, classes, &episode.query, opts.tau)?;
    Ok((
        adapted,
        FinetuneReport {
            losses,
            support_accuracy,
            query_accuracy,
            snapshots,
            seed,
            config_hash: config_hash.to_string(),
        },
    ))
}

/// SplitMix64 finaliser over `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const EPISODE_STREAM: u64 = 1;
const ADAPTER_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub tir: TirConfig,
    pub adapt: AdaptOpts,
    pub master_seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub mode: TirMode,
    pub episode_seed: u64,
    pub adapter_seed: u64,
    pub config_hash: String,
    pub accuracy: Option<f64>,
    pub zero_shot_accuracy: Option<f64>,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialAggregate {
    pub mode: TirMode,
    pub accuracy: MeanCi,
    pub failed: usize,
    pub records: Vec<TrialRecord>,
}

impl TrialAggregate {
    /// Accuracies of successful trials, in trial order.
    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.accuracy).collect()
    }
}

/// Seeds of trial `i` under `master_seed`: `(episode, adapter)`.
pub fn trial_seeds(master_seed: u64, i: usize) -> (u64, u64) {
    (derive_seed(master_seed, EPISODE_STREAM, i as u64), derive_seed(master_seed, ADAPTER_STREAM, i as u64))
}

/// One episode per trial drawn from `domain`, each fine-tuned from `enc`
/// with fresh adapters. Seeds depend only on the master seed and the trial
/// index, so results do not depend on `parallelism` and trial `i` sees the
/// same episode under every TIR mode.
pub fn run_trials(
    enc: &VisualEncoder,
    class_table: &crate::encoder::ClassEmbeddings,
    domain: &DomainSpec,
    cfg: &TrialConfig,
    trial_count: usize,
    parallelism: usize,
) -> Result<TrialAggregate> {
    if trial_count == 0 {
        return Err(Error::Argument("trial_count must be >= 1".into()));
    }
    let one = |i: usize| -> TrialRecord {
        let (episode_seed, adapter_seed) = trial_seeds(cfg.master_seed, i);
        let mut rec = TrialRecord {
            trial: i,
            mode: cfg.tir.mode,
            episode_seed,
            adapter_seed,
            config_hash: cfg.config_hash.clone(),
            accuracy: None,
            zero_shot_accuracy: None,
            first_loss: None,
            final_loss: None,
            error: None,
        };
        let res = (|| -> Result<()> {
            let ep = sample_episode(domain, cfg.n_way, cfg.k_shot, cfg.m_query, episode_seed)?;
            let ids: Vec<usize> = ep.classes.iter().map(|&c| domain.class_ids[c]).collect();
            let classes = class_table.subset(&ids)?;
            let zs = AdaptedEncoder::zero_shot(enc, cfg.tir.with_mode(TirMode::Off));
            rec.zero_shot_accuracy = Some(evaluate_episode(&zs, &classes, &ep.query, cfg.adapt.tau)?);
            let (_, report) =
                finetune_episode(enc, &classes, &ep, &cfg.tir, &cfg.adapt, adapter_seed, &cfg.config_hash)?;
            rec.accuracy = Some(report.query_accuracy);
            rec.first_loss = report.losses.first().copied();
            rec.final_loss = report.losses.last().copied();
            Ok(())
        })();
        if let Err(e) = res {
            rec.error = Some(e.to_string());
            rec.accuracy = None;
        }
        rec
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let records: Vec<TrialRecord> = pool.install(|| (0..trial_count).into_par_iter().map(one).collect());
    let accs: Vec<f64> = records.iter().filter_map(|r| r.accuracy).collect();
    Ok(TrialAggregate { mode: cfg.tir.mode, accuracy: mean_ci95(&accs), failed: records.len() - accs.len(), records })
}

/// Appends one JSON line per record.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
