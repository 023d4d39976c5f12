//! Measurements over token activations: norm profiles by Sum score, CKA
//! between domains under token masking, similarity trajectories during
//! fine-tuning, per-class attended tokens, and recovery of the generator's
//! token roles.

mod cka;
mod dump;
pub mod tables;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cka::cka;
pub use dump::{strip_cls, ActivationDump, Provenance, DUMP_MAGIC, DUMP_VERSION};

use crate::adapt::SimilaritySnapshot;
use crate::episodes::Role;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{topk_indices, Tensor};
use crate::tir::SumScoreMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormGroup {
    pub sum: u32,
    pub count: usize,
    /// `None` for an empty group.
    pub mean_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormProfile {
    pub layer: usize,
    /// One entry per Sum value `0..=K`.
    pub groups: Vec<NormGroup>,
}

impl LayerNormProfile {
    pub fn group(&self, sum: u32) -> Option<&NormGroup> {
        self.groups.get(sum as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub classes: usize,
    pub layers: Vec<LayerNormProfile>,
}

impl NormProfile {
    pub fn layer(&self, layer: usize) -> Option<&LayerNormProfile> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Mean L2 norm of the patch tokens (`[B × M × D]` per layer) grouped by
/// their Sum score at the same layer.
pub fn norm_profile(
    acts: &BTreeMap<usize, Tensor>,
    sums: &BTreeMap<usize, SumScoreMap>,
    k: usize,
) -> Result<NormProfile> {
    if acts.keys().ne(sums.keys()) {
        return Err(Error::Argument(format!(
            "activation layers {:?} differ from score layers {:?}",
            acts.keys().collect::<Vec<_>>(),
            sums.keys().collect::<Vec<_>>()
        )));
    }
    let mut layers = Vec::with_capacity(acts.len());
    for (&layer, t) in acts {
        let s = &sums[&layer];
        if t.rows() != s.scores.len() {
            return dim_err("norm_profile", t.shape(), &[s.batch, s.tokens]);
        }
        let mut total = vec![0.0; k + 1];
        let mut count = vec![0usize; k + 1];
        for (r, &sum) in s.scores.iter().enumerate() {
            let sum = sum as usize;
            if sum > k {
                return Err(Error::Argument(format!("Sum score {sum} exceeds K = {k}")));
            }
            total[sum] += t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            count[sum] += 1;
        }
        let groups = (0..=k)
            .map(|i| NormGroup {
                sum: i as u32,
                count: count[i],
                mean_norm: (count[i] > 0).then(|| total[i] / count[i] as f64),
            })
            .collect();
        layers.push(LayerNormProfile { layer, groups });
    }
    Ok(NormProfile { classes: k, layers })
}

/// Norm profile of a dump with Sum scores recomputed from its own arrays.
pub fn dump_norm_profile(dump: &ActivationDump) -> Result<NormProfile> {
    norm_profile(&dump.layers, &dump.all_sum_scores()?, dump.class_count())
}

/// Test-time token counterfactuals applied before pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "plain")]
    Plain,
    /// Sum = K tokens set to zero.
    #[serde(rename = "maskK")]
    MaskK,
    /// Sum = 1 tokens doubled.
    #[serde(rename = "enhance1")]
    Enhance1,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Plain, Condition::MaskK, Condition::Enhance1];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Plain => "plain",
            Condition::MaskK => "maskK",
            Condition::Enhance1 => "enhance1",
        }
    }

    /// Per-token multipliers for `scores` with `k` classes.
    pub fn weights(self, scores: &SumScoreMap, k: usize) -> Vec<f64> {
        scores
            .scores
            .iter()
            .map(|&s| match self {
                Condition::MaskK if s as usize == k => 0.0,
                Condition::Enhance1 if s == 1 => 2.0,
                _ => 1.0,
            })
            .collect()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown condition '{s}' (expected plain, maskK or enhance1)")))
    }
}

/// Weighted mean over each image's tokens: `[B × M × D]` to `[B × D]`.
pub fn pool_images(tokens: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (b, m, d) = match tokens.shape() {
        [b, m, d] => (*b, *m, *d),
        s => return dim_err("pool_images", s, &[weights.len()]),
    };
    if weights.len() != b * m {
        return dim_err("pool_images", tokens.shape(), &[weights.len()]);
    }
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        let acc = &mut out[bi * d..(bi + 1) * d];
        for i in 0..m {
            let w = weights[bi * m + i];
            for (a, v) in acc.iter_mut().zip(tokens.row(bi * m + i)) {
                *a += w * v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
    }
    Tensor::new(vec![b, d], out)
}

/// Pooled image representations of a dump layer under a condition, with
/// Sum scores taken against the dump's own classes.
pub fn pooled_condition(dump: &ActivationDump, layer: usize, condition: Condition) -> Result<Tensor> {
    let scores = dump.sum_scores(layer)?;
    pool_images(dump.layer(layer)?, &condition.weights(&scores, dump.class_count()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaEntry {
    pub condition: Condition,
    pub value: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub layer: usize,
    pub entries: Vec<CkaEntry>,
}

impl CkaReport {
    pub fn get(&self, c: Condition) -> Option<f64> {
        self.entries.iter().find(|e| e.condition == c).map(|e| e.value)
    }
}

/// CKA between source and target images at `layer` (default: the deepest
/// layer of the source dump) with the condition applied to both sides.
pub fn domain_cka_experiment(
    source: &ActivationDump,
    target: &ActivationDump,
    layer: Option<usize>,
    condition: Condition,
) -> Result<CkaEntry> {
    if source.batch() != target.batch() {
        return Err(Error::Argument(format!("source has {} images but target has {}", source.batch(), target.batch())));
    }
    let layer = resolve_layer(source, layer)?;
    let x = pooled_condition(source, layer, condition)?;
    let y = pooled_condition(target, layer, condition)?;
    Ok(CkaEntry { condition, value: cka(&x, &y)?, samples: source.batch() })
}

pub fn cka_report(
    source: &ActivationDump,
    target: &ActivationDump,
    layer: Option<usize>,
    conditions: &[Condition],
) -> Result<CkaReport> {
    let layer = resolve_layer(source, layer)?;
    let entries = conditions
        .iter()
        .map(|&c| domain_cka_experiment(source, target, Some(layer), c))
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaReport { layer, entries })
}

fn resolve_layer(dump: &ActivationDump, layer: Option<usize>) -> Result<usize> {
    match layer {
        Some(l) => dump.layer(l).map(|_| l),
        None => dump.deepest_layer().ok_or_else(|| Error::Argument("dump has no layers".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub group: String,
    pub count: usize,
    /// Mean token–class similarity of the group; `None` when empty.
    pub value: Option<f64>,
}

/// Group labels in output order for `k` classes.
pub fn trajectory_groups(k: usize) -> Vec<String> {
    let mut g = Vec::new();
    for s in [0, 1, k] {
        g.push(format!("Sum={s}"));
        g.push(format!("Sum={s}_OP"));
    }
    g
}

/// Per-epoch mean similarity of the Sum = 0, 1 and K groups and of their
/// complements (`_OP`), using the snapshots of `layer` (default: the
/// deepest layer present).
pub fn similarity_trajectory(history: &[SimilaritySnapshot], layer: Option<usize>) -> Result<Vec<TrajectoryPoint>> {
    let layer = match layer {
        Some(l) => l,
        None => {
            history.iter().map(|s| s.layer).max().ok_or_else(|| Error::Argument("empty similarity history".into()))?
        }
    };
    let snaps: Vec<&SimilaritySnapshot> = history.iter().filter(|s| s.layer == layer).collect();
    if snaps.is_empty() {
        return Err(Error::Argument(format!("no snapshots at layer {layer}")));
    }
    let mut out = Vec::new();
    for s in snaps {
        let k = s.scores.classes as u32;
        if s.mean_similarity.len() != s.scores.scores.len() {
            return dim_err("similarity_trajectory", &[s.mean_similarity.len()], &[s.scores.scores.len()]);
        }
        for (target, name) in [(0, 0), (1, 1), (k, k)] {
            for complement in [false, true] {
                let (mut total, mut count) = (0.0, 0usize);
                for (&sum, &v) in s.scores.scores.iter().zip(&s.mean_similarity) {
                    if (sum == target) != complement {
                        total += v;
                        count += 1;
                    }
                }
                out.push(TrajectoryPoint {
                    epoch: s.epoch,
                    group: format!("Sum={name}{}", if complement { "_OP" } else { "" }),
                    count,
                    value: (count > 0).then(|| total / count as f64),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttendedMap {
    /// Per class, the `top_n` most similar token indices, most similar first.
    pub sets: Vec<Vec<usize>>,
    /// `overlap[a][b] = |sets[a] ∩ sets[b]|`.
    pub overlap: Vec<Vec<usize>>,
}

/// Top tokens per class from one image's similarities `[M × K]`.
pub fn attended_token_map(sim: &Tensor, top_n: usize) -> Result<AttendedMap> {
    if sim.shape().len() != 2 {
        return dim_err("attended_token_map", sim.shape(), &[top_n]);
    }
    let (m, k) = (sim.rows(), sim.last_dim());
    let mut sets = Vec::with_capacity(k);
    let mut col = vec![0.0; m];
    for j in 0..k {
        for (i, c) in col.iter_mut().enumerate() {
            *c = sim.data()[i * k + j];
        }
        sets.push(topk_indices(&col, top_n)?);
    }
    let overlap =
        sets.iter().map(|a| sets.iter().map(|b| a.iter().filter(|i| b.contains(i)).count()).collect()).collect();
    Ok(AttendedMap { sets, overlap })
}

/// [`attended_token_map`] for image `image` of a dump layer.
pub fn dump_attended_map(dump: &ActivationDump, layer: usize, image: usize, top_n: usize) -> Result<AttendedMap> {
    if image >= dump.batch() {
        return Err(Error::Index(format!("image {image} of {}", dump.batch())));
    }
    let sim = dump.similarity(layer)?;
    let (m, k) = (dump.tokens(), dump.class_count());
    let one = Tensor::new(vec![m, k], sim.data()[image * m * k..(image + 1) * m * k].to_vec())?;
    attended_token_map(&one, top_n)
}

/// How often generator roles land in the Sum = K and Sum = 1 groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleEnrichment {
    /// Fraction of domain tokens among all tokens.
    pub domain_base: f64,
    /// Fraction of domain tokens among Sum = K tokens (`None`: group empty).
    pub domain_in_top: Option<f64>,
    pub disc_base: f64,
    /// Fraction of discriminative tokens among Sum = 1 tokens.
    pub disc_in_single: Option<f64>,
}

impl RoleEnrichment {
    /// Enrichment over the base rate; an empty group counts as no
    /// enrichment at all.
    pub fn domain_lift(&self) -> f64 {
        self.domain_in_top.map_or(-self.domain_base, |f| f - self.domain_base)
    }

    pub fn disc_lift(&self) -> f64 {
        self.disc_in_single.map_or(-self.disc_base, |f| f - self.disc_base)
    }
}

pub fn role_enrichment(scores: &SumScoreMap, roles: &[Role]) -> Result<RoleEnrichment> {
    if roles.len() != scores.scores.len() || roles.is_empty() {
        return dim_err("role_enrichment", &[roles.len()], &[scores.scores.len()]);
    }
    let k = scores.classes as u32;
    let frac = |group: &dyn Fn(u32) -> bool, role: Role| {
        let (mut hit, mut n) = (0usize, 0usize);
        for (&s, &r) in scores.scores.iter().zip(roles) {
            if group(s) {
                n += 1;
                hit += (r == role) as usize;
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    };
    let all = |_: u32| true;
    Ok(RoleEnrichment {
        domain_base: frac(&all, Role::Domain).unwrap_or(0.0),
        domain_in_top: frac(&|s| s == k, Role::Domain),
        disc_base: frac(&all, Role::Discriminative).unwrap_or(0.0),
        disc_in_single: frac(&|s| s == 1, Role::Discriminative),
    })
}
