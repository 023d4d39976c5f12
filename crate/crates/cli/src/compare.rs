//! Paired accuracy deltas between two run manifests.

use serde::Serialize;
use tirlab::stats::{paired_delta, MeanCi};
use tirlab::tir::TirMode;

use crate::manifest::RunManifest;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaRow {
    pub mode_a: TirMode,
    pub mode_b: TirMode,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `a − b` over trials that succeeded in both runs.
    pub delta: MeanCi,
}

/// Fields that must agree for trial `i` of both runs to be the same episode.
fn mismatches(a: &RunManifest, b: &RunManifest) -> Vec<String> {
    let mut out = Vec::new();
    if a.config.master_seed != b.config.master_seed {
        out.push("master_seed".to_string());
    }
    let (ga, gb) = (
        serde_json::to_value(&a.config.generator).expect("serialises"),
        serde_json::to_value(&b.config.generator).expect("serialises"),
    );
    for (k, v) in ga.as_object().expect("struct") {
        if gb.get(k) != Some(v) {
            out.push(format!("generator.{k}"));
        }
    }
    let (ta, tb) = (&a.config.trials, &b.config.trials);
    for (name, x, y) in [
        ("n_way", ta.n_way, tb.n_way),
        ("k_shot", ta.k_shot, tb.k_shot),
        ("m_query", ta.m_query, tb.m_query),
        ("count", ta.count, tb.count),
    ] {
        if x != y {
            out.push(format!("trials.{name}"));
        }
    }
    out
}

/// With explicit modes, one row comparing `mode_a` in A against `mode_b` in
/// B; otherwise one row per mode present in both.
pub fn compare(a: &RunManifest, b: &RunManifest, modes: Option<(TirMode, TirMode)>) -> Result<Vec<DeltaRow>, CliError> {
    let bad = mismatches(a, b);
    if !bad.is_empty() {
        return Err(CliError::Config(format!("runs are not comparable; differing fields: {}", bad.join(", "))));
    }
    let pairs: Vec<(TirMode, TirMode)> = match modes {
        Some(p) => vec![p],
        None => a.metrics.iter().map(|m| m.mode).filter(|m| b.mode(*m).is_some()).map(|m| (m, m)).collect(),
    };
    if pairs.is_empty() {
        return Err(CliError::Config("the runs share no TIR mode".into()));
    }
    pairs
        .into_iter()
        .map(|(ma, mb)| {
            let x = a.mode(ma).ok_or_else(|| CliError::Config(format!("first run has no {ma} trials")))?;
            let y = b.mode(mb).ok_or_else(|| CliError::Config(format!("second run has no {mb} trials")))?;
            let (xs, ys): (Vec<f64>, Vec<f64>) =
                x.per_trial.iter().zip(&y.per_trial).filter_map(|(p, q)| Some(((*p)?, (*q)?))).unzip();
            Ok(DeltaRow {
                mode_a: ma,
                mode_b: mb,
                mean_a: x.accuracy.mean,
                mean_b: y.accuracy.mean,
                delta: paired_delta(&xs, &ys),
            })
        })
        .collect()
}

pub fn render(rows: &[DeltaRow]) -> String {
    let mut s = format!(
        "{:<14} {:<14} {:>8} {:>8} {:>9} {:>9} {:>5}\n",
        "mode_a", "mode_b", "mean_a", "mean_b", "delta", "ci95", "n"
    );
    for r in rows {
        s += &format!(
            "{:<14} {:<14} {:>8.4} {:>8.4} {:>+9.4} {:>9.4} {:>5}\n",
            r.mode_a.name(),
            r.mode_b.name(),
            r.mean_a,
            r.mean_b,
            r.delta.mean,
            r.delta.half_width,
            r.delta.n
        );
    }
    s
}
