//! `run`: pretrain (or reuse the cached checkpoint), episodic trials per TIR
//! mode, then the analysis stage. The manifest is written last.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tirlab::adapt::{
    append_jsonl, derive_seed, finetune_episode, run_trials, trial_seeds, AdaptedEncoder, TrialConfig,
};
use tirlab::analysis::{
    cka_report, dump_attended_map, dump_norm_profile, role_enrichment, similarity_trajectory, tables, ActivationDump,
    Condition,
};
use tirlab::encoder::{load_checkpoint, pretrain_source, save_checkpoint, PretrainReport, VisualEncoder};
use tirlab::episodes::{make_benchmark, sample_episode, sample_images, Benchmark};
use tirlab::stats::mean_ci95;
use tirlab::tir::TirMode;

use crate::config::ExperimentConfig;
use crate::manifest::{write_atomic, ModeMetrics, PretrainSummary, RunManifest, RunStatus, MANIFEST_FILE};
use crate::CliError;

const ANALYSIS_STREAM: u64 = 3;

struct RunLog {
    file: File,
    quiet: bool,
}

impl RunLog {
    fn line(&mut self, msg: &str) {
        let stamp = chrono::Utc::now().format("%H:%M:%S");
        let _ = writeln!(self.file, "{stamp} {msg}");
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

struct Run {
    dir: PathBuf,
    artifacts: BTreeMap<String, PathBuf>,
    analysis: BTreeMap<String, f64>,
    metrics: Vec<ModeMetrics>,
    pretrain: Option<PretrainSummary>,
    log: RunLog,
}

impl Run {
    fn artifact(&mut self, name: &str, rel: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        write_atomic(&path, bytes)?;
        self.artifacts.insert(name.into(), PathBuf::from(rel));
        Ok(())
    }
}

pub struct RunOptions {
    /// Suppress progress lines on stderr (they still go to `run.log`).
    pub quiet: bool,
}

/// Runs the whole pipeline for a validated config. Stage failures still
/// produce a manifest, marked failed, before the error is returned.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::stage("setup", e))?;
    let log_file = File::create(dir.join("run.log")).map_err(|e| CliError::stage("setup", e))?;
    let _ = std::fs::remove_file(dir.join(MANIFEST_FILE));
    let mut run = Run {
        dir: dir.clone(),
        artifacts: BTreeMap::from([("log".to_string(), PathBuf::from("run.log"))]),
        analysis: BTreeMap::new(),
        metrics: Vec::new(),
        pretrain: None,
        log: RunLog { file: log_file, quiet: opts.quiet },
    };
    run.log.line(&format!("config {} -> {}", &cfg.hash()[..12], dir.display()));
    let outcome = stages(cfg, &mut run);
    let (status, failed_stage, error) = match &outcome {
        Ok(()) => (RunStatus::Ok, None, None),
        Err(CliError::Stage { stage, message }) => (RunStatus::Failed, Some(stage.clone()), Some(message.clone())),
        Err(e) => (RunStatus::Failed, None, Some(e.to_string())),
    };
    if let Some(e) = &error {
        run.log.line(&format!("failed: {e}"));
    }
    let manifest = RunManifest {
        status,
        failed_stage,
        error,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        pretrain: run.pretrain.clone(),
        artifacts: run.artifacts.clone(),
        metrics: run.metrics.clone(),
        analysis: run.analysis.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes()).map_err(|e| CliError::stage("manifest", e))?;
    outcome.map(|_| manifest)
}

fn stages(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let bench = make_benchmark(cfg.master_seed, &cfg.generator, cfg.encoder.text_dim)
        .map_err(|e| CliError::stage("benchmark", e))?;
    let enc = pretrain_stage(cfg, &bench, run).map_err(|e| CliError::stage("pretrain", e))?;
    trials_stage(cfg, &enc, &bench, run).map_err(|e| CliError::stage("trials", e))?;
    if cfg.analysis.enabled {
        analysis_stage(cfg, &enc, &bench, run).map_err(|e| CliError::stage("analysis", e))?;
    }
    run.log.line("done");
    Ok(())
}

#[derive(Debug, thiserror::Error)]
enum StageError {
    #[error(transparent)]
    Core(#[from] tirlab::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

fn pretrain_stage(cfg: &ExperimentConfig, bench: &Benchmark, run: &mut Run) -> Result<VisualEncoder, StageError> {
    let key = cfg.pretrain_key();
    let cache = cfg.cache_path();
    std::fs::create_dir_all(&cache)?;
    let ckpt = cache.join(format!("pretrain-{}.ckpt", &key[..16]));
    let report_path = ckpt.with_extension("json");
    let (enc, report, hit) = if ckpt.exists() && report_path.exists() {
        let enc = load_checkpoint(&ckpt)?;
        let report: PretrainReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)
            .map_err(|e| StageError::Other(format!("bad cached report: {e}")))?;
        run.log.line(&format!("pretrain: cache hit {}", ckpt.display()));
        (enc, report, true)
    } else {
        run.log.line(&format!("pretrain: {} steps", cfg.pretrain.steps));
        let mut enc = VisualEncoder::new(cfg.encoder.clone(), cfg.pretrain.seed)?;
        let report = pretrain_source(&mut enc, &bench.classes, &bench.source, &cfg.pretrain)?;
        save_checkpoint(&enc, &ckpt)?;
        let text = serde_json::to_string(&report).expect("report serialises");
        write_atomic(&report_path, text.as_bytes())?;
        (enc, report, false)
    };
    run.log.line(&format!("pretrain: source accuracy {:.3}", report.train_accuracy));
    run.pretrain = Some(PretrainSummary {
        cache_key: key,
        cache_hit: hit,
        checkpoint: ckpt,
        train_accuracy: report.train_accuracy,
    });
    Ok(enc)
}

fn trials_stage(
    cfg: &ExperimentConfig,
    enc: &VisualEncoder,
    bench: &Benchmark,
    run: &mut Run,
) -> Result<(), StageError> {
    let path = run.dir.join("trials.jsonl");
    File::create(&path)?;
    for &mode in &cfg.trials.modes {
        let tc = TrialConfig {
            n_way: cfg.trials.n_way,
            k_shot: cfg.trials.k_shot,
            m_query: cfg.trials.m_query,
            tir: cfg.tir.with_mode(mode),
            adapt: cfg.adapt.clone(),
            master_seed: cfg.master_seed,
            config_hash: cfg.hash(),
        };
        let agg = run_trials(enc, &bench.classes, &bench.target, &tc, cfg.trials.count, cfg.trials.parallelism)?;
        append_jsonl(&path, &agg.records)?;
        let zs: Vec<f64> = agg.records.iter().filter_map(|r| r.zero_shot_accuracy).collect();
        run.log.line(&format!(
            "trials: {mode} accuracy {:.4} ± {:.4} over {} ({} failed)",
            agg.accuracy.mean, agg.accuracy.half_width, agg.accuracy.n, agg.failed
        ));
        run.metrics.push(ModeMetrics {
            mode,
            accuracy: agg.accuracy,
            zero_shot_accuracy: mean_ci95(&zs).mean,
            failed: agg.failed,
            per_trial: agg.records.iter().map(|r| r.accuracy).collect(),
        });
    }
    run.artifacts.insert("trials".into(), PathBuf::from("trials.jsonl"));
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> tirlab::Result<()>) -> Result<Vec<u8>, StageError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Dumps and tables for one episode (trial 0's) before fine-tuning and
/// after fine-tuning without TIR and with the full rule.
fn analysis_stage(
    cfg: &ExperimentConfig,
    enc: &VisualEncoder,
    bench: &Benchmark,
    run: &mut Run,
) -> Result<(), StageError> {
    let a = &cfg.analysis;
    let n_way = cfg.trials.n_way;
    let (episode_seed, adapter_seed) = trial_seeds(cfg.master_seed, 0);
    let ep = sample_episode(&bench.target, n_way, cfg.trials.k_shot, cfg.trials.m_query, episode_seed)?;
    let tgt_ids: Vec<usize> = ep.classes.iter().map(|&c| bench.target.class_ids[c]).collect();
    let tgt_classes = bench.classes.subset(&tgt_ids)?;
    let src_classes = bench.classes.subset(&bench.source.class_ids[..n_way])?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, ANALYSIS_STREAM, 0));
    let labels: Vec<usize> = (0..a.images).map(|i| i % n_way).collect();
    let local: Vec<usize> = (0..n_way).collect();
    let src_imgs = sample_images(&bench.source, &local, &labels, 0, &mut rng)?;
    let tgt_imgs = sample_images(&bench.target, &ep.classes, &labels, 0, &mut rng)?;

    let mut stages: Vec<(String, AdaptedEncoder)> =
        vec![("zero_shot".into(), AdaptedEncoder::zero_shot(enc, cfg.tir.with_mode(TirMode::Off)))];
    let opts = tirlab::adapt::AdaptOpts { snapshot_every: a.snapshot_every, ..cfg.adapt.clone() };
    for mode in [TirMode::Off, TirMode::FullLinear] {
        if !cfg.trials.modes.contains(&mode) {
            continue;
        }
        let (adapted, report) =
            finetune_episode(enc, &tgt_classes, &ep, &cfg.tir.with_mode(mode), &opts, adapter_seed, &cfg.hash())?;
        if !report.snapshots.is_empty() {
            let traj = similarity_trajectory(&report.snapshots, None)?;
            let bytes = csv_bytes(|b| tables::write_trajectory(&traj, b))?;
            run.artifact(&format!("trajectory/{mode}"), &format!("trajectory_{mode}.csv"), &bytes)?;
        }
        stages.push((format!("finetuned_{mode}"), adapted));
    }

    let mut roles = String::from("stage,domain,layer,metric,value\n");
    for (stage, adapted) in &stages {
        run.log.line(&format!("analysis: {stage}"));
        let src = ActivationDump::capture(adapted, &src_imgs, &src_classes, &a.taps, cfg.tir.topk_ratio)?;
        let tgt = ActivationDump::capture(adapted, &tgt_imgs, &tgt_classes, &a.taps, cfg.tir.topk_ratio)?;
        for (side, dump) in [("source", &src), ("target", &tgt)] {
            let mut bytes = Vec::new();
            dump.write_to(&mut bytes)?;
            run.artifact(&format!("dump/{stage}/{side}"), &format!("dumps/{stage}_{side}.tirdump"), &bytes)?;
            for (&layer, scores) in &dump.all_sum_scores()? {
                let e = role_enrichment(scores, dump.roles.as_deref().unwrap_or_default())?;
                for (metric, v) in [
                    ("domain_base", Some(e.domain_base)),
                    ("domain_in_top", e.domain_in_top),
                    ("disc_base", Some(e.disc_base)),
                    ("disc_in_single", e.disc_in_single),
                ] {
                    let v = v.map(|x| x.to_string()).unwrap_or_default();
                    let _ = writeln!(roles, "{stage},{side},{layer},{metric},{v}");
                }
            }
        }
        let profile = dump_norm_profile(&tgt)?;
        let bytes = csv_bytes(|b| tables::write_norm_profile(&profile, b))?;
        run.artifact(&format!("norm_profile/{stage}"), &format!("norm_profile_{stage}.csv"), &bytes)?;
        let deepest = *a.taps.iter().max().expect("validated non-empty");
        let k = tgt.class_count() as u32;
        if let Some(g) = profile.layer(deepest).and_then(|l| l.group(k)).and_then(|g| g.mean_norm) {
            run.analysis.insert(format!("{stage}/sum_k_norm"), g);
        }
        if let Some(g) = profile.layer(deepest).and_then(|l| l.group(1)).and_then(|g| g.mean_norm) {
            run.analysis.insert(format!("{stage}/sum_1_norm"), g);
        }
        let report = cka_report(&src, &tgt, a.cka_layer, &Condition::ALL)?;
        let bytes = csv_bytes(|b| tables::write_cka(&report, b))?;
        run.artifact(&format!("cka/{stage}"), &format!("cka_{stage}.csv"), &bytes)?;
        for e in &report.entries {
            run.analysis.insert(format!("{stage}/cka_{}", e.condition), e.value);
        }
        let map = dump_attended_map(&tgt, report.layer, 0, a.top_n)?;
        let text = serde_json::to_string_pretty(&map).map_err(|e| StageError::Other(e.to_string()))?;
        run.artifact(&format!("attended/{stage}"), &format!("attended_{stage}.json"), text.as_bytes())?;
    }
    run.artifact("roles", "roles.csv", roles.as_bytes())?;
    Ok(())
}

/// Path of a run artifact recorded in `manifest`.
pub fn artifact_path(run_dir: &Path, manifest: &RunManifest, name: &str) -> Option<PathBuf> {
    manifest.artifacts.get(name).map(|p| run_dir.join(p))
}
