//! Experiment configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tirlab::adapt::AdaptOpts;
use tirlab::encoder::{EncoderConfig, PretrainOpts};
use tirlab::episodes::GeneratorParams;
use tirlab::tir::{TirConfig, TirMode};

use crate::CliError;

/// Environment variable that relative output and cache paths resolve
/// against.
pub const OUTPUT_ROOT_ENV: &str = "TIRLAB_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialPlan {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// Episodes per TIR mode.
    pub count: usize,
    pub modes: Vec<TirMode>,
    /// Worker threads for the trials; results do not depend on it.
    pub parallelism: usize,
}

impl Default for TrialPlan {
    fn default() -> Self {
        Self { n_way: 5, k_shot: 5, m_query: 15, count: 100, modes: TirMode::ALL.to_vec(), parallelism: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisPlan {
    pub enabled: bool,
    /// Blocks whose outputs are dumped and profiled.
    pub taps: Vec<usize>,
    /// Layer for the CKA study; the deepest tap when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cka_layer: Option<usize>,
    /// Images per domain in the dumps.
    pub images: usize,
    /// Epoch spacing of the similarity trajectory.
    pub snapshot_every: usize,
    /// Tokens per class in the attended-token map.
    pub top_n: usize,
}

impl Default for AnalysisPlan {
    fn default() -> Self {
        Self { enabled: true, taps: vec![3, 4, 5], cka_layer: None, images: 50, snapshot_every: 10, top_n: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: String,
    /// Pretrained checkpoints, shared between runs.
    pub cache_dir: String,
    pub generator: GeneratorParams,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainOpts,
    pub tir: TirConfig,
    pub adapt: AdaptOpts,
    pub trials: TrialPlan,
    pub analysis: AnalysisPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            output_dir: "runs/default".into(),
            cache_dir: "cache".into(),
            generator: GeneratorParams::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainOpts::default(),
            tir: TirConfig::default(),
            adapt: AdaptOpts::default(),
            trials: TrialPlan::default(),
            analysis: AnalysisPlan::default(),
        }
    }
}

fn cfg_err(m: impl Into<String>) -> CliError {
    CliError::Config(m.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |r: tirlab::Result<()>| r.map_err(|e| cfg_err(e.to_string()));
        core(self.generator.validate())?;
        core(self.encoder.validate())?;
        core(self.pretrain.validate())?;
        core(self.adapt.validate())?;
        core(self.tir.validate(self.trials.n_way))?;
        core(self.tir.validate_layers(self.encoder.blocks))?;
        let (g, e) = (&self.generator, &self.encoder);
        if g.d_in != e.d_in {
            return Err(cfg_err(format!("generator.d_in = {} but encoder.d_in = {}", g.d_in, e.d_in)));
        }
        if g.tokens != e.tokens {
            return Err(cfg_err(format!("generator.tokens = {} but encoder.tokens = {}", g.tokens, e.tokens)));
        }
        let t = &self.trials;
        if t.n_way < 2 || t.n_way > g.target_classes {
            return Err(cfg_err(format!(
                "trials.n_way = {} must be in [2, generator.target_classes = {}]",
                t.n_way, g.target_classes
            )));
        }
        if t.n_way > g.source_classes {
            return Err(cfg_err("trials.n_way exceeds generator.source_classes".to_string()));
        }
        if t.k_shot == 0 || t.m_query == 0 || t.count == 0 {
            return Err(cfg_err("trials.k_shot, trials.m_query and trials.count must be >= 1"));
        }
        if t.modes.is_empty() {
            return Err(cfg_err("trials.modes must not be empty"));
        }
        for (i, m) in t.modes.iter().enumerate() {
            if t.modes[..i].contains(m) {
                return Err(cfg_err(format!("trials.modes lists {m} twice")));
            }
        }
        if t.parallelism == 0 {
            return Err(cfg_err("trials.parallelism must be >= 1"));
        }
        let a = &self.analysis;
        if let Some(&l) = a.taps.iter().find(|&&l| l >= e.blocks) {
            return Err(cfg_err(format!("analysis.taps contains {l}, encoder has {} blocks", e.blocks)));
        }
        if a.enabled && a.taps.is_empty() {
            return Err(cfg_err("analysis.taps must not be empty when analysis is enabled"));
        }
        if let Some(l) = a.cka_layer {
            if !a.taps.contains(&l) {
                return Err(cfg_err(format!("analysis.cka_layer = {l} is not among analysis.taps")));
            }
        }
        if a.images < 2 {
            return Err(cfg_err("analysis.images must be >= 2"));
        }
        if a.top_n == 0 || a.top_n > e.tokens {
            return Err(cfg_err(format!("analysis.top_n must be in [1, {}]", e.tokens)));
        }
        if self.output_dir.trim().is_empty() {
            return Err(cfg_err("output_dir must not be empty"));
        }
        Ok(())
    }

    /// Digest of everything that affects results; paths and thread counts
    /// are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        c.cache_dir.clear();
        c.trials.parallelism = 0;
        digest(&serde_json::to_string(&c).expect("config serialises"))
    }

    /// Key of the pretrained checkpoint: the benchmark is drawn from the
    /// master seed, so it is part of the key.
    pub fn pretrain_key(&self) -> String {
        let v = serde_json::json!({
            "generator": self.generator,
            "encoder": self.encoder,
            "pretrain": self.pretrain,
            "benchmark_seed": self.master_seed,
        });
        digest(&v.to_string())
    }

    pub fn output_path(&self) -> PathBuf {
        resolve(&self.output_dir)
    }

    pub fn cache_path(&self) -> PathBuf {
        resolve(&self.cache_dir)
    }
}

fn digest(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn resolve(p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p,
    }
}

/// `section.key=value`, with `value` read as a TOML literal and falling back
/// to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| cfg_err(format!("override '{spec}' is not of the form key=value")))?;
    let key = key.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| cfg_err(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap(), c);
        assert_eq!(ExperimentConfig::parse("", &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply_and_type_check() {
        let c = ExperimentConfig::parse(
            "",
            &["trials.count=3".into(), "trials.modes=[\"off\"]".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(c.trials.count, 3);
        assert_eq!(c.trials.modes, vec![TirMode::Off]);
        assert_eq!(c.output_dir, "out/x");
        let e = ExperimentConfig::parse("", &["trials.count=many".into()]).unwrap_err();
        assert!(e.to_string().contains("count"), "{e}");
        assert!(ExperimentConfig::parse("", &["nokey".into()]).is_err());
    }

    #[test]
    fn field_level_errors() {
        let e = ExperimentConfig::parse("[trials]\nn_way = 50\n", &[]).unwrap_err();
        assert!(e.to_string().contains("trials.n_way"), "{e}");
        let e = ExperimentConfig::parse("[encoder]\nd_in = 32\n", &[]).unwrap_err();
        assert!(e.to_string().contains("d_in"), "{e}");
        let e = ExperimentConfig::parse("[tir]\nbogus = 1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::parse("[analysis]\ntaps = [9]\n", &[]).unwrap_err();
        assert!(e.to_string().contains("analysis.taps"), "{e}");
    }

    #[test]
    fn hash_ignores_paths_but_not_seeds() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { master_seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_ne!(a.pretrain_key(), c.pretrain_key());
        let d = ExperimentConfig { adapt: AdaptOpts { epochs: 3, ..a.adapt.clone() }, ..a.clone() };
        assert_eq!(a.pretrain_key(), d.pretrain_key());
    }
}
