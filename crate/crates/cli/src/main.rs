use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tirlab::analysis::Condition;
use tirlab::tir::TirMode;
use tirlab_cli::analyze::{analyze, AnalyzeRequest};
use tirlab_cli::compare::{compare, render};
use tirlab_cli::pipeline::{run, RunOptions};
use tirlab_cli::{CliError, ExperimentConfig, RunManifest};

#[derive(Parser)]
#[command(
    name = "tirlab",
    version,
    about = "Token importance recalibration experiments on a synthetic cross-domain benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or reuse the cache), run the episodic trials and the analysis.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set trials.count=20`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated TIR modes.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        output: Option<String>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Paired accuracy deltas between two runs (manifest files or run directories).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Mode of the first run to compare; needs --mode-b.
        #[arg(long, requires = "mode_b")]
        mode_a: Option<String>,
        #[arg(long, requires = "mode_a")]
        mode_b: Option<String>,
    },
    /// Norm profile of an activation dump, and CKA against a second dump.
    Analyze {
        dump: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        /// plain, maskK or enhance1. Repeatable; all three by default.
        #[arg(long)]
        condition: Vec<String>,
        #[arg(long)]
        layer: Option<usize>,
        /// Write CSVs here instead of printing them.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a configuration file.
    ExportConfig {
        #[arg(long, required = true)]
        defaults: bool,
    },
}

fn parse_modes(s: &str) -> Result<Vec<TirMode>, CliError> {
    s.split(',').map(|m| TirMode::parse(m.trim()).map_err(|e| CliError::Config(e.to_string()))).collect()
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, mut set, seed, trials, modes, output, parallelism, quiet } => {
            if let Some(s) = seed {
                set.push(format!("master_seed={s}"));
            }
            if let Some(t) = trials {
                set.push(format!("trials.count={t}"));
            }
            if let Some(m) = modes {
                let names: Vec<String> = parse_modes(&m)?.iter().map(|m| format!("\"{}\"", m.name())).collect();
                set.push(format!("trials.modes=[{}]", names.join(",")));
            }
            if let Some(o) = output {
                set.push(format!("output_dir={}", toml_string(&o)));
            }
            if let Some(p) = parallelism {
                set.push(format!("trials.parallelism={p}"));
            }
            let cfg = ExperimentConfig::load(&config, &set)?;
            let m = run(&cfg, &RunOptions { quiet })?;
            for x in &m.metrics {
                println!(
                    "{:<14} {:.4} ± {:.4} (n = {})",
                    x.mode.name(),
                    x.accuracy.mean,
                    x.accuracy.half_width,
                    x.accuracy.n
                );
            }
            println!("manifest: {}", cfg.output_path().join(tirlab_cli::manifest::MANIFEST_FILE).display());
            Ok(())
        }
        Command::Compare { a, b, mode_a, mode_b } => {
            let (ma, mb) = (RunManifest::load(&a)?, RunManifest::load(&b)?);
            let modes = match (mode_a, mode_b) {
                (Some(x), Some(y)) => Some((parse_one(&x)?, parse_one(&y)?)),
                _ => None,
            };
            print!("{}", render(&compare(&ma, &mb, modes)?));
            Ok(())
        }
        Command::Analyze { dump, target, condition, layer, out } => {
            let conditions = condition
                .iter()
                .map(|c| c.parse::<Condition>().map_err(|e| CliError::Config(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            let res = analyze(&AnalyzeRequest { dump: &dump, target: target.as_deref(), conditions, layer })?;
            match out {
                None => {
                    print!("{}", res.norm_profile_csv);
                    if let Some(c) = &res.cka_csv {
                        println!();
                        print!("{c}");
                    }
                }
                Some(dir) => {
                    let io = |e: std::io::Error| CliError::stage("write", e);
                    std::fs::create_dir_all(&dir).map_err(io)?;
                    std::fs::write(dir.join("norm_profile.csv"), &res.norm_profile_csv).map_err(io)?;
                    if let Some(c) = &res.cka_csv {
                        std::fs::write(dir.join("cka.csv"), c).map_err(io)?;
                    }
                }
            }
            Ok(())
        }
        Command::ExportConfig { .. } => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(())
        }
    }
}

fn parse_one(s: &str) -> Result<TirMode, CliError> {
    TirMode::parse(s).map_err(|e| CliError::Config(e.to_string()))
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
