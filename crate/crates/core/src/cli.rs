//! Command-line front end. `run` parses arguments, dispatches, and maps
//! errors to exit codes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::dataset::{self, Dataset};
use crate::error::{exit, DatasetError, Error, Result};
use crate::pipeline::{
    self, check_toy_dims, write_text, BehaviorSummary, RunConfig, SweepParam, Variant,
};

/// Environment variable holding the default output root.
pub const OUT_ROOT_VAR: &str = "REACHSAFE_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "reachsafe", version, about = "Safe offline RL on a reach-avoid task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dot-path override, e.g. `--set critic.tau=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `$REACHSAFE_OUT/<run_id>` (`runs/<run_id>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training and evaluation seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the offline dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train critics and policy; write checkpoints and curves.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate trained checkpoints; write `<run_id>.eval.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also roll out episodes from oracle-infeasible starts.
        #[arg(long)]
        infeasible: bool,
    },
    /// Dump the learned feasible region on an (x, y) grid as CSV and SVG.
    DumpRegion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resolution: Option<usize>,
        /// Speed of the grid slice.
        #[arg(long)]
        speed: Option<f64>,
    },
    /// Train and evaluate one ablation variant under `<out>/<variant>`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// full, no_hj, no_infeasible, no_diffusion, or il_mode.
        #[arg(long)]
        variant: String,
    },
    /// Sweep tau over {0.7, 0.8, 0.9, 0.95} or N over {1, 4, 16, 64}.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `tau` or `n`.
        #[arg(long)]
        param: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common }
            | Command::Eval { common, .. }
            | Command::DumpRegion { common, .. }
            | Command::Ablate { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

/// `key = default` lines for every leaf of the default config.
pub fn config_key_help() -> String {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => out.push_str(&format!("  {prefix} = {other}\n")),
        }
    }
    let mut out = String::from("Config keys (dot paths for --set) and defaults:\n");
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    walk("", &v, &mut out);
    out
}

fn command_with_help() -> clap::Command {
    let help = config_key_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, |s| s.after_long_help(h));
    }
    cmd
}

fn resolve_config(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(OUT_ROOT_VAR).unwrap_or_else(|| DEFAULT_OUT_ROOT.into());
            PathBuf::from(root).join(&cfg.run_id)
        }
    };
    Ok((cfg, out))
}

fn dataset_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.data.path.clone().unwrap_or_else(|| cfg.file(out, "dataset.bin"))
}

/// Loads the run's dataset, warning on an environment hash mismatch, or
/// generates it when no file exists yet.
fn obtain_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let path = dataset_path(cfg, out);
    if !path.exists() {
        if cfg.data.path.is_some() {
            return Err(Error::Dataset(DatasetError::Layout(format!(
                "dataset {} does not exist",
                path.display()
            ))));
        }
        eprintln!("no dataset at {}, generating", path.display());
        let data = pipeline::build_dataset(cfg)?;
        dataset::save(&data, &path)?;
        return Ok(data);
    }
    let data = match dataset::load_checked(&path, &cfg.env) {
        Err(Error::Dataset(DatasetError::HashMismatch { expected, found })) => {
            eprintln!(
                "warning: dataset {} was generated with env config {found}, current config is {expected}; continuing",
                path.display()
            );
            dataset::load(&path)?
        }
        other => other?,
    };
    check_toy_dims(&data)?;
    Ok(data)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn region(cfg: &RunConfig, out: &Path, bank: &crate::value::CriticBank) -> Result<pipeline::RegionMetrics> {
    let grid = pipeline::dump_region(bank, &cfg.env, cfg.eval.region_resolution, cfg.eval.region_speed)?;
    let metrics = pipeline::region_metrics(&grid);
    write_text(&cfg.file(out, "region.csv"), &pipeline::region_csv(&grid))?;
    write_text(&cfg.file(out, "region.svg"), &pipeline::region_svg(&grid, &cfg.env))?;
    write_json(&cfg.file(out, "region.json"), &metrics)?;
    Ok(metrics)
}

fn dispatch(command: &Command) -> Result<()> {
    let (mut cfg, out) = resolve_config(command.common())?;
    match command {
        Command::GenData { .. } => {
            let data = pipeline::build_dataset(&cfg)?;
            let path = dataset_path(&cfg, &out);
            dataset::save(&data, &path)?;
            println!("wrote {} transitions to {}", data.len(), path.display());
        }
        Command::Train { .. } => {
            let data = obtain_dataset(&cfg, &out)?;
            let art = pipeline::train_full(&cfg, &data)?;
            pipeline::write_artifacts(&out, &art)?;
            println!("wrote checkpoints and curves to {}", out.display());
        }
        Command::Eval { infeasible, .. } => {
            cfg.eval.include_infeasible |= *infeasible;
            let data = obtain_dataset(&cfg, &out)?;
            let (bank, policy) = pipeline::load_artifacts(&out, &cfg)?;
            let behavior = BehaviorSummary::from_dataset(&data, &cfg.env)?;
            let report = pipeline::evaluate(&cfg, &policy, &bank, &behavior)?;
            write_json(&cfg.file(&out, "eval.json"), &report)?;
            println!(
                "normalized reward {:.3}, normalized cost {:.3}, goal rate {:.2}",
                report.normalized_reward, report.normalized_cost, report.goal_rate
            );
        }
        Command::DumpRegion { resolution, speed, .. } => {
            if let Some(r) = resolution {
                cfg.eval.region_resolution = *r;
            }
            if let Some(v) = speed {
                cfg.eval.region_speed = *v;
            }
            cfg.validate()?;
            let ck = crate::nn::Checkpoint::read(&cfg.file(&out, "critics.ckpt"))?;
            let bank = crate::value::CriticBank::from_checkpoint(&ck)?;
            let m = region(&cfg, &out, &bank)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Ablate { variant, .. } => {
            cfg.variant = Variant::parse(variant)?;
            let data = obtain_dataset(&cfg, &out)?;
            let dir = out.join(cfg.variant.name());
            let art = pipeline::train_full(&cfg, &data)?;
            pipeline::write_artifacts(&dir, &art)?;
            let behavior = BehaviorSummary::from_dataset(&data, &cfg.env)?;
            let report = pipeline::evaluate(&cfg, &art.policy, &art.bank, &behavior)?;
            write_json(&cfg.file(&dir, "eval.json"), &report)?;
            region(&cfg, &dir, &art.bank)?;
            println!(
                "{}: normalized reward {:.3}, normalized cost {:.3}",
                cfg.variant.name(),
                report.normalized_reward,
                report.normalized_cost
            );
        }
        Command::Sweep { param, .. } => {
            let param = SweepParam::parse(param)?;
            let data = obtain_dataset(&cfg, &out)?;
            let rows = pipeline::sweep(&cfg, &data, param)?;
            let path = cfg.file(&out, &format!("sweep_{}.csv", param.name()));
            write_text(&path, &pipeline::sweep_csv(&rows))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Runs the tool on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command_with_help().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return exit::CONFIG;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
