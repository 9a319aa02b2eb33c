//! Command-line entry point. Exit codes: 0 pass, 1 property failure,
//! 2 usage error, 3 invariant breach.

use crate::checks::{check_fusion, check_grad, check_match, CheckReport};
use crate::nn::ParamStore;
use crate::perception::NetConfig;
use crate::pipeline::{bench, Ablation, Pipeline};
use crate::sim::episode::{run_with, write_trace, EpisodeConfig, EpisodeError, EpisodeResult, PerceptionMode};
use crate::sim::scenario::{gen_scenario, ScenarioKind, ScenarioSpec};
use crate::sim::world::{annotate, AnnotateOptions, WorldState};
use clap::{Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SEED_ENV: &str = "LANECRAFT_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("property failure")]
    Failed,
    #[error("invariant breach: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Failed => 1,
            CliError::Usage(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        match e {
            EpisodeError::Config(m) => CliError::Usage(m),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lanecraft", version, about = "Double-edge lane perception, planning and closed-loop simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a generated scenario as JSON.
    Gen {
        #[arg(long)]
        kind: ScenarioKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run closed-loop episodes and print one result per line.
    Run(RunArgs),
    /// Run a verification suite and print its report.
    Check {
        #[arg(value_enum)]
        what: CheckKind,
    },
    /// Time full pipeline ticks.
    Bench {
        #[arg(long, default_value_t = 200)]
        ticks: usize,
        /// Use the small network instead of the reference size.
        #[arg(long)]
        small: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    Grad,
    Match,
    Fusion,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long, default_value = "straight")]
    pub kind: ScenarioKind,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Inclusive range `a..b`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Scenario file from `gen`; replaces `--kind` and seeds.
    #[arg(long, conflicts_with_all = ["seed", "seeds"])]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<PerceptionMode>,
    #[arg(long)]
    pub no_tgp: bool,
    #[arg(long)]
    pub no_hef: bool,
    #[arg(long)]
    pub no_dlf: bool,
    #[arg(long)]
    pub occ_noise: Option<f64>,
    /// Episode config JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pipeline weights for network mode.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Directory for trace and result files.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses `n`, `a..b` or `a..=b` (both inclusive).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("invalid seed range '{s}'"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    match s.split_once("..") {
        None => Ok(vec![num(s)?]),
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::Usage(format!("{}: at '{}': {}", path.display(), e.path(), e.inner())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn io_usage(e: std::io::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn episode_config(args: &RunArgs) -> Result<EpisodeConfig, CliError> {
    let mut cfg: EpisodeConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => EpisodeConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    cfg.ablation = Ablation {
        tgp: cfg.ablation.tgp && !args.no_tgp,
        hef: cfg.ablation.hef && !args.no_hef,
        dlf: cfg.ablation.dlf && !args.no_dlf,
    };
    if let Some(p) = args.occ_noise {
        cfg.occ_noise = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scenarios(args: &RunArgs, env_seed: Option<&str>) -> Result<Vec<ScenarioSpec>, CliError> {
    if let Some(p) = &args.scenario {
        return Ok(vec![read_json(p)?]);
    }
    let seeds = match (env_seed, &args.seeds, args.seed) {
        (Some(e), _, _) => parse_seeds(e)?,
        (None, Some(r), _) => parse_seeds(r)?,
        (None, None, Some(s)) => vec![s],
        (None, None, None) => vec![0],
    };
    Ok(seeds.into_iter().map(|s| gen_scenario(s, args.kind)).collect())
}

fn check_invariants(r: &EpisodeResult) -> Result<(), CliError> {
    let unit = 0.0..=1.0;
    if !unit.contains(&r.rc) || !unit.contains(&r.is_score) || (r.ds - r.rc * r.is_score).abs() > 1e-9 {
        return Err(CliError::Invariant(format!(
            "metrics out of contract: rc {} is {} ds {}",
            r.rc, r.is_score, r.ds
        )));
    }
    Ok(())
}

fn cmd_run(args: &RunArgs, env_seed: Option<&str>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = episode_config(args)?;
    let specs = scenarios(args, env_seed)?;
    let pipeline = match cfg.mode {
        PerceptionMode::Oracle => None,
        PerceptionMode::Network => {
            let mut p = Pipeline::new(cfg.net, cfg.net_seed, cfg.ablation).map_err(|e| CliError::Usage(e.to_string()))?;
            if let Some(w) = &args.weights {
                let store = ParamStore::load(w).map_err(|e| CliError::Usage(format!("{}: {e}", w.display())))?;
                p.load_store(&store).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            Some(p)
        }
    };
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    }
    for spec in &specs {
        let ep = run_with(spec, &cfg, pipeline.as_ref())?;
        check_invariants(&ep.result)?;
        let line = serde_json::to_string(&ep.result).map_err(|e| CliError::Invariant(e.to_string()))?;
        writeln!(out, "{line}").map_err(io_usage)?;
        if let Some(dir) = &args.out_dir {
            let stem = format!("{}_{}", spec.kind, spec.seed);
            let mut trace = Vec::new();
            write_trace(&ep.trace, &mut trace)?;
            write_file(&dir.join(format!("{stem}.trace.jsonl")), &trace)?;
            write_file(&dir.join(format!("{stem}.result.json")), line.as_bytes())?;
        }
    }
    Ok(())
}

fn cmd_check(what: CheckKind, out: &mut dyn Write) -> Result<(), CliError> {
    let report: CheckReport = match what {
        CheckKind::Grad => check_grad(20).map_err(|e| CliError::Invariant(e.to_string()))?,
        CheckKind::Match => check_match(100, 0),
        CheckKind::Fusion => check_fusion(20, 50),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invariant(e.to_string()))?;
    writeln!(out, "{json}").map_err(io_usage)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failed)
    }
}

fn cmd_bench(ticks: usize, small: bool, seed: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let config = if small { NetConfig::small() } else { NetConfig::reference() };
    let pipeline = Pipeline::new(config, seed, Ablation::FULL).map_err(|e| CliError::Invariant(e.to_string()))?;
    let spec = gen_scenario(seed, ScenarioKind::Intersection);
    let (scene, target) = annotate(&WorldState::initial(&spec), &spec, AnnotateOptions::default());
    let report = bench(&pipeline, &scene, target, ticks).map_err(|e| CliError::Invariant(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invariant(e.to_string()))?;
    writeln!(out, "{json}").map_err(io_usage)
}

fn cmd_gen(kind: ScenarioKind, seed: u64, path: &Path) -> Result<(), CliError> {
    let spec = gen_scenario(seed, kind);
    let json = serde_json::to_string_pretty(&spec).map_err(|e| CliError::Invariant(e.to_string()))?;
    write_file(path, json.as_bytes())
}

pub fn execute(cli: &Cli, env_seed: Option<&str>, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen { kind, seed, out: path } => cmd_gen(*kind, *seed, path),
        Command::Run(args) => cmd_run(args, env_seed, out),
        Command::Check { what } => cmd_check(*what, out),
        Command::Bench { ticks, small, seed } => cmd_bench(*ticks, *small, *seed, out),
    }
}

/// Parses process arguments and runs; returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let stdout = std::io::stdout();
    match execute(&cli, env_seed.as_deref(), &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            if !matches!(e, CliError::Failed) {
                eprintln!("error: {e}");
            }
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("4").unwrap(), vec![4]);
        assert_eq!(parse_seeds("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("2..=3").unwrap(), vec![2, 3]);
        for bad in ["", "x", "5..1", "1..x"] {
            assert_eq!(parse_seeds(bad).unwrap_err().code(), 2, "{bad}");
        }
    }

    #[test]
    fn env_seed_overrides_flags() {
        let cli = Cli::try_parse_from(["lanecraft", "run", "--seed", "3"]).unwrap();
        let Command::Run(args) = &cli.command else { unreachable!() };
        let specs = scenarios(args, Some("7..8")).unwrap();
        assert_eq!(specs.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![7, 8]);
        assert_eq!(scenarios(args, None).unwrap()[0].seed, 3);
    }

    #[test]
    fn flags_narrow_config_ablation() {
        let cli = Cli::try_parse_from(["lanecraft", "run", "--no-hef", "--occ-noise", "0.2"]).unwrap();
        let Command::Run(args) = &cli.command else { unreachable!() };
        let cfg = episode_config(args).unwrap();
        assert_eq!(cfg.ablation, Ablation { hef: false, ..Ablation::FULL });
        assert_eq!(cfg.occ_noise, 0.2);
        let bad = Cli::try_parse_from(["lanecraft", "run", "--occ-noise", "2"]).unwrap();
        let Command::Run(args) = &bad.command else { unreachable!() };
        assert_eq!(episode_config(args).unwrap_err().code(), 2);
    }

    #[test]
    fn metric_contract_breach_is_code_3() {
        let r = EpisodeResult {
            kind: ScenarioKind::Straight,
            seed: 0,
            rc: 0.5,
            infractions: vec![],
            is_score: 1.0,
            ds: 0.4,
            ticks: 1,
            termination: crate::sim::episode::Termination::Timeout,
            wall_ms_per_tick: vec![],
        };
        assert_eq!(check_invariants(&r).unwrap_err().code(), 3);
    }
}
