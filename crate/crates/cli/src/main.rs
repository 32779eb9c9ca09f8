//! `kdisc`: generate trajectory data, discover kernels, reproduce the
//! benchmark suite and run the mean-square bound check.

mod config;
mod plots;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kdisc::discover::{attach_validation, discover, DiscoveryReport, LabeledErrors, Method};
use kdisc::dynamics::{read_trajectory, simulate, write_trajectory, TrajectoryDataset};
use kdisc::metrics::{bound_check, BoundCheckConfig};
use kdisc::presets::{preset, Benchmark, Scale};

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "kdisc", version, about = "Learn drift and diffusion kernels of interacting particle systems")]
struct Cli {
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment document (JSON)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the seed of the document
    #[arg(long)]
    seed: Option<u64>,

    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the particle system and write a trajectory file
    Generate {
        #[command(flatten)]
        common: Common,
        /// Trajectory file (default: output.trajectory of the document)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn the kernels from a trajectory file
    Discover {
        #[command(flatten)]
        common: Common,
        /// Trajectory file (default: output.trajectory of the document)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report file (default: output.report of the document)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write CSV tables of the true and learned kernels
        #[arg(long)]
        emit_plots: bool,
    },
    /// Run a benchmark test over all settings and methods
    Reproduce {
        /// One of known_s, 1, 2, 3, 3b, 4, 5
        test_id: String,
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory of the report bundle
        #[arg(long, default_value = "reproduce")]
        out_dir: PathBuf,
        #[arg(long)]
        emit_plots: bool,
        #[arg(long)]
        force: bool,
    },
    /// Compare the empirical mean-square gap with the a-priori bound
    BoundCheck {
        #[command(flatten)]
        common: Common,
        /// Result file (printed to stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Scale {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> ExitCode {
    let numeric = err.chain().any(|e| e.downcast_ref::<kdisc::Error>().is_some_and(kdisc::Error::is_numeric));
    ExitCode::from(if numeric { 3 } else { 2 })
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load(&common)?;
            let path = out.unwrap_or_else(|| cfg.output.trajectory.clone());
            guard(&path, common.force)?;
            let data = generate(&cfg)?;
            write_trajectory(&path, &data).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} ({} agents, {} snapshots)", path.display(), data.n_agents, data.snapshots());
        }
        Command::Discover { common, data, out, emit_plots } => {
            let cfg = load(&common)?;
            let data_path = data.unwrap_or_else(|| cfg.output.trajectory.clone());
            let out = out.unwrap_or_else(|| cfg.output.report.clone());
            guard(&out, common.force)?;
            let data = read_trajectory(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
            let report = discover_and_validate(&cfg, &data)?;
            write_json(&out, &Bundle { config: &cfg, report: &report })?;
            print_errors(&report.validation);
            if emit_plots {
                let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
                let written = plots::write_all(&dir, stem, &cfg.kernels.build()?, &[&report], common.force)?;
                written.iter().for_each(|p| println!("wrote {}", p.display()));
            }
            println!("wrote {}", out.display());
        }
        Command::Reproduce { test_id, scale, seed, out_dir, emit_plots, force } => {
            let bench: Benchmark = test_id.parse()?;
            reproduce(bench, scale.into(), seed, &out_dir, emit_plots, force)?;
        }
        Command::BoundCheck { common, out } => {
            let mut cfg: BoundCheckConfig = match &common.config {
                Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => BoundCheckConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let cases = bound_check(&cfg)?;
            for c in &cases {
                println!(
                    "eps={:<6} empirical={:.3e} bound={:.3e} {}",
                    c.perturbation,
                    c.empirical,
                    c.bound,
                    if c.holds { "holds" } else { "VIOLATED" }
                );
            }
            if let Some(path) = out {
                guard(&path, common.force)?;
                write_json(&path, &cases)?;
            }
            if cases.iter().any(|c| !c.holds) {
                eprintln!("error: empirical gap exceeds the bound");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let Some(path) = &common.config else { bail!(kdisc::Error::Config("--config is required".into())) };
    let mut cfg = ExperimentConfig::from_json(&read_text(path)?)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(kdisc::Error::Config(format!("{} exists (use --force to overwrite)", path.display())));
    }
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Bundle<'a> {
    config: &'a ExperimentConfig,
    report: &'a DiscoveryReport,
}

fn generate(cfg: &ExperimentConfig) -> Result<TrajectoryDataset> {
    Ok(simulate(&cfg.sim, &cfg.kernels.build()?, cfg.scheme)?)
}

fn discover_and_validate(cfg: &ExperimentConfig, data: &TrajectoryDataset) -> Result<DiscoveryReport> {
    let mut report = discover(data, &cfg.discovery)?;
    attach_validation(&mut report, data, &cfg.kernels.build()?, &cfg.validation)?;
    Ok(report)
}

fn print_errors(rows: &[LabeledErrors]) {
    for v in rows {
        let e = &v.errors;
        let d1: Vec<String> = e.diffusion.iter().map(|d| format!("{:.2e}", d.l1)).collect();
        let dinf: Vec<String> = e.diffusion.iter().map(|d| format!("{:.2e}", d.linf)).collect();
        println!(
            "{:<10} E_P^1={:.2e} E_P^inf={:.2e} E_f^ave={:.2e} E_f^fin={:.2e} E_D^1={} E_D^inf={}",
            v.label,
            e.drift.l1,
            e.drift.linf,
            e.trajectory.average,
            e.trajectory.final_time,
            d1.join("/"),
            dinf.join("/")
        );
    }
}

#[derive(Serialize)]
struct SummaryRow {
    setting: String,
    method: Method,
    label: String,
    errors: kdisc::metrics::ErrorSummary,
}

fn reproduce(bench: Benchmark, scale: Scale, seed: u64, out_dir: &Path, emit_plots: bool, force: bool) -> Result<()> {
    let summary_path = out_dir.join(format!("test_{bench}_summary.json"));
    guard(&summary_path, force)?;
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut data: Option<TrajectoryDataset> = None;
    for &setting in bench.settings() {
        let mut reports = Vec::new();
        for &method in bench.methods() {
            let cfg = ExperimentConfig::from_experiment(preset(bench, setting, scale, method, seed)?);
            if data.is_none() {
                println!("test {bench}: simulating {} agents", cfg.sim.n_agents);
                data = Some(generate(&cfg)?);
            }
            let report = discover_and_validate(&cfg, data.as_ref().expect("data"))?;
            println!("test {bench} setting {setting:?} method {method:?}");
            print_errors(&report.validation);
            let name = format!("test_{bench}_{setting:?}_{method:?}.json").to_lowercase();
            let path = out_dir.join(name);
            guard(&path, force)?;
            write_json(&path, &Bundle { config: &cfg, report: &report })?;
            for v in &report.validation {
                rows.push(SummaryRow {
                    setting: format!("{setting:?}"),
                    method,
                    label: v.label.clone(),
                    errors: v.errors.clone(),
                });
            }
            reports.push((cfg, report));
        }
        if emit_plots {
            let truth = reports[0].0.kernels.build()?;
            let refs: Vec<&DiscoveryReport> = reports.iter().map(|(_, r)| r).collect();
            let stem = format!("test_{bench}_{setting:?}").to_lowercase();
            for p in plots::write_all(out_dir, &stem, &truth, &refs, force)? {
                println!("wrote {}", p.display());
            }
        }
    }
    write_json(&summary_path, &rows)?;
    println!("wrote {}", summary_path.display());
    Ok(())
}
