use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use xvl_core::meta::MetaMode;
use xvl_core::pipeline::{self, Experiment, PipelineConfig};
use xvl_core::synthdata::{self, BenchmarkConfig};
use xvl_core::{gradcheck, Error};

/// Cross-lingual vision-language meta-learning experiments on a synthetic
/// multilingual benchmark.
#[derive(Parser, Debug)]
#[command(name = "xvl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Meta fine-tuning mode; overrides the config.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<MetaMode>,
    /// Worker threads for independent replicates and sweep cells.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark into `--out`.
    Generate {
        /// Benchmark TOML; the three-class default when omitted.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// English fine-tuning, meta fine-tuning and zero-shot evaluation
    /// against the baseline.
    Pipeline(Common),
    /// Auxiliary × target matrix of zero-shot deltas.
    SweepHeatmap(Common),
    /// Baseline and meta-fine-tuned few-shot curves.
    FewshotCurve(Common),
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break the backward rule of this op to exercise the checker.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn parse_mode(s: &str) -> Result<MetaMode, String> {
    s.parse()
}

fn load_pipeline(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::from_toml_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.mode {
        cfg.meta.mode = m;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn experiment(common: &Common) -> anyhow::Result<Experiment> {
    let cfg = load_pipeline(common)?;
    Ok(Experiment::new(cfg)?)
}

fn generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => BenchmarkConfig::from_toml_file(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = synthdata::generate(&cfg)?;
    let manifest = synthdata::write_dataset(&data, out)?;
    println!(
        "wrote {} languages, {} files to {}",
        manifest.languages.len(),
        manifest.files.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            generate(config.as_deref(), seed, &out)?;
        }
        Command::Pipeline(c) => {
            let exp = experiment(&c)?;
            let run = pipeline::cmd_pipeline(&exp, &c.out)?;
            let s = &run.summary;
            println!("mode {:?}, auxiliary {}, {} replicate(s)", s.mode, s.aux, s.replicates);
            println!("{:<8} {:>9} {:>9} {:>9}", "target", "baseline", "ours", "delta");
            for l in &s.languages {
                println!(
                    "{:<8} {:>9.4} {:>9.4} {:>+9.4}",
                    l.language, l.baseline_mean, l.ours_mean, l.delta_mean
                );
            }
            println!(
                "{:<8} {:>9.4} {:>9.4} {:>+9.4}",
                "mean", s.baseline_mean, s.ours_mean, s.delta_mean
            );
            if let Some(t) = &s.test {
                println!("paired t = {:.3}, one-sided p = {:.4}", t.t, t.p_value);
            }
            println!("artifacts in {}", run.dir.display());
        }
        Command::SweepHeatmap(c) => {
            let exp = experiment(&c)?;
            let (dir, map) = pipeline::cmd_sweep_heatmap(&exp, &c.out)?;
            print!("{}", map.matrix_csv());
            println!("artifacts in {}", dir.display());
        }
        Command::FewshotCurve(c) => {
            let exp = experiment(&c)?;
            let (dir, curve) = pipeline::cmd_fewshot_curve(&exp, &c.out)?;
            println!("{:<8} {:>5} {:>9} {:>9} {:>9}", "target", "shot", "baseline", "ours", "delta");
            for p in &curve.points {
                println!(
                    "{:<8} {:>5} {:>9.4} {:>9.4} {:>+9.4}",
                    p.language, p.shot, p.baseline_mean, p.ours_mean, p.delta_mean
                );
            }
            println!("artifacts in {}", dir.display());
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = match corrupt {
                Some(op) => gradcheck::run_suite_corrupted(seed, &op)?,
                None => gradcheck::run_suite(seed)?,
            };
            for c in &report.checks {
                println!(
                    "{} {:<28} max rel error {:.3e} (tolerance {:.0e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_error,
                    c.tolerance
                );
            }
            if !report.passed() {
                println!("failing: {}", report.failures().join(", "));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("XVL_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<Error>().is_some_and(Error::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
