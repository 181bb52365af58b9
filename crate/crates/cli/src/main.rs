use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refsketch::backends::fixtures;
use refsketch::harness::{self, RunManifest, EXIT_INVERSION, EXIT_OK};
use refsketch::{Backends, Error, Image, PipelineConfig, Result};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "refsketch", version, about = "Reference-guided sketch generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one sketch per content/reference pair.
    Generate(RunArgs),
    /// Generate a grid of sketches over swept config values.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// `field=v1,v2,...`; repeatable.
        #[arg(long = "sweep", value_name = "FIELD=VALUES")]
        sweep: Vec<String>,
    },
    /// Generate the full config and each single-module ablation.
    Ablate(RunArgs),
    /// Invert an image, replay the trace and report the reconstruction error.
    VerifyInversion {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, hide = true)]
        corrupt_trace: bool,
    },
    /// Generate and score every pair with the default metrics.
    Eval(RunArgs),
    /// Write the built-in fixture images.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run manifest.
    #[arg(long, conflicts_with_all = ["content", "reference"])]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    content: Option<PathBuf>,
    #[arg(long, requires = "content")]
    reference: Option<PathBuf>,
    /// Output directory; overrides the manifest's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel generations for sweeps and ablations.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config (or a previous run's result.json).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long = "beta-sg")]
    beta_sg: Option<f64>,
    #[arg(long = "beta-text")]
    beta_text: Option<f64>,
    #[arg(long = "lambda-sem")]
    lambda_sem: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total sampler steps; windows and skip rescale with it.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    skip: Option<usize>,
    #[arg(long)]
    backend: Option<String>,
}

impl ConfigArgs {
    fn apply(&self, base: PipelineConfig) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => base,
        };
        if let Some(n) = self.steps {
            c = c.with_total_steps(n);
        }
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.alpha, self.alpha);
        set(&mut c.gamma, self.gamma);
        set(&mut c.zeta, self.zeta);
        set(&mut c.beta_sg, self.beta_sg);
        set(&mut c.beta_text, self.beta_text);
        set(&mut c.lambda_sem, self.lambda_sem);
        set(&mut c.tau, self.tau);
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.skip {
            c.skip_steps = s;
        }
        if let Some(b) = &self.backend {
            c.backend = b.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

impl RunArgs {
    fn manifest(&self) -> Result<RunManifest> {
        let mut m = match (&self.manifest, &self.content, &self.reference) {
            (Some(path), _, _) => RunManifest::load(path)?,
            (None, Some(c), Some(r)) => RunManifest::single(c, r, PipelineConfig::default(), "."),
            _ => return Err(Error::Config("pass --manifest or both --content and --reference".into())),
        };
        m.config = self.config.apply(m.config)?;
        if let Some(out) = &self.out {
            m.output_dir = out.clone();
        } else if self.manifest.is_none() {
            return Err(Error::Config("--out is required without a manifest".into()));
        }
        m.validate()?;
        Ok(m)
    }
}

fn parse_sweep(specs: &[String]) -> Result<BTreeMap<String, Vec<Value>>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        let (field, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep {spec:?} is not FIELD=V1,V2,...")))?;
        let values = values
            .split(',')
            .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string())))
            .collect();
        out.insert(field.replace('-', "_"), values);
    }
    Ok(out)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Generate(args) => {
            let m = args.manifest()?;
            let backends = Backends::by_name(&m.config.backend)?;
            for (result, out) in harness::run_single(&m, &backends)? {
                for w in &result.warnings {
                    log::warn!("{w}");
                }
                println!("{} {}", out.image_path.display(), out.image_sha256);
            }
        }
        Command::Sweep { run, sweep } => {
            let mut m = run.manifest()?;
            m.sweep.extend(parse_sweep(&sweep)?);
            m.validate()?;
            let backends = Backends::by_name(&m.config.backend)?;
            let out = harness::run_sweep(&m, &backends, run.jobs)?;
            for (cell, o) in &out.cells {
                println!("{} {} {}", cell.name, o.image_path.display(), o.image_sha256);
            }
            for s in &out.contact_sheets {
                println!("contact sheet {}", s.display());
            }
        }
        Command::Ablate(args) => {
            let m = args.manifest()?;
            let backends = Backends::by_name(&m.config.backend)?;
            print_json(&harness::run_ablation(&m, &backends, args.jobs)?)?;
        }
        Command::VerifyInversion {
            image,
            config,
            corrupt_trace,
        } => {
            let cfg = config.apply(PipelineConfig::default())?;
            let backends = Backends::by_name(&cfg.backend)?;
            let report = harness::verify_inversion(&Image::load(&image)?, &cfg, &backends, corrupt_trace)?;
            println!(
                "max abs reconstruction error {:.3e} over {} steps ({})",
                report.max_abs_error,
                report.total_steps,
                if report.passed() { "ok" } else { "FAILED" }
            );
            if !report.passed() {
                return Ok(EXIT_INVERSION as u8);
            }
        }
        Command::Eval(args) => {
            let m = args.manifest()?;
            let backends = Backends::by_name(&m.config.backend)?;
            print_json(&harness::run_eval(&m, &backends, &harness::default_metrics())?)?;
        }
        Command::Fixtures { out } => {
            for p in fixtures::write_all(Path::new(&out))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(EXIT_OK as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
