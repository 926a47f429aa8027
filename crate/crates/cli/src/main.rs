use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgbg::pipeline::{self, Context};
use cgbg::{CliError, ExperimentConfig, Result, Target};
use cgbg_core::potential::UmbrellaBias;

#[derive(Parser)]
#[command(name = "cgbg", version, about = "Coarse-grained Boltzmann generator workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides CGBG_OUT and the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Langevin trajectories and write atomistic and CG datasets.
    GenData {
        /// Add the umbrella bias along x.
        #[arg(long, value_parser = ["umbrella"])]
        bias: Option<String>,
    },
    /// Train the PMF by force matching.
    TrainPmf {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the flow by conditional flow matching.
    TrainFlow {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw flow samples with their log-densities.
    Sample {
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Importance-weight flow samples against a target PMF.
    Reweight {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        pmf: Option<PathBuf>,
        #[arg(long, value_enum)]
        target: Option<Target>,
        /// Fraction of the largest weights to discard.
        #[arg(long)]
        clip: Option<f64>,
    },
    /// Compute metrics of a weighted ensemble against the exact reference.
    Evaluate {
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Write profile and clip-sweep tables and plots.
    Report {
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Run every stage in order.
    Run,
}

fn context(common: &Common, edit: impl FnOnce(&mut ExperimentConfig, &mut Vec<(String, String)>)) -> Result<Context> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
        overrides.push(("seed".into(), s.to_string()));
    }
    edit(&mut cfg, &mut overrides);
    let out = match (&common.out, std::env::var_os("CGBG_OUT")) {
        (Some(o), _) => o.clone(),
        (None, Some(env)) => PathBuf::from(env),
        (None, None) => cfg.output_dir.clone(),
    };
    cfg.output_dir = out.clone();
    let mut ctx = Context::new(cfg, out)?;
    ctx.overrides.extend(overrides);
    Ok(ctx)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let c = &cli.common;
    let opt = |p: &Option<PathBuf>| p.as_deref().map(Path::to_path_buf);
    match &cli.command {
        Command::GenData { bias } => {
            let ctx = context(c, |cfg, o| {
                if bias.is_some() {
                    cfg.bias = Some(UmbrellaBias::default());
                    o.push(("bias".into(), "umbrella".into()));
                }
            })?;
            pipeline::gen_data(&ctx)?;
        }
        Command::TrainPmf { data, epochs } => {
            let ctx = context(c, |cfg, o| {
                if let Some(e) = epochs {
                    cfg.pmf_training.epochs = *e;
                    o.push(("pmf_training.epochs".into(), e.to_string()));
                }
            })?;
            pipeline::train_pmf_stage(&ctx, opt(data).as_deref())?;
        }
        Command::TrainFlow { data, epochs } => {
            let ctx = context(c, |cfg, o| {
                if let Some(e) = epochs {
                    cfg.flow_training.epochs = *e;
                    o.push(("flow_training.epochs".into(), e.to_string()));
                }
            })?;
            pipeline::train_flow_stage(&ctx, opt(data).as_deref())?;
        }
        Command::Sample { flow, n } => {
            let ctx = context(c, |cfg, o| {
                if let Some(n) = n {
                    cfg.sampling.n_samples = *n;
                    o.push(("sampling.n_samples".into(), n.to_string()));
                }
            })?;
            pipeline::sample_stage(&ctx, opt(flow).as_deref())?;
        }
        Command::Reweight { samples, pmf, target, clip } => {
            let ctx = context(c, |cfg, o| {
                if let Some(t) = target {
                    cfg.reweighting.target = *t;
                    o.push(("reweighting.target".into(), format!("{t:?}").to_lowercase()));
                }
                if let Some(f) = clip {
                    cfg.reweighting.clip.fraction = *f;
                    o.push(("reweighting.clip.fraction".into(), f.to_string()));
                }
            })?;
            pipeline::reweight_stage(&ctx, opt(samples).as_deref(), opt(pmf).as_deref())?;
        }
        Command::Evaluate { ensemble } => {
            let ctx = context(c, |_, _| {})?;
            let (report, _) = pipeline::evaluate_stage(&ctx, opt(ensemble).as_deref())?;
            println!("{}", report.to_json());
        }
        Command::Report { ensemble } => {
            let ctx = context(c, |_, _| {})?;
            let m = pipeline::report_stage(&ctx, opt(ensemble).as_deref())?;
            for f in &m.outputs {
                println!("{}", f.path.display());
            }
        }
        Command::Run => {
            let ctx = context(c, |_, _| {})?;
            let report = pipeline::run_all(&ctx)?;
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
