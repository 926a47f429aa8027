//! Pipeline stages. Each stage reads its inputs from the run directory (or
//! explicit paths), writes its outputs there together with the resolved
//! config and a manifest, and returns the manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use cgbg_core::analysis::{
    compare_profiles, evaluate_ensemble, svg_line_plot, weighted_histogram, MetricReport, Series,
};
use cgbg_core::cgdata::{apply_mapping, CGDataset};
use cgbg_core::cnf::{train_flow, FlowModel, FlowSampleBatch};
use cgbg_core::langevin::{simulate, AtomisticDataset};
use cgbg_core::nncore::Checkpoint;
use cgbg_core::pmf::{train_pmf, PMFModel};
use cgbg_core::potential::{exact_pmf_at, marginal_bin_masses, BiasPotential};
use cgbg_core::reweight::{clip_sweep, WeightedEnsemble};

use crate::config::{ExperimentConfig, Target};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub const ATOMISTIC_FILE: &str = "atomistic.ds";
pub const CG_FILE: &str = "cg.cgd";
pub const PMF_CKPT: &str = "pmf.ckpt.json";
pub const PMF_HISTORY: &str = "pmf_history.csv";
pub const PMF_TABLE: &str = "pmf_table.csv";
pub const FLOW_CKPT: &str = "flow.ckpt.json";
pub const FLOW_HISTORY: &str = "flow_history.csv";
pub const SAMPLES_FILE: &str = "samples.smp";
pub const ENSEMBLE_FILE: &str = "ensemble.ens";
pub const ENSEMBLE_CSV: &str = "ensemble.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

/// Resolved config plus where outputs go.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub overrides: BTreeMap<String, String>,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            config,
            out,
            overrides: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, command: &str) -> Result<RunManifest> {
        let mut m = RunManifest::new(command, self.config.hash());
        m.overrides = self.overrides.clone();
        let cfg = self.path(CONFIG_FILE);
        std::fs::write(&cfg, self.config.to_json())?;
        m.output(&cfg)?;
        Ok(m)
    }

    fn finish(&self, mut m: RunManifest, outputs: &[&str]) -> Result<RunManifest> {
        for o in outputs {
            m.output(&self.path(o))?;
        }
        m.save(&self.out)?;
        Ok(m)
    }
}

fn input_or_default(ctx: &Context, given: Option<&Path>, name: &str) -> PathBuf {
    given.map_or_else(|| ctx.path(name), Path::to_path_buf)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("missing input {}", path.display())))
    }
}

pub fn gen_data(ctx: &Context) -> Result<RunManifest> {
    let c = &ctx.config;
    let mut m = ctx.manifest("gen-data")?;
    let bias = c.bias;
    let ds = m.time("simulate", || {
        simulate(
            &c.potential,
            &c.langevin,
            &c.trajectory,
            bias.as_ref().map(|b| b as &dyn BiasPotential),
        )
    })?;
    let cg = apply_mapping(&ds, &c.cg)?;
    ds.save(&ctx.path(ATOMISTIC_FILE))?;
    cg.save(&ctx.path(CG_FILE))?;
    ctx.finish(m, &[ATOMISTIC_FILE, CG_FILE])
}

pub fn load_cg(path: &Path) -> Result<CGDataset> {
    require(path)?;
    Ok(CGDataset::load(path)?)
}

pub fn load_pmf(path: &Path) -> Result<PMFModel> {
    require(path)?;
    Ok(PMFModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    require(path)?;
    Ok(FlowModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn train_pmf_stage(ctx: &Context, data: Option<&Path>) -> Result<RunManifest> {
    let mut m = ctx.manifest("train-pmf")?;
    let data = input_or_default(ctx, data, CG_FILE);
    let ds = load_cg(&data)?;
    m.input(&data)?;
    let (model, hist) = m.time("train", || train_pmf(&ds, &ctx.config.pmf_training))?;
    model.to_checkpoint(None).save(&ctx.path(PMF_CKPT))?;
    hist.write_csv(&ctx.path(PMF_HISTORY))?;
    let b = ctx.config.metrics.bins;
    let grid: Vec<f64> = (0..=4 * b.n_bins)
        .map(|i| b.lo + (b.hi - b.lo) * i as f64 / (4 * b.n_bins) as f64)
        .collect();
    model.table(&grid).write_csv(&ctx.path(PMF_TABLE))?;
    ctx.finish(m, &[PMF_CKPT, PMF_HISTORY, PMF_TABLE])
}

pub fn train_flow_stage(ctx: &Context, data: Option<&Path>) -> Result<RunManifest> {
    let mut m = ctx.manifest("train-flow")?;
    let data = input_or_default(ctx, data, CG_FILE);
    let ds = load_cg(&data)?;
    m.input(&data)?;
    let (model, hist) = m.time("train", || train_flow(&ds, &ctx.config.flow_training))?;
    model.to_checkpoint(None).save(&ctx.path(FLOW_CKPT))?;
    hist.write_csv(&ctx.path(FLOW_HISTORY))?;
    ctx.finish(m, &[FLOW_CKPT, FLOW_HISTORY])
}

pub fn sample_stage(ctx: &Context, flow: Option<&Path>) -> Result<RunManifest> {
    let c = &ctx.config;
    let mut m = ctx.manifest("sample")?;
    let flow_path = input_or_default(ctx, flow, FLOW_CKPT);
    let model = load_flow(&flow_path)?;
    m.input(&flow_path)?;
    let batch = m.time("sample", || model.sample(c.sampling.n_samples, c.seeds.sample, &c.solver))?;
    batch.save(&ctx.path(SAMPLES_FILE), c.seeds.sample, &c.solver)?;
    ctx.finish(m, &[SAMPLES_FILE])
}

/// Energies of the reweighting target at the sample positions.
pub fn target_energies(config: &ExperimentConfig, target: Target, r: &[f64], pmf: Option<&PMFModel>) -> Result<Vec<f64>> {
    match target {
        Target::Learned => {
            let model = pmf.ok_or_else(|| CliError::Config("learned target needs a PMF checkpoint".into()))?;
            Ok(model.energies(r))
        }
        Target::Exact => Ok(exact_pmf_at(
            &config.potential,
            &config.thermo()?,
            r,
            config.reference.y_range,
            config.reference.n_quad,
        )?),
    }
}

pub fn reweight_stage(ctx: &Context, samples: Option<&Path>, pmf: Option<&Path>) -> Result<RunManifest> {
    let c = &ctx.config;
    let mut m = ctx.manifest("reweight")?;
    let sp = input_or_default(ctx, samples, SAMPLES_FILE);
    require(&sp)?;
    let batch = FlowSampleBatch::load(&sp)?;
    m.input(&sp)?;
    let model = match c.reweighting.target {
        Target::Learned => {
            let p = input_or_default(ctx, pmf, PMF_CKPT);
            let model = load_pmf(&p)?;
            m.input(&p)?;
            Some(model)
        }
        Target::Exact => None,
    };
    let energy = m.time("energies", || target_energies(c, c.reweighting.target, &batch.r, model.as_ref()))?;
    let ens = WeightedEnsemble::build(batch.r, batch.log_q, energy, &c.thermo()?, c.reweighting.clip)?;
    ens.save(&ctx.path(ENSEMBLE_FILE))?;
    ens.write_csv(&ctx.path(ENSEMBLE_CSV))?;
    ctx.finish(m, &[ENSEMBLE_FILE, ENSEMBLE_CSV])
}

/// Quadrature bin probabilities of the unbiased marginal on the metric bins.
pub fn reference_masses(config: &ExperimentConfig) -> Result<Vec<f64>> {
    Ok(marginal_bin_masses(
        &config.potential,
        &config.thermo()?,
        &config.metrics.bins.edges(),
        config.reference.y_range,
        config.reference.n_quad,
        config.reference.nodes_per_bin,
    )?)
}

pub fn load_ensemble(path: &Path) -> Result<WeightedEnsemble> {
    require(path)?;
    Ok(WeightedEnsemble::load(path)?)
}

pub fn evaluate_stage(ctx: &Context, ensemble: Option<&Path>) -> Result<(MetricReport, RunManifest)> {
    let c = &ctx.config;
    let mut m = ctx.manifest("evaluate")?;
    let ep = input_or_default(ctx, ensemble, ENSEMBLE_FILE);
    let ens = load_ensemble(&ep)?;
    m.input(&ep)?;
    let reference = m.time("reference", || reference_masses(c))?;
    let thermo = c.thermo()?;
    let report = m.time("metrics", || evaluate_ensemble(&ens, &reference, &thermo, &c.metrics))?;
    std::fs::write(ctx.path(METRICS_FILE), report.to_json())?;
    let m = ctx.finish(m, &[METRICS_FILE])?;
    Ok((report, m))
}

pub const PROFILES_CSV: &str = "profiles.csv";
pub const PROFILES_SVG: &str = "profiles.svg";
pub const CLIP_SWEEP_CSV: &str = "clip_sweep.csv";
pub const CLIP_SWEEP_SVG: &str = "ess_vs_clip.svg";
pub const HISTOGRAM_CSV: &str = "reweighted_histogram.csv";

/// Profile curves, the clip sweep and the histogram behind the reweighted
/// profile. The manifest lists every artifact in the run directory.
pub fn report_stage(ctx: &Context, ensemble: Option<&Path>) -> Result<RunManifest> {
    let c = &ctx.config;
    let thermo = c.thermo()?;
    let mut m = ctx.manifest("report")?;
    let ep = input_or_default(ctx, ensemble, ENSEMBLE_FILE);
    let ens = load_ensemble(&ep)?;
    m.input(&ep)?;
    let reference = reference_masses(c)?;
    let cmp = compare_profiles(&ens, &reference, &thermo, &c.metrics);
    cmp.write_csv(&ctx.path(PROFILES_CSV))?;
    std::fs::write(ctx.path(PROFILES_SVG), cmp.to_svg())?;

    let rows = clip_sweep(&ens.log_q, &ens.energy, &thermo, &c.reweighting.clip_sweep)?;
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(ctx.path(CLIP_SWEEP_CSV))?);
        writeln!(w, "fraction,ess_abs,ess_norm,ess_norm_total")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.fraction, r.ess_abs, r.ess_norm, r.ess_norm_total)?;
        }
        w.flush()?;
    }
    let fx: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    let fy: Vec<f64> = rows.iter().map(|r| r.ess_norm).collect();
    let svg = svg_line_plot(
        "ESS versus clip fraction",
        "clip fraction",
        "ess_norm",
        &[Series { name: "ess_norm", x: &fx, y: &fy }],
    );
    std::fs::write(ctx.path(CLIP_SWEEP_SVG), svg)?;

    let surv = ens.survivors();
    let r: Vec<f64> = surv.iter().map(|&i| ens.r[i]).collect();
    let w: Vec<f64> = surv.iter().map(|&i| ens.weights[i]).collect();
    weighted_histogram(&r, Some(&w), &c.metrics.bins.edges()).write_csv(&ctx.path(HISTOGRAM_CSV))?;

    let produced = [PROFILES_CSV, PROFILES_SVG, CLIP_SWEEP_CSV, CLIP_SWEEP_SVG, HISTOGRAM_CSV];
    let mut names: Vec<String> = std::fs::read_dir(&ctx.out)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != CONFIG_FILE && n != &RunManifest::file_name("report"))
        .collect();
    for p in produced {
        if !names.iter().any(|n| n == p) {
            names.push(p.to_string());
        }
    }
    names.sort();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    ctx.finish(m, &refs)
}

/// Every stage in order; returns the metric report.
pub fn run_all(ctx: &Context) -> Result<MetricReport> {
    gen_data(ctx)?;
    train_pmf_stage(ctx, None)?;
    train_flow_stage(ctx, None)?;
    sample_stage(ctx, None)?;
    reweight_stage(ctx, None, None)?;
    let (report, _) = evaluate_stage(ctx, None)?;
    report_stage(ctx, None)?;
    Ok(report)
}

/// Loads the atomistic dataset written by `gen_data`.
pub fn load_atomistic(path: &Path) -> Result<AtomisticDataset> {
    require(path)?;
    Ok(AtomisticDataset::load(path)?)
}
