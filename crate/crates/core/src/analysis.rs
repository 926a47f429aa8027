//! Histograms, free-energy profiles and divergences between them, 1D
//! quadrature diagnostics relating KL divergence to force errors, and the
//! conditional-histogram test for fiber invariance.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langevin::AtomisticDataset;
use crate::potential::ThermoState;
use crate::reweight::{bootstrap_indices, ess, mean_std, WeightedEnsemble};
use crate::sum::{log_sum_exp, pairwise_sum, trapezoid_weights};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("histograms have different bin edges")]
    EdgeMismatch,
    #[error("profiles have no jointly valid bin")]
    NoOverlap,
    #[error("grid too narrow: boundary density ratio {ratio:e} exceeds 1e-10")]
    GridTooNarrow { ratio: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1D {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    /// Weight of samples outside `[edges[0], edges[n]]`.
    pub overflow: f64,
}

pub fn uniform_edges(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    (0..=n_bins).map(|i| lo + (hi - lo) * i as f64 / n_bins as f64).collect()
}

/// Default grid for the MB x coordinate: 60 bins over [5, 55].
pub fn default_edges() -> Vec<f64> {
    uniform_edges(5.0, 55.0, 60)
}

/// Bin `i` is `[e_i, e_{i+1})`; the last bin also holds its right edge.
pub fn weighted_histogram(samples: &[f64], weights: Option<&[f64]>, edges: &[f64]) -> Histogram1D {
    assert!(edges.len() >= 2, "need at least one bin");
    assert!(edges.windows(2).all(|w| w[1] > w[0]), "edges must increase");
    if let Some(w) = weights {
        assert_eq!(w.len(), samples.len());
    }
    let nb = edges.len() - 1;
    let mut mass = vec![0.0; nb];
    let mut overflow = 0.0;
    let last = edges[nb];
    for (i, &x) in samples.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if !(x >= edges[0] && x <= last) {
            overflow += w;
            continue;
        }
        let b = if x == last { nb - 1 } else { edges.partition_point(|&e| e <= x) - 1 };
        mass[b] += w;
    }
    Histogram1D { edges: edges.to_vec(), mass, overflow }
}

impl Histogram1D {
    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn total(&self) -> f64 {
        pairwise_sum(&self.mass)
    }

    /// Masses rescaled to sum to one (unchanged if empty).
    pub fn normalized(&self) -> Histogram1D {
        let t = self.total();
        let mass = if t > 0.0 { self.mass.iter().map(|m| m / t).collect() } else { self.mass.clone() };
        Histogram1D {
            edges: self.edges.clone(),
            mass,
            overflow: if t > 0.0 { self.overflow / t } else { self.overflow },
        }
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "left,right,mass")?;
        for i in 0..self.n_bins() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], self.mass[i])?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyProfile {
    pub centers: Vec<f64>,
    /// `-kT ln p`, minimum over valid bins at zero; NaN where masked.
    pub f: Vec<f64>,
    pub valid: Vec<bool>,
    pub kt: f64,
}

/// Profile of a histogram. Bins with `p < floor·max p` are masked.
pub fn free_energy_profile(h: &Histogram1D, thermo: &ThermoState, floor: f64) -> FreeEnergyProfile {
    profile_from_masses(&h.centers(), &h.normalized().mass, thermo, floor)
}

/// Profile from per-bin probabilities.
pub fn profile_from_masses(centers: &[f64], p: &[f64], thermo: &ThermoState, floor: f64) -> FreeEnergyProfile {
    let max = p.iter().copied().fold(0.0, f64::max);
    let valid: Vec<bool> = p.iter().map(|&pi| pi > 0.0 && pi >= floor * max).collect();
    let raw: Vec<f64> = p
        .iter()
        .zip(&valid)
        .map(|(&pi, &v)| if v { -thermo.kt * pi.ln() } else { f64::NAN })
        .collect();
    let min = raw
        .iter()
        .zip(&valid)
        .filter(|(_, &v)| v)
        .map(|(f, _)| *f)
        .fold(f64::INFINITY, f64::min);
    FreeEnergyProfile {
        centers: centers.to_vec(),
        f: raw.iter().map(|f| f - min).collect(),
        valid,
        kt: thermo.kt,
    }
}

impl FreeEnergyProfile {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "center,F,valid")?;
        for i in 0..self.centers.len() {
            writeln!(w, "{},{},{}", self.centers[i], self.f[i], self.valid[i] as u8)?;
        }
        w.flush()
    }
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).ln()
    } else {
        0.0
    }
}

/// Jensen–Shannon divergence in nats between the normalized histograms.
pub fn js_divergence(p: &Histogram1D, q: &Histogram1D) -> Result<f64, AnalysisError> {
    if p.edges != q.edges {
        return Err(AnalysisError::EdgeMismatch);
    }
    Ok(js_from_masses(&p.normalized().mass, &q.normalized().mass))
}

/// Jensen–Shannon divergence of two probability vectors.
pub fn js_from_masses(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_term(a, m) + 0.5 * kl_term(b, m)
        })
        .collect();
    pairwise_sum(&terms).clamp(0.0, std::f64::consts::LN_2)
}

fn joint_valid(a: &FreeEnergyProfile, b: &FreeEnergyProfile) -> Result<Vec<usize>, AnalysisError> {
    if a.centers != b.centers {
        return Err(AnalysisError::Invalid("profiles have different bin centers".into()));
    }
    let idx: Vec<usize> = (0..a.f.len()).filter(|&i| a.valid[i] && b.valid[i]).collect();
    if idx.is_empty() {
        return Err(AnalysisError::NoOverlap);
    }
    Ok(idx)
}

/// Mean squared profile difference after subtracting the alignment constant
/// weighted by the density of `reference`, over jointly valid bins.
pub fn pmf_error(a: &FreeEnergyProfile, reference: &FreeEnergyProfile) -> Result<f64, AnalysisError> {
    let idx = joint_valid(a, reference)?;
    let d: Vec<f64> = idx.iter().map(|&i| a.f[i] - reference.f[i]).collect();
    let lw: Vec<f64> = idx.iter().map(|&i| -reference.f[i] / reference.kt).collect();
    let lse = log_sum_exp(&lw);
    let wd: Vec<f64> = lw.iter().zip(&d).map(|(l, di)| (l - lse).exp() * di).collect();
    let c = pairwise_sum(&wd);
    let sq: Vec<f64> = d.iter().map(|di| (di - c).powi(2)).collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// `min_c max_i |a_i - b_i - c|` over `mask`. Infinite if `a` is undefined
/// somewhere on the mask.
pub fn max_abs_deviation(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..a.len() {
        if !mask[i] {
            continue;
        }
        let d = a[i] - b[i];
        if !d.is_finite() {
            return f64::INFINITY;
        }
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo > hi {
        return 0.0;
    }
    0.5 * (hi - lo)
}

/// Gauge-aligned maximum deviation of a sampled profile from a reference
/// profile over the reference's valid bins.
pub fn profile_max_deviation(a: &FreeEnergyProfile, reference: &FreeEnergyProfile) -> f64 {
    let fa: Vec<f64> = a
        .f
        .iter()
        .zip(&a.valid)
        .map(|(&f, &v)| if v { f } else { f64::NAN })
        .collect();
    max_abs_deviation(&fa, &reference.f, &reference.valid)
}

/// How to treat a quadrature grid that does not reach negligible density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Densities must fall below 1e-10 of their maximum at both ends.
    #[default]
    Strict,
    /// The grid is the domain: densities are restricted to it.
    Truncated,
}

/// Normalized log-density `-βU - ln Z` on the grid.
fn log_density(u: &[f64], grid: &[f64], thermo: &ThermoState, policy: BoundaryPolicy) -> Result<Vec<f64>, AnalysisError> {
    if u.len() != grid.len() || grid.len() < 2 {
        return Err(AnalysisError::Invalid("energy and grid lengths differ or grid too short".into()));
    }
    let lp: Vec<f64> = u.iter().map(|v| -thermo.beta * v).collect();
    let w = trapezoid_weights(grid);
    let terms: Vec<f64> = lp.iter().zip(&w).map(|(l, wi)| l + wi.ln()).collect();
    let lz = log_sum_exp(&terms);
    let out: Vec<f64> = lp.iter().map(|l| l - lz).collect();
    if policy == BoundaryPolicy::Strict {
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ratio = (out[0].max(out[out.len() - 1]) - max).exp();
        if ratio > 1e-10 {
            return Err(AnalysisError::GridTooNarrow { ratio });
        }
    }
    Ok(out)
}

/// `KL(p_a ‖ p_b)` for Boltzmann densities of `u_a`, `u_b` on `grid`.
pub fn kl_quadrature(
    u_a: &[f64],
    u_b: &[f64],
    thermo: &ThermoState,
    grid: &[f64],
    policy: BoundaryPolicy,
) -> Result<f64, AnalysisError> {
    let la = log_density(u_a, grid, thermo, policy)?;
    let lb = log_density(u_b, grid, thermo, policy)?;
    let w = trapezoid_weights(grid);
    let terms: Vec<f64> = (0..grid.len()).map(|i| w[i] * la[i].exp() * (la[i] - lb[i])).collect();
    Ok(pairwise_sum(&terms))
}

/// `β² ∫ p_base (dU_a - dU_b)²` where `p_base ∝ exp(-β u_base)`.
pub fn fisher_quadrature(
    du_a: &[f64],
    du_b: &[f64],
    u_base: &[f64],
    thermo: &ThermoState,
    grid: &[f64],
    policy: BoundaryPolicy,
) -> Result<f64, AnalysisError> {
    if du_a.len() != grid.len() || du_b.len() != grid.len() {
        return Err(AnalysisError::Invalid("derivative and grid lengths differ".into()));
    }
    let lp = log_density(u_base, grid, thermo, policy)?;
    let w = trapezoid_weights(grid);
    let terms: Vec<f64> = (0..grid.len())
        .map(|i| w[i] * lp[i].exp() * (du_a[i] - du_b[i]).powi(2))
        .collect();
    Ok(thermo.beta * thermo.beta * pairwise_sum(&terms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberRow {
    pub x_lo: f64,
    pub x_hi: f64,
    pub count_a: usize,
    pub count_b: usize,
    /// `None` when either count is below the threshold.
    pub js: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberTable {
    pub rows: Vec<FiberRow>,
    pub min_count: usize,
}

impl FiberTable {
    pub fn max_js(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.js).fold(0.0, f64::max)
    }

    pub fn tested(&self) -> usize {
        self.rows.iter().filter(|r| r.js.is_some()).count()
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "x_lo,x_hi,count_a,count_b,js")?;
        for r in &self.rows {
            let js = r.js.map_or("skipped".to_string(), |v| v.to_string());
            writeln!(w, "{},{},{},{},{}", r.x_lo, r.x_hi, r.count_a, r.count_b, js)?;
        }
        w.flush()
    }
}

fn conditional_y(ds: &AtomisticDataset, x_edges: &[f64], y_edges: &[f64]) -> (Vec<usize>, Vec<Histogram1D>) {
    let nb = x_edges.len() - 1;
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); nb];
    let xs: Vec<f64> = ds.records.iter().map(|r| r.position.x).collect();
    for (rec, &x) in ds.records.iter().zip(&xs) {
        if x < x_edges[0] || x > x_edges[nb] {
            continue;
        }
        let b = if x == x_edges[nb] { nb - 1 } else { x_edges.partition_point(|&e| e <= x) - 1 };
        ys[b].push(rec.position.y);
    }
    let counts = ys.iter().map(Vec::len).collect();
    let hists = ys.iter().map(|v| weighted_histogram(v, None, y_edges)).collect();
    (counts, hists)
}

/// Per x-bin JS divergence between the conditional y-histograms of two
/// datasets; bins with fewer than `min_count` samples in either are skipped.
pub fn fiber_invariance_test(
    a: &AtomisticDataset,
    b: &AtomisticDataset,
    x_edges: &[f64],
    y_edges: &[f64],
    min_count: usize,
) -> FiberTable {
    let (ca, ha) = conditional_y(a, x_edges, y_edges);
    let (cb, hb) = conditional_y(b, x_edges, y_edges);
    let rows = (0..x_edges.len() - 1)
        .map(|i| {
            let tested = ca[i] >= min_count && cb[i] >= min_count;
            FiberRow {
                x_lo: x_edges[i],
                x_hi: x_edges[i + 1],
                count_a: ca[i],
                count_b: cb[i],
                js: tested.then(|| js_divergence(&ha[i], &hb[i]).expect("same edges")),
            }
        })
        .collect();
    FiberTable { rows, min_count }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Reweighted histogram vs reference, nats.
    pub js: f64,
    pub pmf_error: f64,
    /// Gauge-aligned max |ΔF| over reference-valid bins, kT.
    pub max_abs_df: f64,
    pub ess_norm: f64,
    pub ess_abs: f64,
    /// ESS relative to all samples rather than survivors.
    pub ess_norm_total: f64,
    /// Unweighted proposal histogram vs reference, nats.
    pub proposal_js: f64,
    pub js_std: f64,
    pub pmf_error_std: f64,
    pub ess_norm_std: f64,
    pub n_bootstrap: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self { lo: 5.0, hi: 55.0, n_bins: 60 }
    }
}

impl BinSpec {
    pub fn edges(&self) -> Vec<f64> {
        uniform_edges(self.lo, self.hi, self.n_bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bins: BinSpec,
    /// Profile density floor relative to the maximum bin.
    pub floor: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bins: BinSpec::default(),
            floor: 1e-3,
            n_bootstrap: 100,
            seed: 0,
        }
    }
}

struct PointMetrics {
    js: f64,
    pmf_error: f64,
    max_abs_df: f64,
}

fn point_metrics(
    r: &[f64],
    w: &[f64],
    reference: &[f64],
    edges: &[f64],
    thermo: &ThermoState,
    floor: f64,
) -> Result<PointMetrics, AnalysisError> {
    let h = weighted_histogram(r, Some(w), edges).normalized();
    let centers = h.centers();
    let ref_prof = profile_from_masses(&centers, reference, thermo, floor);
    let prof = profile_from_masses(&centers, &h.mass, thermo, floor);
    let raw = profile_from_masses(&centers, &h.mass, thermo, 0.0);
    Ok(PointMetrics {
        js: js_from_masses(&h.mass, reference),
        pmf_error: pmf_error(&prof, &ref_prof)?,
        max_abs_df: profile_max_deviation(&raw, &ref_prof),
    })
}

/// Metrics of a reweighted ensemble against reference bin probabilities,
/// with bootstrap standard deviations over the clipping survivors.
pub fn evaluate_ensemble(
    ens: &WeightedEnsemble,
    reference: &[f64],
    thermo: &ThermoState,
    cfg: &MetricConfig,
) -> Result<MetricReport, AnalysisError> {
    let edges = cfg.bins.edges();
    if reference.len() != edges.len() - 1 {
        return Err(AnalysisError::EdgeMismatch);
    }
    let surv = ens.survivors();
    let r: Vec<f64> = surv.iter().map(|&i| ens.r[i]).collect();
    let w: Vec<f64> = surv.iter().map(|&i| ens.weights[i]).collect();
    let point = point_metrics(&r, &w, reference, &edges, thermo, cfg.floor)?;
    let proposal = weighted_histogram(&ens.r, None, &edges).normalized();

    let (mut js, mut pe, mut en) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..cfg.n_bootstrap {
        let idx = bootstrap_indices(cfg.seed, b, surv.len());
        let rb: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
        let wb: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        let m = point_metrics(&rb, &wb, reference, &edges, thermo, cfg.floor)?;
        js.push(m.js);
        pe.push(m.pmf_error);
        en.push(ess(&wb).1);
    }
    let std = |v: &[f64]| if v.len() > 1 { mean_std(v).1 } else { 0.0 };
    Ok(MetricReport {
        js: point.js,
        pmf_error: point.pmf_error,
        max_abs_df: point.max_abs_df,
        ess_norm: ens.ess_norm,
        ess_abs: ens.ess_abs,
        ess_norm_total: ens.ess_norm_total,
        proposal_js: js_from_masses(&proposal.mass, reference),
        js_std: std(&js),
        pmf_error_std: std(&pe),
        ess_norm_std: std(&en),
        n_bootstrap: cfg.n_bootstrap,
    })
}

/// Reference, proposal and reweighted free-energy curves on the bin centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileComparison {
    pub centers: Vec<f64>,
    pub reference: FreeEnergyProfile,
    pub proposal: FreeEnergyProfile,
    pub reweighted: FreeEnergyProfile,
}

pub fn compare_profiles(
    ens: &WeightedEnsemble,
    reference: &[f64],
    thermo: &ThermoState,
    cfg: &MetricConfig,
) -> ProfileComparison {
    let edges = cfg.bins.edges();
    let surv = ens.survivors();
    let r: Vec<f64> = surv.iter().map(|&i| ens.r[i]).collect();
    let w: Vec<f64> = surv.iter().map(|&i| ens.weights[i]).collect();
    let rew = weighted_histogram(&r, Some(&w), &edges);
    let prop = weighted_histogram(&ens.r, None, &edges);
    let centers = rew.centers();
    ProfileComparison {
        reference: profile_from_masses(&centers, reference, thermo, cfg.floor),
        proposal: free_energy_profile(&prop, thermo, cfg.floor),
        reweighted: free_energy_profile(&rew, thermo, cfg.floor),
        centers,
    }
}

impl ProfileComparison {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "center,reference,proposal,reweighted")?;
        for i in 0..self.centers.len() {
            writeln!(
                w,
                "{},{},{},{}",
                self.centers[i], self.reference.f[i], self.proposal.f[i], self.reweighted.f[i]
            )?;
        }
        w.flush()
    }

    pub fn to_svg(&self) -> String {
        svg_line_plot(
            "Free energy profiles",
            "x",
            "F / kT",
            &[
                Series { name: "reference", x: &self.centers, y: &scaled(&self.reference) },
                Series { name: "proposal", x: &self.centers, y: &scaled(&self.proposal) },
                Series { name: "reweighted", x: &self.centers, y: &scaled(&self.reweighted) },
            ],
        )
    }
}

fn scaled(p: &FreeEnergyProfile) -> Vec<f64> {
    p.f.iter().map(|f| f / p.kt).collect()
}

/// One polyline per series.
pub struct Series<'a> {
    pub name: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

/// Minimal SVG line chart. Non-finite points break the line.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series
        .iter()
        .flat_map(|s| s.x.iter().zip(s.y.iter()))
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M,
        H - M
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, sx(fx), H - M + 16.0, fx);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, M - 4.0, sy(fy) + 4.0, fy);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen = false;
        for (&x, &y) in ser.x.iter().zip(ser.y) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(d, "{}{:.2},{:.2} ", if pen { "L" } else { "M" }, sx(x), sy(y));
                pen = true;
            } else {
                pen = false;
            }
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - M - 150.0,
            M + 16.0 * k as f64,
            escape(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
