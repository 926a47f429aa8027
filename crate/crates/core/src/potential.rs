//! Müller–Brown energy surface, coarse-grained bias potentials and the exact
//! marginal potential of mean force along `x`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::quadrature::CompositeRule;
use crate::sum::{log_sum_exp, trapezoid};

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "quadrature boundary not converged at x = {x}: boundary integrand ratio {ratio:.3e} exceeds 1e-12, widen y_range"
    )]
    BoundaryNotConverged { x: f64, ratio: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// One term `A exp[a dx² + b dx dy + c dy²]` with `dx = x - x0`, `dy = y - y0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussTerm {
    pub amplitude: f64,
    pub x0: f64,
    pub y0: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl GaussTerm {
    #[inline]
    pub fn energy(&self, p: Point2) -> f64 {
        let dx = p.x - self.x0;
        let dy = p.y - self.y0;
        self.amplitude * (self.a * dx * dx + self.b * dx * dy + self.c * dy * dy).exp()
    }

    /// Gradient of this term (not the force).
    #[inline]
    pub fn gradient(&self, p: Point2) -> [f64; 2] {
        let dx = p.x - self.x0;
        let dy = p.y - self.y0;
        let e = self.amplitude * (self.a * dx * dx + self.b * dx * dy + self.c * dy * dy).exp();
        [
            e * (2.0 * self.a * dx + self.b * dy),
            e * (self.b * dx + 2.0 * self.c * dy),
        ]
    }
}

/// Four-term Müller–Brown parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MBParams {
    pub terms: [GaussTerm; 4],
}

impl Default for MBParams {
    fn default() -> Self {
        let t = |amplitude, x0, y0, a, b, c| GaussTerm {
            amplitude,
            x0,
            y0,
            a,
            b,
            c,
        };
        Self {
            terms: [
                t(-17.3, 48.0, 8.0, -0.0039, 0.0, -0.0391),
                t(-8.7, 32.0, 16.0, -0.0039, 0.0, -0.0391),
                t(-14.7, 24.0, 32.0, -0.0254, 0.043, -0.0254),
                t(1.3, 16.0, 24.0, 0.00273, 0.0023, 0.00273),
            ],
        }
    }
}

impl MBParams {
    pub fn validate(&self) -> Result<(), PotentialError> {
        for (k, t) in self.terms.iter().enumerate() {
            let vals = [t.amplitude, t.x0, t.y0, t.a, t.b, t.c];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(PotentialError::InvalidParameter(format!(
                    "term {k} has non-finite coefficients"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, used to tie datasets to the
    /// surface that produced them.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("params serialize");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn mb_energy(p: Point2, params: &MBParams) -> f64 {
    params.terms.iter().map(|t| t.energy(p)).sum()
}

/// `-grad u` at `p`.
pub fn mb_force(p: Point2, params: &MBParams) -> [f64; 2] {
    let mut f = [0.0; 2];
    for t in &params.terms {
        let g = t.gradient(p);
        f[0] -= g[0];
        f[1] -= g[1];
    }
    f
}

/// A two-dimensional energy surface.
pub trait Potential2: Sync {
    fn energy(&self, p: Point2) -> f64;
    /// Negative gradient.
    fn force(&self, p: Point2) -> [f64; 2];
}

impl Potential2 for MBParams {
    fn energy(&self, p: Point2) -> f64 {
        mb_energy(p, self)
    }

    fn force(&self, p: Point2) -> [f64; 2] {
        mb_force(p, self)
    }
}

/// External bias added on top of a surface during simulation.
pub trait BiasPotential: Sync {
    fn energy(&self, p: Point2) -> f64;
    fn force(&self, p: Point2) -> [f64; 2];
    fn describe(&self) -> String;
}

/// Gaussian umbrella `A exp[-(R - R0)² / (2 w²)]` on the CG coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UmbrellaBias {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

impl Default for UmbrellaBias {
    fn default() -> Self {
        Self {
            amplitude: -4.0,
            center: 32.0,
            width: 5.0,
        }
    }
}

impl UmbrellaBias {
    pub fn new(amplitude: f64, center: f64, width: f64) -> Result<Self, PotentialError> {
        let b = Self {
            amplitude,
            center,
            width,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), PotentialError> {
        if !(self.width > 0.0) || !self.amplitude.is_finite() || !self.center.is_finite() {
            return Err(PotentialError::InvalidParameter(format!(
                "umbrella bias needs finite amplitude/center and width > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn bias_energy(b: &UmbrellaBias, r: f64) -> f64 {
    let d = r - b.center;
    b.amplitude * (-d * d / (2.0 * b.width * b.width)).exp()
}

pub fn bias_force(b: &UmbrellaBias, r: f64) -> f64 {
    let d = r - b.center;
    let w2 = b.width * b.width;
    b.amplitude * (-d * d / (2.0 * w2)).exp() * d / w2
}

impl BiasPotential for UmbrellaBias {
    fn energy(&self, p: Point2) -> f64 {
        bias_energy(self, p.x)
    }

    fn force(&self, p: Point2) -> [f64; 2] {
        [bias_force(self, p.x), 0.0]
    }

    fn describe(&self) -> String {
        format!(
            "umbrella(x; amplitude={}, center={}, width={})",
            self.amplitude, self.center, self.width
        )
    }
}

/// Surface plus bias, for quadrature of biased ensembles.
pub struct Biased<'a, P: Potential2, B: BiasPotential> {
    pub base: &'a P,
    pub bias: &'a B,
}

impl<P: Potential2, B: BiasPotential> Potential2 for Biased<'_, P, B> {
    fn energy(&self, p: Point2) -> f64 {
        self.base.energy(p) + self.bias.energy(p)
    }

    fn force(&self, p: Point2) -> [f64; 2] {
        let f = self.base.force(p);
        let g = self.bias.force(p);
        [f[0] + g[0], f[1] + g[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermoState {
    pub kt: f64,
    pub beta: f64,
}

impl ThermoState {
    pub fn new(kt: f64) -> Result<Self, PotentialError> {
        if !(kt > 0.0) || !kt.is_finite() {
            return Err(PotentialError::InvalidParameter(format!(
                "kT must be positive, got {kt}"
            )));
        }
        Ok(Self { kt, beta: 1.0 / kt })
    }
}

impl Default for ThermoState {
    fn default() -> Self {
        Self { kt: 1.0, beta: 1.0 }
    }
}

pub const DEFAULT_Y_RANGE: (f64, f64) = (-20.0, 80.0);
pub const DEFAULT_N_QUAD: usize = 2048;

const BOUNDARY_RATIO: f64 = 1e-12;

/// `ln ∫ exp(-β u(x, y)) dy` together with the boundary check.
fn log_marginal<P: Potential2>(
    potential: &P,
    thermo: &ThermoState,
    x: f64,
    rule: &CompositeRule,
    y_range: (f64, f64),
) -> Result<f64, PotentialError> {
    let neg: Vec<f64> = rule
        .nodes
        .iter()
        .map(|&y| -thermo.beta * potential.energy(Point2::new(x, y)))
        .collect();
    let logs: Vec<f64> = neg.iter().zip(&rule.weights).map(|(l, w)| l + w.ln()).collect();
    let peak = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edge = [y_range.0, y_range.1]
        .iter()
        .map(|&y| -thermo.beta * potential.energy(Point2::new(x, y)))
        .fold(f64::NEG_INFINITY, f64::max);
    let log_ratio = edge - peak;
    if log_ratio > BOUNDARY_RATIO.ln() {
        return Err(PotentialError::BoundaryNotConverged {
            x,
            ratio: log_ratio.exp(),
        });
    }
    Ok(log_sum_exp(&logs))
}

fn check_quadrature_args(y_range: (f64, f64), n_quad: usize) -> Result<(), PotentialError> {
    if !(y_range.1 > y_range.0) || n_quad == 0 {
        return Err(PotentialError::InvalidParameter(format!(
            "need y_min < y_max and n_quad > 0, got {y_range:?}, {n_quad}"
        )));
    }
    Ok(())
}

/// Exact potential of mean force on a grid, min-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePMF {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub kt: f64,
    pub y_range: (f64, f64),
    pub n_quad: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceSidecar {
    #[serde(rename = "kT")]
    kt: f64,
    y_range: (f64, f64),
    n_quad: usize,
    gauge: String,
}

pub fn exact_marginal_pmf<P: Potential2>(
    potential: &P,
    thermo: &ThermoState,
    grid: &[f64],
    y_range: (f64, f64),
    n_quad: usize,
) -> Result<ReferencePMF, PotentialError> {
    check_quadrature_args(y_range, n_quad)?;
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PotentialError::InvalidParameter(
            "grid must be nonempty and strictly increasing".into(),
        ));
    }
    let rule = CompositeRule::with_nodes(y_range.0, y_range.1, n_quad);
    let mut values = grid
        .iter()
        .map(|&x| log_marginal(potential, thermo, x, &rule, y_range).map(|l| -thermo.kt * l))
        .collect::<Result<Vec<_>, _>>()?;
    min_align(&mut values);
    Ok(ReferencePMF {
        grid: grid.to_vec(),
        values,
        kt: thermo.kt,
        y_range,
        n_quad,
    })
}

/// Exact PMF `-kT ln ∫ exp(-β u(x, y)) dy` at arbitrary points, without
/// gauge alignment.
pub fn exact_pmf_at<P: Potential2>(
    potential: &P,
    thermo: &ThermoState,
    xs: &[f64],
    y_range: (f64, f64),
    n_quad: usize,
) -> Result<Vec<f64>, PotentialError> {
    check_quadrature_args(y_range, n_quad)?;
    let rule = CompositeRule::with_nodes(y_range.0, y_range.1, n_quad);
    xs.iter()
        .map(|&x| log_marginal(potential, thermo, x, &rule, y_range).map(|l| -thermo.kt * l))
        .collect()
}

/// Exact mean force `-dU/dx = <F_x | x>` by quadrature over `y`.
pub fn exact_mean_force<P: Potential2>(
    potential: &P,
    thermo: &ThermoState,
    x: f64,
    y_range: (f64, f64),
    n_quad: usize,
) -> Result<f64, PotentialError> {
    check_quadrature_args(y_range, n_quad)?;
    let rule = CompositeRule::with_nodes(y_range.0, y_range.1, n_quad);
    let lz = log_marginal(potential, thermo, x, &rule, y_range)?;
    let terms: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&y, &w)| {
            let p = Point2::new(x, y);
            w * (-thermo.beta * potential.energy(p) - lz).exp() * potential.force(p)[0]
        })
        .collect();
    Ok(crate::sum::pairwise_sum(&terms))
}

/// Probability mass of the exact marginal in each bin, normalized over the
/// bins. Each bin is integrated with a `nodes_per_bin`-point Gauss rule in `x`.
pub fn marginal_bin_masses<P: Potential2>(
    potential: &P,
    thermo: &ThermoState,
    edges: &[f64],
    y_range: (f64, f64),
    n_quad: usize,
    nodes_per_bin: usize,
) -> Result<Vec<f64>, PotentialError> {
    check_quadrature_args(y_range, n_quad)?;
    let rule = CompositeRule::with_nodes(y_range.0, y_range.1, n_quad);
    let (gx, gw) = crate::quadrature::gauss_legendre(nodes_per_bin.max(1));
    let mut log_masses = Vec::with_capacity(edges.len().saturating_sub(1));
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let parts = gx
            .iter()
            .zip(&gw)
            .map(|(&xi, &wi)| {
                log_marginal(potential, thermo, mid + half * xi, &rule, y_range)
                    .map(|l| l + (half * wi).ln())
            })
            .collect::<Result<Vec<_>, _>>()?;
        log_masses.push(log_sum_exp(&parts));
    }
    let total = log_sum_exp(&log_masses);
    Ok(log_masses.iter().map(|l| (l - total).exp()).collect())
}

fn min_align(values: &mut [f64]) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        values.iter_mut().for_each(|v| *v -= min);
    }
}

impl ReferencePMF {
    /// PMF of the biased ensemble, `U(x) + V(x)`, re-aligned.
    pub fn with_bias(&self, bias: &UmbrellaBias) -> Self {
        let mut out = self.clone();
        for (v, &x) in out.values.iter_mut().zip(&self.grid) {
            *v += bias_energy(bias, x);
        }
        min_align(&mut out.values);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PotentialError> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "grid,value")?;
        for (x, v) in self.grid.iter().zip(&self.values) {
            writeln!(f, "{x:e},{v:e}")?;
        }
        let sidecar = ReferenceSidecar {
            kt: self.kt,
            y_range: self.y_range,
            n_quad: self.n_quad,
            gauge: "min".into(),
        };
        fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&sidecar).map_err(|e| PotentialError::Format(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, PotentialError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some("grid,value") {
            return Err(PotentialError::Format("missing `grid,value` header".into()));
        }
        let mut grid = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut cols = line.split(',');
            let mut next = || -> Result<f64, PotentialError> {
                cols.next()
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| PotentialError::Format(format!("bad row {}", i + 2)))
            };
            grid.push(next()?);
            values.push(next()?);
        }
        let sidecar: ReferenceSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)
            .map_err(|e| PotentialError::Format(e.to_string()))?;
        Ok(Self {
            grid,
            values,
            kt: sidecar.kt,
            y_range: sidecar.y_range,
            n_quad: sidecar.n_quad,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Boltzmann density `exp(-βU)` on the grid, trapezoid-normalized.
pub fn reference_density(reference: &ReferencePMF) -> Vec<f64> {
    let beta = 1.0 / reference.kt;
    let min = reference.values.iter().copied().fold(f64::INFINITY, f64::min);
    let unnorm: Vec<f64> = reference
        .values
        .iter()
        .map(|v| (-beta * (v - min)).exp())
        .collect();
    if reference.grid.len() < 2 {
        return vec![1.0; unnorm.len()];
    }
    let z = trapezoid(&reference.grid, &unnorm);
    unnorm.into_iter().map(|p| p / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u1_term_at_its_center() {
        let params = MBParams::default();
        assert_eq!(params.terms[0].energy(Point2::new(48.0, 8.0)), -17.3);
        assert_eq!(params.terms[0].gradient(Point2::new(48.0, 8.0)), [0.0, 0.0]);
        assert_eq!(params.terms[1].energy(Point2::new(32.0, 16.0)), -8.7);
        let g = params.terms[2].gradient(Point2::new(24.0, 32.0));
        assert_eq!(g, [0.0, 0.0]);
    }

    #[test]
    fn total_energy_at_u1_center_is_u1_plus_rest() {
        let params = MBParams::default();
        let p = Point2::new(48.0, 8.0);
        let rest: f64 = params.terms[1..].iter().map(|t| t.energy(p)).sum();
        assert_eq!(mb_energy(p, &params), -17.3 + rest);
    }

    #[test]
    fn default_bias_values() {
        let b = UmbrellaBias::default();
        assert_eq!(bias_energy(&b, 32.0), -4.0);
        assert_eq!(bias_force(&b, 32.0), 0.0);
        assert!((bias_energy(&b, 37.0) - (-4.0 * (-0.5f64).exp())).abs() < 1e-15);
        let fd = -(bias_energy(&b, 37.0 + 1e-6) - bias_energy(&b, 37.0 - 1e-6)) / 2e-6;
        assert!((bias_force(&b, 37.0) - fd).abs() < 1e-8);
    }

    #[test]
    fn umbrella_ignores_y() {
        let b = UmbrellaBias::default();
        let e1 = BiasPotential::energy(&b, Point2::new(30.0, -5.0));
        let e2 = BiasPotential::energy(&b, Point2::new(30.0, 55.0));
        assert_eq!(e1, e2);
        assert_eq!(BiasPotential::force(&b, Point2::new(30.0, 1.0))[1], 0.0);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(UmbrellaBias::new(-4.0, 32.0, 0.0).is_err());
        assert!(ThermoState::new(0.0).is_err());
        assert_eq!(ThermoState::new(2.0).unwrap().beta, 0.5);
    }

    #[test]
    fn narrow_y_range_is_detected() {
        let params = MBParams::default();
        let err = exact_marginal_pmf(&params, &ThermoState::default(), &[25.0], (20.0, 40.0), 256);
        assert!(matches!(err, Err(PotentialError::BoundaryNotConverged { .. })));
    }

    #[test]
    fn density_normalized_and_shift_invariant() {
        let params = MBParams::default();
        let grid: Vec<f64> = (0..=120).map(|i| 0.5 * i as f64).collect();
        let r = exact_marginal_pmf(&params, &ThermoState::default(), &grid, DEFAULT_Y_RANGE, 512)
            .unwrap();
        assert_eq!(r.values.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        let p = reference_density(&r);
        assert!((trapezoid(&grid, &p) - 1.0).abs() < 1e-12);
        let mut shifted = r.clone();
        shifted.values.iter_mut().for_each(|v| *v += 7.5);
        let q = reference_density(&shifted);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        let argmax = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
        let argmin = (0..p.len())
            .min_by(|&i, &j| r.values[i].total_cmp(&r.values[j]))
            .unwrap();
        assert_eq!(argmax, argmin);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.csv");
        let r = ReferencePMF {
            grid: vec![1.0, 2.0, 3.5],
            values: vec![0.25, 0.0, 1.0 / 3.0],
            kt: 1.0,
            y_range: DEFAULT_Y_RANGE,
            n_quad: 64,
        };
        r.write_csv(&path).unwrap();
        assert_eq!(ReferencePMF::read_csv(&path).unwrap(), r);
    }
}
