//! Underdamped Langevin dynamics on the (optionally biased) Müller–Brown
//! surface.
//!
//! The default scheme is BAOAB: half kick, half drift, exact
//! Ornstein–Uhlenbeck velocity update, half drift, half kick. A literal
//! explicit Euler–Maruyama scheme is available for comparison runs.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, FormatError};
use crate::potential::{mb_force, BiasPotential, MBParams, Point2};
use crate::rng::{substream, StreamRng};

pub const DATASET_MAGIC: &[u8] = b"CGBG-DS1";

#[derive(Debug, Error)]
pub enum LangevinError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical blow-up in trajectory {trajectory} at step {step}: position ({x}, {y}) left the guard box; reduce dt")]
    NumericalBlowup {
        trajectory: usize,
        step: u64,
        x: f64,
        y: f64,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangevinParams {
    pub dt: f64,
    pub mass: f64,
    pub gamma: f64,
    #[serde(rename = "kT")]
    pub kt: f64,
}

impl Default for LangevinParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            mass: 1.0,
            gamma: 0.1,
            kt: 1.0,
        }
    }
}

impl LangevinParams {
    pub fn validate(&self) -> Result<(), LangevinError> {
        let ok = self.dt > 0.0 && self.mass > 0.0 && self.gamma >= 0.0 && self.kt > 0.0;
        let finite = [self.dt, self.mass, self.gamma, self.kt]
            .iter()
            .all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(LangevinError::InvalidConfig(format!(
                "need dt > 0, mass > 0, gamma >= 0, kT > 0; got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    Baoab,
    EulerMaruyama,
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub const fn square(lo: f64, hi: f64) -> Self {
        Self {
            x_min: lo,
            x_max: hi,
            y_min: lo,
            y_max: hi,
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub n_steps: u64,
    pub save_every: u64,
    pub n_trajectories: usize,
    pub init_box: Rect,
    pub init_velocity_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub burn_in_fraction: f64,
    #[serde(default = "default_guard")]
    pub guard_box: Rect,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_guard() -> Rect {
    Rect {
        x_min: -100.0,
        x_max: 160.0,
        y_min: -100.0,
        y_max: 160.0,
    }
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_steps: 10_000_000,
            save_every: 10,
            n_trajectories: 10,
            init_box: Rect::square(10.0, 50.0),
            init_velocity_sigma: 0.1,
            seed: 0,
            burn_in_fraction: 0.0,
            guard_box: default_guard(),
            scheme: Scheme::Baoab,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<(), LangevinError> {
        let bad = |m: String| Err(LangevinError::InvalidConfig(m));
        if self.save_every == 0 || self.n_steps % self.save_every != 0 {
            return bad(format!(
                "save_every ({}) must divide n_steps ({})",
                self.save_every, self.n_steps
            ));
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return bad(format!("burn_in_fraction must be in [0, 1), got {}", self.burn_in_fraction));
        }
        if !(self.init_velocity_sigma >= 0.0) {
            return bad("init_velocity_sigma must be >= 0".into());
        }
        let b = &self.init_box;
        if !(b.x_max >= b.x_min && b.y_max >= b.y_min) {
            return bad(format!("degenerate init_box {b:?}"));
        }
        Ok(())
    }

    pub fn saves_per_trajectory(&self) -> usize {
        (self.n_steps / self.save_every) as usize
    }

    pub fn discarded_per_trajectory(&self) -> usize {
        (self.burn_in_fraction * self.saves_per_trajectory() as f64).floor() as usize
    }
}

/// One stored configuration with its unbiased force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub position: Point2,
    pub force: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub params: LangevinParams,
    pub config: TrajectoryConfig,
    pub bias: Option<String>,
    pub potential_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomisticDataset {
    pub records: Vec<AtomRecord>,
    pub metadata: DatasetMetadata,
}

/// Phase-space point of the particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub position: Point2,
    pub velocity: [f64; 2],
}

/// Single-particle Langevin stepper. `force` returns the total force
/// (surface plus bias) at a position.
pub struct Integrator<F: Fn(Point2) -> [f64; 2]> {
    params: LangevinParams,
    scheme: Scheme,
    force: F,
    ou_decay: f64,
    ou_noise: f64,
    cached_force: Option<[f64; 2]>,
}

impl<F: Fn(Point2) -> [f64; 2]> Integrator<F> {
    pub fn new(params: LangevinParams, scheme: Scheme, force: F) -> Self {
        let ou_decay = (-params.gamma * params.dt).exp();
        let ou_noise = ((1.0 - ou_decay * ou_decay) * params.kt / params.mass).sqrt();
        Self {
            params,
            scheme,
            force,
            ou_decay,
            ou_noise,
            cached_force: None,
        }
    }

    /// Force at the current position (cached from the last step).
    pub fn current_force(&mut self, s: &State) -> [f64; 2] {
        match self.cached_force {
            Some(f) => f,
            None => {
                let f = (self.force)(s.position);
                self.cached_force = Some(f);
                f
            }
        }
    }

    pub fn step<R: Rng>(&mut self, s: &mut State, rng: &mut R) {
        let LangevinParams { dt, mass, gamma, kt } = self.params;
        let f = self.current_force(s);
        match self.scheme {
            Scheme::Baoab => {
                let half = 0.5 * dt;
                for k in 0..2 {
                    s.velocity[k] += half * f[k] / mass;
                }
                s.position.x += half * s.velocity[0];
                s.position.y += half * s.velocity[1];
                for k in 0..2 {
                    let xi: f64 = StandardNormal.sample(rng);
                    s.velocity[k] = self.ou_decay * s.velocity[k] + self.ou_noise * xi;
                }
                s.position.x += half * s.velocity[0];
                s.position.y += half * s.velocity[1];
                let f_new = (self.force)(s.position);
                for k in 0..2 {
                    s.velocity[k] += half * f_new[k] / mass;
                }
                self.cached_force = Some(f_new);
            }
            Scheme::EulerMaruyama => {
                let amp = (2.0 * gamma * kt * dt / mass).sqrt();
                let v = s.velocity;
                for k in 0..2 {
                    let xi: f64 = StandardNormal.sample(rng);
                    s.velocity[k] = v[k] + dt * (f[k] / mass - gamma * v[k]) + amp * xi;
                }
                s.position.x += dt * v[0];
                s.position.y += dt * v[1];
                self.cached_force = Some((self.force)(s.position));
            }
        }
    }
}

/// `-grad u` at every position; bias never enters.
pub fn relabel_forces(positions: &[Point2], potential: &MBParams) -> Vec<[f64; 2]> {
    positions.iter().map(|&p| mb_force(p, potential)).collect()
}

fn run_trajectory(
    index: usize,
    potential: &MBParams,
    params: LangevinParams,
    config: &TrajectoryConfig,
    bias: Option<&dyn BiasPotential>,
) -> Result<Vec<AtomRecord>, LangevinError> {
    let mut rng: StreamRng = substream(config.seed, index as u64);
    let b = &config.init_box;
    let position = Point2::new(
        b.x_min + (b.x_max - b.x_min) * rng.random::<f64>(),
        b.y_min + (b.y_max - b.y_min) * rng.random::<f64>(),
    );
    let sigma = config.init_velocity_sigma;
    let velocity = [
        sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng),
        sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng),
    ];
    let mut state = State { position, velocity };
    let total_force = |p: Point2| {
        let mut f = mb_force(p, potential);
        if let Some(bias) = bias {
            let g = bias.force(p);
            f[0] += g[0];
            f[1] += g[1];
        }
        f
    };
    let mut integrator = Integrator::new(params, config.scheme, total_force);
    let skip = config.discarded_per_trajectory();
    let mut out = Vec::with_capacity(config.saves_per_trajectory() - skip);
    let mut saved = 0usize;
    for step in 1..=config.n_steps {
        integrator.step(&mut state, &mut rng);
        let p = state.position;
        if !config.guard_box.contains(p) || !p.is_finite() {
            return Err(LangevinError::NumericalBlowup {
                trajectory: index,
                step,
                x: p.x,
                y: p.y,
            });
        }
        if step % config.save_every == 0 {
            if saved >= skip {
                out.push(AtomRecord {
                    position: p,
                    force: mb_force(p, potential),
                });
            }
            saved += 1;
        }
    }
    Ok(out)
}

/// Runs `n_trajectories` independent trajectories and stores positions at
/// the save stride together with unbiased forces.
pub fn simulate(
    potential: &MBParams,
    params: &LangevinParams,
    config: &TrajectoryConfig,
    bias: Option<&dyn BiasPotential>,
) -> Result<AtomisticDataset, LangevinError> {
    params.validate()?;
    config.validate()?;
    let per_traj = (0..config.n_trajectories)
        .into_par_iter()
        .map(|i| run_trajectory(i, potential, *params, config, bias))
        .collect::<Result<Vec<_>, _>>()?;
    let records = per_traj.into_iter().flatten().collect();
    Ok(AtomisticDataset {
        records,
        metadata: DatasetMetadata {
            params: *params,
            config: config.clone(),
            bias: bias.map(|b| b.describe()),
            potential_hash: potential.fingerprint(),
        },
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    metadata: DatasetMetadata,
    count: usize,
}

impl AtomisticDataset {
    pub fn positions(&self) -> Vec<Point2> {
        self.records.iter().map(|r| r.position).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let flat: Vec<f64> = self
            .records
            .iter()
            .flat_map(|r| [r.position.x, r.position.y, r.force[0], r.force[1]])
            .collect();
        let header = DatasetHeader {
            metadata: self.metadata.clone(),
            count: self.records.len(),
        };
        container::encode(DATASET_MAGIC, &header, &flat)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (header, flat) = container::decode::<DatasetHeader>(DATASET_MAGIC, bytes, |h| h.count * 4)?;
        let records = flat
            .chunks_exact(4)
            .map(|c| AtomRecord {
                position: Point2::new(c[0], c[1]),
                force: [c[2], c[3]],
            })
            .collect();
        Ok(Self {
            records,
            metadata: header.metadata,
        })
    }

    /// SHA-256 of the serialized file content.
    pub fn content_hash(&self) -> Result<String, FormatError> {
        Ok(crate::potential::hex_digest(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<(), LangevinError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LangevinError> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), LangevinError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x,y,fx,fy")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{},{}",
                r.position.x, r.position.y, r.force[0], r.force[1]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{mb_energy, UmbrellaBias};

    fn small_config(seed: u64) -> TrajectoryConfig {
        TrajectoryConfig {
            n_steps: 2000,
            save_every: 10,
            n_trajectories: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn record_count_and_force_labels() {
        let mb = MBParams::default();
        let ds = simulate(&mb, &LangevinParams::default(), &small_config(1), None).unwrap();
        assert_eq!(ds.records.len(), 3 * 200);
        for r in &ds.records {
            let f = mb_force(r.position, &mb);
            assert!((f[0] - r.force[0]).abs() <= 1e-10 && (f[1] - r.force[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn biased_labels_exclude_bias() {
        let mb = MBParams::default();
        let bias = UmbrellaBias::default();
        let ds = simulate(&mb, &LangevinParams::default(), &small_config(2), Some(&bias)).unwrap();
        let relabeled = relabel_forces(&ds.positions(), &mb);
        for (r, f) in ds.records.iter().zip(&relabeled) {
            assert_eq!(&r.force, f);
        }
        assert!(ds.metadata.bias.as_deref().unwrap().starts_with("umbrella"));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let mb = MBParams::default();
        let a = simulate(&mb, &LangevinParams::default(), &small_config(9), None).unwrap();
        let b = simulate(&mb, &LangevinParams::default(), &small_config(9), None).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = simulate(&mb, &LangevinParams::default(), &small_config(10), None).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn burn_in_discards_leading_saves() {
        let mb = MBParams::default();
        let mut cfg = small_config(3);
        let full = simulate(&mb, &LangevinParams::default(), &cfg, None).unwrap();
        cfg.burn_in_fraction = 0.25;
        let cut = simulate(&mb, &LangevinParams::default(), &cfg, None).unwrap();
        assert_eq!(cut.records.len(), 3 * 150);
        assert_eq!(cut.records[..150], full.records[50..200]);
    }

    #[test]
    fn blowup_is_reported() {
        let mb = MBParams::default();
        let params = LangevinParams {
            dt: 5.0,
            ..Default::default()
        };
        let cfg = TrajectoryConfig {
            n_steps: 100_000,
            save_every: 10,
            n_trajectories: 1,
            ..Default::default()
        };
        let err = simulate(&mb, &params, &cfg, None).unwrap_err();
        assert!(matches!(err, LangevinError::NumericalBlowup { trajectory: 0, .. }));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(0);
        cfg.save_every = 7;
        assert!(cfg.validate().is_err());
        cfg.save_every = 10;
        cfg.n_trajectories = 0;
        assert!(cfg.validate().is_err());
        assert!(LangevinParams { dt: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn energy_conserved_without_friction() {
        let mb = MBParams::default();
        let params = LangevinParams {
            dt: 0.01,
            gamma: 0.0,
            ..Default::default()
        };
        let mut integ = Integrator::new(params, Scheme::Baoab, |p| mb_force(p, &mb));
        let mut s = State {
            position: Point2::new(30.0, 20.0),
            velocity: [0.5, -0.3],
        };
        let energy = |s: &State| {
            0.5 * (s.velocity[0].powi(2) + s.velocity[1].powi(2)) + mb_energy(s.position, &mb)
        };
        let e0 = energy(&s);
        let mut rng = substream(0, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            integ.step(&mut s, &mut rng);
            worst = worst.max((energy(&s) - e0).abs());
        }
        assert!(worst / e0.abs() < 1e-3, "relative drift {}", worst / e0.abs());
    }

    #[test]
    fn equipartition_long_run() {
        let mb = MBParams::default();
        let params = LangevinParams::default();
        let mut integ = Integrator::new(params, Scheme::Baoab, |p| mb_force(p, &mb));
        let mut s = State {
            position: Point2::new(24.0, 30.0),
            velocity: [0.0, 0.0],
        };
        // Kinetic energy decorrelates on 1/gamma = 100 steps, so a single
        // 1e6-step run has ~2% standard error; average ten independent runs.
        let n = 1_000_000;
        let mut acc = 0.0;
        for run in 0..10 {
            let mut rng = substream(11, run);
            for _ in 0..10_000 {
                integ.step(&mut s, &mut rng);
            }
            for _ in 0..n {
                integ.step(&mut s, &mut rng);
                acc += params.mass * s.velocity[0] * s.velocity[0];
            }
        }
        let mean = acc / (10 * n) as f64;
        assert!((0.98..=1.02).contains(&mean), "<m vx^2> = {mean}");
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let mb = MBParams::default();
        let ds = simulate(&mb, &LangevinParams::default(), &small_config(4), None).unwrap();
        let back = AtomisticDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ds);
    }
}
