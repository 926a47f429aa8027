//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=1,5` restricts the run.

use std::cell::OnceCell;
use std::io::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use cgbg::pipeline::{self, Context};
use cgbg::ExperimentConfig;
use cgbg_core::analysis::{
    evaluate_ensemble, fiber_invariance_test, fisher_quadrature, kl_quadrature, max_abs_deviation,
    uniform_edges, BoundaryPolicy, MetricReport,
};
use cgbg_core::cgdata::{apply_mapping, CGDataset, Standardizer};
use cgbg_core::cnf::{
    cfm_loss_with_draws, dopri5_integrate, log_density_at, prior_log_density, sample_with_logdensity,
    train_flow, AnalyticField, FlowModel, FlowSampleBatch, FlowSpec, ODESolverConfig,
};
use cgbg_core::langevin::{simulate, AtomisticDataset};
use cgbg_core::nncore::{
    Activation, LRSchedule, MlpSpec, OptimizerConfig, OptimizerKind, OptimizerState, RbfLayerSpec,
};
use cgbg_core::pmf::{train_pmf, PMFModel, PmfSpec};
use cgbg_core::potential::{
    exact_marginal_pmf, exact_mean_force, exact_pmf_at, reference_density, BiasPotential, Point2, Potential2, ThermoState, UmbrellaBias,
};
use cgbg_core::reweight::{clip_sweep, ess, log_weights, normalize, ClipMode, ClipPolicy, WeightedEnsemble, DEFAULT_CLIP_SWEEP};
use cgbg_core::rng::substream;
use cgbg_core::sum::trapezoid;

const SEED: u64 = 11;
const N_FLOW_SAMPLES: usize = 50_000;

/// Data, models and samples shared by several criteria, built on first use.
struct Shared {
    cfg: ExperimentConfig,
    thermo: ThermoState,
    unbiased: OnceCell<(AtomisticDataset, CGDataset)>,
    biased: OnceCell<(AtomisticDataset, CGDataset)>,
    pmf_u: OnceCell<PMFModel>,
    pmf_b: OnceCell<PMFModel>,
    flow_u: OnceCell<FlowModel>,
    flow_b: OnceCell<FlowModel>,
    samples_u: OnceCell<FlowSampleBatch>,
    samples_b: OnceCell<FlowSampleBatch>,
    reference: OnceCell<Vec<f64>>,
}

fn note(msg: &str) {
    let _ = writeln!(std::io::stderr(), "    {msg}");
}

fn timed<T>(what: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    note(&format!("{what}: {:.1} s", t.elapsed().as_secs_f64()));
    out
}

impl Shared {
    fn new() -> Self {
        let cfg = ExperimentConfig::desk().with_seed(SEED);
        Self {
            thermo: cfg.thermo().unwrap(),
            cfg,
            unbiased: OnceCell::new(),
            biased: OnceCell::new(),
            pmf_u: OnceCell::new(),
            pmf_b: OnceCell::new(),
            flow_u: OnceCell::new(),
            flow_b: OnceCell::new(),
            samples_u: OnceCell::new(),
            samples_b: OnceCell::new(),
            reference: OnceCell::new(),
        }
    }

    fn data(&self, bias: Option<&UmbrellaBias>) -> (AtomisticDataset, CGDataset) {
        let c = &self.cfg;
        let label = if bias.is_some() { "biased" } else { "unbiased" };
        let ds = timed(&format!("simulate {label}"), || {
            simulate(&c.potential, &c.langevin, &c.trajectory, bias.map(|b| b as &dyn BiasPotential)).unwrap()
        });
        let cg = apply_mapping(&ds, &c.cg).unwrap();
        (ds, cg)
    }

    fn unbiased(&self) -> &(AtomisticDataset, CGDataset) {
        self.unbiased.get_or_init(|| self.data(None))
    }

    fn biased(&self) -> &(AtomisticDataset, CGDataset) {
        self.biased.get_or_init(|| self.data(Some(&UmbrellaBias::default())))
    }

    fn pmf_u(&self) -> &PMFModel {
        self.pmf_u
            .get_or_init(|| timed("train PMF (unbiased)", || train_pmf(&self.unbiased().1, &self.cfg.pmf_training).unwrap().0))
    }

    fn pmf_b(&self) -> &PMFModel {
        self.pmf_b
            .get_or_init(|| timed("train PMF (biased)", || train_pmf(&self.biased().1, &self.cfg.pmf_training).unwrap().0))
    }

    fn flow_u(&self) -> &FlowModel {
        self.flow_u
            .get_or_init(|| timed("train flow (unbiased)", || train_flow(&self.unbiased().1, &self.cfg.flow_training).unwrap().0))
    }

    fn flow_b(&self) -> &FlowModel {
        self.flow_b
            .get_or_init(|| timed("train flow (biased)", || train_flow(&self.biased().1, &self.cfg.flow_training).unwrap().0))
    }

    fn samples_u(&self) -> &FlowSampleBatch {
        self.samples_u.get_or_init(|| {
            timed("sample flow (unbiased)", || self.flow_u().sample(N_FLOW_SAMPLES, SEED, &self.cfg.solver).unwrap())
        })
    }

    fn samples_b(&self) -> &FlowSampleBatch {
        self.samples_b.get_or_init(|| {
            timed("sample flow (biased)", || self.flow_b().sample(N_FLOW_SAMPLES, SEED, &self.cfg.solver).unwrap())
        })
    }

    fn reference(&self) -> &Vec<f64> {
        self.reference.get_or_init(|| pipeline::reference_masses(&self.cfg).unwrap())
    }

    fn reweighted_report(&self, batch: &FlowSampleBatch, pmf: &PMFModel) -> MetricReport {
        self.report_with(batch, pmf.energies(&batch.r), ClipPolicy::discard(0.01))
    }

    fn report_with(&self, batch: &FlowSampleBatch, energy: Vec<f64>, policy: ClipPolicy) -> MetricReport {
        let ens = WeightedEnsemble::build(batch.r.clone(), batch.log_q.clone(), energy, &self.thermo, policy).unwrap();
        evaluate_ensemble(&ens, self.reference(), &self.thermo, &self.cfg.metrics).unwrap()
    }

    /// Not part of the verdict: the same samples under cap-mode clipping, and
    /// with the quadrature PMF as target under the default discard rule.
    fn clipping_context(&self, batch: &FlowSampleBatch, pmf: &PMFModel) -> String {
        let c = &self.cfg;
        let cap = self.report_with(batch, pmf.energies(&batch.r), ClipPolicy { fraction: 0.01, mode: ClipMode::Cap });
        let exact = exact_pmf_at(&c.potential, &self.thermo, &batch.r, c.reference.y_range, c.reference.n_quad).unwrap();
        let oracle = self.report_with(batch, exact, ClipPolicy::discard(0.01));
        format!(
            "[cap 1%: max|dF| = {:.3}, pmf_error = {:.4}; exact target, discard 1%: max|dF| = {:.3}]",
            cap.max_abs_df, cap.pmf_error, oracle.max_abs_df
        )
    }

    /// Fine grid over the metric range and its reference-supported points.
    fn supported_grid(&self) -> (Vec<f64>, Vec<bool>) {
        let b = self.cfg.metrics.bins;
        let grid = uniform_edges(b.lo, b.hi, 400);
        let refp = exact_marginal_pmf(&self.cfg.potential, &self.thermo, &grid, self.cfg.reference.y_range, self.cfg.reference.n_quad)
            .unwrap();
        let dens = reference_density(&refp);
        let max = dens.iter().copied().fold(0.0, f64::max);
        let mask = dens.iter().map(|&d| d >= self.cfg.metrics.floor * max).collect();
        (grid, mask)
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn c1(s: &Shared) -> Outcome {
    let r = s.reweighted_report(s.samples_u(), s.pmf_u());
    outcome(
        r.max_abs_df <= 0.5 && r.pmf_error <= 0.05,
        format!(
            "max|dF| = {:.3} kT (<= 0.5), pmf_error = {:.4} ± {:.4} (<= 0.05), js = {:.4}, ess_norm = {:.3} {}",
            r.max_abs_df,
            r.pmf_error,
            r.pmf_error_std,
            r.js,
            r.ess_norm,
            s.clipping_context(s.samples_u(), s.pmf_u())
        ),
    )
}

fn c2(s: &Shared) -> Outcome {
    let r = s.reweighted_report(s.samples_b(), s.pmf_b());
    outcome(
        r.proposal_js >= 0.03 && r.max_abs_df <= 0.5 && r.pmf_error <= 0.05,
        format!(
            "proposal js = {:.4} (>= 0.03), max|dF| = {:.3} kT (<= 0.5), pmf_error = {:.4} (<= 0.05), ess_norm = {:.3} {}",
            r.proposal_js,
            r.max_abs_df,
            r.pmf_error,
            r.ess_norm,
            s.clipping_context(s.samples_b(), s.pmf_b())
        ),
    )
}

fn c3(s: &Shared) -> Outcome {
    let (grid, mask) = s.supported_grid();
    let a = s.pmf_u().energies(&grid);
    let b = s.pmf_b().energies(&grid);
    let d = max_abs_deviation(&a, &b, &mask) / s.thermo.kt;
    outcome(d <= 0.3, format!("max|dU| = {d:.3} kT over the supported region (<= 0.3)"))
}

/// Harmonic restraint on y, which reshapes the conditional distribution of y.
struct YRestraint {
    k: f64,
    y0: f64,
}

impl BiasPotential for YRestraint {
    fn energy(&self, p: Point2) -> f64 {
        0.5 * self.k * (p.y - self.y0).powi(2)
    }
    fn force(&self, p: Point2) -> [f64; 2] {
        [0.0, -self.k * (p.y - self.y0)]
    }
    fn describe(&self) -> String {
        format!("y restraint k={} y0={}", self.k, self.y0)
    }
}

fn c4(s: &Shared) -> Outcome {
    let (a, _) = s.unbiased();
    let (b, _) = s.biased();
    let c = &s.cfg;
    let mut short = c.trajectory.clone();
    short.n_steps = 2_000_000;
    short.save_every = 100;
    let control = timed("simulate y-restrained control", || {
        simulate(&c.potential, &c.langevin, &short, Some(&YRestraint { k: 0.05, y0: 20.0 } as &dyn BiasPotential)).unwrap()
    });
    // y bins span the pooled range of each compared pair.
    let y_edges = |p: &AtomisticDataset, q: &AtomisticDataset| {
        let ys = p.records.iter().chain(&q.records).map(|r| r.position.y);
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), y| (l.min(y), h.max(y)));
        uniform_edges(lo, hi + 1e-9, 30)
    };
    let x_edges = c.metrics.bins.edges();
    let t = fiber_invariance_test(a, b, &x_edges, &y_edges(a, b), 1000);
    let neg = fiber_invariance_test(a, &control, &x_edges, &y_edges(a, &control), 1000);
    outcome(
        t.tested() > 0 && t.max_js() <= 0.02 && neg.max_js() > 0.1,
        format!(
            "umbrella: max js = {:.4} over {} bins (<= 0.02); y-restraint control: max js = {:.3} over {} bins (> 0.1)",
            t.max_js(),
            t.tested(),
            neg.max_js(),
            neg.tested()
        ),
    )
}

fn c5(s: &Shared) -> Outcome {
    let unit = ThermoState::default();
    let grid = uniform_edges(-15.0, 15.0, 30_000);
    let us: Vec<f64> = grid.iter().map(|r| 0.5 * r * r).collect();
    let ue: Vec<f64> = grid.iter().map(|r| 0.5 * (r - 0.2f64).powi(2)).collect();
    let de: Vec<f64> = grid.iter().map(|r| r - 0.2).collect();
    let kl = kl_quadrature(&ue, &us, &unit, &grid, BoundaryPolicy::Strict).unwrap();
    let fisher = fisher_quadrature(&de, &grid, &ue, &unit, &grid, BoundaryPolicy::Strict).unwrap();
    let bound = fisher / 2.0;
    let gauss_ok = (kl - 0.02).abs() <= 1e-6 && (bound - 0.02).abs() <= 1e-6 && (kl - bound).abs() <= 1e-6;

    // Single basin of the exact MB PMF where it is convex.
    let c = &s.cfg;
    let (a, b) = (18.5, 28.0);
    let xs = uniform_edges(a, b, 1900);
    let u_ref = exact_pmf_at(&c.potential, &s.thermo, &xs, c.reference.y_range, c.reference.n_quad).unwrap();
    let du_ref: Vec<f64> = xs
        .iter()
        .map(|&x| -exact_mean_force(&c.potential, &s.thermo, x, c.reference.y_range, c.reference.n_quad).unwrap())
        .collect();
    let h = xs[1] - xs[0];
    let curv: Vec<f64> = (1..xs.len() - 1).map(|i| (du_ref[i + 1] - du_ref[i - 1]) / (2.0 * h)).collect();
    let kappa = curv.iter().copied().fold(f64::INFINITY, f64::min);
    let rho = s.thermo.beta * kappa;
    let (u_l, du_l) = s.pmf_u().energies_and_gradients(&xs);
    let kl_mb = kl_quadrature(&u_l, &u_ref, &s.thermo, &xs, BoundaryPolicy::Truncated).unwrap();
    let fi_mb = fisher_quadrature(&du_l, &du_ref, &u_l, &s.thermo, &xs, BoundaryPolicy::Truncated).unwrap();
    let slack = fi_mb / (2.0 * rho) - kl_mb;
    outcome(
        gauss_ok && kappa > 0.0 && slack >= -1e-6,
        format!(
            "gaussian KL = {kl:.8}, bound = {bound:.8}; MB basin [{a}, {b}] rho = {rho:.4}: KL = {kl_mb:.5}, bound = {:.5}, slack = {slack:.5}",
            fi_mb / (2.0 * rho)
        ),
    )
}

fn c6(s: &Shared) -> Outcome {
    let flow = s.flow_u();
    let solver = &s.cfg.solver;
    let std = flow.standardizer;
    let grid = uniform_edges(std.mean - 12.0 * std.std, std.mean + 12.0 * std.std, 2000);
    let lq = flow.log_density(&grid, solver).unwrap();
    let p: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
    let norm = trapezoid(&grid, &p);

    let batch = s.samples_u();
    let n = 2000;
    let back = log_density_at(flow, &std, &batch.r[..n], solver).unwrap();
    let (mut worst, mut mean) = (0.0f64, 0.0);
    for i in 0..n {
        let d = (back[i] - batch.log_q[i]).abs();
        worst = worst.max(d);
        mean += d / n as f64;
    }

    // Informational: the same round trip with a tighter solver.
    let fine = ODESolverConfig { atol: 1e-6, rtol: 1e-6, ..solver.clone() };
    let fwd = flow.sample(n, SEED, &fine).unwrap();
    let rev = log_density_at(flow, &std, &fwd.r, &fine).unwrap();
    let fine_worst = rev.iter().zip(&fwd.log_q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let a = 0.8;
    let tight = ODESolverConfig { atol: 1e-8, rtol: 1e-8, ..Default::default() };
    let zero = sample_with_logdensity(&AnalyticField::Zero, &std, 200, SEED, &tight).unwrap();
    let lin = sample_with_logdensity(&AnalyticField::Linear(a), &std, 200, SEED, solver).unwrap();
    let cst = sample_with_logdensity(&AnalyticField::Constant(0.6), &std, 200, SEED, solver).unwrap();
    let mut affine = 0.0f64;
    for i in 0..200 {
        let z = std.forward(zero.r[i]);
        let base = prior_log_density(z) - std.std.ln();
        affine = affine.max((std.forward(lin.r[i]) - z * a.exp()).abs() / (1.0 + (z * a.exp()).abs()));
        affine = affine.max((lin.log_q[i] - (base - a)).abs());
        affine = affine.max((std.forward(cst.r[i]) - (z + 0.6)).abs());
        affine = affine.max((cst.log_q[i] - base).abs());
    }
    outcome(
        (0.98..=1.02).contains(&norm) && worst <= 5e-3 && affine <= 1e-4,
        format!(
            "normalization = {norm:.5} ([0.98, 1.02]); round trip max = {worst:.2e}, mean = {mean:.2e} (<= 5e-3) [tol 1e-6: max {fine_worst:.1e}]; affine max err = {affine:.1e} (<= 1e-4)"
        ),
    )
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn c7(s: &Shared) -> Outcome {
    let mut rng = substream(SEED, 0xACCE);
    let mb = &s.cfg.potential;

    // Potential forces against central differences of the energy, at
    // configurations from the unbiased data.
    let recs = &s.unbiased().0.records;
    let mut pot = 0.0f64;
    for k in 0..200 {
        let p = recs[(k * 997) % recs.len()].position;
        let f = mb.force(p);
        let h = 1e-5;
        let fx = -(mb.energy(Point2::new(p.x + h, p.y)) - mb.energy(Point2::new(p.x - h, p.y))) / (2.0 * h);
        let fy = -(mb.energy(Point2::new(p.x, p.y + h)) - mb.energy(Point2::new(p.x, p.y - h))) / (2.0 * h);
        pot = pot.max(rel_err(f[0], fx, 1e-3)).max(rel_err(f[1], fy, 1e-3));
    }

    // Force-matching loss gradient.
    let spec = PmfSpec {
        rbf: RbfLayerSpec { n_centers: 8, width: 5.0, init_range: (10.0, 50.0) },
        mlp: MlpSpec { input: 8, hidden: vec![6, 5], output: 1, activation: Activation::Softplus, linear_output: true },
        input_standardizer: None,
    };
    let mut pmf = PMFModel::init(spec, 5).unwrap();
    let r: Vec<f64> = (0..16).map(|_| rng.random_range(12.0..48.0)).collect();
    let f: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (_, g) = pmf.fm_loss_and_grad(&r, &f);
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut fm = 0.0f64;
    for k in 0..g.len() {
        let h = 1e-5;
        let orig = pmf.params.data[k];
        pmf.params.data[k] = orig + h;
        let lp = pmf.fm_loss(&r, &f);
        pmf.params.data[k] = orig - h;
        let lm = pmf.fm_loss(&r, &f);
        pmf.params.data[k] = orig;
        fm = fm.max(rel_err(g[k], (lp - lm) / (2.0 * h), 1e-3 * scale));
    }

    // Flow-matching loss gradient.
    let mut fspec = FlowSpec::default();
    fspec.mlp.hidden = vec![7, 6];
    let mut flow = FlowModel::init(fspec, Standardizer { mean: 30.0, std: 7.0 }, 6).unwrap();
    let x1: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x0: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let t: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
    let (_, g) = flow.cfm_loss_and_grad(&x1, &x0, &t);
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut cfm = 0.0f64;
    for k in 0..g.len() {
        let h = 1e-5;
        let orig = flow.params.data[k];
        flow.params.data[k] = orig + h;
        let lp = cfm_loss_with_draws(&flow, &x1, &x0, &t);
        flow.params.data[k] = orig - h;
        let lm = cfm_loss_with_draws(&flow, &x1, &x0, &t);
        flow.params.data[k] = orig;
        cfm = cfm.max(rel_err(g[k], (lp - lm) / (2.0 * h), 1e-3 * scale));
    }

    // dopri5 on problems with closed-form solutions, at several tolerances.
    let mut ode_ok = true;
    let mut ode_ratio = 0.0f64;
    for tol in [1e-4, 1e-6, 1e-8] {
        let cfg = ODESolverConfig { atol: tol, rtol: tol, ..Default::default() };
        let mut check = |got: &[f64], exact: &[f64]| {
            for (g, e) in got.iter().zip(exact) {
                let bound = tol + tol * e.abs();
                ode_ratio = ode_ratio.max((g - e).abs() / bound);
                ode_ok &= (g - e).abs() <= bound;
            }
        };
        let (y, _) = dopri5_integrate(|_, y, dy| dy[0] = -y[0], &[1.0], 0.0, 2.0, &cfg).unwrap();
        check(&y, &[(-2f64).exp()]);
        let (y, _) = dopri5_integrate(|_, y, dy| { dy[0] = y[1]; dy[1] = -y[0]; }, &[1.0, 0.0], 0.0, 3.0, &cfg).unwrap();
        check(&y, &[3f64.cos(), -3f64.sin()]);
        let (y, _) = dopri5_integrate(|t, _, dy| dy[0] = 3.0 * t * t, &[0.5], 0.0, 1.5, &cfg).unwrap();
        check(&y, &[0.5 + 1.5f64.powi(3)]);
        let (y, _) = dopri5_integrate(|_, y, dy| dy[0] = 0.7 * y[0], &[2.0], 1.0, 0.0, &cfg).unwrap();
        check(&y, &[2.0 * (-0.7f64).exp()]);
    }

    // One Adam step by hand: m̂ = g, v̂ = g², update lr·g/(|g| + eps).
    let mut p = vec![1.0, -2.0];
    let mut opt = OptimizerState::new(OptimizerConfig { kind: OptimizerKind::Adam, ..Default::default() }, 2);
    opt.step(&mut p, &[0.5, -3.0], &LRSchedule::Constant { lr: 0.1 });
    let adam = (p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs().max((p[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs());
    let mut q = vec![1.0];
    let mut optw = OptimizerState::new(
        OptimizerConfig { kind: OptimizerKind::AdamW, weight_decay: 0.01, ..Default::default() },
        1,
    );
    optw.step(&mut q, &[0.5], &LRSchedule::Constant { lr: 0.1 });
    let adamw = (q[0] - (1.0 - 0.1 * 0.01 - 0.1 * 0.5 / (0.5 + 1e-8))).abs();

    outcome(
        pot <= 1e-5 && fm <= 1e-3 && cfm <= 1e-3 && ode_ok && adam <= 1e-6 && adamw <= 1e-6,
        format!(
            "potential rel = {pot:.1e}; FM grad rel = {fm:.1e}; CFM grad rel = {cfm:.1e}; dopri5 max err/bound = {ode_ratio:.2}; Adam = {adam:.1e}, AdamW = {adamw:.1e}"
        ),
    )
}

fn c8(s: &Shared) -> Outcome {
    // Narrow Gaussian on the major basin that misses the minor one: the
    // basin flanks sit in its tails and a few samples carry most weight.
    let (mu, sigma) = (23.0, 1.0);
    let n = N_FLOW_SAMPLES;
    let mut rng = substream(SEED, 0xC8);
    let normal = Normal::new(mu, sigma).unwrap();
    let r: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let log_q: Vec<f64> = r
        .iter()
        .map(|x| prior_log_density((x - mu) / sigma) - f64::ln(sigma))
        .collect();
    let c = &s.cfg;
    let energy = exact_pmf_at(&c.potential, &s.thermo, &r, c.reference.y_range, c.reference.n_quad).unwrap();
    let rows = clip_sweep(&log_q, &energy, &s.thermo, &DEFAULT_CLIP_SWEEP).unwrap();
    let e0 = rows[0].ess_norm;
    let e1 = rows.iter().find(|r| r.fraction == 0.01).unwrap().ess_norm;
    let monotone = rows.windows(2).all(|w| w[1].ess_norm >= w[0].ess_norm);
    let col: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.ess_norm)).collect();
    outcome(
        e0 < 0.01 && e1 >= 10.0 * e0 && monotone,
        format!("ess_norm by clip {{0, .001, .01, .05, .1, .2}} = [{}]; 1% / 0% = {:.1}", col.join(", "), e1 / e0),
    )
}

fn c9(s: &Shared) -> Outcome {
    let th = s.thermo;
    let mut rng = substream(SEED, 0xC9);
    let n = 1000;
    let e: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let lq: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let keep = vec![true; n];
    let w0 = normalize(&log_weights(&e, &lq, &th).unwrap(), &keep).unwrap();
    let e2: Vec<f64> = e.iter().map(|v| v + 17.25).collect();
    let lq2: Vec<f64> = lq.iter().map(|v| v - 4.5).collect();
    let w1 = normalize(&log_weights(&e2, &lq2, &th).unwrap(), &keep).unwrap();
    let gauge = w0.iter().zip(&w1).map(|(a, b)| (a - b).abs() / a).fold(0.0f64, f64::max);

    let (_, uni) = ess(&vec![0.25; 4]);
    let (one, _) = ess(&[0.0, 1.0, 0.0, 0.0]);

    // Exact proposal: inverse-CDF draws from the quadrature marginal, with
    // the sampler's own piecewise-constant density as log q.
    let c = &s.cfg;
    let grid = uniform_edges(0.0, 60.0, 6000);
    let u = exact_pmf_at(&c.potential, &th, &grid, c.reference.y_range, c.reference.n_quad).unwrap();
    let umin = u.iter().copied().fold(f64::INFINITY, f64::min);
    let p: Vec<f64> = u.iter().map(|v| (-(v - umin) / th.kt).exp()).collect();
    let mut cdf = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (p[i] + p[i - 1]) * (grid[i] - grid[i - 1]);
    }
    let z = cdf[grid.len() - 1];
    let m = 20_000;
    let mut r = Vec::with_capacity(m);
    let mut log_q = Vec::with_capacity(m);
    for _ in 0..m {
        let target = rng.random_range(0.0..z);
        let j = cdf.partition_point(|&c| c <= target).clamp(1, grid.len() - 1);
        let (c0, c1) = (cdf[j - 1], cdf[j]);
        let w = grid[j] - grid[j - 1];
        r.push(grid[j - 1] + w * (target - c0) / (c1 - c0));
        log_q.push(((c1 - c0) / w / z).ln());
    }
    let energy = exact_pmf_at(&c.potential, &th, &r, c.reference.y_range, c.reference.n_quad).unwrap();
    let ens = WeightedEnsemble::build(r, log_q, energy, &th, ClipPolicy::discard(0.0)).unwrap();

    outcome(
        gauge <= 1e-12 && (uni - 1.0).abs() <= 1e-15 && (one - 1.0).abs() <= 1e-15 && ens.ess_norm >= 0.99,
        format!(
            "gauge max rel = {gauge:.1e}; uniform ess_norm = {uni}; one-hot ess_abs = {one}; exact proposal ess_norm = {:.5} (>= 0.99)",
            ens.ess_norm
        ),
    )
}

fn c10(_s: &Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default().with_seed(SEED);
    cfg.trajectory.n_steps = 100_000;
    cfg.trajectory.save_every = 50;
    cfg.trajectory.n_trajectories = 4;
    cfg.pmf_training.epochs = 3;
    cfg.pmf_training.model.mlp.hidden = vec![32, 32];
    cfg.flow_training.epochs = 3;
    cfg.flow_training.model.mlp.hidden = vec![32, 32];
    cfg.sampling.n_samples = 2000;
    cfg.metrics.n_bootstrap = 20;
    let run = |name: &str| {
        let ctx = Context::new(cfg.clone(), dir.path().join(name)).unwrap();
        pipeline::run_all(&ctx).unwrap();
        std::fs::read(ctx.path(pipeline::METRICS_FILE)).unwrap()
    };
    let a = run("first");
    let b = run("second");
    outcome(a == b && !a.is_empty(), format!("metric reports: {} bytes each, identical = {}", a.len(), a == b))
}

type Criterion = fn(&Shared) -> Outcome;

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(&str, Criterion); 10] = [
        ("end-to-end MB recovery", c1),
        ("biased-training recovery", c2),
        ("PMF from biased vs unbiased data", c3),
        ("fiber invariance under CG bias", c4),
        ("KL versus Fisher/LSI bound", c5),
        ("flow likelihood exactness", c6),
        ("numerical substrate", c7),
        ("clipping ablation", c8),
        ("reweighting identities", c9),
        ("pipeline reproducibility", c10),
    ];
    let shared = Shared::new();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = f(&shared);
        failed += usize::from(!o.pass);
        let _ = writeln!(
            std::io::stderr(),
            "criterion {id:>2} {}: {name}: {} [{:.0} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        let _ = writeln!(std::io::stderr(), "{failed} criteria failed");
        std::process::exit(1);
    }
}
