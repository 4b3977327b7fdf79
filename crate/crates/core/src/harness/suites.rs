//! Verification suites. Each suite runs a default parameter sweep, which a
//! [`SuiteRequest`] can narrow to a single `N`, `beta_star` or window, and
//! returns statistics rows (`pass` iff `|value| <= bound`), estimate rows
//! and any extra CSV tables.
//!
//! Rows that summarize a whole sweep carry `N = 0`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{num, SeedRecord, StatRow, Table, BLOCKS_HEADER, COMPARE_HEADER, KERNEL_HEADER, RESIDUAL_HEADER};
use crate::blocks::{azuma_canonical_check, block_average, error_fields, kernel_columns_for, q_local};
use crate::comparison::{
    coupling_gap, kpz_distribution_compare, log_z_samples, mild_identity, pathwise_gaps, she_solve, solve_aux_fields,
    summarize_gaps, AuxMethod, Normalization, SheInit, SheMesh,
};
use crate::error::{Error, Result};
use crate::gartner::{build_ch_field, extract_noise, residual_decomposition, z_regularity_stats};
use crate::heat_kernel::{
    duhamel_residual, homogeneous_kernel, kernel_regularity, kernel_window, max_principle_check, nash_on_diagonal_fit,
    nash_sobolev_check, perturbative_gap, random_walk_oracle, solve_kernel, walk_tv_distance, EstimateReport,
    Generator, Grading, KernelMatrix, KernelMethod, Quadrature,
};
use crate::model::{simulation_window, Convention, DerivedConstants, ModelParams, RawParams, ScaleSchedule};
use crate::rng::{replica_rng, stream_id, stream_rng, Purpose};
use crate::simulator::{init_config, run, InitKind, SimOptions};
use crate::stats::Moments;

pub const SUITES: &[&str] = &[
    "residual",
    "kernel",
    "oracle",
    "duhamel",
    "nash",
    "perturb",
    "sobolev",
    "azuma",
    "martingale",
    "pathwise",
    "kpz",
    "blocks",
    "regularity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRequest {
    #[serde(default, rename = "N")]
    pub n: Option<u32>,
    #[serde(default)]
    pub beta_star: Option<f64>,
    #[serde(default)]
    pub window: Option<usize>,
    /// Replica (or sample) count override.
    #[serde(default)]
    pub replicas: Option<usize>,
    pub seed: u64,
}

impl SuiteRequest {
    pub fn new(seed: u64) -> Self {
        SuiteRequest {
            n: None,
            beta_star: None,
            window: None,
            replicas: None,
            seed,
        }
    }

    fn ns(&self, default: &[u32]) -> Vec<u32> {
        self.n.map_or_else(|| default.to_vec(), |n| vec![n])
    }

    fn betas(&self, default: &[f64]) -> Vec<f64> {
        self.beta_star.map_or_else(|| default.to_vec(), |b| vec![b])
    }

    fn reps(&self, default: usize) -> usize {
        self.replicas.unwrap_or(default).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutput {
    pub suite: String,
    pub stats: Vec<StatRow>,
    pub estimates: Vec<EstimateReport>,
    /// Extra CSV files by name.
    pub tables: Vec<(String, Table)>,
    pub seeds: Vec<SeedRecord>,
    pub notes: Vec<String>,
}

impl SuiteOutput {
    fn new(suite: &str) -> Self {
        SuiteOutput {
            suite: suite.into(),
            stats: Vec::new(),
            estimates: Vec::new(),
            tables: Vec::new(),
            seeds: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        !self.stats.is_empty() && self.stats.iter().all(|s| s.pass)
    }

    pub fn failures(&self) -> Vec<&StatRow> {
        self.stats.iter().filter(|s| !s.pass).collect()
    }

    fn stat(&mut self, name: impl Into<String>, n: u32, beta: f64, value: f64, stderr: f64, bound: f64) {
        self.stats.push(StatRow::new(name, n, beta, value, stderr, bound));
    }

    fn replica_seeds(&mut self, master: u64, count: usize) {
        self.seeds = (0..count as u64)
            .map(|i| SeedRecord {
                replica: i,
                master,
                stream: stream_id(Purpose::Replica, i),
            })
            .collect();
    }
}

pub fn run_suite(name: &str, req: &SuiteRequest) -> Result<SuiteOutput> {
    if let Some(w) = req.window {
        if w < 3 || w % 2 == 0 {
            return Err(Error::InvalidParams(format!("window {w} must be odd and at least 3")));
        }
    }
    match name {
        "residual" => residual(req),
        "kernel" => kernel(req),
        "oracle" => oracle(req),
        "duhamel" => duhamel(req),
        "nash" => nash(req),
        "perturb" => perturb(req),
        "sobolev" => sobolev(req),
        "azuma" => azuma(req),
        "martingale" => martingale(req),
        "pathwise" => pathwise(req),
        "kpz" => kpz(req),
        "blocks" => blocks(req),
        "regularity" => regularity(req),
        other => Err(Error::UnknownSuite(other.into())),
    }
}

fn params(n: u32, beta: f64, slow: Vec<i64>, w: usize) -> Result<ModelParams> {
    ModelParams::validate(&RawParams::new(n, beta, slow, w))
}

/// Largest ratio of consecutive values; at most one iff nonincreasing.
fn max_step_ratio(values: &[f64]) -> f64 {
    values.windows(2).map(|p| p[1] / p[0]).fold(f64::NEG_INFINITY, f64::max)
}

/// Asymptotic standard error of a sample median.
fn median_stderr(values: &[f64]) -> f64 {
    let mut m = Moments::default();
    values.iter().for_each(|v| m.push(*v));
    (std::f64::consts::PI / 2.0).sqrt() * m.stderr()
}

// ---------------------------------------------------------------------

fn residual(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("residual");
    let mut table = Table::new(&RESIDUAL_HEADER);
    let ns = req.ns(&[16, 64, 256, 1024, 4096]);
    let w = req.window.unwrap_or(5);
    for beta in req.betas(&[0.1, 0.25]) {
        let mut ratios = Vec::new();
        let mut qmax = Vec::new();
        for &n in &ns {
            let p = params(n, beta, vec![0], w)?;
            let d = residual_decomposition(&p)?;
            let nf = n as f64;
            out.stat("residual_normal", n, beta, d.normal_max_abs, 0.0, 1e-20 * nf * nf);
            let opt = |v: Option<f64>| v.map_or(String::new(), num);
            for c in &d.normal_cases {
                table.push(vec![
                    n.to_string(),
                    num(beta),
                    c.u.to_string(),
                    c.v.to_string(),
                    num(c.r),
                    opt(c.q_emp),
                    opt(c.qtilde),
                ]);
            }
            for s in &d.slow {
                for c in &s.cases {
                    table.push(vec![
                        n.to_string(),
                        num(beta),
                        c.u.to_string(),
                        c.v.to_string(),
                        num(c.r),
                        opt(c.q_emp),
                        opt(c.qtilde),
                    ]);
                }
            }
            let c_n = nf - nf.powf(1.0 - beta);
            if let (Some(c), Some(q)) = (d.c_fit(), d.max_abs_qtilde()) {
                if c_n > 0.0 {
                    ratios.push(c / c_n);
                    qmax.push(q);
                    out.estimates.push(EstimateReport {
                        name: "residual_prefactor".into(),
                        n,
                        beta_star: beta,
                        constant: c / c_n,
                        exponent: q,
                        grid: vec![],
                        pass: true,
                        note: "exponent column holds max |qtilde|".into(),
                    });
                }
            }
        }
        if ratios.len() >= 2 {
            let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            // Within 20% of one constant: max / min <= 1.2 / 0.8.
            out.stat("residual_prefactor_spread", 0, beta, hi / lo, 0.0, 1.5);
            // Bounded across the sweep: never above twice the smallest-N value.
            let top = qmax.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.stat("residual_qtilde_growth", 0, beta, top / qmax[0], 0.0, 2.0);
        }
    }
    out.tables.push(("residual.csv".into(), table));
    Ok(out)
}

fn kernel(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("kernel");
    let mut rng = stream_rng(req.seed, Purpose::Sampler, 0);
    let cases = req.reps(50);
    let conv = Convention::ExactDiffusivity;
    let (mut dev, mut min_entry, mut ck): (f64, f64, f64) = (0.0, f64::INFINITY, 0.0);
    let mut table = Table::new(&KERNEL_HEADER);
    for case in 0..cases {
        let n = req.n.unwrap_or_else(|| rng.random_range(2..=64));
        let beta = req.beta_star.unwrap_or_else(|| rng.random_range(0.0..=0.3));
        let w = req.window.unwrap_or_else(|| 2 * rng.random_range(4..=32usize) + 1);
        let half = (w / 2) as i64;
        let count = rng.random_range(0..=3usize);
        let slow: Vec<i64> = (0..count).map(|_| rng.random_range(-half..=half)).collect();
        let p = params(n, beta, slow, w)?;
        let c = DerivedConstants::new(&p);
        // Elapsed times from a few to a few hundred mean jump times.
        let scale = 1.0 / (c.n * c.n);
        let t1 = scale * rng.random_range(0.5..50.0);
        let t2 = scale * rng.random_range(0.5..50.0);
        let m = KernelMethod::Uniformization;
        let a = solve_kernel(&p, &c, 0.0, t1, m, conv)?;
        let b = solve_kernel(&p, &c, t1, t1 + t2, m, conv)?;
        let ab = solve_kernel(&p, &c, 0.0, t1 + t2, m, conv)?;
        for k in [&a, &b, &ab] {
            dev = dev.max(k.max_row_sum_deviation());
            min_entry = min_entry.min(k.min_entry());
        }
        ck = ck.max(a.compose(&b).max_abs_diff(&ab));
        if case == 0 {
            let pbar = homogeneous_kernel(&c, 0.0, t1, conv)?;
            let ring = p.ring();
            for x in 0..w {
                for y in 0..w {
                    table.push(vec![
                        num(0.0),
                        num(t1),
                        ring.label(x).to_string(),
                        ring.label(y).to_string(),
                        num(a.get(x, y)),
                        num(pbar.get(x, y)),
                    ]);
                }
            }
        }
    }
    let n = req.n.unwrap_or(0);
    let b = req.beta_star.unwrap_or(f64::NAN);
    out.stat("kernel_row_sum_deviation", n, b, dev, 0.0, 1e-12);
    out.stat("kernel_negative_part", n, b, min_entry.min(0.0), 0.0, 0.0);
    out.stat("kernel_chapman_kolmogorov", n, b, ck, 0.0, 1e-10);
    out.notes.push(format!("{cases} random instances"));
    out.tables.push(("kernel.csv".into(), table));
    Ok(out)
}

fn oracle(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("oracle");
    let conv = Convention::ExactDiffusivity;
    let w = req.window.unwrap_or(65).min(65);
    let mut diff_expm: f64 = 0.0;
    let mut diff_bessel: f64 = 0.0;
    let mut diff_ode: f64 = 0.0;
    for n in req.ns(&[4, 8, 16]) {
        for macro_t in [0.01, 0.05] {
            // Homogeneous instance: three independent constructions.
            let p0 = params(n, 0.0, vec![], w)?;
            let c0 = DerivedConstants::new(&p0);
            let u = solve_kernel(&p0, &c0, 0.0, macro_t, KernelMethod::Uniformization, conv)?;
            let e = solve_kernel(&p0, &c0, 0.0, macro_t, KernelMethod::Expm, conv)?;
            let bes = homogeneous_kernel(&c0, 0.0, macro_t, conv)?;
            diff_expm = diff_expm.max(u.max_abs_diff(&e));
            diff_bessel = diff_bessel.max(u.max_abs_diff(&bes)).max(e.max_abs_diff(&bes));
            // Slow-bond instance.
            let beta = req.beta_star.unwrap_or(0.25);
            let p = params(n, beta, vec![0], w)?;
            let c = DerivedConstants::new(&p);
            let u = solve_kernel(&p, &c, 0.0, macro_t, KernelMethod::Uniformization, conv)?;
            let e = solve_kernel(&p, &c, 0.0, macro_t, KernelMethod::Expm, conv)?;
            let o = solve_kernel(&p, &c, 0.0, macro_t, KernelMethod::Ode, conv)?;
            diff_expm = diff_expm.max(u.max_abs_diff(&e));
            diff_ode = diff_ode.max(u.max_abs_diff(&o)).max(e.max_abs_diff(&o));
        }
    }
    let beta = req.beta_star.unwrap_or(0.25);
    out.stat(
        "oracle_uniformization_vs_expm",
        req.n.unwrap_or(0),
        beta,
        diff_expm,
        0.0,
        1e-10,
    );
    out.stat("oracle_bessel", req.n.unwrap_or(0), 0.0, diff_bessel, 0.0, 1e-10);
    out.stat("oracle_ode", req.n.unwrap_or(0), beta, diff_ode, 0.0, 1e-10);

    let n = req.n.unwrap_or(8);
    let replicas = req.reps(100_000);
    let p = params(n, beta, vec![0], w)?;
    let c = DerivedConstants::new(&p);
    let gen = Generator::new(&c, conv);
    let t = 0.05;
    let k = solve_kernel(&p, &c, 0.0, t, KernelMethod::Uniformization, conv)?;
    let x = p.ring().center();
    let mut rng = stream_rng(req.seed, Purpose::WalkOracle, 0);
    let emp = random_walk_oracle(&gen, &mut rng, replicas, 0.0, t, x)?;
    let row: Vec<f64> = (0..w).map(|y| k.get(x, y)).collect();
    let tv = walk_tv_distance(&emp, &row);
    out.stat(
        "oracle_walk_tv",
        n,
        beta,
        tv,
        0.0,
        3.0 * (w as f64 / replicas as f64).sqrt(),
    );
    Ok(out)
}

fn duhamel(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("duhamel");
    let n = req.n.unwrap_or(8);
    let beta = req.beta_star.unwrap_or(0.25);
    let w = req.window.unwrap_or(65);
    let p = params(n, beta, vec![0], w)?;
    let c = DerivedConstants::new(&p);
    let conv = Convention::ExactDiffusivity;
    let gen = Generator::new(&c, conv);
    let bar = Generator::homogeneous(&c, conv);
    for t in [0.01, 0.1] {
        let q = |panels| Quadrature {
            panels,
            grading: Grading::Uniform,
        };
        let fine = duhamel_residual(&gen, &bar, 0.0, t, q(2000))?;
        let r1 = duhamel_residual(&gen, &bar, 0.0, t, q(100))?;
        let r2 = duhamel_residual(&gen, &bar, 0.0, t, q(200))?;
        out.stat(format!("duhamel_residual_t{t}"), n, beta, fine, 0.0, 1e-6);
        out.stat(format!("duhamel_halving_ratio_t{t}"), n, beta, r1 / r2 - 4.0, 0.0, 0.5);
        out.estimates.push(EstimateReport {
            name: format!("duhamel_t{t}"),
            n,
            beta_star: beta,
            constant: fine,
            exponent: (r1 / r2).log2(),
            grid: vec![(100.0, r1), (200.0, r2), (2000.0, fine)],
            pass: fine < 1e-6 && (3.5..=4.5).contains(&(r1 / r2)),
            note: "uniform midpoint panels; exponent is the observed order".into(),
        });
    }
    Ok(out)
}

fn nash(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("nash");
    // Implied constant of the prefactor bound.
    let constant = 1.0;
    for beta in req.betas(&[0.0, 0.1, 0.25]) {
        for n in req.ns(&[16, 32, 64]) {
            let p = params(n, beta, vec![0], req.window.unwrap_or(65))?;
            let r = nash_on_diagonal_fit(&p, Convention::ExactDiffusivity, constant)?;
            out.stat("nash_slope_offset", n, beta, r.exponent + 0.5, 0.0, 0.1);
            out.stat("nash_prefactor_ratio", n, beta, r.constant, 0.0, constant);
            out.estimates.push(r);
        }
    }
    Ok(out)
}

fn perturb(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("perturb");
    let beta = req.beta_star.unwrap_or(0.1);
    let t = 0.05;
    let conv = Convention::ExactDiffusivity;
    let mut gaps = Vec::new();
    let mut table = Table::new(&COMPARE_HEADER);
    for n in req.ns(&[32, 64, 128]) {
        let p0 = params(n, beta, vec![0], 3)?;
        let c0 = DerivedConstants::new(&p0);
        let w = req.window.unwrap_or_else(|| kernel_window(&c0, t, conv, 65));
        let p = p0.with_window(w)?;
        let c = DerivedConstants::new(&p);
        let sched = ScaleSchedule::build(&p, 0.01, 0.01)?;
        let quarter = solve_kernel(&p, &c, 0.0, t / 4.0, KernelMethod::Uniformization, conv)?;
        let half = KernelMatrix {
            t: t / 2.0,
            ..quarter.compose(&quarter)
        };
        let full = KernelMatrix {
            t,
            ..half.compose(&half)
        };
        let mp = max_principle_check(&[&quarter, &half, &full]);
        out.stat(
            "perturb_max_principle",
            n,
            beta,
            if mp.pass { 0.0 } else { 1.0 },
            0.0,
            0.0,
        );
        let pbar = homogeneous_kernel(&c, 0.0, t, conv)?;
        let g = perturbative_gap(&full, &pbar, &p.slow_indices(), sched.i_partial1_halfwidth, c.n, &[1.0]);
        gaps.push(g.gap * c.n);
        for (name, v) in [
            ("gap_scaled", g.gap * c.n),
            ("gap_all_scaled", g.gap_all * c.n),
            ("gap_weighted_kappa1", g.weighted[0].1),
        ] {
            table.push(vec![
                n.to_string(),
                num(beta),
                num(t),
                "0".into(),
                name.into(),
                num(v),
                num(0.0),
            ]);
        }
    }
    if gaps.len() >= 2 {
        out.stat("perturb_gap_trend", 0, beta, max_step_ratio(&gaps), 0.0, 1.0 - 1e-12);
    } else {
        out.notes.push("single N: trend not assessed".into());
    }
    out.tables.push(("compare.csv".into(), table));
    Ok(out)
}

fn sobolev(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("sobolev");
    let mut rng = stream_rng(req.seed, Purpose::TestFunctions, 0);
    let n = req.n.unwrap_or(64) as f64;
    let r = nash_sobolev_check(&mut rng, req.reps(1000), &[10, 100, 1000], n)?;
    out.stat("nash_sobolev_max_spread", n as u32, 0.0, r.exponent, 0.0, 2.0);
    out.estimates.push(r);
    Ok(out)
}

fn azuma(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("azuma");
    let mut rng = stream_rng(req.seed, Purpose::Sampler, 1);
    let ells: Vec<usize> = (4..=10).map(|k| 1usize << k).collect();
    let rep = azuma_canonical_check(&mut rng, &ells, &[-0.5, 0.0, 0.5], req.reps(10_000), 2)?;
    let mut table = Table::new(&BLOCKS_HEADER);
    for r in &rep.rows {
        table.push(vec![
            "all".into(),
            num(0.0),
            format!("azuma_rho_{}", r.rho),
            r.ell.to_string(),
            num(r.mean),
        ]);
    }
    for (rho, slope, se) in &rep.fits {
        out.stat(format!("azuma_slope_offset_rho_{rho}"), 0, 0.0, slope + 0.5, *se, 0.1);
    }
    out.estimates.extend(rep.estimates());
    out.tables.push(("blocks.csv".into(), table));
    Ok(out)
}

fn martingale(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("martingale");
    let n = req.n.unwrap_or(32);
    let beta = req.beta_star.unwrap_or(0.1);
    let t = 0.25;
    let w = req.window.unwrap_or_else(|| simulation_window(n, t, 65));
    let p = params(n, beta, vec![0], w)?;
    let c = DerivedConstants::new(&p);
    let ring = p.ring();
    let replicas = req.reps(10_000);
    let quarter = (n / 4) as i64;
    let labels: Vec<i64> = (-2..=2).map(|k| k * quarter).collect();
    let probes: Vec<(usize, usize)> = (1..=4)
        .flat_map(|k| labels.iter().map(move |l| (k, *l)))
        .map(|(k, l)| (k, ring.index(l)))
        .collect();
    let samples: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(req.seed, i as u64);
            let init = init_config(&InitKind::BernoulliHalf, w, &mut rng)?;
            let (traj, log) = run(&init, &p, t, t / 4.0, &mut rng, &SimOptions::default())?;
            let noise = extract_noise(&log, &traj, &c)?;
            Ok(probes.iter().map(|(k, x)| noise.martingale[*k][*x]).collect())
        })
        .collect::<Result<_>>()?;
    out.replica_seeds(req.seed, replicas);
    let mut table = Table::new(&COMPARE_HEADER);
    for (j, (k, x)) in probes.iter().enumerate() {
        let mut m = Moments::default();
        samples.iter().for_each(|s| m.push(s[j]));
        let time = *k as f64 * t / 4.0;
        let label = ring.label(*x);
        out.stat(
            format!("martingale_mean_t{time}_x{label}"),
            n,
            beta,
            m.mean(),
            m.stderr(),
            3.0 * m.stderr(),
        );
        table.push(vec![
            n.to_string(),
            num(beta),
            num(time),
            label.to_string(),
            "martingale_mean".into(),
            num(m.mean()),
            num(m.stderr()),
        ]);
    }

    // Coupling at beta_star = 0: Z, Y and X coincide away from the seam.
    let pc = params(n, 0.0, vec![0], w)?;
    let cc = DerivedConstants::new(&pc);
    let radius = (w / 4) as i64;
    let gaps: Vec<f64> = (0..4u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(req.seed, Purpose::Independent, i);
            let init = init_config(&InitKind::BernoulliHalf, w, &mut rng)?;
            let (traj, log) = run(&init, &pc, t, t / 10.0, &mut rng, &SimOptions::default())?;
            let aux = solve_aux_fields(
                init.as_slice(),
                &log,
                &cc,
                &traj.times,
                AuxMethod::EventResolved { substeps: 1 },
                None,
            )?;
            Ok(coupling_gap(&aux, radius))
        })
        .collect::<Result<_>>()?;
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    out.stat("coupling_relative_gap", n, 0.0, worst, 0.0, 1e-6);
    table.push(vec![
        n.to_string(),
        num(0.0),
        num(t),
        radius.to_string(),
        "coupling_relative_gap".into(),
        num(worst),
        num(0.0),
    ]);
    out.tables.push(("compare.csv".into(), table));
    Ok(out)
}

fn pathwise(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("pathwise");
    let beta = req.beta_star.unwrap_or(0.1);
    let t = 0.25;
    let replicas = req.reps(1000);
    let kappa = 1.0;
    let mut med1 = Vec::new();
    let mut med2 = Vec::new();
    let mut table = Table::new(&COMPARE_HEADER);
    for n in req.ns(&[16, 32, 64]) {
        let w = req.window.unwrap_or_else(|| simulation_window(n, t, 65));
        let p = params(n, beta, vec![0], w)?;
        let c = DerivedConstants::new(&p);
        let method = AuxMethod::GapForm {
            step_fraction: 0.1,
            half_width: w / 4,
        };
        let norms: Vec<_> = (0..replicas)
            .into_par_iter()
            .map(|i| {
                let mut rng = replica_rng(req.seed, i as u64);
                let init = init_config(&InitKind::BernoulliHalf, w, &mut rng)?;
                let (traj, log) = run(&init, &p, t, t / 20.0, &mut rng, &SimOptions::default())?;
                let aux = solve_aux_fields(init.as_slice(), &log, &c, &traj.times, method, None)?;
                Ok(pathwise_gaps(&aux, c.n, kappa))
            })
            .collect::<Result<_>>()?;
        let s = summarize_gaps(n, beta, &norms, &[]);
        let se1 = median_stderr(&norms.iter().map(|g| g.phi1).collect::<Vec<_>>());
        let se2 = median_stderr(&norms.iter().map(|g| g.phi2).collect::<Vec<_>>());
        for (name, v, se) in [
            ("median_phi1", s.median_phi1, se1),
            ("median_phi2", s.median_phi2, se2),
            ("median_y", s.median_y, f64::NAN),
            ("median_x", s.median_x, f64::NAN),
        ] {
            table.push(vec![
                n.to_string(),
                num(beta),
                num(t),
                "0".into(),
                name.into(),
                num(v),
                num(se),
            ]);
        }
        med1.push(s.median_phi1);
        med2.push(s.median_phi2);
    }
    out.replica_seeds(req.seed, replicas);
    if med1.len() >= 2 {
        out.stat("pathwise_phi1_trend", 0, beta, max_step_ratio(&med1), 0.0, 1.0);
        out.stat("pathwise_phi2_trend", 0, beta, max_step_ratio(&med2), 0.0, 1.0);
    } else {
        out.stat("pathwise_phi1_finite", req.n.unwrap_or(0), beta, med1[0], 0.0, f64::MAX);
        out.stat("pathwise_phi2_finite", req.n.unwrap_or(0), beta, med2[0], 0.0, f64::MAX);
        out.notes.push("single N: trend not assessed".into());
    }
    out.tables.push(("compare.csv".into(), table));
    Ok(out)
}

fn kpz(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("kpz");
    let beta = req.beta_star.unwrap_or(0.1);
    let t = 0.5;
    let replicas = req.reps(1000);
    let mut table = Table::new(&COMPARE_HEADER);

    // Continuum reference: mean of the stochastic flow against the
    // deterministic flow on the same mesh.
    let dx = 0.05;
    let mesh = SheMesh {
        dx,
        dt: 0.25 * dx * dx,
        half_width: 4.0,
    };
    let det = she_solve(
        &SheInit::Delta,
        t,
        mesh,
        0.0,
        &mut stream_rng(req.seed, Purpose::She, u64::MAX >> 24),
    )?;
    let cells = mesh.cells();
    let probes: Vec<usize> = (0..20).map(|k| cells / 2 - 20 + 2 * k).collect();
    let she: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let g = she_solve(
                &SheInit::Delta,
                t,
                mesh,
                1.0,
                &mut stream_rng(req.seed, Purpose::She, i as u64),
            )?;
            Ok(g.values)
        })
        .collect::<Result<_>>()?;
    for &j in &probes {
        let mut m = Moments::default();
        she.iter().for_each(|v| m.push(v[j]));
        let x = det.x[j];
        out.stat(
            format!("she_mean_x{}", num(x)),
            0,
            0.0,
            m.mean() - det.values[j],
            m.stderr(),
            3.0 * m.stderr(),
        );
        table.push(vec![
            "0".into(),
            num(0.0),
            num(t),
            num(x),
            "she_mean_minus_heat".into(),
            num(m.mean() - det.values[j]),
            num(m.stderr()),
        ]);
    }
    let centre = cells / 2;
    let she_log: Vec<f64> = she.iter().map(|v| v[centre].ln()).collect();

    let mut groups = Vec::new();
    for n in req.ns(&[32, 64, 128]) {
        // Common random numbers: both ensembles use the same replica streams.
        let base = log_z_samples(
            n,
            0.0,
            &[0],
            t,
            0,
            &InitKind::NarrowWedge,
            Normalization::NarrowWedge,
            replicas,
            req.seed,
        )?;
        let slow = log_z_samples(
            n,
            beta,
            &[0],
            t,
            0,
            &InitKind::NarrowWedge,
            Normalization::NarrowWedge,
            replicas,
            req.seed,
        )?;
        for (b, s) in [(0.0, &base), (beta, &slow)] {
            let mut m = Moments::default();
            s.iter().for_each(|v| m.push(*v));
            table.push(vec![
                n.to_string(),
                num(b),
                num(t),
                "0".into(),
                "log_z_mean".into(),
                num(m.mean()),
                num(m.stderr()),
            ]);
            table.push(vec![
                n.to_string(),
                num(b),
                num(t),
                "0".into(),
                "log_z_std".into(),
                num(m.std()),
                num(f64::NAN),
            ]);
        }
        groups.push((n, beta, base, slow));
    }
    let rep = kpz_distribution_compare(&groups, Some(&she_log));
    for r in &rep.rows {
        table.push(vec![
            r.n.to_string(),
            num(r.beta_star),
            num(t),
            "0".into(),
            r.statistic.clone(),
            num(r.value),
            num(f64::NAN),
        ]);
        table.push(vec![
            r.n.to_string(),
            num(r.beta_star),
            num(t),
            "0".into(),
            format!("{}_pvalue", r.statistic),
            num(r.pvalue),
            num(f64::NAN),
        ]);
    }
    let ks: Vec<f64> = rep.ks_beta.iter().map(|k| k.1).collect();
    if ks.len() >= 2 {
        // Strictly decreasing: every ratio below one.
        let worst = max_step_ratio(&ks);
        out.stat("kpz_ks_trend", 0, beta, worst, 0.0, 1.0 - 1e-12);
    } else {
        out.notes.push("single N: KS trend not assessed".into());
    }
    out.replica_seeds(req.seed, replicas);
    out.tables.push(("compare.csv".into(), table));
    Ok(out)
}

fn blocks(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("blocks");
    let n = req.n.unwrap_or(16);
    let beta = req.beta_star.unwrap_or(0.01);
    let t = 0.05;
    // Wide enough that the seam does not reach the interior quarter.
    let w = req.window.unwrap_or_else(|| simulation_window(n, t, 161));
    let p = params(n, beta, vec![0], w)?;
    let c = DerivedConstants::new(&p);
    let sched = ScaleSchedule::build(&p, 0.01, 0.01)?;
    let gen = Generator::new(&c, Convention::ExactDiffusivity);
    let y = p.ring().center();
    let replicas = req.reps(4);
    let results: Vec<(Table, f64, f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(req.seed, i as u64);
            let init = init_config(&InitKind::BernoulliHalf, w, &mut rng)?;
            let (traj, log) = run(&init, &p, t, t / 10.0, &mut rng, &SimOptions::default())?;
            let ch = build_ch_field(&traj, &c);
            let cols = kernel_columns_for(&ch, &gen, &c)?;
            let f = error_fields(&ch, &traj, &log, &cols, &sched, &c)?;
            let scale = f
                .e_one
                .iter()
                .flatten()
                .fold(0.0f64, |a, v| a.max(v.abs()))
                .max(f64::MIN_POSITIVE);
            let tele = f.telescoping_error() / scale;
            let mild = mild_identity(init.as_slice(), &log, &c, t)?;
            let ring = p.ring();
            let mut mild_err: f64 = 0.0;
            let mut mild_scale: f64 = 0.0;
            for x in 0..w {
                if ring.label(x).unsigned_abs() as usize <= w / 4 {
                    mild_err = mild_err.max((mild.lhs[x] - mild.rhs[x]).abs());
                    mild_scale = mild_scale.max(mild.rhs[x].abs());
                }
            }
            let mut table = Table::new(&BLOCKS_HEADER);
            let label = ring.label(y).to_string();
            for (k, time) in traj.times.iter().enumerate() {
                let s = &traj.spins[k];
                for (name, v) in [
                    ("q", q_local(s, y)),
                    ("A_ell", block_average(s, sched.ell_n, y)?),
                    ("A_m", block_average(s, sched.m_n, y)?),
                ] {
                    table.push(vec![i.to_string(), num(*time), name.into(), label.clone(), num(v)]);
                }
                for (name, field) in f.named() {
                    table.push(vec![
                        i.to_string(),
                        num(*time),
                        name.into(),
                        label.clone(),
                        num(field[k][y]),
                    ]);
                }
            }
            Ok((table, tele, mild_err, mild_scale))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&BLOCKS_HEADER);
    let mut tele: f64 = 0.0;
    let mut mild: f64 = 0.0;
    for (tb, te, me, ms) in results {
        table.extend(tb);
        tele = tele.max(te);
        mild = mild.max(me / ms.max(f64::MIN_POSITIVE));
    }
    out.replica_seeds(req.seed, replicas);
    out.stat("blocks_telescoping_relative", n, beta, tele, 0.0, 1e-10);
    out.stat("mild_identity_relative", n, beta, mild, 0.0, 1e-6);
    out.tables.push(("blocks.csv".into(), table));
    Ok(out)
}

fn regularity(req: &SuiteRequest) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::new("regularity");
    let n = req.n.unwrap_or(16);
    let beta = req.beta_star.unwrap_or(0.01);
    let conv = Convention::ExactDiffusivity;
    let t = 0.05;
    let p0 = params(n, beta, vec![0], 3)?;
    let w = req
        .window
        .unwrap_or_else(|| kernel_window(&DerivedConstants::new(&p0), t, conv, 65));
    let p = p0.with_window(w)?;
    let c = DerivedConstants::new(&p);
    let k = solve_kernel(&p, &c, 0.0, t, KernelMethod::Uniformization, conv)?;
    let tau = 1.0 / (c.n * c.n);
    let later = solve_kernel(&p, &c, 0.0, t + tau, KernelMethod::Uniformization, conv)?;
    for lag in [1usize, 2, 4] {
        let r = kernel_regularity(&k, &later, lag, c.n, beta, 1.0);
        out.estimates.push(EstimateReport {
            name: format!("kernel_gradient_k{lag}"),
            n,
            beta_star: beta,
            constant: r.grad_sup / r.grad_bound,
            exponent: r.time_sup / r.time_bound,
            grid: vec![],
            pass: r.grad_sup <= r.grad_bound && r.time_sup <= r.time_bound,
            note: "constant: gradient sup over bound shape; exponent: time sup over bound shape".into(),
        });
    }

    let ts = 0.05;
    let ws = simulation_window(n, ts, 65);
    let ps = p.with_window(ws)?;
    let cs = DerivedConstants::new(&ps);
    let sched = ScaleSchedule::build(&ps, 0.01, 0.01)?;
    let dt = sched.tau_n_star.min(ts / 10.0);
    let mut rng = replica_rng(req.seed, 0);
    let init = init_config(&InitKind::BernoulliHalf, ws, &mut rng)?;
    let opts = SimOptions {
        record_log: false,
        ..Default::default()
    };
    let (traj, _) = run(&init, &ps, ts, dt, &mut rng, &opts)?;
    let ch = build_ch_field(&traj, &cs);
    let r = z_regularity_stats(&ch, &traj, &sched, &ps, 1.0)?;
    out.estimates.push(EstimateReport {
        name: "z_time_regularity".into(),
        n,
        beta_star: beta,
        constant: r.time_sup,
        exponent: r.time_violation_fraction,
        grid: vec![],
        pass: r.time_violation_fraction == 0.0,
        note: "constant: sup |D_tau Z| / Z; exponent: violation fraction".into(),
    });
    out.replica_seeds(req.seed, 1);
    out.stat("block_height_identity", n, beta, r.block_identity_err, 0.0, 1e-9);
    Ok(out)
}
