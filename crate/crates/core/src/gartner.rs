//! Height function, Cole–Hopf field, generator residual and compensated
//! noise.
//!
//! Heights are anchored at the origin: `h_0 = 2 lambda * flux` where the
//! flux counts leftward minus rightward crossings of bond `(0, 1)`, and
//! `h_x - h_{x-1} = lambda * eta_x` along the ring arc from the leftmost to
//! the rightmost label (the wrap bond is excluded). A jump across bond
//! `(x, x+1)` then changes only `h_x`, by `+2 lambda` (leftward) or
//! `-2 lambda` (rightward), so `Z_x = exp(-h_x + nu t)` picks up the mark
//! `e^{-+2 lambda} - 1`.

use astro_float::{BigFloat, Consts, RoundingMode};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DerivedConstants, ModelParams, Ring, ScaleSchedule};
use crate::simulator::{Direction, Event, EventLog, TrajectorySample};

/// Height and Cole–Hopf field on a snapshot grid. Rows are indexed by
/// snapshot, columns by ring index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CHField {
    pub times: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub lambda: f64,
    pub nu: f64,
}

impl CHField {
    pub fn window(&self) -> usize {
        self.z.first().map_or(0, |r| r.len())
    }
}

/// Heights of one configuration given the origin flux.
pub fn heights(spins: &[i8], flux: i64, lambda: f64) -> Vec<f64> {
    let w = spins.len();
    let c = w / 2;
    let mut h = vec![0.0; w];
    h[c] = 2.0 * lambda * flux as f64;
    for i in c + 1..w {
        h[i] = h[i - 1] + lambda * spins[i] as f64;
    }
    for i in (0..c).rev() {
        h[i] = h[i + 1] - lambda * spins[i + 1] as f64;
    }
    h
}

pub fn build_ch_field(traj: &TrajectorySample, consts: &DerivedConstants) -> CHField {
    let lambda = consts.lambda;
    let nu = consts.nu;
    let mut hs = Vec::with_capacity(traj.len());
    let mut zs = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let h = heights(&traj.spins[k], traj.flux[k], lambda);
        let t = traj.times[k];
        zs.push(h.iter().map(|hx| (-hx + nu * t).exp()).collect());
        hs.push(h);
    }
    CHField {
        times: traj.times.clone(),
        h: hs,
        z: zs,
        lambda,
        nu,
    }
}

/// Supremum of `e^{-kappa |x| / N} |f|` over a space-time array whose rows
/// cover the whole ring.
pub fn weighted_sup_norm(field: &[Vec<f64>], n: f64, kappa: f64) -> f64 {
    field
        .iter()
        .map(|row| weighted_sup_norm_row(row, n, kappa))
        .fold(0.0, f64::max)
}

pub fn weighted_sup_norm_row(row: &[f64], n: f64, kappa: f64) -> f64 {
    let ring = Ring::new(row.len() | 1);
    row.iter()
        .enumerate()
        .map(|(i, v)| {
            let x = ring.label(i).abs() as f64;
            (-kappa * x / n).exp() * v.abs()
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------
// Generator residual in extended precision.

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

/// Nearest f64 of an extended-precision value.
fn big_to_f64(x: &BigFloat) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    let Some((words, _, sign, exponent, _)) = x.as_raw_parts() else {
        return f64::NAN;
    };
    // Mantissa is normalized with its top bit in the most significant word.
    let top = *words.last().unwrap() as f64;
    let next = if words.len() > 1 {
        words[words.len() - 2] as f64 / 2f64.powi(64)
    } else {
        0.0
    };
    let mag = (top + next) * 2f64.powi(exponent - 64);
    if sign == astro_float::Sign::Neg {
        -mag
    } else {
        mag
    }
}

struct Big {
    cc: Consts,
}

impl Big {
    fn new() -> Self {
        Big {
            cc: Consts::new().expect("astro-float constants"),
        }
    }
    fn f(&self, v: f64) -> BigFloat {
        BigFloat::from_f64(v, PREC)
    }
    fn add(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.add(b, PREC, RM)
    }
    fn sub(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.sub(b, PREC, RM)
    }
    fn mul(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.mul(b, PREC, RM)
    }
    fn div(&self, a: &BigFloat, b: &BigFloat) -> BigFloat {
        a.div(b, PREC, RM)
    }
    fn sqrt(&self, a: &BigFloat) -> BigFloat {
        a.sqrt(PREC, RM)
    }
    fn ln(&mut self, a: &BigFloat) -> BigFloat {
        a.ln(PREC, RM, &mut self.cc)
    }
    fn exp(&mut self, a: &BigFloat) -> BigFloat {
        a.exp(PREC, RM, &mut self.cc)
    }
    fn pow(&mut self, a: &BigFloat, e: &BigFloat) -> BigFloat {
        a.pow(e, PREC, RM, &mut self.cc)
    }
}

/// Residual of one bond for one local pattern `(u, v) = (eta_x, eta_{x+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualCase {
    pub u: i8,
    pub v: i8,
    pub r: f64,
    /// `R / C_N`; absent when `C_N = 0`.
    pub q_emp: Option<f64>,
    /// `sqrt(N) (Q_emp - u v)`; absent when `C_N = 0`.
    pub qtilde: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlowBondResidual {
    pub bond: i64,
    pub c_fit: f64,
    pub cases: [ResidualCase; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualDecomposition {
    pub n: u32,
    pub beta_star: f64,
    /// Largest |R| over the four patterns at a normal bond.
    pub normal_max_abs: f64,
    pub normal_cases: [ResidualCase; 4],
    pub slow: Vec<SlowBondResidual>,
}

impl ResidualDecomposition {
    pub fn max_abs_qtilde(&self) -> Option<f64> {
        self.slow
            .iter()
            .flat_map(|s| s.cases.iter().filter_map(|c| c.qtilde))
            .map(f64::abs)
            .reduce(f64::max)
    }

    /// Largest |Q_emp - u v| over slow bonds.
    pub fn max_abs_offset(&self) -> Option<f64> {
        self.slow
            .iter()
            .flat_map(|s| s.cases.iter().filter_map(|c| c.q_emp.map(|q| q - (c.u * c.v) as f64)))
            .map(f64::abs)
            .reduce(f64::max)
    }

    pub fn c_fit(&self) -> Option<f64> {
        self.slow.first().map(|s| s.c_fit)
    }
}

pub const PATTERNS: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Four-case enumeration of the generator-matching residual
/// `R(u,v) = rate * mark + nu - D_x (e^{-lambda v} + e^{lambda u} - 2)`
/// with 256-bit arithmetic. Normal-bond residuals above `1e-20 N^2` are a
/// hard error.
pub fn residual_decomposition(params: &ModelParams) -> Result<ResidualDecomposition> {
    let mut b = Big::new();
    let n = b.f(params.n_f64());
    let half = b.f(0.5);
    let one = b.f(1.0);
    let two = b.f(2.0);
    let n2 = b.mul(&n, &n);
    let n32 = {
        let s = b.sqrt(&n);
        b.mul(&n, &s)
    };
    let ex = b.f(2.0 - params.beta_star());
    let n2b = b.pow(&n, &ex);
    let p = b.mul(&half, &b.add(&n2, &n32));
    let q = b.mul(&half, &n2);
    let ps = b.mul(&half, &b.add(&n2b, &n32));
    let qs = b.mul(&half, &n2b);
    let ratio = b.div(&p, &q);
    let lambda = {
        let l = b.ln(&ratio);
        b.mul(&half, &l)
    };
    let sqrt_pq = b.sqrt(&b.mul(&p, &q));
    let nu = b.sub(&b.add(&p, &q), &b.mul(&two, &sqrt_pq));
    let d_normal = sqrt_pq.clone();
    let d_slow = b.sqrt(&b.mul(&ps, &qs));
    let e_l = b.exp(&lambda);
    let e_ml = b.exp(&lambda.neg());
    let e_2l = b.mul(&e_l, &e_l);
    let e_m2l = b.mul(&e_ml, &e_ml);
    let mark_left = b.sub(&e_m2l, &one);
    let mark_right = b.sub(&e_2l, &one);

    let residual = |pl: &BigFloat, pr: &BigFloat, d: &BigFloat, u: i8, v: i8| -> BigFloat {
        let jump = match (u, v) {
            (-1, 1) => b.mul(pl, &mark_left),
            (1, -1) => b.mul(pr, &mark_right),
            _ => b.f(0.0),
        };
        let ev = if v == 1 { &e_ml } else { &e_l };
        let eu = if u == 1 { &e_l } else { &e_ml };
        let lap = b.mul(d, &b.sub(&b.add(ev, eu), &two));
        b.sub(&b.add(&jump, &nu), &lap)
    };

    let nf = params.n_f64();
    let tol = 1e-20 * nf * nf;
    let mut normal_cases = [ResidualCase {
        u: 0,
        v: 0,
        r: 0.0,
        q_emp: None,
        qtilde: None,
    }; 4];
    let mut normal_max_abs: f64 = 0.0;
    for (k, (u, v)) in PATTERNS.iter().enumerate() {
        let r = big_to_f64(&residual(&p, &q, &d_normal, *u, *v));
        normal_max_abs = normal_max_abs.max(r.abs());
        normal_cases[k] = ResidualCase {
            u: *u,
            v: *v,
            r,
            q_emp: None,
            qtilde: None,
        };
    }
    if !(normal_max_abs <= tol) {
        return Err(Error::NonSlowResidual {
            value: normal_max_abs,
            tol,
        });
    }

    let rs: Vec<BigFloat> = PATTERNS
        .iter()
        .map(|(u, v)| residual(&ps, &qs, &d_slow, *u, *v))
        .collect();
    let c_big = b.mul(&half, &b.add(&rs[0], &rs[3]));
    let c_fit = big_to_f64(&c_big);
    let sqrt_n = nf.sqrt();
    let mut cases = normal_cases;
    for (k, (u, v)) in PATTERNS.iter().enumerate() {
        let r = big_to_f64(&rs[k]);
        let (q_emp, qtilde) = if c_big.is_zero() || c_fit.abs() <= tol {
            (None, None)
        } else {
            let qe = b.div(&rs[k], &c_big);
            let off = b.sub(&qe, &b.f((u * v) as f64));
            (Some(big_to_f64(&qe)), Some(sqrt_n * big_to_f64(&off)))
        };
        cases[k] = ResidualCase {
            u: *u,
            v: *v,
            r,
            q_emp,
            qtilde,
        };
    }
    let slow = params
        .slow_bonds()
        .iter()
        .map(|bond| SlowBondResidual {
            bond: *bond,
            c_fit,
            cases,
        })
        .collect();
    Ok(ResidualDecomposition {
        n: params.n(),
        beta_star: params.beta_star(),
        normal_max_abs,
        normal_cases,
        slow,
    })
}

/// Double-precision residual table per ring index, used by the field
/// solvers: `table[x][k]` is `R` at site `x` for pattern `PATTERNS[k]`.
/// Zero at normal sites by construction.
pub fn residual_table(consts: &DerivedConstants) -> Vec<[f64; 4]> {
    let lambda = consts.lambda;
    let nu = consts.nu;
    (0..consts.window())
        .map(|x| {
            if !consts.is_slow[x] {
                return [0.0; 4];
            }
            let pair = consts.bond(x);
            let d = consts.a_field[x] * consts.sqrt_pq;
            let mut out = [0.0; 4];
            for (k, (u, v)) in PATTERNS.iter().enumerate() {
                let jump = match (u, v) {
                    (-1, 1) => pair.left * (-2.0 * lambda).exp_m1(),
                    (1, -1) => pair.right * (2.0 * lambda).exp_m1(),
                    _ => 0.0,
                };
                let lap = d * ((-lambda * *v as f64).exp_m1() + (lambda * *u as f64).exp_m1());
                out[k] = jump + nu - lap;
            }
            out
        })
        .collect()
}

#[inline]
pub fn pattern_index(u: i8, v: i8) -> usize {
    match (u, v) {
        (1, 1) => 0,
        (1, -1) => 1,
        (-1, 1) => 2,
        _ => 3,
    }
}

// ---------------------------------------------------------------------
// Compensated noise.

/// Jump intensity times mark at a site with local pattern `(u, v)`.
#[inline]
pub fn compensator_rate(consts: &DerivedConstants, x: usize, u: i8, v: i8) -> f64 {
    match (u, v) {
        (-1, 1) => consts.bond(x).left * (-2.0 * consts.lambda).exp_m1(),
        (1, -1) => consts.bond(x).right * (2.0 * consts.lambda).exp_m1(),
        _ => 0.0,
    }
}

/// Streaming per-site bookkeeping of `int r dt`, `sum ln(1 + m)` and the
/// compensated integral `int Z dxi`. Sites are brought up to date lazily
/// when an event touches them or when the caller harvests.
#[derive(Debug, Clone)]
pub struct NoiseAccumulator {
    ring: Ring,
    nu: f64,
    two_lambda: f64,
    mark_left: f64,
    mark_right: f64,
    rate_left: Vec<f64>,
    rate_right: Vec<f64>,
    spins: Vec<i8>,
    log_z: Vec<f64>,
    last: Vec<f64>,
    rate: Vec<f64>,
    comp: Vec<f64>,
    log_jump: Vec<f64>,
    mart: Vec<f64>,
}

impl NoiseAccumulator {
    pub fn new(consts: &DerivedConstants, spins: &[i8], log_z: &[f64], t0: f64) -> Self {
        let w = spins.len();
        let ring = Ring::new(w);
        let lambda = consts.lambda;
        let mark_left = (-2.0 * lambda).exp_m1();
        let mark_right = (2.0 * lambda).exp_m1();
        let mut acc = NoiseAccumulator {
            ring,
            nu: consts.nu,
            two_lambda: 2.0 * lambda,
            mark_left,
            mark_right,
            rate_left: (0..w).map(|x| consts.bond(x).left * mark_left).collect(),
            rate_right: (0..w).map(|x| consts.bond(x).right * mark_right).collect(),
            spins: spins.to_vec(),
            log_z: log_z.to_vec(),
            last: vec![t0; w],
            rate: vec![0.0; w],
            comp: vec![0.0; w],
            log_jump: vec![0.0; w],
            mart: vec![0.0; w],
        };
        for x in 0..w {
            acc.rate[x] = acc.local_rate(x);
        }
        acc
    }

    #[inline]
    fn local_rate(&self, x: usize) -> f64 {
        match (self.spins[x], self.spins[self.ring.next(x)]) {
            (-1, 1) => self.rate_left[x],
            (1, -1) => self.rate_right[x],
            _ => 0.0,
        }
    }

    #[inline]
    fn flush(&mut self, x: usize, t: f64) {
        let dt = t - self.last[x];
        if dt <= 0.0 {
            return;
        }
        let r = self.rate[x];
        if r != 0.0 {
            self.comp[x] += r * dt;
            let growth = if self.nu > 0.0 {
                (self.nu * dt).exp_m1() / self.nu
            } else {
                dt
            };
            self.mart[x] -= r * self.log_z[x].exp() * growth;
        }
        self.log_z[x] += self.nu * dt;
        self.last[x] = t;
    }

    pub fn apply(&mut self, ev: &Event) {
        let b = ev.bond as usize;
        let prev = self.ring.prev(b);
        let next = self.ring.next(b);
        self.flush(prev, ev.time);
        self.flush(b, ev.time);
        self.flush(next, ev.time);
        let (mark, dlog) = match ev.direction {
            Direction::Left => (self.mark_left, -self.two_lambda),
            Direction::Right => (self.mark_right, self.two_lambda),
        };
        self.mart[b] += self.log_z[b].exp() * mark;
        self.log_jump[b] += dlog;
        self.log_z[b] += dlog;
        self.spins.swap(b, next);
        self.rate[prev] = self.local_rate(prev);
        self.rate[b] = self.local_rate(b);
        self.rate[next] = self.local_rate(next);
    }

    /// Bring every site to time `t`.
    pub fn sync(&mut self, t: f64) {
        for x in 0..self.spins.len() {
            self.flush(x, t);
        }
    }

    /// Sync to `t`, return and reset the interval accumulators
    /// `(int r dt, sum ln(1+m))`.
    pub fn harvest(&mut self, t: f64) -> (Vec<f64>, Vec<f64>) {
        self.sync(t);
        let w = self.spins.len();
        (
            std::mem::replace(&mut self.comp, vec![0.0; w]),
            std::mem::replace(&mut self.log_jump, vec![0.0; w]),
        )
    }

    /// Like [`harvest`](Self::harvest) but writes into caller buffers.
    pub fn harvest_into(&mut self, t: f64, comp: &mut [f64], log_jump: &mut [f64]) {
        self.sync(t);
        comp.copy_from_slice(&self.comp);
        log_jump.copy_from_slice(&self.log_jump);
        self.comp.iter_mut().for_each(|v| *v = 0.0);
        self.log_jump.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Bring one site to `t` and take its interval accumulators
    /// `(int r dt, sum ln(1+m))`.
    pub fn harvest_site(&mut self, x: usize, t: f64) -> (f64, f64) {
        self.flush(x, t);
        let out = (self.comp[x], self.log_jump[x]);
        self.comp[x] = 0.0;
        self.log_jump[x] = 0.0;
        out
    }

    /// `log Z_x` at a time no earlier than the site's last update.
    pub fn log_z_at(&self, x: usize, t: f64) -> f64 {
        self.log_z[x] + self.nu * (t - self.last[x])
    }

    pub fn martingale(&self) -> &[f64] {
        &self.mart
    }

    pub fn log_z(&self) -> &[f64] {
        &self.log_z
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn rates(&self) -> &[f64] {
        &self.rate
    }

    /// Sites whose `log Z` or intensity an event on `bond` touches.
    pub fn touched(&self, bond: usize) -> [usize; 3] {
        [self.ring.prev(bond), bond, self.ring.next(bond)]
    }
}

/// One jump mark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpMark {
    pub time: f64,
    pub site: u32,
    pub mark: f64,
}

/// Noise data on the snapshot grid. Interval `k` is `(t_k, t_{k+1}]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompensatedNoise {
    pub times: Vec<f64>,
    pub marks: Vec<JumpMark>,
    /// `int r dt` over each interval, per site.
    pub compensator: Vec<Vec<f64>>,
    /// `sum ln(1 + m)` over each interval, per site.
    pub log_jumps: Vec<Vec<f64>>,
    /// Compensated integral `int_0^{t_k} Z dxi` per site.
    pub martingale: Vec<Vec<f64>>,
    /// Intensity `r` right after each snapshot time.
    pub intensity: Vec<Vec<f64>>,
}

/// Extract marks and compensators from a run and check the exact update
/// `Z_T = Z_S e^{nu (T - S)} prod (1 + m)` against the Cole–Hopf field.
pub fn extract_noise(log: &EventLog, traj: &TrajectorySample, consts: &DerivedConstants) -> Result<CompensatedNoise> {
    let ch = build_ch_field(traj, consts);
    let log_z0: Vec<f64> = ch.z[0].iter().map(|z| z.ln()).collect();
    let mut acc = NoiseAccumulator::new(consts, &traj.spins[0], &log_z0, traj.times[0]);
    let lambda = consts.lambda;
    let mark_left = (-2.0 * lambda).exp_m1();
    let mark_right = (2.0 * lambda).exp_m1();
    let k_max = traj.len();
    let mut out = CompensatedNoise {
        times: traj.times.clone(),
        marks: Vec::with_capacity(log.events.len()),
        compensator: Vec::with_capacity(k_max.saturating_sub(1)),
        log_jumps: Vec::with_capacity(k_max.saturating_sub(1)),
        martingale: vec![vec![0.0; traj.window()]],
        intensity: vec![acc.rates().to_vec()],
    };
    let mut idx = 0;
    for k in 1..k_max {
        let t = traj.times[k];
        while idx < log.events.len() && log.events[idx].time <= t {
            let ev = &log.events[idx];
            out.marks.push(JumpMark {
                time: ev.time,
                site: ev.bond,
                mark: if ev.direction == Direction::Left {
                    mark_left
                } else {
                    mark_right
                },
            });
            acc.apply(ev);
            idx += 1;
        }
        let (comp, lj) = acc.harvest(t);
        let dt = t - traj.times[k - 1];
        for x in 0..traj.window() {
            let predicted = ch.z[k - 1][x] * (consts.nu * dt + lj[x]).exp();
            let actual = ch.z[k][x];
            let rel = (predicted - actual).abs() / actual;
            if !(rel <= 1e-9) {
                return Err(Error::ReplayMismatch {
                    snapshot: k,
                    site: x,
                    rel_err: rel,
                });
            }
        }
        out.compensator.push(comp);
        out.log_jumps.push(lj);
        out.martingale.push(acc.martingale().to_vec());
        out.intensity.push(acc.rates().to_vec());
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Regularity statistics.

/// `c_{N,k}` shape of the spatial regularity bound (independent of `k`).
pub fn space_regularity_scale(n: f64, beta: f64, eps: f64, m_n: usize) -> f64 {
    n.powf(-0.5 + 32.0 * beta)
        + n.powf(-0.5 + 2.0 * beta + eps) * (m_n as f64).sqrt()
        + n.powf(-46.0 * beta + eps)
        + n.powf(-0.25 + 16.0 * beta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceRegularityRow {
    pub k: usize,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    /// Effective lag actually used (a whole number of snapshot steps).
    pub tau: f64,
    /// `sup |D_tau Z| / Z`.
    pub time_sup: f64,
    /// `N^{3/2 + eps} tau`.
    pub time_bound: f64,
    pub time_violation_fraction: f64,
    pub space: Vec<SpaceRegularityRow>,
    /// `sup (1/m) |sum_{w=1}^m eta_{y+w}| Z_y`.
    pub block_sup: f64,
    /// Largest ratio of the block statistic to `N^{1/2} m^{-1} |log(1 + grad_m Z / Z)| Z`.
    pub block_ratio_max: f64,
    /// Largest deviation from the identity `|mean spin| = |grad_m h| / (lambda m)`.
    pub block_identity_err: f64,
}

/// Regularity statistics of `Z` on the snapshot grid. The time lag is
/// `tau_N_star` rounded to a whole number of (uniform) snapshot steps.
pub fn z_regularity_stats(
    ch: &CHField,
    traj: &TrajectorySample,
    schedule: &ScaleSchedule,
    params: &ModelParams,
    kappa: f64,
) -> Result<RegularityReport> {
    let n = params.n_f64();
    let eps = schedule.eps;
    if ch.times.len() < 2 {
        return Err(Error::KernelGrid("need at least two snapshots".into()));
    }
    let dt = ch.times[1] - ch.times[0];
    let lag = (schedule.tau_n_star / dt).round() as usize;
    if lag == 0 {
        return Err(Error::KernelGrid(format!(
            "snapshot spacing {dt} is coarser than tau_N_star = {}",
            schedule.tau_n_star
        )));
    }
    let tau = lag as f64 * dt;
    let time_bound = n.powf(1.5 + eps) * tau;
    let w = ch.window();
    let mut time_sup: f64 = 0.0;
    let mut violations = 0usize;
    let mut total = 0usize;
    for k in 0..ch.times.len().saturating_sub(lag) {
        for x in 0..w {
            let r = (ch.z[k + lag][x] - ch.z[k][x]).abs() / ch.z[k][x];
            time_sup = time_sup.max(r);
            violations += (r > time_bound) as usize;
            total += 1;
        }
    }

    let ring = Ring::new(w);
    let z_norm = weighted_sup_norm(&ch.z, n, kappa);
    let m = schedule.m_n.min(w - 1);
    let c_nk = space_regularity_scale(n, params.beta_star(), eps, schedule.m_n);
    let mut space = Vec::new();
    for k in 1..=m {
        let mut v: f64 = 0.0;
        for (s, row) in ch.z.iter().enumerate().skip(1) {
            let rho = ch.times[s].sqrt();
            for x in 0..w - k {
                let weight = (-kappa * ring.label(x).abs() as f64 / n).exp();
                v = v.max(weight * rho * (row[x + k] - row[x]).abs());
            }
        }
        space.push(SpaceRegularityRow {
            k,
            value: v,
            bound: n.powf(eps) * c_nk * (1.0 + z_norm.powf(1.0 + eps)),
        });
    }

    let mut block_sup: f64 = 0.0;
    let mut block_ratio_max: f64 = 0.0;
    let mut block_identity_err: f64 = 0.0;
    let mf = m as f64;
    for (s, spins) in traj.spins.iter().enumerate() {
        for y in 0..w - m {
            let sum: i64 = spins[y + 1..=y + m].iter().map(|v| *v as i64).sum();
            let mean = (sum as f64 / mf).abs();
            let stat = mean * ch.z[s][y];
            block_sup = block_sup.max(stat);
            let dh = ch.h[s][y + m] - ch.h[s][y];
            block_identity_err = block_identity_err.max((mean - dh.abs() / (ch.lambda * mf)).abs());
            let logratio = (ch.z[s][y + m] / ch.z[s][y]).ln().abs();
            if logratio > 0.0 {
                let shape = n.sqrt() / mf * logratio * ch.z[s][y];
                block_ratio_max = block_ratio_max.max(stat / shape);
            }
        }
    }

    Ok(RegularityReport {
        tau,
        time_sup,
        time_bound,
        time_violation_fraction: if total == 0 {
            0.0
        } else {
            violations as f64 / total as f64
        },
        space,
        block_sup,
        block_ratio_max,
        block_identity_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RawParams, SpinConfig};
    use crate::rng::replica_rng;
    use crate::simulator::{init_config, run, InitKind, SimOptions};

    fn params(n: u32, beta: f64, slow: Vec<i64>, w: usize) -> ModelParams {
        ModelParams::validate(&RawParams::new(n, beta, slow, w)).unwrap()
    }

    #[test]
    fn big_float_conversion() {
        for v in [1.0, -2.5, 1e-30, std::f64::consts::PI, 123456.789] {
            let b = BigFloat::from_f64(v, PREC);
            assert_eq!(big_to_f64(&b), v);
        }
    }

    #[test]
    fn narrow_wedge_heights() {
        let p = params(16, 0.0, vec![], 11);
        let c = DerivedConstants::new(&p);
        let mut rng = replica_rng(0, 0);
        let spins = init_config(&InitKind::NarrowWedge, 11, &mut rng).unwrap();
        let h = heights(spins.as_slice(), 0, c.lambda);
        let ring = p.ring();
        for (i, hx) in h.iter().enumerate() {
            let x = ring.label(i);
            // Partial sums from the origin: lambda x to the right, and one
            // step of -lambda followed by +lambda steps to the left.
            let expect = if x >= 0 {
                c.lambda * x as f64
            } else {
                c.lambda * (x.abs() - 2) as f64
            };
            assert!((hx - expect).abs() < 1e-14, "x = {x}");
        }
        assert_eq!(h[ring.center()], 0.0);
    }

    #[test]
    fn height_increments_match_spins() {
        let p = params(16, 0.25, vec![0], 41);
        let c = DerivedConstants::new(&p);
        let mut rng = replica_rng(2, 0);
        let s0 = init_config(&InitKind::BernoulliHalf, 41, &mut rng).unwrap();
        let (traj, _) = run(&s0, &p, 0.1, 0.02, &mut rng, &SimOptions::default()).unwrap();
        let ch = build_ch_field(&traj, &c);
        for k in 0..traj.len() {
            for i in 1..41 {
                let d = ch.h[k][i] - ch.h[k][i - 1] - c.lambda * traj.spins[k][i] as f64;
                assert!(d.abs() < 1e-12);
            }
            for i in 0..41 {
                let z = (-ch.h[k][i] + c.nu * ch.times[k]).exp();
                assert!((ch.z[k][i] - z).abs() / z < 1e-12);
            }
        }
    }

    #[test]
    fn single_leftward_jump_at_origin() {
        let p = params(16, 0.0, vec![], 7);
        let c = DerivedConstants::new(&p);
        // (-1, +1) on bond (0, 1).
        let before = [1i8, -1, 1, -1, 1, -1, 1];
        let mut after = before;
        after.swap(3, 4);
        let h0 = heights(&before, 0, c.lambda);
        let h1 = heights(&after, 1, c.lambda);
        for i in 0..7 {
            let d = h1[i] - h0[i];
            let expect = if i == 3 { 2.0 * c.lambda } else { 0.0 };
            assert!((d - expect).abs() < 1e-14, "site {i}");
        }
    }

    #[test]
    fn weighted_norm_examples() {
        let ones = vec![vec![1.0; 9]; 3];
        assert_eq!(weighted_sup_norm(&ones, 4.0, 2.0), 1.0);
        let ring = Ring::new(9);
        let grow: Vec<f64> = (0..9).map(|i| (0.7 * ring.label(i).abs() as f64 / 4.0).exp()).collect();
        assert!((weighted_sup_norm(std::slice::from_ref(&grow), 4.0, 0.7) - 1.0).abs() < 1e-14);
        assert_eq!(weighted_sup_norm(std::slice::from_ref(&grow), 4.0, 0.0), grow[0]);
    }

    #[test]
    fn residual_zero_at_beta_zero() {
        let p = params(64, 0.0, vec![0], 33);
        let r = residual_decomposition(&p).unwrap();
        assert!(r.normal_max_abs < 1e-40);
        for c in &r.slow[0].cases {
            assert!(c.r.abs() < 1e-40);
            assert!(c.q_emp.is_none());
        }
    }

    #[test]
    fn residual_diagonal_cases_agree() {
        let p = params(16, 0.25, vec![0], 33);
        let r = residual_decomposition(&p).unwrap();
        let s = &r.slow[0];
        assert_eq!(s.cases[0].r, s.cases[3].r);
        // Independent f64 evaluation of nu - D_slow (2 cosh lambda - 2).
        let c = DerivedConstants::new(&p);
        let d = c.a_field[p.ring().index(0)] * c.sqrt_pq;
        let expect = c.nu - d * (2.0 * c.lambda.cosh() - 2.0);
        assert!((s.cases[0].r - expect).abs() < 1e-9 * expect.abs().max(1.0));
        assert_eq!(s.cases[0].q_emp, Some(1.0));
        // The f64 table agrees with the extended-precision values.
        let table = residual_table(&c);
        let x = p.ring().index(0);
        for k in 0..4 {
            assert!((table[x][k] - s.cases[k].r).abs() < 1e-9 * s.c_fit.abs());
        }
    }

    #[test]
    fn noise_replay_and_frozen_drift() {
        let p = params(16, 0.25, vec![0, 1], 41);
        let c = DerivedConstants::new(&p);
        let mut rng = replica_rng(4, 0);
        let s0 = init_config(&InitKind::NarrowWedge, 41, &mut rng).unwrap();
        let (traj, log) = run(&s0, &p, 0.1, 0.01, &mut rng, &SimOptions::default()).unwrap();
        let noise = extract_noise(&log, &traj, &c).unwrap();
        assert_eq!(noise.marks.len(), log.events.len());
        assert!(noise
            .marks
            .iter()
            .all(|m| m.mark == (-2.0 * c.lambda).exp_m1() || m.mark == (2.0 * c.lambda).exp_m1()));

        let frozen = SpinConfig::constant(41, 1);
        let (traj, log) = run(&frozen, &p, 0.1, 0.05, &mut rng, &SimOptions::default()).unwrap();
        let noise = extract_noise(&log, &traj, &c).unwrap();
        assert!(noise.compensator.iter().flatten().all(|v| *v == 0.0));
        let ch = build_ch_field(&traj, &c);
        let ratio = ch.z[1][20] / ch.z[0][20];
        assert!((ratio - (c.nu * 0.05).exp()).abs() < 1e-14);
    }

    #[test]
    fn frozen_time_regularity() {
        let p = params(64, 0.0, vec![], 33);
        let c = DerivedConstants::new(&p);
        let sched = ScaleSchedule::build(&p, 0.01, 0.01).unwrap();
        let frozen = SpinConfig::constant(33, 1);
        let mut rng = replica_rng(0, 0);
        let dt = sched.tau_n_star;
        let (traj, _) = run(&frozen, &p, 4.0 * dt, dt, &mut rng, &SimOptions::default()).unwrap();
        let ch = build_ch_field(&traj, &c);
        let rep = z_regularity_stats(&ch, &traj, &sched, &p, 0.0).unwrap();
        assert!((rep.time_sup - (c.nu * dt).exp_m1()).abs() < 1e-12);
        assert!(rep.block_identity_err < 1e-12);
    }

    #[test]
    fn block_identity_on_random_run() {
        let p = params(32, 0.0, vec![], 65);
        let c = DerivedConstants::new(&p);
        let sched = ScaleSchedule::build(&p, 0.01, 0.01).unwrap();
        let mut rng = replica_rng(8, 0);
        let s0 = init_config(&InitKind::BernoulliHalf, 65, &mut rng).unwrap();
        let dt = sched.tau_n_star;
        let (traj, _) = run(&s0, &p, 20.0 * dt, dt, &mut rng, &SimOptions::default()).unwrap();
        let ch = build_ch_field(&traj, &c);
        let rep = z_regularity_stats(&ch, &traj, &sched, &p, 1.0).unwrap();
        assert!(rep.block_identity_err < 1e-10);
        // The ratio is exactly 1 / (lambda sqrt(N)) wherever defined.
        assert!(rep.block_ratio_max <= 1.0 / (c.lambda * 32f64.sqrt()) + 1e-9);
        assert!(rep.time_violation_fraction < 0.05);
    }
}
