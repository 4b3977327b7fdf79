//! Auxiliary fields driven by the recorded noise, pathwise gaps, the
//! continuum SHE reference and distributional proxies.
//!
//! `Y` solves `dY = L Y dt + Y dxi` with the slow-bond generator and `X`
//! the same equation with the homogeneous one, both started from `Z_0` and
//! driven by the same compensated marks as `Z`. Since
//! `dZ = L Z dt + Z dxi + R Z dt`, the gaps `Phi1 = Z - Y` and
//! `Phi2 = Y - X` solve
//!
//! ```text
//! dPhi1 = L Phi1 dt + Phi1 dxi + R Z dt
//! dPhi2 = Lbar Phi2 dt + Phi2 dxi + (L - Lbar) Y dt
//! ```
//!
//! with zero initial data. Both start at zero and are sourced only at slow
//! sites, so the gap solver works on a sub-window around the origin.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gartner::{heights, pattern_index, residual_table, NoiseAccumulator};
use crate::heat_kernel::{Generator, SpectralKernel};
use crate::model::{Convention, DerivedConstants, ModelParams, RawParams, Ring};
use crate::rng::replica_rng;
use crate::simulator::{init_config, run, Direction, EventLog, InitKind, SimOptions};
use crate::stats::{ks_pvalue, ks_statistic, median};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AuxMethod {
    /// Full-ring `Y`, `X` integrated exactly between events by a Taylor
    /// series; at least `substeps` pieces per inter-event interval.
    EventResolved { substeps: usize },
    /// Gap equations on labels `-half_width..=half_width` with step
    /// `step_fraction / (2 max D)`.
    GapForm { step_fraction: f64, half_width: usize },
}

/// `sum_x phi(x/N)/N prod_j eta_{x+i_j} X_x^2`, integrated in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub offsets: Vec<i64>,
    /// Support half-width of `phi` in macroscopic units.
    pub support: f64,
}

/// Smooth bump `exp(-1 / (1 - u^2))` on `(-1, 1)`.
pub fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// Fields on the snapshot grid; columns are ring labels `labels[j]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuxFields {
    pub times: Vec<f64>,
    pub labels: Vec<i64>,
    pub z: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub phi1: Vec<Vec<f64>>,
    pub phi2: Vec<Vec<f64>>,
    pub functional: Option<f64>,
}

fn initial_log_z(initial: &[i8], lambda: f64) -> Vec<f64> {
    heights(initial, 0, lambda).iter().map(|h| -h).collect()
}

fn check_log(initial: &[i8], log: &EventLog, times: &[f64]) -> Result<()> {
    if times.is_empty() || times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParams(
            "snapshot times must start at 0 and increase".into(),
        ));
    }
    if *times.last().unwrap() > log.horizon * (1.0 + 1e-12) {
        return Err(Error::InvalidParams(format!(
            "snapshot time {} beyond the log horizon {}",
            times.last().unwrap(),
            log.horizon
        )));
    }
    if log.events.iter().any(|e| e.bond as usize >= initial.len()) {
        return Err(Error::InvalidConfig("event bond outside the ring".into()));
    }
    Ok(())
}

/// `out = exp(h (L - diag r)) v` by a Taylor series, split so each piece
/// has `h * (2 max D + max |r|) <= 0.5`.
fn flow_with_decay(gen: &Generator, r: &[f64], v: &mut [f64], h: f64, min_pieces: usize, scratch: &mut [Vec<f64>; 2]) {
    if h <= 0.0 {
        return;
    }
    let rmax = r.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let spec = gen.max_exit_rate() + rmax;
    let pieces = ((h * spec / 0.5).ceil() as usize).max(min_pieces).max(1);
    let dh = h / pieces as f64;
    let w = v.len();
    for _ in 0..pieces {
        let [term, tmp] = scratch;
        term.copy_from_slice(v);
        let vmax = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for k in 1..60 {
            gen.apply(term, tmp);
            let f = dh / k as f64;
            let mut tmax: f64 = 0.0;
            for x in 0..w {
                term[x] = f * (tmp[x] - r[x] * term[x]);
                v[x] += term[x];
                tmax = tmax.max(term[x].abs());
            }
            if tmax <= 1e-18 * vmax {
                break;
            }
        }
    }
}

/// Integrate the auxiliary fields along one recorded run.
pub fn solve_aux_fields(
    initial: &[i8],
    log: &EventLog,
    consts: &DerivedConstants,
    times: &[f64],
    method: AuxMethod,
    functional: Option<&QuadraticSpec>,
) -> Result<AuxFields> {
    check_log(initial, log, times)?;
    match method {
        AuxMethod::EventResolved { substeps } => event_resolved(initial, log, consts, times, substeps),
        AuxMethod::GapForm {
            step_fraction,
            half_width,
        } => gap_form(initial, log, consts, times, step_fraction, half_width, functional),
    }
}

fn event_resolved(
    initial: &[i8],
    log: &EventLog,
    consts: &DerivedConstants,
    times: &[f64],
    substeps: usize,
) -> Result<AuxFields> {
    let w = initial.len();
    let ring = Ring::new(w);
    let gen = Generator::new(consts, Convention::ExactDiffusivity);
    let gen_bar = Generator::homogeneous(consts, Convention::ExactDiffusivity);
    let log_z0 = initial_log_z(initial, consts.lambda);
    let mut acc = NoiseAccumulator::new(consts, initial, &log_z0, 0.0);
    let z0: Vec<f64> = log_z0.iter().map(|v| v.exp()).collect();
    let mut y = z0.clone();
    let mut x = z0.clone();
    let mut scratch = [vec![0.0; w], vec![0.0; w]];
    let mut out = AuxFields {
        times: times.to_vec(),
        labels: (0..w).map(|i| ring.label(i)).collect(),
        z: vec![z0.clone()],
        y: vec![y.clone()],
        x: vec![x.clone()],
        phi1: vec![vec![0.0; w]],
        phi2: vec![vec![0.0; w]],
        functional: None,
    };
    let mark_left = (-2.0 * consts.lambda).exp_m1();
    let mark_right = (2.0 * consts.lambda).exp_m1();
    let mut now = 0.0;
    let mut idx = 0;
    for &t in &times[1..] {
        while idx < log.events.len() && log.events[idx].time <= t {
            let ev = log.events[idx];
            let r = acc.rates().to_vec();
            flow_with_decay(&gen, &r, &mut y, ev.time - now, substeps, &mut scratch);
            flow_with_decay(&gen_bar, &r, &mut x, ev.time - now, substeps, &mut scratch);
            now = ev.time;
            let b = ev.bond as usize;
            let m = if ev.direction == Direction::Left {
                mark_left
            } else {
                mark_right
            };
            y[b] *= 1.0 + m;
            x[b] *= 1.0 + m;
            acc.apply(&ev);
            idx += 1;
        }
        let r = acc.rates().to_vec();
        flow_with_decay(&gen, &r, &mut y, t - now, substeps, &mut scratch);
        flow_with_decay(&gen_bar, &r, &mut x, t - now, substeps, &mut scratch);
        now = t;
        let z: Vec<f64> = (0..w).map(|i| acc.log_z_at(i, t).exp()).collect();
        out.phi1.push(z.iter().zip(&y).map(|(a, b)| a - b).collect());
        out.phi2.push(y.iter().zip(&x).map(|(a, b)| a - b).collect());
        out.z.push(z);
        out.y.push(y.clone());
        out.x.push(x.clone());
    }
    Ok(out)
}

/// Heun step of `dphi = D Lap phi` on a sub-window with zero exterior.
fn heun(diff: &[f64], phi: &mut [f64], h: f64, k1: &mut [f64], k2: &mut [f64], tmp: &mut [f64]) {
    let n = phi.len();
    let lap = |v: &[f64], i: usize| {
        let l = if i == 0 { 0.0 } else { v[i - 1] };
        let r = if i + 1 == n { 0.0 } else { v[i + 1] };
        l + r - 2.0 * v[i]
    };
    for i in 0..n {
        k1[i] = diff[i] * lap(phi, i);
        tmp[i] = phi[i] + h * k1[i];
    }
    for i in 0..n {
        k2[i] = diff[i] * lap(tmp, i);
    }
    for i in 0..n {
        phi[i] += 0.5 * h * (k1[i] + k2[i]);
    }
}

fn gap_form(
    initial: &[i8],
    log: &EventLog,
    consts: &DerivedConstants,
    times: &[f64],
    step_fraction: f64,
    half_width: usize,
    functional: Option<&QuadraticSpec>,
) -> Result<AuxFields> {
    let w = initial.len();
    let ring = Ring::new(w);
    let c = ring.center();
    if !(step_fraction > 0.0 && step_fraction <= 0.5) {
        return Err(Error::InvalidParams(format!(
            "step fraction {step_fraction} outside (0, 0.5]"
        )));
    }
    let hw = half_width.min(w / 2 - 1);
    let lo = c - hw;
    let ns = 2 * hw + 1;
    let diff_full = consts.diffusivity(Convention::ExactDiffusivity);
    let dbar = consts.homogeneous_diffusivity(Convention::ExactDiffusivity);
    let diff: Vec<f64> = diff_full[lo..lo + ns].to_vec();
    let diff_bar = vec![dbar; ns];
    let defect: Vec<usize> = (1..ns - 1).filter(|i| diff[*i] != dbar).collect();
    let slow: Vec<usize> = (1..ns - 1).filter(|i| consts.is_slow[lo + i]).collect();
    for x in 0..w {
        if consts.is_slow[x] && !(lo < x && x + 1 < lo + ns) {
            return Err(Error::Window(format!(
                "slow site at label {} lies outside the gap sub-window of half-width {hw}",
                ring.label(x)
            )));
        }
    }
    let table = residual_table(consts);

    let log_z0 = initial_log_z(initial, consts.lambda);
    let mut acc = NoiseAccumulator::new(consts, initial, &log_z0, 0.0);
    let nu = consts.nu;
    let rate = 2.0 * diff_full.iter().cloned().fold(dbar, f64::max);
    let hmax = step_fraction / rate;

    let mut phi1 = vec![0.0; ns];
    let mut phi2 = vec![0.0; ns];
    let mut k1 = vec![0.0; ns];
    let mut k2 = vec![0.0; ns];
    let mut tmp = vec![0.0; ns];
    let mut seg = 0.0;

    let weights: Option<Vec<f64>> = functional.map(|q| {
        (0..ns)
            .map(|i| {
                if q.support <= 0.0 {
                    0.0
                } else {
                    bump(ring.label(lo + i) as f64 / (consts.n * q.support)) / consts.n
                }
            })
            .collect()
    });
    let mut func_acc = 0.0;

    let record = |acc: &NoiseAccumulator, t: f64, phi1: &[f64], phi2: &[f64], out: &mut AuxFields| {
        let z: Vec<f64> = (0..ns).map(|i| acc.log_z_at(lo + i, t).exp()).collect();
        let y: Vec<f64> = z.iter().zip(phi1).map(|(a, b)| a - b).collect();
        let x: Vec<f64> = y.iter().zip(phi2).map(|(a, b)| a - b).collect();
        out.z.push(z);
        out.y.push(y);
        out.x.push(x);
        out.phi1.push(phi1.to_vec());
        out.phi2.push(phi2.to_vec());
    };

    let mut out = AuxFields {
        times: times.to_vec(),
        labels: (0..ns).map(|i| ring.label(lo + i)).collect(),
        z: vec![],
        y: vec![],
        x: vec![],
        phi1: vec![],
        phi2: vec![],
        functional: None,
    };
    record(&acc, 0.0, &phi1, &phi2, &mut out);

    // Pending source integrals over the current step. Each carries the
    // noise factor accrued after it entered, so a jump at a source site
    // multiplies what is already pending.
    let flush = |acc: &NoiseAccumulator, seg: f64, t: f64, s1: &mut [f64], s2: &mut [f64]| {
        let dt = t - seg;
        if dt <= 0.0 {
            return;
        }
        let growth = (nu * dt).exp_m1() / nu;
        let spins = acc.spins();
        let z = |i: usize| acc.log_z_at(lo + i, seg).exp() * growth;
        for &i in &slow {
            let decay = (-acc.rates()[lo + i] * dt).exp();
            let k = pattern_index(spins[lo + i], spins[ring.next(lo + i)]);
            s1[i] = s1[i] * decay + table[lo + i][k] * z(i);
        }
        for &d in &defect {
            let decay = (-acc.rates()[lo + d] * dt).exp();
            s2[d] = s2[d] * decay + (diff[d] - dbar) * (z(d - 1) + z(d + 1) - 2.0 * z(d));
        }
    };
    // Source injected at mid-step: one explicit half step of heat flow.
    let half_step = |src: &[f64], sites: &[usize], d: &[f64], h: f64, target: &mut [f64]| {
        for &i in sites {
            let v = src[i];
            if v == 0.0 {
                continue;
            }
            target[i] += v - h * d[i] * v;
            target[i - 1] += 0.5 * h * d[i - 1] * v;
            target[i + 1] += 0.5 * h * d[i + 1] * v;
        }
    };
    let mut s1 = vec![0.0; ns];
    let mut s2 = vec![0.0; ns];
    let mark_left = (-2.0 * consts.lambda).exp_m1();
    let mark_right = (2.0 * consts.lambda).exp_m1();

    let mut idx = 0;
    let mut now = 0.0;
    for &t_snap in &times[1..] {
        let steps = ((t_snap - now) / hmax).ceil().max(1.0) as usize;
        let h = (t_snap - now) / steps as f64;
        for s in 0..steps {
            let t1 = if s + 1 == steps { t_snap } else { now + h };
            if let (Some(wts), Some(q)) = (&weights, functional) {
                let spins = acc.spins();
                let mut sum = 0.0;
                for i in 0..ns {
                    if wts[i] == 0.0 {
                        continue;
                    }
                    let mut prod = 1.0;
                    for o in &q.offsets {
                        prod *= spins[ring.index(ring.label(lo + i) + o)] as f64;
                    }
                    let xv = acc.log_z_at(lo + i, now).exp() - phi1[i] - phi2[i];
                    sum += wts[i] * prod * xv * xv;
                }
                func_acc += sum * (t1 - now);
            }
            while idx < log.events.len() && log.events[idx].time <= t1 {
                let ev = log.events[idx];
                flush(&acc, seg, ev.time, &mut s1, &mut s2);
                seg = ev.time;
                let b = ev.bond as usize;
                if b >= lo && b < lo + ns {
                    let m = if ev.direction == Direction::Left {
                        mark_left
                    } else {
                        mark_right
                    };
                    s1[b - lo] *= 1.0 + m;
                    s2[b - lo] *= 1.0 + m;
                }
                acc.apply(&ev);
                idx += 1;
            }
            flush(&acc, seg, t1, &mut s1, &mut s2);
            seg = t1;
            let dt = t1 - now;
            let lap_old: Vec<f64> = defect
                .iter()
                .map(|&d| phi1[d - 1] + phi1[d + 1] - 2.0 * phi1[d])
                .collect();
            heun(&diff, &mut phi1, dt, &mut k1, &mut k2, &mut tmp);
            heun(&diff_bar, &mut phi2, dt, &mut k1, &mut k2, &mut tmp);
            for i in 0..ns {
                let (comp, lj) = acc.harvest_site(lo + i, t1);
                let f = (lj - comp).exp();
                phi1[i] *= f;
                phi2[i] *= f;
            }
            half_step(&s1, &slow, &diff, 0.5 * dt, &mut phi1);
            for (j, &d) in defect.iter().enumerate() {
                let lap_new = phi1[d - 1] + phi1[d + 1] - 2.0 * phi1[d];
                s2[d] -= (diff[d] - dbar) * 0.5 * dt * (lap_old[j] + lap_new);
            }
            half_step(&s2, &defect, &diff_bar, 0.5 * dt, &mut phi2);
            s1.iter_mut().for_each(|v| *v = 0.0);
            s2.iter_mut().for_each(|v| *v = 0.0);
            now = t1;
        }
        record(&acc, t_snap, &phi1, &phi2, &mut out);
    }
    out.functional = functional.map(|_| func_acc);
    Ok(out)
}

/// Weighted sup norms `sup e^{-kappa |x| / N} |f|` of the aux fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapNorms {
    pub phi1: f64,
    pub phi2: f64,
    pub y: f64,
    pub x: f64,
}

fn labelled_norm(field: &[Vec<f64>], labels: &[i64], n: f64, kappa: f64) -> f64 {
    let wts: Vec<f64> = labels.iter().map(|l| (-kappa * l.abs() as f64 / n).exp()).collect();
    field
        .iter()
        .flat_map(|row| row.iter().zip(&wts).map(|(v, w)| v.abs() * w))
        .fold(0.0, f64::max)
}

pub fn pathwise_gaps(aux: &AuxFields, n: f64, kappa: f64) -> GapNorms {
    GapNorms {
        phi1: labelled_norm(&aux.phi1, &aux.labels, n, kappa),
        phi2: labelled_norm(&aux.phi2, &aux.labels, n, kappa),
        y: labelled_norm(&aux.y, &aux.labels, n, kappa),
        x: labelled_norm(&aux.x, &aux.labels, n, kappa),
    }
}

/// Largest relative pairwise gap among `(Z, Y, X)` on labels `|x| <= radius`.
pub fn coupling_gap(aux: &AuxFields, radius: i64) -> f64 {
    let mut m: f64 = 0.0;
    for k in 0..aux.times.len() {
        for (j, l) in aux.labels.iter().enumerate() {
            if l.abs() > radius {
                continue;
            }
            let (z, y, x) = (aux.z[k][j], aux.y[k][j], aux.x[k][j]);
            let s = z.abs().max(y.abs()).max(x.abs());
            m = m.max((z - y).abs() / s).max((y - x).abs() / s).max((z - x).abs() / s);
        }
    }
    m
}

/// Ensemble medians of the gap norms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSummary {
    pub n: u32,
    pub beta_star: f64,
    pub replicas: usize,
    pub median_phi1: f64,
    pub median_phi2: f64,
    pub median_y: f64,
    pub median_x: f64,
    pub median_functional: Option<f64>,
}

pub fn summarize_gaps(n: u32, beta_star: f64, norms: &[GapNorms], functionals: &[f64]) -> GapSummary {
    let col = |f: fn(&GapNorms) -> f64| median(&norms.iter().map(f).collect::<Vec<_>>());
    GapSummary {
        n,
        beta_star,
        replicas: norms.len(),
        median_phi1: col(|g| g.phi1),
        median_phi2: col(|g| g.phi2),
        median_y: col(|g| g.y),
        median_x: col(|g| g.x),
        median_functional: if functionals.is_empty() {
            None
        } else {
            Some(median(&functionals.iter().map(|v| v.abs()).collect::<Vec<_>>()))
        },
    }
}

/// Exact pieces of the mild form over `[0, T]` on the ring:
/// `lhs = Z_T - P_T Z_0 - int P Z dxi` and `rhs = int P R Z dt`,
/// evaluated in the eigenbasis of the slow-bond generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MildIdentity {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
}

pub fn mild_identity(initial: &[i8], log: &EventLog, consts: &DerivedConstants, t_final: f64) -> Result<MildIdentity> {
    check_log(initial, log, &[0.0, t_final])?;
    let w = initial.len();
    let gen = Generator::new(consts, Convention::ExactDiffusivity);
    let sp = SpectralKernel::new(&gen);
    let log_z0 = initial_log_z(initial, consts.lambda);
    let mut acc = NoiseAccumulator::new(consts, initial, &log_z0, 0.0);
    let table = residual_table(consts);
    let ring = Ring::new(w);
    // Mode maps: coefficient c_k of a site vector g is sum_x B[k][x] g_x, and
    // the vector is recovered as sum_k A[x][k] c_k.
    let (a, b, mu) = sp.mode_maps();
    let nu = consts.nu;
    let mut c_noise = vec![0.0; w];
    let mut c_res = vec![0.0; w];
    let mark_left = (-2.0 * consts.lambda).exp_m1();
    let mark_right = (2.0 * consts.lambda).exp_m1();
    let source = |acc: &NoiseAccumulator, t: f64| -> (Vec<f64>, Vec<f64>) {
        let spins = acc.spins();
        let mut g_noise = vec![0.0; w];
        let mut g_res = vec![0.0; w];
        for x in 0..w {
            let z = acc.log_z_at(x, t).exp();
            g_noise[x] = -acc.rates()[x] * z;
            g_res[x] = table[x][pattern_index(spins[x], spins[ring.next(x)])] * z;
        }
        (g_noise, g_res)
    };
    let project = |g: &[f64]| -> Vec<f64> { (0..w).map(|k| (0..w).map(|x| b[(k, x)] * g[x]).sum()).collect() };
    let advance = |c_noise: &mut Vec<f64>, c_res: &mut Vec<f64>, acc: &NoiseAccumulator, t0: f64, t1: f64| {
        let dt = t1 - t0;
        if dt <= 0.0 {
            return;
        }
        let (gn, gr) = source(acc, t0);
        let pn = project(&gn);
        let pr = project(&gr);
        for k in 0..w {
            let decay = (mu[k] * dt).exp();
            let weight = ((nu * dt).exp() - decay) / (nu - mu[k]);
            c_noise[k] = decay * c_noise[k] + weight * pn[k];
            c_res[k] = decay * c_res[k] + weight * pr[k];
        }
    };
    let mut now = 0.0;
    for ev in log.events.iter().take_while(|e| e.time <= t_final) {
        advance(&mut c_noise, &mut c_res, &acc, now, ev.time);
        now = ev.time;
        let bnd = ev.bond as usize;
        let m = if ev.direction == Direction::Left {
            mark_left
        } else {
            mark_right
        };
        let z = acc.log_z_at(bnd, now).exp();
        for k in 0..w {
            c_noise[k] += b[(k, bnd)] * z * m;
        }
        acc.apply(ev);
    }
    advance(&mut c_noise, &mut c_res, &acc, now, t_final);
    let z0: Vec<f64> = log_z0.iter().map(|v| v.exp()).collect();
    let pz0 = sp.matrix(t_final) * nalgebra::DVector::from_vec(z0);
    let back = |c: &[f64]| -> Vec<f64> { (0..w).map(|x| (0..w).map(|k| a[(x, k)] * c[k]).sum()).collect() };
    let noise = back(&c_noise);
    let rhs = back(&c_res);
    let lhs = (0..w)
        .map(|x| acc.log_z_at(x, t_final).exp() - pz0[x] - noise[x])
        .collect();
    Ok(MildIdentity { lhs, rhs })
}

// ---------------------------------------------------------------------
// Continuum reference.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SheInit {
    Flat {
        value: f64,
    },
    /// Unit mass in the centre cell.
    Delta,
    Profile {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SheMesh {
    pub dx: f64,
    pub dt: f64,
    /// The periodic domain is `[-half_width, half_width)`.
    pub half_width: f64,
}

impl SheMesh {
    pub fn cells(&self) -> usize {
        (2.0 * self.half_width / self.dx).round() as usize
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.cells())
            .map(|i| -self.half_width + i as f64 * self.dx)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SheGrid {
    pub dx: f64,
    pub dt: f64,
    pub t: f64,
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    /// A non-positive value appeared during the run.
    pub nonpositive: bool,
}

/// Explicit Euler–Maruyama for `dZ = (1/2) Z'' dt + sigma Z dW` with
/// cell noise of variance `1 / (dx dt)`.
pub fn she_solve<R: Rng + ?Sized>(
    init: &SheInit,
    t_final: f64,
    mesh: SheMesh,
    sigma: f64,
    rng: &mut R,
) -> Result<SheGrid> {
    if !(mesh.dx > 0.0 && mesh.dt > 0.0 && mesh.half_width > 0.0 && t_final >= 0.0) {
        return Err(Error::InvalidParams("SHE mesh and horizon must be positive".into()));
    }
    let limit = 0.5 * mesh.dx * mesh.dx;
    if mesh.dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt: mesh.dt, limit });
    }
    let m = mesh.cells();
    if m < 3 {
        return Err(Error::InvalidParams("SHE mesh needs at least three cells".into()));
    }
    let mut z = match init {
        SheInit::Flat { value } => vec![*value; m],
        SheInit::Delta => {
            let mut v = vec![0.0; m];
            v[m / 2] = 1.0 / mesh.dx;
            v
        }
        SheInit::Profile { values } => {
            if values.len() != m {
                return Err(Error::InvalidParams(format!(
                    "profile has {} values, mesh has {m} cells",
                    values.len()
                )));
            }
            values.clone()
        }
    };
    let steps = (t_final / mesh.dt).ceil() as usize;
    let dt = if steps == 0 { mesh.dt } else { t_final / steps as f64 };
    let c = 0.5 * dt / (mesh.dx * mesh.dx);
    let amp = sigma * (dt / mesh.dx).sqrt();
    let mut next = vec![0.0; m];
    let mut nonpositive = false;
    for _ in 0..steps {
        for i in 0..m {
            let l = z[if i == 0 { m - 1 } else { i - 1 }];
            let r = z[if i + 1 == m { 0 } else { i + 1 }];
            next[i] = z[i] + c * (l + r - 2.0 * z[i]);
        }
        if sigma != 0.0 {
            for i in 0..m {
                let g: f64 = rng.sample(StandardNormal);
                next[i] += amp * z[i] * g;
            }
        }
        nonpositive |= next.iter().any(|v| *v <= 0.0);
        std::mem::swap(&mut z, &mut next);
    }
    Ok(SheGrid {
        dx: mesh.dx,
        dt,
        t: t_final,
        x: mesh.points(),
        values: z,
        nonpositive,
    })
}

// ---------------------------------------------------------------------
// Distributional proxies.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `log(sqrt(N) Z / 2)`, for narrow-wedge data.
    NarrowWedge,
    /// `log Z`, for near-stationary data.
    NearStationary,
}

/// Ensemble of `log Z_{t, x}` (with the normalization of the initial data)
/// over `replicas` runs; replica `i` uses stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn log_z_samples(
    n: u32,
    beta_star: f64,
    slow: &[i64],
    t: f64,
    x_label: i64,
    init: &InitKind,
    normalization: Normalization,
    replicas: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let matched = matches!(
        (init, normalization),
        (InitKind::NarrowWedge, Normalization::NarrowWedge) | (InitKind::BernoulliHalf, Normalization::NearStationary)
    );
    if !matched {
        return Err(Error::InvalidParams(format!(
            "normalization {normalization:?} does not match initial data {init:?}"
        )));
    }
    let w = crate::model::simulation_window(n, t, 4 * x_label.unsigned_abs() as usize + 3);
    let mut raw = RawParams::new(n, beta_star, slow.to_vec(), w);
    raw.strict_mode = false;
    let params = ModelParams::validate(&raw)?;
    let consts = DerivedConstants::new(&params);
    let ring = params.ring();
    let xi = ring.index(x_label);
    let shift = match normalization {
        Normalization::NarrowWedge => (0.5 * (n as f64).sqrt()).ln(),
        Normalization::NearStationary => 0.0,
    };
    let opts = SimOptions {
        record_log: false,
        ..Default::default()
    };
    (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i as u64);
            let c = init_config(init, w, &mut rng)?;
            let (traj, _) = run(&c, &params, t, t, &mut rng, &opts)?;
            let last = traj.len() - 1;
            let h = heights(&traj.spins[last], traj.flux[last], consts.lambda);
            Ok(-h[xi] + consts.nu * traj.times[last] + shift)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsRow {
    pub n: u32,
    pub beta_star: f64,
    pub statistic: String,
    pub value: f64,
    pub pvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KpzReport {
    pub rows: Vec<KsRow>,
    /// KS distances between the slow-bond and reference ensembles, by `N`.
    pub ks_beta: Vec<(u32, f64)>,
    pub decreasing: bool,
}

/// `groups[i] = (N, beta_star, reference ensemble, slow-bond ensemble)`.
pub fn kpz_distribution_compare(groups: &[(u32, f64, Vec<f64>, Vec<f64>)], she: Option<&[f64]>) -> KpzReport {
    let mut rows = Vec::new();
    let mut ks_beta = Vec::new();
    for (n, beta, base, slow) in groups {
        let d = ks_statistic(base, slow);
        ks_beta.push((*n, d));
        rows.push(KsRow {
            n: *n,
            beta_star: *beta,
            statistic: "ks_beta".into(),
            value: d,
            pvalue: ks_pvalue(d, base.len(), slow.len()),
        });
        if let Some(s) = she {
            let d = ks_statistic(slow, s);
            rows.push(KsRow {
                n: *n,
                beta_star: *beta,
                statistic: "ks_she".into(),
                value: d,
                pvalue: ks_pvalue(d, slow.len(), s.len()),
            });
        }
    }
    let decreasing = ks_beta.windows(2).all(|p| p[1].1 < p[0].1);
    KpzReport {
        rows,
        ks_beta,
        decreasing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpinConfig;
    use crate::rng::{stream_rng, Purpose};
    use crate::simulator::Event;

    fn setup(
        n: u32,
        beta: f64,
        w: usize,
        t: f64,
        dt: f64,
        seed: u64,
    ) -> (DerivedConstants, Vec<i8>, EventLog, Vec<f64>) {
        let p = ModelParams::validate(&RawParams::new(n, beta, vec![0], w)).unwrap();
        let c = DerivedConstants::new(&p);
        let mut rng = stream_rng(seed, Purpose::Replica, 0);
        let init = init_config(&InitKind::BernoulliHalf, w, &mut rng).unwrap();
        let (traj, log) = run(&init, &p, t, dt, &mut rng, &SimOptions::default()).unwrap();
        (c, init.into_vec(), log, traj.times)
    }

    #[test]
    fn coupling_collapses_at_beta_zero() {
        let (c, init, log, times) = setup(8, 0.0, 81, 0.1, 0.02, 1);
        let aux = solve_aux_fields(&init, &log, &c, &times, AuxMethod::EventResolved { substeps: 1 }, None).unwrap();
        assert!(coupling_gap(&aux, 20) < 1e-6, "{}", coupling_gap(&aux, 20));
        assert!(aux.y.iter().flatten().all(|v| *v > 0.0));
    }

    #[test]
    fn event_resolved_substep_halving() {
        let (c, init, log, times) = setup(8, 0.25, 31, 0.05, 0.01, 2);
        let a = solve_aux_fields(&init, &log, &c, &times, AuxMethod::EventResolved { substeps: 1 }, None).unwrap();
        let b = solve_aux_fields(&init, &log, &c, &times, AuxMethod::EventResolved { substeps: 2 }, None).unwrap();
        for k in 0..times.len() {
            for j in 0..31 {
                assert!((a.y[k][j] - b.y[k][j]).abs() <= 1e-8 * a.y[k][j].abs());
            }
        }
    }

    #[test]
    fn no_events_gives_heat_flow() {
        let w = 21;
        let p = ModelParams::validate(&RawParams::new(8, 0.25, vec![0], w)).unwrap();
        let c = DerivedConstants::new(&p);
        let init = SpinConfig::constant(w, 1).into_vec();
        let log = EventLog {
            events: vec![],
            horizon: 0.05,
            truncated: false,
        };
        let aux = solve_aux_fields(
            &init,
            &log,
            &c,
            &[0.0, 0.05],
            AuxMethod::EventResolved { substeps: 1 },
            None,
        )
        .unwrap();
        let z0: Vec<f64> = initial_log_z(&init, c.lambda).iter().map(|v| v.exp()).collect();
        let gen = Generator::new(&c, Convention::ExactDiffusivity);
        let expect = gen.propagate(&z0, 0.05);
        for x in 0..w {
            assert!((aux.y[1][x] - expect[x]).abs() < 1e-10 * expect[x]);
        }
    }

    #[test]
    fn gap_form_matches_event_resolved() {
        let (c, init, log, times) = setup(8, 0.25, 61, 0.05, 0.01, 3);
        let exact = solve_aux_fields(&init, &log, &c, &times, AuxMethod::EventResolved { substeps: 1 }, None).unwrap();
        let run_gap = |f: f64| {
            solve_aux_fields(
                &init,
                &log,
                &c,
                &times,
                AuxMethod::GapForm {
                    step_fraction: f,
                    half_width: 20,
                },
                None,
            )
            .unwrap()
        };
        let coarse = run_gap(0.25);
        let fine = run_gap(0.0625);
        let off = (61 / 2) - 20;
        let mut err_c: f64 = 0.0;
        let mut err_f: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..times.len() {
            for j in 0..41 {
                let e1 = exact.phi1[k][j + off];
                let e2 = exact.phi2[k][j + off];
                scale = scale.max(e1.abs()).max(e2.abs());
                err_c = err_c
                    .max((coarse.phi1[k][j] - e1).abs())
                    .max((coarse.phi2[k][j] - e2).abs());
                err_f = err_f
                    .max((fine.phi1[k][j] - e1).abs())
                    .max((fine.phi2[k][j] - e2).abs());
            }
        }
        assert!(scale > 0.0);
        eprintln!("gap form errors {err_c} {err_f} scale {scale}");
        assert!(err_f < 0.5 * err_c, "{err_f} {err_c}");
        assert!(err_f < 0.02 * scale, "{err_f} vs {scale}");
    }

    #[test]
    fn gap_form_zero_at_beta_zero() {
        let (c, init, log, times) = setup(8, 0.0, 41, 0.05, 0.01, 4);
        let aux = solve_aux_fields(
            &init,
            &log,
            &c,
            &times,
            AuxMethod::GapForm {
                step_fraction: 0.25,
                half_width: 10,
            },
            None,
        )
        .unwrap();
        let g = pathwise_gaps(&aux, 8.0, 1.0);
        assert!(g.phi1 < 1e-9 && g.phi2 < 1e-9);
    }

    #[test]
    fn mild_identity_holds_in_interior() {
        let (c, init, log, _) = setup(8, 0.25, 41, 0.03, 0.03, 5);
        let m = mild_identity(&init, &log, &c, 0.03).unwrap();
        let scale = m.rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(scale > 0.0);
        for x in 10..31 {
            assert!(
                (m.lhs[x] - m.rhs[x]).abs() < 1e-8 * scale.max(1.0),
                "{x}: {} {}",
                m.lhs[x],
                m.rhs[x]
            );
        }
    }

    #[test]
    fn functional_frozen_configuration() {
        let w = 41;
        let p = ModelParams::validate(&RawParams::new(8, 0.0, vec![], w)).unwrap();
        let c = DerivedConstants::new(&p);
        let init = SpinConfig::constant(w, 1).into_vec();
        let log = EventLog {
            events: vec![],
            horizon: 0.02,
            truncated: false,
        };
        let spec = QuadraticSpec {
            offsets: vec![1],
            support: 1.0,
        };
        let aux = solve_aux_fields(
            &init,
            &log,
            &c,
            &[0.0, 0.02],
            AuxMethod::GapForm {
                step_fraction: 0.05,
                half_width: 18,
            },
            Some(&spec),
        )
        .unwrap();
        // Oracle: X = e^{t Lbar} Z_0 integrated by a fine midpoint rule.
        let z0: Vec<f64> = initial_log_z(&init, c.lambda).iter().map(|v| v.exp()).collect();
        let gen = Generator::homogeneous(&c, Convention::ExactDiffusivity);
        let ring = Ring::new(w);
        let steps = 400;
        let mut oracle = 0.0;
        for s in 0..steps {
            let t = (s as f64 + 0.5) * 0.02 / steps as f64;
            let x = gen.propagate(&z0, t);
            for i in 0..w {
                oracle += bump(ring.label(i) as f64 / 8.0) / 8.0 * x[i] * x[i] * 0.02 / steps as f64;
            }
        }
        let f = aux.functional.unwrap();
        assert!(f > 0.0);
        assert!((f - oracle).abs() < 1e-3 * oracle, "{f} vs {oracle}");
        let zero = QuadraticSpec {
            offsets: vec![0],
            support: 0.0,
        };
        let aux = solve_aux_fields(
            &init,
            &log,
            &c,
            &[0.0, 0.02],
            AuxMethod::GapForm {
                step_fraction: 0.25,
                half_width: 18,
            },
            Some(&zero),
        )
        .unwrap();
        assert_eq!(aux.functional, Some(0.0));
    }

    #[test]
    fn aux_rejects_bad_grid() {
        let w = 11;
        let p = ModelParams::validate(&RawParams::new(8, 0.0, vec![], w)).unwrap();
        let c = DerivedConstants::new(&p);
        let init = SpinConfig::constant(w, 1).into_vec();
        let log = EventLog {
            events: vec![Event {
                time: 0.01,
                bond: 99,
                direction: Direction::Left,
            }],
            horizon: 0.02,
            truncated: false,
        };
        let m = AuxMethod::EventResolved { substeps: 1 };
        assert!(solve_aux_fields(&init, &log, &c, &[0.0, 0.01], m, None).is_err());
        let log = EventLog {
            horizon: 0.02,
            ..Default::default()
        };
        assert!(solve_aux_fields(&init, &log, &c, &[0.0, 0.5], m, None).is_err());
    }

    fn gaussian(x: f64, var: f64) -> f64 {
        (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn she_deterministic_second_order() {
        let mut rng = stream_rng(0, Purpose::She, 0);
        let err = |dx: f64, rng: &mut crate::rng::SimRng| {
            let mesh = SheMesh {
                dx,
                dt: 0.25 * dx * dx,
                half_width: 8.0,
            };
            let init = SheInit::Profile {
                values: mesh.points().iter().map(|x| gaussian(*x, 0.25)).collect(),
            };
            let g = she_solve(&init, 0.5, mesh, 0.0, rng).unwrap();
            g.x.iter()
                .zip(&g.values)
                .map(|(x, v)| (v - gaussian(*x, 0.75)).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(0.1, &mut rng);
        let e2 = err(0.05, &mut rng);
        assert!((e1 / e2 - 4.0).abs() < 0.4, "{e1} {e2}");
    }

    #[test]
    fn she_cfl_rejected() {
        let mut rng = stream_rng(0, Purpose::She, 1);
        let mesh = SheMesh {
            dx: 0.1,
            dt: 0.01,
            half_width: 1.0,
        };
        assert!(matches!(
            she_solve(&SheInit::Flat { value: 1.0 }, 0.1, mesh, 1.0, &mut rng),
            Err(Error::Cfl { .. })
        ));
    }

    #[test]
    fn normalization_mismatch_rejected() {
        assert!(log_z_samples(
            8,
            0.0,
            &[],
            0.01,
            0,
            &InitKind::NarrowWedge,
            Normalization::NearStationary,
            2,
            0
        )
        .is_err());
        let a = log_z_samples(
            8,
            0.0,
            &[],
            0.01,
            0,
            &InitKind::BernoulliHalf,
            Normalization::NearStationary,
            4,
            0,
        )
        .unwrap();
        let b = log_z_samples(
            8,
            0.0,
            &[],
            0.01,
            0,
            &InitKind::BernoulliHalf,
            Normalization::NearStationary,
            4,
            0,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_comparison_is_zero() {
        let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let r = kpz_distribution_compare(&[(8, 0.1, a.clone(), a.clone())], Some(&a));
        assert_eq!(r.ks_beta[0].1, 0.0);
        assert!(r.rows.iter().all(|row| row.value == 0.0 && row.pvalue > 0.99));
    }
}
