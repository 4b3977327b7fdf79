//! Block averages of the local statistic `q_y = eta_y eta_{y+1}`, the error
//! fields of the mild equation, and canonical two-block statistics.
//!
//! Block averages are anchored at the left site `y` of a bond:
//! `A_l q_y = eta_y (1/l) sum_{w=1}^{l} eta_{y+w}`, so `A_1 q = q`. We also
//! let `A_0 q = q`, which makes `DA_{0;l} = q - A_l q` the one-block term.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gartner::{pattern_index, residual_table, weighted_sup_norm, CHField};
use crate::heat_kernel::{EstimateReport, Generator};
use crate::model::{DerivedConstants, Ring, ScaleSchedule};
use crate::simulator::{Event, EventLog, TrajectorySample};
use crate::stats::{loglog_fit, median, Moments};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AverageOp {
    Spatial {
        ell: usize,
    },
    Time {
        tau: f64,
    },
    /// `A_{ell1} - A_{ell2}`.
    Comparison {
        ell1: usize,
        ell2: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AveragedStatistic {
    pub op: AverageOp,
    pub anchor: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Some averaging windows ran past the data horizon and were shortened.
    pub truncated: bool,
}

#[inline]
pub fn q_local(spins: &[i8], y: usize) -> f64 {
    (spins[y] * spins[y + 1]) as f64
}

fn check_block(w: usize, ell: usize, y: usize) -> Result<()> {
    if y + ell.max(1) >= w {
        return Err(Error::Window(format!(
            "block of length {ell} at site {y} overruns a window of {w}"
        )));
    }
    Ok(())
}

/// `A_ell q` at anchor `y` for one configuration.
pub fn block_average(spins: &[i8], ell: usize, y: usize) -> Result<f64> {
    check_block(spins.len(), ell, y)?;
    if ell == 0 {
        return Ok(q_local(spins, y));
    }
    let s: i64 = spins[y + 1..=y + ell].iter().map(|v| *v as i64).sum();
    Ok(spins[y] as f64 * s as f64 / ell as f64)
}

/// `A_{ell1} q - A_{ell2} q`.
pub fn block_difference(spins: &[i8], ell1: usize, ell2: usize, y: usize) -> Result<f64> {
    Ok(block_average(spins, ell1, y)? - block_average(spins, ell2, y)?)
}

pub fn spatial_average(traj: &TrajectorySample, ell: usize, y: usize) -> Result<AveragedStatistic> {
    check_block(traj.window(), ell, y)?;
    Ok(AveragedStatistic {
        op: AverageOp::Spatial { ell },
        anchor: y,
        times: traj.times.clone(),
        values: traj
            .spins
            .iter()
            .map(|s| block_average(s, ell, y))
            .collect::<Result<_>>()?,
        truncated: false,
    })
}

pub fn comparison_average(traj: &TrajectorySample, ell1: usize, ell2: usize, y: usize) -> Result<AveragedStatistic> {
    check_block(traj.window(), ell1.max(ell2), y)?;
    Ok(AveragedStatistic {
        op: AverageOp::Comparison { ell1, ell2 },
        anchor: y,
        times: traj.times.clone(),
        values: traj
            .spins
            .iter()
            .map(|s| block_difference(s, ell1, ell2, y))
            .collect::<Result<_>>()?,
        truncated: false,
    })
}

/// Right-continuous step function: `values[i]` holds on `[times[i], times[i+1])`,
/// the last value up to `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub horizon: f64,
}

impl StepSeries {
    pub fn constant(value: f64, start: f64, horizon: f64) -> Self {
        StepSeries {
            times: vec![start],
            values: vec![value],
            horizon,
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|s| *s <= t);
        self.values[i.saturating_sub(1)]
    }

    /// `int_a^b f`, for `times[0] <= a <= b <= horizon`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut i = self.times.partition_point(|s| *s <= a).saturating_sub(1);
        let mut acc = 0.0;
        let mut left = a;
        loop {
            let right = self.times.get(i + 1).map_or(b, |s| s.min(b));
            acc += self.values[i] * (right - left);
            if right >= b {
                break;
            }
            left = right;
            i += 1;
        }
        acc
    }
}

/// Event-resolved series of `f` applied to the spins on `lo..=hi`.
pub fn statistic_series<F>(initial: &[i8], events: &[Event], horizon: f64, lo: usize, hi: usize, f: F) -> StepSeries
where
    F: Fn(&[i8]) -> f64,
{
    let ring = Ring::new(initial.len());
    let mut spins = initial.to_vec();
    let mut out = StepSeries {
        times: vec![0.0],
        values: vec![f(&spins)],
        horizon,
    };
    for ev in events {
        if ev.time > horizon {
            break;
        }
        let b = ev.bond as usize;
        let n = ring.next(b);
        spins.swap(b, n);
        let touches = (lo..=hi).contains(&b) || (lo..=hi).contains(&n);
        if touches {
            out.times.push(ev.time);
            out.values.push(f(&spins));
        }
    }
    out
}

/// `(1/tau) int_t^{t+tau} f` at each evaluation time. Windows past the
/// horizon are shortened and flagged.
pub fn time_average(series: &StepSeries, eval_times: &[f64], tau: f64, anchor: usize) -> AveragedStatistic {
    let mut truncated = false;
    let values = eval_times
        .iter()
        .map(|&t| {
            if tau <= 0.0 {
                return series.value_at(t);
            }
            let end = t + tau;
            let end = if end > series.horizon * (1.0 + 1e-12) {
                truncated = true;
                series.horizon
            } else {
                end.min(series.horizon)
            };
            if end <= t {
                series.value_at(t)
            } else {
                series.integral(t, end) / (end - t)
            }
        })
        .collect();
    AveragedStatistic {
        op: AverageOp::Time { tau },
        anchor,
        times: eval_times.to_vec(),
        values,
        truncated,
    }
}

/// Columns of `P_{k dt}` at a fixed set of sites, for `k = 0..=lags`.
#[derive(Debug, Clone)]
pub struct KernelColumns {
    pub dt: f64,
    pub sites: Vec<usize>,
    cols: Vec<Vec<Vec<f64>>>,
}

impl KernelColumns {
    pub fn build(gen: &Generator, sites: &[usize], dt: f64, lags: usize) -> Self {
        let w = gen.window();
        let mut cols = Vec::with_capacity(lags + 1);
        let mut cur: Vec<Vec<f64>> = sites
            .iter()
            .map(|&y| {
                let mut e = vec![0.0; w];
                e[y] = 1.0;
                e
            })
            .collect();
        cols.push(cur.clone());
        for _ in 0..lags {
            cur = cur.iter().map(|c| gen.propagate(c, dt)).collect();
            cols.push(cur.clone());
        }
        KernelColumns {
            dt,
            sites: sites.to_vec(),
            cols,
        }
    }

    pub fn lags(&self) -> usize {
        self.cols.len() - 1
    }

    /// Lag index for an elapsed time; off-grid times are refused.
    pub fn lag_for(&self, elapsed: f64) -> Result<usize> {
        let k = (elapsed / self.dt).round();
        if k < 0.0 || (k * self.dt - elapsed).abs() > 1e-9 * self.dt.max(elapsed) || k as usize > self.lags() {
            return Err(Error::KernelGrid(format!(
                "no precomputed kernel for elapsed time {elapsed} (grid step {}, {} lags)",
                self.dt,
                self.lags()
            )));
        }
        Ok(k as usize)
    }

    pub fn column(&self, lag: usize, j: usize) -> &[f64] {
        &self.cols[lag][j]
    }
}

/// Error fields on the snapshot grid, indexed `[snapshot][ring index]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorFieldSet {
    pub times: Vec<f64>,
    pub e_one: Vec<Vec<f64>>,
    pub e_two: Vec<Vec<f64>>,
    pub e_one_1: Vec<Vec<f64>>,
    pub e_one_2: Vec<Vec<f64>>,
    pub e_one_3: Vec<Vec<f64>>,
    pub e_one_4: Vec<Vec<f64>>,
    pub e_one_5: Vec<Vec<f64>>,
    /// Some time averages near the horizon were shortened.
    pub truncated: bool,
}

impl ErrorFieldSet {
    /// `max |E_I - (E_I1 + E_I3 + E_I4)|`.
    pub fn telescoping_error(&self) -> f64 {
        let mut m: f64 = 0.0;
        for k in 0..self.times.len() {
            for x in 0..self.e_one[k].len() {
                let s = self.e_one_1[k][x] + self.e_one_3[k][x] + self.e_one_4[k][x];
                m = m.max((self.e_one[k][x] - s).abs());
            }
        }
        m
    }

    pub fn named(&self) -> [(&'static str, &Vec<Vec<f64>>); 7] {
        [
            ("E_I", &self.e_one),
            ("E_II", &self.e_two),
            ("E_I1", &self.e_one_1),
            ("E_I2", &self.e_one_2),
            ("E_I3", &self.e_one_3),
            ("E_I4", &self.e_one_4),
            ("E_I5", &self.e_one_5),
        ]
    }
}

/// Kernel-weighted time integrals of the slow-bond residual, split into
/// `C_N q Z` (E_I) and the remainder `(R - C_N q) Z` (E_II), with E_I split
/// further through the block averages of the schedule. `C_N` is the
/// per-bond prefactor of the residual, so `E_I + E_II = int P R Z`.
pub fn error_fields(
    ch: &CHField,
    traj: &TrajectorySample,
    log: &EventLog,
    kernels: &KernelColumns,
    schedule: &ScaleSchedule,
    consts: &DerivedConstants,
) -> Result<ErrorFieldSet> {
    let w = ch.window();
    let kt = ch.times.len();
    let slow: Vec<usize> = (0..w).filter(|x| consts.is_slow[*x]).collect();
    if kernels.sites != slow {
        return Err(Error::KernelGrid("kernel columns do not match the slow set".into()));
    }
    let ell = schedule.ell_n;
    let m = schedule.m_n;
    for &y in &slow {
        check_block(w, ell.max(m), y)?;
    }
    let table = residual_table(consts);
    // g[field][snapshot][j]
    let mut g = vec![vec![vec![0.0; slow.len()]; kt]; 6];
    let mut truncated = false;
    for (j, &y) in slow.iter().enumerate() {
        let c_n = 0.5 * (table[y][0] + table[y][3]);
        let series = statistic_series(
            &traj.spins[0],
            &log.events,
            log.horizon.min(*ch.times.last().unwrap()),
            y,
            y + ell,
            |s| q_local(s, y) - block_average(s, ell, y).unwrap(),
        );
        let tavg = time_average(&series, &ch.times, schedule.tau_n, y);
        truncated |= tavg.truncated;
        for k in 0..kt {
            let s = &traj.spins[k];
            let z = ch.z[k][y];
            let q = q_local(s, y);
            let a_l = block_average(s, ell, y)?;
            let a_m = block_average(s, m, y)?;
            let r = table[y][pattern_index(s[y], s[y + 1])];
            g[0][k][j] = c_n * q * z;
            g[1][k][j] = (r - c_n * q) * z;
            g[2][k][j] = c_n * (q - a_l) * z;
            g[3][k][j] = c_n * tavg.values[k] * z;
            g[4][k][j] = c_n * (a_l - a_m) * z;
            g[5][k][j] = c_n * a_m * z;
        }
    }
    let mut out: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; w]; kt]; 6];
    for k in 1..kt {
        for i in 0..=k {
            let weight = if i == 0 || i == k { 0.5 } else { 1.0 }
                * if i < k {
                    ch.times[i + 1] - ch.times[i]
                } else {
                    ch.times[i] - ch.times[i - 1]
                };
            let lag = kernels.lag_for(ch.times[k] - ch.times[i])?;
            for j in 0..slow.len() {
                let col = kernels.column(lag, j);
                for f in 0..6 {
                    let c = weight * g[f][i][j];
                    if c == 0.0 {
                        continue;
                    }
                    let row = &mut out[f][k];
                    for x in 0..w {
                        row[x] += c * col[x];
                    }
                }
            }
        }
    }
    let e_one_5: Vec<Vec<f64>> = out[2]
        .iter()
        .zip(&out[3])
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect())
        .collect();
    let mut it = out.into_iter();
    Ok(ErrorFieldSet {
        times: ch.times.clone(),
        e_one: it.next().unwrap(),
        e_two: it.next().unwrap(),
        e_one_1: it.next().unwrap(),
        e_one_2: it.next().unwrap(),
        e_one_3: it.next().unwrap(),
        e_one_4: it.next().unwrap(),
        e_one_5,
        truncated,
    })
}

/// Trapezoid weights on a non-uniform grid would need interpolated kernels,
/// which `error_fields` refuses; this builds the kernel columns for a
/// uniform snapshot grid.
pub fn kernel_columns_for(ch: &CHField, gen: &Generator, consts: &DerivedConstants) -> Result<KernelColumns> {
    if ch.times.len() < 2 {
        return Err(Error::KernelGrid("need at least two snapshots".into()));
    }
    let dt = ch.times[1] - ch.times[0];
    let slow: Vec<usize> = (0..consts.window()).filter(|x| consts.is_slow[*x]).collect();
    Ok(KernelColumns::build(gen, &slow, dt, ch.times.len() - 1))
}

/// Weighted space-time sup norms of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorNorms {
    pub e_one: f64,
    pub e_two: f64,
    pub z: f64,
}

pub fn error_norms(fields: &ErrorFieldSet, ch: &CHField, n: f64, kappa: f64) -> ErrorNorms {
    ErrorNorms {
        e_one: weighted_sup_norm(&fields.e_one, n, kappa),
        e_two: weighted_sup_norm(&fields.e_two, n, kappa),
        z: weighted_sup_norm(&ch.z, n, kappa),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBoundReport {
    pub n: u32,
    pub beta_star: f64,
    pub beta: f64,
    pub eps: f64,
    pub constant: f64,
    pub replicas: usize,
    /// Fraction with `|E_I| + |E_II| > C (N^-b + N^-b |Z|^{1+eps})`.
    pub violation_fraction: f64,
    /// Same event with `|Z|` in place of `|Z|^{1+eps}`.
    pub violation_fraction_linear: f64,
    /// `max |E_II| / (N^{-1/2 + eps2 + 2.5 beta_star} |Z|)`.
    pub e_two_constant: f64,
    pub median_e_one_ratio: f64,
}

pub fn error_bound_check(
    norms: &[ErrorNorms],
    n: u32,
    beta_star: f64,
    eps_star2: f64,
    beta: f64,
    eps: f64,
    constant: f64,
) -> ErrorBoundReport {
    let nf = n as f64;
    let nb = nf.powf(-beta);
    let mut v1 = 0usize;
    let mut v2 = 0usize;
    let mut e2c: f64 = 0.0;
    let mut ratios = Vec::with_capacity(norms.len());
    let shape2 = nf.powf(-0.5 + eps_star2 + 2.5 * beta_star);
    for r in norms {
        let lhs = r.e_one + r.e_two;
        v1 += (lhs > constant * (nb + nb * r.z.powf(1.0 + eps))) as usize;
        v2 += (lhs > constant * (nb + nb * r.z)) as usize;
        if r.z > 0.0 {
            e2c = e2c.max(r.e_two / (shape2 * r.z));
            ratios.push(r.e_one / r.z);
        }
    }
    let count = norms.len().max(1) as f64;
    ErrorBoundReport {
        n,
        beta_star,
        beta,
        eps,
        constant,
        replicas: norms.len(),
        violation_fraction: v1 as f64 / count,
        violation_fraction_linear: v2 as f64 / count,
        e_two_constant: e2c,
        median_e_one_ratio: if ratios.is_empty() { 0.0 } else { median(&ratios) },
    }
}

/// Number of sites in the union of the two intervals of radius `3 ell`
/// around `y` and `y + gap`. Overlapping blocks are rejected.
pub fn two_block_region_size(ell: usize, gap: usize) -> Result<usize> {
    if ell == 0 {
        return Err(Error::InvalidParams("block length must be positive".into()));
    }
    if gap < ell {
        return Err(Error::InvalidParams(format!(
            "blocks of length {ell} at distance {gap} overlap"
        )));
    }
    let one = 6 * ell + 1;
    Ok(one + gap.min(one))
}

/// Spins on the two blocks `y+1..=y+ell` and `y+gap+1..=y+gap+ell` under the
/// canonical measure with `plus` plus-spins among `total` sites, drawn by
/// sequential hypergeometric sampling.
pub fn sample_two_blocks<R: Rng + ?Sized>(rng: &mut R, ell: usize, total: usize, plus: usize) -> (Vec<i8>, Vec<i8>) {
    let mut left_plus = plus;
    let mut left = total;
    let mut draw = |rng: &mut R| {
        let up = rng.random_range(0..left) < left_plus;
        left -= 1;
        if up {
            left_plus -= 1;
            1i8
        } else {
            -1i8
        }
    };
    let a: Vec<i8> = (0..ell).map(|_| draw(rng)).collect();
    let b: Vec<i8> = (0..ell).map(|_| draw(rng)).collect();
    (a, b)
}

/// `|(1/ell) sum_{z=1}^{ell} (eta_{y+z} - eta_{y+gap+z})|` for one draw.
pub fn two_block_statistic(a: &[i8], b: &[i8]) -> f64 {
    let s: i64 = a.iter().zip(b).map(|(u, v)| (*u - *v) as i64).sum();
    (s as f64 / a.len() as f64).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AzumaRow {
    pub rho: f64,
    pub ell: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AzumaReport {
    pub rows: Vec<AzumaRow>,
    /// `(rho, slope, slope stderr)`; slope is NaN when the statistic vanishes.
    pub fits: Vec<(f64, f64, f64)>,
    pub pass: bool,
}

impl AzumaReport {
    pub fn estimates(&self) -> Vec<EstimateReport> {
        self.fits
            .iter()
            .map(|(rho, slope, _)| EstimateReport {
                name: format!("azuma_rho_{rho}"),
                n: 0,
                beta_star: 0.0,
                constant: f64::NAN,
                exponent: *slope,
                grid: self
                    .rows
                    .iter()
                    .filter(|r| r.rho == *rho)
                    .map(|r| (r.ell as f64, r.mean))
                    .collect(),
                pass: (slope + 0.5).abs() <= 0.1,
                note: String::new(),
            })
            .collect()
    }
}

/// Monte Carlo `E |A~_ell q|` under the canonical measure on the two-block
/// region with `gap = gap_factor * ell`; fits the decay exponent per density.
pub fn azuma_canonical_check<R: Rng + ?Sized>(
    rng: &mut R,
    ells: &[usize],
    rhos: &[f64],
    samples: usize,
    gap_factor: usize,
) -> Result<AzumaReport> {
    if samples == 0 {
        return Err(Error::InvalidParams("samples must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &rho in rhos {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::InvalidParams(format!("density {rho} outside [-1, 1]")));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &ell in ells {
            let total = two_block_region_size(ell, gap_factor * ell)?;
            let plus = crate::model::canonical_plus_count(total, rho);
            let mut m = Moments::default();
            for _ in 0..samples {
                let (a, b) = sample_two_blocks(rng, ell, total, plus);
                m.push(two_block_statistic(&a, &b));
            }
            rows.push(AzumaRow {
                rho,
                ell,
                mean: m.mean(),
                stderr: m.stderr(),
            });
            if m.mean() > 0.0 {
                xs.push(ell as f64);
                ys.push(m.mean());
            }
        }
        let fit = if xs.len() == ells.len() {
            loglog_fit(&xs, &ys)
        } else {
            None
        };
        fits.push(match fit {
            Some(f) => (rho, f.slope, f.slope_stderr),
            None => (rho, f64::NAN, f64::NAN),
        });
    }
    let pass = fits.iter().all(|(_, s, _)| (s + 0.5).abs() <= 0.1);
    Ok(AzumaReport { rows, fits, pass })
}

/// `true` when each value is at most the previous one.
pub fn nonincreasing(values: &[f64]) -> bool {
    values.windows(2).all(|p| p[1] <= p[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gartner::build_ch_field;
    use crate::heat_kernel::Generator;
    use crate::model::{Convention, ModelParams, RawParams, SpinConfig};
    use crate::rng::{stream_rng, Purpose};
    use crate::simulator::{init_config, run, Direction, InitKind, SimOptions};

    #[test]
    fn block_average_basics() {
        let plus = vec![1i8; 12];
        for ell in 0..5 {
            assert_eq!(block_average(&plus, ell, 3).unwrap(), 1.0);
        }
        let minus = vec![-1i8; 12];
        assert_eq!(block_average(&minus, 4, 3).unwrap(), 1.0);
        let s = [1i8, -1, 1, 1, -1, -1, 1, 1];
        assert_eq!(block_average(&s, 1, 2).unwrap(), q_local(&s, 2));
        assert_eq!(block_average(&s, 3, 0).unwrap(), (-1.0 + 1.0 + 1.0) / 3.0);
        assert_eq!(block_difference(&s, 3, 3, 1).unwrap(), 0.0);
        assert!(block_average(&s, 5, 3).is_err());
        // One-block term plus block average gives back q.
        let d = block_difference(&s, 0, 4, 2).unwrap();
        assert_eq!(d + block_average(&s, 4, 2).unwrap(), q_local(&s, 2));
    }

    #[test]
    fn grand_canonical_block_moments() {
        let mut rng = stream_rng(3, Purpose::Sampler, 0);
        let ell = 16;
        let mut m = Moments::default();
        for _ in 0..20_000 {
            let s = crate::model::sample_grand_canonical(&mut rng, ell + 2);
            m.push(block_average(s.as_slice(), ell, 0).unwrap());
        }
        assert!(m.mean().abs() < 4.0 * m.stderr());
        assert!((m.std() - 0.25).abs() < 0.01);
    }

    #[test]
    fn step_series_integrals() {
        let s = StepSeries {
            times: vec![0.0, 1.0, 3.0],
            values: vec![2.0, -1.0, 4.0],
            horizon: 5.0,
        };
        assert_eq!(s.integral(0.0, 5.0), 2.0 - 2.0 + 8.0);
        assert_eq!(s.integral(0.5, 1.5), 1.0 - 0.5);
        assert_eq!(s.value_at(1.0), -1.0);
        let a = time_average(&s, &[0.0, 3.5], 1.0, 0);
        assert_eq!(a.values, vec![2.0, 4.0]);
        assert!(!a.truncated);
        let a = time_average(&s, &[4.5], 1.0, 0);
        assert!(a.truncated);
        assert_eq!(a.values, vec![4.0]);
        let c = StepSeries::constant(1.5, 0.0, 2.0);
        assert_eq!(time_average(&c, &[0.3, 1.0], 0.5, 0).values, vec![1.5, 1.5]);
        assert_eq!(time_average(&s, &[0.5, 2.0], 0.0, 0).values, vec![2.0, -1.0]);
    }

    #[test]
    fn series_tracks_events() {
        let init = [1i8, -1, 1, -1, 1];
        let events = [
            Event {
                time: 0.1,
                bond: 0,
                direction: Direction::Right,
            },
            Event {
                time: 0.2,
                bond: 3,
                direction: Direction::Right,
            },
        ];
        let s = statistic_series(&init, &events, 1.0, 0, 1, |sp| q_local(sp, 0));
        assert_eq!(s.times, vec![0.0, 0.1]);
        assert_eq!(s.values, vec![-1.0, -1.0]);
    }

    fn small_run(
        beta: f64,
        w: usize,
        t: f64,
        dt: f64,
        seed: u64,
    ) -> (ModelParams, DerivedConstants, TrajectorySample, EventLog) {
        let p = ModelParams::validate(&RawParams::new(8, beta, vec![0], w)).unwrap();
        let c = DerivedConstants::new(&p);
        let mut rng = stream_rng(seed, Purpose::Replica, 0);
        let init = init_config(&InitKind::BernoulliHalf, w, &mut rng).unwrap();
        let (traj, log) = run(&init, &p, t, dt, &mut rng, &SimOptions::default()).unwrap();
        (p, c, traj, log)
    }

    fn schedule(ell: usize, m: usize, tau: f64) -> ScaleSchedule {
        ScaleSchedule {
            ell_n: ell,
            m_n: m,
            tau_n: tau,
            tau_n_star: 1e-3,
            i_partial1_halfwidth: 2,
            eps: 0.01,
            delta: 0.01,
        }
    }

    #[test]
    fn fields_vanish_at_beta_zero() {
        let (_, c, traj, log) = small_run(0.0, 21, 0.05, 0.01, 1);
        let ch = build_ch_field(&traj, &c);
        let gen = Generator::new(&c, Convention::ExactDiffusivity);
        let k = kernel_columns_for(&ch, &gen, &c).unwrap();
        let f = error_fields(&ch, &traj, &log, &k, &schedule(2, 4, 0.01), &c).unwrap();
        for (_, field) in f.named() {
            assert!(field.iter().flatten().all(|v| v.abs() < 1e-9 * c.n * c.n));
        }
    }

    #[test]
    fn two_node_quadrature_by_hand() {
        let (_, c, traj, log) = small_run(0.25, 21, 0.01, 0.01, 2);
        assert_eq!(traj.len(), 2);
        let ch = build_ch_field(&traj, &c);
        let gen = Generator::new(&c, Convention::ExactDiffusivity);
        let k = kernel_columns_for(&ch, &gen, &c).unwrap();
        let f = error_fields(&ch, &traj, &log, &k, &schedule(2, 4, 0.005), &c).unwrap();
        let y = 10;
        let table = residual_table(&c);
        let c_n = 0.5 * (table[y][0] + table[y][3]);
        let p = gen.propagate(
            &{
                let mut e = vec![0.0; 21];
                e[y] = 1.0;
                e
            },
            0.01,
        );
        let g0 = c_n * q_local(&traj.spins[0], y) * ch.z[0][y];
        let g1 = c_n * q_local(&traj.spins[1], y) * ch.z[1][y];
        for x in 0..21 {
            let expect = 0.005 * (p[x] * g0 + if x == y { g1 } else { 0.0 });
            assert!((f.e_one[1][x] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
        assert!(f.e_one[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn telescoping_and_total_residual() {
        let (_, c, traj, log) = small_run(0.25, 31, 0.05, 0.005, 3);
        let ch = build_ch_field(&traj, &c);
        let gen = Generator::new(&c, Convention::ExactDiffusivity);
        let k = kernel_columns_for(&ch, &gen, &c).unwrap();
        let f = error_fields(&ch, &traj, &log, &k, &schedule(3, 6, 0.01), &c).unwrap();
        let scale = f.e_one.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(f.telescoping_error() <= 1e-12 * scale.max(1.0));
        assert!(f.truncated);
    }

    #[test]
    fn off_grid_kernel_refused() {
        let gen = Generator::from_diffusivity(vec![1.0; 5]);
        let k = KernelColumns::build(&gen, &[2], 0.1, 3);
        assert_eq!(k.lag_for(0.2).unwrap(), 2);
        assert!(k.lag_for(0.15).is_err());
        assert!(k.lag_for(0.5).is_err());
    }

    #[test]
    fn frozen_time_average_is_instantaneous() {
        let init = SpinConfig::constant(9, 1);
        let s = statistic_series(init.as_slice(), &[], 1.0, 2, 3, |sp| q_local(sp, 2));
        let a = time_average(&s, &[0.0, 0.5], 0.25, 2);
        assert_eq!(a.values, vec![1.0, 1.0]);
    }

    #[test]
    fn azuma_frozen_and_gaussian_limit() {
        let mut rng = stream_rng(4, Purpose::Sampler, 0);
        let r = azuma_canonical_check(&mut rng, &[8, 16], &[1.0, -1.0], 50, 2).unwrap();
        assert!(r.rows.iter().all(|row| row.mean == 0.0));
        assert!(two_block_region_size(10, 5).is_err());
        let r = azuma_canonical_check(&mut rng, &[100], &[0.0], 20_000, 2).unwrap();
        let expect = (4.0 / (std::f64::consts::PI * 100.0)).sqrt();
        let row = &r.rows[0];
        assert!(
            (row.mean - expect).abs() < 4.0 * row.stderr + 0.002,
            "{} vs {expect}",
            row.mean
        );
    }

    #[test]
    fn two_block_sums_are_martingale() {
        let mut rng = stream_rng(5, Purpose::Sampler, 1);
        let ell = 20;
        let total = two_block_region_size(ell, 2 * ell).unwrap();
        let plus = crate::model::canonical_plus_count(total, 0.5);
        let mut inc = vec![Moments::default(); ell];
        for _ in 0..20_000 {
            let (a, b) = sample_two_blocks(&mut rng, ell, total, plus);
            for z in 0..ell {
                inc[z].push((a[z] - b[z]) as f64);
            }
        }
        for m in &inc {
            assert!(m.mean().abs() < 4.5 * m.stderr());
        }
    }

    #[test]
    fn error_bound_at_zero_fields() {
        let norms = vec![
            ErrorNorms {
                e_one: 0.0,
                e_two: 0.0,
                z: 1.3
            };
            10
        ];
        let r = error_bound_check(&norms, 16, 0.0, 0.0, 0.3, 0.01, 1.0);
        assert_eq!(r.violation_fraction, 0.0);
        assert_eq!(r.violation_fraction_linear, 0.0);
    }
}
