//! Transition kernels of the inhomogeneous and homogeneous discrete heat
//! operators on the ring, and the estimates run against them.
//!
//! The generator acts on functions by `(L f)_x = D_x (f_{x+1} + f_{x-1} - 2 f_x)`,
//! so `P(t) = exp(t L)` is the kernel of a walk that leaves `x` at rate
//! `2 D_x` to a uniformly chosen neighbour. Rows sum to one and the
//! measure `1 / D_x` is invariant. All kernels are time homogeneous, so
//! `P(S, T)` depends only on `T - S`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Convention, DerivedConstants, ModelParams, Ring};
use crate::stats::{loglog_fit, total_variation};

/// Nearest-neighbour generator with per-site rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    diff: Vec<f64>,
}

impl Generator {
    pub fn new(consts: &DerivedConstants, convention: Convention) -> Self {
        Generator {
            diff: consts.diffusivity(convention),
        }
    }

    pub fn homogeneous(consts: &DerivedConstants, convention: Convention) -> Self {
        Generator {
            diff: vec![consts.homogeneous_diffusivity(convention); consts.window()],
        }
    }

    pub fn from_diffusivity(diff: Vec<f64>) -> Self {
        assert!(diff.len() >= 3 && diff.len() % 2 == 1);
        Generator { diff }
    }

    pub fn window(&self) -> usize {
        self.diff.len()
    }

    pub fn diffusivity(&self) -> &[f64] {
        &self.diff
    }

    /// Largest exit rate `2 max D_x`.
    pub fn max_exit_rate(&self) -> f64 {
        2.0 * self.diff.iter().cloned().fold(0.0, f64::max)
    }

    /// `out = L v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let w = self.diff.len();
        for x in 0..w {
            let l = v[if x == 0 { w - 1 } else { x - 1 }];
            let r = v[if x + 1 == w { 0 } else { x + 1 }];
            out[x] = self.diff[x] * (l + r - 2.0 * v[x]);
        }
    }

    /// `out = v L` (action on measures).
    pub fn apply_left(&self, v: &[f64], out: &mut [f64]) {
        let w = self.diff.len();
        for y in 0..w {
            let lm = if y == 0 { w - 1 } else { y - 1 };
            let rp = if y + 1 == w { 0 } else { y + 1 };
            out[y] = self.diff[lm] * v[lm] + self.diff[rp] * v[rp] - 2.0 * self.diff[y] * v[y];
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let w = self.diff.len();
        let mut m = DMatrix::zeros(w, w);
        for x in 0..w {
            let d = self.diff[x];
            m[(x, x)] -= 2.0 * d;
            m[(x, (x + 1) % w)] += d;
            m[(x, (x + w - 1) % w)] += d;
        }
        m
    }

    /// Invariant measure, proportional to `1 / D_x`, normalized to sum one.
    pub fn invariant_measure(&self) -> Vec<f64> {
        let inv: Vec<f64> = self.diff.iter().map(|d| 1.0 / d).collect();
        let s: f64 = inv.iter().sum();
        inv.iter().map(|v| v / s).collect()
    }

    /// `M = I + L / rate`, applied to a column vector.
    fn jump_apply(&self, rate: f64, v: &[f64], out: &mut [f64]) {
        let w = self.diff.len();
        for x in 0..w {
            let c = self.diff[x] / rate;
            let l = v[if x == 0 { w - 1 } else { x - 1 }];
            let r = v[if x + 1 == w { 0 } else { x + 1 }];
            out[x] = (1.0 - 2.0 * c) * v[x] + c * (l + r);
        }
    }

    /// `e^{t L} v` by uniformization.
    pub fn propagate(&self, v: &[f64], t: f64) -> Vec<f64> {
        let rate = self.max_exit_rate();
        if t <= 0.0 || rate == 0.0 {
            return v.to_vec();
        }
        let (k0, weights) = poisson_weights(rate * t, 1e-18);
        let mut cur = v.to_vec();
        let mut tmp = vec![0.0; v.len()];
        for _ in 0..k0 {
            self.jump_apply(rate, &cur, &mut tmp);
            std::mem::swap(&mut cur, &mut tmp);
        }
        let mut out = vec![0.0; v.len()];
        for (j, wk) in weights.iter().enumerate() {
            if j > 0 {
                self.jump_apply(rate, &cur, &mut tmp);
                std::mem::swap(&mut cur, &mut tmp);
            }
            for (o, c) in out.iter_mut().zip(&cur) {
                *o += wk * c;
            }
        }
        out
    }
}

fn ln_factorial(k: usize) -> f64 {
    if k < 20 {
        (1..=k).map(|i| (i as f64).ln()).sum()
    } else {
        let x = k as f64 + 1.0;
        // Stirling series for ln Gamma(x).
        (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x.powi(3))
            + 1.0 / (1260.0 * x.powi(5))
    }
}

/// Poisson(mean) weights `(k0, w)` with `w[j] = P(K = k0 + j)`, truncated
/// where the tail mass is below `tol` and renormalized to sum one.
pub fn poisson_weights(mean: f64, tol: f64) -> (usize, Vec<f64>) {
    if mean <= 0.0 {
        return (0, vec![1.0]);
    }
    let mode = mean.floor() as usize;
    let log_mode = -mean + mode as f64 * mean.ln() - ln_factorial(mode);
    let peak = log_mode.exp();
    let floor = tol * 1e-3;
    let mut up = vec![peak];
    let mut k = mode;
    let mut w = peak;
    loop {
        k += 1;
        w *= mean / k as f64;
        up.push(w);
        if w < floor && k as f64 > mean {
            break;
        }
    }
    let mut down = Vec::new();
    let mut k = mode;
    let mut w = peak;
    while k > 0 {
        w *= k as f64 / mean;
        k -= 1;
        down.push(w);
        if w < floor {
            break;
        }
    }
    let k0 = mode - down.len();
    let mut weights: Vec<f64> = down.into_iter().rev().collect();
    weights.extend(up);
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= s);
    (k0, weights)
}

/// `e^{-z} I_n(z)` for `n = 0..=nmax` by Miller's backward recurrence,
/// normalized through `e^{-z} (I_0 + 2 sum_{n>=1} I_n) = 1`.
pub fn scaled_bessel_i(z: f64, nmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; nmax + 1];
    if z <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    let start = nmax.max((100.0 * z).sqrt().ceil() as usize) + 40;
    let mut b = vec![0.0; start + 2];
    b[start] = 1e-300;
    for n in (1..=start).rev() {
        b[n - 1] = b[n + 1] + (2.0 * n as f64 / z) * b[n];
        if b[n - 1] > 1e250 {
            for v in b[n - 1..].iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let norm = b[0] + 2.0 * b[1..].iter().sum::<f64>();
    for n in 0..=nmax {
        out[n] = b[n] / norm;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMethod {
    #[default]
    Uniformization,
    Expm,
    Ode,
}

/// Transition weights `P_{S,T,x,y}` on the ring; entry `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub s: f64,
    pub t: f64,
    pub convention: Convention,
    pub matrix: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn window(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.matrix[(x, y)]
    }

    pub fn max_row_sum_deviation(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.matrix.min()
    }

    pub fn max_entry(&self) -> f64 {
        self.matrix.max()
    }

    /// Kernel over `[S, T']` from this one over `[S, M]` and `next` over `[M, T']`.
    pub fn compose(&self, next: &KernelMatrix) -> KernelMatrix {
        KernelMatrix {
            s: self.s,
            t: next.t,
            convention: self.convention,
            matrix: &self.matrix * &next.matrix,
        }
    }

    pub fn max_abs_diff(&self, other: &KernelMatrix) -> f64 {
        (&self.matrix - &other.matrix).amax()
    }
}

/// Smallest odd width with `W >= 16 sqrt(2 D_max t) + 1` (at least `min`).
pub fn kernel_window(consts: &DerivedConstants, t: f64, convention: Convention, min: usize) -> usize {
    let d = consts
        .diffusivity(convention)
        .into_iter()
        .fold(consts.homogeneous_diffusivity(convention), f64::max);
    let w = (16.0 * (2.0 * d * t.max(0.0)).sqrt()).ceil() as usize + 1;
    w.max(min).max(3) | 1
}

fn check_times(s: f64, t: f64) -> Result<f64> {
    if !(s >= 0.0 && t >= s && t.is_finite()) {
        return Err(Error::InvalidParams(format!("need 0 <= S <= T, got S = {s}, T = {t}")));
    }
    Ok(t - s)
}

/// Uniformization of `exp(t L)`: Poisson mixture over pieces with
/// `rate * t / 2^s <= 32`, followed by `s` squarings.
pub fn uniformized_matrix(gen: &Generator, t: f64) -> DMatrix<f64> {
    let w = gen.window();
    let rate = gen.max_exit_rate();
    if t <= 0.0 || rate == 0.0 {
        return DMatrix::identity(w, w);
    }
    let mut squarings = 0u32;
    while rate * t / 2f64.powi(squarings as i32) > 32.0 {
        squarings += 1;
    }
    let h = t / 2f64.powi(squarings as i32);
    let (k0, weights) = poisson_weights(rate * h, 1e-18);
    let mut out = DMatrix::zeros(w, w);
    let mut col = vec![0.0; w];
    let mut tmp = vec![0.0; w];
    for j in 0..w {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        for _ in 0..k0 {
            gen.jump_apply(rate, &col, &mut tmp);
            std::mem::swap(&mut col, &mut tmp);
        }
        let mut acc = vec![0.0; w];
        for (k, wk) in weights.iter().enumerate() {
            if k > 0 {
                gen.jump_apply(rate, &col, &mut tmp);
                std::mem::swap(&mut col, &mut tmp);
            }
            for (a, c) in acc.iter_mut().zip(&col) {
                *a += wk * c;
            }
        }
        out.set_column(j, &DVector::from_vec(acc));
    }
    for _ in 0..squarings {
        out = &out * &out;
    }
    out
}

fn ode_matrix(gen: &Generator, t: f64) -> DMatrix<f64> {
    let w = gen.window();
    let l = gen.dense();
    let rate = gen.max_exit_rate();
    let steps = ((t * rate / 0.005).ceil() as usize).max(1);
    let h = t / steps as f64;
    let mut p = DMatrix::<f64>::identity(w, w);
    for _ in 0..steps {
        let k1 = &l * &p;
        let k2 = &l * (&p + &k1 * (h / 2.0));
        let k3 = &l * (&p + &k2 * (h / 2.0));
        let k4 = &l * (&p + &k3 * h);
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    p
}

/// Windows above this width are not trusted to the dense exponential.
pub const EXPM_MAX_WINDOW: usize = 257;

pub fn solve_kernel(
    params: &ModelParams,
    consts: &DerivedConstants,
    s: f64,
    t: f64,
    method: KernelMethod,
    convention: Convention,
) -> Result<KernelMatrix> {
    let dt = check_times(s, t)?;
    if consts.window() != params.window() {
        return Err(Error::InvalidParams("constants built for a different window".into()));
    }
    let gen = Generator::new(consts, convention);
    Ok(KernelMatrix {
        s,
        t,
        convention,
        matrix: kernel_of(&gen, dt, method),
    })
}

/// Kernel of an arbitrary generator over an elapsed time.
pub fn kernel_of(gen: &Generator, dt: f64, method: KernelMethod) -> DMatrix<f64> {
    match method {
        KernelMethod::Uniformization => uniformized_matrix(gen, dt),
        KernelMethod::Expm if gen.window() > EXPM_MAX_WINDOW => {
            log::warn!(
                "dense exponential on a {}-site window; using uniformization instead",
                gen.window()
            );
            uniformized_matrix(gen, dt)
        }
        KernelMethod::Expm => (gen.dense() * dt).exp(),
        KernelMethod::Ode => ode_matrix(gen, dt),
    }
}

/// Homogeneous kernel from the modified Bessel form, wrapped on the ring.
pub fn homogeneous_kernel(consts: &DerivedConstants, s: f64, t: f64, convention: Convention) -> Result<KernelMatrix> {
    let dt = check_times(s, t)?;
    let w = consts.window();
    let d = consts.homogeneous_diffusivity(convention);
    let row = wrapped_bessel_row(w, 2.0 * d * dt);
    let mut m = DMatrix::zeros(w, w);
    for x in 0..w {
        for y in 0..w {
            m[(x, y)] = row[(y + w - x) % w];
        }
    }
    Ok(KernelMatrix {
        s,
        t,
        convention,
        matrix: m,
    })
}

/// `sum_j e^{-z} I_{|d + j W|}(z)` for `d = 0..W`.
pub fn wrapped_bessel_row(w: usize, z: f64) -> Vec<f64> {
    let nmax = ((100.0 * z).sqrt().ceil() as usize + 40).max(w);
    let b = scaled_bessel_i(z, nmax);
    let wi = w as i64;
    (0..w as i64)
        .map(|d| {
            let mut s = 0.0;
            let jmax = nmax as i64 / wi + 2;
            for j in -jmax..=jmax {
                let n = (d + j * wi).unsigned_abs() as usize;
                if n <= nmax {
                    s += b[n];
                }
            }
            s
        })
        .collect()
}

/// Weight `exp(kappa |x - y| / (N sqrt(rho) v 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpWeight {
    pub kappa: f64,
}

impl ExpWeight {
    pub fn eval(&self, n: f64, rho: f64, dist: f64) -> f64 {
        let scale = (n * rho.max(0.0).sqrt()).max(1.0);
        (self.kappa * dist.abs() / scale).exp()
    }
}

/// Fitted constants or exponents for one estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub name: String,
    pub n: u32,
    pub beta_star: f64,
    pub constant: f64,
    pub exponent: f64,
    /// Probed points `(t, value)`.
    pub grid: Vec<(f64, f64)>,
    pub pass: bool,
    pub note: String,
}

/// Symmetrized spectral decomposition for small windows:
/// `L = D^{1/2} Q diag(mu) Q^T D^{-1/2}`.
pub struct SpectralKernel {
    sqrt_d: Vec<f64>,
    q: DMatrix<f64>,
    mu: DVector<f64>,
}

impl SpectralKernel {
    pub fn new(gen: &Generator) -> Self {
        let w = gen.window();
        let sqrt_d: Vec<f64> = gen.diff.iter().map(|d| d.sqrt()).collect();
        let mut s = DMatrix::zeros(w, w);
        for x in 0..w {
            s[(x, x)] = -2.0 * gen.diff[x];
            let r = (x + 1) % w;
            let v = sqrt_d[x] * sqrt_d[r];
            s[(x, r)] += v;
            s[(r, x)] += v;
        }
        let eig = SymmetricEigen::new(s);
        SpectralKernel {
            sqrt_d,
            q: eig.eigenvectors,
            mu: eig.eigenvalues,
        }
    }

    /// `(A, B, mu)` with `exp(t L) = A diag(e^{mu t}) B`.
    pub fn mode_maps(&self) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let w = self.sqrt_d.len();
        let mut a = self.q.clone();
        let mut b = self.q.transpose();
        for x in 0..w {
            a.row_mut(x).scale_mut(self.sqrt_d[x]);
            b.column_mut(x).scale_mut(1.0 / self.sqrt_d[x]);
        }
        (a, b, self.mu.iter().cloned().collect())
    }

    /// Column `y` of `exp(t L)`: the map `x -> P_t(x, y)`.
    pub fn column(&self, t: f64, y: usize) -> Vec<f64> {
        let w = self.sqrt_d.len();
        let coef: Vec<f64> = (0..w)
            .map(|k| (self.mu[k] * t).exp() * self.q[(y, k)] / self.sqrt_d[y])
            .collect();
        (0..w)
            .map(|x| {
                let mut s = 0.0;
                for k in 0..w {
                    s += self.q[(x, k)] * coef[k];
                }
                self.sqrt_d[x] * s
            })
            .collect()
    }

    /// Row `x` of `exp(t L)`: the map `y -> P_t(x, y)`.
    pub fn row(&self, t: f64, x: usize) -> Vec<f64> {
        let w = self.sqrt_d.len();
        let coef: Vec<f64> = (0..w)
            .map(|k| (self.mu[k] * t).exp() * self.q[(x, k)] * self.sqrt_d[x])
            .collect();
        (0..w)
            .map(|y| {
                let mut s = 0.0;
                for k in 0..w {
                    s += self.q[(y, k)] * coef[k];
                }
                s / self.sqrt_d[y]
            })
            .collect()
    }

    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        let w = self.sqrt_d.len();
        let mut e = self.q.clone();
        for k in 0..w {
            let f = (self.mu[k] * t).exp();
            e.column_mut(k).scale_mut(f);
        }
        let mut m = e * self.q.transpose();
        for x in 0..w {
            for y in 0..w {
                m[(x, y)] *= self.sqrt_d[x] / self.sqrt_d[y];
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grading {
    Uniform,
    /// Nodes `S + (T - S) u^2`, refined near `S`.
    Quadratic,
}

/// Composite midpoint quadrature for the Duhamel integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub panels: usize,
    pub grading: Grading,
}

/// `max_{x,y} |P - Pbar + int_S^T P(R,T) (Lbar - L) Pbar(S,R) dR|`.
/// The defect `Lbar - L` lives on rows where the two diffusivities differ.
pub fn duhamel_residual(gen: &Generator, gen_bar: &Generator, s: f64, t: f64, quad: Quadrature) -> Result<f64> {
    let span = check_times(s, t)?;
    if quad.panels == 0 {
        return Err(Error::InvalidParams("quadrature needs at least one panel".into()));
    }
    let w = gen.window();
    let defect: Vec<(usize, f64)> = (0..w)
        .filter_map(|x| {
            let d = gen_bar.diff[x] - gen.diff[x];
            (d != 0.0).then_some((x, d))
        })
        .collect();
    let sp = SpectralKernel::new(gen);
    let sp_bar = SpectralKernel::new(gen_bar);
    let mut acc = DMatrix::<f64>::zeros(w, w);
    let n = quad.panels as f64;
    for j in 0..quad.panels {
        let u = (j as f64 + 0.5) / n;
        let (r, weight) = match quad.grading {
            Grading::Uniform => (s + span * u, span / n),
            Grading::Quadratic => (s + span * u * u, 2.0 * span * u / n),
        };
        for &(y, dd) in &defect {
            let col = sp.column(t - r, y);
            let lm = (y + w - 1) % w;
            let rp = (y + 1) % w;
            let r_m = sp_bar.row(r - s, lm);
            let r_0 = sp_bar.row(r - s, y);
            let r_p = sp_bar.row(r - s, rp);
            let lap: Vec<f64> = (0..w).map(|k| r_m[k] + r_p[k] - 2.0 * r_0[k]).collect();
            let f = weight * dd;
            for yy in 0..w {
                let c = f * lap[yy];
                if c == 0.0 {
                    continue;
                }
                for x in 0..w {
                    acc[(x, yy)] += col[x] * c;
                }
            }
        }
    }
    let p = sp.matrix(span);
    let pbar = sp_bar.matrix(span);
    Ok((p - pbar + acc).amax())
}

/// Result of the on-diagonal sweep for one parameter set.
pub fn nash_on_diagonal_fit(params: &ModelParams, convention: Convention, constant: f64) -> Result<EstimateReport> {
    let n = params.n_f64();
    let k = (n * n / 10.0).log2().floor() as i32;
    if k < 1 {
        return Ok(EstimateReport {
            name: "nash_on_diagonal".into(),
            n: params.n(),
            beta_star: params.beta_star(),
            constant: f64::NAN,
            exponent: f64::NAN,
            grid: vec![],
            pass: false,
            note: "inconclusive: fewer than two time points in [10/N^2, 1]".into(),
        });
    }
    let base = DerivedConstants::new(params);
    let w = kernel_window(&base, 1.0, convention, params.window());
    let p = params.with_window(w)?;
    let consts = DerivedConstants::new(&p);
    let gen = Generator::new(&consts, convention);
    let t0 = 2f64.powi(-k);
    let mut m = uniformized_matrix(&gen, t0);
    let mut grid = Vec::new();
    let mut t = t0;
    loop {
        grid.push((t, m.max()));
        if t >= 1.0 {
            break;
        }
        m = &m * &m;
        t *= 2.0;
    }
    let (ts, vs): (Vec<f64>, Vec<f64>) = grid.iter().cloned().unzip();
    let fit = loglog_fit(&ts, &vs).expect("at least two points");
    let prefactor = fit.intercept.exp();
    let ratio = prefactor / n.powf(-1.0 + 2.5 * params.beta_star());
    let inconclusive = grid.len() < 3;
    Ok(EstimateReport {
        name: "nash_on_diagonal".into(),
        n: params.n(),
        beta_star: params.beta_star(),
        constant: ratio,
        exponent: fit.slope,
        grid,
        pass: !inconclusive && (fit.slope + 0.5).abs() <= 0.1 && ratio <= constant,
        note: if inconclusive {
            "inconclusive: fewer than three time points".into()
        } else {
            format!("window {w}")
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxPrincipleReport {
    pub min_entry: f64,
    pub max_entry: f64,
    /// `sup_{x,y} P` for each kernel in the order given.
    pub sups: Vec<f64>,
    pub pass: bool,
}

/// Entries in `[0, 1 + 1e-12]`, and `sup` non-increasing along kernels
/// ordered by increasing elapsed time.
pub fn max_principle_check(kernels: &[&KernelMatrix]) -> MaxPrincipleReport {
    let mut min_entry = f64::INFINITY;
    let mut max_entry = f64::NEG_INFINITY;
    let mut sups = Vec::new();
    for k in kernels {
        min_entry = min_entry.min(k.min_entry());
        max_entry = max_entry.max(k.max_entry());
        sups.push(k.max_entry());
    }
    let monotone = sups.windows(2).all(|p| p[1] <= p[0] + 1e-12);
    MaxPrincipleReport {
        min_entry,
        max_entry,
        pass: min_entry >= -1e-14 && max_entry <= 1.0 + 1e-12 && monotone,
        sups,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub t: f64,
    /// `sup_x sup_{y outside the defect neighbourhood} |P - Pbar|`.
    pub gap: f64,
    /// `(kappa, weighted gap)`.
    pub weighted: Vec<(f64, f64)>,
    /// Unweighted gap over all `y`.
    pub gap_all: f64,
}

/// Ring indices within `halfwidth` of a slow site.
pub fn defect_neighbourhood(w: usize, slow: &[usize], halfwidth: usize) -> Vec<bool> {
    let mut inside = vec![false; w];
    for &s in slow {
        for d in 0..=halfwidth.min(w) {
            inside[(s + d) % w] = true;
            inside[(s + w - d % w) % w] = true;
        }
    }
    inside
}

pub fn perturbative_gap(
    p: &KernelMatrix,
    pbar: &KernelMatrix,
    slow: &[usize],
    halfwidth: usize,
    n: f64,
    kappas: &[f64],
) -> GapReport {
    let w = p.window();
    let inside = defect_neighbourhood(w, slow, halfwidth);
    let ring = Ring::new(w);
    let rho = p.t - p.s;
    let mut gap: f64 = 0.0;
    let mut gap_all: f64 = 0.0;
    let mut weighted = vec![0.0f64; kappas.len()];
    for x in 0..w {
        for y in 0..w {
            let d = (p.matrix[(x, y)] - pbar.matrix[(x, y)]).abs();
            gap_all = gap_all.max(d);
            if inside[y] {
                continue;
            }
            gap = gap.max(d);
            let dist = (ring.label(x) - ring.label(y)).abs() as f64;
            for (i, k) in kappas.iter().enumerate() {
                weighted[i] = weighted[i].max(d * ExpWeight { kappa: *k }.eval(n, rho, dist));
            }
        }
    }
    GapReport {
        t: rho,
        gap,
        weighted: kappas.iter().cloned().zip(weighted).collect(),
        gap_all,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelRegularityReport {
    pub k: usize,
    pub tau: f64,
    pub grad_sup: f64,
    pub grad_bound: f64,
    pub time_sup: f64,
    pub time_bound: f64,
    /// `kappa`-weighted gradient supremum.
    pub grad_sup_weighted: f64,
}

/// Gradient and time-difference suprema of `P(0, t)` against the bound
/// shapes (implied constants set to one).
pub fn kernel_regularity(
    p: &KernelMatrix,
    p_later: &KernelMatrix,
    k: usize,
    n: f64,
    beta: f64,
    kappa: f64,
) -> KernelRegularityReport {
    let w = p.window();
    let rho = p.t - p.s;
    let tau = (p_later.t - p_later.s) - rho;
    let ring = Ring::new(w);
    let mut grad_sup: f64 = 0.0;
    let mut grad_w: f64 = 0.0;
    if k > 0 {
        for x in 0..w {
            let xk = (x + k) % w;
            for y in 0..w {
                let g = (p.matrix[(xk, y)] - p.matrix[(x, y)]).abs();
                grad_sup = grad_sup.max(g);
                let dist = (ring.label(x) - ring.label(y)).abs() as f64;
                grad_w = grad_w.max(g * ExpWeight { kappa }.eval(n, rho, dist));
            }
        }
    }
    let time_sup = if tau == 0.0 {
        0.0
    } else {
        (&p_later.matrix - &p.matrix).amax()
    };
    let kf = k as f64;
    KernelRegularityReport {
        k,
        tau,
        grad_sup,
        grad_bound: n.powf(-2.0 + beta) / rho * kf + n.powf(-1.0 - 93.0 * beta) / rho,
        time_sup,
        time_bound: n.powf(-1.0 - 93.0 * beta) / rho + n.powf(-1.0 + 3.0 * beta) / rho * tau.sqrt(),
        grad_sup_weighted: grad_w,
    }
}

/// `(||phi||_2^2, ||phi||_1, ||grad phi||_2^2)` with gradient `N (phi_{x+1} - phi_x)`.
pub fn nash_norms(phi: &[f64], n: f64) -> (f64, f64, f64) {
    let l2: f64 = phi.iter().map(|v| v * v).sum();
    let l1: f64 = phi.iter().map(|v| v.abs()).sum();
    let mut g = phi[0] * phi[0];
    for i in 1..phi.len() {
        let d = phi[i] - phi[i - 1];
        g += d * d;
    }
    g += phi[phi.len() - 1] * phi[phi.len() - 1];
    (l2, l1, g * n * n)
}

/// `||phi||_2^2 / (||phi||_1^{4/3} ||grad phi||_2^{2/3})`; `None` for `phi = 0`.
pub fn nash_ratio(phi: &[f64], n: f64) -> Option<f64> {
    let (l2, l1, g) = nash_norms(phi, n);
    if l1 == 0.0 {
        return None;
    }
    Some(l2 / (l1.powf(4.0 / 3.0) * g.powf(1.0 / 3.0)))
}

/// A random smooth test function on `len` sites (zero outside).
pub fn random_test_function<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let l = len as f64;
    match rng.random_range(0..3) {
        0 => {
            // Tent with a random apex.
            let apex = rng.random_range(0.2..0.8) * l;
            let h = rng.random_range(0.5..2.0);
            (0..len)
                .map(|i| {
                    let x = i as f64 + 0.5;
                    h * if x < apex { x / apex } else { (l - x) / (l - apex) }
                })
                .collect()
        }
        1 => {
            // Mixture of Gaussian bumps.
            let k = rng.random_range(1..=4);
            let bumps: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(0.25..0.75) * l,
                        rng.random_range(0.08..0.2) * l,
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            (0..len)
                .map(|i| {
                    let x = i as f64 + 0.5;
                    bumps
                        .iter()
                        .map(|(c, s, a)| a * (-0.5 * ((x - c) / s).powi(2)).exp())
                        .sum::<f64>()
                })
                .collect()
        }
        _ => {
            // Low sine modes under a sine window.
            let m = rng.random_range(1..=3) as f64;
            let a = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::PI);
            (0..len)
                .map(|i| {
                    let u = (i as f64 + 0.5) / l;
                    a * (std::f64::consts::PI * u).sin() * (m * std::f64::consts::PI * u + phase).cos()
                })
                .collect()
        }
    }
}

/// Max Nash ratio (scaled by `N^{2/3}`, so independent of `N`) per support size.
pub fn nash_sobolev_check<R: Rng + ?Sized>(
    rng: &mut R,
    trials: usize,
    sizes: &[usize],
    n: f64,
) -> Result<EstimateReport> {
    if trials == 0 {
        return Err(Error::InvalidParams("trials must be at least 1".into()));
    }
    let mut grid = Vec::new();
    for &size in sizes {
        let mut best: f64 = 0.0;
        for _ in 0..trials {
            let phi = random_test_function(rng, size);
            if let Some(r) = nash_ratio(&phi, n) {
                best = best.max(r * n.powf(2.0 / 3.0));
            }
        }
        grid.push((size as f64, best));
    }
    let hi = grid.iter().map(|g| g.1).fold(0.0, f64::max);
    let lo = grid.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
    Ok(EstimateReport {
        name: "nash_sobolev".into(),
        n: n as u32,
        beta_star: 0.0,
        constant: hi,
        exponent: hi / lo,
        grid,
        pass: hi.is_finite() && hi / lo < 2.0,
        note: "exponent column holds max/min over support sizes".into(),
    })
}

/// Empirical law at time `T - S` of the walk started from `x`.
pub fn random_walk_oracle<R: Rng + ?Sized>(
    gen: &Generator,
    rng: &mut R,
    replicas: usize,
    s: f64,
    t: f64,
    x: usize,
) -> Result<Vec<f64>> {
    let dt = check_times(s, t)?;
    let w = gen.window();
    let mut counts = vec![0usize; w];
    for _ in 0..replicas {
        let mut pos = x;
        let mut clock = 0.0;
        loop {
            let rate = 2.0 * gen.diff[pos];
            if rate <= 0.0 {
                break;
            }
            let e: f64 = 1.0 - rng.random::<f64>();
            clock += -e.ln() / rate;
            if clock > dt {
                break;
            }
            pos = if rng.random::<bool>() {
                (pos + 1) % w
            } else {
                (pos + w - 1) % w
            };
        }
        counts[pos] += 1;
    }
    Ok(counts.iter().map(|c| *c as f64 / replicas as f64).collect())
}

pub fn walk_tv_distance(empirical: &[f64], row: &[f64]) -> f64 {
    total_variation(empirical, row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RawParams;
    use crate::rng::{stream_rng, Purpose};

    fn setup(n: u32, beta: f64, slow: Vec<i64>, w: usize) -> (ModelParams, DerivedConstants) {
        let p = ModelParams::validate(&RawParams::new(n, beta, slow, w)).unwrap();
        let c = DerivedConstants::new(&p);
        (p, c)
    }

    #[test]
    fn poisson_weights_sum_and_mean() {
        for mean in [0.3, 5.0, 31.9, 800.0] {
            let (k0, w) = poisson_weights(mean, 1e-18);
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            let m: f64 = w.iter().enumerate().map(|(j, p)| (k0 + j) as f64 * p).sum();
            assert!((m - mean).abs() < 1e-9 * mean.max(1.0), "{mean}: {m}");
        }
    }

    #[test]
    fn bessel_small_argument() {
        // e^{-z} I_0(z) and I_1 at z = 1: 0.46575961, 0.20791042.
        let b = scaled_bessel_i(1.0, 3);
        assert!((b[0] - 0.465_759_607_593_640_6).abs() < 1e-14);
        assert!((b[1] - 0.207_910_415_349_708_7).abs() < 1e-14);
        let b = scaled_bessel_i(0.0, 3);
        assert_eq!(b, vec![1.0, 0.0, 0.0, 0.0]);
        // Large argument: e^{-z} I_0(z) ~ 1 / sqrt(2 pi z).
        let z = 5000.0;
        let b = scaled_bessel_i(z, 0);
        let asym = 1.0 / (2.0 * std::f64::consts::PI * z).sqrt() * (1.0 + 1.0 / (8.0 * z));
        assert!((b[0] - asym).abs() / asym < 1e-6);
    }

    #[test]
    fn identity_at_zero_time() {
        let (p, c) = setup(8, 0.25, vec![0], 17);
        for m in [KernelMethod::Uniformization, KernelMethod::Expm, KernelMethod::Ode] {
            let k = solve_kernel(&p, &c, 0.3, 0.3, m, Convention::ExactDiffusivity).unwrap();
            assert_eq!(k.matrix, DMatrix::identity(17, 17));
        }
        assert!(solve_kernel(&p, &c, 0.3, 0.2, KernelMethod::Expm, Convention::ExactDiffusivity).is_err());
    }

    #[test]
    fn methods_agree_on_small_window() {
        let (p, c) = setup(4, 0.0, vec![], 5);
        let u = solve_kernel(
            &p,
            &c,
            0.0,
            0.1,
            KernelMethod::Uniformization,
            Convention::ExactDiffusivity,
        )
        .unwrap();
        let e = solve_kernel(&p, &c, 0.0, 0.1, KernelMethod::Expm, Convention::ExactDiffusivity).unwrap();
        assert!(u.max_abs_diff(&e) < 1e-12);
        let (p, c) = setup(8, 0.25, vec![-1, 2], 21);
        let u = solve_kernel(&p, &c, 0.0, 0.05, KernelMethod::Uniformization, Convention::Nominal).unwrap();
        let e = solve_kernel(&p, &c, 0.0, 0.05, KernelMethod::Expm, Convention::Nominal).unwrap();
        let o = solve_kernel(&p, &c, 0.0, 0.05, KernelMethod::Ode, Convention::Nominal).unwrap();
        assert!(u.max_abs_diff(&e) < 1e-10);
        assert!(u.max_abs_diff(&o) < 1e-10, "{}", u.max_abs_diff(&o));
        assert!(u.min_entry() >= 0.0);
        assert!(u.max_row_sum_deviation() < 1e-12);
    }

    #[test]
    fn bessel_matches_expm() {
        let (_, c) = setup(4, 0.0, vec![], 33);
        let b = homogeneous_kernel(&c, 0.0, 0.01, Convention::ExactDiffusivity).unwrap();
        let gen = Generator::homogeneous(&c, Convention::ExactDiffusivity);
        let e = (gen.dense() * 0.01).exp();
        assert!((&b.matrix - &e).amax() < 1e-10);
        assert_eq!(b.matrix, b.matrix.transpose());
    }

    #[test]
    fn spectral_matches_uniformization() {
        let (_, c) = setup(8, 0.25, vec![0], 31);
        let gen = Generator::new(&c, Convention::ExactDiffusivity);
        let sp = SpectralKernel::new(&gen);
        let u = uniformized_matrix(&gen, 0.07);
        assert!((sp.matrix(0.07) - &u).amax() < 1e-12);
        let col = sp.column(0.07, 15);
        let row = sp.row(0.07, 3);
        for x in 0..31 {
            assert!((col[x] - u[(x, 15)]).abs() < 1e-12);
            assert!((row[x] - u[(3, x)]).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_measure_is_stationary() {
        let (_, c) = setup(8, 0.25, vec![0, 3], 21);
        let gen = Generator::new(&c, Convention::ExactDiffusivity);
        let pi = gen.invariant_measure();
        let mut out = vec![0.0; 21];
        gen.apply_left(&pi, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn duhamel_vanishes_without_defect() {
        let (_, c) = setup(8, 0.0, vec![], 33);
        let g = Generator::new(&c, Convention::ExactDiffusivity);
        let gb = Generator::homogeneous(&c, Convention::ExactDiffusivity);
        let r = duhamel_residual(
            &g,
            &gb,
            0.0,
            0.05,
            Quadrature {
                panels: 4,
                grading: Grading::Uniform,
            },
        )
        .unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn exp_weight_identities() {
        let w = ExpWeight { kappa: 3.0 };
        assert_eq!(w.eval(16.0, 0.5, 0.0), 1.0);
        assert_eq!(ExpWeight { kappa: 0.0 }.eval(16.0, 0.5, 7.0), 1.0);
        assert!(w.eval(16.0, 0.0, 2.0) >= 1.0);
    }

    #[test]
    fn point_mass_nash_ratio() {
        let n = 8.0;
        let r = nash_ratio(&[0.0, 3.0, 0.0], n).unwrap();
        assert!((r - (2.0 * n * n).powf(-1.0 / 3.0)).abs() < 1e-14);
        let phi = [0.5, 1.0, 0.25];
        let doubled: Vec<f64> = phi.iter().map(|v| 2.0 * v).collect();
        assert!((nash_ratio(&phi, n).unwrap() - nash_ratio(&doubled, n).unwrap()).abs() < 1e-14);
        assert!(nash_ratio(&[0.0, 0.0], n).is_none());
    }

    #[test]
    fn walk_oracle_trivial_time() {
        let (_, c) = setup(8, 0.0, vec![], 9);
        let g = Generator::new(&c, Convention::ExactDiffusivity);
        let mut rng = stream_rng(0, Purpose::WalkOracle, 0);
        let row = random_walk_oracle(&g, &mut rng, 100, 0.2, 0.2, 4).unwrap();
        assert_eq!(row[4], 1.0);
    }

    #[test]
    fn gap_zero_at_beta_zero() {
        let (p, c) = setup(16, 0.0, vec![0], 65);
        let k = solve_kernel(
            &p,
            &c,
            0.0,
            0.05,
            KernelMethod::Uniformization,
            Convention::ExactDiffusivity,
        )
        .unwrap();
        let kb = homogeneous_kernel(&c, 0.0, 0.05, Convention::ExactDiffusivity).unwrap();
        let g = perturbative_gap(&k, &kb, &p.slow_indices(), 2, 16.0, &[1.0, 2.0, 5.0]);
        assert!(g.gap_all < 1e-10);
    }

    #[test]
    fn regularity_trivial_cases() {
        let (p, c) = setup(8, 0.1, vec![0], 33);
        let k = solve_kernel(
            &p,
            &c,
            0.0,
            0.05,
            KernelMethod::Uniformization,
            Convention::ExactDiffusivity,
        )
        .unwrap();
        let r = kernel_regularity(&k, &k, 0, 8.0, 0.1, 1.0);
        assert_eq!(r.grad_sup, 0.0);
        assert_eq!(r.time_sup, 0.0);
    }
}
