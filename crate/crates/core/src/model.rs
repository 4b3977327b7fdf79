//! Model parameters, derived constants, scale schedules, spin state and
//! equilibrium ensembles.
//!
//! Sites live on a periodic ring of odd width `W`. Ring index `i` carries
//! the lattice label `i - (W - 1) / 2`, so labels run over
//! `-(W-1)/2 ..= (W-1)/2` with the origin at the centre. Bond `i` joins
//! index `i` and `i + 1 (mod W)`; a slow bond is named by the label of
//! its left endpoint.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unvalidated parameter record, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawParams {
    pub n: u32,
    pub beta_star: f64,
    #[serde(default)]
    pub eps_star2: f64,
    /// Width exponent of the admissible defect interval; only consulted in
    /// strict mode. Defaults to `99 * beta_star + 1e-3`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_star: Option<f64>,
    #[serde(default)]
    pub slow_bonds: Vec<i64>,
    pub window: usize,
    #[serde(default)]
    pub strict_mode: bool,
}

impl RawParams {
    pub fn new(n: u32, beta_star: f64, slow_bonds: Vec<i64>, window: usize) -> Self {
        RawParams {
            n,
            beta_star,
            eps_star2: 0.0,
            eps_star: None,
            slow_bonds,
            window,
            strict_mode: false,
        }
    }
}

/// Ring geometry helper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ring {
    width: usize,
}

impl Ring {
    pub fn new(width: usize) -> Self {
        debug_assert!(width % 2 == 1);
        Ring { width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn center(&self) -> usize {
        self.width / 2
    }

    pub fn half(&self) -> i64 {
        (self.width / 2) as i64
    }

    pub fn label(&self, index: usize) -> i64 {
        index as i64 - self.half()
    }

    /// Ring index of a label; labels outside the ring wrap around.
    pub fn index(&self, label: i64) -> usize {
        (label + self.half()).rem_euclid(self.width as i64) as usize
    }

    pub fn contains_label(&self, label: i64) -> bool {
        label.abs() <= self.half()
    }

    #[inline]
    pub fn next(&self, index: usize) -> usize {
        if index + 1 == self.width {
            0
        } else {
            index + 1
        }
    }

    #[inline]
    pub fn prev(&self, index: usize) -> usize {
        if index == 0 {
            self.width - 1
        } else {
            index - 1
        }
    }
}

/// Validated model parameters. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelParams {
    n: u32,
    beta_star: f64,
    eps_star2: f64,
    eps_star: f64,
    slow_bonds: Vec<i64>,
    window: usize,
    strict_mode: bool,
    #[serde(skip)]
    warnings: Vec<String>,
}

impl ModelParams {
    /// Validate a raw record. In strict mode the constraints of the small
    /// `beta_star` asymptotic regime are enforced; otherwise they only produce
    /// warnings (available from [`ModelParams::warnings`]).
    pub fn validate(raw: &RawParams) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if raw.n == 0 {
            return bad("N must be a positive integer".into());
        }
        if !raw.beta_star.is_finite() || !raw.eps_star2.is_finite() {
            return bad("non-finite exponent".into());
        }
        if !(0.0..=0.5).contains(&raw.beta_star) {
            return bad(format!("beta_star = {} outside [0, 1/2]", raw.beta_star));
        }
        if raw.eps_star2 < 0.0 {
            return bad(format!("eps_star2 = {} is negative", raw.eps_star2));
        }
        if raw.window < 3 {
            return bad(format!("window = {} is smaller than 3", raw.window));
        }
        if raw.window.is_multiple_of(2) {
            return bad(format!("window = {} must be odd", raw.window));
        }
        let ring = Ring::new(raw.window);
        let mut slow = raw.slow_bonds.clone();
        slow.sort_unstable();
        slow.dedup();
        if let Some(b) = slow.iter().find(|b| !ring.contains_label(**b)) {
            return bad(format!(
                "slow bond {b} outside ring labels [{}, {}]",
                -ring.half(),
                ring.half()
            ));
        }

        let n = raw.n as f64;
        let eps_star = raw.eps_star.unwrap_or(99.0 * raw.beta_star + 1e-3);
        if !eps_star.is_finite() {
            return bad("non-finite eps_star".into());
        }
        let mut violations = Vec::new();
        let max_slow = (n.powf(raw.eps_star2) - 1e-9).ceil().max(1.0) as usize;
        if slow.len() > max_slow {
            violations.push(format!(
                "{} slow bonds exceed ceil(N^eps_star2) = {max_slow}",
                slow.len()
            ));
        }
        if eps_star < 99.0 * raw.beta_star {
            violations.push(format!(
                "eps_star = {eps_star} violates eps_star >= 99 beta_star = {}",
                99.0 * raw.beta_star
            ));
        }
        if eps_star >= 1.0 {
            violations.push(format!(
                "eps_star = {eps_star} >= 1 leaves no mesoscopic defect interval (99 beta_star = {})",
                99.0 * raw.beta_star
            ));
        }
        if raw.eps_star2 > raw.beta_star / 99.0 {
            violations.push(format!(
                "eps_star2 = {} exceeds beta_star / 99 = {}",
                raw.eps_star2,
                raw.beta_star / 99.0
            ));
        }
        let defect_hi = 0.5 * n.powf(1.0 - eps_star);
        if let Some(b) = slow.iter().find(|b| **b < 0 || **b as f64 > defect_hi) {
            violations.push(format!("slow bond {b} outside the defect interval [0, {defect_hi:.3}]"));
        }

        if raw.strict_mode && !violations.is_empty() {
            return bad(format!("strict mode: {}", violations.join("; ")));
        }
        for v in &violations {
            log::debug!("exploratory mode: {v}");
        }

        Ok(ModelParams {
            n: raw.n,
            beta_star: raw.beta_star,
            eps_star2: raw.eps_star2,
            eps_star,
            slow_bonds: slow,
            window: raw.window,
            strict_mode: raw.strict_mode,
            warnings: violations,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn n_f64(&self) -> f64 {
        self.n as f64
    }

    pub fn beta_star(&self) -> f64 {
        self.beta_star
    }

    pub fn eps_star2(&self) -> f64 {
        self.eps_star2
    }

    pub fn eps_star(&self) -> f64 {
        self.eps_star
    }

    pub fn slow_bonds(&self) -> &[i64] {
        &self.slow_bonds
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn strict_mode(&self) -> bool {
        self.strict_mode
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn ring(&self) -> Ring {
        Ring::new(self.window)
    }

    /// Ring indices of the slow bonds' left endpoints.
    pub fn slow_indices(&self) -> Vec<usize> {
        let ring = self.ring();
        self.slow_bonds.iter().map(|b| ring.index(*b)).collect()
    }

    /// Same parameters on a different ring width.
    pub fn with_window(&self, window: usize) -> Result<Self> {
        let mut raw = self.to_raw();
        raw.window = window;
        ModelParams::validate(&raw)
    }

    pub fn to_raw(&self) -> RawParams {
        RawParams {
            n: self.n,
            beta_star: self.beta_star,
            eps_star2: self.eps_star2,
            eps_star: Some(self.eps_star),
            slow_bonds: self.slow_bonds.clone(),
            window: self.window,
            strict_mode: self.strict_mode,
        }
    }
}

/// Smallest odd ring width with `W >= 8 N sqrt(T) log N` (and at least
/// `min`), the width used for simulation runs.
pub fn simulation_window(n: u32, t_final: f64, min: usize) -> usize {
    let nf = n as f64;
    let w = (8.0 * nf * t_final.max(0.0).sqrt() * nf.ln().max(1.0)).ceil() as usize;
    let w = w.max(min).max(3);
    w | 1
}

/// Coefficient convention for the discrete parabolic operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Per-direction rate `a_x sqrt(p q)` with the exact diffusivity ratio.
    #[default]
    ExactDiffusivity,
    /// Per-direction rate `N^2 a_x / 2` with `a_x = N^{-beta_star}` on slow bonds.
    Nominal,
}

/// Leftward/rightward exchange rates of one bond class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BondPair {
    /// Particle at `x+1` jumps to a hole at `x`.
    pub left: f64,
    /// Particle at `x` jumps to a hole at `x+1`.
    pub right: f64,
}

impl BondPair {
    pub fn symmetric_part(&self) -> f64 {
        self.right
    }

    pub fn asymmetric_part(&self) -> f64 {
        self.left - self.right
    }
}

/// Constants derived from validated parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub n: f64,
    pub beta_star: f64,
    /// Spin weight of the Cole–Hopf transform, `ln(p/q) / 2`.
    pub lambda: f64,
    /// Renormalization drift, `p + q - 2 sqrt(p q)`.
    pub nu: f64,
    /// `N - N^{1 - beta_star}`.
    pub c_n: f64,
    pub normal: BondPair,
    pub slow: BondPair,
    /// `sqrt(p q)` for normal bonds.
    pub sqrt_pq: f64,
    /// Exact diffusivity ratio per ring index.
    pub a_field: Vec<f64>,
    /// `1/2 - a/2` per ring index.
    pub abar_field: Vec<f64>,
    pub is_slow: Vec<bool>,
}

impl DerivedConstants {
    pub fn new(p: &ModelParams) -> Self {
        let n = p.n_f64();
        let b = p.beta_star();
        let n2 = n * n;
        let n32 = n * n.sqrt();
        let n2b = n.powf(2.0 - b);
        let normal = BondPair {
            left: 0.5 * (n2 + n32),
            right: 0.5 * n2,
        };
        let slow = BondPair {
            left: 0.5 * (n2b + n32),
            right: 0.5 * n2b,
        };
        // ln(p/q) = ln(1 + N^{-1/2}).
        let lambda = 0.5 * (1.0 / n.sqrt()).ln_1p();
        let sqrt_pq = (normal.left * normal.right).sqrt();
        let nu = {
            let d = normal.left.sqrt() - normal.right.sqrt();
            d * d
        };
        let a_slow = (slow.left * slow.right).sqrt() / sqrt_pq;
        let w = p.window();
        let mut is_slow = vec![false; w];
        for i in p.slow_indices() {
            is_slow[i] = true;
        }
        let a_field: Vec<f64> = is_slow.iter().map(|&s| if s { a_slow } else { 1.0 }).collect();
        let abar_field = a_field.iter().map(|a| 0.5 - 0.5 * a).collect();
        DerivedConstants {
            n,
            beta_star: b,
            lambda,
            nu,
            c_n: n - n.powf(1.0 - b),
            normal,
            slow,
            sqrt_pq,
            a_field,
            abar_field,
            is_slow,
        }
    }

    pub fn window(&self) -> usize {
        self.a_field.len()
    }

    pub fn bond(&self, index: usize) -> BondPair {
        if self.is_slow[index] {
            self.slow
        } else {
            self.normal
        }
    }

    /// The coefficient field `a_x = N^{-beta_star}` on slow bonds, 1 elsewhere.
    pub fn a_field_literal(&self) -> Vec<f64> {
        let a = self.n.powf(-self.beta_star);
        self.is_slow.iter().map(|&s| if s { a } else { 1.0 }).collect()
    }

    /// Per-direction jump rate of the inhomogeneous walk at each site.
    pub fn diffusivity(&self, convention: Convention) -> Vec<f64> {
        match convention {
            Convention::ExactDiffusivity => self.a_field.iter().map(|a| a * self.sqrt_pq).collect(),
            Convention::Nominal => {
                let half_n2 = 0.5 * self.n * self.n;
                self.a_field_literal().iter().map(|a| a * half_n2).collect()
            }
        }
    }

    /// Per-direction jump rate of the homogeneous walk.
    pub fn homogeneous_diffusivity(&self, convention: Convention) -> f64 {
        match convention {
            Convention::ExactDiffusivity => self.sqrt_pq,
            Convention::Nominal => 0.5 * self.n * self.n,
        }
    }

    /// Multiplicative jump of `Z` at the bond's left site for a leftward
    /// (`e^{-2 lambda}`) or rightward (`e^{2 lambda}`) exchange.
    pub fn jump_factor(&self, leftward: bool) -> f64 {
        if leftward {
            (-2.0 * self.lambda).exp()
        } else {
            (2.0 * self.lambda).exp()
        }
    }
}

/// Mesoscopic length and time scales.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleSchedule {
    pub ell_n: usize,
    pub m_n: usize,
    pub tau_n: f64,
    pub tau_n_star: f64,
    pub i_partial1_halfwidth: usize,
    pub eps: f64,
    pub delta: f64,
}

fn ceil_pow(n: f64, e: f64) -> usize {
    // Guard against N^e landing a hair above an integer.
    let v = n.powf(e);
    let r = v.round();
    if (v - r).abs() < 1e-9 * v.max(1.0) {
        r.max(1.0) as usize
    } else {
        v.ceil().max(1.0) as usize
    }
}

impl ScaleSchedule {
    pub fn build(p: &ModelParams, eps: f64, delta: f64) -> Result<Self> {
        if !(eps > 0.0 && delta > 0.0) {
            return Err(Error::InvalidParams(format!(
                "schedule exponents must be positive (eps = {eps}, delta = {delta})"
            )));
        }
        let n = p.n_f64();
        let b = p.beta_star();
        let ell_n = ceil_pow(n, 11.0 * b + eps);
        let m_exp = 0.5 - 28.0 * b + eps;
        let m_n = ceil_pow(n, m_exp);
        let eps_d1 = 6.0 * b + delta;
        let i_partial1_halfwidth = ceil_pow(n, 1.0 - eps_d1);
        let tau_n_star = n.powf(-2.0 + 31.0 * b);
        let tau_n = n.powf(-2.0 * eps_d1) * n.ln().max(1.0).powf(-100.0);
        if p.strict_mode() && (m_exp <= 0.0 || ell_n > m_n) {
            return Err(Error::InvalidParams(format!(
                "strict mode: two-block length m_N = {m_n} (exponent {m_exp:.4}) is below one-block length ell_N = {ell_n}"
            )));
        }
        Ok(ScaleSchedule {
            ell_n,
            m_n,
            tau_n,
            tau_n_star,
            i_partial1_halfwidth,
            eps,
            delta,
        })
    }
}

/// Spin configuration with entries in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpinConfig {
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some((i, s)) = spins.iter().enumerate().find(|(_, s)| **s != 1 && **s != -1) {
            return Err(Error::InvalidConfig(format!("entry {i} is {s}, not +1 or -1")));
        }
        Ok(SpinConfig { spins })
    }

    pub fn from_i64(values: &[i64]) -> Result<Self> {
        if let Some((i, s)) = values.iter().enumerate().find(|(_, s)| **s != 1 && **s != -1) {
            return Err(Error::InvalidConfig(format!("entry {i} is {s}, not +1 or -1")));
        }
        Ok(SpinConfig {
            spins: values.iter().map(|v| *v as i8).collect(),
        })
    }

    pub fn constant(len: usize, value: i8) -> Self {
        assert!(value == 1 || value == -1);
        SpinConfig {
            spins: vec![value; len],
        }
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.spins
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn total(&self) -> i64 {
        self.spins.iter().map(|s| *s as i64).sum()
    }

    pub fn into_vec(self) -> Vec<i8> {
        self.spins
    }
}

/// Product measure of fair spins on `len` sites.
pub fn sample_grand_canonical<R: Rng + ?Sized>(rng: &mut R, len: usize) -> SpinConfig {
    SpinConfig {
        spins: (0..len).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect(),
    }
}

/// Number of plus spins on the canonical hyperplane of density `rho`.
pub fn canonical_plus_count(len: usize, rho: f64) -> usize {
    let k = (len as f64 * (1.0 + rho) / 2.0).round_ties_even();
    k.clamp(0.0, len as f64) as usize
}

/// Uniform configuration on `len` sites with exactly
/// `round(len (1 + rho) / 2)` plus spins (ties to even).
pub fn sample_canonical<R: Rng + ?Sized>(rng: &mut R, len: usize, rho: f64) -> Result<SpinConfig> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParams(format!("density {rho} outside [-1, 1]")));
    }
    let k = canonical_plus_count(len, rho);
    let mut spins = vec![-1i8; len];
    for i in index::sample(rng, len, k) {
        spins[i] = 1;
    }
    Ok(SpinConfig { spins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Purpose};

    fn raw(n: u32, b: f64, slow: Vec<i64>, w: usize) -> RawParams {
        RawParams::new(n, b, slow, w)
    }

    #[test]
    fn pure_asep_is_valid() {
        let p = ModelParams::validate(&raw(16, 0.0, vec![], 33)).unwrap();
        assert!(p.slow_bonds().is_empty());
        let c = DerivedConstants::new(&p);
        assert!(c.a_field.iter().all(|a| *a == 1.0));
        assert_eq!(c.c_n, 0.0);
    }

    #[test]
    fn beta_out_of_range_rejected() {
        assert!(matches!(
            ModelParams::validate(&raw(16, 0.6, vec![], 33)),
            Err(Error::InvalidParams(_))
        ));
        assert!(ModelParams::validate(&raw(16, -0.1, vec![], 33)).is_err());
    }

    #[test]
    fn window_and_bond_checks() {
        assert!(ModelParams::validate(&raw(16, 0.1, vec![], 1)).is_err());
        assert!(ModelParams::validate(&raw(16, 0.1, vec![], 4)).is_err());
        assert!(ModelParams::validate(&raw(16, 0.1, vec![40], 33)).is_err());
        assert!(ModelParams::validate(&raw(16, 0.1, vec![16], 33)).is_ok());
    }

    #[test]
    fn strict_mode_rejects_unreachable_regime() {
        let mut r = raw(256, 0.25, vec![0], 513);
        r.strict_mode = true;
        assert!(ModelParams::validate(&r).is_err());
        r.strict_mode = false;
        let p = ModelParams::validate(&r).unwrap();
        assert!(!p.warnings().is_empty());
    }

    #[test]
    fn strict_mode_accepts_small_beta_regime() {
        let mut r = raw(1 << 20, 0.005, vec![0], 33);
        r.strict_mode = true;
        r.eps_star2 = 0.0;
        let p = ModelParams::validate(&r).unwrap();
        assert!(p.warnings().is_empty());
    }

    #[test]
    fn derived_constants_at_n16() {
        let p = ModelParams::validate(&raw(16, 0.25, vec![0], 33)).unwrap();
        let c = DerivedConstants::new(&p);
        let slow = p.ring().index(0);
        assert!((c.a_field_literal()[slow] - 0.5).abs() < 1e-15);
        assert!((c.c_n - 8.0).abs() < 1e-12);
        assert!((c.lambda - 0.5 * 1.25f64.ln()).abs() < 1e-15);
        assert!((c.lambda - 0.1115718).abs() < 1e-7);
        // Exact diffusivity ratio agrees with N^{-beta} up to O(N^{-1/2}).
        let rel = (c.a_field[slow] - 0.5).abs() / 0.5;
        assert!(rel < 16f64.powf(-0.5), "rel = {rel}");
        assert!(c.a_field[slow] < 1.0);
        // Rate invariants.
        for pair in [c.normal, c.slow] {
            assert!((pair.asymmetric_part() - 0.5 * 16f64.powf(1.5)).abs() < 1e-9);
        }
        assert_eq!(c.normal.right, 128.0);
        assert!((c.slow.right - 0.5 * 16f64.powf(1.75)).abs() < 1e-9);
        let abar_support: Vec<usize> = (0..33).filter(|i| c.abar_field[*i] != 0.0).collect();
        assert_eq!(abar_support, vec![slow]);
    }

    #[test]
    fn degenerate_slow_bond_at_beta_zero() {
        let p = ModelParams::validate(&raw(16, 0.0, vec![0, 3], 33)).unwrap();
        let c = DerivedConstants::new(&p);
        assert_eq!(c.normal, c.slow);
        assert!(c.a_field.iter().all(|a| (*a - 1.0).abs() < 1e-15));
        assert_eq!(c.c_n, 0.0);
    }

    #[test]
    fn schedule_examples() {
        let p = ModelParams::validate(&raw(1_000_000, 0.01, vec![], 33)).unwrap();
        let s = ScaleSchedule::build(&p, 0.001, 0.01).unwrap();
        assert_eq!(s.ell_n, 5);
        assert_eq!(s.m_n, 22);
        let p0 = ModelParams::validate(&raw(64, 0.0, vec![], 33)).unwrap();
        let s0 = ScaleSchedule::build(&p0, 0.01, 0.01).unwrap();
        assert!((s0.tau_n_star - 64f64.powi(-2)).abs() < 1e-18);
        let p2 = ModelParams::validate(&raw(100, 0.02, vec![], 33)).unwrap();
        let s2 = ScaleSchedule::build(&p2, 0.01, 0.01).unwrap();
        assert_eq!(s2.i_partial1_halfwidth, 55);
        assert!(ScaleSchedule::build(&p2, 0.0, 0.01).is_err());
    }

    #[test]
    fn schedule_in_strict_regime_orders_blocks() {
        let mut r = raw(1 << 16, 0.009, vec![0], 33);
        r.strict_mode = true;
        let p = ModelParams::validate(&r).unwrap();
        let s = ScaleSchedule::build(&p, 0.001, 0.01).unwrap();
        assert!(s.ell_n <= s.m_n);
        assert!(s.m_n >= 1);
    }

    #[test]
    fn spin_config_rejects_bad_values() {
        assert!(SpinConfig::new(vec![1, 0, -1]).is_err());
        assert!(SpinConfig::from_i64(&[1, -1, 2]).is_err());
        assert_eq!(SpinConfig::new(vec![1, -1, 1]).unwrap().total(), 1);
    }

    #[test]
    fn canonical_sampler_hits_hyperplane() {
        let mut rng = stream_rng(3, Purpose::Sampler, 0);
        for _ in 0..50 {
            assert_eq!(sample_canonical(&mut rng, 100, 0.0).unwrap().total(), 0);
        }
        let full = sample_canonical(&mut rng, 17, 1.0).unwrap();
        assert!(full.as_slice().iter().all(|s| *s == 1));
        assert_eq!(canonical_plus_count(5, 0.0), 2);
        assert_eq!(canonical_plus_count(7, 0.0), 4);
    }

    #[test]
    fn ring_labels_roundtrip() {
        let r = Ring::new(7);
        let labels: Vec<i64> = (0..7).map(|i| r.label(i)).collect();
        assert_eq!(labels, vec![-3, -2, -1, 0, 1, 2, 3]);
        for i in 0..7 {
            assert_eq!(r.index(r.label(i)), i);
        }
        assert_eq!(r.index(4), 0);
    }

    #[test]
    fn simulation_window_is_odd_and_large() {
        let w = simulation_window(64, 1.0, 3);
        assert_eq!(w % 2, 1);
        assert!(w as f64 >= 8.0 * 64.0 * 64f64.ln());
    }
}
