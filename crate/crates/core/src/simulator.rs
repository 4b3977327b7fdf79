//! Event-driven simulation of the slow-bond exclusion process.
//!
//! Spin `+1` is a particle, `-1` a hole. On bond `(x, x+1)` a particle at
//! `x+1` jumps left onto a hole at `x` at the leftward rate and a particle at
//! `x` jumps right at the rightward rate. The two rates differ by the
//! asymmetric part `N^{3/2}/2`, which is what the scheduler exploits: every
//! discordant bond carries its symmetric rate, and `(-1, +1)` bonds carry the
//! asymmetric part on top.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_grand_canonical, DerivedConstants, ModelParams, Ring, SpinConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

/// One exchange: `bond` is the ring index of the bond's left site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub bond: u32,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub horizon: f64,
    /// Set when the event budget ran out before the horizon.
    pub truncated: bool,
}

/// Per-bond exchange rates.
#[derive(Debug, Clone, PartialEq)]
pub struct BondRates {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    sym_normal: f64,
    sym_slow: f64,
    asym: f64,
    is_slow: Vec<bool>,
}

impl BondRates {
    pub fn new(consts: &DerivedConstants) -> Self {
        Self::build(consts, false)
    }

    /// Rates with the asymmetric part removed; the product Bernoulli
    /// measure is then invariant.
    pub fn symmetric_only(consts: &DerivedConstants) -> Self {
        Self::build(consts, true)
    }

    fn build(consts: &DerivedConstants, symmetric: bool) -> Self {
        let asym = if symmetric {
            0.0
        } else {
            consts.normal.asymmetric_part()
        };
        let w = consts.window();
        let mut left = Vec::with_capacity(w);
        let mut right = Vec::with_capacity(w);
        for b in 0..w {
            let pair = consts.bond(b);
            right.push(pair.right);
            left.push(pair.right + asym);
        }
        BondRates {
            left,
            right,
            sym_normal: consts.normal.right,
            sym_slow: consts.slow.right,
            asym,
            is_slow: consts.is_slow.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    NarrowWedge,
    BernoulliHalf,
    Explicit { spins: Vec<i64> },
}

/// Initial configuration on a ring of width `window`.
pub fn init_config<R: Rng + ?Sized>(kind: &InitKind, window: usize, rng: &mut R) -> Result<SpinConfig> {
    let ring = Ring::new(window);
    match kind {
        InitKind::NarrowWedge => {
            SpinConfig::new((0..window).map(|i| if ring.label(i) >= 0 { 1 } else { -1 }).collect())
        }
        InitKind::BernoulliHalf => Ok(sample_grand_canonical(rng, window)),
        InitKind::Explicit { spins } => {
            if spins.len() != window {
                return Err(Error::InvalidConfig(format!(
                    "explicit config has {} sites, window is {window}",
                    spins.len()
                )));
            }
            SpinConfig::from_i64(spins)
        }
    }
}

/// Sum of currently feasible exchange rates, by direct enumeration.
pub fn event_rate_total(config: &SpinConfig, rates: &BondRates) -> f64 {
    let s = config.as_slice();
    let w = s.len();
    (0..w)
        .map(|b| {
            let (u, v) = (s[b], s[(b + 1) % w]);
            match (u, v) {
                (-1, 1) => rates.left[b],
                (1, -1) => rates.right[b],
                _ => 0.0,
            }
        })
        .sum()
}

/// Set of bond indices with O(1) insert, remove and uniform pick.
#[derive(Debug, Clone)]
struct IndexedSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl IndexedSet {
    fn new(capacity: usize) -> Self {
        IndexedSet {
            items: Vec::with_capacity(capacity),
            pos: vec![ABSENT; capacity],
        }
    }

    #[inline]
    fn set(&mut self, b: usize, member: bool) {
        let p = self.pos[b];
        if member && p == ABSENT {
            self.pos[b] = self.items.len() as u32;
            self.items.push(b as u32);
        } else if !member && p != ABSENT {
            let last = *self.items.last().unwrap();
            self.items.swap_remove(p as usize);
            if last as usize != b {
                self.pos[last as usize] = p;
            }
            self.pos[b] = ABSENT;
        }
    }

    #[inline]
    fn len(&self) -> usize {
        self.items.len()
    }

    #[inline]
    fn get(&self, k: usize) -> usize {
        self.items[k] as usize
    }
}

/// Compensated summation clock.
#[derive(Debug, Clone, Copy, Default)]
struct Clock {
    sum: f64,
    comp: f64,
}

impl Clock {
    fn at(t: f64) -> Self {
        Clock { sum: t, comp: 0.0 }
    }

    #[inline]
    fn peek(&self, dt: f64) -> f64 {
        let y = dt - self.comp;
        self.sum + y
    }

    #[inline]
    fn add(&mut self, dt: f64) {
        let y = dt - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Streaming simulation state. Exponential clocks are memoryless, so a
/// step that overshoots the requested stopping time can simply be discarded.
#[derive(Debug, Clone)]
pub struct Simulation {
    rates: BondRates,
    ring: Ring,
    spins: Vec<i8>,
    clock: Clock,
    flux: i64,
    origin_bond: usize,
    disc_normal: IndexedSet,
    disc_slow: IndexedSet,
    uphill: IndexedSet,
    events: usize,
}

impl Simulation {
    pub fn new(config: &SpinConfig, rates: BondRates) -> Result<Self> {
        let w = config.len();
        if w != rates.len() {
            return Err(Error::InvalidConfig(format!(
                "config has {w} sites, rates cover {} bonds",
                rates.len()
            )));
        }
        let ring = Ring::new(w);
        let mut sim = Simulation {
            ring,
            spins: config.as_slice().to_vec(),
            clock: Clock::default(),
            flux: 0,
            origin_bond: ring.center(),
            disc_normal: IndexedSet::new(w),
            disc_slow: IndexedSet::new(w),
            uphill: IndexedSet::new(w),
            events: 0,
            rates,
        };
        for b in 0..w {
            sim.refresh(b);
        }
        Ok(sim)
    }

    #[inline]
    fn refresh(&mut self, b: usize) {
        let u = self.spins[b];
        let v = self.spins[self.ring.next(b)];
        let disc = u != v;
        if self.rates.is_slow[b] {
            self.disc_slow.set(b, disc);
        } else {
            self.disc_normal.set(b, disc);
        }
        self.uphill.set(b, u == -1 && v == 1);
    }

    pub fn time(&self) -> f64 {
        self.clock.sum
    }

    pub fn flux(&self) -> i64 {
        self.flux
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn event_count(&self) -> usize {
        self.events
    }

    pub fn total_rate(&self) -> f64 {
        self.disc_normal.len() as f64 * self.rates.sym_normal
            + self.disc_slow.len() as f64 * self.rates.sym_slow
            + self.uphill.len() as f64 * self.rates.asym
    }

    /// Advance to the next event if it occurs no later than `until`;
    /// otherwise move the clock to `until` and return `None`.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R, until: f64) -> Option<Event> {
        let total = self.total_rate();
        if total <= 0.0 {
            self.clock = Clock::at(until.max(self.clock.sum));
            return None;
        }
        let e: f64 = 1.0 - rng.random::<f64>();
        let dt = -e.ln() / total;
        if self.clock.peek(dt) > until {
            self.clock = Clock::at(until);
            return None;
        }
        self.clock.add(dt);

        let mut x = rng.random::<f64>() * total;
        let a = self.disc_normal.len() as f64 * self.rates.sym_normal;
        let b = self.disc_slow.len() as f64 * self.rates.sym_slow;
        let (set, rate) = if x < a {
            (&self.disc_normal, self.rates.sym_normal)
        } else {
            x -= a;
            if x < b {
                (&self.disc_slow, self.rates.sym_slow)
            } else {
                x -= b;
                (&self.uphill, self.rates.asym)
            }
        };
        let k = ((x / rate) as usize).min(set.len() - 1);
        let bond = set.get(k);
        let direction = if self.spins[bond] == -1 {
            Direction::Left
        } else {
            Direction::Right
        };
        self.apply(bond, direction);
        Some(Event {
            time: self.clock.sum,
            bond: bond as u32,
            direction,
        })
    }

    fn apply(&mut self, bond: usize, direction: Direction) {
        let next = self.ring.next(bond);
        self.spins.swap(bond, next);
        if bond == self.origin_bond {
            self.flux += match direction {
                Direction::Left => 1,
                Direction::Right => -1,
            };
        }
        self.refresh(self.ring.prev(bond));
        self.refresh(bond);
        self.refresh(next);
        self.events += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub event_cap: usize,
    pub symmetric_only: bool,
    pub record_log: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            event_cap: 500_000_000,
            symmetric_only: false,
            record_log: true,
        }
    }
}

/// Spins and origin flux on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub times: Vec<f64>,
    pub spins: Vec<Vec<i8>>,
    pub flux: Vec<i64>,
}

impl TrajectorySample {
    pub fn window(&self) -> usize {
        self.spins.first().map_or(0, |s| s.len())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Snapshot grid `0, dt, 2 dt, ..., T` (the last step may be shorter).
pub fn snapshot_grid(t_final: f64, snapshot_dt: f64) -> Result<Vec<f64>> {
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidParams(format!("T_f = {t_final} must be positive")));
    }
    if !(snapshot_dt > 0.0) {
        return Err(Error::InvalidParams(format!(
            "snapshot_dt = {snapshot_dt} must be positive"
        )));
    }
    let k = (t_final / snapshot_dt - 1e-9).ceil().max(1.0) as usize;
    Ok((0..=k)
        .map(|i| if i == k { t_final } else { i as f64 * snapshot_dt })
        .collect())
}

/// Simulate from `config` up to `t_final`, recording snapshots every
/// `snapshot_dt`.
pub fn run<R: Rng + ?Sized>(
    config: &SpinConfig,
    params: &ModelParams,
    t_final: f64,
    snapshot_dt: f64,
    rng: &mut R,
    opts: &SimOptions,
) -> Result<(TrajectorySample, EventLog)> {
    if config.len() != params.window() {
        return Err(Error::InvalidConfig(format!(
            "config has {} sites, window is {}",
            config.len(),
            params.window()
        )));
    }
    let grid = snapshot_grid(t_final, snapshot_dt)?;
    let consts = DerivedConstants::new(params);
    let rates = if opts.symmetric_only {
        BondRates::symmetric_only(&consts)
    } else {
        BondRates::new(&consts)
    };
    let mut sim = Simulation::new(config, rates)?;
    let mut traj = TrajectorySample {
        times: Vec::with_capacity(grid.len()),
        spins: Vec::with_capacity(grid.len()),
        flux: Vec::with_capacity(grid.len()),
    };
    let mut log = EventLog {
        events: Vec::new(),
        horizon: t_final,
        truncated: false,
    };
    traj.times.push(0.0);
    traj.spins.push(sim.spins().to_vec());
    traj.flux.push(0);
    'outer: for &t in &grid[1..] {
        while let Some(ev) = sim.step(rng, t) {
            if opts.record_log {
                log.events.push(ev);
            }
            if sim.event_count() >= opts.event_cap {
                log.truncated = true;
                log.horizon = ev.time;
                log::warn!("event budget {} exhausted at t = {}", opts.event_cap, ev.time);
                break 'outer;
            }
        }
        traj.times.push(t);
        traj.spins.push(sim.spins().to_vec());
        traj.flux.push(sim.flux());
    }
    Ok((traj, log))
}

/// Apply a log to an initial configuration, checking feasibility of every
/// event. Returns the final spins and origin flux.
pub fn replay(initial: &[i8], events: &[Event]) -> Result<(Vec<i8>, i64)> {
    let w = initial.len();
    let ring = Ring::new(w);
    let origin = ring.center();
    let mut s = initial.to_vec();
    let mut flux = 0;
    let mut last = f64::NEG_INFINITY;
    for (k, ev) in events.iter().enumerate() {
        let b = ev.bond as usize;
        if b >= w {
            return Err(Error::InvalidConfig(format!("event {k}: bond {b} outside ring")));
        }
        if !(ev.time > last) {
            return Err(Error::InvalidConfig(format!("event {k}: time not increasing")));
        }
        last = ev.time;
        let n = ring.next(b);
        let ok = match ev.direction {
            Direction::Left => s[b] == -1 && s[n] == 1,
            Direction::Right => s[b] == 1 && s[n] == -1,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!("event {k} infeasible at bond {b}")));
        }
        s.swap(b, n);
        if b == origin {
            flux += if ev.direction == Direction::Left { 1 } else { -1 };
        }
    }
    Ok((s, flux))
}

/// Check every snapshot against a replay of the log.
pub fn verify_replay(traj: &TrajectorySample, log: &EventLog) -> Result<()> {
    let mut start = 0;
    let mut state = traj.spins[0].clone();
    let mut flux = 0;
    for (k, &t) in traj.times.iter().enumerate().skip(1) {
        let end = start + log.events[start..].partition_point(|e| e.time <= t);
        let (s, f) = replay(&state, &log.events[start..end])?;
        state = s;
        flux += f;
        if state != traj.spins[k] || flux != traj.flux[k] {
            return Err(Error::InvalidConfig(format!(
                "snapshot {k} at t = {t} disagrees with the replayed log"
            )));
        }
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpAudit {
    pub block_len: f64,
    pub blocks: usize,
    /// Largest number of events on any single bond within one block.
    pub max_bond_block_count: usize,
    /// Largest number of events anywhere on the ring within one block.
    pub max_block_count: usize,
    pub cap: f64,
    pub pass: bool,
}

/// Count events per bond in time blocks of length `T_f / N^2` and compare
/// the largest per-bond count against `10 log N`.
pub fn jump_size_audit(log: &EventLog, n: u32) -> JumpAudit {
    let nf = n as f64;
    let horizon = log.horizon.max(f64::MIN_POSITIVE);
    let block_len = horizon / (nf * nf);
    let blocks = (nf * nf).ceil().max(1.0) as usize;
    let cap = 10.0 * nf.ln().max(1.0);
    let mut max_bond = 0;
    let mut max_total = 0;
    let mut counts: std::collections::HashMap<u32, usize> = Default::default();
    let mut current = usize::MAX;
    let mut total = 0;
    for ev in &log.events {
        let blk = ((ev.time / block_len) as usize).min(blocks - 1);
        if blk != current {
            counts.clear();
            total = 0;
            current = blk;
        }
        let c = counts.entry(ev.bond).or_insert(0);
        *c += 1;
        max_bond = max_bond.max(*c);
        total += 1;
        max_total = max_total.max(total);
    }
    JumpAudit {
        block_len,
        blocks,
        max_bond_block_count: max_bond,
        max_block_count: max_total,
        cap,
        pass: (max_bond as f64) <= cap,
    }
}
