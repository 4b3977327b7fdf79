//! Run configuration, deterministic ensembles, CSV persistence, manifests
//! and report aggregation. The verification suites live in [`suites`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comparison::{pathwise_gaps, solve_aux_fields, AuxMethod};
use crate::error::{Error, Result};
use crate::gartner::build_ch_field;
use crate::heat_kernel::{homogeneous_kernel, solve_kernel, KernelMethod};
use crate::model::{simulation_window, Convention, DerivedConstants, ModelParams, RawParams};
use crate::rng::{replica_rng, stream_id, Purpose};
use crate::simulator::{init_config, run, InitKind, SimOptions};
use crate::stats::{pool_inverse_variance, Moments};

pub mod suites;

pub use suites::{run_suite, SuiteOutput, SuiteRequest, SUITES};

// ---------------------------------------------------------------------
// Configuration.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "N")]
    pub n: u32,
    pub beta_star: f64,
    #[serde(default)]
    pub eps_star2: f64,
    #[serde(default)]
    pub slow_bonds: Vec<i64>,
    #[serde(default)]
    pub strict_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Ring width; defaults to the simulation window for `(N, t_final)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub t_final: f64,
    pub snapshot_dt: f64,
    #[serde(default = "one")]
    pub replicas: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default)]
    pub method: KernelMethod,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    1e-12
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            window: None,
            method: KernelMethod::Uniformization,
            tol: default_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sim: SimSection,
    pub init: InitKind,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub suites: Vec<String>,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.suites {
            if !SUITES.contains(&s.as_str()) {
                return Err(Error::UnknownSuite(s.clone()));
            }
        }
        if self.sim.replicas == 0 {
            return Err(Error::Config("sim.replicas must be at least 1".into()));
        }
        if self.sim.seed > i64::MAX as u64 {
            return Err(Error::Config("sim.seed must fit in 63 bits".into()));
        }
        if !(self.kernel.tol > 0.0) {
            return Err(Error::Config("kernel.tol must be positive".into()));
        }
        self.model_params().map(|_| ())
    }

    pub fn window(&self) -> usize {
        self.sim
            .window
            .unwrap_or_else(|| simulation_window(self.model.n, self.sim.t_final, 65))
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let mut raw = RawParams::new(
            self.model.n,
            self.model.beta_star,
            self.model.slow_bonds.clone(),
            self.window(),
        );
        raw.eps_star2 = self.model.eps_star2;
        raw.strict_mode = self.model.strict_mode;
        ModelParams::validate(&raw)
    }
}

// ---------------------------------------------------------------------
// CSV tables.

/// Fixed formatting for floats: plain decimal in a comfortable range,
/// exponent form outside it. Both forms round-trip.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if x == 0.0 || (1e-5..1e15).contains(&x.abs()) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: Table) {
        debug_assert_eq!(self.header, other.header);
        self.rows.extend(other.rows);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(|s| s.to_string()).collect());
        }
        Ok(Table { header, rows })
    }
}

pub const STATS_HEADER: [&str; 7] = ["name", "N", "beta_star", "value", "stderr", "bound", "pass"];
pub const ESTIMATES_HEADER: [&str; 6] = ["name", "N", "beta_star", "constant", "exponent", "pass"];
pub const SNAPSHOTS_HEADER: [&str; 4] = ["replica", "time", "site", "spin"];
pub const FIELDS_HEADER: [&str; 5] = ["replica", "time", "site", "h", "Z"];
pub const KERNEL_HEADER: [&str; 6] = ["S", "T", "x", "y", "P", "Pbar"];
pub const BLOCKS_HEADER: [&str; 5] = ["replica", "time", "field_name", "anchor", "value"];
pub const COMPARE_HEADER: [&str; 7] = ["N", "beta_star", "T", "x", "statistic", "value", "stderr"];
pub const RESIDUAL_HEADER: [&str; 7] = ["N", "beta_star", "u", "v", "R", "Q_emp", "qtilde_emp"];

/// One verification statistic. `pass` always equals `|value| <= bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatRow {
    pub name: String,
    pub n: u32,
    pub beta_star: f64,
    pub value: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

impl StatRow {
    pub fn new(name: impl Into<String>, n: u32, beta_star: f64, value: f64, stderr: f64, bound: f64) -> Self {
        StatRow {
            name: name.into(),
            n,
            beta_star,
            value,
            stderr,
            bound,
            pass: value.abs() <= bound,
        }
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.n.to_string(),
            num(self.beta_star),
            num(self.value),
            num(self.stderr),
            num(self.bound),
            self.pass.to_string(),
        ]
    }
}

pub fn stats_table(rows: &[StatRow]) -> Table {
    let mut t = Table::new(&STATS_HEADER);
    for r in rows {
        t.push(r.cells());
    }
    t
}

pub fn estimates_table(rows: &[crate::heat_kernel::EstimateReport]) -> Table {
    let mut t = Table::new(&ESTIMATES_HEADER);
    for e in rows {
        t.push(vec![
            e.name.clone(),
            e.n.to_string(),
            num(e.beta_star),
            num(e.constant),
            num(e.exponent),
            e.pass.to_string(),
        ]);
    }
    t
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

pub fn read_stats(path: &Path) -> Result<Vec<StatRow>> {
    let t = Table::read(path)?;
    let schema = |reason: String| Error::Schema {
        path: path.to_path_buf(),
        reason,
    };
    if t.header != STATS_HEADER {
        return Err(schema(format!("header {:?}", t.header)));
    }
    let mut out = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        let f = |j: usize| parse_f64(&r[j]).ok_or_else(|| schema(format!("row {i}: bad number `{}`", r[j])));
        let n: u32 = r[1].parse().map_err(|_| schema(format!("row {i}: bad N `{}`", r[1])))?;
        let pass: bool = r[6]
            .parse()
            .map_err(|_| schema(format!("row {i}: bad pass `{}`", r[6])))?;
        let row = StatRow::new(r[0].clone(), n, f(2)?, f(3)?, f(4)?, f(5)?);
        if row.pass != pass {
            return Err(schema(format!("row {i}: pass column disagrees with value and bound")));
        }
        out.push(row);
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Manifests.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub replica: u64,
    pub master: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// `simulate`, `heatkernel`, `compare` or `verify:<suite>`.
    pub command: String,
    pub config: serde_json::Value,
    pub code_version: String,
    /// Stream construction: ChaCha8 keyed by the master seed, stream id
    /// `(purpose << 40) | index`.
    pub seed_scheme: String,
    pub seeds: Vec<SeedRecord>,
    pub wall_clock_seconds: f64,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    pub partial: bool,
    pub failed_replicas: Vec<usize>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            config,
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed_scheme: "chacha8(master), stream (purpose << 40) | index".into(),
            seeds: Vec::new(),
            wall_clock_seconds: 0.0,
            files: BTreeMap::new(),
            partial: false,
            failed_replicas: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    manifest.files.insert(name.into(), sha256_hex(bytes));
    Ok(())
}

fn replica_seeds(master: u64, replicas: usize) -> Vec<SeedRecord> {
    (0..replicas as u64)
        .map(|i| SeedRecord {
            replica: i,
            master,
            stream: stream_id(Purpose::Replica, i),
        })
        .collect()
}

// ---------------------------------------------------------------------
// Ensembles.

/// Merged outputs of a simulation ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub snapshots: Table,
    pub fields: Table,
    pub failed: Vec<usize>,
}

/// Run every replica of `config` on the rayon pool. Replica `i` draws from
/// stream `i` of the master seed, and rows are merged in replica order.
pub fn simulate_ensemble(config: &RunConfig) -> Result<EnsembleOutput> {
    config.validate()?;
    let params = config.model_params()?;
    let consts = DerivedConstants::new(&params);
    let results: Vec<Result<(Table, Table)>> = (0..config.sim.replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(config.sim.seed, i as u64);
            let init = init_config(&config.init, params.window(), &mut rng)?;
            let opts = SimOptions {
                record_log: false,
                ..Default::default()
            };
            let (traj, _) = run(
                &init,
                &params,
                config.sim.t_final,
                config.sim.snapshot_dt,
                &mut rng,
                &opts,
            )?;
            let ch = build_ch_field(&traj, &consts);
            let ring = params.ring();
            let mut snaps = Table::new(&SNAPSHOTS_HEADER);
            let mut fields = Table::new(&FIELDS_HEADER);
            for (k, t) in traj.times.iter().enumerate() {
                for x in 0..params.window() {
                    let site = ring.label(x).to_string();
                    snaps.push(vec![i.to_string(), num(*t), site.clone(), traj.spins[k][x].to_string()]);
                    fields.push(vec![i.to_string(), num(*t), site, num(ch.h[k][x]), num(ch.z[k][x])]);
                }
            }
            Ok((snaps, fields))
        })
        .collect();
    let mut out = EnsembleOutput {
        snapshots: Table::new(&SNAPSHOTS_HEADER),
        fields: Table::new(&FIELDS_HEADER),
        failed: Vec::new(),
    };
    let mut first_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((s, f)) => {
                out.snapshots.extend(s);
                out.fields.extend(f);
            }
            Err(e) => {
                log::error!("replica {i} failed: {e}");
                out.failed.push(i);
                first_err.get_or_insert(e);
            }
        }
    }
    if out.failed.len() == config.sim.replicas {
        return Err(first_err.expect("at least one failure"));
    }
    Ok(out)
}

/// `simulate`: run the ensemble and write snapshots, fields and manifest.
/// A worker failure still writes the surviving replicas, flags the
/// manifest as partial and returns an error.
pub fn orchestrate_ensemble(config: &RunConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    let mut m = RunManifest::new("simulate", serde_json::to_value(config)?);
    m.seeds = replica_seeds(config.sim.seed, config.sim.replicas);
    let out = simulate_ensemble(config)?;
    write_file(dir, "snapshots.csv", &out.snapshots.to_bytes()?, &mut m)?;
    write_file(dir, "fields.csv", &out.fields.to_bytes()?, &mut m)?;
    m.partial = !out.failed.is_empty();
    m.failed_replicas = out.failed.clone();
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(dir)?;
    if m.partial {
        return Err(Error::Config(format!(
            "replicas {:?} failed; partial results written",
            out.failed
        )));
    }
    Ok(m)
}

/// `heatkernel`: `P` and `Pbar` over `[0, t_final]` on the kernel window.
pub fn heatkernel_run(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    let mut m = RunManifest::new("heatkernel", serde_json::to_value(config)?);
    let mut params = config.model_params()?;
    if let Some(w) = config.kernel.window {
        params = params.with_window(w)?;
    }
    let consts = DerivedConstants::new(&params);
    let conv = Convention::ExactDiffusivity;
    let t = config.sim.t_final;
    let p = solve_kernel(&params, &consts, 0.0, t, config.kernel.method, conv)?;
    let pbar = homogeneous_kernel(&consts, 0.0, t, conv)?;
    let ring = params.ring();
    let mut table = Table::new(&KERNEL_HEADER);
    for x in 0..params.window() {
        for y in 0..params.window() {
            table.push(vec![
                num(0.0),
                num(t),
                ring.label(x).to_string(),
                ring.label(y).to_string(),
                num(p.get(x, y)),
                num(pbar.get(x, y)),
            ]);
        }
    }
    write_file(dir, "kernel.csv", &table.to_bytes()?, &mut m)?;
    let dev = p.max_row_sum_deviation();
    let stats = vec![
        StatRow::new(
            "kernel_row_sum",
            params.n(),
            params.beta_star(),
            dev,
            0.0,
            config.kernel.tol.max(1e-12),
        ),
        StatRow::new(
            "kernel_min_entry",
            params.n(),
            params.beta_star(),
            p.min_entry().min(0.0),
            0.0,
            0.0,
        ),
    ];
    write_file(dir, "stats.csv", &stats_table(&stats).to_bytes()?, &mut m)?;
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(dir)?;
    Ok(m)
}

/// `compare`: aux fields of every replica, summarized per snapshot and
/// label as ensemble means of `Phi1`, `Phi2` with their standard errors.
pub fn compare_run(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    let mut m = RunManifest::new("compare", serde_json::to_value(config)?);
    m.seeds = replica_seeds(config.sim.seed, config.sim.replicas);
    let params = config.model_params()?;
    let consts = DerivedConstants::new(&params);
    let method = AuxMethod::GapForm {
        step_fraction: 0.1,
        half_width: params.window() / 4,
    };
    let runs: Vec<Result<crate::comparison::AuxFields>> = (0..config.sim.replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(config.sim.seed, i as u64);
            let init = init_config(&config.init, params.window(), &mut rng)?;
            let (traj, log) = run(
                &init,
                &params,
                config.sim.t_final,
                config.sim.snapshot_dt,
                &mut rng,
                &SimOptions::default(),
            )?;
            solve_aux_fields(init.as_slice(), &log, &consts, &traj.times, method, None)
        })
        .collect();
    let runs: Vec<_> = runs.into_iter().collect::<Result<_>>()?;
    let mut table = Table::new(&COMPARE_HEADER);
    let first = &runs[0];
    let n = params.n();
    let b = num(params.beta_star());
    for (k, t) in first.times.iter().enumerate() {
        for (j, label) in first.labels.iter().enumerate() {
            for (name, pick) in [
                (
                    "phi1",
                    (|a: &crate::comparison::AuxFields, k: usize, j: usize| a.phi1[k][j])
                        as fn(&_, usize, usize) -> f64,
                ),
                ("phi2", |a, k, j| a.phi2[k][j]),
            ] {
                let mut mo = Moments::default();
                for r in &runs {
                    mo.push(pick(r, k, j));
                }
                table.push(vec![
                    n.to_string(),
                    b.clone(),
                    num(*t),
                    label.to_string(),
                    name.into(),
                    num(mo.mean()),
                    num(mo.stderr()),
                ]);
            }
        }
    }
    let mut norms = Table::new(&COMPARE_HEADER);
    for name in ["norm_phi1", "norm_phi2"] {
        let mut mo = Moments::default();
        for r in &runs {
            let g = pathwise_gaps(r, params.n_f64(), 1.0);
            mo.push(if name == "norm_phi1" { g.phi1 } else { g.phi2 });
        }
        norms.push(vec![
            n.to_string(),
            b.clone(),
            num(config.sim.t_final),
            "0".into(),
            name.into(),
            num(mo.mean()),
            num(mo.stderr()),
        ]);
    }
    table.extend(norms);
    write_file(dir, "compare.csv", &table.to_bytes()?, &mut m)?;
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(dir)?;
    Ok(m)
}

/// `verify <suite>`: run one suite and write its CSVs and manifest.
pub fn verify_run(suite: &str, req: &SuiteRequest, dir: &Path) -> Result<(SuiteOutput, RunManifest)> {
    let start = Instant::now();
    fs::create_dir_all(dir)?;
    let mut m = RunManifest::new(&format!("verify:{suite}"), serde_json::to_value(req)?);
    let out = run_suite(suite, req)?;
    m.seeds = out.seeds.clone();
    write_file(dir, "stats.csv", &stats_table(&out.stats).to_bytes()?, &mut m)?;
    write_file(
        dir,
        "estimates.csv",
        &estimates_table(&out.estimates).to_bytes()?,
        &mut m,
    )?;
    for (name, t) in &out.tables {
        write_file(dir, name, &t.to_bytes()?, &mut m)?;
    }
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(dir)?;
    Ok((out, m))
}

/// Re-execute the run recorded in `manifest` into `dir`.
pub fn rerun(manifest: &RunManifest, dir: &Path) -> Result<RunManifest> {
    if let Some(suite) = manifest.command.strip_prefix("verify:") {
        let req: SuiteRequest = serde_json::from_value(manifest.config.clone())?;
        return verify_run(suite, &req, dir).map(|r| r.1);
    }
    let mut cfg: RunConfig = serde_json::from_value(manifest.config.clone())?;
    cfg.output.dir = dir.to_path_buf();
    match manifest.command.as_str() {
        "simulate" => orchestrate_ensemble(&cfg),
        "heatkernel" => heatkernel_run(&cfg),
        "compare" => compare_run(&cfg),
        other => Err(Error::Config(format!("unknown manifest command `{other}`"))),
    }
}

// ---------------------------------------------------------------------
// Report.

/// Merge `stats.csv` from each run directory. Rows sharing
/// `(name, N, beta_star)` are pooled by inverse variance; the merged bound
/// is the smallest of the merged bounds.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<StatRow>> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut groups: BTreeMap<(String, u32, String), Vec<StatRow>> = BTreeMap::new();
    for d in dirs {
        let path = d.join("stats.csv");
        if !path.exists() {
            return Err(Error::Config(format!("{} has no stats.csv", d.display())));
        }
        for r in read_stats(&path)? {
            groups
                .entry((r.name.clone(), r.n, num(r.beta_star)))
                .or_default()
                .push(r);
        }
    }
    Ok(groups
        .into_values()
        .map(|rows| {
            if rows.len() == 1 {
                return rows.into_iter().next().unwrap();
            }
            let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.value, r.stderr)).collect();
            let (value, stderr) = pool_inverse_variance(&pairs);
            let bound = rows.iter().map(|r| r.bound).fold(f64::INFINITY, f64::min);
            StatRow::new(rows[0].name.clone(), rows[0].n, rows[0].beta_star, value, stderr, bound)
        })
        .collect())
}

pub fn write_report(dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<StatRow>> {
    let rows = report(dirs)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("stats.csv"), stats_table(&rows).to_bytes()?)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_config(dir: &Path) -> RunConfig {
        RunConfig {
            model: ModelSection {
                n: 8,
                beta_star: 0.25,
                eps_star2: 0.0,
                slow_bonds: vec![0],
                strict_mode: false,
            },
            sim: SimSection {
                window: Some(21),
                t_final: 0.05,
                snapshot_dt: 0.01,
                replicas: 3,
                seed: 42,
            },
            init: InitKind::BernoulliHalf,
            kernel: KernelSection::default(),
            suites: vec!["residual".into()],
            output: OutputSection { dir: dir.to_path_buf() },
        }
    }

    #[test]
    fn config_round_trip() {
        let c = sample_config(Path::new("out"));
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let mut e = c.clone();
        e.init = InitKind::Explicit { spins: vec![1, -1, 1] };
        e.sim.window = None;
        let back = toml::from_str::<RunConfig>(&e.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn config_rejects_unknown_suite_and_missing_seed() {
        let c = sample_config(Path::new("out"));
        let mut bad = c.clone();
        bad.suites.push("nope".into());
        assert!(matches!(bad.validate(), Err(Error::UnknownSuite(_))));
        let text = c.to_toml_string().unwrap().replace("seed = 42\n", "");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = c.to_toml_string().unwrap() + "\n[extra]\nx = 1\n";
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn num_round_trips() {
        for x in [0.0, 1.0, -2.5, 1e-300, 123456.789, 6.02e23, 1.0 / 3.0, -7e-6] {
            assert_eq!(parse_f64(&num(x)).unwrap(), x);
        }
        assert!(parse_f64(&num(f64::NAN)).unwrap().is_nan());
    }

    #[test]
    fn ensemble_single_replica_matches_direct_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = sample_config(dir.path());
        c.sim.replicas = 1;
        let ens = simulate_ensemble(&c).unwrap();
        let p = c.model_params().unwrap();
        let mut rng = replica_rng(42, 0);
        let init = init_config(&c.init, 21, &mut rng).unwrap();
        let (traj, _) = run(&init, &p, 0.05, 0.01, &mut rng, &SimOptions::default()).unwrap();
        let last = traj.len() - 1;
        let tail: Vec<i8> = ens.snapshots.rows[ens.snapshots.rows.len() - 21..]
            .iter()
            .map(|r| r[3].parse().unwrap())
            .collect();
        assert_eq!(tail, traj.spins[last]);
    }

    #[test]
    fn ensemble_independent_of_worker_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = sample_config(dir.path());
        c.sim.replicas = 8;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = one.install(|| simulate_ensemble(&c)).unwrap();
        let b = many.install(|| simulate_ensemble(&c)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_pools_duplicate_keys() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = vec![StatRow::new("m", 32, 0.0, 1.0, 1.0, 3.0)];
        let b = vec![
            StatRow::new("m", 32, 0.0, 3.0, 1.0, 3.0),
            StatRow::new("k", 8, 0.1, 0.5, 0.0, 1.0),
        ];
        fs::write(d1.path().join("stats.csv"), stats_table(&a).to_bytes().unwrap()).unwrap();
        fs::write(d2.path().join("stats.csv"), stats_table(&b).to_bytes().unwrap()).unwrap();
        let rows = report(&[d1.path().into(), d2.path().into()]).unwrap();
        assert_eq!(rows.len(), 2);
        let m = rows.iter().find(|r| r.name == "m").unwrap();
        assert!((m.value - 2.0).abs() < 1e-15);
        assert!((m.stderr - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(m.pass);
    }

    #[test]
    fn report_rejects_schema_mismatch() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("stats.csv"), "name,N,value\nx,1,2\n").unwrap();
        assert!(matches!(report(&[d.path().into()]), Err(Error::Schema { .. })));
        fs::write(
            d.path().join("stats.csv"),
            "name,N,beta_star,value,stderr,bound,pass\nx,1,0,5,0,1,true\n",
        )
        .unwrap();
        assert!(matches!(report(&[d.path().into()]), Err(Error::Schema { .. })));
    }

    #[test]
    fn report_of_empty_stats_is_empty() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("stats.csv"), stats_table(&[]).to_bytes().unwrap()).unwrap();
        assert!(report(&[d.path().into()]).unwrap().is_empty());
    }
}
