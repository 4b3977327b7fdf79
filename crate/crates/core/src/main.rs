use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slowbond::harness::{
    compare_run, heatkernel_run, orchestrate_ensemble, rerun, verify_run, write_report, KernelSection, ModelSection,
    OutputSection, RunConfig, RunManifest, SimSection, SuiteRequest, SUITES,
};
use slowbond::simulator::InitKind;
use slowbond::Error;

#[derive(Parser, Debug)]
#[command(
    name = "slowbond",
    version,
    about = "Slow-bond exclusion simulator and verification suites"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scaling parameter N.
    #[arg(long = "N")]
    n: Option<u32>,
    #[arg(long = "beta-star")]
    beta_star: Option<f64>,
    /// Ring width (odd).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an ensemble and write snapshots and Cole-Hopf fields.
    Simulate(Common),
    /// Write the slow-bond and homogeneous kernels over [0, t_final].
    Heatkernel(Common),
    /// Run a verification suite.
    Verify {
        /// One of: residual, kernel, oracle, duhamel, nash, perturb, sobolev,
        /// azuma, martingale, pathwise, kpz, blocks, regularity.
        suite: String,
        #[command(flatten)]
        common: Common,
    },
    /// Solve the auxiliary comparison fields for an ensemble.
    Compare(Common),
    /// Repeat a run from its manifest.json and check the outputs match.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate stats.csv files from run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn default_config() -> RunConfig {
    RunConfig {
        model: ModelSection {
            n: 16,
            beta_star: 0.25,
            eps_star2: 0.0,
            slow_bonds: vec![0],
            strict_mode: false,
        },
        sim: SimSection {
            window: None,
            t_final: 0.1,
            snapshot_dt: 0.01,
            replicas: 1,
            seed: 0,
        },
        init: InitKind::BernoulliHalf,
        kernel: KernelSection::default(),
        suites: vec![],
        output: OutputSection { dir: "out".into() },
    }
}

fn build_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => default_config(),
    };
    if let Some(n) = c.n {
        cfg.model.n = n;
    }
    if let Some(b) = c.beta_star {
        cfg.model.beta_star = b;
    }
    if let Some(w) = c.window {
        cfg.sim.window = Some(w);
        cfg.kernel.window = Some(w);
    }
    if let Some(s) = c.seed {
        cfg.sim.seed = s;
    }
    if let Some(r) = c.replicas {
        cfg.sim.replicas = r;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

enum Outcome {
    Ok,
    SuiteFailed,
}

fn dispatch(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Simulate(c) => {
            let m = orchestrate_ensemble(&build_config(&c)?)?;
            println!("wrote {} files", m.files.len());
        }
        Command::Heatkernel(c) => {
            heatkernel_run(&build_config(&c)?)?;
        }
        Command::Compare(c) => {
            compare_run(&build_config(&c)?)?;
        }
        Command::Verify { suite, common } => {
            if !SUITES.contains(&suite.as_str()) {
                return Err(Error::UnknownSuite(suite));
            }
            let (seed, dir) = match &common.config {
                Some(p) => {
                    let cfg = RunConfig::load(p)?;
                    (cfg.sim.seed, cfg.output.dir.join(&suite))
                }
                None => (0, PathBuf::from("out").join(&suite)),
            };
            let req = SuiteRequest {
                n: common.n,
                beta_star: common.beta_star,
                window: common.window,
                replicas: common.replicas,
                seed: common.seed.unwrap_or(seed),
            };
            let dir = common.out.clone().unwrap_or(dir);
            let (out, _) = verify_run(&suite, &req, &dir)?;
            for s in &out.stats {
                println!(
                    "{} {} N={} beta_star={} value={:e} bound={:e}",
                    if s.pass { "PASS" } else { "FAIL" },
                    s.name,
                    s.n,
                    s.beta_star,
                    s.value,
                    s.bound
                );
            }
            for n in &out.notes {
                println!("note: {n}");
            }
            if !out.pass() {
                return Ok(Outcome::SuiteFailed);
            }
        }
        Command::Rerun { manifest, out } => {
            let old = RunManifest::load(&manifest)?;
            let new = rerun(&old, &out)?;
            let mut same = true;
            for (name, hash) in &old.files {
                let ok = new.files.get(name) == Some(hash);
                same &= ok;
                println!("{} {name}", if ok { "same" } else { "DIFFERS" });
            }
            same &= new.files.len() == old.files.len();
            if !same {
                return Ok(Outcome::SuiteFailed);
            }
        }
        Command::Report { dirs, out } => {
            let rows = write_report(&dirs, &out)?;
            println!("{} rows", rows.len());
            if rows.iter().any(|r| !r.pass) {
                return Ok(Outcome::SuiteFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::SuiteFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
