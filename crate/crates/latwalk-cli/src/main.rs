//! Command-line interface for the lattice-walk toolkit: exact potential and
//! harmonic quantities, killed-walk evolution, Monte Carlo estimators, and
//! the exact-vs-predicted comparison harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use latwalk_core::harness::{run_experiment, ExperimentConfig, LawId};
use latwalk_core::kernels::Window;
use latwalk_core::model::{LatticePoint, StepLaw};
use latwalk_core::montecarlo::{
    mc_confinement, mc_escape, mc_overshoot, EstimateWithCI, SamplerConfig,
};
use latwalk_core::{
    escape_probability, evolve_killed, Error, KilledSystem, KillingSet, PotentialTable, Result,
};

#[derive(Parser)]
#[command(
    name = "latwalk",
    version,
    about = "Potential theory of two-dimensional lattice random walks, \
             exactly and by simulation",
    after_help = "Set LATWALK_THREADS to cap worker threads (default: all cores)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Potential-kernel value a(x) of a step law
    Potential {
        #[command(flatten)]
        law: LawArg,
        /// Evaluation point, as "x1,x2"
        #[arg(long, value_parser = parse_point)]
        x: LatticePoint,
        /// Absolute tolerance of the quadrature
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Table cache file: loaded when present, written after computing
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Equilibrium weight u_A(x), hitting distribution, and the
    /// hitting measure from infinity of a killing set
    U {
        #[command(flatten)]
        law: LawArg,
        #[command(flatten)]
        set: SetArg,
        /// Starting point, as "x1,x2"
        #[arg(long, value_parser = parse_point)]
        x: LatticePoint,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Evolve the walk killed on a set and write the time-n field as CSV
    Killed {
        #[command(flatten)]
        law: LawArg,
        #[command(flatten)]
        set: SetArg,
        /// Starting point, as "x1,x2"
        #[arg(long, value_parser = parse_point)]
        start: LatticePoint,
        /// Number of steps
        #[arg(long)]
        n: u64,
        /// Window margin constant (default 8.5; smaller is faster but leaks)
        #[arg(long = "window-c")]
        window_c: Option<f64>,
        /// Output CSV path (columns x1,x2,value over the window disc)
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the escape problem to radius R and write the field as JSON
    Escape {
        #[command(flatten)]
        law: LawArg,
        #[command(flatten)]
        set: SetArg,
        /// Escape radius
        #[arg(long = "R")]
        r: i64,
        /// Output JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo estimators with deterministic seeding
    Mc {
        #[command(subcommand)]
        which: McCmd,
    },
    /// Run a configured comparison experiment and persist its bundle
    Verify {
        /// Comparison-law identifier; overrides the config's law_id
        #[arg(long = "law-id")]
        law_id: Option<String>,
        /// Experiment config JSON
        #[arg(long)]
        config: PathBuf,
        /// Bundle output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Summarize a persisted experiment bundle
    Report {
        /// Bundle directory written by `verify`
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct LawArg {
    /// Builtin step-law name (srw, lazy-srw, kings, longstep) or a law JSON
    /// file path
    #[arg(long)]
    law: String,
}

impl LawArg {
    fn resolve(&self) -> Result<StepLaw> {
        StepLaw::resolve(&self.law)
    }
}

#[derive(Args)]
struct SetArg {
    /// Killing set, as "x1,x2;x1,x2;..."
    #[arg(long)]
    set: String,
}

impl SetArg {
    fn parse(&self) -> Result<KillingSet> {
        KillingSet::parse(&self.set)
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Truncation radius for the harmonic solves (default 256)
    #[arg(long = "solve-radius")]
    solve_radius: Option<i64>,
    /// Absolute tolerance of the potential-kernel quadrature
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Subcommand)]
enum McCmd {
    /// Probability of escaping to |S| >= R before hitting the set
    Escape {
        #[command(flatten)]
        law: LawArg,
        #[command(flatten)]
        set: SetArg,
        /// Starting point, as "x1,x2"
        #[arg(long, value_parser = parse_point)]
        x: LatticePoint,
        /// Escape radius
        #[arg(long = "R")]
        r: i64,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Mean relative overshoot (|S| - R) / R when first leaving the R-disc
    Overshoot {
        #[command(flatten)]
        law: LawArg,
        /// Starting point, as "x1,x2"
        #[arg(long, value_parser = parse_point)]
        x: LatticePoint,
        /// Disc radius
        #[arg(long = "R")]
        r: i64,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Probability the first coordinate stays inside (-R, R) for n steps
    Confine {
        #[command(flatten)]
        law: LawArg,
        /// Strip half-width
        #[arg(long = "R")]
        r: i64,
        /// Number of steps
        #[arg(long)]
        n: u64,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
}

#[derive(Args)]
struct SamplerArgs {
    /// Seed of the deterministic replica streams
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of replicas
    #[arg(long, default_value_t = 1_000_000)]
    replicas: u64,
    /// Per-replica step cap
    #[arg(long = "max-steps")]
    max_steps: Option<u64>,
    /// Emit a single-line JSON object instead of text
    #[arg(long)]
    json: bool,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        let cfg = SamplerConfig::new(self.seed, self.replicas);
        match self.max_steps {
            Some(m) => cfg.with_max_steps(m),
            None => cfg,
        }
    }

    fn emit(&self, what: &str, est: &EstimateWithCI) {
        if self.json {
            let line = json!({
                "estimator": what,
                "mean": est.mean,
                "std_error": est.std_error,
                "replicas_used": est.replicas_used,
                "truncated_fraction": est.truncated_fraction,
                "seed": self.seed,
                "replicas": self.replicas,
            });
            println!("{line}");
        } else {
            println!(
                "{what}: {:.6} +/- {:.6} ({} replicas used, truncated fraction {:.2e})",
                est.mean, est.std_error, est.replicas_used, est.truncated_fraction
            );
        }
    }
}

fn parse_point(s: &str) -> std::result::Result<LatticePoint, String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"x1,x2\", got {s:?}"))?;
    let x1 = a.trim().parse::<i64>().map_err(|e| e.to_string())?;
    let x2 = b.trim().parse::<i64>().map_err(|e| e.to_string())?;
    Ok(LatticePoint { x1, x2 })
}

fn point_key(p: LatticePoint) -> String {
    format!("{},{}", p.x1, p.x2)
}

fn init_threads() {
    if let Ok(text) = std::env::var("LATWALK_THREADS") {
        if let Ok(k) = text.trim().parse::<usize>() {
            if k >= 1 {
                // Ignore failure: the global pool can only be set once.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Potential { law, x, tol, cache } => cmd_potential(&law, x, tol, cache.as_deref()),
        Cmd::U { law, set, x, solve } => cmd_u(&law, &set, x, &solve),
        Cmd::Killed {
            law,
            set,
            start,
            n,
            window_c,
            out,
        } => cmd_killed(&law, &set, start, n, window_c, &out),
        Cmd::Escape { law, set, r, out } => cmd_escape(&law, &set, r, &out),
        Cmd::Mc { which } => cmd_mc(which),
        Cmd::Verify {
            law_id,
            config,
            out,
        } => cmd_verify(law_id.as_deref(), &config, &out),
        Cmd::Report { dir } => cmd_report(&dir),
    }
}

fn cmd_potential(
    law: &LawArg,
    x: LatticePoint,
    tol: f64,
    cache: Option<&Path>,
) -> Result<ExitCode> {
    let law = law.resolve()?;
    let table = match cache {
        Some(path) if path.exists() => PotentialTable::load(path, &law)?,
        _ => PotentialTable::new(&law, tol)?,
    };
    let value = table.a(x)?;
    if let Some(path) = cache {
        table.save(path)?;
    }
    println!("{value:.12}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_u(law: &LawArg, set: &SetArg, x: LatticePoint, solve: &SolveArgs) -> Result<ExitCode> {
    let law = law.resolve()?;
    let set = set.parse()?;
    let table = Arc::new(PotentialTable::new(&law, solve.tol)?);
    let sys = match solve.solve_radius {
        Some(r) => KilledSystem::with_solve_radius(set, table, r)?,
        None => KilledSystem::new(set, table)?,
    };

    let u_a = sys.u(x)?;
    let hitting = sys.hitting_distribution(x, None)?;
    let mu = sys.mu_from_infinity()?;
    let mut hitting_map = Map::new();
    let mut mu_map = Map::new();
    for (i, &xi) in sys.set().points().iter().enumerate() {
        hitting_map.insert(point_key(xi), json!(hitting[i]));
        mu_map.insert(point_key(xi), json!(mu[i]));
    }
    let out = json!({
        "uA": u_a,
        "hitting": hitting_map,
        "mu": mu_map,
        "tolerances": {
            "solver": sys.solver_tolerance(),
            "potential": sys.table().abs_error(),
        },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_killed(
    law: &LawArg,
    set: &SetArg,
    start: LatticePoint,
    n: u64,
    window_c: Option<f64>,
    out: &Path,
) -> Result<ExitCode> {
    let law = law.resolve()?;
    let set = set.parse()?;
    let table = Arc::new(PotentialTable::new(&law, 1e-10)?);
    let sys = KilledSystem::new(set, table)?;
    let window = window_c
        .map(|c| {
            if !(c > 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "window constant must be positive, got {c}"
                )));
            }
            Ok(Window::new(start, sys.law().window_radius_with(start, n, c)))
        })
        .transpose()?;
    let slice = evolve_killed(&sys, start, n, window)?;

    let mut csv = String::from("x1,x2,value\n");
    let (center, radius) = (slice.slice.center, slice.slice.radius);
    for d2 in -radius..=radius {
        for d1 in -radius..=radius {
            if d1 * d1 + d2 * d2 < radius * radius {
                let z = LatticePoint {
                    x1: center.x1 + d1,
                    x2: center.x2 + d2,
                };
                csv.push_str(&format!("{},{},{:.17e}\n", z.x1, z.x2, slice.value(z)));
            }
        }
    }
    std::fs::write(out, csv)?;

    let summary = json!({
        "n": n,
        "window_center": [center.x1, center.x2],
        "window_radius": radius,
        "live_mass": slice.live_mass(),
        "killed_mass": slice.killed_mass,
        "leakage": slice.leakage(),
        "out": out.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_escape(law: &LawArg, set: &SetArg, r: i64, out: &Path) -> Result<ExitCode> {
    let law = law.resolve()?;
    let set = set.parse()?;
    let table = Arc::new(PotentialTable::new(&law, 1e-10)?);
    let sys = KilledSystem::new(set, table)?;
    let solve = escape_probability(&sys, r)?;

    let values: Vec<Value> = solve
        .iter()
        .map(|(z, v)| json!([z.x1, z.x2, v]))
        .collect();
    let doc = json!({
        "law_hash": sys.law().hash(),
        "set": sys.set().points().iter().map(|&p| [p.x1, p.x2]).collect::<Vec<_>>(),
        "R": r,
        "residual": solve.residual(),
        "sweeps": solve.sweeps(),
        "values": values,
    });
    std::fs::write(out, serde_json::to_string(&doc)? + "\n")?;

    let summary = json!({
        "R": r,
        "residual": solve.residual(),
        "sweeps": solve.sweeps(),
        "cells": solve.iter().count(),
        "out": out.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_mc(which: McCmd) -> Result<ExitCode> {
    match which {
        McCmd::Escape {
            law,
            set,
            x,
            r,
            sampler,
        } => {
            let law = law.resolve()?;
            let set = set.parse()?;
            let table = Arc::new(PotentialTable::new(&law, 1e-10)?);
            let sys = KilledSystem::new(set, table)?;
            let est = mc_escape(&sys, x, r, &sampler.config())?;
            sampler.emit("escape", &est);
        }
        McCmd::Overshoot { law, x, r, sampler } => {
            let law = law.resolve()?;
            let est = mc_overshoot(&law, x, r, &sampler.config())?;
            sampler.emit("overshoot", &est);
        }
        McCmd::Confine { law, r, n, sampler } => {
            let law = law.resolve()?;
            let est = mc_confinement(&law, r, n, &sampler.config())?;
            sampler.emit("confine", &est);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(law_id: Option<&str>, config_path: &Path, out: &Path) -> Result<ExitCode> {
    let mut config = ExperimentConfig::from_json_file(config_path)?;
    if let Some(id) = law_id {
        // Validate eagerly so an unknown id fails before any computation.
        LawId::from_str(id)?;
        config.law_id = id.to_string();
    }
    let report = run_experiment(&config, out)?;
    println!(
        "{}: {} rows ({} skipped), final ratio {:.4} at scale {}",
        report.law,
        report.rows.len(),
        report.skipped.len(),
        report.final_row().map_or(f64::NAN, |r| r.ratio),
        report.final_row().map_or(0, |r| r.scale),
    );
    for row in &report.rows {
        println!(
            "  scale {:>6}  exact {:.6e}  predicted {:.6e}  ratio {:.4}",
            row.scale, row.exact, row.predicted, row.ratio
        );
    }
    for skip in &report.skipped {
        println!("  scale {:>6}  skipped: {}", skip.scale, skip.reason);
    }
    println!("bundle written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(dir: &Path) -> Result<ExitCode> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Value = serde_json::from_str(&manifest_text)?;
    println!("bundle {}", dir.display());
    println!(
        "  law {}  status {}  seed {}  threads {}  wall {} ms",
        manifest["law_id"].as_str().unwrap_or("?"),
        manifest["status"].as_str().unwrap_or("?"),
        manifest["seed"],
        manifest["threads"],
        manifest["wall_ms"],
    );
    if let Some(err) = manifest["error"].as_str() {
        println!("  error: {err}");
    }
    let csv_path = dir.join("report.csv");
    if csv_path.exists() {
        print!("{}", std::fs::read_to_string(csv_path)?);
    }
    if manifest["status"].as_str() == Some("ok") {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}
