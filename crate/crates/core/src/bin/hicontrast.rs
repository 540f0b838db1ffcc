use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use hicontrast::geometry::{estimate_fractions, generate_environment};
use hicontrast::harness::{
    fine_layouts, prepare, run_convergence_experiment, run_corrector_diagnostics, run_fine,
    run_limit, run_spectrum_experiment, Config, ConservationCheck, Setup,
};
use hicontrast::io::{
    band_rows, mode_rows, write_csv, write_environment, write_field, write_mode_basis, write_state,
};
use hicontrast::Result;

const MASS_DRIFT_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(
    name = "hicontrast",
    version,
    about = "High-contrast diffusion homogenization lab"
)]
struct Cli {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(short, long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the environment and write its manifest.
    GenEnv,
    /// Dirichlet modes of every catalog domain.
    Modes,
    /// Corrector and effective matrix.
    Theta,
    /// Fine-grid evolution for every epsilon of the sweep.
    SolveFine,
    /// Evolution of the limit system.
    SolveLimit,
    /// Fine against limit semigroup across the epsilon sweep.
    Compare,
    /// Band structure of the limit operator.
    Spectrum,
    /// Corrector norm trends.
    Diagnostics,
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    config: &'a Config,
    gates: Vec<(String, bool)>,
    passed: bool,
}

struct Run {
    cfg: Config,
    hash: String,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self, command: &str, gates: Vec<(String, bool)>) -> Result<bool> {
        let passed = gates.iter().all(|(_, ok)| *ok);
        for (name, ok) in &gates {
            println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
        }
        let manifest = RunManifest {
            command,
            config_hash: self.hash.clone(),
            config: &self.cfg,
            gates,
            passed,
        };
        fs::write(
            self.path(&format!("{command}.manifest.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(passed)
    }
}

fn gen_env(run: &Run) -> Result<bool> {
    let e = &run.cfg.environment;
    let (env, catalog) = generate_environment(e.lattice_size, e.p, e.seed, e.volume_cap)?;
    let fractions = estimate_fractions(&env, &catalog);
    write_environment(&run.out, &env, &catalog, &fractions)?;
    println!(
        "{} inclusions of {} types, alpha0 = {}",
        env.inclusions.len(),
        catalog.domains.len(),
        fractions.alpha0
    );
    run.finish("gen-env", vec![])
}

fn modes(run: &Run, setup: &Setup) -> Result<bool> {
    let dir = run.path("modes");
    fs::create_dir_all(&dir)?;
    for b in &setup.bases {
        write_mode_basis(&dir.join(format!("domain_{}", b.domain_id)), b)?;
    }
    write_csv(&run.path("modes.csv"), &run.hash, &mode_rows(&setup.bases))?;
    let bessel = setup
        .bases
        .iter()
        .all(|b| b.bessel_sum() <= b.area * (1.0 + 1e-10));
    run.finish("modes", vec![("bessel inequality".into(), bessel)])
}

fn theta(run: &Run, setup: &Setup) -> Result<bool> {
    let t = &setup.theta;
    fs::write(run.path("theta.json"), serde_json::to_string_pretty(t)?)?;
    println!("theta = {:?}, eigenvalues = {:?}", t.theta, t.eigenvalues);
    let a0 = setup.fractions.alpha0;
    run.finish(
        "theta",
        vec![
            ("theta symmetric".into(), t.asymmetry < 1e-8),
            (
                "theta eigenvalues in (0, alpha0]".into(),
                t.eigenvalues[0] > 0.0 && t.eigenvalues[1] <= a0 * (1.0 + 1e-12),
            ),
        ],
    )
}

fn solve_fine(run: &Run, setup: &Setup) -> Result<bool> {
    let layouts = fine_layouts(&run.cfg, setup, &run.cfg.convergence.eps_list)?;
    let mut gates = Vec::new();
    for layout in &layouts {
        let evo = run_fine(&run.cfg, setup, layout)?;
        let tag = format!("fine_n{}", layout.n);
        write_field(&run.path(&tag), &evo.field)?;
        write_csv(&run.path(&format!("{tag}_log.csv")), &run.hash, &evo.log)?;
        let check = ConservationCheck::from_log(&evo.log);
        gates.push((
            format!("fine conservation, epsilon = {}", layout.epsilon),
            check.passed(MASS_DRIFT_TOL),
        ));
    }
    run.finish("solve-fine", gates)
}

fn solve_limit(run: &Run, setup: &Setup) -> Result<bool> {
    let (_, evo) = run_limit(&run.cfg, setup)?;
    write_state(&run.path("limit_state"), &evo.state, &setup.bases)?;
    write_csv(&run.path("limit_log.csv"), &run.hash, &evo.log)?;
    let check = ConservationCheck::from_log(&evo.log);
    run.finish(
        "solve-limit",
        vec![("limit conservation".into(), check.passed(MASS_DRIFT_TOL))],
    )
}

fn compare(run: &Run, setup: &Setup) -> Result<bool> {
    let report = run_convergence_experiment(&run.cfg, setup)?;
    write_csv(&run.path("convergence.csv"), &run.hash, &report.rows)?;
    write_csv(&run.path("norm_gap.csv"), &run.hash, &report.norm_gaps)?;
    run.finish(
        "compare",
        vec![
            (
                "errors strictly decreasing".into(),
                report.errors_decreasing,
            ),
            (
                "initial rows carry the projection gap".into(),
                report.initial_rows_match_gap,
            ),
        ],
    )
}

fn spectrum(run: &Run, setup: &Setup) -> Result<bool> {
    let report = run_spectrum_experiment(&run.cfg, setup)?;
    write_csv(&run.path("bands.csv"), &run.hash, &band_rows(&report.bands))?;
    fs::write(
        run.path("bands.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if report.fine_epsilon.is_some() {
        write_csv(&run.path("fine_eigenvalues.csv"), &run.hash, &report.fine)?;
        if !report.fine_converged {
            eprintln!("warning: fine eigensolver did not reach its tolerance");
        }
    }
    run.finish(
        "spectrum",
        vec![
            (
                "bands sorted and disjoint".into(),
                report.sorted_and_disjoint,
            ),
            (
                "band edge residuals".into(),
                report.max_edge_residual < 1e-8,
            ),
        ],
    )
}

fn diagnostics(run: &Run, setup: &Setup) -> Result<bool> {
    let report = run_corrector_diagnostics(&run.cfg, setup)?;
    write_csv(&run.path("diagnostics.csv"), &run.hash, &report.rows)?;
    run.finish(
        "diagnostics",
        vec![
            ("eps h decreasing".into(), report.h_decreasing),
            ("grad h bounded".into(), report.grad_h_bounded),
            ("eps^2 g decreasing".into(), report.g_decreasing),
            ("phi decreasing".into(), report.phi_decreasing),
        ],
    )
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli.config.as_deref())?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(true);
    }
    fs::create_dir_all(&cli.out)?;
    let run = Run {
        hash: cfg.hash(),
        cfg,
        out: cli.out.clone(),
    };
    if let Command::GenEnv = cli.command {
        return gen_env(&run);
    }
    let setup = prepare(&run.cfg)?;
    match cli.command {
        Command::Modes => modes(&run, &setup),
        Command::Theta => theta(&run, &setup),
        Command::SolveFine => solve_fine(&run, &setup),
        Command::SolveLimit => solve_limit(&run, &setup),
        Command::Compare => compare(&run, &setup),
        Command::Spectrum => spectrum(&run, &setup),
        Command::Diagnostics => diagnostics(&run, &setup),
        Command::GenEnv | Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
