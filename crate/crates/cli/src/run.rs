//! Command implementations: run, sweep, score. Each returns a typed
//! outcome for tests and maps failures onto the CLI's exit-code contract
//! (2 = configuration, 3 = numerical, 4 = output I/O).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use damap::baselines::{
    affine_cost_at_bsnr, evaluate_mapping, mc_cost, DeterministicMapping, MappingEvaluation,
};
use damap::annealer::sweep_k2;
use damap::free_energy::CostBreakdown;
use damap::problem::{achieved_bsnr, SignalPoint};
use damap::strategy::{Solution, StrategyRegistry};

use crate::config::RunConfig;
use crate::io::{
    read_mapping_csv, write_estimator_csv, write_mapping_csv, write_table2_csv,
    write_trajectory_csv, TableRow,
};
use crate::report::{render_summary, Summary};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Flags or config could not be parsed/validated (exit 2).
    Config(String),
    /// The computation failed or produced non-finite values (exit 3).
    Numerical(String),
    /// An artifact could not be written or read back (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Numerical(m) => write!(f, "numerical: {m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn numerical(e: damap::Error) -> CliError {
    CliError::Numerical(e.to_string())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// What a `run` produced, for callers and tests.
pub struct RunOutcome {
    /// Cost of the exported mapping on the standalone scoring path — the
    /// number `score` reproduces from the artifacts.
    pub breakdown: CostBreakdown,
    /// The solving strategy's own cost report (for the annealer, measured
    /// on its internal lattices; equal to `breakdown` for baselines up to
    /// quadrature-extent differences).
    pub solver_total_d: f64,
    pub b_snr: Option<f64>,
    pub models_g1: usize,
    pub points: Vec<SignalPoint>,
    pub aborted: Option<String>,
    pub out_dir: Option<PathBuf>,
}

/// Sample a solved design on its source grid.
fn sample_solution(solution: &Solution, has_side: bool) -> Vec<SignalPoint> {
    solution
        .workspace
        .source()
        .points()
        .iter()
        .map(|&x| {
            SignalPoint::new(
                x,
                solution.mapping.g1(x),
                if has_side { solution.mapping.g2(x) } else { 0.0 },
            )
        })
        .collect()
}

/// Solve with the configured strategy, export artifacts, and report the
/// exported mapping's cost as measured by the standalone scorer (so the
/// reported number and a later `score` of the artifact agree exactly).
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let ctx = cfg.solve_context()?;
    let registry = StrategyRegistry::builtin();
    let strategy = registry
        .get(&cfg.strategy)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let started = Instant::now();
    let solution = strategy.solve(&ctx).map_err(numerical)?;
    let has_side = ctx.problem.has_side_channel();
    let points = sample_solution(&solution, has_side);
    let sampled = DeterministicMapping::sampled(points.clone()).map_err(numerical)?;
    let eval = evaluate_mapping(&sampled, &ctx.problem, &ctx.config.grids).map_err(numerical)?;
    let wall_clock = started.elapsed();

    let b_snr = if has_side {
        Some(achieved_bsnr(&ctx.problem, eval.breakdown.rms_g2).map_err(numerical)?)
    } else {
        None
    };
    let echo = cfg.echo();
    let summary = render_summary(&Summary {
        verb: "run",
        strategy: &solution.strategy,
        breakdown: &eval.breakdown,
        b_snr,
        mc: None,
        trace: &solution.trace,
        transitions: &solution.transitions,
        total_sweeps: solution.total_sweeps,
        models_g1: solution.models_g1,
        models_g2: solution.models_g2,
        recentered: solution.recentered,
        aborted: solution.aborted.as_deref(),
        seed: cfg.seed,
        wall_clock,
        config_echo: &echo,
    });
    if let Some(dir) = &cfg.out_dir {
        ensure_dir(dir)?;
        write_mapping_csv(&dir.join("mapping.csv"), &points, has_side)?;
        write_estimator_csv(&dir.join("estimator.csv"), &eval.estimator)?;
        write_trajectory_csv(&dir.join("trajectory.csv"), &solution.trace)?;
        write_text(&dir.join("config_echo.conf"), &echo)?;
        write_text(&dir.join("summary.txt"), &summary)?;
    }
    print!("{summary}");
    Ok(RunOutcome {
        solver_total_d: solution.breakdown.total_d,
        breakdown: eval.breakdown,
        b_snr,
        models_g1: solution.models_g1,
        points,
        aborted: solution.aborted,
        out_dir: cfg.out_dir.clone(),
    })
}

/// What a `score` produced.
pub struct ScoreOutcome {
    pub breakdown: CostBreakdown,
    pub mc: Option<(f64, f64)>,
    pub b_snr: Option<f64>,
}

/// Evaluate an exported mapping CSV on the quadrature path and,
/// optionally, cross-check it by Monte-Carlo simulation.
pub fn cmd_score(cfg: &RunConfig, mapping_path: &Path) -> Result<ScoreOutcome, CliError> {
    let problem = cfg.problem()?;
    let (points, has_g2) = read_mapping_csv(mapping_path)?;
    if has_g2 != problem.has_side_channel() {
        return Err(CliError::Config(format!(
            "mapping file {} side channel ({}) does not match the configured variant '{}'",
            mapping_path.display(),
            if has_g2 { "present" } else { "absent" },
            problem.variant.as_str()
        )));
    }
    let mapping =
        DeterministicMapping::sampled(points).map_err(|e| CliError::Config(e.to_string()))?;
    let started = Instant::now();
    let eval: MappingEvaluation =
        evaluate_mapping(&mapping, &problem, &cfg.grids()).map_err(numerical)?;
    let mc = if cfg.mc_samples > 0 {
        Some(
            mc_cost(&mapping, &eval.estimator, &problem, cfg.mc_samples, cfg.seed)
                .map_err(numerical)?,
        )
    } else {
        None
    };
    let wall_clock = started.elapsed();
    let b_snr = if problem.has_side_channel() {
        Some(achieved_bsnr(&problem, eval.breakdown.rms_g2).map_err(numerical)?)
    } else {
        None
    };
    let echo = cfg.echo();
    let summary = render_summary(&Summary {
        verb: "score",
        strategy: "imported-mapping",
        breakdown: &eval.breakdown,
        b_snr,
        mc,
        trace: &[],
        transitions: &[],
        total_sweeps: 0,
        models_g1: 0,
        models_g2: None,
        recentered: None,
        aborted: None,
        seed: cfg.seed,
        wall_clock,
        config_echo: &echo,
    });
    if let Some(dir) = &cfg.out_dir {
        ensure_dir(dir)?;
        write_estimator_csv(&dir.join("estimator.csv"), &eval.estimator)?;
        write_text(&dir.join("summary.txt"), &summary)?;
    }
    print!("{summary}");
    Ok(ScoreOutcome {
        breakdown: eval.breakdown,
        mc,
        b_snr,
    })
}

/// What a `sweep` produced.
pub struct SweepOutcome {
    pub table: Vec<TableRow>,
    /// (k2, error message) for rows that failed.
    pub failures: Vec<(f64, String)>,
    pub out_dir: Option<PathBuf>,
}

/// Anneal across the configured k₂ list and emit the SNR comparison table:
/// achieved b_SNR, the affine reference cost at that SNR (side power
/// excluded), the annealed objective cost, and the relative improvement.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutcome, CliError> {
    let problem = cfg.problem()?; // validates the side-channel parameters
    if !problem.has_side_channel() {
        return Err(CliError::Config(
            "sweep requires the side-channel variant (use --preset side-channel)".into(),
        ));
    }
    let anneal_cfg = cfg.anneal_config();
    let started = Instant::now();
    let rows = sweep_k2(
        cfg.k1,
        cfg.sigma_x0,
        cfg.sigma_n2,
        &cfg.k2_list,
        &anneal_cfg,
    )
    .map_err(numerical)?;
    let wall_clock = started.elapsed();

    let mut table = Vec::with_capacity(rows.len());
    let mut failures = Vec::new();
    let mut lines = String::new();
    for row in &rows {
        let affine = affine_cost_at_bsnr(cfg.k1, cfg.sigma_x0, 1.0, row.b_snr);
        table.push(TableRow {
            b_snr: row.b_snr,
            affine_cost: affine,
            da_cost: row.objective_cost,
            improvement: (affine - row.objective_cost) / affine,
        });
        if let Some(err) = &row.error {
            failures.push((row.k2, err.clone()));
            lines.push_str(&format!("# k2 = {}: FAILED: {err}\n", row.k2));
        } else {
            lines.push_str(&format!(
                "# k2 = {}: b_snr = {:.4}, objective_cost = {:.6}, affine = {:.6}\n",
                row.k2, row.b_snr, row.objective_cost, affine
            ));
        }
    }
    if let Some(dir) = &cfg.out_dir {
        ensure_dir(dir)?;
        write_table2_csv(&dir.join("table2.csv"), &table)?;
        for row in &rows {
            if let Some(outcome) = &row.outcome {
                let sub = dir.join(format!("k2_{}", row.k2));
                ensure_dir(&sub)?;
                write_mapping_csv(&sub.join("mapping.csv"), &outcome.signal_points(), true)?;
                write_trajectory_csv(&sub.join("trajectory.csv"), &outcome.trace)?;
            }
        }
        let mut summary = String::from("# damap sweep summary\n");
        summary.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        summary.push_str(&format!("wall_clock_s = {:.3}\n", wall_clock.as_secs_f64()));
        summary.push_str(&format!("rows = {}\n", rows.len()));
        summary.push_str(&format!("failures = {}\n", failures.len()));
        summary.push_str(&lines);
        summary.push_str("\n# effective configuration (machine copy: config_echo.conf)\n");
        summary.push_str(&cfg.echo());
        write_text(&dir.join("summary.txt"), &summary)?;
        write_text(&dir.join("config_echo.conf"), &cfg.echo())?;
    }
    print!("{lines}");
    Ok(SweepOutcome {
        table,
        failures,
        out_dir: cfg.out_dir.clone(),
    })
}
