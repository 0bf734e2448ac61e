//! Artifact files: mapping/estimator/trajectory CSVs and the sweep table.
//!
//! All numbers are written with Rust's shortest round-trip formatting
//! ('.' decimal separator, locale-independent), one record per line,
//! newline-terminated, with a header row. Column orders are fixed.

use std::fs;
use std::path::Path;

use damap::annealer::TemperatureRecord;
use damap::estimator::EstimatorTable;
use damap::problem::SignalPoint;

use crate::run::CliError;

/// Columns of a mapping file, in order. The `g2` field stays empty for the
/// plain variant.
pub const MAPPING_HEADER: &str = "x0,g1,g2,x1";
/// Columns of the sweep comparison table, in order.
pub const TABLE2_HEADER: &str = "b_snr,affine_cost,da_cost,improvement";

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// Export a deterministic design sampled on the source grid:
/// `x0,g1,g2,x1`, one row per source node, `g2` empty when the design has
/// no side stage.
pub fn write_mapping_csv(
    path: &Path,
    points: &[SignalPoint],
    has_side_channel: bool,
) -> Result<(), CliError> {
    let mut s = String::with_capacity(32 * (points.len() + 1));
    s.push_str(MAPPING_HEADER);
    s.push('\n');
    for p in points {
        if has_side_channel {
            s.push_str(&format!("{},{},{},{}\n", p.x0, p.g1, p.g2, p.x1));
        } else {
            s.push_str(&format!("{},{},,{}\n", p.x0, p.g1, p.x1));
        }
    }
    write_file(path, &s)
}

/// Import a mapping file written by [`write_mapping_csv`] (or shaped like
/// one). Returns the samples and whether the file carries a side signal.
/// The `g2` column must be all-empty (plain variant) or all-filled; each
/// row's `x1` must equal `x0 + g1`.
pub fn read_mapping_csv(path: &Path) -> Result<(Vec<SignalPoint>, bool), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let bad = |line: usize, msg: String| {
        CliError::Config(format!("{} line {}: {msg}", path.display(), line))
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == MAPPING_HEADER => {}
        Some((_, header)) => {
            return Err(bad(
                1,
                format!("expected header '{MAPPING_HEADER}', found '{header}'"),
            ))
        }
        None => return Err(bad(1, "empty file".to_string())),
    }
    let mut points = Vec::new();
    let mut has_g2: Option<bool> = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let parse = |name: &str, s: &str| -> Result<f64, CliError> {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|e| bad(lineno, format!("field {name}: cannot parse '{s}': {e}")))?;
            if !v.is_finite() {
                return Err(bad(lineno, format!("field {name}: non-finite value '{s}'")));
            }
            Ok(v)
        };
        let x0 = parse("x0", fields[0])?;
        let g1 = parse("g1", fields[1])?;
        let g2_field = fields[2].trim();
        let row_has_g2 = !g2_field.is_empty();
        match has_g2 {
            None => has_g2 = Some(row_has_g2),
            Some(prev) if prev != row_has_g2 => {
                return Err(bad(
                    lineno,
                    "g2 column must be consistently empty or consistently filled".to_string(),
                ))
            }
            _ => {}
        }
        let g2 = if row_has_g2 { parse("g2", g2_field)? } else { 0.0 };
        let x1 = parse("x1", fields[3])?;
        if (x1 - (x0 + g1)).abs() > 1e-9 * (1.0 + x1.abs()) {
            return Err(bad(
                lineno,
                format!("x1 = {x1} does not equal x0 + g1 = {}", x0 + g1),
            ));
        }
        points.push(SignalPoint::new(x0, g1, g2));
    }
    if points.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok((points, has_g2.unwrap_or(false)))
}

/// Export the tabulated estimator: `y,x1_hat` for the plain variant,
/// `y,z,x1_hat` (y-major) when a side channel is present.
pub fn write_estimator_csv(path: &Path, est: &EstimatorTable) -> Result<(), CliError> {
    let numerical = |e: damap::Error| CliError::Numerical(e.to_string());
    let y = est.y_grid().points().to_vec();
    let mut s = String::new();
    match est.z_grid() {
        None => {
            s.push_str("y,x1_hat\n");
            for &yv in &y {
                let w = est.estimate(yv, None).map_err(numerical)?;
                s.push_str(&format!("{yv},{w}\n"));
            }
        }
        Some(zg) => {
            let z = zg.points().to_vec();
            s.push_str("y,z,x1_hat\n");
            for &yv in &y {
                for &zv in &z {
                    let w = est.estimate(yv, Some(zv)).map_err(numerical)?;
                    s.push_str(&format!("{yv},{zv},{w}\n"));
                }
            }
        }
    }
    write_file(path, &s)
}

/// Export the cooling trajectory, one row per temperature.
pub fn write_trajectory_csv(path: &Path, trace: &[TemperatureRecord]) -> Result<(), CliError> {
    let mut s = String::from(
        "index,temperature,free_energy,total_d,entropy,models_g1,models_g2,sweeps,restored\n",
    );
    for (i, rec) in trace.iter().enumerate() {
        let f = rec.sweep_f.last().copied().unwrap_or(f64::NAN);
        s.push_str(&format!(
            "{i},{},{f},{},{},{},{},{},{}\n",
            rec.temperature,
            rec.total_d,
            rec.entropy,
            rec.effective_models_g1,
            rec.effective_models_g2,
            rec.sweep_f.len(),
            u8::from(rec.restored),
        ));
    }
    write_file(path, &s)
}

/// One row of the sweep comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub b_snr: f64,
    pub affine_cost: f64,
    pub da_cost: f64,
    /// Relative improvement of the annealed design over the affine
    /// reference at the same SNR: (affine − da) / affine.
    pub improvement: f64,
}

/// Export the sweep comparison table. Failed sweep rows arrive as NaN
/// entries and are written as `nan` so the failure stays visible in the
/// artifact.
pub fn write_table2_csv(path: &Path, rows: &[TableRow]) -> Result<(), CliError> {
    let mut s = String::from(TABLE2_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.b_snr, r.affine_cost, r.da_cost, r.improvement
        ));
    }
    write_file(path, &s)
}
