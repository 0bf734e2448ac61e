//! The human-readable run summary: final costs, trajectory digest,
//! wall-clock, and a re-runnable configuration echo.

use std::fmt::Write as _;
use std::time::Duration;

use damap::annealer::{TemperatureRecord, TransitionEvent};
use damap::free_energy::CostBreakdown;

/// Everything the summary reports. The `config_echo` block is the exact
/// text also written to `config_echo.conf`, so a summary alone suffices to
/// reproduce its run.
pub struct Summary<'a> {
    pub verb: &'a str,
    pub strategy: &'a str,
    pub breakdown: &'a CostBreakdown,
    /// Achieved rms(g₂)/σ_n2; `None` for the plain variant.
    pub b_snr: Option<f64>,
    /// Monte-Carlo cross-check (mean, standard error), when one was run.
    pub mc: Option<(f64, f64)>,
    pub trace: &'a [TemperatureRecord],
    pub transitions: &'a [TransitionEvent],
    pub total_sweeps: u64,
    pub models_g1: usize,
    pub models_g2: Option<usize>,
    pub recentered: Option<f64>,
    pub aborted: Option<&'a str>,
    pub seed: u64,
    pub wall_clock: Duration,
    pub config_echo: &'a str,
}

/// Render the summary text. Result lines are `key = value` so they are as
/// grep-friendly as the config echo below them.
pub fn render_summary(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# damap {} summary", s.verb);
    let _ = writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "strategy = {}", s.strategy);
    let _ = writeln!(out, "seed = {}", s.seed);
    let _ = writeln!(out, "wall_clock_s = {:.3}", s.wall_clock.as_secs_f64());
    out.push('\n');
    let _ = writeln!(out, "# result");
    let b = s.breakdown;
    let _ = writeln!(out, "total_d = {}", b.total_d);
    let _ = writeln!(out, "objective_cost = {}", b.objective_cost);
    let _ = writeln!(out, "control_cost = {}", b.control_cost);
    let _ = writeln!(out, "side_power_cost = {}", b.side_power_cost);
    let _ = writeln!(out, "estimation_error = {}", b.estimation_error);
    let _ = writeln!(out, "entropy = {}", b.entropy);
    let _ = writeln!(out, "rms_g2 = {}", b.rms_g2);
    if let Some(v) = s.b_snr {
        let _ = writeln!(out, "b_snr = {v}");
    }
    if let Some((mean, stderr)) = s.mc {
        let _ = writeln!(out, "mc_mean = {mean}");
        let _ = writeln!(out, "mc_stderr = {stderr}");
    }
    let _ = writeln!(out, "models_g1 = {}", s.models_g1);
    if let Some(m2) = s.models_g2 {
        let _ = writeln!(out, "models_g2 = {m2}");
    }
    if let Some(delta) = s.recentered {
        let _ = writeln!(out, "recentered = {delta}");
    }
    if let Some(reason) = s.aborted {
        let _ = writeln!(out, "aborted = {reason}");
    }
    if !s.trace.is_empty() {
        out.push('\n');
        let _ = writeln!(out, "# trajectory");
        let _ = writeln!(out, "temperatures = {}", s.trace.len());
        let _ = writeln!(out, "total_sweeps = {}", s.total_sweeps);
        let _ = writeln!(out, "transitions = {}", s.transitions.len());
        for t in s.transitions {
            let _ = writeln!(
                out,
                "#   T = {:.6}: {} models {} -> {}",
                t.temperature,
                t.stage.as_str(),
                t.from,
                t.to
            );
        }
        if let (Some(first), Some(last)) = (s.trace.first(), s.trace.last()) {
            let _ = writeln!(out, "t_start = {}", first.temperature);
            let _ = writeln!(out, "t_end = {}", last.temperature);
        }
        let restored = s.trace.iter().filter(|r| r.restored).count();
        let _ = writeln!(out, "restored_temperatures = {restored}");
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "# effective configuration (machine copy: config_echo.conf)"
    );
    out.push_str(s.config_echo);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_reports_costs_and_echoes_config() {
        let b = CostBreakdown {
            control_cost: 0.13,
            side_power_cost: 0.0,
            estimation_error: 0.04,
            total_d: 0.17,
            objective_cost: 0.17,
            entropy: 0.0,
            rms_g2: 0.0,
        };
        let text = render_summary(&Summary {
            verb: "run",
            strategy: "da",
            breakdown: &b,
            b_snr: None,
            mc: Some((0.171, 0.002)),
            trace: &[],
            transitions: &[],
            total_sweeps: 0,
            models_g1: 28,
            models_g2: None,
            recentered: Some(0.2),
            aborted: None,
            seed: 7,
            wall_clock: Duration::from_millis(1500),
            config_echo: "variant = wce\nk1 = 0.2\n",
        });
        for needle in [
            "total_d = 0.17",
            "mc_mean = 0.171",
            "models_g1 = 28",
            "recentered = 0.2",
            "wall_clock_s = 1.500",
            "variant = wce",
        ] {
            assert!(text.contains(needle), "missing {needle} in:\n{text}");
        }
        assert!(!text.contains("aborted"));
    }
}
