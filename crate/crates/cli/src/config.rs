//! Run configuration: defaults, flat key-value config files, environment,
//! and CLI-flag overrides, merged in that order.
//!
//! The file format is one `key = value` per line with `#` comments — no
//! schema engine, diff-friendly, and echoed back verbatim by every run so
//! any result can be reproduced from its own summary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use damap::annealer::{AnnealConfig, GridSettings};
use damap::problem::{ProblemSpec, Variant};
use damap::strategy::{SolveContext, StrategyParams};

use crate::run::CliError;

/// Environment variable that overrides the output directory (between the
/// config file and explicit `--out`).
pub const OUT_DIR_ENV: &str = "DAMAP_OUT_DIR";

/// Grid resolution presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridScale {
    /// Default desk-scale grids: source 501, y 401, z 201.
    Fast,
    /// High-accuracy grids: source 2001, y 1001, z 401.
    Fine,
}

impl GridScale {
    pub fn settings(self) -> GridSettings {
        match self {
            GridScale::Fast => GridSettings {
                n_source: 501,
                n_y: 401,
                n_z: 201,
            },
            GridScale::Fine => GridSettings {
                n_source: 2001,
                n_y: 1001,
                n_z: 401,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GridScale::Fast => "fast",
            GridScale::Fine => "fine",
        }
    }
}

impl std::str::FromStr for GridScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fast" => Ok(GridScale::Fast),
            "fine" => Ok(GridScale::Fine),
            other => Err(format!("unknown grid scale '{other}' (expected fast or fine)")),
        }
    }
}

/// Fully resolved run configuration. Every field has a default, so an empty
/// config is a valid benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub k1: f64,
    pub k2: f64,
    pub sigma_x0: f64,
    pub sigma_n2: f64,
    pub seed: u64,
    pub strategy: String,
    pub grid_scale: GridScale,
    /// Explicit grid overrides; `None` falls back to the scale preset.
    pub n_source: Option<usize>,
    pub n_y: Option<usize>,
    pub n_z: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    /// Monte-Carlo sample count for `score`; 0 disables the check.
    pub mc_samples: u64,
    /// Power weights visited by `sweep`.
    pub k2_list: Vec<f64>,
    pub staircase_width: Option<f64>,
    pub staircase_scale: Option<f64>,
    // Annealing schedule overrides; `None` keeps the library default.
    pub t0: Option<f64>,
    pub cool_factor: Option<f64>,
    pub t_min_factor: Option<f64>,
    pub inner_tol: Option<f64>,
    pub inner_max_iters: Option<u32>,
    pub perturb_eps_factor: Option<f64>,
    pub max_models: Option<usize>,
    pub merge_tol: Option<f64>,
    pub consolidate_tol_factor: Option<f64>,
    pub extent_margin: Option<f64>,
}

/// Shipped default sweep list: spans the side channel from effectively off
/// (k₂ = 10³ forces g₂ → 0) down to cheap side power, covering achieved
/// SNRs from ~0 to beyond 3.
pub const DEFAULT_K2_LIST: [f64; 6] = [1000.0, 0.6, 0.3, 0.15, 0.08, 0.04];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Wce,
            k1: 0.2,
            k2: 0.1,
            sigma_x0: 5.0,
            sigma_n2: 1.0,
            seed: AnnealConfig::default().seed,
            strategy: "da".to_string(),
            grid_scale: GridScale::Fast,
            n_source: None,
            n_y: None,
            n_z: None,
            out_dir: None,
            jobs: None,
            mc_samples: 1_000_000,
            k2_list: DEFAULT_K2_LIST.to_vec(),
            staircase_width: None,
            staircase_scale: None,
            t0: None,
            cool_factor: None,
            t_min_factor: None,
            inner_tol: None,
            inner_max_iters: None,
            perturb_eps_factor: None,
            max_models: None,
            merge_tol: None,
            consolidate_tol_factor: None,
            extent_margin: None,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment. Unknown keys and malformed
    /// values are errors — a config that cannot be fully understood must
    /// not run.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| format!("key '{key}': cannot parse '{value}': {e}"))
        }
        match key {
            "variant" | "preset" => {
                self.variant = value
                    .parse()
                    .map_err(|_| format!("key '{key}': unknown variant '{value}'"))?;
            }
            "k1" => self.k1 = num(key, value)?,
            "k2" => self.k2 = num(key, value)?,
            "sigma_x0" => self.sigma_x0 = num(key, value)?,
            "sigma_n2" => self.sigma_n2 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "strategy" => self.strategy = value.to_string(),
            "grid_scale" => self.grid_scale = value.parse()?,
            "n_source" => self.n_source = Some(num(key, value)?),
            "n_y" => self.n_y = Some(num(key, value)?),
            "n_z" => self.n_z = Some(num(key, value)?),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "jobs" => self.jobs = Some(num(key, value)?),
            "mc_samples" => self.mc_samples = num(key, value)?,
            "k2_list" => {
                let mut list = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        return Err(format!("key 'k2_list': empty entry in '{value}'"));
                    }
                    list.push(num("k2_list", part)?);
                }
                if list.is_empty() {
                    return Err("key 'k2_list': list is empty".to_string());
                }
                self.k2_list = list;
            }
            "staircase_width" => self.staircase_width = Some(num(key, value)?),
            "staircase_scale" => self.staircase_scale = Some(num(key, value)?),
            "t0" => self.t0 = Some(num(key, value)?),
            "cool_factor" => self.cool_factor = Some(num(key, value)?),
            "t_min_factor" => self.t_min_factor = Some(num(key, value)?),
            "inner_tol" => self.inner_tol = Some(num(key, value)?),
            "inner_max_iters" => self.inner_max_iters = Some(num(key, value)?),
            "perturb_eps_factor" => self.perturb_eps_factor = Some(num(key, value)?),
            "max_models" => self.max_models = Some(num(key, value)?),
            "merge_tol" => self.merge_tol = Some(num(key, value)?),
            "consolidate_tol_factor" => self.consolidate_tol_factor = Some(num(key, value)?),
            "extent_margin" => self.extent_margin = Some(num(key, value)?),
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Parse a config file's text into this config. Lines are
    /// `key = value`; blank lines and `#` comments are ignored; keys may
    /// not repeat.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(format!("line {}: empty key or value", lineno + 1));
            }
            if !seen.insert(key.to_string()) {
                return Err(format!("line {}: duplicate key '{key}'", lineno + 1));
            }
            self.set(key, value)
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    /// Pick up the output-directory override from the environment.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                self.out_dir = Some(PathBuf::from(dir));
            }
        }
    }

    /// Grid sizes after resolving the scale preset and any explicit
    /// overrides.
    pub fn grids(&self) -> GridSettings {
        let base = self.grid_scale.settings();
        GridSettings {
            n_source: self.n_source.unwrap_or(base.n_source),
            n_y: self.n_y.unwrap_or(base.n_y),
            n_z: self.n_z.unwrap_or(base.n_z),
        }
    }

    /// Build the problem this config describes.
    pub fn problem(&self) -> Result<ProblemSpec, CliError> {
        self.problem_with_k2(self.k2)
    }

    /// Build the problem with an explicit k₂ (used by sweep rows).
    pub fn problem_with_k2(&self, k2: f64) -> Result<ProblemSpec, CliError> {
        match self.variant {
            Variant::Wce => ProblemSpec::wce(self.k1, self.sigma_x0),
            Variant::SideChannel => {
                ProblemSpec::side_channel(self.k1, k2, self.sigma_x0, self.sigma_n2)
            }
        }
        .map_err(|e| CliError::Config(e.to_string()))
    }

    /// The annealing configuration implied by this run config.
    pub fn anneal_config(&self) -> AnnealConfig {
        let mut cfg = AnnealConfig {
            grids: self.grids(),
            seed: self.seed,
            ..AnnealConfig::default()
        };
        if let Some(v) = self.t0 {
            cfg.t0 = Some(v);
        }
        if let Some(v) = self.cool_factor {
            cfg.cool_factor = v;
        }
        if let Some(v) = self.t_min_factor {
            cfg.t_min_factor = v;
        }
        if let Some(v) = self.inner_tol {
            cfg.inner_tol = v;
        }
        if let Some(v) = self.inner_max_iters {
            cfg.inner_max_iters = v;
        }
        if let Some(v) = self.perturb_eps_factor {
            cfg.perturb_eps_factor = v;
        }
        if let Some(v) = self.max_models {
            cfg.max_models = v;
        }
        if let Some(v) = self.merge_tol {
            cfg.merge_tol = v;
        }
        if let Some(v) = self.consolidate_tol_factor {
            cfg.consolidate_tol_factor = v;
        }
        if let Some(v) = self.extent_margin {
            cfg.extent_margin = v;
        }
        cfg
    }

    /// The full solve context for the selected problem.
    pub fn solve_context(&self) -> Result<SolveContext, CliError> {
        Ok(SolveContext {
            problem: self.problem()?,
            config: self.anneal_config(),
            params: StrategyParams {
                staircase_width: self.staircase_width,
                staircase_scale: self.staircase_scale,
            },
        })
    }

    /// Render the effective configuration as config-file text: feeding this
    /// back through `--config` reproduces the run (the resolved grid sizes
    /// are written explicitly, so the echo stays exact even if the preset
    /// mapping ever changes).
    pub fn echo(&self) -> String {
        let grids = self.grids();
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let _ = writeln!(s, "k1 = {}", self.k1);
        if self.variant == Variant::SideChannel {
            let _ = writeln!(s, "k2 = {}", self.k2);
            let _ = writeln!(s, "sigma_n2 = {}", self.sigma_n2);
        }
        let _ = writeln!(s, "sigma_x0 = {}", self.sigma_x0);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "strategy = {}", self.strategy);
        let _ = writeln!(s, "grid_scale = {}", self.grid_scale.as_str());
        let _ = writeln!(s, "n_source = {}", grids.n_source);
        let _ = writeln!(s, "n_y = {}", grids.n_y);
        let _ = writeln!(s, "n_z = {}", grids.n_z);
        let _ = writeln!(s, "mc_samples = {}", self.mc_samples);
        if self.variant == Variant::SideChannel {
            let list = self
                .k2_list
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(s, "k2_list = {list}");
        }
        if let Some(v) = self.jobs {
            let _ = writeln!(s, "jobs = {v}");
        }
        if let Some(v) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", v.display());
        }
        for (key, v) in [
            ("staircase_width", self.staircase_width),
            ("staircase_scale", self.staircase_scale),
            ("t0", self.t0),
            ("cool_factor", self.cool_factor),
            ("t_min_factor", self.t_min_factor),
            ("inner_tol", self.inner_tol),
            ("perturb_eps_factor", self.perturb_eps_factor),
            ("merge_tol", self.merge_tol),
            ("consolidate_tol_factor", self.consolidate_tol_factor),
            ("extent_margin", self.extent_margin),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        if let Some(v) = self.inner_max_iters {
            let _ = writeln!(s, "inner_max_iters = {v}");
        }
        if let Some(v) = self.max_models {
            let _ = writeln!(s, "max_models = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_describe_the_benchmark_problem() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.variant, Variant::Wce);
        assert_eq!(cfg.k1, 0.2);
        assert_eq!(cfg.sigma_x0, 5.0);
        assert_eq!(cfg.grids().n_source, 501);
        assert_eq!(GridScale::Fine.settings().n_source, 2001);
    }

    #[test]
    fn config_text_round_trips_through_echo() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# benchmark\nvariant = side-channel\nk2 = 0.3\nseed = 11\n\
             grid_scale = fine\nn_z = 301\nk2_list = 0.5, 0.25\ncool_factor = 0.9\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::SideChannel);
        assert_eq!(cfg.grids().n_source, 2001);
        assert_eq!(cfg.grids().n_z, 301, "explicit override beats the preset");
        assert_eq!(cfg.k2_list, vec![0.5, 0.25]);
        let mut again = RunConfig::default();
        again.apply_text(&cfg.echo()).unwrap();
        assert_eq!(again.grids(), cfg.grids());
        assert_eq!(again.k2, cfg.k2);
        assert_eq!(again.seed, cfg.seed);
        assert_eq!(again.k2_list, cfg.k2_list);
        assert_eq!(again.anneal_config().cool_factor, 0.9);
    }

    #[test]
    fn malformed_configs_are_rejected_with_line_numbers() {
        let mut cfg = RunConfig::default();
        for (text, needle) in [
            ("k1 0.2", "expected 'key = value'"),
            ("k1 = abc", "cannot parse"),
            ("mystery = 1", "unknown config key"),
            ("k1 = 0.2\nk1 = 0.3", "duplicate key"),
            ("k2_list = 0.5,,0.2", "empty entry"),
            ("grid_scale = huge", "unknown grid scale"),
            ("variant = triangle", "unknown variant"),
        ] {
            let err = cfg.apply_text(text).unwrap_err();
            assert!(err.contains(needle), "text {text:?} gave: {err}");
        }
    }

    #[test]
    fn schedule_overrides_reach_the_anneal_config() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("t0 = 12.5\ninner_max_iters = 77\nmax_models = 8\n")
            .unwrap();
        let a = cfg.anneal_config();
        assert_eq!(a.t0, Some(12.5));
        assert_eq!(a.inner_max_iters, 77);
        assert_eq!(a.max_models, 8);
        assert_eq!(a.cool_factor, AnnealConfig::default().cool_factor);
    }
}
