//! One interface over every design method.
//!
//! Each way of producing a deterministic two-stage design — the annealer and
//! the classical baselines — sits behind the [`DesignStrategy`] trait and is
//! registered by name in a [`StrategyRegistry`], so callers (the CLI, tests,
//! downstream code) select the method at runtime and handle one
//! [`Solution`] type regardless of how it was produced.

use std::collections::BTreeMap;

use crate::annealer::{anneal, AnnealConfig, TemperatureRecord, TransitionEvent};
use crate::baselines::{
    best_affine, evaluate_mapping, one_step_quantizer, uniform_staircase, DeterministicMapping,
};
use crate::error::{Error, Result};
use crate::estimator::EstimatorTable;
use crate::free_energy::{CostBreakdown, Workspace};
use crate::problem::ProblemSpec;

/// Everything a strategy may need: the problem, the numerical configuration
/// (grids, schedule, seed — baselines use only the grids), and optional
/// strategy-specific knobs.
#[derive(Debug, Clone)]
pub struct SolveContext {
    pub problem: ProblemSpec,
    pub config: AnnealConfig,
    pub params: StrategyParams,
}

/// Knobs that only some strategies read; `None` means "derive a sensible
/// default from the problem".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrategyParams {
    /// Step width of the uniform-staircase baseline.
    pub staircase_width: Option<f64>,
    /// Side-signal scale of the uniform-staircase baseline.
    pub staircase_scale: Option<f64>,
}

/// A solved design, uniformly shaped across strategies: the mapping itself,
/// its cost on the quadrature path, the estimator and lattices behind the
/// numbers, and — for the annealer — the cooling trajectory.
#[derive(Debug)]
pub struct Solution {
    pub strategy: String,
    /// The design, tabulated on the source grid for annealed solutions and
    /// parametric for baselines.
    pub mapping: DeterministicMapping,
    pub breakdown: CostBreakdown,
    pub estimator: EstimatorTable,
    pub workspace: Workspace,
    /// Per-temperature trajectory; empty for single-shot strategies.
    pub trace: Vec<TemperatureRecord>,
    pub transitions: Vec<TransitionEvent>,
    pub total_sweeps: u64,
    /// Local models in the solved first-stage bank; 0 for parametric
    /// baselines, which have no bank.
    pub models_g1: usize,
    /// Side-stage bank size, when that stage exists and was annealed.
    pub models_g2: Option<usize>,
    /// Post-quench source translation, when one was applied.
    pub recentered: Option<f64>,
    /// Set when an annealing run aborted and fell back to its last good
    /// state.
    pub aborted: Option<String>,
}

/// A method that turns a problem into a deterministic design.
pub trait DesignStrategy: Send + Sync {
    /// Registry key, e.g. `"da"`.
    fn name(&self) -> &'static str;
    /// One-line human description.
    fn describe(&self) -> &'static str;
    fn solve(&self, ctx: &SolveContext) -> Result<Solution>;
}

/// Name-indexed strategy collection, preloaded with the built-in methods.
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, Box<dyn DesignStrategy>>,
}

impl StrategyRegistry {
    /// Registry with the built-in strategies: `da`, `affine`, `one-step`,
    /// `staircase`.
    pub fn builtin() -> Self {
        let mut reg = Self {
            entries: BTreeMap::new(),
        };
        reg.register(Box::new(AnnealStrategy));
        reg.register(Box::new(AffineStrategy));
        reg.register(Box::new(OneStepStrategy));
        reg.register(Box::new(StaircaseStrategy));
        reg
    }

    /// Add or replace a strategy under its own name.
    pub fn register(&mut self, strategy: Box<dyn DesignStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn DesignStrategy> {
        self.entries.get(name).map(Box::as_ref).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "unknown strategy '{name}'; available: {}",
                self.names().join(", ")
            ))
        })
    }

    /// Registered names in stable (sorted) order.
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Score a parametric baseline mapping and wrap it as a [`Solution`].
fn solve_baseline(
    name: &str,
    mapping: DeterministicMapping,
    ctx: &SolveContext,
) -> Result<Solution> {
    let eval = evaluate_mapping(&mapping, &ctx.problem, &ctx.config.grids)?;
    Ok(Solution {
        strategy: name.to_string(),
        mapping,
        breakdown: eval.breakdown,
        estimator: eval.estimator,
        workspace: eval.workspace,
        trace: Vec::new(),
        transitions: Vec::new(),
        total_sweeps: 0,
        models_g1: 0,
        models_g2: None,
        recentered: None,
        aborted: None,
    })
}

/// Deterministic annealing of the randomized controller.
struct AnnealStrategy;

impl DesignStrategy for AnnealStrategy {
    fn name(&self) -> &'static str {
        "da"
    }

    fn describe(&self) -> &'static str {
        "deterministic annealing of an entropy-randomized piecewise-affine controller"
    }

    fn solve(&self, ctx: &SolveContext) -> Result<Solution> {
        let out = anneal(&ctx.problem, &ctx.config)?;
        let mapping = DeterministicMapping::sampled(out.signal_points())?;
        Ok(Solution {
            strategy: self.name().to_string(),
            mapping,
            breakdown: out.breakdown,
            estimator: out.estimator,
            workspace: out.workspace,
            trace: out.trace,
            transitions: out.transitions,
            total_sweeps: out.total_sweeps,
            models_g1: out.g1.bank.len(),
            models_g2: out.g2.as_ref().map(|g| g.bank.len()),
            recentered: out.recentered,
            aborted: out.aborted,
        })
    }
}

/// Exact best affine design.
struct AffineStrategy;

impl DesignStrategy for AffineStrategy {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn describe(&self) -> &'static str {
        "best affine design (closed-form cost, golden-section slope search)"
    }

    fn solve(&self, ctx: &SolveContext) -> Result<Solution> {
        solve_baseline(self.name(), best_affine(&ctx.problem).mapping, ctx)
    }
}

/// The classical two-point quantizer.
struct OneStepStrategy;

impl DesignStrategy for OneStepStrategy {
    fn name(&self) -> &'static str {
        "one-step"
    }

    fn describe(&self) -> &'static str {
        "two-point quantizer x1 = sigma*sgn(x0)"
    }

    fn solve(&self, ctx: &SolveContext) -> Result<Solution> {
        solve_baseline(self.name(), one_step_quantizer(&ctx.problem)?, ctx)
    }
}

/// Flat uniform staircase with a proportional side signal.
struct StaircaseStrategy;

impl DesignStrategy for StaircaseStrategy {
    fn name(&self) -> &'static str {
        "staircase"
    }

    fn describe(&self) -> &'static str {
        "uniform staircase with side signal scale*x1 (side-channel baseline)"
    }

    fn solve(&self, ctx: &SolveContext) -> Result<Solution> {
        let p = &ctx.problem;
        let width = ctx
            .params
            .staircase_width
            .unwrap_or(1.3 * p.source.std);
        // Default side scale targets an SNR of 2.5: rms(x1) of a snapped
        // staircase is close to the source spread.
        let scale = ctx
            .params
            .staircase_scale
            .unwrap_or(2.5 * p.side_noise.std / p.source.std);
        solve_baseline(self.name(), uniform_staircase(p, width, scale)?, ctx)
    }
}
