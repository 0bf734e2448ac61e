//! Deterministic-annealing design of decentralized controller mappings.
//!
//! Two controllers act on a Gaussian source without sharing observations:
//! the first shifts the state (x₁ = x₀ + g₁(x₀)), the second estimates it
//! from a noisy measurement, optionally helped by a noisy side channel
//! z = g₂(x₀) + n₂. Direct optimization of the mappings is riddled with
//! poor local minima; this crate instead anneals a randomized controller —
//! banks of affine local models with temperature-smoothed association
//! probabilities — on the free energy F = D − T·H, cooling until the
//! associations harden into a deterministic piecewise-affine design.
//!
//! The pipeline: [`quadrature`] supplies grids and Gaussian kernels,
//! [`problem`] fixes the cost convention, [`controller`] holds the
//! randomized mappings, [`estimator`] builds the closed-form MMSE second
//! stage, [`free_energy`] evaluates and descends F, and [`annealer`] runs
//! the cooling schedule. [`baselines`] provides classical reference
//! designs, and [`strategy`] exposes everything behind one interface.

pub mod annealer;
pub mod baselines;
pub mod controller;
pub mod error;
pub mod estimator;
pub(crate) mod fields;
pub mod free_energy;
pub mod problem;
pub mod quadrature;
pub mod strategy;
pub(crate) mod util;

pub use annealer::{anneal, sweep_k2, AnnealConfig, AnnealOutcome, GridSettings, SweepRow};
pub use baselines::{
    affine_cost, affine_cost_at_bsnr, best_affine, evaluate_mapping, evaluate_on, mc_cost,
    one_step_quantizer, uniform_staircase, AffineFit, DeterministicMapping, MappingEvaluation,
};
pub use controller::{
    duplicate_and_perturb, AssociationMatrix, LocalModel, LocalModelBank, RandomizedController,
    Stage,
};
pub use error::{Error, Result};
pub use estimator::{build_estimator, EstimatorTable};
pub use free_energy::{gibbs_update, CostBreakdown, DescentOptions, Workspace};
pub use problem::{ProblemSpec, SignalPoint, Variant};
pub use quadrature::{GaussianSpec, Grid1D};
pub use strategy::{DesignStrategy, Solution, SolveContext, StrategyParams, StrategyRegistry};
