//! Free-energy evaluation and its block-coordinate minimization moves.
//!
//! The annealer minimizes F = D − T·H over three coordinate blocks:
//!
//! * association probabilities — closed-form Gibbs update
//!   p(m|x₀) ∝ exp(−d(m,x₀)/T), the exact minimizer because D is linear in
//!   the probabilities of one stage at fixed everything else;
//! * local-model parameters — analytic gradient descent with a
//!   backtracking line search (entropy does not depend on the parameters,
//!   so descending D descends F);
//! * the second controller — rebuilt in closed form by
//!   [`crate::estimator::build_estimator`].
//!
//! Every expectation here is evaluated on the same source × observation
//! lattice the estimator table is built from. That makes the rebuilt table
//! the exact minimizer of the discretized objective, so a full sweep of the
//! three moves can never increase F.

use crate::controller::{RandomizedController, Stage};
use crate::error::{Error, Result};
use crate::estimator::{build_from_fields, prior_signal_mean, EstimatorTable};
use crate::fields::{build_a_fields, build_b_fields, AFields, BFields};
use crate::problem::{ProblemSpec, Variant};
use crate::quadrature::{for_each_kernel_point, Grid1D};
use crate::util::pairwise_sum;

use rayon::prelude::*;

/// All components of the annealing objective at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// k₁²·E{g₁²}.
    pub control_cost: f64,
    /// k₂²·E{g₂²}; zero for the plain variant.
    pub side_power_cost: f64,
    /// E{x₂²} = E{(x₁ − W)²}.
    pub estimation_error: f64,
    /// Lagrangian distortion D = control + side power + estimation error.
    pub total_d: f64,
    /// Reported cost k₁²E{g₁²} + E{x₂²}: the side-channel power term is a
    /// Lagrange penalty, not part of the figure of merit.
    pub objective_cost: f64,
    /// Joint association entropy H of the randomized stages.
    pub entropy: f64,
    /// √E{g₂²}, the side-channel amplitude (zero for the plain variant).
    pub rms_g2: f64,
}

impl CostBreakdown {
    pub fn free_energy(&self, temperature: f64) -> f64 {
        self.total_d - temperature * self.entropy
    }
}

/// Options for the model-parameter descent.
///
/// Each iteration takes a backtracking line search along the stage's
/// normalized steepest-descent direction −∇D/‖∇D‖, so the trial step is a
/// parameter-space distance and does not degenerate when the gradient is
/// small. Accepted steps double the next trial (up to `step_cap`), letting
/// the search cross flat valleys; rejections halve it. This matters beyond
/// convergence speed: duplicated model pairs must collapse together (above
/// a critical temperature) or separate (below it) within one inner loop,
/// and both motions start from perturbations far smaller than the
/// parameter scale.
#[derive(Debug, Clone, Copy)]
pub struct DescentOptions {
    /// First trial distance of a descent call.
    pub initial_step: f64,
    /// Step shrink factor on rejection.
    pub backtrack_factor: f64,
    /// Give up on a direction after this many shrinks.
    pub max_backtracks: u32,
    /// Accept a trial iff D_new ≤ D_old + accept_slack.
    pub accept_slack: f64,
    /// Gradient steps per stage per call.
    pub max_steps_per_stage: u32,
    /// Largest trial distance the adaptive growth may reach.
    pub step_cap: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            initial_step: 1e-2,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            accept_slack: 1e-12,
            max_steps_per_stage: 40,
            step_cap: 1.0,
        }
    }
}

/// What a descent call achieved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOutcome {
    /// Stage-dependent part of D before/after the first-stage block.
    pub stage1_before: f64,
    pub stage1_after: f64,
    /// Ditto for the side-channel stage; zero when absent.
    pub stage2_before: f64,
    pub stage2_after: f64,
    pub accepted_steps: u32,
}

/// Gibbs reassociation: p(m|x₀ᵢ) ∝ exp(−d(m,i)/T), computed with the
/// column minimum subtracted so the exponentials never overflow. This is
/// the exact minimizer of D − T·H over one stage's probabilities, and is
/// invariant to adding any per-column constant to the partial costs.
pub fn gibbs_update(
    assoc: &mut crate::controller::AssociationMatrix,
    partial: &[Vec<f64>],
    temperature: f64,
) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Gibbs update needs a positive finite temperature, got {temperature}"
        )));
    }
    if partial.len() != assoc.n_models() {
        return Err(Error::DimensionMismatch(format!(
            "{} partial-cost rows for {} models",
            partial.len(),
            assoc.n_models()
        )));
    }
    let n_points = assoc.n_points();
    if partial.iter().any(|row| row.len() != n_points) {
        return Err(Error::DimensionMismatch(
            "partial-cost rows must match the association column count".into(),
        ));
    }
    for i in 0..n_points {
        let mut dmin = f64::INFINITY;
        for row in partial {
            if !row[i].is_finite() {
                return Err(Error::NonFinite(format!(
                    "partial cost {} at point {i}",
                    row[i]
                )));
            }
            dmin = dmin.min(row[i]);
        }
        for (m, row) in assoc.rows_mut().iter_mut().enumerate() {
            row[i] = (-(partial[m][i] - dmin) / temperature).exp();
        }
    }
    assoc.normalize_columns()
}

/// Evaluation context: the problem plus the frozen quadrature lattice.
///
/// The observation grids are chosen by the caller (and re-frozen between
/// annealing temperatures, never inside an inner loop) so that all moves at
/// one temperature minimize one fixed discretized objective.
#[derive(Debug, Clone)]
pub struct Workspace {
    problem: ProblemSpec,
    source: Grid1D,
    y_grid: Grid1D,
    z_grid: Option<Grid1D>,
}

/// Stage-one integrated estimator moments against the side channel:
///   bw0(i)   = Σ_l h_z·B0(i,l)            (just 1 for the plain variant)
///   bw1(i,j) = Σ_l h_z·B0(i,l)·W(j,l)     (W(j) for the plain variant)
///   bw2(i,j) = Σ_l h_z·B0(i,l)·W(j,l)²
/// With these, the estimation error given x₁ at source node i is
///   Σⱼ h_y·φ(yⱼ−x₁)·(x₁²·bw0(i) − 2x₁·bw1(i,j) + bw2(i,j)).
pub(crate) struct BwFields {
    ny: usize,
    /// Per source node; empty for the plain variant (implicitly 1).
    bw0: Vec<f64>,
    /// `[i·ny + j]`, or `[j]` for the plain variant (shared by all i).
    bw1: Vec<f64>,
    bw2: Vec<f64>,
    shared: bool,
}

impl BwFields {
    #[inline]
    fn at(&self, i: usize, j: usize) -> (f64, f64, f64) {
        if self.shared {
            (1.0, self.bw1[j], self.bw2[j])
        } else {
            (self.bw0[i], self.bw1[i * self.ny + j], self.bw2[i * self.ny + j])
        }
    }
}

impl Workspace {
    pub fn new(
        problem: ProblemSpec,
        source: Grid1D,
        y_grid: Grid1D,
        z_grid: Option<Grid1D>,
    ) -> Result<Self> {
        if problem.has_side_channel() != z_grid.is_some() {
            return Err(Error::VariantMismatch(
                "a z grid must be supplied exactly for the side-channel variant".into(),
            ));
        }
        Ok(Self { problem, source, y_grid, z_grid })
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    pub fn source(&self) -> &Grid1D {
        &self.source
    }

    pub fn y_grid(&self) -> &Grid1D {
        &self.y_grid
    }

    pub fn z_grid(&self) -> Option<&Grid1D> {
        self.z_grid.as_ref()
    }

    fn check_controllers(
        &self,
        g1: &RandomizedController,
        g2: Option<&RandomizedController>,
    ) -> Result<()> {
        if g1.bank.stage != Stage::G1 {
            return Err(Error::VariantMismatch("first controller must be a G1 bank".into()));
        }
        if g1.assoc.n_points() != self.source.len() {
            return Err(Error::DimensionMismatch(format!(
                "first stage has {} association columns, source grid has {} points",
                g1.assoc.n_points(),
                self.source.len()
            )));
        }
        match (self.problem.variant, g2) {
            (Variant::Wce, None) => Ok(()),
            (Variant::SideChannel, Some(g2)) => {
                if g2.bank.stage != Stage::G2 {
                    return Err(Error::VariantMismatch(
                        "side-channel controller must be a G2 bank".into(),
                    ));
                }
                if g2.assoc.n_points() != self.source.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "side-channel stage has {} association columns, source grid has {} points",
                        g2.assoc.n_points(),
                        self.source.len()
                    )));
                }
                Ok(())
            }
            _ => Err(Error::VariantMismatch(
                "side-channel stage must be present exactly for the side-channel variant".into(),
            )),
        }
    }

    /// Rebuild the closed-form MMSE second controller on this lattice.
    pub fn rebuild_estimator(
        &self,
        g1: &RandomizedController,
        g2: Option<&RandomizedController>,
    ) -> Result<EstimatorTable> {
        self.check_controllers(g1, g2)?;
        let a = build_a_fields(g1, &self.source, &self.y_grid, self.problem.obs_noise.std);
        let b = g2.map(|g2| {
            build_b_fields(g2, &self.source, self.z_grid.as_ref().unwrap(), self.problem.side_noise.std)
        });
        let prior = prior_signal_mean(g1, &self.source);
        Ok(build_from_fields(
            &a,
            b.as_ref(),
            &self.source,
            self.y_grid.clone(),
            self.z_grid.clone(),
            prior,
        ))
    }

    /// Full cost decomposition of a randomized design under estimator `w`.
    pub fn expected_cost(
        &self,
        g1: &RandomizedController,
        g2: Option<&RandomizedController>,
        w: &EstimatorTable,
    ) -> Result<CostBreakdown> {
        self.check_controllers(g1, g2)?;
        self.check_table(w)?;
        let e_g1_sq = g1.mean_g_sq(&self.source);
        let control_cost = self.problem.k1 * self.problem.k1 * e_g1_sq;
        let (side_power_cost, rms_g2, entropy2) = match g2 {
            Some(g2) => {
                let e_g2_sq = g2.mean_g_sq(&self.source);
                (self.problem.k2_sq() * e_g2_sq, e_g2_sq.sqrt(), g2.entropy(&self.source))
            }
            None => (0.0, 0.0, 0.0),
        };
        let estimation_error = self.estimation_error(g1, g2, w)?;
        let entropy = g1.entropy(&self.source) + entropy2;
        let total_d = control_cost + side_power_cost + estimation_error;
        if !total_d.is_finite() {
            return Err(Error::NonFinite(format!("expected cost D = {total_d}")));
        }
        Ok(CostBreakdown {
            control_cost,
            side_power_cost,
            estimation_error,
            total_d,
            objective_cost: control_cost + estimation_error,
            entropy,
            rms_g2,
        })
    }

    fn check_table(&self, w: &EstimatorTable) -> Result<()> {
        if w.y_grid().len() != self.y_grid.len()
            || (w.y_grid().lo() - self.y_grid.lo()).abs() > 1e-9
            || (w.y_grid().hi() - self.y_grid.hi()).abs() > 1e-9
        {
            return Err(Error::DimensionMismatch(
                "estimator table y grid does not match the workspace lattice".into(),
            ));
        }
        match (&self.z_grid, w.z_grid()) {
            (None, None) => Ok(()),
            (Some(a), Some(b)) if a.len() == b.len() => Ok(()),
            _ => Err(Error::DimensionMismatch(
                "estimator table z grid does not match the workspace lattice".into(),
            )),
        }
    }

    /// E{(x₁ − W)²} on the lattice.
    fn estimation_error(
        &self,
        g1: &RandomizedController,
        g2: Option<&RandomizedController>,
        w: &EstimatorTable,
    ) -> Result<f64> {
        let a = build_a_fields(g1, &self.source, &self.y_grid, self.problem.obs_noise.std);
        match g2 {
            None => Ok(self.contract_wce(&a, w)),
            Some(g2) => {
                let z_grid = self.z_grid.as_ref().unwrap();
                let b = build_b_fields(g2, &self.source, z_grid, self.problem.side_noise.std);
                let inner = self.build_inner(&a, w);
                Ok(self.contract_inner_with_b(&inner, &b))
            }
        }
    }

    /// Σᵢ wᵢ Σⱼ h_y·(A2 − 2W·A1 + W²·A0)(i,j) for the plain variant.
    fn contract_wce(&self, a: &AFields, w: &EstimatorTable) -> f64 {
        let ny = self.y_grid.len();
        let hy = self.y_grid.weights();
        let terms: Vec<f64> = (0..self.source.len())
            .into_par_iter()
            .map(|i| {
                let base = i * ny;
                let mut acc = 0.0;
                for j in 0..ny {
                    let a0 = a.a0[base + j];
                    if a0 == 0.0 && a.a2[base + j] == 0.0 {
                        continue;
                    }
                    let wv = w.values()[j];
                    acc += hy[j]
                        * (a.a2[base + j] - 2.0 * wv * a.a1[base + j] + wv * wv * a0);
                }
                self.source.weights()[i] * acc
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// inner(i,l) = Σⱼ h_y·(A2(i,j) − 2W(j,l)·A1(i,j) + W(j,l)²·A0(i,j)):
    /// the estimation error at source node i conditioned on side-channel
    /// observation z_l, integrated over y.
    fn build_inner(&self, a: &AFields, w: &EstimatorTable) -> Vec<f64> {
        let ny = self.y_grid.len();
        let nz = self.z_grid.as_ref().unwrap().len();
        let hy = self.y_grid.weights();
        let wv = w.values();
        let mut inner = vec![0.0; self.source.len() * nz];
        inner.par_chunks_mut(nz).enumerate().for_each(|(i, row)| {
            let base = i * ny;
            let mut s2 = 0.0;
            let mut t1 = vec![0.0; nz];
            let mut t0 = vec![0.0; nz];
            for j in 0..ny {
                let a0 = a.a0[base + j];
                let a1 = a.a1[base + j];
                let a2 = a.a2[base + j];
                if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 {
                    continue;
                }
                s2 += hy[j] * a2;
                let c1 = hy[j] * a1;
                let c0 = hy[j] * a0;
                let wrow = &wv[j * nz..(j + 1) * nz];
                for l in 0..nz {
                    t1[l] += c1 * wrow[l];
                    t0[l] += c0 * wrow[l] * wrow[l];
                }
            }
            for l in 0..nz {
                row[l] = s2 - 2.0 * t1[l] + t0[l];
            }
        });
        inner
    }

    /// Σᵢ wᵢ Σ_l h_z·B0(i,l)·inner(i,l).
    fn contract_inner_with_b(&self, inner: &[f64], b: &BFields) -> f64 {
        let z_grid = self.z_grid.as_ref().unwrap();
        let nz = z_grid.len();
        let hz = z_grid.weights();
        let terms: Vec<f64> = (0..self.source.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for l in 0..nz {
                    acc += hz[l] * b.b0[i * nz + l] * inner[i * nz + l];
                }
                self.source.weights()[i] * acc
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// Estimator moments integrated over the side channel (see [`BwFields`]).
    pub(crate) fn build_bw(
        &self,
        g2: Option<&RandomizedController>,
        w: &EstimatorTable,
    ) -> BwFields {
        let ny = self.y_grid.len();
        match g2 {
            None => BwFields {
                ny,
                bw0: Vec::new(),
                bw1: w.values().to_vec(),
                bw2: w.values().iter().map(|v| v * v).collect(),
                shared: true,
            },
            Some(g2) => {
                let z_grid = self.z_grid.as_ref().unwrap();
                let nz = z_grid.len();
                let hz = z_grid.weights();
                let b = build_b_fields(g2, &self.source, z_grid, self.problem.side_noise.std);
                let nx = self.source.len();
                let wv = w.values();
                let mut bw0 = vec![0.0; nx];
                let mut bw1 = vec![0.0; nx * ny];
                let mut bw2 = vec![0.0; nx * ny];
                bw1.par_chunks_mut(ny)
                    .zip(bw2.par_chunks_mut(ny))
                    .zip(bw0.par_iter_mut())
                    .enumerate()
                    .for_each(|(i, ((r1, r2), r0))| {
                        let brow = &b.b0[i * nz..(i + 1) * nz];
                        let mut mass = 0.0;
                        for l in 0..nz {
                            mass += hz[l] * brow[l];
                        }
                        *r0 = mass;
                        for j in 0..ny {
                            let wrow = &wv[j * nz..(j + 1) * nz];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for l in 0..nz {
                                let f = hz[l] * brow[l];
                                m1 += f * wrow[l];
                                m2 += f * wrow[l] * wrow[l];
                            }
                            r1[j] = m1;
                            r2[j] = m2;
                        }
                    });
                BwFields { ny, bw0, bw1, bw2, shared: false }
            }
        }
    }

    /// Estimation error conditioned on applying signal x₁ at source node i:
    /// Σⱼ h_y·φ(yⱼ−x₁)·(x₁²·bw0 − 2x₁·bw1 + bw2).
    #[inline]
    fn stage1_point_error(&self, i: usize, x1: f64, bw: &BwFields) -> f64 {
        let hy = self.y_grid.weights();
        let mut acc = 0.0;
        for_each_kernel_point(x1, self.problem.obs_noise.std, &self.y_grid, |j, phi| {
            let (b0, b1, b2) = bw.at(i, j);
            acc += hy[j] * phi * (x1 * x1 * b0 - 2.0 * x1 * b1 + b2);
        });
        acc
    }

    /// Per-model partial costs d(m, i) for the requested stage; row m,
    /// column i, on the source grid. These are exactly the quantities whose
    /// probability-weighted sum reproduces the stage's share of D, so they
    /// drive both the Gibbs update and phase-transition diagnostics.
    pub fn partial_costs(
        &self,
        stage: Stage,
        g1: &RandomizedController,
        g2: Option<&RandomizedController>,
        w: &EstimatorTable,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_controllers(g1, g2)?;
        self.check_table(w)?;
        let nx = self.source.len();
        match stage {
            Stage::G1 => {
                let bw = self.build_bw(g2, w);
                let k1_sq = self.problem.k1 * self.problem.k1;
                let mut rows = vec![vec![0.0; nx]; g1.n_models()];
                for (m, row) in rows.iter_mut().enumerate() {
                    row.par_iter_mut().enumerate().for_each(|(i, d)| {
                        let x0 = self.source.points()[i];
                        let g = g1.evaluate_model(m, x0);
                        let x1 = x0 + g;
                        *d = k1_sq * g * g + self.stage1_point_error(i, x1, &bw);
                    });
                }
                Ok(rows)
            }
            Stage::G2 => {
                let g2 = g2.ok_or_else(|| {
                    Error::VariantMismatch(
                        "stage-2 partial costs need the side-channel variant".into(),
                    )
                })?;
                let z_grid = self.z_grid.as_ref().unwrap();
                let hz = z_grid.weights().to_vec();
                let a =
                    build_a_fields(g1, &self.source, &self.y_grid, self.problem.obs_noise.std);
                let inner = self.build_inner(&a, w);
                let nz = z_grid.len();
                let k2_sq = self.problem.k2_sq();
                let sigma2 = self.problem.side_noise.std;
                let mut rows = vec![vec![0.0; nx]; g2.n_models()];
                for (m, row) in rows.iter_mut().enumerate() {
                    row.par_iter_mut().enumerate().for_each(|(i, d)| {
                        let x0 = self.source.points()[i];
                        let gv = g2.evaluate_model(m, x0);
                        let mut acc = 0.0;
                        for_each_kernel_point(gv, sigma2, z_grid, |l, phi| {
                            acc += hz[l] * phi * inner[i * nz + l];
                        });
                        *d = k2_sq * gv * gv + acc;
                    });
                }
                Ok(rows)
            }
        }
    }

    /// Stage-one share of D: (control cost, estimation error) under fixed
    /// side-channel fields and estimator.
    pub(crate) fn stage1_terms(&self, g1: &RandomizedController, bw: &BwFields) -> (f64, f64) {
        let k1_sq = self.problem.k1 * self.problem.k1;
        let parts: Vec<(f64, f64)> = (0..self.source.len())
            .into_par_iter()
            .map(|i| {
                let x0 = self.source.points()[i];
                let wi = self.source.weights()[i];
                let mut control = 0.0;
                let mut err = 0.0;
                for m in 0..g1.n_models() {
                    let p = g1.assoc.prob(m, i);
                    let g = g1.evaluate_model(m, x0);
                    let x1 = x0 + g;
                    control += p * g * g;
                    err += p * self.stage1_point_error(i, x1, bw);
                }
                (wi * control, wi * err)
            })
            .collect();
        let control: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let err: Vec<f64> = parts.iter().map(|p| p.1).collect();
        (k1_sq * pairwise_sum(&control), pairwise_sum(&err))
    }

    /// Integrated stage-two error field for trial edits of the side-channel
    /// bank: `inner(i, l)` at fixed first stage and estimator.
    pub(crate) fn stage2_inner(
        &self,
        g1: &RandomizedController,
        w: &EstimatorTable,
    ) -> Vec<f64> {
        let a = build_a_fields(g1, &self.source, &self.y_grid, self.problem.obs_noise.std);
        self.build_inner(&a, w)
    }

    /// Side-channel share of D: (power cost, estimation error) under fixed
    /// first-stage fields and estimator.
    pub(crate) fn stage2_terms(&self, g2: &RandomizedController, inner: &[f64]) -> (f64, f64) {
        let z_grid = self.z_grid.as_ref().unwrap();
        let nz = z_grid.len();
        let hz = z_grid.weights();
        let k2_sq = self.problem.k2_sq();
        let sigma2 = self.problem.side_noise.std;
        let parts: Vec<(f64, f64)> = (0..self.source.len())
            .into_par_iter()
            .map(|i| {
                let x0 = self.source.points()[i];
                let wi = self.source.weights()[i];
                let mut power = 0.0;
                let mut err = 0.0;
                for m in 0..g2.n_models() {
                    let p = g2.assoc.prob(m, i);
                    let gv = g2.evaluate_model(m, x0);
                    power += p * gv * gv;
                    let mut acc = 0.0;
                    for_each_kernel_point(gv, sigma2, z_grid, |l, phi| {
                        acc += hz[l] * phi * inner[i * nz + l];
                    });
                    err += p * acc;
                }
                (wi * power, wi * err)
            })
            .collect();
        let power: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let err: Vec<f64> = parts.iter().map(|p| p.1).collect();
        (k2_sq * pairwise_sum(&power), pairwise_sum(&err))
    }

    /// Analytic ∂D/∂(aₘ, bₘ) for every model of the requested stage, at
    /// fixed associations and estimator. Exposed for gradient validation.
    pub fn model_gradients(
        &self,
        stage: Stage,
        g1: &RandomizedController,
        g2: Option<&RandomizedController>,
        w: &EstimatorTable,
    ) -> Result<Vec<(f64, f64)>> {
        self.check_controllers(g1, g2)?;
        self.check_table(w)?;
        match stage {
            Stage::G1 => {
                let bw = self.build_bw(g2, w);
                Ok(self.stage1_gradients(g1, &bw))
            }
            Stage::G2 => {
                let g2 = g2.ok_or_else(|| {
                    Error::VariantMismatch(
                        "stage-2 gradients need the side-channel variant".into(),
                    )
                })?;
                let a =
                    build_a_fields(g1, &self.source, &self.y_grid, self.problem.obs_noise.std);
                let inner = self.build_inner(&a, w);
                Ok(self.stage2_gradients(g2, &inner))
            }
        }
    }

    /// ∂D/∂x₁ pushed through ∂x₁/∂a = x₀, ∂x₁/∂b = 1. The kernel itself
    /// depends on x₁: ∂φ(y−x₁)/∂x₁ = ((y−x₁)/σ²)·φ(y−x₁).
    fn stage1_gradients(&self, g1: &RandomizedController, bw: &BwFields) -> Vec<(f64, f64)> {
        let k1_sq = self.problem.k1 * self.problem.k1;
        let sigma = self.problem.obs_noise.std;
        let inv_s2 = 1.0 / (sigma * sigma);
        let hy = self.y_grid.weights();
        let ypts = self.y_grid.points();
        (0..g1.n_models())
            .map(|m| {
                let terms: Vec<(f64, f64)> = (0..self.source.len())
                    .into_par_iter()
                    .map(|i| {
                        let x0 = self.source.points()[i];
                        let p = g1.assoc.prob(m, i);
                        if p == 0.0 {
                            return (0.0, 0.0);
                        }
                        let g = g1.evaluate_model(m, x0);
                        let x1 = x0 + g;
                        let mut dd_dx1 = 2.0 * k1_sq * g;
                        for_each_kernel_point(x1, sigma, &self.y_grid, |j, phi| {
                            let (b0, b1, b2) = bw.at(i, j);
                            let q = x1 * x1 * b0 - 2.0 * x1 * b1 + b2;
                            let dphi = (ypts[j] - x1) * inv_s2 * phi;
                            dd_dx1 += hy[j] * (dphi * q + phi * (2.0 * x1 * b0 - 2.0 * b1));
                        });
                        let f = self.source.weights()[i] * p;
                        (f * dd_dx1 * x0, f * dd_dx1)
                    })
                    .collect();
                let da: Vec<f64> = terms.iter().map(|t| t.0).collect();
                let db: Vec<f64> = terms.iter().map(|t| t.1).collect();
                (pairwise_sum(&da), pairwise_sum(&db))
            })
            .collect()
    }

    /// ∂D/∂g₂ pushed through ∂g₂/∂a = x₀, ∂g₂/∂b = 1, with
    /// ∂φ_σ(z−g₂)/∂g₂ = ((z−g₂)/σ²)·φ_σ(z−g₂).
    fn stage2_gradients(&self, g2: &RandomizedController, inner: &[f64]) -> Vec<(f64, f64)> {
        let z_grid = self.z_grid.as_ref().unwrap();
        let nz = z_grid.len();
        let hz = z_grid.weights();
        let zpts = z_grid.points();
        let k2_sq = self.problem.k2_sq();
        let sigma = self.problem.side_noise.std;
        let inv_s2 = 1.0 / (sigma * sigma);
        (0..g2.n_models())
            .map(|m| {
                let terms: Vec<(f64, f64)> = (0..self.source.len())
                    .into_par_iter()
                    .map(|i| {
                        let x0 = self.source.points()[i];
                        let p = g2.assoc.prob(m, i);
                        if p == 0.0 {
                            return (0.0, 0.0);
                        }
                        let gv = g2.evaluate_model(m, x0);
                        let mut dd_dg = 2.0 * k2_sq * gv;
                        for_each_kernel_point(gv, sigma, z_grid, |l, phi| {
                            let dphi = (zpts[l] - gv) * inv_s2 * phi;
                            dd_dg += hz[l] * dphi * inner[i * nz + l];
                        });
                        let f = self.source.weights()[i] * p;
                        (f * dd_dg * x0, f * dd_dg)
                    })
                    .collect();
                let da: Vec<f64> = terms.iter().map(|t| t.0).collect();
                let db: Vec<f64> = terms.iter().map(|t| t.1).collect();
                (pairwise_sum(&da), pairwise_sum(&db))
            })
            .collect()
    }

    /// Block-coordinate gradient descent on the local-model parameters at
    /// fixed associations and estimator: first stage, then the side-channel
    /// stage. Every line search is monotone in the stage's share of D, so D
    /// never increases.
    pub fn descend_models(
        &self,
        g1: &mut RandomizedController,
        mut g2: Option<&mut RandomizedController>,
        w: &EstimatorTable,
        opts: &DescentOptions,
    ) -> Result<DescentOutcome> {
        self.check_controllers(g1, g2.as_deref())?;
        self.check_table(w)?;

        // Stage 1 at fixed side-channel fields.
        let bw = self.build_bw(g2.as_deref(), w);
        let (stage1_before, stage1_after, acc1) = descend_stage(
            g1,
            opts,
            "first-stage",
            |c| {
                let (control, err) = self.stage1_terms(c, &bw);
                control + err
            },
            |c| self.stage1_gradients(c, &bw),
        )?;

        // Stage 2 at fixed (updated) first-stage fields.
        let (stage2_before, stage2_after, acc2) = match g2.as_deref_mut() {
            None => (0.0, 0.0, 0),
            Some(g2) => {
                let a = build_a_fields(
                    g1,
                    &self.source,
                    &self.y_grid,
                    self.problem.obs_noise.std,
                );
                let inner = self.build_inner(&a, w);
                descend_stage(
                    g2,
                    opts,
                    "side-channel",
                    |c| {
                        let (power, err) = self.stage2_terms(c, &inner);
                        power + err
                    },
                    |c| self.stage2_gradients(c, &inner),
                )?
            }
        };

        Ok(DescentOutcome {
            stage1_before,
            stage1_after,
            stage2_before,
            stage2_after,
            accepted_steps: acc1 + acc2,
        })
    }
}

/// Shared per-stage descent loop: normalized steepest-descent direction,
/// backtracking line search, adaptive trial-step growth. Returns the
/// stage's share of D before and after, plus the accepted step count.
fn descend_stage(
    ctrl: &mut RandomizedController,
    opts: &DescentOptions,
    label: &str,
    mut eval: impl FnMut(&RandomizedController) -> f64,
    mut grad: impl FnMut(&RandomizedController) -> Vec<(f64, f64)>,
) -> Result<(f64, f64, u32)> {
    let before = eval(ctrl);
    let mut current = before;
    let mut trial = opts.initial_step.min(opts.step_cap);
    let mut accepted = 0u32;
    for _ in 0..opts.max_steps_per_stage {
        let grads = grad(ctrl);
        if grads.iter().any(|(da, db)| !da.is_finite() || !db.is_finite()) {
            return Err(Error::NonFinite(format!("{label} gradient")));
        }
        let norm = grads
            .iter()
            .map(|(da, db)| da * da + db * db)
            .sum::<f64>()
            .sqrt();
        if norm <= 1e-300 {
            break;
        }
        let saved = ctrl.bank.models.clone();
        let mut s = trial;
        let mut improved = false;
        for _ in 0..=opts.max_backtracks {
            for (m, lm) in ctrl.bank.models.iter_mut().enumerate() {
                lm.a = saved[m].a - s * grads[m].0 / norm;
                lm.b = saved[m].b - s * grads[m].1 / norm;
            }
            let f = eval(ctrl);
            if f <= current + opts.accept_slack {
                current = f;
                improved = true;
                accepted += 1;
                trial = (s * 2.0).min(opts.step_cap);
                break;
            }
            s *= opts.backtrack_factor;
        }
        if !improved {
            ctrl.bank.models.clone_from(&saved);
            break;
        }
    }
    Ok((before, current, accepted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{AssociationMatrix, LocalModel, LocalModelBank};
    use crate::estimator::{make_observation_grid, observation_extent};
    use crate::quadrature::make_source_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wce_workspace(k1: f64, sigma: f64, nx: usize, ny: usize) -> Workspace {
        let problem = ProblemSpec::wce(k1, sigma).unwrap();
        let source = make_source_grid(&problem.source, nx).unwrap();
        let y_grid = make_observation_grid(observation_extent(5.0 * sigma, 1.0), ny).unwrap();
        Workspace::new(problem, source, y_grid, None).unwrap()
    }

    fn zero_g1(n: usize) -> RandomizedController {
        RandomizedController::single(Stage::G1, LocalModel { a: 0.0, b: 0.0 }, n).unwrap()
    }

    #[test]
    fn gibbs_equal_costs_give_uniform() {
        let mut assoc = AssociationMatrix::uniform(3, 4).unwrap();
        let partial = vec![vec![5.0; 4], vec![5.0; 4], vec![5.0; 4]];
        gibbs_update(&mut assoc, &partial, 1.0).unwrap();
        for i in 0..4 {
            for m in 0..3 {
                assert!((assoc.prob(m, i) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gibbs_two_model_logistic_value() {
        // d = (0, 1) at T = 1: p₀ = 1/(1+e⁻¹) = 0.7310585786300049.
        let mut assoc = AssociationMatrix::uniform(2, 1).unwrap();
        gibbs_update(&mut assoc, &[vec![0.0], vec![1.0]], 1.0).unwrap();
        assert!((assoc.prob(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((assoc.prob(1, 0) - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn gibbs_is_shift_invariant_and_normalized() {
        let mut a1 = AssociationMatrix::uniform(3, 5).unwrap();
        let mut a2 = AssociationMatrix::uniform(3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<Vec<f64>> =
            (0..3).map(|_| (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let shifted: Vec<Vec<f64>> = d
            .iter()
            .map(|row| row.iter().enumerate().map(|(i, v)| v + 100.0 * i as f64).collect())
            .collect();
        gibbs_update(&mut a1, &d, 0.7).unwrap();
        gibbs_update(&mut a2, &shifted, 0.7).unwrap();
        for i in 0..5 {
            let col: f64 = (0..3).map(|m| a1.prob(m, i)).sum();
            assert!((col - 1.0).abs() < 1e-12);
            for m in 0..3 {
                assert!((a1.prob(m, i) - a2.prob(m, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gibbs_high_temperature_is_uniform() {
        let mut assoc = AssociationMatrix::uniform(4, 3).unwrap();
        let d = vec![vec![0.0; 3], vec![1.0; 3], vec![2.0; 3], vec![3.0; 3]];
        gibbs_update(&mut assoc, &d, 1e15).unwrap();
        for i in 0..3 {
            for m in 0..4 {
                assert!((assoc.prob(m, i) - 0.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gibbs_low_temperature_equals_quench() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d: Vec<Vec<f64>> =
            (0..4).map(|_| (0..6).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
        let mut cold = AssociationMatrix::uniform(4, 6).unwrap();
        gibbs_update(&mut cold, &d, 1e-12).unwrap();
        let mut warm = AssociationMatrix::uniform(4, 6).unwrap();
        gibbs_update(&mut warm, &d, 0.5).unwrap();
        warm.quench();
        // The floor keeps cold losers at ~1e-300 rather than exactly 0, so
        // compare winners and winner mass instead of raw matrices.
        for i in 0..6 {
            let m = warm.argmax_column(i);
            assert_eq!(cold.argmax_column(i), m);
            assert!((cold.prob(m, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gibbs_rejects_bad_temperature() {
        let mut assoc = AssociationMatrix::uniform(2, 2).unwrap();
        let d = vec![vec![0.0; 2]; 2];
        assert!(gibbs_update(&mut assoc, &d, 0.0).is_err());
        assert!(gibbs_update(&mut assoc, &d, -1.0).is_err());
        assert!(gibbs_update(&mut assoc, &d, f64::INFINITY).is_err());
    }

    /// With g₁ ≡ 0 (k = 0.2, σ = 5) the optimal estimator is linear and
    /// D = σ²/(σ²+1) = 25/26.
    #[test]
    fn zero_mapping_cost_matches_closed_form() {
        let ws = wce_workspace(0.2, 5.0, 301, 501);
        let g1 = zero_g1(ws.source().len());
        let w = ws.rebuild_estimator(&g1, None).unwrap();
        let cost = ws.expected_cost(&g1, None, &w).unwrap();
        assert_eq!(cost.control_cost, 0.0);
        assert!((cost.total_d - 25.0 / 26.0).abs() < 2e-3);
        assert!((cost.estimation_error - 25.0 / 26.0).abs() < 2e-3);
        assert_eq!(cost.entropy, 0.0);
        assert_eq!(cost.free_energy(1.0), cost.total_d);
    }

    /// The one-step quantizer x₁ = σ·sgn(x₀) at k = 0.2, σ = 5 costs
    /// 0.404253 — the classic two-point design.
    #[test]
    fn one_step_quantizer_cost_matches_reference() {
        let ws = wce_workspace(0.2, 5.0, 601, 501);
        let n = ws.source().len();
        let bank = LocalModelBank::new(
            Stage::G1,
            vec![LocalModel { a: -1.0, b: -5.0 }, LocalModel { a: -1.0, b: 5.0 }],
        )
        .unwrap();
        let mut rows = vec![vec![0.0; n], vec![0.0; n]];
        for (i, &x0) in ws.source().points().iter().enumerate() {
            if x0 < 0.0 {
                rows[0][i] = 1.0;
            } else {
                rows[1][i] = 1.0;
            }
        }
        let assoc = AssociationMatrix::from_rows(rows).unwrap();
        let g1 = RandomizedController::new(bank, assoc).unwrap();
        let w = ws.rebuild_estimator(&g1, None).unwrap();
        let cost = ws.expected_cost(&g1, None, &w).unwrap();
        assert!(
            (cost.total_d - 0.404253).abs() < 2e-3,
            "one-step cost {} vs 0.404253",
            cost.total_d
        );
    }

    /// Σᵢ wᵢ Σₘ p(m|i)·d(m,i) must reproduce the stage's share of D for
    /// both stages: control + estimation error via stage 1, side power +
    /// estimation error via stage 2.
    #[test]
    fn partial_costs_integrate_to_expected_cost() {
        let problem = ProblemSpec::side_channel(0.3, 0.4, 2.0, 0.8).unwrap();
        let source = make_source_grid(&problem.source, 61).unwrap();
        let y_grid = make_observation_grid(observation_extent(12.0, 1.0), 201).unwrap();
        let z_grid = make_observation_grid(observation_extent(3.0, 0.8), 101).unwrap();
        let ws = Workspace::new(problem, source, y_grid, Some(z_grid)).unwrap();
        let n = ws.source().len();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut random_assoc = |models: usize| {
            AssociationMatrix::from_rows(
                (0..models)
                    .map(|_| (0..n).map(|_| rng.gen_range(0.05..1.0)).collect())
                    .collect(),
            )
            .unwrap()
        };
        let g1 = RandomizedController::new(
            LocalModelBank::new(
                Stage::G1,
                vec![LocalModel { a: -0.6, b: 1.2 }, LocalModel { a: -0.2, b: -0.7 }],
            )
            .unwrap(),
            random_assoc(2),
        )
        .unwrap();
        let g2 = RandomizedController::new(
            LocalModelBank::new(
                Stage::G2,
                vec![LocalModel { a: 0.8, b: 0.0 }, LocalModel { a: -0.3, b: 0.5 }],
            )
            .unwrap(),
            random_assoc(2),
        )
        .unwrap();
        let w = ws.rebuild_estimator(&g1, Some(&g2)).unwrap();
        let cost = ws.expected_cost(&g1, Some(&g2), &w).unwrap();

        let d1 = ws.partial_costs(Stage::G1, &g1, Some(&g2), &w).unwrap();
        let mut sum1 = 0.0;
        for (m, row) in d1.iter().enumerate() {
            for i in 0..n {
                sum1 += ws.source().weights()[i] * g1.assoc.prob(m, i) * row[i];
            }
        }
        let want1 = cost.control_cost + cost.estimation_error;
        assert!(
            (sum1 - want1).abs() < 1e-9 * want1.max(1.0),
            "stage-1 partials integrate to {sum1} vs {want1}"
        );

        let d2 = ws.partial_costs(Stage::G2, &g1, Some(&g2), &w).unwrap();
        let mut sum2 = 0.0;
        for (m, row) in d2.iter().enumerate() {
            for i in 0..n {
                sum2 += ws.source().weights()[i] * g2.assoc.prob(m, i) * row[i];
            }
        }
        let want2 = cost.side_power_cost + cost.estimation_error;
        assert!(
            (sum2 - want2).abs() < 1e-9 * want2.max(1.0),
            "stage-2 partials integrate to {sum2} vs {want2}"
        );
    }

    /// On a tiny lattice, enumerate every deterministic assignment of
    /// source nodes to models at a fixed shared estimator. The partial
    /// costs must reproduce each assignment's D exactly, and the Gibbs
    /// quench at that estimator must pick the brute-force minimizer.
    #[test]
    fn brute_force_assignment_agrees_with_partial_costs() {
        let problem = ProblemSpec::wce(0.4, 1.0).unwrap();
        let source = make_source_grid(&problem.source, 7).unwrap();
        let y_grid = make_observation_grid(7.5, 31).unwrap();
        let ws = Workspace::new(problem, source, y_grid, None).unwrap();
        let n = ws.source().len();
        let bank = LocalModelBank::new(
            Stage::G1,
            vec![LocalModel { a: -1.0, b: -0.8 }, LocalModel { a: -1.0, b: 0.8 }],
        )
        .unwrap();
        // Fixed estimator shared by every assignment: built at uniform p.
        let uniform = RandomizedController::new(
            bank.clone(),
            AssociationMatrix::uniform(2, n).unwrap(),
        )
        .unwrap();
        let w = ws.rebuild_estimator(&uniform, None).unwrap();
        let d = ws.partial_costs(Stage::G1, &uniform, None, &w).unwrap();

        let mut best_direct = f64::INFINITY;
        let mut best_partial = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            let mut rows = vec![vec![0.0; n], vec![0.0; n]];
            let mut via_partial = 0.0;
            for i in 0..n {
                let m = ((mask >> i) & 1) as usize;
                rows[m][i] = 1.0;
                via_partial += ws.source().weights()[i] * d[m][i];
            }
            let ctrl = RandomizedController::new(
                bank.clone(),
                AssociationMatrix::from_rows(rows).unwrap(),
            )
            .unwrap();
            let direct = ws.expected_cost(&ctrl, None, &w).unwrap().total_d;
            assert!(
                (direct - via_partial).abs() < 1e-10 * direct.max(1.0),
                "assignment {mask:07b}: direct {direct} vs partials {via_partial}"
            );
            best_direct = best_direct.min(direct);
            best_partial = best_partial.min(via_partial);
        }

        // Gibbs at vanishing temperature (= per-column argmin) must land on
        // the brute-force optimum, since D is column-separable at fixed W.
        let mut quenched = AssociationMatrix::uniform(2, n).unwrap();
        gibbs_update(&mut quenched, &d, 1e-12).unwrap();
        let ctrl = RandomizedController::new(bank, quenched).unwrap();
        let quench_cost = ws.expected_cost(&ctrl, None, &w).unwrap().total_d;
        assert!(
            (quench_cost - best_direct).abs() < 1e-10 * best_direct.max(1.0),
            "quench {quench_cost} vs brute force {best_direct}"
        );
        assert!((best_partial - best_direct).abs() < 1e-10 * best_direct.max(1.0));
    }

    /// Central finite differences validate the analytic gradients across
    /// many random configurations of both variants.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut max_rel = 0.0f64;
        for case in 0..50 {
            let side = case % 2 == 1;
            let k1 = rng.gen_range(0.15..0.8);
            let sigma0 = rng.gen_range(0.8..2.0);
            let problem = if side {
                ProblemSpec::side_channel(k1, rng.gen_range(0.1..0.6), sigma0, rng.gen_range(0.5..1.2))
                    .unwrap()
            } else {
                ProblemSpec::wce(k1, sigma0).unwrap()
            };
            let source = make_source_grid(&problem.source, 21).unwrap();
            let y_grid =
                make_observation_grid(observation_extent(6.0 * sigma0, 1.0), 81).unwrap();
            let z_grid = if side {
                Some(make_observation_grid(observation_extent(3.0, problem.side_noise.std), 61).unwrap())
            } else {
                None
            };
            let ws = Workspace::new(problem, source, y_grid, z_grid).unwrap();
            let n = ws.source().len();
            let mk_ctrl = |stage: Stage, rng: &mut ChaCha8Rng| {
                let models = (0..2)
                    .map(|_| LocalModel {
                        a: rng.gen_range(-1.2..0.8),
                        b: rng.gen_range(-1.0..1.0),
                    })
                    .collect();
                let rows = (0..2)
                    .map(|_| (0..n).map(|_| rng.gen_range(0.1..1.0)).collect())
                    .collect();
                RandomizedController::new(
                    LocalModelBank::new(stage, models).unwrap(),
                    AssociationMatrix::from_rows(rows).unwrap(),
                )
                .unwrap()
            };
            let g1 = mk_ctrl(Stage::G1, &mut rng);
            let g2 = side.then(|| mk_ctrl(Stage::G2, &mut rng));
            let w = ws.rebuild_estimator(&g1, g2.as_ref()).unwrap();

            let stages: Vec<Stage> =
                if side { vec![Stage::G1, Stage::G2] } else { vec![Stage::G1] };
            for stage in stages {
                let grads = ws.model_gradients(stage, &g1, g2.as_ref(), &w).unwrap();
                for m in 0..2 {
                    for param in 0..2 {
                        let h = 1e-5;
                        let eval = |delta: f64| {
                            let mut g1c = g1.clone();
                            let mut g2c = g2.clone();
                            let target = match stage {
                                Stage::G1 => &mut g1c.bank.models[m],
                                Stage::G2 => &mut g2c.as_mut().unwrap().bank.models[m],
                            };
                            if param == 0 {
                                target.a += delta;
                            } else {
                                target.b += delta;
                            }
                            ws.expected_cost(&g1c, g2c.as_ref(), &w).unwrap().total_d
                        };
                        let fd = (eval(h) - eval(-h)) / (2.0 * h);
                        let an = if param == 0 { grads[m].0 } else { grads[m].1 };
                        let rel = (an - fd).abs() / fd.abs().max(1e-3);
                        max_rel = max_rel.max(rel);
                        assert!(
                            rel < 1e-4,
                            "case {case} stage {:?} model {m} param {param}: analytic {an} vs fd {fd}",
                            stage
                        );
                    }
                }
            }
        }
        assert!(max_rel < 1e-4, "worst relative gradient error {max_rel}");
    }

    /// One full coordinate sweep (Gibbs → descend → estimator rebuild)
    /// never increases the free energy, at any temperature.
    #[test]
    fn coordinate_sweeps_never_increase_free_energy() {
        let problem = ProblemSpec::side_channel(0.25, 0.3, 1.5, 0.9).unwrap();
        let source = make_source_grid(&problem.source, 41).unwrap();
        let y_grid = make_observation_grid(observation_extent(9.0, 1.0), 121).unwrap();
        let z_grid = make_observation_grid(observation_extent(3.0, 0.9), 81).unwrap();
        let ws = Workspace::new(problem, source, y_grid, Some(z_grid)).unwrap();
        let n = ws.source().len();
        let mut g1 = RandomizedController::new(
            LocalModelBank::new(
                Stage::G1,
                vec![LocalModel { a: -0.9, b: 0.4 }, LocalModel { a: 0.1, b: -0.2 }],
            )
            .unwrap(),
            AssociationMatrix::uniform(2, n).unwrap(),
        )
        .unwrap();
        let mut g2 = RandomizedController::new(
            LocalModelBank::new(
                Stage::G2,
                vec![LocalModel { a: 0.6, b: 0.1 }, LocalModel { a: -0.5, b: -0.3 }],
            )
            .unwrap(),
            AssociationMatrix::uniform(2, n).unwrap(),
        )
        .unwrap();
        let mut w = ws.rebuild_estimator(&g1, Some(&g2)).unwrap();
        for &t in &[2.0, 0.5, 0.05, 0.004] {
            let mut f_prev = ws.expected_cost(&g1, Some(&g2), &w).unwrap().free_energy(t);
            for _ in 0..4 {
                let d1 = ws.partial_costs(Stage::G1, &g1, Some(&g2), &w).unwrap();
                gibbs_update(&mut g1.assoc, &d1, t).unwrap();
                let d2 = ws.partial_costs(Stage::G2, &g1, Some(&g2), &w).unwrap();
                gibbs_update(&mut g2.assoc, &d2, t).unwrap();
                ws.descend_models(&mut g1, Some(&mut g2), &w, &DescentOptions::default())
                    .unwrap();
                w = ws.rebuild_estimator(&g1, Some(&g2)).unwrap();
                let f = ws.expected_cost(&g1, Some(&g2), &w).unwrap().free_energy(t);
                assert!(
                    f <= f_prev + 1e-9 * (1.0 + f_prev.abs()),
                    "sweep increased F at T={t}: {f_prev} -> {f}"
                );
                f_prev = f;
            }
        }
    }

    #[test]
    fn descent_reduces_cost_from_poor_start() {
        let ws = wce_workspace(0.2, 5.0, 151, 301);
        let n = ws.source().len();
        let mut g1 = RandomizedController::single(
            Stage::G1,
            LocalModel { a: 0.4, b: 0.3 },
            n,
        )
        .unwrap();
        let w = ws.rebuild_estimator(&g1, None).unwrap();
        let before = ws.expected_cost(&g1, None, &w).unwrap().total_d;
        let out = ws
            .descend_models(&mut g1, None, &w, &DescentOptions {
                max_steps_per_stage: 20,
                ..DescentOptions::default()
            })
            .unwrap();
        let after = ws.expected_cost(&g1, None, &w).unwrap().total_d;
        assert!(out.accepted_steps > 0);
        assert!(after < before - 1e-4, "descent {before} -> {after}");
        assert!((out.stage1_after - after).abs() < 1e-9);
    }

    #[test]
    fn entropy_zero_means_f_equals_d() {
        let ws = wce_workspace(0.2, 5.0, 101, 201);
        let g1 = zero_g1(ws.source().len());
        let w = ws.rebuild_estimator(&g1, None).unwrap();
        let cost = ws.expected_cost(&g1, None, &w).unwrap();
        assert_eq!(cost.entropy, 0.0);
        for &t in &[1e-3, 1.0, 1e3] {
            assert_eq!(cost.free_energy(t), cost.total_d);
        }
    }

    /// Adding an informative side channel must beat the plain variant's
    /// estimation error at the same first stage.
    #[test]
    fn side_channel_reduces_estimation_error() {
        let sigma = 2.0;
        let plain = ProblemSpec::wce(0.3, sigma).unwrap();
        let source = make_source_grid(&plain.source, 101).unwrap();
        let y_grid = make_observation_grid(observation_extent(5.0 * sigma, 1.0), 201).unwrap();
        let ws_plain =
            Workspace::new(plain, source.clone(), y_grid.clone(), None).unwrap();
        let g1 = zero_g1(source.len());
        let w_plain = ws_plain.rebuild_estimator(&g1, None).unwrap();
        let err_plain =
            ws_plain.expected_cost(&g1, None, &w_plain).unwrap().estimation_error;

        let side = ProblemSpec::side_channel(0.3, 0.1, sigma, 0.5).unwrap();
        let z_grid =
            make_observation_grid(observation_extent(5.0 * sigma, 0.5), 161).unwrap();
        let ws_side = Workspace::new(side, source.clone(), y_grid, Some(z_grid)).unwrap();
        // side channel transmits x₀ directly
        let g2 = RandomizedController::single(
            Stage::G2,
            LocalModel { a: 1.0, b: 0.0 },
            source.len(),
        )
        .unwrap();
        let w_side = ws_side.rebuild_estimator(&g1, Some(&g2)).unwrap();
        let err_side = ws_side
            .expected_cost(&g1, Some(&g2), &w_side)
            .unwrap()
            .estimation_error;
        assert!(
            err_side < 0.5 * err_plain,
            "side channel {err_side} vs plain {err_plain}"
        );
    }
}
