//! Closed-form MMSE second controller.
//!
//! Given the randomized first stage (and optionally the side-channel stage),
//! the cost-minimizing second controller is the conditional mean
//! W(y₁, z) = E{x₁ | y₁, z}, a ratio of Gaussian-mixture integrals:
//!
//!   W(y,z) = Σᵢ wᵢ Σ_{m₁,m₂} p₁p₂ · x₁ᵢ(m₁) · φ(y−x₁ᵢ(m₁)) · φ_σ(z−g₂ᵢ(m₂))
//!            ───────────────────────────────────────────────────────────────
//!            (the same sum without the x₁ factor)
//!
//! Both sums factor over the stages, so the table is assembled from the
//! cached stage fields in O(Nx·Ny·Nz). Because the same discretization is
//! used when scoring the expected estimation error, the rebuilt table is the
//! exact minimizer of the discretized objective — the coordinate-descent
//! step through the estimator can never increase the free energy.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::controller::RandomizedController;
use crate::error::{Error, Result};
use crate::fields::{build_a_fields, build_b_fields, AFields, BFields};
use crate::problem::ProblemSpec;
use crate::quadrature::{Grid1D, SUPPORT_SIGMAS};
use crate::util::pairwise_sum;

/// Denominator floor below which a cell falls back to the prior mean.
const DEN_FLOOR: f64 = 1e-300;

/// Tabulated second controller: W over the observation grid(s), evaluated
/// by (bi)linear interpolation with clamping outside the table.
#[derive(Debug)]
pub struct EstimatorTable {
    y_grid: Grid1D,
    z_grid: Option<Grid1D>,
    /// Row-major `[j·nz + l]` with a z grid, else `[j]`.
    values: Vec<f64>,
    /// E{x₁} under the randomized first stage; used where the observation
    /// likelihood has no numerical support.
    prior_mean: f64,
    /// Number of table cells that fell back to the prior mean.
    fallback_cells: u64,
    /// Number of estimate() calls that clamped an out-of-table coordinate.
    clamp_events: AtomicU64,
}

impl Clone for EstimatorTable {
    fn clone(&self) -> Self {
        Self {
            y_grid: self.y_grid.clone(),
            z_grid: self.z_grid.clone(),
            values: self.values.clone(),
            prior_mean: self.prior_mean,
            fallback_cells: self.fallback_cells,
            clamp_events: AtomicU64::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

impl EstimatorTable {
    pub fn y_grid(&self) -> &Grid1D {
        &self.y_grid
    }

    pub fn z_grid(&self) -> Option<&Grid1D> {
        self.z_grid.as_ref()
    }

    pub fn has_side_channel(&self) -> bool {
        self.z_grid.is_some()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Table value at node (j) or (j, l).
    pub fn value_at(&self, j: usize, l: usize) -> f64 {
        match &self.z_grid {
            Some(z) => self.values[j * z.len() + l],
            None => self.values[j],
        }
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn fallback_cells(&self) -> u64 {
        self.fallback_cells
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    /// Interpolated estimate x̂₁ = W(y) or W(y, z). The side-channel
    /// coordinate must be supplied exactly when the table has a z grid.
    pub fn estimate(&self, y: f64, z: Option<f64>) -> Result<f64> {
        match (&self.z_grid, z) {
            (None, None) => {
                let (j, t) = self.locate(&self.y_grid, y);
                Ok(self.values[j] * (1.0 - t) + self.values[j + 1] * t)
            }
            (Some(zg), Some(zv)) => {
                let nz = zg.len();
                let (j, ty) = self.locate(&self.y_grid, y);
                let (l, tz) = self.locate(zg, zv);
                let v00 = self.values[j * nz + l];
                let v01 = self.values[j * nz + l + 1];
                let v10 = self.values[(j + 1) * nz + l];
                let v11 = self.values[(j + 1) * nz + l + 1];
                Ok(v00 * (1.0 - ty) * (1.0 - tz)
                    + v01 * (1.0 - ty) * tz
                    + v10 * ty * (1.0 - tz)
                    + v11 * ty * tz)
            }
            (None, Some(_)) => Err(Error::VariantMismatch(
                "estimator table has no side-channel axis but z was supplied".into(),
            )),
            (Some(_), None) => Err(Error::VariantMismatch(
                "estimator table has a side-channel axis but no z was supplied".into(),
            )),
        }
    }

    /// Cell index and interpolation fraction for a coordinate, clamped to
    /// the table.
    fn locate(&self, grid: &Grid1D, x: f64) -> (usize, f64) {
        let lo = grid.lo();
        let hi = grid.hi();
        if x < lo || x > hi {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
        }
        let u = ((x - lo) / grid.spacing()).clamp(0.0, (grid.len() - 1) as f64);
        let j = (u.floor() as usize).min(grid.len() - 2);
        (j, (u - j as f64).clamp(0.0, 1.0))
    }
}

/// Half-width of an observation grid for a channel carrying signals up to
/// `max_abs_signal` plus noise of the given deviation.
pub fn observation_extent(max_abs_signal: f64, noise_std: f64) -> f64 {
    max_abs_signal + SUPPORT_SIGMAS * noise_std
}

/// Symmetric uniform observation grid on ±extent.
pub fn make_observation_grid(extent: f64, n: usize) -> Result<Grid1D> {
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "observation extent must be positive, got {extent}"
        )));
    }
    if n % 2 == 0 || n < 3 {
        return Err(Error::InvalidParameter(format!(
            "observation grid needs an odd point count of at least 3, got {n}"
        )));
    }
    Grid1D::uniform_quadrature(-extent, extent, n)
}

/// E{x₁} under the randomized first stage.
pub(crate) fn prior_signal_mean(g1: &RandomizedController, source: &Grid1D) -> f64 {
    let terms: Vec<f64> = (0..source.len())
        .map(|i| {
            let x0 = source.points()[i];
            let mut s = 0.0;
            for m in 0..g1.n_models() {
                s += g1.assoc.prob(m, i) * (x0 + g1.evaluate_model(m, x0));
            }
            source.weights()[i] * s
        })
        .collect();
    pairwise_sum(&terms)
}

/// Build the MMSE table from precomputed stage fields.
pub(crate) fn build_from_fields(
    a: &AFields,
    b: Option<&BFields>,
    source: &Grid1D,
    y_grid: Grid1D,
    z_grid: Option<Grid1D>,
    prior_mean: f64,
) -> EstimatorTable {
    let nx = source.len();
    let ny = y_grid.len();
    debug_assert_eq!(a.ny, ny);
    match (b, &z_grid) {
        (None, None) => {
            let mut values = vec![0.0; ny];
            let fallback: u64 = values
                .par_iter_mut()
                .enumerate()
                .map(|(j, v)| {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for i in 0..nx {
                        let w = source.weights()[i];
                        num += w * a.a1[i * ny + j];
                        den += w * a.a0[i * ny + j];
                    }
                    if den < DEN_FLOOR {
                        *v = prior_mean;
                        1u64
                    } else {
                        *v = num / den;
                        0u64
                    }
                })
                .sum();
            EstimatorTable {
                y_grid,
                z_grid: None,
                values,
                prior_mean,
                fallback_cells: fallback,
                clamp_events: AtomicU64::new(0),
            }
        }
        (Some(b), Some(zg)) => {
            let nz = zg.len();
            debug_assert_eq!(b.nz, nz);
            let mut values = vec![0.0; ny * nz];
            let fallback: u64 = values
                .par_chunks_mut(nz)
                .enumerate()
                .map(|(j, row)| {
                    let mut num = vec![0.0; nz];
                    let mut den = vec![0.0; nz];
                    for i in 0..nx {
                        let w = source.weights()[i];
                        let a1 = w * a.a1[i * ny + j];
                        let a0 = w * a.a0[i * ny + j];
                        if a0 == 0.0 && a1 == 0.0 {
                            continue;
                        }
                        let brow = &b.b0[i * nz..(i + 1) * nz];
                        for l in 0..nz {
                            num[l] += a1 * brow[l];
                            den[l] += a0 * brow[l];
                        }
                    }
                    let mut fb = 0u64;
                    for l in 0..nz {
                        if den[l] < DEN_FLOOR {
                            row[l] = prior_mean;
                            fb += 1;
                        } else {
                            row[l] = num[l] / den[l];
                        }
                    }
                    fb
                })
                .sum();
            EstimatorTable {
                y_grid,
                z_grid,
                values,
                prior_mean,
                fallback_cells: fallback,
                clamp_events: AtomicU64::new(0),
            }
        }
        _ => unreachable!("field set and grid set must agree"),
    }
}

/// Build the MMSE second controller for the given randomized stage(s).
///
/// `g2` and `z_grid` must both be present exactly when the problem has a
/// side channel. The controllers' association matrices must live on the
/// supplied source grid.
pub fn build_estimator(
    problem: &ProblemSpec,
    g1: &RandomizedController,
    g2: Option<&RandomizedController>,
    source: &Grid1D,
    y_grid: Grid1D,
    z_grid: Option<Grid1D>,
) -> Result<EstimatorTable> {
    if g1.assoc.n_points() != source.len() {
        return Err(Error::DimensionMismatch(format!(
            "first stage has {} association columns but the source grid has {} points",
            g1.assoc.n_points(),
            source.len()
        )));
    }
    if problem.has_side_channel() != g2.is_some() || g2.is_some() != z_grid.is_some() {
        return Err(Error::VariantMismatch(
            "side-channel stage and z grid must both be present exactly for the side-channel variant"
                .into(),
        ));
    }
    if let Some(g2) = g2 {
        if g2.assoc.n_points() != source.len() {
            return Err(Error::DimensionMismatch(format!(
                "side-channel stage has {} association columns but the source grid has {} points",
                g2.assoc.n_points(),
                source.len()
            )));
        }
    }
    let a = build_a_fields(g1, source, &y_grid, problem.obs_noise.std);
    let b = g2.map(|g2| {
        build_b_fields(g2, source, z_grid.as_ref().unwrap(), problem.side_noise.std)
    });
    let prior = prior_signal_mean(g1, source);
    Ok(build_from_fields(&a, b.as_ref(), source, y_grid, z_grid, prior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{AssociationMatrix, LocalModel, LocalModelBank, Stage};
    use crate::quadrature::{gauss_density, make_source_grid, GaussianSpec};

    fn zero_control(n_points: usize) -> RandomizedController {
        RandomizedController::single(Stage::G1, LocalModel { a: 0.0, b: 0.0 }, n_points).unwrap()
    }

    /// With g₁ ≡ 0 the setup is jointly Gaussian: x₁ = x₀ ~ N(0, σ²),
    /// y = x₁ + n, so W(y) = σ²/(σ²+1)·y exactly.
    #[test]
    fn zero_control_estimator_matches_linear_mmse() {
        let sigma = 5.0;
        let problem = ProblemSpec::wce(0.2, sigma).unwrap();
        let source = make_source_grid(&problem.source, 401).unwrap();
        let g1 = zero_control(source.len());
        let extent = observation_extent(g1.max_abs_signal(&source), 1.0);
        let y_grid = make_observation_grid(extent, 601).unwrap();
        let table =
            build_estimator(&problem, &g1, None, &source, y_grid, None).unwrap();
        let slope = sigma * sigma / (sigma * sigma + 1.0);
        // Interior nodes only: within 5σ of the source edge the truncated
        // tails perturb the posterior mean.
        for (j, &y) in table.y_grid().points().iter().enumerate() {
            if y.abs() <= 5.0 * sigma - 5.0 {
                assert!(
                    (table.value_at(j, 0) - slope * y).abs() < 1e-4,
                    "W({y}) = {} vs {}",
                    table.value_at(j, 0),
                    slope * y
                );
            }
        }
    }

    #[test]
    fn zero_control_estimator_is_odd_and_monotone() {
        let problem = ProblemSpec::wce(0.2, 5.0).unwrap();
        let source = make_source_grid(&problem.source, 201).unwrap();
        let g1 = zero_control(source.len());
        let y_grid = make_observation_grid(30.0, 301).unwrap();
        let table = build_estimator(&problem, &g1, None, &source, y_grid, None).unwrap();
        let mid = table.y_grid().len() / 2;
        assert!(table.value_at(mid, 0).abs() < 1e-9);
        for j in 0..table.y_grid().len() {
            let k = table.y_grid().len() - 1 - j;
            assert!((table.value_at(j, 0) + table.value_at(k, 0)).abs() < 1e-9);
        }
        for j in 1..table.y_grid().len() {
            assert!(table.value_at(j, 0) > table.value_at(j - 1, 0));
        }
    }

    /// Direct quadruple-loop enumeration of the defining ratio, no
    /// factorization and no kernel windowing, on grids small enough that
    /// the window covers everything.
    #[test]
    fn side_channel_table_matches_direct_enumeration() {
        let problem = ProblemSpec::side_channel(0.3, 0.2, 1.0, 0.7).unwrap();
        let source = make_source_grid(&problem.source, 5).unwrap();
        let m1 = LocalModelBank::new(
            Stage::G1,
            vec![LocalModel { a: -1.0, b: 1.0 }, LocalModel { a: 0.2, b: -0.3 }],
        )
        .unwrap();
        let p1 = AssociationMatrix::from_rows(vec![
            vec![0.3, 0.5, 0.9, 0.2, 0.6],
            vec![0.7, 0.5, 0.1, 0.8, 0.4],
        ])
        .unwrap();
        let g1 = RandomizedController::new(m1, p1).unwrap();
        let m2 = LocalModelBank::new(
            Stage::G2,
            vec![LocalModel { a: 0.5, b: 0.0 }, LocalModel { a: -0.4, b: 0.2 }],
        )
        .unwrap();
        let p2 = AssociationMatrix::from_rows(vec![
            vec![0.9, 0.1, 0.4, 0.6, 0.5],
            vec![0.1, 0.9, 0.6, 0.4, 0.5],
        ])
        .unwrap();
        let g2 = RandomizedController::new(m2, p2).unwrap();
        let y_grid = make_observation_grid(6.0, 7).unwrap();
        let z_grid = make_observation_grid(4.0, 5).unwrap();
        let table = build_estimator(
            &problem,
            &g1,
            Some(&g2),
            &source,
            y_grid.clone(),
            Some(z_grid.clone()),
        )
        .unwrap();
        let obs = GaussianSpec::standard();
        let side = problem.side_noise;
        for (j, &y) in y_grid.points().iter().enumerate() {
            for (l, &z) in z_grid.points().iter().enumerate() {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..source.len() {
                    let x0 = source.points()[i];
                    let w = source.weights()[i];
                    for a in 0..2 {
                        for b in 0..2 {
                            let x1 = x0 + g1.evaluate_model(a, x0);
                            let g2v = g2.evaluate_model(b, x0);
                            let f = w
                                * g1.assoc.prob(a, i)
                                * g2.assoc.prob(b, i)
                                * gauss_density(y - x1, &obs)
                                * gauss_density(z - g2v, &side);
                            num += f * x1;
                            den += f;
                        }
                    }
                }
                let expected = num / den;
                let got = table.value_at(j, l);
                assert!(
                    (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                    "W({y},{z}) = {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_midpoints() {
        let problem = ProblemSpec::wce(0.2, 5.0).unwrap();
        let source = make_source_grid(&problem.source, 101).unwrap();
        let g1 = zero_control(source.len());
        let y_grid = make_observation_grid(30.0, 61).unwrap();
        let table = build_estimator(&problem, &g1, None, &source, y_grid, None).unwrap();
        let pts = table.y_grid().points().to_vec();
        for (j, &y) in pts.iter().enumerate() {
            assert_eq!(table.estimate(y, None).unwrap(), table.value_at(j, 0));
        }
        let mid = 0.5 * (pts[3] + pts[4]);
        let want = 0.5 * (table.value_at(3, 0) + table.value_at(4, 0));
        assert!((table.estimate(mid, None).unwrap() - want).abs() < 1e-12);
        assert_eq!(table.clamp_events(), 0);
    }

    #[test]
    fn interpolation_clamps_outside_table() {
        let problem = ProblemSpec::wce(0.2, 5.0).unwrap();
        let source = make_source_grid(&problem.source, 101).unwrap();
        let g1 = zero_control(source.len());
        let y_grid = make_observation_grid(30.0, 61).unwrap();
        let table = build_estimator(&problem, &g1, None, &source, y_grid, None).unwrap();
        let hi = table.estimate(1e4, None).unwrap();
        assert_eq!(hi, table.value_at(table.y_grid().len() - 1, 0));
        let lo = table.estimate(-1e4, None).unwrap();
        assert_eq!(lo, table.value_at(0, 0));
        assert_eq!(table.clamp_events(), 2);
    }

    #[test]
    fn bilinear_interpolation_matches_cell_corners() {
        let problem = ProblemSpec::side_channel(0.3, 0.2, 1.0, 0.7).unwrap();
        let source = make_source_grid(&problem.source, 41).unwrap();
        let g1 = zero_control(source.len());
        let g2 = RandomizedController::single(
            Stage::G2,
            LocalModel { a: 1.0, b: 0.0 },
            source.len(),
        )
        .unwrap();
        let y_grid = make_observation_grid(10.0, 21).unwrap();
        let z_grid = make_observation_grid(6.0, 13).unwrap();
        let table = build_estimator(
            &problem,
            &g1,
            Some(&g2),
            &source,
            y_grid.clone(),
            Some(z_grid.clone()),
        )
        .unwrap();
        for j in [0usize, 7, 20] {
            for l in [0usize, 5, 12] {
                let got = table
                    .estimate(y_grid.points()[j], Some(z_grid.points()[l]))
                    .unwrap();
                assert!((got - table.value_at(j, l)).abs() < 1e-12);
            }
        }
        // center of a cell = average of its four corners
        let yc = 0.5 * (y_grid.points()[4] + y_grid.points()[5]);
        let zc = 0.5 * (z_grid.points()[6] + z_grid.points()[7]);
        let want = 0.25
            * (table.value_at(4, 6)
                + table.value_at(4, 7)
                + table.value_at(5, 6)
                + table.value_at(5, 7));
        assert!((table.estimate(yc, Some(zc)).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let problem = ProblemSpec::wce(0.2, 5.0).unwrap();
        let source = make_source_grid(&problem.source, 11).unwrap();
        let g1 = zero_control(source.len());
        let g2 = RandomizedController::single(
            Stage::G2,
            LocalModel { a: 0.0, b: 0.0 },
            source.len(),
        )
        .unwrap();
        let y_grid = make_observation_grid(30.0, 11).unwrap();
        // WCE problem with a side-channel stage supplied
        assert!(build_estimator(
            &problem,
            &g1,
            Some(&g2),
            &source,
            y_grid.clone(),
            None
        )
        .is_err());
        // table built without z rejects z queries and vice versa
        let table = build_estimator(&problem, &g1, None, &source, y_grid, None).unwrap();
        assert!(table.estimate(0.0, Some(0.0)).is_err());
    }

    #[test]
    fn far_cells_fall_back_to_prior_mean() {
        let problem = ProblemSpec::wce(0.2, 1.0).unwrap();
        let source = make_source_grid(&problem.source, 41).unwrap();
        let g1 = zero_control(source.len());
        // signals live within ±6 yet the grid reaches ±80: cells beyond the
        // kernel window (8.6σ past the last signal) have zero support
        let y_grid = make_observation_grid(80.0, 801).unwrap();
        let table = build_estimator(&problem, &g1, None, &source, y_grid, None).unwrap();
        assert!(table.fallback_cells() > 0);
        assert_eq!(table.value_at(0, 0), table.prior_mean());
        assert!(table.prior_mean().abs() < 1e-12);
    }

    /// Scaling every source weight by a constant must leave the ratio
    /// table unchanged.
    #[test]
    fn estimator_is_invariant_to_weight_scale() {
        let problem = ProblemSpec::wce(0.2, 5.0).unwrap();
        let source = make_source_grid(&problem.source, 101).unwrap();
        let scaled = Grid1D::new(
            source.points().to_vec(),
            source.weights().iter().map(|w| 7.5 * w).collect(),
        )
        .unwrap();
        let g1 = zero_control(source.len());
        let y_grid = make_observation_grid(30.0, 121).unwrap();
        let t1 =
            build_estimator(&problem, &g1, None, &source, y_grid.clone(), None).unwrap();
        let t2 = build_estimator(&problem, &g1, None, &scaled, y_grid, None).unwrap();
        for j in 0..t1.y_grid().len() {
            let a = t1.value_at(j, 0);
            let b = t2.value_at(j, 0);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
