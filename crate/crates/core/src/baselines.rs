//! Deterministic reference designs and scoring utilities.
//!
//! Everything in this module evaluates *fixed* (non-randomized) mappings:
//! classical baselines — the best affine law, the two-point quantizer, and
//! uniform staircases — plus arbitrary mappings tabulated on a grid, e.g.
//! re-imported from an exported CSV. Scoring wraps a deterministic mapping
//! as a degenerate randomized controller (one constant model per source
//! node with a one-hot association), so every reported number flows through
//! the same quadrature, estimator construction, and cost assembly as an
//! annealing run. An independent Monte-Carlo scorer cross-checks the
//! quadrature path on simulated noise.

use crate::annealer::GridSettings;
use crate::controller::{
    AssociationMatrix, LocalModel, LocalModelBank, RandomizedController, Stage,
};
use crate::error::{Error, Result};
use crate::estimator::{make_observation_grid, observation_extent, EstimatorTable};
use crate::free_energy::{CostBreakdown, Workspace};
use crate::problem::{ProblemSpec, SignalPoint, Variant};
use crate::quadrature::make_source_grid;
use crate::util::{derive_seed, golden_section};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Margin applied to the largest signal magnitude when sizing observation
/// grids, matching the annealer's default so a design scored here sees the
/// same lattice-construction rule as one scored at the end of an annealing
/// run.
const EXTENT_MARGIN: f64 = 1.05;

/// A deterministic two-stage design: the first stage moves the state to
/// x₁ = x₀ + g₁(x₀), the optional side stage transmits g₂(x₀).
#[derive(Debug, Clone, PartialEq)]
pub enum DeterministicMapping {
    /// x₁ = slope·x₀ + intercept; side signal side_slope·x₀ + side_intercept.
    Affine {
        slope: f64,
        intercept: f64,
        side_slope: f64,
        side_intercept: f64,
    },
    /// x₁ = magnitude·sgn(x₀) with sgn(0) := +1; no side signal.
    SignStep { magnitude: f64 },
    /// x₁ snaps to the nearest integer multiple of `step_width` (ties go to
    /// the lower multiple) and is tilted by `step_slope` within each step;
    /// side signal `scale`·x₁.
    Staircase {
        step_width: f64,
        scale: f64,
        step_slope: f64,
    },
    /// Mapping tabulated at strictly increasing sample points, evaluated by
    /// nearest-sample lookup (ties go to the lower sample). The control is
    /// held piecewise constant between samples, so x₁ keeps unit slope off
    /// the sample points.
    Sampled(Vec<SignalPoint>),
}

impl DeterministicMapping {
    /// Identity first stage and silent side stage: the controller spends
    /// nothing and leaves the state untouched.
    pub fn zero_control() -> Self {
        Self::Affine {
            slope: 1.0,
            intercept: 0.0,
            side_slope: 0.0,
            side_intercept: 0.0,
        }
    }

    /// Validate and wrap a tabulated mapping: sample abscissas must be
    /// finite, strictly increasing, and non-empty, and all signal values
    /// finite.
    pub fn sampled(points: Vec<SignalPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter(
                "a sampled mapping needs at least one sample".into(),
            ));
        }
        for (i, s) in points.iter().enumerate() {
            if !(s.x0.is_finite() && s.g1.is_finite() && s.g2.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "sample {i} has a non-finite field"
                )));
            }
            if i > 0 && !(points[i - 1].x0 < s.x0) {
                return Err(Error::InvalidParameter(format!(
                    "sample abscissas must be strictly increasing, violated at index {i}"
                )));
            }
        }
        Ok(Self::Sampled(points))
    }

    /// First-stage control g₁(x₀).
    pub fn g1(&self, x0: f64) -> f64 {
        match self {
            Self::Affine {
                slope, intercept, ..
            } => (slope - 1.0) * x0 + intercept,
            Self::SignStep { magnitude } => {
                let sign = if x0 < 0.0 { -1.0 } else { 1.0 };
                sign * magnitude - x0
            }
            Self::Staircase {
                step_width,
                step_slope,
                ..
            } => {
                let center = snap_to_step(x0, *step_width);
                center + step_slope * (x0 - center) - x0
            }
            Self::Sampled(points) => points[nearest_sample(points, x0)].g1,
        }
    }

    /// Post-control state x₁(x₀) = x₀ + g₁(x₀).
    pub fn x1(&self, x0: f64) -> f64 {
        x0 + self.g1(x0)
    }

    /// Side-channel signal g₂(x₀); identically zero when the design has no
    /// side stage.
    pub fn g2(&self, x0: f64) -> f64 {
        match self {
            Self::Affine {
                side_slope,
                side_intercept,
                ..
            } => side_slope * x0 + side_intercept,
            Self::SignStep { .. } => 0.0,
            Self::Staircase {
                step_width,
                scale,
                step_slope,
            } => {
                let center = snap_to_step(x0, *step_width);
                scale * (center + step_slope * (x0 - center))
            }
            Self::Sampled(points) => points[nearest_sample(points, x0)].g2,
        }
    }
}

/// Nearest multiple of `width`, with ties between two multiples resolved
/// toward the lower one.
fn snap_to_step(x0: f64, width: f64) -> f64 {
    (x0 / width - 0.5).ceil() * width
}

/// Index of the sample nearest to `x0`; ties go to the lower sample.
fn nearest_sample(points: &[SignalPoint], x0: f64) -> usize {
    let j = points.partition_point(|p| p.x0 < x0);
    if j == 0 {
        return 0;
    }
    if j == points.len() {
        return points.len() - 1;
    }
    if x0 - points[j - 1].x0 <= points[j].x0 - x0 {
        j - 1
    } else {
        j
    }
}

/// The two-point quantizer x₁ = σ·sgn(x₀): the classical demonstration that
/// a nonlinear law beats every affine one on this problem. Only defined for
/// the plain variant, which has no side stage to specify.
pub fn one_step_quantizer(p: &ProblemSpec) -> Result<DeterministicMapping> {
    if p.variant != Variant::Wce {
        return Err(Error::VariantMismatch(
            "the two-point quantizer is a plain-variant baseline".into(),
        ));
    }
    Ok(DeterministicMapping::SignStep {
        magnitude: p.source.std,
    })
}

/// A flat uniform staircase whose side stage transmits `scale`·x₁. Only
/// defined for the side-channel variant.
pub fn uniform_staircase(
    p: &ProblemSpec,
    step_width: f64,
    scale: f64,
) -> Result<DeterministicMapping> {
    if p.variant != Variant::SideChannel {
        return Err(Error::VariantMismatch(
            "the uniform staircase baseline targets the side-channel variant".into(),
        ));
    }
    if !(step_width > 0.0) || !step_width.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step_width must be positive, got {step_width}"
        )));
    }
    if !scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "scale must be finite, got {scale}"
        )));
    }
    Ok(DeterministicMapping::Staircase {
        step_width,
        scale,
        step_slope: 0.0,
    })
}

/// Exact cost of the affine pair x₁ = s·x₀, g₂ = λ₂·x₀ under the problem's
/// Gaussian statistics (intercepts are never useful for a zero-mean source).
/// The estimator term is the linear-Gaussian MMSE of x₁ from (y, z):
/// err = s² / (1/σ² + s²/σ_n1² + λ₂²/σ_n2²).
pub fn affine_cost(p: &ProblemSpec, slope: f64, side_slope: f64) -> f64 {
    let var = p.source.std * p.source.std;
    let n1v = p.obs_noise.std * p.obs_noise.std;
    let mut info = 1.0 / var + slope * slope / n1v;
    if p.has_side_channel() {
        info += side_slope * side_slope / (p.side_noise.std * p.side_noise.std);
    }
    p.k1 * p.k1 * var * (slope - 1.0) * (slope - 1.0)
        + p.k2_sq() * side_slope * side_slope * var
        + slope * slope / info
}

/// The best affine design and its exact cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub mapping: DeterministicMapping,
    /// Exact (closed-form) cost of the fitted design.
    pub cost: f64,
    /// First-stage state slope s in x₁ = s·x₀.
    pub slope: f64,
    /// Side-stage slope λ₂ in g₂ = λ₂·x₀; zero for the plain variant.
    pub side_slope: f64,
}

/// Minimize the exact affine cost. The plain variant is a one-dimensional
/// search over the state slope s ∈ [0, 1] (the cost rises on both sides of
/// that interval); the side-channel variant adds the side slope, handled by
/// a coarse scan plus alternating line searches.
pub fn best_affine(p: &ProblemSpec) -> AffineFit {
    let fit = |slope: f64, side_slope: f64| AffineFit {
        mapping: DeterministicMapping::Affine {
            slope,
            intercept: 0.0,
            side_slope,
            side_intercept: 0.0,
        },
        cost: affine_cost(p, slope, side_slope),
        slope,
        side_slope,
    };
    if !p.has_side_channel() {
        let (s, _) = golden_section(&mut |s| affine_cost(p, s, 0.0), 0.0, 1.0, 1e-12);
        return fit(s, 0.0);
    }
    // Side slopes beyond 20·σ_n2/σ buy an SNR no optimum at positive k₂
    // ever wants; the scan window is padded well past that.
    let lam_hi = 20.0 * p.side_noise.std / p.source.std;
    let mut best = (1.0, 0.0, affine_cost(p, 1.0, 0.0));
    for i in 0..=60 {
        let s = i as f64 / 60.0;
        for j in 0..=80 {
            let l = lam_hi * j as f64 / 80.0;
            let c = affine_cost(p, s, l);
            if c < best.2 {
                best = (s, l, c);
            }
        }
    }
    let (mut s, mut l) = (best.0, best.1);
    for _ in 0..12 {
        let (s_new, _) = golden_section(&mut |v| affine_cost(p, v, l), 0.0, 1.0, 1e-12);
        s = s_new;
        let (l_new, _) = golden_section(&mut |v| affine_cost(p, s, v), 0.0, 1.5 * lam_hi, 1e-12);
        l = l_new;
    }
    fit(s, l)
}

/// Cheapest affine design whose side stage is pinned to a given SNR, with
/// the side-power term left out of the objective: the reference curve for
/// judging nonlinear designs at matched side-channel strength. Minimizes
///   k₁²σ²(s−1)² + s² / (1/σ² + s²/σ_n1² + b²/σ²)
/// over the state slope s, since a side slope λ₂ at SNR b = λ₂σ/σ_n2
/// contributes λ₂²/σ_n2² = b²/σ² of Fisher information regardless of the
/// side noise level.
pub fn affine_cost_at_bsnr(k1: f64, sigma_x0: f64, obs_noise_std: f64, b_snr: f64) -> f64 {
    let var = sigma_x0 * sigma_x0;
    let n1v = obs_noise_std * obs_noise_std;
    let mut cost = |s: f64| {
        k1 * k1 * var * (s - 1.0) * (s - 1.0)
            + s * s / (1.0 / var + s * s / n1v + b_snr * b_snr / var)
    };
    let (_, c) = golden_section(&mut cost, 0.0, 1.0, 1e-12);
    c
}

/// Wrap per-node signal values as a degenerate randomized controller: one
/// constant local model per source node and a one-hot association, so the
/// deterministic design can be pushed through the randomized-design scoring
/// machinery unchanged.
fn wrap_stage(stage: Stage, values: &[f64]) -> Result<RandomizedController> {
    let n = values.len();
    let models = values.iter().map(|&b| LocalModel { a: 0.0, b }).collect();
    let bank = LocalModelBank::new(stage, models)?;
    let rows = (0..n)
        .map(|m| {
            let mut row = vec![0.0; n];
            row[m] = 1.0;
            row
        })
        .collect();
    let assoc = AssociationMatrix::from_rows(rows)?;
    RandomizedController::new(bank, assoc)
}

/// A deterministic mapping scored on the quadrature path.
#[derive(Debug)]
pub struct MappingEvaluation {
    pub breakdown: CostBreakdown,
    /// MMSE estimator tabulated for this design; reusable for Monte-Carlo
    /// cross-checks.
    pub estimator: EstimatorTable,
    /// The lattices the numbers were computed on.
    pub workspace: Workspace,
    pub g1: RandomizedController,
    pub g2: Option<RandomizedController>,
}

/// Score a deterministic mapping by exact quadrature: sample it on the
/// source grid, size observation grids from its signal range exactly as the
/// annealer does, build the MMSE estimator, and assemble the cost.
pub fn evaluate_mapping(
    mapping: &DeterministicMapping,
    p: &ProblemSpec,
    grids: &GridSettings,
) -> Result<MappingEvaluation> {
    let source = make_source_grid(&p.source, grids.n_source)?;
    let g1_vals: Vec<f64> = source.points().iter().map(|&x| mapping.g1(x)).collect();
    let g1 = wrap_stage(Stage::G1, &g1_vals)?;
    let g2 = if p.has_side_channel() {
        let vals: Vec<f64> = source.points().iter().map(|&x| mapping.g2(x)).collect();
        Some(wrap_stage(Stage::G2, &vals)?)
    } else {
        None
    };
    let y_ext = observation_extent(g1.max_abs_signal(&source) * EXTENT_MARGIN, p.obs_noise.std);
    let y_grid = make_observation_grid(y_ext, grids.n_y)?;
    let z_grid = match &g2 {
        Some(g) => {
            let ext = observation_extent(g.max_abs_signal(&source) * EXTENT_MARGIN, p.side_noise.std);
            Some(make_observation_grid(ext, grids.n_z)?)
        }
        None => None,
    };
    let workspace = Workspace::new(p.clone(), source, y_grid, z_grid)?;
    let estimator = workspace.rebuild_estimator(&g1, g2.as_ref())?;
    let breakdown = workspace.expected_cost(&g1, g2.as_ref(), &estimator)?;
    Ok(MappingEvaluation {
        breakdown,
        estimator,
        workspace,
        g1,
        g2,
    })
}

/// Score a deterministic mapping on an existing workspace's lattices, e.g.
/// to confirm that the tabulated mapping exported from an annealing run
/// reproduces the run's reported cost on the very same quadrature.
pub fn evaluate_on(
    workspace: &Workspace,
    mapping: &DeterministicMapping,
) -> Result<(CostBreakdown, EstimatorTable)> {
    let pts = workspace.source().points();
    let g1_vals: Vec<f64> = pts.iter().map(|&x| mapping.g1(x)).collect();
    let g1 = wrap_stage(Stage::G1, &g1_vals)?;
    let g2 = if workspace.problem().has_side_channel() {
        let vals: Vec<f64> = pts.iter().map(|&x| mapping.g2(x)).collect();
        Some(wrap_stage(Stage::G2, &vals)?)
    } else {
        None
    };
    let estimator = workspace.rebuild_estimator(&g1, g2.as_ref())?;
    let breakdown = workspace.expected_cost(&g1, g2.as_ref(), &estimator)?;
    Ok((breakdown, estimator))
}

/// Samples per Monte-Carlo block; blocks are seeded independently so the
/// estimate is identical at any thread count.
const MC_BLOCK: u64 = 1 << 16;
/// Stream tag separating Monte-Carlo draws from any other consumer of the
/// same master seed.
const MC_STREAM: u64 = 0x4d43;

/// Monte-Carlo estimate of a deterministic design's cost under a frozen
/// estimator: draws (x₀, n₁[, n₂]) in that fixed order, simulates both
/// stages, and averages k₁²g₁² + k₂²g₂² + (x₁ − x̂₁)². Returns the mean and
/// its standard error. The result is bit-reproducible for a given seed:
/// blocks derive their RNGs from (seed, block index) and are reduced in
/// block order.
pub fn mc_cost(
    mapping: &DeterministicMapping,
    estimator: &EstimatorTable,
    p: &ProblemSpec,
    n_samples: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter(format!(
            "n_samples must be at least 2, got {n_samples}"
        )));
    }
    let side = p.has_side_channel();
    let k1_sq = p.k1 * p.k1;
    let k2_sq = p.k2_sq();
    let n_blocks = n_samples.div_ceil(MC_BLOCK);
    let partials: Vec<Result<(f64, f64)>> = (0..n_blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, MC_STREAM, blk));
            let count = MC_BLOCK.min(n_samples - blk * MC_BLOCK);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..count {
                let u: f64 = StandardNormal.sample(&mut rng);
                let x0 = p.source.mean + p.source.std * u;
                let u: f64 = StandardNormal.sample(&mut rng);
                let n1 = p.obs_noise.std * u;
                let g1 = mapping.g1(x0);
                let x1 = x0 + g1;
                let y = x1 + n1;
                let (g2, z) = if side {
                    let g2 = mapping.g2(x0);
                    let u: f64 = StandardNormal.sample(&mut rng);
                    (g2, Some(g2 + p.side_noise.std * u))
                } else {
                    (0.0, None)
                };
                let w = estimator.estimate(y, z)?;
                let c = k1_sq * g1 * g1 + k2_sq * g2 * g2 + (x1 - w) * (x1 - w);
                sum += c;
                sum_sq += c * c;
            }
            Ok((sum, sum_sq))
        })
        .collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for part in partials {
        let (s, q) = part?;
        sum += s;
        sum_sq += q;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::achieved_bsnr;

    fn wce() -> ProblemSpec {
        ProblemSpec::wce(0.2, 5.0).unwrap()
    }

    #[test]
    fn zero_control_leaves_state_alone() {
        let m = DeterministicMapping::zero_control();
        for x in [-3.0, 0.0, 0.7] {
            assert_eq!(m.g1(x), 0.0);
            assert_eq!(m.x1(x), x);
            assert_eq!(m.g2(x), 0.0);
        }
    }

    #[test]
    fn sign_step_conventions() {
        let m = one_step_quantizer(&wce()).unwrap();
        assert_eq!(m.x1(3.0), 5.0);
        assert_eq!(m.x1(-3.0), -5.0);
        assert_eq!(m.x1(0.0), 5.0, "sgn(0) is positive by convention");
        assert_eq!(m.g1(2.0), 3.0);
        assert_eq!(m.g2(2.0), 0.0);
        let sc = ProblemSpec::side_channel(0.2, 1.0, 5.0, 1.0).unwrap();
        assert!(one_step_quantizer(&sc).is_err());
    }

    #[test]
    fn staircase_snaps_to_nearest_step_with_ties_low() {
        let m = DeterministicMapping::Staircase {
            step_width: 2.0,
            scale: 0.5,
            step_slope: 0.0,
        };
        assert_eq!(m.x1(0.9), 0.0);
        assert_eq!(m.x1(1.0), 0.0, "tie resolves to the lower multiple");
        assert_eq!(m.x1(1.1), 2.0);
        assert_eq!(m.x1(-1.0), -2.0, "tie resolves to the lower multiple");
        assert_eq!(m.x1(-0.9), 0.0);
        assert_eq!(m.g2(1.1), 1.0);
        let tilted = DeterministicMapping::Staircase {
            step_width: 2.0,
            scale: 1.0,
            step_slope: 0.25,
        };
        assert!((tilted.x1(2.4) - (2.0 + 0.25 * 0.4)).abs() < 1e-12);
        assert!((tilted.g2(2.4) - (2.0 + 0.25 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn staircase_constructor_gates_variant_and_validates() {
        let sc = ProblemSpec::side_channel(0.2, 1.0, 5.0, 1.0).unwrap();
        assert!(uniform_staircase(&sc, 1.5, 0.3).is_ok());
        assert!(uniform_staircase(&sc, 0.0, 0.3).is_err());
        assert!(uniform_staircase(&wce(), 1.5, 0.3).is_err());
    }

    #[test]
    fn sampled_mapping_validates_and_uses_nearest_sample() {
        let pts = vec![
            SignalPoint::new(-1.0, 0.5, 0.1),
            SignalPoint::new(0.0, -0.25, 0.2),
            SignalPoint::new(2.0, 1.0, 0.3),
        ];
        let m = DeterministicMapping::sampled(pts.clone()).unwrap();
        assert_eq!(m.g1(-5.0), 0.5, "clamps to the first sample");
        assert_eq!(m.g1(9.0), 1.0, "clamps to the last sample");
        assert_eq!(m.g1(-0.4), -0.25);
        assert_eq!(m.g1(-0.5), 0.5, "midpoint tie goes to the lower sample");
        assert_eq!(m.g2(1.2), 0.3);
        let mut bad = pts.clone();
        bad[2].x0 = 0.0;
        assert!(DeterministicMapping::sampled(bad).is_err());
        let mut nan = pts;
        nan[1].g1 = f64::NAN;
        assert!(DeterministicMapping::sampled(nan).is_err());
        assert!(DeterministicMapping::sampled(vec![]).is_err());
    }

    #[test]
    fn best_affine_matches_frozen_plain_variant_solution() {
        let fit = best_affine(&wce());
        assert!(
            (fit.slope - 0.958257568).abs() < 1e-6,
            "slope {}",
            fit.slope
        );
        assert!((fit.cost - 0.960000000).abs() < 1e-6, "cost {}", fit.cost);
        assert_eq!(fit.side_slope, 0.0);
    }

    #[test]
    fn heavy_control_penalty_pins_the_state_in_place() {
        let p = ProblemSpec::wce(50.0, 5.0).unwrap();
        let fit = best_affine(&p);
        assert!((fit.slope - 1.0).abs() < 1e-3, "slope {}", fit.slope);
        assert!((fit.cost - 25.0 / 26.0).abs() < 1e-4, "cost {}", fit.cost);
    }

    #[test]
    fn constrained_affine_matches_frozen_reference_points() {
        for (b, want) in [
            (2.37, 0.735739592),
            (2.70, 0.679503231),
            (3.45, 0.570891221),
            (4.68, 0.437765038),
            (5.62, 0.362949460),
        ] {
            let got = affine_cost_at_bsnr(0.2, 5.0, 1.0, b);
            assert!((got - want).abs() < 1e-6, "b={b}: got {got}, want {want}");
        }
    }

    #[test]
    fn side_channel_affine_degenerates_when_side_power_is_expensive() {
        let expensive = ProblemSpec::side_channel(0.2, 1e3, 5.0, 1.0).unwrap();
        let fit = best_affine(&expensive);
        let plain = best_affine(&wce());
        assert!(fit.side_slope.abs() < 1e-4, "side_slope {}", fit.side_slope);
        assert!((fit.cost - plain.cost).abs() < 1e-3 * plain.cost);

        let cheap = ProblemSpec::side_channel(0.2, 0.05, 5.0, 1.0).unwrap();
        let fit = best_affine(&cheap);
        assert!(fit.side_slope > 0.1, "side_slope {}", fit.side_slope);
        assert!(fit.cost < plain.cost - 0.05);
        let b = achieved_bsnr(&cheap, fit.side_slope * cheap.source.std).unwrap();
        assert!(b > 1.0, "cheap side power should buy real SNR, got {b}");
    }

    #[test]
    fn quadrature_scores_zero_control_at_the_prior_mmse() {
        let eval = evaluate_mapping(
            &DeterministicMapping::zero_control(),
            &wce(),
            &GridSettings::default(),
        )
        .unwrap();
        let want = 25.0 / 26.0;
        assert!(
            (eval.breakdown.total_d - want).abs() < 2e-3,
            "got {}",
            eval.breakdown.total_d
        );
        assert!(eval.breakdown.control_cost.abs() < 1e-12);
    }

    #[test]
    fn quadrature_scores_the_two_point_quantizer() {
        let p = wce();
        let m = one_step_quantizer(&p).unwrap();
        let eval = evaluate_mapping(&m, &p, &GridSettings::default()).unwrap();
        assert!(
            (eval.breakdown.total_d - 0.404253).abs() < 2e-3,
            "got {}",
            eval.breakdown.total_d
        );
    }

    #[test]
    fn evaluate_on_reproduces_the_standalone_path() {
        let p = wce();
        let m = DeterministicMapping::Affine {
            slope: 0.9,
            intercept: 0.0,
            side_slope: 0.0,
            side_intercept: 0.0,
        };
        let eval = evaluate_mapping(&m, &p, &GridSettings::default()).unwrap();
        let (again, _) = evaluate_on(&eval.workspace, &m).unwrap();
        assert!((again.total_d - eval.breakdown.total_d).abs() < 1e-14);
    }

    #[test]
    fn affine_quadrature_matches_the_closed_form() {
        let p = wce();
        let fit = best_affine(&p);
        let eval = evaluate_mapping(&fit.mapping, &p, &GridSettings::default()).unwrap();
        assert!(
            (eval.breakdown.total_d - fit.cost).abs() < 2e-3,
            "quadrature {} vs closed form {}",
            eval.breakdown.total_d,
            fit.cost
        );
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature_and_is_reproducible() {
        let p = wce();
        let m = DeterministicMapping::zero_control();
        let eval = evaluate_mapping(&m, &p, &GridSettings::default()).unwrap();
        let (mean, stderr) = mc_cost(&m, &eval.estimator, &p, 200_000, 123).unwrap();
        assert!(stderr > 0.0 && stderr < 0.01);
        assert!(
            (mean - eval.breakdown.total_d).abs() < 4.0 * stderr,
            "mc {mean} ± {stderr} vs quadrature {}",
            eval.breakdown.total_d
        );
        let (mean2, stderr2) = mc_cost(&m, &eval.estimator, &p, 200_000, 123).unwrap();
        assert_eq!(mean, mean2);
        assert_eq!(stderr, stderr2);
        let (mean3, _) = mc_cost(&m, &eval.estimator, &p, 200_000, 124).unwrap();
        assert_ne!(mean, mean3);
    }

    #[test]
    fn monte_carlo_covers_the_side_channel_draw_order() {
        let p = ProblemSpec::side_channel(0.2, 0.1, 5.0, 1.0).unwrap();
        let m = DeterministicMapping::Affine {
            slope: 0.9,
            intercept: 0.0,
            side_slope: 0.4,
            side_intercept: 0.0,
        };
        let eval = evaluate_mapping(&m, &p, &GridSettings::default()).unwrap();
        let closed = affine_cost(&p, 0.9, 0.4);
        assert!(
            (eval.breakdown.total_d - closed).abs() < 2e-3,
            "quadrature {} vs closed form {closed}",
            eval.breakdown.total_d
        );
        let (mean, stderr) = mc_cost(&m, &eval.estimator, &p, 200_000, 9).unwrap();
        assert!(
            (mean - closed).abs() < 4.0 * stderr + 2e-3,
            "mc {mean} ± {stderr} vs closed form {closed}"
        );
    }

    #[test]
    fn mc_rejects_degenerate_sample_counts() {
        let p = wce();
        let m = DeterministicMapping::zero_control();
        let eval = evaluate_mapping(&m, &p, &GridSettings::default()).unwrap();
        assert!(mc_cost(&m, &eval.estimator, &p, 1, 1).is_err());
    }
}
