//! The two problem variants and their cost conventions.
//!
//! A source sample x₀ is acted on by the first controller: x₁ = x₀ + g₁(x₀).
//! The second controller sees y₁ = x₁ + n₁ (unit noise) and, in the
//! side-channel variant, also z = g₂(x₀) + n₂. It outputs x̂₁ and pays the
//! estimation error x₂ = x₁ − x̂₁.
//!
//! The total cost is
//!   D = k₁²·E{g₁²} + k₂²·E{g₂²} + E{x₂²}
//! with the middle term absent in the plain variant. k₂ acts as a Lagrange
//! parameter for the side-channel power constraint: sweeping it traces out
//! the (b_SNR, cost) tradeoff, where b_SNR = rms(g₂)/σ_n2.

use crate::error::{Error, Result};
use crate::quadrature::GaussianSpec;

/// Which problem is being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Classic two-stage problem: no side channel, cost k²E{g₁²} + E{x₂²}.
    Wce,
    /// Side-channel variant: z = g₂ + n₂ feeds the second controller.
    SideChannel,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Wce => "wce",
            Variant::SideChannel => "side-channel",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wce" => Ok(Variant::Wce),
            "side-channel" | "side_channel" | "sidechannel" => Ok(Variant::SideChannel),
            other => Err(Error::Config(format!(
                "unknown variant '{other}', expected 'wce' or 'side-channel'"
            ))),
        }
    }
}

/// Full problem parameterization.
///
/// The observation noise n₁ is fixed at unit variance; `k2` and `side_noise`
/// are ignored by every operation when `variant` is [`Variant::Wce`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub variant: Variant,
    /// Control-cost weight k₁ (the k of the plain variant).
    pub k1: f64,
    /// Side-channel power weight k₂ (Lagrange parameter).
    pub k2: f64,
    /// Source distribution x₀ ~ N(0, σ_x0²).
    pub source: GaussianSpec,
    /// Observation noise n₁ ~ N(0, 1).
    pub obs_noise: GaussianSpec,
    /// Side-channel noise n₂ ~ N(0, σ_n2²); unused for the plain variant.
    pub side_noise: GaussianSpec,
}

impl ProblemSpec {
    pub fn wce(k1: f64, sigma_x0: f64) -> Result<Self> {
        Self::build(Variant::Wce, k1, 0.0, sigma_x0, 1.0)
    }

    pub fn side_channel(k1: f64, k2: f64, sigma_x0: f64, sigma_n2: f64) -> Result<Self> {
        Self::build(Variant::SideChannel, k1, k2, sigma_x0, sigma_n2)
    }

    fn build(variant: Variant, k1: f64, k2: f64, sigma_x0: f64, sigma_n2: f64) -> Result<Self> {
        if !(k1 > 0.0) || !k1.is_finite() {
            return Err(Error::InvalidParameter(format!("k1 must be positive, got {k1}")));
        }
        if variant == Variant::SideChannel && (!(k2 >= 0.0) || !k2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "k2 must be non-negative, got {k2}"
            )));
        }
        Ok(Self {
            variant,
            k1,
            k2,
            source: GaussianSpec::new(0.0, sigma_x0)?,
            obs_noise: GaussianSpec::standard(),
            side_noise: GaussianSpec::new(0.0, if variant == Variant::SideChannel { sigma_n2 } else { 1.0 })?,
        })
    }

    pub fn has_side_channel(&self) -> bool {
        self.variant == Variant::SideChannel
    }

    /// k₂² as used in the cost, zero for the plain variant.
    pub fn k2_sq(&self) -> f64 {
        match self.variant {
            Variant::Wce => 0.0,
            Variant::SideChannel => self.k2 * self.k2,
        }
    }
}

/// One realized signal path through the first stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalPoint {
    pub x0: f64,
    pub g1: f64,
    /// Side-channel signal; 0 for the plain variant.
    pub g2: f64,
    pub x1: f64,
}

impl SignalPoint {
    /// x₁ = x₀ + g₁ holds by construction.
    pub fn new(x0: f64, g1: f64, g2: f64) -> Self {
        Self { x0, g1, g2, x1: x0 + g1 }
    }
}

/// First-stage cost of a signal point: k₁²·g₁² (+ k₂²·g₂² for the
/// side-channel variant). The estimation term E{x₂²} is accounted
/// separately by the free-energy evaluation.
pub fn stage_cost(p: &ProblemSpec, s: &SignalPoint) -> f64 {
    let control = p.k1 * p.k1 * s.g1 * s.g1;
    match p.variant {
        Variant::Wce => control,
        Variant::SideChannel => control + p.k2 * p.k2 * s.g2 * s.g2,
    }
}

/// Achieved side-channel SNR parameter b_SNR = rms(g₂)/σ_n2.
pub fn achieved_bsnr(p: &ProblemSpec, rms_g2: f64) -> Result<f64> {
    if p.variant != Variant::SideChannel {
        return Err(Error::VariantMismatch(
            "achieved_bsnr requires the side-channel variant".into(),
        ));
    }
    if !(rms_g2 >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rms_g2 must be non-negative, got {rms_g2}"
        )));
    }
    Ok(rms_g2 / p.side_noise.std)
}
