//! Factorized field arrays shared by estimator construction and cost
//! evaluation.
//!
//! Every quantity the pipeline needs — estimator numerator/denominator,
//! expected estimation error, per-model partial costs, analytic gradients —
//! is an integral of products of per-stage Gaussian mixtures. Caching the
//! stage mixtures as dense (source-node × observation-node) arrays turns
//! all of them into O(Nx·Ny·Nz) accumulations instead of a five-deep loop
//! over models and grids.

use rayon::prelude::*;

use crate::controller::RandomizedController;
use crate::quadrature::{for_each_kernel_point, Grid1D};

/// First-stage observation fields over (source node i, y node j):
///   aλ[i·ny + j] = Σ_m p(m|i) · x1ᵢ(m)^λ · φ(y_j − x1ᵢ(m)),  λ ∈ {0,1,2}
/// where x1ᵢ(m) = x0ᵢ + g1ₘ(x0ᵢ) and φ is the observation-noise kernel.
pub(crate) struct AFields {
    pub ny: usize,
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

pub(crate) fn build_a_fields(
    g1: &RandomizedController,
    source: &Grid1D,
    y_grid: &Grid1D,
    noise_std: f64,
) -> AFields {
    let nx = source.len();
    let ny = y_grid.len();
    let mut a0 = vec![0.0; nx * ny];
    let mut a1 = vec![0.0; nx * ny];
    let mut a2 = vec![0.0; nx * ny];
    // Each source node fills a disjoint row triple in a fixed sequential
    // order, so the result is bit-identical at any thread count.
    a0.par_chunks_mut(ny)
        .zip(a1.par_chunks_mut(ny))
        .zip(a2.par_chunks_mut(ny))
        .enumerate()
        .for_each(|(i, ((r0, r1), r2))| {
            let x0 = source.points()[i];
            for m in 0..g1.n_models() {
                let p = g1.assoc.prob(m, i);
                if p == 0.0 {
                    continue;
                }
                let x1 = x0 + g1.evaluate_model(m, x0);
                for_each_kernel_point(x1, noise_std, y_grid, |j, phi| {
                    let f = p * phi;
                    r0[j] += f;
                    r1[j] += f * x1;
                    r2[j] += f * x1 * x1;
                });
            }
        });
    AFields { ny, a0, a1, a2 }
}

/// Side-channel fields over (source node i, z node l):
///   b0[i·nz + l] = Σ_m p(m|i) · φ_σ(z_l − g2ₘ(x0ᵢ)).
pub(crate) struct BFields {
    pub nz: usize,
    pub b0: Vec<f64>,
}

pub(crate) fn build_b_fields(
    g2: &RandomizedController,
    source: &Grid1D,
    z_grid: &Grid1D,
    noise_std: f64,
) -> BFields {
    let nx = source.len();
    let nz = z_grid.len();
    let mut b0 = vec![0.0; nx * nz];
    b0.par_chunks_mut(nz).enumerate().for_each(|(i, row)| {
        let x0 = source.points()[i];
        for m in 0..g2.n_models() {
            let p = g2.assoc.prob(m, i);
            if p == 0.0 {
                continue;
            }
            let g2v = g2.evaluate_model(m, x0);
            for_each_kernel_point(g2v, noise_std, z_grid, |l, phi| {
                row[l] += p * phi;
            });
        }
    });
    BFields { nz, b0 }
}
