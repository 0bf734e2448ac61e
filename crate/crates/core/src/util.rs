//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation. Fixed reduction order, so results are
/// identical across runs and thread counts, and roundoff grows like
/// O(log n) instead of O(n).
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const CHUNK: usize = 32;
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// SplitMix64 step; decorrelates seeds derived from a master seed.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent seed for (stream, index) from a master seed.
pub(crate) fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut s = master ^ stream.wrapping_mul(0xa076_1d64_78bd_642f);
    let _ = splitmix64(&mut s);
    let mut s = s ^ index.wrapping_mul(0xe703_7ed1_a0b4_28db);
    splitmix64(&mut s)
}

/// Golden-section minimization of a unimodal scalar function on [lo, hi].
pub(crate) fn golden_section<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let xm = 0.5 * (lo + hi);
    (xm, f(xm))
}

/// Piecewise-linear interpolation of samples `(xs[i], values[i])` at x,
/// clamped to the end values outside the sampled range. `xs` must be
/// strictly increasing.
pub(crate) fn interp_clamped(xs: &[f64], values: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return values[0];
    }
    if x >= xs[n - 1] {
        return values[n - 1];
    }
    let j = xs.partition_point(|&p| p <= x) - 1;
    let frac = (x - xs[j]) / (xs[j + 1] - xs[j]);
    values[j] * (1.0 - frac) + values[j + 1] * frac
}
