//! Globally adaptive Gauss–Kronrod (7/15) quadrature on bounded intervals.

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_ABS_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_SUBDIVISIONS: usize = 10_000;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod rule on `[a, b]`; returns (estimate, error bound).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Integral of `f` over `[a, b]` to absolute tolerance `abs_tol`.
///
/// Splits the interval with the largest error estimate until the summed
/// estimate falls below the tolerance or `max_subdivisions` is reached.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_subdivisions: usize,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidInput(
            "integration limits must be finite".into(),
        ));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let (v, e) = gk15(&f, lo, hi);
    let mut pieces: Vec<(f64, f64, f64, f64)> = alloc::vec![(lo, hi, v, e)];
    loop {
        let total: f64 = pieces.iter().map(|p| p.2).sum();
        let err: f64 = pieces.iter().map(|p| p.3).sum();
        if !total.is_finite() {
            return Err(Error::QuadratureFailure(f64::INFINITY));
        }
        if err <= abs_tol {
            return Ok(sign * total);
        }
        if pieces.len() >= max_subdivisions {
            return Err(Error::QuadratureFailure(err));
        }
        let (worst, _) =
            pieces.iter().enumerate().fold(
                (0, -1.0),
                |(bi, be), (i, p)| if p.3 > be { (i, p.3) } else { (bi, be) },
            );
        let (l, h, _, _) = pieces.swap_remove(worst);
        let mid = 0.5 * (l + h);
        if !(mid > l && mid < h) {
            return Err(Error::QuadratureFailure(err));
        }
        let (v1, e1) = gk15(&f, l, mid);
        let (v2, e2) = gk15(&f, mid, h);
        pieces.push((l, mid, v1, e1));
        pieces.push((mid, h, v2, e2));
    }
}

/// [`integrate`] with the default tolerance and subdivision cap.
pub fn integrate_default<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> Result<f64> {
    integrate(f, a, b, DEFAULT_ABS_TOL, DEFAULT_MAX_SUBDIVISIONS)
}
