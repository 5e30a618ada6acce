//! Geometry of the probability simplex.
//!
//! Points live on `S = {p in R^d : p >= 0, sum p = 1}`. Velocities and
//! gradients live on the tangent hyperplane `H0 = {v : sum v = 0}`.
//! Differentiation is always performed at strictly interior points.

use alloc::vec::Vec;
use core::ops::Index;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum p = 1` and on `sum v = 0`.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Negative coordinates above this value are treated as integrator drift and clamped.
pub const CLAMP_TOLERANCE: f64 = 1e-12;

/// Probability vector on `{1..d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint {
    weights: Vec<f64>,
}

impl SimplexPoint {
    /// Builds a point, clamping drift in `[-1e-12, 0)` and renormalizing.
    pub fn new(mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        for (i, w) in weights.iter_mut().enumerate() {
            if !w.is_finite() {
                return Err(Error::InvalidInput(alloc::format!(
                    "coordinate {i} is not finite"
                )));
            }
            if *w < 0.0 {
                if *w >= -CLAMP_TOLERANCE {
                    *w = 0.0;
                } else {
                    return Err(Error::InvalidInput(alloc::format!(
                        "coordinate {i} is negative ({w:e})"
                    )));
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput(
                "probability vector has zero mass".into(),
            ));
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(alloc::format!(
                "coordinates sum to {total}, expected 1"
            )));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { weights })
    }

    /// Builds a point from nonnegative masses of arbitrary total.
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidInput(
                "masses must have positive finite total".into(),
            ));
        }
        Self::new(masses.into_iter().map(|m| m / total).collect())
    }

    pub fn uniform(d: usize) -> Self {
        Self {
            weights: alloc::vec![1.0 / d as f64; d],
        }
    }

    /// Vertex `e_x` (zero-based).
    pub fn vertex(d: usize, x: usize) -> Self {
        let mut weights = alloc::vec![0.0; d];
        weights[x] = 1.0;
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn min_coord(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_interior(&self) -> bool {
        self.min_coord() > 0.0
    }

    pub fn l1_distance(&self, other: &SimplexPoint) -> f64 {
        l1_distance(&self.weights, &other.weights)
    }

    /// Errors with `BoundaryProximity` unless every coordinate is at least `min`.
    pub fn require_interior(&self, min: f64) -> Result<()> {
        let min_coord = self.min_coord();
        if min_coord < min {
            Err(Error::BoundaryProximity {
                min_coord,
                required: min,
            })
        } else {
            Ok(())
        }
    }
}

impl Index<usize> for SimplexPoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.weights[i]
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Vec<f64> {
        p.weights
    }
}

/// Vector in the tangent hyperplane `H0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TangentVector {
    components: Vec<f64>,
}

impl TangentVector {
    /// Accepts `v` only if its coordinates sum to zero.
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(
                "tangent vector has non-finite entries".into(),
            ));
        }
        let scale = components.iter().map(|c| c.abs()).sum::<f64>().max(1.0);
        let total: f64 = components.iter().sum();
        if total.abs() > SUM_TOLERANCE * scale {
            return Err(Error::InvalidInput(alloc::format!(
                "tangent vector coordinates sum to {total:e}"
            )));
        }
        Ok(Self { components })
    }

    pub fn zero(d: usize) -> Self {
        Self {
            components: alloc::vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn into_components(self) -> Vec<f64> {
        self.components
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.components, other)
    }

    pub fn norm_inf(&self) -> f64 {
        self.components.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

impl Index<usize> for TangentVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.components[i]
    }
}

impl TryFrom<Vec<f64>> for TangentVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TangentVector> for Vec<f64> {
    fn from(v: TangentVector) -> Vec<f64> {
        v.components
    }
}

/// Orthogonal projection onto `H0`: `v - mean(v) 1`.
pub fn tangent_project(v: &[f64]) -> Result<TangentVector> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(
            "cannot project a non-finite vector".into(),
        ));
    }
    Ok(TangentVector {
        components: center(v),
    })
}

pub(crate) fn center(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|c| c - mean).collect()
}

/// Helmert basis vector `k` (zero-based, `k < d - 1`) of `H0`.
///
/// `h_k = (1, .., 1, -(k+1), 0, .., 0) / sqrt((k+1)(k+2))` with `k + 1` leading ones.
pub fn helmert_vector(d: usize, k: usize) -> Vec<f64> {
    let m = (k + 1) as f64;
    let norm = (m * (m + 1.0)).sqrt();
    let mut v = alloc::vec![0.0; d];
    for c in v.iter_mut().take(k + 1) {
        *c = 1.0 / norm;
    }
    v[k + 1] = -m / norm;
    v
}

/// Orthonormal Helmert basis of `H0`, one vector per row.
pub fn helmert_basis(d: usize) -> Vec<Vec<f64>> {
    (0..d.saturating_sub(1))
        .map(|k| helmert_vector(d, k))
        .collect()
}

/// Default finite-difference step: `1e-5 * max(1, |r|_inf)`.
pub fn default_step(r: &SimplexPoint) -> f64 {
    let inf = r.weights().iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    1e-5 * inf.max(1.0)
}

/// Tangent gradient by central differences along the Helmert basis.
pub fn tangent_gradient<F>(f: F, r: &SimplexPoint, h: f64) -> Result<TangentVector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(
            "finite-difference step must be positive".into(),
        ));
    }
    r.require_interior(2.0 * h)?;
    let d = r.dim();
    let mut grad = alloc::vec![0.0; d];
    let mut plus = r.weights().to_vec();
    let mut minus = r.weights().to_vec();
    for k in 0..d - 1 {
        let basis = helmert_vector(d, k);
        for i in 0..d {
            plus[i] = r[i] + h * basis[i];
            minus[i] = r[i] - h * basis[i];
        }
        let slope = (f(&plus) - f(&minus)) / (2.0 * h);
        for i in 0..d {
            grad[i] += slope * basis[i];
        }
    }
    tangent_project(&grad)
}

/// Interior lattice of the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexGrid {
    pub points: Vec<SimplexPoint>,
    pub resolution: usize,
    pub margin: f64,
}

impl SimplexGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, SimplexPoint::dim)
    }
}

/// Lattice points `k / resolution` on the simplex with every coordinate at least `margin`.
///
/// Points are listed in ascending lexicographic order of the integer vector `k`.
pub fn interior_grid(d: usize, resolution: usize, margin: f64) -> Result<SimplexGrid> {
    if d < 2 {
        return Err(Error::InvalidParameters(
            "grid dimension must be at least 2".into(),
        ));
    }
    if resolution == 0 {
        return Err(Error::InvalidParameters(
            "grid resolution must be positive".into(),
        ));
    }
    if !(margin >= 0.0) || margin * d as f64 >= 1.0 {
        return Err(Error::InvalidParameters(alloc::format!(
            "margin {margin} incompatible with dimension {d}"
        )));
    }
    let n = resolution as f64;
    let mut points = Vec::new();
    for_each_composition(resolution, d, |k| {
        if k.iter().all(|&ki| ki as f64 / n >= margin - 1e-12) {
            points.push(SimplexPoint {
                weights: k.iter().map(|&ki| ki as f64 / n).collect(),
            });
        }
    });
    if points.is_empty() {
        return Err(Error::InvalidParameters(alloc::format!(
            "grid d={d} resolution={resolution} margin={margin} is empty"
        )));
    }
    Ok(SimplexGrid {
        points,
        resolution,
        margin,
    })
}

/// Smallest-resolution interior grid holding at least `min_points` points.
pub fn interior_grid_with_at_least(
    d: usize,
    min_points: usize,
    margin: f64,
) -> Result<SimplexGrid> {
    let mut resolution = 1;
    loop {
        match interior_grid(d, resolution, margin) {
            Ok(grid) if grid.len() >= min_points => return Ok(grid),
            Ok(_) | Err(Error::InvalidParameters(_)) if resolution < 100_000 => resolution += 1,
            Ok(_) => {
                return Err(Error::InvalidParameters(
                    "grid resolution limit reached".into(),
                ))
            }
            Err(e) => return Err(e),
        }
    }
}

/// Visits every `k in N^d` with `sum k = total`, in ascending lexicographic order.
pub fn for_each_composition<F: FnMut(&[usize])>(total: usize, d: usize, mut visit: F) {
    let mut k = alloc::vec![0usize; d];
    fn rec<F: FnMut(&[usize])>(k: &mut [usize], pos: usize, remaining: usize, visit: &mut F) {
        let d = k.len();
        if pos == d - 1 {
            k[pos] = remaining;
            visit(k);
            return;
        }
        for v in 0..=remaining {
            k[pos] = v;
            rec(k, pos + 1, remaining - v, visit);
        }
    }
    if d == 0 {
        return;
    }
    rec(&mut k, 0, total, &mut visit);
}

/// Random point with every coordinate at least `min_coord`: an affine shrink of a flat Dirichlet draw.
pub fn random_interior<R: Rng + ?Sized>(d: usize, min_coord: f64, rng: &mut R) -> SimplexPoint {
    let mut e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    let scale = 1.0 - d as f64 * min_coord;
    for x in &mut e {
        *x = min_coord + scale * *x / total;
    }
    let total: f64 = e.iter().sum();
    SimplexPoint {
        weights: e.into_iter().map(|x| x / total).collect(),
    }
}

/// Random unit (Euclidean) vector in `H0`.
pub fn random_tangent_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let v = center(&raw);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|c| c / norm).collect();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Reduced coordinates: drop the last component.
pub(crate) fn embed_reduced(s: &[f64]) -> Vec<f64> {
    let mut r = s.to_vec();
    r.push(1.0 - s.iter().sum::<f64>());
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx_eq(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn construction_clamps_drift_and_rejects_real_negatives() {
        let p = SimplexPoint::new(vec![0.5, 0.5 + 1e-13, -5e-13]).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        assert!(SimplexPoint::new(vec![1.1, -0.1]).is_err());
        assert!(SimplexPoint::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(
            tangent_project(&[1.0, 1.0, 1.0]).unwrap().components(),
            &[0.0, 0.0, 0.0]
        );
        assert_eq!(
            tangent_project(&[1.0, 0.0]).unwrap().components(),
            &[0.5, -0.5]
        );
        assert!(tangent_project(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn tangent_vector_rejects_nonzero_sum() {
        assert!(TangentVector::new(vec![1.0, 0.0]).is_err());
        assert!(TangentVector::new(vec![1.0, -1.0]).is_ok());
    }

    #[test]
    fn helmert_basis_is_orthonormal_and_tangent() {
        for d in 2..7 {
            let basis = helmert_basis(d);
            for (i, a) in basis.iter().enumerate() {
                assert!(a.iter().sum::<f64>().abs() < 1e-15);
                for (j, b) in basis.iter().enumerate() {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot(a, b) - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gradient_of_linear_field_is_projected_coefficients() {
        let c = [0.3, -1.2, 2.5, 0.7];
        let r = SimplexPoint::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = tangent_gradient(|x| dot(x, &c), &r, 1e-5).unwrap();
        let expected = tangent_project(&c).unwrap();
        assert!(approx_eq(g.components(), expected.components(), 1e-9));
    }

    #[test]
    fn gradient_of_negative_entropy_vanishes_at_uniform() {
        let r = SimplexPoint::uniform(2);
        let g = tangent_gradient(|x| x.iter().map(|v| v * v.ln()).sum(), &r, 1e-5).unwrap();
        assert!(g.norm_inf() < 1e-9);
    }

    #[test]
    fn gradient_of_relative_entropy_converges_at_second_order() {
        let pi = [0.2, 0.5, 0.3];
        let r = SimplexPoint::new(vec![0.4, 0.35, 0.25]).unwrap();
        let rel = |x: &[f64]| {
            x.iter()
                .zip(&pi)
                .map(|(a, b)| a * (a / b).ln())
                .sum::<f64>()
        };
        let analytic: Vec<f64> = r
            .weights()
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a / b).ln() + 1.0)
            .collect();
        let analytic = tangent_project(&analytic).unwrap();
        let err = |h: f64| {
            let g = tangent_gradient(rel, &r, h).unwrap();
            l1_distance(g.components(), analytic.components())
        };
        let (e1, e2) = (err(2e-2), err(1e-2));
        let order = (e1 / e2).log2();
        assert!(order >= 1.9, "observed order {order}");
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        assert!(err(1e-5) < 1e-8);
    }

    #[test]
    fn gradient_rejects_boundary_points() {
        let r = SimplexPoint::new(vec![1e-6, 1.0 - 1e-6]).unwrap();
        assert!(matches!(
            tangent_gradient(|x| x[0], &r, 1e-5),
            Err(Error::BoundaryProximity { .. })
        ));
    }

    #[test]
    fn grid_examples() {
        let g = interior_grid(2, 4, 0.0).unwrap();
        let pts: Vec<Vec<f64>> = g.points.iter().map(|p| p.weights().to_vec()).collect();
        assert_eq!(
            pts,
            vec![
                vec![0.0, 1.0],
                vec![0.25, 0.75],
                vec![0.5, 0.5],
                vec![0.75, 0.25],
                vec![1.0, 0.0]
            ]
        );
        for n in [1usize, 3, 7, 12] {
            assert_eq!(
                interior_grid(3, n, 0.0).unwrap().len(),
                (n + 1) * (n + 2) / 2
            );
        }
        assert_eq!(interior_grid(2, 10, 0.15).unwrap().len(), 7);
        assert!(interior_grid(3, 2, 0.3).is_err());
        assert!(interior_grid(1, 2, 0.0).is_err());
        let g = interior_grid(3, 30, 0.02).unwrap();
        assert!(g.points.iter().all(|p| p.min_coord() >= 0.02 - 1e-12));
        assert_eq!(g, interior_grid(3, 30, 0.02).unwrap());
    }

    #[test]
    fn grid_with_minimum_size() {
        let g = interior_grid_with_at_least(2, 200, 0.02).unwrap();
        assert!(g.len() >= 200);
        let g = interior_grid_with_at_least(3, 200, 0.02).unwrap();
        assert!(g.len() >= 200);
    }

    #[test]
    fn random_interior_respects_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_interior(4, 0.05, &mut rng);
            assert!(p.min_coord() >= 0.05 - 1e-15);
            assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_annihilates_ones(v in proptest::collection::vec(-10.0f64..10.0, 2..8)) {
            let once = tangent_project(&v).unwrap();
            let twice = tangent_project(once.components()).unwrap();
            prop_assert!(approx_eq(once.components(), twice.components(), 1e-14));
            prop_assert!(once.components().iter().sum::<f64>().abs() < 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + 3.5).collect();
            let p2 = tangent_project(&shifted).unwrap();
            prop_assert!(approx_eq(once.components(), p2.components(), 1e-12));
        }

        #[test]
        fn projection_is_linear(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            s in -3.0f64..3.0,
        ) {
            let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
            let lhs = tangent_project(&combo).unwrap();
            let pa = tangent_project(&a).unwrap();
            let pb = tangent_project(&b).unwrap();
            let rhs: Vec<f64> = pa.components().iter().zip(pb.components()).map(|(x, y)| x + s * y).collect();
            prop_assert!(approx_eq(lhs.components(), &rhs, 1e-12));
        }

        #[test]
        fn gradient_ignores_additive_constants(seed in 0u64..1000, c in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_interior(3, 0.1, &mut rng);
            let f = |x: &[f64]| x[0] * x[1] + (x[2] + 0.5).ln();
            let g1 = tangent_gradient(f, &r, 1e-2).unwrap();
            let g2 = tangent_gradient(|x| f(x) + c, &r, 1e-2).unwrap();
            prop_assert!(approx_eq(g1.components(), g2.components(), 1e-12));
        }

        #[test]
        fn constructed_points_are_normalized(v in proptest::collection::vec(0.0f64..1.0, 2..8)) {
            prop_assume!(v.iter().sum::<f64>() > 1e-3);
            let p = SimplexPoint::from_masses(v).unwrap();
            prop_assert!((p.weights().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(p.min_coord() >= 0.0);
        }
    }
}
