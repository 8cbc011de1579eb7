//! Sparse projections onto the probability simplex.
//!
//! `sparsegen_lin(z, λ)` is the Euclidean projection of `z / (1 − λ)` onto
//! `Δ^{K−1}`. With `u = z / (1 − λ)` sorted as `u_(1) ≥ … ≥ u_(K)`, the support
//! size is the largest `k` with `1 + k·u_(k) > Σ_{j≤k} u_(j)`, the threshold is
//! `τ = (Σ_{j≤k} u_(j) − 1) / k`, and `p_i = max(u_i − τ, 0)`.
//! `sparsemax` is the `λ = 0` member of the family.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Scaled logits closer than this to the threshold are treated as off-support.
pub const SUPPORT_EPS: f64 = 1e-12;

/// Default sparsity parameter used by training runs.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Unnormalized pattern scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("logit vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<&[f64]> for LogitVector {
    type Error = Error;

    fn try_from(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexDistribution(Vec<f64>);

impl SimplexDistribution {
    /// Tolerance on `Σ p = 1` accepted by [`SimplexDistribution::new`].
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("distribution must be non-empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "distribution has negative or non-finite entries: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Result of a sparsegen-lin projection together with the quantities needed
/// to differentiate through it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSolution {
    pub distribution: SimplexDistribution,
    /// Indices with strictly positive probability, ascending.
    pub support: Vec<usize>,
    /// Threshold τ* subtracted from the scaled logits.
    pub threshold: f64,
    pub lambda: f64,
    scaled: Vec<f64>,
}

impl ProjectionSolution {
    pub fn probs(&self) -> &[f64] {
        self.distribution.probs()
    }

    /// The scaled logits `z / (1 − λ)`.
    pub fn scaled_logits(&self) -> &[f64] {
        &self.scaled
    }

    pub fn is_supported(&self, i: usize) -> bool {
        self.support.binary_search(&i).is_ok()
    }

    /// Smallest distance between a scaled logit and the threshold, in units
    /// of the original logits. Small values mean `z` sits near a support
    /// change, where the map is not differentiable.
    pub fn boundary_margin(&self) -> f64 {
        let scale = 1.0 - self.lambda;
        self.scaled
            .iter()
            .map(|u| (u - self.threshold).abs() * scale)
            .fold(f64::INFINITY, f64::min)
    }

    /// Vector-Jacobian product `Jᵀ·grad` without materializing `J`.
    ///
    /// On the support this is `(g_i − mean_S g) / (1 − λ)`; off the support it is zero.
    pub fn backward(&self, grad_probs: &[f64]) -> Vec<f64> {
        let k = self.scaled.len();
        assert_eq!(grad_probs.len(), k, "gradient length must equal K");
        let mean = self.support.iter().map(|&i| grad_probs[i]).sum::<f64>()
            / self.support.len() as f64;
        let inv = 1.0 / (1.0 - self.lambda);
        let mut out = vec![0.0; k];
        for &i in &self.support {
            out[i] = (grad_probs[i] - mean) * inv;
        }
        out
    }
}

/// `∂p/∂z` of the projection at a fixed support.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexJacobian(pub Array2<f64>);

impl SimplexJacobian {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda must be finite and < 1, got {lambda}"
        )));
    }
    Ok(())
}

/// Closed-form sparsegen-lin projection.
pub fn sparsegen_lin(z: &LogitVector, lambda: f64) -> Result<ProjectionSolution> {
    check_lambda(lambda)?;
    let scale = 1.0 / (1.0 - lambda);
    let u: Vec<f64> = z.values().iter().map(|v| v * scale).collect();
    if let Some(i) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "scaled logit {i} overflowed for lambda {lambda}"
        )));
    }

    // Stable descending sort: ties keep their original index order.
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]));

    // g(k) = 1 + k·u_(k) − Σ_{j≤k} u_(j) is non-increasing in k, so the
    // admissible k form a prefix and we can stop at the first failure.
    let mut cumsum = 0.0;
    let mut support_size = 0;
    let mut support_sum = 0.0;
    for (idx, &i) in order.iter().enumerate() {
        let k = (idx + 1) as f64;
        cumsum += u[i];
        let tau_k = (cumsum - 1.0) / k;
        if u[i] - tau_k > SUPPORT_EPS {
            support_size = idx + 1;
            support_sum = cumsum;
        } else {
            break;
        }
    }
    debug_assert!(support_size >= 1, "the largest entry is always supported");

    let threshold = (support_sum - 1.0) / support_size as f64;
    let mut probs = vec![0.0; u.len()];
    let mut support: Vec<usize> = order[..support_size].to_vec();
    support.sort_unstable();
    for &i in &support {
        probs[i] = u[i] - threshold;
    }

    Ok(ProjectionSolution {
        distribution: SimplexDistribution(probs),
        support,
        threshold,
        lambda,
        scaled: u,
    })
}

/// Euclidean projection of `z` onto the simplex (sparsegen-lin at `λ = 0`).
pub fn sparsemax(z: &LogitVector) -> Result<ProjectionSolution> {
    sparsegen_lin(z, 0.0)
}

/// Jacobian of the projection: `(Diag(s) − s sᵀ/|S|) / (1 − λ)` with `s` the
/// support indicator.
pub fn projection_jacobian(sol: &ProjectionSolution) -> Result<SimplexJacobian> {
    if sol.support.is_empty() {
        return Err(Error::Internal("projection has empty support".into()));
    }
    let k = sol.scaled.len();
    let inv = 1.0 / (1.0 - sol.lambda);
    let size = sol.support.len() as f64;
    let mut jac = Array2::zeros((k, k));
    for &i in &sol.support {
        for &j in &sol.support {
            let diag = if i == j { 1.0 } else { 0.0 };
            jac[[i, j]] = (diag - 1.0 / size) * inv;
        }
    }
    Ok(SimplexJacobian(jac))
}

/// Slow reference minimizer of `‖p − z/(1−λ)‖²` over the simplex, independent
/// of the sort-and-threshold closed form. Used as a test oracle.
///
/// For `K ≤ 3` this is a zooming grid search that refines until the grid
/// spacing drops below `resolution`. For `K ∈ {4, 5}` it enumerates every
/// face of the simplex, minimizes on the face's affine hull, and keeps the best
/// candidate that is feasible to within `resolution`.
pub fn brute_force_projection(
    z: &LogitVector,
    lambda: f64,
    resolution: f64,
) -> Result<SimplexDistribution> {
    check_lambda(lambda)?;
    if !(resolution > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    let k = z.len();
    if k > 5 {
        return Err(Error::UnsupportedSize(format!(
            "brute-force projection supports K <= 5, got {k}"
        )));
    }
    let target: Vec<f64> = z.values().iter().map(|v| v / (1.0 - lambda)).collect();
    let probs = match k {
        1 => vec![1.0],
        2 | 3 => zoom_grid(&target, resolution),
        _ => face_enumeration(&target, resolution),
    };
    Ok(SimplexDistribution(probs))
}

fn sq_dist(p: &[f64], target: &[f64]) -> f64 {
    p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn zoom_grid(target: &[f64], resolution: f64) -> Vec<f64> {
    const HALF_WIDTH: i32 = 20;
    let k = target.len();
    // On the simplex ‖p − t‖² differs from ‖p − q‖² by a constant, where q is
    // t moved onto Σp = 1. Measuring against q keeps the objective small near
    // interior optima, where absolute rounding would otherwise hide progress.
    let shift = (target.iter().sum::<f64>() - 1.0) / k as f64;
    let plane: Vec<f64> = target.iter().map(|t| t - shift).collect();
    let target = plane.as_slice();
    let mut best = vec![1.0 / k as f64; k];
    let mut best_val = sq_dist(&best, target);
    let mut step: f64 = 0.05;
    // First pass covers the whole simplex from its centroid.
    let mut center_span: f64 = 1.0;
    loop {
        let n = ((center_span / step).ceil() as i32).max(HALF_WIDTH);
        let center = best.clone();
        let free = k - 1;
        let mut candidate = vec![0.0; k];
        let mut visit = |coords: &[f64]| {
            // Interior point plus its projection onto the last facet.
            let head: f64 = coords.iter().sum();
            if head <= 1.0 + 1e-15 {
                candidate[..free].copy_from_slice(coords);
                candidate[free] = (1.0 - head).max(0.0);
                let val = sq_dist(&candidate, target);
                if val < best_val {
                    best_val = val;
                    best.copy_from_slice(&candidate);
                }
            }
        };
        let coord = |c: f64, i: i32| (c + i as f64 * step).clamp(0.0, 1.0);
        if free == 1 {
            for i in -n..=n {
                visit(&[coord(center[0], i)]);
            }
        } else {
            for i in -n..=n {
                let a = coord(center[0], i);
                for j in -n..=n {
                    let b = coord(center[1], j);
                    visit(&[a, b]);
                }
                // Points on the facet p_3 = 0 are missed by the lattice.
                visit(&[a, 1.0 - a]);
            }
            for j in -n..=n {
                let b = coord(center[1], j);
                visit(&[1.0 - b, b]);
            }
        }
        if step <= resolution {
            break;
        }
        center_span = 2.0 * step;
        step /= 10.0;
    }
    best
}

fn face_enumeration(target: &[f64], tolerance: f64) -> Vec<f64> {
    let k = target.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        // Minimizer of ‖p − t‖² on {p : Σ p = 1, p_i = 0 off the face}.
        let shift = (members.iter().map(|&i| target[i]).sum::<f64>() - 1.0)
            / members.len() as f64;
        let mut p = vec![0.0; k];
        for &i in &members {
            p[i] = target[i] - shift;
        }
        if p.iter().any(|&v| v < -tolerance) {
            continue;
        }
        for v in p.iter_mut() {
            *v = v.max(0.0);
        }
        let val = sq_dist(&p, target);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, p));
        }
    }
    best.expect("the vertex faces are always feasible").1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn constant_logits_project_to_uniform() {
        for &c in &[-3.0, 0.0, 0.7, 12.0] {
            for &lambda in &[-1.0, 0.0, 0.5, 0.9] {
                let sol = sparsegen_lin(&lv(&[c; 4]), lambda).unwrap();
                for &p in sol.probs() {
                    assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12);
                }
                assert_eq!(sol.support, vec![0, 1, 2, 3]);
            }
        }
    }

    #[test]
    fn near_one_lambda_is_one_hot() {
        let sol = sparsegen_lin(&lv(&[0.1, 0.3, 0.25]), 0.999).unwrap();
        assert_eq!(sol.probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(sol.support, vec![1]);
    }

    #[test]
    fn large_gap_collapses_sparsemax() {
        for &t in &[1.0, 1.5, 40.0] {
            let sol = sparsemax(&lv(&[t, 0.0])).unwrap();
            assert_eq!(sol.probs(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn sparsemax_reference_values() {
        // Frozen from the grid oracle (see tests/projection.rs).
        let sol = sparsemax(&lv(&[0.9, 0.5, -0.3])).unwrap();
        assert_abs_diff_eq!(sol.probs()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.probs()[1], 0.3, epsilon = 1e-12);
        assert_eq!(sol.probs()[2], 0.0);
        assert_abs_diff_eq!(sol.threshold, 0.2, epsilon = 1e-12);

        let sol = sparsemax(&lv(&[0.2, 0.1, 0.0])).unwrap();
        let expected = [0.1 + 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0 - 0.1];
        for (p, e) in sol.probs().iter().zip(expected) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn ties_do_not_depend_on_order() {
        let a = sparsegen_lin(&lv(&[0.4, 0.4, 0.1, 0.4]), 0.2).unwrap();
        let b = sparsegen_lin(&lv(&[0.4, 0.1, 0.4, 0.4]), 0.2).unwrap();
        assert_eq!(a.probs()[0], b.probs()[0]);
        assert_eq!(a.probs()[2], b.probs()[1]);
        assert_eq!(a.threshold, b.threshold);
        // Ties at the boundary are never split.
        let c = sparsegen_lin(&lv(&[2.0, 1.0, 1.0]), 0.0).unwrap();
        assert_eq!(c.support, vec![0]);
        let d = sparsegen_lin(&lv(&[1.0, 0.5, 0.5]), 0.0).unwrap();
        assert_eq!(d.support, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            sparsegen_lin(&lv(&[0.0, 1.0]), 1.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            sparsegen_lin(&lv(&[0.0, 1.0]), f64::NAN),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            LogitVector::new(vec![0.0, f64::INFINITY]),
            Err(Error::InvalidInput(_))
        ));
        assert!(LogitVector::new(vec![]).is_err());
        assert!(matches!(
            brute_force_projection(&lv(&[0.0; 6]), 0.0, 1e-6),
            Err(Error::UnsupportedSize(_))
        ));
    }

    #[test]
    fn jacobian_closed_forms() {
        let sol = sparsemax(&lv(&[0.1, 0.0])).unwrap();
        let jac = projection_jacobian(&sol).unwrap();
        assert_eq!(
            jac.matrix(),
            &ndarray::arr2(&[[0.5, -0.5], [-0.5, 0.5]])
        );

        let one_hot = sparsegen_lin(&lv(&[3.0, 0.0, -1.0]), 0.5).unwrap();
        let jac = projection_jacobian(&one_hot).unwrap();
        assert!(jac.matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_jacobian() {
        let sol = sparsegen_lin(&lv(&[0.3, -0.2, 0.25, 0.0]), 0.3).unwrap();
        let jac = projection_jacobian(&sol).unwrap();
        let g = [0.7, -1.1, 0.4, 2.0];
        let vjp = sol.backward(&g);
        for i in 0..4 {
            let expected: f64 = (0..4).map(|j| jac.matrix()[[j, i]] * g[j]).sum();
            assert_abs_diff_eq!(vjp[i], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn brute_force_trivial_cases() {
        let p = brute_force_projection(&lv(&[1.0, 0.0, 0.0]), 0.0, 1e-9).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 1.0, epsilon = 1e-9);
        let p = brute_force_projection(&lv(&[0.3; 5]), 0.0, 1e-9).unwrap();
        for &v in p.probs() {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-12);
        }
        let p = brute_force_projection(&lv(&[0.3; 3]), 0.4, 1e-9).unwrap();
        for &v in p.probs() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-9);
        }
    }
}
