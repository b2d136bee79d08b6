//! Entropy-regularized optimal transport by Sinkhorn scaling.

use crate::error::{CilError, Result};
use crate::tensor::Tensor;

/// Marginal tolerance at which the iteration stops.
pub const SINKHORN_TOL: f64 = 1e-9;

/// Plan `P = diag(u) K diag(v)` with `K = exp(-C / epsilon)` whose row sums
/// are `a` and column sums are `b` (both within [`SINKHORN_TOL`]).
pub fn sinkhorn(cost: &Tensor, a: &[f64], b: &[f64], epsilon: f64, max_iters: usize) -> Result<Tensor> {
    if cost.shape().len() != 2 || cost.rows() != a.len() || cost.cols() != b.len() {
        return Err(CilError::Shape {
            op: "sinkhorn",
            lhs: cost.shape().to_vec(),
            rhs: vec![a.len(), b.len()],
        });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CilError::invalid(format!("sinkhorn: epsilon must be positive, got {epsilon}")));
    }
    if cost.data().iter().any(|&c| !(c >= 0.0)) {
        return Err(CilError::invalid("sinkhorn: costs must be non-negative"));
    }
    for (name, m) in [("a", a), ("b", b)] {
        if m.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(CilError::invalid(format!("sinkhorn: marginal {name} must be positive")));
        }
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if (sa - sb).abs() > SINKHORN_TOL * sa.max(1.0) {
        return Err(CilError::invalid(format!(
            "sinkhorn: marginals carry different mass ({sa} vs {sb})"
        )));
    }
    let (p, q) = (a.len(), b.len());
    let k: Vec<f64> = cost.data().iter().map(|c| (-c / epsilon).exp()).collect();
    if k.contains(&0.0) {
        return Err(CilError::invalid("sinkhorn: epsilon too small, kernel underflows"));
    }
    let mut u = vec![1.0; p];
    let mut v = vec![1.0; q];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        for i in 0..p {
            let kv: f64 = (0..q).map(|j| k[i * q + j] * v[j]).sum();
            u[i] = a[i] / kv;
        }
        for j in 0..q {
            let ku: f64 = (0..p).map(|i| k[i * q + j] * u[i]).sum();
            v[j] = b[j] / ku;
        }
        let plan: Vec<f64> = (0..p * q).map(|ij| u[ij / q] * k[ij] * v[ij % q]).collect();
        residual = marginal_residual(&plan, a, b);
        if residual <= SINKHORN_TOL {
            return Tensor::new(vec![p, q], plan);
        }
    }
    Err(CilError::NotConverged {
        iters: max_iters,
        residual,
    })
}

/// Largest absolute deviation of the plan's row and column sums from `a`, `b`.
pub fn marginal_residual(plan: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let q = b.len();
    let rows = a
        .iter()
        .enumerate()
        .map(|(i, &ai)| (plan[i * q..(i + 1) * q].iter().sum::<f64>() - ai).abs());
    let cols = b
        .iter()
        .enumerate()
        .map(|(j, &bj)| ((0..a.len()).map(|i| plan[i * q + j]).sum::<f64>() - bj).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_cost_gives_product_plan() {
        let cost = Tensor::matrix(2, 3, vec![0.7; 6]).unwrap();
        let a = [0.5, 0.5];
        let b = [1.0 / 3.0; 3];
        let plan = sinkhorn(&cost, &a, &b, 0.1, 1000).unwrap();
        for v in plan.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell() {
        let plan = sinkhorn(&Tensor::matrix(1, 1, vec![3.0]).unwrap(), &[1.0], &[1.0], 0.5, 10).unwrap();
        assert!((plan.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cheap_diagonal_dominates() {
        let cost = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let plan = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.05, 1000).unwrap();
        assert!(plan.data()[0] > 0.49 && plan.data()[1] < 0.01);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(sinkhorn(&c, &[1.0], &[0.5, 0.5], 0.0, 10).is_err());
        assert!(sinkhorn(&c, &[1.0], &[0.7, 0.7], 0.1, 10).is_err());
        assert!(sinkhorn(&c, &[1.0, 0.0], &[0.5, 0.5], 0.1, 10).is_err());
        let neg = Tensor::matrix(1, 2, vec![0.0, -1.0]).unwrap();
        assert!(sinkhorn(&neg, &[1.0], &[0.5, 0.5], 0.1, 10).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        let c = Tensor::matrix(2, 2, vec![0.0, 5.0, 5.0, 0.0]).unwrap();
        let err = sinkhorn(&c, &[0.9, 0.1], &[0.1, 0.9], 0.2, 1).unwrap_err();
        assert!(matches!(err, CilError::NotConverged { iters: 1, .. }));
    }
}
