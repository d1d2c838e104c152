//! Problem instances, oracle contracts, iterate state, and the fixed-point
//! optimality residual shared by all solvers.

use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::prox::{scaled_prox, Metric, NonsmoothTerm};

/// Oracle for the smooth term `f` of a composite objective `F = f + g`.
///
/// Implementations must be immutable after construction; all methods take
/// `&self` and may be called concurrently. `scl_constant` returns the
/// constant `M_f` bounding the third directional derivative against the
/// curvature: `|phi'''(t)| <= M_f * phi''(t) * ||u||_2` along every line
/// `x + t u`, where `phi(t) = f(x + t u)`.
pub trait SmoothOracle: Send + Sync {
    /// Number of variables.
    fn dim(&self) -> usize;

    /// `f(x)`. May return a non-finite value on overflow; callers that need
    /// hard guarantees go through [`objective_value`].
    fn value(&self, x: &Array1<f64>) -> f64;

    /// Gradient of `f` at `x`.
    fn grad(&self, x: &Array1<f64>) -> Array1<f64>;

    /// Hessian-vector product `∇²f(x)·v`.
    fn hess_vec(&self, x: &Array1<f64>, v: &Array1<f64>) -> Array1<f64>;

    /// Dense Hessian, if this oracle assembles one. Default: unsupported.
    fn hess_dense(&self, _x: &Array1<f64>) -> Option<Array2<f64>> {
        None
    }

    /// Whether `hess_dense` returns `Some` at the current dimension.
    fn supports_dense_hessian(&self) -> bool {
        false
    }

    /// The constant `M_f >= 0` of the third-derivative bound.
    fn scl_constant(&self) -> f64;
}

/// A composite problem `min F(x) = f(x) + g(x)`.
///
/// Immutable after construction and safe to share between solver runs.
#[derive(Clone)]
pub struct ProblemInstance {
    oracle: Arc<dyn SmoothOracle>,
    nonsmooth: Arc<dyn NonsmoothTerm>,
    dimension: usize,
}

impl ProblemInstance {
    pub fn new(
        oracle: Arc<dyn SmoothOracle>,
        nonsmooth: Arc<dyn NonsmoothTerm>,
    ) -> Result<Self> {
        let dimension = oracle.dim();
        if dimension == 0 {
            return Err(Error::InvalidOption("problem dimension must be positive".into()));
        }
        if oracle.scl_constant() < 0.0 || !oracle.scl_constant().is_finite() {
            return Err(Error::InvalidOption(format!(
                "oracle constant M_f must be finite and nonnegative, got {}",
                oracle.scl_constant()
            )));
        }
        Ok(ProblemInstance {
            oracle,
            nonsmooth,
            dimension,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn oracle(&self) -> &dyn SmoothOracle {
        self.oracle.as_ref()
    }

    pub fn nonsmooth(&self) -> &dyn NonsmoothTerm {
        self.nonsmooth.as_ref()
    }

    fn check_dim(&self, x: &Array1<f64>, context: &'static str) -> Result<()> {
        if x.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: x.len(),
                context,
            });
        }
        Ok(())
    }
}

/// `F(x) = f(x) + g(x)`, rejecting non-finite values instead of letting an
/// overflowed exponential propagate through a solver.
pub fn objective_value(p: &ProblemInstance, x: &Array1<f64>) -> Result<f64> {
    p.check_dim(x, "objective_value")?;
    let fv = p.oracle().value(x);
    if !fv.is_finite() {
        return Err(Error::NonFinite {
            location: "smooth term f(x)".into(),
            value: fv,
        });
    }
    let gv = p.nonsmooth().value(x);
    if !gv.is_finite() {
        return Err(Error::NonFinite {
            location: "nonsmooth term g(x)".into(),
            value: gv,
        });
    }
    Ok(fv + gv)
}

/// Norm of the fixed-point displacement of the metric gradient mapping:
/// `|| x - prox_{H,g}(x - H^{-1} ∇f(x)) ||_2`.
///
/// Zero exactly when `0 ∈ ∇f(x) + ∂g(x)`, up to the tolerance of the inner
/// prox solver for non-diagonal metrics. The prox argument is formed as
/// `H x - ∇f(x)` so no explicit inverse of `H` is ever needed.
pub fn fixed_point_residual(p: &ProblemInstance, x: &Array1<f64>, metric: &Metric) -> Result<f64> {
    p.check_dim(x, "fixed_point_residual")?;
    let grad = p.oracle().grad(x);
    let u = metric.apply(x) - &grad;
    let out = scaled_prox(p.nonsmooth(), metric, &u, residual_prox_tol(&grad))?;
    let diff = x - &out.z;
    Ok(diff.dot(&diff).sqrt())
}

/// Inner tolerance used when evaluating the fixed-point residual: tight in
/// absolute terms, scaled so large gradients do not stall the inner solver.
fn residual_prox_tol(grad: &Array1<f64>) -> f64 {
    1e-12 * (1.0 + grad.dot(grad).sqrt())
}

/// Solver iterate bundle: current point, subproblem solution, and direction.
#[derive(Debug, Clone)]
pub struct IterateState {
    pub x: Array1<f64>,
    pub s: Array1<f64>,
    pub d: Array1<f64>,
    pub k: usize,
}

impl IterateState {
    /// Builds the state with `d = s - x` by construction.
    pub fn new(x: Array1<f64>, s: Array1<f64>, k: usize) -> Self {
        let d = &s - &x;
        IterateState { x, s, d, k }
    }
}

/// One accepted iteration of a solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub f_value: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub r: f64,
    pub beta: f64,
    /// Euclidean norm of the accepted direction `d = s - x`.
    pub residual: f64,
    pub elapsed_seconds: f64,
    /// Cumulative count of proximal-operator evaluations so far.
    pub prox_calls: u64,
}

/// Per-run record of accepted iterations, plus optional iterate snapshots
/// used by rate diagnostics. Single-owner per solver run.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    records: Vec<TraceRecord>,
    iterates: Vec<Array1<f64>>,
}

impl RunTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: TraceRecord) {
        if let Some(last) = self.records.last() {
            debug_assert!(rec.k > last.k, "iteration counter must strictly increase");
        }
        self.records.push(rec);
    }

    pub fn push_iterate(&mut self, x: Array1<f64>) {
        self.iterates.push(x);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn iterates(&self) -> &[Array1<f64>] {
        &self.iterates
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Total prox-operator evaluations over the run.
    pub fn total_prox_calls(&self) -> u64 {
        self.records.last().map(|r| r.prox_calls).unwrap_or(0)
    }
}

/// Relative-error gradient check against central finite differences of
/// `value`. Returns the worst relative error over all coordinates.
pub fn gradient_check(oracle: &dyn SmoothOracle, x: &Array1<f64>) -> f64 {
    let n = oracle.dim();
    let grad = oracle.grad(x);
    let h = f64::EPSILON.powf(1.0 / 3.0) * (1.0 + x.dot(x).sqrt());
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    let grad_scale = grad.dot(&grad).sqrt().max(1.0);
    for i in 0..n {
        xp[i] = x[i] + h;
        let fp = oracle.value(&xp);
        xp[i] = x[i] - h;
        let fm = oracle.value(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad_scale);
    }
    worst
}

/// Relative-error Hessian-vector check against central finite differences of
/// `grad` along `v`.
pub fn hess_vec_check(oracle: &dyn SmoothOracle, x: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let hv = oracle.hess_vec(x, v);
    let vn = v.dot(v).sqrt();
    if vn == 0.0 {
        return 0.0;
    }
    let h = f64::EPSILON.powf(1.0 / 3.0) * (1.0 + x.dot(x).sqrt()) / vn;
    let xp = x + &(h * v);
    let xm = x - &(h * v);
    let fd = (oracle.grad(&xp) - oracle.grad(&xm)) / (2.0 * h);
    let scale = hv.dot(&hv).sqrt().max(1.0);
    let diff = &fd - &hv;
    diff.dot(&diff).sqrt() / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::QuadraticOracle;
    use crate::prox::{L1Term, ZeroTerm};
    use ndarray::{arr1, Array2};

    fn identity_quadratic(n: usize) -> Arc<QuadraticOracle> {
        Arc::new(QuadraticOracle::new(Array2::eye(n), Array1::zeros(n)).unwrap())
    }

    #[test]
    fn objective_zero_at_origin() {
        // f = 0.5||x||^2, g = 0, x = 0 -> 0
        let p = ProblemInstance::new(identity_quadratic(2), Arc::new(ZeroTerm)).unwrap();
        let v = objective_value(&p, &arr1(&[0.0, 0.0])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn objective_quadratic_plus_l1() {
        // f = 0.5||x||^2, g = ||x||_1, x = (1, -1) -> 1 + 2 = 3
        let p = ProblemInstance::new(identity_quadratic(2), Arc::new(L1Term::new(1.0))).unwrap();
        let v = objective_value(&p, &arr1(&[1.0, -1.0])).unwrap();
        assert!((v - 3.0).abs() < 1e-15);
    }

    #[test]
    fn objective_rejects_wrong_length() {
        let p = ProblemInstance::new(identity_quadratic(2), Arc::new(ZeroTerm)).unwrap();
        assert!(objective_value(&p, &arr1(&[0.0])).is_err());
    }

    #[test]
    fn residual_zero_at_stationary_point() {
        let p = ProblemInstance::new(identity_quadratic(1), Arc::new(ZeroTerm)).unwrap();
        let m = Metric::identity(1);
        let r = fixed_point_residual(&p, &arr1(&[0.0]), &m).unwrap();
        assert!(r.abs() < 1e-14);
    }

    #[test]
    fn residual_one_away_from_origin() {
        // f = 0.5 x^2, g = 0, identity metric: prox target is x - x = 0,
        // so the residual at x = 1 is exactly 1.
        let p = ProblemInstance::new(identity_quadratic(1), Arc::new(ZeroTerm)).unwrap();
        let m = Metric::identity(1);
        let r = fixed_point_residual(&p, &arr1(&[1.0]), &m).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iterate_state_direction_identity() {
        let st = IterateState::new(arr1(&[1.0, 2.0]), arr1(&[0.5, 3.0]), 4);
        assert_eq!(st.d, arr1(&[-0.5, 1.0]));
    }
}
