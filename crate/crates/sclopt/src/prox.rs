//! Proximal operators for the nonsmooth term under diagonal and dense SPD
//! metrics, including the inner solver for dense-metric subproblems.
//!
//! The metric convention throughout is H-weighted:
//! `prox_{H,g}(u) = argmin_z { g(z) + (1/2) <H (z - u), z - u> }`,
//! equivalently the scaled operator
//! `P_H^g(u) = argmin_z { g(z) + (1/2) <H z, z> - <u, z> } = (H + ∂g)^{-1} u`,
//! related by `prox_{H,g}(u) = P_H^g(H u)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// A proximable convex term `g`.
///
/// `prox_diag` must solve `argmin_z { weight * g(z) + (1/2) sum_i d_i (z_i - u_i)^2 }`
/// exactly (closed form). `subgradient_residual(x, v)` is the Euclidean
/// distance of `-v` from `∂g(x)`, infinite outside `dom(g)`.
pub trait NonsmoothTerm: Send + Sync {
    fn value(&self, x: &Array1<f64>) -> f64;

    fn prox_diag(&self, u: &Array1<f64>, d: &Array1<f64>, weight: f64) -> Array1<f64>;

    fn subgradient_residual(&self, x: &Array1<f64>, v: &Array1<f64>) -> f64;
}

/// `g = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroTerm;

impl NonsmoothTerm for ZeroTerm {
    fn value(&self, _x: &Array1<f64>) -> f64 {
        0.0
    }

    fn prox_diag(&self, u: &Array1<f64>, _d: &Array1<f64>, _weight: f64) -> Array1<f64> {
        u.clone()
    }

    fn subgradient_residual(&self, _x: &Array1<f64>, v: &Array1<f64>) -> f64 {
        v.dot(v).sqrt()
    }
}

/// `g = weight * ||x||_1`, optionally leaving a trailing block of
/// coordinates unpenalized (used for an appended bias term).
#[derive(Debug, Clone)]
pub struct L1Term {
    weight: f64,
    unpenalized_tail: usize,
}

impl L1Term {
    pub fn new(weight: f64) -> Self {
        assert!(weight >= 0.0, "l1 weight must be nonnegative");
        L1Term {
            weight,
            unpenalized_tail: 0,
        }
    }

    /// Leaves the last `tail` coordinates out of the penalty.
    pub fn with_unpenalized_tail(weight: f64, tail: usize) -> Self {
        assert!(weight >= 0.0, "l1 weight must be nonnegative");
        L1Term {
            weight,
            unpenalized_tail: tail,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn penalized_len(&self, n: usize) -> usize {
        n.saturating_sub(self.unpenalized_tail)
    }
}

impl NonsmoothTerm for L1Term {
    fn value(&self, x: &Array1<f64>) -> f64 {
        let m = self.penalized_len(x.len());
        self.weight * x.iter().take(m).map(|v| v.abs()).sum::<f64>()
    }

    fn prox_diag(&self, u: &Array1<f64>, d: &Array1<f64>, weight: f64) -> Array1<f64> {
        let m = self.penalized_len(u.len());
        let rho = weight * self.weight;
        let mut z = u.clone();
        for i in 0..m {
            z[i] = soft_threshold_scalar(u[i], rho / d[i]);
        }
        z
    }

    fn subgradient_residual(&self, x: &Array1<f64>, v: &Array1<f64>) -> f64 {
        let m = self.penalized_len(x.len());
        let rho = self.weight;
        let mut sq = 0.0;
        for i in 0..x.len() {
            let di = if i < m {
                if x[i] > 0.0 {
                    v[i] + rho
                } else if x[i] < 0.0 {
                    v[i] - rho
                } else {
                    (v[i].abs() - rho).max(0.0)
                }
            } else {
                v[i]
            };
            sq += di * di;
        }
        sq.sqrt()
    }
}

/// Indicator of the box `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct BoxTerm {
    lo: Array1<f64>,
    hi: Array1<f64>,
}

impl BoxTerm {
    pub fn new(lo: Array1<f64>, hi: Array1<f64>) -> Result<Self> {
        for i in 0..lo.len() {
            if lo[i] > hi[i] {
                return Err(Error::InfeasibleBox {
                    index: i,
                    lo: lo[i],
                    hi: hi[i],
                });
            }
        }
        Ok(BoxTerm { lo, hi })
    }
}

impl NonsmoothTerm for BoxTerm {
    fn value(&self, x: &Array1<f64>) -> f64 {
        for i in 0..x.len() {
            if x[i] < self.lo[i] || x[i] > self.hi[i] {
                return f64::INFINITY;
            }
        }
        0.0
    }

    fn prox_diag(&self, u: &Array1<f64>, _d: &Array1<f64>, _weight: f64) -> Array1<f64> {
        // separable clamp; independent of any diagonal metric
        Array1::from_iter(
            u.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .map(|(&ui, (&l, &h))| ui.clamp(l, h)),
        )
    }

    fn subgradient_residual(&self, x: &Array1<f64>, v: &Array1<f64>) -> f64 {
        let mut sq = 0.0;
        for i in 0..x.len() {
            let (l, h) = (self.lo[i], self.hi[i]);
            if x[i] < l || x[i] > h {
                return f64::INFINITY;
            }
            let s = -v[i];
            let di = if l == h {
                0.0
            } else if x[i] == l {
                s.max(0.0)
            } else if x[i] == h {
                (-s).max(0.0)
            } else {
                s.abs()
            };
            sq += di * di;
        }
        sq.sqrt()
    }
}

fn soft_threshold_scalar(u: f64, t: f64) -> f64 {
    // |u| == t maps to exactly 0
    u.signum() * (u.abs() - t).max(0.0)
}

/// Component-wise soft threshold under a diagonal metric:
/// `z_i = sign(u_i) * max(|u_i| - rho / d_i, 0)`.
pub fn soft_threshold_diag(u: &Array1<f64>, d: &Array1<f64>, rho: f64) -> Array1<f64> {
    Array1::from_iter(
        u.iter()
            .zip(d.iter())
            .map(|(&ui, &di)| soft_threshold_scalar(ui, rho / di)),
    )
}

/// Component-wise clamp onto `[lo, hi]`. Rejects infeasible boxes.
pub fn box_clip(u: &Array1<f64>, lo: &Array1<f64>, hi: &Array1<f64>) -> Result<Array1<f64>> {
    for i in 0..lo.len() {
        if lo[i] > hi[i] {
            return Err(Error::InfeasibleBox {
                index: i,
                lo: lo[i],
                hi: hi[i],
            });
        }
    }
    Ok(Array1::from_iter(
        u.iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(&ui, (&l, &h))| ui.clamp(l, h)),
    ))
}

/// A symmetric positive semidefinite linear operator, the interface the
/// inner subproblem solver works against. Implemented by [`Metric`] and by
/// Hessian-vector wrappers in the solvers.
pub trait SymOp {
    fn dim(&self) -> usize;
    fn apply(&self, v: &Array1<f64>) -> Array1<f64>;
}

#[derive(Debug, Clone)]
enum MetricKind {
    Diagonal(Array1<f64>),
    Dense(Array2<f64>),
    /// Dense SPD matrix maintained by a quasi-Newton update; positive
    /// definiteness is an invariant of the update rule rather than checked
    /// by factorization on every construction.
    Bfgs(Array2<f64>),
}

/// The variable metric `H_k`: diagonal, dense SPD, or a BFGS-maintained
/// matrix, together with a positive scalar multiplier used by the
/// metric-shrinking branch of the solvers.
#[derive(Debug, Clone)]
pub struct Metric {
    kind: MetricKind,
    scale: f64,
}

impl Metric {
    /// Diagonal metric with strictly positive entries.
    pub fn diagonal(d: Array1<f64>) -> Result<Self> {
        for (i, &v) in d.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidOption(format!(
                    "diagonal metric entry {i} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Metric {
            kind: MetricKind::Diagonal(d),
            scale: 1.0,
        })
    }

    /// `l * I`.
    pub fn uniform(l: f64, n: usize) -> Result<Self> {
        Metric::diagonal(Array1::from_elem(n, l))
    }

    pub fn identity(n: usize) -> Self {
        Metric {
            kind: MetricKind::Diagonal(Array1::ones(n)),
            scale: 1.0,
        }
    }

    /// Dense metric; validated symmetric with a successful Cholesky
    /// factorization.
    pub fn dense(h: Array2<f64>) -> Result<Self> {
        linalg::check_symmetric(&h)?;
        linalg::cholesky(&h)?;
        Ok(Metric {
            kind: MetricKind::Dense(h),
            scale: 1.0,
        })
    }

    /// Wraps a BFGS-maintained matrix without re-factorizing. The caller
    /// guarantees positive definiteness (the curvature-guarded update does).
    pub fn bfgs(b: Array2<f64>) -> Self {
        Metric {
            kind: MetricKind::Bfgs(b),
            scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            MetricKind::Diagonal(d) => d.len(),
            MetricKind::Dense(h) | MetricKind::Bfgs(h) => h.nrows(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) {
        assert!(scale > 0.0, "metric scale must be positive");
        self.scale = scale;
    }

    /// Multiplies the scale in place (the metric-shrink branch).
    pub fn rescale(&mut self, factor: f64) {
        assert!(factor > 0.0);
        self.scale *= factor;
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.kind, MetricKind::Diagonal(_))
    }

    /// The effective diagonal (scale applied) when the metric is diagonal.
    pub fn scaled_diagonal(&self) -> Option<Array1<f64>> {
        match &self.kind {
            MetricKind::Diagonal(d) => Some(d * self.scale),
            _ => None,
        }
    }

    /// `<H v, v>` with the scale applied.
    pub fn quad_form(&self, v: &Array1<f64>) -> f64 {
        match &self.kind {
            MetricKind::Diagonal(d) => {
                self.scale * v.iter().zip(d.iter()).map(|(&vi, &di)| di * vi * vi).sum::<f64>()
            }
            MetricKind::Dense(h) | MetricKind::Bfgs(h) => self.scale * v.dot(&h.dot(v)),
        }
    }
}

impl SymOp for Metric {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        match &self.kind {
            MetricKind::Diagonal(d) => Array1::from_iter(
                v.iter().zip(d.iter()).map(|(&vi, &di)| self.scale * di * vi),
            ),
            MetricKind::Dense(h) | MetricKind::Bfgs(h) => {
                let mut out = h.dot(v);
                out *= self.scale;
                out
            }
        }
    }
}

/// Dense symmetric matrix as an operator (no SPD validation; inner solvers
/// detect indefiniteness through divergence).
pub struct DenseOp<'a>(pub &'a Array2<f64>);

impl SymOp for DenseOp<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        self.0.dot(v)
    }
}

/// Output of a scaled-prox evaluation.
#[derive(Debug, Clone)]
pub struct ScaledProxOutput {
    pub z: Array1<f64>,
    /// Number of elementary prox evaluations spent (1 for closed forms).
    pub prox_evals: u64,
    /// Inner iterations of the accelerated solver (0 for closed forms).
    pub iterations: usize,
    /// Subgradient residual of the returned point.
    pub residual: f64,
}

/// Evaluates the scaled proximal operator
/// `P_H^g(u) = argmin_z { g(z) + (1/2) <H z, z> - <u, z> }`.
///
/// Closed form for diagonal metrics; otherwise an accelerated proximal
/// gradient iteration on the quadratic model, stopping once the subgradient
/// residual of `H z - u` drops below `tol`.
pub fn scaled_prox(
    g: &dyn NonsmoothTerm,
    metric: &Metric,
    u: &Array1<f64>,
    tol: f64,
) -> Result<ScaledProxOutput> {
    scaled_prox_with_start(g, metric, u, tol, None)
}

pub fn scaled_prox_with_start(
    g: &dyn NonsmoothTerm,
    metric: &Metric,
    u: &Array1<f64>,
    tol: f64,
    warm: Option<&Array1<f64>>,
) -> Result<ScaledProxOutput> {
    if let Some(d) = metric.scaled_diagonal() {
        // P_H^g(u) = argmin g(z) + (1/2) sum d_i (z_i - u_i/d_i)^2
        let target = Array1::from_iter(u.iter().zip(d.iter()).map(|(&ui, &di)| ui / di));
        let z = g.prox_diag(&target, &d, 1.0);
        let hz = Array1::from_iter(z.iter().zip(d.iter()).map(|(&zi, &di)| zi * di));
        let residual = g.subgradient_residual(&z, &(&hz - u));
        return Ok(ScaledProxOutput {
            z,
            prox_evals: 1,
            iterations: 0,
            residual,
        });
    }
    scaled_prox_op(g, metric, u, tol, warm)
}

/// Operator-form scaled prox used when the metric is only available through
/// matrix-vector products (dense Hessians, BFGS matrices, Hessian oracles).
pub fn scaled_prox_op(
    g: &dyn NonsmoothTerm,
    op: &dyn SymOp,
    u: &Array1<f64>,
    tol: f64,
    warm: Option<&Array1<f64>>,
) -> Result<ScaledProxOutput> {
    let n = op.dim();
    let max_iters = 10 * n + 500;
    let lip = operator_norm_estimate(op).max(1e-12) * 1.02;
    let step_diag = Array1::from_elem(n, lip);

    let mut z = match warm {
        Some(w) => w.clone(),
        None => Array1::zeros(n),
    };
    let mut y = z.clone();
    let mut theta = 1.0f64;
    let mut prox_evals = 0u64;
    let mut best_residual = f64::INFINITY;
    let mut best_z = z.clone();

    for iter in 1..=max_iters {
        let grad_y = op.apply(&y) - u;
        let v = &y - &(grad_y.mapv(|t| t / lip));
        let z_new = g.prox_diag(&v, &step_diag, 1.0 / lip);
        prox_evals += 1;

        let residual = g.subgradient_residual(&z_new, &(op.apply(&z_new) - u));
        if residual < best_residual {
            best_residual = residual;
            best_z = z_new.clone();
        }
        if residual <= tol {
            return Ok(ScaledProxOutput {
                z: z_new,
                prox_evals,
                iterations: iter,
                residual,
            });
        }

        // gradient-based adaptive restart keeps the momentum useful on
        // strongly convex models
        let diff = &z_new - &z;
        let theta_next = if grad_y.dot(&diff) > 0.0 {
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt())
        };
        let momentum = (theta - 1.0) / theta_next;
        y = &z_new + &(diff.mapv(|t| momentum * t));
        theta = theta_next;
        z = z_new;
    }

    Err(Error::ProxNoConvergence {
        tol,
        achieved: best_residual,
        iterations: max_iters,
    })
    .map_err(|e| {
        // keep the best point reachable for diagnostics via the error only;
        // callers treat non-convergence as fatal
        let _ = &best_z;
        e
    })
}

/// Largest-eigenvalue estimate of a symmetric PSD operator by power
/// iteration with a fixed seed, used to size the inner gradient step.
fn operator_norm_estimate(op: &dyn SymOp) -> f64 {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0B5E);
    let mut v = Array1::from_iter((0..n).map(|_| rng.gen_range(-1.0..1.0)));
    let mut norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
        norm = 1.0;
    }
    v /= norm;
    let mut eig = 0.0;
    let iters = (2 * n).clamp(40, 120);
    for _ in 0..iters {
        let w = op.apply(&v);
        let wn = w.dot(&w).sqrt();
        if wn <= 1e-300 {
            return 0.0;
        }
        eig = v.dot(&w);
        v = w / wn;
    }
    eig.abs()
}

/// Output of [`solve_subproblem`].
#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    pub s: Array1<f64>,
    pub d: Array1<f64>,
    pub prox_evals: u64,
    pub inner_iterations: usize,
}

/// Minimizes the composite quadratic model around `x`:
/// `s = argmin { <∇f(x), z - x> + (1/2) <H (z - x), z - x> + g(z) }`,
/// returning `s` and the direction `d = s - x`.
///
/// Equals `P_H^g(H x - ∇f(x))`, so diagonal metrics reduce to one
/// closed-form prox.
pub fn solve_subproblem(
    p: &crate::model::ProblemInstance,
    x: &Array1<f64>,
    metric: &Metric,
    tol: f64,
) -> Result<SubproblemSolution> {
    let grad = p.oracle().grad(x);
    let u = metric.apply(x) - &grad;
    let out = scaled_prox_with_start(p.nonsmooth(), metric, &u, tol, Some(x))?;
    let d = &out.z - x;
    Ok(SubproblemSolution {
        s: out.z,
        d,
        prox_evals: out.prox_evals,
        inner_iterations: out.iterations,
    })
}
