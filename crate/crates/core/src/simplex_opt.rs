//! Simplex-constrained quadratic programs solved with Nesterov's optimal
//! gradient method (accelerated projected gradient).
//!
//! Each row of the learned anchor graph solves
//!
//! ```text
//! min_s  f(s) = sᵀ Q s − cᵀ s    s.t.  s ≥ 0, 1ᵀ s = 1
//! ```
//!
//! with `Q = F Fᵀ + γ I` shared by every row. `F` is the `P × C` scaled
//! embedding, so products with `Q` cost `O(PC)` instead of `O(P²)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Euclidean projection onto the probability simplex.
///
/// Sort-based exact algorithm: with `u` sorted descending, the threshold is
/// `θ = (Σ_{j≤ρ} u_j − 1)/ρ` for the largest `ρ` with `u_ρ > θ`, and the
/// result is `max(v − θ, 0)`. Inputs already on the simplex are returned
/// unchanged.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    assert!(n > 0, "cannot project onto an empty simplex");
    let sum: f64 = v.sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-12 {
        return v.clone();
    }
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj > t {
            theta = t;
        } else {
            break;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// `Q = F Fᵀ + γ I` kept in factored form.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    factor: DMatrix<f64>,
    ridge: f64,
    lipschitz: f64,
    // Cholesky of γ I + Fᵀ F, for Woodbury solves with Q
    inner: Cholesky<f64, Dyn>,
}

impl QuadraticForm {
    pub fn new(factor: DMatrix<f64>, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ridge weight must be positive for an invertible quadratic form, got {ridge}"
            )));
        }
        if factor.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("quadratic form factor has non-finite entries".into()));
        }
        let r = factor.ncols();
        let gram = factor.transpose() * &factor;
        let top = if r == 0 {
            0.0
        } else {
            gram.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max)
        };
        let inner = Cholesky::new(gram + DMatrix::identity(r, r) * ridge)
            .ok_or_else(|| Error::Numerical("quadratic form is not positive definite".into()))?;
        Ok(Self {
            factor,
            ridge,
            lipschitz: 2.0 * (top + ridge),
            inner,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Gradient Lipschitz constant `2 λ_max(Q)`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `Q s`.
    pub fn apply(&self, s: &DVector<f64>) -> DVector<f64> {
        let proj = self.factor.tr_mul(s);
        &self.factor * proj + s * self.ridge
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose() + DMatrix::identity(self.dim(), self.dim()) * self.ridge
    }

    /// `Q⁻¹ c` via the Woodbury identity.
    pub fn solve(&self, c: &DVector<f64>) -> DVector<f64> {
        let inner = self.inner.solve(&self.factor.tr_mul(c));
        (c - &self.factor * inner) / self.ridge
    }
}

/// Dense route to the Lipschitz constant: `2 λ_max(Q)` for symmetric PSD `Q`.
pub fn lipschitz(q: &DMatrix<f64>) -> f64 {
    let sym = (q + q.transpose()) * 0.5;
    2.0 * sym.symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// One column's problem: shared quadratic form plus its linear term `c`.
#[derive(Debug, Clone)]
pub struct ColumnQp<'a> {
    pub form: &'a QuadraticForm,
    pub linear: DVector<f64>,
}

impl<'a> ColumnQp<'a> {
    pub fn new(form: &'a QuadraticForm, linear: DVector<f64>) -> Result<Self> {
        if linear.len() != form.dim() {
            return Err(Error::Shape(format!(
                "linear term has length {} but the quadratic form is {}x{}",
                linear.len(),
                form.dim(),
                form.dim()
            )));
        }
        Ok(Self { form, linear })
    }

    pub fn objective(&self, s: &DVector<f64>) -> f64 {
        s.dot(&self.form.apply(s)) - self.linear.dot(s)
    }

    /// `∇f(s) = 2 Q s − c`.
    pub fn gradient(&self, s: &DVector<f64>) -> DVector<f64> {
        self.form.apply(s) * 2.0 - &self.linear
    }
}

/// Unconstrained start `Q⁻¹ c`, not projected.
pub fn warm_start(qp: &ColumnQp<'_>) -> Result<DVector<f64>> {
    let s = qp.form.solve(&qp.linear);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("warm start solve produced non-finite values".into()));
    }
    Ok(s)
}

/// Momentum coefficient recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Momentum {
    /// `c_{t+1} = (1 + √(4 c_t + 1)) / 2`; the sequence approaches 2.
    #[default]
    Linear,
    /// `c_{t+1} = (1 + √(4 c_t² + 1)) / 2`, the classical FISTA rule.
    Classic,
}

impl Momentum {
    pub fn next(self, c: f64) -> f64 {
        match self {
            Momentum::Linear => (1.0 + (4.0 * c + 1.0).sqrt()) / 2.0,
            Momentum::Classic => (1.0 + (4.0 * c * c + 1.0).sqrt()) / 2.0,
        }
    }

    /// `[c_1, …, c_n]` starting from `c_1 = 1`.
    pub fn sequence(self, n: usize) -> Vec<f64> {
        std::iter::successors(Some(1.0), |&c| Some(self.next(c))).take(n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OgmOptions {
    /// Stop once `‖s_t − s_{t−1}‖₂ / ‖s_{t−1}‖₂ < tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub momentum: Momentum,
}

impl Default for OgmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 200,
            momentum: Momentum::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OgmResult {
    pub solution: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Accelerated projected gradient on the simplex.
///
/// Starts from `start` (or the unconstrained solution when `None`). Each step
/// projects `z − ∇f(z)/Lp` onto the simplex and extrapolates
/// `z = s_t + (c_t − 1)/c_{t+1} · (s_t − s_{t−1})`.
pub fn ogm_solve(qp: &ColumnQp<'_>, start: Option<&DVector<f64>>, opts: &OgmOptions) -> Result<OgmResult> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("OGM tolerance must be positive, got {}", opts.tol)));
    }
    let s0 = match start {
        Some(s) if s.len() != qp.form.dim() => {
            return Err(Error::Shape(format!(
                "warm start has length {} but the problem has {} variables",
                s.len(),
                qp.form.dim()
            )))
        }
        Some(s) => s.clone(),
        None => warm_start(qp)?,
    };
    if opts.max_iter == 0 {
        return Ok(OgmResult {
            solution: project_simplex(&s0),
            iterations: 0,
            converged: false,
        });
    }
    let step = 1.0 / qp.form.lipschitz();
    let mut prev = s0.clone();
    let mut z = s0;
    let mut c = 1.0;
    for t in 1..=opts.max_iter {
        let grad = qp.gradient(&z);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at OGM iteration {t}; check anchor degrees"
            )));
        }
        let current = project_simplex(&(&z - grad * step));
        let c_next = opts.momentum.next(c);
        z = &current + (&current - &prev) * ((c - 1.0) / c_next);
        c = c_next;

        let prev_norm = prev.norm();
        let change = (&current - &prev).norm();
        let rel = if prev_norm > 0.0 { change / prev_norm } else { change };
        if rel < opts.tol {
            return Ok(OgmResult {
                solution: current,
                iterations: t,
                converged: true,
            });
        }
        prev = current;
    }
    Ok(OgmResult {
        solution: prev,
        iterations: opts.max_iter,
        converged: false,
    })
}
