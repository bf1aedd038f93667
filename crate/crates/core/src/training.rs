//! Alternating optimization of the fused anchor graph hashing objective
//!
//! ```text
//! Tr(Vᵀ L V) − γ₁ Tr(Âᵀ S) + γ₂ ‖S‖²_F − γ₃ Tr(B S B_sᵀ) + λ Σ_m ‖B − W_mᵀ X_m‖²_F
//! ```
//!
//! over the learned anchor graph `S` (rows on the simplex), the orthonormal
//! embedding `V`, the codes `B ∈ {±1}^{K×N}`, the anchor codes
//! `B_s ∈ {±1}^{K×P}` and the projections `W_m`. Each outer iteration runs
//! the S, Λ, V, B, B_s and W blocks in that order.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::anchor_graph::{build_anchor_graph, fuse_graphs, initial_laplacian_embedding, AnchorGraph};
use crate::dataset::{center, sample_anchor_indices, Dataset};
use crate::error::{Error, Result};
use crate::simplex_opt::{ogm_solve, ColumnQp, Momentum, OgmOptions, QuadraticForm};
use crate::spectral::{self, SpectralState};

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Code length K.
    pub bits: usize,
    /// Anchor count P.
    pub anchors: usize,
    /// Cluster count C.
    pub clusters: usize,
    /// Nearest anchors per instance.
    pub knn: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub lambda: f64,
    /// Outer iteration cap.
    pub max_iter: usize,
    /// Per-row OGM iteration cap.
    pub ogm_max_iter: usize,
    pub ogm_tol: f64,
    /// Relative objective change that stops the outer loop; 0 runs all iterations.
    pub tol: f64,
    pub seed: u64,
    pub renormalize_fusion: bool,
    pub momentum: Momentum,
    /// Zero-center features with training means.
    pub center: bool,
    /// Degree floor for `Λ^{-1/2}`.
    pub degree_floor: f64,
    /// Edge threshold for component counting.
    pub edge_threshold: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            bits: 32,
            anchors: 900,
            clusters: 60,
            knn: 45,
            gamma1: 0.01,
            gamma2: 10.0,
            gamma3: 0.01,
            lambda: 300.0,
            max_iter: 50,
            ogm_max_iter: 200,
            ogm_tol: 1e-4,
            tol: 1e-4,
            seed: 0,
            renormalize_fusion: false,
            momentum: Momentum::Linear,
            center: true,
            degree_floor: spectral::DEFAULT_DEGREE_FLOOR,
            edge_threshold: spectral::DEFAULT_EDGE_THRESHOLD,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.bits == 0 {
            return bad("code length must be at least 1 bit".into());
        }
        if self.gamma2.is_nan() || self.gamma2 <= 0.0 {
            return bad(format!("gamma2 must be positive, got {}", self.gamma2));
        }
        for (name, v) in [("gamma1", self.gamma1), ("gamma3", self.gamma3), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if self.clusters == 0 || self.clusters > self.anchors {
            return bad(format!(
                "clusters C={} must be in 1..=P={}",
                self.clusters, self.anchors
            ));
        }
        if self.knn == 0 || self.knn >= self.anchors {
            return bad(format!("knn k={} must satisfy 1 <= k < P={}", self.knn, self.anchors));
        }
        if self.tol.is_nan() || self.tol < 0.0 || self.ogm_tol.is_nan() || self.ogm_tol <= 0.0 {
            return bad("tolerances must be positive (outer tolerance may be 0 to disable early stopping)".into());
        }
        Ok(())
    }

    fn ogm_options(&self) -> OgmOptions {
        OgmOptions {
            tol: self.ogm_tol,
            max_iter: self.ogm_max_iter,
            momentum: self.momentum,
        }
    }
}

/// Sign with `sgn(0) = +1`.
pub fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn is_sign_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v == 1.0 || v == -1.0)
}

/// Learned hash functions plus the training codes.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    pub hyper: Hyperparams,
    /// Per-modality centering means (zeros when centering is off).
    pub means: Vec<DVector<f64>>,
    /// Per-modality `d_m × K` projections.
    pub w: Vec<DMatrix<f64>>,
    /// `K × P` anchor codes.
    pub bs: DMatrix<f64>,
    /// `K × N` training codes, columns aligned with `train_indices`.
    pub b: Option<DMatrix<f64>>,
    pub train_indices: Vec<usize>,
    pub anchor_indices: Vec<usize>,
}

impl HashModel {
    pub fn bits(&self) -> usize {
        self.bs.nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.w.iter().map(DMatrix::nrows).collect()
    }
}

/// The five weighted addends of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    /// `Tr(Vᵀ L V)`.
    pub trace: f64,
    /// `−γ₁ Tr(Âᵀ S)`.
    pub approximation: f64,
    /// `γ₂ ‖S‖²_F`.
    pub regularizer: f64,
    /// `−γ₃ Tr(B S B_sᵀ)`.
    pub code_graph: f64,
    /// `λ Σ_m ‖B − W_mᵀ X_m‖²_F`.
    pub regression: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.trace + self.approximation + self.regularizer + self.code_graph + self.regression
    }
}

/// Borrowed view of every block the objective depends on.
pub struct ObjectiveInputs<'a> {
    pub s: &'a AnchorGraph,
    pub fused: &'a AnchorGraph,
    pub spectral: &'a SpectralState,
    pub b: &'a DMatrix<f64>,
    pub bs: &'a DMatrix<f64>,
    pub w: &'a [DMatrix<f64>],
    pub x: &'a [DMatrix<f64>],
}

pub fn objective(inputs: &ObjectiveInputs<'_>, hyper: &Hyperparams) -> Result<ObjectiveTerms> {
    let ObjectiveInputs { s, fused, spectral, b, bs, w, x } = *inputs;
    let (n, p) = (s.n_rows(), s.n_anchors());
    let k = b.nrows();
    if fused.n_rows() != n || fused.n_anchors() != p {
        return Err(Error::Shape(format!(
            "fused graph is {}x{}, learned graph is {n}x{p}",
            fused.n_rows(),
            fused.n_anchors()
        )));
    }
    if b.ncols() != n || bs.shape() != (k, p) {
        return Err(Error::Shape(format!(
            "codes are {:?} and anchor codes {:?}; expected ({k}, {n}) and ({k}, {p})",
            b.shape(),
            bs.shape()
        )));
    }
    if spectral.v.nrows() != p || spectral.lambda.len() != p {
        return Err(Error::Shape(format!("embedding has {} rows, expected {p}", spectral.v.nrows())));
    }
    if w.len() != x.len() {
        return Err(Error::Shape(format!("{} projections for {} modalities", w.len(), x.len())));
    }

    // Tr(Vᵀ(I − E)V) = Tr(VᵀV) − ‖S Λ^{-1/2} V‖²
    let scaled = spectral.scaled_embedding(hyper.degree_floor);
    let trace = spectral.v.norm_squared() - s.mul_dense(&scaled).norm_squared();

    let mut code_graph = 0.0;
    for (i, row) in s.rows().enumerate() {
        for &(a, weight) in row {
            code_graph += weight * b.column(i).dot(&bs.column(a));
        }
    }

    let mut regression = 0.0;
    for (m, (wm, xm)) in w.iter().zip(x).enumerate() {
        if wm.nrows() != xm.nrows() || wm.ncols() != k || xm.ncols() != n {
            return Err(Error::Shape(format!(
                "modality {m}: projection {:?} and features {:?} do not match {k} bits, {n} instances",
                wm.shape(),
                xm.shape()
            )));
        }
        regression += (b - wm.tr_mul(xm)).norm_squared();
    }

    Ok(ObjectiveTerms {
        trace,
        approximation: -hyper.gamma1 * fused.frobenius_dot(s),
        regularizer: hyper.gamma2 * s.frobenius_norm_sq(),
        code_graph: -hyper.gamma3 * code_graph,
        regression: hyper.lambda * regression,
    })
}

/// `S · Mᵀ` for dense `M` (`c × P`), returned as `c × N`.
fn graph_times_transpose(s: &AnchorGraph, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), s.n_rows());
    for (i, row) in s.rows().enumerate() {
        let mut col = out.column_mut(i);
        for &(a, w) in row {
            col.axpy(w, &m.column(a), 1.0);
        }
    }
    out
}

/// `B = sgn(γ₃ B_s Sᵀ + 2λ Σ_m W_mᵀ X_m)`.
pub fn update_b(
    s: &AnchorGraph,
    bs: &DMatrix<f64>,
    w: &[DMatrix<f64>],
    x: &[DMatrix<f64>],
    gamma3: f64,
    lambda: f64,
) -> DMatrix<f64> {
    b_scores(s, bs, w, x, gamma3, lambda).map(sgn)
}

/// The `K × N` matrix whose entrywise sign is the B update.
pub fn b_scores(
    s: &AnchorGraph,
    bs: &DMatrix<f64>,
    w: &[DMatrix<f64>],
    x: &[DMatrix<f64>],
    gamma3: f64,
    lambda: f64,
) -> DMatrix<f64> {
    let mut score = graph_times_transpose(s, bs) * gamma3;
    for (wm, xm) in w.iter().zip(x) {
        score += wm.tr_mul(xm) * (2.0 * lambda);
    }
    score
}

/// `B_s = sgn(B S)`.
pub fn update_bs(b: &DMatrix<f64>, s: &AnchorGraph) -> DMatrix<f64> {
    bs_scores(b, s).map(sgn)
}

pub fn bs_scores(b: &DMatrix<f64>, s: &AnchorGraph) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(b.nrows(), s.n_anchors());
    for (i, row) in s.rows().enumerate() {
        for &(a, w) in row {
            out.column_mut(a).axpy(w, &b.column(i), 1.0);
        }
    }
    out
}

/// Ridge added to `X Xᵀ` in the W update: `1e-6 · tr(X Xᵀ) / d`.
pub fn ridge_for(x: &DMatrix<f64>) -> f64 {
    1e-6 * x.norm_squared() / x.nrows().max(1) as f64
}

/// Least-squares projection `(X Xᵀ + εI)⁻¹ X Bᵀ` with `ε` from [`ridge_for`].
pub fn update_w(x: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "features have {} instances but codes have {}",
            x.ncols(),
            b.ncols()
        )));
    }
    let d = x.nrows();
    let eps = ridge_for(x);
    if eps == 0.0 {
        return Ok(DMatrix::zeros(d, b.nrows()));
    }
    let system = x * x.transpose() + DMatrix::identity(d, d) * eps;
    let rhs = x * b.transpose();
    let chol = Cholesky::new(system.clone())
        .ok_or_else(|| Error::Numerical("ridge regression system is not positive definite".into()))?;
    let mut w = chol.solve(&rhs);
    // one step of iterative refinement
    let resid = &rhs - &system * &w;
    w += chol.solve(&resid);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("projection update produced non-finite values".into()));
    }
    Ok(w)
}

/// Random `±1` matrix whose rows each hold ⌈n/2⌉ `+1`s.
pub fn balanced_signs(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    let mut row: Vec<f64> = (0..cols).map(|j| if j < cols.div_ceil(2) { 1.0 } else { -1.0 }).collect();
    for r in 0..rows {
        row.shuffle(rng);
        for (c, &v) in row.iter().enumerate() {
            out[(r, c)] = v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub terms: ObjectiveTerms,
    pub objective: f64,
    /// Objective divided by the first iteration's objective magnitude.
    pub normalized: f64,
    pub components: usize,
    pub isolated_anchors: usize,
    pub eigenvalues: Vec<f64>,
    pub mean_ogm_iterations: f64,
    pub unconverged_rows: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.normalized).collect()
    }
}

type SolvedRow = (Vec<(usize, f64)>, usize, bool);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SStepStats {
    pub mean_iterations: f64,
    pub unconverged: usize,
}

/// Full training state; each block update is exposed so callers can observe
/// the objective between steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub hyper: Hyperparams,
    /// Centered training features, `d_m × N`.
    pub x: Vec<DMatrix<f64>>,
    pub means: Vec<DVector<f64>>,
    pub train_indices: Vec<usize>,
    pub anchor_indices: Vec<usize>,
    pub graphs: Vec<AnchorGraph>,
    pub fused: AnchorGraph,
    /// Learned graph; `None` until the first S step.
    pub s: Option<AnchorGraph>,
    pub spectral: SpectralState,
    pub b: DMatrix<f64>,
    pub bs: DMatrix<f64>,
    pub w: Vec<DMatrix<f64>>,
}

impl Trainer {
    /// Anchor sampling, per-modality graphs, fusion, initial embedding and
    /// random balanced codes.
    pub fn new(dataset: &Dataset, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let train = dataset.split.train.clone();
        if hyper.anchors > train.len() {
            return Err(Error::InvalidArgument(format!(
                "P={} anchors exceeds the {} training instances",
                hyper.anchors,
                train.len()
            )));
        }
        let means: Vec<DVector<f64>> = if hyper.center {
            dataset.training_means()
        } else {
            dataset.dims().into_iter().map(DVector::zeros).collect()
        };
        let x: Vec<DMatrix<f64>> = dataset
            .modalities
            .iter()
            .zip(&means)
            .map(|(f, mu)| center(&f.select(&train), mu))
            .collect();

        let anchor_indices = sample_anchor_indices(&train, hyper.anchors, hyper.seed)?;
        let position: std::collections::HashMap<usize, usize> =
            train.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();
        let anchor_cols: Vec<usize> = anchor_indices.iter().map(|i| position[i]).collect();

        let graphs = x
            .iter()
            .map(|xm| build_anchor_graph(xm, &xm.select_columns(&anchor_cols), hyper.knn))
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse_graphs(&graphs, hyper.renormalize_fusion)?;
        let mut spectral = initial_laplacian_embedding(&fused, hyper.clusters, hyper.degree_floor)?;
        spectral.lambda = DVector::from_element(hyper.anchors, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(1);
        let w = x
            .iter()
            .map(|xm| {
                let scale = 1.0 / (xm.nrows() as f64).sqrt();
                DMatrix::from_fn(xm.nrows(), hyper.bits, |_, _| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * scale
                })
            })
            .collect();
        let b = balanced_signs(hyper.bits, train.len(), &mut rng);
        let bs = balanced_signs(hyper.bits, hyper.anchors, &mut rng);

        Ok(Self {
            hyper,
            x,
            means,
            train_indices: train,
            anchor_indices,
            graphs,
            fused,
            s: None,
            spectral,
            b,
            bs,
            w,
        })
    }

    pub fn n(&self) -> usize {
        self.train_indices.len()
    }

    /// Objective at the current state. Before the first S step the fused
    /// graph stands in for `S`.
    pub fn objective(&self) -> Result<ObjectiveTerms> {
        let inputs = ObjectiveInputs {
            s: self.s.as_ref().unwrap_or(&self.fused),
            fused: &self.fused,
            spectral: &self.spectral,
            b: &self.b,
            bs: &self.bs,
            w: &self.w,
            x: &self.x,
        };
        objective(&inputs, &self.hyper)
    }

    /// Solves every row's simplex QP. Rows reuse the previous S as warm
    /// start when available, otherwise the unconstrained solution.
    pub fn step_s(&mut self) -> Result<SStepStats> {
        let h = &self.hyper;
        let form = QuadraticForm::new(self.spectral.scaled_embedding(h.degree_floor), h.gamma2)?;
        // column i is B_sᵀ b_i
        let code_affinity = self.bs.tr_mul(&self.b);
        let opts = h.ogm_options();
        let previous = self.s.as_ref();
        let fused = &self.fused;
        let (g1, g3) = (h.gamma1, h.gamma3);

        let solved: Vec<SolvedRow> = (0..self.n())
            .into_par_iter()
            .map(|i| {
                let linear = fused.dense_row(i) * g1 + code_affinity.column(i) * g3;
                let qp = ColumnQp::new(&form, linear)?;
                let start = previous.map(|s| s.dense_row(i));
                let res = ogm_solve(&qp, start.as_ref(), &opts)?;
                let row = res
                    .solution
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|&(_, v)| v > 0.0)
                    .collect();
                Ok((row, res.iterations, res.converged))
            })
            .collect::<Result<_>>()?;

        let total_iters: usize = solved.iter().map(|r| r.1).sum();
        let unconverged = solved.iter().filter(|r| !r.2).count();
        let rows = solved.into_iter().map(|r| r.0).collect();
        self.s = Some(AnchorGraph::from_rows(self.hyper.anchors, rows)?);
        Ok(SStepStats {
            mean_iterations: total_iters as f64 / self.n().max(1) as f64,
            unconverged,
        })
    }

    fn learned(&self) -> Result<&AnchorGraph> {
        self.s
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("the S step has not run yet".into()))
    }

    pub fn step_lambda(&mut self) -> Result<()> {
        self.spectral.lambda = spectral::update_lambda(self.learned()?);
        Ok(())
    }

    pub fn step_v(&mut self) -> Result<()> {
        let gram = spectral::normalized_gram(self.learned()?, &self.spectral.lambda, self.hyper.degree_floor);
        let next = spectral::update_embedding(&gram, self.hyper.clusters)?;
        self.spectral.v = next.v;
        self.spectral.eigenvalues = next.eigenvalues;
        Ok(())
    }

    pub fn step_b(&mut self) -> Result<()> {
        let s = self.learned()?;
        self.b = update_b(s, &self.bs, &self.w, &self.x, self.hyper.gamma3, self.hyper.lambda);
        Ok(())
    }

    pub fn step_bs(&mut self) -> Result<()> {
        self.bs = update_bs(&self.b, self.learned()?);
        Ok(())
    }

    pub fn step_w(&mut self) -> Result<()> {
        self.w = self
            .x
            .iter()
            .map(|xm| update_w(xm, &self.b))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// One outer iteration; returns the record with `normalized` unset.
    pub fn iterate(&mut self, iteration: usize) -> Result<IterationRecord> {
        let start = Instant::now();
        let stats = self.step_s()?;
        self.step_lambda()?;
        self.step_v()?;
        self.step_b()?;
        self.step_bs()?;
        self.step_w()?;
        let terms = self.objective()?;
        let objective = terms.total();
        let comps = spectral::count_components(self.learned()?, self.hyper.edge_threshold);
        Ok(IterationRecord {
            iteration,
            terms,
            objective,
            normalized: f64::NAN,
            components: comps.instance_components,
            isolated_anchors: comps.isolated_anchors,
            eigenvalues: self.spectral.eigenvalues.clone(),
            mean_ogm_iterations: stats.mean_iterations,
            unconverged_rows: stats.unconverged,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs outer iterations until the relative objective change drops below
    /// `tol` or `max_iter` is reached, appending to `trace`. On failure the
    /// records so far stay in `trace`.
    pub fn run(&mut self, trace: &mut TrainTrace) -> Result<()> {
        let mut first: Option<f64> = trace.records.first().map(|r| r.objective);
        for it in trace.len()..self.hyper.max_iter {
            let mut rec = self.iterate(it + 1)?;
            if !rec.objective.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective became non-finite at iteration {}",
                    it + 1
                )));
            }
            let base = *first.get_or_insert(rec.objective);
            rec.normalized = if base != 0.0 { rec.objective / base.abs() } else { rec.objective };
            let prev = trace.records.last().map(|r| r.objective);
            log::info!(
                "iter {:>3}  objective {:.6e}  components {}  ogm {:.1}",
                rec.iteration,
                rec.objective,
                rec.components,
                rec.mean_ogm_iterations
            );
            trace.records.push(rec);
            if let Some(prev) = prev {
                let cur = trace.records.last().map(|r| r.objective).unwrap_or(prev);
                let rel = (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
                if rel < self.hyper.tol {
                    trace.converged = true;
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn into_model(self) -> HashModel {
        HashModel {
            hyper: self.hyper,
            means: self.means,
            w: self.w,
            bs: self.bs,
            b: Some(self.b),
            train_indices: self.train_indices,
            anchor_indices: self.anchor_indices,
        }
    }
}

pub fn train(dataset: &Dataset, hyper: &Hyperparams) -> Result<(HashModel, TrainTrace)> {
    let mut trainer = Trainer::new(dataset, hyper.clone())?;
    let mut trace = TrainTrace::default();
    trainer.run(&mut trace)?;
    Ok((trainer.into_model(), trace))
}
