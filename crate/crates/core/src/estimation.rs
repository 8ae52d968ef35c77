//! Hard-constrained least-squares estimation of the transition core.
//!
//! Both programs minimise `‖Y − X·M‖²_F / n_obs` over structured `M`:
//! `M = L + S` with `L` rank-`r` and incoherent and `‖S‖₀ ≤ s`
//! ([`fit_low_rank_sparse`]), or `M = base + D` with `‖D‖₀ ≤ e`
//! ([`fit_sparse_difference`]). The data enter only through the Gram
//! matrix `XᵀX`, the cross moment `XᵀY` and `‖Y‖²_F`, so a refit costs the
//! same no matter how many transitions have been observed.
//!
//! The objective is evaluated as `f(M̂) + tr((M − M̂)ᵀ G (M − M̂))` where
//! `M̂` is the unconstrained least-squares fit; this avoids the
//! cancellation of the expanded quadratic when the residual is tiny.

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{regression_row, FeatureTables, TransitionSample};
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Accumulated regression data `(X, Y)` stored as sufficient statistics.
/// Raw rows are kept only when requested.
#[derive(Debug, Clone)]
pub struct RegressionData<T: Real> {
    p: usize,
    q: usize,
    n_obs: usize,
    n_episodes: usize,
    gram: DMatrix<T>,
    cross: DMatrix<T>,
    y_sq: T,
    rows: Option<(Vec<DVector<T>>, Vec<DVector<T>>)>,
}

impl<T: Real> RegressionData<T> {
    pub fn new(p: usize, q: usize) -> Self {
        Self {
            p,
            q,
            n_obs: 0,
            n_episodes: 0,
            gram: DMatrix::zeros(p, p),
            cross: DMatrix::zeros(p, q),
            y_sq: T::zero(),
            rows: None,
        }
    }

    /// Like [`RegressionData::new`] but also retains every raw row.
    pub fn with_rows(p: usize, q: usize) -> Self {
        let mut d = Self::new(p, q);
        d.rows = Some((Vec::new(), Vec::new()));
        d
    }

    /// Builds data from stacked rows; `n_episodes` is the number of episodes
    /// the rows came from.
    pub fn from_rows(x: &DMatrix<T>, y: &DMatrix<T>, n_episodes: usize) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch {
                what: "regression rows",
                expected: x.nrows(),
                actual: y.nrows(),
            });
        }
        let mut d = Self::with_rows(x.ncols(), y.ncols());
        for i in 0..x.nrows() {
            d.push(&x.row(i).transpose(), &y.row(i).transpose());
        }
        d.n_episodes = n_episodes;
        Ok(d)
    }

    pub fn push(&mut self, x: &DVector<T>, y: &DVector<T>) {
        debug_assert!(x.iter().chain(y.iter()).all(|v| v.is_finite_value()));
        self.gram.ger(T::one(), x, x, T::one());
        self.cross.ger(T::one(), x, y, T::one());
        self.y_sq += y.norm_squared();
        self.n_obs += 1;
        if let Some((xs, ys)) = &mut self.rows {
            xs.push(x.clone());
            ys.push(y.clone());
        }
    }

    pub fn push_sample(&mut self, features: &FeatureTables<T>, _n_actions: usize, sample: &TransitionSample) {
        let (x, y) = regression_row(features, sample);
        self.push(&x, &y);
    }

    /// Marks the end of an episode's worth of rows.
    pub fn end_episode(&mut self) {
        self.n_episodes += 1;
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_episodes(&self) -> usize {
        self.n_episodes
    }

    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    pub fn cross(&self) -> &DMatrix<T> {
        &self.cross
    }

    pub fn y_sq(&self) -> T {
        self.y_sq
    }

    pub fn x_rows(&self) -> Option<DMatrix<T>> {
        self.rows.as_ref().map(|(xs, _)| stack(xs, self.p))
    }

    pub fn y_rows(&self) -> Option<DMatrix<T>> {
        self.rows.as_ref().map(|(_, ys)| stack(ys, self.q))
    }
}

fn stack<T: Real>(rows: &[DVector<T>], width: usize) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j])
}

/// Smallest eigenvalue of `XᵀX / (n_episodes − 1)` (denominator floored at
/// one). Rounding-level negatives are reported as zero.
pub fn design_min_eigenvalue<T: Real>(data: &RegressionData<T>) -> T {
    let denom = T::from_usize(data.n_episodes().saturating_sub(1).max(1)).unwrap();
    let scaled = data.gram() / denom;
    let eig = linalg::symmetric_eigenvalues(&scaled);
    let lo = eig.first().copied().unwrap_or_else(T::zero);
    let hi = eig.last().copied().unwrap_or_else(T::zero);
    if lo <= T::tol(1e-12) * hi.max(T::one()) {
        T::zero()
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrsConstraints {
    pub rank_r: usize,
    /// Incoherence budget `μ`; `f64::INFINITY` disables the constraint.
    pub mu_budget: f64,
    pub sparsity_cap: usize,
    pub p: usize,
    pub q: usize,
}

impl LrsConstraints {
    pub fn validate(&self) -> Result<()> {
        if self.rank_r == 0 || self.rank_r > self.p.min(self.q) {
            return Err(Error::InvalidConfig(format!(
                "rank {} incompatible with {}×{} core",
                self.rank_r, self.p, self.q
            )));
        }
        if !(self.mu_budget > 0.0) {
            return Err(Error::InvalidConfig("incoherence budget must be positive".into()));
        }
        Ok(())
    }

    fn row_bounds(&self) -> Option<(f64, f64)> {
        if !self.mu_budget.is_finite() {
            return None;
        }
        let r = self.rank_r as f64;
        Some(((self.mu_budget * r / self.p as f64).sqrt(), (self.mu_budget * r / self.q as f64).sqrt()))
    }
}

/// Geometry used for the proximal steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepMetric {
    /// Plain gradient steps of length `1/λ_max(XᵀX/n)` with halving, and
    /// hard thresholding by magnitude.
    Euclidean,
    /// Steps preconditioned by the design Gram matrix (a unit step is the
    /// exact least-squares update on the observed directions) and hard
    /// thresholding scored by `G_ii·z²`; falls back to Euclidean steps
    /// when the preconditioned step fails to decrease the objective.
    #[default]
    DesignWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub lambda_floor: f64,
    /// Ridge for the initial least-squares fit, relative to `trace(XᵀX/n)`.
    pub ridge_init: f64,
    pub max_backtracks: usize,
    pub metric: StepMetric,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 500,
            lambda_floor: 1e-6,
            ridge_init: 1e-10,
            max_backtracks: 30,
            metric: StepMetric::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState<T: Real> {
    pub l_hat: DMatrix<T>,
    pub s_hat: DMatrix<T>,
    pub d_hat: Option<DMatrix<T>>,
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_min_design: T,
    /// Objective after initialisation and after every iteration.
    pub objective_trace: Vec<T>,
    pub warnings: Vec<String>,
}

impl<T: Real> EstimatorState<T> {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            l_hat: DMatrix::zeros(p, q),
            s_hat: DMatrix::zeros(p, q),
            d_hat: None,
            objective: T::zero(),
            iterations: 0,
            converged: true,
            lambda_min_design: T::zero(),
            objective_trace: vec![T::zero()],
            warnings: vec![],
        }
    }

    /// Combined estimate `L̂ + Ŝ (+ D̂)`.
    pub fn core(&self) -> DMatrix<T> {
        let mut m = &self.l_hat + &self.s_hat;
        if let Some(d) = &self.d_hat {
            m += d;
        }
        m
    }
}

/// The quadratic objective in sufficient-statistic form.
struct Quadratic<T: Real> {
    gn: DMatrix<T>,
    m_hat: DMatrix<T>,
    base_obj: T,
    range_proj: DMatrix<T>,
    row_weights: Vec<T>,
    step0: T,
}

impl<T: Real> Quadratic<T> {
    fn new(data: &RegressionData<T>) -> Option<Self> {
        let n = T::from_usize(data.n_obs()).unwrap();
        let gn = data.gram() / n;
        let cn = data.cross() / n;
        let eig = linalg::symmetric_eigenvalues(&gn);
        let lmax = eig.last().copied().unwrap_or_else(T::zero);
        if lmax <= T::zero() {
            return None;
        }
        let pinv = linalg::psd_pseudo_inverse(&gn, T::tol(1e-12));
        let m_hat = &pinv * &cn;
        let range_proj = &pinv * &gn;
        let fit = (m_hat.transpose() * &gn * &m_hat).trace();
        let base_obj = (data.y_sq() / n - fit).max(T::zero());
        let row_weights = (0..gn.nrows()).map(|i| gn[(i, i)]).collect();
        Some(Self {
            gn,
            m_hat,
            base_obj,
            range_proj,
            row_weights,
            step0: T::one() / lmax,
        })
    }

    fn objective(&self, m: &DMatrix<T>) -> T {
        let e = m - &self.m_hat;
        let ge = &self.gn * &e;
        self.base_obj + e.component_mul(&ge).sum()
    }

    /// Half-gradient `G(M − M̂)`.
    fn gradient(&self, m: &DMatrix<T>) -> DMatrix<T> {
        &self.gn * (m - &self.m_hat)
    }

    /// Preconditioned direction `G⁺G(M − M̂)`: the residual restricted to
    /// observed directions.
    fn newton_direction(&self, m: &DMatrix<T>) -> DMatrix<T> {
        &self.range_proj * (m - &self.m_hat)
    }

    fn ridge_fit(&self, rel: T) -> DMatrix<T> {
        let p = self.gn.nrows();
        let eps = rel * self.gn.trace();
        let a = &self.gn + DMatrix::identity(p, p) * eps;
        let rhs = &self.gn * &self.m_hat;
        a.cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| self.m_hat.clone())
    }
}

/// Rank-`r` truncation followed by incoherence clipping of both factors,
/// QR re-orthonormalisation, and a least-squares refit of the `r×r` core
/// against the data with `offset` held fixed.
fn project_low_rank<T: Real>(
    z: &DMatrix<T>,
    cons: &LrsConstraints,
    quad: Option<(&Quadratic<T>, &DMatrix<T>)>,
) -> DMatrix<T> {
    let svd = linalg::sorted_svd(z);
    let k = cons.rank_r.min(svd.singular_values.len());
    let top = svd.singular_values.first().copied().unwrap_or_else(T::zero);
    if top <= T::zero() {
        return DMatrix::zeros(z.nrows(), z.ncols());
    }
    let mut u = svd.u.columns(0, k).into_owned();
    let mut v = svd.v.columns(0, k).into_owned();
    let sigma = DMatrix::from_diagonal(&DVector::from_iterator(k, svd.singular_values.iter().take(k).copied()));
    let Some((bu, bv)) = cons.row_bounds() else {
        return &u * sigma * v.transpose();
    };
    let (bu, bv) = (T::lit(bu), T::lit(bv));
    let clipped = clip_rows(&mut u, bu) | clip_rows(&mut v, bv);
    if !clipped {
        return &u * sigma * v.transpose();
    }
    let ok = alternate_clip_qr(&mut u, bu) && alternate_clip_qr(&mut v, bv);
    if !ok {
        log::debug!("incoherence clipping did not settle; keeping the unclipped truncation out of the feasible set");
        return DMatrix::zeros(z.nrows(), z.ncols());
    }
    let core = refit_core(&u, &v, z, quad);
    &u * core * v.transpose()
}

/// Scales rows with norm above `bound` down to `bound`. Returns whether
/// anything changed.
fn clip_rows<T: Real>(f: &mut DMatrix<T>, bound: T) -> bool {
    let mut changed = false;
    for i in 0..f.nrows() {
        let n = f.row(i).norm();
        if n > bound {
            f.row_mut(i).scale_mut(bound / n);
            changed = true;
        }
    }
    changed
}

fn alternate_clip_qr<T: Real>(f: &mut DMatrix<T>, bound: T) -> bool {
    let slack = bound * (T::one() + T::tol(1e-10));
    for _ in 0..200 {
        *f = linalg::orthonormalize_columns(f);
        if linalg::row_norms(f).iter().all(|n| *n <= slack) {
            return true;
        }
        clip_rows(f, bound);
    }
    false
}

fn refit_core<T: Real>(
    u: &DMatrix<T>,
    v: &DMatrix<T>,
    z: &DMatrix<T>,
    quad: Option<(&Quadratic<T>, &DMatrix<T>)>,
) -> DMatrix<T> {
    let frob = u.transpose() * z * v;
    let Some((q, offset)) = quad else {
        return frob;
    };
    // min_C tr((UCVᵀ − T)ᵀ G (UCVᵀ − T)), T = M̂ − offset; tiny ridge towards
    // the Frobenius projection resolves directions the data do not see
    let target = &q.m_hat - offset;
    let ugu = u.transpose() * &q.gn * u;
    let rhs = u.transpose() * &q.gn * target * v;
    let eps = T::lit(1e-12) * ugu.trace().max(T::lit(1e-300));
    let k = u.ncols();
    let a = &ugu + DMatrix::identity(k, k) * eps;
    match a.cholesky() {
        Some(c) => c.solve(&(rhs + frob * eps)),
        None => frob,
    }
}

fn hard_threshold_for<T: Real>(z: &DMatrix<T>, k: usize, quad: &Quadratic<T>, metric: StepMetric) -> DMatrix<T> {
    match metric {
        StepMetric::Euclidean => linalg::hard_threshold(z, k),
        StepMetric::DesignWeighted => linalg::hard_threshold_weighted(z, k, Some(&quad.row_weights)),
    }
}

/// Runs a backtracked proximal step: tries the preconditioned unit step
/// (when enabled) and then Euclidean steps `step0, step0/2, …`, accepting
/// the first candidate that does not increase the objective.
fn backtracked_step<T: Real, F>(
    quad: &Quadratic<T>,
    current_obj: T,
    opts: &SolverOptions,
    mut candidate: F,
) -> Option<(DMatrix<T>, T)>
where
    F: FnMut(Direction, T) -> (DMatrix<T>, DMatrix<T>),
{
    if opts.metric == StepMetric::DesignWeighted {
        let mut eta = T::one();
        for _ in 0..4 {
            let (cand, full) = candidate(Direction::Newton, eta);
            let obj = quad.objective(&full);
            if obj <= current_obj {
                return Some((cand, obj));
            }
            eta *= T::lit(0.5);
        }
    }
    let mut eta = quad.step0;
    for _ in 0..=opts.max_backtracks {
        let (cand, full) = candidate(Direction::Gradient, eta);
        let obj = quad.objective(&full);
        if obj <= current_obj {
            return Some((cand, obj));
        }
        eta *= T::lit(0.5);
    }
    None
}

#[derive(Clone, Copy)]
enum Direction {
    Newton,
    Gradient,
}

fn direction<T: Real>(quad: &Quadratic<T>, m: &DMatrix<T>, dir: Direction) -> DMatrix<T> {
    match dir {
        Direction::Newton => quad.newton_direction(m),
        Direction::Gradient => quad.gradient(m),
    }
}

fn lambda_min_design<T: Real>(data: &RegressionData<T>, opts: &SolverOptions, warnings: &mut Vec<String>) -> T {
    let lam = design_min_eigenvalue(data);
    if lam.as_f64() < opts.lambda_floor {
        warnings.push(format!(
            "design-degenerate: λ_min = {:.3e} below floor {:.1e}",
            lam.as_f64(),
            opts.lambda_floor
        ));
    }
    lam
}

/// Joint low-rank + sparse fit by projected alternating minimisation,
/// initialised spectrally from the ridge least-squares fit.
pub fn fit_low_rank_sparse<T: Real>(
    data: &RegressionData<T>,
    cons: &LrsConstraints,
    opts: &SolverOptions,
) -> Result<EstimatorState<T>> {
    fit_low_rank_sparse_from(data, cons, opts, None)
}

/// As [`fit_low_rank_sparse`], optionally warm-started from `(L, S)`.
pub fn fit_low_rank_sparse_from<T: Real>(
    data: &RegressionData<T>,
    cons: &LrsConstraints,
    opts: &SolverOptions,
    init: Option<(&DMatrix<T>, &DMatrix<T>)>,
) -> Result<EstimatorState<T>> {
    cons.validate()?;
    check_dims(data, cons.p, cons.q)?;
    if data.n_obs() == 0 {
        return Err(Error::InvalidConfig("fit_low_rank_sparse needs at least one observation".into()));
    }
    let mut warnings = Vec::new();
    let lambda_min = lambda_min_design(data, opts, &mut warnings);
    let Some(quad) = Quadratic::new(data) else {
        let mut st = EstimatorState::zeros(cons.p, cons.q);
        st.objective = data.y_sq() / T::from_usize(data.n_obs()).unwrap();
        st.objective_trace = vec![st.objective];
        st.lambda_min_design = lambda_min;
        st.warnings = warnings;
        return Ok(st);
    };

    let (mut l, mut s) = match init {
        Some((l0, s0)) => (
            project_low_rank(l0, cons, Some((&quad, s0))),
            hard_threshold_for(s0, cons.sparsity_cap, &quad, opts.metric),
        ),
        None => {
            let m0 = quad.ridge_fit(T::lit(opts.ridge_init));
            let l0 = project_low_rank(&linalg::truncate_rank(&m0, cons.rank_r), cons, None);
            let s0 = hard_threshold_for(&(&m0 - &l0), cons.sparsity_cap, &quad, opts.metric);
            (l0, s0)
        }
    };
    let mut obj = quad.objective(&(&l + &s));
    // a warm start that scores worse than the cold spectral start is dropped
    if init.is_some() {
        let m0 = quad.ridge_fit(T::lit(opts.ridge_init));
        let l0 = project_low_rank(&linalg::truncate_rank(&m0, cons.rank_r), cons, None);
        let s0 = hard_threshold_for(&(&m0 - &l0), cons.sparsity_cap, &quad, opts.metric);
        let cold = quad.objective(&(&l0 + &s0));
        if cold < obj {
            l = l0;
            s = s0;
            obj = cold;
        }
    }
    let mut trace = vec![obj];
    let tol = T::lit(opts.tol);
    let floor = T::lit(1e-30) * (data.y_sq() / T::from_usize(data.n_obs()).unwrap()).max(T::lit(1e-300));
    let mut converged = obj <= floor;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let prev = obj;
        let m = &l + &s;
        if let Some((cand, o)) = backtracked_step(&quad, obj, opts, |dir, eta| {
            let z = &l - direction(&quad, &m, dir) * eta;
            let cand = project_low_rank(&z, cons, Some((&quad, &s)));
            let full = &cand + &s;
            (cand, full)
        }) {
            l = cand;
            obj = o;
        }
        let m = &l + &s;
        if let Some((cand, o)) = backtracked_step(&quad, obj, opts, |dir, eta| {
            let z = &s - direction(&quad, &m, dir) * eta;
            let cand = hard_threshold_for(&z, cons.sparsity_cap, &quad, opts.metric);
            let full = &l + &cand;
            (cand, full)
        }) {
            s = cand;
            obj = o;
        }
        trace.push(obj);
        let decrease = prev - obj;
        converged = obj <= floor || decrease <= tol * prev;
    }
    if !converged {
        warnings.push(format!("not converged after {iterations} iterations"));
    }
    Ok(EstimatorState {
        l_hat: l,
        s_hat: s,
        d_hat: None,
        objective: obj,
        iterations,
        converged,
        lambda_min_design: lambda_min,
        objective_trace: trace,
        warnings,
    })
}

fn check_dims<T: Real>(data: &RegressionData<T>, p: usize, q: usize) -> Result<()> {
    if data.p() != p {
        return Err(Error::DimensionMismatch {
            what: "feature dimension p",
            expected: p,
            actual: data.p(),
        });
    }
    if data.q() != q {
        return Err(Error::DimensionMismatch {
            what: "feature dimension q",
            expected: q,
            actual: data.q(),
        });
    }
    Ok(())
}

/// Result of the sparse-difference correction.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceFit<T: Real> {
    pub d_hat: DMatrix<T>,
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<T>,
    pub warnings: Vec<String>,
}

/// Iterative hard thresholding for `min ‖Y − X(base + D)‖²` subject to
/// `‖D‖₀ ≤ cap_e`.
pub fn fit_sparse_difference<T: Real>(
    data: &RegressionData<T>,
    base: &DMatrix<T>,
    cap_e: usize,
    opts: &SolverOptions,
) -> Result<DifferenceFit<T>> {
    fit_sparse_difference_from(data, base, cap_e, opts, None)
}

pub fn fit_sparse_difference_from<T: Real>(
    data: &RegressionData<T>,
    base: &DMatrix<T>,
    cap_e: usize,
    opts: &SolverOptions,
    init: Option<&DMatrix<T>>,
) -> Result<DifferenceFit<T>> {
    check_dims(data, base.nrows(), base.ncols())?;
    let (p, q) = base.shape();
    let mut warnings = Vec::new();
    let n = T::from_usize(data.n_obs().max(1)).unwrap();
    let Some(quad) = Quadratic::new(data).filter(|_| data.n_obs() > 0) else {
        let obj = data.y_sq() / n;
        return Ok(DifferenceFit {
            d_hat: DMatrix::zeros(p, q),
            objective: obj,
            iterations: 0,
            converged: true,
            objective_trace: vec![obj],
            warnings,
        });
    };
    let objective = |d: &DMatrix<T>| quad.objective(&(base + d));
    let zero = DMatrix::zeros(p, q);
    let mut d = zero.clone();
    let mut obj = objective(&d);
    if cap_e > 0 {
        // least-squares residual on the observed directions, thresholded
        let resid = &quad.range_proj * (&quad.m_hat - base);
        let spectral = hard_threshold_for(&resid, cap_e, &quad, opts.metric);
        let o = objective(&spectral);
        if o < obj {
            d = spectral;
            obj = o;
        }
        if let Some(w) = init {
            let w = hard_threshold_for(w, cap_e, &quad, opts.metric);
            let o = objective(&w);
            if o < obj {
                d = w;
                obj = o;
            }
        }
    }
    let mut trace = vec![obj];
    let tol = T::lit(opts.tol);
    let floor = T::lit(1e-30) * (data.y_sq() / n).max(T::lit(1e-300));
    let mut converged = cap_e == 0 || obj <= floor;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let prev = obj;
        let full = base + &d;
        if let Some((cand, o)) = backtracked_step(&quad, obj, opts, |dir, eta| {
            let z = &d - direction(&quad, &full, dir) * eta;
            let cand = hard_threshold_for(&z, cap_e, &quad, opts.metric);
            let f = base + &cand;
            (cand, f)
        }) {
            d = cand;
            obj = o;
        }
        trace.push(obj);
        converged = obj <= floor || prev - obj <= tol * prev;
    }
    if !converged {
        warnings.push(format!("not converged after {iterations} iterations"));
    }
    Ok(DifferenceFit {
        d_hat: d,
        objective: obj,
        iterations,
        converged,
        objective_trace: trace,
        warnings,
    })
}

/// Ground truth for a synthetic run.
pub struct Truth<'a, T: Real> {
    pub low_rank: &'a DMatrix<T>,
    pub sparse: &'a DMatrix<T>,
    pub diff: Option<&'a DMatrix<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationError<T> {
    pub err_l: T,
    pub err_s: T,
    pub total: T,
    pub err_d: Option<T>,
}

/// Squared Frobenius errors of each component against the truth.
pub fn estimation_error<T: Real>(state: &EstimatorState<T>, truth: &Truth<'_, T>) -> EstimationError<T> {
    let err_l = linalg::frobenius_sq(&(&state.l_hat - truth.low_rank));
    let err_s = linalg::frobenius_sq(&(&state.s_hat - truth.sparse));
    let err_d = match (&state.d_hat, truth.diff) {
        (Some(d), Some(t)) => Some(linalg::frobenius_sq(&(d - t))),
        (None, Some(t)) => Some(linalg::frobenius_sq(t)),
        (Some(d), None) => Some(linalg::frobenius_sq(d)),
        (None, None) => None,
    };
    EstimationError {
        err_l,
        err_s,
        total: err_l + err_s,
        err_d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_data(core: &DMatrix<f64>, reps: usize) -> RegressionData<f64> {
        // noiseless: every row of X is a basis vector, Y = X·M exactly
        let (p, q) = core.shape();
        let mut d = RegressionData::new(p, q);
        for _ in 0..reps {
            for i in 0..p {
                let x = DVector::from_fn(p, |k, _| if k == i { 1.0 } else { 0.0 });
                let y = core.row(i).transpose();
                d.push(&x, &y);
            }
            d.end_episode();
        }
        d
    }

    #[test]
    fn zero_design_returns_zero_estimate() {
        let mut d = RegressionData::<f64>::new(4, 3);
        for _ in 0..5 {
            d.push(&DVector::zeros(4), &DVector::zeros(3));
        }
        let cons = LrsConstraints {
            rank_r: 1,
            mu_budget: 2.0,
            sparsity_cap: 2,
            p: 4,
            q: 3,
        };
        let st = fit_low_rank_sparse(&d, &cons, &SolverOptions::default()).unwrap();
        assert!(st.converged);
        assert_eq!(st.l_hat, DMatrix::zeros(4, 3));
        assert_eq!(st.s_hat, DMatrix::zeros(4, 3));
    }

    #[test]
    fn inactive_constraints_reproduce_least_squares() {
        let core = DMatrix::from_fn(5, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 / 4.0);
        let d = one_hot_data(&core, 2);
        let cons = LrsConstraints {
            rank_r: 3,
            mu_budget: f64::INFINITY,
            sparsity_cap: 0,
            p: 5,
            q: 3,
        };
        let st = fit_low_rank_sparse(&d, &cons, &SolverOptions::default()).unwrap();
        assert!((st.l_hat - &core).amax() < 1e-9);
        assert_eq!(linalg::count_nonzeros(&st.s_hat), 0);
    }

    #[test]
    fn empty_support_difference_is_zero() {
        let core = DMatrix::from_element(4, 2, 0.5);
        let d = one_hot_data(&core, 1);
        let fit = fit_sparse_difference(&d, &DMatrix::zeros(4, 2), 0, &SolverOptions::default()).unwrap();
        assert_eq!(fit.d_hat, DMatrix::zeros(4, 2));
    }

    #[test]
    fn true_base_leaves_no_difference() {
        let core = DMatrix::from_fn(6, 3, |i, j| 0.1 + ((i + j) % 3) as f64 * 0.2);
        let d = one_hot_data(&core, 3);
        let fit = fit_sparse_difference(&d, &core, 2, &SolverOptions::default()).unwrap();
        assert!(linalg::max_abs(&fit.d_hat) < 1e-8);
    }

    #[test]
    fn error_record_algebra() {
        let l = DMatrix::from_element(3, 2, 0.5);
        let s = DMatrix::from_row_slice(3, 2, &[0.1, 0.0, 0.0, -0.1, 0.0, 0.0]);
        let st = EstimatorState {
            l_hat: l.clone(),
            s_hat: s.clone(),
            ..EstimatorState::zeros(3, 2)
        };
        let e = estimation_error(
            &st,
            &Truth {
                low_rank: &l,
                sparse: &s,
                diff: None,
            },
        );
        assert_eq!((e.err_l, e.err_s, e.total, e.err_d), (0.0, 0.0, 0.0, None));
        let (l2, s2) = (&l * 2.0, &s * 2.0);
        let e = estimation_error(
            &st,
            &Truth {
                low_rank: &l2,
                sparse: &s2,
                diff: None,
            },
        );
        assert_eq!(e.err_l, linalg::frobenius_sq(&l));
        assert_eq!(e.err_s, linalg::frobenius_sq(&s));
    }

    #[test]
    fn orthonormal_design_eigenvalues() {
        // rows e1, e2 of R^3 repeated m times over m+1 episodes
        let m = 4;
        let mut d = RegressionData::<f64>::new(3, 1);
        for _ in 0..m {
            d.push(&DVector::from_vec(vec![1.0, 0.0, 0.0]), &DVector::zeros(1));
            d.push(&DVector::from_vec(vec![0.0, 1.0, 0.0]), &DVector::zeros(1));
            d.end_episode();
        }
        d.end_episode();
        // third direction is never observed
        assert_eq!(design_min_eigenvalue(&d), 0.0);
        let gram = d.gram() / m as f64;
        assert!((gram[(0, 0)] - 1.0).abs() < 1e-15 && (gram[(1, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_are_rank_one() {
        let mut d = RegressionData::<f64>::new(3, 1);
        let x = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        for _ in 0..6 {
            d.push(&x, &DVector::zeros(1));
            d.end_episode();
        }
        assert_eq!(design_min_eigenvalue(&d), 0.0);
        let eig = linalg::symmetric_eigenvalues(&(d.gram() / 5.0));
        assert!((eig[2] - 6.0 * x.norm_squared() / 5.0).abs() < 1e-12);
        assert!(eig[1].abs() < 1e-12);
    }
}
