//! Composite episodic MDPs: tabular state/action spaces whose transition
//! kernel factors as `P(s'|s,a) = φ(s,a)ᵀ (L* + S*) ψ(s')`.

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

/// How [`FeatureTables::new`] treats an ill-conditioned `K_ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpsiPolicy {
    pub condition_cap: f64,
    pub ridge_enabled: bool,
}

impl Default for KpsiPolicy {
    fn default() -> Self {
        Self {
            condition_cap: 1e10,
            ridge_enabled: true,
        }
    }
}

/// State-action features `φ` (one row per `(s,a)`, row index `s·|A| + a`),
/// next-state features `ψ` (one row per state) and the Gram matrix
/// `K_ψ = Σ_{s'} ψ(s')ψ(s')ᵀ` with its inverse.
#[derive(Debug, Clone)]
pub struct FeatureTables<T: Real> {
    phi: DMatrix<T>,
    psi: DMatrix<T>,
    k_psi: DMatrix<T>,
    k_psi_inv: DMatrix<T>,
    /// Row `s'` holds `ψ(s')ᵀ K_ψ⁻¹`, the regression target for a move into `s'`.
    psi_kinv: DMatrix<T>,
    ridge_used: T,
}

impl<T: Real> FeatureTables<T> {
    pub fn new(phi: DMatrix<T>, psi: DMatrix<T>, policy: KpsiPolicy) -> Result<Self> {
        if phi.ncols() == 0 || psi.ncols() == 0 {
            return Err(Error::InvalidConfig("feature dimensions must be at least 1".into()));
        }
        if phi.iter().chain(psi.iter()).any(|v| !v.is_finite_value()) {
            return Err(Error::InvalidConfig("feature tables contain non-finite entries".into()));
        }
        let q = psi.ncols();
        let mut k_psi = psi.transpose() * &psi;
        let eig = linalg::symmetric_eigenvalues(&k_psi);
        let lo = eig.first().copied().unwrap_or_else(T::zero).as_f64();
        let hi = eig.last().copied().unwrap_or_else(T::zero).as_f64();
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let mut ridge_used = T::zero();
        if condition > policy.condition_cap {
            if !policy.ridge_enabled {
                return Err(Error::SingularKpsi { condition });
            }
            ridge_used = T::lit(1e-8) * k_psi.trace() / T::from_usize(q).unwrap();
            if ridge_used <= T::zero() {
                return Err(Error::SingularKpsi { condition });
            }
            log::warn!("K_psi condition number {condition:e} exceeds cap; adding ridge {ridge_used}");
            for i in 0..q {
                k_psi[(i, i)] += ridge_used;
            }
        }
        let k_psi_inv = match k_psi.clone().cholesky() {
            Some(ch) => ch.inverse(),
            None => k_psi
                .clone()
                .try_inverse()
                .ok_or(Error::SingularKpsi { condition })?,
        };
        let psi_kinv = &psi * &k_psi_inv;
        Ok(Self {
            phi,
            psi,
            k_psi,
            k_psi_inv,
            psi_kinv,
            ridge_used,
        })
    }

    /// One-hot features: `φ = I_{|S||A|}`, `ψ = I_{|S|}`, so `K_ψ = I`.
    pub fn canonical(n_states: usize, n_actions: usize) -> Self {
        Self::new(
            DMatrix::identity(n_states * n_actions, n_states * n_actions),
            DMatrix::identity(n_states, n_states),
            KpsiPolicy::default(),
        )
        .expect("identity features are well conditioned")
    }

    pub fn p(&self) -> usize {
        self.phi.ncols()
    }

    pub fn q(&self) -> usize {
        self.psi.ncols()
    }

    pub fn phi(&self) -> &DMatrix<T> {
        &self.phi
    }

    pub fn psi(&self) -> &DMatrix<T> {
        &self.psi
    }

    pub fn k_psi(&self) -> &DMatrix<T> {
        &self.k_psi
    }

    pub fn k_psi_inv(&self) -> &DMatrix<T> {
        &self.k_psi_inv
    }

    pub fn psi_kinv(&self) -> &DMatrix<T> {
        &self.psi_kinv
    }

    pub fn ridge_used(&self) -> T {
        self.ridge_used
    }

    pub fn phi_row(&self, row: usize) -> DVector<T> {
        self.phi.row(row).transpose()
    }
}

/// Everything needed to assemble a [`CompositeMdp`].
#[derive(Debug, Clone)]
pub struct MdpParts<T: Real> {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub features: FeatureTables<T>,
    pub core_low_rank: DMatrix<T>,
    pub core_sparse: DMatrix<T>,
    pub reward: DVector<T>,
    pub initial_dist: DVector<T>,
    pub rank_r: usize,
    pub sparsity_s: usize,
    pub incoherence_mu: T,
}

/// A validated composite MDP. Immutable once built; the clipped kernel is
/// cached at construction.
#[derive(Debug, Clone)]
pub struct CompositeMdp<T: Real> {
    parts: MdpParts<T>,
    /// Row-major `(|S||A|) × |S|` transition table.
    kernel: Vec<T>,
}

impl<T: Real> CompositeMdp<T> {
    pub fn new(parts: MdpParts<T>) -> Result<Self> {
        let kernel = validate(&parts)?;
        Ok(Self { parts, kernel })
    }

    pub fn n_states(&self) -> usize {
        self.parts.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.parts.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.parts.n_states * self.parts.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.parts.horizon
    }

    pub fn features(&self) -> &FeatureTables<T> {
        &self.parts.features
    }

    pub fn core_low_rank(&self) -> &DMatrix<T> {
        &self.parts.core_low_rank
    }

    pub fn core_sparse(&self) -> &DMatrix<T> {
        &self.parts.core_sparse
    }

    pub fn core(&self) -> DMatrix<T> {
        &self.parts.core_low_rank + &self.parts.core_sparse
    }

    pub fn reward(&self) -> &DVector<T> {
        &self.parts.reward
    }

    pub fn reward_at(&self, s: usize, a: usize) -> T {
        self.parts.reward[self.sa_index(s, a)]
    }

    pub fn initial_dist(&self) -> &DVector<T> {
        &self.parts.initial_dist
    }

    pub fn rank_r(&self) -> usize {
        self.parts.rank_r
    }

    pub fn sparsity_s(&self) -> usize {
        self.parts.sparsity_s
    }

    pub fn incoherence_mu(&self) -> T {
        self.parts.incoherence_mu
    }

    pub fn parts(&self) -> &MdpParts<T> {
        &self.parts
    }

    pub fn into_parts(self) -> MdpParts<T> {
        self.parts
    }

    #[inline]
    pub fn sa_index(&self, s: usize, a: usize) -> usize {
        s * self.parts.n_actions + a
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.parts.n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                limit: self.parts.n_states,
            });
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.parts.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                limit: self.parts.n_actions,
            });
        }
        Ok(())
    }

    /// Next-state distribution `P(·|s,a)`.
    pub fn transition_prob(&self, s: usize, a: usize) -> Result<&[T]> {
        self.check_state(s)?;
        self.check_action(a)?;
        Ok(self.kernel_row(self.sa_index(s, a)))
    }

    #[inline]
    pub(crate) fn kernel_row(&self, sa: usize) -> &[T] {
        let n = self.parts.n_states;
        &self.kernel[sa * n..(sa + 1) * n]
    }

    /// `[P v](s,a)` for a value vector over states.
    pub fn expected_next(&self, s: usize, a: usize, v: &[T]) -> T {
        self.kernel_row(self.sa_index(s, a))
            .iter()
            .zip(v)
            .fold(T::zero(), |acc, (p, x)| acc + *p * *x)
    }

    /// The full kernel as a `(|S||A|) × |S|` matrix.
    pub fn kernel_matrix(&self) -> DMatrix<T> {
        DMatrix::from_row_slice(self.n_pairs(), self.parts.n_states, &self.kernel)
    }
}

const ROW_SUM_TOL: f64 = 1e-9;
const NEG_ENTRY_TOL: f64 = 1e-12;
const RENORM_DRIFT: f64 = 1e-12;

fn validate<T: Real>(parts: &MdpParts<T>) -> Result<Vec<T>> {
    let n_s = parts.n_states;
    let n_a = parts.n_actions;
    if n_s == 0 || n_a == 0 || parts.horizon == 0 {
        return Err(Error::InvalidConfig("|S|, |A| and H must all be positive".into()));
    }
    let f = &parts.features;
    let (p, q) = (f.p(), f.q());
    let dims = [
        ("phi rows", n_s * n_a, f.phi().nrows()),
        ("psi rows", n_s, f.psi().nrows()),
        ("core_low_rank rows", p, parts.core_low_rank.nrows()),
        ("core_low_rank cols", q, parts.core_low_rank.ncols()),
        ("core_sparse rows", p, parts.core_sparse.nrows()),
        ("core_sparse cols", q, parts.core_sparse.ncols()),
        ("reward", n_s * n_a, parts.reward.len()),
        ("initial_dist", n_s, parts.initial_dist.len()),
    ];
    for (what, expected, actual) in dims {
        if expected != actual {
            return Err(Error::DimensionMismatch {
                what,
                expected,
                actual,
            });
        }
    }
    for (i, r) in parts.reward.iter().enumerate() {
        if !(r.is_finite_value() && *r >= T::zero() && *r <= T::one()) {
            return Err(Error::StructuralViolation {
                row: i,
                detail: format!("reward {r} outside [0,1]"),
            });
        }
    }
    let mu_sum = parts.initial_dist.iter().fold(T::zero(), |a, v| a + *v);
    if parts.initial_dist.iter().any(|v| *v < T::zero() || !v.is_finite_value())
        || (mu_sum - T::one()).magnitude() > T::tol(1e-12)
    {
        return Err(Error::StructuralViolation {
            row: 0,
            detail: format!("initial distribution is not a probability vector (sum {mu_sum})"),
        });
    }
    let rank = linalg::numerical_rank(&parts.core_low_rank, T::lit(1e-8));
    if rank > parts.rank_r {
        return Err(Error::StructuralViolation {
            row: 0,
            detail: format!("rank(L*) = {rank} exceeds declared rank {}", parts.rank_r),
        });
    }
    let nnz = linalg::count_nonzeros(&parts.core_sparse);
    if nnz > parts.sparsity_s {
        return Err(Error::StructuralViolation {
            row: 0,
            detail: format!("‖S*‖₀ = {nnz} exceeds declared sparsity {}", parts.sparsity_s),
        });
    }

    let core = &parts.core_low_rank + &parts.core_sparse;
    let raw = f.phi() * core * f.psi().transpose();
    let mut kernel = Vec::with_capacity(n_s * n_s * n_a);
    for sa in 0..n_s * n_a {
        let mut row: Vec<T> = raw.row(sa).iter().copied().collect();
        let sum = row.iter().fold(T::zero(), |a, v| a + *v);
        if let Some(bad) = row.iter().position(|v| *v < -T::tol(NEG_ENTRY_TOL) || !v.is_finite_value()) {
            return Err(Error::StructuralViolation {
                row: sa,
                detail: format!("transition entry {bad} = {}", row[bad]),
            });
        }
        if (sum - T::one()).magnitude() > T::tol(ROW_SUM_TOL) {
            return Err(Error::StructuralViolation {
                row: sa,
                detail: format!("transition row sums to {sum}"),
            });
        }
        clip_and_renormalize(&mut row);
        kernel.extend(row);
    }
    Ok(kernel)
}

/// Clips to `[0,1]` and renormalizes when clipping occurred or the row sum
/// drifts by more than `1e-12`.
fn clip_and_renormalize<T: Real>(row: &mut [T]) {
    let mut clipped = false;
    for v in row.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
            clipped = true;
        } else if *v > T::one() {
            *v = T::one();
            clipped = true;
        }
    }
    let sum = row.iter().fold(T::zero(), |a, v| a + *v);
    if clipped || (sum - T::one()).magnitude() > T::tol(RENORM_DRIFT) {
        for v in row.iter_mut() {
            *v /= sum;
        }
        // push the residual rounding onto the largest entry
        let resid = T::one() - row.iter().fold(T::zero(), |a, v| a + *v);
        if let Some(k) = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()) {
            row[k] += resid;
        }
    }
}

/// One observed transition; `step` is zero-based within the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub step: usize,
    pub episode: usize,
}

/// Per-step action rule used when rolling out an episode.
pub trait Policy {
    fn act(&self, step: usize, state: usize, rng: &mut dyn RngCore) -> usize;
}

impl<F> Policy for F
where
    F: Fn(usize, usize, &mut dyn RngCore) -> usize,
{
    fn act(&self, step: usize, state: usize, rng: &mut dyn RngCore) -> usize {
        self(step, state, rng)
    }
}

/// Uniformly random action at every step.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_actions: usize,
}

impl Policy for UniformPolicy {
    fn act(&self, _step: usize, _state: usize, rng: &mut dyn RngCore) -> usize {
        rng.random_range(0..self.n_actions)
    }
}

/// Deterministic nonstationary policy stored as an `H × |S|` table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyPolicy {
    pub n_states: usize,
    pub actions: Vec<usize>,
}

impl GreedyPolicy {
    pub fn new(horizon: usize, n_states: usize, fill: usize) -> Self {
        Self {
            n_states,
            actions: vec![fill; horizon * n_states],
        }
    }

    pub fn action(&self, step: usize, state: usize) -> usize {
        self.actions[step * self.n_states + state]
    }

    pub fn set(&mut self, step: usize, state: usize, action: usize) {
        self.actions[step * self.n_states + state] = action;
    }
}

impl Policy for GreedyPolicy {
    fn act(&self, step: usize, state: usize, _rng: &mut dyn RngCore) -> usize {
        self.action(step, state)
    }
}

/// Draws an index from a probability vector by inverse-CDF.
pub fn sample_categorical<T: Real>(probs: &[T], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Rolls out one episode of `H` transitions.
pub fn sample_episode<T: Real>(
    mdp: &CompositeMdp<T>,
    policy: &dyn Policy,
    episode: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<TransitionSample>> {
    let mut state = sample_categorical(mdp.initial_dist().as_slice(), rng);
    let mut out = Vec::with_capacity(mdp.horizon());
    for step in 0..mdp.horizon() {
        let action = policy.act(step, state, rng);
        let next_state = sample_categorical(mdp.transition_prob(state, action)?, rng);
        out.push(TransitionSample {
            state,
            action,
            next_state,
            step,
            episode,
        });
        state = next_state;
    }
    Ok(out)
}

/// Regression pair `(φ(s,a), K_ψ⁻¹ψ(s'))` for one transition.
pub fn regression_row<T: Real>(features: &FeatureTables<T>, sample: &TransitionSample) -> (DVector<T>, DVector<T>) {
    let n_actions = features.phi().nrows() / features.psi().nrows();
    let x = features.phi_row(sample.state * n_actions + sample.action);
    let y = features.psi_kinv().row(sample.next_state).transpose();
    (x, y)
}

/// Constants bounding the feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants<T> {
    /// `max ‖φ(s,a)‖₂`
    pub c_phi: T,
    /// `max ‖φ(s,a)‖_∞`
    pub c_phi_prime: T,
    /// Upper bound on the `ℓ_∞ → ℓ₂` operator norm of `Ψᵀ`.
    pub c_psi: T,
    /// `max ‖ψ(s')ᵀK_ψ⁻¹‖₂`
    pub c_psi_prime: T,
    /// Largest entry of any outer product `φ(s,a)·(ψ(s')ᵀK_ψ⁻¹)`.
    pub c_phipsi: T,
}

pub fn compute_regularity<T: Real>(mdp: &CompositeMdp<T>) -> Result<RegularityConstants<T>> {
    let f = mdp.features();
    let phi = f.phi();
    let psi = f.psi();
    let (mut c_phi, mut c_phi_prime) = (T::zero(), T::zero());
    for i in 0..phi.nrows() {
        let row = phi.row(i);
        c_phi = c_phi.max(row.norm());
        c_phi_prime = c_phi_prime.max(row.iter().fold(T::zero(), |a, v| a.max(v.magnitude())));
    }
    let sum_norms = (0..psi.nrows()).fold(T::zero(), |a, i| a + psi.row(i).norm());
    let op = linalg::sorted_svd(psi).singular_values.first().copied().unwrap_or_else(T::zero);
    let op_bound = op * T::from_usize(psi.nrows()).unwrap().sqrt();
    let c_psi = sum_norms.min(op_bound);
    let pk = f.psi_kinv();
    let (mut c_psi_prime, mut pk_inf) = (T::zero(), T::zero());
    for i in 0..pk.nrows() {
        let row = pk.row(i);
        c_psi_prime = c_psi_prime.max(row.norm());
        pk_inf = pk_inf.max(row.iter().fold(T::zero(), |a, v| a.max(v.magnitude())));
    }
    let consts = RegularityConstants {
        c_phi,
        c_phi_prime,
        c_psi,
        c_psi_prime,
        c_phipsi: c_phi_prime * pk_inf,
    };
    for (name, v) in [
        ("c_phi", consts.c_phi),
        ("c_phi_prime", consts.c_phi_prime),
        ("c_psi", consts.c_psi),
        ("c_psi_prime", consts.c_psi_prime),
        ("c_phipsi", consts.c_phipsi),
    ] {
        if !(v.is_finite_value() && v > T::zero()) {
            return Err(Error::InvalidConfig(format!("regularity constant {name} = {v} is not positive")));
        }
    }
    Ok(consts)
}
