//! Optimistic Q-learning on composite MDPs: single task (UCB-Q) and
//! transfer from a source task (UCB-TQL).
//!
//! The confidence region is a Frobenius ball around the current core
//! estimate, so the inner maximisation in the optimistic backup has a
//! closed form. For a linear functional `⟨G, Δ⟩` with `G = φ·(Ψᵀv)ᵀ`, the
//! joint ball `‖Δ_L‖² + ‖Δ_S‖² ≤ β` gives `sqrt(2β)·‖G‖_F`.

use crate::error::{Error, Result};
use crate::estimation::{
    design_min_eigenvalue, estimation_error, fit_low_rank_sparse_from, fit_sparse_difference_from, EstimatorState,
    LrsConstraints, RegressionData, SolverOptions, Truth,
};
use crate::linalg;
use crate::mdp::{compute_regularity, sample_episode, CompositeMdp, GreedyPolicy, RegularityConstants, UniformPolicy};
use crate::oracle::{self, greedy_from_q, ValueTables};
use crate::instance_gen::TaskPair;
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Single,
    TransferNaive,
    TransferTight,
}

/// How the difference term of the tight bonus is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TightBonus {
    /// `sqrt(4e·β_n1)·‖φ‖_∞·‖Ψᵀv‖₂`, an upper bound on the maximum.
    NormBound,
    /// `sqrt(β_n1)·‖top_{2e}(φ·(Ψᵀv)ᵀ)‖_F`: the maximum over perturbations
    /// supported on at most `2e` entries.
    #[default]
    SupportRestricted,
}

/// Radii of the confidence region used in one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSpec {
    pub c_beta: f64,
    pub delta: f64,
    pub beta_n: f64,
    pub beta_n0: f64,
    pub beta_n1: f64,
    pub variant: Variant,
    pub diff_cap_e: usize,
    pub tight_bonus: TightBonus,
}

impl ConfidenceSpec {
    pub fn single(beta_n: f64, c_beta: f64, delta: f64) -> Self {
        Self {
            c_beta,
            delta,
            beta_n,
            beta_n0: 0.0,
            beta_n1: 0.0,
            variant: Variant::Single,
            diff_cap_e: 0,
            tight_bonus: TightBonus::default(),
        }
    }

    /// Radius of the ball used by the single and naive bonuses.
    pub fn joint_radius(&self) -> f64 {
        match self.variant {
            Variant::Single => self.beta_n,
            Variant::TransferNaive => self.beta_n1,
            Variant::TransferTight => self.beta_n0,
        }
    }
}

/// `δ = 1/(N²H)`.
pub fn default_delta(n_total: usize, horizon: usize) -> f64 {
    1.0 / ((n_total as f64).powi(2) * horizon as f64)
}

/// `c_β·H·ln(d·N·H)·(r·(C_φ·C'_ψ)² + s·C_φψ²)/n`.
#[allow(clippy::too_many_arguments)]
pub fn beta_single<T: Real>(
    n: usize,
    horizon: usize,
    d: usize,
    n_total: usize,
    r: usize,
    s: usize,
    consts: &RegularityConstants<T>,
    c_beta: f64,
) -> f64 {
    assert!(n >= 1, "radius needs n ≥ 1");
    let h = horizon as f64;
    let log = (d as f64 * n_total as f64 * h).ln();
    let (cp, cpp, cpsi) = (consts.c_phi.as_f64(), consts.c_psi_prime.as_f64(), consts.c_phipsi.as_f64());
    c_beta * h * log * (r as f64 * (cp * cpp).powi(2) + s as f64 * cpsi * cpsi) / n as f64
}

/// Radius after the source phase: the single-task radius at `N0` with
/// `ln(d·N0·H)`.
pub fn beta_initial<T: Real>(
    n0: usize,
    horizon: usize,
    d: usize,
    r: usize,
    s: usize,
    consts: &RegularityConstants<T>,
    c_beta: f64,
) -> f64 {
    beta_single(n0.max(1), horizon, d, n0.max(1), r, s, consts, c_beta)
}

/// `β_N0 + scale·e·C_φψ²·H·ln(d·N·H)/n`.
#[allow(clippy::too_many_arguments)]
pub fn beta_online<T: Real>(
    beta_n0: f64,
    n: usize,
    horizon: usize,
    d: usize,
    n_total: usize,
    e: usize,
    consts: &RegularityConstants<T>,
    scale: f64,
) -> f64 {
    assert!(n >= 1, "radius needs n ≥ 1");
    let h = horizon as f64;
    let log = (d as f64 * n_total as f64 * h).ln();
    let cpsi = consts.c_phipsi.as_f64();
    beta_n0 + scale * e as f64 * cpsi * cpsi * h * log / n as f64
}

/// Optimistic `Q` and `V` tables with the bonus split into the term from
/// the joint ball and the term from the difference ball.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimisticValues<T: Real> {
    /// `H` tables of size `|S| × |A|`.
    pub q_table: Vec<DMatrix<T>>,
    /// `(H+1) × |S|`, clamped to `[0, H]`; the last row is zero.
    pub v_table: DMatrix<T>,
    pub bonus_core: Vec<DMatrix<T>>,
    pub bonus_diff: Vec<DMatrix<T>>,
}

impl<T: Real> OptimisticValues<T> {
    pub fn bonus(&self, h: usize, s: usize, a: usize) -> T {
        self.bonus_core[h][(s, a)] + self.bonus_diff[h][(s, a)]
    }

    pub fn bonus_mean(&self) -> f64 {
        let (mut acc, mut n) = (0.0, 0usize);
        for (c, d) in self.bonus_core.iter().zip(&self.bonus_diff) {
            acc += (c + d).iter().map(|x| x.as_f64()).sum::<f64>();
            n += c.len();
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }

    pub fn greedy_policy(&self) -> GreedyPolicy {
        greedy_from_q(&self.q_table)
    }
}

/// Largest `‖·‖_F` of `k` entries of the outer product `a·bᵀ`.
pub fn top_k_outer_norm<T: Real>(a: &DVector<T>, b: &DVector<T>, k: usize) -> T {
    if k == 0 {
        return T::zero();
    }
    let mut entries: Vec<T> = Vec::with_capacity(a.len() * b.len());
    for x in a.iter() {
        for y in b.iter() {
            let v = *x * *y;
            if v != T::zero() {
                entries.push(v * v);
            }
        }
    }
    if entries.len() > k {
        entries.select_nth_unstable_by(k - 1, |x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
        entries.truncate(k);
    }
    entries.into_iter().fold(T::zero(), |acc, v| acc + v).sqrt()
}

/// Closed-form bonus for one `(φ, Ψᵀv)` pair as `(core term, difference term)`.
pub fn bonus_terms<T: Real>(phi: &DVector<T>, w: &DVector<T>, spec: &ConfidenceSpec) -> (T, T) {
    let phi2 = phi.norm();
    let w2 = w.norm();
    let core = T::lit((2.0 * spec.joint_radius()).sqrt()) * phi2 * w2;
    let diff = match spec.variant {
        Variant::Single | Variant::TransferNaive => T::zero(),
        Variant::TransferTight => {
            let e2 = 2 * spec.diff_cap_e;
            match spec.tight_bonus {
                TightBonus::NormBound => {
                    let phi_inf = phi.iter().fold(T::zero(), |m, x| m.max(x.magnitude()));
                    T::lit((2.0 * e2 as f64 * spec.beta_n1).sqrt()) * phi_inf * w2
                }
                TightBonus::SupportRestricted => T::lit(spec.beta_n1.sqrt()) * top_k_outer_norm(phi, w, e2),
            }
        }
    };
    (core, diff)
}

/// Backward induction with the closed-form bonus around `core_hat`.
pub fn optimistic_backup<T: Real>(mdp: &CompositeMdp<T>, core_hat: &DMatrix<T>, spec: &ConfidenceSpec) -> OptimisticValues<T> {
    let (ns, na, h_len) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let features = mdp.features();
    let big_h = T::from_usize(h_len).unwrap();
    let mut v = DMatrix::zeros(h_len + 1, ns);
    let mut q = vec![DMatrix::zeros(ns, na); h_len];
    let mut b_core = vec![DMatrix::zeros(ns, na); h_len];
    let mut b_diff = vec![DMatrix::zeros(ns, na); h_len];
    let phis: Vec<DVector<T>> = (0..ns * na).map(|i| features.phi_row(i)).collect();
    let proj: DMatrix<T> = features.phi() * core_hat;
    for h in (0..h_len).rev() {
        let next = v.row(h + 1).transpose();
        let w: DVector<T> = features.psi().transpose() * &next;
        let mean = &proj * &w;
        let zero_w = w.iter().all(|x| *x == T::zero());
        for s in 0..ns {
            let mut best = T::zero();
            for a in 0..na {
                let idx = s * na + a;
                let (c, d) = if zero_w {
                    (T::zero(), T::zero())
                } else {
                    bonus_terms(&phis[idx], &w, spec)
                };
                let val = mdp.reward_at(s, a) + mean[idx] + c + d;
                q[h][(s, a)] = val;
                b_core[h][(s, a)] = c;
                b_diff[h][(s, a)] = d;
                if a == 0 || val > best {
                    best = val;
                }
            }
            v[(h, s)] = best.max(T::zero()).min(big_h);
        }
    }
    OptimisticValues {
        q_table: q,
        v_table: v,
        bonus_core: b_core,
        bonus_diff: b_diff,
    }
}

/// When the estimator is refit from the accumulated data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RefitSchedule {
    #[default]
    Every,
    /// Every episode up to `dense_until`, then whenever the episode count
    /// has grown by `ratio` since the last refit.
    Geometric { dense_until: usize, ratio: f64 },
}

impl RefitSchedule {
    fn due(&self, n: usize, last: usize) -> bool {
        match *self {
            RefitSchedule::Every => true,
            RefitSchedule::Geometric { dense_until, ratio } => {
                n <= dense_until || n as f64 >= (last as f64 * ratio).ceil()
            }
        }
    }
}

/// Where the source data for transfer come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SourceData {
    /// Run UCB-Q on the source task.
    #[default]
    Ucb,
    /// Uniformly random behaviour policy.
    Uniform,
}

fn default_c_beta() -> f64 {
    3.0
}
fn default_c_e() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_cold_check() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOptions {
    #[serde(default = "default_c_beta")]
    pub c_beta: f64,
    /// Warm start lasts `ceil(c_e·max{p,q}/H)` episodes.
    #[serde(default = "default_c_e")]
    pub c_e: f64,
    /// Explicit warm-start length, overriding `c_e`.
    #[serde(default)]
    pub n_warm: Option<usize>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub tight_bonus: TightBonus,
    /// Multiplier on the difference part of `β_n1`.
    #[serde(default = "default_one")]
    pub diff_radius_scale: f64,
    /// Multiplier on the declared `s` (and `e`) used as sparsity caps.
    #[serde(default = "default_one")]
    pub cap_multiplier: f64,
    /// Incoherence budget for the estimator; the instance's declared value
    /// when absent.
    #[serde(default)]
    pub mu_budget: Option<f64>,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Start each refit from the previous estimate.
    #[serde(default = "default_true")]
    pub warm_start_solver: bool,
    /// Period of the full cold-start cross-check when warm starting.
    #[serde(default = "default_cold_check")]
    pub cold_check_every: usize,
    #[serde(default)]
    pub refit: RefitSchedule,
    #[serde(default)]
    pub source: SourceData,
    /// Refit schedule of the source phase.
    #[serde(default = "default_source_refit")]
    pub source_refit: RefitSchedule,
    /// Keep the estimator state of every episode.
    #[serde(default)]
    pub keep_history: bool,
}

fn default_true() -> bool {
    true
}

fn default_source_refit() -> RefitSchedule {
    RefitSchedule::Geometric {
        dense_until: 200,
        ratio: 1.05,
    }
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self {
            c_beta: default_c_beta(),
            c_e: default_c_e(),
            n_warm: None,
            variant: Variant::Single,
            tight_bonus: TightBonus::default(),
            diff_radius_scale: 1.0,
            cap_multiplier: 1.0,
            mu_budget: None,
            solver: SolverOptions::default(),
            warm_start_solver: true,
            cold_check_every: default_cold_check(),
            refit: RefitSchedule::Every,
            source: SourceData::Ucb,
            source_refit: default_source_refit(),
            keep_history: false,
        }
    }
}

impl AgentOptions {
    pub fn warm_episodes(&self, p: usize, q: usize, horizon: usize) -> usize {
        self.n_warm
            .unwrap_or_else(|| (self.c_e * p.max(q) as f64 / horizon as f64).ceil().max(0.0) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_beta >= 0.0 && self.c_e >= 0.0 && self.diff_radius_scale >= 0.0 && self.cap_multiplier > 0.0) {
            return Err(Error::InvalidConfig(
                "c_beta, c_e and diff_radius_scale must be nonnegative, cap_multiplier positive".into(),
            ));
        }
        Ok(())
    }

    fn cap(&self, declared: usize) -> usize {
        (declared as f64 * self.cap_multiplier).round() as usize
    }
}

/// Per-episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub warm: bool,
    /// `E_μ[V^{π_n}_1]` of the deployed policy.
    pub policy_value: f64,
    pub per_episode_regret: f64,
    pub cumulative_regret: f64,
    /// Errors of the estimate refit after this episode.
    pub est_err_l: f64,
    pub est_err_s: f64,
    pub est_err_d: Option<f64>,
    /// Radius of the confidence region used in this episode (infinite
    /// during warm start).
    pub beta: f64,
    pub bonus_mean: f64,
    pub in_region: bool,
    pub lambda_min_design: f64,
    pub solver_iters: usize,
    pub solver_converged: bool,
    /// `min (Q_n − Q*)` over all `(h, s, a)`.
    pub optimism_gap: Option<f64>,
    /// `max_h [Q_n(s_h,a_h) − r − P·V_{n,h+1} − 2·bonus]` along the trajectory.
    pub one_step_excess: Option<f64>,
    /// `max (bonus − cap)` over all `(h, s, a)` where the cap is
    /// `C_φ·C_ψ·H·sqrt(2β)` plus `C'_φ·C_ψ·H·sqrt(4e·β_n1)` for the tight CR.
    pub bonus_cap_excess: Option<f64>,
    /// Largest `tight − naive` bonus among `(h, s, a)` where
    /// `sqrt(2β_N0)‖φ‖₂ + sqrt(4e·β_n1)‖φ‖_∞ ≤ sqrt(2β_n1)‖φ‖₂`.
    pub tight_vs_naive_excess: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunTrace<T: Real> {
    pub records: Vec<EpisodeRecord>,
    pub n_warm: usize,
    pub optimal_value: f64,
    pub final_state: EstimatorState<T>,
    pub history: Vec<EstimatorState<T>>,
    pub constants: RegularityConstants<T>,
}

impl<T: Real> RunTrace<T> {
    pub fn total_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_regret)
    }

    /// Fraction of post-warm-start episodes inside the confidence region.
    pub fn in_region_fraction(&self) -> Option<f64> {
        let post: Vec<_> = self.records.iter().filter(|r| !r.warm).collect();
        if post.is_empty() {
            return None;
        }
        Some(post.iter().filter(|r| r.in_region).count() as f64 / post.len() as f64)
    }
}

/// Whether the truth lies in the confidence region of one episode.
/// `s_base` is `Ŝ` (single) or `Ŝ(0)` (transfer) and `d_hat` the current
/// difference estimate.
pub fn truth_in_region<T: Real>(
    spec: &ConfidenceSpec,
    l_hat: &DMatrix<T>,
    s_base: &DMatrix<T>,
    d_hat: Option<&DMatrix<T>>,
    true_low_rank: &DMatrix<T>,
    true_sparse: &DMatrix<T>,
    true_diff: Option<&DMatrix<T>>,
) -> bool {
    let el = linalg::frobenius_sq(&(l_hat - true_low_rank)).as_f64();
    match spec.variant {
        Variant::Single => el + linalg::frobenius_sq(&(s_base - true_sparse)).as_f64() <= spec.beta_n,
        Variant::TransferNaive => {
            let s_hat = match d_hat {
                Some(d) => s_base + d,
                None => s_base.clone(),
            };
            el + linalg::frobenius_sq(&(s_hat - true_sparse)).as_f64() <= spec.beta_n1
        }
        Variant::TransferTight => {
            let zero = DMatrix::zeros(l_hat.nrows(), l_hat.ncols());
            let d_true = true_diff.unwrap_or(&zero);
            let d_hat = d_hat.unwrap_or(&zero);
            let first = el + linalg::frobenius_sq(&(true_sparse - d_true - s_base)).as_f64();
            let second = linalg::frobenius_sq(&(d_true - d_hat)).as_f64();
            first <= spec.beta_n0 && second <= spec.beta_n1 && linalg::count_nonzeros(d_true) <= spec.diff_cap_e
        }
    }
}

struct Audit {
    optimism_gap: f64,
    bonus_cap_excess: f64,
    tight_vs_naive_excess: Option<f64>,
}

fn audit_backup<T: Real>(
    mdp: &CompositeMdp<T>,
    ov: &OptimisticValues<T>,
    optimal: &ValueTables<T>,
    spec: &ConfidenceSpec,
    consts: &RegularityConstants<T>,
) -> Audit {
    let (ns, na, h_len) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let big_h = h_len as f64;
    let c_psi = consts.c_psi.as_f64();
    let mut cap = consts.c_phi.as_f64() * c_psi * big_h * (2.0 * spec.joint_radius()).sqrt();
    if spec.variant == Variant::TransferTight {
        cap += consts.c_phi_prime.as_f64() * c_psi * big_h * (4.0 * spec.diff_cap_e as f64 * spec.beta_n1).sqrt();
    }
    let mut gap = f64::INFINITY;
    let mut cap_excess = f64::NEG_INFINITY;
    let mut tvn: Option<f64> = None;
    let naive = ConfidenceSpec {
        variant: Variant::TransferNaive,
        ..*spec
    };
    for h in 0..h_len {
        let next = ov.v_table.row(h + 1).transpose();
        let w: DVector<T> = mdp.features().psi().transpose() * &next;
        for s in 0..ns {
            for a in 0..na {
                gap = gap.min((ov.q_table[h][(s, a)] - optimal.q_star[h][(s, a)]).as_f64());
                cap_excess = cap_excess.max(ov.bonus(h, s, a).as_f64() - cap);
                if spec.variant == Variant::TransferTight {
                    let phi = mdp.features().phi_row(s * na + a);
                    let phi2 = phi.norm().as_f64();
                    let phi_inf = phi.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
                    // w-free sufficient condition for tight ≤ naive; the top-2e
                    // norm is at most ‖φ‖₂‖w‖₂
                    let diff_coef = match spec.tight_bonus {
                        TightBonus::NormBound => (4.0 * spec.diff_cap_e as f64 * spec.beta_n1).sqrt() * phi_inf,
                        TightBonus::SupportRestricted => spec.beta_n1.sqrt() * phi2,
                    };
                    let lhs = (2.0 * spec.beta_n0).sqrt() * phi2 + diff_coef;
                    let rhs = (2.0 * spec.beta_n1).sqrt() * phi2;
                    if lhs <= rhs {
                        let (c, d) = bonus_terms(&phi, &w, &naive);
                        let excess = ov.bonus(h, s, a).as_f64() - (c + d).as_f64();
                        tvn = Some(tvn.map_or(excess, |t| t.max(excess)));
                    }
                }
            }
        }
    }
    Audit {
        optimism_gap: gap,
        bonus_cap_excess: cap_excess,
        tight_vs_naive_excess: tvn,
    }
}

fn one_step_excess<T: Real>(
    mdp: &CompositeMdp<T>,
    ov: &OptimisticValues<T>,
    samples: &[crate::mdp::TransitionSample],
) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for smp in samples {
        let h = smp.step;
        let next: Vec<T> = ov.v_table.row(h + 1).iter().copied().collect();
        let target = mdp.reward_at(smp.state, smp.action) + mdp.expected_next(smp.state, smp.action, &next);
        let gap = ov.q_table[h][(smp.state, smp.action)] - target;
        let two_b = ov.bonus(h, smp.state, smp.action) * T::lit(2.0);
        worst = worst.max((gap - two_b).as_f64());
    }
    worst
}

/// RNG of one run; `stream` separates the source and target phases.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Fitter<'a, T: Real> {
    cons: LrsConstraints,
    opts: &'a AgentOptions,
    schedule: RefitSchedule,
    state: Option<EstimatorState<T>>,
    last_refit: usize,
}

impl<T: Real> Fitter<'_, T> {
    /// Refits if due; returns whether a refit happened.
    fn update(&mut self, data: &RegressionData<T>, n: usize) -> Result<bool> {
        if self.state.is_some() && !self.schedule.due(n, self.last_refit) {
            return Ok(false);
        }
        let init = match (&self.state, self.opts.warm_start_solver) {
            (Some(st), true) => Some((&st.l_hat, &st.s_hat)),
            _ => None,
        };
        let mut st = fit_low_rank_sparse_from(data, &self.cons, &self.opts.solver, init)?;
        if init.is_some() && self.opts.cold_check_every > 0 && n % self.opts.cold_check_every == 0 {
            let cold = fit_low_rank_sparse_from(data, &self.cons, &self.opts.solver, None)?;
            if cold.objective < st.objective {
                st = cold;
                st.warnings.push(format!("cold start improved on the warm start at episode {n}"));
            }
        }
        self.state = Some(st);
        self.last_refit = n;
        Ok(true)
    }
}

/// UCB-Q on a single task for `n_episodes` episodes.
pub fn run_ucb_q<T: Real>(mdp: &CompositeMdp<T>, n_episodes: usize, opts: &AgentOptions, seed: u64) -> Result<RunTrace<T>> {
    let mut rng = run_rng(seed, 0);
    run_ucb_q_with(mdp, n_episodes, opts, opts.refit, &mut rng, None)
}

fn single_constraints<T: Real>(mdp: &CompositeMdp<T>, opts: &AgentOptions, s_cap: usize) -> LrsConstraints {
    LrsConstraints {
        rank_r: mdp.rank_r(),
        mu_budget: opts.mu_budget.unwrap_or_else(|| mdp.incoherence_mu().as_f64()),
        sparsity_cap: opts.cap(s_cap),
        p: mdp.features().p(),
        q: mdp.features().q(),
    }
}

fn run_ucb_q_with<T: Real>(
    mdp: &CompositeMdp<T>,
    n_episodes: usize,
    opts: &AgentOptions,
    schedule: RefitSchedule,
    rng: &mut ChaCha8Rng,
    data_out: Option<&mut RegressionData<T>>,
) -> Result<RunTrace<T>> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("need at least one episode".into()));
    }
    opts.validate()?;
    let consts = compute_regularity(mdp)?;
    let (p, q, h_len) = (mdp.features().p(), mdp.features().q(), mdp.horizon());
    let d = p.max(q);
    let n_warm = opts.warm_episodes(p, q, h_len);
    let optimal = oracle::solve_optimal(mdp);
    let v_opt = optimal.initial_value(mdp.initial_dist()).as_f64();
    let uniform_value =
        oracle::initial_value(mdp, &oracle::evaluate_randomized(mdp, &oracle::uniform_weights(mdp))?).as_f64();
    let delta = default_delta(n_episodes, h_len);
    let mut data = RegressionData::new(p, q);
    let mut fitter = Fitter {
        cons: single_constraints(mdp, opts, mdp.sparsity_s()),
        opts,
        schedule,
        state: None,
        last_refit: 0,
    };
    let uniform = UniformPolicy {
        n_actions: mdp.n_actions(),
    };
    let truth = Truth {
        low_rank: mdp.core_low_rank(),
        sparse: mdp.core_sparse(),
        diff: None,
    };
    let mut records: Vec<EpisodeRecord> = Vec::with_capacity(n_episodes);
    let mut history = Vec::new();
    let mut cumulative = 0.0;
    for n in 1..=n_episodes {
        let mut rec = EpisodeRecord::blank(n);
        let samples = if n <= n_warm {
            rec.warm = true;
            rec.policy_value = uniform_value;
            rec.beta = f64::INFINITY;
            rec.in_region = true;
            sample_episode(mdp, &uniform, n, rng)?
        } else {
            let zeros = EstimatorState::zeros(p, q);
            let est = fitter.state.as_ref().unwrap_or(&zeros);
            let beta = beta_single(n, h_len, d, n_episodes, mdp.rank_r(), mdp.sparsity_s(), &consts, opts.c_beta);
            let spec = ConfidenceSpec::single(beta, opts.c_beta, delta);
            let ov = optimistic_backup(mdp, &est.core(), &spec);
            let policy = ov.greedy_policy();
            rec.policy_value = oracle::initial_value(mdp, &oracle::evaluate_policy(mdp, &policy)?).as_f64();
            rec.beta = beta;
            rec.bonus_mean = ov.bonus_mean();
            rec.in_region = truth_in_region(&spec, &est.l_hat, &est.s_hat, None, truth.low_rank, truth.sparse, None);
            let audit = audit_backup(mdp, &ov, &optimal, &spec, &consts);
            rec.optimism_gap = Some(audit.optimism_gap);
            rec.bonus_cap_excess = Some(audit.bonus_cap_excess);
            let samples = sample_episode(mdp, &policy, n, rng)?;
            rec.one_step_excess = Some(one_step_excess(mdp, &ov, &samples));
            samples
        };
        rec.per_episode_regret = v_opt - rec.policy_value;
        cumulative += rec.per_episode_regret;
        rec.cumulative_regret = cumulative;
        for smp in &samples {
            data.push_sample(mdp.features(), mdp.n_actions(), smp);
        }
        data.end_episode();
        let refit = fitter.update(&data, n)?;
        let st = fitter.state.as_ref().expect("fitted");
        let err = estimation_error(st, &truth);
        rec.est_err_l = err.err_l.as_f64();
        rec.est_err_s = err.err_s.as_f64();
        rec.lambda_min_design = if refit { st.lambda_min_design.as_f64() } else { design_min_eigenvalue(&data).as_f64() };
        rec.solver_iters = if refit { st.iterations } else { 0 };
        rec.solver_converged = st.converged;
        if refit {
            rec.warnings = st.warnings.clone();
        }
        if opts.keep_history {
            history.push(st.clone());
        }
        records.push(rec);
    }
    if let Some(out) = data_out {
        *out = data;
    }
    Ok(RunTrace {
        records,
        n_warm,
        optimal_value: v_opt,
        final_state: fitter.state.expect("at least one episode"),
        history,
        constants: consts,
    })
}

impl EpisodeRecord {
    fn blank(episode: usize) -> Self {
        Self {
            episode,
            warm: false,
            policy_value: 0.0,
            per_episode_regret: 0.0,
            cumulative_regret: 0.0,
            est_err_l: 0.0,
            est_err_s: 0.0,
            est_err_d: None,
            beta: 0.0,
            bonus_mean: 0.0,
            in_region: false,
            lambda_min_design: 0.0,
            solver_iters: 0,
            solver_converged: true,
            optimism_gap: None,
            one_step_excess: None,
            bonus_cap_excess: None,
            tight_vs_naive_excess: None,
            warnings: vec![],
        }
    }
}

/// Source-phase output: the pilot estimate and the data it was fit on.
#[derive(Debug, Clone)]
pub struct Pilot<T: Real> {
    pub state: EstimatorState<T>,
    pub n0: usize,
    pub beta_n0: f64,
}

/// Collects `n0` source episodes and fits `(L̂, Ŝ(0))` on all of them.
pub fn source_pilot<T: Real>(source: &CompositeMdp<T>, n0: usize, sparsity_s0: usize, opts: &AgentOptions, seed: u64) -> Result<Pilot<T>> {
    let consts = compute_regularity(source)?;
    let (p, q, h_len) = (source.features().p(), source.features().q(), source.horizon());
    let mut rng = run_rng(seed, 1);
    let mut data = RegressionData::new(p, q);
    if n0 > 0 {
        match opts.source {
            SourceData::Ucb => {
                let mut src_opts = opts.clone();
                src_opts.variant = Variant::Single;
                src_opts.keep_history = false;
                run_ucb_q_with(source, n0, &src_opts, opts.source_refit, &mut rng, Some(&mut data))?;
            }
            SourceData::Uniform => {
                let uniform = UniformPolicy {
                    n_actions: source.n_actions(),
                };
                for n in 1..=n0 {
                    for smp in sample_episode(source, &uniform, n, &mut rng)? {
                        data.push_sample(source.features(), source.n_actions(), &smp);
                    }
                    data.end_episode();
                }
            }
        }
    }
    let cons = single_constraints(source, opts, sparsity_s0);
    let state = if n0 == 0 {
        EstimatorState::zeros(p, q)
    } else {
        fit_low_rank_sparse_from(&data, &cons, &opts.solver, None)?
    };
    let beta_n0 = beta_initial(n0, h_len, p.max(q), source.rank_r(), source.sparsity_s(), &consts, opts.c_beta);
    Ok(Pilot { state, n0, beta_n0 })
}

/// UCB-TQL: pilot fit on `n0` source episodes, then `n_episodes` target
/// episodes with online sparse-difference correction.
pub fn run_ucb_tql<T: Real>(
    pair: &TaskPair<T>,
    n0: usize,
    n_episodes: usize,
    opts: &AgentOptions,
    seed: u64,
) -> Result<RunTrace<T>> {
    let s0 = pair.source.sparsity_s().saturating_sub(pair.declared_e);
    let pilot = source_pilot(&pair.source, n0, s0, opts, seed)?;
    run_ucb_tql_from(pair, &pilot, n_episodes, opts, seed)
}

/// Target phase of UCB-TQL from a precomputed pilot.
pub fn run_ucb_tql_from<T: Real>(
    pair: &TaskPair<T>,
    pilot: &Pilot<T>,
    n_episodes: usize,
    opts: &AgentOptions,
    seed: u64,
) -> Result<RunTrace<T>> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("need at least one episode".into()));
    }
    opts.validate()?;
    let variant = match opts.variant {
        Variant::Single => Variant::TransferTight,
        v => v,
    };
    let mdp = &pair.target;
    let consts = compute_regularity(mdp)?;
    let (p, q, h_len) = (mdp.features().p(), mdp.features().q(), mdp.horizon());
    let d = p.max(q);
    let e_cap = opts.cap(pair.declared_e);
    let optimal = oracle::solve_optimal(mdp);
    let v_opt = optimal.initial_value(mdp.initial_dist()).as_f64();
    let delta = default_delta(n_episodes, h_len);
    let l_hat = &pilot.state.l_hat;
    let s0_hat = &pilot.state.s_hat;
    let base = l_hat + s0_hat;
    let mut rng = run_rng(seed, 2);
    let mut data = RegressionData::new(p, q);
    let mut d_hat: DMatrix<T> = DMatrix::zeros(p, q);
    let mut records = Vec::with_capacity(n_episodes);
    let mut history = Vec::new();
    let mut cumulative = 0.0;
    let mut last = EstimatorState {
        d_hat: Some(d_hat.clone()),
        ..pilot.state.clone()
    };
    for n in 1..=n_episodes {
        let mut rec = EpisodeRecord::blank(n);
        let beta_n1 = beta_online(pilot.beta_n0, n, h_len, d, n_episodes, pair.declared_e, &consts, opts.diff_radius_scale);
        let spec = ConfidenceSpec {
            c_beta: opts.c_beta,
            delta,
            beta_n: beta_n1,
            beta_n0: pilot.beta_n0,
            beta_n1,
            variant,
            diff_cap_e: pair.declared_e,
            tight_bonus: opts.tight_bonus,
        };
        let core = &base + &d_hat;
        let ov = optimistic_backup(mdp, &core, &spec);
        let policy = ov.greedy_policy();
        rec.policy_value = oracle::initial_value(mdp, &oracle::evaluate_policy(mdp, &policy)?).as_f64();
        rec.beta = beta_n1;
        rec.bonus_mean = ov.bonus_mean();
        rec.in_region = truth_in_region(
            &spec,
            l_hat,
            s0_hat,
            Some(&d_hat),
            mdp.core_low_rank(),
            mdp.core_sparse(),
            Some(&pair.diff),
        );
        let audit = audit_backup(mdp, &ov, &optimal, &spec, &consts);
        rec.optimism_gap = Some(audit.optimism_gap);
        rec.bonus_cap_excess = Some(audit.bonus_cap_excess);
        rec.tight_vs_naive_excess = audit.tight_vs_naive_excess;
        let samples = sample_episode(mdp, &policy, n, &mut rng)?;
        rec.one_step_excess = Some(one_step_excess(mdp, &ov, &samples));
        rec.per_episode_regret = v_opt - rec.policy_value;
        cumulative += rec.per_episode_regret;
        rec.cumulative_regret = cumulative;
        for smp in &samples {
            data.push_sample(mdp.features(), mdp.n_actions(), smp);
        }
        data.end_episode();
        let warm = opts.warm_start_solver.then_some(&d_hat);
        let fit = fit_sparse_difference_from(&data, &base, e_cap, &opts.solver, warm)?;
        d_hat = fit.d_hat;
        let target_sparse = s0_hat + &d_hat;
        rec.est_err_l = linalg::frobenius_sq(&(l_hat - mdp.core_low_rank())).as_f64();
        rec.est_err_s = linalg::frobenius_sq(&(&target_sparse - mdp.core_sparse())).as_f64();
        rec.est_err_d = Some(linalg::frobenius_sq(&(&d_hat - &pair.diff)).as_f64());
        rec.lambda_min_design = design_min_eigenvalue(&data).as_f64();
        rec.solver_iters = fit.iterations;
        rec.solver_converged = fit.converged;
        rec.warnings = fit.warnings;
        last = EstimatorState {
            l_hat: l_hat.clone(),
            s_hat: s0_hat.clone(),
            d_hat: Some(d_hat.clone()),
            objective: fit.objective,
            iterations: fit.iterations,
            converged: fit.converged,
            lambda_min_design: T::lit(rec.lambda_min_design),
            objective_trace: fit.objective_trace,
            warnings: rec.warnings.clone(),
        };
        if opts.keep_history {
            history.push(last.clone());
        }
        records.push(rec);
    }
    Ok(RunTrace {
        records,
        n_warm: 0,
        optimal_value: v_opt,
        final_state: last,
        history,
        constants: consts,
    })
}
