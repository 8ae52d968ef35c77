//! Synthetic composite MDPs and source/target task pairs.
//!
//! Low-rank cores are Dirichlet mixtures of `r` shared base distributions,
//! so every row of `L*` is already a probability vector. Sparse parts are
//! sums of zero-row-sum mass transfers (`-δ` on one entry, `+δ` on another
//! entry of the same row), which keeps every kernel row stochastic by
//! construction. Incoherence is enforced by rejection sampling.

use crate::error::{Error, Result};
use crate::estimation::{design_min_eigenvalue, RegressionData};
use crate::linalg::{self, Incoherence};
use crate::mdp::{sample_episode, CompositeMdp, FeatureTables, KpsiPolicy, MdpParts, UniformPolicy};
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

/// Maximum number of redraws when searching for an incoherent core.
pub const INCOHERENCE_RETRY_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    #[default]
    CanonicalOneHot,
    FeatureTransform,
}

fn default_c_s() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub rank_r: usize,
    pub sparsity_s: usize,
    #[serde(default)]
    pub diff_sparsity_e: usize,
    pub incoherence_budget_mu: f64,
    /// Mass `δ` moved by each sparse transfer pair.
    pub perturb_magnitude: f64,
    #[serde(default)]
    pub mode: FeatureMode,
    #[serde(default = "default_c_s")]
    pub c_s_constant: f64,
    pub seed: u64,
    /// Allow the support of `D*` to overlap the support of `S*(0)`.
    #[serde(default)]
    pub allow_overlap: bool,
    /// Concentration of the symmetric Dirichlet for base distributions.
    #[serde(default = "default_alpha")]
    pub base_concentration: f64,
    /// Concentration of the symmetric Dirichlet for mixture weights.
    #[serde(default = "default_alpha")]
    pub mixture_concentration: f64,
}

impl GenConfig {
    /// Reference shape used throughout the tests: `|S| = 6`, `|A| = 3`,
    /// `H = 5`, `r = 2`, `s = 6`.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_states: 6,
            n_actions: 3,
            horizon: 5,
            rank_r: 2,
            sparsity_s: 6,
            diff_sparsity_e: 0,
            incoherence_budget_mu: 4.0,
            perturb_magnitude: 0.1,
            mode: FeatureMode::CanonicalOneHot,
            c_s_constant: 1.0,
            seed,
            allow_overlap: false,
            base_concentration: 1.0,
            mixture_concentration: 1.0,
        }
    }

    pub fn p(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn q(&self) -> usize {
        self.n_states
    }

    /// `s̄ = max{p,q} / (4·C_S·μ·r³)` with `μ` the incoherence budget.
    pub fn sufficient_sparsity_bound(&self) -> f64 {
        let d = self.p().max(self.q()) as f64;
        d / (4.0 * self.c_s_constant * self.incoherence_budget_mu * (self.rank_r as f64).powi(3))
    }

    pub fn sufficient_sparsity_ratio(&self) -> f64 {
        self.sparsity_s as f64 / self.sufficient_sparsity_bound()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_states == 0 || self.n_actions == 0 || self.horizon == 0 {
            return bad("|S|, |A| and H must be positive");
        }
        if self.rank_r == 0 || self.rank_r > self.p().min(self.q()) {
            return bad("rank_r must lie in [1, min(p, q)]");
        }
        if self.diff_sparsity_e > self.sparsity_s {
            return bad("diff_sparsity_e must not exceed sparsity_s");
        }
        if self.diff_sparsity_e % 2 != 0 || (self.sparsity_s - self.diff_sparsity_e) % 2 != 0 {
            return bad("sparse parts are built from transfer pairs: s - e and e must be even");
        }
        if !(self.perturb_magnitude > 0.0 && self.perturb_magnitude < 0.5) {
            return bad("perturb_magnitude must lie in (0, 0.5)");
        }
        if !(self.incoherence_budget_mu >= 1.0) {
            return bad("incoherence budget must be at least 1");
        }
        if !(self.c_s_constant > 0.0 && self.base_concentration > 0.0 && self.mixture_concentration > 0.0) {
            return bad("constants and concentrations must be positive");
        }
        Ok(())
    }

    fn check_sparsity_bound(&self, override_assumptions: bool) -> Result<()> {
        let ratio = self.sufficient_sparsity_ratio();
        if ratio > 1.0 {
            if !override_assumptions {
                return Err(Error::AssumptionViolation {
                    sparsity: self.sparsity_s,
                    bound: self.sufficient_sparsity_bound(),
                    ratio,
                });
            }
            log::warn!(
                "sufficient-sparsity bound violated (s = {}, bound {:.3}); proceeding under override",
                self.sparsity_s,
                self.sufficient_sparsity_bound()
            );
        }
        Ok(())
    }
}

/// Source and target tasks sharing `L*`, with `S*(1) = S*(0) + D*`.
#[derive(Debug, Clone)]
pub struct TaskPair<T: Real> {
    pub source: CompositeMdp<T>,
    pub target: CompositeMdp<T>,
    pub diff: DMatrix<T>,
    pub declared_e: usize,
}

fn dirichlet(alpha: f64, k: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// `L = W·B` for mixture weights `W` (p×r, rows on the simplex) and base
/// distributions `B` (r×q, rows on the simplex).
pub fn low_rank_from_mixture<T: Real>(weights: &DMatrix<T>, bases: &DMatrix<T>) -> DMatrix<T> {
    weights * bases
}

/// Draws an incoherent rank-`r` stochastic core, redrawing up to
/// [`INCOHERENCE_RETRY_CAP`] times.
pub fn generate_low_rank_core<T: Real>(cfg: &GenConfig, rng: &mut dyn RngCore) -> Result<DMatrix<T>> {
    let (p, q, r) = (cfg.p(), cfg.q(), cfg.rank_r);
    if r == 0 || r > p.min(q) {
        return Err(Error::InvalidConfig(format!("rank {r} incompatible with {p}×{q} core")));
    }
    let mut best = f64::INFINITY;
    for _ in 0..INCOHERENCE_RETRY_CAP {
        let mut bases = DMatrix::<T>::zeros(r, q);
        for k in 0..r {
            for (j, v) in dirichlet(cfg.base_concentration, q, rng).into_iter().enumerate() {
                bases[(k, j)] = T::lit(v);
            }
        }
        let mut weights = DMatrix::<T>::zeros(p, r);
        for i in 0..p {
            let w = if r == 1 {
                vec![1.0]
            } else {
                dirichlet(cfg.mixture_concentration, r, rng)
            };
            for (k, v) in w.into_iter().enumerate() {
                weights[(i, k)] = T::lit(v);
            }
        }
        let l = low_rank_from_mixture(&weights, &bases);
        let mu = linalg::measure_incoherence(&l, r).mu().as_f64();
        if mu <= cfg.incoherence_budget_mu {
            return Ok(l);
        }
        best = best.min(mu);
    }
    Err(Error::IncoherenceBudgetUnreachable {
        budget: cfg.incoherence_budget_mu,
        attempts: INCOHERENCE_RETRY_CAP,
        best,
    })
}

/// Builds `k/2` disjoint mass-transfer pairs on top of `base`. Entries in
/// `forbidden` (row-major mask) are never touched.
pub fn generate_sparse_perturbation<T: Real>(
    base: &DMatrix<T>,
    k: usize,
    delta: T,
    forbidden: Option<&[bool]>,
    rng: &mut dyn RngCore,
) -> Result<DMatrix<T>> {
    if k % 2 != 0 {
        return Err(Error::InvalidConfig(format!("sparse perturbation needs an even count, got {k}")));
    }
    let (p, q) = base.shape();
    let mut used = vec![false; p * q];
    if let Some(f) = forbidden {
        for (u, &b) in used.iter_mut().zip(f) {
            *u = b;
        }
    }
    let mut s = DMatrix::<T>::zeros(p, q);
    for pair in 0..k / 2 {
        // donor entries must hold at least δ; receivers must stay ≤ 1
        let receivers_in = |i: usize, used: &[bool], skip: usize| -> Vec<usize> {
            (0..q)
                .filter(|&j| j != skip && !used[i * q + j] && base[(i, j)] + delta <= T::one())
                .collect()
        };
        let donors: Vec<(usize, usize)> = (0..p)
            .flat_map(|i| (0..q).map(move |j| (i, j)))
            .filter(|&(i, j)| !used[i * q + j] && base[(i, j)] >= delta && !receivers_in(i, &used, j).is_empty())
            .collect();
        if donors.is_empty() {
            return Err(Error::InfeasiblePerturbation(format!(
                "no entry ≥ {delta} with a free partner remains for pair {}",
                pair + 1
            )));
        }
        let (i, j_minus) = donors[rng.random_range(0..donors.len())];
        let receivers = receivers_in(i, &used, j_minus);
        let j_plus = receivers[rng.random_range(0..receivers.len())];
        s[(i, j_minus)] = -delta;
        s[(i, j_plus)] = delta;
        used[i * q + j_minus] = true;
        used[i * q + j_plus] = true;
    }
    Ok(s)
}

fn support_mask<T: Real>(m: &DMatrix<T>) -> Vec<bool> {
    let (p, q) = m.shape();
    let mut mask = vec![false; p * q];
    for i in 0..p {
        for j in 0..q {
            mask[i * q + j] = m[(i, j)] != T::zero();
        }
    }
    mask
}

/// Signed permutation for `φ` and a permuted diagonal scaling (condition
/// number ≤ 10) for `ψ`. Both are monomial, so sparsity patterns survive.
struct FeatureTransform<T: Real> {
    phi_map: DMatrix<T>,
    psi_map: DMatrix<T>,
    psi_map_inv: DMatrix<T>,
}

fn random_permutation(n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

fn draw_transform<T: Real>(p: usize, q: usize, rng: &mut dyn RngCore) -> FeatureTransform<T> {
    let mut phi_map = DMatrix::<T>::zeros(p, p);
    for (i, j) in random_permutation(p, rng).into_iter().enumerate() {
        let sign = if rng.random::<bool>() { T::one() } else { -T::one() };
        phi_map[(i, j)] = sign;
    }
    let mut psi_map = DMatrix::<T>::zeros(q, q);
    let mut psi_map_inv = DMatrix::<T>::zeros(q, q);
    for (i, j) in random_permutation(q, rng).into_iter().enumerate() {
        let scale = 10f64.powf(rng.random::<f64>());
        psi_map[(i, j)] = T::lit(scale);
        psi_map_inv[(j, i)] = T::lit(1.0 / scale);
    }
    FeatureTransform {
        phi_map,
        psi_map,
        psi_map_inv,
    }
}

struct Blueprint<T: Real> {
    low_rank: DMatrix<T>,
    sparse: DMatrix<T>,
    reward: DVector<T>,
    initial_dist: DVector<T>,
}

fn assemble<T: Real>(
    cfg: &GenConfig,
    bp: &Blueprint<T>,
    sparse: &DMatrix<T>,
    transform: Option<&FeatureTransform<T>>,
) -> Result<CompositeMdp<T>> {
    let (n_s, n_a) = (cfg.n_states, cfg.n_actions);
    let (features, low_rank, sparse) = match transform {
        None => (FeatureTables::canonical(n_s, n_a), bp.low_rank.clone(), sparse.clone()),
        Some(t) => {
            let phi = DMatrix::<T>::identity(n_s * n_a, n_s * n_a) * t.phi_map.transpose();
            let psi = DMatrix::<T>::identity(n_s, n_s) * t.psi_map.transpose();
            let features = FeatureTables::new(phi, psi, KpsiPolicy::default())?;
            let map = |m: &DMatrix<T>| &t.phi_map * m * &t.psi_map_inv;
            (features, map(&bp.low_rank), map(sparse))
        }
    };
    let measured = linalg::measure_incoherence(&low_rank, cfg.rank_r).mu();
    CompositeMdp::new(MdpParts {
        n_states: n_s,
        n_actions: n_a,
        horizon: cfg.horizon,
        features,
        core_low_rank: low_rank,
        core_sparse: sparse,
        reward: bp.reward.clone(),
        initial_dist: bp.initial_dist.clone(),
        rank_r: cfg.rank_r,
        sparsity_s: cfg.sparsity_s,
        incoherence_mu: measured,
    })
}

fn draw_rewards<T: Real>(cfg: &GenConfig, rng: &mut dyn RngCore) -> DVector<T> {
    DVector::from_fn(cfg.p(), |_, _| T::lit(rng.random::<f64>()))
}

/// Single composite MDP with `‖S*‖₀ = s`.
pub fn generate_mdp<T: Real>(cfg: &GenConfig, override_assumptions: bool) -> Result<CompositeMdp<T>> {
    cfg.validate()?;
    if cfg.sparsity_s % 2 != 0 {
        return Err(Error::InvalidConfig("sparsity_s must be even".into()));
    }
    cfg.check_sparsity_bound(override_assumptions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let low_rank = generate_low_rank_core::<T>(cfg, &mut rng)?;
    let delta = T::lit(cfg.perturb_magnitude);
    let sparse = generate_sparse_perturbation(&low_rank, cfg.sparsity_s, delta, None, &mut rng)?;
    let bp = Blueprint {
        reward: draw_rewards(cfg, &mut rng),
        initial_dist: DVector::from_element(cfg.n_states, T::one() / T::from_usize(cfg.n_states).unwrap()),
        low_rank,
        sparse,
    };
    let transform = match cfg.mode {
        FeatureMode::CanonicalOneHot => None,
        FeatureMode::FeatureTransform => Some(draw_transform::<T>(cfg.p(), cfg.q(), &mut rng)),
    };
    assemble(cfg, &bp, &bp.sparse, transform.as_ref())
}

/// Source/target pair with `‖S*(0)‖₀ = s − e`, `‖D*‖₀ = e` and
/// `‖S*(1)‖₀ = s` (disjoint supports unless `allow_overlap`).
pub fn generate_task_pair<T: Real>(cfg: &GenConfig, override_assumptions: bool) -> Result<TaskPair<T>> {
    cfg.validate()?;
    cfg.check_sparsity_bound(override_assumptions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let low_rank = generate_low_rank_core::<T>(cfg, &mut rng)?;
    let delta = T::lit(cfg.perturb_magnitude);
    let e = cfg.diff_sparsity_e;
    let s0 = generate_sparse_perturbation(&low_rank, cfg.sparsity_s - e, delta, None, &mut rng)?;
    let mask = if cfg.allow_overlap { None } else { Some(support_mask(&s0)) };
    let diff = generate_sparse_perturbation(&(&low_rank + &s0), e, delta, mask.as_deref(), &mut rng)?;
    let s1 = &s0 + &diff;
    let bp = Blueprint {
        reward: draw_rewards(cfg, &mut rng),
        initial_dist: DVector::from_element(cfg.n_states, T::one() / T::from_usize(cfg.n_states).unwrap()),
        low_rank,
        sparse: s0,
    };
    let transform = match cfg.mode {
        FeatureMode::CanonicalOneHot => None,
        FeatureMode::FeatureTransform => Some(draw_transform::<T>(cfg.p(), cfg.q(), &mut rng)),
    };
    let source = assemble(cfg, &bp, &bp.sparse, transform.as_ref())?;
    let target = assemble(cfg, &bp, &s1, transform.as_ref())?;
    let diff = match &transform {
        None => diff,
        Some(t) => &t.phi_map * diff * &t.psi_map_inv,
    };
    Ok(TaskPair {
        source,
        target,
        diff,
        declared_e: e,
    })
}

/// `‖Δ‖²_max / ‖Δ‖²_F` for `Δ = a − b`; `None` when `Δ = 0`.
pub fn separation_ratio<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Option<T> {
    let delta = a - b;
    let fro = linalg::frobenius_sq(&delta);
    if fro == T::zero() {
        return None;
    }
    let mx = linalg::max_abs(&delta);
    Some(mx * mx / fro)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationReport {
    pub pairs: usize,
    /// Largest observed `‖Δ‖²_max/‖Δ‖²_F`; `None` when every difference vanished.
    pub max_ratio: Option<f64>,
    /// `μ·r⁴/max{p,q}`, the shape of the separation bound.
    pub bound_shape: f64,
    /// Smallest constant `c` with `max_ratio ≤ c·μ·r⁴/max{p,q}` on this batch.
    pub calibrated_c: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub p: usize,
    pub q: usize,
    pub measured_mu_left: f64,
    pub measured_mu_right: f64,
    pub measured_mu: f64,
    pub rank: usize,
    pub sparsity_source: usize,
    pub sparsity_target: Option<usize>,
    pub diff_sparsity: Option<usize>,
    pub shared_low_rank: Option<bool>,
    pub sufficient_sparsity_bound: f64,
    pub sufficient_sparsity_ratio: f64,
    pub separation: SeparationReport,
    pub probe_episodes: usize,
    pub probe_lambda_min: f64,
    pub warnings: Vec<String>,
}

/// What [`check_assumptions`] inspects.
pub enum Subject<'a, T: Real> {
    Mdp(&'a CompositeMdp<T>),
    Pair(&'a TaskPair<T>),
}

/// Diagnostic report on the structural assumptions; never fails on a
/// violated assumption, it only records it.
pub fn check_assumptions<T: Real>(
    subject: Subject<'_, T>,
    cfg: &GenConfig,
    separation_pairs: usize,
    probe_episodes: usize,
) -> Result<AssumptionReport> {
    let mdp = match &subject {
        Subject::Mdp(m) => *m,
        Subject::Pair(pair) => &pair.source,
    };
    let f = mdp.features();
    let (p, q) = (f.p(), f.q());
    let r = mdp.rank_r();
    let inc: Incoherence<T> = linalg::measure_incoherence(mdp.core_low_rank(), r);
    let mu = inc.mu().as_f64();
    let rank = linalg::numerical_rank(mdp.core_low_rank(), T::lit(1e-8));
    let sparsity_source = linalg::count_nonzeros(mdp.core_sparse());
    let (sparsity_target, diff_sparsity, shared) = match &subject {
        Subject::Mdp(_) => (None, None, None),
        Subject::Pair(pair) => (
            Some(linalg::count_nonzeros(pair.target.core_sparse())),
            Some(linalg::count_nonzeros(&pair.diff)),
            Some(pair.source.core_low_rank() == pair.target.core_low_rank()),
        ),
    };
    let s_total = sparsity_target.unwrap_or(sparsity_source).max(sparsity_source);
    let d = p.max(q) as f64;
    let bound = d / (4.0 * cfg.c_s_constant * mu * (r as f64).powi(3));
    let ratio = s_total as f64 / bound;
    let mut warnings = Vec::new();
    if ratio > 1.0 {
        warnings.push(format!(
            "sufficient-sparsity bound violated: s = {s_total} > {bound:.3} (ratio {ratio:.3})"
        ));
    }
    if mu > cfg.incoherence_budget_mu * (1.0 + 1e-9) {
        warnings.push(format!("measured incoherence {mu:.3} exceeds budget {}", cfg.incoherence_budget_mu));
    }

    // separation ratio over a batch of independent incoherent cores
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EA7_A710);
    let mut max_ratio: Option<f64> = None;
    for _ in 0..separation_pairs {
        let a = generate_low_rank_core::<T>(cfg, &mut rng)?;
        let b = generate_low_rank_core::<T>(cfg, &mut rng)?;
        if let Some(rt) = separation_ratio(&a, &b) {
            let rt = rt.as_f64();
            max_ratio = Some(max_ratio.map_or(rt, |m| m.max(rt)));
        }
    }
    let bound_shape = cfg.incoherence_budget_mu * (cfg.rank_r as f64).powi(4) / (cfg.p().max(cfg.q()) as f64);
    let separation = SeparationReport {
        pairs: separation_pairs,
        max_ratio,
        bound_shape,
        calibrated_c: max_ratio.map(|m| m / bound_shape),
    };

    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9A0B_E000);
    let mut data = RegressionData::<T>::new(p, q);
    let uniform = UniformPolicy {
        n_actions: mdp.n_actions(),
    };
    for ep in 0..probe_episodes {
        for sample in sample_episode(mdp, &uniform, ep, &mut probe_rng)? {
            data.push_sample(f, mdp.n_actions(), &sample);
        }
        data.end_episode();
    }
    let probe_lambda_min = if probe_episodes > 0 {
        design_min_eigenvalue(&data).as_f64()
    } else {
        0.0
    };
    if probe_episodes > 0 && probe_lambda_min <= 0.0 {
        warnings.push(format!(
            "probe design after {probe_episodes} uniform episodes is rank deficient (λ_min = 0)"
        ));
    }

    Ok(AssumptionReport {
        p,
        q,
        measured_mu_left: inc.left.as_f64(),
        measured_mu_right: inc.right.as_f64(),
        measured_mu: mu,
        rank,
        sparsity_source,
        sparsity_target,
        diff_sparsity,
        shared_low_rank: shared,
        sufficient_sparsity_bound: bound,
        sufficient_sparsity_ratio: ratio,
        separation,
        probe_episodes,
        probe_lambda_min,
        warnings,
    })
}
