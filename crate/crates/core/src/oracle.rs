//! Exact dynamic programming on the true kernel: optimal values, policy
//! evaluation and per-episode regret. Step indices are zero-based, so
//! `v[(h, s)]` is the value with `H − h` steps to go and row `H` is zero.

use crate::error::{Error, Result};
use crate::mdp::{CompositeMdp, GreedyPolicy};
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables<T: Real> {
    /// `(H+1) × |S|`
    pub v_star: DMatrix<T>,
    /// `H` tables of size `|S| × |A|`
    pub q_star: Vec<DMatrix<T>>,
}

impl<T: Real> ValueTables<T> {
    pub fn horizon(&self) -> usize {
        self.q_star.len()
    }

    /// Greedy policy of the optimal `Q`, lowest action index on ties.
    pub fn greedy_policy(&self) -> GreedyPolicy {
        greedy_from_q(&self.q_star)
    }

    /// `E_μ[V*_1]`.
    pub fn initial_value(&self, mu: &DVector<T>) -> T {
        self.v_star.row(0).transpose().dot(mu)
    }
}

/// Greedy nonstationary policy of a stack of `Q` tables; ties go to the
/// lowest action index.
pub fn greedy_from_q<T: Real>(q: &[DMatrix<T>]) -> GreedyPolicy {
    let n_states = q.first().map_or(0, |m| m.nrows());
    let mut pol = GreedyPolicy::new(q.len(), n_states, 0);
    for (h, qh) in q.iter().enumerate() {
        for s in 0..n_states {
            pol.set(h, s, argmax_row(qh, s));
        }
    }
    pol
}

pub(crate) fn argmax_row<T: Real>(q: &DMatrix<T>, s: usize) -> usize {
    let mut best = 0;
    for a in 1..q.ncols() {
        if q[(s, a)] > q[(s, best)] {
            best = a;
        }
    }
    best
}

pub fn solve_optimal<T: Real>(mdp: &CompositeMdp<T>) -> ValueTables<T> {
    let (ns, na, h_len) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut v = DMatrix::zeros(h_len + 1, ns);
    let mut q = vec![DMatrix::zeros(ns, na); h_len];
    for h in (0..h_len).rev() {
        let next: Vec<T> = v.row(h + 1).iter().copied().collect();
        for s in 0..ns {
            let mut best = T::min_value().unwrap_or_else(|| -T::one());
            for a in 0..na {
                let val = mdp.reward_at(s, a) + mdp.expected_next(s, a, &next);
                q[h][(s, a)] = val;
                if a == 0 || val > best {
                    best = val;
                }
            }
            v[(h, s)] = best;
        }
    }
    ValueTables { v_star: v, q_star: q }
}

/// Values of a policy given as per-step action distributions: `weights[h]`
/// is `|S| × |A|` with rows summing to one.
pub fn evaluate_randomized<T: Real>(mdp: &CompositeMdp<T>, weights: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    let (ns, na, h_len) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    if weights.len() != h_len {
        return Err(Error::DimensionMismatch {
            what: "policy horizon",
            expected: h_len,
            actual: weights.len(),
        });
    }
    let mut v = DMatrix::zeros(h_len + 1, ns);
    for h in (0..h_len).rev() {
        if weights[h].shape() != (ns, na) {
            return Err(Error::DimensionMismatch {
                what: "policy table",
                expected: ns * na,
                actual: weights[h].len(),
            });
        }
        let next: Vec<T> = v.row(h + 1).iter().copied().collect();
        for s in 0..ns {
            let mut acc = T::zero();
            for a in 0..na {
                let w = weights[h][(s, a)];
                if w != T::zero() {
                    acc += w * (mdp.reward_at(s, a) + mdp.expected_next(s, a, &next));
                }
            }
            v[(h, s)] = acc;
        }
    }
    Ok(v)
}

/// `(H+1) × |S|` value table of a deterministic nonstationary policy.
pub fn evaluate_policy<T: Real>(mdp: &CompositeMdp<T>, policy: &GreedyPolicy) -> Result<DMatrix<T>> {
    let (ns, na, h_len) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    if policy.n_states != ns || policy.actions.len() != h_len * ns {
        return Err(Error::DimensionMismatch {
            what: "policy table",
            expected: h_len * ns,
            actual: policy.actions.len(),
        });
    }
    let mut v = DMatrix::zeros(h_len + 1, ns);
    for h in (0..h_len).rev() {
        let next: Vec<T> = v.row(h + 1).iter().copied().collect();
        for s in 0..ns {
            let a = policy.action(h, s);
            if a >= na {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    limit: na,
                });
            }
            v[(h, s)] = mdp.reward_at(s, a) + mdp.expected_next(s, a, &next);
        }
    }
    Ok(v)
}

/// `E_μ[V^π_1]` from a value table.
pub fn initial_value<T: Real>(mdp: &CompositeMdp<T>, v: &DMatrix<T>) -> T {
    v.row(0).transpose().dot(mdp.initial_dist())
}

/// The uniform-random policy as per-step action distributions.
pub fn uniform_weights<T: Real>(mdp: &CompositeMdp<T>) -> Vec<DMatrix<T>> {
    let w = T::one() / T::from_usize(mdp.n_actions()).unwrap();
    vec![DMatrix::from_element(mdp.n_states(), mdp.n_actions(), w); mdp.horizon()]
}

/// `E_μ[V*_1] − E_μ[V^π_1]`.
pub fn episode_regret<T: Real>(mdp: &CompositeMdp<T>, optimal: &ValueTables<T>, policy: &GreedyPolicy) -> Result<T> {
    let v = evaluate_policy(mdp, policy)?;
    Ok(optimal.initial_value(mdp.initial_dist()) - initial_value(mdp, &v))
}

/// One row of a regret trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretEntry<T> {
    pub episode: usize,
    pub policy_value: T,
    pub regret: T,
    pub cumulative: T,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretTrace<T: Real> {
    pub per_episode: Vec<RegretEntry<T>>,
}

impl<T: Real> RegretTrace<T> {
    pub fn push(&mut self, episode: usize, optimal_value: T, policy_value: T) {
        let regret = optimal_value - policy_value;
        let cumulative = self.total() + regret;
        self.per_episode.push(RegretEntry {
            episode,
            policy_value,
            regret,
            cumulative,
        });
    }

    pub fn total(&self) -> T {
        self.per_episode.last().map_or(T::zero(), |e| e.cumulative)
    }

    pub fn len(&self) -> usize {
        self.per_episode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_episode.is_empty()
    }
}

/// Number of deterministic nonstationary policies, `(|A|^|S|)^H`, or
/// `None` on overflow.
pub fn policy_count(n_states: usize, n_actions: usize, horizon: usize) -> Option<u64> {
    let per_step = (n_actions as u64).checked_pow(n_states as u32)?;
    per_step.checked_pow(horizon as u32)
}

/// Best `E_μ[V^π_1]` over every deterministic nonstationary policy,
/// with the maximising policy. Refuses instances above `limit` policies.
pub fn enumerate_best<T: Real>(mdp: &CompositeMdp<T>, limit: u64) -> Result<(T, GreedyPolicy)> {
    let (ns, na, h_len) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let count = policy_count(ns, na, h_len).filter(|c| *c <= limit).ok_or_else(|| {
        Error::InvalidConfig(format!("more than {limit} policies to enumerate"))
    })?;
    let mut pol = GreedyPolicy::new(h_len, ns, 0);
    let mut best: Option<(T, GreedyPolicy)> = None;
    for code in 0..count {
        let mut c = code;
        for slot in pol.actions.iter_mut() {
            *slot = (c % na as u64) as usize;
            c /= na as u64;
        }
        let v = initial_value(mdp, &evaluate_policy(mdp, &pol)?);
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, pol.clone()));
        }
    }
    Ok(best.expect("at least one policy"))
}
