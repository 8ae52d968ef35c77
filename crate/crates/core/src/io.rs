//! Versioned JSON documents: instances (`composite-mdp/v1`), task pairs
//! (`task-pair/v1`), estimator states (`estimator/v1`) and value tables
//! (`values/v1`).
//!
//! Dense matrices are stored as `{rows, cols, data}` with `data` in
//! row-major order; sparse matrices as `(row, col, value)` triplets in
//! row-major order. Numbers are written in shortest round-trip form, so a
//! load followed by a save reproduces the file byte for byte.

use crate::error::{Error, Result};
use crate::estimation::EstimatorState;
use crate::instance_gen::TaskPair;
use crate::mdp::{CompositeMdp, FeatureTables, KpsiPolicy, MdpParts};
use crate::oracle::ValueTables;
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MDP_SCHEMA: &str = "composite-mdp/v1";
pub const PAIR_SCHEMA: &str = "task-pair/v1";
pub const ESTIMATOR_SCHEMA: &str = "estimator/v1";
pub const VALUES_SCHEMA: &str = "values/v1";

/// Free-form string-keyed annotations, kept in sorted key order.
pub type Metadata = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseDoc {
    pub fn from_matrix<T: Real>(m: &DMatrix<T>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)].as_f64());
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix<T: Real>(&self, what: &'static str) -> Result<DMatrix<T>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.rows * self.cols,
                actual: self.data.len(),
            });
        }
        Ok(DMatrix::from_row_iterator(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| T::lit(x)),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Nonzero entries in row-major order.
pub fn to_triplets<T: Real>(m: &DMatrix<T>) -> Vec<Triplet> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if v != T::zero() {
                out.push(Triplet {
                    row: i,
                    col: j,
                    value: v.as_f64(),
                });
            }
        }
    }
    out
}

pub fn from_triplets<T: Real>(rows: usize, cols: usize, entries: &[Triplet], what: &'static str) -> Result<DMatrix<T>> {
    let mut m = DMatrix::zeros(rows, cols);
    for t in entries {
        if t.row >= rows || t.col >= cols {
            return Err(Error::IndexOutOfRange {
                what,
                index: t.row * cols + t.col,
                limit: rows * cols,
            });
        }
        m[(t.row, t.col)] = T::lit(t.value);
    }
    Ok(m)
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Schema {
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

fn vec_f64<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn dvec<T: Real>(v: &[f64]) -> DVector<T> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| T::lit(x)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDoc {
    pub schema: String,
    #[serde(default)]
    pub metadata: Metadata,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub p: usize,
    pub q: usize,
    pub phi: DenseDoc,
    pub psi: DenseDoc,
    pub ridge_used: f64,
    pub core_low_rank: DenseDoc,
    pub core_sparse: Vec<Triplet>,
    pub reward: Vec<f64>,
    pub initial_dist: Vec<f64>,
    pub rank_r: usize,
    pub sparsity_s: usize,
    pub incoherence_mu: f64,
}

impl MdpDoc {
    pub fn from_mdp<T: Real>(mdp: &CompositeMdp<T>, metadata: Metadata) -> Self {
        let f = mdp.features();
        Self {
            schema: MDP_SCHEMA.into(),
            metadata,
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            horizon: mdp.horizon(),
            p: f.p(),
            q: f.q(),
            phi: DenseDoc::from_matrix(f.phi()),
            psi: DenseDoc::from_matrix(f.psi()),
            ridge_used: f.ridge_used().as_f64(),
            core_low_rank: DenseDoc::from_matrix(mdp.core_low_rank()),
            core_sparse: to_triplets(mdp.core_sparse()),
            reward: vec_f64(mdp.reward()),
            initial_dist: vec_f64(mdp.initial_dist()),
            rank_r: mdp.rank_r(),
            sparsity_s: mdp.sparsity_s(),
            incoherence_mu: mdp.incoherence_mu().as_f64(),
        }
    }

    /// Rebuilds and validates the instance.
    pub fn to_mdp<T: Real>(&self) -> Result<CompositeMdp<T>> {
        check_schema(&self.schema, MDP_SCHEMA)?;
        let features = FeatureTables::new(self.phi.to_matrix("phi")?, self.psi.to_matrix("psi")?, KpsiPolicy::default())?;
        if features.p() != self.p || features.q() != self.q {
            return Err(Error::DimensionMismatch {
                what: "feature dimensions",
                expected: self.p * self.q,
                actual: features.p() * features.q(),
            });
        }
        CompositeMdp::new(MdpParts {
            n_states: self.n_states,
            n_actions: self.n_actions,
            horizon: self.horizon,
            features,
            core_low_rank: self.core_low_rank.to_matrix("core_low_rank")?,
            core_sparse: from_triplets(self.p, self.q, &self.core_sparse, "core_sparse")?,
            reward: dvec(&self.reward),
            initial_dist: dvec(&self.initial_dist),
            rank_r: self.rank_r,
            sparsity_s: self.sparsity_s,
            incoherence_mu: T::lit(self.incoherence_mu),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDoc {
    pub schema: String,
    #[serde(default)]
    pub metadata: Metadata,
    pub declared_e: usize,
    pub diff: Vec<Triplet>,
    pub source: MdpDoc,
    pub target: MdpDoc,
}

impl PairDoc {
    pub fn from_pair<T: Real>(pair: &TaskPair<T>, metadata: Metadata) -> Self {
        let role = |r: &str| {
            let mut m = Metadata::new();
            m.insert("role".into(), r.into());
            m
        };
        Self {
            schema: PAIR_SCHEMA.into(),
            metadata,
            declared_e: pair.declared_e,
            diff: to_triplets(&pair.diff),
            source: MdpDoc::from_mdp(&pair.source, role("source")),
            target: MdpDoc::from_mdp(&pair.target, role("target")),
        }
    }

    pub fn to_pair<T: Real>(&self) -> Result<TaskPair<T>> {
        check_schema(&self.schema, PAIR_SCHEMA)?;
        let source = self.source.to_mdp::<T>()?;
        let target = self.target.to_mdp::<T>()?;
        if source.core_low_rank() != target.core_low_rank() {
            return Err(Error::InvalidConfig("source and target low-rank cores differ".into()));
        }
        let diff = from_triplets(self.target.p, self.target.q, &self.diff, "diff")?;
        Ok(TaskPair {
            source,
            target,
            diff,
            declared_e: self.declared_e,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDoc {
    pub schema: String,
    #[serde(default)]
    pub metadata: Metadata,
    pub l_hat: DenseDoc,
    pub s_hat: Vec<Triplet>,
    pub d_hat: Option<Vec<Triplet>>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_min_design: f64,
    pub objective_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl EstimatorDoc {
    pub fn from_state<T: Real>(st: &EstimatorState<T>, metadata: Metadata) -> Self {
        Self {
            schema: ESTIMATOR_SCHEMA.into(),
            metadata,
            l_hat: DenseDoc::from_matrix(&st.l_hat),
            s_hat: to_triplets(&st.s_hat),
            d_hat: st.d_hat.as_ref().map(to_triplets),
            objective: st.objective.as_f64(),
            iterations: st.iterations,
            converged: st.converged,
            lambda_min_design: st.lambda_min_design.as_f64(),
            objective_trace: st.objective_trace.iter().map(|x| x.as_f64()).collect(),
            warnings: st.warnings.clone(),
        }
    }

    pub fn to_state<T: Real>(&self) -> Result<EstimatorState<T>> {
        check_schema(&self.schema, ESTIMATOR_SCHEMA)?;
        let (p, q) = (self.l_hat.rows, self.l_hat.cols);
        Ok(EstimatorState {
            l_hat: self.l_hat.to_matrix("l_hat")?,
            s_hat: from_triplets(p, q, &self.s_hat, "s_hat")?,
            d_hat: self
                .d_hat
                .as_ref()
                .map(|d| from_triplets(p, q, d, "d_hat"))
                .transpose()?,
            objective: T::lit(self.objective),
            iterations: self.iterations,
            converged: self.converged,
            lambda_min_design: T::lit(self.lambda_min_design),
            objective_trace: self.objective_trace.iter().map(|&x| T::lit(x)).collect(),
            warnings: self.warnings.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuesDoc {
    pub schema: String,
    #[serde(default)]
    pub metadata: Metadata,
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// `(H+1) × |S|`.
    pub v_star: DenseDoc,
    /// One `|S| × |A|` table per step.
    pub q_star: Vec<DenseDoc>,
}

impl ValuesDoc {
    pub fn from_tables<T: Real>(vt: &ValueTables<T>, metadata: Metadata) -> Self {
        Self {
            schema: VALUES_SCHEMA.into(),
            metadata,
            horizon: vt.horizon(),
            n_states: vt.v_star.ncols(),
            n_actions: vt.q_star.first().map_or(0, |q| q.ncols()),
            v_star: DenseDoc::from_matrix(&vt.v_star),
            q_star: vt.q_star.iter().map(DenseDoc::from_matrix).collect(),
        }
    }

    pub fn to_tables<T: Real>(&self) -> Result<ValueTables<T>> {
        check_schema(&self.schema, VALUES_SCHEMA)?;
        Ok(ValueTables {
            v_star: self.v_star.to_matrix("v_star")?,
            q_star: self
                .q_star
                .iter()
                .map(|q| q.to_matrix("q_star"))
                .collect::<Result<_>>()?,
        })
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_string<D: Serialize>(doc: &D) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<D: Serialize>(path: &Path, doc: &D) -> Result<()> {
    std::fs::write(path, to_json_string(doc)?)?;
    Ok(())
}

pub fn load_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_mdp<T: Real>(path: &Path, mdp: &CompositeMdp<T>, metadata: Metadata) -> Result<()> {
    save_json(path, &MdpDoc::from_mdp(mdp, metadata))
}

pub fn load_mdp<T: Real>(path: &Path) -> Result<CompositeMdp<T>> {
    load_json::<MdpDoc>(path)?.to_mdp()
}

pub fn save_pair<T: Real>(path: &Path, pair: &TaskPair<T>, metadata: Metadata) -> Result<()> {
    save_json(path, &PairDoc::from_pair(pair, metadata))
}

pub fn load_pair<T: Real>(path: &Path) -> Result<TaskPair<T>> {
    load_json::<PairDoc>(path)?.to_pair()
}
