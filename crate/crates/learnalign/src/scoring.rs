//! Pipeline steps 3-4: pairwise influence, learnability, the alignment score
//! matrix, row-average ranking, top-N and staged selection, and the ablation
//! scorers.
//!
//! The score between data i and j is
//!
//!   S_ij = V(p_i) * V(p_j) * cos(phi_i, phi_j)
//!
//! where V(p) = p(1-p) is the learnability of a datum with success rate p
//! (maximal at p = 0.5, zero for always-solved or never-solved data) and
//! phi are the projected per-datum gradients. Since V <= 1/4 and |cos| <= 1,
//! every entry satisfies |S_ij| <= 1/16. Each unordered pair is computed
//! once, so the matrix is bitwise symmetric. Ranking sorts the row averages
//! Avg_i = (1/n) sum_j S_ij (diagonal included) in descending order with ties
//! broken by ascending datum id.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{
    check_magic, check_version, write_f32, write_u16, write_u64, CountingReader,
};
use crate::error::{Error, Result};
use crate::features::{FeatureRecord, FeatureStore};
use crate::mdp_env::TaskDatum;
use crate::policy::{self, PolicyParams};

const MATRIX_MAGIC: &[u8; 4] = b"LASM";
const MATRIX_VERSION: u16 = 1;

/// Norms below this are treated as zero vectors by `cosine`.
pub const DEFAULT_ZERO_TOL: f64 = 1e-12;

/// First-order influence of one datum's gradient step on another's loss:
/// the dot product of their gradients.
pub fn influence(g_i: &[f64], g_j: &[f64]) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(Error::ShapeMismatch {
            expected: g_i.len(),
            got: g_j.len(),
        });
    }
    Ok(g_i.iter().zip(g_j).map(|(a, b)| a * b).sum())
}

/// Learnability V(p) = p(1-p); maximal at p = 0.5, zero at the boundaries.
pub fn learnability(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("success rate {p} outside [0, 1]")));
    }
    Ok(p * (1.0 - p))
}

/// Cosine similarity, clamped to [-1, 1]; zero when either norm falls below
/// `zero_tol` (zero-gradient records are legitimate, not an error).
pub fn cosine(u: &[f64], v: &[f64], zero_tol: f64) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < zero_tol || nv < zero_tol {
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

fn phi64(record: &FeatureRecord) -> Vec<f64> {
    record.phi.iter().map(|&v| f64::from(v)).collect()
}

/// Score for one unordered pair of feature records.
pub fn pair_score(a: &FeatureRecord, b: &FeatureRecord) -> f64 {
    let va = a.success_rate * (1.0 - a.success_rate);
    let vb = b.success_rate * (1.0 - b.success_rate);
    va * vb * cosine(&phi64(a), &phi64(b), DEFAULT_ZERO_TOL)
}

/// Symmetric n x n score matrix over a set of datum ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    ids: Vec<u64>,
    values: Vec<f64>,
}

impl ScoreMatrix {
    fn from_fn(ids: Vec<u64>, mut entry: impl FnMut(usize, usize) -> f64) -> Self {
        let n = ids.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let s = entry(i, j);
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Self { ids, values }
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// Row average Avg_i; the diagonal entry is included by default and can
    /// be excluded for sensitivity analysis.
    pub fn row_average(&self, i: usize, include_diagonal: bool) -> f64 {
        let n = self.n();
        let row = &self.values[i * n..(i + 1) * n];
        if include_diagonal {
            row.iter().sum::<f64>() / n as f64
        } else if n > 1 {
            (row.iter().sum::<f64>() - row[i]) / (n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MATRIX_MAGIC)?;
        write_u16(&mut file, MATRIX_VERSION)?;
        write_u64(&mut file, self.ids.len() as u64)?;
        for &id in &self.ids {
            write_u64(&mut file, id)?;
        }
        let n = self.n();
        for i in 0..n {
            for j in i..n {
                write_f32(&mut file, self.get(i, j) as f32)?;
            }
        }
        file.flush()?;
        Ok(())
    }

    /// Load a persisted matrix (f32 upper triangle, mirrored on load).
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = CountingReader::new(BufReader::new(std::fs::File::open(path)?));
        check_magic(&mut r, MATRIX_MAGIC)?;
        check_version(&mut r, MATRIX_VERSION)?;
        let n = r.u64_header()? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64_record()?);
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f64::from(r.f32_record()?);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        r.expect_eof("score matrix")?;
        Ok(Self { ids, values })
    }
}

/// Step 3: the full pairwise score matrix (O(n^2 d) time, O(n^2) memory).
/// Rows are computed in parallel; every unordered pair is evaluated exactly
/// once so symmetry is bitwise.
pub fn score_matrix(store: &FeatureStore) -> ScoreMatrix {
    let records = store.records();
    let n = records.len();
    let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    let phis: Vec<Vec<f64>> = records.iter().map(phi64).collect();
    let learn: Vec<f64> = records
        .iter()
        .map(|r| r.success_rate * (1.0 - r.success_rate))
        .collect();
    let norms: Vec<f64> = phis
        .iter()
        .map(|p| p.iter().map(|a| a * a).sum::<f64>().sqrt())
        .collect();

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            for j in i..n {
                let c = if norms[i] < DEFAULT_ZERO_TOL || norms[j] < DEFAULT_ZERO_TOL {
                    0.0
                } else {
                    let dot: f64 = phis[i].iter().zip(&phis[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                };
                row[j] = learn[i] * learn[j] * c;
            }
            row
        })
        .collect();

    let mut values = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        for j in i..n {
            values[i * n + j] = row[j];
            values[j * n + i] = row[j];
        }
    }
    ScoreMatrix { ids, values }
}

/// Selection method tags shared by the gradient-alignment selector, its
/// ablations, and the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Learnalign,
    AblationNoLearnability,
    AblationFeatureSimilarity,
    BaselineRandom,
    BaselinePplTop,
    BaselinePplMiddle,
    BaselineTokenLength,
    BaselineIfd,
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MethodTag::Learnalign => "learnalign",
            MethodTag::AblationNoLearnability => "ablation-no-learnability",
            MethodTag::AblationFeatureSimilarity => "ablation-feature-similarity",
            MethodTag::BaselineRandom => "baseline-random",
            MethodTag::BaselinePplTop => "baseline-ppl-top",
            MethodTag::BaselinePplMiddle => "baseline-ppl-middle",
            MethodTag::BaselineTokenLength => "baseline-token-length",
            MethodTag::BaselineIfd => "baseline-ifd",
        };
        f.write_str(s)
    }
}

/// Ranked selection output: the chosen ids (best first) with the ranking
/// score attached to each. Scores are non-increasing along the ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: MethodTag,
    pub n: usize,
    pub ids: Vec<u64>,
    pub averages: Vec<f64>,
}

impl SelectionResult {
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.n || self.averages.len() != self.n {
            return Err(Error::Config("selection length mismatch".into()));
        }
        let unique: HashSet<u64> = self.ids.iter().copied().collect();
        if unique.len() != self.ids.len() {
            return Err(Error::Config("selection ids not unique".into()));
        }
        for pair in self.averages.windows(2) {
            if pair[1] > pair[0] {
                return Err(Error::Config("selection scores increase along ranking".into()));
            }
        }
        Ok(())
    }
}

/// Rank ids by score descending, ties broken by ascending id, and keep the
/// top `n_select`.
pub fn rank_and_take(
    method: MethodTag,
    scored: &[(u64, f64)],
    n_select: usize,
) -> Result<SelectionResult> {
    if n_select == 0 || n_select > scored.len() {
        return Err(Error::Config(format!(
            "selection size {n_select} out of range 1..={}",
            scored.len()
        )));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .1
            .partial_cmp(&scored[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(scored[a].0.cmp(&scored[b].0))
    });
    order.truncate(n_select);
    Ok(SelectionResult {
        method,
        n: n_select,
        ids: order.iter().map(|&i| scored[i].0).collect(),
        averages: order.iter().map(|&i| scored[i].1).collect(),
    })
}

/// Step 4: rank by row-average score and keep the top N.
pub fn select_top_n(matrix: &ScoreMatrix, n_select: usize) -> Result<SelectionResult> {
    select_top_n_opts(matrix, n_select, true)
}

pub fn select_top_n_opts(
    matrix: &ScoreMatrix,
    n_select: usize,
    include_diagonal: bool,
) -> Result<SelectionResult> {
    let scored: Vec<(u64, f64)> = (0..matrix.n())
        .map(|i| (matrix.ids()[i], matrix.row_average(i, include_diagonal)))
        .collect();
    rank_and_take(MethodTag::Learnalign, &scored, n_select)
}

/// Ablation scorers from the comparison study.
pub enum AblationScorer<'a> {
    /// Drop the learnability weights: S_ij = cos(phi_i, phi_j).
    NoLearnability,
    /// Replace gradient cosine with prompt-embedding cosine, using the
    /// policy's own embedding table.
    FeatureSimilarity {
        params: &'a PolicyParams,
        data: &'a [TaskDatum],
    },
}

pub fn ablation_score(store: &FeatureStore, mode: &AblationScorer<'_>) -> Result<ScoreMatrix> {
    match mode {
        AblationScorer::NoLearnability => {
            let records = store.records();
            let phis: Vec<Vec<f64>> = records.iter().map(phi64).collect();
            let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
            Ok(ScoreMatrix::from_fn(ids, |i, j| {
                cosine(&phis[i], &phis[j], DEFAULT_ZERO_TOL)
            }))
        }
        AblationScorer::FeatureSimilarity { params, data } => {
            let ids: Vec<u64> = store.records().iter().map(|r| r.id).collect();
            let by_id: std::collections::HashMap<u64, &TaskDatum> =
                data.iter().map(|d| (d.id, d)).collect();
            let mut embeds = Vec::with_capacity(ids.len());
            for &id in &ids {
                let datum = by_id.get(&id).ok_or_else(|| {
                    Error::Config(format!("datum {id} missing from feature-similarity input"))
                })?;
                embeds.push(policy::mean_prompt_embedding(params, &datum.prompt));
            }
            Ok(ScoreMatrix::from_fn(ids, |i, j| {
                cosine(&embeds[i], &embeds[j], DEFAULT_ZERO_TOL)
            }))
        }
    }
}

/// Stage-wise environment for `staged_select`: feature extraction with the
/// current model and training on a selected subset.
pub trait StageDriver {
    fn extract(&mut self, params: &PolicyParams, pool: &[TaskDatum]) -> Result<FeatureStore>;
    fn train(&mut self, params: PolicyParams, selected: &[TaskDatum]) -> Result<PolicyParams>;
}

/// Iterative staged selection: at each stage, extract features for the
/// remaining pool with the current model, score, select the next fraction of
/// the ORIGINAL dataset size, train on it, and remove it from the pool.
/// Fractions must be positive and sum to at most 1.
pub fn staged_select<D: StageDriver>(
    dataset: &[TaskDatum],
    fractions: &[f64],
    start_params: PolicyParams,
    driver: &mut D,
) -> Result<(Vec<SelectionResult>, PolicyParams)> {
    if fractions.is_empty() {
        return Err(Error::Config("no stage fractions given".into()));
    }
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::Config("stage fractions must be positive".into()));
    }
    if fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Config("stage fractions sum above 1".into()));
    }
    let n0 = dataset.len();
    let mut pool: Vec<TaskDatum> = dataset.to_vec();
    let mut params = start_params;
    let mut selections = Vec::with_capacity(fractions.len());
    for (stage, &fraction) in fractions.iter().enumerate() {
        let take = ((fraction * n0 as f64).floor() as usize).max(1);
        if take > pool.len() {
            return Err(Error::Config(format!(
                "stage {stage}: pool exhausted ({} left, {take} requested)",
                pool.len()
            )));
        }
        let store = driver.extract(&params, &pool)?;
        let matrix = score_matrix(&store);
        let selection = select_top_n(&matrix, take)?;
        let chosen: HashSet<u64> = selection.ids.iter().copied().collect();
        let selected: Vec<TaskDatum> = pool
            .iter()
            .filter(|d| chosen.contains(&d.id))
            .cloned()
            .collect();
        params = driver.train(params, &selected)?;
        pool.retain(|d| !chosen.contains(&d.id));
        selections.push(selection);
    }
    Ok((selections, params))
}
