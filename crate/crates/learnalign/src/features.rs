//! Pipeline steps 1-2: warmup training, per-datum GRPO gradient estimation at
//! the warm-up checkpoint, seeded random projection to a low dimension, and a
//! persistent feature store.
//!
//! The projection matrix is never materialized: entry (row, col) is generated
//! on the fly from a counter hash of (seed, row, col), so projecting a
//! D-dimensional gradient to d dimensions costs O(Dd) time and O(d) memory.
//! Rademacher entries are +-1/sqrt(d) (64 signs per hash word); the Gaussian
//! scheme draws one standard normal per entry via Box-Muller, scaled by
//! 1/sqrt(d). Both preserve inner products in expectation.
//!
//! Feature store file layout (little-endian):
//!
//!   magic "LAFS" | version u16
//!   d u32 | G u16 | projection seed u64 | checkpoint hash [32]u8 | n u64
//!   n records: id u64 | p f64 | phi d x f32

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{
    check_magic, check_version, write_f32, write_f64, write_u16, write_u32, write_u64,
    CountingReader,
};
use crate::error::{Error, Result};
use crate::grpo::{self, GRPOConfig, TrainMetrics};
use crate::mdp_env::{TaskDatum, TaskEnv};
use crate::policy::{GradientVector, PolicyParams};
use crate::seeding;

const STORE_MAGIC: &[u8; 4] = b"LAFS";
const STORE_VERSION: u16 = 1;

/// How random projection entries are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionScheme {
    Rademacher,
    Gaussian,
}

/// Seeded random projection to `dim` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub dim: usize,
    pub seed: u64,
    pub scheme: ProjectionScheme,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            dim: 512,
            seed: 0,
            scheme: ProjectionScheme::Rademacher,
        }
    }
}

impl ProjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("projection dim must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn counter_hash(seed: u64, counter: u64) -> u64 {
    seeding::splitmix64(seed ^ seeding::splitmix64(counter))
}

/// Standard normal from two hash-derived uniforms (Box-Muller).
#[inline]
fn gaussian_entry(seed: u64, counter: u64) -> f64 {
    let h1 = counter_hash(seed, counter);
    let h2 = seeding::splitmix64(h1);
    // (0, 1] uniforms from the top 53 bits.
    let u1 = ((h1 >> 11) as f64 + 1.0) / 9_007_199_254_740_992.0;
    let u2 = (h2 >> 11) as f64 / 9_007_199_254_740_992.0;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Apply the projection: out[j] = sum_i Gamma[i][j] * gradient[i], with
/// Gamma entries scaled by 1/sqrt(dim). Deterministic in (gradient, spec).
pub fn project(gradient: &[f64], spec: &ProjectionSpec) -> Vec<f64> {
    let d = spec.dim;
    let mut out = vec![0.0; d];
    match spec.scheme {
        ProjectionScheme::Rademacher => {
            let blocks = d.div_ceil(64);
            for (i, &g) in gradient.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for b in 0..blocks {
                    let bits = counter_hash(spec.seed, (i as u64) * blocks as u64 + b as u64);
                    let lo = b * 64;
                    let hi = (lo + 64).min(d);
                    for j in lo..hi {
                        if bits >> (j - lo) & 1 == 1 {
                            out[j] += g;
                        } else {
                            out[j] -= g;
                        }
                    }
                }
            }
        }
        ProjectionScheme::Gaussian => {
            for (i, &g) in gradient.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = (i as u64) * d as u64;
                for (j, o) in out.iter_mut().enumerate() {
                    *o += g * gaussian_entry(spec.seed, row + j as u64);
                }
            }
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// One datum's features: success rate p over its rollout group and the
/// projected GRPO gradient phi.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub success_rate: f64,
    pub phi: Vec<f32>,
}

/// Immutable collection of feature records sorted by datum id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub dim: usize,
    pub group_size: usize,
    pub projection_seed: u64,
    /// SHA-256 of the checkpoint the gradients were extracted at.
    pub checkpoint_hash: [u8; 32],
    records: Vec<FeatureRecord>,
}

impl FeatureStore {
    pub fn new(
        dim: usize,
        group_size: usize,
        projection_seed: u64,
        checkpoint_hash: [u8; 32],
        mut records: Vec<FeatureRecord>,
    ) -> Result<Self> {
        records.sort_by_key(|r| r.id);
        for pair in records.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Config(format!("duplicate datum id {}", pair[0].id)));
            }
        }
        for r in &records {
            if r.phi.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: dim,
                    got: r.phi.len(),
                });
            }
            if !(0.0..=1.0).contains(&r.success_rate) {
                return Err(Error::Domain(format!(
                    "datum {}: success rate {} outside [0, 1]",
                    r.id, r.success_rate
                )));
            }
            if r.phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("datum {}: non-finite phi", r.id)));
            }
        }
        Ok(Self {
            dim,
            group_size,
            projection_seed,
            checkpoint_hash,
            records,
        })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records restricted to `ids`, preserving the store's id order.
    pub fn subset(&self, ids: &std::collections::HashSet<u64>) -> Vec<&FeatureRecord> {
        self.records.iter().filter(|r| ids.contains(&r.id)).collect()
    }
}

/// Warmup training output: the probe checkpoint plus the ids it was trained
/// on.
#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub params: PolicyParams,
    pub subset_ids: Vec<u64>,
    pub metrics: Vec<TrainMetrics>,
}

/// Step 1: GRPO training on a seeded uniform subset of `m` data, returning
/// the warm-up checkpoint used as the gradient probe point.
pub fn warmup(
    params: PolicyParams,
    dataset: &[TaskDatum],
    m: usize,
    config: &GRPOConfig,
    env: &TaskEnv,
    seed: u64,
) -> Result<WarmupOutcome> {
    if m == 0 || m > dataset.len() {
        return Err(Error::Config(format!(
            "warmup size {m} out of range 1..={}",
            dataset.len()
        )));
    }
    // Seeded uniform sample without replacement (partial Fisher-Yates).
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(m);
    indices.sort_unstable();
    let subset: Vec<TaskDatum> = indices.iter().map(|&i| dataset[i].clone()).collect();
    let subset_ids: Vec<u64> = subset.iter().map(|d| d.id).collect();

    let mut train_config = config.clone();
    train_config.master_seed = seeding::derive(seed, &[seeding::tag("warmup-train")]);
    let (warm, metrics) = grpo::train(params, &subset, &train_config, env)?;
    Ok(WarmupOutcome {
        params: warm,
        subset_ids,
        metrics,
    })
}

/// Step 2: for each datum, sample G rollouts at temperature 1.0 under the
/// warm-up checkpoint, record p = successes / G, estimate the single-group
/// GRPO gradient (advantage term plus the beta-weighted reference-ratio term
/// against `ref_params`), and project it. The same rollouts serve both p and
/// the gradient. Per-datum work is independent and runs in parallel.
pub fn extract_features(
    warm_params: &PolicyParams,
    ref_params: &PolicyParams,
    dataset: &[TaskDatum],
    env: &TaskEnv,
    config: &GRPOConfig,
    spec: &ProjectionSpec,
    seed: u64,
) -> Result<FeatureStore> {
    config.validate()?;
    spec.validate()?;
    let records: Result<Vec<FeatureRecord>> = dataset
        .par_iter()
        .map(|datum| {
            let group = grpo::sample_group(
                warm_params,
                datum,
                env,
                config.group_size,
                1.0,
                config.std_floor,
                seed,
            );
            let gradient =
                grpo::grpo_gradient(warm_params, ref_params, std::slice::from_ref(&group), config)
                    .map_err(|e| e.in_stage(&format!("features datum {}", datum.id)))?;
            let phi64 = project(&gradient.values, spec);
            Ok(FeatureRecord {
                id: datum.id,
                success_rate: group.success_rate,
                phi: phi64.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect();
    FeatureStore::new(
        spec.dim,
        config.group_size,
        spec.seed,
        warm_params.digest(),
        records?,
    )
}

/// Recompute a datum's projected gradient from its rollout seeds (used by
/// consistency checks; must agree with the stored record bit-for-bit).
pub fn extract_single(
    warm_params: &PolicyParams,
    ref_params: &PolicyParams,
    datum: &TaskDatum,
    env: &TaskEnv,
    config: &GRPOConfig,
    spec: &ProjectionSpec,
    seed: u64,
) -> Result<(FeatureRecord, GradientVector)> {
    let group = grpo::sample_group(
        warm_params,
        datum,
        env,
        config.group_size,
        1.0,
        config.std_floor,
        seed,
    );
    let gradient =
        grpo::grpo_gradient(warm_params, ref_params, std::slice::from_ref(&group), config)?;
    let phi64 = project(&gradient.values, spec);
    Ok((
        FeatureRecord {
            id: datum.id,
            success_rate: group.success_rate,
            phi: phi64.iter().map(|&v| v as f32).collect(),
        },
        gradient,
    ))
}

pub fn save_store(store: &FeatureStore, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(std::fs::File::create(path)?);
    file.write_all(STORE_MAGIC)?;
    write_u16(&mut file, STORE_VERSION)?;
    write_u32(&mut file, store.dim as u32)?;
    write_u16(&mut file, store.group_size as u16)?;
    write_u64(&mut file, store.projection_seed)?;
    file.write_all(&store.checkpoint_hash)?;
    write_u64(&mut file, store.records.len() as u64)?;
    for r in &store.records {
        write_u64(&mut file, r.id)?;
        write_f64(&mut file, r.success_rate)?;
        for &v in &r.phi {
            write_f32(&mut file, v)?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<FeatureStore> {
    let mut r = CountingReader::new(BufReader::new(std::fs::File::open(path)?));
    check_magic(&mut r, STORE_MAGIC)?;
    check_version(&mut r, STORE_VERSION)?;
    let dim = r.u32_header()? as usize;
    let group_size = r.u16_header()? as usize;
    let projection_seed = r.u64_header()?;
    let mut checkpoint_hash = [0u8; 32];
    r.read_exact_header(&mut checkpoint_hash)?;
    let n = r.u64_header()? as usize;
    if dim == 0 {
        return Err(Error::CorruptHeader("projection dim 0".into()));
    }
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u64_record()?;
        let p = r.f64_record()?;
        let mut phi = Vec::with_capacity(dim);
        for _ in 0..dim {
            phi.push(r.f32_record()?);
        }
        records.push(FeatureRecord {
            id,
            success_rate: p,
            phi,
        });
    }
    r.expect_eof("feature store: header n smaller than record data")?;
    let mut sorted = records.clone();
    sorted.sort_by_key(|rec| rec.id);
    if sorted.iter().map(|r| r.id).ne(records.iter().map(|r| r.id)) {
        return Err(Error::HeaderMismatch("records not sorted by id".into()));
    }
    FeatureStore::new(dim, group_size, projection_seed, checkpoint_hash, records)
}
