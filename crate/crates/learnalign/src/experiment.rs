//! End-to-end orchestration: dataset generation, warmup, feature extraction,
//! scoring, selection, post-selection training, evaluation, the staged
//! curriculum driver, and report emission.
//!
//! Every artifact is persisted under the output directory with a manifest
//! recording the content hashes of its inputs; re-running a stage whose
//! inputs are unchanged is a cache hit and leaves the artifact untouched.
//! Post-selection training always restarts from the base checkpoint (the
//! warm-up model is only a gradient probe), so comparisons isolate selection
//! quality. All randomness derives from the master seed, making full runs
//! byte-reproducible.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines;
use crate::error::{Error, Result};
use crate::features::{self, FeatureStore, ProjectionSpec};
use crate::grpo::{self, GRPOConfig, StopRule, TrainMetrics};
use crate::mdp_env::{self, TaskDatum, TaskEnv, TaskKind};
use crate::policy::{self, PolicyParams};
use crate::scoring::{self, AblationScorer, ScoreMatrix, SelectionResult};
use crate::seeding;

/// Environment variable naming the root under which `out_dir` is resolved.
pub const OUT_ROOT_ENV: &str = "LEARNALIGN_OUT";

/// Synthetic dataset description. Train and test tasks come from a single
/// generator call (unique prompts) split at `n_train`, so the test set is
/// disjoint from the training pool by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::ChainedSum,
            n_train: 2000,
            n_test: 500,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSpec {
    /// Warmup subset size; defaults to 4% of the training set.
    pub size: Option<usize>,
    pub steps: usize,
}

impl Default for WarmupSpec {
    fn default() -> Self {
        Self {
            size: None,
            steps: 120,
        }
    }
}

/// Which checkpoint the perplexity-based baselines score against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeCheckpoint {
    Warmup,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub staged_fractions: Vec<f64>,
    /// Include the diagonal in row averages (flag exists for sensitivity
    /// analysis).
    pub include_diagonal: bool,
    pub probe_checkpoint: ProbeCheckpoint,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            sizes: vec![50, 125, 250, 500],
            methods: vec![Method::Learnalign, Method::Random],
            staged_fractions: vec![0.5, 0.3, 0.2],
            include_diagonal: true,
            probe_checkpoint: ProbeCheckpoint::Warmup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub pass_k: usize,
    pub sample_temperature: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            pass_k: 4,
            sample_temperature: 0.7,
        }
    }
}

/// Convergence rule for staged training: stop a stage when the mean reward
/// has not improved by `min_improvement` within `patience` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedSpec {
    pub max_steps: usize,
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for StagedSpec {
    fn default() -> Self {
        Self {
            max_steps: 400,
            patience: 50,
            min_improvement: 0.005,
        }
    }
}

/// Selection method names accepted in configs and on the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Learnalign,
    NoLearnability,
    FeatureSimilarity,
    Random,
    PplTop,
    PplMiddle,
    TokenLength,
    Ifd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Learnalign => "learnalign",
            Method::NoLearnability => "no-learnability",
            Method::FeatureSimilarity => "feature-similarity",
            Method::Random => "random",
            Method::PplTop => "ppl-top",
            Method::PplMiddle => "ppl-middle",
            Method::TokenLength => "token-length",
            Method::Ifd => "ifd",
        }
    }

    /// Methods that need the warm-up checkpoint as a probe.
    fn needs_warmup(self, probe: ProbeCheckpoint) -> bool {
        match self {
            Method::Learnalign | Method::NoLearnability | Method::FeatureSimilarity => true,
            Method::PplTop | Method::PplMiddle | Method::Ifd => probe == ProbeCheckpoint::Warmup,
            Method::Random | Method::TokenLength => false,
        }
    }

    fn needs_features(self) -> bool {
        matches!(self, Method::Learnalign | Method::NoLearnability)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnalign" => Ok(Method::Learnalign),
            "no-learnability" | "ablation-no-learnability" => Ok(Method::NoLearnability),
            "feature-similarity" | "ablation-feature-similarity" => Ok(Method::FeatureSimilarity),
            "random" => Ok(Method::Random),
            "ppl-top" => Ok(Method::PplTop),
            "ppl-middle" => Ok(Method::PplMiddle),
            "token-length" => Ok(Method::TokenLength),
            "ifd" => Ok(Method::Ifd),
            other => Err(Error::Config(format!("unknown selection method: {other}"))),
        }
    }
}

/// Full experiment configuration (TOML on disk; all sections optional with
/// the defaults below).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub policy: policy::PolicyConfig,
    pub grpo: GRPOConfig,
    pub warmup: WarmupSpec,
    pub projection: ProjectionSpec,
    pub selection: SelectionSpec,
    pub eval: EvalSpec,
    pub env: TaskEnv,
    pub staged: StagedSpec,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.grpo.validate()?;
        self.projection.validate()?;
        self.env.reward_spec.validate()?;
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.selection.methods.is_empty() {
            return Err(Error::Config("no selection methods configured".into()));
        }
        if self.selection.sizes.is_empty() {
            return Err(Error::Config("no selection sizes configured".into()));
        }
        for &n in &self.selection.sizes {
            if n == 0 || n > self.dataset.n_train {
                return Err(Error::Config(format!(
                    "selection size {n} out of range 1..={}",
                    self.dataset.n_train
                )));
            }
        }
        if let Some(m) = self.warmup.size {
            if m == 0 || m > self.dataset.n_train {
                return Err(Error::Config(format!("warmup size {m} out of range")));
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must be set".into()));
        }
        Ok(())
    }

    pub fn warmup_size(&self) -> usize {
        self.warmup
            .size
            .unwrap_or_else(|| ((self.dataset.n_train as f64 * 0.04).ceil() as usize).max(1))
    }

    /// Output directory, optionally rooted at $LEARNALIGN_OUT.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config {path:?}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Seeds that produced a report, recorded for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedsRecord {
    pub master: u64,
    pub dataset: u64,
    pub policy_param: u64,
    pub projection: u64,
}

/// Evaluation summary for one (method, N) cell. Wall-clock time is kept
/// in memory only: persisted reports must be byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_selected: usize,
    pub greedy_accuracy: f64,
    pub pass1_accuracy: f64,
    pub pass1_k: usize,
    pub pass1_temperature: f64,
    pub seeds: SeedsRecord,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Decoding mode for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    Greedy,
    Sampled { k: usize, temperature: f64 },
}

/// Accuracy of a policy on a test set. Greedy mode decodes once per datum;
/// sampled mode averages the correct fraction of k samples per datum
/// (mean pass@1). Temperature 0 in sampled mode reproduces greedy exactly.
pub fn evaluate(
    params: &PolicyParams,
    test_set: &[TaskDatum],
    env: &TaskEnv,
    mode: EvalMode,
    seed: u64,
) -> f64 {
    use rayon::prelude::*;
    if test_set.is_empty() {
        return 0.0;
    }
    let per_datum: Vec<f64> = test_set
        .par_iter()
        .map(|datum| match mode {
            EvalMode::Greedy => {
                let r = policy::sample(params, datum, 0.0, env.horizon, 0);
                f64::from(u8::from(mdp_env::verify_answer(&r.trajectory, datum)))
            }
            EvalMode::Sampled { k, temperature } => {
                let hits = (0..k)
                    .filter(|&j| {
                        let r = policy::sample(
                            params,
                            datum,
                            temperature,
                            env.horizon,
                            seeding::derive(seed, &[datum.id, j as u64]),
                        );
                        mdp_env::verify_answer(&r.trajectory, datum)
                    })
                    .count();
                hits as f64 / k.max(1) as f64
            }
        })
        .collect();
    per_datum.iter().sum::<f64>() / test_set.len() as f64
}

// ---------------------------------------------------------------------------
// Artifact cache
// ---------------------------------------------------------------------------

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_bytes(
        serde_json::to_string(value)
            .expect("config digests serialize")
            .as_bytes(),
    )
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct StageManifest {
    inputs: BTreeMap<String, String>,
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}

/// Build `artifact` unless it already exists with a manifest matching
/// `inputs`. Returns true when the stage actually ran.
fn stage_file(
    stage: &str,
    artifact: &Path,
    inputs: BTreeMap<String, String>,
    build: impl FnOnce() -> Result<()>,
) -> Result<bool> {
    let manifest = StageManifest { inputs };
    let mpath = manifest_path(artifact);
    if artifact.exists() && mpath.exists() {
        if let Ok(existing) = serde_json::from_str::<StageManifest>(
            &std::fs::read_to_string(&mpath).unwrap_or_default(),
        ) {
            if existing == manifest {
                log::debug!("stage {stage}: cache hit for {artifact:?}");
                return Ok(false);
            }
        }
    }
    log::info!("stage {stage}: building {artifact:?}");
    build().map_err(|e| e.in_stage(stage))?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(&mpath, json).map_err(|e| Error::from(e).in_stage(stage))?;
    Ok(true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{json}")?;
    f.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad JSON {path:?}: {e}")))
}

fn write_metrics(path: &Path, metrics: &[TrainMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        let line = serde_json::to_string(m)
            .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn create(root: PathBuf) -> Result<Self> {
        for sub in ["tasks", "checkpoints", "features", "selections", "reports", "metrics"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    fn tasks(&self, name: &str) -> PathBuf {
        self.root.join("tasks").join(name)
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    fn feature(&self, name: &str) -> PathBuf {
        self.root.join("features").join(name)
    }

    fn selection(&self, name: &str) -> PathBuf {
        self.root.join("selections").join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn metric(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }
}

struct PipelineState {
    ws: Workspace,
    train: Vec<TaskDatum>,
    test: Vec<TaskDatum>,
    tasks_digest: String,
    base: PolicyParams,
    base_digest: String,
    warm: Option<PolicyParams>,
    warm_digest: Option<String>,
    store: Option<FeatureStore>,
    store_digest: Option<String>,
}

fn prepare_common(cfg: &ExperimentConfig) -> Result<PipelineState> {
    cfg.validate()?;
    let ws = Workspace::create(cfg.resolved_out_dir())?;

    // Train/test tasks from one generator call, split at n_train.
    let train_path = ws.tasks("train.jsonl");
    let test_path = ws.tasks("test.jsonl");
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".into(), digest_of(&cfg.dataset));
    stage_file("gen-data", &train_path, inputs.clone(), || {
        let total = cfg.dataset.n_train + cfg.dataset.n_test;
        let all = mdp_env::generate_task_set(cfg.dataset.kind, total, cfg.dataset.seed)?;
        mdp_env::write_tasks(&train_path, &all[..cfg.dataset.n_train])?;
        mdp_env::write_tasks(&test_path, &all[cfg.dataset.n_train..])?;
        Ok(())
    })?;
    let train = mdp_env::read_tasks(&train_path)?;
    let test = mdp_env::read_tasks(&test_path)?;
    let tasks_digest = sha256_file(&train_path)?;

    // Base checkpoint.
    let base_path = ws.checkpoint("base.ckpt");
    let mut inputs = BTreeMap::new();
    inputs.insert("policy".into(), digest_of(&cfg.policy));
    stage_file("init-policy", &base_path, inputs, || {
        PolicyParams::init(cfg.policy.clone())?.save(&base_path)
    })?;
    let base = PolicyParams::load(&base_path)?;
    let base_digest = sha256_file(&base_path)?;

    Ok(PipelineState {
        ws,
        train,
        test,
        tasks_digest,
        base,
        base_digest,
        warm: None,
        warm_digest: None,
        store: None,
        store_digest: None,
    })
}

fn warmup_config(cfg: &ExperimentConfig) -> GRPOConfig {
    GRPOConfig {
        steps: cfg.warmup.steps,
        ..cfg.grpo.clone()
    }
}

fn ensure_warmup(cfg: &ExperimentConfig, state: &mut PipelineState) -> Result<()> {
    if state.warm.is_some() {
        return Ok(());
    }
    let warm_path = state.ws.checkpoint("warm.ckpt");
    let subset_path = state.ws.metric("warmup_subset.json");
    let metrics_path = state.ws.metric("warmup.jsonl");
    let mut inputs = BTreeMap::new();
    inputs.insert("base".into(), state.base_digest.clone());
    inputs.insert("tasks".into(), state.tasks_digest.clone());
    inputs.insert("warmup".into(), digest_of(&cfg.warmup));
    inputs.insert("grpo".into(), digest_of(&cfg.grpo));
    inputs.insert("env".into(), digest_of(&cfg.env));
    inputs.insert("master_seed".into(), cfg.master_seed.to_string());
    let base = state.base.clone();
    let train = state.train.clone();
    stage_file("warmup", &warm_path, inputs, || {
        let outcome = features::warmup(
            base,
            &train,
            cfg.warmup_size(),
            &warmup_config(cfg),
            &cfg.env,
            seeding::derive(cfg.master_seed, &[seeding::tag("warmup")]),
        )?;
        outcome.params.save(&warm_path)?;
        write_json(&subset_path, &outcome.subset_ids)?;
        write_metrics(&metrics_path, &outcome.metrics)
    })?;
    state.warm = Some(PolicyParams::load(&warm_path)?);
    state.warm_digest = Some(sha256_file(&warm_path)?);
    Ok(())
}

fn ensure_features(cfg: &ExperimentConfig, state: &mut PipelineState) -> Result<()> {
    if state.store.is_some() {
        return Ok(());
    }
    ensure_warmup(cfg, state)?;
    let store_path = state.ws.feature("store.lafs");
    let mut inputs = BTreeMap::new();
    inputs.insert("warm".into(), state.warm_digest.clone().unwrap());
    inputs.insert("base".into(), state.base_digest.clone());
    inputs.insert("tasks".into(), state.tasks_digest.clone());
    inputs.insert("projection".into(), digest_of(&cfg.projection));
    inputs.insert("grpo".into(), digest_of(&cfg.grpo));
    inputs.insert("env".into(), digest_of(&cfg.env));
    inputs.insert("master_seed".into(), cfg.master_seed.to_string());
    let warm = state.warm.clone().unwrap();
    let base = state.base.clone();
    let train = state.train.clone();
    stage_file("features", &store_path, inputs, || {
        let store = features::extract_features(
            &warm,
            &base,
            &train,
            &cfg.env,
            &cfg.grpo,
            &cfg.projection,
            seeding::derive(cfg.master_seed, &[seeding::tag("features")]),
        )?;
        features::save_store(&store, &store_path)
    })?;
    state.store = Some(features::load_store(&store_path)?);
    state.store_digest = Some(sha256_file(&store_path)?);
    Ok(())
}

fn matrix_for_method(
    cfg: &ExperimentConfig,
    state: &mut PipelineState,
    method: Method,
) -> Result<ScoreMatrix> {
    let path = state.ws.feature(&format!("matrix-{}.lasm", method.name()));
    match method {
        Method::Learnalign | Method::NoLearnability => {
            ensure_features(cfg, state)?;
            let store = state.store.clone().unwrap();
            let mut inputs = BTreeMap::new();
            inputs.insert("store".into(), state.store_digest.clone().unwrap());
            inputs.insert("method".into(), method.name().into());
            stage_file("score", &path, inputs, || {
                let matrix = match method {
                    Method::Learnalign => scoring::score_matrix(&store),
                    _ => scoring::ablation_score(&store, &AblationScorer::NoLearnability)?,
                };
                matrix.save(&path)
            })?;
        }
        Method::FeatureSimilarity => {
            ensure_features(cfg, state)?;
            let store = state.store.clone().unwrap();
            let warm = state.warm.clone().unwrap();
            let train = state.train.clone();
            let mut inputs = BTreeMap::new();
            inputs.insert("store".into(), state.store_digest.clone().unwrap());
            inputs.insert("warm".into(), state.warm_digest.clone().unwrap());
            inputs.insert("method".into(), method.name().into());
            stage_file("score", &path, inputs, || {
                let matrix = scoring::ablation_score(
                    &store,
                    &AblationScorer::FeatureSimilarity {
                        params: &warm,
                        data: &train,
                    },
                )?;
                matrix.save(&path)
            })?;
        }
        other => {
            return Err(Error::Config(format!(
                "method {other} does not score through a matrix"
            )))
        }
    }
    ScoreMatrix::load(&path)
}

fn probe_params(
    cfg: &ExperimentConfig,
    state: &mut PipelineState,
) -> Result<(PolicyParams, String)> {
    match cfg.selection.probe_checkpoint {
        ProbeCheckpoint::Warmup => {
            ensure_warmup(cfg, state)?;
            Ok((
                state.warm.clone().unwrap(),
                state.warm_digest.clone().unwrap(),
            ))
        }
        ProbeCheckpoint::Base => Ok((state.base.clone(), state.base_digest.clone())),
    }
}

fn select_for(
    cfg: &ExperimentConfig,
    state: &mut PipelineState,
    method: Method,
    n_select: usize,
) -> Result<SelectionResult> {
    let path = state
        .ws
        .selection(&format!("{}-{}.json", method.name(), n_select));
    let mut inputs = BTreeMap::new();
    inputs.insert("n".into(), n_select.to_string());
    inputs.insert("method".into(), method.name().into());
    match method {
        Method::Learnalign | Method::NoLearnability | Method::FeatureSimilarity => {
            let matrix = matrix_for_method(cfg, state, method)?;
            inputs.insert(
                "matrix".into(),
                sha256_file(&state.ws.feature(&format!("matrix-{}.lasm", method.name())))?,
            );
            inputs.insert(
                "include_diagonal".into(),
                cfg.selection.include_diagonal.to_string(),
            );
            stage_file("select", &path, inputs, || {
                let mut selection =
                    scoring::select_top_n_opts(&matrix, n_select, cfg.selection.include_diagonal)?;
                selection.method = match method {
                    Method::Learnalign => scoring::MethodTag::Learnalign,
                    Method::NoLearnability => scoring::MethodTag::AblationNoLearnability,
                    _ => scoring::MethodTag::AblationFeatureSimilarity,
                };
                write_json(&path, &selection)
            })?;
        }
        Method::Random => {
            let seed = seeding::derive(
                cfg.master_seed,
                &[seeding::tag("select-random"), n_select as u64],
            );
            inputs.insert("tasks".into(), state.tasks_digest.clone());
            inputs.insert("seed".into(), seed.to_string());
            let train = state.train.clone();
            stage_file("select", &path, inputs, || {
                write_json(&path, &baselines::random_select(&train, n_select, seed)?)
            })?;
        }
        Method::TokenLength => {
            inputs.insert("tasks".into(), state.tasks_digest.clone());
            let train = state.train.clone();
            stage_file("select", &path, inputs, || {
                write_json(
                    &path,
                    &baselines::token_length_select(
                        &train,
                        n_select,
                        baselines::LengthOrder::Descending,
                    )?,
                )
            })?;
        }
        Method::PplTop | Method::PplMiddle | Method::Ifd => {
            let (probe, probe_digest) = probe_params(cfg, state)?;
            inputs.insert("tasks".into(), state.tasks_digest.clone());
            inputs.insert("probe".into(), probe_digest);
            let train = state.train.clone();
            stage_file("select", &path, inputs, || {
                let selection = match method {
                    Method::PplTop => baselines::ppl_top_select(&train, &probe, n_select)?,
                    Method::PplMiddle => baselines::ppl_middle_select(&train, &probe, n_select)?,
                    _ => baselines::ifd_select(&train, &probe, n_select)?,
                };
                write_json(&path, &selection)
            })?;
        }
    }
    let selection: SelectionResult = read_json(&path)?;
    selection.validate()?;
    Ok(selection)
}

fn seeds_record(cfg: &ExperimentConfig) -> SeedsRecord {
    SeedsRecord {
        master: cfg.master_seed,
        dataset: cfg.dataset.seed,
        policy_param: cfg.policy.param_seed,
        projection: cfg.projection.seed,
    }
}

fn train_and_eval(
    cfg: &ExperimentConfig,
    state: &mut PipelineState,
    method: Method,
    selection: &SelectionResult,
) -> Result<EvalReport> {
    let started = Instant::now();
    let n_select = selection.n;
    let cell = format!("{}-{}", method.name(), n_select);
    let ckpt_path = state.ws.checkpoint(&format!("train-{cell}.ckpt"));
    let metrics_path = state.ws.metric(&format!("train-{cell}.jsonl"));
    let selection_digest =
        sha256_file(&state.ws.selection(&format!("{}-{}.json", method.name(), n_select)))?;

    let chosen: HashSet<u64> = selection.ids.iter().copied().collect();
    // Subset in ascending id order; batch order is reshuffled per epoch from
    // the derived seed anyway.
    let subset: Vec<TaskDatum> = state
        .train
        .iter()
        .filter(|d| chosen.contains(&d.id))
        .cloned()
        .collect();
    if subset.len() != n_select {
        return Err(Error::Config(format!(
            "selection for {cell} references {} unknown ids",
            n_select - subset.len()
        )));
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("base".into(), state.base_digest.clone());
    inputs.insert("selection".into(), selection_digest);
    inputs.insert("grpo".into(), digest_of(&cfg.grpo));
    inputs.insert("env".into(), digest_of(&cfg.env));
    inputs.insert("master_seed".into(), cfg.master_seed.to_string());
    let base = state.base.clone();
    let train_seed = seeding::derive(
        cfg.master_seed,
        &[seeding::tag("train"), seeding::tag(method.name()), n_select as u64],
    );
    stage_file("train", &ckpt_path, inputs, || {
        let train_cfg = GRPOConfig {
            master_seed: train_seed,
            ..cfg.grpo.clone()
        };
        let (trained, metrics) = grpo::train(base, &subset, &train_cfg, &cfg.env)?;
        trained.save(&ckpt_path)?;
        write_metrics(&metrics_path, &metrics)
    })?;
    let trained = PolicyParams::load(&ckpt_path)?;

    let report_path = state.ws.report(&format!("{cell}.json"));
    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".into(), sha256_file(&ckpt_path)?);
    inputs.insert("test".into(), sha256_file(&state.ws.tasks("test.jsonl"))?);
    inputs.insert("eval".into(), digest_of(&cfg.eval));
    let test = state.test.clone();
    let seeds = seeds_record(cfg);
    stage_file("eval", &report_path, inputs, || {
        let greedy = evaluate(&trained, &test, &cfg.env, EvalMode::Greedy, 0);
        let pass1 = evaluate(
            &trained,
            &test,
            &cfg.env,
            EvalMode::Sampled {
                k: cfg.eval.pass_k,
                temperature: cfg.eval.sample_temperature,
            },
            seeding::derive(cfg.master_seed, &[seeding::tag("eval"), n_select as u64]),
        );
        let report = EvalReport {
            method: method.name().to_string(),
            n_selected: n_select,
            greedy_accuracy: greedy,
            pass1_accuracy: pass1,
            pass1_k: cfg.eval.pass_k,
            pass1_temperature: cfg.eval.sample_temperature,
            seeds: seeds.clone(),
            wall_clock_secs: 0.0,
        };
        write_json(&report_path, &report)
    })?;
    let mut report: EvalReport = read_json(&report_path)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Run the four-step pipeline for every configured (method, N) cell:
/// warmup -> features -> score matrix -> selection, then GRPO training on
/// the selected subset starting from the base policy, then evaluation.
/// Methods that do not need gradient features (e.g. random) skip the
/// feature/scoring stages entirely.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    let mut state = prepare_common(cfg)?;
    let mut reports = Vec::new();
    for &method in &cfg.selection.methods {
        if method.needs_warmup(cfg.selection.probe_checkpoint) {
            ensure_warmup(cfg, &mut state)?;
        }
        if method.needs_features() {
            ensure_features(cfg, &mut state)?;
        }
        for &n_select in &cfg.selection.sizes {
            let selection = select_for(cfg, &mut state, method, n_select)?;
            let report = train_and_eval(cfg, &mut state, method, &selection)?;
            log::info!(
                "cell {}-{}: greedy {:.4}, pass@1 {:.4} ({:.1}s)",
                method.name(),
                n_select,
                report.greedy_accuracy,
                report.pass1_accuracy,
                report.wall_clock_secs
            );
            reports.push(report);
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Staged curriculum
// ---------------------------------------------------------------------------

/// Per-stage summary of a staged run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub selection: SelectionResult,
    pub report: EvalReport,
}

struct StagedDriver<'a> {
    cfg: &'a ExperimentConfig,
    base: &'a PolicyParams,
    stage: usize,
    snapshots: Vec<PolicyParams>,
    metrics: Vec<Vec<TrainMetrics>>,
}

impl scoring::StageDriver for StagedDriver<'_> {
    fn extract(&mut self, params: &PolicyParams, pool: &[TaskDatum]) -> Result<FeatureStore> {
        features::extract_features(
            params,
            self.base,
            pool,
            &self.cfg.env,
            &self.cfg.grpo,
            &self.cfg.projection,
            seeding::derive(
                self.cfg.master_seed,
                &[seeding::tag("staged-features"), self.stage as u64],
            ),
        )
    }

    fn train(&mut self, params: PolicyParams, selected: &[TaskDatum]) -> Result<PolicyParams> {
        let train_cfg = GRPOConfig {
            master_seed: seeding::derive(
                self.cfg.master_seed,
                &[seeding::tag("staged-train"), self.stage as u64],
            ),
            ..self.cfg.grpo.clone()
        };
        let (next, metrics) = grpo::train_with_stop(
            params,
            selected,
            &train_cfg,
            &self.cfg.env,
            StopRule::Convergence {
                max_steps: self.cfg.staged.max_steps,
                patience: self.cfg.staged.patience,
                min_improvement: self.cfg.staged.min_improvement,
            },
        )?;
        self.snapshots.push(next.clone());
        self.metrics.push(metrics);
        self.stage += 1;
        Ok(next)
    }
}

/// Staged curriculum: warmup once to obtain the stage-1 probe, then
/// iteratively select the configured fraction of the original dataset with
/// the current model, train to convergence, and continue with the remaining
/// pool. Each stage's model is evaluated on the held-out test set.
pub fn staged_run(cfg: &ExperimentConfig) -> Result<Vec<StageReport>> {
    let mut state = prepare_common(cfg)?;
    ensure_warmup(cfg, &mut state)?;
    let start = state.warm.clone().unwrap();
    let mut driver = StagedDriver {
        cfg,
        base: &state.base,
        stage: 0,
        snapshots: Vec::new(),
        metrics: Vec::new(),
    };
    let (selections, _final_params) = scoring::staged_select(
        &state.train,
        &cfg.selection.staged_fractions,
        start,
        &mut driver,
    )
    .map_err(|e| e.in_stage("staged-select"))?;

    let seeds = seeds_record(cfg);
    let mut out = Vec::with_capacity(selections.len());
    for (stage, (selection, snapshot)) in selections
        .iter()
        .zip(driver.snapshots.iter())
        .enumerate()
    {
        let greedy = evaluate(snapshot, &state.test, &cfg.env, EvalMode::Greedy, 0);
        let pass1 = evaluate(
            snapshot,
            &state.test,
            &cfg.env,
            EvalMode::Sampled {
                k: cfg.eval.pass_k,
                temperature: cfg.eval.sample_temperature,
            },
            seeding::derive(cfg.master_seed, &[seeding::tag("staged-eval"), stage as u64]),
        );
        let report = StageReport {
            stage,
            selection: selection.clone(),
            report: EvalReport {
                method: format!("staged-learnalign-{stage}"),
                n_selected: selection.n,
                greedy_accuracy: greedy,
                pass1_accuracy: pass1,
                pass1_k: cfg.eval.pass_k,
                pass1_temperature: cfg.eval.sample_temperature,
                seeds: seeds.clone(),
                wall_clock_secs: 0.0,
            },
        };
        write_json(&state.ws.report(&format!("staged-{stage}.json")), &report)?;
        write_metrics(
            &state.ws.metric(&format!("staged-train-{stage}.jsonl")),
            &driver.metrics[stage],
        )?;
        out.push(report);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

pub struct ReportPaths {
    pub table: PathBuf,
    pub curves: PathBuf,
}

/// JSON float formatting, so CSV cells match the persisted reports exactly.
fn json_num(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

/// Assemble the comparison table (CSV; rows by method name, columns by N
/// ascending; missing cells stay empty) and per-step training curves as
/// line-delimited records.
pub fn report(out_dir: &Path) -> Result<ReportPaths> {
    let reports_dir = out_dir.join("reports");
    let mut cells: BTreeMap<(String, usize), EvalReport> = BTreeMap::new();
    if reports_dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&reports_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            if let Ok(r) = read_json::<EvalReport>(&path) {
                cells.insert((r.method.clone(), r.n_selected), r);
            } else if let Ok(s) = read_json::<StageReport>(&path) {
                cells.insert((s.report.method.clone(), s.report.n_selected), s.report);
            } else {
                log::warn!("report: skipping unparseable {path:?}");
            }
        }
    }

    let mut methods: Vec<String> = cells.keys().map(|(m, _)| m.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut sizes: Vec<usize> = cells.keys().map(|&(_, n)| n).collect();
    sizes.sort_unstable();
    sizes.dedup();

    let table_path = out_dir.join("table.csv");
    let mut table = String::from("method");
    for n in &sizes {
        table.push_str(&format!(",{n}"));
    }
    table.push('\n');
    for method in &methods {
        table.push_str(method);
        for &n in &sizes {
            table.push(',');
            if let Some(r) = cells.get(&(method.clone(), n)) {
                table.push_str(&json_num(r.greedy_accuracy));
            }
        }
        table.push('\n');
    }
    std::fs::write(&table_path, table)?;

    let curves_path = out_dir.join("curves.jsonl");
    let mut curves = std::io::BufWriter::new(std::fs::File::create(&curves_path)?);
    let metrics_dir = out_dir.join("metrics");
    if metrics_dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&metrics_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&path)?;
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let m: TrainMetrics = match serde_json::from_str(line) {
                    Ok(m) => m,
                    Err(_) => continue,
                };
                let record = serde_json::json!({
                    "run": name,
                    "step": m.step,
                    "objective": m.objective,
                    "mean_reward": m.mean_reward,
                    "mean_kl": m.mean_kl,
                });
                writeln!(curves, "{record}")?;
            }
        }
    }
    curves.flush()?;
    Ok(ReportPaths {
        table: table_path,
        curves: curves_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(root: &Path) -> ExperimentConfig {
        ExperimentConfig {
            master_seed: 11,
            out_dir: root.to_path_buf(),
            dataset: DatasetSpec {
                kind: TaskKind::ChainedSum,
                n_train: 60,
                n_test: 20,
                seed: 2,
            },
            policy: policy::PolicyConfig {
                vocab_size: 16,
                window: 6,
                embed_dim: 4,
                hidden_dims: vec![8],
                param_seed: 3,
            },
            grpo: GRPOConfig {
                group_size: 4,
                steps: 6,
                batch_size: 8,
                ..GRPOConfig::default()
            },
            warmup: WarmupSpec {
                size: Some(8),
                steps: 4,
            },
            projection: ProjectionSpec {
                dim: 16,
                seed: 5,
                scheme: features::ProjectionScheme::Rademacher,
            },
            selection: SelectionSpec {
                sizes: vec![10],
                methods: vec![Method::Learnalign, Method::Random],
                staged_fractions: vec![0.5, 0.3, 0.2],
                include_diagonal: true,
                probe_checkpoint: ProbeCheckpoint::Warmup,
            },
            eval: EvalSpec {
                pass_k: 2,
                sample_temperature: 0.7,
            },
            env: TaskEnv {
                horizon: 12,
                ..TaskEnv::default()
            },
            staged: StagedSpec {
                max_steps: 5,
                patience: 3,
                min_improvement: 0.001,
            },
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("learnalign".parse::<Method>().unwrap(), Method::Learnalign);
        assert_eq!("ppl-top".parse::<Method>().unwrap(), Method::PplTop);
        assert!(matches!("frobnicate".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_catches_bad_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path());
        cfg.selection.sizes = vec![0];
        assert!(cfg.validate().is_err());
        let mut cfg = quick_config(dir.path());
        cfg.selection.sizes = vec![1000];
        assert!(cfg.validate().is_err());
        let mut cfg = quick_config(dir.path());
        cfg.selection.methods.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_warmup_size_is_four_percent() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path());
        cfg.warmup.size = None;
        cfg.dataset.n_train = 2000;
        assert_eq!(cfg.warmup_size(), 80);
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let text = r#"
            master_seed = 9
            out_dir = "runs/demo"

            [dataset]
            kind = "chained-sum"
            n_train = 100
            n_test = 30
            seed = 4
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.master_seed, 9);
        assert_eq!(cfg.dataset.n_train, 100);
        // Untouched sections get defaults.
        assert_eq!(cfg.grpo.group_size, 8);
        assert_eq!(cfg.projection.dim, 512);
    }

    #[test]
    fn pipeline_runs_and_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(&dir.path().join("run"));
        let reports = run_pipeline(&cfg).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert!((0.0..=1.0).contains(&r.greedy_accuracy));
            assert!((0.0..=1.0).contains(&r.pass1_accuracy));
        }

        // Second run over the same directory: every artifact is a cache hit
        // and file contents stay identical.
        let root = cfg.resolved_out_dir();
        let before = snapshot(&root);
        let reports2 = run_pipeline(&cfg).unwrap();
        let after = snapshot(&root);
        assert_eq!(before, after, "cache hit must not rewrite artifacts");
        for (a, b) in reports.iter().zip(&reports2) {
            assert_eq!(a.greedy_accuracy, b.greedy_accuracy);
            assert_eq!(a.pass1_accuracy, b.pass1_accuracy);
        }
    }

    fn snapshot(root: &Path) -> BTreeMap<PathBuf, (u64, std::time::SystemTime)> {
        let mut out = BTreeMap::new();
        for sub in ["tasks", "checkpoints", "features", "selections", "reports"] {
            let dir = root.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for entry in std::fs::read_dir(&dir).unwrap().flatten() {
                let meta = entry.metadata().unwrap();
                out.insert(entry.path(), (meta.len(), meta.modified().unwrap()));
            }
        }
        out
    }

    #[test]
    fn sampled_eval_at_zero_temperature_equals_greedy() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(&dir.path().join("run"));
        let params = PolicyParams::init(cfg.policy.clone()).unwrap();
        let tasks = mdp_env::generate_task_set(TaskKind::ChainedSum, 30, 8).unwrap();
        let greedy = evaluate(&params, &tasks, &cfg.env, EvalMode::Greedy, 0);
        let sampled = evaluate(
            &params,
            &tasks,
            &cfg.env,
            EvalMode::Sampled {
                k: 3,
                temperature: 0.0,
            },
            9,
        );
        assert_eq!(greedy, sampled);
    }

    #[test]
    fn untrained_policy_fails_long_answers() {
        // Chance level on a 4-digit answer with vocabulary 16 is far below
        // 1%.
        let params = PolicyParams::init(policy::PolicyConfig::default()).unwrap();
        let env = TaskEnv::default();
        let tasks: Vec<TaskDatum> = (0..200)
            .map(|i| TaskDatum {
                id: i,
                prompt: vec![mdp_env::digit_token((i % 10) as u8)],
                answer: vec![
                    mdp_env::digit_token((i % 10) as u8),
                    mdp_env::digit_token(((i / 10) % 10) as u8),
                    mdp_env::digit_token(3),
                    mdp_env::digit_token(7),
                ],
                kind: TaskKind::ChainedSum,
            })
            .collect();
        let acc = evaluate(&params, &tasks, &env, EvalMode::Greedy, 0);
        assert!(acc < 0.01, "accuracy {acc}");
    }

    #[test]
    fn report_handles_empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("reports")).unwrap();
        let paths = report(dir.path()).unwrap();
        let table = std::fs::read_to_string(&paths.table).unwrap();
        assert_eq!(table, "method\n");
    }

    #[test]
    fn report_table_matches_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(&dir.path().join("run"));
        let reports = run_pipeline(&cfg).unwrap();
        let paths = report(&cfg.resolved_out_dir()).unwrap();
        let table = std::fs::read_to_string(&paths.table).unwrap();
        let mut lines = table.lines();
        assert_eq!(lines.next(), Some("method,10"));
        for r in &reports {
            assert!(
                table.contains(&json_num(r.greedy_accuracy)),
                "table missing cell for {}",
                r.method
            );
        }
        // Rows sorted by method name.
        let rows: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        let mut sorted = rows.clone();
        sorted.sort();
        assert_eq!(rows, sorted);
        assert!(paths.curves.exists());
    }

    #[test]
    fn staged_run_stage_count_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(&dir.path().join("staged"));
        cfg.dataset.n_train = 40;
        cfg.dataset.n_test = 10;
        let stages = staged_run(&cfg).unwrap();
        assert_eq!(stages.len(), 3);
        assert_eq!(stages[0].selection.n, 20);
        assert_eq!(stages[1].selection.n, 12);
        assert_eq!(stages[2].selection.n, 8);
        let mut all: Vec<u64> = stages
            .iter()
            .flat_map(|s| s.selection.ids.clone())
            .collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total);
    }
}
