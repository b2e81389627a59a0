//! Small autoregressive categorical policy with exact analytic gradients.
//!
//! The network is a fixed-window MLP: the last `window` tokens of the state
//! (left-padded with `PAD`) are embedded, concatenated, and passed through
//! tanh hidden layers to a linear logit head over the vocabulary. tanh keeps
//! the objective smooth, which the finite-difference oracles and the
//! second-order residual checks rely on. All arithmetic is f64.
//!
//! Parameters live in one flat vector:
//!
//!   [ embedding (vocab x embed, row-major)
//!   | layer 0 weights (in x out, row-major) | layer 0 bias
//!   | layer 1 weights | layer 1 bias | ... ]
//!
//! `PolicyParams` snapshots are immutable; updates produce new snapshots, so
//! forward and gradient passes may run concurrently against a snapshot.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{check_magic, check_version, write_f64, write_u16, write_u32, write_u64, CountingReader};
use crate::error::{Error, Result};
use crate::mdp_env::{TaskDatum, Token, Trajectory, EOS, PAD};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LAPC";
const CHECKPOINT_VERSION: u16 = 1;

/// Network shape plus the seed its initial parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    /// Context window: number of trailing state tokens fed to the network.
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub param_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            window: 8,
            embed_dim: 8,
            hidden_dims: vec![32],
            param_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.window == 0 || self.embed_dim == 0 {
            return Err(Error::Config("window and embed_dim must be >= 1".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("hidden dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Linear layer dimensions: input, hiddens, vocabulary.
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.window * self.embed_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.vocab_size);
        dims
    }

    /// Total number of parameters D.
    pub fn param_count(&self) -> usize {
        let mut count = self.vocab_size * self.embed_dim;
        let dims = self.layer_dims();
        for pair in dims.windows(2) {
            count += pair[0] * pair[1] + pair[1];
        }
        count
    }

    fn layout(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut offset = self.vocab_size * self.embed_dim;
        let dims = self.layer_dims();
        for pair in dims.windows(2) {
            let (input, output) = (pair[0], pair[1]);
            layers.push(Layer {
                w_off: offset,
                b_off: offset + input * output,
                input,
                output,
            });
            offset += input * output + output;
        }
        layers
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w_off: usize,
    b_off: usize,
    input: usize,
    output: usize,
}

/// Immutable parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    theta: Vec<f64>,
}

/// Flat gradient with the same layout as the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl PolicyParams {
    /// Scaled-uniform initialization: each weight drawn from
    /// U[-1/sqrt(fan_in), +1/sqrt(fan_in)], embeddings from
    /// U[-1/sqrt(embed_dim), +1/sqrt(embed_dim)], in layout order from
    /// `config.param_seed`.
    pub fn init(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
        let mut theta = Vec::with_capacity(config.param_count());
        let embed_bound = 1.0 / (config.embed_dim as f64).sqrt();
        for _ in 0..config.vocab_size * config.embed_dim {
            theta.push(rng.gen_range(-embed_bound..=embed_bound));
        }
        let dims = config.layer_dims();
        for pair in dims.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            for _ in 0..pair[0] * pair[1] + pair[1] {
                theta.push(rng.gen_range(-bound..=bound));
            }
        }
        Ok(Self { config, theta })
    }

    pub fn zeroed(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let n = config.param_count();
        Ok(Self {
            config,
            theta: vec![0.0; n],
        })
    }

    pub fn from_theta(config: PolicyConfig, theta: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if theta.len() != config.param_count() {
            return Err(Error::ShapeMismatch {
                expected: config.param_count(),
                got: theta.len(),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite parameter value".into()));
        }
        Ok(Self { config, theta })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// New snapshot with `update` added (SGD ascent step of size `scale`).
    pub fn step(&self, update: &GradientVector, scale: f64) -> Result<Self> {
        if update.values.len() != self.theta.len() {
            return Err(Error::ShapeMismatch {
                expected: self.theta.len(),
                got: update.values.len(),
            });
        }
        let theta = self
            .theta
            .iter()
            .zip(&update.values)
            .map(|(t, g)| t + scale * g)
            .collect();
        Ok(Self {
            config: self.config.clone(),
            theta,
        })
    }

    /// Perturb a single coordinate (finite-difference probes in tests).
    pub fn with_coord(&self, index: usize, value: f64) -> Self {
        let mut theta = self.theta.clone();
        theta[index] = value;
        Self {
            config: self.config.clone(),
            theta,
        }
    }

    /// Serialized checkpoint bytes (also the hashing domain for `digest`).
    fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.window as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.embed_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.hidden_dims.len() as u32).to_le_bytes());
        for &h in &self.config.hidden_dims {
            buf.extend_from_slice(&(h as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.config.param_seed.to_le_bytes());
        buf.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for &v in &self.theta {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// SHA-256 of the checkpoint serialization.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.checkpoint_bytes());
        hasher.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        write_u16(&mut file, CHECKPOINT_VERSION)?;
        write_u32(&mut file, self.config.vocab_size as u32)?;
        write_u32(&mut file, self.config.window as u32)?;
        write_u32(&mut file, self.config.embed_dim as u32)?;
        write_u32(&mut file, self.config.hidden_dims.len() as u32)?;
        for &h in &self.config.hidden_dims {
            write_u32(&mut file, h as u32)?;
        }
        write_u64(&mut file, self.config.param_seed)?;
        write_u64(&mut file, self.theta.len() as u64)?;
        for &v in &self.theta {
            write_f64(&mut file, v)?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = CountingReader::new(BufReader::new(std::fs::File::open(path)?));
        check_magic(&mut r, CHECKPOINT_MAGIC)?;
        check_version(&mut r, CHECKPOINT_VERSION)?;
        let vocab_size = r.u32_header()? as usize;
        let window = r.u32_header()? as usize;
        let embed_dim = r.u32_header()? as usize;
        let n_hidden = r.u32_header()? as usize;
        if n_hidden > 64 {
            return Err(Error::CorruptHeader(format!(
                "implausible hidden layer count {n_hidden}"
            )));
        }
        let mut hidden_dims = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden_dims.push(r.u32_header()? as usize);
        }
        let param_seed = r.u64_header()?;
        let config = PolicyConfig {
            vocab_size,
            window,
            embed_dim,
            hidden_dims,
            param_seed,
        };
        config.validate().map_err(|e| match e {
            Error::Config(msg) => Error::CorruptHeader(msg),
            other => other,
        })?;
        let declared = r.u64_header()? as usize;
        if declared != config.param_count() {
            return Err(Error::HeaderMismatch(format!(
                "parameter count {declared} does not match config ({} expected)",
                config.param_count()
            )));
        }
        let mut theta = Vec::with_capacity(declared);
        for _ in 0..declared {
            theta.push(r.f64_record()?);
        }
        r.expect_eof("checkpoint")?;
        Self::from_theta(config, theta)
    }
}

/// A sampled completion plus the per-token log-probabilities of its tokens
/// under the sampling parameters (the untempered model distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub log_probs: Vec<f64>,
}

fn context_window(prompt: &[Token], generated: &[Token], window: usize) -> Vec<Token> {
    let total = prompt.len() + generated.len();
    let mut ctx = vec![PAD; window];
    let take = total.min(window);
    for slot in 0..take {
        // Token at position total - take + slot of the concatenated state.
        let pos = total - take + slot;
        let tok = if pos < prompt.len() {
            prompt[pos]
        } else {
            generated[pos - prompt.len()]
        };
        ctx[window - take + slot] = tok;
    }
    ctx
}

struct ForwardCache {
    /// inputs[0] is the concatenated embedding; inputs[l] for l > 0 is the
    /// tanh output feeding linear layer l.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn forward(params: &PolicyParams, ctx: &[Token]) -> ForwardCache {
    let cfg = &params.config;
    debug_assert_eq!(ctx.len(), cfg.window);
    let theta = &params.theta;
    let mut x0 = Vec::with_capacity(cfg.window * cfg.embed_dim);
    for &tok in ctx {
        let row = tok as usize * cfg.embed_dim;
        x0.extend_from_slice(&theta[row..row + cfg.embed_dim]);
    }
    let layers = cfg.layout();
    let mut inputs = Vec::with_capacity(layers.len());
    inputs.push(x0);
    let mut logits = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let x = &inputs[l];
        let mut z = theta[layer.b_off..layer.b_off + layer.output].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = layer.w_off + i * layer.output;
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += xi * theta[row + j];
            }
        }
        if l + 1 < layers.len() {
            inputs.push(z.iter().map(|v| v.tanh()).collect());
        } else {
            logits = z;
        }
    }
    ForwardCache { inputs, logits }
}

/// Raw logits over the vocabulary for a state; the trailing `window` tokens
/// are used, left-padded with PAD.
pub fn logits(params: &PolicyParams, state: &[Token]) -> Vec<f64> {
    let ctx = context_window(state, &[], params.config.window);
    forward(params, &ctx).logits
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&l| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-token log pi(y_t | prompt, y_<t) for every generated token.
pub fn log_prob(params: &PolicyParams, datum: &TaskDatum, trajectory: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(trajectory.tokens.len());
    for (t, &tok) in trajectory.tokens.iter().enumerate() {
        let ctx = context_window(&datum.prompt, &trajectory.tokens[..t], params.config.window);
        let cache = forward(params, &ctx);
        let lsm = log_softmax(&cache.logits);
        out.push(lsm[tok as usize]);
    }
    out
}

/// Autoregressively sample a completion. Temperature 0 is greedy decoding
/// (ties broken toward the lowest token id); positive temperatures sample
/// from softmax(logits / temperature). Bit-deterministic given `seed`.
pub fn sample(
    params: &PolicyParams,
    datum: &TaskDatum,
    temperature: f64,
    horizon: usize,
    seed: u64,
) -> Rollout {
    assert!(temperature >= 0.0, "temperature must be >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<Token> = Vec::new();
    let mut log_probs = Vec::new();
    let mut terminated = false;
    while tokens.len() < horizon {
        let ctx = context_window(&datum.prompt, &tokens, params.config.window);
        let cache = forward(params, &ctx);
        let lsm = log_softmax(&cache.logits);
        let choice = if temperature == 0.0 {
            let mut best = 0usize;
            for (i, &l) in cache.logits.iter().enumerate() {
                if l > cache.logits[best] {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = cache.logits.iter().map(|&l| l / temperature).collect();
            let probs = softmax(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let tok = choice as Token;
        tokens.push(tok);
        log_probs.push(lsm[choice]);
        if tok == EOS {
            terminated = true;
            break;
        }
    }
    Rollout {
        trajectory: Trajectory {
            datum_id: datum.id,
            tokens,
            terminated,
        },
        log_probs,
    }
}

/// Accumulate `scale * sum_t weights[t] * grad log pi(y_t | ...)` into `out`.
pub(crate) fn accumulate_weighted_grad(
    params: &PolicyParams,
    prompt: &[Token],
    tokens: &[Token],
    weights: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(tokens.len(), weights.len());
    debug_assert_eq!(out.len(), params.theta.len());
    let cfg = &params.config;
    let layers = cfg.layout();
    let theta = &params.theta;
    for (t, (&tok, &w)) in tokens.iter().zip(weights).enumerate() {
        let weight = w * scale;
        if weight == 0.0 {
            continue;
        }
        let ctx = context_window(prompt, &tokens[..t], cfg.window);
        let cache = forward(params, &ctx);
        let probs = softmax(&cache.logits);
        // d log p(y) / d logits = onehot(y) - softmax(logits)
        let mut dz: Vec<f64> = probs.iter().map(|&p| -p * weight).collect();
        dz[tok as usize] += weight;
        for (l, layer) in layers.iter().enumerate().rev() {
            let x = &cache.inputs[l];
            let mut dx = vec![0.0; layer.input];
            for (i, &xi) in x.iter().enumerate() {
                let row = layer.w_off + i * layer.output;
                let mut acc = 0.0;
                for (j, &dzj) in dz.iter().enumerate() {
                    out[row + j] += xi * dzj;
                    acc += theta[row + j] * dzj;
                }
                dx[i] = acc;
            }
            for (j, &dzj) in dz.iter().enumerate() {
                out[layer.b_off + j] += dzj;
            }
            if l > 0 {
                // Through tanh: x = tanh(z)  =>  dz = dx * (1 - x^2).
                dz = dx
                    .iter()
                    .zip(x)
                    .map(|(&dxi, &xi)| dxi * (1.0 - xi * xi))
                    .collect();
            } else {
                // Into the embedding rows of the window tokens.
                for (slot, &ctok) in ctx.iter().enumerate() {
                    let row = ctok as usize * cfg.embed_dim;
                    for q in 0..cfg.embed_dim {
                        out[row + q] += dx[slot * cfg.embed_dim + q];
                    }
                }
            }
        }
    }
}

/// Exact gradient of the summed per-token log-probabilities of a trajectory.
pub fn grad_log_prob(
    params: &PolicyParams,
    datum: &TaskDatum,
    trajectory: &Trajectory,
) -> GradientVector {
    let mut out = vec![0.0; params.theta.len()];
    let weights = vec![1.0; trajectory.tokens.len()];
    accumulate_weighted_grad(
        params,
        &datum.prompt,
        &trajectory.tokens,
        &weights,
        1.0,
        &mut out,
    );
    GradientVector { values: out }
}

/// Mean of the embedding rows of a prompt's tokens (used by the
/// feature-similarity ablation scorer).
pub fn mean_prompt_embedding(params: &PolicyParams, prompt: &[Token]) -> Vec<f64> {
    let cfg = &params.config;
    let mut acc = vec![0.0; cfg.embed_dim];
    for &tok in prompt {
        let row = tok as usize * cfg.embed_dim;
        for (q, a) in acc.iter_mut().enumerate() {
            *a += params.theta[row + q];
        }
    }
    let n = prompt.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp_env::{digit_token, TaskKind, ANS, PLUS};

    fn tiny_config(seed: u64) -> PolicyConfig {
        PolicyConfig {
            vocab_size: 16,
            window: 3,
            embed_dim: 2,
            hidden_dims: vec![4],
            param_seed: seed,
        }
    }

    fn sample_datum() -> TaskDatum {
        TaskDatum {
            id: 7,
            prompt: vec![digit_token(1), PLUS, digit_token(2)],
            answer: vec![digit_token(3)],
            kind: TaskKind::ChainedSum,
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let cfg = tiny_config(0);
        // embed 16*2=32, layer0 6*4+4=28, layer1 4*16+16=80 -> 140
        assert_eq!(cfg.param_count(), 140);
        let params = PolicyParams::init(cfg).unwrap();
        assert_eq!(params.len(), 140);
        assert!(params.theta().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let params = PolicyParams::zeroed(tiny_config(0)).unwrap();
        let l = logits(&params, &[digit_token(5), digit_token(2)]);
        assert_eq!(l.len(), 16);
        for &v in &l {
            assert_eq!(v, l[0]);
        }
    }

    #[test]
    fn logits_are_pure() {
        let params = PolicyParams::init(tiny_config(3)).unwrap();
        let state = vec![digit_token(4), PLUS, digit_token(9), ANS];
        assert_eq!(logits(&params, &state), logits(&params, &state));
    }

    #[test]
    fn logits_continuous_in_parameters() {
        let params = PolicyParams::init(tiny_config(5)).unwrap();
        let state = vec![digit_token(4), PLUS, digit_token(9)];
        let base = logits(&params, &state);
        // Coordinate 32 is the first hidden-layer weight, live for every
        // context (embedding rows of unused tokens would not move logits).
        let coord = 32;
        let mut last_max = f64::INFINITY;
        for &delta in &[1e-2, 1e-3, 1e-4] {
            let perturbed = params.with_coord(coord, params.theta()[coord] + delta);
            let got = logits(&perturbed, &state);
            let max_change = base
                .iter()
                .zip(&got)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(
                max_change > 0.0 && max_change < last_max,
                "delta {delta}: {max_change} vs {last_max}"
            );
            last_max = max_change;
        }
        assert!(last_max < 1e-3);
    }

    #[test]
    fn uniform_policy_log_probs() {
        let params = PolicyParams::zeroed(tiny_config(0)).unwrap();
        let datum = sample_datum();
        let traj = Trajectory {
            datum_id: 7,
            tokens: vec![ANS, digit_token(3), EOS],
            terminated: true,
        };
        let lp = log_prob(&params, &datum, &traj);
        for &v in &lp {
            assert!((v - (-(16f64).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn log_probs_normalize() {
        let params = PolicyParams::init(tiny_config(11)).unwrap();
        let datum = sample_datum();
        for prefix_len in 0..3usize {
            let gen: Vec<Token> = (0..prefix_len).map(|i| digit_token(i as u8)).collect();
            let ctx = context_window(&datum.prompt, &gen, params.config.window);
            let cache = forward(&params, &ctx);
            let lsm = log_softmax(&cache.logits);
            let total: f64 = lsm.iter().map(|&l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9, "sum {total}");
            assert!(lsm.iter().all(|&l| l <= 1e-12));
        }
    }

    #[test]
    fn greedy_token_has_max_log_prob() {
        let params = PolicyParams::init(tiny_config(13)).unwrap();
        let datum = sample_datum();
        let greedy = sample(&params, &datum, 0.0, 8, 0);
        for (t, &tok) in greedy.trajectory.tokens.iter().enumerate() {
            let ctx = context_window(&datum.prompt, &greedy.trajectory.tokens[..t], 3);
            let lsm = log_softmax(&forward(&params, &ctx).logits);
            let max = lsm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lsm[tok as usize] >= max - 1e-15);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let params = PolicyParams::init(tiny_config(17)).unwrap();
        let datum = sample_datum();
        let a = sample(&params, &datum, 1.0, 16, 99);
        let b = sample(&params, &datum, 1.0, 16, 99);
        assert_eq!(a, b);
        let g1 = sample(&params, &datum, 0.0, 16, 1);
        let g2 = sample(&params, &datum, 0.0, 16, 2);
        assert_eq!(g1, g2, "greedy must not depend on the seed");
    }

    #[test]
    fn trajectory_respects_horizon_and_eos() {
        let params = PolicyParams::init(tiny_config(19)).unwrap();
        let datum = sample_datum();
        for seed in 0..20 {
            let r = sample(&params, &datum, 1.0, 10, seed);
            assert!(r.trajectory.tokens.len() <= 10);
            assert_eq!(r.trajectory.tokens.len(), r.log_probs.len());
            if r.trajectory.terminated {
                assert_eq!(*r.trajectory.tokens.last().unwrap(), EOS);
            } else {
                assert_eq!(r.trajectory.tokens.len(), 10);
            }
        }
    }

    #[test]
    fn step1_token_frequencies_match_softmax() {
        let params = PolicyParams::init(tiny_config(23)).unwrap();
        let datum = sample_datum();
        let ctx = context_window(&datum.prompt, &[], params.config.window);
        let probs = softmax(&forward(&params, &ctx).logits);
        let n = 10_000usize;
        let mut counts = vec![0usize; 16];
        for seed in 0..n {
            let r = sample(&params, &datum, 1.0, 1, seed as u64);
            counts[r.trajectory.tokens[0] as usize] += 1;
        }
        for (tok, &c) in counts.iter().enumerate() {
            let p = probs[tok];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = c as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma + 1e-9,
                "token {tok}: freq {freq} vs p {p} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn empty_trajectory_has_zero_gradient() {
        let params = PolicyParams::init(tiny_config(29)).unwrap();
        let datum = sample_datum();
        let traj = Trajectory {
            datum_id: 7,
            tokens: vec![],
            terminated: false,
        };
        let g = grad_log_prob(&params, &datum, &traj);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_additive_over_tokens() {
        let params = PolicyParams::init(tiny_config(31)).unwrap();
        let datum = sample_datum();
        let tokens = vec![ANS, digit_token(3), EOS];
        let traj = Trajectory {
            datum_id: 7,
            tokens: tokens.clone(),
            terminated: true,
        };
        let full = grad_log_prob(&params, &datum, &traj);
        let mut summed = vec![0.0; params.len()];
        for t in 0..tokens.len() {
            let mut weights = vec![0.0; tokens.len()];
            weights[t] = 1.0;
            accumulate_weighted_grad(&params, &datum.prompt, &tokens, &weights, 1.0, &mut summed);
        }
        for (a, b) in full.values.iter().zip(&summed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central finite differences of the summed log-probability against the
    /// analytic gradient, over randomly initialized tiny policies.
    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let h = 1e-5;
        for case in 0..20u64 {
            let params = PolicyParams::init(tiny_config(100 + case)).unwrap();
            let datum = sample_datum();
            let rollout = sample(&params, &datum, 1.0, 6, 1000 + case);
            if rollout.trajectory.tokens.is_empty() {
                continue;
            }
            let analytic = grad_log_prob(&params, &datum, &rollout.trajectory);
            let objective = |p: &PolicyParams| -> f64 {
                log_prob(p, &datum, &rollout.trajectory).iter().sum()
            };
            for i in 0..params.len() {
                let base = params.theta()[i];
                let plus = objective(&params.with_coord(i, base + h));
                let minus = objective(&params.with_coord(i, base - h));
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic.values[i];
                if fd.abs() < 1e-7 && a.abs() < 1e-7 {
                    continue;
                }
                let rel = (a - fd).abs() / fd.abs().max(a.abs());
                assert!(
                    rel < 1e-4,
                    "case {case} coord {i}: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let params = PolicyParams::init(tiny_config(41)).unwrap();
        params.save(&path).unwrap();
        let loaded = PolicyParams::load(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(params.digest(), loaded.digest());
    }

    #[test]
    fn checkpoint_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let params = PolicyParams::init(tiny_config(43)).unwrap();
        params.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.ckpt");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(
            PolicyParams::load(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let bad_version = dir.path().join("bad_version.ckpt");
        let mut b = bytes.clone();
        b[4] = 9;
        std::fs::write(&bad_version, &b).unwrap();
        assert!(matches!(
            PolicyParams::load(&bad_version),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            PolicyParams::load(&truncated),
            Err(Error::TruncatedRecord { .. })
        ));
    }

    #[test]
    fn context_window_pads_left() {
        let ctx = context_window(&[9, 8], &[7], 5);
        assert_eq!(ctx, vec![PAD, PAD, 9, 8, 7]);
        let ctx = context_window(&[1, 2, 3], &[4, 5, 6], 4);
        assert_eq!(ctx, vec![3, 4, 5, 6]);
    }
}
