//! Group Relative Policy Optimization: objective, advantages, KL estimator,
//! per-datum policy gradient, and the training loop.
//!
//! The maximized objective over a batch of rollout groups is
//!
//!   J(theta) = mean_groups (1/G) sum_i (1/|o_i|) sum_t
//!                [ min(r_t * A_i, clip(r_t, 1-eps, 1+eps) * A_i)
//!                  - beta * kl_t ]
//!
//! with importance ratio r_t = pi_theta(o_t|.) / pi_old(o_t|.), the
//! group-relative advantage
//!
//!   A_i = (R_i - mean(R)) / std(R)          (population std; all-zero when
//!                                            std falls below a small floor)
//!
//! assigned uniformly to every token of rollout i, and the non-negative
//! per-token KL estimate
//!
//!   kl_t = pi_ref/pi_theta - log(pi_ref/pi_theta) - 1.
//!
//! At the sampling parameters the ratios are 1 and the gradient reduces to
//!
//!   (1/G) sum_i (1/|o_i|) sum_t [A_i + beta (pi_ref/pi_theta - 1)]
//!                               * grad log pi_theta(o_t|.)
//!
//! which is what `grpo_gradient` computes. Training is plain SGD ascent with
//! a single optimization step per rollout batch, so updates stay at the
//! on-policy point where that gradient form is exact.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp_env::{verify_answer, TaskDatum, TaskEnv, Token};
use crate::policy::{self, GradientVector, PolicyParams, Rollout};
use crate::seeding;

/// Hyperparameters for rollout generation and the update rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GRPOConfig {
    /// Rollouts per datum (G).
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Rollout sampling temperature.
    pub temperature: f64,
    /// Step budget for `train`.
    pub steps: usize,
    pub master_seed: u64,
    /// Groups whose reward std falls below this floor get all-zero
    /// advantages instead of dividing by (near) zero.
    pub std_floor: f64,
}

impl Default for GRPOConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 0.05,
            batch_size: 16,
            temperature: 1.0,
            steps: 400,
            master_seed: 0,
            std_floor: 1e-8,
        }
    }
}

impl GRPOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config("clip_epsilon must be in (0, 1)".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::Config("kl_beta must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.std_floor < 0.0 {
            return Err(Error::Config("std_floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// G rollouts for one datum with rewards, normalized advantages, and the
/// success rate p (fraction of rollouts whose extracted answer is correct).
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub datum_id: u64,
    pub prompt: Vec<Token>,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub success_rate: f64,
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub grad_norm: f64,
    pub wall_clock_secs: f64,
}

/// Group-relative advantages: (r_i - mean) / population std, or all zeros
/// when the std is below `std_floor`.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    if std < std_floor {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Per-token KL estimate r - log r - 1 with r = pi_ref / pi_theta, computed
/// in log space. Non-negative for all finite inputs, zero when the two
/// log-probabilities agree.
pub fn kl_term(logp_theta: f64, logp_ref: f64) -> f64 {
    let log_ratio = logp_ref - logp_theta;
    log_ratio.exp() - log_ratio - 1.0
}

/// Sample a rollout group for one datum. Rollout k uses the sub-seed
/// derived from (seed, datum id, k), so groups are schedule-independent.
pub fn sample_group(
    params: &PolicyParams,
    datum: &TaskDatum,
    env: &TaskEnv,
    group_size: usize,
    temperature: f64,
    std_floor: f64,
    seed: u64,
) -> RolloutGroup {
    let mut rollouts = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    let mut successes = 0usize;
    for k in 0..group_size {
        let rollout = policy::sample(
            params,
            datum,
            temperature,
            env.horizon,
            seeding::rollout_seed(seed, datum.id, k as u64),
        );
        rewards.push(env.reward(&rollout.trajectory, datum));
        if verify_answer(&rollout.trajectory, datum) {
            successes += 1;
        }
        rollouts.push(rollout);
    }
    let advantages = compute_advantages(&rewards, std_floor);
    RolloutGroup {
        datum_id: datum.id,
        prompt: datum.prompt.clone(),
        rollouts,
        rewards,
        advantages,
        success_rate: successes as f64 / group_size as f64,
    }
}

fn check_same_shape(a: &PolicyParams, b: &PolicyParams) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

fn datum_view(group: &RolloutGroup) -> TaskDatum {
    // log_prob only touches the prompt; answer/kind are placeholders.
    TaskDatum {
        id: group.datum_id,
        prompt: group.prompt.clone(),
        answer: vec![0],
        kind: crate::mdp_env::TaskKind::ChainedSum,
    }
}

/// The clipped surrogate objective with the KL penalty, averaged per group
/// over rollouts and tokens and then over groups. Rollouts must have been
/// sampled under `old_params`.
pub fn grpo_objective(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GRPOConfig,
) -> Result<f64> {
    check_same_shape(params, old_params)?;
    check_same_shape(params, ref_params)?;
    let eps = config.clip_epsilon;
    let mut total = 0.0;
    for group in groups {
        let datum = datum_view(group);
        let g = group.rollouts.len() as f64;
        let mut group_term = 0.0;
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            let len = rollout.trajectory.tokens.len();
            if len == 0 {
                continue;
            }
            let lp_new = policy::log_prob(params, &datum, &rollout.trajectory);
            let lp_old = policy::log_prob(old_params, &datum, &rollout.trajectory);
            let lp_ref = policy::log_prob(ref_params, &datum, &rollout.trajectory);
            let mut token_sum = 0.0;
            for t in 0..len {
                let ratio = (lp_new[t] - lp_old[t]).exp();
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
                let surrogate = (ratio * adv).min(clipped * adv);
                token_sum += surrogate - config.kl_beta * kl_term(lp_new[t], lp_ref[t]);
            }
            group_term += token_sum / len as f64;
        }
        total += group_term / g;
    }
    Ok(total / groups.len().max(1) as f64)
}

struct GradientStats {
    gradient: GradientVector,
    objective: f64,
    mean_kl: f64,
}

/// One pass over the groups computing the on-policy gradient together with
/// the objective value and mean KL at the sampling point (ratios are 1 there,
/// so the surrogate term is just the advantage).
fn gradient_with_stats(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GRPOConfig,
) -> Result<GradientStats> {
    check_same_shape(params, ref_params)?;
    let mut out = vec![0.0; params.len()];
    let group_scale = 1.0 / groups.len().max(1) as f64;
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_count = 0usize;
    for group in groups {
        let datum = datum_view(group);
        let g = group.rollouts.len() as f64;
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            let len = rollout.trajectory.tokens.len();
            if len == 0 {
                continue;
            }
            let lp_theta = policy::log_prob(params, &datum, &rollout.trajectory);
            let lp_ref = policy::log_prob(ref_params, &datum, &rollout.trajectory);
            let mut weights = Vec::with_capacity(len);
            let mut token_obj = 0.0;
            for t in 0..len {
                let kl = kl_term(lp_theta[t], lp_ref[t]);
                let coefficient = adv + config.kl_beta * ((lp_ref[t] - lp_theta[t]).exp() - 1.0);
                weights.push(coefficient);
                token_obj += adv - config.kl_beta * kl;
                kl_sum += kl;
                kl_count += 1;
            }
            let scale = group_scale / (g * len as f64);
            policy::accumulate_weighted_grad(
                params,
                &group.prompt,
                &rollout.trajectory.tokens,
                &weights,
                scale,
                &mut out,
            );
            objective += group_scale * token_obj / (g * len as f64);
        }
    }
    Ok(GradientStats {
        gradient: GradientVector { values: out },
        objective,
        mean_kl: kl_sum / kl_count.max(1) as f64,
    })
}

/// Monte-Carlo policy gradient of the GRPO objective at the sampling
/// parameters (ratios 1, clipping inactive):
/// (1/G) sum_i (1/|o_i|) sum_t [A_i + beta(pi_ref/pi_theta - 1)] grad log pi,
/// averaged over the given groups.
pub fn grpo_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[RolloutGroup],
    config: &GRPOConfig,
) -> Result<GradientVector> {
    Ok(gradient_with_stats(params, ref_params, groups, config)?.gradient)
}

/// Stopping rule for the training loop.
#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    /// Fixed number of optimizer steps.
    Steps(usize),
    /// Stop when mean reward has not improved by `min_improvement` for
    /// `patience` consecutive steps, or at `max_steps`.
    Convergence {
        max_steps: usize,
        patience: usize,
        min_improvement: f64,
    },
}

/// GRPO training: per step, sample G rollouts for each datum of a seeded
/// batch, normalize rewards within groups, and take one SGD ascent step
/// along the on-policy gradient. The reference policy for the KL penalty is
/// the parameter snapshot at entry. Deterministic given the config's master
/// seed.
pub fn train(
    params: PolicyParams,
    dataset: &[TaskDatum],
    config: &GRPOConfig,
    env: &TaskEnv,
) -> Result<(PolicyParams, Vec<TrainMetrics>)> {
    train_with_stop(params, dataset, config, env, StopRule::Steps(config.steps))
}

pub fn train_with_stop(
    params: PolicyParams,
    dataset: &[TaskDatum],
    config: &GRPOConfig,
    env: &TaskEnv,
    stop: StopRule,
) -> Result<(PolicyParams, Vec<TrainMetrics>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let started = Instant::now();
    let ref_params = params.clone();
    let mut current = params;
    let mut metrics = Vec::new();

    let max_steps = match stop {
        StopRule::Steps(n) => n,
        StopRule::Convergence { max_steps, .. } => max_steps,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = dataset.len();
    let mut epoch = 0u64;
    let mut best_reward = f64::NEG_INFINITY;
    let mut last_improvement = 0usize;

    for step in 0..max_steps {
        let batch_len = config.batch_size.min(dataset.len());
        if cursor + batch_len > dataset.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(
                config.master_seed,
                &[seeding::tag("batch-order"), epoch],
            ));
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let batch: Vec<&TaskDatum> = order[cursor..cursor + batch_len]
            .iter()
            .map(|&i| &dataset[i])
            .collect();
        cursor += batch_len;

        // Rollout generation is schedule-independent: every (step, datum,
        // rollout) triple has its own derived seed, so groups can be built
        // in parallel while the update itself stays serialized.
        let step_seed = seeding::derive(config.master_seed, &[seeding::tag("rollouts"), step as u64]);
        let groups: Vec<RolloutGroup> = {
            use rayon::prelude::*;
            batch
                .par_iter()
                .map(|datum| {
                    sample_group(
                        &current,
                        datum,
                        env,
                        config.group_size,
                        config.temperature,
                        config.std_floor,
                        step_seed,
                    )
                })
                .collect()
        };

        let stats = gradient_with_stats(&current, &ref_params, &groups, config)?;
        if !stats.objective.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                what: format!("objective {}", stats.objective),
            });
        }
        if !stats.gradient.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                what: "non-finite gradient".into(),
            });
        }
        current = current.step(&stats.gradient, config.learning_rate)?;

        let mean_reward = {
            let total: f64 = groups.iter().flat_map(|g| g.rewards.iter()).sum();
            let count: usize = groups.iter().map(|g| g.rewards.len()).sum();
            total / count.max(1) as f64
        };
        metrics.push(TrainMetrics {
            step,
            objective: stats.objective,
            mean_reward,
            mean_kl: stats.mean_kl,
            grad_norm: stats.gradient.norm(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });

        if let StopRule::Convergence {
            patience,
            min_improvement,
            ..
        } = stop
        {
            if mean_reward > best_reward + min_improvement {
                best_reward = mean_reward;
                last_improvement = step;
            } else if step - last_improvement >= patience {
                break;
            }
        }
    }
    Ok((current, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp_env::{digit_token, generate_task_set, TaskKind, ANS, EOS, PLUS};
    use crate::policy::PolicyConfig;
    use proptest::prelude::*;

    fn tiny_policy(seed: u64) -> PolicyParams {
        PolicyParams::init(PolicyConfig {
            vocab_size: 16,
            window: 3,
            embed_dim: 2,
            hidden_dims: vec![4],
            param_seed: seed,
        })
        .unwrap()
    }

    fn tiny_datum(id: u64) -> TaskDatum {
        TaskDatum {
            id,
            prompt: vec![digit_token((id % 10) as u8), PLUS, digit_token(2)],
            answer: vec![digit_token(((id + 2) % 10) as u8)],
            kind: TaskKind::ChainedSum,
        }
    }

    fn test_config() -> GRPOConfig {
        GRPOConfig {
            group_size: 2,
            steps: 4,
            batch_size: 2,
            ..GRPOConfig::default()
        }
    }

    #[test]
    fn advantages_two_point_case() {
        let a = compute_advantages(&[1.0, 0.0], 1e-8);
        assert!((a[0] - 1.0).abs() < 1e-12);
        assert!((a[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_zero_variance_guard() {
        assert_eq!(compute_advantages(&[1.0; 4], 1e-8), vec![0.0; 4]);
    }

    #[test]
    fn advantages_skewed_group() {
        // mean 1.5, population std sqrt(0.75)
        let a = compute_advantages(&[3.0, 1.0, 1.0, 1.0], 1e-8);
        let std = 0.75f64.sqrt();
        assert!((a[0] - 1.5 / std).abs() < 1e-12);
        assert!((a[0] - 1.7320508075688772).abs() < 1e-9);
        for &v in &a[1..] {
            assert!((v + 0.5 / std).abs() < 1e-12);
            assert!((v + 0.5773502691896258).abs() < 1e-9);
        }
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_term_values() {
        assert_eq!(kl_term(-1.5, -1.5), 0.0);
        // r = 2 => 2 - ln 2 - 1
        let v = kl_term(-2.0, -2.0 + 2f64.ln());
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((v - 0.30685281944005469).abs() < 1e-12);
    }

    #[test]
    fn grpo_config_validation() {
        assert!(GRPOConfig::default().validate().is_ok());
        assert!(GRPOConfig {
            group_size: 1,
            ..GRPOConfig::default()
        }
        .validate()
        .is_err());
        assert!(GRPOConfig {
            clip_epsilon: 1.0,
            ..GRPOConfig::default()
        }
        .validate()
        .is_err());
        assert!(GRPOConfig {
            learning_rate: 0.0,
            ..GRPOConfig::default()
        }
        .validate()
        .is_err());
    }

    fn sample_groups(params: &PolicyParams, n: usize, seed: u64) -> Vec<RolloutGroup> {
        let env = TaskEnv {
            horizon: 5,
            ..TaskEnv::default()
        };
        (0..n)
            .map(|i| {
                let datum = tiny_datum(i as u64);
                let mut group = sample_group(params, &datum, &env, 2, 1.0, 1e-8, seed + i as u64);
                // Force non-degenerate advantages so the objective exercises
                // the surrogate term.
                group.advantages = vec![1.0, -1.0];
                group
            })
            .collect()
    }

    #[test]
    fn objective_at_sampling_point_is_mean_advantage() {
        let params = tiny_policy(1);
        let groups = sample_groups(&params, 2, 50);
        let config = test_config();
        let obj = grpo_objective(&params, &params, &params, &groups, &config).unwrap();
        // ratios 1, KL 0: objective = mean over groups of (1/G) sum_i A_i
        // (the token average of a constant is the constant).
        let expected: f64 = groups
            .iter()
            .map(|g| {
                g.advantages
                    .iter()
                    .zip(&g.rollouts)
                    .filter(|(_, r)| !r.trajectory.tokens.is_empty())
                    .map(|(a, _)| a)
                    .sum::<f64>()
                    / g.rollouts.len() as f64
            })
            .sum::<f64>()
            / groups.len() as f64;
        assert!((obj - expected).abs() < 1e-12, "{obj} vs {expected}");
    }

    #[test]
    fn objective_zero_when_no_advantage_and_no_kl() {
        let params = tiny_policy(2);
        let mut groups = sample_groups(&params, 2, 60);
        for g in &mut groups {
            g.advantages = vec![0.0, 0.0];
        }
        let config = GRPOConfig {
            kl_beta: 0.0,
            ..test_config()
        };
        let obj = grpo_objective(&params, &params, &params, &groups, &config).unwrap();
        assert_eq!(obj, 0.0);
    }

    /// Brute-force transcription of the objective for one tiny instance,
    /// written against the raw per-token formula rather than the library's
    /// aggregation loop.
    #[test]
    fn objective_matches_scalar_transcription() {
        let params = tiny_policy(3);
        let old = tiny_policy(33);
        let refp = tiny_policy(77);
        let groups = sample_groups(&params, 1, 70);
        let config = test_config();
        let obj = grpo_objective(&params, &old, &refp, &groups, &config).unwrap();

        let datum = tiny_datum(0);
        let group = &groups[0];
        let mut expected = 0.0;
        for (i, rollout) in group.rollouts.iter().enumerate() {
            let adv = group.advantages[i];
            let n = rollout.trajectory.tokens.len();
            if n == 0 {
                continue;
            }
            let lp_new = policy::log_prob(&params, &datum, &rollout.trajectory);
            let lp_old = policy::log_prob(&old, &datum, &rollout.trajectory);
            let lp_ref = policy::log_prob(&refp, &datum, &rollout.trajectory);
            let mut acc = 0.0;
            for t in 0..n {
                let r = (lp_new[t] - lp_old[t]).exp();
                let clipped = r.clamp(0.8, 1.2);
                let surr = (r * adv).min(clipped * adv);
                let ratio_ref = (lp_ref[t] - lp_new[t]).exp();
                let kl = ratio_ref - ratio_ref.ln() - 1.0;
                acc += surr - config.kl_beta * kl;
            }
            expected += acc / n as f64;
        }
        expected /= group.rollouts.len() as f64;
        assert!((obj - expected).abs() < 1e-12, "{obj} vs {expected}");
    }

    #[test]
    fn gradient_zero_without_signal() {
        let params = tiny_policy(4);
        let mut groups = sample_groups(&params, 2, 80);
        for g in &mut groups {
            g.advantages = vec![0.0, 0.0];
        }
        let config = GRPOConfig {
            kl_beta: 0.0,
            ..test_config()
        };
        let grad = grpo_gradient(&params, &params, &groups, &config).unwrap();
        assert!(grad.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_averages_over_groups() {
        let params = tiny_policy(5);
        let refp = tiny_policy(55);
        let groups = sample_groups(&params, 2, 90);
        let config = test_config();
        let combined = grpo_gradient(&params, &refp, &groups, &config).unwrap();
        let a = grpo_gradient(&params, &refp, &groups[..1], &config).unwrap();
        let b = grpo_gradient(&params, &refp, &groups[1..], &config).unwrap();
        for i in 0..combined.values.len() {
            let avg = 0.5 * (a.values[i] + b.values[i]);
            assert!((combined.values[i] - avg).abs() < 1e-12);
        }
    }

    /// Finite differences of the objective at the sampling point against the
    /// analytic gradient for a <=200 parameter policy.
    #[test]
    fn gradient_matches_objective_finite_differences() {
        let params = tiny_policy(6);
        let refp = tiny_policy(66);
        let groups = sample_groups(&params, 2, 100);
        let config = test_config();
        let grad = grpo_gradient(&params, &refp, &groups, &config).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let base = params.theta()[i];
            let plus = grpo_objective(
                &params.with_coord(i, base + h),
                &params,
                &refp,
                &groups,
                &config,
            )
            .unwrap();
            let minus = grpo_objective(
                &params.with_coord(i, base - h),
                &params,
                &refp,
                &groups,
                &config,
            )
            .unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let a = grad.values[i];
            if fd.abs() < 1e-7 && a.abs() < 1e-7 {
                continue;
            }
            let rel = (a - fd).abs() / fd.abs().max(a.abs());
            assert!(rel < 1e-3, "coord {i}: analytic {a} vs fd {fd} (rel {rel})");
        }
    }

    #[test]
    fn ascent_direction_is_nonnegative() {
        // Directional derivative of the objective along its own gradient.
        let params = tiny_policy(7);
        let groups = sample_groups(&params, 2, 110);
        let config = test_config();
        let grad = grpo_gradient(&params, &params, &groups, &config).unwrap();
        let eta = 1e-6;
        let stepped = params.step(&grad, eta).unwrap();
        let before = grpo_objective(&params, &params, &params, &groups, &config).unwrap();
        let after = grpo_objective(&stepped, &params, &params, &groups, &config).unwrap();
        assert!(after + 1e-12 >= before, "before {before}, after {after}");
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let params = tiny_policy(8);
        let other = PolicyParams::init(PolicyConfig {
            vocab_size: 16,
            window: 2,
            embed_dim: 2,
            hidden_dims: vec![3],
            param_seed: 0,
        })
        .unwrap();
        let groups = sample_groups(&params, 1, 120);
        let config = test_config();
        assert!(matches!(
            grpo_objective(&params, &other, &params, &groups, &config),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_step_budget_returns_params_unchanged() {
        let params = tiny_policy(9);
        let dataset = generate_task_set(TaskKind::ChainedSum, 8, 1).unwrap();
        let config = GRPOConfig {
            steps: 0,
            ..test_config()
        };
        let env = TaskEnv::default();
        let (after, metrics) = train(params.clone(), &dataset, &config, &env).unwrap();
        assert_eq!(after, params);
        assert!(metrics.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let dataset = generate_task_set(TaskKind::ChainedSum, 12, 5).unwrap();
        let env = TaskEnv {
            horizon: 8,
            ..TaskEnv::default()
        };
        let config = GRPOConfig {
            group_size: 4,
            steps: 6,
            batch_size: 4,
            master_seed: 17,
            ..GRPOConfig::default()
        };
        let run = || {
            train(tiny_policy(10), &dataset, &config, &env)
                .unwrap()
                .0
        };
        let a = run();
        let b = run();
        assert_eq!(a.theta(), b.theta());
    }

    #[test]
    fn empty_dataset_rejected() {
        let params = tiny_policy(11);
        let env = TaskEnv::default();
        assert!(matches!(
            train(params, &[], &test_config(), &env),
            Err(Error::Config(_))
        ));
    }

    /// Frozen regression: a short run on easy data must beat the untrained
    /// policy's greedy accuracy.
    #[test]
    fn training_improves_greedy_accuracy_on_easy_data() {
        let dataset: Vec<TaskDatum> = generate_task_set(TaskKind::ChainedSum, 400, 21)
            .unwrap()
            .into_iter()
            .filter(|d| d.prompt.len() <= 3)
            .take(50)
            .collect();
        assert!(dataset.len() >= 30, "need enough easy tasks");
        let env = TaskEnv {
            horizon: 16,
            ..TaskEnv::default()
        };
        let config = GRPOConfig {
            steps: 200,
            batch_size: 8,
            master_seed: 77,
            ..GRPOConfig::default()
        };
        let params = PolicyParams::init(PolicyConfig::default()).unwrap();
        let accuracy = |p: &PolicyParams| {
            let hits = dataset
                .iter()
                .filter(|d| {
                    let r = policy::sample(p, d, 0.0, env.horizon, 0);
                    verify_answer(&r.trajectory, d)
                })
                .count();
            hits as f64 / dataset.len() as f64
        };
        let before = accuracy(&params);
        let (trained, metrics) = train(params, &dataset, &config, &env).unwrap();
        let after = accuracy(&trained);
        assert_eq!(metrics.len(), 200);
        assert!(
            after > before,
            "greedy accuracy did not improve: {before} -> {after}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn advantages_are_standardized(rewards in proptest::collection::vec(0.0f64..3.0, 2..12)) {
            let adv = compute_advantages(&rewards, 1e-8);
            let g = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / g;
            let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / g;
            let all_zero = adv.iter().all(|&a| a == 0.0);
            if all_zero {
                // zero-variance (or sub-floor) group
                let rmean = rewards.iter().sum::<f64>() / g;
                let rvar = rewards.iter().map(|r| (r - rmean) * (r - rmean)).sum::<f64>() / g;
                prop_assert!(rvar.sqrt() < 1e-8);
            } else {
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_is_nonnegative(a in -30.0f64..0.0, b in -30.0f64..0.0) {
            prop_assert!(kl_term(a, b) >= 0.0);
        }
    }
}
