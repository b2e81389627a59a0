// Scratch calibration harness (not part of the deliverable surface).
use learnalign::grpo::{train, GRPOConfig};
use learnalign::mdp_env::{generate_task_set, verify_answer, TaskDatum, TaskEnv, TaskKind};
use learnalign::policy::{self, PolicyConfig, PolicyParams};

fn accuracy(p: &PolicyParams, data: &[TaskDatum], horizon: usize) -> f64 {
    let hits = data
        .iter()
        .filter(|d| {
            let r = policy::sample(p, d, 0.0, horizon, 0);
            verify_answer(&r.trajectory, d)
        })
        .count();
    hits as f64 / data.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let horizon: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(77);

    let dataset: Vec<TaskDatum> = generate_task_set(TaskKind::ChainedSum, 400, 21)
        .unwrap()
        .into_iter()
        .filter(|d| d.prompt.len() <= 3)
        .take(50)
        .collect();
    eprintln!("easy data: {}", dataset.len());
    let env = TaskEnv {
        horizon,
        ..TaskEnv::default()
    };
    let config = GRPOConfig {
        steps,
        batch_size: batch,
        learning_rate: lr,
        master_seed: seed,
        ..GRPOConfig::default()
    };
    let params = PolicyParams::init(PolicyConfig::default()).unwrap();
    let before = accuracy(&params, &dataset, env.horizon);
    let t0 = std::time::Instant::now();
    let (trained, metrics) = train(params, &dataset, &config, &env).unwrap();
    let after = accuracy(&trained, &dataset, env.horizon);
    for m in metrics.iter().step_by((steps / 10).max(1)) {
        eprintln!(
            "step {:4}  obj {:+.4}  reward {:.3}  kl {:.4}  |g| {:.3}",
            m.step, m.objective, m.mean_reward, m.mean_kl, m.grad_norm
        );
    }
    eprintln!(
        "lr {lr} steps {steps} batch {batch}: accuracy {before:.3} -> {after:.3}  ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );
}
