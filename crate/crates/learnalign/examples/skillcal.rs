// Scratch skill-ceiling probe (not part of the deliverable surface).
use learnalign::experiment::{evaluate, EvalMode};
use learnalign::grpo::{train, GRPOConfig};
use learnalign::mdp_env::{generate_task_set, TaskEnv, TaskKind};
use learnalign::policy::{PolicyConfig, PolicyParams};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind: TaskKind = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(TaskKind::ModularAddition);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let hidden: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let n_train: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(3);
    let beta: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.04);

    let all = generate_task_set(kind, n_train + 500, 1).unwrap();
    let train_set = &all[..n_train];
    let test_set = &all[n_train..];
    let env = TaskEnv::default();
    let config = GRPOConfig {
        steps,
        batch_size: batch,
        learning_rate: lr,
        master_seed: seed,
        kl_beta: beta,
        ..GRPOConfig::default()
    };
    let params = PolicyParams::init(PolicyConfig {
        hidden_dims: vec![hidden],
        param_seed: seed,
        ..PolicyConfig::default()
    })
    .unwrap();
    let t0 = std::time::Instant::now();
    let (trained, metrics) = train(params, train_set, &config, &env).unwrap();
    let train_acc = evaluate(&trained, train_set, &env, EvalMode::Greedy, 0);
    let test_acc = evaluate(&trained, test_set, &env, EvalMode::Greedy, 0);
    for m in metrics.iter().step_by((steps / 8).max(1)) {
        eprintln!(
            "step {:4}  reward {:.3}  kl {:.3}  |g| {:.3}",
            m.step, m.mean_reward, m.mean_kl, m.grad_norm
        );
    }
    for d in test_set.iter().take(8) {
        let r = learnalign::policy::sample(&trained, d, 0.0, env.horizon, 0);
        eprintln!("prompt {:?} answer {:?} -> greedy {:?}", d.prompt, d.answer, r.trajectory.tokens);
    }
    println!(
        "{kind:?} steps={steps} lr={lr} batch={batch} h={hidden} n={n_train} beta={beta}: train_acc {train_acc:.3} test_acc {test_acc:.3} ({:.0}s)",
        t0.elapsed().as_secs_f64()
    );
}
