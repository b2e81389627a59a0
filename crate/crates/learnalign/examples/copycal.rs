// Scratch probe: can GRPO learn a pure copy mapping (answer = prompt digit)?
use learnalign::experiment::{evaluate, EvalMode};
use learnalign::grpo::{train, GRPOConfig};
use learnalign::mdp_env::{digit_token, TaskDatum, TaskEnv, TaskKind, PLUS};
use learnalign::policy::{PolicyConfig, PolicyParams};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let beta: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.04);

    // a + 0 for every digit a: answer = a. Ten data, pure copy.
    let data: Vec<TaskDatum> = (0..10u8)
        .map(|d| TaskDatum {
            id: u64::from(d),
            prompt: vec![digit_token(d), PLUS, digit_token(0)],
            answer: vec![digit_token(d)],
            kind: TaskKind::ChainedSum,
        })
        .collect();
    let env = TaskEnv::default();
    let config = GRPOConfig {
        steps,
        batch_size: 10,
        learning_rate: lr,
        kl_beta: beta,
        master_seed: 5,
        ..GRPOConfig::default()
    };
    let params = PolicyParams::init(PolicyConfig::default()).unwrap();
    let (trained, metrics) = train(params, &data, &config, &env).unwrap();
    let acc = evaluate(&trained, &data, &env, EvalMode::Greedy, 0);
    for m in metrics.iter().step_by((steps / 10).max(1)) {
        eprintln!("step {:4} reward {:.3} kl {:.3}", m.step, m.mean_reward, m.mean_kl);
    }
    for d in data.iter().take(4) {
        let r = learnalign::policy::sample(&trained, d, 0.0, env.horizon, 0);
        eprintln!("prompt {:?} -> {:?} (want {:?})", d.prompt, r.trajectory.tokens, d.answer);
    }
    println!("copy task: steps={steps} lr={lr} beta={beta} greedy acc {acc:.2}");
}
