// Scratch pipeline calibration (not part of the deliverable surface).
use learnalign::experiment::{self, DatasetSpec, ExperimentConfig, Method, SelectionSpec};
use learnalign::features;
use learnalign::grpo::GRPOConfig;
use learnalign::mdp_env::{TaskEnv, TaskKind, PLUS};
use learnalign::policy::PolicyConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let master: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1001);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(400);
    let warm_steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(120);
    let out: String = args
        .get(5)
        .cloned()
        .unwrap_or_else(|| format!("/tmp/pipecal-{master}"));
    let hidden: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(32);

    let cfg = ExperimentConfig {
        master_seed: master,
        out_dir: out.clone().into(),
        dataset: DatasetSpec {
            kind: TaskKind::ChainedSum,
            n_train: 2000,
            n_test: 500,
            seed: 1,
        },
        policy: PolicyConfig {
            hidden_dims: vec![hidden],
            ..PolicyConfig::default()
        },
        grpo: GRPOConfig {
            learning_rate: lr,
            steps,
            ..GRPOConfig::default()
        },
        warmup: learnalign::experiment::WarmupSpec {
            size: None,
            steps: warm_steps,
        },
        selection: SelectionSpec {
            sizes: vec![500],
            methods: vec![Method::Learnalign, Method::Random, Method::NoLearnability],
            ..SelectionSpec::default()
        },
        env: TaskEnv::default(),
        ..ExperimentConfig::default()
    };
    let t0 = std::time::Instant::now();
    let reports = experiment::run_pipeline(&cfg).unwrap();
    for r in &reports {
        println!(
            "seed {master} {} N={}: greedy {:.4} pass1 {:.4}",
            r.method, r.n_selected, r.greedy_accuracy, r.pass1_accuracy
        );
    }
    // p histogram by chain length from the persisted store.
    let store = features::load_store(std::path::Path::new(&out).join("features/store.lafs").as_path()).unwrap();
    let tasks = learnalign::mdp_env::read_tasks(std::path::Path::new(&out).join("tasks/train.jsonl").as_path()).unwrap();
    let mut by_k: std::collections::BTreeMap<usize, (usize, f64, usize)> = std::collections::BTreeMap::new();
    for (r, t) in store.records().iter().zip(&tasks) {
        assert_eq!(r.id, t.id);
        let k = t.prompt.iter().filter(|&&tok| tok != PLUS).count();
        let e = by_k.entry(k).or_insert((0, 0.0, 0));
        e.0 += 1;
        e.1 += r.success_rate;
        if r.success_rate > 0.0 && r.success_rate < 1.0 {
            e.2 += 1;
        }
    }
    for (k, (n, psum, mid)) in &by_k {
        println!(
            "k={k}: n={n} mean_p={:.3} mid_fraction={:.3}",
            psum / *n as f64,
            *mid as f64 / *n as f64
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
