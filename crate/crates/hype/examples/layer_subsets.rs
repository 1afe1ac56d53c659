//! Restricts noise injection to subsets of layers (lower half, upper half,
//! single layers) and compares dev scores.

#[path = "support/mod.rs"]
mod support;

use hype::data::{generate_synthetic_suite, subsample};
use hype::perturb::{DropoutSpec, NoiseSpec};
use hype::trainer::{finetune, mean_std, TrainRunConfig};

fn main() {
    let suite = generate_synthetic_suite(0);
    let base = support::pretrained_backbone(&suite, 300, 0);
    let n_layers = base.config.n_layers;
    let task = &suite.tasks[0];
    let train = subsample(&task.train, 1000, 0).expect("subsample");
    let seeds = [1u64, 2];

    let mut subsets: Vec<(String, Vec<usize>)> = vec![
        ("all layers".into(), (1..=n_layers).collect()),
        ("lower half".into(), (1..=n_layers / 2).collect()),
        ("upper half".into(), (n_layers / 2 + 1..=n_layers).collect()),
    ];
    for l in 1..=n_layers {
        subsets.push((format!("layer {l} only"), vec![l]));
    }

    println!(
        "task {}: normal noise sigma 1e-5, mean over {} seeds",
        task.name,
        seeds.len()
    );
    for (label, layers) in subsets {
        let noise = NoiseSpec::normal(1e-5).with_layer_mask(layers);
        let mut scores = Vec::new();
        for &seed in &seeds {
            let cfg = TrainRunConfig {
                eval_each_epoch: false,
                ..TrainRunConfig::new(2e-5, seed)
            }
            .with_noise(noise.clone())
            .with_dropout(DropoutSpec::off());
            let (_, r) = finetune(&base, &train, &task.dev, &suite.tokenizer, task.metric, &cfg)
                .expect("finetune");
            scores.push(r.dev_score);
        }
        let (m, s) = mean_std(&scores);
        println!("  {label:<14} {m:6.2} +/- {s:5.2}");
    }
}
