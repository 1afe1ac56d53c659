//! Ablates the noise form (normal vs uniform), scale sigma, and injection
//! position (pre-layer vs intra-layer vs both) on one task.

#[path = "support/mod.rs"]
mod support;

use hype::data::{generate_synthetic_suite, subsample};
use hype::perturb::{DropoutSpec, NoisePosition, NoiseSpec};
use hype::trainer::{finetune, mean_std, TrainRunConfig};

fn main() {
    let suite = generate_synthetic_suite(0);
    let base = support::pretrained_backbone(&suite, 300, 0);
    let task = &suite.tasks[0];
    let train = subsample(&task.train, 1000, 0).expect("subsample");
    let seeds = [1u64, 2];

    let score = |label: &str, noise: NoiseSpec| {
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
        println!("  {label:<28} {m:6.2} +/- {s:5.2}");
    };

    println!("task {} (mean over {} seeds):", task.name, seeds.len());
    score("no noise", NoiseSpec::none());
    for sigma in [1e-6, 1e-5, 1e-4, 1e-3] {
        score(&format!("normal sigma {sigma:.0e}"), NoiseSpec::normal(sigma));
        score(&format!("uniform sigma {sigma:.0e}"), NoiseSpec::uniform(sigma));
    }
    score(
        "normal 1e-5 intra-layer",
        NoiseSpec::normal(1e-5).with_position(NoisePosition::IntraLayer),
    );
    score(
        "normal 1e-5 both sites",
        NoiseSpec::normal(1e-5).with_position(NoisePosition::Both),
    );
}
