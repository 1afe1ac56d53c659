//! Compares fine-tuning techniques (vanilla dropout, noise variants) across
//! all three synthetic tasks and prints a delta table against the baseline.
//! A fixed learning rate and two seeds keep this example fast; the `compare`
//! CLI command runs the full grid-search protocol instead.

#[path = "support/mod.rs"]
mod support;

use hype::data::{generate_synthetic_suite, subsample};
use hype::perturb::{DropoutSpec, NoiseSpec};
use hype::trainer::{finetune, mean_std, TrainRunConfig};

fn main() {
    let suite = generate_synthetic_suite(0);
    let base = support::pretrained_backbone(&suite, 300, 0);
    let seeds = [1u64, 2];
    let techniques: Vec<(&str, NoiseSpec, DropoutSpec)> = vec![
        ("vanilla", NoiseSpec::none(), DropoutSpec::new(0.1).unwrap()),
        ("no_reg", NoiseSpec::none(), DropoutSpec::off()),
        ("hype_normal", NoiseSpec::normal(1e-5), DropoutSpec::off()),
        ("hype_uniform", NoiseSpec::uniform(1e-5), DropoutSpec::off()),
    ];

    println!("{:<14} {:>14} {:>14} {:>14}", "technique", "acceptability", "pair_match", "similarity");
    let mut baseline: Vec<f64> = Vec::new();
    for (label, noise, dropout) in &techniques {
        let mut row = Vec::new();
        for task in &suite.tasks {
            let train = subsample(&task.train, 1000, 0).expect("subsample");
            let mut scores = Vec::new();
            for &seed in &seeds {
                let cfg = TrainRunConfig {
                    eval_each_epoch: false,
                    ..TrainRunConfig::new(2e-5, seed)
                }
                .with_noise(noise.clone())
                .with_dropout(dropout.clone());
                let (_, r) =
                    finetune(&base, &train, &task.dev, &suite.tokenizer, task.metric, &cfg)
                        .expect("finetune");
                scores.push(r.dev_score);
            }
            let (m, _) = mean_std(&scores);
            row.push(m);
        }
        if baseline.is_empty() {
            baseline = row.clone();
            println!(
                "{label:<14} {:>14.2} {:>14.2} {:>14.2}",
                row[0], row[1], row[2]
            );
        } else {
            println!(
                "{label:<14} {:>7.2} ({:+5.2}) {:>7.2} ({:+5.2}) {:>7.2} ({:+5.2})",
                row[0],
                row[0] - baseline[0],
                row[1],
                row[1] - baseline[1],
                row[2],
                row[2] - baseline[2]
            );
        }
    }
}
