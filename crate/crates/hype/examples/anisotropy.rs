//! Compares per-layer token anisotropy (mean pairwise cosine similarity)
//! between a vanilla fine-tuned model and a noise fine-tuned model.

#[path = "support/mod.rs"]
mod support;

use hype::data::{generate_synthetic_suite, subsample};
use hype::perturb::{DropoutSpec, NoiseSpec};
use hype::probe::token_similarity;
use hype::trainer::{finetune, TrainRunConfig};

fn main() {
    let suite = generate_synthetic_suite(0);
    let base = support::pretrained_backbone(&suite, 300, 0);
    let task = &suite.tasks[0];
    let train = subsample(&task.train, 1000, 0).expect("subsample");

    let mut curves = Vec::new();
    for (label, noise, dropout) in [
        ("vanilla", NoiseSpec::none(), DropoutSpec::new(0.1).unwrap()),
        ("hype-normal", NoiseSpec::normal(1e-5), DropoutSpec::off()),
    ] {
        let cfg = TrainRunConfig {
            eval_each_epoch: false,
            ..TrainRunConfig::new(2e-5, 1)
        }
        .with_noise(noise)
        .with_dropout(dropout);
        let (state, _) = finetune(&base, &train, &task.dev, &suite.tokenizer, task.metric, &cfg)
            .expect("finetune");
        let curve = token_similarity(&state, &task.dev, &suite.tokenizer, 32, true, 200)
            .expect("similarity");
        curves.push((label, curve));
    }

    println!("task {}: mean pairwise token cosine per layer", task.name);
    println!("layer | {:>12} | {:>12}", curves[0].0, curves[1].0);
    let n = curves[0].1.per_layer.len();
    for layer in 0..n {
        println!(
            "  {layer}   | {:12.4} | {:12.4}",
            curves[0].1.per_layer[layer],
            curves[1].1.per_layer[layer]
        );
    }
    for (label, curve) in &curves {
        println!(
            "{label}: {} samples used, {} skipped",
            curve.samples_used, curve.skipped
        );
    }
}
