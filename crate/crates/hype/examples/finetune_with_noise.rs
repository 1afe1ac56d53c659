//! Fine-tunes one task twice from the same seed — vanilla (dropout 0.1)
//! and with normal hidden-representation noise, dropout off — and prints
//! both run records side by side.

#[path = "support/mod.rs"]
mod support;

use hype::data::{generate_synthetic_suite, subsample};
use hype::perturb::{DropoutSpec, NoiseSpec};
use hype::trainer::{finetune, TrainRunConfig};

fn main() {
    let suite = generate_synthetic_suite(0);
    let base = support::pretrained_backbone(&suite, 300, 0);
    let task = &suite.tasks[0];
    let train = subsample(&task.train, 1000, 0).expect("subsample");
    println!(
        "task {}: {} train / {} dev, metric {:?}",
        task.name,
        train.len(),
        task.dev.len(),
        task.metric
    );

    for (label, noise, dropout) in [
        ("vanilla", NoiseSpec::none(), DropoutSpec::new(0.1).unwrap()),
        ("hype-normal", NoiseSpec::normal(1e-5), DropoutSpec::off()),
    ] {
        let cfg = TrainRunConfig::new(2e-5, 1)
            .with_noise(noise)
            .with_dropout(dropout);
        let (_state, record) =
            finetune(&base, &train, &task.dev, &suite.tokenizer, task.metric, &cfg)
                .expect("finetune");
        println!(
            "{label:>12}: dev {:6.2} points  epoch scores {:?}  final train loss {:.4}  max noise delta {:.2e}",
            record.dev_score, record.epoch_scores, record.final_train_loss, record.max_noise_delta
        );
    }
}
