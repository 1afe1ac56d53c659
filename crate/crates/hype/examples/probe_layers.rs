//! Linear-probes every layer of a fine-tuned backbone: a fresh linear head
//! is trained on each frozen layer's pooled features to measure how much
//! task-relevant structure each depth carries.

#[path = "support/mod.rs"]
mod support;

use hype::data::{generate_synthetic_suite, subsample};
use hype::perturb::{DropoutSpec, NoiseSpec};
use hype::probe::{linear_probe, ProbeSettings};
use hype::trainer::{finetune, TrainRunConfig};

fn main() {
    let suite = generate_synthetic_suite(0);
    let base = support::pretrained_backbone(&suite, 300, 0);
    let task = &suite.tasks[0];
    let train = subsample(&task.train, 1000, 0).expect("subsample");

    let cfg = TrainRunConfig::new(2e-5, 1)
        .with_noise(NoiseSpec::normal(1e-5))
        .with_dropout(DropoutSpec::off());
    let (tuned, record) = finetune(&base, &train, &task.dev, &suite.tokenizer, task.metric, &cfg)
        .expect("finetune");
    println!("fine-tuned {}: dev {:.2} points", task.name, record.dev_score);

    let probe_train = subsample(&task.train, 400, 1).expect("subsample");
    let settings = ProbeSettings::default();
    println!("layer | pretrained | fine-tuned   (probe accuracy, points)");
    for layer in 0..=tuned.config.n_layers {
        let before = linear_probe(
            &base,
            &probe_train,
            &task.dev,
            &suite.tokenizer,
            hype::data::MetricKind::Accuracy,
            layer,
            &settings,
            7,
        )
        .expect("probe");
        let after = linear_probe(
            &tuned,
            &probe_train,
            &task.dev,
            &suite.tokenizer,
            hype::data::MetricKind::Accuracy,
            layer,
            &settings,
            7,
        )
        .expect("probe");
        println!("  {layer}   |   {:6.2}   |   {:6.2}", before.score, after.score);
    }
}
