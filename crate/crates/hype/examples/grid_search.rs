//! Runs the learning-rate x seed grid for one technique on one task and
//! prints the per-cell records plus the selected rate.

#[path = "support/mod.rs"]
mod support;

use hype::data::{generate_synthetic_suite, subsample};
use hype::perturb::{DropoutSpec, NoiseSpec};
use hype::trainer::{grid_search, TrainRunConfig};

fn main() {
    let suite = generate_synthetic_suite(0);
    let base = support::pretrained_backbone(&suite, 300, 0);
    let task = &suite.tasks[0];
    let train = subsample(&task.train, 1000, 0).expect("subsample");

    let template = TrainRunConfig::new(2e-5, 0)
        .with_noise(NoiseSpec::normal(1e-5))
        .with_dropout(DropoutSpec::off());
    let lrs = [1e-5, 2e-5, 3e-5, 4e-5];
    let seeds = [1, 2, 3];
    let grid = grid_search(
        &base,
        &train,
        &task.dev,
        &suite.tokenizer,
        task.metric,
        &template,
        &lrs,
        &seeds,
    )
    .expect("grid search");

    println!("task {} ({} cells):", task.name, grid.records.len());
    for r in &grid.records {
        println!(
            "  lr {:.0e} seed {}: dev {:6.2}{}",
            r.lr,
            r.seed,
            r.dev_score,
            if r.collapsed { "  [collapsed]" } else { "" }
        );
    }
    println!(
        "best lr {:.0e}: {:.2} +/- {:.2} over {} seeds",
        grid.best_lr,
        grid.best_mean,
        grid.best_std,
        seeds.len()
    );
}
