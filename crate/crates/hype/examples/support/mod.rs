//! Shared scaffolding for the examples: a synthetic suite plus a cached
//! pretrained desk-scale backbone so each example starts in seconds.

use std::path::PathBuf;

use hype::data::{SyntheticSuite, MASK_ID};
use hype::model::{
    load_checkpoint, pretrain_synthetic, save_checkpoint, HeadKind, ModelConfig, ModelState,
};

/// Returns a desk-scale backbone pretrained for `steps` masked-token steps
/// on the suite corpus, cached under `target/hype-examples/`.
pub fn pretrained_backbone(suite: &SyntheticSuite, steps: usize, seed: u64) -> ModelState {
    let config = ModelConfig::desk_scale(
        suite.tokenizer.vocab_size(),
        HeadKind::Classification { n_classes: 2 },
    );
    let cache = PathBuf::from(format!("target/hype-examples/base-{steps}-{seed}.ckpt"));
    if cache.exists() {
        if let Ok(state) = load_checkpoint(&cache) {
            if state.config.vocab_size == config.vocab_size {
                eprintln!("using cached backbone {}", cache.display());
                return state;
            }
        }
    }
    eprintln!("pretraining backbone ({steps} steps)...");
    let (state, report) =
        pretrain_synthetic(&config, &suite.corpus, MASK_ID, steps, seed).expect("pretrain");
    eprintln!(
        "  held-out masked loss {:.4} -> {:.4}",
        report.heldout_loss_at_init, report.heldout_loss_after
    );
    if let Some(dir) = cache.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    let _ = save_checkpoint(&state, &cache);
    state
}
