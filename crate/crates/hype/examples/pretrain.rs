//! Pretrains the desk-scale backbone on the synthetic corpus with the
//! masked-token objective and saves a reusable checkpoint.

#[path = "support/mod.rs"]
mod support;

use hype::data::generate_synthetic_suite;
use hype::model::save_checkpoint;

fn main() {
    let suite = generate_synthetic_suite(0);
    println!(
        "corpus: {} sentences, vocab {} tokens",
        suite.corpus.len(),
        suite.tokenizer.vocab_size()
    );
    let state = support::pretrained_backbone(&suite, 300, 0);
    let out = std::path::Path::new("target/hype-examples/pretrained.ckpt");
    save_checkpoint(&state, out).expect("save checkpoint");
    println!("checksum {:#018x}", state.checksum());
    println!("saved {}", out.display());
}
