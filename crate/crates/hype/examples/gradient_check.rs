//! Checks analytic gradients against central finite differences on a tiny
//! model with active, replayed noise — the same machinery the test suite
//! uses, in a runnable form.

use hype::data::TokenizedBatch;
use hype::model::{classify, encode, init_params, ForwardRng, HeadKind, ModelConfig, ModelState};
use hype::perturb::{DropoutSpec, Mode, NoisePosition, NoiseSpec};

fn main() {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_seq_len: 16,
        head: HeadKind::Classification { n_classes: 2 },
        layer_norm_eps: 1e-12,
    };
    let state = init_params(&config, 17).expect("init");
    let ids: Vec<usize> = vec![2, 5, 6, 7, 8, 9, 10, 3, 2, 7, 5, 11, 9, 6, 8, 3];
    let real = vec![true; ids.len()];
    let segments = vec![0u8; ids.len()];
    let batch = TokenizedBatch {
        batch: 2,
        seq_len: 8,
        ids,
        real,
        segments,
    };
    let labels = [0usize, 1];
    let noise = NoiseSpec::normal(1e-2).with_position(NoisePosition::Both);

    let loss_of = |state: &ModelState| -> f64 {
        let acts = encode(
            state,
            &batch,
            Mode::Train,
            &noise,
            &DropoutSpec::off(),
            ForwardRng { seed: 5, step: 0 },
            None,
        )
        .expect("encode");
        classify(state, &acts)
            .expect("classify")
            .cross_entropy(&labels)
            .expect("loss")
            .item()
    };

    let params = state.parameters();
    for p in &params {
        p.tensor.zero_grad();
    }
    let acts = encode(
        &state,
        &batch,
        Mode::Train,
        &noise,
        &DropoutSpec::off(),
        ForwardRng { seed: 5, step: 0 },
        None,
    )
    .expect("encode");
    classify(&state, &acts)
        .expect("classify")
        .cross_entropy(&labels)
        .expect("loss")
        .backward()
        .expect("backward");

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for p in &params {
        let analytic = p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.len()]);
        for j in 0..p.tensor.len() {
            let orig = p.tensor.to_vec()[j];
            p.tensor.update_data(|d| d[j] = orig + h);
            let lp = loss_of(&state);
            p.tensor.update_data(|d| d[j] = orig - h);
            let lm = loss_of(&state);
            p.tensor.update_data(|d| d[j] = orig);
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[j].abs().max(fd.abs());
            if denom < 1e-6 {
                continue;
            }
            let rel = (analytic[j] - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]: analytic {:.6e} fd {:.6e}", p.name, j, analytic[j], fd);
            }
        }
    }
    println!("max relative error {max_rel:.3e}  (worst: {worst})");
    println!("{}", if max_rel < 1e-4 { "OK: < 1e-4" } else { "FAILED: >= 1e-4" });
}
