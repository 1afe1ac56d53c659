//! Encoder-only transformer with a classification/regression head.
//!
//! Post-layer-norm blocks (attention, add & norm, feed-forward, add & norm)
//! with learned absolute positional embeddings. Perturbation hooks sit
//! before every layer and between the attention and feed-forward sublayers;
//! the pooled sentence representation is the raw first-token hidden state
//! of the final layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TokenizedBatch;
use crate::error::{HypeError, Result};
use crate::optim::{AdamW, OptimizerConfig, ScheduleSpec};
use crate::perturb::{
    apply_dropout, apply_perturbation, DropoutSpec, Mode, NoiseSpec, PerturbTrace, Site,
};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HYPECKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification { n_classes: usize },
    Regression,
}

impl HeadKind {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadKind::Classification { n_classes } => *n_classes,
            HeadKind::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub head: HeadKind,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: small enough for minutes-scale experiments,
    /// deep enough to exercise layer masks.
    pub fn desk_scale(vocab_size: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 128,
            head,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(HypeError::Config("n_layers must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(HypeError::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_seq_len < 1 {
            return Err(HypeError::Config("max_seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// One transformer layer's parameter group.
#[derive(Debug)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub pos_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// A named trainable parameter plus its weight-decay eligibility.
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

/// All per-layer hidden states of one forward pass: `hidden[0]` is the
/// embedding output h^1 and `hidden[n]` is the final output h^{n+1}, each
/// of shape `[batch*seq, d_model]`.
pub struct LayerActivations {
    pub hidden: Vec<Tensor>,
    pub pooled: Tensor,
    pub batch: usize,
    pub seq_len: usize,
}

fn init_weight(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| 0.02 * rng.next_standard_normal()).collect();
    Tensor::param(shape, data)
}

fn init_zeros(shape: &[usize]) -> Tensor {
    let t = Tensor::zeros(shape);
    Tensor::param(&t.shape(), t.to_vec())
}

fn init_ones(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![1.0; n])
}

/// Deterministic initialization: weights from N(0, 0.02^2), biases zero,
/// layer-norm gain one / bias zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = RngStream::new(seed, 0, 0, Purpose::ParamInit);
    let d = config.d_model;
    let token_embedding = init_weight(&[config.vocab_size, d], &mut rng);
    let pos_embedding = init_weight(&[config.max_seq_len, d], &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            wq: init_weight(&[d, d], &mut rng),
            bq: init_zeros(&[d]),
            wk: init_weight(&[d, d], &mut rng),
            bk: init_zeros(&[d]),
            wv: init_weight(&[d, d], &mut rng),
            bv: init_zeros(&[d]),
            wo: init_weight(&[d, d], &mut rng),
            bo: init_zeros(&[d]),
            ln1_gain: init_ones(&[d]),
            ln1_bias: init_zeros(&[d]),
            w_ff1: init_weight(&[d, config.d_ff], &mut rng),
            b_ff1: init_zeros(&[config.d_ff]),
            w_ff2: init_weight(&[config.d_ff, d], &mut rng),
            b_ff2: init_zeros(&[d]),
            ln2_gain: init_ones(&[d]),
            ln2_bias: init_zeros(&[d]),
        });
    }
    let head_w = init_weight(&[d, config.head.out_dim()], &mut rng);
    let head_b = init_zeros(&[config.head.out_dim()]);
    Ok(ModelState {
        config: config.clone(),
        token_embedding,
        pos_embedding,
        layers,
        head_w,
        head_b,
    })
}

impl ModelState {
    /// Every trainable parameter exactly once, in declaration order.
    /// Layer-norm affines and biases are exempt from weight decay.
    pub fn parameters(&self) -> Vec<Param> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor: &Tensor, decay: bool| {
            out.push(Param {
                name,
                tensor: tensor.clone(),
                decay,
            });
        };
        push("token_embedding".into(), &self.token_embedding, true);
        push("pos_embedding".into(), &self.pos_embedding, true);
        for (i, l) in self.layers.iter().enumerate() {
            push(format!("layer{i}.wq"), &l.wq, true);
            push(format!("layer{i}.bq"), &l.bq, false);
            push(format!("layer{i}.wk"), &l.wk, true);
            push(format!("layer{i}.bk"), &l.bk, false);
            push(format!("layer{i}.wv"), &l.wv, true);
            push(format!("layer{i}.bv"), &l.bv, false);
            push(format!("layer{i}.wo"), &l.wo, true);
            push(format!("layer{i}.bo"), &l.bo, false);
            push(format!("layer{i}.ln1_gain"), &l.ln1_gain, false);
            push(format!("layer{i}.ln1_bias"), &l.ln1_bias, false);
            push(format!("layer{i}.w_ff1"), &l.w_ff1, true);
            push(format!("layer{i}.b_ff1"), &l.b_ff1, false);
            push(format!("layer{i}.w_ff2"), &l.w_ff2, true);
            push(format!("layer{i}.b_ff2"), &l.b_ff2, false);
            push(format!("layer{i}.ln2_gain"), &l.ln2_gain, false);
            push(format!("layer{i}.ln2_bias"), &l.ln2_bias, false);
        }
        push("head_w".into(), &self.head_w, true);
        push("head_b".into(), &self.head_b, false);
        out
    }

    /// Backbone parameters only (everything except the head).
    pub fn backbone_parameters(&self) -> Vec<Param> {
        self.parameters()
            .into_iter()
            .filter(|p| !p.name.starts_with("head_"))
            .collect()
    }

    /// FNV-1a hash over the exact bit patterns of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for p in self.parameters() {
            for v in p.tensor.data().iter() {
                for b in v.to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
        hash
    }

    /// Deep copy with fresh storage (same values, no shared graph).
    pub fn clone_state(&self) -> ModelState {
        let clone_t = |t: &Tensor| Tensor::param(&t.shape(), t.to_vec());
        ModelState {
            config: self.config.clone(),
            token_embedding: clone_t(&self.token_embedding),
            pos_embedding: clone_t(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: clone_t(&l.wq),
                    bq: clone_t(&l.bq),
                    wk: clone_t(&l.wk),
                    bk: clone_t(&l.bk),
                    wv: clone_t(&l.wv),
                    bv: clone_t(&l.bv),
                    wo: clone_t(&l.wo),
                    bo: clone_t(&l.bo),
                    ln1_gain: clone_t(&l.ln1_gain),
                    ln1_bias: clone_t(&l.ln1_bias),
                    w_ff1: clone_t(&l.w_ff1),
                    b_ff1: clone_t(&l.b_ff1),
                    w_ff2: clone_t(&l.w_ff2),
                    b_ff2: clone_t(&l.b_ff2),
                    ln2_gain: clone_t(&l.ln2_gain),
                    ln2_bias: clone_t(&l.ln2_bias),
                })
                .collect(),
            head_w: clone_t(&self.head_w),
            head_b: clone_t(&self.head_b),
        }
    }

    /// Replaces the head with a freshly initialized one sized for `head`.
    /// The head starts an order of magnitude smaller than backbone weights
    /// so its initial direction carries no commitment the short fine-tuning
    /// budget would have to unlearn.
    pub fn reset_head(&mut self, head: HeadKind, seed: u64) {
        let mut rng = RngStream::new(seed, 0, 0, Purpose::HeadInit);
        self.config.head = head;
        let n = self.config.d_model * head.out_dim();
        let data = (0..n).map(|_| 0.002 * rng.next_standard_normal()).collect();
        self.head_w = Tensor::param(&[self.config.d_model, head.out_dim()], data);
        self.head_b = init_zeros(&[head.out_dim()]);
    }
}

/// Stream keys for one forward pass; `step` keeps per-step noise fresh.
#[derive(Clone, Copy, Debug)]
pub struct ForwardRng {
    pub seed: u64,
    pub step: u64,
}

/// Runs the encoder stack over a tokenized batch.
///
/// In train mode the hidden state entering layer i is perturbed according
/// to `noise` (with the pre-layer hook covering h^1, the embedding output)
/// and dropout fires at the pre-layer hooks and after each feed-forward
/// sublayer. In eval mode both are the identity.
pub fn encode(
    state: &ModelState,
    batch: &TokenizedBatch,
    mode: Mode,
    noise: &NoiseSpec,
    dropout: &DropoutSpec,
    rng: ForwardRng,
    mut trace: Option<&mut PerturbTrace>,
) -> Result<LayerActivations> {
    let cfg = &state.config;
    noise.validate(cfg.n_layers)?;
    if batch.seq_len > cfg.max_seq_len {
        return Err(HypeError::Input(format!(
            "sequence length {} exceeds max_seq_len {} (caller must truncate)",
            batch.seq_len, cfg.max_seq_len
        )));
    }
    let (b, s) = (batch.batch, batch.seq_len);
    let n_heads = cfg.n_heads;

    let tok = state.token_embedding.embedding(&batch.ids)?;
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let pos = state.pos_embedding.embedding(&pos_ids)?;
    let mut h = tok.add(&pos)?;

    // Additive attention masks, one [s,s] block per batch element:
    // padded key columns get a large negative score.
    let mut attn_masks = vec![0.0; b * s * s];
    for bi in 0..b {
        for j in 0..s {
            if !batch.real[bi * s + j] {
                for q in 0..s {
                    attn_masks[bi * s * s + q * s + j] = -1e30;
                }
            }
        }
    }

    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    hidden.push(h.clone());

    for (li, layer) in state.layers.iter().enumerate() {
        let layer_index = li + 1;
        let mut noise_rng =
            RngStream::new(rng.seed, rng.step, layer_index as u64, Purpose::PreLayerNoise);
        h = apply_perturbation(
            &h,
            layer_index,
            Site::PreLayer,
            noise,
            mode,
            &mut noise_rng,
            trace.as_deref_mut(),
        )?;
        let mut drop_rng =
            RngStream::new(rng.seed, rng.step, layer_index as u64, Purpose::Dropout);
        h = apply_dropout(
            &h,
            dropout,
            mode,
            &mut drop_rng,
            trace.as_deref_mut().map(|t| (layer_index, Site::PreLayer, t)),
        )?;

        // Multi-head self-attention.
        let q = h.matmul(&layer.wq)?.add_bias(&layer.bq)?;
        let k = h.matmul(&layer.wk)?.add_bias(&layer.bk)?;
        let v = h.matmul(&layer.wv)?.add_bias(&layer.bv)?;
        let ctx = Tensor::multi_head_attention(&q, &k, &v, &attn_masks, b, s, n_heads)?;
        let attn_out = ctx.matmul(&layer.wo)?.add_bias(&layer.bo)?;
        h = h
            .add(&attn_out)?
            .layer_norm(&layer.ln1_gain, &layer.ln1_bias, cfg.layer_norm_eps)?;

        // Intra-layer hook: between self-attention and feed-forward.
        let mut intra_rng =
            RngStream::new(rng.seed, rng.step, layer_index as u64, Purpose::IntraLayerNoise);
        h = apply_perturbation(
            &h,
            layer_index,
            Site::IntraLayer,
            noise,
            mode,
            &mut intra_rng,
            trace.as_deref_mut(),
        )?;

        // Feed-forward with post-FFN dropout.
        let ff = h
            .matmul(&layer.w_ff1)?
            .add_bias(&layer.b_ff1)?
            .gelu()
            .matmul(&layer.w_ff2)?
            .add_bias(&layer.b_ff2)?;
        let ff = apply_dropout(
            &ff,
            dropout,
            mode,
            &mut drop_rng,
            trace.as_deref_mut().map(|t| (layer_index, Site::IntraLayer, t)),
        )?;
        h = h
            .add(&ff)?
            .layer_norm(&layer.ln2_gain, &layer.ln2_bias, cfg.layer_norm_eps)?;
        hidden.push(h.clone());
    }

    let pooled = pool_first_token(&hidden[cfg.n_layers], b, s)?;
    Ok(LayerActivations {
        hidden,
        pooled,
        batch: b,
        seq_len: s,
    })
}

/// First-token (position 0) slice of a `[batch*seq, d]` hidden state.
pub fn pool_first_token(hidden: &Tensor, batch: usize, seq_len: usize) -> Result<Tensor> {
    let d = hidden.shape()[1];
    let rows: Vec<Tensor> = (0..batch)
        .map(|bi| hidden.slice2d(bi * seq_len, 1, 0, d))
        .collect::<Result<_>>()?;
    Tensor::concat_rows(&rows)
}

/// Applies the head to the pooled first-token representation.
pub fn classify(state: &ModelState, activations: &LayerActivations) -> Result<Tensor> {
    activations.pooled.matmul(&state.head_w)?.add_bias(&state.head_b)
}

// ---------------------------------------------------------------------------
// Synthetic masked-token pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub heldout_loss_at_init: f64,
    pub heldout_loss_after: f64,
}

/// Masked-token prediction on a synthetic corpus; supplies the pretrained
/// checkpoint the fine-tuning experiments start from. The MLM projection is
/// trained alongside the backbone and discarded afterwards.
pub fn pretrain_synthetic(
    config: &ModelConfig,
    corpus: &[Vec<usize>],
    mask_id: usize,
    steps: usize,
    seed: u64,
) -> Result<(ModelState, PretrainReport)> {
    let state = init_params(config, seed)?;
    if corpus.is_empty() {
        return Err(HypeError::Input("pretraining corpus is empty".into()));
    }
    // Hold out a tail slice for the before/after loss comparison.
    let holdout = corpus.len() / 10;
    let (train, held) = corpus.split_at(corpus.len() - holdout.max(1));

    let mut mlm_rng = RngStream::new(seed, 0, 1, Purpose::ParamInit);
    let mlm_w = init_weight(&[config.d_model, config.vocab_size], &mut mlm_rng);
    let mlm_b = init_zeros(&[config.vocab_size]);
    // Pair-coherence head: when the corpus contains two-segment entries
    // (segments separated by the entry-final separator token), half of them
    // are corrupted with a random second segment each step and the pooled
    // first-token state learns to tell intact from corrupted pairs. This
    // gives the pooled representation sentence-pair supervision the
    // masked-token objective alone never provides.
    let nsp_w = init_weight(&[config.d_model, 2], &mut mlm_rng);
    let nsp_b = init_zeros(&[2]);
    let sep_id = corpus[0].last().copied().unwrap_or(0);
    let is_pair = |s: &[usize]| s.iter().filter(|&&t| t == sep_id).count() >= 2;
    let pair_pool: Vec<&Vec<usize>> = train.iter().filter(|s| is_pair(s)).collect();

    let heldout_loss_at_init =
        mlm_heldout_loss(&state, &mlm_w, &mlm_b, held, mask_id, seed)?;

    let mut params = state.parameters();
    params.push(Param {
        name: "mlm_w".into(),
        tensor: mlm_w.clone(),
        decay: true,
    });
    params.push(Param {
        name: "mlm_b".into(),
        tensor: mlm_b.clone(),
        decay: false,
    });
    params.push(Param {
        name: "nsp_w".into(),
        tensor: nsp_w.clone(),
        decay: true,
    });
    params.push(Param {
        name: "nsp_b".into(),
        tensor: nsp_b.clone(),
        decay: false,
    });
    let mut opt = AdamW::new(&params, OptimizerConfig::default());
    let schedule = ScheduleSpec {
        peak_lr: 1e-3,
        warmup_steps: (steps / 10).max(1).min(steps),
        total_steps: steps.max(1),
    };

    let batch_size = 16usize;
    for step in 0..steps {
        let mut pick = RngStream::new(seed, step as u64, 0, Purpose::Shuffle);
        let mut sampled: Vec<Vec<usize>> = (0..batch_size)
            .map(|_| train[pick.next_below(train.len() as u64) as usize].clone())
            .collect();
        // Pair coherence: corrupt half of the two-segment entries.
        let mut pair_rng = RngStream::new(seed, step as u64, 1, Purpose::Shuffle);
        let mut coherence: Vec<(usize, usize)> = Vec::new(); // (batch row, label)
        if !pair_pool.is_empty() {
            for (bi, sent) in sampled.iter_mut().enumerate() {
                if !is_pair(sent) {
                    continue;
                }
                if pair_rng.next_f64() < 0.5 {
                    coherence.push((bi, 1));
                } else {
                    let donor =
                        pair_pool[pair_rng.next_below(pair_pool.len() as u64) as usize];
                    let cut = sent.iter().position(|&t| t == sep_id).expect("pair");
                    let dcut = donor.iter().position(|&t| t == sep_id).expect("pair");
                    let mut corrupted = sent[..=cut].to_vec();
                    corrupted.extend_from_slice(&donor[dcut + 1..]);
                    *sent = corrupted;
                    coherence.push((bi, 0));
                }
            }
        }
        let refs: Vec<&Vec<usize>> = sampled.iter().collect();
        let mut mask_rng = RngStream::new(seed, step as u64, 0, Purpose::MaskSelect);
        let (tb, masked_rows, targets) = build_mlm_batch(&refs, mask_id, &mut mask_rng);
        if masked_rows.is_empty() {
            continue;
        }
        for p in &params {
            p.tensor.zero_grad();
        }
        let acts = encode(
            &state,
            &tb,
            Mode::Train,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            ForwardRng { seed, step: step as u64 },
            None,
        )?;
        let final_h = &acts.hidden[config.n_layers];
        let picked: Vec<Tensor> = masked_rows
            .iter()
            .map(|&r| final_h.slice2d(r, 1, 0, config.d_model))
            .collect::<Result<_>>()?;
        let feats = Tensor::concat_rows(&picked)?;
        let logits = feats.matmul(&mlm_w)?.add_bias(&mlm_b)?;
        let mut loss = logits.cross_entropy(&targets)?;
        if !coherence.is_empty() {
            let rows: Vec<Tensor> = coherence
                .iter()
                .map(|&(bi, _)| acts.pooled.slice2d(bi, 1, 0, config.d_model))
                .collect::<Result<_>>()?;
            let pair_feats = Tensor::concat_rows(&rows)?;
            let pair_logits = pair_feats.matmul(&nsp_w)?.add_bias(&nsp_b)?;
            let labels: Vec<usize> = coherence.iter().map(|&(_, l)| l).collect();
            loss = loss.add(&pair_logits.cross_entropy(&labels)?)?;
        }
        loss.backward()?;
        let lr = schedule.lr_at(step)?;
        opt.step(&params, lr)?;
    }

    let heldout_loss_after = mlm_heldout_loss(&state, &mlm_w, &mlm_b, held, mask_id, seed)?;
    Ok((
        state,
        PretrainReport {
            steps,
            heldout_loss_at_init,
            heldout_loss_after,
        },
    ))
}

fn build_mlm_batch(
    sentences: &[&Vec<usize>],
    mask_id: usize,
    mask_rng: &mut RngStream,
) -> (TokenizedBatch, Vec<usize>, Vec<usize>) {
    let seq_len = sentences.iter().map(|s| s.len()).max().unwrap_or(1);
    let b = sentences.len();
    let mut ids = vec![0usize; b * seq_len]; // pad id 0
    let mut real = vec![false; b * seq_len];
    let mut masked_rows = Vec::new();
    let mut targets = Vec::new();
    for (bi, sent) in sentences.iter().enumerate() {
        for (j, &tok) in sent.iter().enumerate() {
            let row = bi * seq_len + j;
            real[row] = true;
            if tok != mask_id && mask_rng.next_f64() < 0.15 {
                ids[row] = mask_id;
                masked_rows.push(row);
                targets.push(tok);
            } else {
                ids[row] = tok;
            }
        }
    }
    (
        TokenizedBatch {
            batch: b,
            seq_len,
            ids,
            real,
            segments: vec![0; b * seq_len],
        },
        masked_rows,
        targets,
    )
}

fn mlm_heldout_loss(
    state: &ModelState,
    mlm_w: &Tensor,
    mlm_b: &Tensor,
    held: &[Vec<usize>],
    mask_id: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for (ci, chunk) in held.chunks(16).enumerate() {
        let refs: Vec<&Vec<usize>> = chunk.iter().collect();
        // Fixed masking key so init/after comparisons see identical masks.
        let mut mask_rng = RngStream::new(seed, ci as u64, 1, Purpose::MaskSelect);
        let (tb, masked_rows, targets) = build_mlm_batch(&refs, mask_id, &mut mask_rng);
        if masked_rows.is_empty() {
            continue;
        }
        let acts = encode(
            state,
            &tb,
            Mode::Eval,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            ForwardRng { seed, step: 0 },
            None,
        )?;
        let final_h = &acts.hidden[state.config.n_layers];
        let picked: Vec<Tensor> = masked_rows
            .iter()
            .map(|&r| final_h.slice2d(r, 1, 0, state.config.d_model))
            .collect::<Result<_>>()?;
        let feats = Tensor::concat_rows(&picked)?;
        let logits = feats.matmul(mlm_w)?.add_bias(mlm_b)?;
        total += logits.cross_entropy(&targets)?.item();
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

/// Versioned binary checkpoint: magic, format version, JSON config record,
/// then parameter arrays in declaration order as little-endian f64.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&state.config)
        .map_err(|e| HypeError::Format(format!("config serialization failed: {e}")))?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    for p in state.parameters() {
        let data = p.tensor.data();
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for v in data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(HypeError::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut vbuf = [0u8; 4];
    read_exact(&mut r, &mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != CHECKPOINT_VERSION {
        return Err(HypeError::Format(format!(
            "unsupported checkpoint format version {version} (supported: {CHECKPOINT_VERSION})"
        )));
    }
    let mut lbuf = [0u8; 8];
    read_exact(&mut r, &mut lbuf)?;
    let cfg_len = u64::from_le_bytes(lbuf) as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_buf)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| HypeError::Format(format!("corrupt config record: {e}")))?;
    let state = init_params(&config, 0)?;
    for p in state.parameters() {
        read_exact(&mut r, &mut lbuf)?;
        let n = u64::from_le_bytes(lbuf) as usize;
        if n != p.tensor.len() {
            return Err(HypeError::Format(format!(
                "parameter {} length {} does not match config ({})",
                p.name,
                n,
                p.tensor.len()
            )));
        }
        let mut values = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            read_exact(&mut r, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        p.tensor.update_data(|d| d.copy_from_slice(&values));
    }
    Ok(state)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| HypeError::Format("checkpoint truncated or corrupt".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenizedBatch;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 30,
            max_seq_len: 10,
            head: HeadKind::Classification { n_classes: 2 },
            layer_norm_eps: 1e-12,
        }
    }

    fn tiny_batch() -> TokenizedBatch {
        TokenizedBatch {
            batch: 2,
            seq_len: 4,
            ids: vec![2, 5, 6, 0, 2, 7, 8, 9],
            real: vec![true, true, true, false, true, true, true, true],
            segments: vec![0; 8],
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = tiny_config();
        let a = init_params(&c, 42).unwrap();
        let b = init_params(&c, 42).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c2 = init_params(&c, 43).unwrap();
        assert_ne!(a.checksum(), c2.checksum());
    }

    #[test]
    fn layer_norm_gains_are_one_at_init() {
        let state = init_params(&tiny_config(), 1).unwrap();
        for l in &state.layers {
            assert!(l.ln1_gain.data().iter().all(|&v| v == 1.0));
            assert!(l.ln2_gain.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn eval_encode_ignores_noise_spec() {
        let state = init_params(&tiny_config(), 7).unwrap();
        let batch = tiny_batch();
        let rng = ForwardRng { seed: 3, step: 0 };
        let clean = encode(
            &state,
            &batch,
            Mode::Eval,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            rng,
            None,
        )
        .unwrap();
        let noisy_spec = NoiseSpec::normal(0.5);
        let with_spec = encode(
            &state,
            &batch,
            Mode::Eval,
            &noisy_spec,
            &DropoutSpec::new(0.5).unwrap(),
            rng,
            None,
        )
        .unwrap();
        for (a, b) in clean.hidden.iter().zip(&with_spec.hidden) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn train_mode_with_zero_noise_matches_eval() {
        let state = init_params(&tiny_config(), 7).unwrap();
        let batch = tiny_batch();
        let rng = ForwardRng { seed: 3, step: 0 };
        let eval = encode(
            &state,
            &batch,
            Mode::Eval,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            rng,
            None,
        )
        .unwrap();
        let train = encode(
            &state,
            &batch,
            Mode::Train,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            rng,
            None,
        )
        .unwrap();
        for (a, b) in eval.hidden.iter().zip(&train.hidden) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn masked_lower_layers_match_unperturbed_run_bit_exactly() {
        let state = init_params(&tiny_config(), 7).unwrap();
        let batch = tiny_batch();
        let rng = ForwardRng { seed: 11, step: 4 };
        let clean = encode(
            &state,
            &batch,
            Mode::Train,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            rng,
            None,
        )
        .unwrap();
        // Noise only on the top half (layer 2 of 2).
        let spec = NoiseSpec::normal(1e-3).with_layer_mask([2]);
        let masked = encode(
            &state,
            &batch,
            Mode::Train,
            &spec,
            &DropoutSpec::off(),
            rng,
            None,
        )
        .unwrap();
        // h^1 and h^2 (inputs to the masked-out lower layer and its output)
        // are untouched; h^3 differs.
        assert_eq!(clean.hidden[0].to_vec(), masked.hidden[0].to_vec());
        assert_eq!(clean.hidden[1].to_vec(), masked.hidden[1].to_vec());
        assert_ne!(clean.hidden[2].to_vec(), masked.hidden[2].to_vec());
    }

    #[test]
    fn logits_depend_only_on_first_token_slice() {
        let state = init_params(&tiny_config(), 5).unwrap();
        let batch = tiny_batch();
        let rng = ForwardRng { seed: 0, step: 0 };
        let acts = encode(
            &state,
            &batch,
            Mode::Eval,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            rng,
            None,
        )
        .unwrap();
        let logits = classify(&state, &acts).unwrap();
        // Rebuild pooled from a perturbed final hidden state where only
        // non-first positions changed.
        let final_h = &acts.hidden[2];
        let mut data = final_h.to_vec();
        for bi in 0..batch.batch {
            for j in 1..batch.seq_len {
                let off = (bi * batch.seq_len + j) * 8;
                for v in data[off..off + 8].iter_mut() {
                    *v += 100.0;
                }
            }
        }
        let perturbed = Tensor::new(&final_h.shape(), data);
        let pooled = pool_first_token(&perturbed, batch.batch, batch.seq_len).unwrap();
        let acts2 = LayerActivations {
            hidden: vec![],
            pooled,
            batch: batch.batch,
            seq_len: batch.seq_len,
        };
        let logits2 = classify(&state, &acts2).unwrap();
        assert_eq!(logits.to_vec(), logits2.to_vec());
    }

    #[test]
    fn classify_zero_hidden_zero_bias_gives_zero_logits() {
        let state = init_params(&tiny_config(), 5).unwrap();
        let acts = LayerActivations {
            hidden: vec![],
            pooled: Tensor::zeros(&[2, 8]),
            batch: 2,
            seq_len: 1,
        };
        let logits = classify(&state, &acts).unwrap();
        assert_eq!(logits.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn classify_identity_head_reproduces_affine_map() {
        let state = init_params(&tiny_config(), 5).unwrap();
        // Head weights: 2-dim toy with hand-set values on an 8-dim pooled.
        let mut w = vec![0.0; 8 * 2];
        w[0] = 1.0; // dim0 -> class0
        w[3] = -2.0; // dim1 -> class1
        state.head_w.update_data(|d| d.copy_from_slice(&w));
        state.head_b.update_data(|d| d.copy_from_slice(&[0.5, -0.25]));
        let mut pooled = vec![0.0; 8];
        pooled[0] = 3.0;
        pooled[1] = 4.0;
        let acts = LayerActivations {
            hidden: vec![],
            pooled: Tensor::new(&[1, 8], pooled),
            batch: 1,
            seq_len: 1,
        };
        let logits = classify(&state, &acts).unwrap().to_vec();
        assert!((logits[0] - (3.0 + 0.5)).abs() < 1e-12);
        assert!((logits[1] - (4.0 * -2.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn overlong_sequence_is_an_input_error() {
        let state = init_params(&tiny_config(), 7).unwrap();
        let batch = TokenizedBatch {
            batch: 1,
            seq_len: 11,
            ids: vec![2; 11],
            real: vec![true; 11],
            segments: vec![0; 11],
        };
        let err = encode(
            &state,
            &batch,
            Mode::Eval,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            ForwardRng { seed: 0, step: 0 },
            None,
        );
        assert!(matches!(err, Err(HypeError::Input(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let state = init_params(&tiny_config(), 9).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state.checksum(), loaded.checksum());
        assert_eq!(state.config, loaded.config);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let state = init_params(&tiny_config(), 9).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(HypeError::Format(_))));
    }

    #[test]
    fn future_version_is_an_explicit_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let state = init_params(&tiny_config(), 9).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn pretrain_zero_steps_returns_initialization() {
        let c = tiny_config();
        let corpus: Vec<Vec<usize>> = (0..40).map(|i| vec![2, 5 + i % 10, 6, 7]).collect();
        let (state, report) = pretrain_synthetic(&c, &corpus, 4, 0, 21).unwrap();
        let fresh = init_params(&c, 21).unwrap();
        assert_eq!(state.checksum(), fresh.checksum());
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn pretrain_is_deterministic_per_seed() {
        let c = tiny_config();
        let corpus: Vec<Vec<usize>> = (0..40).map(|i| vec![2, 5 + i % 10, 6, 7]).collect();
        let (a, _) = pretrain_synthetic(&c, &corpus, 4, 5, 33).unwrap();
        let (b, _) = pretrain_synthetic(&c, &corpus, 4, 5, 33).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn pretrain_reduces_heldout_masked_loss() {
        let c = tiny_config();
        let corpus: Vec<Vec<usize>> = (0..200)
            .map(|i| vec![2, 5 + (i % 5) * 2, 6 + (i % 5) * 2, 7, 8])
            .collect();
        let (_, report) = pretrain_synthetic(&c, &corpus, 4, 60, 13).unwrap();
        assert!(
            report.heldout_loss_after < report.heldout_loss_at_init,
            "after {} vs init {}",
            report.heldout_loss_after,
            report.heldout_loss_at_init
        );
    }
}
