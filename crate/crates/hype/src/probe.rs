//! Evaluation metrics, frozen-backbone linear probing of per-layer
//! representations, and token-representation similarity (anisotropy)
//! curves.

use serde::{Deserialize, Serialize};

use crate::data::{
    build_batch, tokenize, Dataset, MetricKind, PaddingPolicy, Target, TaskKind, TokenizerSpec,
};
use crate::error::{HypeError, Result};
use crate::model::{encode, pool_first_token, ForwardRng, ModelState, Param};
use crate::optim::{AdamW, OptimizerConfig};
use crate::perturb::{DropoutSpec, Mode, NoiseSpec};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_paired(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Binary F1 for `positive` as the positive class; 0 when the class never
/// appears in either vector.
pub fn f1_binary(pred: &[usize], gold: &[usize], positive: usize) -> Result<f64> {
    check_paired(pred.len(), gold.len())?;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Matthews correlation for binary labels. Returns `(value, degenerate)`:
/// when any marginal count is zero the coefficient is undefined and is
/// reported as 0 with the flag set.
pub fn matthews(pred: &[usize], gold: &[usize]) -> Result<(f64, bool)> {
    check_paired(pred.len(), gold.len())?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0f64, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        if p > 1 || g > 1 {
            return Err(HypeError::Input(
                "matthews correlation expects binary labels 0/1".into(),
            ));
        }
        match (p, g) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            _ => fn_ += 1.0,
        }
    }
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((tp * tn - fp * fn_) / denom.sqrt(), false))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(HypeError::Input("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Average ranks: ties get the mean of the rank positions they occupy.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x.len(), y.len())?;
    pearson(&average_ranks(x), &average_ranks(y))
}

fn check_paired(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(HypeError::Dimension {
            op: "metric",
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    if a == 0 {
        return Err(HypeError::Input("metric over empty predictions".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum Predictions {
    Classes(Vec<usize>),
    Scores(Vec<f64>),
}

/// Score predictions against gold targets with the requested metric.
/// Returns `(score, degenerate)`; `degenerate` is only ever set for
/// Matthews correlation with a zero denominator.
pub fn evaluate_metric(
    metric: MetricKind,
    pred: &Predictions,
    gold: &[Target],
) -> Result<(f64, bool)> {
    match (metric, pred) {
        (MetricKind::Accuracy | MetricKind::F1 | MetricKind::Matthews, Predictions::Classes(p)) => {
            let g: Vec<usize> = gold
                .iter()
                .map(|t| match t {
                    Target::Class(c) => Ok(*c),
                    _ => Err(HypeError::Input("classification metric needs class labels".into())),
                })
                .collect::<Result<_>>()?;
            match metric {
                MetricKind::Accuracy => Ok((accuracy(p, &g)?, false)),
                MetricKind::F1 => Ok((f1_binary(p, &g, 1)?, false)),
                _ => matthews(p, &g),
            }
        }
        (
            MetricKind::Pearson | MetricKind::Spearman | MetricKind::PearsonSpearman,
            Predictions::Scores(p),
        ) => {
            let g: Vec<f64> = gold
                .iter()
                .map(|t| match t {
                    Target::Score(v) => Ok(*v),
                    _ => Err(HypeError::Input("regression metric needs score labels".into())),
                })
                .collect::<Result<_>>()?;
            let v = match metric {
                MetricKind::Pearson => pearson(p, &g)?,
                MetricKind::Spearman => spearman(p, &g)?,
                _ => (pearson(p, &g)? + spearman(p, &g)?) / 2.0,
            };
            Ok((v, false))
        }
        _ => Err(HypeError::Usage(format!(
            "metric {metric:?} does not match prediction kind"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Pooled per-layer features
// ---------------------------------------------------------------------------

const EVAL_BATCH: usize = 32;

/// Encodes a dataset in eval mode and returns, for every requested layer
/// index, the pooled first-token features: index 0 is the embedding output,
/// index i the output of layer i.
pub fn pooled_features(
    state: &ModelState,
    dataset: &Dataset,
    tokenizer: &TokenizerSpec,
    max_len: usize,
    layers: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = state.config.n_layers;
    for &l in layers {
        if l > n {
            return Err(HypeError::Usage(format!(
                "layer index {l} out of range 0..={n}"
            )));
        }
    }
    let d = state.config.d_model;
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(dataset.len()); layers.len()];
    for chunk in dataset.examples.chunks(EVAL_BATCH) {
        let toks: Vec<_> = chunk
            .iter()
            .map(|ex| tokenize(tokenizer, ex, max_len))
            .collect();
        let batch = build_batch(&toks, PaddingPolicy::BatchMax);
        let acts = encode(
            state,
            &batch,
            Mode::Eval,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            ForwardRng { seed: 0, step: 0 },
            None,
        )?;
        for (li, &l) in layers.iter().enumerate() {
            let pooled = pool_first_token(&acts.hidden[l], batch.batch, batch.seq_len)?;
            let data = pooled.to_vec();
            for b in 0..batch.batch {
                out[li].push(data[b * d..(b + 1) * d].to_vec());
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear probing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            lr: 0.001,
            epochs: 3,
            batch_size: 16,
            max_len: 128,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub metric: MetricKind,
    pub score: f64,
    pub degenerate: bool,
}

/// Trains a fresh linear head on frozen pooled features of layer `layer`
/// and scores it on the dev split, in points (metric x 100) like every
/// other reported score. The backbone is never touched; its checksum is
/// asserted identical before and after.
pub fn linear_probe(
    state: &ModelState,
    train: &Dataset,
    dev: &Dataset,
    tokenizer: &TokenizerSpec,
    metric: MetricKind,
    layer: usize,
    settings: &ProbeSettings,
    seed: u64,
) -> Result<ProbeResult> {
    let checksum_before = state.checksum();
    let d = state.config.d_model;
    let out_dim = match train.task {
        TaskKind::Classification => train.label_names.len(),
        TaskKind::Regression => 1,
    };
    if train.task == TaskKind::Classification && out_dim < 2 {
        return Err(HypeError::Input("probe needs at least two classes".into()));
    }

    let train_x = pooled_features(state, train, tokenizer, settings.max_len, &[layer])?
        .pop()
        .expect("one layer requested");
    let dev_x = pooled_features(state, dev, tokenizer, settings.max_len, &[layer])?
        .pop()
        .expect("one layer requested");

    let mut rng = RngStream::new(seed, 0, layer as u64, Purpose::Probe);
    let w = Tensor::param(
        &[d, out_dim],
        (0..d * out_dim).map(|_| 0.02 * rng.next_standard_normal()).collect(),
    );
    let b = Tensor::param(&[out_dim], vec![0.0; out_dim]);
    let params = [
        Param { name: "probe.w".into(), tensor: w.clone(), decay: true },
        Param { name: "probe.b".into(), tensor: b.clone(), decay: false },
    ];
    let mut opt = AdamW::new(
        &params,
        OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
    );

    for epoch in 0..settings.epochs {
        let mut shuffle = RngStream::new(seed, epoch as u64 + 1, layer as u64, Purpose::Probe);
        let order = shuffle.permutation(train.len());
        for idx_chunk in order.chunks(settings.batch_size) {
            let bsz = idx_chunk.len();
            let mut xs = Vec::with_capacity(bsz * d);
            for &i in idx_chunk {
                xs.extend_from_slice(&train_x[i]);
            }
            let x = Tensor::new(&[bsz, d], xs);
            let logits = x.matmul(&w)?.add_bias(&b)?;
            let loss = match train.task {
                TaskKind::Classification => {
                    let labels: Vec<usize> = idx_chunk
                        .iter()
                        .map(|&i| match train.examples[i].target {
                            Target::Class(c) => Ok(c),
                            _ => Err(HypeError::Input("probe train example lacks a class label".into())),
                        })
                        .collect::<Result<_>>()?;
                    logits.cross_entropy(&labels)?
                }
                TaskKind::Regression => {
                    let targets: Vec<f64> = idx_chunk
                        .iter()
                        .map(|&i| match train.examples[i].target {
                            Target::Score(v) => Ok(v),
                            _ => Err(HypeError::Input("probe train example lacks a score".into())),
                        })
                        .collect::<Result<_>>()?;
                    logits.mse(&Tensor::new(&[bsz, 1], targets))?
                }
            };
            w.zero_grad();
            b.zero_grad();
            loss.backward()?;
            opt.step(&params, settings.lr)?;
        }
    }

    // Score on dev.
    let pred = {
        let mut xs = Vec::with_capacity(dev.len() * d);
        for row in &dev_x {
            xs.extend_from_slice(row);
        }
        let x = Tensor::new(&[dev.len(), d], xs);
        let logits = x.matmul(&w)?.add_bias(&b)?;
        let data = logits.to_vec();
        match train.task {
            TaskKind::Classification => Predictions::Classes(
                (0..dev.len())
                    .map(|i| {
                        let row = &data[i * out_dim..(i + 1) * out_dim];
                        row.iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                            .map(|(j, _)| j)
                            .expect("non-empty row")
                    })
                    .collect(),
            ),
            TaskKind::Regression => Predictions::Scores(data),
        }
    };
    let gold: Vec<Target> = dev.examples.iter().map(|e| e.target.clone()).collect();
    let (score, degenerate) = evaluate_metric(metric, &pred, &gold)?;

    assert_eq!(
        state.checksum(),
        checksum_before,
        "probe must not modify the backbone"
    );
    Ok(ProbeResult {
        layer,
        metric,
        score: score * 100.0,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Token-representation similarity (anisotropy)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityCurve {
    /// Mean pairwise token cosine per layer index (0 = embedding output).
    pub per_layer: Vec<f64>,
    /// Samples skipped because fewer than two tokens were eligible.
    pub skipped: usize,
    pub samples_used: usize,
}

/// Mean pairwise cosine similarity among a set of row vectors, computed
/// via the normalized-sum identity; exactly matches the explicit double
/// loop over unordered pairs.
pub fn mean_pairwise_cosine(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        return Err(HypeError::Input(
            "mean pairwise cosine needs at least two vectors".into(),
        ));
    }
    let d = rows[0].len();
    let mut sum = vec![0.0; d];
    for r in rows {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(HypeError::Input("zero vector in cosine computation".into()));
        }
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v / norm;
        }
    }
    let total = sum.iter().map(|v| v * v).sum::<f64>();
    Ok((total - n as f64) / (n as f64 * (n - 1) as f64))
}

/// Per-layer anisotropy over a dataset: for each sample, the mean pairwise
/// cosine among its real (non-padding) token vectors — the first-position
/// token is excluded unless `include_first` — averaged over samples.
pub fn token_similarity(
    state: &ModelState,
    dataset: &Dataset,
    tokenizer: &TokenizerSpec,
    max_len: usize,
    include_first: bool,
    max_samples: usize,
) -> Result<SimilarityCurve> {
    let n_layers = state.config.n_layers;
    let d = state.config.d_model;
    let take = dataset.len().min(max_samples);
    let mut sums = vec![0.0; n_layers + 1];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for chunk in dataset.examples[..take].chunks(EVAL_BATCH) {
        let toks: Vec<_> = chunk
            .iter()
            .map(|ex| tokenize(tokenizer, ex, max_len))
            .collect();
        let batch = build_batch(&toks, PaddingPolicy::BatchMax);
        let acts = encode(
            state,
            &batch,
            Mode::Eval,
            &NoiseSpec::none(),
            &DropoutSpec::off(),
            ForwardRng { seed: 0, step: 0 },
            None,
        )?;
        let layer_data: Vec<Vec<f64>> = acts.hidden.iter().map(|h| h.to_vec()).collect();
        for bi in 0..batch.batch {
            let start = if include_first { 0 } else { 1 };
            let positions: Vec<usize> = (start..batch.seq_len)
                .filter(|&j| batch.real[bi * batch.seq_len + j])
                .collect();
            if positions.len() < 2 {
                skipped += 1;
                continue;
            }
            for (l, data) in layer_data.iter().enumerate() {
                let rows: Vec<Vec<f64>> = positions
                    .iter()
                    .map(|&j| {
                        let base = (bi * batch.seq_len + j) * d;
                        data[base..base + d].to_vec()
                    })
                    .collect();
                sums[l] += mean_pairwise_cosine(&rows)?;
            }
            used += 1;
        }
    }
    if used == 0 {
        return Err(HypeError::Input(
            "no sample had two or more eligible tokens".into(),
        ));
    }
    Ok(SimilarityCurve {
        per_layer: sums.iter().map(|s| s / used as f64).collect(),
        skipped,
        samples_used: used,
    })
}
