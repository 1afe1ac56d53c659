//! Fine-tuning loop, run records, and the seed x learning-rate grid
//! search with rayon-parallel cells.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_batch, tokenize, Dataset, MetricKind, PaddingPolicy, Target, TaskKind, TokenizerSpec,
};
use crate::error::{HypeError, Result};
use crate::model::{
    classify, encode, ForwardRng, HeadKind, ModelConfig, ModelState, init_params,
};
use crate::optim::{AdamW, OptimizerConfig, ScheduleSpec};
use crate::perturb::{DropoutSpec, Mode, NoiseSpec, PerturbTrace};
use crate::probe::{evaluate_metric, Predictions};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of total steps spent ramping the learning rate up.
    pub warmup_frac: f64,
    pub max_len: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub dropout: DropoutSpec,
    pub optimizer: OptimizerConfig,
    /// When false, the dev set is scored only after the final epoch
    /// (grid cells use this to cut evaluation cost).
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
}

fn default_true() -> bool {
    true
}

impl TrainRunConfig {
    pub fn new(peak_lr: f64, seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            epochs: 3,
            batch_size: 16,
            peak_lr,
            warmup_frac: 0.10,
            max_len: 128,
            seed,
            noise: NoiseSpec::none(),
            dropout: DropoutSpec::off(),
            optimizer: OptimizerConfig::default(),
            eval_each_epoch: true,
        }
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_dropout(mut self, dropout: DropoutSpec) -> Self {
        self.dropout = dropout;
        self
    }
}

/// Everything one fine-tuning run produced; serializes deterministically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub steps: usize,
    pub metric: MetricKind,
    /// Final dev score, reported in points (metric x 100).
    pub dev_score: f64,
    /// Dev score after each epoch, in points.
    pub epoch_scores: Vec<f64>,
    pub final_train_loss: f64,
    /// The metric denominator degenerated (constant predictions).
    pub degenerate: bool,
    /// Training produced a non-finite loss; score fields are not meaningful.
    pub collapsed: bool,
    pub max_noise_delta: f64,
}

fn head_for(dataset: &Dataset) -> HeadKind {
    match dataset.task {
        TaskKind::Classification => HeadKind::Classification {
            n_classes: dataset.label_names.len(),
        },
        TaskKind::Regression => HeadKind::Regression,
    }
}

/// Eval-mode predictions over a dataset, noise and dropout forced off.
pub fn predict(
    state: &ModelState,
    dataset: &Dataset,
    tokenizer: &TokenizerSpec,
    max_len: usize,
) -> Result<Predictions> {
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    for chunk in dataset.examples.chunks(32) {
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
        let logits = classify(state, &acts)?;
        let data = logits.to_vec();
        let out_dim = state.config.head.out_dim();
        for i in 0..batch.batch {
            let row = &data[i * out_dim..(i + 1) * out_dim];
            match dataset.task {
                TaskKind::Classification => classes.push(
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .map(|(j, _)| j)
                        .expect("non-empty row"),
                ),
                TaskKind::Regression => scores.push(row[0]),
            }
        }
    }
    Ok(match dataset.task {
        TaskKind::Classification => Predictions::Classes(classes),
        TaskKind::Regression => Predictions::Scores(scores),
    })
}

/// Dev score in points (metric x 100) plus the degenerate flag.
pub fn score_on(
    state: &ModelState,
    dataset: &Dataset,
    tokenizer: &TokenizerSpec,
    metric: MetricKind,
    max_len: usize,
) -> Result<(f64, bool)> {
    let pred = predict(state, dataset, tokenizer, max_len)?;
    let gold: Vec<Target> = dataset.examples.iter().map(|e| e.target.clone()).collect();
    let (v, degenerate) = evaluate_metric(metric, &pred, &gold)?;
    Ok((100.0 * v, degenerate))
}

/// Fine-tunes a copy of `base` on `train`, evaluating on `dev` after each
/// epoch. The head is re-initialized from the run seed so techniques that
/// share a seed start from an identical head. Returns the trained state
/// and the run record; a non-finite training loss short-circuits into a
/// collapsed record.
pub fn finetune(
    base: &ModelState,
    train: &Dataset,
    dev: &Dataset,
    tokenizer: &TokenizerSpec,
    metric: MetricKind,
    cfg: &TrainRunConfig,
) -> Result<(ModelState, RunRecord)> {
    if train.is_empty() || dev.is_empty() {
        return Err(HypeError::Input("finetune needs non-empty splits".into()));
    }
    let mut state = base.clone_state();
    state.reset_head(head_for(train), cfg.seed);
    cfg.noise.validate(state.config.n_layers)?;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = ScheduleSpec {
        peak_lr: cfg.peak_lr,
        warmup_steps: ((total_steps as f64 * cfg.warmup_frac).round() as usize).max(1),
        total_steps,
    };
    let params = state.parameters();
    let mut opt = AdamW::new(&params, cfg.optimizer);
    let mut record = RunRecord {
        task: train.name.clone(),
        seed: cfg.seed,
        lr: cfg.peak_lr,
        epochs: cfg.epochs,
        steps: total_steps,
        metric,
        dev_score: 0.0,
        epoch_scores: Vec::new(),
        final_train_loss: f64::NAN,
        degenerate: false,
        collapsed: false,
        max_noise_delta: 0.0,
    };

    // Regression targets are standardized for the loss so that their raw
    // offset does not dominate early updates; the correlation metrics used
    // for evaluation are invariant to this affine transform.
    let (target_shift, target_scale) = match train.task {
        TaskKind::Classification => (0.0, 1.0),
        TaskKind::Regression => {
            let scores: Vec<f64> = train
                .examples
                .iter()
                .filter_map(|ex| match ex.target {
                    Target::Score(v) => Some(v),
                    _ => None,
                })
                .collect();
            let (mean, std) = mean_std(&scores);
            (mean, if std > 0.0 { std } else { 1.0 })
        }
    };

    let mut step = 0usize;
    'training: for epoch in 0..cfg.epochs {
        let mut shuffle = RngStream::new(cfg.seed, epoch as u64, 0, Purpose::Shuffle);
        let order = shuffle.permutation(train.len());
        for idx_chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<_> = idx_chunk.iter().map(|&i| &train.examples[i]).collect();
            let toks: Vec<_> = examples
                .iter()
                .map(|ex| tokenize(tokenizer, ex, cfg.max_len))
                .collect();
            let batch = build_batch(&toks, PaddingPolicy::BatchMax);
            let mut trace = PerturbTrace::default();
            let acts = encode(
                &state,
                &batch,
                Mode::Train,
                &cfg.noise,
                &cfg.dropout,
                ForwardRng {
                    seed: cfg.seed,
                    step: step as u64,
                },
                Some(&mut trace),
            )?;
            for d in &trace.deltas {
                record.max_noise_delta = record.max_noise_delta.max(d.max_abs_delta);
            }
            let logits = classify(&state, &acts)?;
            let loss = match train.task {
                TaskKind::Classification => {
                    let labels: Vec<usize> = examples
                        .iter()
                        .map(|ex| match ex.target {
                            Target::Class(c) => Ok(c),
                            _ => Err(HypeError::Input("train example lacks a class label".into())),
                        })
                        .collect::<Result<_>>()?;
                    logits.cross_entropy(&labels)?
                }
                TaskKind::Regression => {
                    let targets: Vec<f64> = examples
                        .iter()
                        .map(|ex| match ex.target {
                            Target::Score(v) => Ok((v - target_shift) / target_scale),
                            _ => Err(HypeError::Input("train example lacks a score".into())),
                        })
                        .collect::<Result<_>>()?;
                    logits.mse(&Tensor::new(&[examples.len(), 1], targets))?
                }
            };
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                record.collapsed = true;
                record.final_train_loss = loss_value;
                break 'training;
            }
            record.final_train_loss = loss_value;
            for p in &params {
                p.tensor.zero_grad();
            }
            loss.backward()?;
            let lr = schedule.lr_at(step)?;
            opt.step(&params, lr)?;
            step += 1;
        }
        if cfg.eval_each_epoch || epoch + 1 == cfg.epochs {
            let (score, degenerate) = score_on(&state, dev, tokenizer, metric, cfg.max_len)?;
            record.epoch_scores.push(score);
            record.dev_score = score;
            record.degenerate = degenerate;
        }
    }
    Ok((state, record))
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridResult {
    pub records: Vec<RunRecord>,
    pub best_lr: f64,
    /// Seed-mean dev score at the best learning rate, in points.
    pub best_mean: f64,
    /// Population std over seeds at the best learning rate.
    pub best_std: f64,
}

/// Plain-data snapshot of a model, safe to move across threads.
#[derive(Clone)]
pub struct StateSnapshot {
    config: ModelConfig,
    values: Vec<Vec<f64>>,
}

impl StateSnapshot {
    pub fn of(state: &ModelState) -> StateSnapshot {
        StateSnapshot {
            config: state.config.clone(),
            values: state.parameters().iter().map(|p| p.tensor.to_vec()).collect(),
        }
    }

    pub fn restore(&self) -> Result<ModelState> {
        let state = init_params(&self.config, 0)?;
        let params = state.parameters();
        if params.len() != self.values.len() {
            return Err(HypeError::Usage("snapshot/parameter count mismatch".into()));
        }
        for (p, v) in params.iter().zip(&self.values) {
            if p.tensor.len() != v.len() {
                return Err(HypeError::Usage("snapshot/parameter size mismatch".into()));
            }
            p.tensor.update_data(|data| data.copy_from_slice(v));
        }
        Ok(state)
    }
}

/// Runs every (learning rate, seed) cell, selects the best learning rate
/// by seed-mean dev score (ties break toward the lower rate), and reports
/// mean +/- population std over seeds at that rate. Cells run in parallel
/// but the output order and every value are deterministic.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    base: &ModelState,
    train: &Dataset,
    dev: &Dataset,
    tokenizer: &TokenizerSpec,
    metric: MetricKind,
    template: &TrainRunConfig,
    lrs: &[f64],
    seeds: &[u64],
) -> Result<GridResult> {
    if lrs.is_empty() || seeds.is_empty() {
        return Err(HypeError::Usage("grid search needs lrs and seeds".into()));
    }
    let snapshot = StateSnapshot::of(base);
    let cells: Vec<(f64, u64)> = lrs
        .iter()
        .flat_map(|&lr| seeds.iter().map(move |&s| (lr, s)))
        .collect();
    let records: Vec<RunRecord> = cells
        .par_iter()
        .map(|&(lr, seed)| {
            let local = snapshot.restore()?;
            let cfg = TrainRunConfig {
                peak_lr: lr,
                seed,
                eval_each_epoch: false,
                ..template.clone()
            };
            let (_, record) = finetune(&local, train, dev, tokenizer, metric, &cfg)?;
            Ok(record)
        })
        .collect::<Result<_>>()?;

    let mut best_lr = lrs[0];
    let mut best = f64::NEG_INFINITY;
    for &lr in lrs {
        let scores: Vec<f64> = records
            .iter()
            .filter(|r| r.lr == lr)
            .map(|r| if r.collapsed { f64::NEG_INFINITY } else { r.dev_score })
            .collect();
        let (mean, _) = mean_std(&scores);
        // strictly-greater keeps the lower rate on ties
        if mean > best {
            best = mean;
            best_lr = lr;
        }
    }
    let best_scores: Vec<f64> = records
        .iter()
        .filter(|r| r.lr == best_lr && !r.collapsed)
        .map(|r| r.dev_score)
        .collect();
    if best_scores.is_empty() {
        return Err(HypeError::Input(
            "every run at the selected learning rate collapsed".into(),
        ));
    }
    let (best_mean, best_std) = mean_std(&best_scores);
    Ok(GridResult {
        records,
        best_lr,
        best_mean,
        best_std,
    })
}
