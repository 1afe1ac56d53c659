//! Experiment configuration files and the command dispatcher behind the
//! command-line runner.
//!
//! Config files are INI-style: `[section]` headers, `key = value` lines,
//! `#` comments. Unknown sections or keys are rejected outright, and all
//! referenced paths are checked before any compute starts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, Dataset, FileFormat, MetricKind, SyntheticTask, TaskKind, TokenizerSpec, MASK_ID,
};
use crate::error::{HypeError, Result};
use crate::model::{
    HeadKind, ModelConfig, ModelState, init_params, load_checkpoint, pretrain_synthetic,
    save_checkpoint,
};
use crate::optim::OptimizerConfig;
use crate::perturb::{DropoutSpec, NoisePosition, NoiseSpec};
use crate::probe::{linear_probe, token_similarity, ProbeSettings};
use crate::report::{
    render_records_csv, render_series_csv, render_summary_csv, write_json, CompareReport,
    LayerSeries, OutputFormat, TaskComparison, TechniqueSummary,
};
use crate::trainer::{finetune, grid_search, RunRecord, TrainRunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Pretrain,
    Finetune,
    Grid,
    Compare,
    Probe,
    Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    /// The standard fine-tuning baseline: dropout on, no noise.
    Vanilla,
    /// No regularization at all: dropout off, no noise.
    NoReg,
    HypeNormal,
    HypeUniform,
    HypeNormalDropout,
}

impl Technique {
    pub fn name(&self) -> &'static str {
        match self {
            Technique::Vanilla => "vanilla",
            Technique::NoReg => "no_reg",
            Technique::HypeNormal => "hype_normal",
            Technique::HypeUniform => "hype_uniform",
            Technique::HypeNormalDropout => "hype_normal_dropout",
        }
    }

    fn parse(s: &str) -> Result<Technique> {
        Ok(match s {
            "vanilla" => Technique::Vanilla,
            "no_reg" => Technique::NoReg,
            "hype_normal" => Technique::HypeNormal,
            "hype_uniform" => Technique::HypeUniform,
            "hype_normal_dropout" => Technique::HypeNormalDropout,
            other => {
                return Err(HypeError::Config(format!(
                    "unknown technique {other:?}"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub max_len: usize,
    pub pretrain_steps: usize,
    pub init_from: Option<PathBuf>,
    pub technique: Technique,
    pub subsample: Option<usize>,

    pub model: ModelSection,
    pub noise: NoiseSection,
    pub dropout_rate: f64,
    pub data: DataSection,
    pub grid: GridSection,
    pub probe: ProbeSection,
    pub compare: CompareSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSection {
    pub sigma: f64,
    pub position: NoisePosition,
    /// None = every layer; otherwise the 0-based layer indices to perturb.
    pub layers: Option<BTreeSet<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataSection {
    pub task: String,
    pub suite_seed: u64,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub format: FileFormat,
    pub metric: Option<MetricKind>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSection {
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSection {
    pub layers: Option<Vec<usize>>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_samples: usize,
    pub include_first: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareSection {
    pub techniques: Vec<Technique>,
    pub baseline: Technique,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: Command::Finetune,
            seed: 0,
            epochs: 3,
            batch_size: 16,
            peak_lr: 2e-5,
            warmup_frac: 0.10,
            max_len: 128,
            pretrain_steps: 300,
            init_from: None,
            technique: Technique::Vanilla,
            subsample: None,
            model: ModelSection {
                n_layers: 4,
                d_model: 64,
                n_heads: 4,
                d_ff: 256,
                max_seq_len: 128,
                layer_norm_eps: 1e-12,
            },
            noise: NoiseSection {
                sigma: 1e-4,
                position: NoisePosition::PreLayer,
                layers: None,
            },
            dropout_rate: 0.1,
            data: DataSection {
                task: "acceptability".into(),
                suite_seed: 0,
                train_path: None,
                dev_path: None,
                format: FileFormat::Jsonl,
                metric: None,
            },
            grid: GridSection {
                lrs: vec![1e-5, 2e-5, 3e-5, 4e-5],
                seeds: vec![1, 2, 3],
            },
            probe: ProbeSection {
                layers: None,
                lr: 0.001,
                epochs: 3,
                batch_size: 16,
                max_samples: 200,
                include_first: true,
            },
            compare: CompareSection {
                techniques: vec![Technique::Vanilla, Technique::HypeNormal],
                baseline: Technique::Vanilla,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        HypeError::Config(format!("[{section}] {key}: cannot parse {value:?}"))
    })
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|p| parse_num(section, key, p.trim()))
        .collect()
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HypeError::Config(format!(
            "[{section}] {key}: expected true or false, got {value:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut command = None;
        let mut section = String::from("run");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                match name {
                    "run" | "model" | "noise" | "dropout" | "data" | "grid" | "probe"
                    | "compare" => section = name.to_string(),
                    other => {
                        return Err(HypeError::Config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HypeError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let s = section.as_str();
            match (s, key) {
                ("run", "command") => {
                    command = Some(match value {
                        "pretrain" => Command::Pretrain,
                        "finetune" => Command::Finetune,
                        "grid" => Command::Grid,
                        "compare" => Command::Compare,
                        "probe" => Command::Probe,
                        "similarity" => Command::Similarity,
                        other => {
                            return Err(HypeError::Config(format!(
                                "unknown command {other:?}"
                            )))
                        }
                    })
                }
                ("run", "seed") => cfg.seed = parse_num(s, key, value)?,
                ("run", "epochs") => cfg.epochs = parse_num(s, key, value)?,
                ("run", "batch_size") => cfg.batch_size = parse_num(s, key, value)?,
                ("run", "peak_lr") => cfg.peak_lr = parse_num(s, key, value)?,
                ("run", "warmup_frac") => cfg.warmup_frac = parse_num(s, key, value)?,
                ("run", "max_len") => cfg.max_len = parse_num(s, key, value)?,
                ("run", "pretrain_steps") => cfg.pretrain_steps = parse_num(s, key, value)?,
                ("run", "init_from") => cfg.init_from = Some(PathBuf::from(value)),
                ("run", "technique") => cfg.technique = Technique::parse(value)?,
                ("run", "subsample") => cfg.subsample = Some(parse_num(s, key, value)?),
                ("model", "n_layers") => cfg.model.n_layers = parse_num(s, key, value)?,
                ("model", "d_model") => cfg.model.d_model = parse_num(s, key, value)?,
                ("model", "n_heads") => cfg.model.n_heads = parse_num(s, key, value)?,
                ("model", "d_ff") => cfg.model.d_ff = parse_num(s, key, value)?,
                ("model", "max_seq_len") => cfg.model.max_seq_len = parse_num(s, key, value)?,
                ("model", "layer_norm_eps") => {
                    cfg.model.layer_norm_eps = parse_num(s, key, value)?
                }
                ("noise", "sigma") => cfg.noise.sigma = parse_num(s, key, value)?,
                ("noise", "position") => {
                    cfg.noise.position = match value {
                        "pre_layer" => NoisePosition::PreLayer,
                        "intra_layer" => NoisePosition::IntraLayer,
                        "both" => NoisePosition::Both,
                        other => {
                            return Err(HypeError::Config(format!(
                                "unknown noise position {other:?}"
                            )))
                        }
                    }
                }
                ("noise", "layers") => {
                    cfg.noise.layers = match value {
                        "all" => None,
                        // Layer indices are 1-based: 1..=n/2 and n/2+1..=n.
                        "lower_half" => Some((1..=cfg.model.n_layers / 2).collect()),
                        "upper_half" => {
                            Some((cfg.model.n_layers / 2 + 1..=cfg.model.n_layers).collect())
                        }
                        list => Some(
                            parse_list::<usize>(s, key, list)?.into_iter().collect(),
                        ),
                    }
                }
                ("dropout", "rate") => cfg.dropout_rate = parse_num(s, key, value)?,
                ("data", "task") => cfg.data.task = value.to_string(),
                ("data", "suite_seed") => cfg.data.suite_seed = parse_num(s, key, value)?,
                ("data", "train_path") => cfg.data.train_path = Some(PathBuf::from(value)),
                ("data", "dev_path") => cfg.data.dev_path = Some(PathBuf::from(value)),
                ("data", "format") => {
                    cfg.data.format = match value {
                        "jsonl" => FileFormat::Jsonl,
                        "tsv" => FileFormat::Tsv,
                        other => {
                            return Err(HypeError::Config(format!(
                                "unknown data format {other:?}"
                            )))
                        }
                    }
                }
                ("data", "metric") => {
                    cfg.data.metric = Some(match value {
                        "accuracy" => MetricKind::Accuracy,
                        "f1" => MetricKind::F1,
                        "matthews" => MetricKind::Matthews,
                        "pearson" => MetricKind::Pearson,
                        "spearman" => MetricKind::Spearman,
                        "pearson_spearman" => MetricKind::PearsonSpearman,
                        other => {
                            return Err(HypeError::Config(format!(
                                "unknown metric {other:?}"
                            )))
                        }
                    })
                }
                ("grid", "lrs") => cfg.grid.lrs = parse_list(s, key, value)?,
                ("grid", "seeds") => cfg.grid.seeds = parse_list(s, key, value)?,
                ("probe", "layers") => {
                    cfg.probe.layers = match value {
                        "all" => None,
                        list => Some(parse_list(s, key, list)?),
                    }
                }
                ("probe", "lr") => cfg.probe.lr = parse_num(s, key, value)?,
                ("probe", "epochs") => cfg.probe.epochs = parse_num(s, key, value)?,
                ("probe", "batch_size") => cfg.probe.batch_size = parse_num(s, key, value)?,
                ("probe", "max_samples") => cfg.probe.max_samples = parse_num(s, key, value)?,
                ("probe", "include_first") => {
                    cfg.probe.include_first = parse_bool(s, key, value)?
                }
                ("compare", "techniques") => {
                    cfg.compare.techniques = value
                        .split(',')
                        .map(|t| Technique::parse(t.trim()))
                        .collect::<Result<_>>()?;
                }
                ("compare", "baseline") => cfg.compare.baseline = Technique::parse(value)?,
                (s, key) => {
                    return Err(HypeError::Config(format!(
                        "line {}: unknown key {key:?} in section [{s}]",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.command = command
            .ok_or_else(|| HypeError::Config("missing required key: [run] command".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        if !path.is_file() {
            return Err(HypeError::Config(format!(
                "config file not found: {}",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HypeError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(HypeError::Config("peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(HypeError::Config("warmup_frac must be in [0, 1)".into()));
        }
        if !(self.noise.sigma > 0.0) {
            return Err(HypeError::Config("noise sigma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(HypeError::Config("dropout rate must be in [0, 1)".into()));
        }
        if let Some(layers) = &self.noise.layers {
            for &l in layers {
                if l == 0 || l > self.model.n_layers {
                    return Err(HypeError::Config(format!(
                        "noise layer index {l} out of range for {} layers",
                        self.model.n_layers
                    )));
                }
            }
        }
        if self.grid.lrs.is_empty() || self.grid.seeds.is_empty() {
            return Err(HypeError::Config("grid lrs and seeds must be non-empty".into()));
        }
        if !self
            .compare
            .techniques
            .contains(&self.compare.baseline)
        {
            return Err(HypeError::Config(
                "compare baseline must be among compare techniques".into(),
            ));
        }
        for path in [&self.init_from, &self.data.train_path, &self.data.dev_path]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                return Err(HypeError::Config(format!(
                    "referenced path does not exist: {}",
                    path.display()
                )));
            }
        }
        if self.data.train_path.is_some() != self.data.dev_path.is_some() {
            return Err(HypeError::Config(
                "train_path and dev_path must be given together".into(),
            ));
        }
        Ok(())
    }

    /// Noise and dropout specs for a technique under this config.
    pub fn technique_specs(&self, technique: Technique) -> (NoiseSpec, DropoutSpec) {
        let base = |spec: NoiseSpec| {
            let spec = spec.with_position(self.noise.position);
            match &self.noise.layers {
                Some(mask) => spec.with_layer_mask(mask.clone()),
                None => spec,
            }
        };
        match technique {
            Technique::Vanilla => (
                NoiseSpec::none(),
                DropoutSpec::new(self.dropout_rate).expect("validated rate"),
            ),
            Technique::NoReg => (NoiseSpec::none(), DropoutSpec::off()),
            Technique::HypeNormal => (base(NoiseSpec::normal(self.noise.sigma)), DropoutSpec::off()),
            Technique::HypeUniform => {
                (base(NoiseSpec::uniform(self.noise.sigma)), DropoutSpec::off())
            }
            Technique::HypeNormalDropout => (
                base(NoiseSpec::normal(self.noise.sigma)),
                DropoutSpec::new(self.dropout_rate).expect("validated rate"),
            ),
        }
    }

    fn train_template(&self, technique: Technique) -> TrainRunConfig {
        let (noise, dropout) = self.technique_specs(technique);
        TrainRunConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            max_len: self.max_len,
            seed: self.seed,
            noise,
            dropout,
            optimizer: OptimizerConfig::default(),
            eval_each_epoch: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

struct Prepared {
    tokenizer: TokenizerSpec,
    corpus: Vec<Vec<usize>>,
    tasks: Vec<SyntheticTask>,
}

fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    if let (Some(train_path), Some(dev_path)) = (&cfg.data.train_path, &cfg.data.dev_path) {
        let train = data::load_dataset(train_path, cfg.data.format)?;
        let dev = data::load_dataset(dev_path, cfg.data.format)?;
        if train.task != dev.task {
            return Err(HypeError::Input(
                "train and dev splits disagree on task kind".into(),
            ));
        }
        let words: BTreeSet<String> = train
            .examples
            .iter()
            .flat_map(|e| {
                e.text_a
                    .split_whitespace()
                    .chain(e.text_b.iter().flat_map(|b| b.split_whitespace()))
            })
            .map(str::to_string)
            .collect();
        let tokenizer = TokenizerSpec::new(words);
        let metric = cfg.data.metric.unwrap_or(match train.task {
            TaskKind::Classification => MetricKind::Accuracy,
            TaskKind::Regression => MetricKind::PearsonSpearman,
        });
        let name = train.name.clone();
        return Ok(Prepared {
            tokenizer,
            corpus: Vec::new(),
            tasks: vec![SyntheticTask {
                name,
                train,
                dev,
                metric,
            }],
        });
    }
    let suite = data::generate_synthetic_suite(cfg.data.suite_seed);
    let mut tasks = suite.tasks;
    if cfg.data.task == "random_labels" {
        tasks.push(data::random_label_task(cfg.data.suite_seed, 512, 256));
    }
    Ok(Prepared {
        tokenizer: suite.tokenizer,
        corpus: suite.corpus,
        tasks,
    })
}

fn select_task<'a>(prepared: &'a Prepared, cfg: &ExperimentConfig) -> Result<&'a SyntheticTask> {
    prepared
        .tasks
        .iter()
        .find(|t| t.name == cfg.data.task)
        .ok_or_else(|| {
            let known: Vec<&str> = prepared.tasks.iter().map(|t| t.name.as_str()).collect();
            HypeError::Config(format!(
                "unknown task {:?}; available: {known:?}",
                cfg.data.task
            ))
        })
}

fn model_config(cfg: &ExperimentConfig, vocab_size: usize, head: HeadKind) -> ModelConfig {
    ModelConfig {
        n_layers: cfg.model.n_layers,
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        d_ff: cfg.model.d_ff,
        vocab_size,
        max_seq_len: cfg.model.max_seq_len,
        head,
        layer_norm_eps: cfg.model.layer_norm_eps,
    }
}

/// Base encoder for fine-tuning and analysis: a checkpoint when
/// `init_from` is set, otherwise a fresh model, masked-token pretrained
/// when a corpus and `pretrain_steps > 0` are available.
fn base_model(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ModelState> {
    if let Some(path) = &cfg.init_from {
        return load_checkpoint(path);
    }
    let mc = model_config(
        cfg,
        prepared.tokenizer.vocab_size(),
        HeadKind::Classification { n_classes: 2 },
    );
    if cfg.pretrain_steps > 0 && !prepared.corpus.is_empty() {
        let (state, _) =
            pretrain_synthetic(&mc, &prepared.corpus, MASK_ID, cfg.pretrain_steps, cfg.seed)?;
        Ok(state)
    } else {
        init_params(&mc, cfg.seed)
    }
}

fn subsampled_train(cfg: &ExperimentConfig, task: &SyntheticTask) -> Result<Dataset> {
    match cfg.subsample {
        Some(k) => data::subsample(&task.train, k, cfg.seed),
        None => Ok(task.train.clone()),
    }
}

fn emit_csv(out: &Path, name: &str, content: &str) -> Result<()> {
    std::fs::write(out.join(name), content)?;
    Ok(())
}

/// Runs the configured command, writing all artifacts under `out`.
/// Returns the paths written.
pub fn run(cfg: &ExperimentConfig, out: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    // Provenance: the fully-resolved configuration actually used.
    let resolved = out.join("resolved_config.json");
    write_json(&resolved, cfg)?;
    written.push(resolved);

    let json = formats.contains(&OutputFormat::Json);
    let csv = formats.contains(&OutputFormat::Csv);
    let prepared = prepare_data(cfg)?;

    match cfg.command {
        Command::Pretrain => {
            if prepared.corpus.is_empty() {
                return Err(HypeError::Config(
                    "pretrain requires the synthetic corpus (no external data paths)".into(),
                ));
            }
            let mc = model_config(
                cfg,
                prepared.tokenizer.vocab_size(),
                HeadKind::Classification { n_classes: 2 },
            );
            let (state, report) =
                pretrain_synthetic(&mc, &prepared.corpus, MASK_ID, cfg.pretrain_steps, cfg.seed)?;
            let ckpt = out.join("pretrained.ckpt");
            save_checkpoint(&state, &ckpt)?;
            written.push(ckpt);
            if json {
                let p = out.join("pretrain.json");
                write_json(&p, &report)?;
                written.push(p);
            }
        }
        Command::Finetune => {
            let task = select_task(&prepared, cfg)?;
            let base = base_model(cfg, &prepared)?;
            let train = subsampled_train(cfg, task)?;
            let template = cfg.train_template(cfg.technique);
            let (state, record) = finetune(
                &base,
                &train,
                &task.dev,
                &prepared.tokenizer,
                task.metric,
                &template,
            )?;
            let ckpt = out.join("finetuned.ckpt");
            save_checkpoint(&state, &ckpt)?;
            written.push(ckpt);
            if json {
                let p = out.join("run.json");
                write_json(&p, &record)?;
                written.push(p);
            }
            if csv {
                let p = out.join("runs.csv");
                emit_csv(
                    out,
                    "runs.csv",
                    &render_records_csv(&[(cfg.technique.name().to_string(), record.clone())]),
                )?;
                written.push(p);
            }
            if record.collapsed {
                return Err(HypeError::Numeric(format!(
                    "training loss became non-finite ({}); run record written",
                    record.final_train_loss
                )));
            }
        }
        Command::Grid => {
            let task = select_task(&prepared, cfg)?;
            let base = base_model(cfg, &prepared)?;
            let train = subsampled_train(cfg, task)?;
            let template = cfg.train_template(cfg.technique);
            let result = grid_search(
                &base,
                &train,
                &task.dev,
                &prepared.tokenizer,
                task.metric,
                &template,
                &cfg.grid.lrs,
                &cfg.grid.seeds,
            )?;
            if json {
                let p = out.join("grid.json");
                write_json(&p, &result)?;
                written.push(p);
            }
            if csv {
                let rows: Vec<(String, RunRecord)> = result
                    .records
                    .iter()
                    .map(|r| (cfg.technique.name().to_string(), r.clone()))
                    .collect();
                let p = out.join("runs.csv");
                emit_csv(out, "runs.csv", &render_records_csv(&rows))?;
                written.push(p);
            }
        }
        Command::Compare => {
            let base = base_model(cfg, &prepared)?;
            let mut report = CompareReport {
                baseline: cfg.compare.baseline.name().to_string(),
                tasks: Vec::new(),
            };
            let mut all_rows: Vec<(String, RunRecord)> = Vec::new();
            for task in &prepared.tasks {
                let train = subsampled_train(cfg, task)?;
                let mut comparison = TaskComparison {
                    task: task.name.clone(),
                    metric: task.metric,
                    techniques: Vec::new(),
                };
                for &technique in &cfg.compare.techniques {
                    let template = cfg.train_template(technique);
                    let result = grid_search(
                        &base,
                        &train,
                        &task.dev,
                        &prepared.tokenizer,
                        task.metric,
                        &template,
                        &cfg.grid.lrs,
                        &cfg.grid.seeds,
                    )?;
                    comparison.techniques.push(TechniqueSummary {
                        technique: technique.name().to_string(),
                        best_lr: result.best_lr,
                        mean: result.best_mean,
                        std: result.best_std,
                        n_seeds: cfg.grid.seeds.len(),
                        delta_vs_baseline: None,
                    });
                    for r in result.records {
                        all_rows.push((technique.name().to_string(), r));
                    }
                }
                report.tasks.push(comparison);
            }
            report.finalize()?;
            if json {
                let p = out.join("compare.json");
                write_json(&p, &report)?;
                written.push(p);
            }
            if csv {
                let p = out.join("compare.csv");
                emit_csv(out, "compare.csv", &render_summary_csv(&report))?;
                written.push(p);
                let p = out.join("runs.csv");
                emit_csv(out, "runs.csv", &render_records_csv(&all_rows))?;
                written.push(p);
            }
        }
        Command::Probe => {
            let task = select_task(&prepared, cfg)?;
            let base = base_model(cfg, &prepared)?;
            let settings = ProbeSettings {
                lr: cfg.probe.lr,
                epochs: cfg.probe.epochs,
                batch_size: cfg.probe.batch_size,
                max_len: cfg.max_len,
            };
            let layers: Vec<usize> = match &cfg.probe.layers {
                Some(l) => l.clone(),
                None => (0..=base.config.n_layers).collect(),
            };
            let train = subsampled_train(cfg, task)?;
            let mut results = Vec::new();
            for &layer in &layers {
                results.push(linear_probe(
                    &base,
                    &train,
                    &task.dev,
                    &prepared.tokenizer,
                    task.metric,
                    layer,
                    &settings,
                    cfg.seed,
                )?);
            }
            if json {
                let p = out.join("probe.json");
                write_json(&p, &results)?;
                written.push(p);
            }
            if csv {
                let series = LayerSeries::new(
                    format!("probe:{}", task.name),
                    results.iter().map(|r| r.score).collect(),
                );
                let p = out.join("probe.csv");
                emit_csv(out, "probe.csv", &render_series_csv(std::slice::from_ref(&series)))?;
                written.push(p);
            }
        }
        Command::Similarity => {
            let task = select_task(&prepared, cfg)?;
            let base = base_model(cfg, &prepared)?;
            let curve = token_similarity(
                &base,
                &task.dev,
                &prepared.tokenizer,
                cfg.max_len,
                cfg.probe.include_first,
                cfg.probe.max_samples,
            )?;
            if json {
                let p = out.join("similarity.json");
                write_json(&p, &curve)?;
                written.push(p);
            }
            if csv {
                let series = LayerSeries::new(
                    format!("similarity:{}", task.name),
                    curve.per_layer.clone(),
                );
                let p = out.join("similarity.csv");
                emit_csv(
                    out,
                    "similarity.csv",
                    &render_series_csv(std::slice::from_ref(&series)),
                )?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse("command = finetune\n").unwrap();
        assert_eq!(cfg.command, Command::Finetune);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.peak_lr, 2e-5);
        assert_eq!(cfg.grid.lrs, vec![1e-5, 2e-5, 3e-5, 4e-5]);
    }

    #[test]
    fn missing_command_is_a_config_error() {
        assert!(matches!(
            ExperimentConfig::parse("seed = 3\n"),
            Err(HypeError::Config(_))
        ));
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let err = ExperimentConfig::parse("command = finetune\n[model]\nwidth = 3\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(ExperimentConfig::parse("command = grid\n[banana]\nx = 1\n").is_err());
    }

    #[test]
    fn sections_and_lists_parse() {
        let text = "\
command = compare
seed = 9
subsample = 1000
[noise]
sigma = 1e-3
position = both
layers = 1,3
[grid]
lrs = 1e-5, 3e-5
seeds = 1,2,3,4,5
[compare]
techniques = vanilla, hype_normal, no_reg
baseline = vanilla
[dropout]
rate = 0.2
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.subsample, Some(1000));
        assert_eq!(cfg.noise.sigma, 1e-3);
        assert_eq!(cfg.noise.position, NoisePosition::Both);
        assert_eq!(cfg.noise.layers, Some([1usize, 3].into_iter().collect()));
        assert_eq!(cfg.grid.seeds.len(), 5);
        assert_eq!(cfg.compare.techniques.len(), 3);
        assert_eq!(cfg.dropout_rate, 0.2);
    }

    #[test]
    fn layer_mask_out_of_range_is_rejected() {
        let text = "command = grid\n[noise]\nlayers = 7\n";
        assert!(ExperimentConfig::parse(text).is_err());
    }

    #[test]
    fn half_stack_shortcuts() {
        let cfg =
            ExperimentConfig::parse("command = grid\n[noise]\nlayers = lower_half\n").unwrap();
        assert_eq!(cfg.noise.layers, Some([1usize, 2].into_iter().collect()));
        let cfg =
            ExperimentConfig::parse("command = grid\n[noise]\nlayers = upper_half\n").unwrap();
        assert_eq!(cfg.noise.layers, Some([3usize, 4].into_iter().collect()));
    }

    #[test]
    fn missing_referenced_path_fails_before_compute() {
        let text = "command = finetune\ninit_from = /no/such/file.ckpt\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(matches!(err, HypeError::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\ncommand = grid # trailing comment\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.command, Command::Grid);
    }

    #[test]
    fn baseline_must_be_in_techniques() {
        let text = "command = compare\n[compare]\ntechniques = hype_normal\nbaseline = vanilla\n";
        assert!(ExperimentConfig::parse(text).is_err());
    }

    #[test]
    fn technique_specs_shapes() {
        let cfg = ExperimentConfig::parse("command = finetune\n").unwrap();
        let (noise, dropout) = cfg.technique_specs(Technique::Vanilla);
        assert!(!noise.is_active());
        assert_eq!(dropout.rate, 0.1);
        let (noise, dropout) = cfg.technique_specs(Technique::NoReg);
        assert!(!noise.is_active());
        assert_eq!(dropout.rate, 0.0);
        let (noise, dropout) = cfg.technique_specs(Technique::HypeNormalDropout);
        assert!(noise.is_active());
        assert!(dropout.rate > 0.0);
    }
}
