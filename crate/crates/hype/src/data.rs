//! Dataset ingestion, tokenization, batching, low-resource subsampling,
//! label remapping, and the synthetic task suite used for desk-scale
//! experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HypeError, Result};
use crate::rng::{Purpose, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Score(f64),
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
    pub task: TaskKind,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Loading and saving
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Jsonl,
    Tsv,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    text_a: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_b: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<serde_json::Value>,
}

enum RawLabel {
    Text(String),
    Number(f64),
    Missing,
}

/// Loads a dataset, one example per record in file order.
///
/// Labels are interpreted uniformly over the whole file: if every label
/// parses as a number and any has a fractional part the task is regression;
/// all-integer or textual labels give classification with lexicographically
/// sorted label names (stable across train/dev files).
pub fn load_dataset(path: &Path, format: FileFormat) -> Result<Dataset> {
    let content = fs::read_to_string(path)?;
    let mut raw: Vec<(String, Option<String>, RawLabel)> = Vec::new();
    match format {
        FileFormat::Jsonl => {
            for (lineno, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonlRecord =
                    serde_json::from_str(line).map_err(|e| HypeError::Parse {
                        line: lineno + 1,
                        msg: e.to_string(),
                    })?;
                let label = match rec.label {
                    None | Some(serde_json::Value::Null) => RawLabel::Missing,
                    Some(serde_json::Value::String(s)) => RawLabel::Text(s),
                    Some(serde_json::Value::Number(n)) => {
                        RawLabel::Number(n.as_f64().ok_or_else(|| HypeError::Parse {
                            line: lineno + 1,
                            msg: "non-finite numeric label".into(),
                        })?)
                    }
                    Some(other) => {
                        return Err(HypeError::Parse {
                            line: lineno + 1,
                            msg: format!("label must be string or number, got {other}"),
                        })
                    }
                };
                raw.push((rec.text_a, rec.text_b, label));
            }
        }
        FileFormat::Tsv => {
            let mut lines = content.lines().enumerate();
            let (_, header) = lines.next().ok_or(HypeError::Parse {
                line: 1,
                msg: "missing TSV header".into(),
            })?;
            let cols: Vec<&str> = header.split('\t').collect();
            if cols.first() != Some(&"text_a") {
                return Err(HypeError::Parse {
                    line: 1,
                    msg: format!("TSV header must start with text_a, got {header:?}"),
                });
            }
            let has_b = cols.contains(&"text_b");
            for (lineno, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != cols.len() {
                    return Err(HypeError::Parse {
                        line: lineno + 1,
                        msg: format!("expected {} columns, got {}", cols.len(), fields.len()),
                    });
                }
                let text_a = fields[0].to_string();
                let (text_b, label_field) = if has_b {
                    (Some(fields[1].to_string()), fields.get(2))
                } else {
                    (None, fields.get(1))
                };
                let label = match label_field {
                    None => RawLabel::Missing,
                    Some(&"") => RawLabel::Missing,
                    Some(s) => match s.parse::<f64>() {
                        Ok(v) => RawLabel::Number(v),
                        Err(_) => RawLabel::Text(s.to_string()),
                    },
                };
                raw.push((text_a, text_b, label));
            }
        }
    }
    if raw.is_empty() {
        return Err(HypeError::Input(format!(
            "dataset {} is empty",
            path.display()
        )));
    }

    let all_numeric = raw
        .iter()
        .all(|(_, _, l)| !matches!(l, RawLabel::Text(_)));
    let any_fractional = raw.iter().any(|(_, _, l)| match l {
        RawLabel::Number(v) => v.fract() != 0.0,
        _ => false,
    });
    let task = if all_numeric && any_fractional {
        TaskKind::Regression
    } else {
        TaskKind::Classification
    };

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());

    if task == TaskKind::Regression {
        let examples = raw
            .into_iter()
            .map(|(a, b, l)| Example {
                text_a: a,
                text_b: b,
                target: match l {
                    RawLabel::Number(v) => Target::Score(v),
                    _ => Target::Unlabeled,
                },
            })
            .collect();
        return Ok(Dataset {
            name,
            examples,
            task,
            label_names: Vec::new(),
        });
    }

    let canonical = |l: &RawLabel| -> Option<String> {
        match l {
            RawLabel::Text(s) => Some(s.clone()),
            RawLabel::Number(v) => Some(format!("{}", *v as i64)),
            RawLabel::Missing => None,
        }
    };
    let names: BTreeSet<String> = raw.iter().filter_map(|(_, _, l)| canonical(l)).collect();
    let label_names: Vec<String> = names.into_iter().collect();
    let examples = raw
        .into_iter()
        .map(|(a, b, l)| {
            let target = match canonical(&l) {
                Some(name) => Target::Class(
                    label_names
                        .iter()
                        .position(|n| *n == name)
                        .expect("name collected above"),
                ),
                None => Target::Unlabeled,
            };
            Example {
                text_a: a,
                text_b: b,
                target,
            }
        })
        .collect();
    Ok(Dataset {
        name,
        examples,
        task,
        label_names,
    })
}

/// Writes a dataset as JSONL with the canonical field names.
pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for ex in &dataset.examples {
        let label = match &ex.target {
            Target::Class(i) => Some(serde_json::Value::String(dataset.label_names[*i].clone())),
            Target::Score(v) => Some(serde_json::json!(v)),
            Target::Unlabeled => None,
        };
        let rec = JsonlRecord {
            text_a: ex.text_a.clone(),
            text_b: ex.text_b.clone(),
            label,
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable"));
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subsampling and label remapping
// ---------------------------------------------------------------------------

/// Uniform sample of `k` examples without replacement, original order
/// preserved. A pure function of `(dataset, k, seed)`.
pub fn subsample(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    if k > n {
        return Err(HypeError::Input(format!(
            "cannot subsample {k} from {n} examples"
        )));
    }
    let mut rng = RngStream::new(seed, 0, 0, Purpose::Subsample);
    let mut chosen: Vec<usize> = rng.permutation(n).into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(Dataset {
        name: format!("{}#{k}", dataset.name),
        examples: chosen.iter().map(|&i| dataset.examples[i].clone()).collect(),
        task: dataset.task,
        label_names: dataset.label_names.clone(),
    })
}

/// Rewrites classification labels through `mapping` (which must cover every
/// label name present), compacts the label space, and drops unlabeled
/// examples.
pub fn remap_labels(dataset: &Dataset, mapping: &BTreeMap<String, String>) -> Result<Dataset> {
    if dataset.task != TaskKind::Classification {
        return Err(HypeError::Usage(
            "remap_labels applies to classification datasets only".into(),
        ));
    }
    for name in &dataset.label_names {
        if !mapping.contains_key(name) {
            return Err(HypeError::Input(format!(
                "label {name:?} has no mapping entry"
            )));
        }
    }
    let new_names: BTreeSet<String> = dataset
        .label_names
        .iter()
        .map(|n| mapping[n].clone())
        .collect();
    let new_names: Vec<String> = new_names.into_iter().collect();
    let examples = dataset
        .examples
        .iter()
        .filter_map(|ex| match &ex.target {
            Target::Unlabeled => None,
            Target::Class(i) => {
                let mapped = &mapping[&dataset.label_names[*i]];
                let idx = new_names.iter().position(|n| n == mapped).expect("present");
                Some(Example {
                    text_a: ex.text_a.clone(),
                    text_b: ex.text_b.clone(),
                    target: Target::Class(idx),
                })
            }
            Target::Score(_) => None,
        })
        .collect();
    Ok(Dataset {
        name: dataset.name.clone(),
        examples,
        task: TaskKind::Classification,
        label_names: new_names,
    })
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const FIRST_ID: usize = 2; // the [CLS]-style first-position token
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

/// Whitespace tokenizer with per-character fallback over a fixed vocabulary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub vocab: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl TokenizerSpec {
    /// Builds a vocabulary from word tokens; specials occupy ids 0..5 and
    /// single characters a-z / 0-9 back the fallback path.
    pub fn new(words: impl IntoIterator<Item = String>) -> TokenizerSpec {
        let mut vocab: Vec<String> = vec![
            "[PAD]".into(),
            "[UNK]".into(),
            "[FIRST]".into(),
            "[SEP]".into(),
            "[MASK]".into(),
        ];
        for c in ('a'..='z').chain('0'..='9') {
            vocab.push(c.to_string());
        }
        let mut seen: BTreeSet<String> = vocab.iter().cloned().collect();
        for w in words {
            if seen.insert(w.clone()) {
                vocab.push(w);
            }
        }
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        TokenizerSpec { vocab, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn word_ids(&self, text: &str, out: &mut Vec<usize>) {
        for word in text.split_whitespace() {
            if let Some(&id) = self.index.get(word) {
                out.push(id);
            } else {
                for ch in word.chars() {
                    let s = ch.to_lowercase().to_string();
                    out.push(self.index.get(&s).copied().unwrap_or(UNK_ID));
                }
            }
        }
    }
}

/// A single tokenized example, padded to exactly `max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedExample {
    pub ids: Vec<usize>,
    /// Attention mask: true for real tokens, false for padding.
    pub attention: Vec<bool>,
    /// 0 for [FIRST]/text_a/first [SEP], 1 for text_b/second [SEP].
    pub segments: Vec<u8>,
}

/// `[FIRST] a [SEP] (b [SEP])`, truncated to `max_len` and padded with the
/// pad id; deterministic and total.
pub fn tokenize(spec: &TokenizerSpec, example: &Example, max_len: usize) -> TokenizedExample {
    let mut ids = vec![FIRST_ID];
    let mut segments = vec![0u8];
    spec.word_ids(&example.text_a, &mut ids);
    segments.resize(ids.len(), 0);
    ids.push(SEP_ID);
    segments.push(0);
    if let Some(b) = &example.text_b {
        spec.word_ids(b, &mut ids);
        segments.resize(ids.len(), 1);
        ids.push(SEP_ID);
        segments.push(1);
    }
    ids.truncate(max_len);
    segments.truncate(max_len);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    segments.resize(max_len, 0);
    let mut attention = vec![true; real];
    attention.resize(max_len, false);
    TokenizedExample {
        ids,
        attention,
        segments,
    }
}

/// A padded batch in the layout the encoder consumes (`batch * seq_len`
/// flattened, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub real: Vec<bool>,
    pub segments: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    /// Trim trailing all-pad columns down to the longest sequence in the batch.
    BatchMax,
    /// Keep every sequence at the tokenizer's max_len.
    MaxLen,
}

pub fn build_batch(examples: &[TokenizedExample], policy: PaddingPolicy) -> TokenizedBatch {
    assert!(!examples.is_empty());
    let max_len = examples[0].ids.len();
    let seq_len = match policy {
        PaddingPolicy::MaxLen => max_len,
        PaddingPolicy::BatchMax => examples
            .iter()
            .map(|e| e.attention.iter().filter(|&&r| r).count())
            .max()
            .unwrap_or(1)
            .max(1),
    };
    let b = examples.len();
    let mut ids = Vec::with_capacity(b * seq_len);
    let mut real = Vec::with_capacity(b * seq_len);
    let mut segments = Vec::with_capacity(b * seq_len);
    for e in examples {
        ids.extend_from_slice(&e.ids[..seq_len]);
        real.extend_from_slice(&e.attention[..seq_len]);
        segments.extend_from_slice(&e.segments[..seq_len]);
    }
    TokenizedBatch {
        batch: b,
        seq_len,
        ids,
        real,
        segments,
    }
}

// ---------------------------------------------------------------------------
// Synthetic task suite
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    F1,
    Matthews,
    Pearson,
    Spearman,
    /// Mean of Pearson and Spearman, the combined regression score.
    PearsonSpearman,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub name: String,
    pub train: Dataset,
    pub dev: Dataset,
    pub metric: MetricKind,
}

pub struct SyntheticSuite {
    pub tokenizer: TokenizerSpec,
    /// Tokenized sentences for masked-token pretraining.
    pub corpus: Vec<Vec<usize>>,
    pub tasks: Vec<SyntheticTask>,
}

const N_DET: usize = 4;
const N_ADJ: usize = 24;
const N_NOUN: usize = 32;
const N_VERB: usize = 24;
const SYN_GROUP: usize = 3; // synonym group size for adjectives and verbs

struct WordBank {
    det: Vec<String>,
    adj: Vec<String>,
    noun: Vec<String>,
    verb: Vec<String>,
}

fn word_bank() -> WordBank {
    WordBank {
        det: (0..N_DET).map(|i| format!("det{i}")).collect(),
        adj: (0..N_ADJ).map(|i| format!("adj{i:02}")).collect(),
        noun: (0..N_NOUN).map(|i| format!("noun{i:02}")).collect(),
        verb: (0..N_VERB).map(|i| format!("verb{i:02}")).collect(),
    }
}

/// Noun id -> agreement class; a grammatical sentence pairs a subject noun
/// with a verb of the same class.
fn noun_class(i: usize) -> usize {
    i % 2
}

fn verb_class(i: usize) -> usize {
    i % 2
}

struct SentencePlan {
    det_a: usize,
    adj_a: Option<usize>,
    noun_a: usize,
    verb: usize,
    adj_b: Option<usize>,
    noun_b: usize,
}

impl SentencePlan {
    fn sample(rng: &mut RngStream) -> SentencePlan {
        let noun_a = rng.next_below(N_NOUN as u64) as usize;
        // Agreeing verb: same class.
        let verb = loop {
            let v = rng.next_below(N_VERB as u64) as usize;
            if verb_class(v) == noun_class(noun_a) {
                break v;
            }
        };
        SentencePlan {
            det_a: rng.next_below(N_DET as u64) as usize,
            adj_a: if rng.next_f64() < 0.5 {
                Some(rng.next_below(N_ADJ as u64) as usize)
            } else {
                None
            },
            noun_a,
            verb,
            adj_b: if rng.next_f64() < 0.5 {
                Some(rng.next_below(N_ADJ as u64) as usize)
            } else {
                None
            },
            noun_b: rng.next_below(N_NOUN as u64) as usize,
        }
    }

    fn render(&self, bank: &WordBank) -> String {
        let mut parts: Vec<&str> = vec![&bank.det[self.det_a]];
        if let Some(a) = self.adj_a {
            parts.push(&bank.adj[a]);
        }
        parts.push(&bank.noun[self.noun_a]);
        parts.push(&bank.verb[self.verb]);
        if let Some(a) = self.adj_b {
            parts.push(&bank.adj[a]);
        }
        parts.push(&bank.noun[self.noun_b]);
        parts.join(" ")
    }

    fn content_words(&self) -> Vec<(char, usize)> {
        let mut w = vec![('n', self.noun_a), ('v', self.verb), ('n', self.noun_b)];
        if let Some(a) = self.adj_a {
            w.push(('a', a));
        }
        if let Some(a) = self.adj_b {
            w.push(('a', a));
        }
        w
    }
}

fn synonym(i: usize, rng: &mut RngStream) -> usize {
    let group = i / SYN_GROUP;
    let mut j = rng.next_below(SYN_GROUP as u64) as usize;
    if group * SYN_GROUP + j == i {
        j = (j + 1) % SYN_GROUP;
    }
    group * SYN_GROUP + j
}

fn corrupt(plan: &SentencePlan, rng: &mut RngStream, bank: &WordBank) -> String {
    if rng.next_f64() < 0.5 {
        // Agreement violation: verb from the other class.
        let bad_verb = loop {
            let v = rng.next_below(N_VERB as u64) as usize;
            if verb_class(v) != noun_class(plan.noun_a) {
                break v;
            }
        };
        let swapped = SentencePlan {
            verb: bad_verb,
            adj_a: plan.adj_a,
            adj_b: plan.adj_b,
            ..*plan
        };
        swapped.render(bank)
    } else {
        // Word-order violation: move the verb to the front.
        let mut parts: Vec<&str> = vec![&bank.verb[plan.verb], &bank.det[plan.det_a]];
        if let Some(a) = plan.adj_a {
            parts.push(&bank.adj[a]);
        }
        parts.push(&bank.noun[plan.noun_a]);
        if let Some(a) = plan.adj_b {
            parts.push(&bank.adj[a]);
        }
        parts.push(&bank.noun[plan.noun_b]);
        parts.join(" ")
    }
}

fn paraphrase(plan: &SentencePlan, rng: &mut RngStream, bank: &WordBank) -> String {
    // A near-copy: the determiner is resampled and at most one content
    // word moves within its synonym group, so duplicates stay lexically
    // close to the original and the shared-content signal stays strong.
    let mut p = SentencePlan {
        det_a: rng.next_below(N_DET as u64) as usize,
        adj_a: plan.adj_a,
        adj_b: plan.adj_b,
        noun_a: plan.noun_a,
        verb: plan.verb,
        noun_b: plan.noun_b,
    };
    match rng.next_below(3) {
        0 => {
            // Synonymous verb, staying inside the agreement class.
            let cand = synonym(plan.verb, rng);
            if verb_class(cand) == verb_class(plan.verb) {
                p.verb = cand;
            }
        }
        1 => {
            if let Some(a) = plan.adj_a {
                p.adj_a = Some(synonym(a, rng));
            }
        }
        _ => {
            if let Some(a) = plan.adj_b {
                p.adj_b = Some(synonym(a, rng));
            }
        }
    }
    p.render(bank)
}

fn unrelated_variant(plan: &SentencePlan, rng: &mut RngStream, bank: &WordBank) -> String {
    // An independent, fully-adorned sentence whose content words all avoid
    // the original's synonym groups: negatives differ from paraphrases
    // redundantly (subject, verb, object, and both adjectives mismatch,
    // and both adjective slots are always filled).
    loop {
        let mut p = SentencePlan::sample(rng);
        p.adj_a = Some(rng.next_below(N_ADJ as u64) as usize);
        p.adj_b = Some(rng.next_below(N_ADJ as u64) as usize);
        let clash = p.noun_a / SYN_GROUP == plan.noun_a / SYN_GROUP
            || p.noun_b / SYN_GROUP == plan.noun_b / SYN_GROUP
            || p.verb / SYN_GROUP == plan.verb / SYN_GROUP
            || matches!((p.adj_a, plan.adj_a), (Some(x), Some(y)) if x / SYN_GROUP == y / SYN_GROUP)
            || matches!((p.adj_b, plan.adj_b), (Some(x), Some(y)) if x / SYN_GROUP == y / SYN_GROUP);
        if !clash {
            return p.render(bank);
        }
    }
}

fn classification_dataset(
    name: &str,
    label_names: [&str; 2],
    rows: Vec<(String, Option<String>, usize)>,
) -> Dataset {
    let mut names: Vec<String> = label_names.iter().map(|s| s.to_string()).collect();
    names.sort();
    let examples = rows
        .into_iter()
        .map(|(a, b, cls)| Example {
            text_a: a,
            text_b: b,
            target: Target::Class(
                names
                    .iter()
                    .position(|n| n == label_names[cls])
                    .expect("label present"),
            ),
        })
        .collect();
    Dataset {
        name: name.into(),
        examples,
        task: TaskKind::Classification,
        label_names: names,
    }
}

const TRAIN_SIZE: usize = 5000;
const DEV_SIZE: usize = 600;
const TRAIN_LABEL_NOISE: f64 = 0.05;

/// Deterministically generates the pretraining corpus and the three
/// fine-tuning tasks (acceptability, pair match, graded similarity), with
/// disjoint train/dev splits and mild train-label noise so a small model
/// over-fits a 1k subsample within a few epochs.
pub fn generate_synthetic_suite(seed: u64) -> SyntheticSuite {
    let bank = word_bank();
    let words = bank
        .det
        .iter()
        .chain(&bank.adj)
        .chain(&bank.noun)
        .chain(&bank.verb)
        .cloned();
    let tokenizer = TokenizerSpec::new(words);

    // Pretraining corpus: grammatical sentences, one third of them as
    // paraphrase pairs so masked tokens in the second segment are
    // recoverable by attending across the separator — the cross-segment
    // skill the pair tasks later rely on.
    let mut rng = RngStream::new(seed, 0, 0, Purpose::Synthetic);
    let corpus: Vec<Vec<usize>> = (0..4000)
        .map(|_| {
            let plan = SentencePlan::sample(&mut rng);
            let text_b = if rng.next_f64() < 1.0 / 3.0 {
                Some(paraphrase(&plan, &mut rng, &bank))
            } else {
                None
            };
            let ex = Example {
                text_a: plan.render(&bank),
                text_b,
                target: Target::Unlabeled,
            };
            let tok = tokenize(&tokenizer, &ex, 16);
            let n = tok.attention.iter().filter(|&&r| r).count();
            tok.ids[..n].to_vec()
        })
        .collect();

    let tasks = vec![
        acceptability_task(seed, &bank),
        pair_match_task(seed, &bank),
        similarity_task(seed, &bank),
    ];
    SyntheticSuite {
        tokenizer,
        corpus,
        tasks,
    }
}

fn flip_labels(dataset: &mut Dataset, seed: u64, layer: u64) {
    let mut rng = RngStream::new(seed, 1, layer, Purpose::Synthetic);
    for ex in dataset.examples.iter_mut() {
        if rng.next_f64() < TRAIN_LABEL_NOISE {
            if let Target::Class(c) = ex.target {
                ex.target = Target::Class(1 - c);
            }
        }
    }
}

fn acceptability_task(seed: u64, bank: &WordBank) -> SyntheticTask {
    let mut rng = RngStream::new(seed, 0, 1, Purpose::Synthetic);
    let mut rows = Vec::with_capacity(TRAIN_SIZE + DEV_SIZE);
    for _ in 0..TRAIN_SIZE + DEV_SIZE {
        let plan = SentencePlan::sample(&mut rng);
        if rng.next_f64() < 0.5 {
            rows.push((plan.render(bank), None, 1));
        } else {
            rows.push((corrupt(&plan, &mut rng, bank), None, 0));
        }
    }
    let dev_rows = rows.split_off(TRAIN_SIZE);
    let mut train = classification_dataset("acceptability", ["unacceptable", "acceptable"], rows);
    let dev = classification_dataset("acceptability", ["unacceptable", "acceptable"], dev_rows);
    flip_labels(&mut train, seed, 1);
    SyntheticTask {
        name: "acceptability".into(),
        train,
        dev,
        metric: MetricKind::Matthews,
    }
}

fn pair_match_task(seed: u64, bank: &WordBank) -> SyntheticTask {
    let mut rng = RngStream::new(seed, 0, 2, Purpose::Synthetic);
    let mut rows = Vec::with_capacity(TRAIN_SIZE + DEV_SIZE);
    for _ in 0..TRAIN_SIZE + DEV_SIZE {
        let plan = SentencePlan::sample(&mut rng);
        let a = plan.render(bank);
        if rng.next_f64() < 0.5 {
            rows.push((a, Some(paraphrase(&plan, &mut rng, bank)), 1));
        } else {
            rows.push((a, Some(unrelated_variant(&plan, &mut rng, bank)), 0));
        }
    }
    let dev_rows = rows.split_off(TRAIN_SIZE);
    let mut train = classification_dataset("pair_match", ["not_duplicate", "duplicate"], rows);
    let dev = classification_dataset("pair_match", ["not_duplicate", "duplicate"], dev_rows);
    flip_labels(&mut train, seed, 2);
    SyntheticTask {
        name: "pair_match".into(),
        train,
        dev,
        metric: MetricKind::F1,
    }
}

fn similarity_task(seed: u64, bank: &WordBank) -> SyntheticTask {
    let mut rng = RngStream::new(seed, 0, 3, Purpose::Synthetic);
    let make = |rng: &mut RngStream, noisy: bool| {
        let plan = SentencePlan::sample(rng);
        let a = plan.render(bank);
        // Graded similarity: progressively replace content words.
        let level = rng.next_below(4) as usize; // 0 = paraphrase .. 3 = unrelated
        let b_plan = match level {
            0 => SentencePlan {
                det_a: rng.next_below(N_DET as u64) as usize,
                    ..plan
            },
            1 => SentencePlan {
                noun_b: rng.next_below(N_NOUN as u64) as usize,
                adj_a: plan.adj_a,
                adj_b: plan.adj_b,
                ..plan
            },
            2 => {
                let noun_a = rng.next_below(N_NOUN as u64) as usize;
                let verb = loop {
                    let v = rng.next_below(N_VERB as u64) as usize;
                    if verb_class(v) == noun_class(noun_a) {
                        break v;
                    }
                };
                SentencePlan {
                    noun_a,
                    verb,
                    adj_a: plan.adj_a,
                    adj_b: plan.adj_b,
                    ..plan
                }
            }
            _ => SentencePlan::sample(rng),
        };
        let b = b_plan.render(bank);
        // Score from actual content overlap, mapped onto [0, 5].
        let wa = plan.content_words();
        let wb = b_plan.content_words();
        let shared = wa.iter().filter(|w| wb.contains(w)).count();
        let total = wa.len().max(wb.len()).max(1);
        let mut score = 5.0 * shared as f64 / total as f64;
        if noisy {
            score = (score + 0.1 * rng.next_standard_normal()).clamp(0.0, 5.0);
        }
        Example {
            text_a: a,
            text_b: Some(b),
            target: Target::Score(score),
        }
    };
    let train_examples: Vec<Example> = (0..TRAIN_SIZE).map(|_| make(&mut rng, true)).collect();
    let dev_examples: Vec<Example> = (0..DEV_SIZE).map(|_| make(&mut rng, false)).collect();
    let ds = |name: &str, examples| Dataset {
        name: name.into(),
        examples,
        task: TaskKind::Regression,
        label_names: Vec::new(),
    };
    SyntheticTask {
        name: "similarity".into(),
        train: ds("similarity", train_examples),
        dev: ds("similarity", dev_examples),
        metric: MetricKind::PearsonSpearman,
    }
}

/// A balanced binary task whose labels are independent of the inputs;
/// the chance-level oracle for probe calibration.
pub fn random_label_task(seed: u64, n_train: usize, n_dev: usize) -> SyntheticTask {
    let bank = word_bank();
    let mut rng = RngStream::new(seed, 0, 9, Purpose::Synthetic);
    let mut make = |n: usize| {
        let rows: Vec<(String, Option<String>, usize)> = (0..n)
            .map(|i| {
                let plan = SentencePlan::sample(&mut rng);
                (plan.render(&bank), None, i % 2)
            })
            .collect();
        classification_dataset("random_labels", ["neg", "pos"], rows)
    };
    let train = make(n_train);
    let dev = make(n_dev);
    SyntheticTask {
        name: "random_labels".into(),
        train,
        dev,
        metric: MetricKind::Accuracy,
    }
}
