//! Synthetic datasets: associative recall, copying, and next-character
//! prediction over a small text corpus, plus their metrics.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hybrid::{HybridError, HybridModel, ModelGraph};
use crate::numerics::Tensor;

/// Target value of positions that are not supervised.
pub const IGNORE: i64 = -1;
/// Separator (and padding) token of the recall and copy tasks.
pub const SEP: usize = 0;

/// The text shipped for next-character prediction.
pub const DEFAULT_CORPUS: &str = include_str!("../../data/corpus.txt");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("invalid task config: {0}")]
    Config(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] HybridError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    KvRecall,
    Copy,
    CharLm,
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "kv_recall" | "recall" => Ok(TaskKind::KvRecall),
            "copy" => Ok(TaskKind::Copy),
            "char_lm" | "lm" => Ok(TaskKind::CharLm),
            other => Err(TaskError::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    TokenLoss,
}

fn default_examples() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    /// Key-value pairs shown (KV_RECALL).
    #[serde(default)]
    pub pairs: usize,
    /// Keys queried after the separator (KV_RECALL).
    #[serde(default)]
    pub queries: usize,
    /// When set, each KV_RECALL example shows a uniformly drawn number of
    /// pairs in `min_pairs..=pairs` and queries up to `queries` of them.
    #[serde(default)]
    pub min_pairs: Option<usize>,
    /// Text file for CHAR_LM; the bundled corpus when absent.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
    #[serde(default = "default_examples")]
    pub examples: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Inputs and per-position targets; [`IGNORE`] marks unsupervised slots.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<i64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != IGNORE).count()
    }

    /// Examples `range`, in order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range].to_vec(),
        }
    }

    /// One line of inputs, then one line of targets, per example.
    pub fn write_lines(&self, mut w: impl Write) -> std::io::Result<()> {
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let join = |v: Vec<String>| v.join(" ");
            writeln!(w, "{}", join(x.iter().map(|t| t.to_string()).collect()))?;
            writeln!(w, "{}", join(y.iter().map(|t| t.to_string()).collect()))?;
        }
        Ok(())
    }

    pub fn read_lines(r: impl BufRead) -> Result<Dataset, TaskError> {
        let lines: Vec<String> = r
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| TaskError::Format(e.to_string()))?;
        let lines: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() % 2 != 0 {
            return Err(TaskError::Format("odd number of lines".into()));
        }
        let mut ds = Dataset::default();
        for (i, pair) in lines.chunks(2).enumerate() {
            let parse = |l: &str| -> Result<Vec<i64>, TaskError> {
                l.split_whitespace()
                    .map(|t| {
                        t.parse::<i64>()
                            .map_err(|e| TaskError::Format(format!("example {i}: {e}")))
                    })
                    .collect()
            };
            let x = parse(pair[0])?;
            let y = parse(pair[1])?;
            if x.len() != y.len() || x.iter().any(|&t| t < 0) || y.iter().any(|&t| t < IGNORE) {
                return Err(TaskError::Format(format!("example {i} is malformed")));
            }
            ds.inputs.push(x.into_iter().map(|t| t as usize).collect());
            ds.targets.push(y);
        }
        Ok(ds)
    }
}

/// Disjoint key and value ranges of KV_RECALL: keys `1..=k`, values
/// `k+1..vocab`.
pub fn recall_ranges(vocab: usize) -> (std::ops::RangeInclusive<usize>, std::ops::Range<usize>) {
    let keys = (vocab - 1) / 2;
    (1..=keys, keys + 1..vocab)
}

/// Lowercased character table of a corpus, sorted.
pub fn charset(text: &str) -> Vec<char> {
    text.to_lowercase()
        .chars()
        .map(normalize_char)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn normalize_char(c: char) -> char {
    if c.is_whitespace() {
        ' '
    } else {
        c
    }
}

/// Token ids of a corpus under its own [`charset`].
pub fn encode_corpus(text: &str) -> (Vec<char>, Vec<usize>) {
    let chars = charset(text);
    let index: HashMap<char, usize> = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ids = text.to_lowercase().chars().map(|c| index[&normalize_char(c)]).collect();
    (chars, ids)
}

fn load_corpus(config: &TaskConfig) -> Result<String, TaskError> {
    match &config.corpus {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| TaskError::Config(format!("corpus {}: {e}", path.display()))),
        None => Ok(DEFAULT_CORPUS.to_string()),
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.seq_len == 0 || self.examples == 0 {
            return Err(TaskError::Config("seq_len and examples must be positive".into()));
        }
        match self.task {
            TaskKind::KvRecall => {
                let (keys, values) = recall_ranges(self.vocab.max(1));
                if self.pairs == 0 || self.queries == 0 || self.queries > self.pairs {
                    return Err(TaskError::Config(format!(
                        "need 1 <= queries ({}) <= pairs ({})",
                        self.queries, self.pairs
                    )));
                }
                if let Some(m) = self.min_pairs {
                    if m == 0 || m > self.pairs {
                        return Err(TaskError::Config(format!(
                            "need 1 <= min_pairs ({m}) <= pairs ({})",
                            self.pairs
                        )));
                    }
                }
                if self.pairs > keys.count() || values.is_empty() {
                    return Err(TaskError::Capacity(format!(
                        "vocab {} cannot hold {} distinct keys",
                        self.vocab, self.pairs
                    )));
                }
                let needed = self.pairs * 2 + self.queries + 1;
                if needed > self.seq_len {
                    return Err(TaskError::Capacity(format!(
                        "{} pairs and {} queries need {needed} tokens, seq_len is {}",
                        self.pairs, self.queries, self.seq_len
                    )));
                }
            }
            TaskKind::Copy => {
                if self.vocab < 2 || self.seq_len < 2 {
                    return Err(TaskError::Capacity("copy needs vocab >= 2 and seq_len >= 2".into()));
                }
            }
            TaskKind::CharLm => {
                if self.seq_len < 2 {
                    return Err(TaskError::Capacity("char_lm needs seq_len >= 2".into()));
                }
            }
        }
        Ok(())
    }

    /// Vocabulary actually used by the generated tokens.
    pub fn effective_vocab(&self) -> Result<usize, TaskError> {
        match self.task {
            TaskKind::CharLm => Ok(charset(&load_corpus(self)?).len()),
            _ => Ok(self.vocab),
        }
    }
}

pub fn generate(config: &TaskConfig) -> Result<Dataset, TaskError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ds = Dataset::default();
    match config.task {
        TaskKind::KvRecall => {
            for _ in 0..config.examples {
                let (x, y) = recall_example(config, &mut rng);
                ds.inputs.push(x);
                ds.targets.push(y);
            }
        }
        TaskKind::Copy => {
            let prefix = config.seq_len / 2;
            for _ in 0..config.examples {
                let p: Vec<usize> = (0..prefix).map(|_| rng.gen_range(1..config.vocab)).collect();
                let mut x = p.clone();
                x.push(SEP);
                x.extend_from_slice(&p[..prefix - 1]);
                let mut y = vec![IGNORE; prefix];
                y.extend(p.iter().map(|&t| t as i64));
                x.resize(config.seq_len, SEP);
                y.resize(config.seq_len, IGNORE);
                ds.inputs.push(x);
                ds.targets.push(y);
            }
        }
        TaskKind::CharLm => {
            let text = load_corpus(config)?;
            let (chars, ids) = encode_corpus(&text);
            if chars.len() > config.vocab {
                return Err(TaskError::Capacity(format!(
                    "corpus uses {} characters, vocab is {}",
                    chars.len(),
                    config.vocab
                )));
            }
            let cut = ids.len() * 9 / 10;
            let region = match config.split {
                Split::Train => &ids[..cut],
                Split::Eval => &ids[cut..],
            };
            if region.len() < config.seq_len {
                return Err(TaskError::Capacity(format!(
                    "corpus split has {} characters, seq_len is {}",
                    region.len(),
                    config.seq_len
                )));
            }
            for _ in 0..config.examples {
                let start = rng.gen_range(0..=region.len() - config.seq_len);
                let x = region[start..start + config.seq_len].to_vec();
                let mut y: Vec<i64> = x[1..].iter().map(|&t| t as i64).collect();
                y.push(IGNORE);
                ds.inputs.push(x);
                ds.targets.push(y);
            }
        }
    }
    Ok(ds)
}

fn recall_example(config: &TaskConfig, rng: &mut impl Rng) -> (Vec<usize>, Vec<i64>) {
    let (keys, values) = recall_ranges(config.vocab);
    let pairs = match config.min_pairs {
        Some(m) => rng.gen_range(m..=config.pairs),
        None => config.pairs,
    };
    let queries = config.queries.min(pairs);
    let keys: Vec<usize> = keys.collect();
    let chosen: Vec<usize> = keys.choose_multiple(rng, pairs).copied().collect();
    let vals: Vec<usize> = (0..pairs).map(|_| rng.gen_range(values.clone())).collect();
    let mut x = Vec::with_capacity(config.seq_len);
    for (k, v) in chosen.iter().zip(&vals) {
        x.push(*k);
        x.push(*v);
    }
    x.push(SEP);
    let mut y = vec![IGNORE; x.len()];
    let order: Vec<usize> = (0..pairs).collect();
    for &i in order.choose_multiple(rng, queries) {
        x.push(chosen[i]);
        y.push(vals[i] as i64);
    }
    x.resize(config.seq_len, SEP);
    y.resize(config.seq_len, IGNORE);
    (x, y)
}

/// Recomputes the targets of one example from its inputs alone.
pub fn derive_targets(task: TaskKind, input: &[usize]) -> Option<Vec<i64>> {
    let mut y = vec![IGNORE; input.len()];
    match task {
        TaskKind::KvRecall => {
            let sep = input.iter().position(|&t| t == SEP)?;
            if sep % 2 != 0 {
                return None;
            }
            let table: HashMap<usize, usize> = input[..sep].chunks(2).map(|c| (c[0], c[1])).collect();
            for (pos, &q) in input.iter().enumerate().skip(sep + 1) {
                if q == SEP {
                    break;
                }
                y[pos] = *table.get(&q)? as i64;
            }
        }
        TaskKind::Copy => {
            let prefix = input.len() / 2;
            if input.get(prefix) != Some(&SEP) || input[..prefix].contains(&SEP) {
                return None;
            }
            for (i, &t) in input[..prefix].iter().enumerate() {
                y[prefix + i] = t as i64;
            }
        }
        TaskKind::CharLm => {
            for (i, &t) in input.iter().enumerate().skip(1) {
                y[i - 1] = t as i64;
            }
        }
    }
    Some(y)
}

/// Anything that maps token sequences to `[L, vocab]` logits.
pub trait Predictor {
    fn predict(&self, inputs: &[Vec<usize>]) -> Result<Vec<Tensor>, TaskError>;
}

impl Predictor for HybridModel {
    fn predict(&self, inputs: &[Vec<usize>]) -> Result<Vec<Tensor>, TaskError> {
        let Some(first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        if inputs.iter().any(|x| x.len() != len) {
            return Err(TaskError::Format("sequences differ in length".into()));
        }
        let batch = inputs.len().min(32);
        let mut out = Vec::with_capacity(inputs.len());
        let mut graphs: HashMap<usize, ModelGraph> = HashMap::new();
        for chunk in inputs.chunks(batch) {
            let graph = match graphs.entry(chunk.len()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => e.insert(ModelGraph::build(self, chunk.len(), len)?),
            };
            let tokens: Vec<usize> = chunk.iter().flatten().copied().collect();
            let targets = vec![IGNORE; tokens.len()];
            let b = graph.bind(&self.params, &tokens, &targets)?;
            let logits = graph.logits(&b)?;
            let vocab = logits.shape()[1];
            for rows in logits.data().chunks(len * vocab) {
                out.push(Tensor::new(&[len, vocab], rows.to_vec()).map_err(HybridError::from)?);
            }
        }
        Ok(out)
    }
}

/// Scores logits against targets over supervised positions only.
pub fn score(logits: &[Tensor], targets: &[Vec<i64>], metric: Metric) -> Result<f64, TaskError> {
    if logits.len() != targets.len() {
        return Err(TaskError::Format("logits and targets differ in count".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (l, y) in logits.iter().zip(targets) {
        let vocab = l.shape()[1];
        for (row, &t) in l.data().chunks(vocab).zip(y) {
            if t == IGNORE {
                continue;
            }
            let t = t as usize;
            if t >= vocab {
                return Err(TaskError::Format(format!("target {t} outside vocab {vocab}")));
            }
            count += 1;
            total += match metric {
                Metric::Accuracy => {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                    f64::from(u8::from(best == t))
                }
                Metric::TokenLoss => {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    lse - row[t]
                }
            };
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn evaluate(model: &impl Predictor, data: &Dataset, metric: Metric) -> Result<f64, TaskError> {
    let logits = model.predict(&data.inputs)?;
    score(&logits, &data.targets, metric)
}

#[cfg(test)]
mod tests;
