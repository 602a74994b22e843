//! Synthetic sequence-distribution task.
//!
//! A task is a set of phrases (length-`l` token strings over the source
//! vocabulary) plus, for each (phrase, position) context, a sparse
//! distribution over the target vocabulary. A sample concatenates random
//! phrases into a source sequence and draws every target token from the
//! distribution of its context.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};

const TASK_FORMAT: &str = "probtrans-task";
const TASK_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "#probtrans-dataset";
const DATASET_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub vocab_in: usize,
    pub vocab_out: usize,
    pub n_phrases: usize,
    pub phrase_len: usize,
    /// Largest support size `k` of a target distribution.
    pub max_nonzero: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_in: 500,
            vocab_out: 500,
            n_phrases: 1000,
            phrase_len: 3,
            max_nonzero: 10,
            min_len: 15,
            max_len: 90,
            n_train: 100_000,
            n_val: 10_000,
            n_test: 10_000,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Small task used for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            vocab_in: 64,
            vocab_out: 64,
            n_phrases: 128,
            phrase_len: 3,
            max_nonzero: 5,
            min_len: 9,
            max_len: 30,
            n_train: 20_000,
            n_val: 500,
            n_test: 1000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_in == 0 || self.vocab_out == 0 || self.n_phrases == 0 {
            return bad("vocabularies and phrase count must be positive");
        }
        if self.phrase_len == 0 {
            return bad("phrase_len must be at least 1");
        }
        if self.max_nonzero == 0 || self.max_nonzero > self.vocab_out {
            return bad("max_nonzero must lie in 1..=vocab_out");
        }
        if self.min_len > self.max_len {
            return bad("min_len exceeds max_len");
        }
        if self.unit_range().is_empty() {
            return bad("no multiple of phrase_len lies in [min_len, max_len]");
        }
        let distinct = (self.vocab_in as f64).powi(self.phrase_len.min(64) as i32);
        if (self.n_phrases as f64) > distinct {
            return bad("more phrases requested than distinct token strings exist");
        }
        Ok(())
    }

    /// Admissible phrase counts per sequence.
    fn unit_range(&self) -> std::ops::RangeInclusive<usize> {
        let lo = self.min_len.div_ceil(self.phrase_len).max(1);
        lo..=self.max_len / self.phrase_len
    }
}

/// Sparse distribution: sorted support tokens and their probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDist {
    pub tokens: Vec<u32>,
    pub probs: Vec<f64>,
}

impl SparseDist {
    pub fn support_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.tokens.binary_search(&token).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&t, &p) in self.tokens.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return t;
            }
        }
        *self.tokens.last().expect("non-empty support")
    }
}

/// Identifies the distribution behind one target token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context {
    pub phrase: u32,
    pub pos: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    pub spec: TaskSpec,
    pub phrases: Vec<Vec<u32>>,
    /// Indexed by `phrase * phrase_len + pos`.
    dists: Vec<SparseDist>,
}

impl SynthTask {
    pub fn dist(&self, ctx: Context) -> &SparseDist {
        &self.dists[ctx.phrase as usize * self.spec.phrase_len + ctx.pos as usize]
    }

    pub fn dists(&self) -> impl Iterator<Item = (Context, &SparseDist)> {
        let l = self.spec.phrase_len;
        self.dists.iter().enumerate().map(move |(i, d)| {
            (Context { phrase: (i / l) as u32, pos: (i % l) as u32 }, d)
        })
    }

    /// Hex SHA-256 prefix of the canonical task file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Canonical task file contents.
    pub fn to_json(&self) -> String {
        let dists = self
            .dists()
            .map(|(c, d)| {
                let pairs = d.tokens.iter().copied().zip(d.probs.iter().copied()).collect();
                (format!("{}:{}", c.phrase, c.pos), pairs)
            })
            .collect();
        let file = TaskFile {
            format: TASK_FORMAT.into(),
            version: TASK_VERSION,
            spec: self.spec.clone(),
            phrases: self.phrases.clone(),
            dists,
        };
        serde_json::to_string(&file).expect("task serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    format: String,
    version: u32,
    spec: TaskSpec,
    phrases: Vec<Vec<u32>>,
    dists: BTreeMap<String, Vec<(u32, f64)>>,
}

/// Build the phrases and context distributions for `spec`.
pub fn build_task(spec: &TaskSpec) -> Result<SynthTask> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "task", 0);
    let mut seen = HashSet::new();
    let mut phrases = Vec::with_capacity(spec.n_phrases);
    while phrases.len() < spec.n_phrases {
        let p: Vec<u32> =
            (0..spec.phrase_len).map(|_| rng.random_range(0..spec.vocab_in as u32)).collect();
        if seen.insert(p.clone()) {
            phrases.push(p);
        }
    }
    let dists = (0..spec.n_phrases * spec.phrase_len)
        .map(|_| {
            let size = rng.random_range(1..=spec.max_nonzero);
            let mut tokens: Vec<u32> =
                index::sample(&mut rng, spec.vocab_out, size).iter().map(|t| t as u32).collect();
            tokens.sort_unstable();
            let weights: Vec<f64> = (0..size).map(|_| 1.0 - rng.random::<f64>()).collect();
            let total: f64 = weights.iter().sum();
            SparseDist { tokens, probs: weights.iter().map(|w| w / total).collect() }
        })
        .collect();
    Ok(SynthTask { spec: spec.clone(), phrases, dists })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub contexts: Vec<Context>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_hash: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn check_task(&self, task: &SynthTask) -> Result<()> {
        let h = task.hash();
        if self.task_hash != h {
            return Err(Error::Mismatch(format!(
                "dataset was sampled from task {} but task {} was given",
                self.task_hash, h
            )));
        }
        Ok(())
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        Self { task_hash: self.task_hash.clone(), samples: self.samples[..n.min(self.len())].to_vec() }
    }
}

/// Draw `n` samples from `rng`.
pub fn sample_with(task: &SynthTask, n: usize, rng: &mut StreamRng) -> Dataset {
    let spec = &task.spec;
    let units = spec.unit_range();
    let samples = (0..n)
        .map(|_| {
            let u = rng.random_range(units.clone());
            let len = u * spec.phrase_len;
            let (mut x, mut y, mut contexts) =
                (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
            for _ in 0..u {
                let phrase = rng.random_range(0..spec.n_phrases as u32);
                for (pos, &tok) in task.phrases[phrase as usize].iter().enumerate() {
                    let ctx = Context { phrase, pos: pos as u32 };
                    x.push(tok);
                    y.push(task.dist(ctx).sample(rng));
                    contexts.push(ctx);
                }
            }
            Sample { x, y, contexts }
        })
        .collect();
    Dataset { task_hash: task.hash(), samples }
}

/// `n` samples from the stream keyed by `seed`.
pub fn sample_dataset(task: &SynthTask, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    Ok(sample_with(task, n, &mut substream(seed, "dataset", 0)))
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Train/val/test sets sized by the task spec, each from its own stream.
pub fn generate_splits(task: &SynthTask) -> Splits {
    let s = &task.spec;
    let draw = |name: &str, n: usize| sample_with(task, n, &mut substream(s.seed, name, 0));
    Splits { train: draw("train", s.n_train), val: draw("val", s.n_val), test: draw("test", s.n_test) }
}

pub fn save_task(task: &SynthTask, path: &Path) -> Result<()> {
    let mut s = task.to_json();
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

pub fn parse_task(text: &str) -> Result<SynthTask> {
    let file: TaskFile = serde_json::from_str(text).map_err(|e| Error::Format {
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    if file.format != TASK_FORMAT || file.version != TASK_VERSION {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected {TASK_FORMAT} v{TASK_VERSION}, found {} v{}", file.format, file.version),
        });
    }
    let spec = file.spec;
    spec.validate()?;
    let invalid = |m: String| Err(Error::Input(format!("task file: {m}")));
    if file.phrases.len() != spec.n_phrases {
        return invalid(format!("{} phrases, spec says {}", file.phrases.len(), spec.n_phrases));
    }
    for p in &file.phrases {
        if p.len() != spec.phrase_len || p.iter().any(|&t| t as usize >= spec.vocab_in) {
            return invalid(format!("malformed phrase {p:?}"));
        }
    }
    let n_ctx = spec.n_phrases * spec.phrase_len;
    if file.dists.len() != n_ctx {
        return invalid(format!("{} distributions, expected {n_ctx}", file.dists.len()));
    }
    let mut dists = vec![None; n_ctx];
    for (key, pairs) in file.dists {
        let parsed = key
            .split_once(':')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
        let Some((phrase, pos)) = parsed.filter(|&(a, b)| a < spec.n_phrases && b < spec.phrase_len)
        else {
            return invalid(format!("bad context key {key:?}"));
        };
        let tokens: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let probs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let sum: f64 = probs.iter().sum();
        let sorted = tokens.windows(2).all(|w| w[0] < w[1]);
        if tokens.is_empty()
            || tokens.len() > spec.max_nonzero
            || !sorted
            || tokens.iter().any(|&t| t as usize >= spec.vocab_out)
            || probs.iter().any(|&p| !(p > 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return invalid(format!("malformed distribution for {key}"));
        }
        dists[phrase * spec.phrase_len + pos] = Some(SparseDist { tokens, probs });
    }
    let dists = dists.into_iter().map(|d| d.expect("all keys distinct and in range")).collect();
    Ok(SynthTask { spec, phrases: file.phrases, dists })
}

pub fn load_task(path: &Path) -> Result<SynthTask> {
    parse_task(&std::fs::read_to_string(path)?)
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn dataset_to_string(data: &Dataset) -> String {
    let mut out = format!(
        "{DATASET_MAGIC} {DATASET_VERSION} task={} n={}\n",
        data.task_hash,
        data.samples.len()
    );
    for s in &data.samples {
        let ann = join(s.contexts.iter().map(|c| format!("{}:{}", c.phrase, c.pos)));
        let _ = writeln!(out, "{}\t{}\t{}", join(s.x.iter()), join(s.y.iter()), ann);
    }
    out
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(data))?;
    Ok(())
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let fail = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("");
    let fields: Vec<&str> = header.trim_end().split(' ').collect();
    let (hash, n) = match fields.as_slice() {
        [magic, version, task, n] if *magic == DATASET_MAGIC => {
            if *version != DATASET_VERSION {
                return Err(fail(magic.len() + 1, format!("unsupported dataset version {version}")));
            }
            let hash = task.strip_prefix("task=");
            let n = n.strip_prefix("n=").and_then(|v| v.parse::<usize>().ok());
            match (hash, n) {
                (Some(h), Some(n)) => (h.to_string(), n),
                _ => return Err(fail(0, "malformed header".into())),
            }
        }
        _ => return Err(fail(0, "missing dataset header".into())),
    };
    let mut offset = header.len();
    let mut samples = Vec::with_capacity(n);
    for line in lines {
        let Some(body) = line.strip_suffix('\n') else {
            return Err(fail(offset + line.len(), "truncated record".into()));
        };
        let cols: Vec<&str> = body.split('\t').collect();
        let [xs, ys, anns] = cols.as_slice() else {
            return Err(fail(offset, format!("expected 3 tab-separated columns, found {}", cols.len())));
        };
        let nums = |s: &str, col: usize| -> Result<Vec<u32>> {
            s.split(' ')
                .map(|t| t.parse::<u32>().map_err(|_| fail(offset + col, format!("bad token {t:?}"))))
                .collect()
        };
        let x = nums(xs, 0)?;
        let y = nums(ys, xs.len() + 1)?;
        let ann_off = offset + xs.len() + ys.len() + 2;
        let contexts = anns
            .split(' ')
            .map(|a| {
                a.split_once(':')
                    .and_then(|(p, q)| Some(Context { phrase: p.parse().ok()?, pos: q.parse().ok()? }))
                    .ok_or_else(|| fail(ann_off, format!("bad annotation {a:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if x.len() != y.len() || x.len() != contexts.len() {
            return Err(fail(offset, "source, target and annotation lengths differ".into()));
        }
        samples.push(Sample { x, y, contexts });
        offset += line.len();
    }
    if samples.len() != n {
        return Err(fail(offset, format!("header promises {n} records, found {}", samples.len())));
    }
    Ok(Dataset { task_hash: hash, samples })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&std::fs::read_to_string(path)?)
}
