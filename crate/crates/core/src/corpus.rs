//! Multi-task corpora: `D` tasks, each a list of tokenised documents with a
//! document-level train/test partition.
//!
//! Corpora come either from the synthetic generator (a shared order-2 Markov
//! source perturbed per task) or from a directory of plaintext files.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
const UNK: char = '\u{FFFD}';

/// Character-level token table.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    symbols: Vec<char>,
    /// Id of the unknown-symbol token, when the vocabulary has one.
    unk: Option<usize>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn new(symbols: Vec<char>, with_unk: bool) -> Result<Self> {
        let mut symbols = symbols;
        let unk = if with_unk {
            symbols.push(UNK);
            Some(symbols.len() - 1)
        } else {
            None
        };
        let index: HashMap<char, usize> = symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if index.len() != symbols.len() {
            return Err(Error::Data("duplicate symbols in vocabulary".into()));
        }
        Ok(Self {
            symbols,
            unk,
            index,
        })
    }

    /// `size` symbols drawn from a fixed printable alphabet.
    pub fn synthetic(size: usize) -> Result<Self> {
        let symbols: Vec<char> = ALPHABET
            .chars()
            .chain((0..).map_while(|i| char::from_u32(0x3b1 + i)))
            .take(size)
            .collect();
        Self::new(symbols, false)
    }

    pub fn from_parts(symbols: Vec<char>, unk: Option<usize>) -> Result<Self> {
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self {
            symbols,
            unk,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    /// Out-of-vocabulary characters map to the unknown token; without one
    /// they are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match self.index.get(&c) {
                Some(&id) => Ok(id),
                None => self
                    .unk
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary"))),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbols.get(i).copied().unwrap_or(UNK))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub task_id: usize,
    pub name: String,
    pub documents: Vec<Vec<usize>>,
    /// Indices into `documents`, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Task {
    pub fn train_docs(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.train.iter().map(|&i| self.documents[i].as_slice())
    }

    pub fn test_docs(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.test.iter().map(|&i| self.documents[i].as_slice())
    }

    /// Predicted tokens in the training split: `W - 1` per document.
    pub fn n_train_tokens(&self) -> usize {
        self.train_docs().map(|d| d.len() - 1).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskCorpus {
    pub tasks: Vec<Task>,
    pub vocab: Vocab,
}

impl MultiTaskCorpus {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_split(&self) -> bool {
        self.tasks.iter().all(|t| !t.train.is_empty() && !t.test.is_empty())
    }

    /// Checks vocabulary closure, minimum document length and split
    /// disjointness.
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size();
        for t in &self.tasks {
            for (n, doc) in t.documents.iter().enumerate() {
                if doc.len() < 2 {
                    return Err(Error::Data(format!(
                        "task {} document {n} has fewer than 2 tokens",
                        t.name
                    )));
                }
                if let Some(&bad) = doc.iter().find(|&&id| id >= v) {
                    return Err(Error::Index {
                        index: bad,
                        bound: v,
                    });
                }
            }
            let train: BTreeSet<_> = t.train.iter().collect();
            if t.test.iter().any(|i| train.contains(i)) {
                return Err(Error::Data(format!("task {} has overlapping splits", t.name)));
            }
            if t.train.iter().chain(&t.test).any(|&i| i >= t.documents.len()) {
                return Err(Error::Data(format!("task {} split out of range", t.name)));
            }
        }
        Ok(())
    }
}

/// Document counts per task: an explicit list, or a range to draw from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DocCounts {
    Explicit(Vec<usize>),
    Range { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub doc_counts: DocCounts,
    /// Inclusive document length range, in tokens.
    pub doc_len: [usize; 2],
    pub vocab_size: usize,
    pub seed: u64,
    /// Mixing weight of each task's private transition table, in `[0, 1]`.
    pub divergence: f64,
    /// Favoured successors per context in each random transition table.
    pub branching: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            doc_counts: DocCounts::Range { min: 40, max: 400 },
            doc_len: [24, 40],
            vocab_size: 12,
            seed: 2024,
            divergence: 0.5,
            branching: 2,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab size {} < 2",
                self.vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.divergence) {
            return Err(Error::Config(format!(
                "divergence {} outside [0, 1]",
                self.divergence
            )));
        }
        if self.n_tasks == 0 {
            return Err(Error::Config("no tasks".into()));
        }
        if self.doc_len[0] < 2 || self.doc_len[0] > self.doc_len[1] {
            return Err(Error::Config(format!("bad document length range {:?}", self.doc_len)));
        }
        if self.branching == 0 {
            return Err(Error::Config("branching must be positive".into()));
        }
        match &self.doc_counts {
            DocCounts::Explicit(c) if c.len() != self.n_tasks => Err(Error::Config(format!(
                "{} document counts for {} tasks",
                c.len(),
                self.n_tasks
            ))),
            DocCounts::Explicit(c) if c.iter().any(|&n| n < 4) => {
                Err(Error::Config("every task needs at least 4 documents".into()))
            }
            DocCounts::Range { min, max } if *min < 4 || min > max => {
                Err(Error::Config(format!("bad document count range [{min}, {max}]")))
            }
            _ => Ok(()),
        }
    }
}

/// Row-stochastic order-2 transition table: `probs[(a * V + b) * V + c]` is
/// `P(c | a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    pub vocab_size: usize,
    pub probs: Vec<f64>,
}

impl TransitionTable {
    fn random<R: Rng>(v: usize, branching: usize, rng: &mut R) -> Self {
        let floor = 0.02 / v as f64;
        let mut probs = vec![floor; v * v * v];
        for ctx in 0..v * v {
            let row = &mut probs[ctx * v..(ctx + 1) * v];
            for _ in 0..branching {
                let c = rng.gen_range(0..v);
                row[c] += rng.gen_range(0.2..1.0);
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
        }
        Self { vocab_size: v, probs }
    }

    fn mix(&self, other: &Self, weight: f64) -> Self {
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(g, t)| (1.0 - weight) * g + weight * t)
            .collect();
        Self {
            vocab_size: self.vocab_size,
            probs,
        }
    }

    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        let v = self.vocab_size;
        &self.probs[(a * v + b) * v..(a * v + b + 1) * v]
    }

    /// Mean total-variation distance between corresponding rows.
    pub fn mean_tv(&self, other: &Self) -> f64 {
        let v = self.vocab_size;
        let rows = v * v;
        let total: f64 = (0..rows)
            .map(|r| {
                self.probs[r * v..(r + 1) * v]
                    .iter()
                    .zip(&other.probs[r * v..(r + 1) * v])
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 2.0
            })
            .sum();
        total / rows as f64
    }

    fn sample<R: Rng>(&self, a: usize, b: usize, rng: &mut R) -> usize {
        let row = self.row(a, b);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (c, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        row.len() - 1
    }
}

/// The shared source plus each task's perturbed copy.
pub fn transition_tables(spec: &SyntheticSpec) -> Result<(TransitionTable, Vec<TransitionTable>)> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let global = TransitionTable::random(v, spec.branching, &mut rng);
    let tasks = (0..spec.n_tasks)
        .map(|d| {
            let mut trng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(d as u64 + 1));
            let own = TransitionTable::random(v, spec.branching, &mut trng);
            global.mix(&own, spec.divergence)
        })
        .collect();
    Ok((global, tasks))
}

/// Samples a corpus from [`transition_tables`]. All documents start out in
/// the training split; call [`split`] to carve out a test set.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiTaskCorpus> {
    let (_, tables) = transition_tables(spec)?;
    let vocab = Vocab::synthetic(spec.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let counts: Vec<usize> = match &spec.doc_counts {
        DocCounts::Explicit(c) => c.clone(),
        DocCounts::Range { min, max } => (0..spec.n_tasks).map(|_| rng.gen_range(*min..=*max)).collect(),
    };
    let v = spec.vocab_size;
    let tasks = tables
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(d, (table, n_docs))| {
            let documents = (0..n_docs)
                .map(|_| {
                    let len = rng.gen_range(spec.doc_len[0]..=spec.doc_len[1]);
                    let mut doc = vec![rng.gen_range(0..v), rng.gen_range(0..v)];
                    while doc.len() < len {
                        let n = doc.len();
                        doc.push(table.sample(doc[n - 2], doc[n - 1], &mut rng));
                    }
                    doc
                })
                .collect();
            Task {
                task_id: d,
                name: format!("task{d:02}"),
                documents,
                train: (0..n_docs).collect(),
                test: Vec::new(),
            }
        })
        .collect();
    Ok(MultiTaskCorpus { tasks, vocab })
}

/// Per-task document-level split: `floor(fraction * N_d)` documents go to
/// the test set, chosen by a seeded shuffle.
pub fn split(corpus: &MultiTaskCorpus, test_fraction: f64, seed: u64) -> Result<MultiTaskCorpus> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut out = corpus.clone();
    for task in &mut out.tasks {
        let n = task.documents.len();
        let n_test = (test_fraction * n as f64).floor() as usize;
        if n_test == 0 || n_test == n {
            return Err(Error::Data(format!(
                "task {} with {n} documents leaves an empty split at fraction {test_fraction}",
                task.name
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(task.task_id as u64 * 7919));
        idx.shuffle(&mut rng);
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        task.test = test;
        task.train = train;
    }
    Ok(out)
}

/// Reads `root/<task>/<document>` text files. Tasks and documents are taken
/// in lexicographic path order. Empty files are skipped with a warning.
pub fn ingest_plaintext(root: &Path) -> Result<MultiTaskCorpus> {
    let mut task_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    task_dirs.sort();
    if task_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no task directories", root.display())));
    }

    let mut raw: Vec<(String, Vec<String>)> = Vec::new();
    for dir in &task_dirs {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut docs = Vec::new();
        for f in files {
            let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            if text.chars().count() < 2 {
                log::warn!("skipping {}: fewer than 2 characters", f.display());
                continue;
            }
            docs.push(text);
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if docs.is_empty() {
            return Err(Error::Data(format!("task {name} has no documents")));
        }
        if docs.len() < 4 {
            return Err(Error::Data(format!(
                "task {name} has {} documents, need at least 4",
                docs.len()
            )));
        }
        raw.push((name, docs));
    }

    let chars: BTreeSet<char> = raw.iter().flat_map(|(_, d)| d.iter().flat_map(|s| s.chars())).collect();
    let vocab = Vocab::new(chars.into_iter().collect(), true)?;
    let tasks = raw
        .into_iter()
        .enumerate()
        .map(|(d, (name, docs))| {
            let documents = docs
                .iter()
                .map(|s| vocab.tokenize(s))
                .collect::<Result<Vec<_>>>()?;
            let n = documents.len();
            Ok(Task {
                task_id: d,
                name,
                documents,
                train: (0..n).collect(),
                test: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiTaskCorpus { tasks, vocab })
}

/// Draws windows uniformly with replacement until at least `batch_tokens`
/// tokens are predicted.
pub fn sample_batch<'a, R: Rng>(
    windows: &[&'a [usize]],
    batch_tokens: usize,
    rng: &mut R,
) -> Vec<&'a [usize]> {
    let mut out = Vec::new();
    let mut predicted = 0;
    if windows.is_empty() {
        return out;
    }
    while predicted < batch_tokens.max(1) {
        let w = windows[rng.gen_range(0..windows.len())];
        predicted += w.len() - 1;
        out.push(w);
    }
    out
}
