//! Parallel corpora: loading, saving, provenance-aware merging and statistics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::rng::Rng;

/// A whitespace-tokenized sentence.
pub type Sentence = Vec<String>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line count mismatch {source_lines} vs {target_lines}")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("empty sentence at line {line}")]
    EmptyLine { line: usize },
    #[error("valid fraction {0} outside (0, 1)")]
    FractionOutOfRange(f64),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("merge requires at least one corpus")]
    NothingToMerge,
    #[error("{path}: {err}")]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |err| CorpusError::Io {
        path: path.to_path_buf(),
        err,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProvenanceKind {
    Original,
    SyntheticForward,
    SyntheticBackward,
    MonolingualBackward,
}

impl ProvenanceKind {
    pub const ALL: [ProvenanceKind; 4] = [
        ProvenanceKind::Original,
        ProvenanceKind::SyntheticForward,
        ProvenanceKind::SyntheticBackward,
        ProvenanceKind::MonolingualBackward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProvenanceKind::Original => "original",
            ProvenanceKind::SyntheticForward => "synthetic_forward",
            ProvenanceKind::SyntheticBackward => "synthetic_backward",
            ProvenanceKind::MonolingualBackward => "monolingual_backward",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != ProvenanceKind::Original
    }
}

/// Where a pair came from. Original pairs always carry round 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    kind: ProvenanceKind,
    round: usize,
    teacher_index: usize,
}

impl Provenance {
    pub fn original() -> Self {
        Provenance {
            kind: ProvenanceKind::Original,
            round: 0,
            teacher_index: 0,
        }
    }

    /// Synthetic provenance produced by teacher `teacher_index` in `round` (1-based rounds).
    pub fn synthetic(kind: ProvenanceKind, round: usize, teacher_index: usize) -> Self {
        if kind == ProvenanceKind::Original {
            return Self::original();
        }
        Provenance {
            kind,
            round,
            teacher_index,
        }
    }

    pub fn kind(&self) -> ProvenanceKind {
        self.kind
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn teacher_index(&self) -> usize {
        self.teacher_index
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Sentence,
    pub target: Sentence,
    pub provenance: Provenance,
}

impl SentencePair {
    pub fn new(source: Sentence, target: Sentence, provenance: Provenance) -> Self {
        SentencePair {
            source,
            target,
            provenance,
        }
    }
}

/// An ordered list of sentence pairs. `union_size` is set by [`merge_dedup`] to the
/// number of pairs seen before duplicates were dropped.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub name: String,
    pub pairs: Vec<SentencePair>,
    union_size: Option<usize>,
}

impl ParallelCorpus {
    pub fn new(name: impl Into<String>, pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus {
            name: name.into(),
            pairs,
            union_size: None,
        }
    }

    /// Builds an original-provenance corpus from aligned sentence lists.
    pub fn from_sides(name: impl Into<String>, sources: Vec<Sentence>, targets: Vec<Sentence>) -> Self {
        let pairs = sources
            .into_iter()
            .zip(targets)
            .map(|(s, t)| SentencePair::new(s, t, Provenance::original()))
            .collect();
        Self::new(name, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn union_size(&self) -> Option<usize> {
        self.union_size
    }

    pub fn sources(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }

    /// The same pairs with source and target exchanged (provenance kept).
    pub fn swapped(&self) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .map(|p| SentencePair::new(p.target.clone(), p.source.clone(), p.provenance))
            .collect();
        ParallelCorpus::new(format!("{}.swapped", self.name), pairs)
    }

    /// Applies `f` to every token on both sides.
    pub fn map_sentences(&self, mut f: impl FnMut(&[String]) -> Sentence) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .map(|p| SentencePair::new(f(&p.source), f(&p.target), p.provenance))
            .collect();
        ParallelCorpus {
            name: self.name.clone(),
            pairs,
            union_size: self.union_size,
        }
    }
}

pub fn tokenize_line(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Drop pairs where either side is empty instead of failing.
    pub drop_empty: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { drop_empty: true }
    }
}

#[derive(Debug)]
pub struct Loaded {
    pub corpus: ParallelCorpus,
    pub dropped: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    provenance: Provenance,
    options: LoadOptions,
) -> Result<Loaded, CorpusError> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let (s, t) = (tokenize_line(s), tokenize_line(t));
        if s.is_empty() || t.is_empty() {
            if options.drop_empty {
                dropped += 1;
                continue;
            }
            return Err(CorpusError::EmptyLine { line: i + 1 });
        }
        pairs.push(SentencePair::new(s, t, provenance));
    }
    let name = source_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Loaded {
        corpus: ParallelCorpus::new(name, pairs),
        dropped,
    })
}

/// Reads a single-side file, one sentence per line; empty lines are skipped.
pub fn load_monolingual(path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| tokenize_line(l))
        .filter(|s| !s.is_empty())
        .collect())
}

/// Reads one sentence per line, keeping empty lines so line numbers stay aligned.
pub fn load_lines(path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    Ok(read_lines(path)?.iter().map(|l| tokenize_line(l)).collect())
}

pub fn save_sentences(sentences: &[Sentence], path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        // A token never contains whitespace once tokenized, but in-memory corpora may
        // carry untrimmed tokens; normalize them on the way out.
        let line = s
            .iter()
            .flat_map(|t| t.split_whitespace())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn save_parallel(corpus: &ParallelCorpus, source_path: &Path, target_path: &Path) -> Result<(), CorpusError> {
    save_sentences(&corpus.sources(), source_path)?;
    save_sentences(&corpus.targets(), target_path)
}

/// Concatenates `corpora` in order, keeping the first occurrence of every
/// (source, target) token-sequence pair regardless of provenance.
pub fn merge_dedup(corpora: &[&ParallelCorpus]) -> Result<ParallelCorpus, CorpusError> {
    let first = corpora.first().ok_or(CorpusError::NothingToMerge)?;
    let total: usize = corpora.iter().map(|c| c.len()).sum();
    let mut seen: HashSet<(&[String], &[String])> = HashSet::with_capacity(total);
    let mut pairs = Vec::with_capacity(total);
    for corpus in corpora {
        for pair in &corpus.pairs {
            if seen.insert((&pair.source, &pair.target)) {
                pairs.push(pair.clone());
            }
        }
    }
    Ok(ParallelCorpus {
        name: first.name.clone(),
        pairs,
        union_size: Some(total),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub original: usize,
    pub synthetic_forward: usize,
    pub synthetic_backward: usize,
    pub monolingual_backward: usize,
    pub union_size: usize,
    pub duplicate_rate: f64,
    pub mean_source_len: f64,
    pub mean_target_len: f64,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl CorpusStats {
    pub fn count(&self, kind: ProvenanceKind) -> usize {
        match kind {
            ProvenanceKind::Original => self.original,
            ProvenanceKind::SyntheticForward => self.synthetic_forward,
            ProvenanceKind::SyntheticBackward => self.synthetic_backward,
            ProvenanceKind::MonolingualBackward => self.monolingual_backward,
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("pairs", self.pairs.to_string()),
            ("original", self.original.to_string()),
            ("synthetic_forward", self.synthetic_forward.to_string()),
            ("synthetic_backward", self.synthetic_backward.to_string()),
            ("monolingual_backward", self.monolingual_backward.to_string()),
            ("union_size", self.union_size.to_string()),
            ("duplicate_rate", format!("{:.6}", self.duplicate_rate)),
            ("mean_source_len", format!("{:.4}", self.mean_source_len)),
            ("mean_target_len", format!("{:.4}", self.mean_target_len)),
            ("max_source_len", self.max_source_len.to_string()),
            ("max_target_len", self.max_target_len.to_string()),
        ]
    }

    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let fields = self.fields();
        let header: Vec<_> = fields.iter().map(|(k, _)| *k).collect();
        let values: Vec<_> = fields.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", header.join(","), values.join(","))
    }
}

pub fn stats(corpus: &ParallelCorpus) -> CorpusStats {
    let n = corpus.len();
    let count = |k: ProvenanceKind| corpus.pairs.iter().filter(|p| p.provenance.kind() == k).count();
    let union_size = corpus.union_size.unwrap_or(n);
    let duplicate_rate = if union_size == 0 {
        0.0
    } else {
        1.0 - n as f64 / union_size as f64
    };
    let mean = |f: fn(&SentencePair) -> usize| {
        if n == 0 {
            0.0
        } else {
            corpus.pairs.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    CorpusStats {
        pairs: n,
        original: count(ProvenanceKind::Original),
        synthetic_forward: count(ProvenanceKind::SyntheticForward),
        synthetic_backward: count(ProvenanceKind::SyntheticBackward),
        monolingual_backward: count(ProvenanceKind::MonolingualBackward),
        union_size,
        duplicate_rate,
        mean_source_len: mean(|p| p.source.len()),
        mean_target_len: mean(|p| p.target.len()),
        max_source_len: corpus.pairs.iter().map(|p| p.source.len()).max().unwrap_or(0),
        max_target_len: corpus.pairs.iter().map(|p| p.target.len()).max().unwrap_or(0),
    }
}

/// Random held-out split; `round(fraction * len)` pairs go to validation.
/// Both halves keep the input's relative order.
pub fn split(
    corpus: &ParallelCorpus,
    valid_fraction: f64,
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus), CorpusError> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(CorpusError::FractionOutOfRange(valid_fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = corpus.len();
    let n_valid = (valid_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut is_valid = vec![false; n];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (pair, v) in corpus.pairs.iter().zip(is_valid) {
        if v {
            valid.push(pair.clone());
        } else {
            train.push(pair.clone());
        }
    }
    Ok((
        ParallelCorpus::new(format!("{}.train", corpus.name), train),
        ParallelCorpus::new(format!("{}.valid", corpus.name), valid),
    ))
}
