//! Byte-pair-encoding subwords and the shared vocabulary.
//!
//! Merges are learned per word (never across whitespace). A non-final subword
//! carries the continuation marker as a suffix, so `"lower"` may encode as
//! `["low@@", "er"]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ParallelCorpus, Sentence};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const DEFAULT_MARKER: &str = "@@";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot learn BPE from an empty corpus")]
    EmptyCorpus,
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {err}")]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    /// Pool both sides (shared vocabulary).
    Shared,
    SourceOnly,
    TargetOnly,
}

impl Sides {
    pub fn from_shared(shared: bool) -> Self {
        if shared {
            Sides::Shared
        } else {
            Sides::SourceOnly
        }
    }

    fn sentences<'a>(self, corpus: &'a ParallelCorpus) -> Box<dyn Iterator<Item = &'a Sentence> + 'a> {
        match self {
            Sides::Shared => Box::new(corpus.pairs.iter().flat_map(|p| [&p.source, &p.target])),
            Sides::SourceOnly => Box::new(corpus.pairs.iter().map(|p| &p.source)),
            Sides::TargetOnly => Box::new(corpus.pairs.iter().map(|p| &p.target)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    marker: String,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        Self::with_marker(merges, DEFAULT_MARKER)
    }

    pub fn with_marker(merges: Vec<(String, String)>, marker: &str) -> Self {
        let mut seen = HashSet::new();
        let merges: Vec<_> = merges.into_iter().filter(|m| seen.insert(m.clone())).collect();
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        BpeModel {
            merges,
            marker: marker.to_owned(),
            ranks,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        if self.ranks.is_empty() {
            return None;
        }
        self.ranks.get(&(left.to_owned(), right.to_owned())).copied()
    }

    /// Segments one word into subword symbols (no markers).
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.rank(&w[0], &w[1]).map(|r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        symbols
    }

    pub fn apply(&self, sentence: &[String]) -> Sentence {
        let mut out = Vec::new();
        for word in sentence {
            let pieces = self.segment_word(word);
            let last = pieces.len().saturating_sub(1);
            for (i, p) in pieces.into_iter().enumerate() {
                if i < last {
                    out.push(format!("{p}{}", self.marker));
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    pub fn decode(&self, tokens: &[String]) -> Sentence {
        decode_bpe(tokens, &self.marker)
    }

    pub fn apply_corpus(&self, corpus: &ParallelCorpus) -> ParallelCorpus {
        corpus.map_sentences(|s| self.apply(s))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        fs::write(path, out).map_err(|err| TokenizerError::Io {
            path: path.to_path_buf(),
            err,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|err| TokenizerError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_owned(), r.to_owned()))
                }
                _ => {
                    return Err(TokenizerError::Format {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: "expected \"left right\"".into(),
                    })
                }
            }
        }
        Ok(BpeModel::new(merges))
    }
}

/// Free-standing inverse of [`BpeModel::apply`].
pub fn decode_bpe(tokens: &[String], marker: &str) -> Sentence {
    let mut out = Vec::new();
    let mut word = String::new();
    for t in tokens {
        if let Some(stem) = t.strip_suffix(marker) {
            word.push_str(stem);
        } else {
            word.push_str(t);
            out.push(std::mem::take(&mut word));
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Greedy merge learning: repeatedly merge the most frequent adjacent symbol
/// pair inside words; ties go to the lexicographically smallest pair.
pub fn learn_bpe(corpus: &ParallelCorpus, num_merges: usize, shared: bool) -> Result<BpeModel, TokenizerError> {
    learn_bpe_sides(corpus, num_merges, Sides::from_shared(shared))
}

pub fn learn_bpe_sides(corpus: &ParallelCorpus, num_merges: usize, sides: Sides) -> Result<BpeModel, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sent in sides.sentences(corpus) {
        for w in sent {
            *word_counts.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();

    let mut merges = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        let mut freq: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *freq.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        let Some((pair, _)) = freq
            .into_iter()
            .max_by(|(pa, fa), (pb, fb)| fa.cmp(fb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (left, right) = (pair.0.to_owned(), pair.1.to_owned());
        for (syms, _) in &mut words {
            merge_leftmost(syms, &left, &right);
        }
        merges.push((left, right));
    }
    Ok(BpeModel::new(merges))
}

/// Merges every non-overlapping occurrence, scanning left to right.
fn merge_leftmost(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let r = symbols.remove(i + 1);
            symbols[i].push_str(&r);
        }
        i += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` (duplicates and reserved names skipped).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = all.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len());
                all.push(t);
            }
        }
        Vocabulary { tokens: all, index }
    }

    pub fn reserved_only() -> Self {
        Self::from_tokens(std::iter::empty())
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Maps tokens to ids, UNK for anything out of vocabulary.
    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Maps ids back to tokens, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Sentence {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_owned())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        fs::write(path, out).map_err(|err| TokenizerError::Io {
            path: path.to_path_buf(),
            err,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|err| TokenizerError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        let fmt = |line: usize, msg: &str| TokenizerError::Format {
            path: path.to_path_buf(),
            line,
            msg: msg.to_owned(),
        };
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| fmt(i + 1, "expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| fmt(i + 1, "bad id"))?;
            if id != i {
                return Err(fmt(i + 1, "ids must be contiguous from 0"));
            }
            tokens.push(tok.to_owned());
        }
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(fmt(1, "reserved tokens missing"));
        }
        let mut v = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        if v.index.len() != v.tokens.len() {
            return Err(fmt(1, "duplicate tokens"));
        }
        Ok(v)
    }
}

impl From<Vec<String>> for Vocabulary {
    /// Takes the full token list as stored (reserved tokens first).
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Reserved tokens plus every subword emitted by `model` on the chosen sides
/// of `corpus`, ordered by descending frequency then lexicographically.
pub fn build_vocab(model: &BpeModel, corpus: &ParallelCorpus, sides: Sides) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sent in sides.sentences(corpus) {
        for t in model.apply(sent) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize_line;
    use proptest::prelude::*;

    fn corpus_of(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::from_sides(
            "t",
            pairs.iter().map(|(s, _)| tokenize_line(s)).collect(),
            pairs.iter().map(|(_, t)| tokenize_line(t)).collect(),
        )
    }

    fn m(l: &str, r: &str) -> (String, String) {
        (l.to_owned(), r.to_owned())
    }

    #[test]
    fn single_word_abab() {
        let c = corpus_of(&[("abab", "abab"), ("abab", "abab")]);
        let model = learn_bpe(&c, 1, true).unwrap();
        assert_eq!(model.merges(), &[m("a", "b")]);
    }

    #[test]
    fn classic_corpus_merges() {
        let mut src = Vec::new();
        for (w, n) in [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)] {
            for _ in 0..n {
                src.push(vec![w.to_owned()]);
            }
        }
        let c = ParallelCorpus::from_sides("c", src.clone(), src);
        let model = learn_bpe(&c, 4, false).unwrap();
        // Hand trace: (e,s)=9 ties (s,t)=9 → (e,s); then (es,t)=9; (l,o)=7 ties (o,w)=7 → (l,o); (lo,w)=7.
        assert_eq!(
            model.merges(),
            &[m("e", "s"), m("es", "t"), m("l", "o"), m("lo", "w")]
        );
        assert_eq!(model.apply(&tokenize_line("lowest")), tokenize_line("low@@ est"));
    }

    #[test]
    fn zero_merges_is_character_level() {
        let c = corpus_of(&[("hi", "yo")]);
        let model = learn_bpe(&c, 0, true).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.apply(&tokenize_line("hi")), tokenize_line("h@@ i"));
    }

    #[test]
    fn learn_stops_when_no_pairs_remain() {
        let c = corpus_of(&[("ab", "a")]);
        let model = learn_bpe(&c, 10, true).unwrap();
        assert_eq!(model.merges(), &[m("a", "b")]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            learn_bpe(&ParallelCorpus::default(), 3, true),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn single_merge_application() {
        let model = BpeModel::new(vec![m("a", "b")]);
        assert_eq!(model.apply(&tokenize_line("abc")), tokenize_line("ab@@ c"));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_bpe(&tokenize_line("a@@ b"), "@@"), tokenize_line("ab"));
        assert!(decode_bpe(&[], "@@").is_empty());
        // A dangling continuation still closes the word.
        assert_eq!(decode_bpe(&tokenize_line("x a@@"), "@@"), tokenize_line("x a"));
    }

    #[test]
    fn duplicate_merges_are_dropped() {
        let model = BpeModel::new(vec![m("a", "b"), m("a", "b")]);
        assert_eq!(model.merges().len(), 1);
    }

    #[test]
    fn vocab_examples() {
        let model = BpeModel::new(vec![]);
        let empty = build_vocab(&model, &ParallelCorpus::default(), Sides::Shared);
        assert_eq!(empty.len(), 4);
        assert_eq!(empty.id("<pad>"), Some(PAD));
        assert_eq!(empty.id("<unk>"), Some(UNK));

        let c = corpus_of(&[("a b", "b c")]);
        let shared = build_vocab(&model, &c, Sides::Shared);
        assert_eq!(shared.len(), 7);
        assert!(["a", "b", "c"].iter().all(|t| shared.contains(t)));
        // "b" occurs twice and therefore gets the first free id.
        assert_eq!(shared.id("b"), Some(4));

        let src = build_vocab(&model, &c, Sides::from_shared(false));
        assert_eq!(src.len(), 6);
        assert!(src.contains("a") && src.contains("b") && !src.contains("c"));
    }

    #[test]
    fn vocab_covers_training_corpus() {
        let c = corpus_of(&[("lower newest", "widest low"), ("slow", "news")]);
        let model = learn_bpe(&c, 5, true).unwrap();
        let vocab = build_vocab(&model, &c, Sides::Shared);
        for p in &c.pairs {
            for side in [&p.source, &p.target] {
                assert!(vocab.encode(&model.apply(side)).iter().all(|&i| i != UNK));
            }
        }
    }

    #[test]
    fn files_roundtrip_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus_of(&[("lower newest", "widest low")]);
        let model = learn_bpe(&c, 6, true).unwrap();
        let mp = dir.path().join("merges.txt");
        model.save(&mp).unwrap();
        assert_eq!(BpeModel::load(&mp).unwrap(), model);

        let vocab = build_vocab(&model, &c, Sides::Shared);
        let vp = dir.path().join("vocab.tsv");
        vocab.save(&vp).unwrap();
        assert_eq!(Vocabulary::load(&vp).unwrap(), vocab);
        assert!(fs::read_to_string(&vp).unwrap().starts_with("<pad>\t0\n<s>\t1\n"));

        fs::write(&mp, "a b c\n").unwrap();
        assert!(matches!(BpeModel::load(&mp), Err(TokenizerError::Format { line: 1, .. })));
        fs::write(&vp, "x\t0\n").unwrap();
        assert!(Vocabulary::load(&vp).is_err());
    }

    #[test]
    fn learning_is_deterministic() {
        let c = corpus_of(&[("abc bca cab", "aa bb cc"), ("abcabc", "cba")]);
        let a = learn_bpe(&c, 8, true).unwrap();
        let b = learn_bpe(&c, 8, true).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn apply_decode_roundtrip(sentence in prop::collection::vec("[a-e]{1,6}", 0..6), seed in 0usize..4) {
            let merges = [
                vec![],
                vec![m("a", "b")],
                vec![m("a", "b"), m("ab", "c"), m("d", "d"), m("e", "a")],
                vec![m("c", "c"), m("cc", "c"), m("b", "a"), m("ba", "e")],
            ];
            let model = BpeModel::new(merges[seed].clone());
            let encoded = model.apply(&sentence);
            prop_assert_eq!(model.decode(&encoded), sentence);
        }
    }
}
