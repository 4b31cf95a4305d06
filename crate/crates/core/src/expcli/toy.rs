//! Synthetic translation tasks: a seeded dictionary between two pseudo-word
//! languages plus an optional reordering rule.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ExpError;
use crate::corpus::{ParallelCorpus, Sentence};
use crate::numerics::rng::{derive_seed, Rng};

const SOURCE_ONSETS: [&str; 6] = ["b", "d", "g", "k", "p", "t"];
const TARGET_ONSETS: [&str; 8] = ["f", "l", "m", "n", "r", "s", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    None,
    /// Swap target positions (0,1), (2,3), ...; an odd last word stays put.
    SwapAdjacentPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskSpec {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub reorder: Reorder,
    /// Fraction of source words with two valid translations.
    pub ambiguity_rate: f64,
    /// Probability of the primary translation of an ambiguous word.
    pub primary_prob: f64,
    /// Explicit dictionary; generated from the fields above when absent.
    pub dictionary: Option<BTreeMap<String, Vec<(String, f64)>>>,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            source_vocab: 30,
            target_vocab: 30,
            min_len: 3,
            max_len: 8,
            reorder: Reorder::SwapAdjacentPairs,
            ambiguity_rate: 0.3,
            primary_prob: 0.6,
            dictionary: None,
            seed: 7,
        }
    }
}

/// Pseudo-words of two syllables, `n` of them, in a seeded order.
fn words(onsets: &[&str], n: usize, rng: &mut Rng) -> Vec<String> {
    let syllables: Vec<String> = onsets.iter().flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}"))).collect();
    let mut all: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    rng.shuffle(&mut all);
    all.truncate(n);
    all
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<(), ExpError> {
        let bad = |m: &str| Err(ExpError::Config(format!("toy task: {m}")));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad("ambiguity_rate must lie in [0, 1]");
        }
        if !(self.primary_prob > 0.0 && self.primary_prob <= 1.0) {
            return bad("primary_prob must lie in (0, 1]");
        }
        match &self.dictionary {
            Some(d) => {
                if d.is_empty() {
                    return bad("empty dictionary");
                }
                for (w, options) in d {
                    let total: f64 = options.iter().map(|(_, p)| p).sum();
                    if options.is_empty() || options.iter().any(|(_, p)| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                        return bad(&format!("translations of {w:?} must form a distribution"));
                    }
                }
            }
            None => {
                if self.source_vocab == 0 || self.source_vocab > 900 {
                    return bad("source_vocab must lie in 1..=900");
                }
                if self.target_vocab < self.source_vocab || self.target_vocab > 1600 {
                    return bad("target_vocab must lie in source_vocab..=1600");
                }
                if self.ambiguity_rate > 0.0 && self.target_vocab < 2 {
                    return bad("ambiguity needs at least two target words");
                }
            }
        }
        Ok(())
    }

    /// The dictionary in use: the explicit one, or one generated from `seed`.
    /// Primary translations are injective; the second option of an ambiguous
    /// word is any other target word.
    pub fn resolved_dictionary(&self) -> Result<BTreeMap<String, Vec<(String, f64)>>, ExpError> {
        self.validate()?;
        if let Some(d) = &self.dictionary {
            return Ok(d.clone());
        }
        let mut rng = Rng::new(derive_seed(&[self.seed, 0]));
        let src = words(&SOURCE_ONSETS, self.source_vocab, &mut rng);
        let tgt = words(&TARGET_ONSETS, self.target_vocab, &mut rng);
        let n_amb = (self.ambiguity_rate * self.source_vocab as f64).round() as usize;
        let mut dict = BTreeMap::new();
        for (i, w) in src.iter().enumerate() {
            let mut options = vec![(tgt[i].clone(), 1.0)];
            if i < n_amb && self.primary_prob < 1.0 {
                let mut j = rng.below(self.target_vocab - 1);
                if j >= i {
                    j += 1;
                }
                options[0].1 = self.primary_prob;
                options.push((tgt[j].clone(), 1.0 - self.primary_prob));
            }
            dict.insert(w.clone(), options);
        }
        Ok(dict)
    }
}

pub struct ToySplits {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

pub fn reorder(mut sentence: Sentence, rule: Reorder) -> Sentence {
    if rule == Reorder::SwapAdjacentPairs {
        for pair in sentence.chunks_exact_mut(2) {
            pair.swap(0, 1);
        }
    }
    sentence
}

/// Generates train/valid/test splits. Split `s` draws from its own stream
/// `derive_seed([seed, 1, s])`, and a source already used by an earlier split
/// is redrawn, so the splits never share a source sentence.
pub fn gen_toy(spec: &ToyTaskSpec, n_train: usize, n_valid: usize, n_test: usize) -> Result<ToySplits, ExpError> {
    let dict = spec.resolved_dictionary()?;
    let vocab: Vec<(&String, &Vec<(String, f64)>)> = dict.iter().collect();
    let weights: Vec<Vec<f64>> = vocab.iter().map(|(_, o)| o.iter().map(|(_, p)| *p).collect()).collect();
    let span = spec.max_len - spec.min_len + 1;
    let capacity: f64 = (spec.min_len..=spec.max_len).map(|l| (vocab.len() as f64).powi(l as i32)).sum();
    if ((n_train + n_valid + n_test) as f64) > capacity / 2.0 {
        return Err(ExpError::Config("toy task: too few distinct sentences for the requested sizes".into()));
    }
    let mut seen: HashSet<Sentence> = HashSet::new();
    let mut out = Vec::with_capacity(3);
    for (s, (name, n)) in [("train", n_train), ("valid", n_valid), ("test", n_test)].into_iter().enumerate() {
        let mut rng = Rng::new(derive_seed(&[spec.seed, 1, s as u64]));
        let mut fresh: HashSet<Sentence> = HashSet::new();
        let (mut sources, mut targets) = (Vec::with_capacity(n), Vec::with_capacity(n));
        while sources.len() < n {
            let len = spec.min_len + rng.below(span);
            let idx: Vec<usize> = (0..len).map(|_| rng.below(vocab.len())).collect();
            let target: Sentence = idx
                .iter()
                .map(|&i| vocab[i].1[rng.categorical(&weights[i])].0.clone())
                .collect();
            let source: Sentence = idx.iter().map(|&i| vocab[i].0.clone()).collect();
            if seen.contains(&source) {
                continue;
            }
            fresh.insert(source.clone());
            sources.push(source);
            targets.push(reorder(target, spec.reorder));
        }
        seen.extend(fresh);
        out.push(ParallelCorpus::from_sides(format!("toy.{name}"), sources, targets));
    }
    let test = out.pop().unwrap();
    let valid = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(ToySplits { train, valid, test })
}
