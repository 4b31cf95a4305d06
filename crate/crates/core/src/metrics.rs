//! BLEU, Pairwise-BLEU and ensemble confidence statistics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{greedy, DecodeConfig, DecodeError, Ensemble, StepScorer};
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("candidate/reference count mismatch {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty candidate list")]
    Empty,
    #[error("pairwise BLEU needs at least 2 hypothesis sets, got {0}")]
    TooFewSets(usize),
    #[error("probability {0} outside (0, 1]")]
    Probability(f64),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with one reference per candidate.
///
/// Orders for which the candidates contain no n-grams at all are left out of
/// the geometric mean. With `smoothing`, orders n ≥ 2 use `(m + 1) / (t + 1)`.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize, smoothing: bool) -> Result<BleuScore> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for n in 1..=max_n {
            let rc = ngram_counts(refr, n);
            for (g, k) in ngram_counts(cand, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if smoothing && i > 0 {
                (matches[i] + 1) as f64 / (totals[i] + 1) as f64
            } else if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if c == 0 { 0.0 } else { (1.0 - r as f64 / c as f64).exp().min(1.0) };
    let used: Vec<f64> = (0..max_n).filter(|&i| totals[i] > 0).map(|i| precisions[i]).collect();
    let score = if used.is_empty() || used.contains(&0.0) {
        0.0
    } else {
        let log_mean = used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len: c,
        reference_len: r,
    })
}

/// Mean corpus BLEU over all ordered pairs of distinct hypothesis sets.
pub fn pairwise_bleu<T: Eq + Hash>(sets: &[Vec<Vec<T>>], smoothing: bool) -> Result<f64> {
    if sets.len() < 2 {
        return Err(MetricsError::TooFewSets(sets.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for (a, sa) in sets.iter().enumerate() {
        for (b, sb) in sets.iter().enumerate() {
            if a != b {
                total += bleu(sa, sb, 4, smoothing)?.score;
                pairs += 1;
            }
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    /// Mean probability each teacher gives its own greedy tokens.
    pub teacher_self: f64,
    /// Mean, along the ensemble-greedy path, of the largest averaged teacher probability.
    pub teacher_ensemble_max: f64,
    /// Mean probability the student gives the teachers' greedy tokens.
    pub student_on_teachers: Option<f64>,
}

#[derive(Default, Clone, Copy)]
struct Sums {
    teacher: (f64, usize),
    ensemble: (f64, usize),
    student: (f64, usize),
}

/// Probability of each token of `path` (BOS..EOS) under `scorer`, one per generated token.
fn path_probs<S: StepScorer>(scorer: &S, source: &[TokenId], path: &[TokenId]) -> Result<Vec<f64>> {
    let (mut state, mut lp) = scorer.begin(source)?;
    let mut out = Vec::with_capacity(path.len() - 1);
    for (j, &tok) in path.iter().enumerate().skip(1) {
        out.push(lp[tok].exp());
        if j + 1 < path.len() {
            let (s, l) = scorer.advance(&state, tok)?;
            state = s;
            lp = l;
        }
    }
    Ok(out)
}

/// Token-pooled confidence statistics over `sources`.
///
/// Each teacher decodes greedily; the ensemble term follows the greedy path of
/// the teachers' averaged distribution. Token averages pool all tokens
/// (EOS included) across teachers and sentences.
pub fn confidence_stats<T: StepScorer, S: StepScorer>(
    teachers: &[T],
    student: Option<&S>,
    sources: &[Vec<TokenId>],
    config: &DecodeConfig,
) -> Result<ConfidenceStats> {
    let ens = Ensemble::new(teachers)?;
    if let Some(s) = student {
        if s.vocab_size() != ens.vocab_size() {
            return Err(DecodeError::Mismatch(format!("student vocabulary {} vs {}", s.vocab_size(), ens.vocab_size())).into());
        }
    }
    let per_sentence: Vec<Sums> = sources
        .par_iter()
        .map(|src| -> Result<Sums> {
            let mut sums = Sums::default();
            for t in teachers {
                let path = greedy(t, src, config)?;
                let probs = path_probs(t, src, &path.tokens)?;
                sums.teacher.0 += probs.iter().sum::<f64>();
                sums.teacher.1 += probs.len();
                if let Some(s) = student {
                    let probs = path_probs(s, src, &path.tokens)?;
                    sums.student.0 += probs.iter().sum::<f64>();
                    sums.student.1 += probs.len();
                }
            }
            let path = greedy(&ens, src, config)?;
            let banned = ens.banned();
            let (mut state, mut lp) = ens.begin(src)?;
            for (j, &tok) in path.tokens.iter().enumerate().skip(1) {
                let best = lp
                    .iter()
                    .enumerate()
                    .filter(|(v, _)| !banned.contains(v))
                    .map(|(_, &x)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                sums.ensemble.0 += best.exp();
                sums.ensemble.1 += 1;
                if j + 1 < path.tokens.len() {
                    let (s, l) = ens.advance(&state, tok)?;
                    state = s;
                    lp = l;
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut total = Sums::default();
    for s in &per_sentence {
        total.teacher.0 += s.teacher.0;
        total.teacher.1 += s.teacher.1;
        total.ensemble.0 += s.ensemble.0;
        total.ensemble.1 += s.ensemble.1;
        total.student.0 += s.student.0;
        total.student.1 += s.student.1;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(ConfidenceStats {
        teacher_self: mean(total.teacher),
        teacher_ensemble_max: mean(total.ensemble),
        student_on_teachers: student.map(|_| mean(total.student)),
    })
}

/// `(mean of logs, log of mean)`; the first never exceeds the second.
pub fn jensen_gap(probs: &[f64]) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(MetricsError::Probability(bad));
    }
    let n = probs.len() as f64;
    let lhs = probs.iter().map(|p| p.ln()).sum::<f64>() / n;
    let rhs = (probs.iter().sum::<f64>() / n).ln();
    Ok((lhs, rhs))
}

/// Links of the chain `student_on_teachers ≤ teacher_ensemble_max ≤ teacher_self ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    StudentAboveEnsemble,
    EnsembleAboveTeacher,
    TeacherAboveOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Holds,
    Broken(Link),
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Holds => "holds",
            Condition::Broken(Link::StudentAboveEnsemble) => "broken:student>ensemble",
            Condition::Broken(Link::EnsembleAboveTeacher) => "broken:ensemble>teacher",
            Condition::Broken(Link::TeacherAboveOne) => "broken:teacher>1",
        }
    }
}

/// Reports the first violated link, checking from the student side.
pub fn condition_check(stats: &ConfidenceStats) -> Condition {
    if let Some(s) = stats.student_on_teachers {
        if s > stats.teacher_ensemble_max {
            return Condition::Broken(Link::StudentAboveEnsemble);
        }
    }
    if stats.teacher_ensemble_max > stats.teacher_self {
        return Condition::Broken(Link::EnsembleAboveTeacher);
    }
    if stats.teacher_self > 1.0 {
        return Condition::Broken(Link::TeacherAboveOne);
    }
    Condition::Holds
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub config_hash: String,
}

pub fn metric_rows_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,split,value,config_hash\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{}", r.metric, r.split, r.value, r.config_hash);
    }
    out
}

/// GitHub-style markdown table.
pub fn markdown_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", headers.join(" | "));
    let _ = writeln!(out, "|{}|", headers.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;
    use crate::tokenizer::EOS;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    /// Independent recount: explicit n-gram lists, no hashing.
    fn oracle_bleu(cands: &[Vec<u8>], refs: &[Vec<u8>], smoothing: bool) -> f64 {
        let mut logs = Vec::new();
        let (c, r): (usize, usize) = (cands.iter().map(Vec::len).sum(), refs.iter().map(Vec::len).sum());
        for n in 1..=4 {
            let (mut m, mut t) = (0usize, 0usize);
            for (cand, refr) in cands.iter().zip(refs) {
                let cg: Vec<&[u8]> = if cand.len() >= n { cand.windows(n).collect() } else { vec![] };
                let mut rg: Vec<&[u8]> = if refr.len() >= n { refr.windows(n).collect() } else { vec![] };
                t += cg.len();
                for g in cg {
                    if let Some(pos) = rg.iter().position(|x| *x == g) {
                        rg.remove(pos);
                        m += 1;
                    }
                }
            }
            if t == 0 {
                continue;
            }
            let p = if smoothing && n > 1 { (m + 1) as f64 / (t + 1) as f64 } else { m as f64 / t as f64 };
            if p == 0.0 {
                return 0.0;
            }
            logs.push(p.ln());
        }
        if logs.is_empty() || c == 0 {
            return 0.0;
        }
        let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    }

    fn random_corpus(rng: &mut Rng) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
        let n = 1 + rng.below(6);
        let sent = |rng: &mut Rng| (0..1 + rng.below(8)).map(|_| rng.below(4) as u8).collect::<Vec<u8>>();
        let cands = (0..n).map(|_| sent(rng)).collect();
        let refs = (0..n).map(|_| sent(rng)).collect();
        (cands, refs)
    }

    #[test]
    fn identity_is_100() {
        let x = vec![words("a b c d e"), words("f g"), words("h")];
        assert_eq!(bleu(&x, &x, 4, false).unwrap().score, 100.0);
        assert_eq!(bleu(&x, &x, 4, true).unwrap().score, 100.0);
    }

    #[test]
    fn clipped_counts_example() {
        let b = bleu(&[words("the the the the the")], &[words("the cat sat on mat")], 4, false).unwrap();
        assert_eq!(b.precisions[0], 0.2);
        assert_eq!(b.matches[1], 0);
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let (c, r) = random_corpus(&mut rng);
            for smoothing in [false, true] {
                let got = bleu(&c, &r, 4, smoothing).unwrap().score;
                let want = oracle_bleu(&c, &r, smoothing);
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn brevity_penalty() {
        let b = bleu(&[words("a b")], &[words("a b c d")], 1, false).unwrap();
        assert!((b.brevity_penalty - (-1f64).exp()).abs() < 1e-15);
        assert!((b.score - 100.0 * (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_errors() {
        assert!(matches!(bleu::<String>(&[], &[], 4, false), Err(MetricsError::Empty)));
        assert!(matches!(bleu(&[words("a")], &[], 4, false), Err(MetricsError::LengthMismatch(1, 0))));
        assert!(matches!(pairwise_bleu(&[vec![words("a")]], false), Err(MetricsError::TooFewSets(1))));
    }

    #[test]
    fn pairwise_matches_pair_by_pair_average() {
        let base = vec![words("a b c d e"), words("f g h i"), words("j k l m n o")];
        let identical = vec![base.clone(), base.clone(), base.clone()];
        assert_eq!(pairwise_bleu(&identical, false).unwrap(), 100.0);
        let mut perturbed = base.clone();
        for s in &mut perturbed {
            s[1] = "zz".into();
        }
        let sets = vec![base.clone(), perturbed.clone(), base.clone()];
        let got = pairwise_bleu(&sets, false).unwrap();
        let mut want = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    want += bleu(&sets[a], &sets[b], 4, false).unwrap().score;
                }
            }
        }
        assert!((got - want / 6.0).abs() < 1e-12);
        assert!(got < 100.0);
        let permuted = vec![perturbed, base.clone(), base];
        assert!((pairwise_bleu(&permuted, false).unwrap() - got).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bleu_invariant_under_renaming(seed in 0u64..10_000, shift in 1u8..50) {
            let mut rng = Rng::new(seed);
            let (c, r) = random_corpus(&mut rng);
            let rename = |x: &Vec<Vec<u8>>| x.iter().map(|s| s.iter().map(|t| t.wrapping_mul(3).wrapping_add(shift)).collect()).collect::<Vec<Vec<u8>>>();
            let a = bleu(&c, &r, 4, true).unwrap().score;
            let b = bleu(&rename(&c), &rename(&r), 4, true).unwrap().score;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn jensen_holds(probs in proptest::collection::vec(1e-6f64..=1.0, 1..20)) {
            let (lhs, rhs) = jensen_gap(&probs).unwrap();
            prop_assert!(lhs <= rhs + 1e-15);
        }
    }

    #[test]
    fn jensen_examples() {
        let (lhs, rhs) = jensen_gap(&[0.5, 0.25]).unwrap();
        assert_eq!(format!("{lhs:.4}"), "-1.0397");
        assert_eq!(format!("{rhs:.4}"), "-0.9808");
        let (lhs, rhs) = jensen_gap(&[0.3; 7]).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(matches!(jensen_gap(&[0.5, 0.0]), Err(MetricsError::Probability(_))));
    }

    fn stats(student: f64, ens: f64, teacher: f64) -> ConfidenceStats {
        ConfidenceStats {
            teacher_self: teacher,
            teacher_ensemble_max: ens,
            student_on_teachers: Some(student),
        }
    }

    #[test]
    fn condition_examples() {
        assert_eq!(condition_check(&stats(0.74, 0.75, 0.76)), Condition::Holds);
        assert_eq!(condition_check(&stats(0.82, 0.75, 0.76)), Condition::Broken(Link::StudentAboveEnsemble));
        assert_eq!(condition_check(&stats(1.0, 1.0, 1.0)), Condition::Holds);
        assert_eq!(condition_check(&stats(0.5, 0.8, 0.7)), Condition::Broken(Link::EnsembleAboveTeacher));
    }

    #[test]
    fn csv_and_markdown() {
        let rows = vec![MetricRow {
            metric: "bleu".into(),
            split: "test".into(),
            value: 12.5,
            config_hash: "abc".into(),
        }];
        assert_eq!(metric_rows_csv(&rows), "metric,split,value,config_hash\nbleu,test,12.500000,abc\n");
        let md = markdown_table(&["a", "b"], &[vec!["1".into(), "2".into()]]);
        assert_eq!(md, "| a | b |\n|---|---|\n| 1 | 2 |\n");
    }

    /// Puts probability `p` on `favourite(position)` and spreads the rest evenly.
    struct Peaked {
        p: f64,
        offset: usize,
    }

    impl StepScorer for Peaked {
        type State = usize;

        fn vocab_size(&self) -> usize {
            4
        }

        fn begin(&self, _: &[TokenId]) -> crate::decode::Result<(usize, Vec<f64>)> {
            Ok((0, self.row(0)))
        }

        fn advance(&self, &pos: &usize, _: TokenId) -> crate::decode::Result<(usize, Vec<f64>)> {
            Ok((pos + 1, self.row(pos + 1)))
        }
    }

    impl Peaked {
        fn row(&self, pos: usize) -> Vec<f64> {
            let fav = if pos >= 2 { EOS } else { (self.offset + pos) % 2 * 3 };
            (0..4).map(|v| if v == fav { self.p } else { (1.0 - self.p) / 3.0 }.ln()).collect()
        }
    }

    #[test]
    fn deterministic_identical_teachers_score_one() {
        let teachers = [Peaked { p: 1.0, offset: 0 }, Peaked { p: 1.0, offset: 0 }];
        let cfg = DecodeConfig::greedy();
        let s = confidence_stats(&teachers, Some(&Peaked { p: 1.0, offset: 0 }), &[vec![3], vec![3, 3]], &cfg).unwrap();
        assert_eq!(s, stats(1.0, 1.0, 1.0));
        assert_eq!(condition_check(&s), Condition::Holds);
    }

    #[test]
    fn disagreeing_teachers_lower_the_ensemble_term() {
        let teachers = [Peaked { p: 0.7, offset: 0 }, Peaked { p: 0.7, offset: 1 }];
        let cfg = DecodeConfig::greedy();
        let s = confidence_stats::<_, Peaked>(&teachers, None, &[vec![3]], &cfg).unwrap();
        // Each teacher: 0.7 on its own three greedy tokens.
        assert!((s.teacher_self - 0.7).abs() < 1e-12);
        // Positions 0 and 1: max of mean(0.7, 0.1) = 0.4; position 2: both put 0.7 on EOS.
        assert!((s.teacher_ensemble_max - (0.4 + 0.4 + 0.7) / 3.0).abs() < 1e-12);
        assert_eq!(s.student_on_teachers, None);
    }
}
