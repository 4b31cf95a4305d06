//! Multi-round, multi-teacher data diversification.
//!
//! Each round trains `k` forward and `k` backward teachers on the current
//! corpus, has every teacher re-translate the original source (forward) or
//! original target (backward) side, and merges the results into the next
//! corpus. A student trained on the final corpus is the output model.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, CorpusStats, ParallelCorpus, Provenance, ProvenanceKind, Sentence, SentencePair};
use crate::decode::{translate_corpus, DecodeConfig, DecodeError};
use crate::model::{encode_corpus, train, Direction, ModelConfig, ModelError, TrainConfig, TrainLog, TranslationModel};
use crate::numerics::rng::derive_seed;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum DiversifyError {
    #[error("teacher (round {round}, {direction}, index {index}): {source}")]
    Teacher {
        round: usize,
        direction: &'static str,
        index: usize,
        source: ModelError,
    },
    #[error("student: {0}")]
    Student(ModelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid diversify config: {0}")]
    Config(String),
}

pub type Result<T, E = DiversifyError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Bidirectional,
    ForwardOnly,
    BackwardOnly,
}

impl DirectionMode {
    fn forward(self) -> bool {
        self != DirectionMode::BackwardOnly
    }

    fn backward(self) -> bool {
        self != DirectionMode::ForwardOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every model gets its own initialization seed.
    RandomSeeds,
    /// Every model, teachers and student alike, starts from the same parameters.
    FixedSeed(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiversifyConfig {
    pub k: usize,
    pub n_rounds: usize,
    pub direction_mode: DirectionMode,
    pub init_mode: InitMode,
    pub teacher: ModelConfig,
    pub teacher_train: TrainConfig,
    pub student: ModelConfig,
    pub student_train: TrainConfig,
    /// Multiply the student's step budget by `|D_N| / |D_0|`.
    pub scale_student_steps: bool,
    pub generation: DecodeConfig,
    pub base_seed: u64,
    pub keep_teachers: bool,
}

impl Default for DiversifyConfig {
    fn default() -> Self {
        DiversifyConfig {
            k: 3,
            n_rounds: 1,
            direction_mode: DirectionMode::Bidirectional,
            init_mode: InitMode::RandomSeeds,
            teacher: ModelConfig::default(),
            teacher_train: TrainConfig::default(),
            student: ModelConfig::default(),
            student_train: TrainConfig::default(),
            scale_student_steps: true,
            generation: DecodeConfig::default(),
            base_seed: 1,
            keep_teachers: false,
        }
    }
}

impl DiversifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DiversifyError::Config("k must be positive".into()));
        }
        if self.n_rounds == 0 {
            return Err(DiversifyError::Config("n_rounds must be positive".into()));
        }
        self.teacher.validate()?;
        self.student.validate()?;
        Ok(())
    }
}

const STUDENT_TAG: u64 = 0x5354_5544;

/// `(init_seed, train_seed)` of teacher `index` in `round` and `direction`.
pub fn teacher_seeds(cfg: &DiversifyConfig, round: usize, direction: Direction, index: usize) -> (u64, u64) {
    let own = derive_seed(&[cfg.base_seed, round as u64, direction.code(), index as u64]);
    let init = match cfg.init_mode {
        InitMode::RandomSeeds => own,
        InitMode::FixedSeed(s) => s,
    };
    (init, derive_seed(&[own, 1]))
}

/// `(init_seed, train_seed)` of the student; the baseline uses the same pair.
pub fn student_seeds(base_seed: u64, init_mode: InitMode) -> (u64, u64) {
    let own = derive_seed(&[base_seed, STUDENT_TAG]);
    let init = match init_mode {
        InitMode::RandomSeeds => own,
        InitMode::FixedSeed(s) => s,
    };
    (init, derive_seed(&[own, 1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherInfo {
    pub round: usize,
    pub direction: Direction,
    pub index: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    pub valid_ppl: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RoundArtifacts {
    pub round: usize,
    pub teachers: Vec<TeacherInfo>,
    /// Trained teachers, kept only with `keep_teachers`.
    pub forward_models: Vec<TranslationModel>,
    pub backward_models: Vec<TranslationModel>,
    /// Per forward teacher, its translation of the original source side.
    pub forward_outputs: Vec<Vec<Sentence>>,
    pub backward_outputs: Vec<Vec<Sentence>>,
    /// Synthetic pairs dropped because a translation came out empty.
    pub dropped_empty: usize,
    pub corpus: ParallelCorpus,
    pub stats: CorpusStats,
}

#[derive(Clone, Debug)]
pub struct DiverseOutcome {
    pub student: TranslationModel,
    pub student_log: TrainLog,
    pub student_steps: usize,
    pub rounds: Vec<RoundArtifacts>,
}

impl DiverseOutcome {
    pub fn final_corpus(&self) -> &ParallelCorpus {
        &self.rounds.last().expect("at least one round").corpus
    }
}

/// Train and valid data shared by a pipeline run.
pub struct Data<'a> {
    pub train: &'a ParallelCorpus,
    pub valid: &'a ParallelCorpus,
    pub vocab: Arc<Vocabulary>,
}

fn fit(
    config: &ModelConfig,
    tc: &TrainConfig,
    vocab: &Arc<Vocabulary>,
    direction: Direction,
    (init_seed, train_seed): (u64, u64),
    tr: &ParallelCorpus,
    va: &ParallelCorpus,
) -> Result<(TranslationModel, TrainLog), ModelError> {
    let model = TranslationModel::init(config.clone(), Arc::clone(vocab), init_seed, direction)?;
    let train_ex = encode_corpus(tr, vocab);
    let valid_ex = encode_corpus(va, vocab);
    train(model, &train_ex, &valid_ex, tc, train_seed)
}

/// Decodes `sentences` with `model` and maps the ids back to tokens.
pub fn translate_sentences(model: &TranslationModel, sentences: &[Sentence], config: &DecodeConfig, seed: u64) -> Result<Vec<Sentence>> {
    let ids: Vec<Vec<usize>> = sentences.iter().map(|s| model.vocab.encode(s)).collect();
    let hyps = translate_corpus(model, &ids, config, seed)?;
    Ok(hyps.iter().map(|h| model.vocab.decode(h.output())).collect())
}

struct Trained {
    info: TeacherInfo,
    model: TranslationModel,
    outputs: Vec<Sentence>,
}

/// The single-model comparator: the student's seeds and config trained on `D` alone.
pub fn train_baseline(data: &Data, cfg: &DiversifyConfig) -> Result<(TranslationModel, TrainLog)> {
    fit(
        &cfg.student,
        &cfg.student_train,
        &data.vocab,
        Direction::SourceToTarget,
        student_seeds(cfg.base_seed, cfg.init_mode),
        data.train,
        data.valid,
    )
    .map_err(DiversifyError::Student)
}

pub fn data_diverse(data: &Data, cfg: &DiversifyConfig) -> Result<DiverseOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    let sources = data.train.sources();
    let targets = data.train.targets();
    let valid_swapped = data.valid.swapped();
    let mut current = data.train.clone();
    let mut rounds = Vec::with_capacity(cfg.n_rounds);

    for round in 1..=cfg.n_rounds {
        let swapped = current.swapped();
        let mut jobs: Vec<(Direction, usize)> = Vec::new();
        if cfg.direction_mode.forward() {
            jobs.extend((0..cfg.k).map(|i| (Direction::SourceToTarget, i)));
        }
        if cfg.direction_mode.backward() {
            jobs.extend((0..cfg.k).map(|i| (Direction::TargetToSource, i)));
        }
        let trained: Vec<Trained> = jobs
            .par_iter()
            .map(|&(direction, index)| -> Result<Trained> {
                let seeds = teacher_seeds(cfg, round, direction, index);
                let (tr, va, side) = match direction {
                    Direction::SourceToTarget => (&current, data.valid, &sources),
                    Direction::TargetToSource => (&swapped, &valid_swapped, &targets),
                };
                let (model, log) =
                    fit(&cfg.teacher, &cfg.teacher_train, &data.vocab, direction, seeds, tr, va).map_err(|source| {
                        DiversifyError::Teacher {
                            round,
                            direction: direction.as_str(),
                            index,
                            source,
                        }
                    })?;
                let outputs = translate_sentences(&model, side, &cfg.generation, seeds.1)?;
                Ok(Trained {
                    info: TeacherInfo {
                        round,
                        direction,
                        index,
                        init_seed: seeds.0,
                        train_seed: seeds.1,
                        valid_ppl: log.best_valid_ppl.or_else(|| log.final_valid_ppl()),
                    },
                    model,
                    outputs,
                })
            })
            .collect::<Result<_>>()?;

        let mut synthetic = Vec::with_capacity(trained.len());
        let mut dropped_empty = 0;
        for t in &trained {
            let (kind, pairs): (ProvenanceKind, Vec<SentencePair>) = match t.info.direction {
                Direction::SourceToTarget => (
                    ProvenanceKind::SyntheticForward,
                    sources
                        .iter()
                        .zip(&t.outputs)
                        .map(|(s, y)| SentencePair::new(s.clone(), y.clone(), Provenance::original()))
                        .collect(),
                ),
                Direction::TargetToSource => (
                    ProvenanceKind::SyntheticBackward,
                    t.outputs
                        .iter()
                        .zip(&targets)
                        .map(|(x, tg)| SentencePair::new(x.clone(), tg.clone(), Provenance::original()))
                        .collect(),
                ),
            };
            let provenance = Provenance::synthetic(kind, round, t.info.index);
            let before = pairs.len();
            let pairs: Vec<SentencePair> = pairs
                .into_iter()
                .filter(|p| !p.source.is_empty() && !p.target.is_empty())
                .map(|p| SentencePair { provenance, ..p })
                .collect();
            dropped_empty += before - pairs.len();
            synthetic.push(ParallelCorpus::new(format!("{}.r{round}.{}{}", data.train.name, t.info.direction.as_str(), t.info.index), pairs));
        }
        let mut parts: Vec<&ParallelCorpus> = vec![&current];
        parts.extend(synthetic.iter());
        let merged = corpus::merge_dedup(&parts)?;
        let stats = corpus::stats(&merged);

        let mut art = RoundArtifacts {
            round,
            teachers: trained.iter().map(|t| t.info.clone()).collect(),
            forward_models: Vec::new(),
            backward_models: Vec::new(),
            forward_outputs: Vec::new(),
            backward_outputs: Vec::new(),
            dropped_empty,
            corpus: merged.clone(),
            stats,
        };
        for t in trained {
            match t.info.direction {
                Direction::SourceToTarget => {
                    art.forward_outputs.push(t.outputs);
                    if cfg.keep_teachers {
                        art.forward_models.push(t.model);
                    }
                }
                Direction::TargetToSource => {
                    art.backward_outputs.push(t.outputs);
                    if cfg.keep_teachers {
                        art.backward_models.push(t.model);
                    }
                }
            }
        }
        rounds.push(art);
        current = merged;
    }

    let mut student_train = cfg.student_train.clone();
    if cfg.scale_student_steps {
        let ratio = current.len() as f64 / data.train.len() as f64;
        student_train.steps = (cfg.student_train.steps as f64 * ratio).round() as usize;
    }
    let (student, student_log) = fit(
        &cfg.student,
        &student_train,
        &data.vocab,
        Direction::SourceToTarget,
        student_seeds(cfg.base_seed, cfg.init_mode),
        &current,
        data.valid,
    )
    .map_err(DiversifyError::Student)?;
    Ok(DiverseOutcome {
        student,
        student_log,
        student_steps: student_train.steps,
        rounds,
    })
}

/// Forward-only and backward-only variants of [`data_diverse`].
pub fn direction_ablation(data: &Data, cfg: &DiversifyConfig) -> Result<(DiverseOutcome, DiverseOutcome)> {
    let fwd = DiversifyConfig {
        direction_mode: DirectionMode::ForwardOnly,
        ..cfg.clone()
    };
    let bwd = DiversifyConfig {
        direction_mode: DirectionMode::BackwardOnly,
        ..cfg.clone()
    };
    Ok((data_diverse(data, &fwd)?, data_diverse(data, &bwd)?))
}

/// Back-translates monolingual target text with every backward teacher and
/// merges the pairs into `diversified`.
pub fn augment_with_monolingual(
    diversified: &ParallelCorpus,
    mono_targets: &[Sentence],
    backward_teachers: &[TranslationModel],
    generation: &DecodeConfig,
    seed: u64,
) -> Result<ParallelCorpus> {
    let mut parts = Vec::with_capacity(backward_teachers.len());
    if let Some(first) = backward_teachers.first() {
        for t in backward_teachers {
            if t.direction != Direction::TargetToSource {
                return Err(DiversifyError::Config("monolingual augmentation needs target-to-source teachers".into()));
            }
            if *t.vocab != *first.vocab {
                return Err(DecodeError::Mismatch("teacher vocabularies differ".into()).into());
            }
        }
    }
    for (i, t) in backward_teachers.iter().enumerate() {
        let outputs = translate_sentences(t, mono_targets, generation, derive_seed(&[seed, i as u64]))?;
        let provenance = Provenance::synthetic(ProvenanceKind::MonolingualBackward, 1, i);
        let pairs = outputs
            .into_iter()
            .zip(mono_targets)
            .filter(|(x, y)| !x.is_empty() && !y.is_empty())
            .map(|(x, y)| SentencePair::new(x, y.clone(), provenance))
            .collect();
        parts.push(ParallelCorpus::new(format!("mono.{i}"), pairs));
    }
    let mut all: Vec<&ParallelCorpus> = vec![diversified];
    all.extend(parts.iter());
    Ok(corpus::merge_dedup(&all)?)
}

/// JSON-serializable summary of a pipeline run.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: DiversifyConfig,
    pub teachers: Vec<TeacherInfo>,
    pub rounds: Vec<RoundSummary>,
    pub student_steps: usize,
    pub student_valid_ppl: Option<f64>,
    pub student_checkpoint: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub stats: CorpusStats,
    pub dropped_empty: usize,
}

impl RunManifest {
    pub fn new(cfg: &DiversifyConfig, outcome: &DiverseOutcome, student_checkpoint: Option<String>) -> Self {
        RunManifest {
            config: cfg.clone(),
            teachers: outcome.rounds.iter().flat_map(|r| r.teachers.iter().cloned()).collect(),
            rounds: outcome
                .rounds
                .iter()
                .map(|r| RoundSummary {
                    round: r.round,
                    stats: r.stats.clone(),
                    dropped_empty: r.dropped_empty,
                })
                .collect(),
            student_steps: outcome.student_steps,
            student_valid_ppl: outcome.student_log.best_valid_ppl.or_else(|| outcome.student_log.final_valid_ppl()),
            student_checkpoint,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
