//! Experiment runner: synthetic tasks, declarative configs, arm execution and
//! report emission.

pub mod report;
pub mod toy;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusError, ParallelCorpus, Sentence};
use crate::decode::{translate_corpus, DecodeConfig, DecodeError, Ensemble, StepScorer};
use crate::diversify::{self, Data, DiverseOutcome, DiversifyConfig, DiversifyError, InitMode};
use crate::metrics::{self, confidence_stats, ConfidenceStats, MetricsError};
use crate::model::{encode_corpus, ModelError, TrainLog, TranslationModel};
use crate::numerics::rng::derive_seed;
use crate::tokenizer::{build_vocab, learn_bpe, BpeModel, TokenizerError, Vocabulary};

pub use report::{Report, ReportRow};
use toy::{gen_toy, ToyTaskSpec};

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("override {0:?}: {1}")]
    Override(String, String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diversify(#[from] DiversifyError),
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

pub type Result<T, E = ExpError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Diversified,
    ForwardOnly,
    BackwardOnly,
    Ensemble,
    FixedInit,
    BackTranslation,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::Baseline,
        Arm::Diversified,
        Arm::ForwardOnly,
        Arm::BackwardOnly,
        Arm::Ensemble,
        Arm::FixedInit,
        Arm::BackTranslation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Diversified => "diversified",
            Arm::ForwardOnly => "forward_only",
            Arm::BackwardOnly => "backward_only",
            Arm::Ensemble => "ensemble",
            Arm::FixedInit => "fixed_init",
            Arm::BackTranslation => "back_translation",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSource {
    Toy {
        #[serde(default)]
        spec: ToyTaskSpec,
        n_train: usize,
        n_valid: usize,
        n_test: usize,
        /// Extra target-side sentences for the back-translation arm.
        #[serde(default)]
        n_monolingual: usize,
    },
    /// Whitespace-tokenized text files, one sentence per line.
    Files {
        train_source: PathBuf,
        train_target: PathBuf,
        valid_source: PathBuf,
        valid_target: PathBuf,
        test_source: PathBuf,
        test_target: PathBuf,
        #[serde(default)]
        monolingual_target: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub merges: usize,
    pub shared: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { merges: 400, shared: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    pub tokenizer: TokenizerConfig,
    /// Teacher and student settings; `base_seed` is replaced by each run seed.
    pub diversify: DiversifyConfig,
    pub eval_decode: DecodeConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    /// Validation sentences used for the confidence statistics; 0 disables them.
    pub confidence_sentences: usize,
    /// Write measured wall-clock seconds into report.csv (breaks byte-identical reruns).
    pub record_wallclock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut diversify = DiversifyConfig::default();
        let model = crate::model::ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_positions: 32,
            tied_embeddings: true,
        };
        let train = crate::model::TrainConfig {
            steps: 600,
            batch_tokens: 800,
            eval_interval: 100,
            lr: 2e-2,
            warmup: 100,
            ..crate::model::TrainConfig::default()
        };
        diversify.teacher = model.clone();
        diversify.teacher_train = train.clone();
        diversify.student = model;
        diversify.student_train = train;
        diversify.keep_teachers = true;
        ExperimentConfig {
            task: TaskSource::Toy {
                spec: ToyTaskSpec::default(),
                n_train: 2000,
                n_valid: 200,
                n_test: 500,
                n_monolingual: 1000,
            },
            tokenizer: TokenizerConfig::default(),
            diversify,
            eval_decode: DecodeConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            arms: vec![Arm::Baseline, Arm::Diversified],
            confidence_sentences: 100,
            record_wallclock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(ExpError::Config("at least one arm is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExpError::Config("at least one seed is required".into()));
        }
        let mut arms = self.arms.clone();
        arms.sort();
        arms.dedup();
        if arms.len() != self.arms.len() {
            return Err(ExpError::Config("arms must be distinct".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(ExpError::Config("seeds must be distinct".into()));
        }
        self.diversify.validate()?;
        if let TaskSource::Toy { spec, n_train, n_valid, n_test, .. } = &self.task {
            spec.validate()?;
            if *n_train == 0 || *n_valid == 0 || *n_test == 0 {
                return Err(ExpError::Config("toy splits must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies `key.path=value` overrides; values parse as JSON, else as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        apply_overrides(&mut value, overrides)?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact resolved JSON.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn ensemble_size(&self) -> usize {
        2 * self.diversify.k + 1
    }
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| ExpError::Override(item.clone(), "expected key.path=value".into()))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *value;
        for key in path.split('.') {
            node = match node {
                Value::Object(map) => map
                    .get_mut(key)
                    .ok_or_else(|| ExpError::Override(item.clone(), format!("unknown key {key:?}")))?,
                Value::Array(items) => {
                    let i: usize = key
                        .parse()
                        .map_err(|_| ExpError::Override(item.clone(), format!("{key:?} is not an index")))?;
                    let len = items.len();
                    items
                        .get_mut(i)
                        .ok_or_else(|| ExpError::Override(item.clone(), format!("index {i} out of range {len}")))?
                }
                _ => return Err(ExpError::Override(item.clone(), format!("cannot descend into {key:?}"))),
            };
        }
        *node = parsed;
    }
    Ok(())
}

/// The tokenized task shared by every arm and seed.
pub struct PreparedTask {
    pub bpe: BpeModel,
    pub vocab: Arc<Vocabulary>,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test_sources: Vec<Sentence>,
    /// Word-level references.
    pub test_references: Vec<Sentence>,
    pub monolingual_targets: Vec<Sentence>,
}

impl PreparedTask {
    pub fn data(&self) -> Data<'_> {
        Data {
            train: &self.train,
            valid: &self.valid,
            vocab: Arc::clone(&self.vocab),
        }
    }
}

fn load_files(src: &Path, tgt: &Path) -> Result<ParallelCorpus> {
    Ok(corpus::load_parallel(src, tgt, corpus::Provenance::original(), corpus::LoadOptions::default())?.corpus)
}

pub fn prepare_task(config: &ExperimentConfig) -> Result<PreparedTask> {
    let (train, valid, test, mono) = match &config.task {
        TaskSource::Toy {
            spec,
            n_train,
            n_valid,
            n_test,
            n_monolingual,
        } => {
            let splits = gen_toy(spec, *n_train, *n_valid, *n_test)?;
            let mono = if *n_monolingual > 0 {
                let extra = ToyTaskSpec {
                    seed: derive_seed(&[spec.seed, 0x4d4f4e4f]),
                    dictionary: Some(spec.resolved_dictionary()?),
                    ..spec.clone()
                };
                gen_toy(&extra, *n_monolingual, 0, 0)?.train.targets()
            } else {
                Vec::new()
            };
            (splits.train, splits.valid, splits.test, mono)
        }
        TaskSource::Files {
            train_source,
            train_target,
            valid_source,
            valid_target,
            test_source,
            test_target,
            monolingual_target,
        } => {
            let mono = match monolingual_target {
                Some(p) => corpus::load_monolingual(p)?,
                None => Vec::new(),
            };
            (
                load_files(train_source, train_target)?,
                load_files(valid_source, valid_target)?,
                load_files(test_source, test_target)?,
                mono,
            )
        }
    };
    let bpe = learn_bpe(&train, config.tokenizer.merges, config.tokenizer.shared)?;
    let vocab = Arc::new(build_vocab(&bpe, &train, crate::tokenizer::Sides::Shared));
    Ok(PreparedTask {
        train: bpe.apply_corpus(&train),
        valid: bpe.apply_corpus(&valid),
        test_sources: test.sources().iter().map(|s| bpe.apply(s)).collect(),
        test_references: test.targets(),
        monolingual_targets: mono.iter().map(|s| bpe.apply(s)).collect(),
        bpe,
        vocab,
    })
}

/// Corpus BLEU of `scorer` on the test split, after undoing BPE.
pub fn test_bleu<S: StepScorer>(scorer: &S, task: &PreparedTask, decode: &DecodeConfig) -> Result<f64> {
    let ids: Vec<Vec<usize>> = task.test_sources.iter().map(|s| task.vocab.encode(s)).collect();
    let hyps = translate_corpus(scorer, &ids, decode, 0)?;
    let words: Vec<Sentence> = hyps.iter().map(|h| task.bpe.decode(&task.vocab.decode(h.output()))).collect();
    Ok(metrics::bleu(&words, &task.test_references, 4, false)?.score)
}

fn valid_ppl(log: &TrainLog) -> Option<f64> {
    log.best_valid_ppl.or_else(|| log.final_valid_ppl())
}

#[derive(Default)]
struct ArmResult {
    test_bleu: f64,
    valid_ppl: Option<f64>,
    dup_rate: Option<f64>,
    confidence: Option<ConfidenceStats>,
    pairwise_bleu: Option<f64>,
}

/// Per-seed state reused across arms.
#[derive(Default)]
struct SeedCache {
    baseline: Option<TranslationModel>,
    diversified: Option<DiverseOutcome>,
}

struct SeedRunner<'a> {
    config: &'a ExperimentConfig,
    task: &'a PreparedTask,
    seed: u64,
    cache: SeedCache,
}

impl SeedRunner<'_> {
    fn div_config(&self) -> DiversifyConfig {
        DiversifyConfig {
            base_seed: self.seed,
            keep_teachers: true,
            ..self.config.diversify.clone()
        }
    }

    fn confidence(&self, teachers: &[TranslationModel], student: Option<&TranslationModel>) -> Result<Option<ConfidenceStats>> {
        let n = self.config.confidence_sentences.min(self.task.valid.len());
        if n == 0 || teachers.is_empty() {
            return Ok(None);
        }
        let sources: Vec<Vec<usize>> = self.task.valid.pairs[..n].iter().map(|p| self.task.vocab.encode(&p.source)).collect();
        Ok(Some(confidence_stats(teachers, student, &sources, &DecodeConfig::greedy())?))
    }

    fn baseline(&mut self) -> Result<(TranslationModel, TrainLog)> {
        let (model, log) = diversify::train_baseline(&self.task.data(), &self.div_config())?;
        self.cache.baseline = Some(model.clone());
        Ok((model, log))
    }

    fn diverse_result(&self, out: &DiverseOutcome) -> Result<ArmResult> {
        let last = out.rounds.last().expect("at least one round");
        let pairwise = if last.forward_outputs.len() > 1 {
            Some(metrics::pairwise_bleu(&last.forward_outputs, false)?)
        } else {
            None
        };
        Ok(ArmResult {
            test_bleu: test_bleu(&out.student, self.task, &self.config.eval_decode)?,
            valid_ppl: valid_ppl(&out.student_log),
            dup_rate: Some(last.stats.duplicate_rate),
            confidence: self.confidence(&last.forward_models, Some(&out.student))?,
            pairwise_bleu: pairwise,
        })
    }

    fn run(&mut self, arm: Arm) -> Result<ArmResult> {
        let data = self.task.data();
        match arm {
            Arm::Baseline => {
                let (model, log) = self.baseline()?;
                Ok(ArmResult {
                    test_bleu: test_bleu(&model, self.task, &self.config.eval_decode)?,
                    valid_ppl: valid_ppl(&log),
                    ..ArmResult::default()
                })
            }
            Arm::Diversified => {
                let out = diversify::data_diverse(&data, &self.div_config())?;
                let res = self.diverse_result(&out)?;
                self.cache.diversified = Some(out);
                Ok(res)
            }
            Arm::ForwardOnly | Arm::BackwardOnly => {
                let cfg = DiversifyConfig {
                    direction_mode: if arm == Arm::ForwardOnly {
                        diversify::DirectionMode::ForwardOnly
                    } else {
                        diversify::DirectionMode::BackwardOnly
                    },
                    ..self.div_config()
                };
                self.diverse_result(&diversify::data_diverse(&data, &cfg)?)
            }
            Arm::FixedInit => {
                let cfg = DiversifyConfig {
                    k: 1,
                    init_mode: InitMode::FixedSeed(derive_seed(&[self.seed, 0x46495845])),
                    ..self.div_config()
                };
                self.diverse_result(&diversify::data_diverse(&data, &cfg)?)
            }
            Arm::Ensemble => {
                let base = match self.cache.baseline.clone() {
                    Some(m) => m,
                    None => self.baseline()?.0,
                };
                let extra: Vec<TranslationModel> = (1..self.config.ensemble_size())
                    .into_par_iter()
                    .map(|m| {
                        let cfg = DiversifyConfig {
                            base_seed: derive_seed(&[self.seed, 0x454e53, m as u64]),
                            ..self.div_config()
                        };
                        diversify::train_baseline(&data, &cfg).map(|(model, _)| model)
                    })
                    .collect::<Result<_, _>>()?;
                let mut members = vec![base];
                members.extend(extra);
                let ens = Ensemble::new(&members)?;
                Ok(ArmResult {
                    test_bleu: test_bleu(&ens, self.task, &self.config.eval_decode)?,
                    confidence: self.confidence(&members, None)?,
                    ..ArmResult::default()
                })
            }
            Arm::BackTranslation => {
                if self.task.monolingual_targets.is_empty() {
                    return Err(ExpError::Config("back_translation needs monolingual target data".into()));
                }
                let cfg = self.div_config();
                let out = match self.cache.diversified.take() {
                    Some(o) => o,
                    None => diversify::data_diverse(&data, &cfg)?,
                };
                let backward = &out.rounds.last().expect("at least one round").backward_models;
                let augmented = diversify::augment_with_monolingual(
                    out.final_corpus(),
                    &self.task.monolingual_targets,
                    backward,
                    &cfg.generation,
                    derive_seed(&[self.seed, 0x4254]),
                )?;
                let stats = corpus::stats(&augmented);
                let mut tc = cfg.student_train.clone();
                if cfg.scale_student_steps {
                    tc.steps = (tc.steps as f64 * augmented.len() as f64 / self.task.train.len() as f64).round() as usize;
                }
                let (init, train_seed) = diversify::student_seeds(cfg.base_seed, cfg.init_mode);
                let model = TranslationModel::init(cfg.student.clone(), Arc::clone(&self.task.vocab), init, crate::model::Direction::SourceToTarget)?;
                let (student, log) = crate::model::train(
                    model,
                    &encode_corpus(&augmented, &self.task.vocab),
                    &encode_corpus(&self.task.valid, &self.task.vocab),
                    &tc,
                    train_seed,
                )?;
                self.cache.diversified = Some(out);
                Ok(ArmResult {
                    test_bleu: test_bleu(&student, self.task, &self.config.eval_decode)?,
                    valid_ppl: valid_ppl(&log),
                    dup_rate: Some(stats.duplicate_rate),
                    ..ArmResult::default()
                })
            }
        }
    }
}

/// Runs every configured arm for every seed. Arms run in a fixed order per
/// seed (baseline first, so the ensemble can reuse it); a failing arm yields
/// an error row and the remaining arms still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let task = prepare_task(config)?;
    run_prepared(config, &task)
}

pub fn run_prepared(config: &ExperimentConfig, task: &PreparedTask) -> Result<Report> {
    let hash = config.hash();
    let mut order = config.arms.clone();
    order.sort();
    let per_seed: Vec<Vec<ReportRow>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut runner = SeedRunner {
                config,
                task,
                seed,
                cache: SeedCache::default(),
            };
            let mut rows: Vec<ReportRow> = order
                .iter()
                .map(|&arm| {
                    let start = Instant::now();
                    let result = runner.run(arm);
                    let elapsed = start.elapsed().as_secs_f64();
                    ReportRow::from_result(arm, seed, result, elapsed, &hash)
                })
                .collect();
            rows.sort_by_key(|r| config.arms.iter().position(|a| a.as_str() == r.arm));
            rows
        })
        .collect();
    let mut rows: Vec<ReportRow> = Vec::with_capacity(config.arms.len() * config.seeds.len());
    for arm in &config.arms {
        for seed_rows in &per_seed {
            rows.extend(seed_rows.iter().filter(|r| r.arm == arm.as_str()).cloned());
        }
    }
    Ok(Report {
        config_hash: hash,
        record_wallclock: config.record_wallclock,
        rows,
    })
}

impl ReportRow {
    fn from_result(arm: Arm, seed: u64, result: Result<ArmResult>, wallclock_s: f64, hash: &str) -> Self {
        let mut row = ReportRow {
            arm: arm.as_str().to_string(),
            seed,
            wallclock_s,
            config_hash: hash.to_string(),
            ..ReportRow::default()
        };
        match result {
            Ok(r) => {
                row.test_bleu = Some(r.test_bleu);
                row.valid_ppl = r.valid_ppl;
                row.dup_rate = r.dup_rate;
                if let Some(c) = r.confidence {
                    row.teacher_self = Some(c.teacher_self);
                    row.teacher_ensemble_max = Some(c.teacher_ensemble_max);
                    row.student_on_teachers = c.student_on_teachers;
                }
                row.pairwise_bleu = r.pairwise_bleu;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    N,
}

/// One experiment per value of `k` or `n_rounds`.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[usize]) -> Result<Vec<(usize, Report)>> {
    if values.is_empty() {
        return Err(ExpError::Config("sweep needs at least one value".into()));
    }
    config.validate()?;
    let task = prepare_task(config)?;
    values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            match param {
                SweepParam::K => c.diversify.k = v,
                SweepParam::N => c.diversify.n_rounds = v,
            }
            c.validate()?;
            Ok((v, run_prepared(&c, &task)?))
        })
        .collect()
}

/// Human-readable plan for `--dry-run`.
pub fn plan(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let k = config.diversify.k;
    let n = config.diversify.n_rounds;
    let mut out = format!("config_hash {}\n", config.hash());
    for arm in &config.arms {
        let models = match arm {
            Arm::Baseline => 1,
            Arm::Diversified | Arm::BackTranslation => 2 * k * n + 1,
            Arm::ForwardOnly | Arm::BackwardOnly => k * n + 1,
            Arm::FixedInit => 2 * n + 1,
            Arm::Ensemble => 2 * k,
        };
        out.push_str(&format!("arm {} seeds {:?} models_per_seed {}\n", arm.as_str(), config.seeds, models));
    }
    out.push_str(&format!("rows {}\n", config.arms.len() * config.seeds.len()));
    Ok(out)
}
