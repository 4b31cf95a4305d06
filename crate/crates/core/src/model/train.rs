use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::numerics::rng::{derive_seed, Rng};
use crate::numerics::Parameters;
use crate::tokenizer::Vocabulary;

use super::checkpoint::{average_checkpoints, Checkpoint};
use super::optim::{adam_step, LrSchedule, OptimizerState};
use super::transformer::{Example, TranslationModel};
use super::{ModelError, Result};

/// Which parameters `train` hands back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest validation perplexity among evaluated checkpoints.
    BestValid,
    /// Mean of the last `keep_last` evaluated checkpoints.
    AverageLast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_tokens: usize,
    pub eval_interval: usize,
    pub keep_last: usize,
    pub lr: f64,
    pub warmup: usize,
    pub schedule: LrSchedule,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_tokens: 1024,
            eval_interval: 100,
            keep_last: 5,
            lr: 1e-3,
            warmup: 200,
            schedule: LrSchedule::InverseSqrt,
            selection: Selection::BestValid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss over the steps since the previous entry.
    pub train_loss: f64,
    pub valid_ppl: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub best_step: Option<usize>,
    pub best_valid_ppl: Option<f64>,
    /// The last `keep_last` evaluated checkpoints, oldest first.
    pub recent: Vec<Checkpoint>,
}

impl TrainLog {
    pub fn final_valid_ppl(&self) -> Option<f64> {
        self.entries.iter().rev().find_map(|e| e.valid_ppl)
    }
}

/// Maps every pair to ids; tokens missing from `vocab` become UNK.
pub fn encode_corpus(corpus: &ParallelCorpus, vocab: &Vocabulary) -> Vec<Example> {
    corpus
        .pairs
        .iter()
        .map(|p| Example::new(vocab.encode(&p.source), vocab.encode(&p.target)))
        .collect()
}

fn example_tokens(ex: &Example) -> usize {
    ex.source.len() + ex.target.len() + 2
}

/// Length-sorted token-budget batches, as index lists into `data`.
pub(crate) fn make_batches(data: &[Example], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| (data[i].source.len() + data[i].target.len(), i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = example_tokens(&data[i]);
        if !current.is_empty() && tokens + n > batch_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// `exp` of the mean gold-token cross-entropy over all target tokens (EOS included).
pub fn perplexity(model: &TranslationModel, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let sums: Vec<(f64, usize)> = data
        .par_chunks(32)
        .map(|chunk| model.nll_sum(chunk))
        .collect::<Result<_>>()?;
    let (total, count) = sums.iter().fold((0.0, 0), |(t, c), &(s, n)| (t + s, c + n));
    Ok((total / count as f64).exp())
}

/// Trains `model` in place of its current parameters and returns the
/// selected parameters with the log. `train_seed` drives batch order and
/// dropout only; initialization is whatever `model` already holds.
pub fn train(
    mut model: TranslationModel,
    train_data: &[Example],
    valid_data: &[Example],
    cfg: &TrainConfig,
    train_seed: u64,
) -> Result<(TranslationModel, TrainLog)> {
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok((model, log));
    }
    if train_data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let eps = model.config.label_smoothing;
    let mut state = OptimizerState::new(&model.params, cfg.lr, cfg.warmup).with_schedule(cfg.schedule);
    let batches = make_batches(train_data, cfg.batch_tokens);
    let mut order_rng = Rng::new(derive_seed(&[train_seed, 0]));
    let mut drop_rng = Rng::new(derive_seed(&[train_seed, 1]));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let interval = cfg.eval_interval.max(1);

    for step in 1..=cfg.steps {
        if cursor == order.len() {
            order = (0..batches.len()).collect();
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch: Vec<Example> = batches[order[cursor]].iter().map(|&i| train_data[i].clone()).collect();
        cursor += 1;
        let (loss, grads) = match model.loss_and_grads(&batch, eps, Some(&mut drop_rng)) {
            Ok(v) => v,
            Err(ModelError::NonFinite { .. }) => return Err(ModelError::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !grads.is_finite() {
            return Err(ModelError::Diverged { step, loss });
        }
        adam_step(&mut model.params, &grads, &mut state)?;
        loss_acc += loss;
        loss_n += 1;

        if step % interval == 0 || step == cfg.steps {
            let valid_ppl = if valid_data.is_empty() {
                None
            } else {
                Some(perplexity(&model, valid_data)?)
            };
            log.entries.push(LogEntry {
                step,
                train_loss: loss_acc / loss_n as f64,
                valid_ppl,
                lr: state.lr_at(step),
            });
            loss_acc = 0.0;
            loss_n = 0;
            if let Some(ppl) = valid_ppl {
                if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
                    best = Some((ppl, step, model.params.clone()));
                }
            }
            if cfg.keep_last > 0 {
                log.recent.push(Checkpoint::from_model(&model, Some(state.clone()), step, valid_ppl));
                if log.recent.len() > cfg.keep_last {
                    log.recent.remove(0);
                }
            }
        }
    }

    match cfg.selection {
        Selection::BestValid => {
            if let Some((ppl, step, params)) = best {
                model.params = params;
                log.best_step = Some(step);
                log.best_valid_ppl = Some(ppl);
            }
        }
        Selection::AverageLast => {
            if !log.recent.is_empty() {
                model.params = average_checkpoints(&log.recent)?;
                if !valid_data.is_empty() {
                    log.best_valid_ppl = Some(perplexity(&model, valid_data)?);
                }
            }
        }
    }
    Ok((model, log))
}
