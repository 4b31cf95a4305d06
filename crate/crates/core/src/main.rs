use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use datadiv::corpus::{self, LoadOptions, ParallelCorpus, Provenance, Sentence};
use datadiv::decode::{self, beam_search_nbest, format_nbest, DecodeConfig, Ensemble};
use datadiv::diversify::{self, Data, DiversifyConfig, RunManifest};
use datadiv::expcli::report::sweep_table;
use datadiv::expcli::toy::{gen_toy, ToyTaskSpec};
use datadiv::expcli::{self, apply_overrides, ExperimentConfig, Report, SweepParam};
use datadiv::metrics;
use datadiv::model::{
    encode_corpus, load_checkpoint, save_checkpoint, train, Checkpoint, Direction, ModelConfig, TrainConfig, TranslationModel,
};
use datadiv::tokenizer::{build_vocab, learn_bpe, BpeModel, Sides, Vocabulary};

macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

const THREADS_VAR: &str = "DATADIV_THREADS";

#[derive(Parser)]
#[command(name = "datadiv", version, about = "Multi-teacher data diversification for translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set diversify.k=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Validate the config and print the resolved plan without running.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel task.
    GenToy(Common),
    /// Learn BPE merges and a vocabulary.
    LearnBpe(Common),
    /// Segment a text file with learned merges.
    ApplyBpe(Common),
    /// Train one translation model.
    Train(Common),
    /// Translate a file with one model or an ensemble.
    Translate(Common),
    /// Corpus BLEU and Pairwise-BLEU.
    Evaluate(Common),
    /// Run data diversification on a parallel corpus.
    Diversify(Common),
    /// Run an experiment and write report.csv and report.md.
    Experiment(Common),
    /// Run one experiment per value of k or N.
    Sweep(Common),
    /// Render report.md from a report.csv.
    Report(Common),
}

fn resolve<T: Serialize + DeserializeOwned + Default>(common: &Common) -> Result<T> {
    let base: T = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => T::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    apply_overrides(&mut value, &common.set)?;
    Ok(serde_json::from_value(value)?)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("missing required key {key}"))
}

fn print_plan<T: Serialize>(name: &str, cfg: &T) -> Result<()> {
    out!("plan {name}");
    out!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_pair(src: &Option<PathBuf>, tgt: &Option<PathBuf>, what: &str) -> Result<ParallelCorpus> {
    let s = required(src, &format!("{what}_source"))?;
    let t = required(tgt, &format!("{what}_target"))?;
    Ok(corpus::load_parallel(s, t, Provenance::original(), LoadOptions::default())?.corpus)
}

fn maybe_bpe(path: &Option<PathBuf>) -> Result<Option<BpeModel>> {
    Ok(match path {
        Some(p) => Some(BpeModel::load(p)?),
        None => None,
    })
}

fn segment(bpe: &Option<BpeModel>, corpus: &ParallelCorpus) -> ParallelCorpus {
    match bpe {
        Some(b) => b.apply_corpus(corpus),
        None => corpus.clone(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GenToyConfig {
    spec: ToyTaskSpec,
    n_train: usize,
    n_valid: usize,
    n_test: usize,
    out_dir: PathBuf,
}

impl Default for GenToyConfig {
    fn default() -> Self {
        GenToyConfig {
            spec: ToyTaskSpec::default(),
            n_train: 2000,
            n_valid: 200,
            n_test: 500,
            out_dir: PathBuf::from("toy"),
        }
    }
}

fn gen_toy_cmd(c: &Common) -> Result<()> {
    let cfg: GenToyConfig = resolve(c)?;
    cfg.spec.validate()?;
    if c.dry_run {
        return print_plan("gen-toy", &cfg);
    }
    let splits = gen_toy(&cfg.spec, cfg.n_train, cfg.n_valid, cfg.n_test)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    for (name, corpus) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        corpus::save_parallel(corpus, &cfg.out_dir.join(format!("{name}.src")), &cfg.out_dir.join(format!("{name}.tgt")))?;
    }
    let dict = serde_json::to_string_pretty(&cfg.spec.resolved_dictionary()?)?;
    write(&cfg.out_dir.join("dictionary.json"), &dict)?;
    out!("wrote {} {} {} pairs to {}", splits.train.len(), splits.valid.len(), splits.test.len(), cfg.out_dir.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct LearnBpeConfig {
    train_source: Option<PathBuf>,
    train_target: Option<PathBuf>,
    merges: usize,
    shared: bool,
    out: PathBuf,
    vocab_out: PathBuf,
}

impl Default for LearnBpeConfig {
    fn default() -> Self {
        LearnBpeConfig {
            train_source: None,
            train_target: None,
            merges: 400,
            shared: true,
            out: PathBuf::from("bpe.codes"),
            vocab_out: PathBuf::from("vocab.txt"),
        }
    }
}

fn learn_bpe_cmd(c: &Common) -> Result<()> {
    let cfg: LearnBpeConfig = resolve(c)?;
    if c.dry_run {
        return print_plan("learn-bpe", &cfg);
    }
    let train = load_pair(&cfg.train_source, &cfg.train_target, "train")?;
    let bpe = learn_bpe(&train, cfg.merges, cfg.shared)?;
    bpe.save(&cfg.out)?;
    let vocab = build_vocab(&bpe, &train, Sides::Shared);
    vocab.save(&cfg.vocab_out)?;
    out!("merges {} vocab {}", bpe.merges().len(), vocab.len());
    Ok(())
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct ApplyBpeConfig {
    bpe: Option<PathBuf>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    /// Undo segmentation instead of applying it.
    decode: bool,
}

fn apply_bpe_cmd(c: &Common) -> Result<()> {
    let cfg: ApplyBpeConfig = resolve(c)?;
    if c.dry_run {
        return print_plan("apply-bpe", &cfg);
    }
    let bpe = BpeModel::load(required(&cfg.bpe, "bpe")?)?;
    let lines = corpus::load_lines(required(&cfg.input, "input")?)?;
    let out: Vec<Sentence> = lines
        .iter()
        .map(|s| if cfg.decode { bpe.decode(s) } else { bpe.apply(s) })
        .collect();
    corpus::save_sentences(&out, required(&cfg.output, "output")?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TrainCliConfig {
    train_source: Option<PathBuf>,
    train_target: Option<PathBuf>,
    valid_source: Option<PathBuf>,
    valid_target: Option<PathBuf>,
    bpe: Option<PathBuf>,
    vocab: Option<PathBuf>,
    direction: Direction,
    model: ModelConfig,
    train: TrainConfig,
    init_seed: u64,
    train_seed: u64,
    out: PathBuf,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        TrainCliConfig {
            train_source: None,
            train_target: None,
            valid_source: None,
            valid_target: None,
            bpe: None,
            vocab: None,
            direction: Direction::SourceToTarget,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            init_seed: 1,
            train_seed: 2,
            out: PathBuf::from("model.ckpt"),
        }
    }
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg: TrainCliConfig = resolve(c)?;
    cfg.model.validate()?;
    if c.dry_run {
        return print_plan("train", &cfg);
    }
    let bpe = maybe_bpe(&cfg.bpe)?;
    let mut tr = segment(&bpe, &load_pair(&cfg.train_source, &cfg.train_target, "train")?);
    let mut va = segment(&bpe, &load_pair(&cfg.valid_source, &cfg.valid_target, "valid")?);
    let vocab = Arc::new(match &cfg.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let tokens: std::collections::BTreeSet<&String> = tr.pairs.iter().flat_map(|p| p.source.iter().chain(&p.target)).collect();
            Vocabulary::from_tokens(tokens.into_iter().cloned())
        }
    });
    if cfg.direction == Direction::TargetToSource {
        tr = tr.swapped();
        va = va.swapped();
    }
    let model = TranslationModel::init(cfg.model.clone(), Arc::clone(&vocab), cfg.init_seed, cfg.direction)?;
    let (model, log) = train(model, &encode_corpus(&tr, &vocab), &encode_corpus(&va, &vocab), &cfg.train, cfg.train_seed)?;
    for e in &log.entries {
        out!(
            "step {} train_loss {:.4} valid_ppl {} lr {:.6}",
            e.step,
            e.train_loss,
            e.valid_ppl.map(|p| format!("{p:.4}")).unwrap_or_default(),
            e.lr
        );
    }
    let ckpt = Checkpoint::from_model(&model, None, log.best_step.unwrap_or(cfg.train.steps), log.best_valid_ppl);
    save_checkpoint(&ckpt, &cfg.out)?;
    out!("saved {}", cfg.out.display());
    Ok(())
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct TranslateConfig {
    checkpoints: Vec<PathBuf>,
    bpe: Option<PathBuf>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    decode: DecodeConfig,
    /// Write the top `nbest` beam hypotheses per line instead of plain text.
    nbest: usize,
    seed: u64,
}

fn translate_cmd(c: &Common) -> Result<()> {
    let cfg: TranslateConfig = resolve(c)?;
    if cfg.checkpoints.is_empty() {
        bail!("missing required key checkpoints");
    }
    if c.dry_run {
        return print_plan("translate", &cfg);
    }
    let models: Vec<TranslationModel> = cfg
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|ck| ck.to_model()))
        .collect::<Result<_, _>>()?;
    let vocab = Arc::clone(&models[0].vocab);
    let bpe = maybe_bpe(&cfg.bpe)?;
    let lines = corpus::load_lines(required(&cfg.input, "input")?)?;
    let ids: Vec<Vec<usize>> = lines
        .iter()
        .map(|s| vocab.encode(&bpe.as_ref().map(|b| b.apply(s)).unwrap_or_else(|| s.clone())))
        .collect();
    let out_path = required(&cfg.output, "output")?;
    let unbpe = |toks: Sentence| bpe.as_ref().map(|b| b.decode(&toks)).unwrap_or(toks);
    if cfg.nbest > 0 {
        let dc = DecodeConfig {
            beam_size: cfg.decode.beam_size.max(cfg.nbest),
            ..cfg.decode.clone()
        };
        let mut text = String::new();
        for (i, src) in ids.iter().enumerate() {
            let mut hyps = if models.len() == 1 {
                beam_search_nbest(&models[0], src, &dc)?
            } else {
                beam_search_nbest(&Ensemble::new(&models)?, src, &dc)?
            };
            hyps.truncate(cfg.nbest);
            text.push_str(&format_nbest(i, &hyps, &vocab));
        }
        return write(out_path, &text);
    }
    let hyps = if models.len() == 1 {
        decode::translate_corpus(&models[0], &ids, &cfg.decode, cfg.seed)?
    } else {
        decode::translate_corpus(&Ensemble::new(&models)?, &ids, &cfg.decode, cfg.seed)?
    };
    let out: Vec<Sentence> = hyps.iter().map(|h| unbpe(vocab.decode(h.output()))).collect();
    corpus::save_sentences(&out, out_path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct EvaluateConfig {
    hypotheses: Vec<PathBuf>,
    reference: Option<PathBuf>,
    max_n: usize,
    smoothing: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            hypotheses: Vec::new(),
            reference: None,
            max_n: 4,
            smoothing: false,
        }
    }
}

fn evaluate_cmd(c: &Common) -> Result<()> {
    let cfg: EvaluateConfig = resolve(c)?;
    if cfg.hypotheses.is_empty() {
        bail!("missing required key hypotheses");
    }
    if c.dry_run {
        return print_plan("evaluate", &cfg);
    }
    let sets: Vec<Vec<Sentence>> = cfg
        .hypotheses
        .iter()
        .map(|p| corpus::load_lines(p))
        .collect::<Result<_, _>>()?;
    if let Some(r) = &cfg.reference {
        let refs = corpus::load_lines(r)?;
        for (p, hyp) in cfg.hypotheses.iter().zip(&sets) {
            let b = metrics::bleu(hyp, &refs, cfg.max_n, cfg.smoothing)?;
            let precisions: Vec<String> = b.precisions.iter().map(|x| format!("{:.4}", x)).collect();
            out!(
                "{}\tBLEU {:.4}\tprecisions {}\tbp {:.4}\tlen {}/{}",
                p.display(),
                b.score,
                precisions.join("/"),
                b.brevity_penalty,
                b.candidate_len,
                b.reference_len
            );
        }
    }
    if sets.len() > 1 {
        out!("pairwise_bleu {:.4}", metrics::pairwise_bleu(&sets, cfg.smoothing)?);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct DiversifyCliConfig {
    train_source: Option<PathBuf>,
    train_target: Option<PathBuf>,
    valid_source: Option<PathBuf>,
    valid_target: Option<PathBuf>,
    merges: usize,
    diversify: DiversifyConfig,
    out_dir: PathBuf,
}

impl Default for DiversifyCliConfig {
    fn default() -> Self {
        DiversifyCliConfig {
            train_source: None,
            train_target: None,
            valid_source: None,
            valid_target: None,
            merges: 400,
            diversify: ExperimentConfig::default().diversify,
            out_dir: PathBuf::from("diversified"),
        }
    }
}

fn diversify_cmd(c: &Common) -> Result<()> {
    let cfg: DiversifyCliConfig = resolve(c)?;
    cfg.diversify.validate()?;
    if c.dry_run {
        return print_plan("diversify", &cfg);
    }
    let train_raw = load_pair(&cfg.train_source, &cfg.train_target, "train")?;
    let valid_raw = load_pair(&cfg.valid_source, &cfg.valid_target, "valid")?;
    let bpe = learn_bpe(&train_raw, cfg.merges, true)?;
    let vocab = Arc::new(build_vocab(&bpe, &train_raw, Sides::Shared));
    let (train_bpe, valid_bpe) = (bpe.apply_corpus(&train_raw), bpe.apply_corpus(&valid_raw));
    let data = Data {
        train: &train_bpe,
        valid: &valid_bpe,
        vocab: Arc::clone(&vocab),
    };
    let out = diversify::data_diverse(&data, &cfg.diversify)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    bpe.save(&dir.join("bpe.codes"))?;
    vocab.save(&dir.join("vocab.txt"))?;
    let merged = out.final_corpus().map_sentences(|s| bpe.decode(s));
    corpus::save_parallel(&merged, &dir.join("diversified.src"), &dir.join("diversified.tgt"))?;
    let ckpt_path = dir.join("student.ckpt");
    let ckpt = Checkpoint::from_model(&out.student, None, out.student_log.best_step.unwrap_or(out.student_steps), out.student_log.best_valid_ppl);
    save_checkpoint(&ckpt, &ckpt_path)?;
    let manifest = RunManifest::new(&cfg.diversify, &out, Some(ckpt_path.display().to_string()));
    write(&dir.join("manifest.json"), &manifest.to_json())?;
    for r in &out.rounds {
        out!("round {} {}", r.round, r.stats.to_key_value().replace('\n', " "));
    }
    out!("student_steps {} saved {}", out.student_steps, ckpt_path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct ExperimentCliConfig {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    out_dir: PathBuf,
}

impl Default for ExperimentCliConfig {
    fn default() -> Self {
        ExperimentCliConfig {
            experiment: ExperimentConfig::default(),
            out_dir: PathBuf::from("report"),
        }
    }
}

fn write_report(dir: &Path, report: &Report) -> Result<()> {
    write(&dir.join("report.csv"), &report.to_csv())?;
    write(&dir.join("report.md"), &report.to_markdown())?;
    Ok(())
}

fn experiment_cmd(c: &Common) -> Result<()> {
    let cfg: ExperimentCliConfig = resolve(c)?;
    if c.dry_run {
        out!("{}", expcli::plan(&cfg.experiment)?);
        return print_plan("experiment", &cfg);
    }
    let report = expcli::run_experiment(&cfg.experiment)?;
    write(&cfg.out_dir.join("config.json"), &cfg.experiment.to_json())?;
    write_report(&cfg.out_dir, &report)?;
    for arm in report.arms() {
        if let Some(b) = report.mean_bleu(&arm) {
            out!("{arm}\tmean_test_bleu {b:.4}");
        }
    }
    out!("wrote {}", cfg.out_dir.join("report.csv").display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct SweepCliConfig {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    param: SweepParam,
    values: Vec<usize>,
    out_dir: PathBuf,
}

impl Default for SweepCliConfig {
    fn default() -> Self {
        SweepCliConfig {
            experiment: ExperimentConfig {
                arms: vec![expcli::Arm::Diversified],
                ..ExperimentConfig::default()
            },
            param: SweepParam::K,
            values: vec![1, 2, 3],
            out_dir: PathBuf::from("sweep"),
        }
    }
}

fn sweep_cmd(c: &Common) -> Result<()> {
    let cfg: SweepCliConfig = resolve(c)?;
    if c.dry_run {
        for v in &cfg.values {
            out!("value {v}");
        }
        out!("{}", expcli::plan(&cfg.experiment)?);
        return print_plan("sweep", &cfg);
    }
    let results = expcli::sweep(&cfg.experiment, cfg.param, &cfg.values)?;
    let label = match cfg.param {
        SweepParam::K => "k",
        SweepParam::N => "N",
    };
    for (v, r) in &results {
        write_report(&cfg.out_dir.join(format!("{label}{v}")), r)?;
    }
    let table = sweep_table(label, &results);
    write(&cfg.out_dir.join("sweep.md"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct ReportConfig {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
}

fn report_cmd(c: &Common) -> Result<()> {
    let cfg: ReportConfig = resolve(c)?;
    if c.dry_run {
        return print_plan("report", &cfg);
    }
    let p = required(&cfg.input, "input")?;
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let md = Report::from_csv(&text)?.to_markdown();
    match &cfg.output {
        Some(o) => write(o, &md),
        None => {
            print!("{md}");
            Ok(())
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_VAR} must be a positive integer"))?;
        if n == 0 {
            bail!("{THREADS_VAR} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenToy(c) => gen_toy_cmd(c),
        Command::LearnBpe(c) => learn_bpe_cmd(c),
        Command::ApplyBpe(c) => apply_bpe_cmd(c),
        Command::Train(c) => train_cmd(c),
        Command::Translate(c) => translate_cmd(c),
        Command::Evaluate(c) => evaluate_cmd(c),
        Command::Diversify(c) => diversify_cmd(c),
        Command::Experiment(c) => experiment_cmd(c),
        Command::Sweep(c) => sweep_cmd(c),
        Command::Report(c) => report_cmd(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
