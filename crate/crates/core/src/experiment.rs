//! Run configuration and command dispatch shared by the command-line tool
//! and the experiment tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_dialogre, prepare_split, DatasetSplit, InputBuilder, PreparedSplit, RelationSchema};
use crate::encoder::pretrained::{load_pretrained, PretrainedEncoder};
use crate::encoder::{EncoderConfig, Precision};
use crate::error::{DrexError, Result};
use crate::metrics::{
    aggregate_runs, evaluate_records, loo_metric, render_table, JointExplainer, Metric, MetricReport,
    MetricValues, ModelExplainer,
};
use crate::models::{JointModel, ModelKind, RelationModel, SpanModel};
use crate::synthetic::{generate, SyntheticConfig};
use crate::system::{
    greedy_explanations, read_dump, relation_explanation, write_dump, DrexConfig, DrexSystem, PredictionRecord,
};
use crate::tokenizer::{AnyTokenizer, SpecialTokens, WordTokenizer};
use crate::train::{
    drex_records, explainer_trigger_scores, joint_predictions, train_drex, train_explainer, train_joint,
    train_ranker, evaluate_ranker, TrainOptions, TrainingLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainBaseline,
    TrainDrex,
    Evaluate,
    Explain,
    ExportComparison,
    Ablate,
    GenSynthetic,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainBaseline => "train-baseline",
            Command::TrainDrex => "train-drex",
            Command::Evaluate => "evaluate",
            Command::Explain => "explain",
            Command::ExportComparison => "export-comparison",
            Command::Ablate => "ablate",
            Command::GenSynthetic => "gen-synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Rank,
    Explain,
    Joint,
}

/// Shape of the from-scratch encoder used when `encoder` is `"tiny"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinySettings {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_length: usize,
    pub lowercase: bool,
}

impl Default for TinySettings {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 256,
            max_length: 128,
            lowercase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Command,
    pub baseline: Option<BaselineKind>,
    /// Directory with `train.json`, `dev.json`, `test.json` and optionally
    /// `schema.json` (the DialogRE schema otherwise).
    pub data_dir: Option<PathBuf>,
    /// Split scored after training and by `evaluate`/`explain`.
    pub eval_split: String,
    /// `"tiny"` or a pretrained checkpoint directory.
    pub encoder: String,
    pub tiny: TinySettings,
    /// Input length cap for pretrained encoders.
    pub max_length: usize,
    pub precision: Precision,
    pub drex: DrexConfig,
    /// Baseline learning rate; the D-REX one when unset.
    pub baseline_learning_rate: Option<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub disable_rerank_reward: bool,
    pub disable_loo_reward: bool,
    pub ranker: Option<PathBuf>,
    pub explainer: Option<PathBuf>,
    /// Model or D-REX system to evaluate or explain with.
    pub checkpoint: Option<PathBuf>,
    /// Prediction dumps for `evaluate` or `export-comparison`.
    pub predictions: Vec<PathBuf>,
    pub comparison_samples: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Evaluate,
            baseline: None,
            data_dir: None,
            eval_split: "test".into(),
            encoder: "tiny".into(),
            tiny: TinySettings::default(),
            max_length: 512,
            precision: Precision::F32,
            drex: DrexConfig::default(),
            baseline_learning_rate: None,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            disable_rerank_reward: false,
            disable_loo_reward: false,
            ranker: None,
            explainer: None,
            checkpoint: None,
            predictions: Vec::new(),
            comparison_samples: 20,
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn config_error<T>(message: impl Into<String>) -> Result<T> {
    Err(DrexError::Config(message.into()))
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return config_error("at least one seed is required");
        }
        if (self.disable_rerank_reward || self.disable_loo_reward) && self.command != Command::TrainDrex {
            return config_error(format!(
                "reward ablation switches apply only to train-drex, not {}",
                self.command.name()
            ));
        }
        let needs_data = match self.command {
            Command::TrainBaseline | Command::TrainDrex | Command::Ablate | Command::Explain => true,
            Command::Evaluate => self.predictions.is_empty(),
            Command::ExportComparison | Command::GenSynthetic => false,
        };
        if needs_data && self.data_dir.is_none() {
            return config_error(format!("{} needs a data directory", self.command.name()));
        }
        match self.command {
            Command::TrainBaseline if self.baseline.is_none() => {
                return config_error("train-baseline needs a baseline kind (rank, explain or joint)")
            }
            Command::TrainDrex | Command::Ablate => {
                for (role, path) in [("ranker", &self.ranker), ("explainer", &self.explainer)] {
                    match path {
                        None => return config_error(format!("missing {role} checkpoint")),
                        Some(p) if !p.exists() => {
                            return config_error(format!("missing {role} checkpoint: {} does not exist", p.display()))
                        }
                        _ => {}
                    }
                }
            }
            Command::Evaluate if self.predictions.is_empty() && self.checkpoint.is_none() => {
                return config_error("evaluate needs a checkpoint or prediction dumps")
            }
            Command::Explain if self.checkpoint.is_none() => return config_error("explain needs a checkpoint"),
            Command::ExportComparison if self.predictions.len() != 2 => {
                return config_error("export-comparison needs exactly two prediction dumps")
            }
            _ => {}
        }
        std::fs::create_dir_all(&self.output_dir)?;
        let probe = self.output_dir.join(".write-test");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| DrexError::Config(format!("output directory {} is not writable: {e}", self.output_dir.display())))?;
        Ok(())
    }

    /// D-REX settings with the ablation switches applied.
    pub fn drex_config(&self) -> DrexConfig {
        let mut c = self.drex.clone();
        c.use_rerank_reward &= !self.disable_rerank_reward;
        c.use_loo_reward &= !self.disable_loo_reward;
        c
    }

    pub fn baseline_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            learning_rate: self.baseline_learning_rate.unwrap_or(self.drex.learning_rate),
            weight_decay: self.drex.weight_decay,
            batch_size: self.drex.batch_size,
            epochs: self.drex.max_epochs_baseline,
            seed,
            threshold: self.drex.threshold,
            max_span_len: self.drex.max_span_len,
            alpha: self.drex.alpha,
        }
    }
}

/// Loaded splits and their files.
#[derive(Debug, Clone)]
pub struct Data {
    pub schema: RelationSchema,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
    pub files: Vec<PathBuf>,
}

impl Data {
    pub fn split(&self, name: &str) -> Result<&DatasetSplit> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => config_error(format!("unknown split `{other}` (train, dev or test)")),
        }
    }
}

pub fn load_data(dir: &Path) -> Result<Data> {
    let schema_path = dir.join("schema.json");
    let mut files = Vec::new();
    let schema = if schema_path.exists() {
        files.push(schema_path.clone());
        serde_json::from_slice(&std::fs::read(&schema_path)?)?
    } else {
        RelationSchema::dialogre()
    };
    let mut load = |name: &str| -> Result<DatasetSplit> {
        let path = dir.join(format!("{name}.json"));
        files.push(path.clone());
        load_dialogre(&path, name, &schema)
    };
    let (train, dev, test) = (load("train")?, load("dev")?, load("test")?);
    Ok(Data {
        schema,
        train,
        dev,
        test,
        files,
    })
}

/// Word vocabulary over the training dialogues, entity names and relation
/// phrases.
pub fn build_word_tokenizer(data: &Data, lowercase: bool) -> Result<WordTokenizer> {
    let mut texts: Vec<String> = Vec::new();
    for ex in &data.train.examples {
        texts.push(ex.dialogue.render());
        for t in &ex.triples {
            texts.push(t.subject.clone());
            texts.push(t.object.clone());
        }
    }
    texts.extend((0..data.schema.len()).map(|i| data.schema.phrase_at(i)));
    WordTokenizer::build(texts.iter().map(String::as_str), SpecialTokens::bert(), lowercase)
}

pub enum EncoderSetup {
    Tiny { config: EncoderConfig, tokenizer: AnyTokenizer },
    Pretrained(Box<PretrainedEncoder>),
}

impl EncoderSetup {
    pub fn new(cfg: &RunConfig, data: &Data) -> Result<Self> {
        if cfg.encoder == "tiny" {
            let tokenizer = build_word_tokenizer(data, cfg.tiny.lowercase)?;
            let mut config = EncoderConfig::tiny(tokenizer.vocab().len(), cfg.tiny.max_length);
            config.hidden_size = cfg.tiny.hidden_size;
            config.num_layers = cfg.tiny.num_layers;
            config.num_heads = cfg.tiny.num_heads;
            config.intermediate_size = cfg.tiny.intermediate_size;
            config.precision = cfg.precision;
            config.validate()?;
            Ok(EncoderSetup::Tiny {
                config,
                tokenizer: AnyTokenizer::Word(tokenizer),
            })
        } else {
            Ok(EncoderSetup::Pretrained(Box::new(load_pretrained(
                Path::new(&cfg.encoder),
                Some(cfg.max_length),
                cfg.precision,
            )?)))
        }
    }

    pub fn input_builder(&self) -> InputBuilder {
        match self {
            EncoderSetup::Tiny { config, tokenizer } => InputBuilder::new(tokenizer.clone().into_shared(), config.max_length),
            EncoderSetup::Pretrained(p) => InputBuilder::new(p.tokenizer.clone().into_shared(), p.config.max_length),
        }
    }

    pub fn relation_model(&self, schema: &RelationSchema, seed: u64) -> Result<RelationModel> {
        match self {
            EncoderSetup::Tiny { config, tokenizer } => RelationModel::new(config.clone(), tokenizer.clone(), schema.clone(), seed),
            EncoderSetup::Pretrained(p) => RelationModel::from_pretrained(p, schema.clone(), seed),
        }
    }

    pub fn span_model(&self, seed: u64) -> Result<SpanModel> {
        match self {
            EncoderSetup::Tiny { config, tokenizer } => SpanModel::new(config.clone(), tokenizer.clone(), seed),
            EncoderSetup::Pretrained(p) => SpanModel::from_pretrained(p, seed),
        }
    }

    pub fn joint_model(&self, schema: &RelationSchema, seed: u64) -> Result<JointModel> {
        match self {
            EncoderSetup::Tiny { config, tokenizer } => JointModel::new(config.clone(), tokenizer.clone(), schema.clone(), seed),
            EncoderSetup::Pretrained(p) => JointModel::from_pretrained(p, schema.clone(), seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: PreparedSplit,
    pub dev: PreparedSplit,
    pub eval: PreparedSplit,
}

pub fn prepare(data: &Data, builder: &InputBuilder, eval_split: &str) -> Result<Prepared> {
    Ok(Prepared {
        train: prepare_split(&data.train, builder, &data.schema)?,
        dev: prepare_split(&data.dev, builder, &data.schema)?,
        eval: prepare_split(data.split(eval_split)?, builder, &data.schema)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    /// SHA-256 of `blob <len>\0<content>`, as git computes object ids.
    pub blob_sha256: String,
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let content = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(&content);
    Ok(FileDigest {
        path: path.to_path_buf(),
        bytes: content.len() as u64,
        blob_sha256: hex::encode(h.finalize()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
}

pub fn write_manifest(cfg: &RunConfig, dir: &Path, inputs: &[PathBuf]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        command: cfg.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: cfg.seeds.clone(),
        config: cfg.clone(),
        inputs: inputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Every regular file below each path, sorted.
fn files_below(paths: &[&Path]) -> Vec<PathBuf> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) {
        if p.is_file() {
            out.push(p.to_path_buf());
        } else if let Ok(entries) = std::fs::read_dir(p) {
            for e in entries.flatten() {
                walk(&e.path(), out);
            }
        }
    }
    let mut out = Vec::new();
    for p in paths {
        walk(p, &mut out);
    }
    out.sort();
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

/// `base/seed-<seed>` when it exists, else `base`.
pub fn resolve_seed_checkpoint(base: &Path, seed: u64) -> PathBuf {
    let d = seed_dir(base, seed);
    if d.is_dir() {
        d
    } else {
        base.to_path_buf()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub report: Option<MetricReport>,
    pub table: Option<String>,
    pub output_dir: PathBuf,
    pub logs: Vec<TrainingLog>,
}

/// Dispatch one command and write its artifacts under `output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.command {
        Command::TrainBaseline => run_train_baseline(cfg),
        Command::TrainDrex => run_train_drex(cfg),
        Command::Evaluate => run_evaluate(cfg),
        Command::Explain => run_explain(cfg),
        Command::ExportComparison => run_export(cfg),
        Command::Ablate => run_ablation_suite(cfg).map(|a| RunOutcome {
            table: Some(a.table),
            output_dir: cfg.output_dir.clone(),
            ..Default::default()
        }),
        Command::GenSynthetic => run_gen_synthetic(cfg),
    }
}

fn finish(cfg: &RunConfig, name: &str, reports: Vec<MetricReport>, columns: &[Metric], logs: Vec<TrainingLog>) -> Result<RunOutcome> {
    let report = aggregate_runs(&reports)?;
    let table = render_table(&[(name.to_string(), report.clone())], columns);
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    std::fs::write(cfg.output_dir.join("report.txt"), &table)?;
    Ok(RunOutcome {
        report: Some(report),
        table: Some(table),
        output_dir: cfg.output_dir.clone(),
        logs,
    })
}

fn run_train_baseline(cfg: &RunConfig) -> Result<RunOutcome> {
    let data = load_data(cfg.data_dir.as_deref().unwrap())?;
    write_manifest(cfg, &cfg.output_dir, &data.files)?;
    let setup = EncoderSetup::new(cfg, &data)?;
    let prepared = prepare(&data, &setup.input_builder(), &cfg.eval_split)?;
    let (train, dev, eval) = (prepared.train.refs(), prepared.dev.refs(), prepared.eval.refs());
    let kind = cfg.baseline.unwrap();
    let rater = match (&cfg.ranker, kind) {
        (Some(p), BaselineKind::Explain | BaselineKind::Joint) => Some(RelationModel::load(p)?),
        _ => None,
    };
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for &seed in &cfg.seeds {
        let opts = cfg.baseline_options(seed);
        let out = seed_dir(&cfg.output_dir, seed);
        let (log, values) = match kind {
            BaselineKind::Rank => {
                let model = setup.relation_model(&data.schema, seed)?;
                let log = train_ranker(&model, &train, &dev, &opts)?;
                model.save(&out)?;
                (log, evaluate_ranker(&model, &eval, opts.threshold)?)
            }
            BaselineKind::Explain => {
                let model = setup.span_model(seed)?;
                let log = train_explainer(&model, &data.schema, &train, &dev, &opts)?;
                model.save(&out)?;
                let mut v = MetricValues::default();
                if let Some(s) = explainer_trigger_scores(&model, &data.schema, &eval, opts.max_span_len)? {
                    v.token_f1 = Some(s.token_f1);
                    v.exact_match = Some(s.exact_match);
                }
                if let Some(r) = &rater {
                    let ex = ModelExplainer {
                        model: &model,
                        schema: &data.schema,
                        max_span_len: opts.max_span_len,
                    };
                    v.loo = Some(loo_metric(r, &ex, &eval, opts.threshold)?.loo);
                }
                (log, v)
            }
            BaselineKind::Joint => {
                let model = setup.joint_model(&data.schema, seed)?;
                let log = train_joint(&model, &train, &dev, &opts)?;
                model.save(&out)?;
                let records = joint_predictions(&model, &eval, &opts)?;
                write_dump(out.join("predictions.ndjson"), &records)?;
                let mut v = evaluate_records(&records, opts.threshold)?;
                if let Some(r) = &rater {
                    let ex = JointExplainer {
                        model: &model,
                        max_span_len: opts.max_span_len,
                    };
                    v.loo = Some(loo_metric(r, &ex, &eval, opts.threshold)?.loo);
                }
                (log, v)
            }
        };
        values.validate()?;
        write_json(&out.join("training_log.json"), &log)?;
        write_json(&out.join("metrics.json"), &values)?;
        reports.push(MetricReport::single(values));
        logs.push(log);
    }
    let (name, columns): (&str, &[Metric]) = match kind {
        BaselineKind::Rank => ("R", &[Metric::F1, Metric::Mrr]),
        BaselineKind::Explain => ("EX", &[Metric::TokenF1, Metric::ExactMatch, Metric::Loo]),
        BaselineKind::Joint => ("Joint", &[Metric::F1, Metric::Mrr, Metric::TokenF1, Metric::ExactMatch, Metric::Loo]),
    };
    finish(cfg, name, reports, columns, logs)
}

/// Train and score one D-REX system from baseline checkpoints.
pub fn drex_run(cfg: &RunConfig, drex: &DrexConfig, data: &Data, seed: u64, out: &Path) -> Result<(MetricValues, TrainingLog)> {
    let ranker_dir = resolve_seed_checkpoint(cfg.ranker.as_deref().unwrap(), seed);
    let explainer_dir = resolve_seed_checkpoint(cfg.explainer.as_deref().unwrap(), seed);
    let ranker = RelationModel::load(&ranker_dir)?;
    let explainer = SpanModel::load(&explainer_dir)?;
    if ranker.schema() != &data.schema {
        return config_error("the ranker checkpoint was trained on a different relation schema");
    }
    let prepared = prepare(data, &ranker.input_builder(), &cfg.eval_split)?;
    let system = DrexSystem::from_baselines(ranker, explainer, drex.clone())?;
    let log = train_drex(&system, &prepared.train.refs(), &prepared.dev.refs(), drex.max_epochs_drex, seed)?;
    system.save(out)?;
    let eval = prepared.eval.refs();
    let records = drex_records(&system, &eval)?;
    write_dump(out.join("predictions.ndjson"), &records)?;
    let mut values = evaluate_records(&records, drex.threshold)?;
    let explainer = ModelExplainer {
        model: &system.explainer,
        schema: system.schema(),
        max_span_len: drex.max_span_len,
    };
    values.loo = Some(loo_metric(&system.ranker, &explainer, &eval, drex.threshold)?.loo);
    values.validate()?;
    write_json(&out.join("training_log.json"), &log)?;
    write_json(&out.join("metrics.json"), &values)?;
    Ok((values, log))
}

fn run_train_drex(cfg: &RunConfig) -> Result<RunOutcome> {
    let data = load_data(cfg.data_dir.as_deref().unwrap())?;
    let mut inputs = data.files.clone();
    inputs.extend(files_below(&[cfg.ranker.as_deref().unwrap(), cfg.explainer.as_deref().unwrap()]));
    write_manifest(cfg, &cfg.output_dir, &inputs)?;
    let drex = cfg.drex_config();
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for &seed in &cfg.seeds {
        let (v, log) = drex_run(cfg, &drex, &data, seed, &seed_dir(&cfg.output_dir, seed))?;
        reports.push(MetricReport::single(v));
        logs.push(log);
    }
    finish(
        cfg,
        "D-REX",
        reports,
        &[Metric::F1, Metric::Mrr, Metric::TokenF1, Metric::ExactMatch, Metric::Loo],
        logs,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<(String, MetricReport)>,
    pub table: String,
}

pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    ("D-REX", true, true),
    ("- reranking reward", false, true),
    ("- LOO reward", true, false),
];

/// Full D-REX and both single-reward variants over every seed.
pub fn run_ablation_suite(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let data = load_data(cfg.data_dir.as_deref().unwrap())?;
    let mut inputs = data.files.clone();
    inputs.extend(files_below(&[cfg.ranker.as_deref().unwrap(), cfg.explainer.as_deref().unwrap()]));
    write_manifest(cfg, &cfg.output_dir, &inputs)?;
    let mut rows = Vec::new();
    for (i, (name, rerank, loo)) in ABLATION_VARIANTS.iter().enumerate() {
        let mut drex = cfg.drex.clone();
        drex.use_rerank_reward = *rerank;
        drex.use_loo_reward = *loo;
        let dir = cfg.output_dir.join(format!("variant-{i}"));
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            let (v, _) = drex_run(cfg, &drex, &data, seed, &seed_dir(&dir, seed))?;
            reports.push(MetricReport::single(MetricValues {
                f1: v.f1,
                loo: v.loo,
                ..Default::default()
            }));
        }
        rows.push((name.to_string(), aggregate_runs(&reports)?));
    }
    let table = render_table(&rows, &[Metric::F1, Metric::Loo]);
    let report = AblationReport { rows, table };
    write_json(&cfg.output_dir.join("ablation.json"), &report)?;
    std::fs::write(cfg.output_dir.join("ablation.txt"), &report.table)?;
    Ok(report)
}

enum Loaded {
    System(Box<DrexSystem>),
    Relation(RelationModel),
    Span(SpanModel),
    Joint(JointModel),
}

fn load_any(dir: &Path) -> Result<Loaded> {
    if dir.join("drex_config.json").exists() {
        return Ok(Loaded::System(Box::new(DrexSystem::load(dir)?)));
    }
    #[derive(Deserialize)]
    struct Kind {
        kind: ModelKind,
    }
    let meta = dir.join("model.json");
    if !meta.exists() {
        return Err(DrexError::Checkpoint {
            path: dir.to_path_buf(),
            message: "neither a D-REX system nor a model checkpoint".into(),
        });
    }
    let kind: Kind = serde_json::from_slice(&std::fs::read(meta)?)?;
    Ok(match kind.kind {
        ModelKind::Relation => Loaded::Relation(RelationModel::load(dir)?),
        ModelKind::Span => Loaded::Span(SpanModel::load(dir)?),
        ModelKind::Joint => Loaded::Joint(JointModel::load(dir)?),
    })
}

/// Checkpoint directories to score: every `seed-*` child, or the directory
/// itself.
fn checkpoint_dirs(base: &Path) -> Vec<PathBuf> {
    let mut seeds: Vec<PathBuf> = std::fs::read_dir(base)
        .map(|it| {
            it.flatten()
                .map(|e| e.path())
                .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
                .collect()
        })
        .unwrap_or_default();
    seeds.sort();
    if seeds.is_empty() {
        vec![base.to_path_buf()]
    } else {
        seeds
    }
}

/// Prediction dump for one checkpoint, plus the LOO value when a rater is
/// available.
fn predict_checkpoint(cfg: &RunConfig, data: &Data, dir: &Path) -> Result<(Vec<PredictionRecord>, Option<f64>)> {
    let loaded = load_any(dir)?;
    let threshold = cfg.drex.threshold;
    let max_span = cfg.drex.max_span_len;
    let rater = cfg.ranker.as_deref().map(RelationModel::load).transpose()?;
    match loaded {
        Loaded::System(system) => {
            let prepared = prepare_split(data.split(&cfg.eval_split)?, system.input_builder(), &data.schema)?;
            let eval = prepared.refs();
            let records = drex_records(&system, &eval)?;
            let explainer = ModelExplainer {
                model: &system.explainer,
                schema: system.schema(),
                max_span_len: system.config.max_span_len,
            };
            let rater = rater.as_ref().unwrap_or(&system.ranker);
            let loo = loo_metric(rater, &explainer, &eval, system.config.threshold)?.loo;
            Ok((records, Some(loo)))
        }
        Loaded::Relation(model) => {
            let prepared = prepare_split(data.split(&cfg.eval_split)?, &model.input_builder(), &data.schema)?;
            let eval = prepared.refs();
            let inputs: Vec<_> = eval.iter().map(|p| &p.base).collect();
            let records = model
                .predict(&inputs)?
                .into_iter()
                .zip(&eval)
                .map(|(s, p)| PredictionRecord::new(p, s.probs.clone(), s.top_k(cfg.drex.top_k), Vec::new()))
                .collect();
            Ok((records, None))
        }
        Loaded::Joint(model) => {
            let prepared = prepare_split(data.split(&cfg.eval_split)?, &model.input_builder(), &data.schema)?;
            let eval = prepared.refs();
            let opts = cfg.baseline_options(0);
            let records = joint_predictions(&model, &eval, &opts)?;
            let loo = rater
                .as_ref()
                .map(|r| {
                    let ex = JointExplainer {
                        model: &model,
                        max_span_len: max_span,
                    };
                    loo_metric(r, &ex, &eval, threshold).map(|l| l.loo)
                })
                .transpose()?;
            Ok((records, loo))
        }
        Loaded::Span(model) => {
            let Some(rater) = rater else {
                return config_error("a span model needs a ranker checkpoint to produce relation predictions");
            };
            let prepared = prepare_split(data.split(&cfg.eval_split)?, &model.input_builder(), &data.schema)?;
            let eval = prepared.refs();
            let inputs: Vec<_> = eval.iter().map(|p| &p.base).collect();
            let scores = rater.predict(&inputs)?;
            let top: Vec<(&crate::corpus::PairExample, usize)> = eval
                .iter()
                .zip(&scores)
                .flat_map(|(p, s)| s.top_k(cfg.drex.top_k).into_iter().map(move |c| (*p, c)))
                .collect();
            let top_spans = greedy_explanations(&model, &data.schema, &top, max_span)?;
            let gold: Vec<(&crate::corpus::PairExample, usize)> =
                eval.iter().flat_map(|p| p.gold.iter().map(move |&c| (*p, c))).collect();
            let gold_spans = greedy_explanations(&model, &data.schema, &gold, max_span)?;
            let (mut ti, mut gi) = (0, 0);
            let k = cfg.drex.top_k;
            let records = eval
                .iter()
                .zip(&scores)
                .map(|(p, s)| {
                    let explanations = top[ti..ti + k]
                        .iter()
                        .zip(&top_spans[ti..ti + k])
                        .map(|(&(_, c), &sp)| relation_explanation(p, &data.schema, c, sp))
                        .collect();
                    ti += k;
                    let mut r = PredictionRecord::new(p, s.probs.clone(), s.top_k(k), explanations);
                    r.gold_explanations = p
                        .gold
                        .iter()
                        .zip(&gold_spans[gi..gi + p.gold.len()])
                        .map(|(&c, &sp)| relation_explanation(p, &data.schema, c, sp))
                        .collect();
                    gi += p.gold.len();
                    r
                })
                .collect();
            let ex = ModelExplainer {
                model: &model,
                schema: &data.schema,
                max_span_len: max_span,
            };
            let loo = loo_metric(&rater, &ex, &eval, threshold)?.loo;
            Ok((records, Some(loo)))
        }
    }
}

fn run_evaluate(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut reports = Vec::new();
    if !cfg.predictions.is_empty() {
        write_manifest(cfg, &cfg.output_dir, &cfg.predictions)?;
        for p in &cfg.predictions {
            let values = evaluate_records(&read_dump(p)?, cfg.drex.threshold)?;
            values.validate()?;
            reports.push(MetricReport::single(values));
        }
    } else {
        let data = load_data(cfg.data_dir.as_deref().unwrap())?;
        let base = cfg.checkpoint.as_deref().unwrap();
        let mut inputs = data.files.clone();
        inputs.extend(files_below(&[base]));
        write_manifest(cfg, &cfg.output_dir, &inputs)?;
        for dir in checkpoint_dirs(base) {
            let (records, loo) = predict_checkpoint(cfg, &data, &dir)?;
            let mut values = evaluate_records(&records, cfg.drex.threshold)?;
            values.loo = loo;
            values.validate()?;
            reports.push(MetricReport::single(values));
        }
    }
    let columns: Vec<Metric> = reports[0].mean.present();
    finish(cfg, "model", reports, &columns, Vec::new())
}

fn run_explain(cfg: &RunConfig) -> Result<RunOutcome> {
    let data = load_data(cfg.data_dir.as_deref().unwrap())?;
    let base = cfg.checkpoint.as_deref().unwrap();
    let mut inputs = data.files.clone();
    inputs.extend(files_below(&[base]));
    write_manifest(cfg, &cfg.output_dir, &inputs)?;
    let dirs = checkpoint_dirs(base);
    for dir in &dirs {
        let (records, _) = predict_checkpoint(cfg, &data, dir)?;
        let name = if dirs.len() == 1 {
            "predictions.ndjson".to_string()
        } else {
            format!("predictions-{}.ndjson", dir.file_name().unwrap().to_string_lossy())
        };
        write_dump(cfg.output_dir.join(name), &records)?;
    }
    Ok(RunOutcome {
        output_dir: cfg.output_dir.clone(),
        ..Default::default()
    })
}

fn run_gen_synthetic(cfg: &RunConfig) -> Result<RunOutcome> {
    let corpus = generate(&cfg.synthetic)?;
    corpus.write(&cfg.output_dir, &cfg.synthetic)?;
    write_manifest(cfg, &cfg.output_dir, &[])?;
    Ok(RunOutcome {
        output_dir: cfg.output_dir.clone(),
        ..Default::default()
    })
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            '\n' => out.push_str("<br>\n"),
            c => out.push(c),
        }
    }
    out
}

/// Dialogue text with two byte ranges highlighted; overlap gets both classes.
pub fn highlight(text: &str, a: Option<(usize, usize)>, b: Option<(usize, usize)>) -> String {
    let inside = |r: Option<(usize, usize)>, i: usize| r.is_some_and(|(s, e)| s <= i && i < e);
    let mut cuts: Vec<usize> = vec![0, text.len()];
    for (s, e) in [a, b].into_iter().flatten() {
        cuts.push(s.min(text.len()));
        cuts.push(e.min(text.len()));
    }
    cuts.retain(|&c| text.is_char_boundary(c));
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = String::new();
    for w in cuts.windows(2) {
        let seg = escape_html(&text[w[0]..w[1]]);
        match (inside(a, w[0]), inside(b, w[0])) {
            (true, true) => {
                let _ = write!(out, "<mark class=\"both\">{seg}</mark>");
            }
            (true, false) => {
                let _ = write!(out, "<mark class=\"first\">{seg}</mark>");
            }
            (false, true) => {
                let _ = write!(out, "<mark class=\"second\">{seg}</mark>");
            }
            (false, false) => out.push_str(&seg),
        }
    }
    out
}

const PAGE_STYLE: &str = "body{font-family:sans-serif;max-width:48em;margin:2em auto;line-height:1.5}\
mark.first{background:#ffe066}mark.second{background:#ffb266}mark.both{background:linear-gradient(#ffe066,#ffb266)}\
.dialogue{border:1px solid #ccc;padding:1em}.choices span{margin-right:2em}";

fn run_export(cfg: &RunConfig) -> Result<RunOutcome> {
    write_manifest(cfg, &cfg.output_dir, &cfg.predictions)?;
    let first = read_dump(&cfg.predictions[0])?;
    let second = read_dump(&cfg.predictions[1])?;
    let by_id: std::collections::BTreeMap<&str, &PredictionRecord> =
        second.iter().map(|r| (r.pair_id.as_str(), r)).collect();
    let mut candidates: Vec<(&PredictionRecord, &PredictionRecord, usize)> = Vec::new();
    for a in &first {
        let Some(b) = by_id.get(a.pair_id.as_str()) else { continue };
        for ea in a.gold_explanations.iter().filter(|e| e.byte_range.is_some()) {
            if b.gold_explanations.iter().any(|eb| eb.class == ea.class && eb.byte_range.is_some()) {
                candidates.push((a, b, ea.class));
                break;
            }
        }
    }
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seeds[0]));
    candidates.truncate(cfg.comparison_samples);
    let names: Vec<String> = cfg
        .predictions
        .iter()
        .map(|p| p.file_stem().map_or("predictions".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let mut index = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Explanation comparison</title><style>{PAGE_STYLE}</style></head><body>\n<h1>Explanation comparison</h1>\n<p>Yellow: {}. Orange: {}.</p>\n<ul>\n",
        escape_html(&names[0]),
        escape_html(&names[1])
    );
    for (i, (a, b, class)) in candidates.iter().enumerate() {
        let ea = a.gold_explanations.iter().find(|e| e.class == *class).unwrap();
        let eb = b.gold_explanations.iter().find(|e| e.class == *class).unwrap();
        let statement = format!(
            "{} / {} / {}",
            a.subject,
            crate::corpus::relation_to_natural_language(&ea.label)?,
            a.object
        );
        let page = format!(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{id}</title><style>{PAGE_STYLE}</style></head><body>\n\
<p>Which of the highlighted texts is a better indication of the relation below?</p>\n\
<h2>{statement}</h2>\n<div class=\"dialogue\">{dialogue}</div>\n\
<p class=\"choices\"><span><mark class=\"first\">yellow</mark> is better</span><span>equal</span><span><mark class=\"second\">orange</mark> is better</span></p>\n\
</body></html>\n",
            id = escape_html(&a.pair_id),
            statement = escape_html(&statement),
            dialogue = highlight(&a.dialogue_text, ea.byte_range, eb.byte_range),
        );
        let file = format!("comparison-{i:03}.html");
        std::fs::write(cfg.output_dir.join(&file), page)?;
        let _ = writeln!(index, "<li><a href=\"{file}\">{}</a></li>", escape_html(&a.pair_id));
    }
    index.push_str("</ul>\n</body></html>\n");
    std::fs::write(cfg.output_dir.join("index.html"), index)?;
    Ok(RunOutcome {
        output_dir: cfg.output_dir.clone(),
        ..Default::default()
    })
}
