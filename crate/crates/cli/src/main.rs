use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drex::experiment::{run, BaselineKind, Command, RunConfig};

/// Relation extraction with extracted explanations: baselines, D-REX
/// training, evaluation and explanation export.
#[derive(Parser, Debug)]
#[command(name = "drex", version)]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train a relation ranker, span explainer or joint baseline.
    TrainBaseline {
        kind: Kind,
        #[command(flatten)]
        common: Common,
    },
    /// Train EX and RR from baseline checkpoints.
    TrainDrex(Common),
    /// Score a checkpoint or prediction dumps.
    Evaluate(Common),
    /// Write a prediction dump with explanations.
    Explain(Common),
    /// Side-by-side highlighted explanations from two prediction dumps.
    ExportComparison(Common),
    /// Full D-REX against each single-reward variant.
    Ablate(Common),
    /// Write the planted-trigger synthetic corpus.
    GenSynthetic(Common),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Rank,
    Explain,
    Joint,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Split to score: train, dev or test.
    #[arg(long)]
    eval_split: Option<String>,
    /// `tiny` or a pretrained checkpoint directory.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    max_length: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    ranker: Option<PathBuf>,
    #[arg(long)]
    explainer: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prediction dump; repeat for two.
    #[arg(long)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    baseline_learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs_baseline: Option<usize>,
    #[arg(long)]
    epochs_drex: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_span_len: Option<usize>,
    #[arg(long)]
    reward_clip: Option<f64>,
    #[arg(long)]
    disable_rerank_reward: bool,
    #[arg(long)]
    disable_loo_reward: bool,
    /// Pages written by export-comparison.
    #[arg(long)]
    samples: Option<usize>,
    /// Pairs per split for gen-synthetic (train, dev, test).
    #[arg(long, value_delimiter = ',')]
    synthetic_pairs: Option<Vec<usize>>,
    #[arg(long)]
    synthetic_seed: Option<u64>,
}

impl Common {
    fn into_config(self, command: Command, baseline: Option<BaselineKind>) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.command = command;
        if baseline.is_some() {
            cfg.baseline = baseline;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            output_dir => cfg.output_dir,
            eval_split => cfg.eval_split,
            encoder => cfg.encoder,
            max_length => cfg.max_length,
            seeds => cfg.seeds,
            top_k => cfg.drex.top_k,
            learning_rate => cfg.drex.learning_rate,
            batch_size => cfg.drex.batch_size,
            epochs_baseline => cfg.drex.max_epochs_baseline,
            epochs_drex => cfg.drex.max_epochs_drex,
            alpha => cfg.drex.alpha,
            threshold => cfg.drex.threshold,
            max_span_len => cfg.drex.max_span_len,
            samples => cfg.comparison_samples,
            synthetic_seed => cfg.synthetic.seed,
        );
        if let Some(v) = self.max_length {
            cfg.tiny.max_length = v;
        }
        if self.data_dir.is_some() {
            cfg.data_dir = self.data_dir;
        }
        if self.ranker.is_some() {
            cfg.ranker = self.ranker;
        }
        if self.explainer.is_some() {
            cfg.explainer = self.explainer;
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint;
        }
        if !self.predictions.is_empty() {
            cfg.predictions = self.predictions;
        }
        if self.baseline_learning_rate.is_some() {
            cfg.baseline_learning_rate = self.baseline_learning_rate;
        }
        if self.reward_clip.is_some() {
            cfg.drex.reward_clip = self.reward_clip;
        }
        cfg.disable_rerank_reward |= self.disable_rerank_reward;
        cfg.disable_loo_reward |= self.disable_loo_reward;
        if let Some(p) = self.synthetic_pairs {
            let [train, dev, test] = p[..] else {
                anyhow::bail!("--synthetic-pairs takes three counts: train,dev,test");
            };
            cfg.synthetic.train_pairs = train;
            cfg.synthetic.dev_pairs = dev;
            cfg.synthetic.test_pairs = test;
        }
        Ok(cfg)
    }
}

fn config_for(verb: Verb) -> anyhow::Result<RunConfig> {
    match verb {
        Verb::TrainBaseline { kind, common } => {
            let kind = match kind {
                Kind::Rank => BaselineKind::Rank,
                Kind::Explain => BaselineKind::Explain,
                Kind::Joint => BaselineKind::Joint,
            };
            common.into_config(Command::TrainBaseline, Some(kind))
        }
        Verb::TrainDrex(c) => c.into_config(Command::TrainDrex, None),
        Verb::Evaluate(c) => c.into_config(Command::Evaluate, None),
        Verb::Explain(c) => c.into_config(Command::Explain, None),
        Verb::ExportComparison(c) => c.into_config(Command::ExportComparison, None),
        Verb::Ablate(c) => c.into_config(Command::Ablate, None),
        Verb::GenSynthetic(c) => c.into_config(Command::GenSynthetic, None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = config_for(cli.command).and_then(|cfg| Ok(run(&cfg)?));
    match outcome {
        Ok(out) => {
            if let Some(table) = out.table {
                print!("{table}");
            }
            log::info!("artifacts in {}", out.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
