//! The `scriptorium` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config;
use crate::eval::{self, EvalConfig, LabeledData, RecognizerCheckpoint};
use crate::forge::generate_corpus;
use crate::manifest::Manifest;
use crate::synthesize::{self, StitchOptions, DEFAULT_EXPORT_WORDS, DEFAULT_OVERLAP};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "scriptorium",
    version,
    about = "Forge template documents, restyle them with a reading-constrained CycleGAN, and measure the benefit for text recognition"
)]
pub struct Cli {
    /// Seed for every random stream; overrides seeds in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Minimum level of the JSON log records written to stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,

    /// Worker threads for tensor kernels (0 lets the backend decide).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn level(self) -> tracing::Level {
        match self {
            LogLevel::Error => tracing::Level::ERROR,
            LogLevel::Warn => tracing::Level::WARN,
            LogLevel::Info => tracing::Level::INFO,
            LogLevel::Debug => tracing::Level::DEBUG,
            LogLevel::Trace => tracing::Level::TRACE,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Typeset template pages with word-level ground truth.
    Forge(ForgeArgs),
    /// Train the generators, discriminators and recognizers jointly.
    Train(TrainArgs),
    /// Restyle every page of a manifest with a trained source-to-target generator.
    Synth(SynthArgs),
    /// Export a synthetic word-crop dataset from restyled pages.
    ExportWords(ExportArgs),
    /// Pretrain, fine-tune and score recognizers on a labeled word corpus.
    Eval(EvalArgs),
    /// Redraw the charts of an evaluation results CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    /// Layout specification (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    /// Plain-text token source, consumed cyclically.
    #[arg(long)]
    pub text: PathBuf,
    /// Number of pages to render.
    #[arg(long)]
    pub pages: usize,
    /// Output directory for pages and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Source-domain manifest (template pages with word boxes).
    #[arg(long)]
    pub source: PathBuf,
    /// Target-domain manifest (unlabeled style pages).
    #[arg(long)]
    pub target: PathBuf,
    /// Training config (TOML); omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from an epoch checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Training checkpoint holding the generators.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest of the pages to restyle.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for styled pages and their manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of the 256 px tile shared with its neighbour.
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Training checkpoint holding the generators.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source manifest whose words are restyled and cropped.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of word crops to export.
    #[arg(long, default_value_t = DEFAULT_EXPORT_WORDS)]
    pub n: usize,
    /// Output directory for word crops and their manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of the 256 px tile shared with its neighbour.
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Synthetic word manifest to pretrain on, or `none` to skip the pretrained model.
    #[arg(long)]
    pub pretrain: String,
    /// Labeled word or page manifest, split 70/15/15 by word instance.
    #[arg(long)]
    pub labeled: PathBuf,
    /// Externally pretrained recognizer: a recognizer checkpoint or a word manifest to pretrain on.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Fractions of the training split used for fine-tuning.
    #[arg(long, value_delimiter = ',', default_values_t = eval::SUBSET_GRID.to_vec())]
    pub subsets: Vec<f64>,
    /// Fine-tuning seeds; each (model, subset) cell runs once per seed.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// Evaluation config (TOML) for recognizer size and training schedule.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints, results.csv and charts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// results.csv written by `eval`.
    #[arg(long)]
    pub results: PathBuf,
    /// Output directory for the redrawn CSV and charts.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.log_level);
    if cli.threads > 0 {
        std::env::set_var("RAYON_NUM_THREADS", cli.threads.to_string());
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            tracing::error!(error = %format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn init_logging(level: LogLevel) {
    // a second call in the same process keeps the first subscriber
    let _ = tracing_subscriber::fmt()
        .json()
        .with_max_level(level.level())
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Forge(a) => {
            let spec = config::load_layout(&a.spec)?;
            let out = generate_corpus(&spec, &a.text, a.pages, seed, &a.out)?;
            tracing::info!(
                pages = out.pages,
                words = out.words,
                skipped_tokens = out.skipped_tokens,
                manifest = %out.manifest_path.display(),
                "forged corpus"
            );
        }
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => config::load_train_config(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let source = Manifest::load(&a.source)?;
            let target = Manifest::load(&a.target)?;
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            fs::write(a.out.join("config.toml"), config::dump(&cfg)?)
                .with_context(|| format!("writing config into {}", a.out.display()))?;
            let out = trainer::fit(&source, &target, &cfg, &a.out, a.resume.as_deref())?;
            tracing::info!(
                steps = out.trainer.step,
                checkpoints = out.checkpoints.len(),
                metrics = %out.metrics.display(),
                "training finished"
            );
        }
        Command::Synth(a) => {
            let opts = StitchOptions::with_overlap(a.overlap);
            opts.validate()?;
            let bundle = Checkpoint::load(&a.ckpt)?.to_bundle()?;
            let manifest = Manifest::load(&a.manifest)?;
            let path = synthesize::synthesize_manifest(&bundle.g, &manifest, &opts, &a.out)?;
            tracing::info!(pages = manifest.len(), manifest = %path.display(), "restyled pages");
        }
        Command::ExportWords(a) => {
            let opts = StitchOptions::with_overlap(a.overlap);
            opts.validate()?;
            let bundle = Checkpoint::load(&a.ckpt)?.to_bundle()?;
            let manifest = Manifest::load(&a.manifest)?;
            let out = synthesize::export_word_dataset(&bundle.g, &manifest, a.n, seed, &a.out, &opts)?;
            tracing::info!(
                words = out.words,
                distinct = out.distinct,
                duplicates = out.duplicates,
                manifest = %out.manifest_path.display(),
                "exported word crops"
            );
        }
        Command::Eval(a) => run_eval(a, seed)?,
        Command::Report(a) => {
            let records = eval::read_report(&a.results)?;
            let out = eval::report(&records, &a.out)?;
            tracing::info!(records = records.len(), series = out.series, "report written");
        }
    }
    Ok(())
}

fn run_eval(a: &EvalArgs, seed: u64) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => config::load::<EvalConfig>(p)?,
        None => EvalConfig::default(),
    };
    cfg.subsets.clone_from(&a.subsets);
    cfg.seeds.clone_from(&a.seeds);
    cfg.validate()?;
    if cfg.seeds.is_empty() || cfg.subsets.is_empty() {
        bail!("--subsets and --seeds must each name at least one value");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let synthetic = match a.pretrain.as_str() {
        "none" => None,
        path => Some(pretrain_from_manifest(Path::new(path), &cfg, seed, &a.out.join("syn_pretrained.ckpt"))?),
    };
    let external = match &a.external {
        None => None,
        Some(p) if p.extension().is_some_and(|e| e == "jsonl") => {
            Some(pretrain_from_manifest(p, &cfg, seed, &a.out.join("ext_pretrained.ckpt"))?)
        }
        Some(p) => Some(RecognizerCheckpoint::load(p)?),
    };
    let data = LabeledData::from_manifest(&Manifest::load(&a.labeled)?, seed)?;
    tracing::info!(
        train = data.splits.train.len(),
        validation = data.splits.validation.len(),
        test = data.splits.test.len(),
        "labeled corpus split"
    );
    let records = eval::run_protocol(synthetic.as_ref(), external.as_ref(), &data, &cfg)?;
    let out = eval::report(&records, &a.out)?;
    tracing::info!(records = records.len(), csv = %out.csv.display(), "evaluation finished");
    Ok(())
}

fn pretrain_from_manifest(path: &Path, cfg: &EvalConfig, seed: u64, save_to: &Path) -> anyhow::Result<RecognizerCheckpoint> {
    let manifest = Manifest::load(path)?;
    let samples = eval::load_word_samples(&manifest)?;
    tracing::info!(words = samples.len(), manifest = %path.display(), "pretraining recognizer");
    let out = eval::pretrain_recognizer(&samples, cfg, seed)?;
    out.checkpoint.save(save_to)?;
    Ok(out.checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_six_subcommands() {
        let names: Vec<String> = Cli::command()
            .get_subcommands()
            .map(|c| c.get_name().to_string())
            .collect();
        assert_eq!(names, ["forge", "train", "synth", "export-words", "eval", "report"]);
        assert_eq!(main_with(["scriptorium", "--help"]), EXIT_OK);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with(["scriptorium", "--bogus"]), EXIT_USAGE);
        assert_eq!(main_with(["scriptorium", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with(["scriptorium", "forge", "--text", "t", "--pages", "1", "--out", "o"]), EXIT_USAGE);
        let err = Cli::try_parse_from(["scriptorium", "forge", "--text", "t", "--pages", "1", "--out", "o"]).unwrap_err();
        assert!(err.to_string().contains("--spec"));
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.toml");
        let out = dir.path().join("out");
        let code = main_with([
            "scriptorium".as_ref(),
            "forge".as_ref(),
            "--spec".as_ref(),
            missing.as_os_str(),
            "--text".as_ref(),
            missing.as_os_str(),
            "--pages".as_ref(),
            "1".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ] as [&std::ffi::OsStr; 10]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn eval_lists_parse_with_commas() {
        let cli = Cli::try_parse_from([
            "scriptorium", "--seed", "4", "eval", "--pretrain", "none", "--labeled", "l.jsonl", "--subsets", "0.1,0.5", "--seeds", "7,8", "--out", "o",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(4));
        let Command::Eval(a) = cli.command else { panic!("not eval") };
        assert_eq!(a.subsets, [0.1, 0.5]);
        assert_eq!(a.seeds, [7, 8]);
        let cli = Cli::try_parse_from(["scriptorium", "eval", "--pretrain", "none", "--labeled", "l", "--out", "o"]).unwrap();
        let Command::Eval(a) = cli.command else { panic!("not eval") };
        assert_eq!(a.subsets, eval::SUBSET_GRID);
        assert_eq!(a.seeds, [1, 2, 3]);
    }
}
