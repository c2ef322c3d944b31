//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure (divergence, failed request),
//! 2 usage, input or IO error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqchat_core::corpus::{parse_buckets, preprocess, PreprocessOptions, PreprocessStats, Vocab, SPECIAL_TOKENS};
use seqchat_core::model::ModelConfig;
use seqchat_core::train::{
    copy_task_config, copy_task_pairs, evaluate, held_out, train, AdamState, EpochEvent, TrainError, TrainObserver,
    TrainOptions,
};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::engine::{ChatEngine, EngineError};
use crate::formats::{read_vocab, write_vocab, Dataset, FormatError};
use crate::service::{self, AppState, ServiceOptions, DEFAULT_BIND, DEFAULT_MAX_IN_FLIGHT};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, inputs or files. Exit code 2.
    Input(String),
    /// Failure while doing the work. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Input(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Input(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Input(e.to_string())
    }
}

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "seqchat", version, about = "Train, evaluate and serve a sequence-to-sequence chatbot")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a movie-dialog corpus into dataset.txt, vocab.txt and stats.txt.
    Preprocess(PreprocessArgs),
    /// Write the synthetic echo-task dataset with a matching config.txt.
    CopyTask(CopyTaskArgs),
    /// Train a model, writing checkpoints and report.txt to --out.
    Train(TrainArgs),
    /// Teacher-forced perplexity and token accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Chat in the terminal. `/quit` or end of input exits.
    Chat(ChatArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Utterance file, one `id SEP character SEP movie SEP [name SEP] text` per line.
    #[arg(long)]
    lines: PathBuf,
    /// Conversation file, each line ending in a list of utterance ids.
    #[arg(long)]
    conversations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = seqchat_core::corpus::DEFAULT_MIN_LEN)]
    min_len: usize,
    #[arg(long, default_value_t = seqchat_core::corpus::DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Most frequent words kept, not counting the special tokens.
    #[arg(long, default_value_t = seqchat_core::corpus::DEFAULT_KEEP_N)]
    keep_words: usize,
    /// Bucket list such as "5,10;10,15;20,25;40,50".
    #[arg(long)]
    buckets: Option<String>,
    #[arg(long)]
    reverse_source: Option<bool>,
    #[arg(long, default_value = seqchat_core::corpus::DEFAULT_SEPARATOR)]
    separator: String,
}

#[derive(Args)]
struct CopyTaskArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pairs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Configuration layers: preset, then `--config` file, then single flags.
#[derive(Args)]
struct ModelFlags {
    /// File of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "config3")]
    preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embedding_size: Option<usize>,
    #[arg(long)]
    rnn_size: Option<usize>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    buckets: Option<String>,
    #[arg(long)]
    reverse_source: Option<bool>,
}

impl ModelFlags {
    fn resolve(&self) -> Result<ModelConfig, CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Input(e.to_string());
        let mut cfg = ModelConfig::preset(&self.preset).map_err(|e| usage(&e))?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            cfg.apply_kv_text(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        }
        let overrides: [(&str, Option<String>); 8] = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("embedding_size", self.embedding_size.map(|v| v.to_string())),
            ("rnn_size", self.rnn_size.map(|v| v.to_string())),
            ("keep_probability", self.keep_prob.map(|v| v.to_string())),
            ("beam_width", self.beam.map(|v| v.to_string())),
            ("buckets", self.buckets.clone()),
            ("reverse_source", self.reverse_source.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v).map_err(|e| usage(&e))?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Defaults to vocab.txt next to the dataset.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out pairs; defaults to one batch.
    #[arg(long)]
    validation_size: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// The pairs held out when the checkpoint was trained.
    HeldOut,
    /// The pairs it was trained on.
    Train,
    /// Every pair in the dataset.
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "held-out")]
    split: Split,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides the checkpoint's beam width.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = DEFAULT_BIND)]
    bind: String,
    /// Overrides the checkpoint's beam width.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_IN_FLIGHT)]
    max_in_flight: usize,
    /// Serve the web client from this directory instead of the built-in copy.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Append a JSON line per reply to this file.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdin = io::stdin();
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::CopyTask(a) => cmd_copy_task(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Chat(a) => cmd_chat(&a, &mut stdin.lock(), &mut io::stdout()),
        Command::Serve(a) => cmd_serve(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn stats_text(s: &PreprocessStats, dataset_pairs: usize) -> String {
    format!(
        "raw utterances: {}\nskipped lines: {}\nconversations: {}\nmalformed conversations: {}\npairs: {}\n\
         filtered pairs: {}\ndiscarded by bucket: {}\ndataset pairs: {}\nvocab size: {}\n",
        s.raw_utterances,
        s.skipped_lines,
        s.conversations,
        s.malformed_conversations,
        s.pairs,
        s.filtered_pairs,
        s.discarded_by_bucket,
        dataset_pairs,
        s.vocab_size,
    )
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<(), CliError> {
    let lines = fs::read(&a.lines).map_err(|e| io_error(&a.lines, e))?;
    let conversations = fs::read(&a.conversations).map_err(|e| io_error(&a.conversations, e))?;
    let mut opts = PreprocessOptions {
        separator: a.separator.clone(),
        min_len: a.min_len,
        max_len: a.max_len,
        keep_n: a.keep_words,
        ..PreprocessOptions::default()
    };
    if let Some(b) = &a.buckets {
        opts.buckets = parse_buckets(b).map_err(|e| CliError::Input(e.to_string()))?;
    }
    if let Some(r) = a.reverse_source {
        opts.reverse_source = r;
    }
    let out = preprocess(&lines, &conversations, &opts).map_err(|e| CliError::Input(e.to_string()))?;
    if out.stats.skipped_lines > 0 {
        eprintln!("warning: skipped {} unreadable utterance lines", out.stats.skipped_lines);
    }
    if out.stats.malformed_conversations > 0 {
        eprintln!("warning: skipped {} malformed conversation lines", out.stats.malformed_conversations);
    }

    create_dir(&a.out)?;
    let dataset = Dataset { vocab_size: out.vocab.len(), buckets: opts.buckets.clone(), pairs: out.pairs };
    dataset.write(&a.out.join("dataset.txt"))?;
    write_vocab(&out.vocab, &a.out.join("vocab.txt"))?;
    let stats = stats_text(&out.stats, dataset.pairs.len());
    write_file(&a.out.join("stats.txt"), &stats)?;
    print!("{stats}");
    Ok(())
}

/// Vocabulary of the echo task: the special tokens, then one letter per id.
pub fn copy_task_vocab(vocab_size: usize) -> Vocab {
    let mut words: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    words.extend((0..vocab_size.saturating_sub(SPECIAL_TOKENS.len())).map(|k| {
        let (hi, lo) = (k / 26, k % 26);
        let letter = char::from(b'a' + lo as u8);
        if hi == 0 {
            letter.to_string()
        } else {
            format!("{}{letter}", char::from(b'a' + (hi - 1) as u8))
        }
    }));
    Vocab::from_words(&words).expect("letters are unique")
}

fn cmd_copy_task(a: &CopyTaskArgs) -> Result<(), CliError> {
    let cfg = copy_task_config();
    let pairs = copy_task_pairs(a.pairs, cfg.vocab_size, cfg.reverse_source, a.seed);
    create_dir(&a.out)?;
    let dataset = Dataset { vocab_size: cfg.vocab_size, buckets: cfg.buckets.clone(), pairs };
    dataset.write(&a.out.join("dataset.txt"))?;
    write_vocab(&copy_task_vocab(cfg.vocab_size), &a.out.join("vocab.txt"))?;
    let mut text = cfg.to_kv_lines().join("\n");
    text.push('\n');
    write_file(&a.out.join("config.txt"), text)?;
    println!("wrote {} echo pairs to {}", a.pairs, a.out.display());
    Ok(())
}

struct CliObserver<'a> {
    out: &'a Path,
    config: &'a ModelConfig,
    vocab: &'a Vocab,
    seed: u64,
    validation: usize,
    started: Instant,
    report: String,
}

pub const REPORT_HEADER: &str = "epoch\ttrain_loss\tvalidation_loss\tlearning_rate\twall_ms\n";

impl CliObserver<'_> {
    fn save(
        &self,
        name: &str,
        params: &seqchat_core::model::Seq2SeqParams<f32>,
        adam: &AdamState<f32>,
        epoch: usize,
    ) -> Result<(), String> {
        let cp = Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: params.clone(),
            adam: Some(adam.clone()),
            epoch,
            seed: self.seed,
            validation: self.validation,
        };
        cp.save(&self.out.join(name)).map_err(|e| e.to_string())
    }
}

impl TrainObserver for CliObserver<'_> {
    fn on_epoch(&mut self, event: &EpochEvent<'_>) -> Result<(), String> {
        let r = event.report;
        let val = r.validation_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
        let wall = r.wall_ms.unwrap_or(0.0);
        self.report.push_str(&format!(
            "{}\t{:.6}\t{val}\t{:.6e}\t{wall:.0}\n",
            r.epoch + 1,
            r.train_loss,
            r.learning_rate
        ));
        println!(
            "epoch {:>4}  train_loss {:.4}  validation_loss {}  lr {:.3e}  {:.1}s{}",
            r.epoch + 1,
            r.train_loss,
            r.validation_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
            r.learning_rate,
            wall / 1000.0,
            if event.best { "  *" } else { "" },
        );
        fs::write(self.out.join("report.txt"), &self.report).map_err(|e| e.to_string())?;
        self.save("model.sqc", event.params, event.adam, r.epoch + 1)?;
        if event.best {
            self.save("best.sqc", event.params, event.adam, r.epoch + 1)?;
        }
        Ok(())
    }

    fn now_ms(&mut self) -> Option<f64> {
        Some(self.started.elapsed().as_secs_f64() * 1000.0)
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let ds = Dataset::read(path)?;
    if ds.pairs.is_empty() {
        return Err(CliError::Input(format!("{}: no pairs", path.display())));
    }
    Ok(ds)
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&a.dataset)?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| a.dataset.with_file_name("vocab.txt"));
    let vocab = read_vocab(&vocab_path)?;
    if vocab.len() != dataset.vocab_size {
        return Err(CliError::Input(format!(
            "vocabulary mismatch: {} has {} words, dataset declares {}",
            vocab_path.display(),
            vocab.len(),
            dataset.vocab_size
        )));
    }
    let mut config = a.model.resolve()?;
    if a.model.buckets.is_some() && config.buckets != dataset.buckets {
        return Err(CliError::Input("--buckets differs from the dataset's buckets".into()));
    }
    config.vocab_size = dataset.vocab_size;
    config.buckets = dataset.buckets.clone();
    config.validate().map_err(|e| CliError::Input(e.to_string()))?;

    let opts = TrainOptions { validation_size: a.validation_size, ..TrainOptions::seeded(a.seed) };
    let validation = opts.validation_size.unwrap_or(config.batch_size);
    create_dir(&a.out)?;
    println!(
        "training on {} pairs: vocab {}, embedding {}, rnn {}, batch {}, keep {}, {} epochs, seed {}",
        dataset.pairs.len(),
        config.vocab_size,
        config.embedding_size,
        config.rnn_size,
        config.batch_size,
        config.keep_probability,
        config.epochs,
        a.seed
    );
    let mut observer = CliObserver {
        out: &a.out,
        config: &config,
        vocab: &vocab,
        seed: a.seed,
        validation,
        started: Instant::now(),
        report: REPORT_HEADER.to_string(),
    };
    write_file(&a.out.join("report.txt"), &observer.report)?;
    match train(&dataset.pairs, &config, &opts, &mut observer) {
        Ok(outcome) => {
            if outcome.report.epochs.is_empty() {
                observer.save("model.sqc", &outcome.params, &outcome.adam, 0).map_err(CliError::Runtime)?;
                println!("saved initial parameters to {}", a.out.join("model.sqc").display());
            }
            if let Some(last) = outcome.report.epochs.last() {
                let val = last.validation_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("final train_loss {:.4} validation_loss {val}", last.train_loss);
            }
            Ok(())
        }
        Err(TrainError::Diverged { epoch, batch, last_good }) => {
            let adam = AdamState::new(&last_good);
            let saved = observer.save("last_good.sqc", &last_good, &adam, epoch);
            let note = match saved {
                Ok(()) => {
                    format!("; parameters from before the epoch saved to {}", a.out.join("last_good.sqc").display())
                }
                Err(e) => format!("; could not save parameters: {e}"),
            };
            Err(CliError::Runtime(format!("training diverged at epoch {}, batch {batch}{note}", epoch + 1)))
        }
        Err(TrainError::InsufficientData { pairs, validation }) => Err(CliError::Input(format!(
            "dataset of {pairs} pairs cannot spare {validation} validation pairs (see --validation-size)"
        ))),
        Err(e) => Err(CliError::Runtime(e.to_string())),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&a.dataset)?;
    let cp = Checkpoint::load(&a.checkpoint)?;
    if dataset.vocab_size != cp.vocab.len() {
        return Err(CliError::Input(format!(
            "vocabulary mismatch: dataset has {} ids, checkpoint has {}",
            dataset.vocab_size,
            cp.vocab.len()
        )));
    }
    if dataset.buckets != cp.config.buckets {
        return Err(CliError::Input("dataset and checkpoint use different buckets".into()));
    }
    let opts = TrainOptions { validation_size: Some(cp.validation), ..TrainOptions::seeded(cp.seed) };
    let pairs = match a.split {
        Split::All => dataset.pairs,
        Split::HeldOut | Split::Train => {
            let (train_pairs, held) =
                held_out(&dataset.pairs, &cp.config, &opts).map_err(|e| CliError::Input(e.to_string()))?;
            if matches!(a.split, Split::HeldOut) {
                held
            } else {
                train_pairs
            }
        }
    };
    if pairs.is_empty() {
        return Err(CliError::Input("no pairs in the selected split (try --split all)".into()));
    }
    let stats = evaluate(&cp.params, &pairs, cp.config.batch_size).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("pairs {}", pairs.len());
    println!("tokens {}", stats.tokens);
    println!("loss {:.6}", stats.mean_loss());
    println!("perplexity {:.4}", stats.perplexity());
    println!("accuracy {:.4}", stats.accuracy());
    Ok(())
}

fn load_engine(path: &Path, beam: Option<usize>) -> Result<ChatEngine, CliError> {
    if beam == Some(0) {
        return Err(CliError::Input("--beam must be at least 1".into()));
    }
    Ok(ChatEngine::new(Checkpoint::load(path)?, beam))
}

fn cmd_chat(a: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let engine = load_engine(&a.checkpoint, a.beam)?;
    let io = |e: io::Error| CliError::Runtime(e.to_string());
    let mut line = String::new();
    loop {
        write!(out, "Human: ").and_then(|_| out.flush()).map_err(io)?;
        line.clear();
        if input.read_line(&mut line).map_err(io)? == 0 {
            writeln!(out).map_err(io)?;
            return Ok(());
        }
        let text = line.trim();
        if text == "/quit" {
            return Ok(());
        }
        if text.is_empty() {
            continue;
        }
        match engine.reply(text) {
            Ok(r) => writeln!(out, "Bot: {}", r.reply).map_err(io)?,
            Err(EngineError::BadRequest(m)) => eprintln!("{m}"),
            Err(e) => return Err(CliError::Runtime(e.to_string())),
        }
    }
}

fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let engine = load_engine(&a.checkpoint, a.beam)?;
    if let Some(dir) = &a.static_dir {
        if !dir.is_dir() {
            return Err(CliError::Input(format!("{}: not a directory", dir.display())));
        }
    }
    let opts = ServiceOptions {
        max_in_flight: a.max_in_flight,
        static_dir: a.static_dir.clone(),
        transcript: a.transcript.clone(),
        checkpoint_label: a.checkpoint.display().to_string(),
    };
    let state = AppState::new(Some(engine), opts).map_err(|e| CliError::Input(format!("transcript: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::Input(format!("cannot bind {}: {e}", a.bind)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("listening on http://{addr}");
        service::serve(listener, state, service::shutdown_signal()).await.map_err(|e| CliError::Runtime(e.to_string()))
    })
}
