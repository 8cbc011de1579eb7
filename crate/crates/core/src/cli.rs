//! Command-line front end. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{generate_synthetic, load_corpus, pattern_purity, save_corpus, SyntheticSpec, TokenSequence};
use crate::error::Error;
use crate::generate::generate_batch;
use crate::metrics::{evaluate_records, metric_tokens, pd_over_set, GenerationRecord, PdConfig};
use crate::model::{ExpertBundle, ModelConfig, DEFAULT_D_MODEL, DEFAULT_GAMMA, DEFAULT_LAYERS};
use crate::projection::{sparsegen_lin, LogitVector, DEFAULT_LAMBDA};
use crate::train::{argmax_assignments, corpus_examples, route, OptimizerKind, TrainConfig, Trainer, DEFAULT_LEARNING_RATE};

#[derive(Debug, Parser)]
#[command(name = "spmoe", version, about = "Sparse pattern mixture of experts toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with known transformation patterns.
    Synth(SynthArgs),
    /// Train a pattern mixture model on a corpus.
    Train(TrainArgs),
    /// Decode every input under every pattern head.
    Generate(GenerateArgs),
    /// Score generation records for quality and diversity.
    Eval(EvalArgs),
    /// Show the sparse projection of a logit vector.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of ground-truth patterns.
    #[arg(long, default_value_t = 3)]
    pub patterns: usize,
    #[arg(long, default_value_t = 500)]
    pub sources: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pattern heads K.
    #[arg(long, short = 'k', default_value_t = 3)]
    pub experts: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = DEFAULT_D_MODEL)]
    pub d_model: usize,
    /// Encoder and decoder depth.
    #[arg(long, default_value_t = DEFAULT_LAYERS)]
    pub layers: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Stop after this many updates even if epochs remain.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long = "lr", default_value_t = DEFAULT_LEARNING_RATE)]
    pub learning_rate: f64,
    #[arg(long, default_value = "sgd")]
    pub optimizer: OptimizerKind,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Decay the learning rate linearly to zero at this step.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub decay_steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tilt the initial routing towards this head.
    #[arg(long)]
    pub favor_head: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub favor_bias: f64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Plain text (one source per line) or a corpus JSONL file. Corpus
    /// targets become the references of each record.
    #[arg(long)]
    pub input: PathBuf,
    /// Output records; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Longest output per head, in tokens.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_len: u32,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generation records, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// References aligned line by line with the records: a JSON list of
    /// strings or an object with a `references` field (and optionally `input`).
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Extra PD score with this maximum order.
    #[arg(long)]
    pub max_order: Option<usize>,
    /// Comma-separated PD weights; implies the maximum order.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Write the report as JSON to this path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Comma-separated logits; read from standard input when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub z: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA, allow_hyphen_values = true)]
    pub lambda: f64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses `args` and runs the chosen subcommand, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Project(a) => cmd_project(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let mut spec = SyntheticSpec::new(args.patterns, args.sources, args.seed);
    if let Some(v) = args.min_len {
        spec.min_len = v;
    }
    if let Some(v) = args.max_len {
        spec.max_len = v;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = generate_synthetic(&spec)?;
    save_corpus(&corpus, &args.out)?;
    println!("wrote {} pairs to {}", corpus.len(), args.out.display());
    for (k, rule) in spec.rules.iter().enumerate() {
        println!("pattern {k}: {rule}");
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    if args.experts < 2 {
        return Err(usage(format!("--experts must be >= 2, got {}", args.experts)));
    }
    if !(args.lambda < 1.0) {
        return Err(usage(format!("--lambda must be < 1, got {}", args.lambda)));
    }
    if !(args.gamma >= 0.0) {
        return Err(usage(format!("--gamma must be >= 0, got {}", args.gamma)));
    }
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    if args.favor_head.is_some_and(|h| h >= args.experts) {
        return Err(usage("--favor-head must name an existing head"));
    }

    let corpus = load_corpus(&args.corpus)?;
    let mut config = ModelConfig::new(
        corpus.vocab.len(),
        corpus.max_source_len(),
        corpus.max_target_len(),
        args.experts,
    )
    .with_width(args.d_model)
    .with_layers(args.layers);
    config.lambda = args.lambda;
    config.gamma = args.gamma;
    config.validate().map_err(|e| usage(e.to_string()))?;

    let mut bundle = ExpertBundle::new(config, corpus.vocab.clone(), args.seed)?;
    bundle.state.learning_rate = args.learning_rate;
    if let Some(head) = args.favor_head {
        bundle.bias_routing(head, args.favor_bias);
    }
    let examples = corpus_examples(&corpus);
    let mut trainer = Trainer::new(TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        optimizer: args.optimizer,
        clip_norm: args.clip_norm,
        decay_steps: args.decay_steps,
    })?;
    info!(
        "{} pairs, vocabulary {}, {} parameters",
        corpus.len(),
        corpus.vocab.len(),
        crate::nn::Parameters::num_parameters(&bundle.params)
    );

    let mut remaining = args.max_steps;
    for epoch in 1..=args.epochs {
        if remaining == Some(0) {
            break;
        }
        let mut rec = 0.0;
        let mut bal = 0.0;
        let mut usage_sum = vec![0.0; args.experts];
        let mut steps = 0usize;
        let outcome = trainer.run(&mut bundle, &examples, 1, remaining, |_, report| {
            rec += report.reconstruction;
            bal += report.balance;
            for (u, v) in usage_sum.iter_mut().zip(&report.usage) {
                *u += v;
            }
            steps += 1;
        });
        if let Err(e) = outcome {
            // The checkpoint on disk is from the last completed epoch.
            return Err(anyhow!(e).context("training stopped; last good checkpoint kept").into());
        }
        if let Some(r) = remaining.as_mut() {
            *r -= steps as u64;
        }
        let n = steps.max(1) as f64;
        let usage: Vec<String> = usage_sum.iter().map(|u| format!("{:.3}", u / n)).collect();
        let mut line = format!(
            "epoch {epoch} step {}: L_rec {:.4} L_balance {:.4} usage [{}]",
            bundle.state.step,
            rec / n,
            bal / n,
            usage.join(", ")
        );
        if corpus.pattern_count().is_some() {
            let routes = route(&bundle, &examples)?;
            let purity = pattern_purity(&argmax_assignments(&routes), &corpus)?;
            line.push_str(&format!(" purity {purity:.3}"));
        }
        info!("{line}");
        save_checkpoint(&bundle, &args.out)?;
    }
    save_checkpoint(&bundle, &args.out)?;
    println!("wrote checkpoint {} after {} steps", args.out.display(), bundle.state.step);
    Ok(())
}

fn read_generation_inputs(path: &Path) -> anyhow::Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    let is_corpus = first.is_some_and(|l| {
        serde_json::from_str::<serde_json::Value>(l).is_ok_and(|v| v.get("source").is_some())
    });
    if is_corpus {
        let corpus = load_corpus(path)?;
        return Ok(corpus
            .grouped_by_source()
            .into_iter()
            .map(|(src, pairs)| (src.text.clone(), pairs.iter().map(|p| p.target.text.clone()).collect()))
            .collect());
    }
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| (l.trim().to_owned(), Vec::new()))
        .collect())
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let bundle = load_checkpoint(&args.checkpoint)?;
    let inputs = read_generation_inputs(&args.input)?;
    if inputs.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no inputs", args.input.display())).into());
    }
    let mut unknown = 0;
    let mut sequences = Vec::with_capacity(inputs.len());
    for (text, _) in &inputs {
        let (ids, unk) = bundle.vocab.encode_lossy(text);
        unknown += unk;
        sequences.push(TokenSequence::new(ids, text.clone())?);
    }
    if unknown > 0 {
        warn!("{unknown} input tokens were not in the vocabulary and were mapped to <unk>");
    }
    let sets = generate_batch(&bundle, &sequences, args.max_len as usize)?;
    let truncated = sets.iter().flat_map(|s| &s.outputs).filter(|o| o.truncated).count();
    if truncated > 0 {
        warn!("{truncated} outputs hit the length limit before end-of-sequence");
    }
    let mut out = String::new();
    for (set, (_, refs)) in sets.iter().zip(inputs) {
        out.push_str(&serde_json::to_string(&set.to_record(refs)).context("encoding record")?);
        out.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, out).map_err(|e| Error::io(path, e))?,
        None => io::stdout().write_all(out.as_bytes()).context("writing records")?,
    }
    info!("generated {} records ({unknown} unknown tokens)", sets.len());
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push((idx + 1, value));
    }
    Ok(rows)
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ReferenceLine {
    List(Vec<String>),
    Record {
        #[serde(default)]
        input: Option<String>,
        references: Vec<String>,
    },
}

fn attach_references(records: &mut [GenerationRecord], record_lines: &[usize], path: &Path) -> CliResult {
    let refs: Vec<(usize, ReferenceLine)> = read_jsonl(path)?;
    for (i, rec) in records.iter_mut().enumerate() {
        let Some((line, entry)) = refs.get(i) else {
            return Err(anyhow!(
                "reference file {} ends before record on line {}",
                path.display(),
                record_lines[i]
            )
            .into());
        };
        rec.references = match entry {
            ReferenceLine::List(r) => r.clone(),
            ReferenceLine::Record { input, references } => {
                if input.as_ref().is_some_and(|inp| *inp != rec.input) {
                    return Err(anyhow!(
                        "{}:{line}: references are for {:?} but record line {} has input {:?}",
                        path.display(),
                        input.as_deref().unwrap_or_default(),
                        record_lines[i],
                        rec.input
                    )
                    .into());
                }
                references.clone()
            }
        };
    }
    if let Some((line, _)) = refs.get(records.len()) {
        return Err(anyhow!("{}:{line}: reference line has no matching record", path.display()).into());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let custom = match (&args.weights, args.max_order) {
        (Some(w), order) => {
            if order.is_some_and(|n| n != w.len()) {
                return Err(usage("--max-order disagrees with the number of --weights"));
            }
            Some(PdConfig::with_weights(w.clone()).map_err(|e| usage(e.to_string()))?)
        }
        (None, Some(n)) => Some(PdConfig::uniform(n).map_err(|e| usage(e.to_string()))?),
        (None, None) => None,
    };
    let rows: Vec<(usize, GenerationRecord)> = read_jsonl(&args.input)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no records", args.input.display())).into());
    }
    let (lines, mut records): (Vec<usize>, Vec<GenerationRecord>) = rows.into_iter().unzip();
    if let Some(path) = &args.references {
        attach_references(&mut records, &lines, path)?;
    }
    let report = evaluate_records(&records)?;
    println!("{report}");
    let mut json = serde_json::to_value(&report).context("encoding report")?;
    if let Some(cfg) = &custom {
        let mut total = 0.0;
        for rec in &records {
            let outs: Vec<Vec<String>> = rec.outputs.iter().map(|s| metric_tokens(s)).collect();
            total += pd_over_set(&outs, cfg)?;
        }
        let pd = total / records.len() as f64;
        println!("PD (weights {:?})  {pd:.4}", cfg.weights());
        json["pd_custom"] = serde_json::json!({ "weights": cfg.weights(), "value": pd });
    }
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&json).context("encoding report")?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn format_prob(p: f64) -> String {
    let s = format!("{p:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_owned() }
}

fn cmd_project(args: ProjectArgs) -> CliResult {
    if !(args.lambda < 1.0) {
        return Err(usage(format!("--lambda must be < 1, got {}", args.lambda)));
    }
    let z = match args.z {
        Some(z) => z,
        None => {
            let mut line = String::new();
            io::stdin().read_line(&mut line).context("reading logits from stdin")?;
            line.split([',', ' ', '\t'])
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| usage(format!("bad logit {s:?}: {e}"))))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let logits = LogitVector::new(z).map_err(|e| usage(e.to_string()))?;
    let sol = sparsegen_lin(&logits, args.lambda)?;
    let probs: Vec<String> = sol.probs().iter().map(|&p| format_prob(p)).collect();
    let support: Vec<String> = sol.support.iter().map(|i| i.to_string()).collect();
    println!("{}", probs.join(","));
    println!("support: {}", support.join(","));
    println!("tau: {}", sol.threshold);
    Ok(())
}
