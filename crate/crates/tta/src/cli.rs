//! Command-line entry point wiring vocabulary building, training, scoring,
//! reranking, similarity evaluation and benchmarking.
//!
//! Every command writes a manifest with its fully resolved configuration
//! next to its primary output; `--manifest` replays a stored configuration,
//! with explicit flags taking precedence over manifest values and manifest
//! values over built-in defaults.

use crate::bench::{bench_model, fit_exponent, time_scoring, TaskKind, TimingTable};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::model::{
    load_checkpoint, save_checkpoint, Architecture, Model, ModelConfig, ModelParams,
};
use crate::scalar::Scalar;
use crate::scoring::{
    attach_references, default_lambda_grid, pseudo_perplexity, read_nbest, rerank, score_corpus,
    tune_lambda, write_reranked, Aggregate, RankedHypothesis, TuneMetric,
};
use crate::sts::{eval_sts, read_pairs, write_per_pair, RepSource};
use crate::text::{read_corpus, EncodedSentence, Vocab, VocabMode};
use crate::train::{history_csv, train, InitKind, Objective, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Cli(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "tta",
    about = "Single-pass bidirectional language representations: train, score, rerank, compare",
    version,
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file (one token per line, specials first).
    Vocab(VocabArgs),
    /// Train a model; writes checkpoint, vocab, config, loss curve, manifest.
    Train(Box<TrainArgs>),
    /// Score sentences with a trained model.
    ///
    /// Input: UTF-8 text, one sentence per line. Output TSV, one row per
    /// sentence: `score<TAB>n_interior<TAB>text`.
    Score(ScoreArgs),
    /// Rerank an N-best list by interpolating language-model scores.
    ///
    /// Input TSV: `group_id<TAB>score_s2s<TAB>hypothesis_text`.
    /// Reference TSV: `group_id<TAB>reference_text`.
    /// Output TSV: input columns plus `score_lm<TAB>score_combined<TAB>rank`,
    /// rows sorted by rank within each group.
    Rerank(RerankArgs),
    /// Unsupervised semantic similarity over a pair file.
    ///
    /// Input TSV: `score<TAB>sentence_a<TAB>sentence_b`. Prints
    /// `pearson_r=<value>`; `--per-pair` adds a `cosine,gold` CSV.
    Sts(StsArgs),
    /// Wall-clock scaling sweep over sequence lengths.
    ///
    /// Output CSV: `model,task,n,reps,mean_s,std_s`, then summary lines with
    /// fitted log-log slopes and speedup ratios. Runs 32-bit, single thread.
    Bench(BenchArgs),
}

// ----- vocab -----

#[derive(Args)]
struct VocabArgs {
    /// Corpus file: UTF-8, one sentence per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Where to write the vocabulary.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Tokenization mode: word | char.
    #[arg(long)]
    mode: Option<VocabMode>,
    /// Maximum vocabulary size including the 5 specials.
    #[arg(long)]
    max_size: Option<usize>,
    /// Replay a stored manifest; explicit flags still win.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabConfig {
    input: PathBuf,
    output: PathBuf,
    mode: VocabMode,
    max_size: usize,
}

fn run_vocab(args: VocabArgs) -> Result<()> {
    let base: Option<VocabConfig> = load_base(&args.manifest)?;
    let cfg = VocabConfig {
        input: require("--input", args.input.or(base.as_ref().map(|b| b.input.clone())))?,
        output: require("--output", args.output.or(base.as_ref().map(|b| b.output.clone())))?,
        mode: args.mode.or(base.as_ref().map(|b| b.mode)).unwrap_or(VocabMode::Word),
        max_size: args.max_size.or(base.as_ref().map(|b| b.max_size)).unwrap_or(2000),
    };
    let lines = read_corpus(&cfg.input)?;
    let vocab = Vocab::build(&lines, cfg.mode, cfg.max_size)?;
    vocab.save(&cfg.output)?;
    RunManifest::new("vocab", 0)
        .input("corpus", &cfg.input)
        .output("vocab", &cfg.output)
        .with_config(&cfg)?
        .save(&manifest_path(&cfg.output))?;
    println!("wrote {} tokens to {}", vocab.size(), cfg.output.display());
    Ok(())
}

// ----- train -----

#[derive(Args)]
struct TrainArgs {
    /// Training corpus: UTF-8, one sentence per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Existing vocabulary file; built from the corpus when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output directory for checkpoint, vocab, config, loss curve, manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Objective: lae | clm | mlm (architecture follows the objective).
    #[arg(long)]
    objective: Option<Objective>,
    /// Ablation: disable the attention diagonal mask (tta only).
    #[arg(long)]
    no_diag_mask: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    vocab_mode: Option<VocabMode>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    mlm_mask_rate: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Master seed; init/masking/shuffling/dropout draw from named streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter initialization: normal | zero.
    #[arg(long)]
    init: Option<InitKind>,
    /// Numeric precision: f32 | f64.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Fully resolved training run; stored in both the manifest and the model
/// directory's config.json.
#[derive(Clone, Serialize, Deserialize)]
pub struct ModelDirConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_mode: VocabMode,
    pub precision: Precision,
    pub init: InitKind,
}

#[derive(Clone, Serialize, Deserialize)]
struct TrainCmdConfig {
    corpus: PathBuf,
    vocab: Option<PathBuf>,
    out_dir: PathBuf,
    #[serde(flatten)]
    dir: ModelDirConfig,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let base: Option<TrainCmdConfig> = load_base(&args.manifest)?;
    let b = base.as_ref();
    let objective = args
        .objective
        .or(b.map(|b| b.dir.train.objective))
        .unwrap_or(Objective::Lae);
    let seed = args.seed.or(b.map(|b| b.dir.train.seed)).unwrap_or(42);

    let mut model = ModelConfig::desk(objective.architecture(), 0);
    if let Some(b) = b {
        model = b.dir.model.clone();
        model.architecture = objective.architecture();
    }
    if let Some(v) = args.layers {
        model.num_layers = v;
    }
    if let Some(v) = args.dim {
        model.model_dim = v;
    }
    if let Some(v) = args.heads {
        model.num_heads = v;
    }
    if let Some(v) = args.ffn_dim {
        model.ffn_dim = v;
    }
    if let Some(v) = args.max_len {
        model.max_seq_len = v;
    }
    if let Some(v) = args.dropout {
        model.dropout_rate = v;
    }
    if args.no_diag_mask {
        model.diag_mask_enabled = false;
    }

    let mut tc = TrainConfig::desk(objective);
    if let Some(b) = b {
        tc = b.dir.train.clone();
        tc.objective = objective;
    }
    tc.seed = seed;
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.steps {
        tc.total_steps = v;
    }
    if let Some(v) = args.warmup {
        tc.warmup_steps = v;
    }
    if let Some(v) = args.lr {
        tc.peak_lr = v;
    }
    if let Some(v) = args.beta1 {
        tc.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        tc.beta2 = v;
    }
    if let Some(v) = args.eps {
        tc.eps = v;
    }
    if let Some(v) = args.mlm_mask_rate {
        tc.mlm_mask_rate = v;
    }
    if let Some(v) = args.checkpoint_every {
        tc.checkpoint_every = v;
    }

    let cfg = TrainCmdConfig {
        corpus: require("--corpus", args.corpus.or(b.map(|b| b.corpus.clone())))?,
        vocab: args.vocab.or(b.and_then(|b| b.vocab.clone())),
        out_dir: require("--out-dir", args.out_dir.or(b.map(|b| b.out_dir.clone())))?,
        dir: ModelDirConfig {
            model,
            train: tc,
            vocab_mode: args
                .vocab_mode
                .or(b.map(|b| b.dir.vocab_mode))
                .unwrap_or(VocabMode::Word),
            precision: args
                .precision
                .or(b.map(|b| b.dir.precision))
                .unwrap_or(Precision::F64),
            init: args.init.or(b.map(|b| b.dir.init)).unwrap_or(InitKind::Normal),
        },
    };
    match cfg.dir.precision {
        Precision::F64 => run_train_typed::<f64>(cfg),
        Precision::F32 => run_train_typed::<f32>(cfg),
    }
}

fn run_train_typed<S: Scalar>(mut cfg: TrainCmdConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let lines = read_corpus(&cfg.corpus)?;
    let vocab = match &cfg.vocab {
        Some(path) => Vocab::load(path, cfg.dir.vocab_mode)?,
        None => {
            let max = if cfg.dir.model.vocab_size > 0 {
                cfg.dir.model.vocab_size
            } else {
                2000
            };
            Vocab::build(&lines, cfg.dir.vocab_mode, max)?
        }
    };
    cfg.dir.model.vocab_size = vocab.size();
    let ckpt_dir = cfg.out_dir.clone();
    let mut sink = move |step: usize, params: &ModelParams<S>| -> Result<()> {
        save_checkpoint(params, &ckpt_dir.join(format!("checkpoint-{step}.ckpt")))
    };
    let outcome = train::<S>(
        &lines,
        &vocab,
        &cfg.dir.model,
        &cfg.dir.train,
        cfg.dir.init,
        Some(&mut sink),
    )?;

    let ckpt = cfg.out_dir.join("checkpoint.ckpt");
    save_checkpoint(&outcome.model.params, &ckpt)?;
    vocab.save(&cfg.out_dir.join("vocab.txt"))?;
    std::fs::write(
        cfg.out_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg.dir).map_err(|e| Error::Cli(e.to_string()))? + "\n",
    )?;
    std::fs::write(cfg.out_dir.join("loss.csv"), history_csv(&outcome.history))?;
    RunManifest::new("train", cfg.dir.train.seed)
        .input("corpus", &cfg.corpus)
        .output("checkpoint", &ckpt)
        .output("loss_curve", cfg.out_dir.join("loss.csv"))
        .with_config(&cfg)?
        .save(&cfg.out_dir.join("manifest.json"))?;
    let last = outcome.history.last().map(|p| p.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {last}, checkpoint {}",
        cfg.dir.train.total_steps,
        ckpt.display()
    );
    Ok(())
}

/// Loads checkpoint + vocab + config from a `train` output directory.
pub fn load_model_dir<S: Scalar>(dir: &Path) -> Result<(Model<S>, Vocab, ModelDirConfig)> {
    let text = std::fs::read_to_string(dir.join("config.json"))?;
    let cfg: ModelDirConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: dir.join("config.json").display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let vocab = Vocab::load(&dir.join("vocab.txt"), cfg.vocab_mode)?;
    let params = load_checkpoint(
        ModelParams::<S>::zeros(&cfg.model),
        &dir.join("checkpoint.ckpt"),
    )?;
    Ok((Model::new(cfg.model.clone(), params)?, vocab, cfg))
}

// ----- score -----

#[derive(Args)]
struct ScoreArgs {
    /// Model directory produced by `train`.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Sentence file, one per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output TSV; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Aggregation over interior tokens: sum | mean.
    #[arg(long)]
    aggregate: Option<Aggregate2>,
    /// Also print corpus pseudo-perplexity (average and median).
    #[arg(long)]
    pppl: bool,
    /// Worker threads for scoring.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

// clap needs ValueEnum-ish parsing; reuse FromStr through a wrapper alias.
type Aggregate2 = Aggregate;

#[derive(Clone, Serialize, Deserialize)]
struct ScoreConfig {
    model_dir: PathBuf,
    input: PathBuf,
    output: Option<PathBuf>,
    aggregate: String,
    pppl: bool,
    threads: usize,
    precision: Precision,
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let base: Option<ScoreConfig> = load_base(&args.manifest)?;
    let b = base.as_ref();
    let cfg = ScoreConfig {
        model_dir: require("--model-dir", args.model_dir.or(b.map(|b| b.model_dir.clone())))?,
        input: require("--input", args.input.or(b.map(|b| b.input.clone())))?,
        output: args.output.or(b.and_then(|b| b.output.clone())),
        aggregate: args
            .aggregate
            .map(|a| format!("{a:?}").to_lowercase())
            .or(b.map(|b| b.aggregate.clone()))
            .unwrap_or_else(|| "sum".into()),
        pppl: args.pppl || b.map(|b| b.pppl).unwrap_or(false),
        threads: args.threads.or(b.map(|b| b.threads)).unwrap_or(1),
        precision: args
            .precision
            .or(b.map(|b| b.precision))
            .unwrap_or(Precision::F64),
    };
    match cfg.precision {
        Precision::F64 => run_score_typed::<f64>(cfg),
        Precision::F32 => run_score_typed::<f32>(cfg),
    }
}

fn run_score_typed<S: Scalar>(cfg: ScoreConfig) -> Result<()> {
    let (model, vocab, _) = load_model_dir::<S>(&cfg.model_dir)?;
    let aggregate: Aggregate = cfg.aggregate.parse()?;
    let lines = read_corpus(&cfg.input)?;
    let sentences: Vec<EncodedSentence> = lines
        .iter()
        .map(|l| vocab.encode(l, model.config.max_seq_len))
        .collect::<Result<_>>()?;
    let scored = score_corpus(&sentences, &model, aggregate, cfg.threads)?;
    let mut out = String::new();
    for (s, line) in scored.iter().zip(&lines) {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            s.score,
            s.token_log_likelihoods.len(),
            line
        ));
    }
    match &cfg.output {
        Some(path) => {
            std::fs::write(path, &out)?;
            RunManifest::new("score", 0)
                .input("model_dir", &cfg.model_dir)
                .input("sentences", &cfg.input)
                .output("scores", path)
                .with_config(&cfg)?
                .save(&manifest_path(path))?;
        }
        None => print!("{out}"),
    }
    if cfg.pppl {
        let ppl = pseudo_perplexity(&sentences, &model, cfg.threads)?;
        println!("pppl_avg={}\tpppl_median={}", ppl.avg, ppl.median);
    }
    Ok(())
}

// ----- rerank -----

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// N-best TSV input.
    #[arg(long)]
    nbest: Option<PathBuf>,
    /// Reranked TSV output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Interpolation weight in [0, 1]; ignored with --tune-lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Pick lambda by grid search against references.
    #[arg(long)]
    tune_lambda: bool,
    /// Reference TSV (required for tuning).
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Tuning metric: wer | accuracy.
    #[arg(long)]
    metric: Option<TuneMetric>,
    #[arg(long)]
    aggregate: Option<Aggregate2>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RerankConfig {
    model_dir: PathBuf,
    nbest: PathBuf,
    output: PathBuf,
    lambda: Option<f64>,
    tune_lambda: bool,
    refs: Option<PathBuf>,
    metric: String,
    aggregate: String,
    threads: usize,
    precision: Precision,
}

fn run_rerank(args: RerankArgs) -> Result<()> {
    let base: Option<RerankConfig> = load_base(&args.manifest)?;
    let b = base.as_ref();
    let cfg = RerankConfig {
        model_dir: require("--model-dir", args.model_dir.or(b.map(|b| b.model_dir.clone())))?,
        nbest: require("--nbest", args.nbest.or(b.map(|b| b.nbest.clone())))?,
        output: require("--output", args.output.or(b.map(|b| b.output.clone())))?,
        lambda: args.lambda.or(b.and_then(|b| b.lambda)),
        tune_lambda: args.tune_lambda || b.map(|b| b.tune_lambda).unwrap_or(false),
        refs: args.refs.or(b.and_then(|b| b.refs.clone())),
        metric: args
            .metric
            .map(|m| format!("{m:?}").to_lowercase())
            .or(b.map(|b| b.metric.clone()))
            .unwrap_or_else(|| "wer".into()),
        aggregate: args
            .aggregate
            .map(|a| format!("{a:?}").to_lowercase())
            .or(b.map(|b| b.aggregate.clone()))
            .unwrap_or_else(|| "sum".into()),
        threads: args.threads.or(b.map(|b| b.threads)).unwrap_or(1),
        precision: args
            .precision
            .or(b.map(|b| b.precision))
            .unwrap_or(Precision::F64),
    };
    match cfg.precision {
        Precision::F64 => run_rerank_typed::<f64>(cfg),
        Precision::F32 => run_rerank_typed::<f32>(cfg),
    }
}

fn run_rerank_typed<S: Scalar>(cfg: RerankConfig) -> Result<()> {
    let (model, vocab, _) = load_model_dir::<S>(&cfg.model_dir)?;
    let aggregate: Aggregate = cfg.aggregate.parse()?;
    let metric: TuneMetric = cfg.metric.parse()?;
    let mut groups = read_nbest(&cfg.nbest)?;
    if let Some(refs) = &cfg.refs {
        attach_references(&mut groups, refs)?;
    }

    // language-model score per hypothesis, in group order
    let mut lm_scores: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
    for g in &groups {
        let sentences: Vec<EncodedSentence> = g
            .hypotheses
            .iter()
            .map(|h| vocab.encode(&h.text, model.config.max_seq_len))
            .collect::<Result<_>>()?;
        let scored = score_corpus(&sentences, &model, aggregate, cfg.threads)?;
        lm_scores.push(scored.iter().map(|s| s.score).collect());
    }

    let lambda = if cfg.tune_lambda {
        let tuned = tune_lambda(&groups, &lm_scores, metric, &default_lambda_grid())?;
        println!("tuned lambda={tuned}");
        tuned
    } else {
        let l = cfg.lambda.unwrap_or(0.5);
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::Cli(format!("--lambda {l} outside [0, 1]")));
        }
        l
    };

    let rankings: Vec<Vec<RankedHypothesis>> = groups
        .iter()
        .zip(&lm_scores)
        .map(|(g, lms)| rerank(g, lms, lambda))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    write_reranked(&mut out, &groups, &rankings)?;
    std::fs::write(&cfg.output, out)?;
    RunManifest::new("rerank", 0)
        .input("model_dir", &cfg.model_dir)
        .input("nbest", &cfg.nbest)
        .output("reranked", &cfg.output)
        .with_config(&RerankConfig {
            lambda: Some(lambda),
            ..cfg.clone()
        })?
        .save(&manifest_path(&cfg.output))?;
    Ok(())
}

// ----- sts -----

#[derive(Args)]
struct StsArgs {
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Pair TSV input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Representation source: context | embed.
    #[arg(long)]
    source: Option<RepSource>,
    /// For bilm context reps: one intact pass instead of mask-and-predict.
    #[arg(long)]
    intact: bool,
    /// Optional per-pair CSV output (`cosine,gold`).
    #[arg(long)]
    per_pair: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Serialize, Deserialize)]
struct StsConfig {
    model_dir: PathBuf,
    input: PathBuf,
    source: String,
    intact: bool,
    per_pair: Option<PathBuf>,
    threads: usize,
    precision: Precision,
}

fn run_sts(args: StsArgs) -> Result<()> {
    let base: Option<StsConfig> = load_base(&args.manifest)?;
    let b = base.as_ref();
    let cfg = StsConfig {
        model_dir: require("--model-dir", args.model_dir.or(b.map(|b| b.model_dir.clone())))?,
        input: require("--input", args.input.or(b.map(|b| b.input.clone())))?,
        source: args
            .source
            .map(|s| match s {
                RepSource::Context => "context".to_string(),
                RepSource::Embed => "embed".to_string(),
            })
            .or(b.map(|b| b.source.clone()))
            .unwrap_or_else(|| "context".into()),
        intact: args.intact || b.map(|b| b.intact).unwrap_or(false),
        per_pair: args.per_pair.or(b.and_then(|b| b.per_pair.clone())),
        threads: args.threads.or(b.map(|b| b.threads)).unwrap_or(1),
        precision: args
            .precision
            .or(b.map(|b| b.precision))
            .unwrap_or(Precision::F64),
    };
    match cfg.precision {
        Precision::F64 => run_sts_typed::<f64>(cfg),
        Precision::F32 => run_sts_typed::<f32>(cfg),
    }
}

fn run_sts_typed<S: Scalar>(cfg: StsConfig) -> Result<()> {
    let (model, vocab, _) = load_model_dir::<S>(&cfg.model_dir)?;
    let source: RepSource = cfg.source.parse()?;
    let pairs = read_pairs(&cfg.input)?;
    let outcome = eval_sts(&pairs, &model, &vocab, source, cfg.intact, cfg.threads)?;
    println!("pearson_r={}", outcome.pearson_r);
    if let Some(path) = &cfg.per_pair {
        let mut out = Vec::new();
        write_per_pair(&mut out, &outcome.per_pair)?;
        std::fs::write(path, out)?;
        RunManifest::new("sts", 0)
            .input("model_dir", &cfg.model_dir)
            .input("pairs", &cfg.input)
            .output("per_pair", path)
            .with_config(&cfg)?
            .save(&manifest_path(path))?;
    }
    Ok(())
}

// ----- bench -----

#[derive(Args)]
struct BenchArgs {
    /// Sequence lengths to sweep.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Measured repetitions per cell (after warmup).
    #[arg(long)]
    reps: Option<usize>,
    /// Discarded warmup runs per cell.
    #[arg(long)]
    warmup: Option<usize>,
    /// Architectures to measure.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Tasks to measure: sts | rerank.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Use the published layer dimensions (3x512x8x2048) instead of desk scale.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Extra single length reported as `speedup@n` (0 disables).
    #[arg(long)]
    standard_length: Option<usize>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Serialize, Deserialize)]
struct BenchConfig {
    lengths: Vec<usize>,
    reps: usize,
    warmup: usize,
    models: Vec<String>,
    tasks: Vec<String>,
    paper_scale: bool,
    vocab_size: usize,
    standard_length: usize,
    output: Option<PathBuf>,
    seed: u64,
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let base: Option<BenchConfig> = load_base(&args.manifest)?;
    let b = base.as_ref();
    let cfg = BenchConfig {
        lengths: args
            .lengths
            .or(b.map(|b| b.lengths.clone()))
            .unwrap_or_else(|| vec![16, 32, 64, 128]),
        reps: args.reps.or(b.map(|b| b.reps)).unwrap_or(30),
        warmup: args.warmup.or(b.map(|b| b.warmup)).unwrap_or(3),
        models: args
            .models
            .or(b.map(|b| b.models.clone()))
            .unwrap_or_else(|| vec!["tta".into(), "unilm".into(), "bilm".into()]),
        tasks: args
            .tasks
            .or(b.map(|b| b.tasks.clone()))
            .unwrap_or_else(|| vec!["sts".into(), "rerank".into()]),
        paper_scale: args.paper_scale || b.map(|b| b.paper_scale).unwrap_or(false),
        vocab_size: args.vocab_size.or(b.map(|b| b.vocab_size)).unwrap_or(2000),
        standard_length: args
            .standard_length
            .or(b.map(|b| b.standard_length))
            .unwrap_or(20),
        output: args.output.or(b.and_then(|b| b.output.clone())),
        seed: args.seed.or(b.map(|b| b.seed)).unwrap_or(42),
    };

    // 32-bit, single-threaded measurement
    let mut all_lengths = cfg.lengths.clone();
    if cfg.standard_length >= 3 && !all_lengths.contains(&cfg.standard_length) {
        all_lengths.push(cfg.standard_length);
    }
    let max_len = all_lengths.iter().copied().max().unwrap_or(128);
    let mut table = TimingTable::default();
    let mut summary = String::new();
    for name in &cfg.models {
        let arch: Architecture = name.parse()?;
        let model: Model<f32> =
            bench_model(arch, cfg.paper_scale, cfg.vocab_size, max_len, cfg.seed)?;
        for task_name in &cfg.tasks {
            let task: TaskKind = task_name.parse()?;
            let rows = time_scoring(&model, task, &all_lengths, cfg.reps, cfg.warmup, cfg.seed)?;
            table.rows.extend(rows.rows);
        }
    }
    for name in &cfg.models {
        let arch: Architecture = name.parse()?;
        for task_name in &cfg.tasks {
            let task: TaskKind = task_name.parse()?;
            let rows = table.rows_for(arch, task);
            let fit_rows: Vec<&crate::bench::TimingRow> = rows
                .into_iter()
                .filter(|r| cfg.lengths.contains(&r.n))
                .collect();
            if let Ok(slope) = fit_exponent(&fit_rows) {
                summary.push_str(&format!("slope {arch} {task} {slope:.4}\n"));
            }
        }
    }
    for task_name in &cfg.tasks {
        let task: TaskKind = task_name.parse()?;
        for &n in &all_lengths {
            if let (Some(b_), Some(t)) = (
                table.mean_at(Architecture::BiLm, task, n),
                table.mean_at(Architecture::Tta, task, n),
            ) {
                summary.push_str(&format!("speedup {task} n={n} {:.3}\n", b_ / t));
            }
        }
    }

    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    match &cfg.output {
        Some(path) => {
            std::fs::write(path, &csv)?;
            RunManifest::new("bench", cfg.seed)
                .output("timings", path)
                .with_config(&cfg)?
                .save(&manifest_path(path))?;
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    print!("{summary}");
    Ok(())
}

// ----- shared plumbing -----

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn require<T>(flag: &str, value: Option<T>) -> Result<T> {
    value.ok_or_else(|| Error::Cli(format!("missing required option {flag}")))
}

fn load_base<T: for<'de> Deserialize<'de>>(manifest: &Option<PathBuf>) -> Result<Option<T>> {
    match manifest {
        Some(path) => Ok(Some(RunManifest::load(path)?.config_as()?)),
        None => Ok(None),
    }
}

/// Parses argv and runs the selected subcommand.
pub fn dispatch<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            std::process::exit(0);
        }
        _ => Error::Cli(e.to_string()),
    })?;
    match cli.command {
        Command::Vocab(args) => run_vocab(args),
        Command::Train(args) => run_train(*args),
        Command::Score(args) => run_score(args),
        Command::Rerank(args) => run_rerank(args),
        Command::Sts(args) => run_sts(args),
        Command::Bench(args) => run_bench(args),
    }
}
