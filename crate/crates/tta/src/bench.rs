//! Wall-clock scaling measurements: scoring time versus sequence length for
//! each architecture, with a log-log slope fit. Single-threaded by design;
//! absolute times are hardware-bound, so ratios and fitted exponents are the
//! reported surface.

use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::scoring::{score_sentence, Aggregate};
use crate::sts::{sentence_rep, RepSource};
use crate::text::{EncodedSentence, BOS, EOS};
use crate::TokenId;
use rand::Rng;
use std::io::Write;
use std::time::Instant;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Pooled sentence representation (no vocabulary projection).
    StsRep,
    /// Per-token log-likelihood scoring (adds the |V|-dim softmax).
    RerankScore,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sts" => Ok(TaskKind::StsRep),
            "rerank" => Ok(TaskKind::RerankScore),
            other => Err(Error::Cli(format!("unknown bench task `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::StsRep => "sts",
            TaskKind::RerankScore => "rerank",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TimingRow {
    pub model: Architecture,
    pub task: TaskKind,
    pub n: usize,
    pub reps: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn rows_for(&self, model: Architecture, task: TaskKind) -> Vec<&TimingRow> {
        self.rows
            .iter()
            .filter(|r| r.model == model && r.task == task)
            .collect()
    }

    pub fn mean_at(&self, model: Architecture, task: TaskKind, n: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.task == task && r.n == n)
            .map(|r| r.mean_s)
    }

    /// `model,task,n,reps,mean_s,std_s` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "model,task,n,reps,mean_s,std_s")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.model, r.task, r.n, r.reps, r.mean_s, r.std_s
            )?;
        }
        Ok(())
    }
}

/// Synthetic sentence of exactly `n` tokens (BOS + interior + EOS).
pub fn synthetic_sentence(n: usize, vocab_size: usize, rng: &mut impl Rng) -> EncodedSentence {
    assert!(n >= 3, "need room for BOS, one token and EOS");
    let mut ids: Vec<TokenId> = Vec::with_capacity(n);
    ids.push(BOS);
    for _ in 0..n - 2 {
        ids.push(rng.gen_range(5..vocab_size));
    }
    ids.push(EOS);
    EncodedSentence {
        ids,
        text: String::new(),
    }
}

fn run_once<S: Scalar>(model: &Model<S>, task: TaskKind, sentence: &EncodedSentence) -> Result<()> {
    match task {
        TaskKind::StsRep => {
            sentence_rep(sentence, model, RepSource::Context, false)?;
        }
        TaskKind::RerankScore => {
            score_sentence(sentence, model, Aggregate::Sum)?;
        }
    }
    Ok(())
}

/// Times `reps` runs of `task` at every requested length, after `warmup`
/// discarded runs. When the timer cannot resolve the workload (total below
/// ~10ms) the repetition count is doubled automatically.
pub fn time_scoring<S: Scalar>(
    model: &Model<S>,
    task: TaskKind,
    lengths: &[usize],
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<TimingTable> {
    assert!(reps >= 1);
    let mut rng = crate::rng::stream(seed, "bench");
    let mut table = TimingTable::default();
    for &n in lengths {
        let sentence = synthetic_sentence(n, model.config.vocab_size, &mut rng);
        for _ in 0..warmup {
            run_once(model, task, &sentence)?;
        }
        let mut effective_reps = reps;
        let (mean, std, used) = loop {
            let mut times = Vec::with_capacity(effective_reps);
            for _ in 0..effective_reps {
                let t0 = Instant::now();
                run_once(model, task, &sentence)?;
                times.push(t0.elapsed().as_secs_f64());
            }
            let total: f64 = times.iter().sum();
            if total >= 0.01 || effective_reps >= reps.saturating_mul(1024) {
                let mean = total / times.len() as f64;
                let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
                    / times.len() as f64;
                break (mean, var.sqrt(), effective_reps);
            }
            effective_reps *= 2;
        };
        table.rows.push(TimingRow {
            model: model.config.architecture,
            task,
            n,
            reps: used,
            mean_s: mean,
            std_s: std,
        });
    }
    Ok(table)
}

/// Least-squares slope of `log(time)` against `log(n)` over one model/task's
/// rows. Needs at least three distinct lengths.
pub fn fit_exponent(rows: &[&TimingRow]) -> Result<f64> {
    let mut points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.mean_s.ln()))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.dedup_by(|a, b| a.0 == b.0);
    if points.len() < 3 {
        return Err(Error::TooFewLengths(points.len()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// A benchmark model with the given layer dimensions and random weights; the
/// weights never affect the timings.
pub fn bench_model<S: Scalar>(
    architecture: Architecture,
    paper_scale: bool,
    vocab_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Model<S>> {
    let mut cfg = if paper_scale {
        ModelConfig::paper_scale(architecture, vocab_size)
    } else {
        ModelConfig::desk(architecture, vocab_size)
    };
    cfg.max_seq_len = max_len;
    cfg.dropout_rate = 0.0;
    Model::init(cfg, seed)
}
