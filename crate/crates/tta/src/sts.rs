//! Unsupervised semantic textual similarity: pooled sentence representations,
//! cosine similarity, Pearson correlation against gold scores.

use crate::error::{Error, Result};
use crate::model::{embed, Architecture, Model};
use crate::scalar::Scalar;
use crate::text::{EncodedSentence, Vocab, MASK};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Which layer the pooled representation comes from.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RepSource {
    /// Final encoder layer outputs.
    Context,
    /// Embedding-layer outputs (token + position sums); model depth never
    /// enters.
    Embed,
}

impl std::str::FromStr for RepSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(RepSource::Context),
            "embed" => Ok(RepSource::Embed),
            other => Err(Error::Cli(format!("unknown representation source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct STSPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f64,
}

/// Mean of the interior-position representation rows; BOS/EOS are excluded.
///
/// For `context` representations the biLM follows its mask-and-predict
/// procedure (position `i` comes from the pass that masks `i`, `n-2` passes
/// in total) unless `intact` requests a single unmasked pass.
pub fn sentence_rep<S: Scalar>(
    sentence: &EncodedSentence,
    model: &Model<S>,
    source: RepSource,
    intact: bool,
) -> Result<Vec<f64>> {
    let n = sentence.len();
    let rows = match source {
        RepSource::Embed => {
            let (kv, _) = embed(&sentence.ids, &model.params, &model.config)?;
            kv
        }
        RepSource::Context => match model.config.architecture {
            Architecture::BiLm if !intact => {
                let mut pooled = crate::tensor::Tensor::<S>::zeros(vec![n, model.config.model_dim]);
                for i in 1..n - 1 {
                    let mut corrupted = sentence.ids.clone();
                    corrupted[i] = MASK;
                    let out = model.infer(&corrupted, false, false)?;
                    pooled.row_mut(i).copy_from_slice(out.hidden.row(i));
                }
                pooled
            }
            _ => model.infer(&sentence.ids, false, false)?.hidden,
        },
    };
    Ok(rows
        .mean_rows(1..n - 1)
        .into_iter()
        .map(|v| v.to_f64_lossy())
        .collect())
}

/// Cosine similarity; zero vectors have no direction and are an error.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    assert_eq!(u.len(), v.len(), "cosine of different dimensions");
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (nu * nv))
}

/// Sample Pearson correlation; constant series are an error.
pub fn pearson(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if predicted.len() != gold.len() || predicted.len() < 2 {
        return Err(Error::SeriesLength {
            lhs: predicted.len(),
            rhs: gold.len(),
        });
    }
    let n = predicted.len() as f64;
    let mx = predicted.iter().sum::<f64>() / n;
    let my = gold.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in predicted.iter().zip(gold) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantSeries);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub struct StsOutcome {
    pub pearson_r: f64,
    /// `(cosine, gold)` per pair, in input order.
    pub per_pair: Vec<(f64, f64)>,
}

/// Scores every pair by the cosine of its pooled representations and
/// correlates with the gold scores.
pub fn eval_sts<S: Scalar>(
    pairs: &[STSPair],
    model: &Model<S>,
    vocab: &Vocab,
    source: RepSource,
    intact: bool,
    threads: usize,
) -> Result<StsOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let one = |pair: &STSPair| -> Result<(f64, f64)> {
        let a = vocab.encode(&pair.sentence_a, model.config.max_seq_len)?;
        let b = vocab.encode(&pair.sentence_b, model.config.max_seq_len)?;
        let ra = sentence_rep(&a, model, source, intact)?;
        let rb = sentence_rep(&b, model, source, intact)?;
        Ok((cosine(&ra, &rb)?, pair.gold))
    };
    let per_pair: Vec<(f64, f64)> = if threads <= 1 || pairs.len() < 2 {
        pairs.iter().map(one).collect::<Result<_>>()?
    } else {
        let workers = threads.min(pairs.len());
        let chunk = pairs.len().div_ceil(workers);
        let mut slots: Vec<Option<Result<(f64, f64)>>> = Vec::new();
        slots.resize_with(pairs.len(), || None);
        std::thread::scope(|scope| {
            let mut remaining = &mut slots[..];
            let mut offset = 0;
            while !remaining.is_empty() {
                let take = chunk.min(remaining.len());
                let (head, tail) = remaining.split_at_mut(take);
                remaining = tail;
                let start = offset;
                offset += take;
                scope.spawn(move || {
                    for (k, slot) in head.iter_mut().enumerate() {
                        *slot = Some(one(&pairs[start + k]));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("slot filled"))
            .collect::<Result<_>>()?
    };
    let (cosines, golds): (Vec<f64>, Vec<f64>) = per_pair.iter().copied().unzip();
    Ok(StsOutcome {
        pearson_r: pearson(&cosines, &golds)?,
        per_pair,
    })
}

/// Reads `score<TAB>sentence_a<TAB>sentence_b` lines.
pub fn read_pairs(path: &Path) -> Result<Vec<STSPair>> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let mut parts = line.splitn(3, '\t');
        let gold: f64 = parts
            .next()
            .ok_or_else(|| parse_err("missing score column".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad score: {e}")))?;
        if !gold.is_finite() {
            return Err(parse_err("non-finite gold score".into()));
        }
        let a = parts
            .next()
            .ok_or_else(|| parse_err("missing sentence_a".into()))?;
        let b = parts
            .next()
            .ok_or_else(|| parse_err("missing sentence_b".into()))?;
        if a.trim().is_empty() || b.trim().is_empty() {
            return Err(parse_err("empty sentence".into()));
        }
        pairs.push(STSPair {
            sentence_a: a.to_string(),
            sentence_b: b.to_string(),
            gold,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(pairs)
}

/// Optional per-pair CSV: `cosine,gold` rows.
pub fn write_per_pair<W: Write>(mut w: W, per_pair: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "cosine,gold")?;
    for (c, g) in per_pair {
        writeln!(w, "{c},{g}")?;
    }
    Ok(())
}
