//! Sentence scoring and N-best reranking.
//!
//! The T-TA scores a sentence with one forward pass; the biLM needs one
//! mask-and-predict pass per interior token; the uniLM is a single causal
//! pass. All three expose per-token log-likelihoods over the interior
//! positions only, so their scores are directly comparable.

use crate::autodiff::nll_row;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::scalar::Scalar;
use crate::text::{EncodedSentence, MASK};
use crate::TokenId;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Sum,
    Mean,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregate::Sum),
            "mean" => Ok(Aggregate::Mean),
            other => Err(Error::Cli(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// Per-sentence scoring result over interior positions.
#[derive(Clone, Debug)]
pub struct ScoredSentence {
    pub ids: Vec<TokenId>,
    /// log p(token_i | context), one entry per interior position.
    pub token_log_likelihoods: Vec<f64>,
    pub score: f64,
    pub aggregate: Aggregate,
    pub model_kind: Architecture,
}

impl ScoredSentence {
    fn from_lls(
        ids: Vec<TokenId>,
        lls: Vec<f64>,
        aggregate: Aggregate,
        model_kind: Architecture,
    ) -> Self {
        let sum: f64 = lls.iter().sum();
        let score = match aggregate {
            Aggregate::Sum => sum,
            Aggregate::Mean => sum / lls.len() as f64,
        };
        ScoredSentence {
            ids,
            token_log_likelihoods: lls,
            score,
            aggregate,
            model_kind,
        }
    }

    /// Mean interior negative log-likelihood.
    pub fn mean_nll(&self) -> f64 {
        -self.token_log_likelihoods.iter().sum::<f64>() / self.token_log_likelihoods.len() as f64
    }
}

/// Pseudo-log-likelihood from a single autoencoder pass.
pub fn pll_tta<S: Scalar>(
    sentence: &EncodedSentence,
    model: &Model<S>,
    aggregate: Aggregate,
) -> Result<ScoredSentence> {
    let out = model.tta_forward(&sentence.ids, false)?;
    let logits = out.logits.expect("logits requested");
    let n = sentence.len();
    let lls = (1..n - 1)
        .map(|i| -nll_row(logits.row(i), sentence.ids[i]).to_f64_lossy())
        .collect();
    Ok(ScoredSentence::from_lls(
        sentence.ids.clone(),
        lls,
        aggregate,
        Architecture::Tta,
    ))
}

/// Pseudo-log-likelihood by mask-and-predict: one pass per interior token.
pub fn pll_bilm<S: Scalar>(
    sentence: &EncodedSentence,
    model: &Model<S>,
    aggregate: Aggregate,
) -> Result<ScoredSentence> {
    let n = sentence.len();
    let mut lls = Vec::with_capacity(n - 2);
    for i in 1..n - 1 {
        let row = model.bilm_forward(&sentence.ids, i, MASK)?;
        lls.push(-nll_row(row.row(0), sentence.ids[i]).to_f64_lossy());
    }
    Ok(ScoredSentence::from_lls(
        sentence.ids.clone(),
        lls,
        aggregate,
        Architecture::BiLm,
    ))
}

/// True log-likelihood of the interior tokens under the causal chain rule,
/// from a single pass.
pub fn ll_unilm<S: Scalar>(
    sentence: &EncodedSentence,
    model: &Model<S>,
    aggregate: Aggregate,
) -> Result<ScoredSentence> {
    let logits = model.unilm_forward(&sentence.ids)?;
    let n = sentence.len();
    // slot i predicts token i+1; interior tokens live at 1..n-1
    let lls = (1..n - 1)
        .map(|i| -nll_row(logits.row(i - 1), sentence.ids[i]).to_f64_lossy())
        .collect();
    Ok(ScoredSentence::from_lls(
        sentence.ids.clone(),
        lls,
        aggregate,
        Architecture::UniLm,
    ))
}

/// Dispatches on the model's architecture.
pub fn score_sentence<S: Scalar>(
    sentence: &EncodedSentence,
    model: &Model<S>,
    aggregate: Aggregate,
) -> Result<ScoredSentence> {
    match model.config.architecture {
        Architecture::Tta => pll_tta(sentence, model, aggregate),
        Architecture::BiLm => pll_bilm(sentence, model, aggregate),
        Architecture::UniLm => ll_unilm(sentence, model, aggregate),
    }
}

/// Scores many sentences, optionally across worker threads; results come
/// back in input order regardless of the thread count.
pub fn score_corpus<S: Scalar>(
    sentences: &[EncodedSentence],
    model: &Model<S>,
    aggregate: Aggregate,
    threads: usize,
) -> Result<Vec<ScoredSentence>> {
    if threads <= 1 || sentences.len() < 2 {
        return sentences
            .iter()
            .map(|s| score_sentence(s, model, aggregate))
            .collect();
    }
    let workers = threads.min(sentences.len());
    let chunk = sentences.len().div_ceil(workers);
    let mut slots: Vec<Option<Result<ScoredSentence>>> = Vec::new();
    slots.resize_with(sentences.len(), || None);
    std::thread::scope(|scope| {
        let mut remaining = &mut slots[..];
        let mut offset = 0;
        let mut handles = Vec::new();
        while !remaining.is_empty() {
            let take = chunk.min(remaining.len());
            let (head, tail) = remaining.split_at_mut(take);
            remaining = tail;
            let start = offset;
            offset += take;
            handles.push(scope.spawn(move || {
                for (k, slot) in head.iter_mut().enumerate() {
                    *slot = Some(score_sentence(&sentences[start + k], model, aggregate));
                }
            }));
        }
        for h in handles {
            h.join().expect("scoring worker panicked");
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

/// Corpus pseudo-perplexity: per-sentence `exp(mean interior NLL)`, reported
/// as the arithmetic mean and the median over sentences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoPerplexity {
    pub avg: f64,
    pub median: f64,
}

pub fn pseudo_perplexity<S: Scalar>(
    sentences: &[EncodedSentence],
    model: &Model<S>,
    threads: usize,
) -> Result<PseudoPerplexity> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scored = score_corpus(sentences, model, Aggregate::Mean, threads)?;
    let values: Vec<f64> = scored.iter().map(|s| s.mean_nll().exp()).collect();
    Ok(aggregate_ppl(&values))
}

/// Average and median of per-sentence perplexities.
pub fn aggregate_ppl(values: &[f64]) -> PseudoPerplexity {
    let avg = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    PseudoPerplexity { avg, median }
}

// ----- N-best reranking -----

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub text: String,
    pub score_s2s: f64,
}

#[derive(Clone, Debug)]
pub struct NBestGroup {
    pub id: String,
    pub hypotheses: Vec<Hypothesis>,
    pub reference: Option<String>,
}

/// One hypothesis after interpolation, in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedHypothesis {
    /// Index into the group's original hypothesis list.
    pub index: usize,
    pub score_lm: f64,
    pub score_combined: f64,
    /// 1-based rank within the group.
    pub rank: usize,
}

/// Combines `(1 - lambda) * score_s2s + lambda * score_lm` and sorts
/// descending; ties keep the original order.
pub fn rerank(group: &NBestGroup, lm_scores: &[f64], lambda: f64) -> Result<Vec<RankedHypothesis>> {
    if lm_scores.len() != group.hypotheses.len() {
        return Err(Error::MisalignedScores {
            context: "rerank",
            expected: group.hypotheses.len(),
            got: lm_scores.len(),
        });
    }
    assert!((0.0..=1.0).contains(&lambda), "lambda outside [0, 1]");
    let mut order: Vec<usize> = (0..group.hypotheses.len()).collect();
    let combined: Vec<f64> = group
        .hypotheses
        .iter()
        .zip(lm_scores)
        .map(|(h, &lm)| (1.0 - lambda) * h.score_s2s + lambda * lm)
        .collect();
    order.sort_by(|&a, &b| combined[b].total_cmp(&combined[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, index)| RankedHypothesis {
            index,
            score_lm: lm_scores[index],
            score_combined: combined[index],
            rank: rank + 1,
        })
        .collect())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TuneMetric {
    /// Corpus word-error-rate of the top-ranked hypothesis (minimized).
    Wer,
    /// Fraction of groups whose top-ranked hypothesis equals the reference
    /// (maximized).
    Accuracy,
}

impl std::str::FromStr for TuneMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wer" => Ok(TuneMetric::Wer),
            "accuracy" => Ok(TuneMetric::Accuracy),
            other => Err(Error::Cli(format!("unknown metric `{other}`"))),
        }
    }
}

pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Evaluates the reranking metric at one interpolation weight.
pub fn evaluate_lambda(
    groups: &[NBestGroup],
    lm_scores: &[Vec<f64>],
    metric: TuneMetric,
    lambda: f64,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    for (group, lms) in groups.iter().zip(lm_scores) {
        let reference = group.reference.as_ref().ok_or_else(|| Error::MissingReference {
            group: group.id.clone(),
        })?;
        let ranked = rerank(group, lms, lambda)?;
        let top = &group.hypotheses[ranked[0].index].text;
        match metric {
            TuneMetric::Accuracy => {
                if top == reference {
                    hits += 1;
                }
            }
            TuneMetric::Wer => {
                edits += edit_distance_words(reference, top);
                ref_words += reference.split_whitespace().count().max(1);
            }
        }
    }
    Ok(match metric {
        TuneMetric::Accuracy => hits as f64 / groups.len() as f64,
        TuneMetric::Wer => edits as f64 / ref_words as f64,
    })
}

/// Grid search for the interpolation weight on a development set; every
/// group needs a reference. Ties resolve to the smaller lambda.
pub fn tune_lambda(
    groups: &[NBestGroup],
    lm_scores: &[Vec<f64>],
    metric: TuneMetric,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut candidates = grid.to_vec();
    candidates.sort_by(f64::total_cmp);
    let mut best_lambda = candidates[0];
    let mut best_value = f64::NAN;
    for &lambda in &candidates {
        let value = evaluate_lambda(groups, lm_scores, metric, lambda)?;
        let better = match metric {
            TuneMetric::Wer => best_value.is_nan() || value < best_value,
            TuneMetric::Accuracy => best_value.is_nan() || value > best_value,
        };
        if better {
            best_value = value;
            best_lambda = lambda;
        }
    }
    Ok(best_lambda)
}

/// Word-level Levenshtein distance divided by the reference length.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let n = reference.split_whitespace().count().max(1);
    edit_distance_words(reference, hypothesis) as f64 / n as f64
}

fn edit_distance_words(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut curr = vec![0usize; h.len() + 1];
    for i in 1..=r.len() {
        curr[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            curr[j] = sub.min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[h.len()]
}

// ----- TSV formats -----

/// Reads `group_id<TAB>score_s2s<TAB>hypothesis_text` lines; groups keep
/// their first-appearance order.
pub fn read_nbest(path: &Path) -> Result<Vec<NBestGroup>> {
    let file = std::fs::File::open(path)?;
    let mut groups: Vec<NBestGroup> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
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
        let id = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err("missing group id".into()))?
            .to_string();
        let score: f64 = parts
            .next()
            .ok_or_else(|| parse_err("missing score_s2s column".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad score_s2s: {e}")))?;
        if !score.is_finite() {
            return Err(parse_err("non-finite score_s2s".into()));
        }
        let text = parts
            .next()
            .ok_or_else(|| parse_err("missing hypothesis column".into()))?
            .to_string();
        let gi = *by_id.entry(id.clone()).or_insert_with(|| {
            groups.push(NBestGroup {
                id,
                hypotheses: Vec::new(),
                reference: None,
            });
            groups.len() - 1
        });
        groups[gi].hypotheses.push(Hypothesis {
            text,
            score_s2s: score,
        });
    }
    if groups.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(groups)
}

/// Reads `group_id<TAB>reference_text` lines and attaches them.
pub fn attach_references(groups: &mut [NBestGroup], path: &Path) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let mut refs: HashMap<String, String> = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: "expected group_id<TAB>reference_text".into(),
        })?;
        refs.insert(id.to_string(), text.to_string());
    }
    for g in groups.iter_mut() {
        g.reference = refs.get(&g.id).cloned();
    }
    Ok(())
}

/// Writes the reranked list: the input columns plus
/// `score_lm<TAB>score_combined<TAB>rank`, rows in rank order per group.
pub fn write_reranked<W: Write>(
    mut w: W,
    groups: &[NBestGroup],
    rankings: &[Vec<RankedHypothesis>],
) -> Result<()> {
    for (group, ranking) in groups.iter().zip(rankings) {
        for r in ranking {
            let h = &group.hypotheses[r.index];
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                group.id, h.score_s2s, h.text, r.score_lm, r.score_combined, r.rank
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::{Vocab, VocabMode};

    /// 45 distinct words + 5 specials = vocabulary of exactly 50.
    fn vocab50() -> Vocab {
        let words: Vec<String> = (0..45).map(|i| format!("w{i:02}")).collect();
        Vocab::build([words.join(" ")], VocabMode::Word, 100).unwrap()
    }

    fn small(arch: Architecture, vocab: &Vocab) -> ModelConfig {
        let mut cfg = ModelConfig::desk(arch, vocab.size());
        cfg.num_layers = 1;
        cfg.model_dim = 16;
        cfg.num_heads = 2;
        cfg.ffn_dim = 32;
        cfg
    }

    fn zero_model(arch: Architecture, vocab: &Vocab) -> Model<f64> {
        Model::zero_init(small(arch, vocab)).unwrap()
    }

    fn five_words(vocab: &Vocab) -> EncodedSentence {
        vocab.encode("w00 w01 w02 w03 w04", 32).unwrap()
    }

    #[test]
    fn tta_uniform_model_scores_uniformly_in_one_pass() {
        let vocab = vocab50();
        let model = zero_model(Architecture::Tta, &vocab);
        let s = five_words(&vocab);
        model.reset_passes();
        let scored = pll_tta(&s, &model, Aggregate::Sum).unwrap();
        assert_eq!(model.forward_passes(), 1);
        let expected = 5.0 * (1.0f64 / 50.0).ln();
        assert!((scored.score - expected).abs() < 1e-9, "{}", scored.score);
        let mean = pll_tta(&s, &model, Aggregate::Mean).unwrap();
        assert!((mean.score - scored.score / 5.0).abs() < 1e-12);
    }

    #[test]
    fn bilm_scores_with_one_pass_per_interior_token() {
        let vocab = vocab50();
        let model = zero_model(Architecture::BiLm, &vocab);
        let s = five_words(&vocab);
        model.reset_passes();
        let scored = pll_bilm(&s, &model, Aggregate::Sum).unwrap();
        assert_eq!(model.forward_passes(), 5);
        let expected = 5.0 * (1.0f64 / 50.0).ln();
        assert!((scored.score - expected).abs() < 1e-9);
    }

    #[test]
    fn bilm_distribution_at_masked_slot_ignores_the_original_token() {
        let vocab = vocab50();
        let model = Model::<f64>::init(small(Architecture::BiLm, &vocab), 5).unwrap();
        // the two sentences differ only at interior position 2
        let a = vocab.encode("w00 w01 w02", 32).unwrap();
        let b = vocab.encode("w00 w40 w02", 32).unwrap();
        // both passes mask position 2, so the logits there cannot depend on
        // which token originally sat at it
        let row_a = model.bilm_forward(&a.ids, 2, MASK).unwrap();
        let row_b = model.bilm_forward(&b.ids, 2, MASK).unwrap();
        assert_eq!(row_a.data(), row_b.data());
    }

    #[test]
    fn unilm_single_pass_and_product_rule() {
        let vocab = vocab50();
        let model = zero_model(Architecture::UniLm, &vocab);
        let s = five_words(&vocab);
        model.reset_passes();
        let scored = ll_unilm(&s, &model, Aggregate::Sum).unwrap();
        assert_eq!(model.forward_passes(), 1);
        let expected = 5.0 * (1.0f64 / 50.0).ln();
        assert!((scored.score - expected).abs() < 1e-9);
        // chain rule: exp(sum of logs) equals the product of probabilities
        let product: f64 = scored
            .token_log_likelihoods
            .iter()
            .map(|ll| ll.exp())
            .product();
        assert!((scored.score.exp() - product).abs() < 1e-12);
    }

    #[test]
    fn per_token_values_are_log_probabilities() {
        let vocab = vocab50();
        let model = Model::<f64>::init(small(Architecture::Tta, &vocab), 6).unwrap();
        let scored = pll_tta(&five_words(&vocab), &model, Aggregate::Sum).unwrap();
        assert!(scored.token_log_likelihoods.iter().all(|&ll| ll <= 0.0));
        assert_eq!(scored.token_log_likelihoods.len(), 5);
    }

    #[test]
    fn threaded_scoring_matches_serial_order() {
        let vocab = vocab50();
        let model = Model::<f64>::init(small(Architecture::Tta, &vocab), 8).unwrap();
        let corpus: Vec<EncodedSentence> = (0..7)
            .map(|i| vocab.encode(&format!("w0{i} w1{i} w2{i}"), 32).unwrap())
            .collect();
        let serial = score_corpus(&corpus, &model, Aggregate::Sum, 1).unwrap();
        let threaded = score_corpus(&corpus, &model, Aggregate::Sum, 3).unwrap();
        for (a, b) in serial.iter().zip(&threaded) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn pseudo_perplexity_of_uniform_model_is_vocab_size() {
        let vocab = vocab50();
        let model = zero_model(Architecture::Tta, &vocab);
        let corpus = vec![five_words(&vocab), vocab.encode("w10 w11", 32).unwrap()];
        let ppl = pseudo_perplexity(&corpus, &model, 1).unwrap();
        assert!((ppl.avg - 50.0).abs() < 50.0 * 1e-12, "{}", ppl.avg);
        assert!((ppl.median - 50.0).abs() < 50.0 * 1e-12);
    }

    #[test]
    fn single_sentence_avg_equals_median() {
        let vocab = vocab50();
        let model = zero_model(Architecture::Tta, &vocab);
        let corpus = vec![five_words(&vocab)];
        let ppl = pseudo_perplexity(&corpus, &model, 1).unwrap();
        assert_eq!(ppl.avg, ppl.median);
    }

    #[test]
    fn ppl_aggregation_arithmetic() {
        let ppl = aggregate_ppl(&[10.0, 10.0, 1000.0]);
        assert_eq!(ppl.avg, 340.0);
        assert_eq!(ppl.median, 10.0);
    }

    fn demo_group() -> NBestGroup {
        NBestGroup {
            id: "g0".into(),
            hypotheses: vec![
                Hypothesis {
                    text: "a b c".into(),
                    score_s2s: -10.0,
                },
                Hypothesis {
                    text: "a b d".into(),
                    score_s2s: -12.0,
                },
                Hypothesis {
                    text: "a x c".into(),
                    score_s2s: -11.0,
                },
            ],
            reference: Some("a b c".into()),
        }
    }

    #[test]
    fn lambda_zero_keeps_s2s_order() {
        let g = demo_group();
        let ranked = rerank(&g, &[-100.0, -1.0, -50.0], 0.0).unwrap();
        let order: Vec<usize> = ranked.iter().map(|r| r.index).collect();
        assert_eq!(order, vec![0, 2, 1]);
    }

    #[test]
    fn lambda_one_uses_lm_order() {
        let g = demo_group();
        let ranked = rerank(&g, &[-100.0, -1.0, -50.0], 1.0).unwrap();
        let order: Vec<usize> = ranked.iter().map(|r| r.index).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn interpolation_arithmetic() {
        let g = NBestGroup {
            id: "g".into(),
            hypotheses: vec![Hypothesis {
                text: "t".into(),
                score_s2s: -10.0,
            }],
            reference: None,
        };
        let ranked = rerank(&g, &[-5.0], 0.3).unwrap();
        assert!((ranked[0].score_combined - (-8.5)).abs() < 1e-12);
    }

    #[test]
    fn tie_break_is_stable_by_original_index() {
        let g = NBestGroup {
            id: "g".into(),
            hypotheses: vec![
                Hypothesis {
                    text: "x".into(),
                    score_s2s: -1.0,
                },
                Hypothesis {
                    text: "y".into(),
                    score_s2s: -1.0,
                },
            ],
            reference: None,
        };
        let ranked = rerank(&g, &[-2.0, -2.0], 0.5).unwrap();
        assert_eq!(ranked[0].index, 0);
        assert_eq!(ranked[1].index, 1);
        assert_eq!(ranked[0].rank, 1);
    }

    #[test]
    fn misaligned_scores_are_rejected() {
        let g = demo_group();
        assert!(matches!(
            rerank(&g, &[-1.0], 0.5),
            Err(Error::MisalignedScores { .. })
        ));
    }

    #[test]
    fn flat_lm_scores_tune_to_lambda_zero() {
        let groups = vec![demo_group()];
        let lms = vec![vec![-3.0, -3.0, -3.0]];
        let best =
            tune_lambda(&groups, &lms, TuneMetric::Accuracy, &default_lambda_grid()).unwrap();
        assert_eq!(best, 0.0);
    }

    #[test]
    fn perfect_lm_against_anti_ranking_s2s_tunes_to_one() {
        // s2s strongly prefers the wrong hypothesis and the LM gap is small:
        // the reference wins only for lambda > 10/11, i.e. at 1.0 on the grid
        let groups: Vec<NBestGroup> = (0..4)
            .map(|i| NBestGroup {
                id: format!("g{i}"),
                hypotheses: vec![
                    Hypothesis {
                        text: "right".into(),
                        score_s2s: -10.0,
                    },
                    Hypothesis {
                        text: "wrong".into(),
                        score_s2s: 0.0,
                    },
                ],
                reference: Some("right".into()),
            })
            .collect();
        let lms = vec![vec![-1.0, -2.0]; 4];
        let best =
            tune_lambda(&groups, &lms, TuneMetric::Accuracy, &default_lambda_grid()).unwrap();
        assert_eq!(best, 1.0);
    }

    #[test]
    fn tuning_matches_brute_force_oracle() {
        // synthetic mixed case with a known-best interior lambda
        let mk = |s2s: [f64; 3], reference: &str| NBestGroup {
            id: format!("g{s2s:?}"),
            hypotheses: vec![
                Hypothesis {
                    text: "aa bb".into(),
                    score_s2s: s2s[0],
                },
                Hypothesis {
                    text: "aa cc".into(),
                    score_s2s: s2s[1],
                },
                Hypothesis {
                    text: "dd".into(),
                    score_s2s: s2s[2],
                },
            ],
            reference: Some(reference.into()),
        };
        let groups = vec![
            mk([0.0, -1.0, -2.0], "aa cc"),
            mk([-2.0, 0.0, -1.0], "aa cc"),
            mk([0.0, -3.0, -1.0], "aa bb"),
        ];
        let lms = vec![
            vec![-4.0, -1.0, -9.0],
            vec![-5.0, -2.0, -9.0],
            vec![-1.0, -2.0, -9.0],
        ];
        let grid = default_lambda_grid();
        let best = tune_lambda(&groups, &lms, TuneMetric::Accuracy, &grid).unwrap();
        // oracle: exhaustively evaluate the metric over the grid
        let mut oracle = (f64::NEG_INFINITY, f64::NAN);
        for &l in &grid {
            let mut hits = 0;
            for (g, lm) in groups.iter().zip(&lms) {
                let mut best_idx = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (i, h) in g.hypotheses.iter().enumerate() {
                    let c = (1.0 - l) * h.score_s2s + l * lm[i];
                    if c > best_score {
                        best_score = c;
                        best_idx = i;
                    }
                }
                if g.hypotheses[best_idx].text == *g.reference.as_ref().unwrap() {
                    hits += 1;
                }
            }
            let acc = hits as f64 / groups.len() as f64;
            if acc > oracle.0 {
                oracle = (acc, l);
            }
        }
        assert_eq!(best, oracle.1);
    }

    #[test]
    fn wer_properties() {
        assert_eq!(wer("a b c", "a b c"), 0.0);
        assert_eq!(wer("a b c", "a x c"), 1.0 / 3.0);
        assert_eq!(wer("a b", "a b c"), 0.5); // insertion
        assert_eq!(wer("a b c", "a c"), 1.0 / 3.0); // deletion
    }

    #[test]
    fn wer_matches_recursive_oracle() {
        use rand::{Rng, SeedableRng};
        fn naive(r: &[&str], h: &[&str]) -> usize {
            if r.is_empty() {
                return h.len();
            }
            if h.is_empty() {
                return r.len();
            }
            let sub = naive(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
            let del = naive(&r[1..], h) + 1;
            let ins = naive(r, &h[1..]) + 1;
            sub.min(del).min(ins)
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let words = ["a", "b", "c", "d"];
        for _ in 0..60 {
            let len_r = rng.gen_range(1..6);
            let len_h = rng.gen_range(0..6);
            let r: Vec<&str> = (0..len_r).map(|_| words[rng.gen_range(0..4)]).collect();
            let h: Vec<&str> = (0..len_h).map(|_| words[rng.gen_range(0..4)]).collect();
            let fast = edit_distance_words(&r.join(" "), &h.join(" "));
            assert_eq!(fast, naive(&r, &h));
        }
    }

    #[test]
    fn nbest_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nbest.tsv");
        std::fs::write(
            &path,
            "g1\t-3.5\thello world\ng1\t-4.0\thello word\ng2\t-1\tbye\n",
        )
        .unwrap();
        let groups = read_nbest(&path).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].hypotheses.len(), 2);
        assert_eq!(groups[0].hypotheses[1].text, "hello word");
        assert_eq!(groups[1].hypotheses[0].score_s2s, -1.0);

        let refs = dir.path().join("refs.tsv");
        std::fs::write(&refs, "g1\thello world\n").unwrap();
        let mut groups = groups;
        attach_references(&mut groups, &refs).unwrap();
        assert_eq!(groups[0].reference.as_deref(), Some("hello world"));
        assert_eq!(groups[1].reference, None);

        let ranked: Vec<Vec<RankedHypothesis>> = groups
            .iter()
            .map(|g| rerank(g, &vec![-1.0; g.hypotheses.len()], 0.0).unwrap())
            .collect();
        let mut out = Vec::new();
        write_reranked(&mut out, &groups, &ranked).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("g1\t-3.5\thello world\t-1\t-3.5\t1\n"));
    }

    #[test]
    fn malformed_tsv_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "g1\t-3.5\tok\ng1\tnot_a_number\toops\n").unwrap();
        let err = read_nbest(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // raising one hypothesis's LM score never lowers its rank
            #[test]
            fn lm_score_monotonicity(
                s2s in proptest::collection::vec(-20.0f64..0.0, 2..8),
                lms in proptest::collection::vec(-20.0f64..0.0, 2..8),
                boost in 0.1f64..10.0,
                pick in 0usize..8,
            ) {
                let n = s2s.len().min(lms.len());
                let pick = pick % n;
                let group = NBestGroup {
                    id: "g".into(),
                    hypotheses: s2s[..n]
                        .iter()
                        .map(|&s| Hypothesis { text: "t".into(), score_s2s: s })
                        .collect(),
                    reference: None,
                };
                let lambda = 0.5;
                let before = rerank(&group, &lms[..n], lambda).unwrap();
                let rank_before = before.iter().find(|r| r.index == pick).unwrap().rank;
                let mut boosted = lms[..n].to_vec();
                boosted[pick] += boost;
                let after = rerank(&group, &boosted, lambda).unwrap();
                let rank_after = after.iter().find(|r| r.index == pick).unwrap().rank;
                prop_assert!(rank_after <= rank_before);
            }

            // combined score is affine in lambda: sampling the grid matches
            // an independent brute-force ranking at every sampled point
            #[test]
            fn rank_matches_brute_force_on_grid(
                s2s in proptest::collection::vec(-10.0f64..0.0, 2..6),
                lms_seed in proptest::collection::vec(-10.0f64..0.0, 2..6),
            ) {
                let n = s2s.len().min(lms_seed.len());
                let group = NBestGroup {
                    id: "g".into(),
                    hypotheses: s2s[..n]
                        .iter()
                        .map(|&s| Hypothesis { text: "t".into(), score_s2s: s })
                        .collect(),
                    reference: None,
                };
                for &lambda in &[0.0, 0.25, 0.5, 0.75, 1.0] {
                    let ranked = rerank(&group, &lms_seed[..n], lambda).unwrap();
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.sort_by(|&a, &b| {
                        let ca = (1.0 - lambda) * s2s[a] + lambda * lms_seed[a];
                        let cb = (1.0 - lambda) * s2s[b] + lambda * lms_seed[b];
                        cb.total_cmp(&ca).then(a.cmp(&b))
                    });
                    let got: Vec<usize> = ranked.iter().map(|r| r.index).collect();
                    prop_assert_eq!(got, idx);
                }
            }
        }
    }
}
