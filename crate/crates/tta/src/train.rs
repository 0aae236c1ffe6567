//! Training: the autoencoding objective for the T-TA plus the causal and
//! masked objectives for the baselines, Adam with warmup and linear decay,
//! gradient clipping, and a deterministic batched loop.

use crate::autodiff::{nll_row, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{
    build_encoder, project_logits, register_params, Architecture, Model, ModelConfig, ModelParams,
    ParamVars,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{self, EncodedSentence, Vocab, BOS, EOS, PAD};
use crate::TokenId;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Lae,
    Clm,
    Mlm,
}

impl Objective {
    /// The architecture each objective trains.
    pub fn architecture(self) -> Architecture {
        match self {
            Objective::Lae => Architecture::Tta,
            Objective::Clm => Architecture::UniLm,
            Objective::Mlm => Architecture::BiLm,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lae" => Ok(Objective::Lae),
            "clm" => Ok(Objective::Clm),
            "mlm" => Ok(Objective::Mlm),
            other => Err(Error::Cli(format!("unknown objective `{other}`"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Lae => "lae",
            Objective::Clm => "clm",
            Objective::Mlm => "mlm",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mlm_mask_rate: f64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn desk(objective: Objective) -> Self {
        TrainConfig {
            objective,
            batch_size: 16,
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
            mlm_mask_rate: 0.15,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::BadTrainConfig(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::BadTrainConfig("peak_lr must be positive".into()));
        }
        if !(0.0 < self.mlm_mask_rate && self.mlm_mask_rate < 1.0) {
            return Err(Error::BadTrainConfig(format!(
                "mlm_mask_rate {} outside (0, 1)",
                self.mlm_mask_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::BadTrainConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients are clipped to this global norm before every update.
pub const CLIP_NORM: f64 = 1.0;

/// Linear warmup from zero to `peak_lr` over `warmup_steps`, then linear
/// decay back to zero at `total_steps`; zero beyond.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let (w, t) = (config.warmup_steps, config.total_steps);
    if step > t {
        return 0.0;
    }
    if w > 0 && step <= w {
        return config.peak_lr * step as f64 / w as f64;
    }
    if t == w {
        return if step == t { config.peak_lr } else { 0.0 };
    }
    config.peak_lr * (t - step) as f64 / (t - w) as f64
}

// ----- objective losses (graph-recorded) -----

/// Autoencoding loss: predict every unmodified input token from its
/// diagonal-blocked context; BOS/EOS (and padding) are never targets.
pub fn lae_loss_graph<S: Scalar>(
    graph: &mut Graph<S>,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[TokenId],
    key_pad: Option<&[bool]>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let enc = build_encoder(graph, pv, config, tokens, key_pad, dropout_rng, false)?;
    let logits = project_logits(graph, pv, enc.hidden)?;
    graph.cross_entropy(logits, tokens, &[PAD, BOS, EOS])
}

/// Causal loss: slot `i` predicts token `i+1`; targets are the interior
/// tokens and the closing EOS.
pub fn clm_loss_graph<S: Scalar>(
    graph: &mut Graph<S>,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[TokenId],
    key_pad: Option<&[bool]>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let enc = build_encoder(graph, pv, config, tokens, key_pad, dropout_rng, false)?;
    let n = tokens.len();
    let slots = graph.slice_rows(enc.hidden, 0, n - 1)?;
    let logits = project_logits(graph, pv, slots)?;
    graph.cross_entropy(logits, &tokens[1..], &[PAD])
}

/// Masked loss: replace `ceil(rate * interior)` interior positions with
/// `[MASK]` and predict the originals there; everything else contributes
/// nothing.
#[allow(clippy::too_many_arguments)]
pub fn mlm_loss_graph<S: Scalar>(
    graph: &mut Graph<S>,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[TokenId],
    true_len: usize,
    key_pad: Option<&[bool]>,
    mask_rate: f64,
    masking_rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let interior = true_len.saturating_sub(2);
    if interior == 0 {
        return Err(Error::SequenceTooShort { len: true_len });
    }
    let k = ((mask_rate * interior as f64).ceil() as usize).clamp(1, interior);
    let positions = sample_without_replacement(1..true_len - 1, k, masking_rng);
    let mut corrupted = tokens.to_vec();
    for &p in &positions {
        corrupted[p] = text::MASK;
    }
    let enc = build_encoder(graph, pv, config, &corrupted, key_pad, dropout_rng, false)?;
    let picked = graph.gather_rows(enc.hidden, &positions)?;
    let logits = project_logits(graph, pv, picked)?;
    let targets: Vec<TokenId> = positions.iter().map(|&p| tokens[p]).collect();
    graph.cross_entropy(logits, &targets, &[])
}

fn sample_without_replacement(
    range: std::ops::Range<usize>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pool: Vec<usize> = range.collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut picked: Vec<usize> = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

// ----- evaluation (deterministic, forward-only) -----

/// Mean per-token negative log-likelihood over a corpus under the model's
/// own inference procedure: one pass for `tta`, one causal pass for `unilm`,
/// one mask-and-predict pass per interior token for `bilm`.
pub fn eval_loss<S: Scalar>(model: &Model<S>, sentences: &[EncodedSentence]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in sentences {
        let n = s.len();
        match model.config.architecture {
            Architecture::Tta => {
                let out = model.infer(&s.ids, true, false)?;
                let logits = out.logits.unwrap();
                for i in 1..n - 1 {
                    total += nll_row(logits.row(i), s.ids[i]).to_f64_lossy();
                    count += 1;
                }
            }
            Architecture::UniLm => {
                let logits = model.unilm_forward(&s.ids)?;
                for slot in 0..n - 1 {
                    total += nll_row(logits.row(slot), s.ids[slot + 1]).to_f64_lossy();
                    count += 1;
                }
            }
            Architecture::BiLm => {
                for i in 1..n - 1 {
                    let row = model.bilm_forward(&s.ids, i, text::MASK)?;
                    total += nll_row(row.row(0), s.ids[i]).to_f64_lossy();
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

// ----- optimizer -----

#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
    pub step: usize,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let shapes: Vec<Tensor<S>> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        OptimizerState {
            first_moment: shapes.clone(),
            second_moment: shapes,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` must align with
/// [`ModelParams::named`]; a non-finite gradient aborts with the offending
/// parameter's name before anything is modified.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Tensor<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    {
        let named = params.named();
        assert_eq!(named.len(), grads.len(), "gradient list misaligned");
        for ((name, p), g) in named.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad {
                    param: name.clone(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64_lossy(config.beta1);
    let b2 = S::from_f64_lossy(config.beta2);
    let eps = S::from_f64_lossy(config.eps);
    let lr = S::from_f64_lossy(lr);
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let one = S::one();
    for (idx, (_, p)) in params.named_mut().into_iter().enumerate() {
        let m = state.first_moment[idx].data_mut();
        let v = state.second_moment[idx].data_mut();
        let g = grads[idx].data();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data_mut()[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global euclidean norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sq_norm().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = S::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ----- training loop -----

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Normal,
    Zero,
}

impl std::str::FromStr for InitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(InitKind::Normal),
            "zero" => Ok(InitKind::Zero),
            other => Err(Error::Cli(format!("unknown init kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub history: Vec<LossPoint>,
    /// Sentences dropped because they exceed the model's maximum length.
    pub skipped: usize,
}

/// Receives `(step, params)` at every checkpoint interval.
pub type CheckpointSink<'a, S> = &'a mut dyn FnMut(usize, &ModelParams<S>) -> Result<()>;

/// Encodes `lines`, dropping over-length sentences with a count, and runs
/// `total_steps` shuffled batches. `checkpoint_sink` receives `(step,
/// params)` every `checkpoint_every` steps; parameters are asserted finite at
/// each checkpoint. Bit-reproducible for a fixed seed within one build.
pub fn train<S: Scalar>(
    lines: &[String],
    vocab: &Vocab,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    init: InitKind,
    mut checkpoint_sink: Option<CheckpointSink<'_, S>>,
) -> Result<TrainOutcome<S>> {
    model_config.validate()?;
    train_config.validate()?;

    let mut sentences = Vec::new();
    let mut skipped = 0usize;
    for line in lines {
        match vocab.encode(line, model_config.max_seq_len) {
            Ok(s) => sentences.push(s),
            Err(Error::SequenceTooLong { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} over-length sentences");
    }

    let seed = train_config.seed;
    let mut params = match init {
        InitKind::Normal => ModelParams::init(model_config, &mut rng::stream(seed, "init")),
        InitKind::Zero => ModelParams::zeros(model_config),
    };
    let mut opt = OptimizerState::new(&params);
    let mut shuffle_rng = rng::stream(seed, "shuffling");
    let mut masking_rng = rng::stream(seed, "masking");
    let mut dropout_rng = rng::stream(seed, "dropout");
    let use_dropout = model_config.dropout_rate > 0.0;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut history = Vec::with_capacity(train_config.total_steps);

    for step in 1..=train_config.total_steps {
        // refill and reshuffle per epoch
        let mut batch_idx = Vec::with_capacity(train_config.batch_size);
        while batch_idx.len() < train_config.batch_size {
            if cursor >= order.len() {
                order = (0..sentences.len()).collect();
                shuffle(&mut order, &mut shuffle_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch_sentences: Vec<EncodedSentence> =
            batch_idx.iter().map(|&i| sentences[i].clone()).collect();
        let pad_to = batch_sentences.iter().map(EncodedSentence::len).max().unwrap();
        let padded = text::batch::<S>(&batch_sentences, pad_to)?;

        let mut graph = Graph::training();
        let pv = register_params(&mut graph, &params, true);
        let mut batch_loss: Option<Var> = None;
        for (b, s) in batch_sentences.iter().enumerate() {
            let key_pad = padded.key_pad(b);
            let key_pad_opt = if s.len() < pad_to { Some(&key_pad[..]) } else { None };
            let dropout = use_dropout.then_some(&mut dropout_rng);
            let loss = match train_config.objective {
                Objective::Lae => lae_loss_graph(
                    &mut graph,
                    &pv,
                    model_config,
                    &padded.ids[b],
                    key_pad_opt,
                    dropout,
                )?,
                Objective::Clm => clm_loss_graph(
                    &mut graph,
                    &pv,
                    model_config,
                    &padded.ids[b],
                    key_pad_opt,
                    dropout,
                )?,
                Objective::Mlm => mlm_loss_graph(
                    &mut graph,
                    &pv,
                    model_config,
                    &padded.ids[b],
                    s.len(),
                    key_pad_opt,
                    train_config.mlm_mask_rate,
                    &mut masking_rng,
                    dropout,
                )?,
            };
            batch_loss = Some(match batch_loss {
                Some(acc) => graph.add(acc, loss)?,
                None => loss,
            });
        }
        let total = batch_loss.expect("non-empty batch");
        let mean = graph.scale(total, S::from_f64_lossy(1.0 / batch_sentences.len() as f64))?;
        let loss_value = graph.value(mean).item().to_f64_lossy();
        graph.backward(mean)?;
        let mut grads: Vec<Tensor<S>> = pv
            .flat
            .iter()
            .map(|&v| graph.take_grad(v).expect("parameter gradient"))
            .collect();
        drop(graph);

        clip_global_norm(&mut grads, CLIP_NORM);
        let lr = lr_schedule(step, train_config);
        adam_step(&mut params, &grads, &mut opt, lr, train_config)?;
        history.push(LossPoint {
            step,
            loss: loss_value,
            lr,
        });

        if train_config.checkpoint_every > 0 && step % train_config.checkpoint_every == 0 {
            params.check_finite()?;
            if let Some(sink) = checkpoint_sink.as_mut() {
                sink(step, &params)?;
            }
        }
    }
    params.check_finite()?;
    let model = Model::new(model_config.clone(), params)?;
    Ok(TrainOutcome {
        model,
        history,
        skipped,
    })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// `step,loss,lr` rows for the loss-curve CSV.
pub fn history_csv(history: &[LossPoint]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for p in history {
        out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::VocabMode;

    fn toy_vocab() -> Vocab {
        Vocab::build(
            ["aa bb cc dd ee ff gg hh ii jj"],
            VocabMode::Word,
            100,
        )
        .unwrap()
    }

    fn tta_cfg(vocab: &Vocab) -> ModelConfig {
        let mut cfg = ModelConfig::desk(Architecture::Tta, vocab.size());
        cfg.num_layers = 1;
        cfg.model_dim = 16;
        cfg.num_heads = 2;
        cfg.ffn_dim = 32;
        cfg.dropout_rate = 0.1;
        cfg
    }

    #[test]
    fn schedule_endpoints() {
        let mut tc = TrainConfig::desk(Objective::Lae);
        tc.total_steps = 1000;
        tc.warmup_steps = 100;
        tc.peak_lr = 2e-3;
        assert_eq!(lr_schedule(0, &tc), 0.0);
        assert_eq!(lr_schedule(100, &tc), 2e-3);
        assert_eq!(lr_schedule(1000, &tc), 0.0);
        assert_eq!(lr_schedule(1500, &tc), 0.0);
        // piecewise linear, maximum at warmup
        assert!((lr_schedule(50, &tc) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(550, &tc) - 1e-3).abs() < 1e-18);
        for s in 1..1000 {
            assert!(lr_schedule(s, &tc) <= lr_schedule(100, &tc));
        }
    }

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let vocab = toy_vocab();
        let cfg = tta_cfg(&vocab);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng::stream(1, "init"));
        let before = params.named_owned();
        let grads: Vec<Tensor<f64>> = before
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut opt = OptimizerState::new(&params);
        let tc = TrainConfig::desk(Objective::Lae);
        adam_step(&mut params, &grads, &mut opt, 1e-3, &tc).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(params.named()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        // single scalar parameter, gradient 1, step 1:
        // m̂ = 1, v̂ = 1, update = -lr / (1 + eps)
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 1,
            num_heads: 1,
            ffn_dim: 1,
            vocab_size: 1,
            max_seq_len: 3,
            dropout_rate: 0.0,
            architecture: Architecture::Tta,
            diag_mask_enabled: true,
        };
        let mut params = ModelParams::<f64>::zeros(&cfg);
        let named = params.named_owned();
        let grads: Vec<Tensor<f64>> = named
            .iter()
            .map(|(_, t)| Tensor::full(t.shape().to_vec(), 1.0))
            .collect();
        let mut opt = OptimizerState::new(&params);
        let tc = TrainConfig::desk(Objective::Lae);
        let lr = 1e-3;
        adam_step(&mut params, &grads, &mut opt, lr, &tc).unwrap();
        let expected = -lr / (1.0 + tc.eps);
        for (_, t) in params.named() {
            for (j, v) in t.data().iter().enumerate() {
                // layer-norm gains start at 1, everything else at 0
                let base = if *v > 0.5 { 1.0 } else { 0.0 };
                assert!(
                    (v - (base + expected)).abs() < 1e-12,
                    "element {j}: {v} vs {}",
                    base + expected
                );
            }
        }
    }

    #[test]
    fn adam_keeps_identical_parameters_identical() {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 2,
            num_heads: 1,
            ffn_dim: 2,
            vocab_size: 2,
            max_seq_len: 3,
            dropout_rate: 0.0,
            architecture: Architecture::Tta,
            diag_mask_enabled: true,
        };
        let mut params = ModelParams::<f64>::zeros(&cfg);
        let grads: Vec<Tensor<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::full(t.shape().to_vec(), 0.25))
            .collect();
        let mut opt = OptimizerState::new(&params);
        let tc = TrainConfig::desk(Objective::Lae);
        adam_step(&mut params, &grads, &mut opt, 1e-3, &tc).unwrap();
        adam_step(&mut params, &grads, &mut opt, 1e-3, &tc).unwrap();
        let w = &params.layers[0].w_q;
        assert!(w.data().windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let vocab = toy_vocab();
        let cfg = tta_cfg(&vocab);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng::stream(2, "init"));
        let mut grads: Vec<Tensor<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        grads[1].data_mut()[0] = f64::NAN; // "pos"
        let mut opt = OptimizerState::new(&params);
        let tc = TrainConfig::desk(Objective::Lae);
        let err = adam_step(&mut params, &grads, &mut opt, 1e-3, &tc).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGrad { ref param } if param == "pos"));
    }

    #[test]
    fn zero_init_losses_equal_log_vocab() {
        let vocab = toy_vocab();
        let v = vocab.size() as f64;
        for objective in [Objective::Lae, Objective::Clm, Objective::Mlm] {
            let mut cfg = tta_cfg(&vocab);
            cfg.architecture = objective.architecture();
            let params = ModelParams::<f64>::zeros(&cfg);
            let mut graph = Graph::training();
            let pv = register_params(&mut graph, &params, false);
            let tokens = vocab.encode("aa bb cc dd", 16).unwrap().ids;
            let loss = match objective {
                Objective::Lae => {
                    lae_loss_graph(&mut graph, &pv, &cfg, &tokens, None, None).unwrap()
                }
                Objective::Clm => {
                    clm_loss_graph(&mut graph, &pv, &cfg, &tokens, None, None).unwrap()
                }
                Objective::Mlm => mlm_loss_graph(
                    &mut graph,
                    &pv,
                    &cfg,
                    &tokens,
                    tokens.len(),
                    None,
                    0.15,
                    &mut rng::stream(1, "masking"),
                    None,
                )
                .unwrap(),
            };
            let got = graph.value(loss).item();
            assert!((got - v.ln()).abs() < 1e-12, "{objective}: {got}");
        }
    }

    #[test]
    fn mlm_masks_at_least_one_position() {
        // length-3 sentence has a single interior token; ceil(0.15 * 1) = 1
        let vocab = toy_vocab();
        let mut cfg = tta_cfg(&vocab);
        cfg.architecture = Architecture::BiLm;
        let params = ModelParams::<f64>::init(&cfg, &mut rng::stream(3, "init"));
        let tokens = vocab.encode("aa", 16).unwrap().ids;
        let mut graph = Graph::training();
        let pv = register_params(&mut graph, &params, false);
        let loss = mlm_loss_graph(
            &mut graph,
            &pv,
            &cfg,
            &tokens,
            3,
            None,
            0.15,
            &mut rng::stream(4, "masking"),
            None,
        );
        assert!(loss.is_ok());
    }

    #[test]
    fn clm_single_interior_token_covers_two_slots() {
        let vocab = toy_vocab();
        let mut cfg = tta_cfg(&vocab);
        cfg.architecture = Architecture::UniLm;
        cfg.dropout_rate = 0.0;
        let model = Model::<f64>::init(cfg.clone(), 5).unwrap();
        let tokens = vocab.encode("aa", 16).unwrap().ids; // BOS aa EOS
        let mut graph = Graph::inference();
        let pv = register_params(&mut graph, &model.params, false);
        let loss = clm_loss_graph(&mut graph, &pv, &cfg, &tokens, None, None).unwrap();
        let got = graph.value(loss).item();

        let logits = model.unilm_forward(&tokens).unwrap();
        let hand = (nll_row(logits.row(0), tokens[1]) + nll_row(logits.row(1), tokens[2])) / 2.0;
        assert!((got - hand).abs() < 1e-12);
    }

    #[test]
    fn lae_loss_ignores_bos_eos_rows() {
        // corrupting logits at the BOS/EOS rows must not change the loss
        let mut graph = Graph::<f64>::inference();
        let clean = Tensor::zeros(vec![4, 10]);
        let mut dirty = clean.clone();
        dirty.row_mut(0)[7] = 123.0;
        dirty.row_mut(3)[2] = -55.0;
        let tokens = [BOS, 6, 7, EOS];
        let a = graph.constant(clean);
        let b = graph.constant(dirty);
        let la = graph.cross_entropy(a, &tokens, &[PAD, BOS, EOS]).unwrap();
        let lb = graph.cross_entropy(b, &tokens, &[PAD, BOS, EOS]).unwrap();
        assert_eq!(graph.value(la).item(), graph.value(lb).item());
    }

    fn tiny_corpus() -> Vec<String> {
        (0..20)
            .map(|i| match i % 4 {
                0 => "aa bb cc".to_string(),
                1 => "bb cc dd ee".to_string(),
                2 => "cc dd ee ff gg".to_string(),
                _ => "dd ee".to_string(),
            })
            .collect()
    }

    #[test]
    fn training_is_reproducible_for_a_fixed_seed() {
        let vocab = toy_vocab();
        let cfg = tta_cfg(&vocab);
        let mut tc = TrainConfig::desk(Objective::Lae);
        tc.total_steps = 12;
        tc.warmup_steps = 4;
        tc.batch_size = 4;
        tc.seed = 7;
        let lines = tiny_corpus();
        let a = train::<f64>(&lines, &vocab, &cfg, &tc, InitKind::Normal, None).unwrap();
        let b = train::<f64>(&lines, &vocab, &cfg, &tc, InitKind::Normal, None).unwrap();
        assert_eq!(a.history, b.history);
        for (x, y) in a
            .model
            .params
            .embed
            .data()
            .iter()
            .zip(b.model.params.embed.data())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_reload_gives_identical_evaluation_loss() {
        let vocab = toy_vocab();
        let cfg = tta_cfg(&vocab);
        let mut tc = TrainConfig::desk(Objective::Lae);
        tc.total_steps = 10;
        tc.warmup_steps = 2;
        tc.batch_size = 4;
        let lines = tiny_corpus();
        // 32-bit training: the checkpoint stores exactly the in-memory values
        let out = train::<f32>(&lines, &vocab, &cfg, &tc, InitKind::Normal, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        crate::model::save_checkpoint(&out.model.params, &path).unwrap();
        let loaded =
            crate::model::load_checkpoint(ModelParams::<f32>::zeros(&cfg), &path).unwrap();
        let reloaded = Model::new(cfg.clone(), loaded).unwrap();
        let eval_set: Vec<EncodedSentence> = lines
            .iter()
            .map(|l| vocab.encode(l, cfg.max_seq_len).unwrap())
            .collect();
        let a = eval_loss(&out.model, &eval_set).unwrap();
        let b = eval_loss(&reloaded, &eval_set).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_corpus_and_overflow_handling() {
        let vocab = toy_vocab();
        let mut cfg = tta_cfg(&vocab);
        cfg.max_seq_len = 5;
        let tc = {
            let mut t = TrainConfig::desk(Objective::Lae);
            t.total_steps = 1;
            t.warmup_steps = 0;
            t.batch_size = 2;
            t
        };
        assert!(matches!(
            train::<f64>(&[], &vocab, &cfg, &tc, InitKind::Normal, None),
            Err(Error::EmptyCorpus)
        ));
        let lines = vec![
            "aa bb".to_string(),
            "aa bb cc dd ee ff gg hh".to_string(), // too long for max_seq_len 5
        ];
        let out = train::<f64>(&lines, &vocab, &cfg, &tc, InitKind::Normal, None).unwrap();
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn history_csv_format() {
        let history = vec![LossPoint {
            step: 1,
            loss: 3.5,
            lr: 0.001,
        }];
        assert_eq!(history_csv(&history), "step,loss,lr\n1,3.5,0.001\n");
    }
}
