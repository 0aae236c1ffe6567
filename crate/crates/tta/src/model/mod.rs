//! The text-autoencoder model and its two baselines.
//!
//! All three architectures share one encoder layer (attention, query-side
//! residual, layer norm, feed-forward) and one parameter layout; they differ
//! only in how queries, keys and values are wired:
//!
//! * `tta` — keys and values are pinned to the embedding-layer output for
//!   every layer, the query stream starts from the position embeddings, and
//!   each attention matrix has its diagonal masked out. Position `i` of the
//!   output therefore never sees token `i`, so one forward pass yields a
//!   prediction context for every position at once.
//! * `unilm` — standard causal self-attention; slot `i` predicts token `i+1`.
//! * `bilm` — standard bidirectional self-attention over an input whose
//!   scored position has been replaced by `[MASK]`; one pass per position.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{register_params, LayerParams, LayerVars, ModelParams, ParamVars, INIT_STD};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::TokenId;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-12;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Tta,
    #[serde(rename = "unilm")]
    UniLm,
    #[serde(rename = "bilm")]
    BiLm,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Tta => "tta",
            Architecture::UniLm => "unilm",
            Architecture::BiLm => "bilm",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tta" => Ok(Architecture::Tta),
            "unilm" => Ok(Architecture::UniLm),
            "bilm" => Ok(Architecture::BiLm),
            other => Err(Error::BadConfig(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub architecture: Architecture,
    /// Ablation switch: with `false` the T-TA keeps input isolation but lets
    /// every position attend to itself.
    pub diag_mask_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale dimensions; training and grad checks stay in the minutes.
    pub fn desk(architecture: Architecture, vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_seq_len: 128,
            dropout_rate: 0.1,
            architecture,
            diag_mask_enabled: true,
        }
    }

    /// The dimensions used for the published runtime measurements.
    pub fn paper_scale(architecture: Architecture, vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 3,
            model_dim: 512,
            num_heads: 8,
            ffn_dim: 2048,
            vocab_size,
            max_seq_len: 128,
            dropout_rate: 0.1,
            architecture,
            diag_mask_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::BadConfig(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 3 {
            return Err(Error::BadConfig(
                "max_seq_len must be at least 3 (BOS, one token, EOS)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::BadConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.vocab_size == 0 || self.num_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::BadConfig("zero-sized dimension".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Everything a forward pass computed, for invariant probing.
#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    /// Query input of each layer; for the T-TA, layer 1 gets the position
    /// embeddings.
    pub query_inputs: Vec<Tensor<S>>,
    /// Key/value input of each layer.
    pub kv_inputs: Vec<Tensor<S>>,
    /// Graph node id of each layer's key/value input. For the T-TA these are
    /// all the same node: the layers share one tensor, not copies.
    pub kv_node_ids: Vec<usize>,
    /// Attention weights per layer and head, each `n x n`.
    pub attention_weights: Vec<Vec<Tensor<S>>>,
    /// Attention block output per layer (after the head merge projection).
    pub dmsa_outputs: Vec<Tensor<S>>,
    /// Full layer outputs.
    pub layer_outputs: Vec<Tensor<S>>,
    pub final_hidden: Tensor<S>,
    pub logits: Tensor<S>,
}

impl<S: Scalar> ForwardTrace<S> {
    /// Largest absolute attention weight any position puts on itself.
    pub fn max_abs_diag_weight(&self) -> f64 {
        let mut max = 0.0f64;
        for layer in &self.attention_weights {
            for head in layer {
                let n = head.shape()[0];
                for i in 0..n {
                    max = max.max(head.data()[i * n + i].to_f64_lossy().abs());
                }
            }
        }
        max
    }

    /// True when every layer reads keys and values from the same graph node.
    pub fn kv_reference_identical(&self) -> bool {
        self.kv_node_ids.windows(2).all(|w| w[0] == w[1])
    }

    /// Largest attention weight any query places on the given key position.
    pub fn max_weight_on_key(&self, key: usize) -> f64 {
        let mut max = 0.0f64;
        for layer in &self.attention_weights {
            for head in layer {
                let n = head.shape()[0];
                for i in 0..n {
                    max = max.max(head.data()[i * n + key].to_f64_lossy());
                }
            }
        }
        max
    }
}

/// Raw results of a single encoder pass.
pub struct InferOutput<S> {
    pub hidden: Tensor<S>,
    pub logits: Option<Tensor<S>>,
    pub trace: Option<ForwardTrace<S>>,
}

/// Embedding lookup shared by all architectures: returns the key/value input
/// (token plus position embeddings) and the query seed, which for the T-TA is
/// the position embeddings alone and for the baselines equals the key/value
/// input.
pub fn embed<S: Scalar>(
    tokens: &[TokenId],
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_len(tokens.len(), config)?;
    let x = params.embed.gather_rows(tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let p = params.pos.gather_rows(&positions)?;
    let kv = x.add(&p)?;
    let seed = match config.architecture {
        Architecture::Tta => p,
        _ => kv.clone(),
    };
    Ok((kv, seed))
}

fn check_len(n: usize, config: &ModelConfig) -> Result<()> {
    if n < 2 {
        return Err(Error::SequenceTooShort { len: n });
    }
    if n > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: config.max_seq_len,
        });
    }
    Ok(())
}

struct LayerCapture<S> {
    query_input: Tensor<S>,
    kv_input: Tensor<S>,
    attention: Vec<Tensor<S>>,
    dmsa_output: Tensor<S>,
    layer_output: Tensor<S>,
}

pub(crate) struct EncoderOut<S> {
    pub hidden: Var,
    kv_node_ids: Vec<usize>,
    captures: Option<Vec<LayerCapture<S>>>,
}

impl<S: Scalar> EncoderOut<S> {
    pub(crate) fn into_trace(
        self,
        graph: &Graph<S>,
        logits: Var,
    ) -> ForwardTrace<S> {
        let captures = self.captures.expect("trace capture was requested");
        let mut trace = ForwardTrace {
            query_inputs: Vec::new(),
            kv_inputs: Vec::new(),
            kv_node_ids: self.kv_node_ids,
            attention_weights: Vec::new(),
            dmsa_outputs: Vec::new(),
            layer_outputs: Vec::new(),
            final_hidden: graph.value(self.hidden).clone(),
            logits: graph.value(logits).clone(),
        };
        for c in captures {
            trace.query_inputs.push(c.query_input);
            trace.kv_inputs.push(c.kv_input);
            trace.attention_weights.push(c.attention);
            trace.dmsa_outputs.push(c.dmsa_output);
            trace.layer_outputs.push(c.layer_output);
        }
        trace
    }
}

/// Builds the full layer stack of the configured architecture on `graph`.
/// `key_pad[j] = true` removes key position `j` from every attention row.
/// Dropout (on attention weights and feed-forward outputs) is active exactly
/// when a `dropout_rng` is supplied.
pub(crate) fn build_encoder<S: Scalar>(
    graph: &mut Graph<S>,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[TokenId],
    key_pad: Option<&[bool]>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    capture: bool,
) -> Result<EncoderOut<S>> {
    config.validate()?;
    check_len(tokens.len(), config)?;
    let n = tokens.len();

    let x = graph.gather_rows(pv.embed, tokens)?;
    let positions: Vec<usize> = (0..n).collect();
    let p = graph.gather_rows(pv.pos, &positions)?;
    let kv0 = graph.add(x, p)?;

    let (mut q, fixed_kv) = match config.architecture {
        Architecture::Tta => (p, Some(kv0)),
        _ => (kv0, None),
    };
    let diag = config.architecture == Architecture::Tta && config.diag_mask_enabled;
    let causal = config.architecture == Architecture::UniLm;
    let additive = additive_mask::<S>(n, causal, key_pad).map(|m| graph.constant(m));

    let mut kv_node_ids = Vec::with_capacity(config.num_layers);
    let mut captures = capture.then(Vec::new);
    for lv in &pv.layers {
        let kv = fixed_kv.unwrap_or(q);
        kv_node_ids.push(kv.id());
        let (h, layer_capture) = encoder_layer(
            graph,
            lv,
            config,
            q,
            kv,
            diag,
            additive,
            dropout_rng.as_deref_mut(),
            capture,
        )?;
        if let (Some(all), Some(c)) = (captures.as_mut(), layer_capture) {
            all.push(c);
        }
        q = h;
    }
    Ok(EncoderOut {
        hidden: q,
        kv_node_ids,
        captures,
    })
}

/// One encoder layer: multi-head attention with the architecture's masking,
/// residual connection on the query stream only, then the position-wise
/// feed-forward block. Post-norm placement.
#[allow(clippy::too_many_arguments)]
fn encoder_layer<S: Scalar>(
    graph: &mut Graph<S>,
    lv: &LayerVars,
    config: &ModelConfig,
    q_in: Var,
    kv_in: Var,
    diag: bool,
    additive: Option<Var>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    capture: bool,
) -> Result<(Var, Option<LayerCapture<S>>)> {
    let dh = config.head_dim();
    let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let ln_eps = S::from_f64_lossy(LN_EPS);

    let qp = graph.matmul(q_in, lv.w_q)?;
    let qp = graph.add_row(qp, lv.b_q)?;
    let kp = graph.matmul(kv_in, lv.w_k)?;
    let kp = graph.add_row(kp, lv.b_k)?;
    let vp = graph.matmul(kv_in, lv.w_v)?;
    let vp = graph.add_row(vp, lv.b_v)?;

    let mut heads = Vec::with_capacity(config.num_heads);
    let mut attn_capture = capture.then(Vec::new);
    for h in 0..config.num_heads {
        let qh = graph.slice_cols(qp, h * dh, dh)?;
        let kh = graph.slice_cols(kp, h * dh, dh)?;
        let vh = graph.slice_cols(vp, h * dh, dh)?;
        let scores = graph.matmul_t(qh, kh)?;
        let scores = graph.scale(scores, scale)?;
        let scores = if diag { graph.diag_mask(scores)? } else { scores };
        let weights = graph.softmax_masked(scores, additive)?;
        if let Some(c) = attn_capture.as_mut() {
            c.push(graph.value(weights).clone());
        }
        let weights = match dropout_rng.as_deref_mut() {
            Some(rng) => graph.dropout(weights, config.dropout_rate, rng)?,
            None => weights,
        };
        heads.push(graph.matmul(weights, vh)?);
    }
    let merged = graph.concat_cols(&heads)?;
    let attn_out = graph.matmul(merged, lv.w_o)?;
    let attn_out = graph.add_row(attn_out, lv.b_o)?;

    // Residual to the query input only; the key/value stream never re-enters.
    let res = graph.add(q_in, attn_out)?;
    let normed = graph.layer_norm(res, lv.ln1_gain, lv.ln1_bias, ln_eps)?;

    let f1 = graph.matmul(normed, lv.ffn_w1)?;
    let f1 = graph.add_row(f1, lv.ffn_b1)?;
    let act = graph.gelu(f1)?;
    let f2 = graph.matmul(act, lv.ffn_w2)?;
    let f2 = graph.add_row(f2, lv.ffn_b2)?;
    let f2 = match dropout_rng {
        Some(rng) => graph.dropout(f2, config.dropout_rate, rng)?,
        None => f2,
    };
    let res2 = graph.add(normed, f2)?;
    let out = graph.layer_norm(res2, lv.ln2_gain, lv.ln2_bias, ln_eps)?;

    let layer_capture = if capture {
        Some(LayerCapture {
            query_input: graph.value(q_in).clone(),
            kv_input: graph.value(kv_in).clone(),
            attention: attn_capture.unwrap_or_default(),
            dmsa_output: graph.value(attn_out).clone(),
            layer_output: graph.value(out).clone(),
        })
    } else {
        None
    };
    Ok((out, layer_capture))
}

/// Output projection through the tied embedding table plus the vocabulary
/// bias.
pub(crate) fn project_logits<S: Scalar>(
    graph: &mut Graph<S>,
    pv: &ParamVars,
    hidden: Var,
) -> Result<Var> {
    let scores = graph.matmul_t(hidden, pv.embed)?;
    graph.add_row(scores, pv.out_bias)
}

fn additive_mask<S: Scalar>(n: usize, causal: bool, key_pad: Option<&[bool]>) -> Option<Tensor<S>> {
    if !causal && key_pad.is_none() {
        return None;
    }
    let neg = S::mask_neg();
    let mut m = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        let row = m.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let masked = (causal && j > i) || key_pad.is_some_and(|p| p[j]);
            if masked {
                *slot = neg;
            }
        }
    }
    Some(m)
}

/// A configured architecture with its parameters and a forward-pass counter
/// for complexity instrumentation. Parameters are immutable here; training
/// operates on [`ModelParams`] directly and wraps the result.
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
    passes: AtomicU64,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        config.validate()?;
        if params.embed.shape() != [config.vocab_size, config.model_dim]
            || params.layers.len() != config.num_layers
        {
            return Err(Error::BadConfig(
                "parameter shapes do not match configuration".into(),
            ));
        }
        Ok(Model {
            config,
            params,
            passes: AtomicU64::new(0),
        })
    }

    /// Fresh random initialization from the "init" stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, "init");
        let params = ModelParams::init(&config, &mut rng);
        Model::new(config, params)
    }

    /// All-zero weights; predicts the uniform distribution everywhere.
    pub fn zero_init(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::zeros(&config);
        Model::new(config, params)
    }

    /// Number of full encoder passes run so far.
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    fn count_pass(&self) {
        self.passes.fetch_add(1, Ordering::Relaxed);
    }

    /// Single deterministic encoder pass over `tokens`.
    pub fn infer(
        &self,
        tokens: &[TokenId],
        want_logits: bool,
        capture_trace: bool,
    ) -> Result<InferOutput<S>> {
        let mut graph = Graph::inference();
        let pv = register_params(&mut graph, &self.params, false);
        let enc = build_encoder(
            &mut graph,
            &pv,
            &self.config,
            tokens,
            None,
            None,
            capture_trace,
        )?;
        self.count_pass();
        let hidden_var = enc.hidden;
        if want_logits || capture_trace {
            let logits = project_logits(&mut graph, &pv, hidden_var)?;
            let trace = capture_trace.then(|| enc.into_trace(&graph, logits));
            Ok(InferOutput {
                hidden: graph.value(hidden_var).clone(),
                logits: Some(graph.value(logits).clone()),
                trace,
            })
        } else {
            Ok(InferOutput {
                hidden: graph.value(hidden_var).clone(),
                logits: None,
                trace: None,
            })
        }
    }

    /// One forward pass of the text autoencoder; valid for `tta` models only.
    pub fn tta_forward(&self, tokens: &[TokenId], capture_trace: bool) -> Result<InferOutput<S>> {
        self.expect_arch(Architecture::Tta)?;
        self.infer(tokens, true, capture_trace)
    }

    /// Causal forward pass; returns the `(n-1) x |V|` logits where row `i`
    /// predicts token `i+1`.
    pub fn unilm_forward(&self, tokens: &[TokenId]) -> Result<Tensor<S>> {
        self.expect_arch(Architecture::UniLm)?;
        let n = tokens.len();
        let mut graph = Graph::inference();
        let pv = register_params(&mut graph, &self.params, false);
        let enc = build_encoder(&mut graph, &pv, &self.config, tokens, None, None, false)?;
        self.count_pass();
        let slots = graph.slice_rows(enc.hidden, 0, n - 1)?;
        let logits = project_logits(&mut graph, &pv, slots)?;
        Ok(graph.value(logits).clone())
    }

    /// Mask-and-predict pass: replaces the token at interior position `i`
    /// with `[MASK]` and returns the logits row at `i`.
    pub fn bilm_forward(&self, tokens: &[TokenId], i: usize, mask_id: TokenId) -> Result<Tensor<S>> {
        self.expect_arch(Architecture::BiLm)?;
        let n = tokens.len();
        if n < 3 || i == 0 || i >= n - 1 {
            return Err(Error::PositionOutOfRange {
                pos: i,
                max: n.saturating_sub(2),
            });
        }
        let mut corrupted = tokens.to_vec();
        corrupted[i] = mask_id;
        let mut graph = Graph::inference();
        let pv = register_params(&mut graph, &self.params, false);
        let enc = build_encoder(&mut graph, &pv, &self.config, &corrupted, None, None, false)?;
        self.count_pass();
        let row = graph.slice_rows(enc.hidden, i, 1)?;
        let logits = project_logits(&mut graph, &pv, row)?;
        Ok(graph.value(logits).clone())
    }

    fn expect_arch(&self, arch: Architecture) -> Result<()> {
        if self.config.architecture != arch {
            return Err(Error::BadConfig(format!(
                "operation requires a {arch} model, this one is {}",
                self.config.architecture
            )));
        }
        Ok(())
    }
}
