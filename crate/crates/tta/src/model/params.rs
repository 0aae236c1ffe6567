//! Learned parameters. The token embedding table doubles as the output
//! projection (tied weights), so the softmax layer adds only a bias vector.

use super::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LayerParams<S> {
    pub w_q: Tensor<S>,
    pub b_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub b_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub b_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_o: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<S> {
    /// Token embeddings, `|V| x d`; identical storage backs the output
    /// projection.
    pub embed: Tensor<S>,
    /// Trainable position embeddings, `n_max x d`.
    pub pos: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    /// Output bias over the vocabulary.
    pub out_bias: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Truncated-normal weights (std 0.02), zero biases, identity layer norm.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                w_q: truncated_normal(vec![d, d], INIT_STD, rng),
                b_q: Tensor::zeros(vec![d]),
                w_k: truncated_normal(vec![d, d], INIT_STD, rng),
                b_k: Tensor::zeros(vec![d]),
                w_v: truncated_normal(vec![d, d], INIT_STD, rng),
                b_v: Tensor::zeros(vec![d]),
                w_o: truncated_normal(vec![d, d], INIT_STD, rng),
                b_o: Tensor::zeros(vec![d]),
                ffn_w1: truncated_normal(vec![d, config.ffn_dim], INIT_STD, rng),
                ffn_b1: Tensor::zeros(vec![config.ffn_dim]),
                ffn_w2: truncated_normal(vec![config.ffn_dim, d], INIT_STD, rng),
                ffn_b2: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::full(vec![d], S::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::full(vec![d], S::one()),
                ln2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        ModelParams {
            embed: truncated_normal(vec![config.vocab_size, d], INIT_STD, rng),
            pos: truncated_normal(vec![config.max_seq_len, d], INIT_STD, rng),
            layers,
            out_bias: Tensor::zeros(vec![config.vocab_size]),
        }
    }

    /// All-zero weights with identity layer norms: every logit row comes out
    /// equal, giving the uniform distribution. Used by diagnostics and tests.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                w_q: Tensor::zeros(vec![d, d]),
                b_q: Tensor::zeros(vec![d]),
                w_k: Tensor::zeros(vec![d, d]),
                b_k: Tensor::zeros(vec![d]),
                w_v: Tensor::zeros(vec![d, d]),
                b_v: Tensor::zeros(vec![d]),
                w_o: Tensor::zeros(vec![d, d]),
                b_o: Tensor::zeros(vec![d]),
                ffn_w1: Tensor::zeros(vec![d, config.ffn_dim]),
                ffn_b1: Tensor::zeros(vec![config.ffn_dim]),
                ffn_w2: Tensor::zeros(vec![config.ffn_dim, d]),
                ffn_b2: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::full(vec![d], S::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::full(vec![d], S::one()),
                ln2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        ModelParams {
            embed: Tensor::zeros(vec![config.vocab_size, d]),
            pos: Tensor::zeros(vec![config.max_seq_len, d]),
            layers,
            out_bias: Tensor::zeros(vec![config.vocab_size]),
        }
    }

    /// Stable (name, tensor) listing; checkpointing, the optimizer and the
    /// gradient checker all rely on this order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in l.named() {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("out_bias".into(), &self.out_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in l.named_mut() {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("out_bias".into(), &mut self.out_bias));
        out
    }

    pub fn named_owned(&self) -> Vec<(String, Tensor<S>)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(Error::NonFiniteParam { param: name });
            }
        }
        Ok(())
    }

    /// Casts through 32-bit storage, i.e. what a checkpoint round trip does
    /// to the values without touching the filesystem.
    pub fn round_trip_f32(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.named_mut() {
            let narrowed = t.to_f32();
            *t = Tensor::from_f32_tensor(&narrowed);
        }
        out
    }
}

impl<S: Scalar> LayerParams<S> {
    fn named(&self) -> [(&'static str, &Tensor<S>); 16] {
        [
            ("attn.w_q", &self.w_q),
            ("attn.b_q", &self.b_q),
            ("attn.w_k", &self.w_k),
            ("attn.b_k", &self.b_k),
            ("attn.w_v", &self.w_v),
            ("attn.b_v", &self.b_v),
            ("attn.w_o", &self.w_o),
            ("attn.b_o", &self.b_o),
            ("ffn.w1", &self.ffn_w1),
            ("ffn.b1", &self.ffn_b1),
            ("ffn.w2", &self.ffn_w2),
            ("ffn.b2", &self.ffn_b2),
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<S>); 16] {
        [
            ("attn.w_q", &mut self.w_q),
            ("attn.b_q", &mut self.b_q),
            ("attn.w_k", &mut self.w_k),
            ("attn.b_k", &mut self.b_k),
            ("attn.w_v", &mut self.w_v),
            ("attn.b_v", &mut self.b_v),
            ("attn.w_o", &mut self.w_o),
            ("attn.b_o", &mut self.b_o),
            ("ffn.w1", &mut self.ffn_w1),
            ("ffn.b1", &mut self.ffn_b1),
            ("ffn.w2", &mut self.ffn_w2),
            ("ffn.b2", &mut self.ffn_b2),
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
        ]
    }
}

/// Graph handles for one layer's parameters.
pub struct LayerVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Graph handles for the whole parameter set, in [`ModelParams::named`]
/// order.
pub struct ParamVars {
    pub embed: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    pub out_bias: Var,
    /// Flat view matching [`ModelParams::named`].
    pub flat: Vec<Var>,
}

impl ParamVars {
    /// Rebuilds the structured view from a flat handle list in
    /// [`ModelParams::named`] order; the inverse of [`register_params`] for
    /// externally registered leaves (gradient checking).
    pub fn from_flat(num_layers: usize, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 3 + 16 * num_layers);
        let mut it = vars.iter().copied();
        let mut next = || it.next().unwrap();
        let embed = next();
        let pos = next();
        let layers = (0..num_layers)
            .map(|_| LayerVars {
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                b_o: next(),
                ffn_w1: next(),
                ffn_b1: next(),
                ffn_w2: next(),
                ffn_b2: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let out_bias = next();
        ParamVars {
            embed,
            pos,
            layers,
            out_bias,
            flat: vars.to_vec(),
        }
    }
}

/// Copies the parameters into a graph as leaves. With `trainable` the leaves
/// require gradients.
pub fn register_params<S: Scalar>(
    graph: &mut Graph<S>,
    params: &ModelParams<S>,
    trainable: bool,
) -> ParamVars {
    let mut flat = Vec::new();
    let mut leaf = |g: &mut Graph<S>, t: &Tensor<S>| {
        let v = g.leaf(t.clone(), trainable);
        flat.push(v);
        v
    };
    let embed = leaf(graph, &params.embed);
    let pos = leaf(graph, &params.pos);
    let layers = params
        .layers
        .iter()
        .map(|l| LayerVars {
            w_q: leaf(graph, &l.w_q),
            b_q: leaf(graph, &l.b_q),
            w_k: leaf(graph, &l.w_k),
            b_k: leaf(graph, &l.b_k),
            w_v: leaf(graph, &l.w_v),
            b_v: leaf(graph, &l.b_v),
            w_o: leaf(graph, &l.w_o),
            b_o: leaf(graph, &l.b_o),
            ffn_w1: leaf(graph, &l.ffn_w1),
            ffn_b1: leaf(graph, &l.ffn_b1),
            ffn_w2: leaf(graph, &l.ffn_w2),
            ffn_b2: leaf(graph, &l.ffn_b2),
            ln1_gain: leaf(graph, &l.ln1_gain),
            ln1_bias: leaf(graph, &l.ln1_bias),
            ln2_gain: leaf(graph, &l.ln2_gain),
            ln2_bias: leaf(graph, &l.ln2_bias),
        })
        .collect();
    let out_bias = leaf(graph, &params.out_bias);
    ParamVars {
        embed,
        pos,
        layers,
        out_bias,
        flat,
    }
}
