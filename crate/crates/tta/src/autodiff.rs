//! Reverse-mode automatic differentiation over a recorded compute graph.
//!
//! A [`Graph`] owns every intermediate value of one forward computation.
//! Operations append nodes in topological order; when the graph is recording,
//! each differentiable op also pushes a backward rule. One call to
//! [`Graph::backward`] walks the tape once and populates gradients for all
//! gradient-requiring leaves.
//!
//! Every forward op checks its output for non-finite values: NaN/Inf is an
//! error, never a value.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node in a [`Graph`]. Equality means "same node", which the
/// model layer uses to assert that the key/value input of every layer is the
/// identical tensor, not a copy.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    /// True for leaves with `requires_grad` and for any node computed from
    /// one; gradients only flow through these.
    needs_grad: bool,
}

/// Arguments handed to a backward rule.
pub struct BwdArgs<'a, S> {
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    pub out_grad: &'a Tensor<S>,
    /// Which inputs actually need a gradient; rules may return `None` for the
    /// others.
    pub needs: Vec<bool>,
}

type BackwardFn<S> = Box<dyn Fn(&BwdArgs<S>) -> Vec<Option<Tensor<S>>>>;

struct Step<S> {
    inputs: Vec<Var>,
    output: Var,
    backward: BackwardFn<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    steps: Vec<Step<S>>,
    recording: bool,
}

impl<S: Scalar> Graph<S> {
    /// Graph that records backward rules; use for training and grad checks.
    pub fn training() -> Self {
        Graph {
            nodes: Vec::new(),
            steps: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only graph; same arithmetic, no tape.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            steps: Vec::new(),
            recording: false,
        }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes[v.0].grad.take()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Append the result of an op, wiring up its backward rule when needed.
    fn record<F>(&mut self, op: &'static str, inputs: &[Var], value: Tensor<S>, backward: F) -> Result<Var>
    where
        F: Fn(&BwdArgs<S>) -> Vec<Option<Tensor<S>>> + 'static,
    {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let needs = self.recording && inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            needs_grad: needs,
        });
        let out = Var(self.nodes.len() - 1);
        if needs {
            self.steps.push(Step {
                inputs: inputs.to_vec(),
                output: out,
                backward: Box::new(backward),
            });
        }
        Ok(out)
    }

    /// Reverse pass from a scalar `loss`. Populates `grad` for every leaf
    /// registered with `requires_grad`; disconnected leaves get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::LossNotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(
            self.nodes[loss.0].value.shape().to_vec(),
            S::one(),
        ));

        for step in self.steps.iter().rev() {
            let out_grad = match grads[step.output.0].take() {
                Some(g) => g,
                None => continue,
            };
            let args = BwdArgs {
                inputs: step.inputs.iter().map(|&v| &self.nodes[v.0].value).collect(),
                output: &self.nodes[step.output.0].value,
                out_grad: &out_grad,
                needs: step.inputs.iter().map(|&v| self.nodes[v.0].needs_grad).collect(),
            };
            let contributions = (step.backward)(&args);
            debug_assert_eq!(contributions.len(), step.inputs.len());
            for (&var, contribution) in step.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                node.grad = Some(match grads[i].take() {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape().to_vec()),
                });
            }
        }
        Ok(())
    }

    // ----- elementwise and structural ops -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.record("add", &[a, b], value, |args| {
            vec![Some(args.out_grad.clone()), Some(args.out_grad.clone())]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        self.record("mul", &[a, b], value, |args| {
            vec![
                Some(args.out_grad.mul(args.inputs[1]).unwrap()),
                Some(args.out_grad.mul(args.inputs[0]).unwrap()),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.record("scale", &[a], value, move |args| {
            vec![Some(args.out_grad.scale(c))]
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.record("sum", &[a], value, |args| {
            let g = args.out_grad.item();
            vec![Some(Tensor::full(args.inputs[0].shape().to_vec(), g))]
        })
    }

    /// Adds a `[d]` bias vector to every row of a `[r, d]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = bv.numel();
        if xv.last_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.record("add_row", &[x, bias], value, move |args| {
            let g = args.out_grad;
            let mut db = Tensor::zeros(args.inputs[1].shape().to_vec());
            for r in 0..g.rows() {
                for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            vec![Some(g.clone()), Some(db)]
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record("matmul", &[a, b], value, |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.out_grad);
            let da = if args.needs[0] { Some(g.matmul_t(b).unwrap()) } else { None };
            let db = if args.needs[1] { Some(a.t_matmul(g).unwrap()) } else { None };
            vec![da, db]
        })
    }

    /// `a @ bᵀ`, used for attention scores and the tied output projection.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        self.record("matmul_t", &[a, b], value, |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.out_grad);
            let da = if args.needs[0] { Some(g.matmul(b).unwrap()) } else { None };
            let db = if args.needs[1] { Some(g.t_matmul(a).unwrap()) } else { None };
            vec![da, db]
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let rows = av.rows();
        assert!(start + len <= rows, "slice_rows {start}+{len} > {rows}");
        let mut data = Vec::with_capacity(len * w);
        for r in start..start + len {
            data.extend_from_slice(av.row(r));
        }
        let value = Tensor::new(vec![len, w], data);
        self.record("slice_rows", &[a], value, move |args| {
            let mut da = Tensor::zeros(args.inputs[0].shape().to_vec());
            for r in 0..len {
                da.row_mut(start + r).copy_from_slice(args.out_grad.row(r));
            }
            vec![Some(da)]
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let rows = av.rows();
        assert!(start + len <= w, "slice_cols {start}+{len} > {w}");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data);
        self.record("slice_cols", &[a], value, move |args| {
            let mut da = Tensor::zeros(args.inputs[0].shape().to_vec());
            for r in 0..da.rows() {
                da.row_mut(r)[start..start + len].copy_from_slice(args.out_grad.row(r));
            }
            vec![Some(da)]
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data);
        let widths_bwd = widths.clone();
        self.record("concat_cols", parts, value, move |args| {
            let g = args.out_grad;
            let mut out = Vec::with_capacity(widths_bwd.len());
            let mut offset = 0;
            for &w in &widths_bwd {
                let mut dp = Tensor::zeros(vec![g.rows(), w]);
                for r in 0..g.rows() {
                    dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                }
                out.push(Some(dp));
                offset += w;
            }
            out
        })
    }

    /// Row lookup (embedding gather). Duplicate indices accumulate in the
    /// backward scatter.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        let idx = indices.to_vec();
        self.record("gather_rows", &[a], value, move |args| {
            let mut da = Tensor::zeros(args.inputs[0].shape().to_vec());
            for (r, &i) in idx.iter().enumerate() {
                for (o, &v) in da.row_mut(i).iter_mut().zip(args.out_grad.row(r)) {
                    *o += v;
                }
            }
            vec![Some(da)]
        })
    }

    // ----- attention and normalization ops -----

    /// Replaces each diagonal entry of a square score matrix with the masking
    /// constant, so the following softmax gives the position zero weight on
    /// itself. No gradient flows through the overwritten diagonal.
    pub fn diag_mask(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::NotSquare {
                op: "diag_mask",
                shape,
            });
        }
        let n = shape[0];
        let mut value = av.clone();
        for i in 0..n {
            value.data_mut()[i * n + i] = S::mask_neg();
        }
        self.record("diag_mask", &[a], value, move |args| {
            let mut da = args.out_grad.clone();
            for i in 0..n {
                da.data_mut()[i * n + i] = S::zero();
            }
            vec![Some(da)]
        })
    }

    /// Numerically stabilized softmax over the trailing dimension with an
    /// optional additive mask. Entries whose masked logit falls below the
    /// masking threshold get weight exactly zero; a row with no surviving
    /// entry is an error.
    pub fn softmax_masked(&mut self, logits: Var, mask: Option<Var>) -> Result<Var> {
        if let Some(m) = mask {
            let (lv, mv) = (self.value(logits), self.value(m));
            if lv.shape() != mv.shape() {
                return Err(Error::ShapeMismatch {
                    op: "softmax_masked",
                    lhs: lv.shape().to_vec(),
                    rhs: mv.shape().to_vec(),
                });
            }
        }
        let lv = self.value(logits);
        let effective = match mask {
            Some(m) => lv.add(self.value(m))?,
            None => lv.clone(),
        };
        let value = softmax_rows(&effective)?;
        let inputs: Vec<Var> = match mask {
            Some(m) => vec![logits, m],
            None => vec![logits],
        };
        self.record("softmax_masked", &inputs, value, move |args| {
            let s = args.output;
            let g = args.out_grad;
            let w = s.last_dim();
            let mut dl = Tensor::zeros(s.shape().to_vec());
            for r in 0..s.rows() {
                let sr = s.row(r);
                let gr = g.row(r);
                let dot: S = sr.iter().zip(gr).map(|(&si, &gi)| si * gi).sum();
                for j in 0..w {
                    dl.row_mut(r)[j] = sr[j] * (gr[j] - dot);
                }
            }
            let mut out = vec![Some(dl.clone())];
            if args.inputs.len() == 2 {
                out.push(if args.needs[1] { Some(dl) } else { None });
            }
            out
        })
    }

    /// Per-row standardization (population variance) followed by a learned
    /// affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        assert!(eps > S::zero(), "layer_norm eps must be positive");
        let xv = self.value(x);
        let d = xv.last_dim();
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).numel() != d {
                let _ = name;
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let xv = self.value(x);
        let mut value = Tensor::zeros(xv.shape().to_vec());
        let inv_d = S::one() / S::from_usize(d).unwrap();
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let inv_std = S::one() / (var + eps).sqrt();
            let out = value.row_mut(r);
            for j in 0..d {
                out[j] = (row[j] - mean) * inv_std * gv.data()[j] + bv.data()[j];
            }
        }
        self.record("layer_norm", &[x, gain, bias], value, move |args| {
            let (x, gain) = (args.inputs[0], args.inputs[1]);
            let g = args.out_grad;
            let d = x.last_dim();
            let inv_d = S::one() / S::from_usize(d).unwrap();
            let mut dx = Tensor::zeros(x.shape().to_vec());
            let mut dgain = Tensor::zeros(vec![d]);
            let mut dbias = Tensor::zeros(vec![d]);
            for r in 0..x.rows() {
                let row = x.row(r);
                let gr = g.row(r);
                let mean = row.iter().copied().sum::<S>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                let inv_std = S::one() / (var + eps).sqrt();
                // y: normalized pre-affine row; a: upstream grad through gain
                let mut mean_a = S::zero();
                let mut mean_ay = S::zero();
                for j in 0..d {
                    let y = (row[j] - mean) * inv_std;
                    let a = gr[j] * gain.data()[j];
                    mean_a += a;
                    mean_ay += a * y;
                    dgain.data_mut()[j] += gr[j] * y;
                    dbias.data_mut()[j] += gr[j];
                }
                mean_a *= inv_d;
                mean_ay *= inv_d;
                for j in 0..d {
                    let y = (row[j] - mean) * inv_std;
                    let a = gr[j] * gain.data()[j];
                    dx.row_mut(r)[j] = (a - mean_a - y * mean_ay) * inv_std;
                }
            }
            vec![
                if args.needs[0] { Some(dx) } else { None },
                if args.needs[1] { Some(dgain) } else { None },
                if args.needs[2] { Some(dbias) } else { None },
            ]
        })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_scalar);
        self.record("gelu", &[x], value, |args| {
            let x = args.inputs[0];
            let g = args.out_grad;
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (o, (&xv, &gv)) in dx
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(g.data()))
            {
                *o = gv * gelu_grad_scalar(xv);
            }
            vec![Some(dx)]
        })
    }

    /// Inverted dropout; active only in training forwards.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::from_f64_lossy(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<S> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = Tensor::new(xv.shape().to_vec(), mask);
        let value = xv.mul(&mask)?;
        self.record("dropout", &[x], value, move |args| {
            vec![Some(args.out_grad.mul(&mask).unwrap())]
        })
    }

    /// Mean negative log-softmax probability of `targets`, skipping positions
    /// whose target id is in `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.rows();
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let counted: Vec<bool> = targets.iter().map(|t| !ignore.contains(t)).collect();
        let m = counted.iter().filter(|&&c| c).count();
        if m == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut total = S::zero();
        for r in 0..rows {
            if !counted[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            total += nll_row(lv.row(r), t);
        }
        let value = Tensor::scalar(total / S::from_usize(m).unwrap());
        let targets = targets.to_vec();
        self.record("cross_entropy", &[logits], value, move |args| {
            let lv = args.inputs[0];
            let g = args.out_grad.item() / S::from_usize(m).unwrap();
            let mut dl = Tensor::zeros(lv.shape().to_vec());
            for r in 0..lv.rows() {
                if !counted[r] {
                    continue;
                }
                let row = lv.row(r);
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let denom: S = row.iter().map(|&v| (v - max).exp()).sum();
                let out = dl.row_mut(r);
                for j in 0..row.len() {
                    let p = (row[j] - max).exp() / denom;
                    out[j] = p * g;
                }
                out[targets[r]] -= g;
            }
            vec![Some(dl)]
        })
    }
}

/// Softmax over the trailing dimension with exact zeros below the masking
/// threshold. Shared by the graph op and kept separate so the forward math is
/// in one place.
fn softmax_rows<S: Scalar>(effective: &Tensor<S>) -> Result<Tensor<S>> {
    let threshold = S::mask_threshold();
    let w = effective.last_dim();
    let mut out = Tensor::zeros(effective.shape().to_vec());
    for r in 0..effective.rows() {
        let row = effective.row(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        if max <= threshold {
            return Err(Error::DegenerateSoftmaxRow { row: r });
        }
        let mut denom = S::zero();
        let out_row = out.row_mut(r);
        for j in 0..w {
            let e = if row[j] <= threshold {
                S::zero()
            } else {
                (row[j] - max).exp()
            };
            out_row[j] = e;
            denom += e;
        }
        for v in out_row.iter_mut() {
            *v /= denom;
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

/// Negative log-softmax probability of `target` within one logit row;
/// the numerical core of cross-entropy and of sentence scoring.
pub fn nll_row<S: Scalar>(row: &[S], target: usize) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    lse - row[target]
}
