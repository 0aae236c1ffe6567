//! Central-finite-difference verification of recorded gradients.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Builds a scalar loss from leaf variables registered by the checker.
pub trait GraphBuilder<S: Scalar>: Fn(&mut Graph<S>, &[Var]) -> Result<Var> {}
impl<S: Scalar, F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>> GraphBuilder<S> for F {}

#[derive(Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares the tape's gradients against central differences with the given
/// step, for every element of every parameter. The relative error of a pair
/// `(a, n)` is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<S: Scalar>(
    build: impl GraphBuilder<S>,
    params: &[(String, Tensor<S>)],
    step: f64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut graph = Graph::training();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| graph.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .map(|&v| graph.take_grad(v).expect("leaf grad populated"))
        .collect();

    let eval = |perturbed: &[(String, Tensor<S>)]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|(_, t)| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item().to_f64_lossy())
    };

    let h = step;
    let mut work: Vec<(String, Tensor<S>)> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut global_max = 0.0f64;
    for p in 0..params.len() {
        let mut max_err = 0.0f64;
        for j in 0..params[p].1.numel() {
            let orig = work[p].1.data()[j];
            work[p].1.data_mut()[j] = orig + S::from_f64_lossy(h);
            let up = eval(&work)?;
            work[p].1.data_mut()[j] = orig - S::from_f64_lossy(h);
            let down = eval(&work)?;
            work[p].1.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].data()[j].to_f64_lossy();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
        per_param.push((params[p].0.clone(), max_err));
        global_max = global_max.max(max_err);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: global_max,
    })
}
