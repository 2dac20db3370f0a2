//! Top-1 routing.
//!
//! Each token goes to `argmax(a·W_gate)` (lowest index on ties). The expert
//! output is scaled by the softmax probability of the chosen expert, which is
//! what gives the gate a gradient.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Expert chosen for each local token.
    pub assignment: Vec<usize>,
    /// Tokens routed to each expert; sums to the token count.
    pub counts: Vec<usize>,
    /// Softmax over experts, one row per token.
    pub probs: Tensor,
}

impl RoutingDecision {
    /// A decision with a fixed assignment and uniform probabilities. Used to
    /// drive dispatch directly in tests.
    pub fn from_assignment(assignment: Vec<usize>, experts: usize) -> Result<Self> {
        let mut counts = vec![0; experts];
        for &e in &assignment {
            if e >= experts {
                return Err(Error::config(format!("expert {e} out of range for {experts}")));
            }
            counts[e] += 1;
        }
        let n = assignment.len();
        let probs = Tensor::matrix(
            n,
            experts,
            vec![1.0 / experts as f64; n * experts],
            crate::moe::ACTIVATION_WIDTH,
        )?;
        Ok(Self {
            assignment,
            counts,
            probs,
        })
    }

    /// Probability of the chosen expert for each token.
    pub fn selected_probs(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .enumerate()
            .map(|(i, &e)| self.probs.row(i)[e])
            .collect()
    }
}

pub fn gate_forward(a: &Tensor, w_gate: &Tensor) -> Result<RoutingDecision> {
    let logits = matmul(a, w_gate)?;
    let experts = w_gate.cols();
    let n = a.rows();
    let mut assignment = Vec::with_capacity(n);
    let mut counts = vec![0; experts];
    let mut probs = Vec::with_capacity(n * experts);
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0;
        for (e, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = e;
            }
        }
        assignment.push(best);
        counts[best] += 1;
        let max = row[best];
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / sum));
    }
    Ok(RoutingDecision {
        assignment,
        counts,
        probs: Tensor::matrix(n, experts, probs, a.width())?,
    })
}

/// Given the gradient of the loss with respect to each token's selected
/// probability, returns `(da, dW_gate)`.
pub fn gate_backward(
    a: &Tensor,
    w_gate: &Tensor,
    decision: &RoutingDecision,
    d_selected: &[f64],
) -> Result<(Tensor, Tensor)> {
    let n = a.rows();
    let experts = w_gate.cols();
    if d_selected.len() != n {
        return Err(Error::shape(format!("{} gate grads for {n} tokens", d_selected.len())));
    }
    let mut dlogits = vec![0.0; n * experts];
    for i in 0..n {
        let p = decision.probs.row(i);
        let sel = decision.assignment[i];
        let g = d_selected[i] * p[sel];
        for k in 0..experts {
            let delta = if k == sel { 1.0 } else { 0.0 };
            dlogits[i * experts + k] = g * (delta - p[k]);
        }
    }
    let dlogits = Tensor::matrix(n, experts, dlogits, a.width())?;
    Ok((matmul_nt(&dlogits, w_gate)?, matmul_tn(a, &dlogits)?))
}
