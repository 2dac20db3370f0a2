//! Single-process reference: the full model on the full batch, no
//! communication. The parallel executor must reproduce its loss and
//! gradients.

use std::collections::BTreeMap;

use super::layer::{row_dots, scale_rows};
use super::{
    gate_backward, gate_forward, mlp_backward, mlp_forward, FfnParams, LayerParams, MlpCache, ModelParams,
    MoeModelConfig, ParamKey, RoutingDecision, ACTIVATION_WIDTH,
};
use crate::error::Result;
use crate::tensor::{LocalReduce, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SerialModel {
    pub cfg: MoeModelConfig,
    pub params: ModelParams,
}

/// Loss and gradients of one serial step.
#[derive(Debug, Clone, PartialEq)]
pub struct SerialStep {
    pub loss: f64,
    pub grads: BTreeMap<ParamKey, Tensor>,
    pub output: Tensor,
}

/// `Σ y² / (2·total)` over the rows of `y`, and its gradient `y / total`.
pub(crate) fn loss_part(y: &Tensor, total: usize) -> (f64, Tensor) {
    let n = total as f64;
    let loss = y.data().iter().map(|v| v * v).sum::<f64>() / (2.0 * n);
    let dy = y.clone().scaled(1.0 / n);
    (loss, dy)
}

enum SerialCache {
    Dense {
        attn: MlpCache,
        ffn: MlpCache,
    },
    Moe {
        attn: MlpCache,
        a: Tensor,
        decision: RoutingDecision,
        /// Per expert: token indices and the block cache, for experts that
        /// received tokens.
        experts: Vec<(usize, Vec<usize>, MlpCache)>,
        f: Tensor,
    },
}

fn scatter_rows(dst: &mut Tensor, rows: &[usize], src: &Tensor) {
    let c = dst.cols();
    for (k, &r) in rows.iter().enumerate() {
        dst.data_mut()[r * c..(r + 1) * c].copy_from_slice(src.row(k));
    }
}

fn forward(p: &LayerParams, x: &Tensor) -> Result<(Tensor, SerialCache)> {
    let mut local = LocalReduce;
    let (u, attn) = mlp_forward(&mut local, &p.attn, x)?;
    let a = x.add(&u)?;
    match &p.ffn {
        FfnParams::Dense(m) => {
            let (f, ffn) = mlp_forward(&mut local, m, &a)?;
            Ok((a.add(&f)?, SerialCache::Dense { attn, ffn }))
        }
        FfnParams::Moe(moe) => {
            let decision = gate_forward(&a, &moe.gate.value)?;
            let mut f = Tensor::zeros(vec![a.rows(), a.cols()], ACTIVATION_WIDTH);
            let mut experts = Vec::new();
            for (e, params) in &moe.experts {
                let rows: Vec<usize> = (0..a.rows()).filter(|&i| decision.assignment[i] == *e).collect();
                if rows.is_empty() {
                    continue;
                }
                let (out, cache) = mlp_forward(&mut local, params, &a.select_rows(&rows))?;
                scatter_rows(&mut f, &rows, &out);
                experts.push((*e, rows, cache));
            }
            let y = a.add(&scale_rows(&f, &decision.selected_probs()))?;
            Ok((
                y,
                SerialCache::Moe {
                    attn,
                    a,
                    decision,
                    experts,
                    f,
                },
            ))
        }
    }
}

fn backward(p: &mut LayerParams, cache: &SerialCache, dy: &Tensor) -> Result<Tensor> {
    let mut local = LocalReduce;
    let (da, attn) = match (&mut p.ffn, cache) {
        (FfnParams::Dense(m), SerialCache::Dense { attn, ffn }) => {
            let da_ffn = mlp_backward(&mut local, m, ffn, dy)?;
            (dy.add(&da_ffn)?, attn)
        }
        (
            FfnParams::Moe(moe),
            SerialCache::Moe {
                attn,
                a,
                decision,
                experts,
                f,
            },
        ) => {
            let d_f = scale_rows(dy, &decision.selected_probs());
            let d_sel = row_dots(dy, f);
            let mut da_moe = Tensor::zeros(vec![a.rows(), a.cols()], ACTIVATION_WIDTH);
            for (e, rows, ec) in experts {
                let params = &mut moe
                    .experts
                    .iter_mut()
                    .find(|(id, _)| id == e)
                    .expect("cached expert exists")
                    .1;
                let d_in = mlp_backward(&mut local, params, ec, &d_f.select_rows(rows))?;
                scatter_rows(&mut da_moe, rows, &d_in);
            }
            let (da_gate, dw_gate) = gate_backward(a, &moe.gate.value, decision, &d_sel)?;
            moe.gate.accumulate(&dw_gate)?;
            let mut da = dy.add(&da_moe)?;
            da.add_assign(&da_gate)?;
            (da, attn)
        }
        _ => unreachable!("serial cache built from the same layer"),
    };
    let dx_attn = mlp_backward(&mut local, &mut p.attn, attn, &da)?;
    da.add(&dx_attn)
}

impl SerialModel {
    pub fn new(cfg: MoeModelConfig) -> Result<Self> {
        Ok(Self {
            params: ModelParams::full(&cfg)?,
            cfg,
        })
    }

    /// Forward and backward on `batch`; gradients are left in the
    /// parameters (zeroed first).
    pub fn step(&mut self, batch: &Tensor) -> Result<SerialStep> {
        self.params.zero_grad();
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let (y, c) = forward(layer, &x)?;
            caches.push(c);
            x = y;
        }
        let (loss, mut dy) = loss_part(&x, batch.rows());
        for (layer, c) in self.params.layers.iter_mut().zip(&caches).rev() {
            dy = backward(layer, c, &dy)?;
        }
        let grads = self
            .params
            .entries()
            .into_iter()
            .map(|(k, p)| (k, p.grad.clone()))
            .collect();
        Ok(SerialStep {
            loss,
            grads,
            output: x,
        })
    }
}

/// One step of the freshly initialized full model on `batch`.
pub fn serial_reference_step(cfg: &MoeModelConfig, batch: &Tensor) -> Result<SerialStep> {
    SerialModel::new(*cfg)?.step(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::make_batch;

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = MoeModelConfig {
            layers: 2,
            hidden: 3,
            experts: 2,
            tokens_per_shard: 5,
            seed: 4,
        };
        let batch = make_batch(cfg.seed, 0, 5, 3).unwrap();
        let mut model = SerialModel::new(cfg).unwrap();
        let step = model.step(&batch).unwrap();
        let eps = 1e-6;
        let keys: Vec<ParamKey> = step.grads.keys().copied().collect();
        for key in keys {
            let n = model.params.get(key).unwrap().len();
            for i in (0..n).step_by(7) {
                let loss_at = |delta: f64| {
                    let mut m = model.clone();
                    for (k, p) in m.params.entries_mut() {
                        if k == key {
                            p.value.data_mut()[i] += delta;
                        }
                    }
                    m.step(&batch).unwrap().loss
                };
                let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
                let g = step.grads[&key].data()[i];
                assert!((fd - g).abs() < 1e-7, "{key}[{i}]: fd {fd} vs {g}");
            }
        }
    }
}
