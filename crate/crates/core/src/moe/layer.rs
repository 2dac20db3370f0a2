use super::{
    combine, combine_backward, dispatch, dispatch_backward, gate_backward, gate_forward, mlp_backward,
    mlp_forward, DispatchLayout, ExecFlags, FfnParams, LayerComm, LayerParams, MlpCache, RoutingDecision,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a layer keeps for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Dense {
        attn: MlpCache,
        ffn: MlpCache,
    },
    Moe {
        attn: MlpCache,
        /// Input of the feedforward block (after the residual).
        a: Tensor,
        decision: RoutingDecision,
        layout: DispatchLayout,
        expert: MlpCache,
        /// Combined expert output before scaling by the gate.
        f: Tensor,
    },
}

/// Scales row `i` of `t` by `s[i]`.
pub(crate) fn scale_rows(t: &Tensor, s: &[f64]) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    for (i, &k) in s.iter().enumerate() {
        out.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= k);
    }
    out
}

/// Row-wise dot products.
pub(crate) fn row_dots(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
        .collect()
}

/// One rank's forward through a layer. In an expert layer the rank's shard
/// holds exactly one expert.
pub fn layer_forward(
    comm: &mut LayerComm<'_, '_>,
    p: &LayerParams,
    x: &Tensor,
    flags: &ExecFlags,
) -> Result<(Tensor, LayerCache)> {
    let (u, attn) = mlp_forward(comm, &p.attn, x)?;
    let a = x.add(&u)?;
    match &p.ffn {
        FfnParams::Dense(m) => {
            let (f, ffn) = mlp_forward(comm, m, &a)?;
            Ok((a.add(&f)?, LayerCache::Dense { attn, ffn }))
        }
        FfnParams::Moe(moe) => {
            let [(_, expert_params)] = moe.experts.as_slice() else {
                return Err(Error::config(format!(
                    "a rank must hold exactly one expert per layer, found {}",
                    moe.experts.len()
                )));
            };
            let decision = gate_forward(&a, &moe.gate.value)?;
            let (input, layout) = dispatch(comm, &a, &decision, flags)?;
            let (out, expert) = mlp_forward(comm, expert_params, &input)?;
            let f = combine(comm, &out, &layout)?;
            let y = a.add(&scale_rows(&f, &decision.selected_probs()))?;
            Ok((
                y,
                LayerCache::Moe {
                    attn,
                    a,
                    decision,
                    layout,
                    expert,
                    f,
                },
            ))
        }
    }
}

/// Accumulates parameter gradients and returns the gradient of the layer
/// input.
pub fn layer_backward(
    comm: &mut LayerComm<'_, '_>,
    p: &mut LayerParams,
    cache: &LayerCache,
    dy: &Tensor,
) -> Result<Tensor> {
    let (da, attn) = match (&mut p.ffn, cache) {
        (FfnParams::Dense(m), LayerCache::Dense { attn, ffn }) => {
            let da_ffn = mlp_backward(comm, m, ffn, dy)?;
            (dy.add(&da_ffn)?, attn)
        }
        (
            FfnParams::Moe(moe),
            LayerCache::Moe {
                attn,
                a,
                decision,
                layout,
                expert,
                f,
            },
        ) => {
            let d_f = scale_rows(dy, &decision.selected_probs());
            let d_sel = row_dots(dy, f);
            let d_out = combine_backward(comm, &d_f, layout)?;
            let expert_params = &mut moe
                .experts
                .first_mut()
                .ok_or_else(|| Error::config("rank holds no expert"))?
                .1;
            let d_input = mlp_backward(comm, expert_params, expert, &d_out)?;
            let da_moe = dispatch_backward(comm, &d_input, layout)?;
            let (da_gate, dw_gate) = gate_backward(a, &moe.gate.value, decision, &d_sel)?;
            moe.gate.accumulate(&dw_gate)?;
            let mut da = dy.add(&da_moe)?;
            da.add_assign(&da_gate)?;
            (da, attn)
        }
        _ => return Err(Error::MissingState("layer cache does not match the layer kind".into())),
    };
    let dx_attn = mlp_backward(comm, &mut p.attn, attn, &da)?;
    da.add(&dx_attn)
}
