use super::MlpParams;
use crate::error::Result;
use crate::tensor::{
    column_parallel_backward, column_parallel_forward, gelu_backward, gelu_forward,
    row_parallel_backward, row_parallel_forward, Tensor, TensorReduce,
};

/// Activations kept for the backward pass of one MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    x: Tensor,
    z1: Tensor,
    h1: Tensor,
}

/// Column-parallel linear, GELU, row-parallel linear. One all-reduce (inside
/// the row-parallel layer) when the tensor group has more than one member.
pub fn mlp_forward(comm: &mut dyn TensorReduce, p: &MlpParams, x: &Tensor) -> Result<(Tensor, MlpCache)> {
    let z1 = column_parallel_forward(x, &p.w1.value, Some(&p.b1.value))?;
    let h1 = gelu_forward(&z1);
    let y = row_parallel_forward(comm, &h1, &p.w2.value, Some(&p.b2.value))?;
    Ok((
        y,
        MlpCache {
            x: x.clone(),
            z1,
            h1,
        },
    ))
}

/// Accumulates parameter gradients and returns the input gradient. One
/// all-reduce (inside the column-parallel layer) on the input gradient.
pub fn mlp_backward(
    comm: &mut dyn TensorReduce,
    p: &mut MlpParams,
    cache: &MlpCache,
    dy: &Tensor,
) -> Result<Tensor> {
    let g2 = row_parallel_backward(&cache.h1, &p.w2.value, dy)?;
    p.w2.accumulate(&g2.dw)?;
    p.b2.accumulate(&g2.db)?;
    let dz1 = gelu_backward(&cache.z1, &g2.dx)?;
    let g1 = column_parallel_backward(comm, &cache.x, &p.w1.value, &dz1)?;
    p.w1.accumulate(&g1.dw)?;
    p.b1.accumulate(&g1.db)?;
    Ok(g1.dx)
}
