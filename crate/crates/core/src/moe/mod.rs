//! The TED mixture-of-experts layer and its executors.
//!
//! A model is a stack of layers, each a non-expert block (a Megatron-style
//! parallel MLP standing in for self-attention) followed by a feedforward
//! block. Even-indexed layers carry experts behind a top-1 gate; odd layers
//! carry a dense tensor-parallel feedforward block.
//!
//! Forward schedule of an expert layer on one rank:
//!
//! 1. non-expert block shard
//! 2. tensor all-reduce
//! 3. gate (on full activations)
//! 4. all-to-all dispatch in the expert group
//! 5. expert block shard
//! 6. tensor all-reduce
//! 7. inverse all-to-all
//!
//! With duplicate token dropping each tensor rank keeps only its contiguous
//! chunk of tokens before steps 4 and 7 and the tensor group all-gathers
//! after them. With communication-aware checkpointing, the recompute pass
//! replays stashed collective outputs instead of communicating.

mod block;
mod comm;
mod dispatch;
mod gate;
mod layer;
mod parallel;
mod params;
mod serial;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::StorageWidth;
use crate::topology::TedConfig;

pub use block::{mlp_backward, mlp_forward, MlpCache};
pub use comm::{CommStash, LayerComm, RankComm, StashMode};
pub use dispatch::{
    combine, combine_backward, dispatch, dispatch_backward, drop_tokens, gather_tokens,
    token_roundtrip_check, DispatchLayout, RoundtripReport, TokenEnvelope,
};
pub use gate::{gate_backward, gate_forward, RoutingDecision};
pub use layer::{layer_backward, layer_forward, LayerCache};
pub use parallel::{grad_sync, ParallelTrainer, RankGrad, StepOutcome, TrainSetup};
pub use params::{
    make_batch, FfnParams, LayerParams, MlpParams, ModelParams, MoeParams, ParamFamily, ParamKey,
    ParamName, ParamSite,
};
pub use serial::{serial_reference_step, SerialModel, SerialStep};

/// Accounting width of activations and their gradients.
pub const ACTIVATION_WIDTH: StorageWidth = StorageWidth::Half;
/// Accounting width of parameters and gradients.
pub const PARAM_WIDTH: StorageWidth = StorageWidth::Half;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub experts: usize,
    /// Tokens per non-expert data-parallel shard.
    pub tokens_per_shard: usize,
    pub seed: u64,
}

impl MoeModelConfig {
    pub fn ffn_width(&self) -> usize {
        4 * self.hidden
    }

    pub fn is_moe_layer(layer: usize) -> bool {
        layer.is_multiple_of(2)
    }

    pub fn moe_layers(&self) -> usize {
        self.layers.div_ceil(2)
    }

    pub fn dense_layers(&self) -> usize {
        self.layers / 2
    }

    pub fn global_tokens(&self, ted: &TedConfig) -> usize {
        self.tokens_per_shard * ted.data_nonexp
    }

    /// Checks the model against a topology and the execution flags.
    pub fn validate(&self, ted: &TedConfig, flags: &ExecFlags) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden must be at least 1"));
        }
        if self.tokens_per_shard == 0 {
            return Err(Error::config("tokens must be at least 1"));
        }
        if self.experts != ted.experts {
            return Err(Error::config(format!(
                "model has {} experts but topology expects {}",
                self.experts, ted.experts
            )));
        }
        if !self.ffn_width().is_multiple_of(ted.tensor_parallel) {
            return Err(Error::config(format!(
                "tensor_parallel ({}) does not divide the feedforward width ({})",
                ted.tensor_parallel,
                self.ffn_width()
            )));
        }
        if flags.dtd && !self.tokens_per_shard.is_multiple_of(ted.tensor_parallel) {
            return Err(Error::config(format!(
                "duplicate token dropping needs tokens ({}) divisible by tensor_parallel ({})",
                self.tokens_per_shard, ted.tensor_parallel
            )));
        }
        Ok(())
    }
}

/// Execution toggles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecFlags {
    /// Duplicate token dropping around both all-to-alls.
    pub dtd: bool,
    /// Communication-aware checkpointing. Only takes effect with `ckpt`.
    pub cac: bool,
    /// Activation checkpointing: keep layer inputs, recompute in backward.
    pub ckpt: bool,
    /// Test hook: the drop step keeps the wrong chunk.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub corrupt_drop_order: bool,
}

impl ExecFlags {
    pub fn new(dtd: bool, cac: bool, ckpt: bool) -> Self {
        Self {
            dtd,
            cac,
            ckpt,
            corrupt_drop_order: false,
        }
    }

    /// `cac` without `ckpt` has nothing to replay.
    pub fn effective_cac(&self) -> bool {
        self.cac && self.ckpt
    }

    /// Whether the drop/gather pair runs for a topology.
    pub fn dtd_active(&self, ted: &TedConfig) -> bool {
        self.dtd && ted.tensor_parallel > 1 && ted.experts > 1
    }

    /// All eight combinations of (dtd, cac, ckpt).
    pub fn all_combinations() -> Vec<ExecFlags> {
        let mut out = Vec::with_capacity(8);
        for bits in 0..8u8 {
            out.push(ExecFlags::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0));
        }
        out
    }
}
