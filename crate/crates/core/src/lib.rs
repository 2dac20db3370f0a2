//! Deterministic simulator for tensor-expert-data (TED) parallel training of
//! mixture-of-experts models.
//!
//! Ranks are threads that exchange data only through the collectives of a
//! [`fabric::Fabric`], which ledgers every call. On top of that sit the
//! process topologies, a small tensor library with manual gradients, the
//! MoE layer with duplicate token dropping and communication-aware
//! checkpointing, a ZeRO stage-1 optimizer with tiling, and closed-form
//! cost models that the measured runs are checked against.

pub mod cost;
pub mod error;
pub mod fabric;
pub mod harness;
pub mod moe;
pub mod tensor;
pub mod topology;
pub mod zero;

pub use error::{Error, Result};
pub use fabric::{
    CollectiveOp, Fabric, Group, GroupKind, LedgerEntry, LedgerKey, LedgerRecord, LedgerSnapshot, Phase, RankId,
};
pub use moe::{ExecFlags, MoeModelConfig};
pub use tensor::{Partition, StorageWidth, Tensor};
pub use topology::{build_groups, derive_config, TedConfig};
