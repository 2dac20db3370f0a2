//! Fixtures shared by the benchmarks.

use tedsim_core::moe::{ParallelTrainer, TrainSetup};
use tedsim_core::{derive_config, ExecFlags, MoeModelConfig, Result};

/// A trainer for a small model on `world_size` ranks.
pub fn trainer(world_size: usize, tensor_parallel: usize, experts: usize, flags: ExecFlags) -> Result<ParallelTrainer> {
    let ted = derive_config(world_size, tensor_parallel, experts)?;
    let model = MoeModelConfig {
        layers: 2,
        hidden: 32,
        experts,
        tokens_per_shard: 32,
        seed: 1,
    };
    ParallelTrainer::new(TrainSetup::new(model, ted, flags))
}
