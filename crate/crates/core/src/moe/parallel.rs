//! The multi-rank executor: one thread per rank, all communication through
//! the fabric.

use super::serial::{loss_part, SerialStep};
use super::{
    layer_backward, layer_forward, make_batch, CommStash, ExecFlags, LayerCache, LayerComm, ModelParams,
    MoeModelConfig, ParamFamily, ParamKey, RankComm, StashMode, ACTIVATION_WIDTH, PARAM_WIDTH,
};
use crate::error::{Error, Result};
use crate::fabric::{Fabric, Group, LedgerSnapshot, Phase, RankId};
use crate::tensor::{Partition, Tensor};
use crate::topology::{build_groups, FabricGroups, RankGroups, TedConfig};
use crate::zero::{
    allgather_updated_params, shard_ranges, AdamWConfig, MemoryLedger, OptimizerShard, TileConfig, TileStats,
    TransientBytes,
};

const FAMILIES: [ParamFamily; 2] = [ParamFamily::NonExpert, ParamFamily::Expert];

/// Everything needed to run the parallel executor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSetup {
    pub model: MoeModelConfig,
    pub ted: TedConfig,
    pub flags: ExecFlags,
    pub tile: TileConfig,
    pub adam: AdamWConfig,
    /// Also run an unsharded, untiled optimizer on every rank and compare
    /// its result with the sharded one.
    pub shadow_replicated: bool,
}

impl TrainSetup {
    pub fn new(model: MoeModelConfig, ted: TedConfig, flags: ExecFlags) -> Self {
        Self {
            model,
            ted,
            flags,
            tile: TileConfig::default(),
            adam: AdamWConfig::default(),
            shadow_replicated: false,
        }
    }
}

/// A rank's synchronized gradient for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RankGrad {
    pub key: ParamKey,
    pub partition: Partition,
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Gradients after synchronization, per rank in canonical order.
    pub rank_grads: Vec<Vec<RankGrad>>,
    /// Elements where the sharded optimizer disagreed bitwise with the
    /// replicated one (zero when the shadow is off).
    pub replica_mismatches: usize,
    /// Largest tile statistics seen on any rank.
    pub tile_stats: TileStats,
}

impl StepOutcome {
    /// Largest absolute difference between the rank gradients and the
    /// matching slices of a serial step's gradients.
    pub fn max_grad_diff(&self, serial: &SerialStep) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for grads in &self.rank_grads {
            for g in grads {
                let full = serial
                    .grads
                    .get(&g.key)
                    .ok_or_else(|| Error::MissingState(format!("serial step has no gradient for {}", g.key)))?;
                worst = worst.max(g.partition.slice(full)?.max_abs_diff(&g.grad));
            }
        }
        Ok(worst)
    }

    /// Largest difference between the gradients of two parallel runs.
    pub fn max_diff_to(&self, other: &StepOutcome) -> f64 {
        let mut worst = (self.loss - other.loss).abs();
        if self.rank_grads.len() != other.rank_grads.len() {
            return f64::INFINITY;
        }
        for (a, b) in self.rank_grads.iter().zip(&other.rank_grads) {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            for (x, y) in a.iter().zip(b) {
                if x.key != y.key {
                    return f64::INFINITY;
                }
                worst = worst.max(x.grad.max_abs_diff(&y.grad));
            }
        }
        worst
    }
}

struct RankState {
    rank: usize,
    params: ModelParams,
    /// Optimizer shard per family, in [`FAMILIES`] order.
    shards: Vec<OptimizerShard>,
    /// Unsharded optimizer state per family, when shadowing.
    replicas: Option<Vec<OptimizerShard>>,
    memory: MemoryLedger,
}

struct RankStepResult {
    loss: f64,
    grads: Vec<RankGrad>,
    mismatches: usize,
    tile_stats: TileStats,
}

/// Sums gradients over the data-parallel groups: non-expert parameters
/// over the non-expert data group, expert parameters over the expert data
/// group. Single-member groups are skipped.
pub fn grad_sync(fabric: &Fabric, groups: &RankGroups, rank: RankId, params: &mut ModelParams) -> Result<()> {
    for family in FAMILIES {
        let group = family_group(groups, family);
        if group.size() == 1 {
            continue;
        }
        let flat = params.flat_grads(family);
        let summed = fabric.all_reduce(group, rank, &flat, PARAM_WIDTH, Phase::GradSync)?;
        params.set_flat_grads(family, &summed)?;
    }
    Ok(())
}

fn family_group(groups: &RankGroups, family: ParamFamily) -> &Group {
    match family {
        ParamFamily::NonExpert => &groups.nonexp_data,
        ParamFamily::Expert => &groups.exp_data,
    }
}

/// Owns the fabric, the topology and every rank's state.
pub struct ParallelTrainer {
    setup: TrainSetup,
    fabric: Fabric,
    groups: FabricGroups,
    ranks: Vec<RankState>,
    step: u64,
}

impl ParallelTrainer {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.ted.validate()?;
        setup.model.validate(&setup.ted, &setup.flags)?;
        setup.tile.validate()?;
        let topo = build_groups(&setup.ted)?;
        let fabric = Fabric::new(setup.ted.world_size)?;
        let groups = topo.register(&fabric)?;
        let t_deg = setup.ted.tensor_parallel;
        let mut ranks = Vec::with_capacity(setup.ted.world_size);
        for r in 0..setup.ted.world_size {
            let c = setup.ted.coords(r);
            let params = ModelParams::init(&setup.model, c.tensor, t_deg, &[c.expert])?;
            let rg = groups.for_rank(r)?;
            let mut shards = Vec::with_capacity(2);
            let mut replicas = Vec::with_capacity(2);
            for family in FAMILIES {
                let values = params.flat_values(family);
                let group = family_group(&rg, family);
                let pos = group
                    .position(RankId(r))
                    .ok_or_else(|| Error::InvalidGroup(format!("rank {r} missing from its data group")))?;
                let range = shard_ranges(values.len(), group.size())?[pos].clone();
                shards.push(OptimizerShard::new(RankId(r), range, &values)?);
                replicas.push(OptimizerShard::new(RankId(r), 0..values.len(), &values)?);
            }
            let mut memory = MemoryLedger::new(r);
            memory.set_persistent(
                params.count(ParamFamily::NonExpert) + params.count(ParamFamily::Expert),
                shards.iter().map(OptimizerShard::len).sum(),
            );
            ranks.push(RankState {
                rank: r,
                params,
                shards,
                replicas: setup.shadow_replicated.then_some(replicas),
                memory,
            });
        }
        Ok(Self {
            setup,
            fabric,
            groups,
            ranks,
            step: 0,
        })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn ledger(&self) -> LedgerSnapshot {
        self.fabric.ledger()
    }

    pub fn reset_ledger(&self) {
        self.fabric.reset_ledger();
    }

    pub fn memory(&self) -> Vec<MemoryLedger> {
        self.ranks.iter().map(|s| s.memory.clone()).collect()
    }

    pub fn params(&self, rank: usize) -> Option<&ModelParams> {
        self.ranks.get(rank).map(|s| &s.params)
    }

    /// The global batch for the next step.
    pub fn next_batch(&self) -> Result<Tensor> {
        let n = self.setup.model.global_tokens(&self.setup.ted);
        make_batch(self.setup.model.seed, self.step, n, self.setup.model.hidden)
    }

    /// One full iteration: forward, backward, gradient sync, optimizer.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = self.next_batch()?;
        self.step += 1;
        let setup = self.setup;
        let fabric = &self.fabric;
        let groups = &self.groups;
        let batch = &batch;
        let results: Vec<Result<RankStepResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .ranks
                .iter_mut()
                .map(|state| s.spawn(move || rank_step(&setup, fabric, groups, state, batch)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Worker("rank worker panicked".into()))))
                .collect()
        });
        let mut outcome = StepOutcome {
            loss: 0.0,
            rank_grads: Vec::with_capacity(results.len()),
            replica_mismatches: 0,
            tile_stats: TileStats::default(),
        };
        for res in results {
            let r = res?;
            outcome.loss += r.loss;
            outcome.rank_grads.push(r.grads);
            outcome.replica_mismatches += r.mismatches;
            outcome.tile_stats.tiles = outcome.tile_stats.tiles.max(r.tile_stats.tiles);
            outcome.tile_stats.peak_upcast_bytes =
                outcome.tile_stats.peak_upcast_bytes.max(r.tile_stats.peak_upcast_bytes);
        }
        Ok(outcome)
    }
}

fn rank_step(
    setup: &TrainSetup,
    fabric: &Fabric,
    groups: &FabricGroups,
    state: &mut RankState,
    batch: &Tensor,
) -> Result<RankStepResult> {
    let r = state.rank;
    let rg = groups.for_rank(r)?;
    let rc = RankComm::new(fabric, RankId(r), &rg);
    let flags = setup.flags;
    let ckpt = flags.ckpt;
    let cac = flags.effective_cac();
    let n = setup.model.tokens_per_shard;
    let shard = setup.ted.shard_index(r);
    let x0 = batch.row_range(shard * n, (shard + 1) * n)?;
    let layers = state.params.layers.len();

    state.params.zero_grad();

    // Forward.
    let mut inputs: Vec<Tensor> = Vec::with_capacity(layers);
    let mut caches: Vec<Option<LayerCache>> = Vec::with_capacity(layers);
    let mut stashes: Vec<CommStash> = vec![CommStash::default(); layers];
    let mut x = x0;
    let mut held = TransientBytes::default();
    for l in 0..layers {
        let mode = if cac {
            StashMode::Record(&mut stashes[l])
        } else {
            StashMode::Live
        };
        let mut comm = LayerComm::new(rc, Phase::Forward, mode);
        let (y, cache) = layer_forward(&mut comm, &state.params.layers[l], &x, &flags)?;
        if ckpt {
            held.checkpoints += x.bytes();
            held.cac_stash += stashes[l].bytes();
            inputs.push(x);
            caches.push(None);
        } else {
            caches.push(Some(cache));
        }
        state.memory.observe(Phase::Forward, held);
        x = y;
    }

    let (mut loss, mut dy) = loss_part(&x, batch.rows());
    // Tensor ranks hold identical outputs; count each shard once.
    if rc.tensor_position() != 0 {
        loss = 0.0;
    }

    // Backward, recomputing layers from their checkpoints when needed.
    for l in (0..layers).rev() {
        let cache = match caches[l].take() {
            Some(c) => c,
            None => {
                let mode = if cac {
                    StashMode::Replay(&mut stashes[l])
                } else {
                    StashMode::Live
                };
                let mut comm = LayerComm::new(rc, Phase::Recompute, mode);
                let (_, c) = layer_forward(&mut comm, &state.params.layers[l], &inputs[l], &flags)?;
                state.memory.observe(Phase::Recompute, held);
                c
            }
        };
        let mut comm = LayerComm::new(rc, Phase::Backward, StashMode::Live);
        dy = layer_backward(&mut comm, &mut state.params.layers[l], &cache, &dy)?;
        if ckpt {
            held.checkpoints = held.checkpoints.saturating_sub(inputs[l].bytes());
            held.cac_stash = held.cac_stash.saturating_sub(stashes[l].bytes());
        }
        state.memory.observe(Phase::Backward, held);
    }
    debug_assert_eq!(dy.width(), ACTIVATION_WIDTH);

    grad_sync(fabric, &rg, RankId(r), &mut state.params)?;
    let grads = state
        .params
        .entries()
        .into_iter()
        .map(|(key, p)| RankGrad {
            key,
            partition: p.partition,
            grad: p.grad.clone(),
        })
        .collect();

    // ZeRO-1 optimizer step.
    let mut tile_stats = TileStats::default();
    let mut mismatches = 0;
    for (i, family) in FAMILIES.into_iter().enumerate() {
        let flat_grads = state.params.flat_grads(family);
        let range = state.shards[i].range.clone();
        let (updated, stats) = crate::zero::optimizer_step_tiled(
            &mut state.shards[i],
            &flat_grads[range],
            &setup.tile,
            &setup.adam,
        )?;
        tile_stats.tiles = tile_stats.tiles.max(stats.tiles);
        tile_stats.peak_upcast_bytes = tile_stats.peak_upcast_bytes.max(stats.peak_upcast_bytes);
        state.memory.observe(
            Phase::Optim,
            TransientBytes {
                upcast: stats.peak_upcast_bytes,
                ..TransientBytes::default()
            },
        );
        let full = allgather_updated_params(fabric, family_group(&rg, family), RankId(r), &updated)?;
        if let Some(replicas) = state.replicas.as_mut() {
            let (reference, _) =
                crate::zero::optimizer_step_tiled(&mut replicas[i], &flat_grads, &TileConfig::untiled(), &setup.adam)?;
            mismatches += reference
                .iter()
                .zip(&full)
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count()
                + reference.len().abs_diff(full.len());
        }
        state.params.set_flat_values(family, &full)?;
    }

    Ok(RankStepResult {
        loss,
        grads,
        mismatches,
        tile_stats,
    })
}
