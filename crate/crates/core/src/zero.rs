//! Mixed-precision AdamW with ZeRO stage-1 state sharding and tiled
//! up-casting.
//!
//! Arithmetic is carried out in `f64`. Parameters and gradients are
//! accounted at 2 bytes per element, master weights and both moments at 4.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{Fabric, Group, Phase, RankId};
use crate::moe::PARAM_WIDTH;

/// Bytes per owned element of optimizer state: master, first and second
/// moment at 4 bytes each.
pub const OPTIM_STATE_BYTES: u64 = 12;
/// Width of the up-cast gradient buffer.
pub const UPCAST_BYTES: u64 = 4;
pub const DEFAULT_TILE_SIZE: usize = 1_800_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    /// When off the whole shard is up-cast at once.
    pub tiling: bool,
    pub tile_size: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tiling: true,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

impl TileConfig {
    pub fn tiled(tile_size: usize) -> Self {
        Self {
            tiling: true,
            tile_size,
        }
    }

    pub fn untiled() -> Self {
        Self {
            tiling: false,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::config("tile size must be at least 1"));
        }
        Ok(())
    }

    fn effective(&self, len: usize) -> usize {
        if self.tiling {
            self.tile_size.min(len)
        } else {
            len
        }
    }
}

/// Splits `total` elements into `parts` contiguous ranges whose sizes
/// differ by at most one; the first `total % parts` ranges are larger.
pub fn shard_ranges(total: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 {
        return Err(Error::InvalidGroup("cannot shard over an empty group".into()));
    }
    let base = total / parts;
    let rem = total % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Optimizer state for one contiguous slice of a flattened parameter
/// family.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerShard {
    pub owner: RankId,
    pub range: Range<usize>,
    pub master: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerShard {
    pub fn new(owner: RankId, range: Range<usize>, params: &[f64]) -> Result<Self> {
        let master = params
            .get(range.clone())
            .ok_or_else(|| Error::shape(format!("shard {range:?} outside {} parameters", params.len())))?
            .to_vec();
        let n = master.len();
        Ok(Self {
            owner,
            range,
            master,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn state_bytes(&self) -> u64 {
        self.len() as u64 * OPTIM_STATE_BYTES
    }
}

/// One shard per member of `group`, in member order.
pub fn build_shards(params: &[f64], group: &[RankId]) -> Result<Vec<OptimizerShard>> {
    shard_ranges(params.len(), group.len())?
        .into_iter()
        .zip(group)
        .map(|(r, &owner)| OptimizerShard::new(owner, r, params))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileStats {
    pub tiles: usize,
    pub peak_upcast_bytes: u64,
}

/// One AdamW step over the shard, `tile` elements at a time.
///
/// `grads` covers exactly the shard's range. Each tile is up-cast into a
/// single buffer that is reused across tiles. Returns the updated
/// parameter values for the range.
pub fn optimizer_step_tiled(
    shard: &mut OptimizerShard,
    grads: &[f64],
    tile: &TileConfig,
    hyper: &AdamWConfig,
) -> Result<(Vec<f64>, TileStats)> {
    tile.validate()?;
    if grads.len() != shard.len() {
        return Err(Error::MissingState(format!(
            "expected {} gradients for shard {:?}, got {}",
            shard.len(),
            shard.range,
            grads.len()
        )));
    }
    shard.step += 1;
    let t = shard.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let len = shard.len();
    let ts = tile.effective(len).max(1);
    let mut buf: Vec<f64> = Vec::with_capacity(ts.min(len));
    let mut stats = TileStats::default();
    let mut start = 0;
    while start < len {
        let end = (start + ts).min(len);
        buf.clear();
        buf.extend_from_slice(&grads[start..end]);
        stats.tiles += 1;
        stats.peak_upcast_bytes = stats.peak_upcast_bytes.max(buf.len() as u64 * UPCAST_BYTES);
        for (k, &g) in buf.iter().enumerate() {
            let i = start + k;
            let m = hyper.beta1 * shard.m[i] + (1.0 - hyper.beta1) * g;
            let v = hyper.beta2 * shard.v[i] + (1.0 - hyper.beta2) * g * g;
            shard.m[i] = m;
            shard.v[i] = v;
            let update = (m / bc1) / ((v / bc2).sqrt() + hyper.eps);
            let w = shard.master[i];
            shard.master[i] = w - hyper.lr * (update + hyper.weight_decay * w);
        }
        start = end;
    }
    Ok((shard.master.clone(), stats))
}

/// Completes a ZeRO-1 step: every member of `group` receives the full
/// updated parameter vector. Single-member groups do not communicate.
pub fn allgather_updated_params(fabric: &Fabric, group: &Group, rank: RankId, shard_values: &[f64]) -> Result<Vec<f64>> {
    if group.size() == 1 {
        return Ok(shard_values.to_vec());
    }
    let parts = fabric.all_gather_v(group, rank, shard_values, PARAM_WIDTH, Phase::Optim)?;
    Ok(parts.into_iter().flatten().collect())
}

/// Long-lived model-state bytes on one rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistentBytes {
    pub params: u64,
    pub grads: u64,
    pub optim_states: u64,
}

impl PersistentBytes {
    pub fn total(&self) -> u64 {
        self.params + self.grads + self.optim_states
    }
}

/// Peak short-lived bytes on one rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransientBytes {
    pub upcast: u64,
    pub cac_stash: u64,
    pub checkpoints: u64,
}

impl TransientBytes {
    pub fn total(&self) -> u64 {
        self.upcast + self.cac_stash + self.checkpoints
    }

    fn max_with(&mut self, other: &TransientBytes) {
        self.upcast = self.upcast.max(other.upcast);
        self.cac_stash = self.cac_stash.max(other.cac_stash);
        self.checkpoints = self.checkpoints.max(other.checkpoints);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub rank: usize,
    pub persistent_bytes: PersistentBytes,
    pub transient_peak_bytes: TransientBytes,
    /// Transient peak observed in each phase.
    pub per_phase: BTreeMap<String, TransientBytes>,
}

impl MemoryLedger {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    /// Model-state bytes for `local_params` parameters (both families)
    /// and `owned` optimizer-state elements.
    pub fn set_persistent(&mut self, local_params: usize, owned: usize) {
        let np = local_params as u64;
        self.persistent_bytes = PersistentBytes {
            params: np * PARAM_WIDTH.bytes(),
            grads: np * PARAM_WIDTH.bytes(),
            optim_states: owned as u64 * OPTIM_STATE_BYTES,
        };
    }

    /// Records a transient observation in `phase`.
    pub fn observe(&mut self, phase: Phase, t: TransientBytes) {
        self.transient_peak_bytes.max_with(&t);
        self.per_phase.entry(phase.as_str().to_string()).or_default().max_with(&t);
    }

    /// The phase with the largest transient total.
    pub fn peak_phase(&self) -> Option<&str> {
        self.per_phase
            .iter()
            .max_by_key(|(_, t)| t.total())
            .map(|(p, _)| p.as_str())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Export(e.to_string()))
    }
}

/// The ledger of `rank` from a finished run.
pub fn memory_report(ledgers: &[MemoryLedger], rank: usize) -> Result<MemoryLedger> {
    ledgers
        .iter()
        .find(|l| l.rank == rank)
        .cloned()
        .ok_or_else(|| Error::MissingState(format!("no memory ledger for rank {rank}")))
}
