//! Virtual process topologies.
//!
//! Non-expert blocks run on a 2D (tensor × data) grid and expert blocks on a
//! 3D (tensor × expert × data) grid that shares the tensor groups. Ranks are
//! laid out tensor-fastest:
//!
//! ```text
//! rank = t + G_tensor * (e + E * d)
//! ```
//!
//! For four ranks, two experts and two tensor shards this yields tensor
//! groups (0,1),(2,3), expert groups (0,2),(1,3), non-expert data groups
//! (0,2),(1,3) and singleton expert data groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{Fabric, Group, GroupKind, RankId};

/// Parallelism degrees. Always satisfies
/// `tensor * expert * data_exp == tensor * data_nonexp == world_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TedConfig {
    pub world_size: usize,
    pub tensor_parallel: usize,
    pub experts: usize,
    pub expert_parallel: usize,
    pub data_exp: usize,
    pub data_nonexp: usize,
}

pub fn derive_config(world_size: usize, tensor_parallel: usize, experts: usize) -> Result<TedConfig> {
    if world_size == 0 {
        return Err(Error::config("world_size must be at least 1"));
    }
    if tensor_parallel == 0 {
        return Err(Error::config("tensor_parallel must be at least 1"));
    }
    if experts == 0 {
        return Err(Error::config("experts must be at least 1"));
    }
    if !world_size.is_multiple_of(tensor_parallel) {
        return Err(Error::config(format!(
            "tensor_parallel ({tensor_parallel}) does not divide world_size ({world_size})"
        )));
    }
    let data_nonexp = world_size / tensor_parallel;
    if !data_nonexp.is_multiple_of(experts) {
        return Err(Error::config(format!(
            "experts ({experts}) does not divide world_size / tensor_parallel ({data_nonexp})"
        )));
    }
    Ok(TedConfig {
        world_size,
        tensor_parallel,
        experts,
        expert_parallel: experts,
        data_exp: data_nonexp / experts,
        data_nonexp,
    })
}

/// Grid position of a rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankCoords {
    pub tensor: usize,
    pub expert: usize,
    pub data: usize,
}

impl TedConfig {
    pub fn validate(&self) -> Result<()> {
        let derived = derive_config(self.world_size, self.tensor_parallel, self.experts)?;
        if derived != *self {
            return Err(Error::config(format!(
                "inconsistent degrees {self:?}, expected {derived:?}"
            )));
        }
        Ok(())
    }

    pub fn coords(&self, rank: usize) -> RankCoords {
        let t = self.tensor_parallel;
        let e = self.experts;
        RankCoords {
            tensor: rank % t,
            expert: (rank / t) % e,
            data: rank / (t * e),
        }
    }

    pub fn rank_of(&self, c: RankCoords) -> usize {
        c.tensor + self.tensor_parallel * (c.expert + self.experts * c.data)
    }

    /// Index of the batch shard a rank works on: its position within the
    /// non-expert data group.
    pub fn shard_index(&self, rank: usize) -> usize {
        rank / self.tensor_parallel
    }
}

/// The four group families, each a partition of `[0, world_size)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyGroups {
    pub tensor_groups: Vec<Vec<RankId>>,
    pub nonexp_data_groups: Vec<Vec<RankId>>,
    pub expert_groups: Vec<Vec<RankId>>,
    pub exp_data_groups: Vec<Vec<RankId>>,
    config: TedConfig,
}

/// Family indices of the groups containing a rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankGroupIndex {
    pub tensor: usize,
    pub expert: usize,
    pub exp_data: usize,
    pub nonexp_data: usize,
}

pub fn build_groups(cfg: &TedConfig) -> Result<TopologyGroups> {
    cfg.validate()?;
    let (t_deg, e_deg, d_deg) = (cfg.tensor_parallel, cfg.experts, cfg.data_exp);
    let at = |t, e, d| RankId(cfg.rank_of(RankCoords { tensor: t, expert: e, data: d }));

    let mut tensor_groups = Vec::new();
    for d in 0..d_deg {
        for e in 0..e_deg {
            tensor_groups.push((0..t_deg).map(|t| at(t, e, d)).collect());
        }
    }
    let mut expert_groups = Vec::new();
    for d in 0..d_deg {
        for t in 0..t_deg {
            expert_groups.push((0..e_deg).map(|e| at(t, e, d)).collect());
        }
    }
    let mut exp_data_groups = Vec::new();
    for e in 0..e_deg {
        for t in 0..t_deg {
            exp_data_groups.push((0..d_deg).map(|d| at(t, e, d)).collect());
        }
    }
    let nonexp_data_groups = (0..t_deg)
        .map(|t| {
            (0..cfg.data_nonexp)
                .map(|s| RankId(t + t_deg * s))
                .collect()
        })
        .collect();

    Ok(TopologyGroups {
        tensor_groups,
        nonexp_data_groups,
        expert_groups,
        exp_data_groups,
        config: *cfg,
    })
}

impl TopologyGroups {
    pub fn config(&self) -> &TedConfig {
        &self.config
    }

    pub fn family(&self, kind: GroupKind) -> &[Vec<RankId>] {
        match kind {
            GroupKind::Tensor => &self.tensor_groups,
            GroupKind::Expert => &self.expert_groups,
            GroupKind::DataExp => &self.exp_data_groups,
            GroupKind::DataNonexp => &self.nonexp_data_groups,
        }
    }

    /// Indices (into each family) of the groups that contain `rank`.
    pub fn groups_for_rank(&self, rank: usize) -> Result<RankGroupIndex> {
        let cfg = &self.config;
        if rank >= cfg.world_size {
            return Err(Error::config(format!(
                "rank {rank} outside world of size {}",
                cfg.world_size
            )));
        }
        let c = cfg.coords(rank);
        let t_deg = cfg.tensor_parallel;
        Ok(RankGroupIndex {
            tensor: c.expert + cfg.experts * c.data,
            expert: c.tensor + t_deg * c.data,
            exp_data: c.tensor + t_deg * c.expert,
            nonexp_data: c.tensor,
        })
    }

    /// Registers every group with the fabric.
    pub fn register(&self, fabric: &Fabric) -> Result<FabricGroups> {
        if fabric.world_size() != self.config.world_size {
            return Err(Error::config(format!(
                "fabric has {} ranks, topology needs {}",
                fabric.world_size(),
                self.config.world_size
            )));
        }
        let reg = |kind: GroupKind| -> Result<Vec<Group>> {
            self.family(kind)
                .iter()
                .map(|members| fabric.new_group(members, kind))
                .collect()
        };
        Ok(FabricGroups {
            topology: self.clone(),
            tensor: reg(GroupKind::Tensor)?,
            expert: reg(GroupKind::Expert)?,
            exp_data: reg(GroupKind::DataExp)?,
            nonexp_data: reg(GroupKind::DataNonexp)?,
        })
    }
}

/// Fabric handles for every group of a topology.
#[derive(Debug, Clone)]
pub struct FabricGroups {
    topology: TopologyGroups,
    tensor: Vec<Group>,
    expert: Vec<Group>,
    exp_data: Vec<Group>,
    nonexp_data: Vec<Group>,
}

/// The four groups a rank participates in.
#[derive(Debug, Clone)]
pub struct RankGroups {
    pub tensor: Group,
    pub expert: Group,
    pub exp_data: Group,
    pub nonexp_data: Group,
}

impl FabricGroups {
    pub fn for_rank(&self, rank: usize) -> Result<RankGroups> {
        let idx = self.topology.groups_for_rank(rank)?;
        Ok(RankGroups {
            tensor: self.tensor[idx.tensor].clone(),
            expert: self.expert[idx.expert].clone(),
            exp_data: self.exp_data[idx.exp_data].clone(),
            nonexp_data: self.nonexp_data[idx.nonexp_data].clone(),
        })
    }

    pub fn topology(&self) -> &TopologyGroups {
        &self.topology
    }
}
