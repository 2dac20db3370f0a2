use crate::error::{Error, Result};
use crate::fabric::{Fabric, Phase, RankId};
use crate::tensor::{StorageWidth, TensorReduce};
use crate::topology::RankGroups;

use super::ACTIVATION_WIDTH;

/// A rank's view of the fabric.
#[derive(Debug, Clone, Copy)]
pub struct RankComm<'a> {
    pub fabric: &'a Fabric,
    pub rank: RankId,
    pub groups: &'a RankGroups,
}

impl<'a> RankComm<'a> {
    pub fn new(fabric: &'a Fabric, rank: RankId, groups: &'a RankGroups) -> Self {
        Self {
            fabric,
            rank,
            groups,
        }
    }

    pub fn tensor_degree(&self) -> usize {
        self.groups.tensor.size()
    }

    pub fn tensor_position(&self) -> usize {
        self.groups.tensor.position(self.rank).expect("rank is in its tensor group")
    }

    pub fn expert_degree(&self) -> usize {
        self.groups.expert.size()
    }

    pub fn expert_position(&self) -> usize {
        self.groups.expert.position(self.rank).expect("rank is in its expert group")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stashed {
    Flat(Vec<f64>),
    Chunks(Vec<Vec<f64>>),
}

impl Stashed {
    fn elements(&self) -> usize {
        match self {
            Stashed::Flat(v) => v.len(),
            Stashed::Chunks(c) => c.iter().map(Vec::len).sum(),
        }
    }
}

/// Outputs of a layer's forward collectives, captured in the first forward
/// pass and replayed during recomputation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommStash {
    entries: Vec<Stashed>,
    cursor: usize,
}

impl CommStash {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Accounted memory held by the stash.
    pub fn bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.elements() as u64).sum::<u64>() * ACTIVATION_WIDTH.bytes()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.cursor = 0;
    }

    fn next(&mut self) -> Result<Stashed> {
        let e = self
            .entries
            .get(self.cursor)
            .cloned()
            .ok_or_else(|| Error::MissingState("communication stash exhausted".into()))?;
        self.cursor += 1;
        Ok(e)
    }
}

/// What a [`LayerComm`] does with collective outputs.
#[derive(Debug)]
pub enum StashMode<'s> {
    Live,
    Record(&'s mut CommStash),
    Replay(&'s mut CommStash),
}

/// Collectives issued by one rank while executing a layer.
///
/// Collectives over single-member groups are skipped entirely. In replay
/// mode no collective reaches the fabric.
#[derive(Debug)]
pub struct LayerComm<'a, 's> {
    rc: RankComm<'a>,
    phase: Phase,
    mode: StashMode<'s>,
}

impl<'a, 's> LayerComm<'a, 's> {
    pub fn new(rc: RankComm<'a>, phase: Phase, mode: StashMode<'s>) -> Self {
        Self { rc, phase, mode }
    }

    pub fn rank_comm(&self) -> &RankComm<'a> {
        &self.rc
    }

    pub fn tensor_degree(&self) -> usize {
        self.rc.tensor_degree()
    }

    pub fn tensor_position(&self) -> usize {
        self.rc.tensor_position()
    }

    pub fn expert_degree(&self) -> usize {
        self.rc.expert_degree()
    }

    pub fn expert_position(&self) -> usize {
        self.rc.expert_position()
    }

    fn run(&mut self, live: impl FnOnce(&RankComm<'a>, Phase) -> Result<Stashed>) -> Result<Stashed> {
        match &mut self.mode {
            StashMode::Live => live(&self.rc, self.phase),
            StashMode::Record(stash) => {
                let out = live(&self.rc, self.phase)?;
                stash.entries.push(out.clone());
                Ok(out)
            }
            StashMode::Replay(stash) => stash.next(),
        }
    }

    fn flat(s: Stashed) -> Result<Vec<f64>> {
        match s {
            Stashed::Flat(v) => Ok(v),
            Stashed::Chunks(_) => Err(Error::MissingState("stash out of sync: expected a flat buffer".into())),
        }
    }

    fn chunks(s: Stashed) -> Result<Vec<Vec<f64>>> {
        match s {
            Stashed::Chunks(c) => Ok(c),
            Stashed::Flat(_) => Err(Error::MissingState("stash out of sync: expected chunks".into())),
        }
    }

    /// All-reduce over the tensor group.
    pub fn tensor_all_reduce(&mut self, buf: Vec<f64>, width: StorageWidth) -> Result<Vec<f64>> {
        if self.tensor_degree() == 1 {
            return Ok(buf);
        }
        let out = self.run(|rc, phase| {
            rc.fabric
                .all_reduce(&rc.groups.tensor, rc.rank, &buf, width, phase)
                .map(Stashed::Flat)
        })?;
        Self::flat(out)
    }

    /// Equal-length all-gather over the tensor group.
    pub fn tensor_all_gather(&mut self, buf: Vec<f64>) -> Result<Vec<f64>> {
        if self.tensor_degree() == 1 {
            return Ok(buf);
        }
        let out = self.run(|rc, phase| {
            rc.fabric
                .all_gather(&rc.groups.tensor, rc.rank, &buf, ACTIVATION_WIDTH, phase)
                .map(Stashed::Flat)
        })?;
        Self::flat(out)
    }

    /// Variable-length all-gather over the tensor group.
    pub fn tensor_all_gather_v(&mut self, buf: Vec<f64>) -> Result<Vec<Vec<f64>>> {
        if self.tensor_degree() == 1 {
            return Ok(vec![buf]);
        }
        let out = self.run(|rc, phase| {
            rc.fabric
                .all_gather_v(&rc.groups.tensor, rc.rank, &buf, ACTIVATION_WIDTH, phase)
                .map(Stashed::Chunks)
        })?;
        Self::chunks(out)
    }

    /// All-to-all-v over the expert group.
    pub fn expert_all_to_all(&mut self, send: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        if self.expert_degree() == 1 {
            return Ok(send);
        }
        let out = self.run(|rc, phase| {
            rc.fabric
                .all_to_all_v(&rc.groups.expert, rc.rank, send, ACTIVATION_WIDTH, phase)
                .map(Stashed::Chunks)
        })?;
        Self::chunks(out)
    }
}

impl TensorReduce for LayerComm<'_, '_> {
    fn degree(&self) -> usize {
        self.tensor_degree()
    }

    fn all_reduce(&mut self, buf: Vec<f64>, width: StorageWidth) -> Result<Vec<f64>> {
        self.tensor_all_reduce(buf, width)
    }
}
