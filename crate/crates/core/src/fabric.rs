//! In-process communication fabric.
//!
//! A [`Fabric`] owns a fixed world of simulated ranks. Ranks are grouped with
//! [`Fabric::new_group`] and exchange data through blocking rendezvous
//! collectives. Every collective is recorded in a [`CommLedger`] keyed by
//! (phase, group kind, op).
//!
//! Reductions always run in ascending member order, so every member of a
//! group receives a bit-identical result regardless of thread scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::StorageWidth;

/// Bytes used for one element count in a count exchange.
pub const COUNT_BYTES: u64 = 8;

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RankId(pub usize);

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Training phase a collective is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Forward,
    Recompute,
    Backward,
    GradSync,
    Optim,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Forward,
        Phase::Recompute,
        Phase::Backward,
        Phase::GradSync,
        Phase::Optim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Recompute => "recompute",
            Phase::Backward => "backward",
            Phase::GradSync => "grad-sync",
            Phase::Optim => "optim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    Tensor,
    Expert,
    DataExp,
    DataNonexp,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Tensor => "tensor",
            GroupKind::Expert => "expert",
            GroupKind::DataExp => "data-exp",
            GroupKind::DataNonexp => "data-nonexp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveOp {
    AllReduce,
    AllGather,
    AllToAll,
}

impl CollectiveOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveOp::AllReduce => "all-reduce",
            CollectiveOp::AllGather => "all-gather",
            CollectiveOp::AllToAll => "all-to-all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LedgerKey {
    pub phase: Phase,
    pub group_kind: GroupKind,
    pub op: CollectiveOp,
}

impl LedgerKey {
    pub fn new(phase: Phase, group_kind: GroupKind, op: CollectiveOp) -> Self {
        Self {
            phase,
            group_kind,
            op,
        }
    }
}

/// Totals for one ledger key.
///
/// `calls` counts collective invocations issued per rank: sibling groups of
/// the same family running the same collective concurrently count once.
/// `payload_bytes` sums the bytes contributed by every member of every call.
/// `metadata_bytes` holds count-exchange traffic of the variable-size
/// collectives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub calls: u64,
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
}

impl std::ops::AddAssign for LedgerEntry {
    fn add_assign(&mut self, rhs: Self) {
        self.calls += rhs.calls;
        self.payload_bytes += rhs.payload_bytes;
        self.metadata_bytes += rhs.metadata_bytes;
    }
}

/// Flat export row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub phase: Phase,
    pub group_kind: GroupKind,
    pub op: CollectiveOp,
    pub calls: u64,
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
}

/// Immutable view of ledger totals. Produced by measuring a run
/// ([`Fabric::ledger`]) or by the closed-form predictor in the cost model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerSnapshot {
    entries: BTreeMap<LedgerKey, LedgerEntry>,
}

impl LedgerSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds to an entry; zero-call additions are ignored so that measured and
    /// predicted snapshots compare equal.
    pub fn add(&mut self, key: LedgerKey, entry: LedgerEntry) {
        if entry.calls == 0 && entry.payload_bytes == 0 && entry.metadata_bytes == 0 {
            return;
        }
        *self.entries.entry(key).or_default() += entry;
    }

    pub fn get(&self, phase: Phase, group_kind: GroupKind, op: CollectiveOp) -> LedgerEntry {
        self.entries
            .get(&LedgerKey::new(phase, group_kind, op))
            .copied()
            .unwrap_or_default()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&LedgerKey, &LedgerEntry)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum over every entry matching the filter.
    pub fn total(&self, mut filter: impl FnMut(&LedgerKey) -> bool) -> LedgerEntry {
        let mut acc = LedgerEntry::default();
        for (k, v) in &self.entries {
            if filter(k) {
                acc += *v;
            }
        }
        acc
    }

    pub fn op_total(&self, op: CollectiveOp) -> LedgerEntry {
        self.total(|k| k.op == op)
    }

    pub fn phase_op_total(&self, phase: Phase, op: CollectiveOp) -> LedgerEntry {
        self.total(|k| k.phase == phase && k.op == op)
    }

    pub fn records(&self) -> Vec<LedgerRecord> {
        self.entries
            .iter()
            .map(|(k, v)| LedgerRecord {
                phase: k.phase,
                group_kind: k.group_kind,
                op: k.op,
                calls: v.calls,
                payload_bytes: v.payload_bytes,
                metadata_bytes: v.metadata_bytes,
            })
            .collect()
    }

    pub fn from_records(records: &[LedgerRecord]) -> Self {
        let mut snap = Self::new();
        for r in records {
            snap.add(
                LedgerKey::new(r.phase, r.group_kind, r.op),
                LedgerEntry {
                    calls: r.calls,
                    payload_bytes: r.payload_bytes,
                    metadata_bytes: r.metadata_bytes,
                },
            );
        }
        snap
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.records()).map_err(|e| Error::Export(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for rec in self.records() {
            wtr.serialize(rec).map_err(|e| Error::Export(e.to_string()))?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| Error::Export(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Export(e.to_string()))
    }
}

/// Live instrumentation shared by all ranks of a fabric.
#[derive(Debug, Default)]
pub struct CommLedger {
    per_rank_calls: BTreeMap<LedgerKey, Vec<u64>>,
    bytes: BTreeMap<LedgerKey, (u64, u64)>,
}

impl CommLedger {
    fn record(&mut self, world: usize, key: LedgerKey, members: &[RankId], payload: u64, meta: u64) {
        let counts = self
            .per_rank_calls
            .entry(key)
            .or_insert_with(|| vec![0; world]);
        for m in members {
            counts[m.0] += 1;
        }
        let b = self.bytes.entry(key).or_default();
        b.0 += payload;
        b.1 += meta;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let mut snap = LedgerSnapshot::new();
        for (key, counts) in &self.per_rank_calls {
            let (payload_bytes, metadata_bytes) = self.bytes.get(key).copied().unwrap_or_default();
            snap.add(
                *key,
                LedgerEntry {
                    calls: counts.iter().copied().max().unwrap_or(0),
                    payload_bytes,
                    metadata_bytes,
                },
            );
        }
        snap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flavor {
    AllReduce,
    AllGather,
    AllGatherV,
    AllToAllV,
}

impl Flavor {
    fn op(self) -> CollectiveOp {
        match self {
            Flavor::AllReduce => CollectiveOp::AllReduce,
            Flavor::AllGather | Flavor::AllGatherV => CollectiveOp::AllGather,
            Flavor::AllToAllV => CollectiveOp::AllToAll,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Flavor::AllReduce => "all_reduce",
            Flavor::AllGather => "all_gather",
            Flavor::AllGatherV => "all_gather_v",
            Flavor::AllToAllV => "all_to_all_v",
        }
    }

    fn exchanges_counts(self) -> bool {
        matches!(self, Flavor::AllGatherV | Flavor::AllToAllV)
    }
}

#[derive(Debug)]
struct Contribution {
    flavor: Flavor,
    phase: Phase,
    width: StorageWidth,
    segments: Vec<Vec<f64>>,
}

type Outcome = std::result::Result<Vec<Contribution>, Error>;

#[derive(Debug)]
struct Round {
    slots: Vec<Option<Contribution>>,
    arrived: usize,
    departed: usize,
    outcome: Option<Arc<Outcome>>,
}

#[derive(Debug)]
struct GroupSlot {
    id: usize,
    kind: GroupKind,
    members: Vec<RankId>,
    round: Mutex<Round>,
    cv: Condvar,
}

/// Ordered set of ranks that issue collectives together.
#[derive(Debug, Clone)]
pub struct Group {
    slot: Arc<GroupSlot>,
}

impl Group {
    pub fn id(&self) -> usize {
        self.slot.id
    }

    pub fn kind(&self) -> GroupKind {
        self.slot.kind
    }

    pub fn members(&self) -> &[RankId] {
        &self.slot.members
    }

    pub fn size(&self) -> usize {
        self.slot.members.len()
    }

    /// Position of `rank` within the group order.
    pub fn position(&self, rank: RankId) -> Option<usize> {
        self.slot.members.iter().position(|&m| m == rank)
    }
}

impl PartialEq for Group {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.slot, &other.slot)
    }
}

/// Simulated world of ranks.
#[derive(Debug)]
pub struct Fabric {
    world_size: usize,
    timeout: Duration,
    groups: Mutex<Vec<Group>>,
    ledger: Mutex<CommLedger>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panicking rank worker must not wedge the remaining ranks.
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Fabric {
    pub fn new(world_size: usize) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::config("world_size must be at least 1"));
        }
        Ok(Self {
            world_size,
            timeout: DEFAULT_TIMEOUT,
            groups: Mutex::new(Vec::new()),
            ledger: Mutex::new(CommLedger::default()),
        })
    }

    /// How long a member waits for the rest of its group before reporting a
    /// timeout.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn ranks(&self) -> impl Iterator<Item = RankId> {
        (0..self.world_size).map(RankId)
    }

    pub fn new_group(&self, ranks: &[RankId], kind: GroupKind) -> Result<Group> {
        if ranks.is_empty() {
            return Err(Error::InvalidGroup("group has no members".into()));
        }
        for (i, r) in ranks.iter().enumerate() {
            if r.0 >= self.world_size {
                return Err(Error::InvalidGroup(format!(
                    "rank {} outside world of size {}",
                    r.0, self.world_size
                )));
            }
            if ranks[..i].contains(r) {
                return Err(Error::InvalidGroup(format!("duplicate rank {}", r.0)));
            }
        }
        let mut groups = lock(&self.groups);
        let group = Group {
            slot: Arc::new(GroupSlot {
                id: groups.len(),
                kind,
                members: ranks.to_vec(),
                round: Mutex::new(Round {
                    slots: (0..ranks.len()).map(|_| None).collect(),
                    arrived: 0,
                    departed: 0,
                    outcome: None,
                }),
                cv: Condvar::new(),
            }),
        };
        groups.push(group.clone());
        Ok(group)
    }

    pub fn ledger(&self) -> LedgerSnapshot {
        lock(&self.ledger).snapshot()
    }

    pub fn reset_ledger(&self) {
        *lock(&self.ledger) = CommLedger::default();
    }

    /// Elementwise sum over the group, accumulated in ascending member order.
    pub fn all_reduce(
        &self,
        group: &Group,
        rank: RankId,
        buf: &[f64],
        width: StorageWidth,
        phase: Phase,
    ) -> Result<Vec<f64>> {
        let outcome = self.rendezvous(group, rank, Flavor::AllReduce, phase, width, vec![buf.to_vec()])?;
        let contribs = unwrap_outcome(&outcome)?;
        let mut out = contribs[0].segments[0].clone();
        for c in &contribs[1..] {
            for (o, v) in out.iter_mut().zip(&c.segments[0]) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Concatenation of equal-length member buffers in group order.
    pub fn all_gather(
        &self,
        group: &Group,
        rank: RankId,
        local: &[f64],
        width: StorageWidth,
        phase: Phase,
    ) -> Result<Vec<f64>> {
        let outcome = self.rendezvous(group, rank, Flavor::AllGather, phase, width, vec![local.to_vec()])?;
        let contribs = unwrap_outcome(&outcome)?;
        Ok(contribs.iter().flat_map(|c| c.segments[0].iter().copied()).collect())
    }

    /// All-gather with per-member lengths. Lengths are exchanged first and
    /// ledgered as metadata. Returns one chunk per member, in group order.
    pub fn all_gather_v(
        &self,
        group: &Group,
        rank: RankId,
        local: &[f64],
        width: StorageWidth,
        phase: Phase,
    ) -> Result<Vec<Vec<f64>>> {
        let outcome = self.rendezvous(group, rank, Flavor::AllGatherV, phase, width, vec![local.to_vec()])?;
        let contribs = unwrap_outcome(&outcome)?;
        Ok(contribs.iter().map(|c| c.segments[0].clone()).collect())
    }

    /// Personalized exchange with per-destination segments.
    ///
    /// `send[j]` goes to the member at position `j`; the result holds, at
    /// position `i`, the segment member `i` addressed to the caller.
    pub fn all_to_all_v(
        &self,
        group: &Group,
        rank: RankId,
        send: Vec<Vec<f64>>,
        width: StorageWidth,
        phase: Phase,
    ) -> Result<Vec<Vec<f64>>> {
        if send.len() != group.size() {
            return Err(Error::Protocol {
                op: Flavor::AllToAllV.name(),
                group: group.id(),
                reason: format!("{} segments for a group of {}", send.len(), group.size()),
            });
        }
        let pos = self.member_position(group, rank)?;
        let outcome = self.rendezvous(group, rank, Flavor::AllToAllV, phase, width, send)?;
        let contribs = unwrap_outcome(&outcome)?;
        Ok(contribs.iter().map(|c| c.segments[pos].clone()).collect())
    }

    fn member_position(&self, group: &Group, rank: RankId) -> Result<usize> {
        group.position(rank).ok_or_else(|| {
            Error::InvalidGroup(format!("{rank} is not a member of group {}", group.id()))
        })
    }

    fn rendezvous(
        &self,
        group: &Group,
        rank: RankId,
        flavor: Flavor,
        phase: Phase,
        width: StorageWidth,
        segments: Vec<Vec<f64>>,
    ) -> Result<Arc<Outcome>> {
        let pos = self.member_position(group, rank)?;
        let slot = &group.slot;
        let n = slot.members.len();
        let deadline = Instant::now() + self.timeout;
        let mut round = lock(&slot.round);

        // Wait until the previous round has fully drained.
        while round.outcome.is_some() || round.slots[pos].is_some() {
            round = self.wait(slot, round, deadline, pos, false)?;
        }

        round.slots[pos] = Some(Contribution {
            flavor,
            phase,
            width,
            segments,
        });
        round.arrived += 1;

        if round.arrived == n {
            let contribs: Vec<Contribution> = round
                .slots
                .iter_mut()
                .map(|s| s.take().expect("every member deposited"))
                .collect();
            let outcome = match validate(slot, &contribs) {
                Ok(()) => {
                    self.record(slot, &contribs);
                    Ok(contribs)
                }
                Err(e) => Err(e),
            };
            round.outcome = Some(Arc::new(outcome));
            round.arrived = 0;
            slot.cv.notify_all();
        } else {
            while round.outcome.is_none() {
                round = self.wait(slot, round, deadline, pos, true)?;
            }
        }

        let outcome = round.outcome.clone().expect("round completed");
        round.departed += 1;
        if round.departed == n {
            round.outcome = None;
            round.departed = 0;
            slot.cv.notify_all();
        }
        Ok(outcome)
    }

    fn wait<'g>(
        &self,
        slot: &'g GroupSlot,
        round: MutexGuard<'g, Round>,
        deadline: Instant,
        pos: usize,
        deposited: bool,
    ) -> Result<MutexGuard<'g, Round>> {
        let now = Instant::now();
        if now >= deadline {
            let mut round = round;
            let arrived = round.arrived;
            if deposited && round.outcome.is_none() {
                round.slots[pos] = None;
                round.arrived -= 1;
            }
            return Err(Error::Timeout {
                group: slot.id,
                waited: self.timeout,
                arrived,
                expected: slot.members.len(),
            });
        }
        let (guard, _) = slot
            .cv
            .wait_timeout(round, deadline - now)
            .unwrap_or_else(|p| p.into_inner());
        Ok(guard)
    }

    fn record(&self, slot: &GroupSlot, contribs: &[Contribution]) {
        let first = &contribs[0];
        let width = first.width.bytes();
        let elements: usize = contribs
            .iter()
            .flat_map(|c| c.segments.iter())
            .map(Vec::len)
            .sum();
        let n = slot.members.len() as u64;
        let meta = if first.flavor.exchanges_counts() {
            n * n * COUNT_BYTES
        } else {
            0
        };
        let key = LedgerKey::new(first.phase, slot.kind, first.flavor.op());
        lock(&self.ledger).record(
            self.world_size,
            key,
            &slot.members,
            elements as u64 * width,
            meta,
        );
    }
}

fn unwrap_outcome(outcome: &Outcome) -> Result<&[Contribution]> {
    match outcome {
        Ok(c) => Ok(c),
        Err(e) => Err(e.clone()),
    }
}

fn validate(slot: &GroupSlot, contribs: &[Contribution]) -> Result<()> {
    let first = &contribs[0];
    let protocol = |reason: String| Error::Protocol {
        op: first.flavor.name(),
        group: slot.id,
        reason,
    };
    for (i, c) in contribs.iter().enumerate() {
        if c.flavor != first.flavor || c.phase != first.phase || c.width != first.width {
            return Err(protocol(format!(
                "member {i} issued {} ({}) while member 0 issued {} ({})",
                c.flavor.name(),
                c.phase.as_str(),
                first.flavor.name(),
                first.phase.as_str()
            )));
        }
    }
    match first.flavor {
        Flavor::AllReduce | Flavor::AllGather => {
            let len = first.segments[0].len();
            if let Some((i, c)) = contribs
                .iter()
                .enumerate()
                .find(|(_, c)| c.segments[0].len() != len)
            {
                return Err(protocol(format!(
                    "member {i} sent {} elements, member 0 sent {len}",
                    c.segments[0].len()
                )));
            }
        }
        Flavor::AllGatherV => {}
        Flavor::AllToAllV => {
            let n = contribs.len();
            if let Some((i, c)) = contribs
                .iter()
                .enumerate()
                .find(|(_, c)| c.segments.len() != n)
            {
                return Err(protocol(format!(
                    "member {i} sent {} segments for a group of {n}",
                    c.segments.len()
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    const W: StorageWidth = StorageWidth::Wide;

    fn ranks(ids: &[usize]) -> Vec<RankId> {
        ids.iter().copied().map(RankId).collect()
    }

    /// Runs `f` on every member of `group` concurrently and returns results
    /// in member order.
    fn on_members<T: Send>(
        fabric: &Fabric,
        group: &Group,
        f: impl Fn(&Fabric, RankId) -> T + Sync,
    ) -> Vec<T> {
        thread::scope(|s| {
            let handles: Vec<_> = group
                .members()
                .iter()
                .map(|&r| {
                    let f = &f;
                    s.spawn(move || f(fabric, r))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn zero_world_is_rejected() {
        assert!(matches!(Fabric::new(0), Err(Error::InvalidConfig(_))));
        assert_eq!(Fabric::new(128).unwrap().world_size(), 128);
    }

    #[test]
    fn group_validation() {
        let f = Fabric::new(4).unwrap();
        assert!(f.new_group(&ranks(&[0, 1]), GroupKind::Tensor).is_ok());
        assert!(f.new_group(&ranks(&[0, 2]), GroupKind::Expert).is_ok());
        assert!(f.new_group(&ranks(&[3]), GroupKind::DataExp).is_ok());
        assert!(matches!(
            f.new_group(&ranks(&[1, 1]), GroupKind::Tensor),
            Err(Error::InvalidGroup(_))
        ));
        assert!(matches!(
            f.new_group(&ranks(&[0, 4]), GroupKind::Tensor),
            Err(Error::InvalidGroup(_))
        ));
    }

    #[test]
    fn all_reduce_pair() {
        let f = Fabric::new(2).unwrap();
        let g = f.new_group(&ranks(&[0, 1]), GroupKind::Tensor).unwrap();
        let out = on_members(&f, &g, |f, r| {
            let buf = if r.0 == 0 { vec![1.0, 2.0] } else { vec![3.0, 4.0] };
            f.all_reduce(&g, r, &buf, W, Phase::Forward).unwrap()
        });
        assert_eq!(out, vec![vec![4.0, 6.0], vec![4.0, 6.0]]);
        let e = f.ledger().get(Phase::Forward, GroupKind::Tensor, CollectiveOp::AllReduce);
        assert_eq!(e.calls, 1);
        assert_eq!(e.payload_bytes, 2 * 2 * 8);
        assert_eq!(e.metadata_bytes, 0);
    }

    #[test]
    fn singleton_all_reduce_is_identity_but_ledgered() {
        let f = Fabric::new(1).unwrap();
        let g = f.new_group(&ranks(&[0]), GroupKind::DataExp).unwrap();
        let out = f
            .all_reduce(&g, RankId(0), &[5.0], StorageWidth::Half, Phase::GradSync)
            .unwrap();
        assert_eq!(out, vec![5.0]);
        let e = f.ledger().get(Phase::GradSync, GroupKind::DataExp, CollectiveOp::AllReduce);
        assert_eq!((e.calls, e.payload_bytes), (1, 2));
    }

    #[test]
    fn all_reduce_length_mismatch_is_protocol_error() {
        let f = Fabric::new(2).unwrap();
        let g = f.new_group(&ranks(&[0, 1]), GroupKind::Tensor).unwrap();
        let out = on_members(&f, &g, |f, r| {
            let buf = vec![1.0; 1 + r.0];
            f.all_reduce(&g, r, &buf, W, Phase::Forward)
        });
        for o in out {
            assert!(matches!(o, Err(Error::Protocol { .. })));
        }
        assert!(f.ledger().is_empty());
    }

    #[test]
    fn mismatched_collectives_are_protocol_errors() {
        let f = Fabric::new(2).unwrap();
        let g = f.new_group(&ranks(&[0, 1]), GroupKind::Tensor).unwrap();
        let out = on_members(&f, &g, |f, r| {
            if r.0 == 0 {
                f.all_reduce(&g, r, &[1.0], W, Phase::Forward)
            } else {
                f.all_gather(&g, r, &[1.0], W, Phase::Forward)
            }
        });
        assert!(out.iter().all(|o| matches!(o, Err(Error::Protocol { .. }))));
    }

    #[test]
    fn missing_member_times_out() {
        let f = Fabric::new(2).unwrap().with_timeout(Duration::from_millis(50));
        let g = f.new_group(&ranks(&[0, 1]), GroupKind::Tensor).unwrap();
        let err = f.all_reduce(&g, RankId(0), &[1.0], W, Phase::Forward).unwrap_err();
        assert!(matches!(err, Error::Timeout { arrived: 1, expected: 2, .. }));
        // The group recovers once both members show up.
        let out = on_members(&f, &g, |f, r| f.all_reduce(&g, r, &[1.0], W, Phase::Forward).unwrap());
        assert_eq!(out, vec![vec![2.0], vec![2.0]]);
    }

    #[test]
    fn non_member_is_rejected() {
        let f = Fabric::new(3).unwrap();
        let g = f.new_group(&ranks(&[0, 1]), GroupKind::Tensor).unwrap();
        assert!(matches!(
            f.all_reduce(&g, RankId(2), &[1.0], W, Phase::Forward),
            Err(Error::InvalidGroup(_))
        ));
    }

    #[test]
    fn all_gather_concatenates_in_group_order() {
        let f = Fabric::new(2).unwrap();
        let g = f.new_group(&ranks(&[1, 0]), GroupKind::Tensor).unwrap();
        let out = on_members(&f, &g, |f, r| {
            f.all_gather(&g, r, &[r.0 as f64 + 1.0], W, Phase::Forward).unwrap()
        });
        assert_eq!(out, vec![vec![2.0, 1.0], vec![2.0, 1.0]]);

        let bad = on_members(&f, &g, |f, r| {
            f.all_gather(&g, r, &vec![0.0; r.0 + 1], W, Phase::Forward)
        });
        assert!(bad.iter().all(|o| matches!(o, Err(Error::Protocol { .. }))));
    }

    #[test]
    fn all_gather_v_ledgers_count_exchange() {
        let f = Fabric::new(3).unwrap();
        let g = f.new_group(&ranks(&[0, 1, 2]), GroupKind::Tensor).unwrap();
        let out = on_members(&f, &g, |f, r| {
            f.all_gather_v(&g, r, &vec![r.0 as f64; r.0], StorageWidth::Half, Phase::Forward)
                .unwrap()
        });
        for o in &out {
            assert_eq!(o, &vec![vec![], vec![1.0], vec![2.0, 2.0]]);
        }
        let e = f.ledger().get(Phase::Forward, GroupKind::Tensor, CollectiveOp::AllGather);
        assert_eq!(e.payload_bytes, 3 * 2);
        assert_eq!(e.metadata_bytes, 9 * COUNT_BYTES);
    }

    #[test]
    fn all_to_all_pair_matches_dispatch_example() {
        // r0 addresses [a1] to itself and [a2] to r1; r1 addresses [a3] to r0 and [a4] to itself.
        let (a1, a2, a3, a4) = (1.0, 2.0, 3.0, 4.0);
        let f = Fabric::new(2).unwrap();
        let g = f.new_group(&ranks(&[0, 1]), GroupKind::Expert).unwrap();
        let out = on_members(&f, &g, |f, r| {
            let send = if r.0 == 0 {
                vec![vec![a1], vec![a2]]
            } else {
                vec![vec![a3], vec![a4]]
            };
            f.all_to_all_v(&g, r, send, W, Phase::Forward).unwrap()
        });
        assert_eq!(out[0], vec![vec![a1], vec![a3]]);
        assert_eq!(out[1], vec![vec![a2], vec![a4]]);
    }

    #[test]
    fn empty_all_to_all_still_ledgers_counts() {
        let f = Fabric::new(2).unwrap();
        let g = f.new_group(&ranks(&[0, 1]), GroupKind::Expert).unwrap();
        let out = on_members(&f, &g, |f, r| {
            f.all_to_all_v(&g, r, vec![vec![], vec![]], W, Phase::Backward).unwrap()
        });
        assert!(out.iter().all(|o| o.iter().all(Vec::is_empty)));
        let e = f.ledger().get(Phase::Backward, GroupKind::Expert, CollectiveOp::AllToAll);
        assert_eq!(e, LedgerEntry { calls: 1, payload_bytes: 0, metadata_bytes: 4 * COUNT_BYTES });
    }

    #[test]
    fn sibling_groups_count_as_one_call_per_rank() {
        let f = Fabric::new(4).unwrap();
        let g0 = f.new_group(&ranks(&[0, 1]), GroupKind::Tensor).unwrap();
        let g1 = f.new_group(&ranks(&[2, 3]), GroupKind::Tensor).unwrap();
        thread::scope(|s| {
            for r in 0..4 {
                let g = if r < 2 { g0.clone() } else { g1.clone() };
                let f = &f;
                s.spawn(move || {
                    for _ in 0..3 {
                        f.all_reduce(&g, RankId(r), &[1.0], W, Phase::Forward).unwrap();
                    }
                });
            }
        });
        let e = f.ledger().get(Phase::Forward, GroupKind::Tensor, CollectiveOp::AllReduce);
        assert_eq!(e.calls, 3);
        assert_eq!(e.payload_bytes, 3 * 4 * 8);
        f.reset_ledger();
        assert!(f.ledger().is_empty());
    }

    #[test]
    fn export_round_trips_through_records() {
        let mut snap = LedgerSnapshot::new();
        snap.add(
            LedgerKey::new(Phase::GradSync, GroupKind::DataNonexp, CollectiveOp::AllReduce),
            LedgerEntry { calls: 2, payload_bytes: 64, metadata_bytes: 0 },
        );
        snap.add(
            LedgerKey::new(Phase::Forward, GroupKind::Expert, CollectiveOp::AllToAll),
            LedgerEntry { calls: 1, payload_bytes: 16, metadata_bytes: 32 },
        );
        let json = snap.to_json().unwrap();
        let back: Vec<LedgerRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(LedgerSnapshot::from_records(&back), snap);
        assert!(json.contains("\"grad-sync\"") && json.contains("\"data-nonexp\""));
        let csv = snap.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "phase,group_kind,op,calls,payload_bytes,metadata_bytes"
        );
        assert_eq!(lines.next().unwrap(), "forward,expert,all-to-all,1,16,32");
    }
}
