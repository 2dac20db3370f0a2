//! Token exchange between the non-expert and expert topologies.
//!
//! `dispatch` moves each token to the expert-group member that hosts its
//! expert (step 4), `combine` brings expert outputs home (step 7). With
//! duplicate token dropping the tensor ranks first split their identical
//! token sets into contiguous chunks, so every token crosses the all-to-all
//! exactly once per tensor group, and all-gather afterwards.
//!
//! The backward functions run the same exchanges in reverse: a gather
//! becomes a drop and a drop becomes a gather.

use std::collections::BTreeMap;
use std::ops::Range;

use super::comm::{LayerComm, RankComm, StashMode};
use super::{ExecFlags, RoutingDecision, ACTIVATION_WIDTH};
use crate::error::{Error, Result};
use crate::fabric::{Fabric, Phase, RankId};
use crate::tensor::Tensor;
use crate::topology::{build_groups, TedConfig};

/// Keeps the `shard`-th contiguous chunk of tokens.
pub fn drop_tokens(x: &Tensor, shard: usize, degree: usize) -> Result<Tensor> {
    let n = x.rows();
    if degree == 0 || !n.is_multiple_of(degree) {
        return Err(Error::config(format!(
            "cannot drop {n} tokens evenly across {degree} tensor ranks"
        )));
    }
    if shard >= degree {
        return Err(Error::config(format!("shard {shard} of {degree}")));
    }
    let chunk = n / degree;
    x.row_range(shard * chunk, (shard + 1) * chunk)
}

/// Reassembles dropped chunks across the tensor group, in tensor order.
pub fn gather_tokens(comm: &mut LayerComm<'_, '_>, shard: &Tensor) -> Result<Tensor> {
    let h = shard.cols();
    let data = comm.tensor_all_gather(shard.data().to_vec())?;
    Tensor::matrix(data.len() / h.max(1), h, data, shard.width())
}

/// Bookkeeping needed to invert a dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchLayout {
    hidden: usize,
    tokens: usize,
    /// Local tokens this rank sends (all of them without dropping).
    chunk: Range<usize>,
    /// Absolute token indices sent to each expert-group member.
    send_index: Vec<Vec<usize>>,
    /// Rows received from each expert-group member.
    recv_counts: Vec<usize>,
    /// Rows contributed by each tensor-group member to the gathered expert
    /// input; present only when dropping is active.
    gathered: Option<Vec<usize>>,
    tensor_position: usize,
}

/// A token as seen by the expert side.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEnvelope {
    /// Expert-group position of the sender.
    pub source: usize,
    /// Position in the sender's list for this destination; the sender's
    /// [`DispatchLayout::sent_to`] maps it back to the original token index.
    pub slot: usize,
    pub row: Vec<f64>,
}

impl DispatchLayout {
    pub fn dropping(&self) -> bool {
        self.gathered.is_some()
    }

    /// Token indices sent to expert-group member `dest`.
    pub fn sent_to(&self, dest: usize) -> &[usize] {
        &self.send_index[dest]
    }

    pub fn recv_counts(&self) -> &[usize] {
        &self.recv_counts
    }

    /// Rows of the expert-side buffer that this rank received itself.
    pub fn own_segment(&self) -> Range<usize> {
        match &self.gathered {
            Some(counts) => {
                let start: usize = counts[..self.tensor_position].iter().sum();
                start..start + counts[self.tensor_position]
            }
            None => 0..self.recv_counts.iter().sum(),
        }
    }

    /// Rows in the expert-side buffer.
    pub fn expert_rows(&self) -> usize {
        match &self.gathered {
            Some(counts) => counts.iter().sum(),
            None => self.recv_counts.iter().sum(),
        }
    }

    /// Envelopes for the rows this rank received through the all-to-all.
    pub fn envelopes(&self, expert_input: &Tensor) -> Vec<TokenEnvelope> {
        let seg = self.own_segment();
        let mut out = Vec::with_capacity(seg.len());
        let mut row = seg.start;
        for (source, &count) in self.recv_counts.iter().enumerate() {
            for slot in 0..count {
                out.push(TokenEnvelope {
                    source,
                    slot,
                    row: expert_input.row(row).to_vec(),
                });
                row += 1;
            }
        }
        out
    }

    fn split_by_source(&self, rows: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.recv_counts.len());
        let mut offset = 0;
        for &c in &self.recv_counts {
            let len = c * self.hidden;
            out.push(rows[offset..offset + len].to_vec());
            offset += len;
        }
        out
    }

    /// Writes rows returned by each destination back to their token slots.
    fn scatter_home(&self, back: &[Vec<f64>]) -> Result<Tensor> {
        let h = self.hidden;
        let mut local = vec![0.0; self.chunk.len() * h];
        for (dest, rows) in back.iter().enumerate() {
            let idx = &self.send_index[dest];
            if rows.len() != idx.len() * h {
                return Err(Error::Protocol {
                    op: "combine",
                    group: dest,
                    reason: format!("expected {} rows, got {} values", idx.len(), rows.len()),
                });
            }
            for (k, &token) in idx.iter().enumerate() {
                let at = token - self.chunk.start;
                local[at * h..(at + 1) * h].copy_from_slice(&rows[k * h..(k + 1) * h]);
            }
        }
        Tensor::matrix(self.chunk.len(), h, local, ACTIVATION_WIDTH)
    }

    fn own_rows<'t>(&self, expert_side: &'t Tensor) -> &'t [f64] {
        let seg = self.own_segment();
        &expert_side.data()[seg.start * self.hidden..seg.end * self.hidden]
    }
}

fn gathered_tensor(chunks: Vec<Vec<f64>>, hidden: usize) -> Result<(Tensor, Vec<usize>)> {
    let counts: Vec<usize> = chunks.iter().map(|c| c.len() / hidden).collect();
    let data: Vec<f64> = chunks.into_iter().flatten().collect();
    let rows = data.len() / hidden;
    Ok((Tensor::matrix(rows, hidden, data, ACTIVATION_WIDTH)?, counts))
}

/// Step 4: route tokens to their experts. Returns the expert-side input
/// (identical across the tensor group) and the layout to undo it.
pub fn dispatch(
    comm: &mut LayerComm<'_, '_>,
    a: &Tensor,
    decision: &RoutingDecision,
    flags: &ExecFlags,
) -> Result<(Tensor, DispatchLayout)> {
    let (n, h) = (a.rows(), a.cols());
    let experts = comm.expert_degree();
    let t_deg = comm.tensor_degree();
    let t_pos = comm.tensor_position();
    let dropping = flags.dtd && t_deg > 1 && experts > 1;

    let chunk = if dropping {
        let keep = if flags.corrupt_drop_order {
            (t_pos + 1) % t_deg
        } else {
            t_pos
        };
        // Validates divisibility.
        drop_tokens(a, keep, t_deg)?;
        let c = n / t_deg;
        keep * c..(keep + 1) * c
    } else {
        0..n
    };

    let mut send_index = vec![Vec::new(); experts];
    for i in chunk.clone() {
        let e = decision.assignment[i];
        if e >= experts {
            return Err(Error::config(format!("token routed to expert {e} of {experts}")));
        }
        send_index[e].push(i);
    }
    let send: Vec<Vec<f64>> = send_index
        .iter()
        .map(|idx| a.select_rows(idx).into_data())
        .collect();
    let recv = comm.expert_all_to_all(send)?;
    let recv_counts: Vec<usize> = recv.iter().map(|r| r.len() / h).collect();
    let mine: Vec<f64> = recv.into_iter().flatten().collect();

    let (input, gathered) = if dropping {
        let (t, counts) = gathered_tensor(comm.tensor_all_gather_v(mine)?, h)?;
        (t, Some(counts))
    } else {
        let rows = mine.len() / h;
        (Tensor::matrix(rows, h, mine, ACTIVATION_WIDTH)?, None)
    };

    Ok((
        input,
        DispatchLayout {
            hidden: h,
            tokens: n,
            chunk,
            send_index,
            recv_counts,
            gathered,
            tensor_position: t_pos,
        },
    ))
}

/// Step 7: return expert outputs to the tokens' home ranks, in original
/// token order.
pub fn combine(comm: &mut LayerComm<'_, '_>, expert_out: &Tensor, layout: &DispatchLayout) -> Result<Tensor> {
    let mine = layout.own_rows(expert_out);
    let back = comm.expert_all_to_all(layout.split_by_source(mine))?;
    let local = layout.scatter_home(&back)?;
    if layout.dropping() {
        gather_tokens(comm, &local)
    } else {
        Ok(local)
    }
}

/// Backward of [`combine`]: gradient w.r.t. the combined output in, gradient
/// w.r.t. the expert-side output out.
pub fn combine_backward(comm: &mut LayerComm<'_, '_>, d_out: &Tensor, layout: &DispatchLayout) -> Result<Tensor> {
    let h = layout.hidden;
    let local = if layout.dropping() {
        d_out.row_range(layout.chunk.start, layout.chunk.end)?
    } else {
        d_out.clone()
    };
    let send: Vec<Vec<f64>> = layout
        .send_index
        .iter()
        .map(|idx| {
            let rel: Vec<usize> = idx.iter().map(|i| i - layout.chunk.start).collect();
            local.select_rows(&rel).into_data()
        })
        .collect();
    let recv = comm.expert_all_to_all(send)?;
    let mine: Vec<f64> = recv.into_iter().flatten().collect();
    if layout.dropping() {
        Ok(gathered_tensor(comm.tensor_all_gather_v(mine)?, h)?.0)
    } else {
        let rows = mine.len() / h;
        Tensor::matrix(rows, h, mine, ACTIVATION_WIDTH)
    }
}

/// Backward of [`dispatch`]: gradient w.r.t. the expert-side input in,
/// gradient w.r.t. the token activations out.
pub fn dispatch_backward(comm: &mut LayerComm<'_, '_>, d_input: &Tensor, layout: &DispatchLayout) -> Result<Tensor> {
    let mine = layout.own_rows(d_input);
    let back = comm.expert_all_to_all(layout.split_by_source(mine))?;
    let local = layout.scatter_home(&back)?;
    let full = if layout.dropping() {
        gather_tokens(comm, &local)?
    } else {
        local
    };
    if full.rows() != layout.tokens {
        return Err(Error::shape(format!(
            "dispatch backward produced {} rows for {} tokens",
            full.rows(),
            layout.tokens
        )));
    }
    Ok(full)
}

/// Outcome of [`token_roundtrip_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripReport {
    pub tokens: usize,
    /// Every expert saw exactly the tokens routed to it.
    pub conserved: bool,
    /// Every token came back to its source rank at its original index.
    pub returned_in_place: bool,
    pub failures: Vec<String>,
}

impl RoundtripReport {
    pub fn passed(&self) -> bool {
        self.conserved && self.returned_in_place
    }
}

fn token_route(seed: u64, token: usize, experts: usize) -> usize {
    let mut z = seed ^ (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 29;
    (z % experts as u64) as usize
}

/// Pushes tagged tokens through dispatch and combine with an identity expert
/// and checks conservation and inverse routing.
///
/// Token `g` carries the row `[g, g + 0.5]` and is routed pseudo-randomly from
/// `seed`.
pub fn token_roundtrip_check(ted: &TedConfig, tokens: usize, seed: u64, flags: &ExecFlags) -> Result<RoundtripReport> {
    let topo = build_groups(ted)?;
    let fabric = Fabric::new(ted.world_size)?;
    let groups = topo.register(&fabric)?;
    let hidden = 2;
    let total = tokens * ted.data_nonexp;
    let route: Vec<usize> = (0..total).map(|g| token_route(seed, g, ted.experts)).collect();

    let results: Vec<Result<(Vec<usize>, bool)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..ted.world_size)
            .map(|r| {
                let groups = &groups;
                let fabric = &fabric;
                let route = &route;
                s.spawn(move || -> Result<(Vec<usize>, bool)> {
                    let rg = groups.for_rank(r)?;
                    let rc = RankComm::new(fabric, RankId(r), &rg);
                    let mut comm = LayerComm::new(rc, Phase::Forward, StashMode::Live);
                    let shard = ted.shard_index(r);
                    let ids: Vec<usize> = (shard * tokens..(shard + 1) * tokens).collect();
                    let data: Vec<f64> = ids.iter().flat_map(|&g| [g as f64, g as f64 + 0.5]).collect();
                    let a = Tensor::matrix(tokens, hidden, data, ACTIVATION_WIDTH)?;
                    let decision = RoutingDecision::from_assignment(
                        ids.iter().map(|&g| route[g]).collect(),
                        ted.experts,
                    )?;
                    let (input, layout) = dispatch(&mut comm, &a, &decision, flags)?;
                    let mut seen: Vec<usize> = (0..input.rows()).map(|i| input.row(i)[0] as usize).collect();
                    seen.sort_unstable();
                    let out = combine(&mut comm, &input, &layout)?;
                    Ok((seen, out == a))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Worker("roundtrip worker".into()))))
            .collect()
    });

    let mut report = RoundtripReport {
        tokens: total,
        conserved: true,
        returned_in_place: true,
        failures: Vec::new(),
    };
    // Tokens each expert rank must see: those routed to its expert from the
    // shards of its expert group.
    let mut expected: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (g, &e) in route.iter().enumerate() {
        let shard = g / tokens;
        let d = shard / ted.experts;
        expected.entry((e, d)).or_default().push(g);
    }
    for (r, res) in results.into_iter().enumerate() {
        let (seen, home) = res?;
        let c = ted.coords(r);
        let want = expected.get(&(c.expert, c.data)).map(Vec::as_slice).unwrap_or_default();
        if seen != want {
            report.conserved = false;
            report.failures.push(format!("rank {r}: expert input holds the wrong tokens"));
        }
        if !home {
            report.returned_in_place = false;
            report.failures.push(format!("rank {r}: tokens did not return to their original index"));
        }
    }
    Ok(report)
}
