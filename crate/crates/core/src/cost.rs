//! Closed-form models: parameter counts, per-GPU memory bounds, the largest
//! trainable base model, a capacity planner and a communication-volume
//! predictor for the simulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{CollectiveOp, GroupKind, LedgerEntry, LedgerKey, LedgerSnapshot, Phase, COUNT_BYTES};
use crate::moe::{ExecFlags, MoeModelConfig, ACTIVATION_WIDTH, PARAM_WIDTH};
use crate::topology::{derive_config, TedConfig};
use crate::zero::{shard_ranges, OPTIM_STATE_BYTES};

/// A base model and the number of experts added to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub np_base: u64,
    pub experts: u64,
}

impl ModelSpec {
    pub fn new(np_base: u64, experts: u64) -> Result<Self> {
        if np_base == 0 {
            return Err(Error::config("base model must have parameters"));
        }
        if experts == 0 {
            return Err(Error::config("experts must be at least 1"));
        }
        Ok(Self { np_base, experts })
    }

    pub fn total_params(&self) -> u64 {
        expert_params(self) + nonexpert_params(self)
    }
}

/// `E/3 · NP_base`: half the feedforward blocks, each a third of the base
/// model's parameters, replicated `E` times.
pub fn expert_params(spec: &ModelSpec) -> u64 {
    (spec.experts as u128 * spec.np_base as u128 / 3) as u64
}

/// `2/3 · NP_base`: attention plus the feedforward blocks without experts.
pub fn nonexpert_params(spec: &ModelSpec) -> u64 {
    (2 * spec.np_base as u128 / 3) as u64
}

/// Per-GPU memory lower bound with ZeRO stage-1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// Two-term form, non-expert part.
    pub nonexpert_term: f64,
    /// Two-term form, expert part.
    pub expert_term: f64,
    /// `4·NP_base·(1/G_tensor + (E+2)/G)`.
    pub closed_form: f64,
}

impl MemoryEstimate {
    pub fn two_term(&self) -> f64 {
        self.nonexpert_term + self.expert_term
    }
}

/// ZeRO stage-1 model-state bytes: `(4 + 12/G_data) · NP` per family.
pub fn zero_stage1_bound(np_nonexp_gpu: f64, g_data_nonexp: f64, np_exp_gpu: f64, g_data_exp: f64) -> f64 {
    (4.0 + 12.0 / g_data_nonexp) * np_nonexp_gpu + (4.0 + 12.0 / g_data_exp) * np_exp_gpu
}

/// The same bound evaluated exactly for one rank when shards are split
/// element-wise (the first `len % G_data` shards hold one extra element).
pub fn zero_stage1_rank_bytes(
    np_nonexp_gpu: u64,
    g_data_nonexp: usize,
    pos_nonexp: usize,
    np_exp_gpu: u64,
    g_data_exp: usize,
    pos_exp: usize,
) -> Result<u64> {
    let owned = |np: u64, g: usize, pos: usize| -> Result<u64> {
        let ranges = shard_ranges(np as usize, g)?;
        ranges
            .get(pos)
            .map(|r| r.len() as u64)
            .ok_or_else(|| Error::InvalidGroup(format!("position {pos} in a group of {g}")))
    };
    let model_state = 2 * PARAM_WIDTH.bytes();
    Ok(model_state * (np_nonexp_gpu + np_exp_gpu)
        + OPTIM_STATE_BYTES * (owned(np_nonexp_gpu, g_data_nonexp, pos_nonexp)? + owned(np_exp_gpu, g_data_exp, pos_exp)?))
}

pub fn memory_lower_bound(spec: &ModelSpec, world_size: usize, tensor_parallel: usize) -> Result<MemoryEstimate> {
    let ted = derive_config(world_size, tensor_parallel, spec.experts as usize)?;
    let np = spec.np_base as f64;
    let e = spec.experts as f64;
    let t = tensor_parallel as f64;
    let g = world_size as f64;
    let np_nonexp = 2.0 * np / 3.0;
    let np_exp = e * np / 3.0;
    let gdn = ted.data_nonexp as f64;
    let gde = ted.data_exp as f64;
    Ok(MemoryEstimate {
        nonexpert_term: (4.0 + 12.0 / gdn) * np_nonexp / t,
        expert_term: (4.0 + 12.0 / gde) * np_exp / (t * e),
        closed_form: 4.0 * np * (1.0 / t + (e + 2.0) / g),
    })
}

/// Largest base model whose bound fits in `memory` bytes.
pub fn max_base_model(memory: f64, world_size: usize, tensor_parallel: usize, experts: usize) -> f64 {
    let t = tensor_parallel as f64;
    memory / (4.0 * (1.0 / t + (experts as f64 + 2.0) / world_size as f64))
}

/// The limit of [`max_base_model`] as the GPU count grows: `G_tensor/4 · M`.
pub fn max_base_model_asymptotic(memory: f64, tensor_parallel: usize) -> f64 {
    tensor_parallel as f64 / 4.0 * memory
}

/// Base sizes of the reference model family, in parameters.
pub const DEFAULT_BASE_SIZES: [u64; 4] = [1_300_000_000, 2_700_000_000, 6_700_000_000, 13_000_000_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCaps {
    pub tensor_max: usize,
    pub experts_min: usize,
    pub experts_max: usize,
}

impl Default for PlanCaps {
    fn default() -> Self {
        Self {
            tensor_max: 6,
            experts_min: 4,
            experts_max: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    Ted,
    Baseline,
}

impl Framework {
    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Ted => "ted",
            Framework::Baseline => "baseline",
        }
    }
}

/// The best configuration found for one framework.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub tensor_parallel: usize,
    pub experts: usize,
    pub np_base: u64,
    pub total_params: u64,
    pub bytes_bound: f64,
}

/// One line of the planner table. Empty fields mean nothing fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    #[serde(rename = "G")]
    pub world_size: usize,
    pub framework: Framework,
    #[serde(rename = "G_tensor")]
    pub tensor_parallel: Option<usize>,
    #[serde(rename = "E")]
    pub experts: Option<usize>,
    #[serde(rename = "NP_base")]
    pub np_base: Option<u64>,
    pub total_params: Option<u64>,
    pub bytes_bound: Option<f64>,
    /// TED total over baseline total at the same GPU count.
    pub ratio: Option<f64>,
}

fn divisors_up_to(n: usize, cap: usize) -> impl Iterator<Item = usize> {
    (1..=cap.min(n)).filter(move |d| n.is_multiple_of(*d))
}

fn best_fit(memory: f64, world_size: usize, tensor_caps: usize, caps: &PlanCaps, bases: &[u64]) -> Option<PlanResult> {
    let mut best: Option<PlanResult> = None;
    for t in divisors_up_to(world_size, tensor_caps) {
        for e in divisors_up_to(world_size / t, caps.experts_max).filter(|&e| e >= caps.experts_min) {
            for &np in bases {
                let Ok(spec) = ModelSpec::new(np, e as u64) else { continue };
                let Ok(est) = memory_lower_bound(&spec, world_size, t) else { continue };
                if est.closed_form > memory {
                    continue;
                }
                let total = spec.total_params();
                let better = match &best {
                    None => true,
                    Some(b) => total > b.total_params || (total == b.total_params && est.closed_form < b.bytes_bound),
                };
                if better {
                    best = Some(PlanResult {
                        tensor_parallel: t,
                        experts: e,
                        np_base: np,
                        total_params: total,
                        bytes_bound: est.closed_form,
                    });
                }
            }
        }
    }
    best
}

/// Largest MoE (by total parameters) that fits in `memory` bytes per GPU on
/// `world_size` GPUs, for TED and for the `G_tensor = 1` baseline.
pub fn plan_largest_model(memory: f64, world_size: usize, caps: &PlanCaps, bases: &[u64]) -> Result<[PlanRow; 2]> {
    if memory <= 0.0 || world_size == 0 || caps.tensor_max == 0 || caps.experts_min == 0 || caps.experts_max == 0 {
        return Err(Error::config("planner arguments must be positive"));
    }
    let ted = best_fit(memory, world_size, caps.tensor_max, caps, bases);
    let base = best_fit(memory, world_size, 1, caps, bases);
    let ratio = match (ted, base) {
        (Some(t), Some(b)) => Some(t.total_params as f64 / b.total_params as f64),
        _ => None,
    };
    let row = |framework, r: Option<PlanResult>, ratio| PlanRow {
        world_size,
        framework,
        tensor_parallel: r.map(|r| r.tensor_parallel),
        experts: r.map(|r| r.experts),
        np_base: r.map(|r| r.np_base),
        total_params: r.map(|r| r.total_params),
        bytes_bound: r.map(|r| r.bytes_bound),
        ratio,
    };
    Ok([row(Framework::Ted, ted, ratio), row(Framework::Baseline, base, ratio.map(|_| 1.0))])
}

/// Planner rows for every GPU count.
pub fn plan_table(memory: f64, world_sizes: &[usize], caps: &PlanCaps, bases: &[u64]) -> Result<Vec<PlanRow>> {
    let mut rows = Vec::with_capacity(world_sizes.len() * 2);
    for &g in world_sizes {
        rows.extend(plan_largest_model(memory, g, caps, bases)?);
    }
    Ok(rows)
}

pub fn plan_to_csv(rows: &[PlanRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Export(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Export(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Export(e.to_string()))
}

pub fn plan_to_json(rows: &[PlanRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| Error::Export(e.to_string()))
}

/// Parameters of one tensor shard of a column-then-row MLP.
fn mlp_shard_params(hidden: u64, ffn: u64, tensor: u64) -> u64 {
    2 * hidden * ffn / tensor + ffn / tensor + hidden
}

/// Per-rank parameter counts `(non-expert, expert)` of the simulator model.
pub fn local_param_counts(model: &MoeModelConfig, ted: &TedConfig) -> (u64, u64) {
    let h = model.hidden as u64;
    let f = model.ffn_width() as u64;
    let t = ted.tensor_parallel as u64;
    let mlp = mlp_shard_params(h, f, t);
    let moe = model.moe_layers() as u64;
    let dense = model.dense_layers() as u64;
    let nonexp = model.layers as u64 * mlp + dense * mlp + moe * h * model.experts as u64;
    (nonexp, moe * mlp)
}

fn add(snap: &mut LedgerSnapshot, phase: Phase, kind: GroupKind, op: CollectiveOp, calls: u64, payload: u64, meta: u64) {
    snap.add(
        LedgerKey::new(phase, kind, op),
        LedgerEntry {
            calls,
            payload_bytes: payload,
            metadata_bytes: meta,
        },
    );
}

/// Collectives of one pass (forward, recompute or backward) over all layers.
fn layer_pass(snap: &mut LedgerSnapshot, phase: Phase, model: &MoeModelConfig, ted: &TedConfig, flags: &ExecFlags) {
    let g = ted.world_size as u64;
    let t = ted.tensor_parallel as u64;
    let e = ted.experts as u64;
    let w = ACTIVATION_WIDTH.bytes();
    let tokens = model.tokens_per_shard as u64 * model.hidden as u64;
    let full = g * tokens * w;
    let moe = model.moe_layers() as u64;
    let dense = model.dense_layers() as u64;
    if t > 1 {
        add(snap, phase, GroupKind::Tensor, CollectiveOp::AllReduce, 2 * (moe + dense), 2 * (moe + dense) * full, 0);
    }
    if e > 1 {
        let dtd = flags.dtd_active(ted);
        let a2a = if dtd { full / t } else { full };
        add(snap, phase, GroupKind::Expert, CollectiveOp::AllToAll, 2 * moe, 2 * moe * a2a, 2 * moe * g * e * COUNT_BYTES);
        if dtd {
            // One variable-size and one fixed-size gather per exchange pair.
            add(snap, phase, GroupKind::Tensor, CollectiveOp::AllGather, 2 * moe, 2 * moe * full / t, moe * g * t * COUNT_BYTES);
        }
    }
}

/// Predicted ledger for `steps` training steps of the simulator.
pub fn predict_comm_volume(model: &MoeModelConfig, ted: &TedConfig, flags: &ExecFlags, steps: u64) -> LedgerSnapshot {
    let mut one = LedgerSnapshot::new();
    layer_pass(&mut one, Phase::Forward, model, ted, flags);
    if flags.ckpt && !flags.effective_cac() {
        layer_pass(&mut one, Phase::Recompute, model, ted, flags);
    }
    layer_pass(&mut one, Phase::Backward, model, ted, flags);

    let g = ted.world_size as u64;
    let w = PARAM_WIDTH.bytes();
    let (np_nonexp, np_exp) = local_param_counts(model, ted);
    for (kind, gd, np) in [
        (GroupKind::DataNonexp, ted.data_nonexp as u64, np_nonexp),
        (GroupKind::DataExp, ted.data_exp as u64, np_exp),
    ] {
        if gd > 1 {
            add(&mut one, Phase::GradSync, kind, CollectiveOp::AllReduce, 1, g * np * w, 0);
            add(&mut one, Phase::Optim, kind, CollectiveOp::AllGather, 1, g / gd * np * w, g * gd * COUNT_BYTES);
        }
    }

    let mut total = LedgerSnapshot::new();
    for _ in 0..steps {
        for (k, v) in one.entries() {
            total.add(*k, *v);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn headline_parameter_totals() {
        let big = ModelSpec::new(6_700_000_000, 16).unwrap();
        assert!(rel(expert_params(&big) as f64, 35.73e9) < 1e-3);
        assert!(rel(big.total_params() as f64, 40e9) < 0.01);
        let small = ModelSpec::new(1_300_000_000, 4).unwrap();
        assert!(rel(small.total_params() as f64, 2.6e9) < 0.01);
        assert_eq!(nonexpert_params(&ModelSpec::new(3, 1).unwrap()), 2);
        assert_eq!(expert_params(&ModelSpec::new(900, 3).unwrap()), 900);
        assert!(ModelSpec::new(10, 0).is_err());
    }

    #[test]
    fn bound_example() {
        let est = memory_lower_bound(&ModelSpec::new(6_700_000_000, 16).unwrap(), 128, 4).unwrap();
        assert!(rel(est.closed_form, 4.0 * 6.7e9 * (0.25 + 18.0 / 128.0)) < 1e-12);
        assert!(rel(est.two_term(), est.closed_form) < 1e-12);
        assert!(memory_lower_bound(&ModelSpec::new(10, 3).unwrap(), 8, 2).is_err());
    }

    #[test]
    fn asymptotic_bound() {
        assert_eq!(max_base_model_asymptotic(16e9, 6), 24e9);
        assert_eq!(max_base_model_asymptotic(16e9, 6) / max_base_model_asymptotic(16e9, 1), 6.0);
        assert!(max_base_model(16e9, 512, 6, 128) < 24e9);
    }

    #[test]
    fn tensor_cap_of_one_matches_baseline() {
        let caps = PlanCaps {
            tensor_max: 1,
            ..PlanCaps::default()
        };
        for g in [32, 64, 128] {
            let rows = plan_largest_model(16e9, g, &caps, &DEFAULT_BASE_SIZES).unwrap();
            assert_eq!(rows[0].ratio, Some(1.0));
            assert_eq!(rows[0].total_params, rows[1].total_params);
        }
    }

    #[test]
    fn nothing_fits() {
        let rows = plan_largest_model(1.0, 32, &PlanCaps::default(), &DEFAULT_BASE_SIZES).unwrap();
        assert!(rows.iter().all(|r| r.total_params.is_none() && r.ratio.is_none()));
        let csv = plan_to_csv(&rows).unwrap();
        assert!(csv.starts_with("G,framework,G_tensor,E,NP_base,total_params,bytes_bound,ratio"));
    }

    #[test]
    fn predicted_counts_for_one_layer() {
        let model = MoeModelConfig {
            layers: 1,
            hidden: 8,
            experts: 2,
            tokens_per_shard: 8,
            seed: 0,
        };
        let ted = derive_config(4, 2, 2).unwrap();
        let layer_ops = |snap: &LedgerSnapshot, op| {
            snap.total(|k| k.op == op && matches!(k.phase, Phase::Forward | Phase::Recompute | Phase::Backward))
        };
        let plain = predict_comm_volume(&model, &ted, &ExecFlags::new(false, false, true), 1);
        assert_eq!(layer_ops(&plain, CollectiveOp::AllToAll).calls, 6);
        assert_eq!(layer_ops(&plain, CollectiveOp::AllReduce).calls, 6);
        let cac = predict_comm_volume(&model, &ted, &ExecFlags::new(false, true, true), 1);
        assert_eq!(layer_ops(&cac, CollectiveOp::AllToAll).calls, 4);
        assert_eq!(layer_ops(&cac, CollectiveOp::AllReduce).calls, 4);
        let dtd = predict_comm_volume(&model, &ted, &ExecFlags::new(true, false, true), 1);
        assert_eq!(
            layer_ops(&dtd, CollectiveOp::AllToAll).payload_bytes * 2,
            layer_ops(&plain, CollectiveOp::AllToAll).payload_bytes
        );
    }
}
