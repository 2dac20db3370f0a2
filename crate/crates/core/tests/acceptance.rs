//! Acceptance suite: one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use tedsim_core::cost::{
    expert_params, local_param_counts, max_base_model, max_base_model_asymptotic, memory_lower_bound, nonexpert_params,
    plan_table, zero_stage1_bound, zero_stage1_rank_bytes, ModelSpec, PlanCaps, DEFAULT_BASE_SIZES,
};
use tedsim_core::harness::{flag_sweep, memory_check, sweep_configs, tiling_check, Resolved, RunConfig};
use tedsim_core::moe::{ParallelTrainer, TrainSetup};
use tedsim_core::zero::{optimizer_step_tiled, AdamWConfig, OptimizerShard, TileConfig, DEFAULT_TILE_SIZE};
use tedsim_core::{derive_config, CollectiveOp, ExecFlags, LedgerEntry, LedgerSnapshot, MoeModelConfig, Phase, RankId};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn layer_phases(snap: &LedgerSnapshot, op: CollectiveOp) -> LedgerEntry {
    snap.total(|k| k.op == op && matches!(k.phase, Phase::Forward | Phase::Recompute | Phase::Backward))
}

fn one_step_ledger(model: MoeModelConfig, g: usize, t: usize, e: usize, flags: ExecFlags) -> LedgerSnapshot {
    let ted = derive_config(g, t, e).unwrap();
    let mut trainer = ParallelTrainer::new(TrainSetup::new(model, ted, flags)).unwrap();
    trainer.step().unwrap();
    trainer.ledger()
}

fn model(layers: usize, experts: usize) -> MoeModelConfig {
    MoeModelConfig {
        layers,
        hidden: 8,
        experts,
        tokens_per_shard: 8,
        seed: 3,
    }
}

fn collective_counts() -> Outcome {
    let plain = one_step_ledger(model(1, 2), 4, 2, 2, ExecFlags::new(false, false, true));
    let cac = one_step_ledger(model(1, 2), 4, 2, 2, ExecFlags::new(false, true, true));
    let count = |s: &LedgerSnapshot| {
        (
            layer_phases(s, CollectiveOp::AllToAll).calls,
            layer_phases(s, CollectiveOp::AllReduce).calls,
        )
    };
    let bytes = |s: &LedgerSnapshot| {
        layer_phases(s, CollectiveOp::AllToAll).payload_bytes + layer_phases(s, CollectiveOp::AllReduce).payload_bytes
    };
    let (a, b) = (count(&plain), count(&cac));
    let third = 3 * bytes(&cac) == 2 * bytes(&plain);
    outcome(
        a == (6, 6) && b == (4, 4) && third,
        format!(
            "cac off: {} all-to-all, {} all-reduce; cac on: {}, {}; bytes {} -> {}",
            a.0,
            a.1,
            b.0,
            b.1,
            bytes(&plain),
            bytes(&cac)
        ),
    )
}

fn dtd_volume() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for t in [2, 4] {
        let off = one_step_ledger(model(2, 2), 8, t, 2, ExecFlags::new(false, false, true));
        let on = one_step_ledger(model(2, 2), 8, t, 2, ExecFlags::new(true, false, true));
        let a2a_off = layer_phases(&off, CollectiveOp::AllToAll).payload_bytes;
        let a2a_on = layer_phases(&on, CollectiveOp::AllToAll).payload_bytes;
        let gather_off = layer_phases(&off, CollectiveOp::AllGather).payload_bytes;
        let gather_on = layer_phases(&on, CollectiveOp::AllGather).payload_bytes;
        ok &= a2a_on * t as u64 == a2a_off && gather_off == 0 && gather_on > 0;
        detail.push(format!("T={t}: {a2a_off} -> {a2a_on} bytes, all-gather {gather_on}"));
    }
    outcome(ok, detail.join("; "))
}

struct SweepSummary {
    configs: usize,
    serial: f64,
    toggle: f64,
    ledger_mismatches: Vec<String>,
    elapsed: Duration,
}

fn run_sweep() -> SweepSummary {
    let start = Instant::now();
    let mut s = SweepSummary {
        configs: 0,
        serial: 0.0,
        toggle: 0.0,
        ledger_mismatches: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for (m, ted) in sweep_configs() {
        let r = flag_sweep(&m, &ted).unwrap();
        s.configs += 1;
        s.serial = s.serial.max(r.serial_diff);
        s.toggle = r.toggle_diff.iter().copied().fold(s.toggle, f64::max);
        for label in r.ledger_mismatches {
            s.ledger_mismatches.push(format!(
                "G={} T={} E={} L={} h={} n={} {label}",
                ted.world_size, ted.tensor_parallel, ted.experts, m.layers, m.hidden, m.tokens_per_shard
            ));
        }
    }
    s.elapsed = start.elapsed();
    s
}

fn numerical_equivalence(s: &SweepSummary) -> Outcome {
    outcome(
        s.serial <= 1e-9 && s.toggle <= 1e-12 && s.elapsed < Duration::from_secs(60),
        format!(
            "{} configs x 8 flag sets, max diff vs serial {:.3e}, max toggle diff {:.3e}, {:.1?}",
            s.configs, s.serial, s.toggle, s.elapsed
        ),
    )
}

fn optimizer_equivalence() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (g, t, e) in [(4, 2, 2), (8, 1, 4), (8, 2, 2), (2, 1, 1)] {
        let cfg = RunConfig {
            world_size: g,
            tensor_parallel: t,
            experts: e,
            layers: 2,
            ..RunConfig::default()
        };
        let r: Resolved = cfg.resolve().unwrap();
        let (failed, peaks) = tiling_check(&r, &[1, 7, DEFAULT_TILE_SIZE]).unwrap();
        let peak_ok = peaks.iter().all(|&(ts, p)| p <= 4 * ts as u64 + 1024);
        let mut setup = r.setup();
        setup.shadow_replicated = true;
        setup.tile = TileConfig::tiled(7);
        let mut trainer = ParallelTrainer::new(setup).unwrap();
        let mismatches: usize = (0..2).map(|_| trainer.step().unwrap().replica_mismatches).sum();
        ok &= failed.is_empty() && peak_ok && mismatches == 0;
        if !failed.is_empty() || mismatches > 0 {
            detail.push(format!("G={g} T={t} E={e}: tiles {failed:?} differ, {mismatches} replica mismatches"));
        }
    }
    let n = 5_000_000;
    let mut shard = OptimizerShard::new(RankId(0), 0..n, &vec![0.25; n]).unwrap();
    let (_, stats) =
        optimizer_step_tiled(&mut shard, &vec![1e-3; n], &TileConfig::default(), &AdamWConfig::default()).unwrap();
    ok &= stats.tiles == 3 && stats.peak_upcast_bytes == 4 * DEFAULT_TILE_SIZE as u64;
    detail.push(format!(
        "tiled and sharded updates bitwise equal; 5M shard: {} tiles, peak {} bytes",
        stats.tiles, stats.peak_upcast_bytes
    ));
    outcome(ok, detail.join("; "))
}

fn memory_model() -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    // Deterministic pseudo-random sweep.
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    let mut next = |m: u64| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state % m
    };
    while checked < 2000 {
        let np = 1 + next(50_000_000_000);
        let g = 1usize << next(12);
        let t = 1usize << next(4);
        let e = 1usize << next(8);
        let Ok(est) = memory_lower_bound(&ModelSpec::new(np, e as u64).unwrap(), g, t) else { continue };
        worst = worst.max(((est.two_term() - est.closed_form) / est.closed_form).abs());
        checked += 1;
    }
    ok &= worst <= 1e-12;

    // Baseline bound at G_tensor = 1.
    let spec = ModelSpec::new(1_300_000_000, 8).unwrap();
    let base = memory_lower_bound(&spec, 64, 1).unwrap();
    let np_n = nonexpert_params(&spec) as f64;
    let np_e = expert_params(&spec) as f64;
    let zero = zero_stage1_bound(np_n, 64.0, np_e / 8.0, 8.0);
    ok &= ((base.closed_form - zero) / zero).abs() <= 1e-9;

    // Measured persistent bytes against the bound.
    let mut measured_ok = true;
    for (g, t, e) in [(1, 1, 1), (4, 2, 2), (8, 2, 4), (8, 4, 2), (8, 1, 8), (6, 2, 3)] {
        let cfg = RunConfig {
            world_size: g,
            tensor_parallel: t,
            experts: e,
            layers: 2,
            hidden: 12,
            tokens_per_shard: 12,
            ..RunConfig::default()
        };
        let r = cfg.resolve().unwrap();
        let trainer = ParallelTrainer::new(r.setup()).unwrap();
        let memory = trainer.memory();
        measured_ok &= memory_check(&r, &memory).unwrap().is_empty();
        let (np_nonexp, np_exp) = local_param_counts(&r.model, &r.ted);
        if np_nonexp % r.ted.data_nonexp as u64 == 0 && np_exp % r.ted.data_exp as u64 == 0 {
            let bound = zero_stage1_bound(
                np_nonexp as f64,
                r.ted.data_nonexp as f64,
                np_exp as f64,
                r.ted.data_exp as f64,
            );
            measured_ok &= memory.iter().all(|m| m.persistent_bytes.total() as f64 == bound);
        }
        let _ = zero_stage1_rank_bytes;
    }
    ok &= measured_ok;

    let asym = max_base_model_asymptotic(16e9, 6);
    let ratio = asym / max_base_model_asymptotic(16e9, 1);
    ok &= asym == 24e9 && ratio == 6.0 && max_base_model(16e9, 512, 6, 128) < asym;
    outcome(
        ok,
        format!(
            "{checked} configs, max relative gap {worst:.2e}; measured bytes match: {measured_ok}; asymptotic {asym:.3e} ({ratio}x)"
        ),
    )
}

fn parameter_counts() -> Outcome {
    let big = ModelSpec::new(6_700_000_000, 16).unwrap().total_params() as f64;
    let small = ModelSpec::new(1_300_000_000, 4).unwrap().total_params() as f64;
    let ok = ((big - 40e9) / 40e9).abs() <= 0.01 && ((small - 2.6e9) / 2.6e9).abs() <= 0.01;
    outcome(ok, format!("6.7B x 16 -> {:.3e}; 1.3B x 4 -> {:.3e}", big, small))
}

fn prediction(s: &SweepSummary) -> Outcome {
    outcome(
        s.ledger_mismatches.is_empty(),
        if s.ledger_mismatches.is_empty() {
            format!("{} configs x 8 flag sets match byte for byte", s.configs)
        } else {
            format!("mismatches: {}", s.ledger_mismatches.join(", "))
        },
    )
}

fn planner_trend() -> Outcome {
    let gs = [32, 64, 128, 256, 512];
    let rows = plan_table(16e9, &gs, &PlanCaps::default(), &DEFAULT_BASE_SIZES).unwrap();
    let ratios: Vec<f64> = rows
        .iter()
        .filter(|r| r.framework == tedsim_core::cost::Framework::Ted)
        .map(|r| r.ratio.unwrap_or(f64::NAN))
        .collect();
    let ok = ratios.iter().all(|r| r.is_finite()) && ratios.windows(2).all(|w| w[1] >= w[0]);
    let shown: Vec<String> = gs.iter().zip(&ratios).map(|(g, r)| format!("G={g}: {r:.2}x")).collect();
    outcome(ok, shown.join(", "))
}

fn main() -> ExitCode {
    let sweep = run_sweep();
    let results: Vec<(&str, Outcome)> = vec![
        ("collective counts with and without cac", collective_counts()),
        ("dtd all-to-all volume", dtd_volume()),
        ("numerical equivalence sweep", numerical_equivalence(&sweep)),
        ("optimizer equivalences", optimizer_equivalence()),
        ("memory model", memory_model()),
        ("parameter counts", parameter_counts()),
        ("ledger prediction", prediction(&sweep)),
        ("planner trend", planner_trend()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {}: {name} ({})", i + 1, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
