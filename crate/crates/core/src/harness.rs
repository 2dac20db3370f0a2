//! Experiment runners behind the command-line front end: simulated
//! training, the equivalence suite and the capacity planner.

use serde::{Deserialize, Serialize};

use crate::cost::{
    local_param_counts, plan_table, predict_comm_volume, zero_stage1_rank_bytes, PlanCaps, PlanRow, DEFAULT_BASE_SIZES,
};
use crate::error::{Error, Result};
use crate::fabric::{LedgerRecord, LedgerSnapshot};
use crate::moe::{
    serial_reference_step, token_roundtrip_check, ExecFlags, MoeModelConfig, ParallelTrainer, ParamFamily, StepOutcome,
    TrainSetup,
};
use crate::topology::{derive_config, TedConfig};
use crate::zero::{MemoryLedger, TileConfig, DEFAULT_TILE_SIZE};

pub const REPORT_VERSION: &str = "tedsim-report/1";

/// Largest gap allowed between a parallel run and the serial reference.
pub const SERIAL_TOLERANCE: f64 = 1e-9;
/// Largest gap allowed when a single execution toggle is flipped.
pub const TOGGLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Verify,
    Plan,
    Ledger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFlags {
    pub dtd: bool,
    pub cac: bool,
    pub ckpt: bool,
    pub tiling: bool,
    pub tile_size: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub corrupt_drop_order: bool,
}

impl Default for RunFlags {
    fn default() -> Self {
        Self {
            dtd: false,
            cac: false,
            ckpt: false,
            tiling: true,
            tile_size: DEFAULT_TILE_SIZE,
            corrupt_drop_order: false,
        }
    }
}

/// A complete run description. Every field has a default, so a partial
/// JSON document is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world_size: usize,
    pub tensor_parallel: usize,
    pub experts: usize,
    pub layers: usize,
    pub hidden: usize,
    pub tokens_per_shard: usize,
    pub seed: u64,
    pub steps: u64,
    pub flags: RunFlags,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world_size: 4,
            tensor_parallel: 2,
            experts: 2,
            layers: 1,
            hidden: 8,
            tokens_per_shard: 8,
            seed: 0,
            steps: 1,
            flags: RunFlags::default(),
            mode: Mode::Train,
        }
    }
}

/// A config with its derived pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub model: MoeModelConfig,
    pub ted: TedConfig,
    pub flags: ExecFlags,
    pub tile: TileConfig,
}

impl Resolved {
    pub fn setup(&self) -> TrainSetup {
        let mut s = TrainSetup::new(self.model, self.ted, self.flags);
        s.tile = self.tile;
        s
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Export(e.to_string()))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let ted = derive_config(self.world_size, self.tensor_parallel, self.experts)?;
        let model = MoeModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            experts: self.experts,
            tokens_per_shard: self.tokens_per_shard,
            seed: self.seed,
        };
        let mut flags = ExecFlags::new(self.flags.dtd, self.flags.cac, self.flags.ckpt);
        flags.corrupt_drop_order = self.flags.corrupt_drop_order;
        model.validate(&ted, &flags)?;
        let tile = TileConfig {
            tiling: self.flags.tiling,
            tile_size: self.flags.tile_size,
        };
        tile.validate()?;
        if self.steps == 0 && self.mode != Mode::Plan {
            return Err(Error::config("steps must be at least 1"));
        }
        Ok(Resolved {
            model,
            ted,
            flags,
            tile,
        })
    }

    /// Non-fatal problems with the config.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.flags.cac && !self.flags.ckpt {
            w.push("cac requires ckpt; cac has no effect in this run".to_string());
        }
        w
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Short description of the configuration checked.
    pub subject: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_diff: Option<f64>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, subject: &str, passed: bool, diff: Option<f64>, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            subject: subject.to_string(),
            passed,
            max_abs_diff: diff,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: String,
    pub config: RunConfig,
    pub topology: TedConfig,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub losses: Vec<f64>,
    pub ledger: Vec<LedgerRecord>,
    pub memory: Vec<MemoryLedger>,
    pub equivalence: Vec<CheckResult>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Export(e.to_string()))
    }

    pub fn ledger_snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot::from_records(&self.ledger)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub report_version: String,
    pub config: RunConfig,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Export(e.to_string()))
    }
}

fn subject(model: &MoeModelConfig, ted: &TedConfig) -> String {
    format!(
        "G={} T={} E={} L={} h={} n={}",
        ted.world_size, ted.tensor_parallel, ted.experts, model.layers, model.hidden, model.tokens_per_shard
    )
}

fn flag_label(f: &ExecFlags) -> String {
    format!("dtd={} cac={} ckpt={}", f.dtd, f.cac, f.ckpt)
}

/// Runs `steps` training steps and reports losses, ledger and memory.
pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    let r = cfg.resolve()?;
    let mut trainer = ParallelTrainer::new(r.setup())?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut equivalence = Vec::new();
    for step in 0..cfg.steps {
        let batch = trainer.next_batch()?;
        let out = trainer.step()?;
        if step == 0 {
            let serial = serial_reference_step(&r.model, &batch)?;
            let diff = out.max_grad_diff(&serial)?.max((out.loss - serial.loss).abs());
            equivalence.push(CheckResult::new(
                "serial-equivalence",
                &subject(&r.model, &r.ted),
                diff <= SERIAL_TOLERANCE,
                Some(diff),
                "",
            ));
        }
        losses.push(out.loss);
    }
    Ok(RunReport {
        report_version: REPORT_VERSION.to_string(),
        config: *cfg,
        topology: r.ted,
        warnings: cfg.warnings(),
        losses,
        ledger: trainer.ledger().records(),
        memory: trainer.memory(),
        equivalence,
    })
}

/// Results of one step for every combination of (dtd, cac, ckpt).
#[derive(Debug, Clone, PartialEq)]
pub struct FlagSweep {
    /// Largest loss or gradient gap to the serial reference over all
    /// combinations.
    pub serial_diff: f64,
    /// Largest gap when flipping dtd, cac and ckpt individually.
    pub toggle_diff: [f64; 3],
    /// Combinations whose measured ledger differed from the prediction.
    pub ledger_mismatches: Vec<String>,
}

struct OneStep {
    outcome: StepOutcome,
    ledger: LedgerSnapshot,
}

fn one_step(model: &MoeModelConfig, ted: &TedConfig, flags: ExecFlags) -> Result<(OneStep, f64)> {
    let mut trainer = ParallelTrainer::new(TrainSetup::new(*model, *ted, flags))?;
    let batch = trainer.next_batch()?;
    let outcome = trainer.step()?;
    let serial = serial_reference_step(model, &batch)?;
    let diff = outcome.max_grad_diff(&serial)?.max((outcome.loss - serial.loss).abs());
    Ok((
        OneStep {
            outcome,
            ledger: trainer.ledger(),
        },
        diff,
    ))
}

pub fn flag_sweep(model: &MoeModelConfig, ted: &TedConfig) -> Result<FlagSweep> {
    let combos = ExecFlags::all_combinations();
    let mut runs = Vec::with_capacity(combos.len());
    let mut sweep = FlagSweep {
        serial_diff: 0.0,
        toggle_diff: [0.0; 3],
        ledger_mismatches: Vec::new(),
    };
    for flags in &combos {
        let (run, diff) = one_step(model, ted, *flags)?;
        sweep.serial_diff = sweep.serial_diff.max(diff);
        if run.ledger != predict_comm_volume(model, ted, flags, 1) {
            sweep.ledger_mismatches.push(flag_label(flags));
        }
        runs.push(run);
    }
    // Combination index bits: dtd = 1, cac = 2, ckpt = 4.
    for (i, run) in runs.iter().enumerate() {
        for (b, slot) in sweep.toggle_diff.iter_mut().enumerate() {
            let j = i ^ (1 << b);
            if j > i {
                *slot = slot.max(run.outcome.max_diff_to(&runs[j].outcome));
            }
        }
    }
    Ok(sweep)
}

fn all_params(trainer: &ParallelTrainer, ranks: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..ranks {
        if let Some(p) = trainer.params(r) {
            out.extend(p.flat_values(ParamFamily::NonExpert));
            out.extend(p.flat_values(ParamFamily::Expert));
        }
    }
    out
}

fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Tiled runs with `tile_size` in `sizes` against an untiled run, two steps
/// each. Returns the sizes that differed and the largest up-cast peak seen
/// for each size.
pub fn tiling_check(base: &Resolved, sizes: &[usize]) -> Result<(Vec<usize>, Vec<(usize, u64)>)> {
    let run = |tile: TileConfig| -> Result<(Vec<f64>, u64)> {
        let mut setup = base.setup();
        setup.tile = tile;
        let mut t = ParallelTrainer::new(setup)?;
        let mut peak = 0;
        for _ in 0..2 {
            peak = t.step()?.tile_stats.peak_upcast_bytes.max(peak);
        }
        Ok((all_params(&t, base.ted.world_size), peak))
    };
    let (reference, _) = run(TileConfig::untiled())?;
    let mut failed = Vec::new();
    let mut peaks = Vec::new();
    for &ts in sizes {
        let (got, peak) = run(TileConfig::tiled(ts))?;
        if !bitwise_equal(&got, &reference) {
            failed.push(ts);
        }
        peaks.push((ts, peak));
    }
    Ok((failed, peaks))
}

/// Persistent bytes of each rank against the closed-form ZeRO bound.
pub fn memory_check(r: &Resolved, memory: &[MemoryLedger]) -> Result<Vec<String>> {
    let (np_nonexp, np_exp) = local_param_counts(&r.model, &r.ted);
    let mut bad = Vec::new();
    for m in memory {
        let c = r.ted.coords(m.rank);
        let expected = zero_stage1_rank_bytes(
            np_nonexp,
            r.ted.data_nonexp,
            r.ted.shard_index(m.rank),
            np_exp,
            r.ted.data_exp,
            c.data,
        )?;
        if m.persistent_bytes.total() != expected {
            bad.push(format!("rank {}: {} vs {expected}", m.rank, m.persistent_bytes.total()));
        }
    }
    Ok(bad)
}

/// The full invariant suite for one configuration.
pub fn verify_config(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let r = cfg.resolve()?;
    let subj = subject(&r.model, &r.ted);
    let mut checks = Vec::new();

    let sweep = flag_sweep(&r.model, &r.ted)?;
    checks.push(CheckResult::new(
        "serial-equivalence",
        &subj,
        sweep.serial_diff <= SERIAL_TOLERANCE,
        Some(sweep.serial_diff),
        "",
    ));
    for (name, diff) in ["dtd-toggle", "cac-toggle", "ckpt-toggle"].iter().zip(sweep.toggle_diff) {
        checks.push(CheckResult::new(name, &subj, diff <= TOGGLE_TOLERANCE, Some(diff), ""));
    }
    checks.push(CheckResult::new(
        "ledger-vs-prediction",
        &subj,
        sweep.ledger_mismatches.is_empty(),
        None,
        sweep.ledger_mismatches.join("; "),
    ));

    let ts_sizes = [1, 7, DEFAULT_TILE_SIZE];
    let (failed, peaks) = tiling_check(&r, &ts_sizes)?;
    let peak_ok = peaks.iter().all(|&(ts, p)| p <= 4 * ts as u64);
    checks.push(CheckResult::new(
        "tiled-vs-untiled",
        &subj,
        failed.is_empty() && peak_ok,
        None,
        if failed.is_empty() {
            String::new()
        } else {
            format!("tile sizes {failed:?} differ")
        },
    ));

    let mut setup = r.setup();
    setup.shadow_replicated = true;
    let mut trainer = ParallelTrainer::new(setup)?;
    let mut mismatches = 0;
    for _ in 0..2 {
        mismatches += trainer.step()?.replica_mismatches;
    }
    checks.push(CheckResult::new(
        "sharded-vs-replicated",
        &subj,
        mismatches == 0,
        None,
        if mismatches == 0 {
            String::new()
        } else {
            format!("{mismatches} elements differ")
        },
    ));

    let bad = memory_check(&r, &trainer.memory())?;
    checks.push(CheckResult::new("memory-vs-bound", &subj, bad.is_empty(), None, bad.join("; ")));

    let rt = token_roundtrip_check(&r.ted, r.model.tokens_per_shard, cfg.seed, &r.flags)?;
    checks.push(CheckResult::new(
        "token-conservation",
        &format!("{subj} {}", flag_label(&r.flags)),
        rt.passed(),
        None,
        rt.failures.join("; "),
    ));

    if cfg.flags.cac && !cfg.flags.ckpt {
        let (with, _) = one_step(&r.model, &r.ted, r.flags)?;
        let mut off = r.flags;
        off.cac = false;
        let (without, _) = one_step(&r.model, &r.ted, off)?;
        let same = with.outcome.max_diff_to(&without.outcome) == 0.0 && with.ledger == without.ledger;
        checks.push(CheckResult::new("cac-without-ckpt-is-noop", &subj, same, None, ""));
    }

    // The configured run itself, with the requested flags.
    let (run, diff) = one_step(&r.model, &r.ted, r.flags)?;
    let predicted = predict_comm_volume(&r.model, &r.ted, &r.flags, 1);
    checks.push(CheckResult::new(
        "configured-run",
        &format!("{subj} {}", flag_label(&r.flags)),
        diff <= SERIAL_TOLERANCE && run.ledger == predicted,
        Some(diff),
        "",
    ));
    Ok(checks)
}

/// Small configurations covered by the built-in sweep: G ∈ {1, 2, 4, 8}
/// with every valid (tensor, expert) split, L ∈ {1, 2}, h ∈ {8, 16},
/// E ∈ {1, 2, 4}, n ∈ {8, 16}.
pub fn sweep_configs() -> Vec<(MoeModelConfig, TedConfig)> {
    let mut out = Vec::new();
    for g in [1, 2, 4, 8] {
        for t in [1, 2, 4, 8] {
            for e in [1, 2, 4] {
                let Ok(ted) = derive_config(g, t, e) else { continue };
                for layers in [1, 2] {
                    for hidden in [8, 16] {
                        for tokens in [8, 16] {
                            let model = MoeModelConfig {
                                layers,
                                hidden,
                                experts: e,
                                tokens_per_shard: tokens,
                                seed: 17,
                            };
                            if model.validate(&ted, &ExecFlags::new(true, true, true)).is_ok() {
                                out.push((model, ted));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Serial equivalence, toggles and ledger prediction over
/// [`sweep_configs`].
pub fn verify_sweep() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    for (model, ted) in sweep_configs() {
        let subj = subject(&model, &ted);
        let s = flag_sweep(&model, &ted)?;
        let toggle = s.toggle_diff.iter().copied().fold(0.0, f64::max);
        checks.push(CheckResult::new(
            "sweep-serial-equivalence",
            &subj,
            s.serial_diff <= SERIAL_TOLERANCE,
            Some(s.serial_diff),
            "",
        ));
        checks.push(CheckResult::new("sweep-toggles", &subj, toggle <= TOGGLE_TOLERANCE, Some(toggle), ""));
        checks.push(CheckResult::new(
            "sweep-ledger-vs-prediction",
            &subj,
            s.ledger_mismatches.is_empty(),
            None,
            s.ledger_mismatches.join("; "),
        ));
    }
    Ok(checks)
}

/// The configured suite followed by the built-in sweep.
pub fn verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let mut checks = verify_config(cfg)?;
    checks.extend(verify_sweep()?);
    Ok(VerifyReport {
        report_version: REPORT_VERSION.to_string(),
        config: *cfg,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Planner arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArgs {
    pub memory_bytes: f64,
    pub world_sizes: Vec<usize>,
    pub caps: PlanCaps,
    pub base_sizes: Vec<u64>,
}

impl Default for PlanArgs {
    fn default() -> Self {
        Self {
            memory_bytes: 16e9,
            world_sizes: vec![32, 64, 128, 256, 512],
            caps: PlanCaps::default(),
            base_sizes: DEFAULT_BASE_SIZES.to_vec(),
        }
    }
}

pub fn plan(args: &PlanArgs) -> Result<Vec<PlanRow>> {
    if args.world_sizes.is_empty() || args.base_sizes.is_empty() {
        return Err(Error::config("planner needs at least one GPU count and one base size"));
    }
    let mut bases = args.base_sizes.clone();
    bases.sort_unstable();
    plan_table(args.memory_bytes, &args.world_sizes, &args.caps, &bases)
}
