use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::pool::run_indexed;
use super::CliError;
use crate::costmodel::{layer_flops, model_flops, pareto_indices, write_rows, CostRow, CostSubject, DEFAULT_ELEMENT_SIZE};
use crate::hybrid::{build_schedule, cache_report, write_checkpoint, Checkpoint, HybridConfig, HybridModel, Ratio};
use crate::mixers::{lattice_trial, oracle_trial, MixerKind, TrialBounds};
use crate::tasks::{Split, TaskConfig, TaskKind};
use crate::trainer::{train, OptimizerHyperparams, TrainOptions, TrainReport};

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const LATTICE_TOLERANCE: f64 = 1e-12;

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(io(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivConfig {
    pub kinds: Vec<MixerKind>,
    /// Longest sequence drawn per trial.
    pub len: usize,
    /// Widest head drawn per trial.
    pub head_dim: usize,
    pub heads: usize,
    pub trials: usize,
    pub lattice_trials: usize,
    /// Perturb one state update in every scan (negative control).
    pub fault: bool,
}

impl Default for EquivConfig {
    fn default() -> Self {
        Self {
            kinds: MixerKind::ALL.to_vec(),
            len: 64,
            head_dim: 8,
            heads: 2,
            trials: 100,
            lattice_trials: 50,
            fault: false,
        }
    }
}

#[derive(Serialize)]
struct EquivRow {
    check: String,
    trials: usize,
    max_rel_error: f64,
    tolerance: f64,
    pass: bool,
}

pub fn equiv(config: &EquivConfig, seed: u64, out: &Path, threads: usize) -> Result<bool, CliError> {
    if config.kinds.is_empty() {
        return Err(CliError::Usage("kind list is empty".into()));
    }
    if config.trials == 0 || config.len == 0 || config.head_dim == 0 || config.heads == 0 {
        return Err(CliError::Config("trials, len, head_dim and heads must be positive".into()));
    }
    let bounds = TrialBounds {
        max_len: config.len,
        max_head_dim: config.head_dim,
        max_heads: config.heads,
    };
    let per_kind = run_indexed(config.kinds.len(), threads, |i| {
        let kind = config.kinds[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((kind as u64 + 1) << 32));
        (0..config.trials).try_fold(0.0f64, |worst, _| {
            oracle_trial(kind, bounds, config.fault, &mut rng).map(|e| worst.max(e))
        })
    });
    let mut rows = Vec::new();
    for (kind, result) in config.kinds.iter().zip(per_kind) {
        let err = result.unwrap_or(f64::INFINITY);
        rows.push(EquivRow {
            check: kind.to_string(),
            trials: config.trials,
            max_rel_error: err,
            tolerance: ORACLE_TOLERANCE,
            pass: err <= ORACLE_TOLERANCE,
        });
    }
    if config.lattice_trials > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = [0.0f64; 3];
        for _ in 0..config.lattice_trials {
            let len = rng.gen_range(1..=config.len);
            let d = rng.gen_range(1..=config.head_dim);
            match lattice_trial(len, d, &mut rng) {
                Ok(e) => {
                    for (w, v) in worst.iter_mut().zip([e.gla_retnet, e.mamba2_retnet, e.hgrn2_gla]) {
                        *w = w.max(v);
                    }
                }
                Err(_) => worst = [f64::INFINITY; 3],
            }
        }
        for (name, err) in ["lattice:gla_retnet", "lattice:mamba2_retnet", "lattice:hgrn2_gla"].iter().zip(worst) {
            rows.push(EquivRow {
                check: name.to_string(),
                trials: config.lattice_trials,
                max_rel_error: err,
                tolerance: LATTICE_TOLERANCE,
                pass: err <= LATTICE_TOLERANCE,
            });
        }
    }
    let path = out.join("equiv.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
        println!("{:<24} max_rel_error {:.3e} {}", r.check, r.max_rel_error, if r.pass { "ok" } else { "FAIL" });
    }
    w.flush().map_err(io(&path))?;
    Ok(rows.iter().all(|r| r.pass))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsConfig {
    /// Mixer kinds and/or `softmax`.
    pub kinds: Vec<CostSubject>,
    pub lens: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    /// When non-empty, also emit whole-model rows for every mixer kind.
    pub ratios: Vec<Ratio>,
    pub blocks: usize,
    pub reference_ratio: usize,
    pub element_size: usize,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        let mut kinds: Vec<CostSubject> = MixerKind::ALL.iter().map(|&k| CostSubject::Mixer(k)).collect();
        kinds.push(CostSubject::Softmax);
        Self {
            kinds,
            lens: (8..=15).map(|p| 1usize << p).collect(),
            d_model: 2048,
            heads: 4,
            ratios: Vec::new(),
            blocks: 1,
            reference_ratio: 3,
            element_size: DEFAULT_ELEMENT_SIZE,
        }
    }
}

fn model_config(kind: MixerKind, ratio: Ratio, blocks: usize, reference_ratio: usize, d_model: usize, heads: usize, len: usize) -> HybridConfig {
    HybridConfig {
        kind,
        ratio,
        blocks,
        reference_ratio,
        d_model,
        heads,
        seq_len: len.max(1),
        vocab: 1,
        mlp_mult: 1,
    }
}

/// Per-layer rows (`label = layer`) for every subject and length, then
/// whole-model rows (`label = model`) for every mixer kind, ratio and length.
pub fn flops_rows(config: &FlopsConfig) -> Result<Vec<CostRow>, CliError> {
    if config.kinds.is_empty() || config.lens.is_empty() {
        return Err(CliError::Usage("kinds and lens must be non-empty".into()));
    }
    let cfg_err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
    let mut rows = Vec::new();
    for &subject in &config.kinds {
        for &len in &config.lens {
            let heads = match subject {
                CostSubject::Mixer(k) if k.single_head() => 1,
                _ => config.heads,
            };
            let (tok, seq) = layer_flops(subject, len, config.d_model, heads).map_err(|e| cfg_err(&e))?;
            let kv = match subject {
                CostSubject::Softmax => 2 * (len * config.d_model * config.element_size) as u128,
                CostSubject::Mixer(_) => 0,
            };
            rows.push(CostRow {
                label: "layer".into(),
                ratio: "-".into(),
                kind: subject.to_string(),
                len,
                d_model: config.d_model,
                heads,
                per_token_flops: tok.truncated(),
                per_sequence_flops: seq.truncated(),
                kv_cache_bytes: kv,
                score: None,
            });
        }
    }
    for &subject in &config.kinds {
        let CostSubject::Mixer(kind) = subject else { continue };
        for &ratio in &config.ratios {
            for &len in &config.lens {
                let hc = model_config(kind, ratio, config.blocks, config.reference_ratio, config.d_model, config.heads, len);
                hc.validate().map_err(|e| cfg_err(&e))?;
                let report = model_flops(&hc, len, config.element_size).map_err(|e| cfg_err(&e))?;
                rows.push(CostRow {
                    label: "model".into(),
                    ratio: ratio.to_string(),
                    kind: kind.to_string(),
                    len,
                    d_model: config.d_model,
                    heads: config.heads,
                    per_token_flops: report.per_token_flops,
                    per_sequence_flops: report.per_sequence_flops,
                    kv_cache_bytes: report.kv_cache_bytes,
                    score: None,
                });
            }
        }
    }
    Ok(rows)
}

pub fn flops(config: &FlopsConfig, out: &Path) -> Result<(), CliError> {
    let rows = flops_rows(config)?;
    let path = out.join("flops.csv");
    write_rows(create(&path)?, &rows).map_err(csv_err)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

/// Model shape shared by every cell of a sweep; kind and ratio vary per
/// cell and vocabulary and length come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub reference_ratio: usize,
    pub mlp_mult: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 48,
            heads: 6,
            blocks: 1,
            reference_ratio: 3,
            mlp_mult: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kinds: Vec<MixerKind>,
    pub ratios: Vec<Ratio>,
    pub model: ModelShape,
    pub task: TaskConfig,
    pub optimizer: OptimizerHyperparams,
    pub options: TrainOptions,
    pub element_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kinds: vec![MixerKind::Hgrn2],
            ratios: vec![Ratio::Mixed(3), Ratio::PureLinear],
            model: ModelShape::default(),
            task: TaskConfig {
                task: TaskKind::KvRecall,
                vocab: 24,
                seq_len: 31,
                pairs: 10,
                queries: 10,
                min_pairs: None,
                corpus: None,
                split: Split::Train,
                examples: 1,
                seed: 0,
            },
            optimizer: OptimizerHyperparams {
                weight_decay: 0.0,
                ..OptimizerHyperparams::new(3e-3, 3e-4, 1500)
            },
            options: TrainOptions {
                batch_size: 16,
                eval_examples: 256,
                fixed_batch: false,
            },
            element_size: DEFAULT_ELEMENT_SIZE,
        }
    }
}

impl SweepConfig {
    fn cells(&self) -> Vec<(MixerKind, Ratio)> {
        self.kinds
            .iter()
            .flat_map(|&k| self.ratios.iter().map(move |&r| (k, r)))
            .collect()
    }

    fn hybrid(&self, kind: MixerKind, ratio: Ratio) -> Result<HybridConfig, CliError> {
        let vocab = self.task.effective_vocab().map_err(|e| CliError::Config(e.to_string()))?;
        let m = &self.model;
        let hc = HybridConfig {
            kind,
            ratio,
            blocks: m.blocks,
            reference_ratio: m.reference_ratio,
            d_model: m.d_model,
            heads: m.heads,
            seq_len: self.task.seq_len,
            vocab,
            mlp_mult: m.mlp_mult,
        };
        hc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(hc)
    }

    fn validate(&self) -> Result<Vec<HybridConfig>, CliError> {
        if self.kinds.is_empty() || self.ratios.is_empty() {
            return Err(CliError::Usage("kinds and ratios must be non-empty".into()));
        }
        self.task.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.optimizer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.cells().into_iter().map(|(k, r)| self.hybrid(k, r)).collect()
    }
}

pub fn cell_name(kind: MixerKind, ratio: Ratio) -> String {
    format!("{kind}_{}", ratio.to_string().replace(':', "-"))
}

/// Higher is better: accuracy for recall and copy, negative loss for LM.
pub fn cell_score(task: TaskKind, report: &TrainReport) -> f64 {
    match task {
        TaskKind::CharLm => -report.final_metrics.token_loss,
        _ => report.final_metrics.accuracy,
    }
}

/// Report JSON without wall time, so reruns produce identical files.
fn stable_report(report: &TrainReport) -> Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_time_secs");
    }
    v
}

#[derive(Serialize)]
struct SummaryRow {
    cell: String,
    kind: String,
    ratio: String,
    status: String,
    param_count: Option<usize>,
    final_train_loss: Option<f64>,
    accuracy: Option<f64>,
    token_loss: Option<f64>,
    error: String,
}

pub struct SweepOutcome {
    pub configs: Vec<HybridConfig>,
    pub results: Vec<Result<TrainReport, String>>,
}

/// Trains every (kind, ratio) cell into `out/cells/<cell>/` and writes
/// `out/summary.csv`. A failed cell is recorded and the sweep continues.
pub fn sweep(config: &SweepConfig, seed: u64, out: &Path, threads: usize) -> Result<SweepOutcome, CliError> {
    let configs = config.validate()?;
    let cells_dir = out.join("cells");
    let results = run_indexed(configs.len(), threads, |i| -> Result<TrainReport, String> {
        let hc = &configs[i];
        let dir = cells_dir.join(cell_name(hc.kind, hc.ratio));
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let outcome = train(hc, &config.task, &config.optimizer, &config.options, seed);
        match outcome {
            Ok((report, model)) => {
                write_json(&dir.join("report.json"), &stable_report(&report)).map_err(|e| e.to_string())?;
                let mut w = create(&dir.join("model.ckpt")).map_err(|e| e.to_string())?;
                write_checkpoint(&mut w, &Checkpoint::from_model(&model)).map_err(|e| e.to_string())?;
                let _ = fs::remove_file(dir.join("error.txt"));
                Ok(report)
            }
            Err(e) => {
                let msg = e.to_string();
                let _ = fs::write(dir.join("error.txt"), format!("{msg}\n"));
                Err(msg)
            }
        }
    });
    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for (hc, r) in configs.iter().zip(&results) {
        let row = match r {
            Ok(rep) => SummaryRow {
                cell: cell_name(hc.kind, hc.ratio),
                kind: hc.kind.to_string(),
                ratio: hc.ratio.to_string(),
                status: "ok".into(),
                param_count: Some(rep.param_count),
                final_train_loss: rep.losses.last().copied(),
                accuracy: Some(rep.final_metrics.accuracy),
                token_loss: Some(rep.final_metrics.token_loss),
                error: String::new(),
            },
            Err(e) => SummaryRow {
                cell: cell_name(hc.kind, hc.ratio),
                kind: hc.kind.to_string(),
                ratio: hc.ratio.to_string(),
                status: "failed".into(),
                param_count: None,
                final_train_loss: None,
                accuracy: None,
                token_loss: None,
                error: e.clone(),
            },
        };
        match r {
            Ok(rep) => println!(
                "{:<28} ok  accuracy {:.3} token_loss {:.4}",
                row.cell, rep.final_metrics.accuracy, rep.final_metrics.token_loss
            ),
            Err(e) => println!("{:<28} FAILED {e}", row.cell),
        }
        w.serialize(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io(&path))?;
    Ok(SweepOutcome { configs, results })
}

/// Grid rows (one per cell, failed cells without a score) and the indices
/// of the frontier among the scored rows, by per-sequence FLOPs at the task
/// length.
pub fn pareto_grid(config: &SweepConfig, outcome: &SweepOutcome) -> Result<(Vec<CostRow>, Vec<usize>), CliError> {
    let len = config.task.seq_len;
    let mut rows = Vec::new();
    for (hc, r) in outcome.configs.iter().zip(&outcome.results) {
        let cost = model_flops(hc, len, config.element_size).map_err(|e| CliError::Config(e.to_string()))?;
        rows.push(CostRow {
            label: cell_name(hc.kind, hc.ratio),
            ratio: hc.ratio.to_string(),
            kind: hc.kind.to_string(),
            len,
            d_model: hc.d_model,
            heads: hc.heads,
            per_token_flops: cost.per_token_flops,
            per_sequence_flops: cost.per_sequence_flops,
            kv_cache_bytes: cost.kv_cache_bytes,
            score: r.as_ref().ok().map(|rep| cell_score(config.task.task, rep)),
        });
    }
    let scored: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].score.is_some()).collect();
    let points: Vec<(f64, f64)> = scored
        .iter()
        .map(|&i| (rows[i].per_sequence_flops as f64, rows[i].score.expect("filtered")))
        .collect();
    let front = pareto_indices(&points).map_err(|e| CliError::Failure(e.to_string()))?;
    Ok((rows, front.into_iter().map(|j| scored[j]).collect()))
}

pub fn pareto(config: &SweepConfig, seed: u64, out: &Path, threads: usize) -> Result<bool, CliError> {
    let outcome = sweep(config, seed, out, threads)?;
    let (rows, front) = pareto_grid(config, &outcome)?;
    let grid_path = out.join("grid.csv");
    write_rows(create(&grid_path)?, &rows).map_err(csv_err)?;
    let frontier: Vec<CostRow> = front.iter().map(|&i| rows[i].clone()).collect();
    let front_path = out.join("frontier.csv");
    write_rows(create(&front_path)?, &frontier).map_err(csv_err)?;
    println!("frontier: {}", frontier.iter().map(|r| r.label.as_str()).collect::<Vec<_>>().join(", "));
    Ok(outcome.results.iter().all(|r| r.is_ok()))
}

pub fn train_cmd(config: &SweepConfig, seed: u64, out: &Path, threads: usize) -> Result<bool, CliError> {
    let outcome = sweep(config, seed, out, threads)?;
    Ok(outcome.results.iter().all(|r| r.is_ok()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub model: HybridConfig,
    /// Lengths to cost; the model's own `seq_len` when empty.
    pub lens: Vec<usize>,
    pub element_size: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            model: HybridConfig {
                kind: MixerKind::GatedDeltaNet,
                ratio: Ratio::Mixed(3),
                blocks: 6,
                reference_ratio: 3,
                d_model: 1024,
                heads: 8,
                seq_len: 2048,
                vocab: 32000,
                mlp_mult: 4,
            },
            lens: Vec::new(),
            element_size: DEFAULT_ELEMENT_SIZE,
        }
    }
}

#[derive(Serialize)]
struct LengthReport {
    len: usize,
    per_token_flops: u128,
    per_sequence_flops: u128,
    kv_cache_bytes: u128,
    state_elements: u128,
    exact: bool,
}

/// Static description of one model: layer schedule, parameter count, and
/// cost and cache at each requested length.
pub fn report(config: &ReportConfig, out: &Path) -> Result<(), CliError> {
    let hc = &config.model;
    let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
    hc.validate().map_err(|e| cfg(&e))?;
    let schedule = build_schedule(hc).map_err(|e| cfg(&e))?;
    let param_count = HybridModel::param_count_for(hc).map_err(|e| cfg(&e))?;
    let lens = if config.lens.is_empty() { vec![hc.seq_len] } else { config.lens.clone() };
    let mut per_len = Vec::new();
    for len in lens {
        let cost = model_flops(hc, len, config.element_size).map_err(|e| cfg(&e))?;
        let cache = cache_report(hc, len, config.element_size).map_err(|e| cfg(&e))?;
        per_len.push(LengthReport {
            len,
            per_token_flops: cost.per_token_flops,
            per_sequence_flops: cost.per_sequence_flops,
            kv_cache_bytes: cost.kv_cache_bytes,
            state_elements: cache.state_elements,
            exact: cost.exact,
        });
    }
    println!("schedule {schedule} ({} layers), {param_count} parameters", schedule.len());
    for r in &per_len {
        println!(
            "L={:<7} per_token {:>14} per_sequence {:>20} kv_cache_bytes {:>14}",
            r.len, r.per_token_flops, r.per_sequence_flops, r.kv_cache_bytes
        );
    }
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "schedule": schedule.to_string(),
            "depth": schedule.len(),
            "param_count": param_count,
            "lengths": per_len,
        }),
    )
}
