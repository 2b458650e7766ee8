//! Latency and operation-count benchmarks for prefill and decode.
//!
//! Wall-clock numbers are machine-specific and noisy, so every run also
//! records the deterministic count of f32 operations the memory module
//! performed; the complexity claims (linear prefill cost, constant per-step
//! streaming cost, per-step recompute cost growing with the prefix) are
//! asserted on those counts, while timings are reported as-is.
//!
//! Measurement loops are strictly single-threaded; the harness refuses to
//! run two benchmarks concurrently in one process.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::NgmConfig;
use crate::decoder::{argmax, Decoder, FeatureMode, NgmRunner, ToyDecoderConfig};
use crate::error::{Error, Result};
use crate::ngram::TokenId;
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Prefill => write!(f, "prefill"),
            Phase::Decode => write!(f, "decode"),
        }
    }
}

/// Whether the memory module is off, recomputing n-gram features over the
/// full prefix each step, or streaming them incrementally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgmMode {
    Off,
    Recompute,
    Streaming,
}

impl std::fmt::Display for NgmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NgmMode::Off => write!(f, "off"),
            NgmMode::Recompute => write!(f, "recompute"),
            NgmMode::Streaming => write!(f, "streaming"),
        }
    }
}

impl std::str::FromStr for NgmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(NgmMode::Off),
            "recompute" => Ok(NgmMode::Recompute),
            "streaming" => Ok(NgmMode::Streaming),
            other => Err(Error::Config(format!(
                "unknown ngm mode {other:?} (expected off, recompute, or streaming)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub prompt_lengths: Vec<usize>,
    pub runs_per_point: usize,
    pub warmup_runs: usize,
    pub decode_tokens: usize,
    pub modes: Vec<NgmMode>,
    pub prompt_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prompt_lengths: vec![128, 256, 512, 1024, 2048],
            runs_per_point: 20,
            warmup_runs: 3,
            decode_tokens: 64,
            modes: vec![NgmMode::Off, NgmMode::Recompute, NgmMode::Streaming],
            prompt_seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs_per_point < 2 {
            return Err(Error::Config(
                "runs_per_point must be >= 2 (std needs at least two samples)".into(),
            ));
        }
        if self.prompt_lengths.is_empty() {
            return Err(Error::Config("prompt_lengths must be nonempty".into()));
        }
        if self.decode_tokens == 0 {
            return Err(Error::Config("decode_tokens must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("at least one ngm mode is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.modes {
            if !seen.insert(format!("{m}")) {
                return Err(Error::Config(format!("duplicate ngm mode {m}")));
            }
        }
        Ok(())
    }
}

/// One timed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub phase: Phase,
    pub mode: NgmMode,
    pub prompt_len: usize,
    pub run: usize,
    pub elapsed_us: f64,
    pub ngm_ops: u64,
}

/// Aggregate per (phase, mode, prompt length). For the decode phase the
/// mean/std and op counts are per generated token; for prefill they are per
/// pass, as `unit` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummaryRow {
    pub phase: Phase,
    pub mode: NgmMode,
    pub prompt_len: usize,
    pub unit: String,
    pub mean_us: f64,
    pub std_us: f64,
    pub mean_ngm_ops: f64,
    /// `(latency_mode - latency_off) / latency_off` against the off-mode
    /// baseline at the same phase and prompt length.
    pub overhead: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        MachineInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSeeds {
    pub prompt_seed: u64,
    pub decoder_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRunConfig {
    pub bench: BenchConfig,
    pub ngm: NgmConfig,
    pub decoder: ToyDecoderConfig,
}

/// Full benchmark report: machine info, seeds, config, every raw timing,
/// and the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub kind: String,
    pub machine: MachineInfo,
    pub seeds: BenchSeeds,
    pub config: BenchRunConfig,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummaryRow>,
}

static BENCH_ACTIVE: AtomicBool = AtomicBool::new(false);

struct BenchGuard;

impl BenchGuard {
    fn acquire() -> Result<Self> {
        BENCH_ACTIVE
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .map_err(|_| {
                Error::Config(
                    "a benchmark is already running in this process; \
                     measurement loops are single-threaded"
                        .into(),
                )
            })?;
        Ok(BenchGuard)
    }
}

impl Drop for BenchGuard {
    fn drop(&mut self) {
        BENCH_ACTIVE.store(false, Ordering::SeqCst);
    }
}

fn bench_prompt(len: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = DetRng::derive(seed, len as u64);
    (0..len).map(|_| rng.below(vocab as u64) as TokenId).collect()
}

fn runner_for(decoder: &Decoder, ngm: &NgmConfig, mode: NgmMode) -> Result<Option<NgmRunner>> {
    match mode {
        NgmMode::Off => Ok(None),
        NgmMode::Recompute => Ok(Some(NgmRunner::from_config(
            ngm.clone(),
            decoder.config().num_layers,
            FeatureMode::Recompute,
        )?)),
        NgmMode::Streaming => Ok(Some(NgmRunner::from_config(
            ngm.clone(),
            decoder.config().num_layers,
            FeatureMode::Streaming,
        )?)),
    }
}

fn prefill_once(
    decoder: &Decoder,
    prompt: &[TokenId],
    ngm: &NgmConfig,
    mode: NgmMode,
) -> Result<(f64, u64)> {
    let mut runner = runner_for(decoder, ngm, mode)?;
    let start = Instant::now();
    decoder.prefill(prompt, runner.as_mut(), false)?;
    let elapsed = start.elapsed().as_secs_f64() * 1e6;
    Ok((elapsed, runner.map_or(0, |r| r.ngm_ops())))
}

/// Prefill latency and op counts for every (prompt length, mode) pair.
pub fn bench_prefill(
    decoder: &Decoder,
    config: &BenchConfig,
    ngm: &NgmConfig,
) -> Result<Vec<BenchRow>> {
    let _guard = BenchGuard::acquire()?;
    config.validate()?;
    ngm.validate()?;
    let mut rows = Vec::new();
    for &len in &config.prompt_lengths {
        if len > decoder.config().max_context {
            return Err(Error::Context(format!(
                "prompt length {len} exceeds max context {}",
                decoder.config().max_context
            )));
        }
        let prompt = bench_prompt(len, decoder.config().vocab_size, config.prompt_seed);
        for &mode in &config.modes {
            for _ in 0..config.warmup_runs {
                prefill_once(decoder, &prompt, ngm, mode)?;
            }
            for run in 0..config.runs_per_point {
                let (elapsed_us, ngm_ops) = prefill_once(decoder, &prompt, ngm, mode)?;
                rows.push(BenchRow {
                    phase: Phase::Prefill,
                    mode,
                    prompt_len: len,
                    run,
                    elapsed_us,
                    ngm_ops,
                });
            }
        }
    }
    Ok(rows)
}

/// Greedy-decodes `decode_tokens` tokens from a warmed cache clone and
/// returns (elapsed us, memory-module ops, generated tokens).
fn decode_run(
    decoder: &Decoder,
    prompt: &[TokenId],
    warm_cache: &crate::decoder::KvCache,
    warm_runner: &Option<NgmRunner>,
    warm_logits: &[f32],
    decode_tokens: usize,
) -> Result<(f64, u64, Vec<TokenId>)> {
    let mut cache = warm_cache.clone();
    let mut runner = warm_runner.clone();
    if let Some(r) = runner.as_mut() {
        r.reset_ops();
    }
    let mut prefix = prompt.to_vec();
    let mut logits_row = warm_logits.to_vec();
    let mut tokens = Vec::with_capacity(decode_tokens);

    let start = Instant::now();
    for _ in 0..decode_tokens {
        let next = argmax(&logits_row);
        tokens.push(next);
        prefix.push(next);
        let logits = decoder.decode_step(&mut cache, &[next], &prefix, runner.as_mut())?;
        logits_row = logits.last().to_vec();
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e6;
    Ok((elapsed, runner.map_or(0, |r| r.ngm_ops()), tokens))
}

/// Per-token decode latency and op counts after prefilling each prompt
/// length, for every configured mode. Row timings cover the whole
/// `decode_tokens` loop; the summary converts to per-token figures.
pub fn bench_decode(
    decoder: &Decoder,
    config: &BenchConfig,
    ngm: &NgmConfig,
) -> Result<Vec<BenchRow>> {
    let _guard = BenchGuard::acquire()?;
    config.validate()?;
    ngm.validate()?;
    let mut rows = Vec::new();
    for &len in &config.prompt_lengths {
        if len + config.decode_tokens > decoder.config().max_context {
            return Err(Error::Context(format!(
                "prompt length {len} plus {} decode tokens exceeds max context {}",
                config.decode_tokens,
                decoder.config().max_context
            )));
        }
        let prompt = bench_prompt(len, decoder.config().vocab_size, config.prompt_seed);
        for &mode in &config.modes {
            let mut warm_runner = runner_for(decoder, ngm, mode)?;
            let prefill = decoder.prefill(&prompt, warm_runner.as_mut(), false)?;
            let warm_logits = prefill.logits.last().to_vec();

            for _ in 0..config.warmup_runs {
                decode_run(
                    decoder,
                    &prompt,
                    &prefill.cache,
                    &warm_runner,
                    &warm_logits,
                    config.decode_tokens,
                )?;
            }
            for run in 0..config.runs_per_point {
                let (elapsed_us, ngm_ops, _) = decode_run(
                    decoder,
                    &prompt,
                    &prefill.cache,
                    &warm_runner,
                    &warm_logits,
                    config.decode_tokens,
                )?;
                rows.push(BenchRow {
                    phase: Phase::Decode,
                    mode,
                    prompt_len: len,
                    run,
                    elapsed_us,
                    ngm_ops,
                });
            }
        }
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates raw rows; warmups were never recorded, so every row counts.
pub fn summarize(config: &BenchConfig, rows: &[BenchRow]) -> Vec<BenchSummaryRow> {
    let mut summary = Vec::new();
    for phase in [Phase::Prefill, Phase::Decode] {
        let per_token = match phase {
            Phase::Prefill => 1.0,
            Phase::Decode => config.decode_tokens as f64,
        };
        let unit = match phase {
            Phase::Prefill => "per_prefill",
            Phase::Decode => "per_token",
        };
        for &len in &config.prompt_lengths {
            let base: Option<f64> = {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.phase == phase && r.prompt_len == len && r.mode == NgmMode::Off)
                    .map(|r| r.elapsed_us / per_token)
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            for &mode in &config.modes {
                let group: Vec<&BenchRow> = rows
                    .iter()
                    .filter(|r| r.phase == phase && r.prompt_len == len && r.mode == mode)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let times: Vec<f64> = group.iter().map(|r| r.elapsed_us / per_token).collect();
                let (mean_us, std_us) = mean_std(&times);
                let mean_ngm_ops = group.iter().map(|r| r.ngm_ops as f64).sum::<f64>()
                    / group.len() as f64
                    / per_token;
                let overhead = match (mode, base) {
                    (NgmMode::Off, _) => None,
                    (_, Some(b)) if b > 0.0 => Some((mean_us - b) / b),
                    _ => None,
                };
                summary.push(BenchSummaryRow {
                    phase,
                    mode,
                    prompt_len: len,
                    unit: unit.to_string(),
                    mean_us,
                    std_us,
                    mean_ngm_ops,
                    overhead,
                });
            }
        }
    }
    summary
}

pub fn build_report(
    decoder: &Decoder,
    config: &BenchConfig,
    ngm: &NgmConfig,
    rows: Vec<BenchRow>,
) -> LatencyReport {
    let summary = summarize(config, &rows);
    LatencyReport {
        kind: "bench".to_string(),
        machine: MachineInfo::current(),
        seeds: BenchSeeds {
            prompt_seed: config.prompt_seed,
            decoder_seed: decoder.config().seed,
        },
        config: BenchRunConfig {
            bench: config.clone(),
            ngm: ngm.clone(),
            decoder: decoder.config().clone(),
        },
        rows,
        summary,
    }
}

/// Writes the JSON report and/or the raw-rows CSV
/// (`phase,mode,prompt_len,run,elapsed_us,ngm_ops`).
pub fn emit_bench_report(
    report: &LatencyReport,
    json_path: Option<&Path>,
    csv_path: Option<&Path>,
) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::EmptyInput("benchmark produced no rows".into()));
    }
    if let Some(path) = json_path {
        crate::analysis::export_report_json(report, path)?;
    }
    if let Some(path) = csv_path {
        let mut out = String::from("phase,mode,prompt_len,run,elapsed_us,ngm_ops\n");
        for r in &report.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.phase, r.mode, r.prompt_len, r.run, r.elapsed_us, r.ngm_ops
            ));
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares y = slope * x + intercept.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    let slope = cov / var;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let pred = slope * x + intercept;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - my) * (y - my);
    }
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    LineFit {
        slope,
        intercept,
        r2,
    }
}

/// Convenience accessor: mean memory-module ops per decode step for a mode
/// at each prompt length (config order).
pub fn per_step_ops(config: &BenchConfig, rows: &[BenchRow], mode: NgmMode) -> Vec<f64> {
    config
        .prompt_lengths
        .iter()
        .map(|&len| {
            let group: Vec<u64> = rows
                .iter()
                .filter(|r| {
                    r.phase == Phase::Decode && r.prompt_len == len && r.mode == mode
                })
                .map(|r| r.ngm_ops)
                .collect();
            group.iter().sum::<u64>() as f64
                / group.len() as f64
                / config.decode_tokens as f64
        })
        .collect()
}
