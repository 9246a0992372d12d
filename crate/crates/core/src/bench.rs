//! Benchmark sweeps.
//!
//! Each run is timed after one warmup and repeated at least three times.
//! Every output row carries the full configuration, so any row can be
//! reproduced on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::{Aggregator, AggregatorConfig, GlobalMode};
use crate::analysis::{flops_attention, streaming_core_flops};
use crate::attention::MaskMode;
use crate::compression::{CompressionMethod, KeyframeMethod};
use crate::streaming::{StreamConfig, Streamer};
use crate::tensor::Scalar;
use crate::tokens::{generate_synthetic, TokenTensor};
use crate::{Error, Precision, Result};

pub const MIN_REPEATS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Dense,
    #[default]
    Descriptor,
    Streaming,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Dense, BenchMode::Descriptor, BenchMode::Streaming];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Dense => "dense",
            BenchMode::Descriptor => "descriptor",
            BenchMode::Streaming => "streaming",
        }
    }
}

impl std::str::FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode `{s}`")))
    }
}

/// One benchmarked configuration. `stream.base` is the aggregator config for
/// every mode; chunk and retain only matter in streaming mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRun {
    pub mode: BenchMode,
    pub frames: usize,
    pub stream: StreamConfig,
    pub precision: Precision,
    pub repeats: usize,
    /// Seed of the synthetic input sequence.
    pub token_seed: u64,
}

impl Default for BenchRun {
    fn default() -> Self {
        Self {
            mode: BenchMode::Descriptor,
            frames: 16,
            stream: StreamConfig::default(),
            precision: Precision::F32,
            repeats: MIN_REPEATS,
            token_seed: 0,
        }
    }
}

impl BenchRun {
    pub fn config(&self) -> AggregatorConfig {
        let mode = match self.mode {
            BenchMode::Dense => GlobalMode::Dense,
            _ => GlobalMode::Descriptor,
        };
        self.stream.base.with_mode(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidConfig("a run needs at least one frame".into()));
        }
        if self.repeats < MIN_REPEATS {
            return Err(Error::InvalidConfig(format!(
                "repeats must be at least {MIN_REPEATS}, got {}",
                self.repeats
            )));
        }
        self.stream.validate()?;
        self.config().compression.validate(&self.stream.base.layout)
    }

    pub fn attention_core_flops(&self) -> u128 {
        match self.mode {
            BenchMode::Streaming => streaming_core_flops(&self.stream, self.frames),
            _ => flops_attention(&self.config(), self.frames).attention_core(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub runs: Vec<BenchRun>,
    /// Run independent configurations concurrently. Repeats of one run always
    /// execute sequentially.
    #[serde(default)]
    pub parallel: bool,
}

/// Lists of values to sweep; the cartesian product over a base run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub modes: Vec<BenchMode>,
    pub frames: Vec<usize>,
    pub ratios: Vec<usize>,
    pub retains: Vec<usize>,
    pub chunks: Vec<usize>,
    pub methods: Vec<CompressionMethod>,
    pub selectors: Vec<KeyframeMethod>,
}

impl SweepAxes {
    /// Empty axes keep the base value.
    pub fn expand(&self, base: &BenchRun) -> Vec<BenchRun> {
        fn axis<T: Copy>(values: &[T], default: T) -> Vec<T> {
            if values.is_empty() {
                vec![default]
            } else {
                values.to_vec()
            }
        }
        let mut runs = Vec::new();
        for mode in axis(&self.modes, base.mode) {
            for frames in axis(&self.frames, base.frames) {
                for ratio in axis(&self.ratios, base.stream.base.compression.ratio) {
                    for retain in axis(&self.retains, base.stream.retain) {
                        for chunk in axis(&self.chunks, base.stream.chunk) {
                            for method in axis(&self.methods, base.stream.base.compression.method) {
                                for selector in axis(&self.selectors, base.stream.base.keyframes.method) {
                                    let mut run = *base;
                                    run.mode = mode;
                                    run.frames = frames;
                                    run.stream.retain = retain;
                                    run.stream.chunk = chunk;
                                    run.stream.base.compression.ratio = ratio;
                                    run.stream.base.compression.method = method;
                                    run.stream.base.keyframes.method = selector;
                                    runs.push(run);
                                }
                            }
                        }
                    }
                }
            }
        }
        runs
    }
}

/// One timed repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub repeat: usize,
    pub wall_ms: f64,
    /// K = S·N
    pub tokens: usize,
    /// Streaming memory after the last chunk, summed over layers; 0 offline.
    pub cache_tokens: usize,
    /// Peak resident set in KiB, when the platform reports it.
    pub peak_rss_kib: Option<u64>,
    /// SHA-256 of the output tokens' little-endian bytes.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub config: BenchRun,
    pub wall_ms_median: f64,
    pub wall_ms_p90: f64,
    pub tokens: usize,
    pub cache_tokens: usize,
    pub attn_core_flops: u128,
    pub peak_rss_kib: Option<u64>,
    pub checksum: String,
    /// All repeats produced the same checksum.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub config: BenchRun,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<RunRecord>,
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
}

pub fn checksum<T: Scalar>(t: &TokenTensor<T>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::with_capacity(T::WIDTH);
    for v in t.data() {
        buf.clear();
        v.write_le(&mut buf);
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

/// `VmHWM` from /proc/self/status.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.parse().ok())
}

/// Asks the kernel to restart peak-RSS accounting; ignored where unsupported.
fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Nearest-rank 90th percentile.
fn p90(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (0.9 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct Outcome {
    checksum: String,
    cache_tokens: usize,
}

fn execute_once<T: Scalar>(run: &BenchRun, input: &TokenTensor<T>) -> Result<Outcome> {
    let (out, cache_tokens) = match run.mode {
        BenchMode::Streaming => {
            let mut s = Streamer::<T>::new(run.stream)?;
            let out = s.run(input)?;
            let cache = s.cache().layers.iter().map(|l| l.len()).sum();
            (out, cache)
        }
        _ => (Aggregator::<T>::new(run.config())?.forward_offline(input)?, 0),
    };
    Ok(Outcome {
        checksum: checksum(&out),
        cache_tokens,
    })
}

fn execute_typed<T: Scalar>(index: usize, run: &BenchRun, measure_rss: bool) -> Result<(Vec<RunRecord>, RunSummary)> {
    run.validate()?;
    let input = generate_synthetic::<T>(run.frames, run.stream.base.layout, run.token_seed)?;
    execute_once(run, &input)?;
    let mut records = Vec::with_capacity(run.repeats);
    for repeat in 0..run.repeats {
        if measure_rss {
            reset_peak_rss();
        }
        let start = Instant::now();
        let outcome = execute_once(run, &input)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(RunRecord {
            run: index,
            repeat,
            wall_ms,
            tokens: input.total_tokens(),
            cache_tokens: outcome.cache_tokens,
            peak_rss_kib: if measure_rss { peak_rss_kib() } else { None },
            checksum: outcome.checksum,
        });
    }
    let mut times: Vec<f64> = records.iter().map(|r| r.wall_ms).collect();
    times.sort_by(f64::total_cmp);
    let first = &records[0];
    let summary = RunSummary {
        run: index,
        config: *run,
        wall_ms_median: median(&times),
        wall_ms_p90: p90(&times),
        tokens: first.tokens,
        cache_tokens: first.cache_tokens,
        attn_core_flops: run.attention_core_flops(),
        peak_rss_kib: records.iter().filter_map(|r| r.peak_rss_kib).max(),
        checksum: first.checksum.clone(),
        deterministic: records.iter().all(|r| r.checksum == first.checksum),
    };
    Ok((records, summary))
}

/// Runs one configuration: one warmup, then `repeats` timed executions.
pub fn execute_run(index: usize, run: &BenchRun) -> Result<(Vec<RunRecord>, RunSummary)> {
    match run.precision {
        Precision::F32 => execute_typed::<f32>(index, run, true),
        Precision::F64 => execute_typed::<f64>(index, run, true),
    }
}

/// Runs every configuration. A failing run is listed in the failure manifest
/// and the others still complete.
pub fn sweep(spec: &BenchSpec) -> BenchReport {
    let one = |(i, run): (usize, &BenchRun)| {
        let res = match run.precision {
            // peak RSS is process-wide and meaningless with concurrent runs
            Precision::F32 => execute_typed::<f32>(i, run, !spec.parallel),
            Precision::F64 => execute_typed::<f64>(i, run, !spec.parallel),
        };
        res.map_err(|e| RunFailure {
            run: i,
            config: *run,
            error: e.to_string(),
        })
    };
    let results: Vec<_> = if spec.parallel {
        spec.runs.par_iter().enumerate().map(one).collect()
    } else {
        spec.runs.iter().enumerate().map(one).collect()
    };
    let mut report = BenchReport::default();
    for r in results {
        match r {
            Ok((records, summary)) => {
                report.records.extend(records);
                report.summaries.push(summary);
            }
            Err(f) => report.failures.push(f),
        }
    }
    report
}

pub const CONFIG_COLUMNS: &str = "precision,layers,heads,channels,height,width,n_camera,n_register,\
aux_camera_register,aux_first_frame,aux_keyframes,selector,keyframe_interval,keyframe_seed,\
mask_block,persist_first_frame,weight_seed,token_seed,repeats";

fn config_cells(run: &BenchRun) -> String {
    let c = &run.stream.base;
    let mask_block = match c.mask {
        MaskMode::None => 0,
        MaskMode::BlockCausal { block } => block,
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        run.precision,
        c.layers,
        c.heads,
        c.layout.channels,
        c.layout.height,
        c.layout.width,
        c.layout.n_camera,
        c.layout.n_register,
        c.aux.camera_register,
        c.aux.first_frame,
        c.aux.keyframes,
        c.keyframes.method.name(),
        c.keyframes.interval,
        c.keyframes.seed,
        mask_block,
        run.stream.persist_first_frame,
        c.seed,
        run.token_seed,
        run.repeats
    )
}

fn key_cells(run: &BenchRun) -> String {
    format!(
        "{},{},{},{},{},{}",
        run.mode.name(),
        run.frames,
        run.stream.base.compression.ratio,
        run.stream.retain,
        run.stream.chunk,
        run.stream.base.compression.method
    )
}

pub fn bench_csv_header() -> String {
    format!(
        "mode,S,r,p,c,method,wall_ms_median,wall_ms_p90,tokens,cache_tokens,{CONFIG_COLUMNS},attn_core_flops,peak_rss_kib,checksum"
    )
}

pub fn runs_csv_header() -> String {
    format!("run,repeat,mode,S,r,p,c,method,wall_ms,tokens,cache_tokens,{CONFIG_COLUMNS},peak_rss_kib,checksum")
}

fn opt(v: Option<u64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl BenchReport {
    /// One row per run with median and p90 wall time.
    pub fn bench_csv(&self) -> String {
        let mut s = bench_csv_header();
        s.push('\n');
        for r in &self.summaries {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{},{},{},{},{},{}",
                key_cells(&r.config),
                r.wall_ms_median,
                r.wall_ms_p90,
                r.tokens,
                r.cache_tokens,
                config_cells(&r.config),
                r.attn_core_flops,
                opt(r.peak_rss_kib),
                r.checksum
            );
        }
        s
    }

    /// One row per (run, repeat).
    pub fn runs_csv(&self) -> String {
        let mut s = runs_csv_header();
        s.push('\n');
        for rec in &self.records {
            let Some(sum) = self.summaries.iter().find(|x| x.run == rec.run) else {
                continue;
            };
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{},{},{},{},{}",
                rec.run,
                rec.repeat,
                key_cells(&sum.config),
                rec.wall_ms,
                rec.tokens,
                rec.cache_tokens,
                config_cells(&sum.config),
                opt(rec.peak_rss_kib),
                rec.checksum
            );
        }
        s
    }

    pub fn failures_csv(&self) -> String {
        let mut s = String::from("run,mode,S,r,p,c,method,error\n");
        for f in &self.failures {
            let _ = writeln!(s, "{},{},\"{}\"", f.run, key_cells(&f.config), f.error.replace('"', "'"));
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from(
            "| mode | S | r | p | c | method | median ms | p90 ms | tokens | cache tokens | attn core GFLOPs |\n\
             |---|---:|---:|---:|---:|---|---:|---:|---:|---:|---:|\n",
        );
        for r in &self.summaries {
            let c = &r.config;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {} | {} | {:.3} |",
                c.mode.name(),
                c.frames,
                c.stream.base.compression.ratio,
                c.stream.retain,
                c.stream.chunk,
                c.stream.base.compression.method,
                r.wall_ms_median,
                r.wall_ms_p90,
                r.tokens,
                r.cache_tokens,
                r.attn_core_flops as f64 / 1e9
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\n{} run(s) failed:\n", self.failures.len());
            for f in &self.failures {
                let _ = writeln!(s, "- run {} ({}, S={}): {}", f.run, f.config.mode.name(), f.config.frames, f.error);
            }
        }
        s
    }
}

/// Flat `key=value` text, one key per line. `#` starts a comment; blank lines
/// are skipped; a repeated key keeps its last value.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!("line {}: expected key=value, got `{raw}`", n + 1)));
        };
        let key = k.trim().trim_start_matches("--");
        if key.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
        }
        out.insert(key.to_string(), v.trim().to_string());
    }
    Ok(out)
}
