//! `descattn`: command-line client of the descattn service.
//!
//! Exit codes: 0 success, 1 some benchmark runs failed, 2 usage error,
//! 3 verification failure, 4 I/O error.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use descattn_client::{Client, ClientError};
use descattn_core::analysis::{resource_table, FlopReport, ResourceColumn};
use descattn_core::api::{FlopsRequest, HistogramRequest, RunRequest, VerifyRequest};
use descattn_core::attention::{Histogram, HistogramMode};
use descattn_core::bench::{parse_config_file, BenchMode, BenchRun, BenchSpec, SweepAxes};
use descattn_core::streaming::CacheReport;
use descattn_core::tokens::{generate_synthetic, load_dump, read_dump_header, save_dump};
use descattn_core::{Precision, Scalar, TokenTensor};

use settings::{Common, Format};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verification(String),
    Io(String),
    RunsFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::RunsFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Verification(m) | CliError::Io(m) | CliError::RunsFailed(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match &e {
            ClientError::Api { status, .. } if (400..500).contains(status) => CliError::Usage(e.to_string()),
            ClientError::Payload(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<descattn_core::Error> for CliError {
    fn from(e: descattn_core::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "descattn", version, about = "Descriptor attention: verification, cost models, streaming and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HistogramBlock {
    Frame,
    Global,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dense,
    Descriptor,
    Streaming,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite; exits 3 if any check fails.
    Verify {
        /// Only run checks whose name starts with this prefix.
        #[arg(long)]
        filter: Vec<String>,
    },
    /// Analytic FLOP and memory report for dense and descriptor modes.
    Flops,
    /// Stream a sequence through a chunk-recursive session.
    Stream {
        /// Sequence dump to stream instead of a synthetic sequence.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Histogram of attention probabilities of one layer.
    Histogram {
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum, default_value = "global")]
        block: HistogramBlock,
    },
    /// Time configurations over the cartesian product of list flags.
    Bench {
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["dense", "descriptor"])]
        modes: Vec<ModeArg>,
        #[arg(long, default_value_t = descattn_core::bench::MIN_REPEATS)]
        repeats: usize,
    },
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Writes `contents` into `--out` when given, otherwise prints it.
fn emit(common: &Common, name: &str, contents: &str) -> Result<(), CliError> {
    match &common.out {
        Some(dir) => {
            let path = write_file(dir, name, contents)?;
            println!("wrote {}", path.display());
        }
        None => print!("{contents}"),
    }
    Ok(())
}

async fn verify(client: &Client, common: &Common, filters: Vec<String>) -> Result<(), CliError> {
    let report = client
        .verify(&VerifyRequest {
            seed: common.seed(),
            filters,
        })
        .await?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = &common.out {
        let mut csv = String::from("check,passed,millis,detail\n");
        for c in &report.checks {
            csv.push_str(&format!("{},{},{:.3},\"{}\"\n", c.name, c.passed, c.millis, c.detail.replace('"', "'")));
        }
        write_file(dir, "verify.csv", csv)?;
    }
    if report.checks.is_empty() {
        return Err(CliError::Usage("no check matches the filter".into()));
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(CliError::Verification(format!("failed checks: {}", names.join(", "))))
    }
}

async fn flops(client: &Client, common: &Common) -> Result<(), CliError> {
    let stream = common.stream()?;
    let frames = common.frames()?;
    let r = client
        .flops(&FlopsRequest {
            stream,
            frames,
            precision: common.precision(),
        })
        .await?;
    let c = &r.comparison;
    let m = &r.memory;
    println!(
        "S={} N={} K={} K_d={} r={}",
        frames, c.descriptor.tokens_per_frame, c.descriptor.tokens, c.descriptor.keys, c.descriptor.ratio
    );
    println!("attention-core reduction (dense/descriptor) = {:.4}", c.core_reduction);
    println!("matmul reduction, whole aggregator = {:.4}", c.matmul_reduction);
    println!(
        "reference end-to-end reduction = {:.4} (not comparable: counts more than the attention core)",
        r.reference_end_to_end
    );
    println!(
        "streaming cache: {} tokens ({} bytes) vs full-token cache {} tokens; ratio {:.6}, 1/(p*r^2) = {:.6}",
        m.cache_tokens, m.cache_bytes, m.full_cache_tokens, m.ratio, m.asymptotic_ratio
    );
    let body = match common.format() {
        Format::Csv => {
            let mut s = format!("{}\n", FlopReport::CSV_HEADER);
            for row in c.dense.csv_rows().into_iter().chain(c.descriptor.csv_rows()) {
                s.push_str(&row);
                s.push('\n');
            }
            s
        }
        Format::Md => resource_table(&[ResourceColumn {
            frames,
            dense_ms: None,
            descriptor_ms: None,
            dense_flops: c.dense.total(),
            descriptor_flops: c.descriptor.total(),
            dense_bytes: Some((m.full_cache_bytes) as u64),
            descriptor_bytes: Some(m.cache_bytes as u64),
        }]),
    };
    let name = match common.format() {
        Format::Csv => "flops.csv",
        Format::Md => "flops.md",
    };
    emit(common, name, &body)
}

fn cache_markdown(r: &CacheReport) -> String {
    let mut s = String::from(
        "| layer | compressed | camera/register | first frame | tokens | bytes | ratio vs full |\n|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for l in &r.layers {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.6} |\n",
            l.layer, l.compressed, l.camera_register, l.first_frame, l.total_tokens, l.bytes, l.ratio_vs_full
        ));
    }
    s
}

async fn stream_typed<T: Scalar>(client: &Client, common: &Common, input: Option<&Path>) -> Result<(), CliError> {
    let cfg = common.stream()?;
    let t: TokenTensor<T> = match input {
        Some(path) => {
            let bytes =
                std::fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
            let header = read_dump_header(&bytes)?;
            if header.layout != cfg.base.layout {
                return Err(CliError::Usage(format!(
                    "dump layout {:?} does not match --grid/--channels ({:?})",
                    header.layout, cfg.base.layout
                )));
            }
            load_dump(&bytes)?
        }
        None => generate_synthetic(common.frames()?, cfg.base.layout, common.seed())?,
    };
    let session = client.create_stream(cfg, common.precision()).await?;
    let mut outputs = Vec::new();
    let mut start = 0;
    while start < t.frames() {
        let end = (start + cfg.chunk).min(t.frames());
        outputs.push(session.push(&t.slice_frames(start..end)?).await?);
        start = end;
    }
    let report = session.cache().await?;
    session.close().await?;
    if let Some(dir) = &common.out {
        let out = TokenTensor::concat(&outputs)?;
        let path = write_file(dir, "stream_output.dseq", save_dump(&out))?;
        println!("wrote {}", path.display());
    }
    match common.format() {
        Format::Csv => emit(common, "stream_cache.csv", &report.to_csv()),
        Format::Md => emit(common, "stream_cache.md", &cache_markdown(&report)),
    }
}

fn histogram_markdown(h: &Histogram) -> String {
    let mut s = String::from("| bin_lo | bin_hi | count |\n|---:|---:|---:|\n");
    for (i, c) in h.counts.iter().enumerate() {
        let (lo, hi) = Histogram::bin_edges(i);
        s.push_str(&format!("| {lo:.6} | {hi:.6} | {c} |\n"));
    }
    s
}

async fn histogram(client: &Client, common: &Common, layer: usize, block: HistogramBlock) -> Result<(), CliError> {
    let req = HistogramRequest {
        run: RunRequest {
            config: common.aggregator()?,
            frames: common.frames()?,
            token_seed: common.seed(),
            precision: common.precision(),
        },
        layer,
        mode: match block {
            HistogramBlock::Frame => HistogramMode::Frame,
            HistogramBlock::Global => HistogramMode::Global,
        },
    };
    let r = client.histogram(&req).await?;
    match common.format() {
        Format::Csv => emit(common, "histogram.csv", &r.histogram.to_csv()),
        Format::Md => emit(common, "histogram.md", &histogram_markdown(&r.histogram)),
    }
}

async fn bench(client: &Client, common: &Common, modes: &[ModeArg], repeats: usize) -> Result<(), CliError> {
    let first = |v: &[usize], d: usize| v.first().copied().unwrap_or(d);
    let mut base = BenchRun {
        frames: first(&common.frames, settings::DEFAULT_FRAMES),
        precision: common.precision(),
        repeats,
        token_seed: common.seed(),
        ..Default::default()
    };
    // single-valued parts of the config; the list flags are swept below
    let single = Common {
        frames: vec![],
        ratio: vec![],
        retain: vec![],
        chunk: vec![],
        method: vec![],
        selector: vec![],
        ..common.clone()
    };
    base.stream = single.stream()?;
    let axes = SweepAxes {
        modes: modes
            .iter()
            .map(|m| match m {
                ModeArg::Dense => BenchMode::Dense,
                ModeArg::Descriptor => BenchMode::Descriptor,
                ModeArg::Streaming => BenchMode::Streaming,
            })
            .collect(),
        frames: common.frames.clone(),
        ratios: common.ratio.clone(),
        retains: common.retain.clone(),
        chunks: common.chunk.clone(),
        methods: common.method.clone(),
        selectors: common.selector.clone(),
    };
    let spec = BenchSpec {
        runs: axes.expand(&base),
        parallel: common.parallel,
    };
    let report = client.bench(&spec).await?;
    match &common.out {
        Some(dir) => {
            for (name, body) in [
                ("bench.csv", report.bench_csv()),
                ("runs.csv", report.runs_csv()),
                ("summary.md", report.markdown()),
            ] {
                println!("wrote {}", write_file(dir, name, body)?.display());
            }
            if !report.failures.is_empty() {
                println!("wrote {}", write_file(dir, "failures.csv", report.failures_csv())?.display());
            }
        }
        None => match common.format() {
            Format::Csv => print!("{}", report.bench_csv()),
            Format::Md => print!("{}", report.markdown()),
        },
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::RunsFailed(format!(
            "{} of {} runs failed",
            report.failures.len(),
            spec.runs.len()
        )))
    }
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let mut common = cli.common;
    if let Some(path) = common.config.clone() {
        let text =
            std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        common.merge_file(&parse_config_file(&text)?)?;
    }
    let client = match &common.server {
        Some(url) => Client::new(url.clone()),
        None => {
            let addr = descattn_service::spawn("127.0.0.1:0")
                .await
                .map_err(|e| CliError::Io(format!("cannot start embedded service: {e}")))?;
            Client::new(format!("http://{addr}"))
        }
    };
    match cli.command {
        Command::Verify { filter } => verify(&client, &common, filter).await,
        Command::Flops => flops(&client, &common).await,
        Command::Stream { input } => match common.precision() {
            Precision::F32 => stream_typed::<f32>(&client, &common, input.as_deref()).await,
            Precision::F64 => stream_typed::<f64>(&client, &common, input.as_deref()).await,
        },
        Command::Histogram { layer, block } => histogram(&client, &common, layer, block).await,
        Command::Bench { modes, repeats } => bench(&client, &common, &modes, repeats).await,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(4);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
