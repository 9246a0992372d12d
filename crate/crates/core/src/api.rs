//! Wire types shared by the HTTP service and its client, and the request
//! handlers behind them. Handlers are synchronous and CPU-bound.

use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig};
use crate::analysis::{compare_flops, compare_modes, memory_model, ErrorReport, FlopComparison, MemoryModel};
use crate::analysis::REFERENCE_END_TO_END_TFLOPS;
use crate::attention::{attention_score_histogram, frame_attention, Histogram, HistogramMode};
use crate::bench::checksum;
use crate::streaming::StreamConfig;
use crate::tensor::Scalar;
use crate::tokens::{generate_synthetic, TokenTensor};
use crate::verify::{run_verify, VerifyReport};
use crate::{Error, Precision, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub kind: String,
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        Self {
            error: e.to_string(),
            kind: e.kind().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyRequest {
    #[serde(default)]
    pub seed: u64,
    /// Check-name prefixes; empty runs everything.
    #[serde(default)]
    pub filters: Vec<String>,
}

pub fn verify(req: &VerifyRequest) -> VerifyReport {
    run_verify(req.seed, &req.filters)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsRequest {
    pub stream: StreamConfig,
    pub frames: usize,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsResponse {
    pub comparison: FlopComparison,
    pub memory: MemoryModel,
    /// Reference end-to-end dense/descriptor ratio at S=1000, reported next to
    /// the analytic attention-core reduction.
    pub reference_end_to_end: f64,
}

pub fn flops(req: &FlopsRequest) -> Result<FlopsResponse> {
    req.stream.validate()?;
    let (dense, desc) = REFERENCE_END_TO_END_TFLOPS;
    Ok(FlopsResponse {
        comparison: compare_flops(&req.stream.base, req.frames),
        memory: memory_model(&req.stream, req.frames, req.precision.width()),
        reference_end_to_end: dense / desc,
    })
}

/// A seeded synthetic sequence and the configuration to run on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRequest {
    pub config: AggregatorConfig,
    pub frames: usize,
    #[serde(default)]
    pub token_seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardRequest {
    #[serde(flatten)]
    pub run: RunRequest,
    /// Return the output tokens, not only their checksum.
    #[serde(default)]
    pub include_tokens: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardResponse {
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    /// Keys per layer of the global block.
    pub keys_per_layer: Vec<usize>,
    pub keyframes: Vec<usize>,
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Vec<f64>>,
}

fn input<T: Scalar>(run: &RunRequest) -> Result<TokenTensor<T>> {
    run.config.validate()?;
    generate_synthetic::<T>(run.frames, run.config.layout, run.token_seed)
}

fn forward_typed<T: Scalar>(req: &ForwardRequest) -> Result<ForwardResponse> {
    let t = input::<T>(&req.run)?;
    let trace = Aggregator::<T>::new(req.run.config)?.forward_traced(&t)?;
    let out = trace.output();
    let keys_per_layer = if trace.bundles.is_empty() {
        vec![t.total_tokens(); req.run.config.layers]
    } else {
        trace.bundles.iter().map(|b| b.len()).collect()
    };
    Ok(ForwardResponse {
        frames: out.frames(),
        tokens: out.total_tokens(),
        channels: out.channels(),
        keys_per_layer,
        keyframes: trace.keyframes.clone(),
        checksum: checksum(out),
        output: req
            .include_tokens
            .then(|| out.data().iter().map(|v| v.to_f64()).collect()),
    })
}

pub fn forward(req: &ForwardRequest) -> Result<ForwardResponse> {
    match req.run.precision {
        Precision::F32 => forward_typed::<f32>(req),
        Precision::F64 => forward_typed::<f64>(req),
    }
}

pub fn compare(req: &RunRequest) -> Result<ErrorReport> {
    match req.precision {
        Precision::F32 => compare_modes(&input::<f32>(req)?, &req.config),
        Precision::F64 => compare_modes(&input::<f64>(req)?, &req.config),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRequest {
    #[serde(flatten)]
    pub run: RunRequest,
    #[serde(default)]
    pub layer: usize,
    #[serde(default)]
    pub mode: HistogramMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramResponse {
    pub layer: usize,
    pub mode: HistogramMode,
    pub histogram: Histogram,
}

/// Probabilities of layer `layer`'s frame block (on the layer input) or of
/// its global block taken densely (on the frame block's output).
fn histogram_typed<T: Scalar>(req: &HistogramRequest) -> Result<HistogramResponse> {
    let cfg = &req.run.config;
    if req.layer >= cfg.layers {
        return Err(Error::InvalidConfig(format!(
            "layer {} out of range for {} layers",
            req.layer, cfg.layers
        )));
    }
    let t = input::<T>(&req.run)?;
    let agg = Aggregator::<T>::new(*cfg)?;
    let x = if req.layer == 0 {
        t
    } else {
        agg.forward_traced(&t)?.layer_outputs.swap_remove(req.layer - 1)
    };
    let lw = &agg.weights().layers[req.layer];
    let histogram = match req.mode {
        HistogramMode::Frame => attention_score_histogram(&x, &lw.frame, HistogramMode::Frame)?,
        HistogramMode::Global => {
            attention_score_histogram(&frame_attention(&x, &lw.frame)?, &lw.global, HistogramMode::Global)?
        }
    };
    Ok(HistogramResponse {
        layer: req.layer,
        mode: req.mode,
        histogram,
    })
}

pub fn histogram(req: &HistogramRequest) -> Result<HistogramResponse> {
    match req.run.precision {
        Precision::F32 => histogram_typed::<f32>(req),
        Precision::F64 => histogram_typed::<f64>(req),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCreate {
    pub config: StreamConfig,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCreated {
    pub id: String,
    pub config: StreamConfig,
    pub precision: Precision,
}
