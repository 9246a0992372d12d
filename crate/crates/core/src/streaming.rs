//! Chunk-recursive inference.
//!
//! A sequence is processed in consecutive chunks. For each layer, the tokens
//! of the current chunk query `[M_{t-1}, D_t]`: the layer's memory of earlier
//! descriptors followed by the chunk's own bundle. Afterwards the memory keeps
//! the chunk's compressed descriptors (and camera/register tokens) of every
//! frame whose global index is a multiple of `retain`, plus the full tokens of
//! frame 0 when `persist_first_frame` is on. Key-frame copies are never kept.
//!
//! Streaming always uses descriptor attention; the base config's global mode
//! and mask are ignored.

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, AggregatorWeights};
use crate::attention::{descriptor_attention_at, frame_attention, AttentionMask};
use crate::compression::{assemble_bundle, select_keyframes, DescriptorBundle, DescriptorKind, Provenance};
use crate::tensor::Scalar;
use crate::tokens::{FrameLayout, TokenTensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Frames per chunk.
    pub chunk: usize,
    /// Keep descriptors of one frame in every `retain`.
    pub retain: usize,
    pub persist_first_frame: bool,
    pub base: AggregatorConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            chunk: 10,
            retain: 5,
            persist_first_frame: true,
            base: AggregatorConfig::default(),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 || self.retain == 0 {
            return Err(Error::InvalidConfig(format!(
                "chunk ({}) and retain ({}) must both be >= 1",
                self.chunk, self.retain
            )));
        }
        self.base.validate()
    }

    /// Whether a descriptor of this provenance enters the memory.
    pub fn retains(&self, p: &Provenance) -> bool {
        match p.kind {
            DescriptorKind::Compressed | DescriptorKind::Camera | DescriptorKind::Register => p.frame % self.retain == 0,
            DescriptorKind::FirstFramePatch => self.persist_first_frame,
            DescriptorKind::KeyframePatch => false,
        }
    }
}

/// Retained descriptors for every global block.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCache<T> {
    pub layers: Vec<DescriptorBundle<T>>,
    pub frames_seen: usize,
}

impl<T: Scalar> MemoryCache<T> {
    /// M_0 = ∅
    pub fn empty(layers: usize, channels: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| DescriptorBundle::empty(channels)).collect(),
            frames_seen: 0,
        }
    }

    pub fn token_count(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }
}

/// Processes one chunk against `cache` and returns the chunk output and the
/// updated cache. Only the chunk's own tokens are queries.
pub fn step<T: Scalar>(
    chunk: &TokenTensor<T>,
    mut cache: MemoryCache<T>,
    cfg: &StreamConfig,
    weights: &AggregatorWeights<T>,
) -> Result<(TokenTensor<T>, MemoryCache<T>)> {
    cfg.validate()?;
    let base = &cfg.base;
    if chunk.layout() != base.layout {
        return Err(Error::Shape(format!(
            "chunk layout {:?} does not match configured layout {:?}",
            chunk.layout(),
            base.layout
        )));
    }
    if chunk.frames() > cfg.chunk {
        return Err(Error::InvalidConfig(format!(
            "chunk of {} frames exceeds the configured chunk size {}",
            chunk.frames(),
            cfg.chunk
        )));
    }
    if cache.layers.len() != weights.layers.len() {
        return Err(Error::Shape(format!(
            "cache has {} layers, weights have {}",
            cache.layers.len(),
            weights.layers.len()
        )));
    }
    if let Some(c) = cache.layers.iter().map(|l| l.descriptors.cols()).find(|&c| c != chunk.channels()) {
        return Err(Error::ChannelMismatch {
            expected: c,
            actual: chunk.channels(),
        });
    }
    let offset = cache.frames_seen;
    let keyframes = if base.aux.keyframes {
        select_keyframes(chunk, &base.keyframes)?
    } else {
        Vec::new()
    };
    let mask = AttentionMask::none();
    let mut x = chunk.clone();
    for (lw, memory) in weights.layers.iter().zip(cache.layers.iter_mut()) {
        x = frame_attention(&x, &lw.frame)?;
        let bundle = assemble_bundle(&x, &lw.compressor, &keyframes, base.aux, offset)?;
        let mut keys = memory.clone();
        keys.extend(&bundle)?;
        x = descriptor_attention_at(&x, &keys, &lw.global, &mask, offset)?;

        let retained = bundle.filter(|p| cfg.retains(p));
        let mut order: Vec<usize> = (0..retained.len()).collect();
        order.sort_by_key(|&i| retained.provenance[i].frame);
        let sorted = DescriptorBundle {
            descriptors: {
                let rows: Vec<T> = order
                    .iter()
                    .flat_map(|&i| retained.descriptors.row(i).iter().copied())
                    .collect();
                crate::Matrix::from_vec(order.len(), chunk.channels(), rows)?
            },
            provenance: order.iter().map(|&i| retained.provenance[i]).collect(),
        };
        memory.extend(&sorted)?;
    }
    cache.frames_seen += chunk.frames();
    Ok((x, cache))
}

/// Owns the weights and the cache of one stream.
#[derive(Clone, Debug)]
pub struct Streamer<T> {
    cfg: StreamConfig,
    weights: AggregatorWeights<T>,
    cache: MemoryCache<T>,
}

impl<T: Scalar> Streamer<T> {
    pub fn new(cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = AggregatorWeights::seeded(&cfg.base)?;
        Ok(Self::with_weights(cfg, weights))
    }

    pub fn with_weights(cfg: StreamConfig, weights: AggregatorWeights<T>) -> Self {
        Self {
            cache: MemoryCache::empty(cfg.base.layers, cfg.base.layout.channels),
            cfg,
            weights,
        }
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &MemoryCache<T> {
        &self.cache
    }

    pub fn step(&mut self, chunk: &TokenTensor<T>) -> Result<TokenTensor<T>> {
        let cache = std::mem::replace(&mut self.cache, MemoryCache::empty(0, 0));
        match step(chunk, cache.clone(), &self.cfg, &self.weights) {
            Ok((out, next)) => {
                self.cache = next;
                Ok(out)
            }
            Err(e) => {
                self.cache = cache;
                Err(e)
            }
        }
    }

    /// Splits `t` into chunks, steps through them and concatenates outputs.
    pub fn run(&mut self, t: &TokenTensor<T>) -> Result<TokenTensor<T>> {
        let mut outputs = Vec::new();
        let mut start = 0;
        while start < t.frames() {
            let end = (start + self.cfg.chunk).min(t.frames());
            outputs.push(self.step(&t.slice_frames(start..end)?)?);
            start = end;
        }
        TokenTensor::concat(&outputs)
    }

    pub fn report(&self) -> CacheReport {
        cache_report(&self.cache, &self.cfg.base.layout, T::WIDTH)
    }
}

pub fn run_stream<T: Scalar>(t: &TokenTensor<T>, cfg: &StreamConfig) -> Result<TokenTensor<T>> {
    Streamer::new(*cfg)?.run(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCacheReport {
    pub layer: usize,
    pub compressed: usize,
    pub camera_register: usize,
    pub first_frame: usize,
    pub total_tokens: usize,
    pub bytes: usize,
    /// Tokens a full-token cache would hold for this layer: frames_seen · N.
    pub full_cache_tokens: usize,
    pub ratio_vs_full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub frames_seen: usize,
    pub layers: Vec<LayerCacheReport>,
}

impl CacheReport {
    pub const CSV_HEADER: &'static str =
        "layer,frames_seen,compressed,camera_register,first_frame,total_tokens,bytes,full_cache_tokens,ratio_vs_full";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.8}\n",
                l.layer,
                self.frames_seen,
                l.compressed,
                l.camera_register,
                l.first_frame,
                l.total_tokens,
                l.bytes,
                l.full_cache_tokens,
                l.ratio_vs_full
            ));
        }
        out
    }
}

pub fn cache_report<T: Scalar>(cache: &MemoryCache<T>, layout: &FrameLayout, element_width: usize) -> CacheReport {
    let full = cache.frames_seen * layout.tokens_per_frame();
    let layers = cache
        .layers
        .iter()
        .enumerate()
        .map(|(layer, b)| {
            let total = b.len();
            LayerCacheReport {
                layer,
                compressed: b.count(DescriptorKind::Compressed),
                camera_register: b.count(DescriptorKind::Camera) + b.count(DescriptorKind::Register),
                first_frame: b.count(DescriptorKind::FirstFramePatch),
                total_tokens: total,
                bytes: total * layout.channels * element_width,
                full_cache_tokens: full,
                ratio_vs_full: if full == 0 { 0.0 } else { total as f64 / full as f64 },
            }
        })
        .collect();
    CacheReport {
        frames_seen: cache.frames_seen,
        layers,
    }
}
