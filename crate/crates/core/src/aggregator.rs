//! Alternating-attention stack: L layers of frame attention followed by a
//! global block, either dense or descriptor-based.

use serde::{Deserialize, Serialize};

use crate::attention::{
    dense_global_attention, descriptor_attention, frame_attention, AttentionMask, BlockWeights, MaskMode,
};
use crate::compression::{
    assemble_bundle, select_keyframes, AuxGroups, Compression, Compressor, DescriptorBundle, KeyframeSelector,
};
use crate::rng::{streams, Rng};
use crate::tensor::{add_bias, matmul, Grid, Matrix, Scalar};
use crate::tokens::{FrameLayout, TokenTensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    Dense,
    #[default]
    Descriptor,
}

impl GlobalMode {
    pub fn name(self) -> &'static str {
        match self {
            GlobalMode::Dense => "dense",
            GlobalMode::Descriptor => "descriptor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub layers: usize,
    pub heads: usize,
    pub layout: FrameLayout,
    pub global_mode: GlobalMode,
    pub compression: Compression,
    pub aux: AuxGroups,
    pub keyframes: KeyframeSelector,
    pub mask: MaskMode,
    /// Seeds every weight of the stack.
    pub seed: u64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            layout: FrameLayout::desk(),
            global_mode: GlobalMode::Descriptor,
            compression: Compression::default(),
            aux: AuxGroups::all(),
            keyframes: KeyframeSelector::default(),
            mask: MaskMode::None,
            seed: 0,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("the aggregator needs at least one layer".into()));
        }
        self.layout.validate()?;
        if self.heads == 0 || self.layout.channels % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} channels cannot be split into {} heads",
                self.layout.channels, self.heads
            )));
        }
        self.compression.validate(&self.layout)?;
        self.keyframes.validate()?;
        if let MaskMode::BlockCausal { block: 0 } = self.mask {
            return Err(Error::InvalidConfig("mask block size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: GlobalMode) -> Self {
        self.global_mode = mode;
        self
    }
}

pub const CAMERA_DIM: usize = 9;

/// Linear stand-ins for the camera and depth heads.
#[derive(Clone, Debug)]
pub struct StubHeads<T> {
    pub camera_w: Matrix<T>,
    pub camera_b: Vec<T>,
    pub depth_w: Matrix<T>,
    pub depth_b: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs<T> {
    /// S × CAMERA_DIM
    pub camera: Matrix<T>,
    /// One H × W × 2 (depth, uncertainty) grid per frame.
    pub depth: Vec<Grid<T>>,
}

impl<T: Scalar> StubHeads<T> {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, streams::HEADS);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, s: f64| -> Vec<f64> { (0..rows * cols).map(|_| rng.normal() * s).collect() };
        let camera_w = mat(channels, CAMERA_DIM, scale);
        let camera_b = mat(1, CAMERA_DIM, 0.1);
        let depth_w = mat(channels, 2, scale);
        let depth_b = mat(1, 2, 0.1);
        let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
        Self {
            camera_w: Matrix::from_f64(channels, CAMERA_DIM, &camera_w).expect("sized"),
            camera_b: to_t(camera_b),
            depth_w: Matrix::from_f64(channels, 2, &depth_w).expect("sized"),
            depth_b: to_t(depth_b),
        }
    }

    /// The camera vector reads each frame's token 0 (its camera token when
    /// the layout has one); depth reads every patch token.
    pub fn run(&self, t: &TokenTensor<T>) -> Result<HeadOutputs<T>> {
        let layout = t.layout();
        let c = layout.channels;
        if self.camera_w.rows() != c {
            return Err(Error::ChannelMismatch {
                expected: self.camera_w.rows(),
                actual: c,
            });
        }
        let mut first = Vec::with_capacity(t.frames() * c);
        for f in 0..t.frames() {
            first.extend_from_slice(t.token(f, 0));
        }
        let camera = add_bias(&matmul(&Matrix::from_vec(t.frames(), c, first)?, &self.camera_w)?, &self.camera_b)?;
        let depth = (0..t.frames())
            .map(|f| {
                let (_, grid) = t.split_grid(f)?;
                let d = add_bias(&matmul(&grid.to_matrix(), &self.depth_w)?, &self.depth_b)?;
                Grid::from_matrix(layout.height, layout.width, d)
            })
            .collect::<Result<_>>()?;
        Ok(HeadOutputs { camera, depth })
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub frame: BlockWeights<T>,
    pub global: BlockWeights<T>,
    pub compressor: Compressor<T>,
}

/// Every weight of the stack. Depends only on (seed, channels, heads, layers,
/// compression), never on the global mode, so dense and descriptor runs of
/// the same config share weights.
#[derive(Clone, Debug)]
pub struct AggregatorWeights<T> {
    pub layers: Vec<LayerWeights<T>>,
    pub heads: StubHeads<T>,
}

impl<T: Scalar> AggregatorWeights<T> {
    pub fn seeded(cfg: &AggregatorConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.layout.channels;
        let mut rng = Rng::derive(cfg.seed, streams::WEIGHTS);
        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(LayerWeights {
                    frame: BlockWeights::seeded(c, cfg.heads, &mut rng)?,
                    global: BlockWeights::seeded(c, cfg.heads, &mut rng)?,
                    compressor: Compressor::new(cfg.compression, c, cfg.seed.wrapping_add(l as u64)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            heads: StubHeads::seeded(c, cfg.seed),
        })
    }
}

/// Per-layer outputs of an offline forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub layer_outputs: Vec<TokenTensor<T>>,
    /// Bundle consumed by each layer's global block (descriptor mode only).
    pub bundles: Vec<DescriptorBundle<T>>,
    pub keyframes: Vec<usize>,
}

impl<T> ForwardTrace<T> {
    pub fn output(&self) -> &TokenTensor<T> {
        self.layer_outputs.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct Aggregator<T> {
    cfg: AggregatorConfig,
    weights: AggregatorWeights<T>,
}

impl<T: Scalar> Aggregator<T> {
    pub fn new(cfg: AggregatorConfig) -> Result<Self> {
        Ok(Self {
            weights: AggregatorWeights::seeded(&cfg)?,
            cfg,
        })
    }

    pub fn with_weights(cfg: AggregatorConfig, weights: AggregatorWeights<T>) -> Result<Self> {
        cfg.validate()?;
        if weights.layers.len() != cfg.layers {
            return Err(Error::InvalidConfig(format!(
                "{} weight layers for a {}-layer config",
                weights.layers.len(),
                cfg.layers
            )));
        }
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &AggregatorWeights<T> {
        &self.weights
    }

    fn check_input(&self, t: &TokenTensor<T>) -> Result<()> {
        if t.layout() != self.cfg.layout {
            return Err(Error::Shape(format!(
                "input layout {:?} does not match configured layout {:?}",
                t.layout(),
                self.cfg.layout
            )));
        }
        Ok(())
    }

    /// Offline forward keeping every layer's output and bundle. Key-frames
    /// are selected once, on the input, and reused by all layers; each
    /// layer compresses its own global-block input. Under a block-causal mask
    /// every block picks its own key-frames so no block depends on later ones.
    pub fn forward_traced(&self, t: &TokenTensor<T>) -> Result<ForwardTrace<T>> {
        self.check_input(t)?;
        let mask = AttentionMask::from_mode(self.cfg.mask, t.frames())?;
        let descriptor = self.cfg.global_mode == GlobalMode::Descriptor;
        let keyframes = if descriptor && self.cfg.aux.keyframes {
            masked_keyframes(t, &self.cfg.keyframes, self.cfg.mask)?
        } else {
            Vec::new()
        };
        let mut x = t.clone();
        let mut layer_outputs = Vec::with_capacity(self.cfg.layers);
        let mut bundles = Vec::new();
        for lw in &self.weights.layers {
            x = frame_attention(&x, &lw.frame)?;
            x = if descriptor {
                let bundle = assemble_bundle(&x, &lw.compressor, &keyframes, self.cfg.aux, 0)?;
                let out = descriptor_attention(&x, &bundle, &lw.global, &mask)?;
                bundles.push(bundle);
                out
            } else {
                dense_global_attention(&x, &lw.global, &mask)?
            };
            layer_outputs.push(x.clone());
        }
        Ok(ForwardTrace {
            layer_outputs,
            bundles,
            keyframes,
        })
    }

    pub fn forward_offline(&self, t: &TokenTensor<T>) -> Result<TokenTensor<T>> {
        Ok(self.forward_traced(t)?.layer_outputs.pop().expect("at least one layer"))
    }

    pub fn run_heads(&self, t: &TokenTensor<T>) -> Result<HeadOutputs<T>> {
        self.weights.heads.run(t)
    }
}

/// Key-frames of the whole sequence, or of each mask block separately.
pub fn masked_keyframes<T: Scalar>(t: &TokenTensor<T>, sel: &KeyframeSelector, mask: MaskMode) -> Result<Vec<usize>> {
    match mask {
        MaskMode::None => select_keyframes(t, sel),
        MaskMode::BlockCausal { block } => {
            let mut picked = Vec::new();
            for start in (0..t.frames()).step_by(block.max(1)) {
                let end = (start + block).min(t.frames());
                picked.extend(select_keyframes(&t.slice_frames(start..end)?, sel)?.into_iter().map(|f| f + start));
            }
            Ok(picked)
        }
    }
}

/// Builds the stack from `cfg` and runs it once.
pub fn forward_offline<T: Scalar>(t: &TokenTensor<T>, cfg: &AggregatorConfig) -> Result<TokenTensor<T>> {
    Aggregator::new(*cfg)?.forward_offline(t)
}
