//! Attention kernels: per-frame self-attention, dense global self-attention
//! (the oracle) and descriptor cross-attention, all as pre-norm transformer
//! blocks with a GELU MLP of ratio 4.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::DescriptorBundle;
use crate::rng::Rng;
use crate::tensor::{layer_norm, matmul, mlp, softmax_in_place, Matrix, Scalar, LAYER_NORM_EPS};
use crate::tokens::TokenTensor;
use crate::{Error, Result};

pub const MLP_RATIO: usize = 4;

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub heads: usize,
    pub norm1_gamma: Vec<T>,
    pub norm1_beta: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub norm2_gamma: Vec<T>,
    pub norm2_beta: Vec<T>,
    pub mlp_w1: Matrix<T>,
    pub mlp_b1: Vec<T>,
    pub mlp_w2: Matrix<T>,
    pub mlp_b2: Vec<T>,
}

impl<T: Scalar> BlockWeights<T> {
    /// Gaussian projections scaled by 1/√fan_in, unit norms, zero biases.
    pub fn seeded(channels: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(channels, heads)?;
        let mut gaussian = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            let v: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * scale).collect();
            Matrix::from_f64(rows, cols, &v).expect("sized")
        };
        let c = channels;
        Ok(Self {
            heads,
            norm1_gamma: vec![T::from_f64(1.0); c],
            norm1_beta: vec![T::default(); c],
            wq: gaussian(c, c),
            wk: gaussian(c, c),
            wv: gaussian(c, c),
            wo: gaussian(c, c),
            norm2_gamma: vec![T::from_f64(1.0); c],
            norm2_beta: vec![T::default(); c],
            mlp_w1: gaussian(c, MLP_RATIO * c),
            mlp_b1: vec![T::default(); MLP_RATIO * c],
            mlp_w2: gaussian(MLP_RATIO * c, c),
            mlp_b2: vec![T::default(); c],
        })
    }

    /// All projections and MLP weights zero; norms at identity.
    pub fn zeros(channels: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let c = channels;
        Ok(Self {
            heads,
            norm1_gamma: vec![T::from_f64(1.0); c],
            norm1_beta: vec![T::default(); c],
            wq: Matrix::zeros(c, c),
            wk: Matrix::zeros(c, c),
            wv: Matrix::zeros(c, c),
            wo: Matrix::zeros(c, c),
            norm2_gamma: vec![T::from_f64(1.0); c],
            norm2_beta: vec![T::default(); c],
            mlp_w1: Matrix::zeros(c, MLP_RATIO * c),
            mlp_b1: vec![T::default(); MLP_RATIO * c],
            mlp_w2: Matrix::zeros(MLP_RATIO * c, c),
            mlp_b2: vec![T::default(); c],
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn cast<U: Scalar>(&self) -> BlockWeights<U> {
        let v = |x: &[T]| x.iter().map(|&a| U::from_f64(a.to_f64())).collect::<Vec<U>>();
        BlockWeights {
            heads: self.heads,
            norm1_gamma: v(&self.norm1_gamma),
            norm1_beta: v(&self.norm1_beta),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            norm2_gamma: v(&self.norm2_gamma),
            norm2_beta: v(&self.norm2_beta),
            mlp_w1: self.mlp_w1.cast(),
            mlp_b1: v(&self.mlp_b1),
            mlp_w2: self.mlp_w2.cast(),
            mlp_b2: v(&self.mlp_b2),
        }
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "{channels} channels cannot be split into {heads} heads"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    None,
    /// Consecutive blocks of `block` frames; a frame sees every frame up to
    /// the end of its own block.
    BlockCausal { block: usize },
}

/// Frame-level attention mask. A query in frame `i` may attend to keys whose
/// frame is at most `limit(i)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionMask {
    /// Start frame of every block after the first, strictly increasing.
    cuts: Vec<usize>,
    causal: bool,
}

impl AttentionMask {
    pub fn none() -> Self {
        Self::default()
    }

    /// Blocks starting at 0 and at each entry of `cuts`.
    pub fn block_causal(cuts: Vec<usize>) -> Result<Self> {
        if cuts.first() == Some(&0) || cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "block cut points must be positive and strictly increasing: {cuts:?}"
            )));
        }
        Ok(Self { cuts, causal: true })
    }

    pub fn from_mode(mode: MaskMode, frames: usize) -> Result<Self> {
        match mode {
            MaskMode::None => Ok(Self::none()),
            MaskMode::BlockCausal { block } => {
                if block == 0 {
                    return Err(Error::InvalidConfig("mask block size must be >= 1".into()));
                }
                Self::block_causal((block..frames).step_by(block).collect())
            }
        }
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    /// Last key frame visible from query frame `frame`.
    pub fn limit(&self, frame: usize) -> usize {
        if !self.causal {
            return usize::MAX;
        }
        match self.cuts.iter().find(|&&c| c > frame) {
            Some(&next) => next - 1,
            None => usize::MAX,
        }
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if let Some(&last) = self.cuts.last() {
            if last >= frames {
                return Err(Error::MaskProvenance(format!(
                    "cut point {last} lies beyond the {frames} frames of the sequence"
                )));
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention. `q` rows attend to `k`/`v` rows;
/// row visibility comes from the frame labels and the mask. Returns the
/// concatenated head outputs and the number of fully masked query rows,
/// whose outputs are left at zero.
pub fn multi_head_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    query_frames: &[usize],
    key_frames: &[usize],
    mask: &AttentionMask,
) -> Result<(Matrix<T>, usize)> {
    let c = q.cols();
    if k.cols() != c || v.cols() != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            actual: k.cols().min(v.cols()),
        });
    }
    if k.rows() != v.rows() || key_frames.len() != k.rows() || query_frames.len() != q.rows() {
        return Err(Error::Shape("attention operands disagree on row counts".into()));
    }
    check_heads(c, heads)?;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let keys = k.to_f64_vec();
    let values = v.to_f64_vec();
    let n_keys = k.rows();
    let mut out = vec![T::default(); q.rows() * c];
    let masked: usize = out
        .par_chunks_mut(c.max(1))
        .enumerate()
        .map(|(i, out_row)| {
            let limit = mask.limit(query_frames[i]);
            let q_row: Vec<f64> = q.row(i).iter().map(|x| x.to_f64()).collect();
            let mut scores = vec![0f64; n_keys];
            let mut acc = vec![0f64; c];
            let mut fully_masked = false;
            for h in 0..heads {
                let qh = &q_row[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = if key_frames[j] <= limit {
                        let kh = &keys[j * c + h * dh..j * c + (h + 1) * dh];
                        qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                if !softmax_in_place(&mut scores) {
                    fully_masked = true;
                    continue;
                }
                let out_h = &mut acc[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &values[j * c + h * dh..j * c + (h + 1) * dh];
                    for (o, x) in out_h.iter_mut().zip(vh) {
                        *o += p * x;
                    }
                }
            }
            for (o, a) in out_row.iter_mut().zip(acc) {
                *o = T::from_f64(a);
            }
            usize::from(fully_masked)
        })
        .sum();
    Ok((Matrix::from_vec(q.rows(), c, out)?, masked))
}

/// One pre-norm block: `h = x + Attn(LN1(x), LN1(kv))·Wo`, then
/// `h + MLP(LN2(h))`. With `kv = None` this is self-attention.
pub fn transformer_block<T: Scalar>(
    x: &Matrix<T>,
    kv: Option<&Matrix<T>>,
    w: &BlockWeights<T>,
    query_frames: &[usize],
    key_frames: &[usize],
    mask: &AttentionMask,
) -> Result<Matrix<T>> {
    if x.cols() != w.channels() {
        return Err(Error::ChannelMismatch {
            expected: w.channels(),
            actual: x.cols(),
        });
    }
    let xn = layer_norm(x, &w.norm1_gamma, &w.norm1_beta, LAYER_NORM_EPS)?;
    let q = matmul(&xn, &w.wq)?;
    let (k, v) = match kv {
        None => (matmul(&xn, &w.wk)?, matmul(&xn, &w.wv)?),
        Some(src) => {
            let sn = layer_norm(src, &w.norm1_gamma, &w.norm1_beta, LAYER_NORM_EPS)?;
            (matmul(&sn, &w.wk)?, matmul(&sn, &w.wv)?)
        }
    };
    let (attn, masked) = multi_head_attention(&q, &k, &v, w.heads, query_frames, key_frames, mask)?;
    if masked > 0 {
        tracing::warn!(rows = masked, "fully masked attention rows passed through residual only");
    }
    let h = x.add(&matmul(&attn, &w.wo)?)?;
    let hn = layer_norm(&h, &w.norm2_gamma, &w.norm2_beta, LAYER_NORM_EPS)?;
    h.add(&mlp(&hn, &w.mlp_w1, &w.mlp_b1, &w.mlp_w2, &w.mlp_b2)?)
}

/// Frame index of every token of `t`, offset by `frame_offset`.
pub fn token_frames<T: Scalar>(t: &TokenTensor<T>, frame_offset: usize) -> Vec<usize> {
    let n = t.tokens_per_frame();
    (0..t.total_tokens()).map(|i| i / n + frame_offset).collect()
}

/// Self-attention within each frame independently.
pub fn frame_attention<T: Scalar>(t: &TokenTensor<T>, w: &BlockWeights<T>) -> Result<TokenTensor<T>> {
    if t.channels() != w.channels() {
        return Err(Error::ChannelMismatch {
            expected: w.channels(),
            actual: t.channels(),
        });
    }
    let labels = vec![0; t.tokens_per_frame()];
    let outputs: Vec<Matrix<T>> = (0..t.frames())
        .into_par_iter()
        .map(|f| transformer_block(&t.frame(f)?, None, w, &labels, &labels, &AttentionMask::none()))
        .collect::<Result<_>>()?;
    TokenTensor::from_frames(t.layout(), &outputs)
}

/// Self-attention over all K = S·N tokens, reshaped back to S frames.
pub fn dense_global_attention<T: Scalar>(
    t: &TokenTensor<T>,
    w: &BlockWeights<T>,
    mask: &AttentionMask,
) -> Result<TokenTensor<T>> {
    mask.check_frames(t.frames())?;
    let frames = token_frames(t, 0);
    let out = transformer_block(&t.to_global(), None, w, &frames, &frames, mask)?;
    TokenTensor::from_global(t.frames(), t.layout(), out)
}

/// Cross-attention: every token of `t` queries the bundle's descriptors.
/// `frame_offset` is the global frame index of `t`'s first frame; bundle
/// provenance and the mask use global indices.
pub fn descriptor_attention_at<T: Scalar>(
    t: &TokenTensor<T>,
    bundle: &DescriptorBundle<T>,
    w: &BlockWeights<T>,
    mask: &AttentionMask,
    frame_offset: usize,
) -> Result<TokenTensor<T>> {
    if bundle.descriptors.cols() != t.channels() {
        return Err(Error::ChannelMismatch {
            expected: t.channels(),
            actual: bundle.descriptors.cols(),
        });
    }
    let end = frame_offset + t.frames();
    if let Some(p) = bundle.provenance.iter().find(|p| p.frame >= end) {
        return Err(Error::MaskProvenance(format!(
            "descriptor from frame {} but the sequence ends at frame {}",
            p.frame,
            end - 1
        )));
    }
    mask.check_frames(end)?;
    let query_frames = token_frames(t, frame_offset);
    let out = transformer_block(
        &t.to_global(),
        Some(&bundle.descriptors),
        w,
        &query_frames,
        &bundle.key_frames(),
        mask,
    )?;
    TokenTensor::from_global(t.frames(), t.layout(), out)
}

pub fn descriptor_attention<T: Scalar>(
    t: &TokenTensor<T>,
    bundle: &DescriptorBundle<T>,
    w: &BlockWeights<T>,
    mask: &AttentionMask,
) -> Result<TokenTensor<T>> {
    descriptor_attention_at(t, bundle, w, mask, 0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMode {
    Frame,
    #[default]
    Global,
}

pub const HISTOGRAM_BINS: usize = 64;

/// Post-softmax attention probabilities in 64 equal bins over [0, 1],
/// aggregated over heads and query rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_of(p: f64) -> usize {
        ((p * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn bin_edges(bin: usize) -> (f64, f64) {
        let w = 1.0 / HISTOGRAM_BINS as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = Self::bin_edges(b);
            out.push_str(&format!("{lo:.6},{hi:.6},{c}\n"));
        }
        out
    }
}

fn probability_histogram<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, heads: usize) -> Vec<u64> {
    let c = q.cols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let keys = k.to_f64_vec();
    (0..q.rows())
        .into_par_iter()
        .map(|i| {
            let mut counts = vec![0u64; HISTOGRAM_BINS];
            let q_row: Vec<f64> = q.row(i).iter().map(|x| x.to_f64()).collect();
            let mut scores = vec![0f64; k.rows()];
            for h in 0..heads {
                let qh = &q_row[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * c + h * dh..j * c + (h + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                for &p in &scores {
                    counts[Histogram::bin_of(p)] += 1;
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; HISTOGRAM_BINS],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

/// Histogram of the attention probabilities the block `w` computes on `t`,
/// either within frames or over the whole global sequence (unmasked).
pub fn attention_score_histogram<T: Scalar>(
    t: &TokenTensor<T>,
    w: &BlockWeights<T>,
    mode: HistogramMode,
) -> Result<Histogram> {
    let project = |x: &Matrix<T>| -> Result<(Matrix<T>, Matrix<T>)> {
        let xn = layer_norm(x, &w.norm1_gamma, &w.norm1_beta, LAYER_NORM_EPS)?;
        Ok((matmul(&xn, &w.wq)?, matmul(&xn, &w.wk)?))
    };
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let mut add = |x: &Matrix<T>| -> Result<()> {
        let (q, k) = project(x)?;
        for (c, n) in counts.iter_mut().zip(probability_histogram(&q, &k, w.heads)) {
            *c += n;
        }
        Ok(())
    };
    match mode {
        HistogramMode::Global => add(&t.to_global())?,
        HistogramMode::Frame => {
            for f in 0..t.frames() {
                add(&t.frame(f)?)?;
            }
        }
    }
    Ok(Histogram { counts })
}
