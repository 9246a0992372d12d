//! Descriptor generation: per-frame spatial compression of the patch grid,
//! key-frame selection and assembly of the descriptor bundle with its
//! auxiliary anchor tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{streams, Rng};
use crate::tensor::{matmul, resample_bilinear, resample_nearest, Grid, Matrix, Scalar};
use crate::tokens::{FrameLayout, TokenTensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMethod {
    #[default]
    Bilinear,
    Nearest,
    Avgpool,
    TopkNorm,
    LearnedConv,
}

impl CompressionMethod {
    pub const ALL: [CompressionMethod; 5] = [
        CompressionMethod::Bilinear,
        CompressionMethod::Nearest,
        CompressionMethod::Avgpool,
        CompressionMethod::TopkNorm,
        CompressionMethod::LearnedConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompressionMethod::Bilinear => "bilinear",
            CompressionMethod::Nearest => "nearest",
            CompressionMethod::Avgpool => "avgpool",
            CompressionMethod::TopkNorm => "topk_norm",
            CompressionMethod::LearnedConv => "learned_conv",
        }
    }
}

impl std::fmt::Display for CompressionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CompressionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown compression method `{s}`")))
    }
}

/// Compression method plus spatial ratio r.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Compression {
    pub method: CompressionMethod,
    pub ratio: usize,
}

impl Default for Compression {
    fn default() -> Self {
        Self {
            method: CompressionMethod::Bilinear,
            ratio: 4,
        }
    }
}

impl Compression {
    pub fn validate(&self, layout: &FrameLayout) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::InvalidConfig("compression ratio must be >= 1".into()));
        }
        let side = layout.height.min(layout.width);
        if self.ratio > side {
            return Err(Error::RatioTooLarge {
                ratio: self.ratio,
                side,
            });
        }
        Ok(())
    }

    /// (⌊H/r⌋, ⌊W/r⌋)
    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.ratio, width / self.ratio)
    }

    pub fn descriptors_per_frame(&self, layout: &FrameLayout) -> usize {
        let (h, w) = self.output_shape(layout.height, layout.width);
        h * w
    }
}

/// Depth-wise r×r stride-r convolution followed by a per-token linear map.
/// Weights are seeded, never trained.
#[derive(Clone, Debug)]
pub struct LearnedConv<T> {
    ratio: usize,
    /// C × r × r
    depthwise: Vec<T>,
    pointwise: Matrix<T>,
}

impl<T: Scalar> LearnedConv<T> {
    pub fn seeded(channels: usize, ratio: usize, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, streams::COMPRESSOR);
        let dw_scale = 1.0 / ratio as f64;
        let depthwise = (0..channels * ratio * ratio)
            .map(|_| T::from_f64(rng.normal() * dw_scale))
            .collect();
        let pw_scale = 1.0 / (channels as f64).sqrt();
        let pw: Vec<f64> = (0..channels * channels).map(|_| rng.normal() * pw_scale).collect();
        Self {
            ratio,
            depthwise,
            pointwise: Matrix::from_f64(channels, channels, &pw).expect("square"),
        }
    }

    fn apply(&self, grid: &Grid<T>) -> Result<Grid<T>> {
        let r = self.ratio;
        let c = grid.channels();
        if self.pointwise.rows() != c {
            return Err(Error::ChannelMismatch {
                expected: self.pointwise.rows(),
                actual: c,
            });
        }
        let (oh, ow) = (grid.height() / r, grid.width() / r);
        let mut conv = Vec::with_capacity(oh * ow * c);
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for di in 0..r {
                        for dj in 0..r {
                            let w = self.depthwise[(ch * r + di) * r + dj].to_f64();
                            acc += w * grid.token(i * r + di, j * r + dj)[ch].to_f64();
                        }
                    }
                    conv.push(T::from_f64(acc));
                }
            }
        }
        let mixed = matmul(&Matrix::from_vec(oh * ow, c, conv)?, &self.pointwise)?;
        Grid::from_matrix(oh, ow, mixed)
    }
}

/// Compressed descriptor grid of one frame. `sources[k]` is the grid cell
/// index the k-th descriptor came from: the descriptor cell itself for the
/// resampling methods, the original patch index for `topk_norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedFrame<T> {
    pub grid: Grid<T>,
    pub sources: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Compressor<T> {
    compression: Compression,
    learned: Option<LearnedConv<T>>,
}

impl<T: Scalar> Compressor<T> {
    pub fn new(compression: Compression, channels: usize, seed: u64) -> Self {
        let learned = (compression.method == CompressionMethod::LearnedConv)
            .then(|| LearnedConv::seeded(channels, compression.ratio, seed));
        Self { compression, learned }
    }

    pub fn compression(&self) -> Compression {
        self.compression
    }

    pub fn compress_frame(&self, grid: &Grid<T>) -> Result<CompressedFrame<T>> {
        let r = self.compression.ratio;
        let side = grid.height().min(grid.width());
        if r == 0 || r > side {
            return Err(Error::RatioTooLarge { ratio: r, side });
        }
        let (oh, ow) = self.compression.output_shape(grid.height(), grid.width());
        let cells: Vec<usize> = (0..oh * ow).collect();
        let out = match self.compression.method {
            CompressionMethod::Bilinear => resample_bilinear(grid, oh, ow)?,
            CompressionMethod::Nearest => resample_nearest(grid, oh, ow)?,
            CompressionMethod::Avgpool => avg_pool(grid, oh, ow)?,
            CompressionMethod::LearnedConv => match &self.learned {
                Some(l) => l.apply(grid)?,
                None => LearnedConv::seeded(grid.channels(), r, 0).apply(grid)?,
            },
            CompressionMethod::TopkNorm => {
                let picked = top_k_by_norm(grid, oh * ow);
                let mut data = Vec::with_capacity(oh * ow * grid.channels());
                for &p in &picked {
                    data.extend_from_slice(grid.token(p / grid.width(), p % grid.width()));
                }
                let grid = Grid::from_vec(oh, ow, grid.channels(), data)?;
                return Ok(CompressedFrame { grid, sources: picked });
            }
        };
        Ok(CompressedFrame {
            grid: out,
            sources: cells,
        })
    }
}

/// Averages r×r cells. When r does not divide a side, the last cell along it
/// also absorbs the leftover rows/columns.
fn avg_pool<T: Scalar>(grid: &Grid<T>, oh: usize, ow: usize) -> Result<Grid<T>> {
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let bounds = |k: usize, out: usize, size: usize| {
        let cell = size / out;
        let end = if k + 1 == out { size } else { (k + 1) * cell };
        (k * cell, end)
    };
    let mut data = Vec::with_capacity(oh * ow * c);
    let mut acc = vec![0f64; c];
    for i in 0..oh {
        let (i0, i1) = bounds(i, oh, h);
        for j in 0..ow {
            let (j0, j1) = bounds(j, ow, w);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for y in i0..i1 {
                for x in j0..j1 {
                    for (a, v) in acc.iter_mut().zip(grid.token(y, x)) {
                        *a += v.to_f64();
                    }
                }
            }
            let count = ((i1 - i0) * (j1 - j0)) as f64;
            data.extend(acc.iter().map(|a| T::from_f64(a / count)));
        }
    }
    Grid::from_vec(oh, ow, c, data)
}

/// Indices of the `budget` largest-norm cells (ties prefer the lower index),
/// returned in row-major order.
pub fn top_k_by_norm<T: Scalar>(grid: &Grid<T>, budget: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..grid.height() * grid.width())
        .map(|p| {
            let tok = grid.token(p / grid.width(), p % grid.width());
            (tok.iter().map(|v| v.to_f64().powi(2)).sum::<f64>(), p)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = scored.into_iter().take(budget).map(|(_, p)| p).collect();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeMethod {
    #[default]
    Cluster,
    Random,
    FixedStride,
}

impl KeyframeMethod {
    pub const ALL: [KeyframeMethod; 3] = [
        KeyframeMethod::Cluster,
        KeyframeMethod::Random,
        KeyframeMethod::FixedStride,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KeyframeMethod::Cluster => "cluster",
            KeyframeMethod::Random => "random",
            KeyframeMethod::FixedStride => "fixed_stride",
        }
    }
}

impl std::fmt::Display for KeyframeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for KeyframeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown keyframe selector `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyframeSelector {
    pub method: KeyframeMethod,
    /// Frames per keyframe.
    pub interval: usize,
    pub seed: u64,
}

impl Default for KeyframeSelector {
    fn default() -> Self {
        Self {
            method: KeyframeMethod::Cluster,
            interval: 200,
            seed: 0,
        }
    }
}

impl KeyframeSelector {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::InvalidConfig("keyframe interval must be >= 1".into()));
        }
        Ok(())
    }

    /// ⌈S / interval⌉
    pub fn count(&self, frames: usize) -> usize {
        frames.div_ceil(self.interval.max(1))
    }

    /// Total when every block of `block` frames selects its own key-frames.
    pub fn count_blocked(&self, frames: usize, block: usize) -> usize {
        let block = block.max(1);
        (frames / block) * self.count(block) + self.count(frames % block)
    }
}

/// Mean token (special and patch tokens alike) of every frame.
pub fn frame_means<T: Scalar>(t: &TokenTensor<T>) -> Vec<Vec<f64>> {
    let (n, c) = (t.tokens_per_frame(), t.channels());
    (0..t.frames())
        .map(|f| {
            let mut mean = vec![0f64; c];
            for k in 0..n {
                for (m, v) in mean.iter_mut().zip(t.token(f, k)) {
                    *m += v.to_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            mean
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective after every assignment step.
    pub objective_history: Vec<f64>,
}

pub const LLOYD_MAX_ITERATIONS: usize = 100;

/// Lloyd's algorithm with centroids seeded at evenly strided points
/// (`floor(j·n/k)`). Stops at an assignment fixpoint or after
/// [`LLOYD_MAX_ITERATIONS`]. Ties go to the lowest centroid index; empty
/// clusters keep their previous centroid.
pub fn lloyd(points: &[Vec<f64>], k: usize) -> KMeans {
    let n = points.len();
    let k = k.min(n);
    let mut centroids: Vec<Vec<f64>> = (0..k).map(|j| points[j * n / k].clone()).collect();
    let mut assignments: Vec<usize> = Vec::new();
    let mut objective_history = Vec::new();
    for _ in 0..LLOYD_MAX_ITERATIONS {
        let mut objective = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (best, d) = centroids
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (j, sq_dist(p, c)))
                    .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
                objective += d;
                best
            })
            .collect();
        objective_history.push(objective);
        if next == assignments {
            break;
        }
        assignments = next;
        let dim = points.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    KMeans {
        centroids,
        assignments,
        objective_history,
    }
}

/// Key-frame indices, strictly increasing, exactly ⌈S/interval⌉ of them.
pub fn select_keyframes<T: Scalar>(t: &TokenTensor<T>, sel: &KeyframeSelector) -> Result<Vec<usize>> {
    sel.validate()?;
    let frames = t.frames();
    let k = sel.count(frames);
    let picked = match sel.method {
        KeyframeMethod::FixedStride => (0..k).map(|i| i * sel.interval).collect(),
        KeyframeMethod::Random => Rng::derive(sel.seed, streams::KEYFRAMES).sample_without_replacement(frames, k),
        KeyframeMethod::Cluster => {
            let means = frame_means(t);
            let km = lloyd(&means, k);
            let mut taken = vec![false; frames];
            let mut picked = Vec::with_capacity(k);
            for (j, centroid) in km.centroids.iter().enumerate() {
                let members: Vec<usize> = (0..frames).filter(|&f| km.assignments[f] == j).collect();
                let pool: Vec<usize> = if members.is_empty() {
                    (0..frames).filter(|&f| !taken[f]).collect()
                } else {
                    members
                };
                let best = pool
                    .into_iter()
                    .map(|f| (f, sq_dist(&means[f], centroid)))
                    .fold((usize::MAX, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc })
                    .0;
                taken[best] = true;
                picked.push(best);
            }
            picked.sort_unstable();
            picked
        }
    };
    Ok(picked)
}

/// Which auxiliary anchor groups join the compressed descriptors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuxGroups {
    pub camera_register: bool,
    pub first_frame: bool,
    pub keyframes: bool,
}

impl Default for AuxGroups {
    fn default() -> Self {
        Self::all()
    }
}

impl AuxGroups {
    pub const fn all() -> Self {
        Self {
            camera_register: true,
            first_frame: true,
            keyframes: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            camera_register: false,
            first_frame: false,
            keyframes: false,
        }
    }

    pub fn from_flag(include: bool) -> Self {
        if include {
            Self::all()
        } else {
            Self::none()
        }
    }

    pub fn any(&self) -> bool {
        self.camera_register || self.first_frame || self.keyframes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Compressed,
    Camera,
    Register,
    FirstFramePatch,
    KeyframePatch,
}

/// Origin of one descriptor. `offset` is the source grid cell for
/// `Compressed` (see [`CompressedFrame::sources`]) and the token offset
/// within the frame for every other kind. For `FirstFramePatch` and
/// `KeyframePatch` all N tokens of the frame are copied, special ones included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub frame: usize,
    pub kind: DescriptorKind,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorBundle<T> {
    pub descriptors: Matrix<T>,
    pub provenance: Vec<Provenance>,
}

impl<T: Scalar> DescriptorBundle<T> {
    pub fn empty(channels: usize) -> Self {
        Self {
            descriptors: Matrix::zeros(0, channels),
            provenance: Vec::new(),
        }
    }

    /// K_d
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn count(&self, kind: DescriptorKind) -> usize {
        self.provenance.iter().filter(|p| p.kind == kind).count()
    }

    pub fn key_frames(&self) -> Vec<usize> {
        self.provenance.iter().map(|p| p.frame).collect()
    }

    /// Appends the rows of `other` after this bundle's rows.
    pub fn extend(&mut self, other: &DescriptorBundle<T>) -> Result<()> {
        self.descriptors = Matrix::vstack(&[&self.descriptors, &other.descriptors])?;
        self.provenance.extend_from_slice(&other.provenance);
        Ok(())
    }

    /// Keeps the rows for which `keep` returns true.
    pub fn filter(&self, keep: impl Fn(&Provenance) -> bool) -> Self {
        let c = self.descriptors.cols();
        let mut data = Vec::new();
        let mut provenance = Vec::new();
        for (i, p) in self.provenance.iter().enumerate() {
            if keep(p) {
                data.extend_from_slice(self.descriptors.row(i));
                provenance.push(*p);
            }
        }
        Self {
            descriptors: Matrix::from_vec(provenance.len(), c, data).expect("row copy"),
            provenance,
        }
    }
}

/// Bundle layout: compressed descriptors of frames 0..S-1, then camera and
/// register tokens of frames 0..S-1, then every token of the sequence's first
/// frame, then every token of each key-frame in frame order. Auxiliary tokens
/// are copied verbatim.
///
/// `frame_offset` is the global index of `t`'s frame 0; provenance carries
/// global indices. The first-frame group is only present when the tensor
/// starts at global frame 0.
pub fn assemble_bundle<T: Scalar>(
    t: &TokenTensor<T>,
    compressor: &Compressor<T>,
    keyframes: &[usize],
    aux: AuxGroups,
    frame_offset: usize,
) -> Result<DescriptorBundle<T>> {
    let layout = t.layout();
    compressor.compression().validate(&layout)?;
    let c = layout.channels;
    let compressed: Vec<CompressedFrame<T>> = (0..t.frames())
        .into_par_iter()
        .map(|f| {
            let (_, grid) = t.split_grid(f)?;
            compressor.compress_frame(&grid)
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for (f, cf) in compressed.iter().enumerate() {
        data.extend_from_slice(cf.grid.data());
        provenance.extend(cf.sources.iter().map(|&offset| Provenance {
            frame: f + frame_offset,
            kind: DescriptorKind::Compressed,
            offset,
        }));
    }
    if aux.camera_register {
        for f in 0..t.frames() {
            for k in 0..layout.special_tokens() {
                data.extend_from_slice(t.token(f, k));
                let kind = if k < layout.n_camera {
                    DescriptorKind::Camera
                } else {
                    DescriptorKind::Register
                };
                provenance.push(Provenance {
                    frame: f + frame_offset,
                    kind,
                    offset: k,
                });
            }
        }
    }
    let mut push_frame = |f: usize, kind: DescriptorKind| {
        data.extend_from_slice(t.frame_data(f).expect("frame in range"));
        provenance.extend((0..layout.tokens_per_frame()).map(|offset| Provenance {
            frame: f + frame_offset,
            kind,
            offset,
        }));
    };
    if aux.first_frame && frame_offset == 0 {
        push_frame(0, DescriptorKind::FirstFramePatch);
    }
    if aux.keyframes {
        for &f in keyframes {
            if f >= t.frames() {
                return Err(Error::FrameOutOfRange {
                    index: f,
                    frames: t.frames(),
                });
            }
            push_frame(f, DescriptorKind::KeyframePatch);
        }
    }
    Ok(DescriptorBundle {
        descriptors: Matrix::from_vec(provenance.len(), c, data)?,
        provenance,
    })
}

/// Selects key-frames (when that group is enabled) and assembles the bundle.
pub fn build_bundle<T: Scalar>(
    t: &TokenTensor<T>,
    compressor: &Compressor<T>,
    selector: &KeyframeSelector,
    aux: AuxGroups,
) -> Result<DescriptorBundle<T>> {
    let keyframes = if aux.keyframes {
        select_keyframes(t, selector)?
    } else {
        Vec::new()
    };
    assemble_bundle(t, compressor, &keyframes, aux, 0)
}

/// K_d for a sequence of `frames` frames with `keyframes` key-frames.
pub fn bundle_size(layout: &FrameLayout, compression: &Compression, frames: usize, keyframes: usize, aux: AuxGroups) -> usize {
    let mut kd = frames * compression.descriptors_per_frame(layout);
    if aux.camera_register {
        kd += frames * layout.special_tokens();
    }
    if aux.first_frame {
        kd += layout.tokens_per_frame();
    }
    if aux.keyframes {
        kd += keyframes * layout.tokens_per_frame();
    }
    kd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tokens::generate_synthetic;
    use proptest::prelude::*;

    fn grid_from_norms(norms: &[f64], w: usize) -> Grid<f64> {
        Grid::from_fn(norms.len() / w, w, 2, |i, j, c| if c == 0 { norms[i * w + j] } else { 0.0 })
    }

    #[test]
    fn ratio_one_is_identity_for_resamplers() {
        let l = FrameLayout::desk();
        let t = generate_synthetic::<f32>(1, l, 4).unwrap();
        let (_, grid) = t.split_grid(0).unwrap();
        for m in [CompressionMethod::Bilinear, CompressionMethod::Nearest, CompressionMethod::Avgpool] {
            let comp = Compressor::new(Compression { method: m, ratio: 1 }, l.channels, 0);
            assert_eq!(comp.compress_frame(&grid).unwrap().grid, grid, "{m}");
        }
    }

    #[test]
    fn avgpool_constant_and_partial_cells() {
        let g = Grid::<f64>::from_fn(6, 5, 1, |_, _, _| 1.5);
        let comp = Compressor::new(Compression { method: CompressionMethod::Avgpool, ratio: 2 }, 1, 0);
        let out = comp.compress_frame(&g).unwrap().grid;
        assert_eq!((out.height(), out.width()), (3, 2));
        assert!(out.data().iter().all(|&v| v == 1.5));

        // 3 columns, r=2: one output column averaging all three
        let g = Grid::<f64>::from_fn(2, 3, 1, |_, j, _| j as f64);
        let out = Compressor::new(Compression { method: CompressionMethod::Avgpool, ratio: 2 }, 1, 0)
            .compress_frame(&g)
            .unwrap()
            .grid;
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn topk_norm_keeps_largest_in_row_major_order() {
        // 2x2 grid with norms (5, 1, 3, 2), budget 2 -> cells 0 and 2
        let g = grid_from_norms(&[5.0, 1.0, 3.0, 2.0], 2);
        let picked = top_k_by_norm(&g, 2);
        let mut oracle: Vec<(f64, usize)> = [5.0, 1.0, 3.0, 2.0].iter().copied().zip(0..).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut want: Vec<usize> = oracle[..2].iter().map(|x| x.1).collect();
        want.sort();
        assert_eq!(picked, want);
        assert_eq!(picked, vec![0, 2]);

        let comp = Compressor::new(Compression { method: CompressionMethod::TopkNorm, ratio: 2 }, 2, 0);
        let g = grid_from_norms(&[1.0, 4.0, 4.0, 2.0, 0.5, 9.0, 3.0, 3.0, 7.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8], 4);
        let cf = comp.compress_frame(&g).unwrap();
        assert_eq!(cf.sources, vec![1, 2, 5, 8]);
        assert_eq!(cf.grid.token(0, 0), g.token(0, 1));
    }

    #[test]
    fn ratio_above_grid_is_rejected() {
        let g = Grid::<f32>::from_fn(3, 8, 1, |_, _, _| 0.0);
        for m in CompressionMethod::ALL {
            let comp = Compressor::new(Compression { method: m, ratio: 4 }, 1, 0);
            assert!(matches!(comp.compress_frame(&g), Err(Error::RatioTooLarge { ratio: 4, side: 3 })));
        }
    }

    #[test]
    fn learned_conv_shape_and_determinism() {
        let l = FrameLayout::desk();
        let t = generate_synthetic::<f32>(1, l, 4).unwrap();
        let (_, grid) = t.split_grid(0).unwrap();
        let a = Compressor::<f32>::new(Compression { method: CompressionMethod::LearnedConv, ratio: 4 }, 32, 9);
        let b = Compressor::<f32>::new(Compression { method: CompressionMethod::LearnedConv, ratio: 4 }, 32, 9);
        let out = a.compress_frame(&grid).unwrap();
        assert_eq!((out.grid.height(), out.grid.width(), out.grid.channels()), (2, 2, 32));
        assert_eq!(out, b.compress_frame(&grid).unwrap());
    }

    #[test]
    fn keyframe_counts_and_stride() {
        let l = FrameLayout { height: 2, width: 2, n_camera: 1, n_register: 0, channels: 3 };
        let t = generate_synthetic::<f64>(500, l, 1).unwrap();
        let stride = KeyframeSelector { method: KeyframeMethod::FixedStride, interval: 200, seed: 0 };
        assert_eq!(select_keyframes(&t, &stride).unwrap(), vec![0, 200, 400]);
        for method in KeyframeMethod::ALL {
            let sel = KeyframeSelector { method, interval: 200, seed: 3 };
            let picked = select_keyframes(&t, &sel).unwrap();
            assert_eq!(picked.len(), 3);
            assert!(picked.windows(2).all(|w| w[0] < w[1]));
            let short = t.slice_frames(0..150).unwrap();
            assert_eq!(select_keyframes(&short, &sel).unwrap().len(), 1);
        }
    }

    /// Brute-force 2-means: try every pair of frames as initial centroids,
    /// assign, and keep the partition with the lowest objective.
    fn brute_force_two_means(points: &[Vec<f64>]) -> Vec<usize> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let groups: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut obj = 0.0;
            for g in 0..2 {
                let members: Vec<&Vec<f64>> = (0..n).filter(|&i| groups[i] == g).map(|i| &points[i]).collect();
                let dim = points[0].len();
                let centroid: Vec<f64> = (0..dim)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                obj += members.iter().map(|p| sq_dist(p, &centroid)).sum::<f64>();
            }
            if obj < best.0 {
                best = (obj, groups);
            }
        }
        best.1
    }

    #[test]
    fn cluster_selection_picks_one_frame_per_cluster() {
        let l = FrameLayout { height: 2, width: 2, n_camera: 1, n_register: 1, channels: 4 };
        let noise = generate_synthetic::<f64>(8, l, 21).unwrap();
        // frames 0,2,3,6 near +5, the rest near -5
        let side = [1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        let mut t = noise.clone();
        for (f, s) in side.iter().enumerate() {
            t = t.map_frame(f, |v| 0.1 * v + 5.0 * s).unwrap();
        }
        let partition = brute_force_two_means(&frame_means(&t));
        let sel = KeyframeSelector { method: KeyframeMethod::Cluster, interval: 4, seed: 0 };
        let picked = select_keyframes(&t, &sel).unwrap();
        assert_eq!(picked.len(), 2);
        assert_ne!(partition[picked[0]], partition[picked[1]]);
    }

    #[test]
    fn paper_scale_bundle_size() {
        let l = FrameLayout::paper_scale(8);
        let comp = Compression { method: CompressionMethod::Bilinear, ratio: 4 };
        assert_eq!(l.tokens_per_frame(), 1374);
        let sel = KeyframeSelector::default();
        let kd = bundle_size(&l, &comp, 1000, sel.count(1000), AuxGroups::all());
        assert_eq!(kd, 1000 * 81 + 1000 * 5 + 1374 + 5 * 1374);
        assert_eq!(kd, 94_244);
    }

    #[test]
    fn bundle_layout_and_provenance() {
        let l = FrameLayout::desk();
        let t = generate_synthetic::<f32>(2, l, 1).unwrap();
        let comp = Compressor::new(Compression { method: CompressionMethod::Bilinear, ratio: 4 }, l.channels, 0);
        let sel = KeyframeSelector { method: KeyframeMethod::FixedStride, interval: 200, seed: 0 };
        let off = build_bundle(&t, &comp, &sel, AuxGroups::none()).unwrap();
        assert_eq!(off.len(), 8);
        let on = build_bundle(&t, &comp, &sel, AuxGroups::all()).unwrap();
        assert_eq!(on.len(), bundle_size(&l, &comp.compression(), 2, 1, AuxGroups::all()));
        // frame 0 is both first frame and the only key-frame: three copies of its tokens
        assert_eq!(on.count(DescriptorKind::FirstFramePatch), 69);
        assert_eq!(on.count(DescriptorKind::KeyframePatch), 69);
        let first_rows: Vec<usize> = on
            .provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == DescriptorKind::FirstFramePatch)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(on.descriptors.row(first_rows[7]), t.token(0, 7));
        let camera = on.provenance.iter().position(|p| p.kind == DescriptorKind::Camera).unwrap();
        assert_eq!(camera, 8);
        assert_eq!(on.descriptors.row(camera + 5), t.token(1, 0));
    }

    proptest! {
        #[test]
        fn descriptor_count_matches_budget(h in 1usize..10, w in 1usize..10, r in 1usize..5, seed in any::<u64>()) {
            prop_assume!(r <= h.min(w));
            let l = FrameLayout { height: h, width: w, n_camera: 1, n_register: 1, channels: 3 };
            let t = generate_synthetic::<f32>(1, l, seed).unwrap();
            let (_, grid) = t.split_grid(0).unwrap();
            for m in CompressionMethod::ALL {
                let comp = Compressor::new(Compression { method: m, ratio: r }, 3, seed);
                let cf = comp.compress_frame(&grid).unwrap();
                prop_assert_eq!(cf.grid.height() * cf.grid.width(), (h / r) * (w / r));
                prop_assert_eq!(cf.sources.len(), (h / r) * (w / r));
            }
        }

        #[test]
        fn avgpool_preserves_mean_on_divisible_grids(k in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
            let l = FrameLayout { height: k * r, width: 2 * k * r, n_camera: 0, n_register: 0, channels: 2 };
            let t = generate_synthetic::<f64>(1, l, seed).unwrap();
            let (_, grid) = t.split_grid(0).unwrap();
            let comp = Compressor::new(Compression { method: CompressionMethod::Avgpool, ratio: r }, 2, 0);
            let out = comp.compress_frame(&grid).unwrap().grid;
            for c in 0..2 {
                let mean_in = grid.data().iter().skip(c).step_by(2).sum::<f64>() / (grid.data().len() / 2) as f64;
                let mean_out = out.data().iter().skip(c).step_by(2).sum::<f64>() / (out.data().len() / 2) as f64;
                prop_assert!((mean_in - mean_out).abs() < 1e-12);
            }
        }

        #[test]
        fn lloyd_objective_nonincreasing(n in 2usize..30, k in 1usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            let km = lloyd(&points, k);
            for w in km.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn topk_is_permutation_equivariant(norms in proptest::collection::vec(0.0f64..10.0, 4..16), budget in 1usize..4, shift in 0usize..16) {
            let n = norms.len();
            let g = grid_from_norms(&norms, 1);
            let picked = top_k_by_norm(&g, budget);
            // rotating the cells rotates the selected values
            let rotated: Vec<f64> = (0..n).map(|i| norms[(i + shift) % n]).collect();
            let g2 = grid_from_norms(&rotated, 1);
            let mut a: Vec<f64> = picked.iter().map(|&p| norms[p]).collect();
            let mut b: Vec<f64> = top_k_by_norm(&g2, budget).iter().map(|&p| rotated[p]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn bundle_provenance_is_partition(frames in 1usize..5, aux_bits in 0u8..8, interval in 1usize..4, seed in any::<u64>()) {
            let l = FrameLayout { height: 4, width: 4, n_camera: 1, n_register: 2, channels: 3 };
            let t = generate_synthetic::<f32>(frames, l, seed).unwrap();
            let aux = AuxGroups { camera_register: aux_bits & 1 != 0, first_frame: aux_bits & 2 != 0, keyframes: aux_bits & 4 != 0 };
            let comp = Compressor::new(Compression { method: CompressionMethod::Bilinear, ratio: 2 }, 3, 0);
            let sel = KeyframeSelector { method: KeyframeMethod::Cluster, interval, seed };
            let b = build_bundle(&t, &comp, &sel, aux).unwrap();
            prop_assert_eq!(b.provenance.len(), b.descriptors.rows());
            prop_assert_eq!(b.len(), bundle_size(&l, &comp.compression(), frames, sel.count(frames), aux));
            let unique: std::collections::HashSet<_> = b.provenance.iter().collect();
            prop_assert_eq!(unique.len(), b.len());
        }
    }
}
