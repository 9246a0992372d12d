//! Token layout of a multi-frame sequence and its binary dump format.
//!
//! Each frame holds `n_camera` camera tokens, then `n_register` register
//! tokens, then the `height × width` patch grid in row-major order.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::rng::{streams, Rng};
use crate::tensor::{Grid, Matrix, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameLayout {
    pub height: usize,
    pub width: usize,
    pub n_camera: usize,
    pub n_register: usize,
    pub channels: usize,
}

impl Default for FrameLayout {
    fn default() -> Self {
        Self::desk()
    }
}

impl FrameLayout {
    /// 8×8 patches, 32 channels, one camera and four register tokens.
    pub const fn desk() -> Self {
        Self {
            height: 8,
            width: 8,
            n_camera: 1,
            n_register: 4,
            channels: 32,
        }
    }

    /// 37×37 patches: a 518-pixel side cut into 14-pixel patches.
    pub const fn paper_scale(channels: usize) -> Self {
        Self {
            height: 37,
            width: 37,
            n_camera: 1,
            n_register: 4,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid {}x{} with {} channels must be non-empty",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }

    pub fn special_tokens(&self) -> usize {
        self.n_camera + self.n_register
    }

    pub fn patch_tokens(&self) -> usize {
        self.height * self.width
    }

    /// N = n_camera + n_register + H·W.
    pub fn tokens_per_frame(&self) -> usize {
        self.special_tokens() + self.patch_tokens()
    }
}

/// S frames × N tokens × C channels, stored contiguously.
///
/// Viewed frame by frame this is the set of per-frame token matrices; viewed
/// as a whole it is the global sequence of K = S·N tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor<T> {
    frames: usize,
    layout: FrameLayout,
    data: Vec<T>,
}

impl<T: Scalar> TokenTensor<T> {
    pub fn from_vec(frames: usize, layout: FrameLayout, data: Vec<T>) -> Result<Self> {
        layout.validate()?;
        let want = frames * layout.tokens_per_frame() * layout.channels;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "{} values for {frames} frames of {} tokens x {} channels",
                data.len(),
                layout.tokens_per_frame(),
                layout.channels
            )));
        }
        Ok(Self { frames, layout, data })
    }

    pub fn zeros(frames: usize, layout: FrameLayout) -> Result<Self> {
        Self::from_vec(
            frames,
            layout,
            vec![T::default(); frames * layout.tokens_per_frame() * layout.channels],
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn layout(&self) -> FrameLayout {
        self.layout
    }

    pub fn channels(&self) -> usize {
        self.layout.channels
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.layout.tokens_per_frame()
    }

    /// K = S·N.
    pub fn total_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    fn frame_stride(&self) -> usize {
        self.tokens_per_frame() * self.channels()
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frames {
            return Err(Error::FrameOutOfRange {
                index: frame,
                frames: self.frames,
            });
        }
        Ok(())
    }

    pub fn frame_data(&self, frame: usize) -> Result<&[T]> {
        self.check_frame(frame)?;
        let stride = self.frame_stride();
        Ok(&self.data[frame * stride..(frame + 1) * stride])
    }

    /// The N × C token matrix of one frame.
    pub fn frame(&self, frame: usize) -> Result<Matrix<T>> {
        Matrix::from_vec(self.tokens_per_frame(), self.channels(), self.frame_data(frame)?.to_vec())
    }

    /// Token `offset` of `frame`.
    pub fn token(&self, frame: usize, offset: usize) -> &[T] {
        let c = self.channels();
        let start = frame * self.frame_stride() + offset * c;
        &self.data[start..start + c]
    }

    /// The flattened K × C global sequence.
    pub fn to_global(&self) -> Matrix<T> {
        Matrix::from_vec(self.total_tokens(), self.channels(), self.data.clone())
            .expect("token tensor invariant")
    }

    /// Inverse of [`to_global`](Self::to_global).
    pub fn from_global(frames: usize, layout: FrameLayout, global: Matrix<T>) -> Result<Self> {
        if global.cols() != layout.channels {
            return Err(Error::ChannelMismatch {
                expected: layout.channels,
                actual: global.cols(),
            });
        }
        Self::from_vec(frames, layout, global.into_data())
    }

    pub fn from_frames(layout: FrameLayout, frames: &[Matrix<T>]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * layout.tokens_per_frame() * layout.channels);
        for m in frames {
            if m.rows() != layout.tokens_per_frame() || m.cols() != layout.channels {
                return Err(Error::Shape(format!(
                    "frame of {}x{} does not match layout {}x{}",
                    m.rows(),
                    m.cols(),
                    layout.tokens_per_frame(),
                    layout.channels
                )));
            }
            data.extend_from_slice(m.data());
        }
        Self::from_vec(frames.len(), layout, data)
    }

    /// Frames `range` as a new tensor.
    pub fn slice_frames(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.frames {
            return Err(Error::FrameOutOfRange {
                index: range.end,
                frames: self.frames,
            });
        }
        let stride = self.frame_stride();
        Self::from_vec(
            range.len(),
            self.layout,
            self.data[range.start * stride..range.end * stride].to_vec(),
        )
    }

    /// Concatenates tensors along the frame axis.
    pub fn concat(parts: &[TokenTensor<T>]) -> Result<Self> {
        let layout = parts
            .first()
            .map(|p| p.layout)
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.layout != layout {
                return Err(Error::Shape("layouts differ".into()));
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(frames, layout, data)
    }

    /// Returns a copy with frame `frame` replaced by `f(old values)`.
    pub fn map_frame(&self, frame: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.check_frame(frame)?;
        let mut out = self.clone();
        let stride = self.frame_stride();
        for v in &mut out.data[frame * stride..(frame + 1) * stride] {
            *v = T::from_f64(f(v.to_f64()));
        }
        Ok(out)
    }

    /// Splits one frame into its special tokens and its H × W × C patch grid.
    pub fn split_grid(&self, frame: usize) -> Result<(Matrix<T>, Grid<T>)> {
        let data = self.frame_data(frame)?;
        let c = self.channels();
        let split = self.layout.special_tokens() * c;
        let special = Matrix::from_vec(self.layout.special_tokens(), c, data[..split].to_vec())?;
        let grid = Grid::from_vec(self.layout.height, self.layout.width, c, data[split..].to_vec())?;
        Ok((special, grid))
    }

    /// Inverse of [`split_grid`](Self::split_grid) for a single frame.
    pub fn join_grid(layout: FrameLayout, special: &Matrix<T>, grid: &Grid<T>) -> Result<Matrix<T>> {
        if special.rows() != layout.special_tokens()
            || grid.height() != layout.height
            || grid.width() != layout.width
        {
            return Err(Error::Shape("special tokens or grid do not match layout".into()));
        }
        let mut data = special.data().to_vec();
        data.extend_from_slice(grid.data());
        Matrix::from_vec(layout.tokens_per_frame(), layout.channels, data)
    }

    pub fn cast<U: Scalar>(&self) -> TokenTensor<U> {
        TokenTensor {
            frames: self.frames,
            layout: self.layout,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Seeded standard-normal tokens; every channel has unit variance.
pub fn generate_synthetic<T: Scalar>(frames: usize, layout: FrameLayout, seed: u64) -> Result<TokenTensor<T>> {
    if frames == 0 {
        return Err(Error::InvalidConfig("sequence needs at least one frame".into()));
    }
    layout.validate()?;
    let mut rng = Rng::derive(seed, streams::TOKENS);
    let n = frames * layout.tokens_per_frame() * layout.channels;
    let data = (0..n).map(|_| T::from_f64(rng.normal())).collect();
    TokenTensor::from_vec(frames, layout, data)
}

pub const DUMP_MAGIC: [u8; 4] = *b"DSEQ";
pub const DUMP_VERSION: u16 = 1;
/// magic(4) version(2) width(2) S N C H W n_camera n_register (7 × u32)
pub const DUMP_HEADER_LEN: usize = 4 + 2 + 2 + 7 * 4;

/// Serializes a tensor. All integers and values are little-endian.
pub fn save_dump<T: Scalar>(t: &TokenTensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(DUMP_HEADER_LEN + t.data.len() * T::WIDTH);
    out.extend_from_slice(&DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(T::WIDTH as u16).to_le_bytes());
    let l = t.layout;
    for v in [
        t.frames,
        l.tokens_per_frame(),
        l.channels,
        l.height,
        l.width,
        l.n_camera,
        l.n_register,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in &t.data {
        v.write_le(&mut out);
    }
    out
}

/// Header fields of a dump, readable without knowing the element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DumpHeader {
    pub frames: usize,
    pub layout: FrameLayout,
    pub width: usize,
}

pub fn read_dump_header(bytes: &[u8]) -> Result<DumpHeader> {
    if bytes.len() < 4 || bytes[..4] != DUMP_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated {
            expected: DUMP_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DUMP_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DUMP_VERSION,
        });
    }
    if bytes.len() < DUMP_HEADER_LEN {
        return Err(Error::Truncated {
            expected: DUMP_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let width = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (frames, n, channels) = (field(0), field(1), field(2));
    let layout = FrameLayout {
        height: field(3),
        width: field(4),
        n_camera: field(5),
        n_register: field(6),
        channels,
    };
    if layout.tokens_per_frame() != n {
        return Err(Error::Shape(format!(
            "dump header declares N={n} but layout implies {}",
            layout.tokens_per_frame()
        )));
    }
    Ok(DumpHeader { frames, layout, width })
}

pub fn load_dump<T: Scalar>(bytes: &[u8]) -> Result<TokenTensor<T>> {
    let header = read_dump_header(bytes)?;
    if header.width != T::WIDTH {
        return Err(Error::ElementWidth {
            found: header.width,
            expected: T::WIDTH,
        });
    }
    let count = header.frames * header.layout.tokens_per_frame() * header.layout.channels;
    let expected = DUMP_HEADER_LEN + count * T::WIDTH;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[DUMP_HEADER_LEN..]
        .chunks_exact(T::WIDTH)
        .map(T::read_le)
        .collect();
    TokenTensor::from_vec(header.frames, header.layout, data)
}
