use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("resample target {target_h}x{target_w} exceeds source {source_h}x{source_w}")]
    TargetTooLarge {
        source_h: usize,
        source_w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error("compression ratio {ratio} exceeds the smallest grid side {side}")]
    RatioTooLarge { ratio: usize, side: usize },
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("mask inconsistent with provenance: {0}")]
    MaskProvenance(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic tag in sequence dump")]
    BadMagic,
    #[error("unsupported sequence dump version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated sequence dump: header declares {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("sequence dump element width {found} does not match requested width {expected}")]
    ElementWidth { found: usize, expected: usize },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Shape(_) => "shape",
            Error::TargetTooLarge { .. } => "target_too_large",
            Error::RatioTooLarge { .. } => "ratio_too_large",
            Error::FrameOutOfRange { .. } => "frame_out_of_range",
            Error::ChannelMismatch { .. } => "channel_mismatch",
            Error::MaskProvenance(_) => "mask_provenance",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BadMagic => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated { .. } => "truncated",
            Error::ElementWidth { .. } => "element_width",
        }
    }

    /// Errors caused by the caller's input rather than by the library.
    pub fn is_usage(&self) -> bool {
        !matches!(self, Error::DimensionMismatch { .. })
    }
}
