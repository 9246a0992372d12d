//! Descriptor-based global attention for multi-view transformer aggregators.
//!
//! The crate contains a small dense kernel layer ([`tensor`]), the multi-frame
//! token layout ([`tokens`]), descriptor compression ([`compression`]), the
//! attention kernels ([`attention`]), the alternating-attention stack
//! ([`aggregator`]), chunk-recursive streaming inference ([`streaming`]),
//! analytic cost models ([`analysis`]) and the benchmark/verification
//! machinery used by the service and the CLI ([`bench`], [`verify`]).
//!
//! Every kernel stores values as `f32` or `f64` (see [`Scalar`]) and
//! accumulates reductions in `f64`, so results are reproducible regardless of
//! how work is scheduled across threads.

pub mod aggregator;
pub mod analysis;
pub mod api;
pub mod attention;
pub mod bench;
pub mod compression;
mod error;
pub mod rng;
pub mod streaming;
pub mod tensor;
pub mod tokens;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Grid, Matrix, Scalar};
pub use tokens::{FrameLayout, TokenTensor};

/// Storage precision selected at run time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidConfig(format!("unknown precision `{other}`"))),
        }
    }
}
