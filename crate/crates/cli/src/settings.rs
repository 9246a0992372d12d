use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use descattn_core::aggregator::AggregatorConfig;
use descattn_core::compression::{AuxGroups, Compression, CompressionMethod, KeyframeMethod, KeyframeSelector};
use descattn_core::streaming::StreamConfig;
use descattn_core::{FrameLayout, Precision};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Md,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad grid height in `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad grid width in `{s}`"))?;
    Ok((h, w))
}

fn parse_method(s: &str) -> Result<CompressionMethod, String> {
    s.parse().map_err(|e: descattn_core::Error| e.to_string())
}

fn parse_selector(s: &str) -> Result<KeyframeMethod, String> {
    s.parse().map_err(|e: descattn_core::Error| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: descattn_core::Error| e.to_string())
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{s}`")),
    }
}

/// Flags shared by every subcommand. List-valued flags take comma-separated
/// values; only `bench` sweeps over more than one.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Sequence length S.
    #[arg(long, global = true, value_delimiter = ',')]
    pub frames: Vec<usize>,
    /// Compression ratio r.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ratio: Vec<usize>,
    /// Retain one frame's descriptors in every p (streaming).
    #[arg(long, global = true, value_delimiter = ',')]
    pub retain: Vec<usize>,
    /// Frames per chunk (streaming).
    #[arg(long, global = true, value_delimiter = ',')]
    pub chunk: Vec<usize>,
    /// bilinear, nearest, avgpool, topk_norm or learned_conv.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_method)]
    pub method: Vec<CompressionMethod>,
    /// Key-frame selector: cluster, random or fixed_stride.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_selector)]
    pub selector: Vec<KeyframeMethod>,
    /// Add camera/register, first-frame and key-frame tokens to the keys (default).
    #[arg(long, global = true, overrides_with = "no_aux")]
    pub aux: bool,
    #[arg(long = "no-aux", global = true, overrides_with = "aux")]
    pub no_aux: bool,
    /// Frames per key-frame.
    #[arg(long, global = true)]
    pub interval: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub channels: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Patch grid as HxW.
    #[arg(long, global = true, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// Directory for report files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// f32 or f64.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Run independent configurations concurrently.
    #[arg(long, global = true)]
    pub parallel: bool,
    /// key=value file with the same keys as these flags; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Service URL; without it an embedded service is started.
    #[arg(long, global = true)]
    pub server: Option<String>,
}

fn list<T>(key: &str, v: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, CliError> {
    v.split(',')
        .map(|x| parse(x.trim()).map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))))
        .collect()
}

fn one<T>(key: &str, v: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, CliError> {
    parse(v).map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("not a number: `{s}`"))
}

fn single<T: Copy>(flag: &str, values: &[T], default: T) -> Result<T, CliError> {
    match values {
        [] => Ok(default),
        [v] => Ok(*v),
        _ => Err(CliError::Usage(format!("--{flag} takes a single value here (lists are for bench)"))),
    }
}

pub const DEFAULT_FRAMES: usize = 16;

impl Common {
    /// Fills every flag the command line left unset from `file`.
    pub fn merge_file(&mut self, file: &BTreeMap<String, String>) -> Result<(), CliError> {
        for (k, v) in file {
            let v = v.as_str();
            match k.as_str() {
                "frames" if self.frames.is_empty() => self.frames = list(k, v, num)?,
                "ratio" if self.ratio.is_empty() => self.ratio = list(k, v, num)?,
                "retain" if self.retain.is_empty() => self.retain = list(k, v, num)?,
                "chunk" if self.chunk.is_empty() => self.chunk = list(k, v, num)?,
                "method" if self.method.is_empty() => self.method = list(k, v, parse_method)?,
                "selector" if self.selector.is_empty() => self.selector = list(k, v, parse_selector)?,
                "aux" if !self.aux && !self.no_aux => {
                    let on = one(k, v, parse_bool)?;
                    self.aux = on;
                    self.no_aux = !on;
                }
                "no-aux" if !self.aux && !self.no_aux => {
                    let off = one(k, v, parse_bool)?;
                    self.aux = !off;
                    self.no_aux = off;
                }
                "interval" if self.interval.is_none() => self.interval = Some(one(k, v, num)?),
                "seed" if self.seed.is_none() => self.seed = Some(one(k, v, num)?),
                "layers" if self.layers.is_none() => self.layers = Some(one(k, v, num)?),
                "channels" if self.channels.is_none() => self.channels = Some(one(k, v, num)?),
                "heads" if self.heads.is_none() => self.heads = Some(one(k, v, num)?),
                "grid" if self.grid.is_none() => self.grid = Some(one(k, v, parse_grid)?),
                "out" if self.out.is_none() => self.out = Some(PathBuf::from(v)),
                "format" if self.format.is_none() => {
                    self.format = Some(one(k, v, |s| Format::from_str(s, true))?);
                }
                "precision" if self.precision.is_none() => self.precision = Some(one(k, v, parse_precision)?),
                "parallel" if !self.parallel => self.parallel = one(k, v, parse_bool)?,
                "server" if self.server.is_none() => self.server = Some(v.to_string()),
                "frames" | "ratio" | "retain" | "chunk" | "method" | "selector" | "aux" | "no-aux" | "interval"
                | "seed" | "layers" | "channels" | "heads" | "grid" | "out" | "format" | "precision"
                | "parallel" | "server" => {}
                other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn precision(&self) -> Precision {
        self.precision.unwrap_or_default()
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }

    pub fn aux(&self) -> AuxGroups {
        AuxGroups::from_flag(!self.no_aux)
    }

    pub fn layout(&self) -> FrameLayout {
        let (height, width) = self.grid.unwrap_or((8, 8));
        FrameLayout {
            height,
            width,
            channels: self.channels.unwrap_or(32),
            ..FrameLayout::desk()
        }
    }

    pub fn frames(&self) -> Result<usize, CliError> {
        single("frames", &self.frames, DEFAULT_FRAMES)
    }

    /// Aggregator config for commands that take one value per flag.
    pub fn aggregator(&self) -> Result<AggregatorConfig, CliError> {
        let defaults = AggregatorConfig::default();
        Ok(AggregatorConfig {
            layers: self.layers.unwrap_or(defaults.layers),
            heads: self.heads.unwrap_or(defaults.heads),
            layout: self.layout(),
            compression: Compression {
                method: single("method", &self.method, defaults.compression.method)?,
                ratio: single("ratio", &self.ratio, defaults.compression.ratio)?,
            },
            aux: self.aux(),
            keyframes: KeyframeSelector {
                method: single("selector", &self.selector, defaults.keyframes.method)?,
                interval: self.interval.unwrap_or(defaults.keyframes.interval),
                seed: self.seed(),
            },
            seed: self.seed(),
            ..defaults
        })
    }

    pub fn stream(&self) -> Result<StreamConfig, CliError> {
        let defaults = StreamConfig::default();
        Ok(StreamConfig {
            chunk: single("chunk", &self.chunk, defaults.chunk)?,
            retain: single("retain", &self.retain, defaults.retain)?,
            persist_first_frame: true,
            base: self.aggregator()?,
        })
    }
}
