//! Noisy-digit benchmark construction.

mod canvas;
mod glyphs;
mod idx;
mod splits;
pub mod store;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::Tensor;

pub use canvas::{add_noise, add_noise_with_sigma, compose_canvas, compose_canvas_at, NoiseConfig, CANVAS, MAX_SCALE, MIN_SCALE};
pub use glyphs::synth_glyphs;
pub use idx::{parse_idx, RawDigits, IMAGE_MAGIC, LABEL_MAGIC, RAW_SIDE};
pub use splits::{build_splits, generate_benchmark, Counts, DigitSource, SplitConfig, Splits};

/// Class role of a sample relative to the active split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Normal,
    KnownAnomaly,
    UnknownAnomaly,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Normal => "NORMAL",
            Role::KnownAnomaly => "KNOWN_ANOMALY",
            Role::UnknownAnomaly => "UNKNOWN_ANOMALY",
        }
    }

    pub fn is_anomaly(self) -> bool {
        self != Role::Normal
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NORMAL" => Ok(Role::Normal),
            "KNOWN_ANOMALY" => Ok(Role::KnownAnomaly),
            "UNKNOWN_ANOMALY" => Ok(Role::UnknownAnomaly),
            other => Err(Error::Dataset(format!("unknown role `{other}`"))),
        }
    }
}

/// One `[1, H, W]` grayscale image in [0, 1] with its digit and role.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub digit: u8,
    pub role: Role,
    pub pixels: Tensor,
}
