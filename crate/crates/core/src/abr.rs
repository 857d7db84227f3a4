//! Adaptive-bitrate policies: the observation a player exposes before each
//! chunk request, the [`Policy`] contract, and the classical rate-based and
//! buffer-based baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quality::RQParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbrError {
    #[error("buffer thresholds need 0 < reservoir < reservoir + cushion <= {buffer_max}, got reservoir {reservoir}, cushion {cushion}")]
    BadThresholds { reservoir: f64, cushion: f64, buffer_max: f64 },
}

/// What a policy sees before requesting chunk `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Throughput of the last `n` downloads in bits/s, oldest first,
    /// zero-padded at the front before `n` chunks exist.
    pub throughput: Vec<f64>,
    /// Download times of the last `n` chunks in seconds, same layout.
    pub download_time: Vec<f64>,
    /// Rate–quality curve of the next chunk.
    pub z: RQParams,
    /// Bitrate of each representation of the next chunk (bits/s, ascending).
    pub bitrates: Vec<f64>,
    /// Quality of each representation of the next chunk (dB).
    pub qualities: Vec<f64>,
    /// Size of each representation of the next chunk (bits).
    pub sizes: Vec<f64>,
    /// Buffer occupancy in seconds.
    pub buffer: f64,
    pub buffer_max: f64,
    /// Chunks not yet downloaded, including the next one.
    pub remaining: usize,
    pub total_chunks: usize,
    /// Quality of the previous chunk (0 before the first chunk).
    pub last_quality: f64,
    pub chunk_duration: f64,
}

impl Observation {
    pub fn levels(&self) -> usize {
        self.bitrates.len()
    }
}

/// A bitrate-selection rule. `decide` must return an index below
/// `obs.levels()`.
pub trait Policy: Send + Sync {
    fn decide(&self, obs: &Observation) -> usize;
    fn name(&self) -> &str;
}

/// Harmonic mean of the nonzero entries, or `None` when there are none.
pub fn harmonic_mean(xs: &[f64]) -> Option<f64> {
    let (n, inv) = xs
        .iter()
        .filter(|&&x| x > 0.0)
        .fold((0usize, 0.0), |(n, s), &x| (n + 1, s + 1.0 / x));
    (n > 0).then(|| n as f64 / inv)
}

/// Highest representation whose bitrate does not exceed the harmonic mean of
/// past throughput; the lowest when none fits or no history exists.
pub fn rate_based(obs: &Observation) -> usize {
    match harmonic_mean(&obs.throughput) {
        Some(c) => obs.bitrates.iter().rposition(|&a| a <= c).unwrap_or(0),
        None => 0,
    }
}

/// Lowest representation below the reservoir, highest above
/// reservoir + cushion, linear (rounded down) in between.
pub fn buffer_based(obs: &Observation, reservoir: f64, cushion: f64) -> usize {
    let top = obs.levels() - 1;
    if obs.buffer <= reservoir {
        0
    } else if obs.buffer >= reservoir + cushion {
        top
    } else {
        (((obs.buffer - reservoir) / cushion * top as f64).floor() as usize).min(top)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RateBased;

impl Policy for RateBased {
    fn decide(&self, obs: &Observation) -> usize {
        rate_based(obs)
    }
    fn name(&self) -> &str {
        "rb"
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferBased {
    reservoir: f64,
    cushion: f64,
}

impl BufferBased {
    pub fn new(reservoir: f64, cushion: f64, buffer_max: f64) -> Result<Self, AbrError> {
        if !(reservoir > 0.0 && cushion > 0.0 && reservoir + cushion <= buffer_max) {
            return Err(AbrError::BadThresholds { reservoir, cushion, buffer_max });
        }
        Ok(BufferBased { reservoir, cushion })
    }
}

impl Policy for BufferBased {
    fn decide(&self, obs: &Observation) -> usize {
        buffer_based(obs, self.reservoir, self.cushion)
    }
    fn name(&self) -> &str {
        "bb"
    }
}

/// Always requests the same representation (clamped to the ladder).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed(pub usize);

impl Policy for Fixed {
    fn decide(&self, obs: &Observation) -> usize {
        self.0.min(obs.levels() - 1)
    }
    fn name(&self) -> &str {
        "fixed"
    }
}
