//! Chunk-level DASH session simulator.
//!
//! Downloads are timed by integrating a piecewise-constant per-second rate
//! trace. The buffer drains in real time during a download; when it runs dry
//! the player stalls. After a chunk lands the buffer gains `T_chunk`
//! seconds, and if it would exceed `b_max` the player waits until it has
//! drained back to `b_max` before the next request.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abr::{Observation, Policy};
use crate::quality::{fit_rq, quality_of_bitrate, QualityError, RQParams};
use crate::tracegen::RateTrace;

/// The representation ladder in bits/s.
pub const BITRATE_LADDER: [f64; 6] = [0.3e6, 0.75e6, 1.2e6, 1.85e6, 2.85e6, 3.2e6];

#[derive(Debug, Error)]
pub enum PlayerError {
    #[error("trace exhausted at t = {t:.3} s")]
    TraceExhausted { t: f64 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("action {action} out of range for {levels} representations")]
    BadAction { action: usize, levels: usize },
    #[error("no chunk {0}")]
    NoSuchChunk(usize),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PlayerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub bitrate_bps: f64,
    pub size_bits: f64,
    pub quality_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub reps: Vec<Representation>,
    /// Rate–quality curve fitted to this chunk's representations.
    pub z: RQParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub chunk_duration_s: f64,
    pub chunks: Vec<Chunk>,
}

impl VideoManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlayerError::InvalidManifest(m));
        if !(self.chunk_duration_s > 0.0) || self.chunks.is_empty() {
            return bad("need a positive chunk duration and at least one chunk".into());
        }
        let levels = self.chunks[0].reps.len();
        for (m, c) in self.chunks.iter().enumerate() {
            if c.reps.is_empty() || c.reps.len() != levels {
                return bad(format!("chunk {m} has {} representations, expected {levels}", c.reps.len()));
            }
            for w in c.reps.windows(2) {
                if !(w[1].bitrate_bps > w[0].bitrate_bps && w[1].quality_db > w[0].quality_db) {
                    return bad(format!("chunk {m}: representations not strictly increasing"));
                }
            }
            for r in &c.reps {
                let nominal = r.bitrate_bps * self.chunk_duration_s;
                if !(r.size_bits > 0.0) || (r.size_bits - nominal).abs() > 0.2 * nominal {
                    return bad(format!("chunk {m}: size {} bits far from nominal {nominal}", r.size_bits));
                }
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.chunks[0].reps.len()
    }

    /// Per-chunk curves, e.g. for driving the physical-layer solver.
    pub fn curves(&self) -> Vec<RQParams> {
        self.chunks.iter().map(|c| c.z).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: VideoManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// QoE weights and buffer limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlayerParams {
    pub buffer_max: f64,
    /// Weight λ of the quality-switch penalty.
    pub switch_penalty: f64,
    /// Weight ρ of rebuffering, in quality units per second.
    pub rebuffer_penalty: f64,
    /// Throughput history length `n` exposed to policies.
    pub history: usize,
}

impl Default for PlayerParams {
    fn default() -> Self {
        PlayerParams { buffer_max: 30.0, switch_penalty: 0.5, rebuffer_penalty: 4.0, history: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    /// Index of the next chunk to request.
    pub m: usize,
    /// Buffer occupancy in seconds.
    pub buffer: f64,
    /// Wall-clock time in seconds.
    pub t: f64,
    pub last_quality: Option<f64>,
    /// Last `n` (throughput bits/s, download time s), oldest first.
    pub history: VecDeque<(f64, f64)>,
}

impl SessionState {
    pub fn new() -> Self {
        SessionState { m: 0, buffer: 0.0, t: 0.0, last_quality: None, history: VecDeque::new() }
    }
}

impl Default for SessionState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub m: usize,
    pub action: usize,
    pub bitrate_bps: f64,
    pub quality_db: f64,
    pub rebuffer_s: f64,
    pub wait_s: f64,
    pub qoe: f64,
    pub download_s: f64,
    pub throughput_bps: f64,
    /// Buffer occupancy once the chunk (and any wait) is done.
    pub buffer_s: f64,
}

/// Time to download `size` bits starting at `t_start`, and the resulting
/// average throughput.
pub fn download_chunk(trace: &RateTrace, t_start: f64, size: f64) -> Result<(f64, f64)> {
    assert!(size > 0.0, "chunk size must be positive");
    let mut t = t_start;
    let mut left = size;
    loop {
        let k = t.floor() as usize;
        let Some(&r) = trace.samples.get(k) else {
            return Err(PlayerError::TraceExhausted { t });
        };
        let seg_end = (k + 1) as f64;
        let capacity = r * (seg_end - t);
        if r > 0.0 && capacity >= left {
            t += left / r;
            let d = t - t_start;
            return Ok((d, size / d));
        }
        left -= capacity;
        t = seg_end;
    }
}

/// Policy input for the next chunk request.
pub fn observe(state: &SessionState, manifest: &VideoManifest, params: &PlayerParams) -> Result<Observation> {
    let chunk = manifest.chunks.get(state.m).ok_or(PlayerError::NoSuchChunk(state.m))?;
    let pad = params.history.saturating_sub(state.history.len());
    let mut throughput = vec![0.0; pad];
    let mut download_time = vec![0.0; pad];
    for &(c, d) in state.history.iter().skip(state.history.len().saturating_sub(params.history)) {
        throughput.push(c);
        download_time.push(d);
    }
    Ok(Observation {
        throughput,
        download_time,
        z: chunk.z,
        bitrates: chunk.reps.iter().map(|r| r.bitrate_bps).collect(),
        qualities: chunk.reps.iter().map(|r| r.quality_db).collect(),
        sizes: chunk.reps.iter().map(|r| r.size_bits).collect(),
        buffer: state.buffer,
        buffer_max: params.buffer_max,
        remaining: manifest.chunks.len() - state.m,
        total_chunks: manifest.chunks.len(),
        last_quality: state.last_quality.unwrap_or(0.0),
        chunk_duration: manifest.chunk_duration_s,
    })
}

/// Downloads chunk `state.m` at representation `action`.
///
/// The first chunk is the startup download: nothing is playing yet, so it
/// neither stalls nor pays a switching penalty.
pub fn step(
    state: &SessionState,
    action: usize,
    manifest: &VideoManifest,
    trace: &RateTrace,
    params: &PlayerParams,
) -> Result<(ChunkRecord, SessionState)> {
    let chunk = manifest.chunks.get(state.m).ok_or(PlayerError::NoSuchChunk(state.m))?;
    let rep = chunk
        .reps
        .get(action)
        .ok_or(PlayerError::BadAction { action, levels: chunk.reps.len() })?;
    let (d, c) = download_chunk(trace, state.t, rep.size_bits)?;
    let rebuffer = if state.m == 0 { 0.0 } else { (d - state.buffer).max(0.0) };
    let mut buffer = if state.m == 0 { 0.0 } else { (state.buffer - d).max(0.0) } + manifest.chunk_duration_s;
    let wait = (buffer - params.buffer_max).max(0.0);
    buffer = buffer.min(params.buffer_max);
    let q = rep.quality_db;
    let switch = state.last_quality.map_or(0.0, |p| (q - p).abs());
    let qoe = q - params.switch_penalty * switch - params.rebuffer_penalty * rebuffer;

    let mut history = state.history.clone();
    history.push_back((c, d));
    while history.len() > params.history {
        history.pop_front();
    }
    let record = ChunkRecord {
        m: state.m,
        action,
        bitrate_bps: rep.bitrate_bps,
        quality_db: q,
        rebuffer_s: rebuffer,
        wait_s: wait,
        qoe,
        download_s: d,
        throughput_bps: c,
        buffer_s: buffer,
    };
    let next = SessionState { m: state.m + 1, buffer, t: state.t + d + wait, last_quality: Some(q), history };
    Ok((record, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub chunks: usize,
    pub mean_qoe: f64,
    pub mean_quality: f64,
    /// Mean of `|q_m − q_{m−1}|` over chunks (0 for the first chunk).
    pub mean_switch: f64,
    pub total_rebuffer_s: f64,
    /// Download time of the first chunk, before playback starts.
    pub startup_s: f64,
}

impl SessionSummary {
    pub fn from_records(records: &[ChunkRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut switch = 0.0;
        for w in records.windows(2) {
            switch += (w[1].quality_db - w[0].quality_db).abs();
        }
        SessionSummary {
            chunks: records.len(),
            mean_qoe: records.iter().map(|r| r.qoe).sum::<f64>() / n,
            mean_quality: records.iter().map(|r| r.quality_db).sum::<f64>() / n,
            mean_switch: switch / n,
            total_rebuffer_s: records.iter().map(|r| r.rebuffer_s).sum(),
            startup_s: records.first().map_or(0.0, |r| r.download_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub records: Vec<ChunkRecord>,
    pub summary: SessionSummary,
    pub final_state: SessionState,
    /// True when the trace ran out before the video did.
    pub trace_exhausted: bool,
}

/// Plays `manifest` over `trace`, asking `policy` for every chunk, until the
/// video ends or the trace runs out.
pub fn run_session(
    trace: &RateTrace,
    manifest: &VideoManifest,
    policy: &dyn Policy,
    params: &PlayerParams,
) -> Result<Session> {
    let mut state = SessionState::new();
    let mut records = Vec::new();
    let mut exhausted = false;
    while state.m < manifest.chunks.len() {
        let obs = observe(&state, manifest, params)?;
        let action = policy.decide(&obs);
        match step(&state, action, manifest, trace, params) {
            Ok((rec, next)) => {
                records.push(rec);
                state = next;
            }
            Err(PlayerError::TraceExhausted { .. }) => {
                exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Session { summary: SessionSummary::from_records(&records), records, final_state: state, trace_exhausted: exhausted })
}

pub const SESSION_HEADER: &str = "m,bitrate_bps,quality_db,rebuffer_s,wait_s,qoe";

/// Session records as CSV.
pub fn session_csv(records: &[ChunkRecord]) -> String {
    let mut out = format!("{SESSION_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.m, r.bitrate_bps, r.quality_db, r.rebuffer_s, r.wait_s, r.qoe
        ));
    }
    out
}

/// Ground truth for a synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoProfile {
    pub name: String,
    pub z: RQParams,
    pub chunks: usize,
    /// Standard deviation of the per-chunk log-multiplier applied to `z2`.
    pub jitter: f64,
    pub seed: u64,
}

impl VideoProfile {
    fn preset(name: &str, z: [f64; 3], chunks: usize, seed: u64) -> Self {
        VideoProfile {
            name: name.into(),
            z: RQParams::try_from(z).expect("valid preset"),
            chunks,
            jitter: 0.3,
            seed,
        }
    }

    /// About 34 dB at 0.3 Mbps rising to 44 dB at 3.2 Mbps.
    pub fn low_motion(chunks: usize, seed: u64) -> Self {
        Self::preset("low-motion", [4.225054, 1.0413798e-2, 1.0], chunks, seed)
    }

    /// About 30 dB at 0.3 Mbps rising to 40 dB at 3.2 Mbps.
    pub fn medium(chunks: usize, seed: u64) -> Self {
        Self::preset("medium", [4.225873, 4.033023e-3, 1.0], chunks, seed)
    }

    /// About 26 dB at 0.3 Mbps rising to 37 dB at 3.2 Mbps.
    pub fn high_motion(chunks: usize, seed: u64) -> Self {
        Self::preset("high-motion", [4.653676, 8.864285e-4, 1.0], chunks, seed)
    }

    pub fn presets(chunks: usize, seed: u64) -> [VideoProfile; 3] {
        [Self::medium(chunks, seed), Self::low_motion(chunks, seed + 1), Self::high_motion(chunks, seed + 2)]
    }
}

/// Builds a manifest on `ladder` from a profile: per-chunk curves jitter
/// around the profile's `z`, sizes deviate from nominal by up to ±10%, and
/// each chunk stores the curve fitted to its own representations.
pub fn synth_manifest(profile: &VideoProfile, ladder: &[f64], chunk_duration: f64) -> Result<VideoManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let z = profile.z;
    let chunks = (0..profile.chunks)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            let zm = RQParams::new(z.z1(), z.z2() * (profile.jitter * g).exp(), z.z3())?;
            let reps: Vec<Representation> = ladder
                .iter()
                .map(|&a| Representation {
                    bitrate_bps: a,
                    size_bits: a * chunk_duration * (1.0 + rng.random_range(-0.1..=0.1)),
                    quality_db: quality_of_bitrate(a, &zm),
                })
                .collect();
            let points: Vec<(f64, f64)> = reps.iter().map(|r| (r.bitrate_bps, r.quality_db)).collect();
            Ok(Chunk { z: fit_rq(&points)?.params, reps })
        })
        .collect::<Result<Vec<Chunk>>>()?;
    let manifest = VideoManifest { chunk_duration_s: chunk_duration, chunks };
    manifest.validate()?;
    Ok(manifest)
}
