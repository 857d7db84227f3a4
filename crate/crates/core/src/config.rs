//! Run configuration for the experiment pipeline.
//!
//! A TOML file with one section per subsystem. Every key is optional; a
//! missing key takes the default below, so an empty file is the reference
//! setup. Unknown keys are rejected to catch typos.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abr::{AbrError, BufferBased};
use crate::beamform::{Mode, StopRule};
use crate::channel::{ChannelParams, Topology};
use crate::player::{PlayerParams, VideoProfile, BITRATE_LADDER};
use crate::rl::{Optimizer, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialise config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Abr(#[from] AbrError),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// One base station, four single-antenna users watching the same video.
    SingleCellSiso,
    /// Four interfering cells, three users each; 3 transmit and 2 receive
    /// antennas; users sharing a cell watch different videos.
    MulticellMimo,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::SingleCellSiso => "single_cell_siso",
            ScenarioKind::MulticellMimo => "multicell_mimo",
        }
    }

    pub fn default_layout(self) -> Layout {
        match self {
            ScenarioKind::SingleCellSiso => Layout { cells: 1, users_per_cell: 4, n_tx: 1, n_rx: 1 },
            ScenarioKind::MulticellMimo => Layout { cells: 4, users_per_cell: 3, n_tx: 3, n_rx: 2 },
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single_cell_siso" => Ok(ScenarioKind::SingleCellSiso),
            "multicell_mimo" => Ok(ScenarioKind::MulticellMimo),
            other => Err(format!("unknown scenario {other:?} (expected single_cell_siso or multicell_mimo)")),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbrKind {
    Drl,
    Rb,
    Bb,
}

impl AbrKind {
    pub const ALL: [AbrKind; 3] = [AbrKind::Drl, AbrKind::Rb, AbrKind::Bb];

    pub fn name(self) -> &'static str {
        match self {
            AbrKind::Drl => "drl",
            AbrKind::Rb => "rb",
            AbrKind::Bb => "bb",
        }
    }
}

/// A rate-allocation solver paired with a bitrate-adaptation policy,
/// written `qddra_drl`, `wmmse_bb`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scheme {
    pub mode: Mode,
    pub abr: AbrKind,
}

impl Scheme {
    /// The six combinations, QDDRA first.
    pub fn all() -> Vec<Scheme> {
        [Mode::Qddra, Mode::Wmmse]
            .into_iter()
            .flat_map(|mode| AbrKind::ALL.into_iter().map(move |abr| Scheme { mode, abr }))
            .collect()
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.mode, self.abr.name())
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        let (mode, abr) = lower.split_once('_').ok_or_else(|| format!("scheme {s:?} is not of the form <solver>_<abr>"))?;
        let abr = match abr {
            "drl" => AbrKind::Drl,
            "rb" => AbrKind::Rb,
            "bb" => AbrKind::Bb,
            other => return Err(format!("unknown bitrate policy {other:?} (expected drl, rb or bb)")),
        };
        Ok(Scheme { mode: mode.parse()?, abr })
    }
}

impl TryFrom<String> for Scheme {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

/// Cell and antenna counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub cells: usize,
    pub users_per_cell: usize,
    pub n_tx: usize,
    pub n_rx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub slot_s: f64,
    pub radius_m: f64,
    pub min_radius_m: f64,
    pub power_w: f64,
    pub bandwidth_hz: f64,
    pub noise_power_w: f64,
    pub snr_gap: f64,
    pub doppler_hz: f64,
    /// Weight β of the newest slot in the average-quality recursion
    /// (the cumulative weight is 1 − β).
    pub beta: f64,
    pub path_loss_exponent: f64,
    pub shadowing_std_db: f64,
    /// Path gain at the minimum radius.
    pub reference_gain_db: f64,
    pub speed_mps: f64,
    pub move_period_s: f64,
    /// Solve every `solve_cadence`-th slot and hold beamformers in between.
    pub solve_cadence: usize,
    pub stop_tol: f64,
    pub max_iter: usize,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            slot_s: 0.04,
            radius_m: 100.0,
            min_radius_m: 10.0,
            power_w: 4.0,
            bandwidth_hz: 1e6,
            noise_power_w: 1.0,
            snr_gap: 1.34,
            doppler_hz: 10.0,
            beta: 0.1,
            path_loss_exponent: 3.0,
            shadowing_std_db: 8.0,
            reference_gain_db: 40.0,
            speed_mps: 1.4,
            move_period_s: 5.0,
            solve_cadence: 1,
            stop_tol: 1e-4,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub chunk_duration_s: f64,
    pub ladder_bps: Vec<f64>,
    /// Standard deviation of the per-chunk log-jitter of the curve slope.
    pub jitter: f64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig { chunk_duration_s: 2.0, ladder_bps: BITRATE_LADDER.to_vec(), jitter: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbrConfig {
    pub bb_reservoir_s: f64,
    pub bb_cushion_s: f64,
}

impl Default for AbrConfig {
    fn default() -> Self {
        AbrConfig { bb_reservoir_s: 5.0, bb_cushion_s: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub rollout: usize,
    pub workers: usize,
    pub episodes: usize,
    pub optimizer: Optimizer,
    pub reward_scale: f64,
    pub serial: bool,
    /// Continue from an existing checkpoint instead of starting afresh.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            actor_lr: t.actor_lr,
            critic_lr: t.critic_lr,
            gamma: t.gamma,
            entropy_start: t.entropy_start,
            entropy_end: t.entropy_end,
            rollout: t.rollout,
            workers: t.workers,
            episodes: t.episodes,
            optimizer: t.optimizer,
            reward_scale: t.reward_scale,
            serial: t.serial,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub duration_s: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { duration_s: 120, n_train: 100, n_test: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Test trace whose chunk-by-chunk log is written.
    pub chunk_log_trace: usize,
    /// User whose chunk-by-chunk log is written.
    pub chunk_log_user: usize,
    /// Subtracted from displayed quality columns only; stored metrics are
    /// never shifted.
    pub psnr_display_offset_db: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { chunk_log_trace: 0, chunk_log_user: 0, psnr_display_offset_db: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioKind,
    /// Restricts commands to one scheme; all six when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    pub out: PathBuf,
    /// Overrides the scenario's cell and antenna counts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    pub radio: RadioConfig,
    pub video: VideoConfig,
    pub player: PlayerParams,
    pub abr: AbrConfig,
    pub train: TrainSection,
    pub traces: TraceConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            scenario: ScenarioKind::SingleCellSiso,
            scheme: None,
            out: PathBuf::from("runs"),
            layout: None,
            radio: RadioConfig::default(),
            video: VideoConfig::default(),
            player: PlayerParams::default(),
            abr: AbrConfig::default(),
            train: TrainSection::default(),
            traces: TraceConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let r = &self.radio;
        let positive = [r.slot_s, r.power_w, r.bandwidth_hz, r.noise_power_w, r.doppler_hz, r.speed_mps, r.move_period_s];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("radio constants must be positive and finite");
        }
        if !(r.min_radius_m > 0.0 && r.min_radius_m < r.radius_m) {
            return bad("need 0 < min_radius_m < radius_m");
        }
        if !(r.snr_gap >= 1.0) || !(r.beta > 0.0 && r.beta <= 1.0) {
            return bad("need snr_gap >= 1 and beta in (0, 1]");
        }
        if r.solve_cadence == 0 || r.max_iter == 0 || !(r.stop_tol > 0.0) {
            return bad("solve_cadence, max_iter and stop_tol must be positive");
        }
        let l = self.layout();
        if l.cells == 0 || l.users_per_cell == 0 || l.n_tx == 0 || l.n_rx == 0 {
            return bad("layout counts must be positive");
        }
        let v = &self.video;
        if !(v.chunk_duration_s > 0.0) || v.ladder_bps.len() < 2 || !(v.jitter >= 0.0) {
            return bad("need a positive chunk duration, at least two ladder rungs and jitter >= 0");
        }
        if v.ladder_bps[0] <= 0.0 || v.ladder_bps.windows(2).any(|w| w[1] <= w[0]) {
            return bad("ladder must be positive and strictly increasing");
        }
        let p = &self.player;
        if !(p.buffer_max > 0.0) || p.switch_penalty < 0.0 || p.rebuffer_penalty < 0.0 || p.history == 0 {
            return bad("player needs buffer_max > 0, nonnegative penalties and history >= 1");
        }
        self.buffer_based()?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.traces;
        if t.duration_s == 0 || t.n_train == 0 || t.n_test == 0 {
            return bad("traces need a positive duration and at least one train and one test trace");
        }
        if self.report.chunk_log_trace >= t.n_test || self.report.chunk_log_user >= self.n_users() {
            return bad("chunk log trace/user out of range");
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        self.layout.unwrap_or_else(|| self.scenario.default_layout())
    }

    pub fn n_users(&self) -> usize {
        let l = self.layout();
        l.cells * l.users_per_cell
    }

    pub fn topology(&self) -> Topology {
        let (l, r) = (self.layout(), &self.radio);
        if l.cells == 1 {
            Topology::single_cell(l.users_per_cell, l.n_tx, l.n_rx, r.power_w, r.radius_m, r.min_radius_m)
        } else {
            Topology::grid_cells(l.cells, l.users_per_cell, l.n_tx, l.n_rx, r.power_w, r.radius_m, r.min_radius_m)
        }
    }

    pub fn channel_params(&self) -> ChannelParams {
        let r = &self.radio;
        ChannelParams {
            path_loss_exponent: r.path_loss_exponent,
            shadowing_std_db: r.shadowing_std_db,
            reference_gain_db: r.reference_gain_db,
            speed: r.speed_mps,
            move_period: r.move_period_s,
            doppler_hz: r.doppler_hz,
            slot_s: r.slot_s,
            noise_power: r.noise_power_w,
        }
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule { tol: self.radio.stop_tol, max_iter: self.radio.max_iter }
    }

    /// Enough chunks that no session can run out of video before its trace
    /// runs out.
    pub fn video_chunks(&self) -> usize {
        let horizon = self.traces.duration_s as f64 + self.player.buffer_max;
        (horizon / self.video.chunk_duration_s).ceil() as usize + 2
    }

    /// The video each user watches. Single-cell: everyone watches the same
    /// video. Otherwise the `j`-th user of every cell watches preset
    /// `j mod 3`, so users sharing a cell watch different videos.
    pub fn video_profiles(&self) -> Vec<VideoProfile> {
        let mut presets = VideoProfile::presets(self.video_chunks(), self.seed.wrapping_mul(1000));
        for p in &mut presets {
            p.jitter = self.video.jitter;
        }
        let l = self.layout();
        (0..self.n_users())
            .map(|i| match self.scenario {
                ScenarioKind::SingleCellSiso if l.cells == 1 => presets[0].clone(),
                _ => presets[(i % l.users_per_cell) % presets.len()].clone(),
            })
            .collect()
    }

    /// Seed of the first training trace; test traces follow the training ones.
    pub fn trace_base_seed(&self) -> u64 {
        self.seed.wrapping_mul(1_000_003)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            actor_lr: t.actor_lr,
            critic_lr: t.critic_lr,
            gamma: t.gamma,
            entropy_start: t.entropy_start,
            entropy_end: t.entropy_end,
            rollout: t.rollout,
            workers: t.workers,
            episodes: t.episodes,
            first_episode: 0,
            seed: self.seed,
            optimizer: t.optimizer,
            reward_scale: t.reward_scale,
            serial: t.serial,
        }
    }

    pub fn buffer_based(&self) -> Result<BufferBased> {
        Ok(BufferBased::new(self.abr.bb_reservoir_s, self.abr.bb_cushion_s, self.player.buffer_max)?)
    }

    /// Schemes a command should cover.
    pub fn schemes(&self) -> Vec<Scheme> {
        match self.scheme {
            Some(s) => vec![s],
            None => Scheme::all(),
        }
    }

    /// Solver modes a command should cover.
    pub fn modes(&self) -> Vec<Mode> {
        match self.scheme {
            Some(s) => vec![s.mode],
            None => vec![Mode::Qddra, Mode::Wmmse],
        }
    }
}
