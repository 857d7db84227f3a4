//! The end-to-end experiment: synthetic videos and rate traces, policy
//! training, evaluation of the solver × bitrate-policy schemes, and the
//! summary tables.
//!
//! Everything lives under the configured output directory:
//!
//! ```text
//! config.<command>.toml          effective configuration of each command
//! videos/user_NN.json            manifest watched by user NN
//! traces/<solver>/split.txt      train/test membership
//! traces/<solver>/*.csv          rate traces (time_s,user_id,rate_bps)
//! traces/<solver>/rates.csv      per-trace sum rate and rate unfairness
//! models/<solver>.json           actor/critic checkpoint
//! models/<solver>_curve.csv      learning curve
//! eval/<scheme>/sessions.csv     one row per (test trace, user)
//! eval/<scheme>/chunks.csv       chunk log of one session
//! report/summary.csv             per-scheme means
//! report/fairness.csv            intra-cell and total QoE unfairness
//! report/qoe_cdf.csv             empirical CDF of per-session mean QoE
//! report/rates.csv               per-solver mean sum rate and unfairness
//! ```
//!
//! Every file is a deterministic function of the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::abr::{Policy, RateBased};
use crate::beamform::Mode;
use crate::config::{AbrKind, ConfigError, RunConfig, Scheme};
use crate::fairness::{cell_fairness, jain_fairness, CellFairness};
use crate::player::{run_session, session_csv, synth_manifest, PlayerError, SessionSummary, VideoManifest};
use crate::rl::{learning_curve_csv, state_dim, train, Checkpoint, DrlPolicy, Episode, RlError, Trained};
use crate::tracegen::{make_split, read_trace, RateTrace, Scenario, Split, TraceError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Player(#[from] PlayerError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("{path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ExperimentError::MissingArtifacts(format!("{what} not found at {} (run the earlier pipeline steps first)", path.display())))
    }
}

/// File layout under the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn effective_config(&self, command: &str) -> PathBuf {
        self.root.join(format!("config.{command}.toml"))
    }

    pub fn video(&self, user: usize) -> PathBuf {
        self.root.join("videos").join(format!("user_{user:02}.json"))
    }

    pub fn traces(&self, mode: Mode) -> PathBuf {
        self.root.join("traces").join(mode.to_string())
    }

    pub fn split(&self, mode: Mode) -> PathBuf {
        self.traces(mode).join("split.txt")
    }

    pub fn trace_rates(&self, mode: Mode) -> PathBuf {
        self.traces(mode).join("rates.csv")
    }

    pub fn checkpoint(&self, mode: Mode) -> PathBuf {
        self.root.join("models").join(format!("{mode}.json"))
    }

    pub fn curve(&self, mode: Mode) -> PathBuf {
        self.root.join("models").join(format!("{mode}_curve.csv"))
    }

    pub fn sessions(&self, scheme: Scheme) -> PathBuf {
        self.root.join("eval").join(scheme.to_string()).join("sessions.csv")
    }

    pub fn chunk_log(&self, scheme: Scheme) -> PathBuf {
        self.root.join("eval").join(scheme.to_string()).join("chunks.csv")
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("report").join(file)
    }
}

/// Writes `config.<command>.toml` next to the command's outputs.
pub fn write_effective_config(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let path = Paths::new(&cfg.out).effective_config(command);
    write(&path, &cfg.to_toml()?)?;
    Ok(path)
}

/// Synthesises the manifest of every user.
pub fn build_videos(cfg: &RunConfig) -> Result<Vec<VideoManifest>> {
    let mut built: Vec<(crate::player::VideoProfile, Arc<VideoManifest>)> = Vec::new();
    let mut out = Vec::new();
    for profile in cfg.video_profiles() {
        let m = match built.iter().find(|(p, _)| *p == profile) {
            Some((_, m)) => m.clone(),
            None => {
                let m = Arc::new(synth_manifest(&profile, &cfg.video.ladder_bps, cfg.video.chunk_duration_s)?);
                built.push((profile, m.clone()));
                m
            }
        };
        out.push((*m).clone());
    }
    Ok(out)
}

pub fn load_videos(cfg: &RunConfig) -> Result<Vec<VideoManifest>> {
    let paths = Paths::new(&cfg.out);
    (0..cfg.n_users())
        .map(|i| {
            let p = paths.video(i);
            require(&p, "video manifest")?;
            Ok(VideoManifest::load(&p)?)
        })
        .collect()
}

/// The physical-layer run behind every trace of one solver.
pub fn scenario(cfg: &RunConfig, mode: Mode, videos: &[VideoManifest]) -> Scenario {
    Scenario {
        topology: cfg.topology(),
        channel: cfg.channel_params(),
        duration_s: cfg.traces.duration_s,
        mode,
        cadence: cfg.radio.solve_cadence,
        seed: cfg.trace_base_seed(),
        bandwidth: cfg.radio.bandwidth_hz,
        gap: cfg.radio.snr_gap,
        beta: cfg.radio.beta,
        chunk_duration: cfg.video.chunk_duration_s,
        videos: videos.iter().map(VideoManifest::curves).collect(),
        stop: cfg.stop_rule(),
    }
}

/// Sum of the users' mean rates and the unfairness of those means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateStats {
    pub sum_rate_bps: f64,
    /// NaN when every user averaged zero.
    pub rate_unfairness: f64,
}

pub fn rate_stats(traces: &[RateTrace]) -> RateStats {
    let means: Vec<f64> = traces.iter().map(RateTrace::mean).collect();
    RateStats {
        sum_rate_bps: means.iter().sum(),
        rate_unfairness: jain_fairness(&means).map_or(f64::NAN, |f| f.unfairness),
    }
}

fn load_split(cfg: &RunConfig, mode: Mode) -> Result<Split> {
    let path = Paths::new(&cfg.out).split(mode);
    require(&path, &format!("{mode} trace split"))?;
    Ok(Split::read(&path)?)
}

fn load_traces(paths: &[PathBuf], users: usize) -> Result<Vec<Vec<RateTrace>>> {
    paths
        .iter()
        .map(|p| {
            let traces = read_trace(p)?;
            if traces.len() != users {
                return Err(ExperimentError::Malformed { path: p.clone(), msg: format!("{} users, expected {users}", traces.len()) });
            }
            Ok(traces)
        })
        .collect()
}

/// Writes the videos, then a train/test split of rate traces per solver.
pub fn gen_traces(cfg: &RunConfig) -> Result<Vec<(Mode, Split)>> {
    let paths = Paths::new(&cfg.out);
    let videos = build_videos(cfg)?;
    for (i, v) in videos.iter().enumerate() {
        let p = paths.video(i);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        v.save(&p)?;
    }
    let mut out = Vec::new();
    for mode in cfg.modes() {
        let sc = scenario(cfg, mode, &videos);
        let split = make_split(cfg.traces.n_train, cfg.traces.n_test, sc.seed, &sc, &paths.traces(mode))?;
        let mut csv = String::from("split,trace,sum_rate_bps,rate_unfairness\n");
        for (name, files) in [("train", &split.train), ("test", &split.test)] {
            for (k, traces) in load_traces(files, cfg.n_users())?.iter().enumerate() {
                let s = rate_stats(traces);
                csv.push_str(&format!("{name},{k},{},{}\n", s.sum_rate_bps, s.rate_unfairness));
            }
        }
        write(&paths.trace_rates(mode), &csv)?;
        out.push((mode, split));
    }
    Ok(out)
}

/// Trains the bitrate policy on one solver's training traces. Episodes pick
/// a training trace and a user uniformly at random.
pub fn train_policy(cfg: &RunConfig, mode: Mode) -> Result<Trained> {
    let paths = Paths::new(&cfg.out);
    let videos: Vec<Arc<VideoManifest>> = load_videos(cfg)?.into_iter().map(Arc::new).collect();
    let traces = load_traces(&load_split(cfg, mode)?.train, cfg.n_users())?;
    let levels = videos[0].levels();
    let mut tc = cfg.train_config();
    tc.seed = tc.seed.wrapping_add(match mode {
        Mode::Qddra => 0,
        Mode::Wmmse => 1 << 32,
    });
    let ckpt_path = paths.checkpoint(mode);
    let mut curve_csv = String::new();
    let init = if cfg.train.resume && ckpt_path.exists() {
        let c = Checkpoint::load(&ckpt_path)?;
        if c.episodes_done >= tc.episodes {
            return Ok(Trained { actor: c.actor, critic: c.critic, curve: Vec::new() });
        }
        tc.first_episode = c.episodes_done;
        if paths.curve(mode).exists() {
            curve_csv = fs::read_to_string(paths.curve(mode)).map_err(io_err(&paths.curve(mode)))?;
        }
        Some((c.actor, c.critic))
    } else {
        None
    };
    let env = |_worker: usize, _k: usize, rng: &mut ChaCha8Rng| {
        let t = rng.random_range(0..traces.len());
        let u = rng.random_range(0..videos.len());
        Episode { trace: traces[t][u].clone(), manifest: videos[u].clone() }
    };
    let trained = train(&env, &tc, &cfg.player, levels, init)?;
    if let Some(dir) = ckpt_path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    trained.checkpoint(tc.episodes).save(&ckpt_path)?;
    let fresh = learning_curve_csv(&trained.curve);
    if curve_csv.is_empty() {
        curve_csv = fresh;
    } else {
        fresh.lines().skip(1).for_each(|l| {
            curve_csv.push_str(l);
            curve_csv.push('\n');
        });
    }
    write(&paths.curve(mode), &curve_csv)?;
    Ok(trained)
}

/// One evaluated session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRow {
    pub trace: usize,
    pub user: usize,
    pub cell: usize,
    pub summary: SessionSummary,
}

pub const SESSIONS_HEADER: &str = "trace,user,cell,chunks,mean_qoe,mean_quality_db,mean_switch_db,rebuffer_s,startup_s";

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeEval {
    pub scheme: Scheme,
    pub rows: Vec<SessionRow>,
}

fn weighted_mean<'a>(rows: impl Iterator<Item = &'a SessionRow>, f: impl Fn(&SessionSummary) -> f64) -> f64 {
    let (num, den) = rows.fold((0.0, 0.0), |(n, d), r| {
        let w = r.summary.chunks as f64;
        (n + w * f(&r.summary), d + w)
    });
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

impl SchemeEval {
    pub fn users(&self) -> usize {
        self.rows.iter().map(|r| r.user + 1).max().unwrap_or(0)
    }

    /// Mean QoE over all chunks of all sessions.
    pub fn mean_qoe(&self) -> f64 {
        weighted_mean(self.rows.iter(), |s| s.mean_qoe)
    }

    pub fn mean_quality(&self) -> f64 {
        weighted_mean(self.rows.iter(), |s| s.mean_quality)
    }

    pub fn mean_switch(&self) -> f64 {
        weighted_mean(self.rows.iter(), |s| s.mean_switch)
    }

    /// Mean total stall time per session.
    pub fn mean_rebuffer_s(&self) -> f64 {
        self.rows.iter().map(|r| r.summary.total_rebuffer_s).sum::<f64>() / self.rows.len() as f64
    }

    /// Each user's mean QoE over all its chunks.
    pub fn per_user_qoe(&self) -> Vec<f64> {
        (0..self.users()).map(|u| weighted_mean(self.rows.iter().filter(|r| r.user == u), |s| s.mean_qoe)).collect()
    }

    fn user_cells(&self) -> Vec<usize> {
        (0..self.users())
            .map(|u| self.rows.iter().find(|r| r.user == u).map_or(0, |r| r.cell))
            .collect()
    }

    /// Unfairness of the users' mean QoE, within each cell and overall.
    pub fn qoe_fairness(&self) -> Option<CellFairness> {
        cell_fairness(&self.per_user_qoe(), &self.user_cells()).ok()
    }
}

pub fn sessions_csv(rows: &[SessionRow]) -> String {
    let mut out = String::from(SESSIONS_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.trace, r.user, r.cell, s.chunks, s.mean_qoe, s.mean_quality, s.mean_switch, s.total_rebuffer_s, s.startup_s
        ));
    }
    out
}

pub fn read_sessions(path: &Path) -> Result<Vec<SessionRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |line: usize, msg: &str| ExperimentError::Malformed { path: path.to_path_buf(), msg: format!("line {line}: {msg}") };
    let mut lines = text.lines();
    if lines.next() != Some(SESSIONS_HEADER) {
        return Err(malformed(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(malformed(k + 2, "expected 9 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| malformed(k + 2, "bad integer"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| malformed(k + 2, "bad number"));
            Ok(SessionRow {
                trace: int(f[0])?,
                user: int(f[1])?,
                cell: int(f[2])?,
                summary: SessionSummary {
                    chunks: int(f[3])?,
                    mean_qoe: num(f[4])?,
                    mean_quality: num(f[5])?,
                    mean_switch: num(f[6])?,
                    total_rebuffer_s: num(f[7])?,
                    startup_s: num(f[8])?,
                },
            })
        })
        .collect()
}

fn policy_for(cfg: &RunConfig, scheme: Scheme, levels: usize) -> Result<Box<dyn Policy>> {
    Ok(match scheme.abr {
        AbrKind::Rb => Box::new(RateBased),
        AbrKind::Bb => Box::new(cfg.buffer_based()?),
        AbrKind::Drl => {
            let path = Paths::new(&cfg.out).checkpoint(scheme.mode);
            require(&path, &format!("{} policy checkpoint", scheme.mode))?;
            let c = Checkpoint::load(&path)?;
            if c.actor.input_dim() != state_dim(cfg.player.history, levels) || c.actor.output_dim() != levels {
                return Err(RlError::ShapeMismatch(format!("{} does not match the configured state/action sizes", path.display())).into());
            }
            Box::new(DrlPolicy { actor: c.actor })
        }
    })
}

/// Plays every user's video over every test trace of the scheme's solver.
pub fn evaluate_scheme(cfg: &RunConfig, scheme: Scheme) -> Result<SchemeEval> {
    let paths = Paths::new(&cfg.out);
    let videos = load_videos(cfg)?;
    let traces = load_traces(&load_split(cfg, scheme.mode)?.test, cfg.n_users())?;
    let policy = policy_for(cfg, scheme, videos[0].levels())?;
    let cells: Vec<usize> = cfg.topology().users.iter().map(|u| u.cell).collect();
    let jobs: Vec<(usize, usize)> = (0..traces.len()).flat_map(|t| (0..videos.len()).map(move |u| (t, u))).collect();
    let sessions = jobs
        .par_iter()
        .map(|&(t, u)| run_session(&traces[t][u], &videos[u], policy.as_ref(), &cfg.player))
        .collect::<Result<Vec<_>, PlayerError>>()?;
    let mut rows = Vec::with_capacity(jobs.len());
    for (&(t, u), s) in jobs.iter().zip(&sessions) {
        if (t, u) == (cfg.report.chunk_log_trace, cfg.report.chunk_log_user) {
            write(&paths.chunk_log(scheme), &session_csv(&s.records))?;
        }
        rows.push(SessionRow { trace: t, user: u, cell: cells[u], summary: s.summary });
    }
    write(&paths.sessions(scheme), &sessions_csv(&rows))?;
    Ok(SchemeEval { scheme, rows })
}

pub fn evaluate(cfg: &RunConfig) -> Result<Vec<SchemeEval>> {
    cfg.schemes().into_iter().map(|s| evaluate_scheme(cfg, s)).collect()
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeReport {
    pub scheme: Scheme,
    pub sessions: usize,
    pub mean_qoe: f64,
    pub mean_quality: f64,
    pub mean_switch: f64,
    pub mean_rebuffer_s: f64,
    pub fairness: Option<CellFairness>,
}

impl SchemeReport {
    pub fn total_unfairness(&self) -> f64 {
        self.fairness.as_ref().map_or(f64::NAN, |f| f.total.unfairness)
    }
}

/// Builds the report tables from the evaluation outputs on disk.
pub fn report(cfg: &RunConfig) -> Result<Vec<SchemeReport>> {
    let paths = Paths::new(&cfg.out);
    let mut evals = Vec::new();
    for scheme in cfg.schemes() {
        let p = paths.sessions(scheme);
        if p.exists() {
            evals.push(SchemeEval { scheme, rows: read_sessions(&p)? });
        }
    }
    if evals.is_empty() {
        return Err(ExperimentError::MissingArtifacts(format!("no evaluation results under {}", paths.root.join("eval").display())));
    }
    let reports: Vec<SchemeReport> = evals
        .iter()
        .map(|e| SchemeReport {
            scheme: e.scheme,
            sessions: e.rows.len(),
            mean_qoe: e.mean_qoe(),
            mean_quality: e.mean_quality(),
            mean_switch: e.mean_switch(),
            mean_rebuffer_s: e.mean_rebuffer_s(),
            fairness: e.qoe_fairness(),
        })
        .collect();

    let offset = cfg.report.psnr_display_offset_db;
    let mut summary = String::from("scheme,sessions,mean_qoe,mean_quality_db,display_quality_db,mean_switch_db,mean_rebuffer_s,total_unfairness\n");
    for r in &reports {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scheme,
            r.sessions,
            r.mean_qoe,
            r.mean_quality,
            r.mean_quality - offset,
            r.mean_switch,
            r.mean_rebuffer_s,
            r.total_unfairness()
        ));
    }
    write(&paths.report("summary.csv"), &summary)?;

    let n_cells = cfg.layout().cells;
    let mut fairness = String::from("scheme");
    (0..n_cells).for_each(|k| fairness.push_str(&format!(",cell_{k}")));
    fairness.push_str(",mean_intra_cell,total\n");
    for r in &reports {
        fairness.push_str(&r.scheme.to_string());
        match &r.fairness {
            Some(f) => {
                f.intra_cell.iter().for_each(|c| fairness.push_str(&format!(",{}", c.unfairness)));
                fairness.push_str(&format!(",{},{}\n", f.mean_intra_unfairness(), f.total.unfairness));
            }
            None => fairness.push_str(&format!("{}\n", ",NaN".repeat(n_cells + 2))),
        }
    }
    write(&paths.report("fairness.csv"), &fairness)?;

    let mut cdf = String::from("scheme,mean_qoe,cdf\n");
    for e in &evals {
        let mut xs: Vec<f64> = e.rows.iter().map(|r| r.summary.mean_qoe).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        for (k, x) in xs.iter().enumerate() {
            cdf.push_str(&format!("{},{},{}\n", e.scheme, x, (k + 1) as f64 / n));
        }
    }
    write(&paths.report("qoe_cdf.csv"), &cdf)?;

    let mut rates = String::from("solver,test_traces,mean_sum_rate_bps,mean_rate_unfairness\n");
    for mode in cfg.modes() {
        let split = match load_split(cfg, mode) {
            Ok(s) => s,
            Err(ExperimentError::MissingArtifacts(_)) => continue,
            Err(e) => return Err(e),
        };
        let stats: Vec<RateStats> = load_traces(&split.test, cfg.n_users())?.iter().map(|t| rate_stats(t)).collect();
        let n = stats.len() as f64;
        rates.push_str(&format!(
            "{mode},{},{},{}\n",
            stats.len(),
            stats.iter().map(|s| s.sum_rate_bps).sum::<f64>() / n,
            stats.iter().map(|s| s.rate_unfairness).sum::<f64>() / n
        ));
    }
    write(&paths.report("rates.csv"), &rates)?;
    Ok(reports)
}
