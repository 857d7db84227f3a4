//! Rate traces: runs the channel and a slot solver over a scenario and
//! records each user's rate at one-second granularity.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::beamform::{
    initial_beamformers, rate, solve_slot, update_avg_quality, BeamformError, Mode, SlotProblem, StopRule,
};
use crate::channel::{ChannelEngine, ChannelError, ChannelParams, ChannelSnapshot, Topology};
use crate::quality::{quality_of_rate, RQParams};

/// Header line of a trace file.
pub const TRACE_HEADER: &str = "time_s,user_id,rate_bps";
/// Floor applied to the first long-term average quality.
pub const Q0_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("slot {slot}: {source}")]
    Solver { slot: u64, source: BeamformError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
}

pub type Result<T, E = TraceError> = std::result::Result<T, E>;

/// One simulation run of the physical layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub topology: Topology,
    pub channel: ChannelParams,
    /// Length of the run in whole seconds.
    pub duration_s: usize,
    pub mode: Mode,
    /// Solve every `cadence`-th slot; beamformers are held in between.
    pub cadence: usize,
    pub seed: u64,
    pub bandwidth: f64,
    /// SNR gap Γ.
    pub gap: f64,
    /// Weight of the newest sample in the average-quality recursion.
    pub beta: f64,
    /// Chunk length used to pick which chunk's curve applies at time `t`.
    pub chunk_duration: f64,
    /// Per user, the rate–quality curve of each chunk of the watched video.
    pub videos: Vec<Vec<RQParams>>,
    pub stop: StopRule,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TraceError::InvalidScenario(m.to_string()));
        self.topology.validate()?;
        if self.duration_s == 0 || self.cadence == 0 {
            return bad("duration and cadence must be positive");
        }
        if self.videos.len() != self.topology.users.len() || self.videos.iter().any(|v| v.is_empty()) {
            return bad("need a non-empty curve list for every user");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) || !(self.chunk_duration > 0.0) {
            return bad("need beta in (0, 1] and a positive chunk duration");
        }
        let per_second = 1.0 / self.channel.slot_s;
        if (per_second - per_second.round()).abs() > 1e-9 {
            return bad("slot length must divide one second");
        }
        Ok(())
    }

    pub fn slots_per_second(&self) -> usize {
        (1.0 / self.channel.slot_s).round() as usize
    }

    fn curve(&self, user: usize, t: f64) -> RQParams {
        let chunks = &self.videos[user];
        chunks[(t / self.chunk_duration).floor() as usize % chunks.len()]
    }

    fn problem(&self, snapshot: ChannelSnapshot, alpha: Vec<f64>, t: f64) -> SlotProblem {
        SlotProblem {
            snapshot,
            home: self.topology.users.iter().map(|u| u.cell).collect(),
            power: self.topology.cells.iter().map(|c| c.power).collect(),
            alpha,
            z: (0..self.topology.users.len()).map(|i| self.curve(i, t)).collect(),
            gap: self.gap,
            bandwidth: self.bandwidth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTrace {
    pub user: usize,
    /// Mean rate of each second in bits/s.
    pub samples: Vec<f64>,
}

impl RateTrace {
    pub fn duration_s(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }
}

/// Traces plus solver diagnostics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub traces: Vec<RateTrace>,
    /// Per user, the long-term average quality after the last slot.
    pub final_avg_quality: Vec<f64>,
    /// Smallest average quality seen for any user at any slot.
    pub min_avg_quality: f64,
    pub solves: usize,
    /// Solves in which a descending cycle was rolled back.
    pub guard_trips: usize,
}

/// Simulates `scenario` slot by slot.
///
/// QDDRA weights are `α = 1/Q` with `Q` the running average quality; the
/// first `Q` comes from a solve of slot 0 with unit weights.
pub fn generate(scenario: &Scenario) -> Result<Generated> {
    scenario.validate()?;
    let n = scenario.topology.users.len();
    let per_second = scenario.slots_per_second();
    let mut engine = ChannelEngine::new(
        scenario.topology.clone(),
        scenario.channel.clone(),
        ChaCha8Rng::seed_from_u64(scenario.seed),
    )?;
    let solver_err = |slot: u64| move |source| TraceError::Solver { slot, source };

    let mut avg_q = vec![1.0; n];
    let mut min_q = f64::INFINITY;
    let (mut solves, mut guard_trips) = (0, 0);
    let mut held = None;
    let mut samples = vec![vec![0.0; scenario.duration_s]; n];

    let first = engine.current()?;
    if scenario.mode == Mode::Qddra {
        let p = scenario.problem(first.clone(), vec![1.0; n], 0.0);
        let r = solve_slot(&p, &initial_beamformers(&p), Mode::Qddra, scenario.stop).map_err(solver_err(0))?;
        solves += 1;
        guard_trips += r.descent_guard_tripped as usize;
        avg_q = r.qualities.iter().map(|&q| q.max(Q0_FLOOR)).collect();
    }

    let mut snapshot = first;
    for slot in 0..scenario.duration_s * per_second {
        if slot > 0 {
            snapshot = engine.advance()?;
        }
        let t = slot as f64 * scenario.channel.slot_s;
        let alpha = match scenario.mode {
            Mode::Qddra => avg_q.iter().map(|q| 1.0 / q).collect(),
            Mode::Wmmse => vec![1.0; n],
        };
        let p = scenario.problem(snapshot.clone(), alpha, t);
        let rates = if slot % scenario.cadence == 0 {
            let r = solve_slot(&p, &initial_beamformers(&p), scenario.mode, scenario.stop)
                .map_err(solver_err(slot as u64))?;
            solves += 1;
            guard_trips += r.descent_guard_tripped as usize;
            held = Some(r.beamformers.v);
            r.rates
        } else {
            let v = held.as_ref().expect("slot 0 always solves");
            let folded = p.folded();
            (0..n)
                .map(|i| rate(&folded, v, i))
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(solver_err(slot as u64))?
        };
        for (i, &r) in rates.iter().enumerate() {
            samples[i][slot / per_second] += r / per_second as f64;
            let q = quality_of_rate(r, &p.z[i]);
            avg_q[i] = update_avg_quality(avg_q[i], q, scenario.beta);
            min_q = min_q.min(avg_q[i]);
        }
    }
    Ok(Generated {
        traces: samples.into_iter().enumerate().map(|(user, samples)| RateTrace { user, samples }).collect(),
        final_avg_quality: avg_q,
        min_avg_quality: min_q,
        solves,
        guard_trips,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io { path: path.to_path_buf(), source }
}

/// Writes traces as CSV, one row per (second, user).
pub fn write_trace(traces: &[RateTrace], path: &Path) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    let seconds = traces.iter().map(|t| t.samples.len()).max().unwrap_or(0);
    for s in 0..seconds {
        for t in traces {
            if let Some(r) = t.samples.get(s) {
                // `{}` prints the shortest representation that round-trips exactly
                out.push_str(&format!("{s},{},{r}\n", t.user));
            }
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Reads a trace file written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<Vec<RateTrace>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let malformed = |line: usize, msg: String| TraceError::Malformed { path: path.to_path_buf(), line, msg };
    let mut lines = BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == TRACE_HEADER => {}
        Some(Ok(h)) => return Err(malformed(1, format!("expected header {TRACE_HEADER:?}, found {h:?}"))),
        Some(Err(e)) => return Err(io_err(path)(e)),
        None => return Err(malformed(1, "empty file".into())),
    }
    let mut traces: Vec<RateTrace> = Vec::new();
    for (k, line) in lines.enumerate() {
        let no = k + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 3 {
            return Err(malformed(no, format!("expected 3 fields, found {}", fields.len())));
        }
        let second: usize = fields[0].parse().map_err(|e| malformed(no, format!("time_s: {e}")))?;
        let user: usize = fields[1].parse().map_err(|e| malformed(no, format!("user_id: {e}")))?;
        let r: f64 = fields[2].parse().map_err(|e| malformed(no, format!("rate_bps: {e}")))?;
        if !(r >= 0.0 && r.is_finite()) {
            return Err(malformed(no, format!("rate {r} is not a nonnegative number")));
        }
        if user == traces.len() && second == 0 {
            traces.push(RateTrace { user, samples: Vec::new() });
        }
        match traces.get_mut(user) {
            Some(t) if t.samples.len() == second => t.samples.push(r),
            _ => return Err(malformed(no, format!("row ({second}, {user}) out of order"))),
        }
    }
    if traces.is_empty() {
        return Err(malformed(2, "no samples".into()));
    }
    let len = traces[0].samples.len();
    if traces.iter().any(|t| t.samples.len() != len) {
        return Err(malformed(0, "users have different trace lengths (truncated file?)".into()));
    }
    Ok(traces)
}

/// Trace files of a train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub manifest: PathBuf,
}

impl Split {
    /// Parses a split manifest (`[train]` / `[test]` sections, one path per
    /// line, relative paths resolved against the manifest's directory).
    pub fn read(manifest: &Path) -> Result<Split> {
        let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let (mut train, mut test) = (Vec::new(), Vec::new());
        let mut section: Option<&mut Vec<PathBuf>> = None;
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            match line {
                "" => {}
                "[train]" => section = Some(&mut train),
                "[test]" => section = Some(&mut test),
                path => match section.as_deref_mut() {
                    Some(list) => list.push(base.join(path)),
                    None => {
                        return Err(TraceError::Malformed {
                            path: manifest.to_path_buf(),
                            line: k + 1,
                            msg: "path before any section header".into(),
                        })
                    }
                },
            }
        }
        Ok(Split { train, test, manifest: manifest.to_path_buf() })
    }
}

/// File name of a split member.
pub fn trace_file_name(split: &str, index: usize, seed: u64) -> String {
    format!("{split}_{index:03}_seed{seed}.csv")
}

/// Generates `n_train + n_test` traces with disjoint seeds under `dir` and
/// writes `split.txt`. Train trace `k` uses seed `base_seed + k`, test trace
/// `k` uses `base_seed + n_train + k`.
pub fn make_split(n_train: usize, n_test: usize, base_seed: u64, scenario: &Scenario, dir: &Path) -> Result<Split> {
    if n_train == 0 || n_test == 0 {
        return Err(TraceError::InvalidScenario("split counts must be at least 1".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let jobs: Vec<(&str, usize, u64)> = (0..n_train)
        .map(|k| ("train", k, base_seed + k as u64))
        .chain((0..n_test).map(|k| ("test", k, base_seed + (n_train + k) as u64)))
        .collect();
    let names = jobs
        .par_iter()
        .map(|&(split, k, seed)| {
            let name = trace_file_name(split, k, seed);
            let generated = generate(&Scenario { seed, ..scenario.clone() })?;
            write_trace(&generated.traces, &dir.join(&name))?;
            Ok(name)
        })
        .collect::<Result<Vec<String>>>()?;

    let mut manifest = String::from("[train]\n");
    for name in &names[..n_train] {
        manifest.push_str(name);
        manifest.push('\n');
    }
    manifest.push_str("[test]\n");
    for name in &names[n_train..] {
        manifest.push_str(name);
        manifest.push('\n');
    }
    let path = dir.join("split.txt");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Split::read(&path)
}
