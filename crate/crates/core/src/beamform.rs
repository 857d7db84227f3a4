//! Per-slot downlink beamforming.
//!
//! Two block-coordinate solvers share one loop — MMSE receivers `u`, then
//! scalar weights `w`, then transmit vectors `v` under per-cell power budgets:
//!
//! * [`Mode::Qddra`] maximises `Σ α_i q_i(R_i)`, the weighted sum of video
//!   qualities, with `w = c'(e)` from the rate–quality cost;
//! * [`Mode::Wmmse`] maximises `Σ α_i R_i` with `w = 1/e`.
//!
//! The SNR gap `Γ` is folded into the channel (`H̃ = H/√Γ`) before solving,
//! so that with MMSE receivers each user's rate is exactly `−B log₂ e`.
//! Reported rates are the achievable rates of the effective channels.

use std::f64::consts::LN_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelSnapshot;
use crate::numerics::{logdet_hpd, solve_hpd, CMatrix, CVector, NumericsError};
use crate::quality::{cost_deriv, quality_of_rate, QualityError, RQParams};

/// Power-iteration steps for the initial transmit direction.
pub const INIT_POWER_ITERATIONS: usize = 20;
/// Slack allowed on a per-cell power budget.
pub const POWER_SLACK: f64 = 1e-6;
/// Relative slack before an objective decrease counts as a descent failure.
pub const ASCENT_SLACK: f64 = 1e-8;

const MU_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamformError {
    #[error("invalid slot problem: {0}")]
    InvalidProblem(String),
    #[error("power multiplier search failed for cell {cell}")]
    BisectionFailure { cell: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Quality(#[from] QualityError),
}

pub type Result<T, E = BeamformError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Quality-driven weighted sum-quality maximisation.
    Qddra,
    /// Weighted sum-rate maximisation.
    Wmmse,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "qddra" => Ok(Mode::Qddra),
            "wmmse" => Ok(Mode::Wmmse),
            other => Err(format!("unknown solver mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Qddra => "qddra",
            Mode::Wmmse => "wmmse",
        })
    }
}

/// Everything one slot solve needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotProblem {
    pub snapshot: ChannelSnapshot,
    /// Home cell of each user.
    pub home: Vec<usize>,
    /// Power budget per cell in watts.
    pub power: Vec<f64>,
    /// Positive per-user utility weights.
    pub alpha: Vec<f64>,
    /// Per-user rate–quality curves, rate axis in bits/s.
    pub z: Vec<RQParams>,
    /// SNR gap `Γ ≥ 1`.
    pub gap: f64,
    /// Bandwidth in Hz.
    pub bandwidth: f64,
}

impl SlotProblem {
    pub fn n_users(&self) -> usize {
        self.home.len()
    }

    pub fn n_cells(&self) -> usize {
        self.power.len()
    }

    fn noise(&self) -> f64 {
        self.snapshot.noise_power
    }

    /// Channel from the base station of cell `l` to user `i`.
    pub fn h(&self, i: usize, l: usize) -> &CMatrix {
        &self.snapshot.h[i][l]
    }

    pub fn users_in_cell(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.home.iter().enumerate().filter(move |(_, &c)| c == cell).map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BeamformError::InvalidProblem(m));
        let n = self.n_users();
        if n == 0 || self.n_cells() == 0 {
            return bad("empty problem".into());
        }
        if self.alpha.len() != n || self.z.len() != n || self.snapshot.h.len() != n {
            return bad(format!(
                "{n} users but {} weights, {} curves, {} channel rows",
                self.alpha.len(),
                self.z.len(),
                self.snapshot.h.len()
            ));
        }
        if self.home.iter().any(|&c| c >= self.n_cells()) {
            return bad("home cell out of range".into());
        }
        if self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("weights must be positive and finite".into());
        }
        if self.power.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad("power budgets must be positive".into());
        }
        if !(self.gap >= 1.0) || !(self.bandwidth > 0.0) || !(self.noise() > 0.0) {
            return bad("need gap >= 1, bandwidth > 0 and noise power > 0".into());
        }
        for (i, row) in self.snapshot.h.iter().enumerate() {
            if row.len() != self.n_cells() {
                return bad(format!("user {i} has {} links", row.len()));
            }
            let n_rx = row[0].rows();
            for (l, h) in row.iter().enumerate() {
                let n_tx = self.snapshot.h[self.users_in_cell(l).next().unwrap_or(i)][l].cols();
                if h.rows() != n_rx || h.cols() != n_tx {
                    return bad(format!("link ({i},{l}) has inconsistent shape"));
                }
                if h.as_slice().iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
                    return bad(format!("link ({i},{l}) is not finite"));
                }
            }
        }
        Ok(())
    }

    /// The same problem on effective channels `H/√Γ` with `Γ = 1`.
    pub fn folded(&self) -> SlotProblem {
        let s = 1.0 / self.gap.sqrt();
        let mut out = self.clone();
        for h in out.snapshot.h.iter_mut().flatten() {
            *h = h.scale(s);
        }
        out.gap = 1.0;
        out
    }

    /// Bits per second carried by one nat per channel use.
    pub fn nat_unit(&self) -> f64 {
        self.bandwidth / LN_2
    }
}

/// Per-user beamformers and their MSE bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub v: Vec<CVector>,
    pub u: Vec<CVector>,
    pub w: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotResult {
    pub beamformers: BeamformerSet,
    /// Achievable rate per user in bits/s.
    pub rates: Vec<f64>,
    /// Quality per user in dB.
    pub qualities: Vec<f64>,
    /// Number of completed receiver/weight/transmit cycles.
    pub iterations: usize,
    /// Objective after initialisation and after every accepted cycle.
    pub objective: Vec<f64>,
    /// True when a cycle lowered the objective and was rolled back.
    pub descent_guard_tripped: bool,
    /// Largest per-cell excess of `Σ‖v‖²` over the budget seen at any
    /// iterate (negative when every iterate was strictly inside).
    pub max_power_excess: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    /// Stop once a cycle's objective gain, relative to the objective's excess
    /// over its zero-rate value, drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { tol: 1e-4, max_iter: 100 }
    }
}

/// Signal of user `j` as seen at receiver `i`: `H(i, home j) v_j`.
fn received(problem: &SlotProblem, i: usize, j: usize, v: &[CVector]) -> CVector {
    problem.h(i, problem.home[j]).mul_vec(&v[j])
}

/// Receive covariance at user `i`, optionally without its own signal.
fn covariance(problem: &SlotProblem, i: usize, v: &[CVector], include_own: bool) -> CMatrix {
    let n_rx = problem.h(i, 0).rows();
    let mut c = CMatrix::identity(n_rx).scale(problem.noise());
    for j in 0..problem.n_users() {
        if j != i || include_own {
            c.add_outer(&received(problem, i, j, v), 1.0);
        }
    }
    c
}

/// MMSE receive vectors `u_i = (Σ_j H v_j v_jᴴ Hᴴ + σ²I)⁻¹ H v_i`.
pub fn mmse_receiver(problem: &SlotProblem, v: &[CVector]) -> Result<Vec<CVector>> {
    (0..problem.n_users())
        .map(|i| {
            let c = covariance(problem, i, v, true);
            Ok(solve_hpd(&c, &received(problem, i, i, v))?)
        })
        .collect()
}

/// Mean-square symbol error of user `i` for an arbitrary receive vector:
/// `|1 − uᴴHv_i|² + Σ_{j≠i}|uᴴHv_j|² + σ²‖u‖²`.
pub fn mse(problem: &SlotProblem, i: usize, u: &CVector, v: &[CVector]) -> f64 {
    let mut e = problem.noise() * u.norm_sqr();
    for j in 0..problem.n_users() {
        let g = u.dot_h(&received(problem, i, j, v));
        e += if j == i { (Complex64::new(1.0, 0.0) - g).norm_sqr() } else { g.norm_sqr() };
    }
    e
}

/// MSE of user `i` under its MMSE receiver, `1 − uᴴHv_i`.
pub fn mmse_error(problem: &SlotProblem, i: usize, u: &CVector, v: &[CVector]) -> f64 {
    let e = 1.0 - u.dot_h(&received(problem, i, i, v)).re;
    e.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Scalar weight of one user: `c'(e)` for QDDRA (with `z` in per-nat units),
/// `1/e` for WMMSE.
pub fn weight_update(e: f64, z_nat: &RQParams, mode: Mode) -> Result<f64> {
    match mode {
        Mode::Qddra => Ok(cost_deriv(e, z_nat)?),
        Mode::Wmmse => {
            if !(e > 0.0 && e <= 1.0) {
                return Err(QualityError::MseOutOfRange(e).into());
            }
            Ok(1.0 / e)
        }
    }
}

/// Transmit vectors of the users of `cell` for a given multiplier `μ`;
/// `None` when the regularised matrix is singular.
fn cell_transmit(
    a: &CMatrix,
    rhs: &[(usize, CVector)],
    mu: f64,
) -> Option<Vec<(usize, CVector)>> {
    let mut m = a.clone();
    m.add_diag(mu);
    rhs.iter()
        .map(|(i, b)| solve_hpd(&m, b).ok().map(|x| (*i, x)))
        .collect()
}

fn total_power(vs: &[(usize, CVector)]) -> f64 {
    vs.iter().map(|(_, v)| v.norm_sqr()).sum()
}

/// Transmit update `v_i = α_i w_i (Σ_j α_j w_j Hᴴu_j u_jᴴH + μ_k I)⁻¹ Hᴴ u_i`
/// with the smallest `μ_k ≥ 0` that meets cell `k`'s power budget.
///
/// Returns the vectors and the multipliers.
pub fn transmit_update(
    problem: &SlotProblem,
    u: &[CVector],
    w: &[f64],
) -> Result<(Vec<CVector>, Vec<f64>)> {
    let n = problem.n_users();
    let mut v: Vec<CVector> = vec![CVector::default(); n];
    let mut mus = vec![0.0; problem.n_cells()];
    for k in 0..problem.n_cells() {
        let members: Vec<usize> = problem.users_in_cell(k).collect();
        if members.is_empty() {
            continue;
        }
        let n_tx = problem.h(members[0], k).cols();
        let mut a = CMatrix::zeros(n_tx, n_tx);
        for j in 0..n {
            let g = problem.h(j, k).adjoint_mul_vec(&u[j]);
            a.add_outer(&g, problem.alpha[j] * w[j]);
        }
        let rhs: Vec<(usize, CVector)> = members
            .iter()
            .map(|&i| {
                let g = problem.h(i, k).adjoint_mul_vec(&u[i]);
                let s = problem.alpha[i] * w[i];
                (i, g.scale(Complex64::new(s, 0.0)))
            })
            .collect();
        let budget = problem.power[k];
        let power_at = |mu: f64| cell_transmit(&a, &rhs, mu).map(|vs| (total_power(&vs), vs));

        let (mu, vs) = match power_at(0.0) {
            Some((p, vs)) if p <= budget => (0.0, vs),
            _ => {
                // ‖v_i‖ ≤ ‖rhs_i‖/μ, so this μ is always feasible.
                let bound = (rhs.iter().map(|(_, b)| b.norm_sqr()).sum::<f64>() / budget).sqrt();
                let mut hi = bound.max(f64::MIN_POSITIVE);
                let mut best = loop {
                    match power_at(hi) {
                        Some((p, vs)) if p <= budget => break vs,
                        _ if hi > 1e300 => return Err(BeamformError::BisectionFailure { cell: k }),
                        _ => hi *= 2.0,
                    }
                };
                let mut lo = 0.0;
                for _ in 0..MU_MAX_ITER {
                    if hi - lo <= 1e-15 * hi || budget - total_power(&best) <= 1e-10 * budget {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    match power_at(mid) {
                        Some((p, vs)) if p <= budget => {
                            hi = mid;
                            best = vs;
                        }
                        _ => lo = mid,
                    }
                }
                (hi, best)
            }
        };
        mus[k] = mu;
        for (i, x) in vs {
            v[i] = x;
        }
    }
    Ok((v, mus))
}

/// Per-cell `Σ‖v‖² − P_k`, maximised over cells.
pub fn power_excess(problem: &SlotProblem, v: &[CVector]) -> f64 {
    (0..problem.n_cells())
        .map(|k| problem.users_in_cell(k).map(|i| v[i].norm_sqr()).sum::<f64>() - problem.power[k])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Equal power split with each direction the dominant right singular vector
/// of the direct channel.
pub fn initial_beamformers(problem: &SlotProblem) -> Vec<CVector> {
    let counts: Vec<usize> = (0..problem.n_cells()).map(|k| problem.users_in_cell(k).count()).collect();
    (0..problem.n_users())
        .map(|i| {
            let k = problem.home[i];
            let h = problem.h(i, k);
            let mut x = CVector(vec![Complex64::new(1.0, 0.0); h.cols()]);
            for _ in 0..INIT_POWER_ITERATIONS {
                let y = h.adjoint_mul_vec(&h.mul_vec(&x));
                let norm = y.norm_sqr().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    break;
                }
                x = y.scale(Complex64::new(1.0 / norm, 0.0));
            }
            let target = (problem.power[k] / counts[k] as f64).sqrt();
            x.scale(Complex64::new(target / x.norm_sqr().sqrt(), 0.0))
        })
        .collect()
}

/// Achievable rate of `user` in bits/s:
/// `B log₂ det(I + H v vᴴ Hᴴ Θ⁻¹ / Γ)` with `Θ` the interference-plus-noise
/// covariance.
pub fn rate(problem: &SlotProblem, v: &[CVector], user: usize) -> Result<f64> {
    let theta = covariance(problem, user, v, false);
    let mut total = theta.clone();
    total.add_outer(&received(problem, user, user, v), 1.0 / problem.gap);
    let nats = logdet_hpd(&total)? - logdet_hpd(&theta)?;
    Ok(problem.bandwidth * nats.max(0.0) / LN_2)
}

/// Long-term average quality recursion `Q = βq + (1 − β)Q_prev`.
pub fn update_avg_quality(q_prev: f64, q: f64, beta: f64) -> f64 {
    beta * q + (1.0 - beta) * q_prev
}

struct Evaluation {
    u: Vec<CVector>,
    e: Vec<f64>,
    objective: f64,
}

/// Receivers, MSEs and objective of a folded problem at `v`.
fn evaluate(problem: &SlotProblem, v: &[CVector], mode: Mode) -> Result<Evaluation> {
    let u = mmse_receiver(problem, v)?;
    let e: Vec<f64> = (0..problem.n_users()).map(|i| mmse_error(problem, i, &u[i], v)).collect();
    let unit = problem.nat_unit();
    let objective = e
        .iter()
        .enumerate()
        .map(|(i, &ei)| {
            let r = -ei.ln() * unit;
            problem.alpha[i]
                * match mode {
                    Mode::Qddra => quality_of_rate(r, &problem.z[i]),
                    Mode::Wmmse => r,
                }
        })
        .sum();
    Ok(Evaluation { u, e, objective })
}

/// Runs the receiver → weight → transmit cycle from `v_init` until the
/// objective stalls.
///
/// A cycle that lowers the objective by more than [`ASCENT_SLACK`] (possible
/// only when the QDDRA cost is not concave over the visited MSEs) is rolled
/// back and ends the solve with `descent_guard_tripped` set.
pub fn solve_slot(problem: &SlotProblem, v_init: &[CVector], mode: Mode, stop: StopRule) -> Result<SlotResult> {
    problem.validate()?;
    if v_init.len() != problem.n_users() {
        return Err(BeamformError::InvalidProblem("one initial vector per user required".into()));
    }
    let folded = problem.folded();
    let z_nat: Vec<RQParams> = problem.z.iter().map(|z| z.rescale_rate(folded.nat_unit())).collect();

    // Convergence is judged on the gain above the zero-rate objective, so a
    // constant quality offset (`z1 ln z3`) does not mask slow progress.
    let floor: f64 = match mode {
        Mode::Qddra => (0..problem.n_users()).map(|i| problem.alpha[i] * quality_of_rate(0.0, &problem.z[i])).sum(),
        Mode::Wmmse => 0.0,
    };
    let mut v = v_init.to_vec();
    let mut max_excess = power_excess(&folded, &v);
    let mut cur = evaluate(&folded, &v, mode)?;
    let mut objective = vec![cur.objective];
    let mut w = vec![0.0; problem.n_users()];
    let mut iterations = 0;
    let mut tripped = false;

    while iterations < stop.max_iter {
        let w_next = cur
            .e
            .iter()
            .zip(&z_nat)
            .map(|(&e, z)| weight_update(e, z, mode))
            .collect::<Result<Vec<f64>>>()?;
        let (v_next, _) = transmit_update(&folded, &cur.u, &w_next)?;
        max_excess = max_excess.max(power_excess(&folded, &v_next));
        let next = evaluate(&folded, &v_next, mode)?;
        iterations += 1;
        let prev = cur.objective;
        if next.objective < prev - ASCENT_SLACK * prev.abs() {
            tripped = true;
            break;
        }
        w = w_next;
        v = v_next;
        cur = next;
        objective.push(cur.objective);
        if cur.objective - prev <= stop.tol * (prev - floor).abs() {
            break;
        }
    }
    if w.iter().all(|&x| x == 0.0) {
        w = cur
            .e
            .iter()
            .zip(&z_nat)
            .map(|(&e, z)| weight_update(e, z, mode))
            .collect::<Result<Vec<f64>>>()?;
    }

    let rates = (0..problem.n_users())
        .map(|i| rate(&folded, &v, i))
        .collect::<Result<Vec<f64>>>()?;
    let qualities = rates.iter().zip(&problem.z).map(|(&r, z)| quality_of_rate(r, z)).collect();
    Ok(SlotResult {
        beamformers: BeamformerSet { v, u: cur.u, w, e: cur.e },
        rates,
        qualities,
        iterations,
        objective,
        descent_guard_tripped: tripped,
        max_power_excess: max_excess,
    })
}
