//! Time-varying downlink channels for a multi-cell network.
//!
//! Each user–base-station link is `H = sqrt(g_ls) · G`, where `g_ls` is a
//! log-distance path loss with log-normal shadowing and `G` is small-scale
//! Rayleigh fading evolving as a first-order Gauss–Markov chain
//! `G ← ζG + ξ`, `ξ ~ CN(0, 1 − ζ²)`, `ζ = J0(2π f_d T_slot)`.
//!
//! Users walk inside the annulus `[D_min, D]` around their home base station,
//! taking one step every mobility period; a user's shadowing is redrawn
//! whenever it moves and held in between.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{bessel_j0, sample_cscg, CMatrix};

/// Attempts at drawing an in-annulus step before a user stays put.
pub const MAX_MOVE_ATTEMPTS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("distance {distance} m is below the minimum radius {min_radius} m")]
    DistanceBelowMinimum { distance: f64, min_radius: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T, E = ChannelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub position: [f64; 2],
    pub n_tx: usize,
    /// Transmit power budget in watts.
    pub power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub cell: usize,
    pub n_rx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub cells: Vec<Cell>,
    pub users: Vec<UserSpec>,
    /// Cell radius `D` in meters.
    pub radius: f64,
    /// Minimum user–base-station distance `D_min` in meters.
    pub min_radius: f64,
}

impl Topology {
    /// One base station at the origin serving `users` users.
    pub fn single_cell(users: usize, n_tx: usize, n_rx: usize, power: f64, radius: f64, min_radius: f64) -> Self {
        Topology {
            cells: vec![Cell { position: [0.0, 0.0], n_tx, power }],
            users: vec![UserSpec { cell: 0, n_rx }; users],
            radius,
            min_radius,
        }
    }

    /// `cells` base stations on a line spaced `2·radius` apart (adjacent cells
    /// touch), each serving `users_per_cell` users.
    pub fn linear_cells(
        cells: usize,
        users_per_cell: usize,
        n_tx: usize,
        n_rx: usize,
        power: f64,
        radius: f64,
        min_radius: f64,
    ) -> Self {
        Topology {
            cells: (0..cells)
                .map(|k| Cell { position: [2.0 * radius * k as f64, 0.0], n_tx, power })
                .collect(),
            users: (0..cells)
                .flat_map(|k| std::iter::repeat_n(UserSpec { cell: k, n_rx }, users_per_cell))
                .collect(),
            radius,
            min_radius,
        }
    }

    /// `cells` base stations on a square grid with spacing `2·radius`.
    pub fn grid_cells(
        cells: usize,
        users_per_cell: usize,
        n_tx: usize,
        n_rx: usize,
        power: f64,
        radius: f64,
        min_radius: f64,
    ) -> Self {
        let side = (cells as f64).sqrt().ceil() as usize;
        let mut t = Self::linear_cells(cells, users_per_cell, n_tx, n_rx, power, radius, min_radius);
        for (k, c) in t.cells.iter_mut().enumerate() {
            c.position = [2.0 * radius * (k % side) as f64, 2.0 * radius * (k / side) as f64];
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ChannelError::InvalidTopology(m.to_string()));
        if self.cells.is_empty() || self.users.is_empty() {
            return bad("need at least one cell and one user");
        }
        if !(self.min_radius > 0.0 && self.min_radius < self.radius) {
            return bad("need 0 < D_min < D");
        }
        if self.cells.iter().any(|c| c.n_tx == 0 || !(c.power > 0.0)) {
            return bad("every cell needs >= 1 transmit antenna and positive power");
        }
        if self.users.iter().any(|u| u.n_rx == 0 || u.cell >= self.cells.len()) {
            return bad("every user needs >= 1 receive antenna and a valid home cell");
        }
        Ok(())
    }

    pub fn users_in_cell(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.users
            .iter()
            .enumerate()
            .filter(move |(_, u)| u.cell == cell)
            .map(|(i, _)| i)
    }
}

/// Large-scale and mobility constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub path_loss_exponent: f64,
    /// Standard deviation of log-normal shadowing in dB.
    pub shadowing_std_db: f64,
    /// Path gain at `D_min` in dB (0 dB: unit gain at the reference distance).
    pub reference_gain_db: f64,
    /// Walking speed in m/s.
    pub speed: f64,
    /// Seconds between mobility steps.
    pub move_period: f64,
    /// Maximum Doppler frequency in Hz.
    pub doppler_hz: f64,
    /// Slot length in seconds.
    pub slot_s: f64,
    /// Receiver noise power σ² in watts.
    pub noise_power: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            path_loss_exponent: 3.0,
            shadowing_std_db: 8.0,
            reference_gain_db: 0.0,
            speed: 1.4,
            move_period: 5.0,
            doppler_hz: 10.0,
            slot_s: 0.04,
            noise_power: 1.0,
        }
    }
}

impl ChannelParams {
    /// Slot-to-slot fading correlation `ζ = J0(2π f_d T_slot)`.
    pub fn correlation(&self) -> f64 {
        bessel_j0(2.0 * PI * self.doppler_hz * self.slot_s)
    }
}

/// Linear power gain of a link at `distance` meters with the given shadowing.
pub fn large_scale_gain(distance: f64, shadowing_db: f64, min_radius: f64, params: &ChannelParams) -> Result<f64> {
    if !(distance >= min_radius) {
        return Err(ChannelError::DistanceBelowMinimum { distance, min_radius });
    }
    let db = params.reference_gain_db + shadowing_db;
    Ok((distance / min_radius).powf(-params.path_loss_exponent) * 10f64.powf(db / 10.0))
}

pub fn sample_shadowing_db<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> f64 {
    if params.shadowing_std_db == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, params.shadowing_std_db)
        .expect("finite shadowing std")
        .sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityState {
    pub positions: Vec<[f64; 2]>,
    /// Simulation time of the next mobility step, in seconds.
    pub next_move: f64,
    /// Shadowing in dB per `[user][base station]`, redrawn when a user moves.
    pub shadowing_db: Vec<Vec<f64>>,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn draw_shadowing<R: Rng + ?Sized>(topology: &Topology, params: &ChannelParams, rng: &mut R) -> Vec<Vec<f64>> {
    topology
        .users
        .iter()
        .map(|_| topology.cells.iter().map(|_| sample_shadowing_db(params, rng)).collect())
        .collect()
}

/// Places each user uniformly (by area) in the annulus around its home cell.
pub fn init_positions<R: Rng + ?Sized>(topology: &Topology, params: &ChannelParams, rng: &mut R) -> MobilityState {
    let (d_min, d) = (topology.min_radius, topology.radius);
    let positions = topology
        .users
        .iter()
        .map(|u| {
            let bs = topology.cells[u.cell].position;
            let r = (rng.random::<f64>() * (d * d - d_min * d_min) + d_min * d_min).sqrt();
            let theta = 2.0 * PI * rng.random::<f64>();
            [bs[0] + r * theta.cos(), bs[1] + r * theta.sin()]
        })
        .collect();
    MobilityState {
        positions,
        next_move: params.move_period,
        shadowing_db: draw_shadowing(topology, params, rng),
    }
}

/// Advances mobility to simulation time `t`. Nothing changes unless `t` has
/// reached the next step epoch.
pub fn step_mobility<R: Rng + ?Sized>(
    state: &MobilityState,
    topology: &Topology,
    params: &ChannelParams,
    t: f64,
    rng: &mut R,
) -> MobilityState {
    // slot times are accumulated in floating point
    if t + 1e-9 < state.next_move {
        return state.clone();
    }
    let step = params.speed * params.move_period;
    let mut next = state.clone();
    next.next_move += params.move_period;
    for (i, u) in topology.users.iter().enumerate() {
        let bs = topology.cells[u.cell].position;
        let p = state.positions[i];
        for _ in 0..MAX_MOVE_ATTEMPTS {
            let theta = 2.0 * PI * rng.random::<f64>();
            let cand = [p[0] + step * theta.cos(), p[1] + step * theta.sin()];
            let r = distance(cand, bs);
            if r >= topology.min_radius && r <= topology.radius {
                next.positions[i] = cand;
                break;
            }
        }
        // shadowing decorrelates with position: a user that stayed keeps it
        if next.positions[i] != p {
            for s in next.shadowing_db[i].iter_mut() {
                *s = sample_shadowing_db(params, rng);
            }
        }
    }
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct FadingState {
    /// Small-scale gains per `[user][base station]`, shape `n_rx × n_tx`.
    pub gains: Vec<Vec<CMatrix>>,
    pub correlation: f64,
}

impl FadingState {
    /// Draws every entry from the stationary distribution `CN(0, 1)`.
    pub fn stationary<R: Rng + ?Sized>(topology: &Topology, correlation: f64, rng: &mut R) -> Self {
        let gains = topology
            .users
            .iter()
            .map(|u| {
                topology
                    .cells
                    .iter()
                    .map(|c| {
                        let v = sample_cscg(u.n_rx * c.n_tx, 1.0, rng).expect("unit variance");
                        CMatrix::from_vec(u.n_rx, c.n_tx, v.0).expect("shape")
                    })
                    .collect()
            })
            .collect();
        FadingState { gains, correlation }
    }
}

/// One Gauss–Markov step of every fading entry.
pub fn step_fading<R: Rng + ?Sized>(fading: &FadingState, rng: &mut R) -> FadingState {
    let zeta = fading.correlation;
    let innovation = (1.0 - zeta * zeta).max(0.0);
    let gains = fading
        .gains
        .iter()
        .map(|row| {
            row.iter()
                .map(|g| {
                    let xi = sample_cscg(g.as_slice().len(), innovation, rng).expect("nonnegative");
                    let mut next = g.scale(zeta);
                    for (a, b) in next.as_mut_slice().iter_mut().zip(xi.iter()) {
                        *a += b;
                    }
                    next
                })
                .collect()
        })
        .collect();
    FadingState { gains, correlation: zeta }
}

/// All downlink matrices at one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSnapshot {
    pub slot: u64,
    /// `h[user][bs]`, shape `n_rx(user) × n_tx(bs)`.
    pub h: Vec<Vec<CMatrix>>,
    pub noise_power: f64,
}

impl ChannelSnapshot {
    pub fn n_users(&self) -> usize {
        self.h.len()
    }
}

/// Assembles `H = sqrt(g_ls) · G` for every user–base-station pair.
pub fn snapshot(
    slot: u64,
    topology: &Topology,
    mobility: &MobilityState,
    fading: &FadingState,
    params: &ChannelParams,
) -> Result<ChannelSnapshot> {
    if fading.gains.len() != topology.users.len() || mobility.positions.len() != topology.users.len() {
        return Err(ChannelError::ShapeMismatch(format!(
            "{} users in topology, {} fading rows, {} positions",
            topology.users.len(),
            fading.gains.len(),
            mobility.positions.len()
        )));
    }
    let mut h = Vec::with_capacity(topology.users.len());
    for (i, user) in topology.users.iter().enumerate() {
        if fading.gains[i].len() != topology.cells.len() {
            return Err(ChannelError::ShapeMismatch(format!("user {i} has {} fading links", fading.gains[i].len())));
        }
        let mut row = Vec::with_capacity(topology.cells.len());
        for (l, cell) in topology.cells.iter().enumerate() {
            let g = &fading.gains[i][l];
            if g.rows() != user.n_rx || g.cols() != cell.n_tx {
                return Err(ChannelError::ShapeMismatch(format!(
                    "link ({i},{l}) is {}x{}, expected {}x{}",
                    g.rows(),
                    g.cols(),
                    user.n_rx,
                    cell.n_tx
                )));
            }
            let dist = distance(mobility.positions[i], cell.position).max(topology.min_radius);
            let gain = large_scale_gain(dist, mobility.shadowing_db[i][l], topology.min_radius, params)?;
            row.push(g.scale(gain.sqrt()));
        }
        h.push(row);
    }
    Ok(ChannelSnapshot { slot, h, noise_power: params.noise_power })
}

/// Owns the evolving channel state for one simulation run.
#[derive(Debug, Clone)]
pub struct ChannelEngine {
    topology: Topology,
    params: ChannelParams,
    mobility: MobilityState,
    fading: FadingState,
    slot: u64,
    rng: ChaCha8Rng,
}

impl ChannelEngine {
    pub fn new(topology: Topology, params: ChannelParams, mut rng: ChaCha8Rng) -> Result<Self> {
        topology.validate()?;
        let mobility = init_positions(&topology, &params, &mut rng);
        let fading = FadingState::stationary(&topology, params.correlation(), &mut rng);
        Ok(ChannelEngine { topology, params, mobility, fading, slot: 0, rng })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn mobility(&self) -> &MobilityState {
        &self.mobility
    }

    pub fn current(&self) -> Result<ChannelSnapshot> {
        snapshot(self.slot, &self.topology, &self.mobility, &self.fading, &self.params)
    }

    /// Moves to the next slot and returns its snapshot.
    pub fn advance(&mut self) -> Result<ChannelSnapshot> {
        self.slot += 1;
        let t = self.slot as f64 * self.params.slot_s;
        self.fading = step_fading(&self.fading, &mut self.rng);
        self.mobility = step_mobility(&self.mobility, &self.topology, &self.params, t, &mut self.rng);
        self.current()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn topo() -> Topology {
        Topology::linear_cells(2, 3, 2, 2, 4.0, 100.0, 10.0)
    }

    fn dist_home(t: &Topology, m: &MobilityState, i: usize) -> f64 {
        distance(m.positions[i], t.cells[t.users[i].cell].position)
    }

    #[test]
    fn topology_validation() {
        assert!(topo().validate().is_ok());
        let mut t = topo();
        t.min_radius = 200.0;
        assert!(t.validate().is_err());
        let mut t = topo();
        t.users[0].cell = 7;
        assert!(t.validate().is_err());
        assert_eq!(topo().users_in_cell(1).collect::<Vec<_>>(), vec![3, 4, 5]);
        let g = Topology::grid_cells(4, 3, 3, 2, 4.0, 100.0, 10.0);
        assert_eq!(g.cells[3].position, [200.0, 200.0]);
        assert_eq!(g.users.len(), 12);
    }

    #[test]
    fn initial_positions_lie_in_annulus() {
        let t = topo();
        let p = ChannelParams::default();
        let m = init_positions(&t, &p, &mut rng(1));
        for i in 0..t.users.len() {
            let d = dist_home(&t, &m, i);
            assert!((10.0..=100.0).contains(&d), "{d}");
        }
        assert_eq!(m, init_positions(&t, &p, &mut rng(1)));

        let mut thin = t.clone();
        thin.min_radius = 100.0 - 1e-9;
        let m = init_positions(&thin, &p, &mut rng(2));
        for i in 0..thin.users.len() {
            assert!((dist_home(&thin, &m, i) - 100.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mobility_epochs_and_step_length() {
        let t = topo();
        let p = ChannelParams::default();
        let mut r = rng(3);
        let m0 = init_positions(&t, &p, &mut r);
        assert_eq!(step_mobility(&m0, &t, &p, 2.5, &mut r), m0);
        assert_eq!(step_mobility(&m0, &t, &p, 4.96, &mut r), m0);
        let m1 = step_mobility(&m0, &t, &p, 5.0, &mut r);
        assert_eq!(m1.next_move, 10.0);
        for i in 0..t.users.len() {
            let moved = distance(m0.positions[i], m1.positions[i]);
            assert!(moved == 0.0 || (moved - 7.0).abs() < 1e-9, "{moved}");
        }

        let still = ChannelParams { speed: 0.0, ..p.clone() };
        let mut m = m0.clone();
        for k in 1..50 {
            m = step_mobility(&m, &t, &still, 5.0 * k as f64, &mut r);
            assert_eq!(m.positions, m0.positions);
        }
    }

    #[test]
    fn mobility_never_leaves_annulus() {
        let t = topo();
        let p = ChannelParams { speed: 6.0, ..Default::default() };
        let mut r = rng(4);
        let mut m = init_positions(&t, &p, &mut r);
        for k in 1..=10_000 {
            m = step_mobility(&m, &t, &p, 5.0 * k as f64, &mut r);
            for i in 0..t.users.len() {
                let d = dist_home(&t, &m, i);
                assert!((10.0 - 1e-9..=100.0 + 1e-9).contains(&d));
            }
        }
    }

    #[test]
    fn large_scale_gain_examples() {
        let p = ChannelParams::default();
        assert_eq!(large_scale_gain(10.0, 0.0, 10.0, &p).unwrap(), 1.0);
        assert!((large_scale_gain(20.0, 0.0, 10.0, &p).unwrap() - 0.125).abs() < 1e-15);
        assert!(matches!(
            large_scale_gain(5.0, 0.0, 10.0, &p),
            Err(ChannelError::DistanceBelowMinimum { .. })
        ));
        let boosted = ChannelParams { reference_gain_db: 30.0, ..p };
        assert!((large_scale_gain(10.0, 0.0, 10.0, &boosted).unwrap() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn shadowing_std() {
        let p = ChannelParams::default();
        let mut r = rng(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_shadowing_db(&p, &mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std / 8.0 - 1.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn fading_limits() {
        let t = topo();
        let mut r = rng(6);
        let f = FadingState::stationary(&t, 1.0, &mut r);
        assert_eq!(step_fading(&f, &mut r), f);

        let f0 = FadingState::stationary(&t, 0.0, &mut r);
        let f1 = step_fading(&f0, &mut rng(99));
        // memoryless: the next state is exactly the innovation draw
        let fresh = FadingState::stationary(&t, 0.0, &mut rng(99));
        assert_eq!(f1.gains, fresh.gains);
    }

    #[test]
    fn fading_chain_statistics() {
        let zeta = ChannelParams::default().correlation();
        let t = Topology::single_cell(1, 1, 1, 1.0, 100.0, 10.0);
        let mut r = rng(7);
        let mut f = FadingState::stationary(&t, zeta, &mut r);
        let n = 1_000_000;
        let mut prev = f.gains[0][0][(0, 0)];
        let (mut power, mut lag1) = (0.0, Complex64::new(0.0, 0.0));
        for _ in 0..n {
            f = step_fading(&f, &mut r);
            let g = f.gains[0][0][(0, 0)];
            power += g.norm_sqr();
            lag1 += g * prev.conj();
            prev = g;
        }
        let var = power / n as f64;
        let rho = lag1.re / power;
        assert!((var - 1.0).abs() < 0.03, "variance {var}");
        assert!((rho - zeta).abs() < 0.01, "lag-1 {rho} vs {zeta}");
    }

    #[test]
    fn snapshot_composition() {
        let t = Topology::single_cell(2, 2, 2, 4.0, 100.0, 10.0);
        let p = ChannelParams { shadowing_std_db: 0.0, ..Default::default() };
        let mut r = rng(8);
        let mut m = init_positions(&t, &p, &mut r);
        m.positions = vec![[10.0, 0.0], [0.0, 10.0]];
        let f = FadingState::stationary(&t, 0.9, &mut r);
        let s = snapshot(0, &t, &m, &f, &p).unwrap();
        assert_eq!(s.h[0][0], f.gains[0][0]);
        assert_eq!(s, snapshot(0, &t, &m, &f, &p).unwrap());

        let mut doubled = m.clone();
        for row in doubled.shadowing_db.iter_mut() {
            for x in row.iter_mut() {
                *x += 10.0 * 2f64.log10();
            }
        }
        let s2 = snapshot(0, &t, &doubled, &f, &p).unwrap();
        for (a, b) in s.h[1][0].as_slice().iter().zip(s2.h[1][0].as_slice()) {
            assert!((b.norm() - a.norm() * 2f64.sqrt()).abs() < 1e-12);
        }

        let mut zero = f.clone();
        for g in zero.gains.iter_mut().flatten() {
            *g = CMatrix::zeros(g.rows(), g.cols());
        }
        let s0 = snapshot(0, &t, &m, &zero, &p).unwrap();
        assert!(s0.h.iter().flatten().all(|h| h.max_abs() == 0.0));

        let mut bad = f.clone();
        bad.gains[0][0] = CMatrix::zeros(1, 1);
        assert!(matches!(snapshot(0, &t, &m, &bad, &p), Err(ChannelError::ShapeMismatch(_))));
    }

    #[test]
    fn engine_is_deterministic() {
        let make = || ChannelEngine::new(topo(), ChannelParams::default(), rng(10)).unwrap();
        let (mut a, mut b) = (make(), make());
        for _ in 0..200 {
            assert_eq!(a.advance().unwrap(), b.advance().unwrap());
        }
    }
}
