//! Advantage actor–critic for bitrate selection.
//!
//! Actor and critic are separate multilayer perceptrons of the same shape
//! (two hidden layers of 64 leaky-rectifier units); the actor ends in a
//! softmax over representations, the critic in a single linear output.
//! Updates use n-step bootstrapped advantages
//! `A_m = Σ_{j<n} γʲ r_{m+j} + γⁿ V(s_{m+n}) − V(s_m)`:
//! the critic descends `Σ A²` with the return held fixed, the actor ascends
//! `Σ log π(a|s)·A + φ·h(π(·|s))`.
//!
//! [`train`] runs several workers against shared parameters; each worker
//! snapshots the parameters, collects a rollout, and applies its whole update
//! atomically. A serial mode interleaves the workers on one thread for
//! bit-reproducible runs.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abr::{Observation, Policy};
use crate::player::{observe, step, PlayerError, PlayerParams, SessionState, VideoManifest};
use crate::tracegen::RateTrace;

/// Tag stored with checkpoints; bump when the state layout changes.
pub const STATE_ENCODING_VERSION: &str = "xlayer-state-v1: thr[n]*1e-6, dl[n]/10, q[L]/60, size[L]*1e-6/T, b/bmax, remaining/total, last_q/60";
pub const HIDDEN: [usize; 2] = [64, 64];
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Player(#[from] PlayerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RlError> = std::result::Result<T, E>;

/// State vector: `n` throughputs, `n` download times, `L` qualities, `L`
/// sizes, buffer fraction, remaining fraction, last quality.
pub fn encode_state(obs: &Observation) -> Vec<f64> {
    let mut s = Vec::with_capacity(state_dim(obs.throughput.len(), obs.levels()));
    s.extend(obs.throughput.iter().map(|c| c * 1e-6));
    s.extend(obs.download_time.iter().map(|d| d / 10.0));
    s.extend(obs.qualities.iter().map(|q| q / 60.0));
    s.extend(obs.sizes.iter().map(|x| x * 1e-6 / obs.chunk_duration));
    s.push(obs.buffer / obs.buffer_max);
    s.push(obs.remaining as f64 / obs.total_chunks.max(1) as f64);
    s.push(obs.last_quality / 60.0);
    s
}

pub fn state_dim(history: usize, levels: usize) -> usize {
    2 * history + 2 * levels + 3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Softmax,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// A multilayer perceptron; also used as the container for its gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<Layer>,
    pub head: Head,
}

impl NetParams {
    pub fn zeros(sizes: &[usize], head: Head) -> Self {
        NetParams {
            layers: sizes
                .windows(2)
                .map(|w| Layer { n_in: w[0], n_out: w[1], w: vec![0.0; w[0] * w[1]], b: vec![0.0; w[1]] })
                .collect(),
            head,
        }
    }

    /// Uniform `±sqrt(6/(fan_in + fan_out))` weights, zero biases.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], head: Head, rng: &mut R) -> Self {
        let mut p = Self::zeros(sizes, head);
        for l in &mut p.layers {
            let a = (6.0 / (l.n_in + l.n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            l.w.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        p
    }

    pub fn actor(input: usize, levels: usize, rng: &mut impl Rng) -> Self {
        Self::random(&[input, HIDDEN[0], HIDDEN[1], levels], Head::Softmax, rng)
    }

    pub fn critic(input: usize, rng: &mut impl Rng) -> Self {
        Self::random(&[input, HIDDEN[0], HIDDEN[1], 1], Head::Linear, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").n_out
    }

    pub fn zeros_like(&self) -> Self {
        let sizes: Vec<usize> =
            std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.n_out)).collect();
        Self::zeros(&sizes, self.head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(RlError::ShapeMismatch("network has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.w.len() != l.n_in * l.n_out || l.b.len() != l.n_out {
                return Err(RlError::ShapeMismatch(format!("layer {k} arrays do not match {}x{}", l.n_out, l.n_in)));
            }
            if k > 0 && self.layers[k - 1].n_out != l.n_in {
                return Err(RlError::ShapeMismatch(format!("layer {k} input {} != previous output", l.n_in)));
            }
            if l.w.iter().chain(&l.b).any(|x| !x.is_finite()) {
                return Err(RlError::ShapeMismatch(format!("layer {k} has non-finite entries")));
            }
        }
        if self.head == Head::Linear && self.output_dim() != 1 {
            return Err(RlError::ShapeMismatch("linear head must have one output".into()));
        }
        Ok(())
    }

    /// All parameters in a fixed order (weights then bias, layer by layer).
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &NetParams, s: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += s * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Activations kept for backpropagation.
struct Trace {
    /// Input of each layer (the network input, then hidden activations).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer; the last is the raw output.
    pre: Vec<Vec<f64>>,
}

fn forward_trace(p: &NetParams, s: &[f64]) -> Result<Trace> {
    if s.len() != p.input_dim() {
        return Err(RlError::ShapeMismatch(format!("state has {} entries, network expects {}", s.len(), p.input_dim())));
    }
    let mut inputs = vec![s.to_vec()];
    let mut pre = Vec::with_capacity(p.layers.len());
    for (k, l) in p.layers.iter().enumerate() {
        let x = &inputs[k];
        let z: Vec<f64> = (0..l.n_out)
            .map(|o| l.b[o] + l.w[o * l.n_in..(o + 1) * l.n_in].iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        if k + 1 < p.layers.len() {
            inputs.push(z.iter().map(|&v| leaky(v)).collect());
        }
        pre.push(z);
    }
    Ok(Trace { inputs, pre })
}

/// Accumulates `∂/∂θ` of `Σ_o g_o · output_o` into `grad`, where `g` is the
/// gradient with respect to the final pre-activation.
fn backward(p: &NetParams, tr: &Trace, mut g: Vec<f64>, grad: &mut NetParams) {
    for k in (0..p.layers.len()).rev() {
        let l = &p.layers[k];
        let x = &tr.inputs[k];
        let gl = &mut grad.layers[k];
        for o in 0..l.n_out {
            gl.b[o] += g[o];
            let row = &mut gl.w[o * l.n_in..(o + 1) * l.n_in];
            for (gw, xi) in row.iter_mut().zip(x) {
                *gw += g[o] * xi;
            }
        }
        if k > 0 {
            let prev = &tr.pre[k - 1];
            g = (0..l.n_in)
                .map(|i| (0..l.n_out).map(|o| l.w[o * l.n_in + i] * g[o]).sum::<f64>() * leaky_deriv(prev[i]))
                .collect();
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Action probabilities `π(·|s)`.
pub fn forward_actor(theta: &NetParams, s: &[f64]) -> Result<Vec<f64>> {
    let tr = forward_trace(theta, s)?;
    Ok(softmax(tr.pre.last().expect("non-empty")))
}

/// State value `V(s)`.
pub fn forward_critic(theta_v: &NetParams, s: &[f64]) -> Result<f64> {
    let tr = forward_trace(theta_v, s)?;
    Ok(tr.pre.last().expect("non-empty")[0])
}

/// Entropy `−Σ π log π` in nats.
pub fn entropy(pi: &[f64]) -> f64 {
    -pi.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// True when the episode genuinely ended after this step.
    pub terminal: bool,
}

/// Consecutive transitions plus the state that follows the last one (absent
/// when the last transition is terminal).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollout {
    pub steps: Vec<Transition>,
    pub bootstrap: Option<Vec<f64>>,
}

/// n-step returns `Σ_{j<k} γʲ r_{m+j} + γᵏ V(s_{m+k})` with `k ≤ n`, cut at
/// terminals (no bootstrap) and at the rollout end (bootstrap from the
/// rollout's final state).
pub fn returns(rollout: &Rollout, theta_v: &NetParams, gamma: f64, n: usize) -> Result<Vec<f64>> {
    let t = rollout.steps.len();
    let mut out = Vec::with_capacity(t);
    for m in 0..t {
        let mut g = 0.0;
        let mut disc = 1.0;
        let mut j = 0;
        let mut ended = false;
        while j < n && m + j < t {
            g += disc * rollout.steps[m + j].reward;
            disc *= gamma;
            ended = rollout.steps[m + j].terminal;
            j += 1;
            if ended {
                break;
            }
        }
        if !ended {
            let next = if m + j < t { Some(&rollout.steps[m + j].state) } else { rollout.bootstrap.as_ref() };
            if let Some(s) = next {
                g += disc * forward_critic(theta_v, s)?;
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Per-step advantages `A_m = G_m − V(s_m)`.
pub fn advantages(rollout: &Rollout, theta_v: &NetParams, gamma: f64, n: usize) -> Result<Vec<f64>> {
    let g = returns(rollout, theta_v, gamma, n)?;
    rollout
        .steps
        .iter()
        .zip(g)
        .map(|(tr, g)| Ok(g - forward_critic(theta_v, &tr.state)?))
        .collect()
}

/// `Σ_m (G_m − V(s_m))²` for fixed targets `G`.
pub fn critic_loss(theta_v: &NetParams, rollout: &Rollout, targets: &[f64]) -> Result<f64> {
    rollout
        .steps
        .iter()
        .zip(targets)
        .map(|(tr, g)| Ok((g - forward_critic(theta_v, &tr.state)?).powi(2)))
        .sum()
}

/// Gradient of [`critic_loss`] with the targets held constant.
pub fn critic_gradient(theta_v: &NetParams, rollout: &Rollout, targets: &[f64]) -> Result<NetParams> {
    let mut grad = theta_v.zeros_like();
    for (tr, g) in rollout.steps.iter().zip(targets) {
        let t = forward_trace(theta_v, &tr.state)?;
        let v = t.pre.last().expect("non-empty")[0];
        backward(theta_v, &t, vec![-2.0 * (g - v)], &mut grad);
    }
    Ok(grad)
}

/// One plain gradient-descent step on the critic.
pub fn critic_step(theta_v: &NetParams, rollout: &Rollout, gamma: f64, n: usize, lr: f64) -> Result<NetParams> {
    let targets = returns(rollout, theta_v, gamma, n)?;
    let grad = critic_gradient(theta_v, rollout, &targets)?;
    let mut out = theta_v.clone();
    out.add_scaled(&grad, -lr);
    Ok(out)
}

/// Actor objective `Σ_m log π(a_m|s_m)·A_m + φ·h(π(·|s_m))`.
pub fn actor_objective(theta: &NetParams, rollout: &Rollout, adv: &[f64], phi: f64) -> Result<f64> {
    rollout
        .steps
        .iter()
        .zip(adv)
        .map(|(tr, a)| {
            let pi = forward_actor(theta, &tr.state)?;
            Ok(pi[tr.action].ln() * a + phi * entropy(&pi))
        })
        .sum()
}

/// Gradient of [`actor_objective`] with the advantages held constant.
pub fn actor_gradient(theta: &NetParams, rollout: &Rollout, adv: &[f64], phi: f64) -> Result<NetParams> {
    if theta.head != Head::Softmax {
        return Err(RlError::ShapeMismatch("actor needs a softmax head".into()));
    }
    let mut grad = theta.zeros_like();
    for (tr, a) in rollout.steps.iter().zip(adv) {
        if tr.action >= theta.output_dim() {
            return Err(RlError::ShapeMismatch(format!("action {} out of range", tr.action)));
        }
        let t = forward_trace(theta, &tr.state)?;
        let pi = softmax(t.pre.last().expect("non-empty"));
        let h = entropy(&pi);
        // d log π_a / dz_k = 1[k=a] − π_k ;  d h / dz_k = −π_k (ln π_k + h)
        let g: Vec<f64> = pi
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let logp = if k == tr.action { a * (1.0 - p) } else { -a * p };
                let ent = if p > 0.0 { -p * (p.ln() + h) } else { 0.0 };
                logp + phi * ent
            })
            .collect();
        backward(theta, &t, g, &mut grad);
    }
    Ok(grad)
}

/// One plain gradient-ascent step on the actor: `θ + μ·∇(Σ log π·A + φh)`.
pub fn actor_step(theta: &NetParams, rollout: &Rollout, adv: &[f64], lr: f64, phi: f64) -> Result<NetParams> {
    let grad = actor_gradient(theta, rollout, adv, phi)?;
    let mut out = theta.clone();
    out.add_scaled(&grad, lr);
    Ok(out)
}

/// Adam moment estimates for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    m: NetParams,
    v: NetParams,
    t: u64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(like: &NetParams) -> Self {
        Adam { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    /// Moves `params` along `direction` (already signed: pass the ascent
    /// direction for maximisation, the negated gradient for minimisation).
    pub fn apply(&mut self, params: &mut NetParams, direction: &NetParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t as i32);
        let c2 = 1.0 - Self::B2.powi(self.t as i32);
        for (((p, g), m), v) in params.values_mut().zip(direction.values()).zip(self.m.values_mut()).zip(self.v.values_mut()) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient steps ([`actor_step`] / [`critic_step`]).
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Entropy weight at the first episode; decays linearly to `entropy_end`.
    pub entropy_start: f64,
    pub entropy_end: f64,
    /// Bootstrap horizon `n` of the advantage estimate (and rollout length).
    pub rollout: usize,
    pub workers: usize,
    /// Total episode budget, counted from the start of training.
    pub episodes: usize,
    /// Episodes already done (when resuming); training runs
    /// `first_episode..episodes` and the entropy schedule continues.
    pub first_episode: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Rewards are `(QoE − q_lowest(m)) · reward_scale`, where `q_lowest(m)`
    /// is the quality of chunk `m`'s lowest representation.
    pub reward_scale: f64,
    /// Run the workers interleaved on one thread (bit-reproducible).
    pub serial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            actor_lr: 1e-5,
            critic_lr: 1e-4,
            gamma: 0.99,
            entropy_start: 0.5,
            entropy_end: 0.01,
            rollout: 8,
            workers: 4,
            episodes: 10_000,
            first_episode: 0,
            seed: 0,
            optimizer: Optimizer::Adam,
            reward_scale: 0.1,
            serial: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && (0.0..=1.0).contains(&self.gamma)
            && self.entropy_start >= 0.0
            && self.entropy_end >= 0.0
            && self.rollout >= 1
            && self.workers >= 1
            && self.episodes >= 1
            && self.first_episode < self.episodes
            && self.reward_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RlError::ConfigInvalid(format!("{self:?}")))
        }
    }

    /// Entropy weight used for episode `k`.
    pub fn entropy_at(&self, k: usize) -> f64 {
        let frac = if self.episodes <= 1 { 0.0 } else { k as f64 / (self.episodes - 1) as f64 };
        self.entropy_start + (self.entropy_end - self.entropy_start) * frac.min(1.0)
    }
}

/// One training episode: a manifest played over a rate trace.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trace: RateTrace,
    pub manifest: std::sync::Arc<VideoManifest>,
}

/// Produces the `k`-th episode for a worker, drawing from its RNG.
pub trait EnvFactory: Sync {
    fn episode(&self, worker: usize, k: usize, rng: &mut ChaCha8Rng) -> Episode;
}

impl<F: Fn(usize, usize, &mut ChaCha8Rng) -> Episode + Sync> EnvFactory for F {
    fn episode(&self, worker: usize, k: usize, rng: &mut ChaCha8Rng) -> Episode {
        self(worker, k, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_qoe: f64,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub state_encoding: String,
    pub episodes_done: usize,
    pub actor: NetParams,
    pub critic: NetParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if c.state_encoding != STATE_ENCODING_VERSION {
            return Err(RlError::ShapeMismatch(format!("checkpoint state encoding {:?} is not supported", c.state_encoding)));
        }
        c.actor.validate()?;
        c.critic.validate()?;
        Ok(c)
    }
}

pub fn learning_curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("episode,mean_qoe,entropy_coef\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.episode, p.mean_qoe, p.entropy_coef));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub actor: NetParams,
    pub critic: NetParams,
    pub curve: Vec<CurvePoint>,
}

impl Trained {
    pub fn checkpoint(&self, episodes_done: usize) -> Checkpoint {
        Checkpoint {
            state_encoding: STATE_ENCODING_VERSION.into(),
            episodes_done,
            actor: self.actor.clone(),
            critic: self.critic.clone(),
        }
    }
}

struct Shared {
    actor: NetParams,
    critic: NetParams,
    actor_opt: Adam,
    critic_opt: Adam,
    next_episode: usize,
    curve: Vec<CurvePoint>,
}

fn sample_action(pi: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pi.len() - 1
}

/// Applies one rollout's critic then actor update to the shared parameters.
fn apply_update(shared: &Mutex<Shared>, actor: &NetParams, critic: &NetParams, rollout: &Rollout, phi: f64, cfg: &TrainConfig) -> Result<()> {
    let targets = returns(rollout, critic, cfg.gamma, cfg.rollout)?;
    let adv: Vec<f64> = rollout
        .steps
        .iter()
        .zip(&targets)
        .map(|(tr, g)| Ok(g - forward_critic(critic, &tr.state)?))
        .collect::<Result<_>>()?;
    let mut cg = critic_gradient(critic, rollout, &targets)?;
    let ag = actor_gradient(actor, rollout, &adv, phi)?;
    let mut s = shared.lock().expect("trainer lock");
    let s = &mut *s;
    match cfg.optimizer {
        Optimizer::Sgd => {
            s.critic.add_scaled(&cg, -cfg.critic_lr);
            s.actor.add_scaled(&ag, cfg.actor_lr);
        }
        Optimizer::Adam => {
            cg.values_mut().for_each(|x| *x = -*x);
            s.critic_opt.apply(&mut s.critic, &cg, cfg.critic_lr);
            s.actor_opt.apply(&mut s.actor, &ag, cfg.actor_lr);
        }
    }
    Ok(())
}

/// Per-worker episode driver; yields control after every update so the
/// serial mode can interleave workers.
struct Worker {
    id: usize,
    rng: ChaCha8Rng,
    current: Option<Running>,
}

struct Running {
    k: usize,
    episode: Episode,
    state: SessionState,
    qoe_sum: f64,
    chunks: usize,
    phi: f64,
}

impl Worker {
    /// Runs one rollout (starting a new episode if needed) and applies its
    /// update. Returns false once the episode budget is spent.
    fn advance(&mut self, shared: &Mutex<Shared>, env: &dyn EnvFactory, cfg: &TrainConfig, params: &PlayerParams) -> Result<bool> {
        if self.current.is_none() {
            let k = {
                let mut s = shared.lock().expect("trainer lock");
                if s.next_episode >= cfg.episodes {
                    return Ok(false);
                }
                s.next_episode += 1;
                s.next_episode - 1
            };
            let episode = env.episode(self.id, k, &mut self.rng);
            self.current = Some(Running { k, episode, state: SessionState::new(), qoe_sum: 0.0, chunks: 0, phi: cfg.entropy_at(k) });
        }
        let (actor, critic) = {
            let s = shared.lock().expect("trainer lock");
            (s.actor.clone(), s.critic.clone())
        };
        let run = self.current.as_mut().expect("episode running");
        let manifest = run.episode.manifest.clone();
        let mut rollout = Rollout::default();
        let mut finished = false;
        while rollout.steps.len() < cfg.rollout {
            if run.state.m >= manifest.chunks.len() {
                finished = true;
                break;
            }
            let obs = observe(&run.state, &manifest, params)?;
            let s = encode_state(&obs);
            let a = sample_action(&forward_actor(&actor, &s)?, &mut self.rng);
            match step(&run.state, a, &manifest, &run.episode.trace, params) {
                Ok((rec, next)) => {
                    run.qoe_sum += rec.qoe;
                    run.chunks += 1;
                    let base = manifest.chunks[rec.m].reps[0].quality_db;
                    let terminal = next.m >= manifest.chunks.len();
                    rollout.steps.push(Transition { state: s, action: a, reward: (rec.qoe - base) * cfg.reward_scale, terminal });
                    run.state = next;
                    if terminal {
                        finished = true;
                        break;
                    }
                }
                // running out of trace truncates the episode: bootstrap from here
                Err(PlayerError::TraceExhausted { .. }) => {
                    finished = true;
                    if !rollout.steps.is_empty() {
                        rollout.bootstrap = Some(s);
                    }
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !finished && run.state.m < manifest.chunks.len() {
            rollout.bootstrap = Some(encode_state(&observe(&run.state, &manifest, params)?));
        }
        if !rollout.steps.is_empty() {
            apply_update(shared, &actor, &critic, &rollout, run.phi, cfg)?;
        }
        if finished {
            let point = CurvePoint {
                episode: run.k,
                mean_qoe: if run.chunks > 0 { run.qoe_sum / run.chunks as f64 } else { 0.0 },
                entropy_coef: run.phi,
            };
            shared.lock().expect("trainer lock").curve.push(point);
            self.current = None;
        }
        Ok(true)
    }
}

/// Trains actor and critic from `init` (or fresh random networks).
pub fn train(
    env: &dyn EnvFactory,
    cfg: &TrainConfig,
    params: &PlayerParams,
    levels: usize,
    init: Option<(NetParams, NetParams)>,
) -> Result<Trained> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = state_dim(params.history, levels);
    let (actor, critic) = match init {
        Some((a, c)) => {
            a.validate()?;
            c.validate()?;
            if a.input_dim() != dim || c.input_dim() != dim || a.output_dim() != levels {
                return Err(RlError::ShapeMismatch("initial networks do not match the state/action sizes".into()));
            }
            (a, c)
        }
        None => (NetParams::actor(dim, levels, &mut rng), NetParams::critic(dim, &mut rng)),
    };
    let shared = Mutex::new(Shared {
        actor_opt: Adam::new(&actor),
        critic_opt: Adam::new(&critic),
        actor,
        critic,
        next_episode: cfg.first_episode,
        curve: Vec::new(),
    });
    let mut workers: Vec<Worker> = (0..cfg.workers)
        .map(|id| Worker { id, rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + id as u64)), current: None })
        .collect();

    if cfg.serial {
        let mut active = vec![true; workers.len()];
        while active.iter().any(|&a| a) {
            for (w, on) in workers.iter_mut().zip(active.iter_mut()) {
                if *on {
                    *on = w.advance(&shared, env, cfg, params)?;
                }
            }
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let handles: Vec<_> = workers
                .iter_mut()
                .map(|w| {
                    let shared = &shared;
                    scope.spawn(move || -> Result<()> {
                        while w.advance(shared, env, cfg, params)? {}
                        Ok(())
                    })
                })
                .collect();
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok(())
        })?;
    }
    let mut s = shared.into_inner().expect("trainer lock");
    s.curve.sort_by_key(|p| p.episode);
    Ok(Trained { actor: s.actor, critic: s.critic, curve: s.curve })
}

/// Greedy actor used as an ABR policy.
#[derive(Debug, Clone, PartialEq)]
pub struct DrlPolicy {
    pub actor: NetParams,
}

impl Policy for DrlPolicy {
    fn decide(&self, obs: &Observation) -> usize {
        let pi = forward_actor(&self.actor, &encode_state(obs)).expect("actor matches the state layout");
        let mut best = 0;
        for (k, &p) in pi.iter().enumerate() {
            if p > pi[best] {
                best = k;
            }
        }
        best
    }

    fn name(&self) -> &str {
        "drl"
    }
}
