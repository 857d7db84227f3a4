//! The acceptance suite: eleven end-to-end criteria, each printed as one
//! PASS/FAIL line. They run sequentially inside one test so that the wall
//! clock budgets are measured without interference.

use std::f64::consts::{LN_2, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use xlayer::abr::Policy;
use xlayer::beamform::{initial_beamformers, mmse_receiver, mse, rate, solve_slot, Mode, SlotProblem, StopRule};
use xlayer::channel::{step_fading, ChannelParams, ChannelSnapshot, FadingState, Topology};
use xlayer::config::{RunConfig, ScenarioKind, Scheme};
use xlayer::experiment::{self, rate_stats, Paths};
use xlayer::numerics::{CMatrix, CVector};
use xlayer::player::{run_session, step, synth_manifest, Chunk, PlayerParams, Representation, SessionState, VideoManifest, VideoProfile};
use xlayer::quality::RQParams;
use xlayer::rl::{
    actor_gradient, actor_objective, critic_gradient, critic_loss, train, DrlPolicy, Episode, Head, NetParams, Rollout, TrainConfig,
    Transition, HIDDEN,
};
use xlayer::tracegen::{generate, read_trace, RateTrace, Split};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cscg(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, var: f64) -> CMatrix {
    let data = (0..rows * cols).map(|_| cscg(rng, var)).collect();
    CMatrix::from_vec(rows, cols, data).unwrap()
}

/// Random slot instance: 1–4 cells, 1–4 users per cell, 1–3 antennas at each
/// end, link gains spread over three decades, curves whose cost is concave.
fn random_problem(rng: &mut ChaCha8Rng) -> SlotProblem {
    let cells = rng.random_range(1..=4);
    let n_tx: Vec<usize> = (0..cells).map(|_| rng.random_range(1..=3)).collect();
    let mut home = Vec::new();
    for k in 0..cells {
        home.extend(std::iter::repeat_n(k, rng.random_range(1..=4)));
    }
    let bandwidth = 1e6;
    let h = home
        .iter()
        .map(|&k| {
            let n_rx = rng.random_range(1..=3);
            (0..cells)
                .map(|l| {
                    let db = if l == k { rng.random_range(0.0..20.0) } else { rng.random_range(-10.0..10.0) };
                    random_matrix(rng, n_rx, n_tx[l], 10f64.powf(db / 10.0))
                })
                .collect()
        })
        .collect();
    let z = home
        .iter()
        .map(|_| {
            let z3 = rng.random_range(1.0..3.0);
            // concave cost needs z2 (per nat) ≤ z3
            let z2 = rng.random_range(0.05..1.0) * z3 * LN_2 / bandwidth;
            RQParams::new(rng.random_range(2.0..6.0), z2, z3).unwrap()
        })
        .collect();
    SlotProblem {
        snapshot: ChannelSnapshot { slot: 0, h, noise_power: 1.0 },
        power: (0..cells).map(|_| rng.random_range(1.0..10.0)).collect(),
        alpha: home.iter().map(|_| rng.random_range(0.02..0.1)).collect(),
        home,
        z,
        gap: 1.34,
        bandwidth,
    }
}

/// 1 & 2: ascent and power feasibility over 500 random instances.
fn solver_sweep() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_drop, mut worst_excess, mut trips, mut solves) = (0.0f64, f64::NEG_INFINITY, 0, 0);
    for _ in 0..500 {
        let p = random_problem(&mut rng);
        for mode in [Mode::Qddra, Mode::Wmmse] {
            let r = solve_slot(&p, &initial_beamformers(&p), mode, StopRule::default()).expect("solve");
            solves += 1;
            trips += r.descent_guard_tripped as usize;
            for w in r.objective.windows(2) {
                worst_drop = worst_drop.max((w[0] - w[1]) / w[0].abs().max(1e-300));
            }
            worst_excess = worst_excess.max(r.max_power_excess);
        }
    }
    let elapsed = t0.elapsed();
    let ascent = check(
        worst_drop <= 1e-8 && trips == 0 && elapsed < Duration::from_secs(120),
        format!("{solves} solves, worst relative drop {worst_drop:.2e}, guard trips {trips}, {:.1} s", elapsed.as_secs_f64()),
    );
    let power = check(worst_excess <= 1e-6, format!("worst per-cell excess over budget {worst_excess:.2e} W"));
    (ascent, power)
}

/// 3: R = −B log₂ e with MMSE receivers on folded channels.
fn rate_mse_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = random_problem(&mut rng).folded();
        let v: Vec<CVector> = p
            .home
            .iter()
            .map(|&k| {
                let n = p.h(0, k).cols();
                let x = random_matrix(&mut rng, n, 1, 1.0);
                let s = (p.power[k] / (n as f64 * 4.0)).sqrt();
                CVector(x.as_slice().iter().map(|c| c * s).collect())
            })
            .collect();
        let u = mmse_receiver(&p, &v).unwrap();
        for i in 0..p.n_users() {
            let e = mse(&p, i, &u[i], &v);
            let from_mse = -p.bandwidth * e.log2();
            let r = rate(&p, &v, i).unwrap();
            worst = worst.max((r - from_mse).abs() / r.abs().max(1e-300));
        }
    }
    check(worst <= 1e-9, format!("worst relative gap {worst:.2e} over 200 instances"))
}

/// 4: converged WMMSE sum rate against an exhaustive 200 × 200 power grid on
/// two interfering single-antenna links. "Converged" means run to a fixed
/// point; the per-slot default stop rule can halt on the slow first cycles
/// from full power, and its ratio is reported alongside.
fn wmmse_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let converged = StopRule { tol: 1e-12, max_iter: 100_000 };
    let (mut worst, mut worst_default) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..20 {
        let g = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let db = rng.random_range(lo..hi);
            random_matrix(rng, 1, 1, 10f64.powf(db / 10.0))
        };
        let h = vec![vec![g(&mut rng, 0.0, 20.0), g(&mut rng, -10.0, 15.0)], vec![g(&mut rng, -10.0, 15.0), g(&mut rng, 0.0, 20.0)]];
        let p = SlotProblem {
            snapshot: ChannelSnapshot { slot: 0, h, noise_power: 1.0 },
            home: vec![0, 1],
            power: vec![rng.random_range(1.0..10.0), rng.random_range(1.0..10.0)],
            alpha: vec![1.0, 1.0],
            z: vec![RQParams::new(4.0, 4e-3, 1.0).unwrap(); 2],
            gap: 1.34,
            bandwidth: 1e6,
        };
        let sum_rate = |stop| -> f64 { solve_slot(&p, &initial_beamformers(&p), Mode::Wmmse, stop).unwrap().rates.iter().sum() };
        let (got, got_default) = (sum_rate(converged), sum_rate(StopRule::default()));
        let gain = |i: usize, l: usize| p.snapshot.h[i][l].as_slice()[0].norm_sqr() / p.gap;
        let mut best = 0.0f64;
        for a in 0..200 {
            for b in 0..200 {
                let (p1, p2) = (p.power[0] * a as f64 / 199.0, p.power[1] * b as f64 / 199.0);
                let s1 = gain(0, 0) * p1 / (gain(0, 1) * p2 + 1.0);
                let s2 = gain(1, 1) * p2 / (gain(1, 0) * p1 + 1.0);
                best = best.max(p.bandwidth * ((1.0 + s1).log2() + (1.0 + s2).log2()));
            }
        }
        worst = worst.min(got / best);
        worst_default = worst_default.min(got_default / best);
    }
    check(
        worst >= 0.99,
        format!("worst converged WMMSE / grid-optimum sum-rate ratio {worst:.4} over 20 instances (default stop rule: {worst_default:.4})"),
    )
}

/// 5: single-cell rate fairness and sum rate of the two solvers.
fn fairness_ordering() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig {
        traces: xlayer::config::TraceConfig { duration_s: 60, n_train: 20, n_test: 1 },
        ..RunConfig::default()
    };
    assert_eq!(cfg.radio.solve_cadence, 1);
    let videos = experiment::build_videos(&cfg).unwrap();
    let mut stats = Vec::new();
    for mode in [Mode::Qddra, Mode::Wmmse] {
        let sc = experiment::scenario(&cfg, mode, &videos);
        let per_trace: Vec<_> = (0..20u64)
            .map(|k| rate_stats(&generate(&xlayer::tracegen::Scenario { seed: sc.seed + k, ..sc.clone() }).unwrap().traces))
            .collect();
        let n = per_trace.len() as f64;
        stats.push((
            per_trace.iter().map(|s| s.rate_unfairness).sum::<f64>() / n,
            per_trace.iter().map(|s| s.sum_rate_bps).sum::<f64>() / n,
        ));
    }
    let elapsed = t0.elapsed();
    let [(uq, sq), (uw, sw)] = [stats[0], stats[1]];
    check(
        uq < uw && sw >= sq && elapsed < Duration::from_secs(30 * 60),
        format!(
            "rate unfairness QDDRA {uq:.4} vs WMMSE {uw:.4}; sum rate QDDRA {:.3} vs WMMSE {:.3} Mbps; 20 traces × 60 s per solver, {:.0} s",
            sq / 1e6,
            sw / 1e6,
            elapsed.as_secs_f64()
        ),
    )
}

fn j0_series(x: f64) -> f64 {
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..40 {
        term *= -(x / 2.0).powi(2) / (k as f64 * k as f64);
        sum += term;
    }
    sum
}

/// 6: Gauss–Markov fading statistics.
fn jakes_statistics() -> Outcome {
    let params = ChannelParams::default();
    let zeta = j0_series(2.0 * PI * params.doppler_hz * params.slot_s);
    let topo = Topology::single_cell(1, 1, 1, 4.0, 100.0, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut f = FadingState::stationary(&topo, params.correlation(), &mut rng);
    let n = 1_000_000;
    let (mut power, mut lag1) = (0.0, Complex64::new(0.0, 0.0));
    let mut prev = f.gains[0][0].as_slice()[0];
    for _ in 0..n {
        f = step_fading(&f, &mut rng);
        let h = f.gains[0][0].as_slice()[0];
        power += h.norm_sqr();
        lag1 += h * prev.conj();
        prev = h;
    }
    let var = power / n as f64;
    let rho = lag1.re / power;
    check(
        (rho - zeta).abs() <= 0.01 && (var - 1.0).abs() <= 0.01,
        format!("lag-1 autocorrelation {rho:.4} vs ζ = {zeta:.4}; variance {var:.4} over 10⁶ steps"),
    )
}

/// Brute-force replay of one chunk on absolute 1 ms ticks, from the state the
/// event simulation started it in. Returns (download, stall, buffer after).
fn brute_chunk(trace: &RateTrace, t0: f64, b0: f64, first: bool, size: f64, chunk_s: f64, b_max: f64) -> Option<(f64, f64, f64)> {
    const DT: f64 = 1e-3;
    let (mut t, mut b, mut bits, mut stall) = (t0, b0, 0.0, 0.0);
    while bits < size {
        // next absolute tick strictly after t (t/DT can round just below an integer)
        let mut next = ((t / DT).floor() + 1.0) * DT;
        if next <= t {
            next += DT;
        }
        let dt = next - t;
        let r = *trace.samples.get((t + 1e-12).floor() as usize)?;
        bits += r * dt;
        if !first {
            let drain = b.min(dt);
            b -= drain;
            stall += dt - drain;
        }
        t = next;
    }
    b += chunk_s;
    while b > b_max + 1e-12 {
        b -= DT;
    }
    Some((t - t0, stall, b))
}

/// 7: event-driven player vs 1 ms brute force.
fn player_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let params = PlayerParams::default();
    let (mut worst, mut chunks) = (0.0f64, 0);
    for s in 0..100 {
        let samples = (0..300)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.1e6..6e6) })
            .collect();
        let trace = RateTrace { user: 0, samples };
        let profile = VideoProfile::medium(60, 7000 + s);
        let man = synth_manifest(&profile, &xlayer::player::BITRATE_LADDER, 2.0).unwrap();
        let mut state = SessionState::new();
        while state.m < man.chunks.len() {
            let a = rng.random_range(0..man.levels());
            let Ok((rec, next)) = step(&state, a, &man, &trace, &params) else { break };
            let size = man.chunks[state.m].reps[a].size_bits;
            let Some((d, phi, b)) = brute_chunk(&trace, state.t, state.buffer, state.m == 0, size, 2.0, params.buffer_max) else {
                break;
            };
            let err = (d - rec.download_s).abs().max((phi - rec.rebuffer_s).abs()).max((b - rec.buffer_s).abs());
            worst = worst.max(err);
            chunks += 1;
            state = next;
        }
    }
    check(worst <= 2e-3, format!("worst |Δd|, |Δφ|, |Δb| = {:.3} ms over {chunks} chunks in 100 sessions", worst * 1e3))
}

fn fd_relative_error(params: &NetParams, analytic: &NetParams, f: &dyn Fn(&NetParams) -> f64) -> f64 {
    const H: f64 = 1e-5;
    let mut p = params.clone();
    let n = p.len();
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    let ga: Vec<f64> = analytic.values().copied().collect();
    for k in 0..n {
        let orig = *p.values().nth(k).unwrap();
        *p.values_mut().nth(k).unwrap() = orig + H;
        let up = f(&p);
        *p.values_mut().nth(k).unwrap() = orig - H;
        let down = f(&p);
        *p.values_mut().nth(k).unwrap() = orig;
        let fd = (up - down) / (2.0 * H);
        diff += (fd - ga[k]).powi(2);
        na += ga[k].powi(2);
        nf += fd.powi(2);
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-300)
}

/// 8: analytic actor and critic gradients vs central differences.
fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (dim, levels) = (31, 6);
    let (mut worst_actor, mut worst_critic) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let mut actor = NetParams::random(&[dim, HIDDEN[0], HIDDEN[1], levels], Head::Softmax, &mut rng);
        let mut critic = NetParams::random(&[dim, HIDDEN[0], HIDDEN[1], 1], Head::Linear, &mut rng);
        for p in [&mut actor, &mut critic] {
            for l in &mut p.layers {
                l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        let steps = (0..4)
            .map(|_| Transition {
                state: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: rng.random_range(0..levels),
                reward: rng.random_range(-1.0..1.0),
                terminal: false,
            })
            .collect();
        let ro = Rollout { steps, bootstrap: Some((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()) };
        let adv: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let phi = rng.random_range(0.0..0.5);
        let g = actor_gradient(&actor, &ro, &adv, phi).unwrap();
        worst_actor = worst_actor.max(fd_relative_error(&actor, &g, &|p| actor_objective(p, &ro, &adv, phi).unwrap()));
        let targets: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = critic_gradient(&critic, &ro, &targets).unwrap();
        worst_critic = worst_critic.max(fd_relative_error(&critic, &g, &|p| critic_loss(p, &ro, &targets).unwrap()));
    }
    check(
        worst_actor < 1e-4 && worst_critic < 1e-4,
        format!("worst relative error actor {worst_actor:.2e}, critic {worst_critic:.2e} over 50 cases"),
    )
}

/// 9: two representations, the top one always sustainable.
fn rl_sanity() -> Outcome {
    let t0 = Instant::now();
    let z = RQParams::new(4.2, 4e-3, 1.0).unwrap();
    let rep = |a: f64, q: f64| Representation { bitrate_bps: a, size_bits: 2.0 * a, quality_db: q };
    let manifest = Arc::new(VideoManifest {
        chunk_duration_s: 2.0,
        chunks: (0..30).map(|_| Chunk { reps: vec![rep(0.3e6, 30.0), rep(1.2e6, 38.0)], z }).collect(),
    });
    let env = |_w: usize, _k: usize, rng: &mut ChaCha8Rng| {
        // every second comfortably above the top bitrate
        let samples = (0..300).map(|_| rng.random_range(2e6..6e6)).collect();
        Episode { trace: RateTrace { user: 0, samples }, manifest: manifest.clone() }
    };
    let cfg = TrainConfig { episodes: 2000, serial: true, seed: 9, ..TrainConfig::default() };
    let trained = train(&env, &cfg, &PlayerParams::default(), 2, None).unwrap();
    let policy = DrlPolicy { actor: trained.actor };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut top, mut total) = (0, 0);
    for _ in 0..20 {
        let ep = env(0, 0, &mut rng);
        let s = run_session(&ep.trace, &manifest, &policy, &PlayerParams::default()).unwrap();
        top += s.records.iter().filter(|r| r.action == 1).count();
        total += s.records.len();
    }
    let elapsed = t0.elapsed();
    check(
        top as f64 >= 0.99 * total as f64 && elapsed < Duration::from_secs(300),
        format!("greedy policy chose the top bitrate on {top}/{total} steps after 2000 episodes, {:.1} s", elapsed.as_secs_f64()),
    )
}

/// 10 & 11: desk-scale multicell pipeline.
fn pipeline() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { scenario: ScenarioKind::MulticellMimo, out: dir.path().to_path_buf(), ..RunConfig::default() };
    cfg.traces = xlayer::config::TraceConfig { duration_s: 120, n_train: 20, n_test: 20 };
    cfg.train.episodes = 10_000;
    cfg.train.serial = true;
    // see the README: a 5-slot solve cadence keeps the multicell run in budget
    cfg.radio.solve_cadence = 5;
    cfg.validate().unwrap();

    experiment::gen_traces(&cfg).unwrap();
    let t_traces = t0.elapsed();
    for mode in cfg.modes() {
        experiment::train_policy(&cfg, mode).unwrap();
    }
    let t_train = t0.elapsed() - t_traces;
    experiment::evaluate(&cfg).unwrap();
    let reports = experiment::report(&cfg).unwrap();
    let elapsed = t0.elapsed();
    let get = |s: &str| {
        let s: Scheme = s.parse().unwrap();
        reports.iter().find(|r| r.scheme == s).unwrap().clone()
    };
    let (qd, qr, qb, wd) = (get("qddra_drl"), get("qddra_rb"), get("qddra_bb"), get("wmmse_drl"));
    let lowest = reports.iter().all(|r| qd.total_unfairness() <= r.total_unfairness());
    let table: Vec<String> =
        reports.iter().map(|r| format!("{} QoE {:.3} unfair {:.4}", r.scheme, r.mean_qoe, r.total_unfairness())).collect();
    let ordering = check(
        qd.mean_qoe >= qr.mean_qoe
            && qd.mean_qoe >= qb.mean_qoe
            && qd.total_unfairness() <= wd.total_unfairness()
            && elapsed < Duration::from_secs(45 * 60),
        format!(
            "[{}]; QDDRA_DRL lowest unfairness of six: {lowest}; traces {:.0} s, training {:.0} s, total {:.0} s",
            table.join("; "),
            t_traces.as_secs_f64(),
            t_train.as_secs_f64(),
            elapsed.as_secs_f64()
        ),
    );

    let bb = cfg.buffer_based().unwrap();
    let videos = experiment::load_videos(&cfg).unwrap();
    let paths = Paths::new(&cfg.out);
    let (mut qualifying, mut total, mut stalls) = (0, 0, 0);
    for mode in cfg.modes() {
        let split = Split::read(&paths.split(mode)).unwrap();
        for file in &split.test {
            for (u, trace) in read_trace(file).unwrap().iter().enumerate() {
                total += 1;
                let lowest = videos[u].chunks[0].reps[0].bitrate_bps;
                if trace.samples.iter().all(|&r| r > lowest) {
                    qualifying += 1;
                    let s = run_session(trace, &videos[u], &bb as &dyn Policy, &cfg.player).unwrap();
                    stalls += s.records.iter().skip(1).filter(|r| r.rebuffer_s > 0.0).count();
                }
            }
        }
    }
    let no_stall = check(
        stalls == 0,
        format!("{qualifying}/{total} test (trace, user) pairs always above the lowest bitrate; stalled chunks after the first: {stalls}"),
    );
    (ordering, no_stall)
}

fn run(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn run2(f: impl FnOnce() -> (Outcome, Outcome)) -> (Outcome, Outcome) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(pair) => pair,
        Err(_) => (Err("panicked".into()), Err("not run: depends on the failed step above".into())),
    }
}

#[test]
fn acceptance() {
    let names = [
        "solver ascent",
        "power feasibility",
        "rate-MSE identity",
        "WMMSE grid oracle",
        "fairness ordering",
        "Jakes statistics",
        "player oracle",
        "gradient checks",
        "RL sanity env",
        "scheme ordering",
        "BB no-stall",
    ];
    let mut results: Vec<Outcome> = Vec::new();
    let report = |results: &mut Vec<Outcome>, r: Outcome| {
        let k = results.len();
        match &r {
            Ok(d) => println!("criterion {:>2} PASS  {}: {d}", k + 1, names[k]),
            Err(d) => println!("criterion {:>2} FAIL  {}: {d}", k + 1, names[k]),
        }
        results.push(r);
    };
    let (a, b) = run2(solver_sweep);
    report(&mut results, a);
    report(&mut results, b);
    report(&mut results, run(rate_mse_identity));
    report(&mut results, run(wmmse_oracle));
    report(&mut results, run(fairness_ordering));
    report(&mut results, run(jakes_statistics));
    report(&mut results, run(player_oracle));
    report(&mut results, run(gradient_checks));
    report(&mut results, run(rl_sanity));
    let (a, b) = run2(pipeline);
    report(&mut results, a);
    report(&mut results, b);

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, r)| r.is_err()).map(|(k, _)| k + 1).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
