//! Rate–quality curves and the MSE-domain cost used by the quality-driven
//! beamformer.
//!
//! A chunk's quality at bitrate `a` is modelled as `q = z1·ln(z2·a + z3)`.
//! Substituting the MMSE identity `R = −ln e` turns this into a cost on the
//! receiver's mean-square error,
//!
//! ```text
//! c(e)  = −z1·ln(−z2·ln e + z3)
//! c'(e) =  z1·z2 / (e·(z3 − z2·ln e))
//! ```
//!
//! `c` is increasing on `(0, 1]`. It is concave on the whole interval only when
//! `z3 ≥ z2` (with `z2` expressed per nat of rate); otherwise it is concave for
//! `−ln e > 1 − z3/z2` and convex above that. [`RQParams::cost_is_concave`]
//! reports which case applies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::bisect;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("rate-quality parameters violate z1 > 0, z2 > 0, z3 >= 1: {0:?}")]
    InvalidParams([f64; 3]),
    #[error("MSE {0} outside (0, 1]")]
    MseOutOfRange(f64),
    #[error("weight {w} outside the range of c' (minimum {min})")]
    WeightOutOfRange { w: f64, min: f64 },
    #[error("need at least 3 points to fit, got {0}")]
    TooFewPoints(usize),
    #[error("points must have distinct positive bitrates and strictly increasing quality")]
    NonMonotonePoints,
}

pub type Result<T, E = QualityError> = std::result::Result<T, E>;

/// Parameters `(z1, z2, z3)` of the logarithmic rate–quality curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct RQParams {
    z1: f64,
    z2: f64,
    z3: f64,
}

impl RQParams {
    pub fn new(z1: f64, z2: f64, z3: f64) -> Result<Self> {
        let ok = z1 > 0.0 && z2 > 0.0 && z3 >= 1.0 && z1.is_finite() && z2.is_finite() && z3.is_finite();
        if !ok {
            return Err(QualityError::InvalidParams([z1, z2, z3]));
        }
        Ok(RQParams { z1, z2, z3 })
    }

    pub fn z1(&self) -> f64 {
        self.z1
    }

    pub fn z2(&self) -> f64 {
        self.z2
    }

    pub fn z3(&self) -> f64 {
        self.z3
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.z1, self.z2, self.z3]
    }

    /// Same curve with the rate axis measured in units of `unit` (e.g. a
    /// solver working in nats per channel use passes `B / ln 2`).
    pub fn rescale_rate(self, unit: f64) -> RQParams {
        RQParams {
            z2: self.z2 * unit,
            ..self
        }
    }

    /// Whether `c` is concave on all of `(0, 1]`.
    pub fn cost_is_concave(&self) -> bool {
        self.z3 >= self.z2
    }

    /// Largest MSE on which `c'` is still decreasing (1 when concave).
    pub fn concave_mse_limit(&self) -> f64 {
        if self.cost_is_concave() {
            1.0
        } else {
            (self.z3 / self.z2 - 1.0).exp()
        }
    }
}

impl TryFrom<[f64; 3]> for RQParams {
    type Error = QualityError;
    fn try_from(z: [f64; 3]) -> Result<Self> {
        RQParams::new(z[0], z[1], z[2])
    }
}

impl From<RQParams> for [f64; 3] {
    fn from(z: RQParams) -> Self {
        z.to_array()
    }
}

/// Quality of a chunk encoded at bitrate `a`.
pub fn quality_of_bitrate(a: f64, z: &RQParams) -> f64 {
    z.z1 * (z.z2 * a + z.z3).ln()
}

/// Quality a user would see at transmission rate `r` (same curve as
/// [`quality_of_bitrate`], evaluated on the allocated rate).
pub fn quality_of_rate(r: f64, z: &RQParams) -> f64 {
    quality_of_bitrate(r, z)
}

/// Inverse of [`quality_of_bitrate`].
pub fn bitrate_of_quality(q: f64, z: &RQParams) -> f64 {
    ((q / z.z1).exp() - z.z3) / z.z2
}

fn check_mse(e: f64) -> Result<()> {
    if e > 0.0 && e <= 1.0 {
        Ok(())
    } else {
        Err(QualityError::MseOutOfRange(e))
    }
}

pub fn cost(e: f64, z: &RQParams) -> Result<f64> {
    check_mse(e)?;
    Ok(-z.z1 * (-z.z2 * e.ln() + z.z3).ln())
}

pub fn cost_deriv(e: f64, z: &RQParams) -> Result<f64> {
    check_mse(e)?;
    Ok(z.z1 * z.z2 / (e * (z.z3 - z.z2 * e.ln())))
}

/// Inverse of `c'` on its decreasing branch `(0, concave_mse_limit]`.
pub fn upsilon(w: f64, z: &RQParams) -> Result<f64> {
    let e_max = z.concave_mse_limit();
    let w_min = cost_deriv(e_max, z)?;
    if !(w >= w_min) || !w.is_finite() {
        return Err(QualityError::WeightOutOfRange { w, min: w_min });
    }
    if w == w_min {
        return Ok(e_max);
    }
    // c' spans many decades as e → 0, so search over s = ln e and compare logs.
    let target = w.ln();
    let f = |s: f64| cost_deriv(s.exp(), z).map(f64::ln).unwrap_or(f64::INFINITY) - target;
    let hi = e_max.ln();
    let mut lo = hi - 1.0;
    while f(lo) < 0.0 {
        lo = 2.0 * lo - 1.0;
        if lo < -700.0 {
            return Err(QualityError::WeightOutOfRange { w, min: w_min });
        }
    }
    let s = bisect(f, lo, hi, 1e-14).map_err(|_| QualityError::WeightOutOfRange { w, min: w_min })?;
    Ok(s.exp().min(e_max))
}

/// Result of [`fit_rq`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RQFit {
    pub params: RQParams,
    /// Root-mean-square residual in quality units.
    pub rms_residual: f64,
    /// The unconstrained optimum left the admissible set and was projected back.
    pub projected: bool,
}

/// Least-squares fit of `(z1, z2, z3)` to `(bitrate, quality)` samples.
///
/// Levenberg–Marquardt on `(z1, ln(z2·a_max), z3)` from a grid of ten starting
/// points; the best local optimum wins. If it violates `z1 > 0, z3 ≥ 1`, the
/// fit is repeated with `z3` pinned to 1.
pub fn fit_rq(points: &[(f64, f64)]) -> Result<RQFit> {
    if points.len() < 3 {
        return Err(QualityError::TooFewPoints(points.len()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = pts.iter().all(|p| p.0 > 0.0 && p.0.is_finite() && p.1.is_finite())
        && pts.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1);
    if !monotone {
        return Err(QualityError::NonMonotonePoints);
    }
    let a_max = pts.last().unwrap().0;
    let data: Vec<(f64, f64)> = pts.iter().map(|&(a, q)| (a / a_max, q)).collect();

    let mut best: Option<(LmState, f64)> = None;
    for ln_k in [-2.0, 0.0, 1.0, 2.0, 4.0] {
        for z3 in [1.0, 4.0] {
            let k = f64::exp(ln_k);
            let z1 = linear_z1(&data, k, z3);
            let fitted = levenberg_marquardt(&data, LmState { z1, ln_k, z3 }, false);
            let sse = sse(&data, &fitted);
            if sse.is_finite() && best.as_ref().is_none_or(|b| sse < b.1) {
                best = Some((fitted, sse));
            }
        }
    }
    let (mut state, mut best_sse) = best.expect("at least one finite start");
    let mut projected = false;
    if !(state.z1 > 0.0 && state.z3 >= 1.0) {
        projected = true;
        let mut pinned: Option<(LmState, f64)> = None;
        for ln_k in [-2.0, 0.0, 2.0, 4.0, 6.0] {
            let k = f64::exp(ln_k);
            let start = LmState { z1: linear_z1(&data, k, 1.0), ln_k, z3: 1.0 };
            let fitted = levenberg_marquardt(&data, start, true);
            let s = sse(&data, &fitted);
            if s.is_finite() && pinned.as_ref().is_none_or(|b| s < b.1) {
                pinned = Some((fitted, s));
            }
        }
        let (p, s) = pinned.expect("finite pinned fit");
        state = p;
        best_sse = s;
        state.z1 = state.z1.max(f64::MIN_POSITIVE);
    }
    let params = RQParams::new(state.z1, state.ln_k.exp() / a_max, state.z3.max(1.0))?;
    Ok(RQFit {
        params,
        rms_residual: (best_sse / data.len() as f64).sqrt(),
        projected,
    })
}

#[derive(Debug, Clone, Copy)]
struct LmState {
    z1: f64,
    ln_k: f64,
    z3: f64,
}

fn model(u: f64, s: &LmState) -> f64 {
    s.z1 * (s.ln_k.exp() * u + s.z3).ln()
}

fn sse(data: &[(f64, f64)], s: &LmState) -> f64 {
    data.iter()
        .map(|&(u, q)| {
            let arg = s.ln_k.exp() * u + s.z3;
            if arg <= 0.0 {
                f64::INFINITY
            } else {
                (q - model(u, s)).powi(2)
            }
        })
        .sum()
}

fn linear_z1(data: &[(f64, f64)], k: f64, z3: f64) -> f64 {
    let (num, den) = data.iter().fold((0.0, 0.0), |(n, d), &(u, q)| {
        let l = (k * u + z3).ln();
        (n + q * l, d + l * l)
    });
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

fn levenberg_marquardt(data: &[(f64, f64)], mut s: LmState, pin_z3: bool) -> LmState {
    let dim = if pin_z3 { 2 } else { 3 };
    let mut lambda = 1e-3;
    let mut cur = sse(data, &s);
    for _ in 0..500 {
        let k = s.ln_k.exp();
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for &(u, q) in data {
            let arg = k * u + s.z3;
            let r = q - s.z1 * arg.ln();
            let jac = [arg.ln(), s.z1 * k * u / arg, s.z1 / arg];
            for i in 0..dim {
                jtr[i] += jac[i] * r;
                for j in 0..dim {
                    jtj[i][j] += jac[i] * jac[j];
                }
            }
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate().take(dim) {
                row[i] += lambda * jtj[i][i].max(1e-300);
            }
            let Some(delta) = solve_small(&a, &jtr, dim) else {
                lambda *= 10.0;
                continue;
            };
            let cand = LmState {
                z1: s.z1 + delta[0],
                ln_k: s.ln_k + delta[1],
                z3: if pin_z3 { s.z3 } else { s.z3 + delta[2] },
            };
            let cand_sse = sse(data, &cand);
            if cand_sse.is_finite() && cand_sse <= cur {
                let rel_step = delta.iter().take(dim).map(|d| d.abs()).fold(0.0, f64::max);
                s = cand;
                let gain = cur - cand_sse;
                cur = cand_sse;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if rel_step < 1e-15 || gain <= 1e-30 {
                    return s;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    s
}

/// Gaussian elimination on the leading `dim`×`dim` block.
fn solve_small(a: &[[f64; 3]; 3], b: &[f64; 3], dim: usize) -> Option<[f64; 3]> {
    let mut m = *a;
    let mut rhs = *b;
    for col in 0..dim {
        let piv = (col..dim).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..dim {
            let f = m[r][col] / m[col][col];
            for c in col..dim {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..dim).rev() {
        let mut s = rhs[i];
        for k in i + 1..dim {
            s -= m[i][k] * x[k];
        }
        x[i] = s / m[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::E;

    const LADDER: [f64; 6] = [0.3e6, 0.75e6, 1.2e6, 1.85e6, 2.85e6, 3.2e6];

    fn z(a: f64, b: f64, c: f64) -> RQParams {
        RQParams::new(a, b, c).unwrap()
    }

    fn random_concave(rng: &mut ChaCha8Rng) -> RQParams {
        let z3 = rng.random_range(1.0..6.0);
        z(rng.random_range(0.5..10.0), rng.random_range(0.01..1.0) * z3, z3)
    }

    #[test]
    fn quality_examples() {
        assert_eq!(quality_of_bitrate(0.0, &z(1.0, 1.0, 1.0)), 0.0);
        let p = z(3.0, 2.0, 1.0);
        assert!((quality_of_bitrate((E - 1.0) / 2.0, &p) - 3.0).abs() < 1e-15);
        let p = z(4.0, 1e-6, 2.5);
        assert!((quality_of_rate(0.0, &p) - 4.0 * 2.5f64.ln()).abs() < 1e-15);
        let p = z(2.0, 1e-6, 1.0);
        let step = quality_of_rate(2e12, &p) - quality_of_rate(1e12, &p);
        assert!((step - 2.0 * 2f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn quality_is_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = z(rng.random_range(0.5..10.0), rng.random_range(1e-7..1e-3), rng.random_range(1.0..5.0));
            let a = rng.random_range(1e3..1e7);
            let back = bitrate_of_quality(quality_of_bitrate(a, &p), &p);
            assert!((back - a).abs() <= 1e-8 * a);
        }
    }

    #[test]
    fn params_validate_and_round_trip_json() {
        assert!(RQParams::new(0.0, 1.0, 1.0).is_err());
        assert!(RQParams::new(1.0, 1.0, 0.5).is_err());
        let p = z(7.5, 2e-6, 1.0);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[7.5,2e-6,1.0]");
        assert_eq!(serde_json::from_str::<RQParams>(&s).unwrap(), p);
        assert!(serde_json::from_str::<RQParams>("[1.0, 1.0, 0.0]").is_err());
    }

    #[test]
    fn cost_examples() {
        let unit = z(1.0, 1.0, 1.0);
        assert_eq!(cost(1.0, &unit).unwrap(), 0.0);
        assert!((cost(1.0 / E, &unit).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert!(matches!(cost(0.0, &unit), Err(QualityError::MseOutOfRange(_))));
        assert!(matches!(cost(1.5, &unit), Err(QualityError::MseOutOfRange(_))));
    }

    #[test]
    fn cost_is_concave_when_z3_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let p = random_concave(&mut rng);
            let e1: f64 = rng.random_range(1e-6..1.0);
            let e2: f64 = rng.random_range(1e-6..1.0);
            let mid = cost(0.5 * (e1 + e2), &p).unwrap();
            let chord = 0.5 * (cost(e1, &p).unwrap() + cost(e2, &p).unwrap());
            assert!(mid >= chord - 1e-12, "{p:?} {e1} {e2}");
        }
    }

    #[test]
    fn cost_has_convex_region_when_z2_dominates() {
        let p = z(4.0, 50.0, 1.0);
        assert!(!p.cost_is_concave());
        let lim = p.concave_mse_limit();
        let (e1, e2) = (lim + 0.2 * (1.0 - lim), 1.0);
        let mid = cost(0.5 * (e1 + e2), &p).unwrap();
        let chord = 0.5 * (cost(e1, &p).unwrap() + cost(e2, &p).unwrap());
        assert!(mid < chord);
    }

    #[test]
    fn cost_deriv_matches_finite_differences() {
        assert_eq!(cost_deriv(1.0, &z(1.0, 1.0, 1.0)).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let p = z(rng.random_range(0.5..10.0), rng.random_range(0.01..100.0), rng.random_range(1.0..5.0));
            let e: f64 = rng.random_range(0.01..0.99);
            let h = 1e-6 * e;
            let fd = (cost(e + h, &p).unwrap() - cost(e - h, &p).unwrap()) / (2.0 * h);
            let an = cost_deriv(e, &p).unwrap();
            assert!(an > 0.0);
            assert!((fd - an).abs() <= 1e-6 * an.abs(), "{fd} vs {an}");
        }
        let p = z(1.0, 1.0, 1.0);
        let mut prev = 0.0;
        for k in 1..20 {
            let d = cost_deriv(10f64.powi(-k), &p).unwrap();
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn cost_deriv_decreasing_near_one_for_concave_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let p = random_concave(&mut rng);
            let e = rng.random_range(0.9..0.999);
            let h = 1e-5;
            let slope = (cost_deriv(e + h, &p).unwrap() - cost_deriv(e - h, &p).unwrap()) / (2.0 * h);
            assert!(slope < 0.0);
        }
    }

    #[test]
    fn upsilon_inverts_cost_deriv() {
        let p = z(3.0, 0.7, 2.0);
        let w = cost_deriv(0.5, &p).unwrap();
        assert!((upsilon(w, &p).unwrap() - 0.5).abs() < 1e-9);
        assert!((upsilon(1.0, &z(1.0, 1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(upsilon(0.5, &z(1.0, 1.0, 1.0)), Err(QualityError::WeightOutOfRange { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let p = random_concave(&mut rng);
            let e = rng.random_range(1e-4..1.0);
            let back = upsilon(cost_deriv(e, &p).unwrap(), &p).unwrap();
            assert!((back - e).abs() < 1e-8, "{e} -> {back}");
            let w = cost_deriv(back, &p).unwrap();
            assert!((w / cost_deriv(e, &p).unwrap() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn upsilon_uses_decreasing_branch_for_nonconcave_params() {
        let p = z(2.0, 20.0, 1.0);
        let lim = p.concave_mse_limit();
        assert!(lim < 1.0);
        let e = 0.3 * lim;
        let back = upsilon(cost_deriv(e, &p).unwrap(), &p).unwrap();
        assert!((back - e).abs() < 1e-9);
    }

    #[test]
    fn fit_recovers_exact_curve_on_ladder() {
        let truth = z(7.5, 2e-6, 1.0);
        let pts: Vec<_> = LADDER.iter().map(|&a| (a, quality_of_bitrate(a, &truth))).collect();
        let fit = fit_rq(&pts).unwrap();
        let got = fit.params;
        assert!((got.z1() / 7.5 - 1.0).abs() < 1e-6, "{got:?}");
        assert!((got.z2() / 2e-6 - 1.0).abs() < 1e-6, "{got:?}");
        assert!((got.z3() - 1.0).abs() < 1e-6, "{got:?}");
        assert!(fit.rms_residual < 1e-9);
        let q = quality_of_bitrate(1.2e6, &got);
        assert!((q - got.z1() * (got.z2() * 1.2e6 + got.z3()).ln()).abs() < 1e-9);
    }

    #[test]
    fn fit_interpolates_three_points() {
        let truth = z(4.0, 3e-6, 2.0);
        let pts: Vec<_> = [0.5e6, 1.5e6, 3.0e6].iter().map(|&a| (a, quality_of_bitrate(a, &truth))).collect();
        let fit = fit_rq(&pts).unwrap();
        assert!(fit.rms_residual < 1e-9, "{fit:?}");
        assert!(!fit.projected);
    }

    #[test]
    fn fit_is_robust_to_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let truth = z(4.2, 2.5e-3, 1.0);
        for _ in 0..50 {
            let pts: Vec<_> = LADDER
                .iter()
                .map(|&a| (a, quality_of_bitrate(a, &truth) + noise.sample(&mut rng)))
                .collect();
            let fit = fit_rq(&pts).unwrap();
            assert!(fit.rms_residual <= 0.2, "{fit:?}");
        }
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(fit_rq(&[(1.0, 1.0), (2.0, 2.0)]), Err(QualityError::TooFewPoints(2))));
        assert!(matches!(
            fit_rq(&[(1.0, 1.0), (2.0, 0.5), (3.0, 3.0)]),
            Err(QualityError::NonMonotonePoints)
        ));
        assert!(matches!(
            fit_rq(&[(1.0, 1.0), (1.0, 2.0), (3.0, 3.0)]),
            Err(QualityError::NonMonotonePoints)
        ));
    }

    #[test]
    fn fit_projects_into_admissible_set() {
        // concave-up in bitrate: no admissible curve reproduces it
        let pts = [(1.0e6, 1.0), (2.0e6, 1.5), (3.0e6, 4.0), (4.0e6, 9.0)];
        let fit = fit_rq(&pts).unwrap();
        assert!(fit.projected);
        assert!(fit.params.z3() >= 1.0 && fit.params.z1() > 0.0);
    }
}
