//! System-parameter optimization.
//!
//! The amplification factors minimize the fractional objective
//!
//! ```text
//! Z = min_b (sum_k 4 h_k^2 b_k^2 + N sigma^2) / (sum_k h_k b_k)^2,   0 <= b_k <= b_k^max
//! ```
//!
//! which is non-convex in `b`. For fixed `r` the constraint
//! `sqrt(sum 4 h^2 b^2 + N sigma^2) <= r sum h b` is convex, so `Z` is found by
//! bisection on `r` with a convex feasibility solve at each step: the convex
//! gap `phi(b) = sqrt(...) - r sum h b` is minimized exactly over the box
//! (along the path its stationarity conditions trace out) and its sign
//! decides feasibility.
//!
//! Case I then picks the server gain from the closed-form optimal `S`; Case II
//! picks it from the contraction factor `s = q^max` or a target bias `eps`.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, TransmitConfig};
use crate::error::{invalid, Error, Result};
use crate::tasks::TaskConstants;

/// Default absolute bisection tolerance on `r`.
pub const DEFAULT_TOL_R: f64 = 1e-10;
/// Largest box inflation tried before `V(r)` is reported unbounded, relative
/// to the largest `b_max`.
const MAX_INFLATION: f64 = 1e6;

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    /// `scale / t^p`
    PowerLaw {
        scale: f64,
        p: f64,
    },
    Constant {
        eta: f64,
    },
}

impl LearningRate {
    /// Step size for round `t >= 1`.
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LearningRate::PowerLaw { scale, p } => scale / (t as f64).powf(p),
            LearningRate::Constant { eta } => eta,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverResiduals {
    /// Final bisection bracket width.
    pub bracket_width: f64,
    /// Path pieces scanned, summed over all feasibility solves.
    pub inner_iterations: usize,
}

/// Everything the solvers produced, kept with the plan for audit and replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverArtifacts {
    pub r_star: f64,
    #[serde(rename = "Z")]
    pub z: f64,
    pub b_star: Vec<f64>,
    /// Case I constraint level `S`.
    #[serde(rename = "S")]
    pub s_case1: Option<f64>,
    /// Case II contraction factor target `s`.
    pub s: Option<f64>,
    pub q_max: Option<f64>,
    pub eps: Option<f64>,
    pub tol_r: f64,
    pub iterations: usize,
    pub residuals: SolverResiduals,
}

/// Server gain, device gains, schedule and the artifacts that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplificationPlan {
    pub a: f64,
    pub b: Vec<f64>,
    pub b_max: Vec<f64>,
    pub eta: LearningRate,
    pub provenance: SolverArtifacts,
}

impl AmplificationPlan {
    pub fn transmit(&self) -> Result<TransmitConfig> {
        TransmitConfig::new(self.a, self.b.clone(), self.b_max.clone())
    }

    /// `sum_k h_k b_k`
    pub fn effective_gain(&self, chan: &ChannelRealization) -> f64 {
        self.b.iter().zip(&chan.h).map(|(b, h)| b * h).sum()
    }

    pub fn validate(&self, chan: &ChannelRealization) -> Result<()> {
        self.transmit()?;
        if self.b.len() != chan.devices() {
            return invalid(format!(
                "plan has {} device gains, channel has {} devices",
                self.b.len(),
                chan.devices()
            ));
        }
        if !(self.effective_gain(chan) > 0.0) {
            return invalid("plan: sum_k h_k b_k must be positive");
        }
        Ok(())
    }
}

/// Channel in normalized units: `h / h_max`, noise `N sigma^2 / h_max^2`. The
/// ratio objective is invariant under this rescaling.
struct Scaled {
    h: Vec<f64>,
    noise: f64,
    b_max: Vec<f64>,
}

impl Scaled {
    fn new(chan: &ChannelRealization, b_max: &[f64]) -> Result<Self> {
        chan.validate()?;
        if b_max.len() != chan.devices() {
            return invalid(format!(
                "b_max has {} entries for {} devices",
                b_max.len(),
                chan.devices()
            ));
        }
        if let Some(bm) = b_max.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
            return invalid(format!("b_max entries must be positive, got {bm}"));
        }
        let hs = chan.h.iter().cloned().fold(0.0, f64::max);
        if !(hs > 0.0) {
            return invalid("at least one channel gain must be positive");
        }
        Ok(Scaled {
            h: chan.h.iter().map(|x| x / hs).collect(),
            noise: chan.noise_energy() / (hs * hs),
            b_max: b_max.to_vec(),
        })
    }

    fn energy(&self, b: &[f64]) -> f64 {
        4.0 * self.h.iter().zip(b).map(|(h, b)| h * h * b * b).sum::<f64>() + self.noise
    }

    fn gain(&self, b: &[f64]) -> f64 {
        self.h.iter().zip(b).map(|(h, b)| h * b).sum()
    }

    /// Problem objective `(sum 4 h^2 b^2 + N sigma^2) / (sum h b)^2`.
    fn objective(&self, b: &[f64]) -> f64 {
        let g = self.gain(b);
        self.energy(b) / (g * g)
    }

    fn phi(&self, r: f64, b: &[f64]) -> f64 {
        self.energy(b).sqrt() - r * self.gain(b)
    }
}

struct InnerSolve {
    b: Vec<f64>,
    gap: f64,
    feasible: bool,
    iterations: usize,
}

/// Minimizes the convex gap `phi` over `[0, upper]` exactly.
///
/// Stationarity forces `b_k = min(mu / h_k, upper_k)` for a single `mu >= 0`,
/// so the minimizer lies on a piecewise-linear path. On each piece `phi` is
/// `sqrt(4 u mu^2 + e0) - r (u mu + g0)`, convex in `mu`, with its minimum at
/// `mu = r sqrt(e0 / (16 - 4 u r^2))` when that denominator is positive.
fn minimize_gap(sc: &Scaled, r: f64, upper: &[f64]) -> Result<InnerSolve> {
    let at = |mu: f64| -> Vec<f64> {
        sc.h.iter()
            .zip(upper)
            .map(|(h, u)| if *h > 0.0 { (mu / h).min(*u) } else { 0.0 })
            .collect()
    };
    let mut order: Vec<usize> = (0..sc.h.len()).filter(|&i| sc.h[i] > 0.0).collect();
    order.sort_by(|&a, &b| (sc.h[a] * upper[a]).total_cmp(&(sc.h[b] * upper[b])));
    let mut e0 = sc.noise;
    let mut g0 = 0.0;
    let mut clamped = 0;
    let mut lo = 0.0;
    let mut best_mu = 0.0;
    let mut best = sc.noise.sqrt();
    let mut pieces = 0;
    while clamped < order.len() {
        while clamped < order.len() && sc.h[order[clamped]] * upper[order[clamped]] <= lo {
            let i = order[clamped];
            e0 += 4.0 * (sc.h[i] * upper[i]).powi(2);
            g0 += sc.h[i] * upper[i];
            clamped += 1;
        }
        let hi = match order.get(clamped) {
            Some(&i) => sc.h[i] * upper[i],
            None => break,
        };
        let u = (order.len() - clamped) as f64;
        let mut cands = vec![hi];
        let denom = 16.0 - 4.0 * u * r * r;
        if denom > 0.0 {
            let mu = r * (e0 / denom).sqrt();
            if mu > lo && mu < hi {
                cands.push(mu);
            }
        }
        for mu in cands {
            let v = (4.0 * u * mu * mu + e0).sqrt() - r * (u * mu + g0);
            if v < best {
                best = v;
                best_mu = mu;
            }
        }
        lo = hi;
        pieces += 1;
    }
    let b = at(best_mu);
    let gap = sc.phi(r, &b);
    if !gap.is_finite() {
        return Err(Error::SolverFailure {
            iterations: pieces,
            residual: gap,
            message: format!("feasibility solve at r = {r} produced a non-finite gap"),
        });
    }
    Ok(InnerSolve {
        feasible: gap <= 0.0 && sc.gain(&b) > 0.0,
        b,
        gap,
        iterations: pieces,
    })
}

/// Result of the feasibility problem for a fixed `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityValue {
    /// Minimum box inflation `V(r)`; `+inf` when no inflation suffices.
    pub value: f64,
    /// Minimum of the convex gap over the original box (channel units).
    pub gap: f64,
    pub b: Vec<f64>,
    pub iterations: usize,
}

impl FeasibilityValue {
    pub fn feasible(&self) -> bool {
        self.value <= 0.0
    }
}

/// Evaluates `V(r)`. Its sign is decided by the convex gap over the original
/// box; the inflation value itself is then located by bisection on `v`.
pub fn feasibility_value(r: f64, chan: &ChannelRealization, b_max: &[f64]) -> Result<FeasibilityValue> {
    if !(r > 0.0) || !r.is_finite() {
        return invalid(format!("feasibility_value: r must be positive, got {r}"));
    }
    let sc = Scaled::new(chan, b_max)?;
    let hs = chan.h.iter().cloned().fold(0.0, f64::max);
    let base = minimize_gap(&sc, r, &sc.b_max)?;
    let mut iterations = base.iterations;
    let mut solve_at = |v: f64| -> Result<InnerSolve> {
        let upper: Vec<f64> = sc.b_max.iter().map(|u| u + v).collect();
        let s = minimize_gap(&sc, r, &upper)?;
        iterations += s.iterations;
        Ok(s)
    };
    let (mut lo, mut hi, mut best);
    if base.feasible {
        hi = 0.0;
        best = base.b.clone();
        lo = -sc.b_max.iter().cloned().fold(f64::INFINITY, f64::min);
    } else {
        lo = 0.0;
        let top = sc.b_max.iter().cloned().fold(0.0, f64::max);
        let mut v = top;
        let mut found = None;
        while v <= MAX_INFLATION * top {
            let s = solve_at(v)?;
            if s.feasible {
                found = Some(s.b);
                break;
            }
            lo = v;
            v *= 2.0;
        }
        match found {
            Some(b) => {
                hi = v;
                best = b;
            }
            None => {
                return Ok(FeasibilityValue {
                    value: f64::INFINITY,
                    gap: base.gap * hs,
                    b: base.b,
                    iterations,
                })
            }
        }
    }
    for _ in 0..60 {
        if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let s = solve_at(mid)?;
        if s.feasible {
            hi = mid;
            best = s.b;
        } else {
            lo = mid;
        }
    }
    Ok(FeasibilityValue {
        value: hi,
        gap: base.gap * hs,
        b: best,
        iterations,
    })
}

/// Problem objective evaluated at `b` in channel units.
pub fn ratio_objective(chan: &ChannelRealization, b: &[f64]) -> f64 {
    let gain: f64 = chan.h.iter().zip(b).map(|(h, b)| h * b).sum();
    let energy: f64 = 4.0 * chan.h.iter().zip(b).map(|(h, b)| h * h * b * b).sum::<f64>() + chan.noise_energy();
    energy / (gain * gain)
}

/// `sqrt(sum 4 h^2 b^2 + N sigma^2) - r sum h b`, convex in `b`.
pub fn constraint_gap(chan: &ChannelRealization, r: f64, b: &[f64]) -> f64 {
    let gain: f64 = chan.h.iter().zip(b).map(|(h, b)| h * b).sum();
    let energy: f64 = 4.0 * chan.h.iter().zip(b).map(|(h, b)| h * h * b * b).sum::<f64>() + chan.noise_energy();
    energy.sqrt() - r * gain
}

/// Bisection on `r` over `[0, r_hi]`, `r_hi` being the ratio at `b = b_max`.
pub fn solve_z(chan: &ChannelRealization, b_max: &[f64], tol_r: f64) -> Result<SolverArtifacts> {
    if !(tol_r > 0.0) || !tol_r.is_finite() {
        return invalid(format!("solve_Z: tol_r must be positive, got {tol_r}"));
    }
    let sc = Scaled::new(chan, b_max)?;
    let mut lo = 0.0;
    let mut hi = sc.objective(&sc.b_max).sqrt();
    let mut best = sc.b_max.clone();
    let mut iterations = 0;
    let mut residuals = SolverResiduals::default();
    while hi - lo > tol_r {
        let mid = 0.5 * (lo + hi);
        let s = minimize_gap(&sc, mid, &sc.b_max)?;
        residuals.inner_iterations += s.iterations;
        iterations += 1;
        if s.feasible {
            hi = mid;
            best = s.b;
        } else {
            lo = mid;
        }
    }
    residuals.bracket_width = hi - lo;
    let z = sc.objective(&best);
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::SolverFailure {
            iterations,
            residual: hi - lo,
            message: format!("non-positive objective {z} at the bisection solution"),
        });
    }
    Ok(SolverArtifacts {
        r_star: hi,
        z,
        b_star: best,
        s_case1: None,
        s: None,
        q_max: None,
        eps: None,
        tol_r,
        iterations,
        residuals,
    })
}

/// Largest `K` the grid oracle accepts.
pub const ORACLE_MAX_DEVICES: usize = 4;

/// Exhaustive minimum of the ratio objective over the grid
/// `b_k = j b_k^max / grid_points`, `j = 0..=grid_points` (the all-zero
/// corner excluded). Doubling `grid_points` nests the grids.
pub fn oracle_z(chan: &ChannelRealization, b_max: &[f64], grid_points: usize) -> Result<f64> {
    chan.validate()?;
    let k = chan.devices();
    if k > ORACLE_MAX_DEVICES {
        return invalid(format!("oracle_Z: K = {k} exceeds {ORACLE_MAX_DEVICES}"));
    }
    if b_max.len() != k || grid_points == 0 {
        return invalid("oracle_Z: b_max length must equal K and grid_points must be positive");
    }
    fn scan(chan: &ChannelRealization, b_max: &[f64], grid: usize, dev: usize, gain: f64, energy: f64, best: &mut f64) {
        if dev == b_max.len() {
            if gain > 0.0 {
                let v = (energy + chan.noise_energy()) / (gain * gain);
                if v < *best {
                    *best = v;
                }
            }
            return;
        }
        let h = chan.h[dev];
        for j in 0..=grid {
            let b = b_max[dev] * j as f64 / grid as f64;
            scan(
                chan,
                b_max,
                grid,
                dev + 1,
                gain + h * b,
                energy + 4.0 * h * h * b * b,
                best,
            );
        }
    }
    let mut best = f64::INFINITY;
    scan(chan, b_max, grid_points, 0, 0.0, 0.0, &mut best);
    Ok(best)
}

/// Minimizer of `S deltaF + (L p / (2p - 1)) (Z + 1) / S`.
pub fn optimal_s(z: f64, smoothness: f64, p: f64, delta_f: f64) -> Result<f64> {
    if !(p > 0.5 && p < 1.0) {
        return invalid(format!("optimal_S: p = {p} outside (1/2, 1)"));
    }
    if !(z > 0.0) || !(smoothness > 0.0) || !(delta_f > 0.0) {
        return invalid(format!(
            "optimal_S: need Z > 0, L > 0, deltaF > 0 (got {z}, {smoothness}, {delta_f})"
        ));
    }
    Ok((smoothness * (z + 1.0) * p / ((2.0 * p - 1.0) * delta_f)).sqrt())
}

/// The Case I cost minimized by [`optimal_s`].
pub fn case1_cost(s: f64, z: f64, smoothness: f64, p: f64, delta_f: f64) -> f64 {
    s * delta_f + smoothness * p / (2.0 * p - 1.0) * (z + 1.0) / s
}

/// Case I: `b = b*`, `a = 1 / (S sum h b*)`, `eta_t = 1 / t^p`.
pub fn plan_case1(
    chan: &ChannelRealization,
    b_max: &[f64],
    constants: &TaskConstants,
    p: f64,
    delta_f: f64,
    tol_r: f64,
) -> Result<AmplificationPlan> {
    let mut art = solve_z(chan, b_max, tol_r)?;
    let s = optimal_s(art.z, constants.smoothness, p, delta_f)?;
    let gain: f64 = chan.h.iter().zip(&art.b_star).map(|(h, b)| h * b).sum();
    art.s_case1 = Some(s);
    let plan = AmplificationPlan {
        a: 1.0 / (s * gain),
        b: art.b_star.clone(),
        b_max: b_max.to_vec(),
        eta: LearningRate::PowerLaw { scale: 1.0, p },
        provenance: art,
    };
    plan.validate(chan)?;
    Ok(plan)
}

/// How the Case II operating point is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case2Target {
    /// Contraction factor `s = q^max` in (0, 1).
    S(f64),
    /// Bias floor `eps`.
    Eps(f64),
}

/// Constants of the linear map between `s` and the bias floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasMap {
    pub z: f64,
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub grad_bound: f64,
    pub theta_th: f64,
}

impl BiasMap {
    pub fn new(z: f64, c: &TaskConstants) -> Result<Self> {
        if !(c.strong_convexity > 0.0) {
            return invalid("Case II requires a strongly convex task (M > 0)");
        }
        if !(c.grad_bound > 0.0) || !(c.smoothness > 0.0) {
            return invalid(format!(
                "Case II requires L > 0 and G > 0 (got {}, {})",
                c.smoothness, c.grad_bound
            ));
        }
        if !(c.theta_th >= 0.0 && c.theta_th < std::f64::consts::FRAC_PI_2) {
            return invalid(format!("theta_th = {} outside [0, pi/2)", c.theta_th));
        }
        Ok(BiasMap {
            z,
            smoothness: c.smoothness,
            strong_convexity: c.strong_convexity,
            grad_bound: c.grad_bound,
            theta_th: c.theta_th,
        })
    }

    /// `(Z+1) L G^2 / (8 M^2 cos^2 theta_th)`, the floor at `s = 0`.
    pub fn floor(&self) -> f64 {
        let cos = self.theta_th.cos();
        (self.z + 1.0) * self.smoothness * self.grad_bound.powi(2) / (8.0 * self.strong_convexity.powi(2) * cos * cos)
    }

    pub fn eps_of_s(&self, s: f64) -> f64 {
        self.floor() * (1.0 - s)
    }

    pub fn s_of_eps(&self, eps: f64) -> f64 {
        1.0 - eps / self.floor()
    }
}

/// Case II: `b = b*`, `a = G (1 - s) / (2 M cos(theta_th) eta sum h b*)`.
pub fn plan_case2(
    chan: &ChannelRealization,
    b_max: &[f64],
    constants: &TaskConstants,
    eta: f64,
    target: Case2Target,
    tol_r: f64,
) -> Result<AmplificationPlan> {
    if !(eta > 0.0) || !eta.is_finite() {
        return invalid(format!("plan_case2: eta must be positive, got {eta}"));
    }
    let mut art = solve_z(chan, b_max, tol_r)?;
    let map = BiasMap::new(art.z, constants)?;
    let s = match target {
        Case2Target::S(s) => s,
        Case2Target::Eps(eps) => {
            if !(eps > 0.0) {
                return invalid(format!("plan_case2: eps must be positive, got {eps}"));
            }
            if eps >= map.floor() {
                return invalid(format!(
                    "plan_case2: eps = {eps} is not below the q^max = 0 floor {:.6e}; any eps in (0, {:.6e}) maps to s in (0, 1)",
                    map.floor(),
                    map.floor()
                ));
            }
            map.s_of_eps(eps)
        }
    };
    if !(s > 0.0 && s < 1.0) {
        return invalid(format!("plan_case2: s = {s} outside (0, 1)"));
    }
    let gain: f64 = chan.h.iter().zip(&art.b_star).map(|(h, b)| h * b).sum();
    let a =
        constants.grad_bound * (1.0 - s) / (2.0 * constants.strong_convexity * constants.theta_th.cos() * eta * gain);
    art.s = Some(s);
    art.q_max = Some(s);
    art.eps = Some(map.eps_of_s(s));
    let plan = AmplificationPlan {
        a,
        b: art.b_star.clone(),
        b_max: b_max.to_vec(),
        eta: LearningRate::Constant { eta },
        provenance: art,
    };
    plan.validate(chan)?;
    Ok(plan)
}

/// Bias floor of the `q^max = 0` branch: `L G^2 (Z+1) / (8 M^2 cos^2 theta_th)`.
pub fn case2_qmax_zero_floor(
    chan: &ChannelRealization,
    b_max: &[f64],
    constants: &TaskConstants,
    tol_r: f64,
) -> Result<f64> {
    let art = solve_z(chan, b_max, tol_r)?;
    Ok(BiasMap::new(art.z, constants)?.floor())
}

/// Ablation baseline: every device at `b_max`, server gain rescaled so that
/// `a sum_k b_k` matches the optimized plan.
pub fn plan_unoptimized(plan: &AmplificationPlan) -> AmplificationPlan {
    let sum_opt: f64 = plan.b.iter().sum();
    let sum_max: f64 = plan.b_max.iter().sum();
    AmplificationPlan {
        a: plan.a * sum_opt / sum_max,
        b: plan.b_max.clone(),
        ..plan.clone()
    }
}
