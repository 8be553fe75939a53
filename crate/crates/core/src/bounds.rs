//! Closed-form convergence bounds and their checks against measured runs.
//!
//! The smooth-case bound controls the smallest global gradient norm seen up
//! to round `T` and vanishes like `T^{p-1}`. The strongly convex bound
//! controls the optimality gap: a geometric term in `q^max` plus a constant
//! bias floor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::error::{invalid, Result};
use crate::optimizer::{AmplificationPlan, LearningRate};
use crate::tasks::TaskConstants;
use crate::trainer::{mean_se, RunTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub a: f64,
    pub b: Vec<f64>,
    pub eta: LearningRate,
    pub h: Vec<f64>,
    pub sigma2: f64,
    pub dim: usize,
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub grad_bound: f64,
    pub theta_th: f64,
    /// `E{F(w^1) - F(w^{T+1})}`
    pub delta_f: Option<f64>,
    /// `||w^1 - w*||^2`
    pub init_dist_sq: Option<f64>,
}

impl BoundInputs {
    pub fn new(plan: &AmplificationPlan, chan: &ChannelRealization, c: &TaskConstants) -> Self {
        BoundInputs {
            a: plan.a,
            b: plan.b.clone(),
            eta: plan.eta,
            h: chan.h.clone(),
            sigma2: chan.sigma2,
            dim: chan.dim,
            smoothness: c.smoothness,
            strong_convexity: c.strong_convexity,
            grad_bound: c.grad_bound,
            theta_th: c.theta_th,
            delta_f: None,
            init_dist_sq: None,
        }
    }

    pub fn with_delta_f(mut self, delta_f: f64) -> Self {
        self.delta_f = Some(delta_f);
        self
    }

    pub fn with_init_dist_sq(mut self, d: f64) -> Self {
        self.init_dist_sq = Some(d);
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta_th = theta;
        self
    }

    /// `sum_k h_k b_k`
    pub fn gain(&self) -> f64 {
        self.h.iter().zip(&self.b).map(|(h, b)| h * b).sum()
    }

    /// `sum_k 4 h_k^2 b_k^2 + (sum_k h_k b_k)^2 + N sigma^2`
    pub fn energy(&self) -> f64 {
        let g = self.gain();
        4.0 * self.h.iter().zip(&self.b).map(|(h, b)| h * h * b * b).sum::<f64>()
            + g * g
            + self.dim as f64 * self.sigma2
    }

    fn common(&self, lemma: &str) -> Result<f64> {
        if self.h.len() != self.b.len() {
            return invalid(format!(
                "{lemma}: {} channel gains for {} device gains",
                self.h.len(),
                self.b.len()
            ));
        }
        if !(self.a > 0.0) {
            return invalid(format!(
                "{lemma} hypothesis violated: server gain a = {} must be positive",
                self.a
            ));
        }
        if !(self.gain() > 0.0) {
            return invalid(format!("{lemma} hypothesis violated: sum_k h_k b_k must be positive"));
        }
        let cos = self.theta_th.cos();
        if !(cos > 0.0) {
            return invalid(format!(
                "{lemma} hypothesis violated: bias angle {} rad is not below pi/2",
                self.theta_th
            ));
        }
        if !(self.smoothness > 0.0) {
            return invalid(format!("{lemma}: smoothness L must be positive"));
        }
        Ok(cos)
    }

    /// `max(1 - 2 M cos(theta) eta a sum h b / G, 0)`
    pub fn q_max(&self) -> Result<f64> {
        let cos = self.common("strongly convex bound")?;
        let eta = self.constant_eta()?;
        Ok((1.0 - 2.0 * self.strong_convexity * cos * eta * self.a * self.gain() / self.grad_bound).max(0.0))
    }

    fn constant_eta(&self) -> Result<f64> {
        match self.eta {
            LearningRate::Constant { eta } if eta > 0.0 => Ok(eta),
            _ => invalid("strongly convex bound hypothesis violated: needs a positive constant learning rate"),
        }
    }

    /// Second term of the strongly convex bound, constant in `T`.
    pub fn lemma2_floor(&self) -> Result<f64> {
        let cos = self.common("strongly convex bound")?;
        let eta = self.constant_eta()?;
        if !(self.strong_convexity > 0.0) || !(self.grad_bound > 0.0) {
            return invalid("strongly convex bound hypothesis violated: needs M > 0 and G > 0");
        }
        let first = self.a * eta * self.grad_bound / (2.0 * self.strong_convexity * cos * self.gain());
        let second = (self.a * eta).powi(2);
        Ok(0.5 * self.smoothness * first.max(second) * self.energy())
    }
}

/// Smooth-case bound on `min_{t <= T} ||grad F(w^t)||` for `eta_t = c / t^p`.
/// A schedule scale `c` other than one is folded into the server gain.
pub fn lemma1_rhs(inputs: &BoundInputs, t: usize) -> Result<f64> {
    let cos = inputs.common("smooth-case bound")?;
    let (scale, p) = match inputs.eta {
        LearningRate::PowerLaw { scale, p } if scale > 0.0 => (scale, p),
        _ => return invalid("smooth-case bound hypothesis violated: needs a power-law learning rate"),
    };
    if !(p > 0.5 && p < 1.0) {
        return invalid(format!(
            "smooth-case bound hypothesis violated: p = {p} outside (1/2, 1)"
        ));
    }
    let Some(delta_f) = inputs.delta_f else {
        return invalid("smooth-case bound: deltaF not set");
    };
    if t == 0 {
        return invalid("smooth-case bound: T must be at least 1");
    }
    let a = inputs.a * scale;
    let gain = inputs.gain();
    let tp = (t as f64).powf(1.0 - p);
    Ok(delta_f / (tp * cos * a * gain)
        + 2.0 * p / (tp * (2.0 * p - 1.0)) * (a * inputs.smoothness / (2.0 * cos * gain)) * inputs.energy())
}

/// Strongly convex bound on `E F(w^T) - F*`. Uses `q^0 = 1` at `T = 1`.
pub fn lemma2_rhs(inputs: &BoundInputs, t: usize) -> Result<f64> {
    let floor = inputs.lemma2_floor()?;
    let q = inputs.q_max()?;
    let Some(d) = inputs.init_dist_sq else {
        return invalid("strongly convex bound: ||w^1 - w*||^2 not set");
    };
    if t == 0 {
        return invalid("strongly convex bound: T must be at least 1");
    }
    let geo = if t == 1 { 1.0 } else { q.powi((t - 1) as i32) };
    Ok(0.5 * inputs.smoothness * geo * d + floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub seeds: usize,
    /// Bias angle the bound was evaluated with: max(configured, measured).
    pub theta_used: f64,
    pub rows: Vec<BoundRow>,
    /// Rows of the seed-averaged check with negative margin.
    pub violations: usize,
    /// Per-seed checks with each seed's own loss drop; indicative only.
    pub per_seed_violations: Vec<usize>,
    /// Smallest `bound / measured` over the rows.
    pub min_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub seeds: usize,
    pub theta_used: f64,
    pub q_max: f64,
    pub floor_bound: f64,
    pub rows: Vec<BoundRow>,
    pub violations: usize,
    /// Mean gap over the last tenth of the rounds, seed-averaged.
    pub steady_gap: f64,
    pub steady_gap_se: f64,
    /// Least-squares slope of `ln(mean gap)` over the early decay.
    pub fitted_log_rate: Option<f64>,
    pub log_q: f64,
}

fn theta_used(configured: f64, traces: &[RunTrace]) -> f64 {
    traces.iter().map(|t| t.breaches.max_theta).fold(configured, f64::max)
}

fn check_traces(traces: &[RunTrace]) -> Result<usize> {
    let Some(first) = traces.first() else {
        return invalid("bound check: no traces");
    };
    let len = first.rounds.len();
    if len == 0 || traces.iter().any(|t| t.rounds.len() != len) {
        return invalid("bound check: traces must be non-empty and of equal length");
    }
    Ok(len)
}

/// Seed-averaged check of the smooth-case bound at every prefix length: the
/// smallest seed-mean gradient norm against the bound evaluated with the
/// seed-mean loss drop.
pub fn verify_lemma1(traces: &[RunTrace], inputs: &BoundInputs) -> Result<Lemma1Report> {
    let len = check_traces(traces)?;
    let theta = theta_used(inputs.theta_th, traces);
    let base = inputs.clone().with_theta(theta);
    let n = traces.len() as f64;
    let mut rows = Vec::with_capacity(len);
    let mut best = f64::INFINITY;
    for t in 1..=len {
        let mean_norm = traces.iter().map(|tr| tr.rounds[t - 1].grad_norm).sum::<f64>() / n;
        best = best.min(mean_norm);
        let drop = traces.iter().map(|tr| tr.loss_drop(t)).sum::<f64>() / n;
        let bound = lemma1_rhs(&base.clone().with_delta_f(drop), t)?;
        rows.push(BoundRow {
            t,
            measured: best,
            bound,
            margin: bound - best,
        });
    }
    let mut per_seed = Vec::with_capacity(traces.len());
    for tr in traces {
        let mut v = 0;
        for t in 1..=len {
            let bound = lemma1_rhs(&base.clone().with_delta_f(tr.loss_drop(t)), t)?;
            if tr.rounds[t - 1].min_grad_norm > bound {
                v += 1;
            }
        }
        per_seed.push(v);
    }
    Ok(Lemma1Report {
        seeds: traces.len(),
        theta_used: theta,
        violations: rows.iter().filter(|r| r.margin < 0.0).count(),
        min_ratio: rows.iter().map(|r| r.bound / r.measured).fold(f64::INFINITY, f64::min),
        per_seed_violations: per_seed,
        rows,
    })
}

/// Seed-averaged check of the strongly convex bound. Gaps are recomputed
/// from the recorded losses and `F*`.
pub fn verify_lemma2(traces: &[RunTrace], inputs: &BoundInputs) -> Result<Lemma2Report> {
    let len = check_traces(traces)?;
    let mut f_star = None;
    let mut dist = None;
    for tr in traces {
        match (tr.f_star, tr.init_dist_sq) {
            (Some(f), Some(d)) => {
                f_star = Some(f);
                dist = Some(d);
            }
            _ => return invalid("strongly convex bound: trace has no known optimum"),
        }
    }
    let (f_star, dist) = (f_star.unwrap_or_default(), dist.unwrap_or_default());
    let theta = theta_used(inputs.theta_th, traces);
    let base = inputs
        .clone()
        .with_theta(theta)
        .with_init_dist_sq(inputs.init_dist_sq.unwrap_or(dist));
    let q = base.q_max()?;
    let floor = base.lemma2_floor()?;
    let gaps: Vec<Vec<f64>> = traces
        .iter()
        .map(|tr| tr.rounds.iter().map(|r| r.loss - f_star).collect())
        .collect();
    let n = traces.len() as f64;
    let mean: Vec<f64> = (0..len).map(|i| gaps.iter().map(|g| g[i]).sum::<f64>() / n).collect();
    let mut rows = Vec::with_capacity(len);
    for (i, &m) in mean.iter().enumerate() {
        let bound = lemma2_rhs(&base, i + 1)?;
        rows.push(BoundRow {
            t: i + 1,
            measured: m,
            bound,
            margin: bound - m,
        });
    }
    let tail = (len / 10).max(1);
    let tails: Vec<f64> = gaps
        .iter()
        .map(|g| g[len - tail..].iter().sum::<f64>() / tail as f64)
        .collect();
    let (steady, steady_se) = mean_se(&tails);
    Ok(Lemma2Report {
        seeds: traces.len(),
        theta_used: theta,
        q_max: q,
        floor_bound: floor,
        violations: rows.iter().filter(|r| r.margin < 0.0).count(),
        steady_gap: steady,
        steady_gap_se: steady_se,
        fitted_log_rate: decay_slope(&mean, steady),
        log_q: q.ln(),
        rows,
    })
}

/// Slope of `ln(gap - floor)` against `t` over the rounds where the excess
/// over the floor is still above a tenth of its initial value.
fn decay_slope(mean: &[f64], floor: f64) -> Option<f64> {
    let excess: Vec<f64> = mean.iter().map(|g| g - floor).collect();
    let start = *excess.first()?;
    if !(start > 0.0) {
        return None;
    }
    let pts: Vec<(f64, f64)> = excess
        .iter()
        .enumerate()
        .take_while(|(_, e)| **e > 0.1 * start)
        .map(|(i, e)| ((i + 1) as f64, e.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(num / den)
}

pub fn write_rows_csv(rows: &[BoundRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "measured", "bound", "margin"])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.measured.to_string(),
            r.bound.to_string(),
            r.margin.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::BiasMap;

    fn unit_inputs() -> BoundInputs {
        BoundInputs {
            a: 1.0,
            b: vec![1.0],
            eta: LearningRate::PowerLaw { scale: 1.0, p: 0.75 },
            h: vec![1.0],
            sigma2: 0.0,
            dim: 1,
            smoothness: 1.0,
            strong_convexity: 0.0,
            grad_bound: 1.0,
            theta_th: 0.0,
            delta_f: Some(1.0),
            init_dist_sq: None,
        }
    }

    #[test]
    fn lemma1_worked_instance() {
        assert!((lemma1_rhs(&unit_inputs(), 1).unwrap() - 8.5).abs() < 1e-14);
    }

    #[test]
    fn lemma1_scaling_in_t() {
        let mut inp = unit_inputs();
        inp.h = vec![0.4, 1.3];
        inp.b = vec![2.0, 0.5];
        inp.sigma2 = 0.1;
        inp.dim = 7;
        inp.theta_th = 0.9;
        for t in [1usize, 3, 10, 77, 1000] {
            let r = lemma1_rhs(&inp, 2 * t).unwrap() / lemma1_rhs(&inp, t).unwrap();
            assert!((r - 2f64.powf(-0.25)).abs() < 1e-12);
            assert!(lemma1_rhs(&inp, t + 1).unwrap() < lemma1_rhs(&inp, t).unwrap());
        }
        assert!(lemma1_rhs(&inp, 1 << 40).unwrap() < 1e-2 * lemma1_rhs(&inp, 1).unwrap());
        let c = lemma1_rhs(&inp, 1).unwrap();
        for t in [2usize, 50, 500, 12345] {
            let v = lemma1_rhs(&inp, t).unwrap() * (t as f64).powf(0.25);
            assert!((v - c).abs() <= 1e-9 * c);
        }
    }

    #[test]
    fn hypothesis_violations_are_named() {
        let mut inp = unit_inputs();
        inp.theta_th = std::f64::consts::FRAC_PI_2 + 0.1;
        let e = lemma1_rhs(&inp, 1).unwrap_err().to_string();
        assert!(e.contains("hypothesis") && e.contains("angle"));
        let mut inp = unit_inputs();
        inp.eta = LearningRate::PowerLaw { scale: 1.0, p: 1.0 };
        assert!(lemma1_rhs(&inp, 1).unwrap_err().to_string().contains("p = 1"));
        let mut inp = unit_inputs();
        inp.b = vec![0.0];
        assert!(lemma1_rhs(&inp, 1).is_err());
    }

    fn case2_inputs(a: f64) -> BoundInputs {
        BoundInputs {
            a,
            b: vec![1.0, 0.5],
            eta: LearningRate::Constant { eta: 0.01 },
            h: vec![1.0, 0.8],
            sigma2: 0.05,
            dim: 3,
            smoothness: 2.0,
            strong_convexity: 0.5,
            grad_bound: 3.0,
            theta_th: 0.6,
            delta_f: None,
            init_dist_sq: Some(4.0),
        }
    }

    #[test]
    fn lemma2_structure() {
        let inp = case2_inputs(10.0);
        let floor = inp.lemma2_floor().unwrap();
        let q = inp.q_max().unwrap();
        assert!(q > 0.0 && q < 1.0);
        let mut prev = f64::INFINITY;
        for t in 1..200 {
            let v = lemma2_rhs(&inp, t).unwrap();
            assert!(v <= prev);
            assert!((v - floor - 0.5 * 2.0 * 4.0 * q.powi(t as i32 - 1)).abs() < 1e-12);
            prev = v;
        }
        assert!((lemma2_rhs(&inp, 100_000).unwrap() - floor).abs() < 1e-12);
        // q = 0 branch: full first term at T = 1, none after
        let big = case2_inputs(1e6);
        assert_eq!(big.q_max().unwrap(), 0.0);
        let f = big.lemma2_floor().unwrap();
        assert!((lemma2_rhs(&big, 1).unwrap() - (4.0 + f)).abs() < 1e-9 * f);
        assert_eq!(lemma2_rhs(&big, 2).unwrap(), f);
    }

    #[test]
    fn floor_equals_bias_target_under_case2_gain() {
        let mut inp = case2_inputs(1.0);
        let z = (4.0 * inp.h.iter().zip(&inp.b).map(|(h, b)| h * h * b * b).sum::<f64>() + inp.dim as f64 * inp.sigma2)
            / inp.gain().powi(2);
        let c = TaskConstants {
            smoothness: inp.smoothness,
            strong_convexity: inp.strong_convexity,
            grad_bound: inp.grad_bound,
            theta_th: inp.theta_th,
        };
        let map = BiasMap::new(z, &c).unwrap();
        for s in [0.1, 0.5, 0.9, 0.99] {
            inp.a = c.grad_bound * (1.0 - s) / (2.0 * c.strong_convexity * c.theta_th.cos() * 0.01 * inp.gain());
            let floor = inp.lemma2_floor().unwrap();
            assert!((floor - map.eps_of_s(s)).abs() <= 1e-12 * floor);
            assert!((inp.q_max().unwrap() - s).abs() < 1e-12);
        }
        // larger s: smaller floor, larger contraction factor
        assert!(map.eps_of_s(0.3) > map.eps_of_s(0.6));
    }
}
