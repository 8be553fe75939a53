//! Training tasks: exact loss and gradient evaluators, per-device data, and
//! the assumption constants (smoothness, strong convexity, gradient bound,
//! bias angle) the bounds need.

pub mod data;
pub mod idx;
pub mod mlp;
pub mod ridge;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::ZERO_NORM;
use crate::numerics::{RandomStream, Vector};
pub use data::{partition_data, DataPartition, Dataset};
pub use idx::load_idx_dataset;
pub use mlp::{classifier_task_from_data, make_nonconvex_task, make_nonconvex_task_with};
pub use ridge::{make_ridge_task, ridge_dataset, ridge_task_from_data};

pub(crate) const WARMUP_ROUNDS: usize = 100;
pub const DEFAULT_SMOOTHNESS_PAIRS: usize = 10_000;
/// `G` is this factor times the largest local gradient norm seen in warm-up.
pub const GRAD_BOUND_FACTOR: f64 = 1.5;
/// Empirical `L` is this factor times the largest sampled gradient ratio.
pub const SMOOTHNESS_SAFETY: f64 = 2.0;
/// Pair sampling radius around warm-up iterates.
pub const PAIR_RADIUS: f64 = 1.0;

/// Per-device losses and gradients of a federated objective.
pub trait Objective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn partition(&self) -> &DataPartition;
    fn local_loss(&self, k: usize, w: &[f64]) -> f64;
    fn local_grad(&self, k: usize, w: &[f64]) -> Vec<f64>;
    /// Gradient over the given positions inside device `k`'s shard.
    fn local_batch_grad(&self, k: usize, w: &[f64], batch: &[usize]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConstants {
    /// `L`
    pub smoothness: f64,
    /// `M`, zero when the loss is not strongly convex.
    pub strong_convexity: f64,
    /// `G`
    pub grad_bound: f64,
    /// `theta_th` in radians.
    pub theta_th: f64,
}

impl TaskConstants {
    pub(crate) fn placeholder(smoothness: f64, strong_convexity: f64) -> Self {
        TaskConstants {
            smoothness,
            strong_convexity,
            grad_bound: f64::NAN,
            theta_th: std::f64::consts::FRAC_PI_3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub w: Vector,
    pub loss: f64,
}

#[derive(Clone)]
pub struct TrainingTask {
    pub name: String,
    objective: Arc<dyn Objective>,
    weights: Vec<f64>,
    pub init: Vector,
    pub constants: TaskConstants,
    pub optimum: Option<Optimum>,
}

impl fmt::Debug for TrainingTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainingTask")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("devices", &self.devices())
            .field("constants", &self.constants)
            .finish()
    }
}

impl TrainingTask {
    pub fn new(name: &str, objective: Box<dyn Objective>, init: Vector, constants: TaskConstants) -> Self {
        let sizes = objective.partition().sizes();
        let total: usize = sizes.iter().sum();
        TrainingTask {
            name: name.to_string(),
            weights: sizes.iter().map(|&d| d as f64 / total as f64).collect(),
            objective: Arc::from(objective),
            init,
            constants,
            optimum: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn devices(&self) -> usize {
        self.weights.len()
    }

    /// `D_k / D_A`
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn device_size(&self, k: usize) -> usize {
        self.objective.partition().parts[k].len()
    }

    pub fn local_loss(&self, k: usize, w: &Vector) -> f64 {
        self.objective.local_loss(k, w.as_slice())
    }

    pub fn local_grad(&self, k: usize, w: &Vector) -> Vector {
        Vector::from_raw(self.objective.local_grad(k, w.as_slice()))
    }

    pub fn local_batch_grad(&self, k: usize, w: &Vector, batch: &[usize]) -> Vector {
        Vector::from_raw(self.objective.local_batch_grad(k, w.as_slice(), batch))
    }

    /// All local gradients, computed concurrently, in device order.
    pub fn local_grads(&self, w: &Vector) -> Vec<Vector> {
        (0..self.devices())
            .into_par_iter()
            .map(|k| self.local_grad(k, w))
            .collect()
    }

    pub fn loss(&self, w: &Vector) -> f64 {
        let parts: Vec<f64> = (0..self.devices())
            .into_par_iter()
            .map(|k| self.weights[k] * self.local_loss(k, w))
            .collect();
        parts.iter().sum()
    }

    /// `sum_k (D_k / D_A) grad F_k`
    pub fn combine(&self, locals: &[Vector]) -> Vector {
        let mut g = Vector::zeros(self.dim());
        for (wk, gk) in self.weights.iter().zip(locals) {
            g.axpy(*wk, gk);
        }
        g
    }

    pub fn grad(&self, w: &Vector) -> Vector {
        self.combine(&self.local_grads(w))
    }

    pub fn gap(&self, w: &Vector) -> Option<f64> {
        self.optimum.as_ref().map(|o| self.loss(w) - o.loss)
    }

    /// Per-device angle between the local and global gradient; `None` where
    /// either gradient vanishes.
    pub fn measure_theta(&self, w: &Vector) -> Vec<Option<f64>> {
        let locals = self.local_grads(w);
        angles(&self.combine(&locals), &locals)
    }

    /// Gradient descent with backtracking from `init`; the iterates define the
    /// region used for the empirical constants.
    pub fn warmup_trajectory(&self, rounds: usize) -> Vec<Vector> {
        let mut w = self.init.clone();
        let mut traj = vec![w.clone()];
        let mut step = 1.0;
        for _ in 0..rounds {
            let g = self.grad(&w);
            let g2 = g.norm_sq();
            if g2 < ZERO_NORM * ZERO_NORM {
                break;
            }
            let f = self.loss(&w);
            step *= 2.0;
            let next = loop {
                let mut cand = w.clone();
                cand.axpy(-step, &g);
                if self.loss(&cand) <= f - 0.5 * step * g2 || step < 1e-12 {
                    break cand;
                }
                step *= 0.5;
            };
            w = next;
            traj.push(w.clone());
        }
        traj
    }

    pub fn estimate_grad_bound(&self, traj: &[Vector]) -> f64 {
        let max = traj
            .par_iter()
            .map(|w| self.local_grads(w).iter().map(Vector::norm).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max);
        GRAD_BOUND_FACTOR * max
    }

    /// Random pair near the trajectory: `w1 = w_t + r1 u1`, `w2 = w1 + r2 u2`
    /// with unit directions and `r2` log-uniform over four decades.
    fn sample_pair<R: Rng>(&self, traj: &[Vector], rng: &mut R) -> (Vector, Vector) {
        let base = &traj[rng.random_range(0..traj.len())];
        let n = self.dim();
        let unit = |rng: &mut R| {
            let u = Vector::from_raw((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            let norm = u.norm().max(f64::MIN_POSITIVE);
            u.scaled(1.0 / norm)
        };
        let r1 = PAIR_RADIUS * rng.random::<f64>();
        let r2 = PAIR_RADIUS * 10f64.powf(-4.0 * rng.random::<f64>());
        let u1 = unit(rng);
        let u2 = unit(rng);
        let mut w1 = base.clone();
        w1.axpy(r1, &u1);
        let mut w2 = w1.clone();
        w2.axpy(r2, &u2);
        (w1, w2)
    }

    fn sample_pairs(&self, traj: &[Vector], stream: &RandomStream, pairs: usize) -> Vec<(Vector, Vector)> {
        let mut rng = stream.rng();
        (0..pairs).map(|_| self.sample_pair(traj, &mut rng)).collect()
    }

    /// Largest sampled `||grad F(w1) - grad F(w2)|| / ||w1 - w2||`, times the
    /// safety factor.
    pub fn estimate_smoothness(&self, traj: &[Vector], stream: &RandomStream, pairs: usize) -> f64 {
        let max = self
            .sample_pairs(traj, stream, pairs.max(1))
            .par_iter()
            .map(|(a, b)| self.grad(a).dist(&self.grad(b)) / a.dist(b))
            .reduce(|| 0.0, f64::max);
        SMOOTHNESS_SAFETY * max
    }

    /// Number of sampled pairs violating `||grad diff|| <= L ||w diff||`.
    pub fn smoothness_violations(&self, stream: &RandomStream, pairs: usize) -> usize {
        let traj = self.warmup_trajectory(WARMUP_ROUNDS);
        let l = self.constants.smoothness;
        self.sample_pairs(&traj, stream, pairs)
            .par_iter()
            .filter(|(a, b)| self.grad(a).dist(&self.grad(b)) > l * a.dist(b) * (1.0 + 1e-10))
            .count()
    }

    /// Number of sampled pairs violating `<grad diff, w diff> >= M ||w diff||^2`.
    pub fn strong_convexity_violations(&self, stream: &RandomStream, pairs: usize) -> usize {
        let traj = self.warmup_trajectory(WARMUP_ROUNDS);
        let m = self.constants.strong_convexity;
        self.sample_pairs(&traj, stream, pairs)
            .par_iter()
            .filter(|(a, b)| {
                let dg = self.grad(a).sub(&self.grad(b));
                let dw = a.sub(b);
                dg.dot(&dw) < m * dw.norm_sq() * (1.0 - 1e-10)
            })
            .count()
    }
}

/// `theta_k = acos(<g, g_k> / (||g|| ||g_k||))`, `None` for vanishing norms.
pub fn angles(global: &Vector, locals: &[Vector]) -> Vec<Option<f64>> {
    let gn = global.norm();
    locals
        .iter()
        .map(|gk| {
            let kn = gk.norm();
            if gn < ZERO_NORM || kn < ZERO_NORM {
                None
            } else {
                Some((global.dot(gk) / (gn * kn)).clamp(-1.0, 1.0).acos())
            }
        })
        .collect()
}

pub fn max_angle(angles: &[Option<f64>]) -> Option<f64> {
    angles.iter().flatten().cloned().reduce(f64::max)
}
