//! Ridge regression: strongly convex quadratic with exact constants and a
//! closed-form optimum.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::numerics::{dot, Purpose, RandomStream, Vector};
use crate::tasks::data::{partition_data, DataPartition, Dataset};
use crate::tasks::{Objective, Optimum, TaskConstants, TrainingTask};

/// `F_k(w) = 1/(2 D_k) sum_i (x_i^T w - y_i)^2 + rho/2 ||w||^2`
#[derive(Debug)]
pub struct RidgeObjective {
    data: Dataset,
    partition: DataPartition,
    rho: f64,
    // Per-device X_k^T X_k / D_k, X_k^T y_k / D_k and y_k^T y_k / (2 D_k).
    grams: Vec<Vec<f64>>,
    cross: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl RidgeObjective {
    pub fn new(data: Dataset, partition: DataPartition, rho: f64) -> Result<Self> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return invalid(format!("ridge: coefficient must be >= 0, got {rho}"));
        }
        if partition.parts.iter().flatten().any(|&i| i >= data.n) {
            return invalid("ridge: partition index out of range");
        }
        let n = data.dim;
        let mut grams = Vec::with_capacity(partition.devices());
        let mut cross = Vec::with_capacity(partition.devices());
        let mut offsets = Vec::with_capacity(partition.devices());
        for part in &partition.parts {
            let dk = part.len() as f64;
            let mut g = vec![0.0; n * n];
            let mut c = vec![0.0; n];
            let mut e = 0.0;
            for &i in part {
                let x = data.row(i);
                let y = data.targets[i];
                for a in 0..n {
                    c[a] += x[a] * y;
                    for b in 0..n {
                        g[a * n + b] += x[a] * x[b];
                    }
                }
                e += y * y;
            }
            g.iter_mut().for_each(|v| *v /= dk);
            c.iter_mut().for_each(|v| *v /= dk);
            grams.push(g);
            cross.push(c);
            offsets.push(e / (2.0 * dk));
        }
        Ok(RidgeObjective {
            data,
            partition,
            rho,
            grams,
            cross,
            offsets,
        })
    }

    /// Global `X^T X / D_A` and `X^T y / D_A`.
    fn global_moments(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.data.dim;
        let total = self.partition.total() as f64;
        let mut g = DMatrix::zeros(n, n);
        let mut c = DVector::zeros(n);
        for (k, part) in self.partition.parts.iter().enumerate() {
            let wk = part.len() as f64 / total;
            for a in 0..n {
                c[a] += wk * self.cross[k][a];
                for b in 0..n {
                    g[(a, b)] += wk * self.grams[k][a * n + b];
                }
            }
        }
        (g, c)
    }

    /// Exact smoothness and strong-convexity constants of the global loss.
    pub fn exact_constants(&self) -> (f64, f64) {
        let (g, _) = self.global_moments();
        let eig = g.symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        (max + self.rho, (min + self.rho).max(0.0))
    }

    /// Solves `(X^T X / D_A + rho I) w = X^T y / D_A`.
    pub fn closed_form(&self) -> Option<Vector> {
        let (mut g, c) = self.global_moments();
        for a in 0..self.data.dim {
            g[(a, a)] += self.rho;
        }
        let w = g.cholesky()?.solve(&c);
        Vector::new(w.iter().cloned().collect()).ok()
    }

    fn sample_residual(&self, i: usize, w: &[f64]) -> f64 {
        dot(self.data.row(i), w) - self.data.targets[i]
    }
}

impl Objective for RidgeObjective {
    fn dim(&self) -> usize {
        self.data.dim
    }

    fn partition(&self) -> &DataPartition {
        &self.partition
    }

    fn local_loss(&self, k: usize, w: &[f64]) -> f64 {
        let n = self.data.dim;
        let g = &self.grams[k];
        let mut quad = 0.0;
        for a in 0..n {
            quad += w[a] * dot(&g[a * n..(a + 1) * n], w);
        }
        0.5 * quad - dot(&self.cross[k], w) + self.offsets[k] + 0.5 * self.rho * dot(w, w)
    }

    fn local_grad(&self, k: usize, w: &[f64]) -> Vec<f64> {
        let n = self.data.dim;
        let g = &self.grams[k];
        (0..n)
            .map(|a| dot(&g[a * n..(a + 1) * n], w) - self.cross[k][a] + self.rho * w[a])
            .collect()
    }

    fn local_batch_grad(&self, k: usize, w: &[f64], batch: &[usize]) -> Vec<f64> {
        let part = &self.partition.parts[k];
        let mut out: Vec<f64> = w.iter().map(|x| self.rho * x).collect();
        let scale = 1.0 / batch.len() as f64;
        for &pos in batch {
            let i = part[pos];
            let r = self.sample_residual(i, w) * scale;
            for (o, x) in out.iter_mut().zip(self.data.row(i)) {
                *o += r * x;
            }
        }
        out
    }
}

/// Builds a ridge task from an explicit dataset and partition. `G` is
/// estimated from a warm-up descent run; `theta_th` defaults to pi/3.
pub fn ridge_task_from_data(data: Dataset, partition: DataPartition, rho: f64) -> Result<TrainingTask> {
    let dim = data.dim;
    let obj = RidgeObjective::new(data, partition, rho)?;
    let (l, m) = obj.exact_constants();
    let w_star = if m > 0.0 { obj.closed_form() } else { None };
    let mut task = TrainingTask::new(
        "ridge",
        Box::new(obj),
        Vector::zeros(dim),
        TaskConstants::placeholder(l, m),
    );
    if let Some(w) = w_star {
        let loss = task.loss(&w);
        task.optimum = Some(Optimum { w, loss });
    }
    task.constants.grad_bound = task.estimate_grad_bound(&task.warmup_trajectory(super::WARMUP_ROUNDS));
    Ok(task)
}

/// Synthetic linear data `y = X w_true + noise` spread i.i.d. over `devices`.
pub fn make_ridge_task(
    stream: &RandomStream,
    devices: usize,
    per_device: usize,
    dim: usize,
    noise_std: f64,
    ridge_coeff: f64,
) -> Result<TrainingTask> {
    let data = ridge_dataset(stream, devices * per_device, dim, noise_std)?;
    ridge_task_with_skew(stream, data, devices, ridge_coeff, 0.0)
}

pub(crate) fn ridge_task_with_skew(
    stream: &RandomStream,
    data: Dataset,
    devices: usize,
    ridge_coeff: f64,
    skew: f64,
) -> Result<TrainingTask> {
    if !(ridge_coeff > 0.0) {
        return invalid(format!("ridge: coefficient must be positive, got {ridge_coeff}"));
    }
    let partition = partition_data(&stream.child(Purpose::Partition), &data, devices, skew)?;
    ridge_task_from_data(data, partition, ridge_coeff)
}

/// Gaussian design; ground-truth weights are `N(0, 1/dim)` so that
/// `E ||w_true||^2 = 1` whatever the dimension.
pub fn ridge_dataset(stream: &RandomStream, n: usize, dim: usize, noise_std: f64) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return invalid("ridge: sample count and dimension must be positive");
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return invalid(format!("ridge: noise_std must be >= 0, got {noise_std}"));
    }
    let mut rng = stream.child(Purpose::Data).rng();
    let scale = 1.0 / (dim as f64).sqrt();
    let w_true: Vec<f64> = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let eps: f64 = rng.sample(StandardNormal);
        targets.push(dot(&x, &w_true) + noise_std * eps);
        features.extend(x);
    }
    Dataset::regression(dim, features, targets)
}
