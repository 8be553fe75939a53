//! Small fully connected classifier with tanh hidden activations and a
//! softmax cross-entropy output. Smooth, nonconvex.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::numerics::{Purpose, RandomStream, Vector};
use crate::tasks::data::{partition_data, DataPartition, Dataset};
use crate::tasks::{Objective, TaskConstants, TrainingTask};

pub const MAX_DESK_PARAMS: usize = 10_000;

#[derive(Debug)]
pub struct MlpObjective {
    data: Dataset,
    partition: DataPartition,
    /// Layer widths, input first.
    widths: Vec<usize>,
}

impl MlpObjective {
    pub fn new(data: Dataset, partition: DataPartition, hidden: &[usize]) -> Result<Self> {
        if data.labels.is_none() || data.classes < 2 {
            return invalid("mlp: classification dataset with >= 2 classes required");
        }
        if partition.parts.iter().flatten().any(|&i| i >= data.n) {
            return invalid("mlp: partition index out of range");
        }
        let mut widths = vec![data.dim];
        widths.extend_from_slice(hidden);
        widths.push(data.classes);
        if widths.contains(&0) {
            return invalid("mlp: zero-width layer");
        }
        Ok(MlpObjective {
            data,
            partition,
            widths,
        })
    }

    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Gaussian initialization with variance 1/fan_in, zero biases.
    pub fn init(&self, stream: &RandomStream) -> Vector {
        let mut rng = stream.rng();
        let mut w = Vec::with_capacity(Self::param_count(&self.widths));
        for pair in self.widths.windows(2) {
            let sd = 1.0 / (pair[0] as f64).sqrt();
            for _ in 0..pair[0] * pair[1] {
                w.push(sd * rng.sample::<f64, _>(StandardNormal));
            }
            w.extend(std::iter::repeat_n(0.0, pair[1]));
        }
        Vector::from_raw(w)
    }

    /// Sum of per-sample losses over `samples`; adds the summed gradient into
    /// `grad` when given.
    fn accumulate(&self, w: &[f64], samples: impl Iterator<Item = usize>, mut grad: Option<&mut [f64]>) -> f64 {
        let layers = self.widths.len() - 1;
        let labels = self.data.labels.as_ref().expect("checked in new");
        let mut acts: Vec<Vec<f64>> = self.widths.iter().map(|&n| vec![0.0; n]).collect();
        let mut deltas: Vec<Vec<f64>> = self.widths.iter().map(|&n| vec![0.0; n]).collect();
        let mut total = 0.0;
        for i in samples {
            acts[0].copy_from_slice(self.data.row(i));
            let mut off = 0;
            for l in 0..layers {
                let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
                let (lo, hi) = acts.split_at_mut(l + 1);
                let (input, output) = (&lo[l], &mut hi[0]);
                let weights = &w[off..off + n_in * n_out];
                let bias = &w[off + n_in * n_out..off + n_in * n_out + n_out];
                for j in 0..n_out {
                    let z = bias[j] + crate::numerics::dot(&weights[j * n_in..(j + 1) * n_in], input);
                    output[j] = if l + 1 < layers { z.tanh() } else { z };
                }
                off += n_out * (n_in + 1);
            }
            let logits = &acts[layers];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let y = labels[i] as usize;
            total += max + sum_exp.ln() - logits[y];

            let Some(g) = grad.as_deref_mut() else { continue };
            for (j, d) in deltas[layers].iter_mut().enumerate() {
                *d = (logits[j] - max).exp() / sum_exp - if j == y { 1.0 } else { 0.0 };
            }
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
                off -= n_out * (n_in + 1);
                let (dlo, dhi) = deltas.split_at_mut(l + 1);
                let (d_in, d_out) = (&mut dlo[l], &dhi[0]);
                let input = &acts[l];
                for j in 0..n_out {
                    let dj = d_out[j];
                    let row = &mut g[off + j * n_in..off + (j + 1) * n_in];
                    for (r, x) in row.iter_mut().zip(input) {
                        *r += dj * x;
                    }
                    g[off + n_in * n_out + j] += dj;
                }
                if l > 0 {
                    for (a, d) in d_in.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for j in 0..n_out {
                            s += w[off + j * n_in + a] * d_out[j];
                        }
                        // tanh'(z) = 1 - tanh(z)^2
                        *d = s * (1.0 - input[a] * input[a]);
                    }
                }
            }
        }
        total
    }
}

impl Objective for MlpObjective {
    fn dim(&self) -> usize {
        Self::param_count(&self.widths)
    }

    fn partition(&self) -> &DataPartition {
        &self.partition
    }

    fn local_loss(&self, k: usize, w: &[f64]) -> f64 {
        let part = &self.partition.parts[k];
        self.accumulate(w, part.iter().copied(), None) / part.len() as f64
    }

    fn local_grad(&self, k: usize, w: &[f64]) -> Vec<f64> {
        let part = &self.partition.parts[k];
        let mut g = vec![0.0; self.dim()];
        self.accumulate(w, part.iter().copied(), Some(&mut g));
        let scale = 1.0 / part.len() as f64;
        g.iter_mut().for_each(|x| *x *= scale);
        g
    }

    fn local_batch_grad(&self, k: usize, w: &[f64], batch: &[usize]) -> Vec<f64> {
        let part = &self.partition.parts[k];
        let mut g = vec![0.0; self.dim()];
        self.accumulate(w, batch.iter().map(|&p| part[p]), Some(&mut g));
        let scale = 1.0 / batch.len() as f64;
        g.iter_mut().for_each(|x| *x *= scale);
        g
    }
}

/// Gaussian blobs: `classes` centers drawn with spread `separation`, unit
/// within-class noise, labels balanced.
pub fn blob_dataset(
    stream: &RandomStream,
    n: usize,
    dim_in: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if n == 0 || dim_in == 0 || classes < 2 {
        return invalid("blobs: need n >= 1, dim_in >= 1, classes >= 2");
    }
    let mut rng = stream.child(Purpose::Data).rng();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim_in)
                .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut features = Vec::with_capacity(n * dim_in);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u32);
        features.extend(centers[c].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
    }
    Dataset::classification(dim_in, features, labels, classes)
}

pub const BLOB_SEPARATION: f64 = 1.5;

/// Builds a classifier task over an explicit dataset and partition. `L` and
/// `G` are estimated empirically around a warm-up trajectory.
pub fn classifier_task_from_data(
    stream: &RandomStream,
    data: Dataset,
    partition: DataPartition,
    hidden: &[usize],
    smoothness_pairs: usize,
) -> Result<TrainingTask> {
    let obj = MlpObjective::new(data, partition, hidden)?;
    let init = obj.init(&stream.child(Purpose::Init));
    let mut task = TrainingTask::new(
        "nonconvex",
        Box::new(obj),
        init,
        TaskConstants::placeholder(f64::NAN, 0.0),
    );
    let traj = task.warmup_trajectory(super::WARMUP_ROUNDS);
    task.constants.grad_bound = task.estimate_grad_bound(&traj);
    task.constants.smoothness = task.estimate_smoothness(&traj, &stream.child(Purpose::Smoothness), smoothness_pairs);
    Ok(task)
}

/// Desk-scale nonconvex task: a three-layer tanh network on Gaussian blobs.
pub fn make_nonconvex_task(
    stream: &RandomStream,
    devices: usize,
    per_device: usize,
    dim_in: usize,
    hidden: usize,
    classes: usize,
) -> Result<TrainingTask> {
    make_nonconvex_task_with(
        stream,
        devices,
        per_device,
        dim_in,
        hidden,
        classes,
        0.0,
        super::DEFAULT_SMOOTHNESS_PAIRS,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn make_nonconvex_task_with(
    stream: &RandomStream,
    devices: usize,
    per_device: usize,
    dim_in: usize,
    hidden: usize,
    classes: usize,
    skew: f64,
    smoothness_pairs: usize,
) -> Result<TrainingTask> {
    let widths = [dim_in, hidden, hidden, classes];
    let params = MlpObjective::param_count(&widths);
    if params > MAX_DESK_PARAMS {
        return invalid(format!(
            "nonconvex: {params} parameters exceeds desk limit {MAX_DESK_PARAMS}"
        ));
    }
    if devices == 0 || per_device == 0 || hidden == 0 {
        return invalid("nonconvex: devices, samples per device and hidden width must be positive");
    }
    let data = blob_dataset(stream, devices * per_device, dim_in, classes, BLOB_SEPARATION)?;
    let partition = partition_data(&stream.child(Purpose::Partition), &data, devices, skew)?;
    classifier_task_from_data(stream, data, partition, &[hidden, hidden], smoothness_pairs)
}
