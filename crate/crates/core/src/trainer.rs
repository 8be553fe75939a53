//! The federated round loop: local gradients, over-the-air aggregation,
//! server step. Records one row per round.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{encode, server_update, AggregationStrategy, ModelState, StrategyKind};
use crate::channel::{draw_channels_at, ota_superpose_with_gains, ChannelRealization};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Purpose, RandomStream, StreamId, Vector};
use crate::optimizer::AmplificationPlan;
use crate::tasks::{angles, max_angle, TrainingTask};

pub const TRACE_HEADER: [&str; 7] = ["t", "loss", "grad_norm", "min_grad_norm", "gap", "theta_max", "eta"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Per-device minibatch size; full local gradients when `None`.
    pub batch_size: Option<usize>,
    /// Redraw Rayleigh coefficients with this mean every round instead of
    /// using the static realization.
    pub redraw_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub min_grad_norm: f64,
    pub gap: Option<f64>,
    pub theta_max: Option<f64>,
    pub eta: f64,
}

/// Rounds in which an assumption constant was exceeded. The run continues.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BreachLog {
    pub grad_bound_rounds: usize,
    pub first_grad_bound: Option<usize>,
    pub max_local_grad_norm: f64,
    pub theta_rounds: usize,
    pub first_theta: Option<usize>,
    pub max_theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub task: String,
    pub strategy: StrategyKind,
    pub master_seed: u64,
    pub fingerprint: String,
    pub plan: AmplificationPlan,
    pub settings: RunSettings,
    pub f_star: Option<f64>,
    /// `||w^1 - w*||^2` when the optimum is known.
    pub init_dist_sq: Option<f64>,
    /// `F(w^{T+1})`
    pub final_loss: f64,
    pub breaches: BreachLog,
    /// `||g_k^{(t)}||` per round, per device.
    pub local_grad_norms: Vec<Vec<f64>>,
    #[serde(skip)]
    pub rounds: Vec<RoundRecord>,
}

impl RunTrace {
    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    /// `F(w^1) - F(w^{T+1})` for the prefix of length `t`.
    pub fn loss_drop(&self, t: usize) -> f64 {
        let next = if t < self.rounds.len() {
            self.rounds[t].loss
        } else {
            self.final_loss
        };
        self.rounds[0].loss - next
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.f_star.map(|f| self.final_loss - f)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(TRACE_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rounds {
            w.write_record([
                r.t.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                r.min_grad_norm.to_string(),
                opt(r.gap),
                opt(r.theta_max),
                r.eta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<RoundRecord>> {
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != TRACE_HEADER {
            return invalid(format!("{}: unexpected header {header:?}", path.display()));
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let num = |j: usize| -> Result<f64> {
                rec[j].parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!(
                        "{}: row {}, column {}: {e}",
                        path.display(),
                        i + 2,
                        TRACE_HEADER[j]
                    ))
                })
            };
            let opt = |j: usize| -> Result<Option<f64>> {
                if rec[j].is_empty() {
                    Ok(None)
                } else {
                    num(j).map(Some)
                }
            };
            rows.push(RoundRecord {
                t: num(0)? as usize,
                loss: num(1)?,
                grad_norm: num(2)?,
                min_grad_norm: num(3)?,
                gap: opt(4)?,
                theta_max: opt(5)?,
                eta: num(6)?,
            });
        }
        Ok(rows)
    }

    /// Writes `<stem>.csv` and the `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(&csv_path)?;
        fs::write(&json_path, serde_json::to_string_pretty(self)?)?;
        Ok((csv_path, json_path))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let mut trace: RunTrace = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        trace.rounds = Self::read_csv(&dir.join(format!("{stem}.csv")))?;
        for (i, r) in trace.rounds.iter().enumerate() {
            if r.t != i + 1 {
                return invalid(format!("{stem}.csv: round {} out of order at row {}", r.t, i + 2));
            }
        }
        if trace.rounds.is_empty() {
            return invalid(format!("{stem}.csv: no rounds"));
        }
        Ok(trace)
    }

    pub fn stem(&self) -> String {
        format!("{}_seed{}", self.strategy, self.master_seed)
    }
}

fn batch_positions(stream: &RandomStream, size: usize, batch: usize) -> Vec<usize> {
    let mut rng = stream.rng();
    let mut idx = sample(&mut rng, size, batch.min(size)).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `rounds` federated rounds. Noise, batches and redrawn channels come
/// from streams keyed by `master_seed`, round and device only, so different
/// strategies under the same seed see the same randomness.
pub fn run(
    task: &TrainingTask,
    chan: &ChannelRealization,
    plan: &AmplificationPlan,
    strategy: &AggregationStrategy,
    rounds: usize,
    master_seed: u64,
    settings: RunSettings,
) -> Result<RunTrace> {
    if rounds == 0 {
        return invalid("run: T must be at least 1");
    }
    if chan.devices() != task.devices() {
        return invalid(format!(
            "run: channel has {} devices, task has {}",
            chan.devices(),
            task.devices()
        ));
    }
    if chan.dim != task.dim() {
        return invalid(format!(
            "run: channel dimension {} differs from model dimension {}",
            chan.dim,
            task.dim()
        ));
    }
    plan.validate(chan)?;
    if let Some(b) = settings.batch_size {
        if b == 0 {
            return invalid("run: batch size must be positive");
        }
    }
    let root = RandomStream::new(master_seed);
    let k = task.devices();
    let gains: Vec<f64> = plan.b.iter().map(|b| b * strategy.gain_scale(task.dim())).collect();
    let c = task.constants;
    let f_star = task.optimum.as_ref().map(|o| o.loss);
    let mut state = ModelState::new(task.init.clone());
    let mut records = Vec::with_capacity(rounds);
    let mut local_norms = Vec::with_capacity(rounds);
    let mut breaches = BreachLog::default();
    let mut min_grad = f64::INFINITY;

    for t in 1..=rounds {
        let w = &state.w;
        let full = task.local_grads(w);
        let global = task.combine(&full);
        let grad_norm = global.norm();
        min_grad = min_grad.min(grad_norm);
        let theta = max_angle(&angles(&global, &full));
        let norms: Vec<f64> = full.iter().map(Vector::norm).collect();
        let top = norms.iter().cloned().fold(0.0, f64::max);
        breaches.max_local_grad_norm = breaches.max_local_grad_norm.max(top);
        if top > c.grad_bound {
            breaches.grad_bound_rounds += 1;
            breaches.first_grad_bound.get_or_insert(t);
        }
        if let Some(th) = theta {
            breaches.max_theta = breaches.max_theta.max(th);
            if th > c.theta_th {
                breaches.theta_rounds += 1;
                breaches.first_theta.get_or_insert(t);
            }
        }
        let loss = task.loss(w);
        let eta = plan.eta.at(t);
        records.push(RoundRecord {
            t,
            loss,
            grad_norm,
            min_grad_norm: min_grad,
            gap: f_star.map(|f| loss - f),
            theta_max: theta,
            eta,
        });
        local_norms.push(norms);

        let locals = match settings.batch_size {
            None => full,
            Some(bs) => (0..k)
                .into_par_iter()
                .map(|dev| {
                    let s = root.derive(StreamId::new(dev as u32, t as u64, Purpose::Batch));
                    task.local_batch_grad(dev, w, &batch_positions(&s, task.device_size(dev), bs))
                })
                .collect(),
        };
        let y = match strategy {
            AggregationStrategy::IdealNoiseless => task.combine(&locals),
            _ => {
                let signals = locals.iter().map(|g| encode(strategy, g)).collect::<Result<Vec<_>>>()?;
                let noise = root.derive(StreamId::new(0, t as u64, Purpose::Noise));
                let redrawn;
                let ch = match settings.redraw_mean {
                    Some(mean) => {
                        redrawn = draw_channels_at(&root, k, mean, chan.sigma2, chan.dim, t as u64)?;
                        &redrawn
                    }
                    None => chan,
                };
                ota_superpose_with_gains(&signals, &gains, plan.a, ch, &noise)?
            }
        };
        let next = server_update(&state, &y, eta)?;
        if !next.w.is_finite() {
            return Err(Error::Divergence {
                round: t,
                message: format!("non-finite model after round {t} ({} strategy)", strategy.kind()),
            });
        }
        debug_assert!(
            !(matches!(strategy, AggregationStrategy::NormalizedGradient)
                && chan.sigma2 == 0.0
                && settings.redraw_mean.is_none())
                || next.w.dist(&state.w) <= eta * plan.a * plan.effective_gain(chan) * (1.0 + 1e-9) + 1e-300
        );
        state = next;
    }
    let final_loss = task.loss(&state.w);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            round: rounds,
            message: "non-finite final loss".into(),
        });
    }
    Ok(RunTrace {
        task: task.name.clone(),
        strategy: strategy.kind(),
        master_seed,
        fingerprint: String::new(),
        plan: plan.clone(),
        settings,
        f_star,
        init_dist_sq: task.optimum.as_ref().map(|o| task.init.dist(&o.w).powi(2)),
        final_loss,
        breaches,
        local_grad_norms: local_norms,
        rounds: records,
    })
}

/// One configuration of a sweep; run once per seed.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub task: TrainingTask,
    pub chan: ChannelRealization,
    pub plan: AmplificationPlan,
    pub strategy: AggregationStrategy,
    pub rounds: usize,
    pub settings: RunSettings,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub spec: usize,
    pub seed: u64,
    pub result: Result<RunTrace>,
}

/// Runs every spec under every seed in parallel. Results come back in
/// spec-major, seed-minor order whatever the execution order was.
pub fn sweep(specs: &[RunSpec], seeds: &[u64]) -> Vec<SweepOutcome> {
    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(i, seed)| {
            let s = &specs[i];
            SweepOutcome {
                spec: i,
                seed,
                result: run(&s.task, &s.chan, &s.plan, &s.strategy, s.rounds, seed, s.settings),
            }
        })
        .collect()
}

/// Seed-averaged curves aligned on `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub t: usize,
    pub loss: f64,
    pub loss_se: f64,
    pub grad_norm: f64,
    pub min_grad_norm: f64,
    pub gap: Option<f64>,
    pub gap_se: Option<f64>,
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn mean_curves(traces: &[RunTrace]) -> Result<Vec<MeanRow>> {
    let Some(first) = traces.first() else {
        return invalid("mean_curves: no traces");
    };
    let len = first.rounds.len();
    if traces.iter().any(|t| t.rounds.len() != len) {
        return invalid("mean_curves: traces have different lengths");
    }
    Ok((0..len)
        .map(|i| {
            let col = |f: &dyn Fn(&RoundRecord) -> f64| traces.iter().map(|t| f(&t.rounds[i])).collect::<Vec<_>>();
            let (loss, loss_se) = mean_se(&col(&|r| r.loss));
            let gaps: Option<Vec<f64>> = traces.iter().map(|t| t.rounds[i].gap).collect();
            let gap = gaps.map(|g| mean_se(&g));
            MeanRow {
                t: i + 1,
                loss,
                loss_se,
                grad_norm: mean_se(&col(&|r| r.grad_norm)).0,
                min_grad_norm: mean_se(&col(&|r| r.min_grad_norm)).0,
                gap: gap.map(|g| g.0),
                gap_se: gap.map(|g| g.1),
            }
        })
        .collect())
}
