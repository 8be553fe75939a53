//! Turns a configuration into a concrete instance (task, channel, plan) and
//! runs it.

use crate::aggregation::AggregationStrategy;
use crate::bounds::BoundInputs;
use crate::channel::{draw_channels, ChannelRealization};
use crate::config::{Case, ChannelMode, ExperimentConfig, TaskKind, DEFAULT_EPS};
use crate::error::Result;
use crate::numerics::{Purpose, RandomStream};
use crate::optimizer::{plan_case1, plan_case2, AmplificationPlan, Case2Target};
use crate::tasks::{
    classifier_task_from_data, load_idx_dataset, make_nonconvex_task_with, partition_data, ridge::ridge_task_with_skew,
    ridge_dataset, TrainingTask,
};
use crate::trainer::{sweep, RunSettings, RunSpec, RunTrace, SweepOutcome};

/// Task, channel and power limits shared by every run of a configuration.
#[derive(Clone, Debug)]
pub struct Instance {
    pub task: TrainingTask,
    pub chan: ChannelRealization,
    pub b_max: Vec<f64>,
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    cfg.validate()?;
    let root = RandomStream::new(cfg.master_seed);
    let task_stream = root.child(Purpose::Data);
    let mut task = match cfg.task {
        TaskKind::Ridge => {
            let data = ridge_dataset(&task_stream, cfg.devices * cfg.per_device, cfg.dim, cfg.noise_std)?;
            ridge_task_with_skew(&task_stream, data, cfg.devices, cfg.ridge_coeff, cfg.skew)?
        }
        TaskKind::Nonconvex => make_nonconvex_task_with(
            &task_stream,
            cfg.devices,
            cfg.per_device,
            cfg.dim_in,
            cfg.hidden,
            cfg.classes,
            cfg.skew,
            cfg.smoothness_pairs,
        )?,
        TaskKind::Idx => {
            let (images, labels) = (cfg.idx_images.as_ref(), cfg.idx_labels.as_ref());
            let data = load_idx_dataset(images.expect("validated"), labels.expect("validated"))?;
            let data = data.truncated((cfg.devices * cfg.per_device).min(data.n));
            let partition = partition_data(&task_stream.child(Purpose::Partition), &data, cfg.devices, cfg.skew)?;
            classifier_task_from_data(
                &task_stream,
                data,
                partition,
                &[cfg.hidden, cfg.hidden],
                cfg.smoothness_pairs,
            )?
        }
    };
    task.constants.theta_th = cfg.theta_th;
    let chan = draw_channels(
        &root.child(Purpose::Channel),
        cfg.devices,
        cfg.channel_mean,
        cfg.sigma2,
        task.dim(),
    )?;
    Ok(Instance {
        b_max: cfg.b_max.expand(cfg.devices)?,
        task,
        chan,
    })
}

/// Expected loss drop used for the Case I gain: the configured value, or
/// `F(w^1)` (the losses are nonnegative).
pub fn delta_f_estimate(cfg: &ExperimentConfig, task: &TrainingTask) -> f64 {
    cfg.delta_f.unwrap_or_else(|| task.loss(&task.init))
}

pub fn case2_target(cfg: &ExperimentConfig) -> Case2Target {
    match (cfg.target_s, cfg.target_eps) {
        (Some(s), _) => Case2Target::S(s),
        (None, Some(e)) => Case2Target::Eps(e),
        (None, None) => Case2Target::Eps(DEFAULT_EPS),
    }
}

pub fn build_plan(cfg: &ExperimentConfig, inst: &Instance) -> Result<AmplificationPlan> {
    match cfg.case {
        Case::Smooth => plan_case1(
            &inst.chan,
            &inst.b_max,
            &inst.task.constants,
            cfg.p,
            delta_f_estimate(cfg, &inst.task),
            cfg.tol_r,
        ),
        Case::StronglyConvex => plan_case2(
            &inst.chan,
            &inst.b_max,
            &inst.task.constants,
            cfg.eta,
            case2_target(cfg),
            cfg.tol_r,
        ),
    }
}

pub fn settings(cfg: &ExperimentConfig) -> RunSettings {
    RunSettings {
        batch_size: cfg.batch_size,
        redraw_mean: match cfg.channel_mode {
            ChannelMode::Static => None,
            ChannelMode::Redraw => Some(cfg.channel_mean),
        },
    }
}

/// A fully built configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub instance: Instance,
    pub plan: AmplificationPlan,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let instance = build_instance(config)?;
        let plan = build_plan(config, &instance)?;
        Ok(Experiment {
            fingerprint: config.fingerprint(),
            config: config.clone(),
            instance,
            plan,
        })
    }

    pub fn specs_with_plan(&self, plan: &AmplificationPlan) -> Result<Vec<RunSpec>> {
        self.config
            .strategies
            .iter()
            .map(|&kind| {
                Ok(RunSpec {
                    task: self.instance.task.clone(),
                    chan: self.instance.chan.clone(),
                    plan: plan.clone(),
                    strategy: AggregationStrategy::from_kind(kind, self.instance.task.constants.grad_bound)?,
                    rounds: self.config.rounds,
                    settings: settings(&self.config),
                })
            })
            .collect()
    }

    /// All strategies under all seeds, each trace stamped with the config
    /// fingerprint. Outcomes are in strategy-major, seed-minor order.
    pub fn run_all(&self) -> Result<Vec<SweepOutcome>> {
        self.run_with_plan(&self.plan)
    }

    pub fn run_with_plan(&self, plan: &AmplificationPlan) -> Result<Vec<SweepOutcome>> {
        let mut out = sweep(&self.specs_with_plan(plan)?, &self.config.run_seeds());
        for o in &mut out {
            if let Ok(t) = &mut o.result {
                t.fingerprint = self.fingerprint.clone();
            }
        }
        Ok(out)
    }

    pub fn bound_inputs(&self) -> BoundInputs {
        BoundInputs::new(&self.plan, &self.instance.chan, &self.instance.task.constants)
    }
}

/// Splits successful traces by strategy, keeping seed order.
pub fn group_traces(outcomes: Vec<SweepOutcome>, groups: usize) -> (Vec<Vec<RunTrace>>, Vec<String>) {
    let mut traces = vec![Vec::new(); groups];
    let mut errors = Vec::new();
    for o in outcomes {
        match o.result {
            Ok(t) => traces[o.spec].push(t),
            Err(e) => errors.push(format!("spec {} seed {}: {e}", o.spec, o.seed)),
        }
    }
    (traces, errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_and_are_deterministic() {
        let mut cfg = ExperimentConfig::default();
        cfg.rounds = 5;
        cfg.seeds = 2;
        let a = Experiment::build(&cfg).unwrap();
        let b = Experiment::build(&cfg).unwrap();
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.instance.chan, b.instance.chan);
        assert!(a.plan.provenance.z > 0.0);
        assert_eq!(a.instance.task.devices(), 20);
        let (tr, err) = group_traces(a.run_all().unwrap(), 1);
        assert!(err.is_empty());
        assert_eq!(tr[0].len(), 2);
        assert_eq!(tr[0][1].fingerprint, cfg.fingerprint());
    }

    #[test]
    fn case2_defaults_to_eps_target() {
        let mut cfg = ExperimentConfig::default();
        cfg.case = Case::StronglyConvex;
        let e = Experiment::build(&cfg).unwrap();
        assert!((e.plan.provenance.eps.unwrap() - DEFAULT_EPS).abs() < 1e-12);
    }
}
