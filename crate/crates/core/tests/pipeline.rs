use otafl::aggregation::StrategyKind;
use otafl::bounds::{verify_lemma2, BoundInputs};
use otafl::config::{Case, ChannelMode, ExperimentConfig};
use otafl::experiment::{group_traces, Experiment};
use otafl::trainer::{mean_curves, sweep, RunTrace};

fn small(case: Case) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.case = case;
    cfg.rounds = 120;
    cfg.seeds = 4;
    cfg
}

#[test]
fn trace_files_round_trip_exactly() {
    let mut cfg = small(Case::StronglyConvex);
    cfg.strategies = vec![StrategyKind::Normalized, StrategyKind::Standardized];
    let exp = Experiment::build(&cfg).unwrap();
    let (traces, errors) = group_traces(exp.run_all().unwrap(), 2);
    assert!(errors.is_empty());
    let dir = tempfile::tempdir().unwrap();
    for t in traces.iter().flatten() {
        t.save(dir.path(), &t.stem()).unwrap();
        let back = RunTrace::load(dir.path(), &t.stem()).unwrap();
        assert_eq!(&back, t);
    }
}

#[test]
fn sweep_results_do_not_depend_on_seed_order() {
    let cfg = small(Case::Smooth);
    let exp = Experiment::build(&cfg).unwrap();
    let specs = exp.specs_with_plan(&exp.plan).unwrap();
    let fwd = sweep(&specs, &[0, 1, 2, 3]);
    let rev = sweep(&specs, &[3, 2, 1, 0]);
    for o in &fwd {
        let twin = rev.iter().find(|r| r.seed == o.seed).unwrap();
        assert_eq!(o.result.as_ref().unwrap(), twin.result.as_ref().unwrap());
    }
}

#[test]
fn iid_ridge_trajectory_stays_inside_bias_angle() {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = 3;
    let exp = Experiment::build(&cfg).unwrap();
    let (traces, _) = group_traces(exp.run_all().unwrap(), 1);
    for t in &traces[0] {
        assert_eq!(
            t.breaches.theta_rounds, 0,
            "seed {}: max {}",
            t.master_seed, t.breaches.max_theta
        );
        assert!(t.breaches.max_theta < std::f64::consts::FRAC_PI_3);
    }
}

#[test]
fn redraw_and_batches_stay_deterministic() {
    let mut cfg = small(Case::Smooth);
    cfg.channel_mode = ChannelMode::Redraw;
    cfg.batch_size = Some(8);
    let a = Experiment::build(&cfg).unwrap().run_all().unwrap();
    let b = Experiment::build(&cfg).unwrap().run_all().unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.result.as_ref().unwrap(), y.result.as_ref().unwrap());
    }
    let static_run = Experiment::build(&small(Case::Smooth)).unwrap().run_all().unwrap();
    assert_ne!(
        a[0].result.as_ref().unwrap().final_loss,
        static_run[0].result.as_ref().unwrap().final_loss
    );
}

#[test]
fn strongly_convex_gap_falls_below_initial_and_bound_holds() {
    let mut cfg = small(Case::StronglyConvex);
    cfg.rounds = 600;
    let exp = Experiment::build(&cfg).unwrap();
    let (traces, _) = group_traces(exp.run_all().unwrap(), 1);
    let curve = mean_curves(&traces[0]).unwrap();
    assert!(curve.last().unwrap().gap.unwrap() * 10.0 <= curve[0].gap.unwrap());
    let report = verify_lemma2(&traces[0], &exp.bound_inputs()).unwrap();
    assert_eq!(report.violations, 0);
    assert!(report.steady_gap < exp.plan.provenance.eps.unwrap());
}

#[test]
fn bound_inputs_follow_the_plan() {
    let exp = Experiment::build(&small(Case::StronglyConvex)).unwrap();
    let inputs = BoundInputs::new(&exp.plan, &exp.instance.chan, &exp.instance.task.constants);
    let q = inputs.q_max().unwrap();
    assert!((q - exp.plan.provenance.q_max.unwrap()).abs() < 1e-9);
    let floor = inputs.lemma2_floor().unwrap();
    assert!(floor > 0.0 && floor.is_finite());
}

#[test]
fn config_file_round_trip_keeps_fingerprint() {
    let mut cfg = small(Case::StronglyConvex);
    cfg.target_s = Some(0.999);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.fingerprint(), cfg.fingerprint());
    let exp = Experiment::build(&back).unwrap();
    assert!((exp.plan.provenance.s.unwrap() - 0.999).abs() < 1e-12);
}
