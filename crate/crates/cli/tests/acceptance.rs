//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use otafl::aggregation::StrategyKind;
use otafl::bounds::{lemma1_rhs, verify_lemma1, verify_lemma2};
use otafl::channel::{draw_channels, ChannelRealization};
use otafl::config::{Case, ExperimentConfig, TaskKind};
use otafl::experiment::{group_traces, Experiment};
use otafl::numerics::{rayleigh_sample, Purpose, RandomStream, StreamId};
use otafl::optimizer::{constraint_gap, oracle_z, plan_unoptimized, solve_z, DEFAULT_TOL_R};
use otafl::trainer::RunTrace;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// One-sided sign test: probability of at least `wins` successes out of `n`
/// fair coin flips.
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut total = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            total += c;
        }
    }
    total / 2f64.powi(n as i32)
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn solver_vs_oracle() -> Outcome {
    let t0 = Instant::now();
    let root = RandomStream::new(101);
    let noise = [0.0, 0.1, 1.0];
    let b_max = 5f64.sqrt();
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let k = 1 + (i % 3) as usize;
        let n_sigma2 = noise[(i / 3 % 3) as usize];
        let chan =
            draw_channels(&root.derive(StreamId::new(0, i, Purpose::Channel)), k, 1.0, n_sigma2, 1).expect("channel");
        let bm = vec![b_max; k];
        let z = solve_z(&chan, &bm, DEFAULT_TOL_R).expect("solve").z;
        let o = oracle_z(&chan, &bm, 200).expect("oracle");
        worst = worst.max((z - o).abs() / o);
    }
    let el = t0.elapsed();
    outcome(
        worst <= 1e-3 && within(el, 60),
        format!("50 instances, max rel diff {worst:.2e}, {:.1}s", el.as_secs_f64()),
    )
}

fn k1_closed_form() -> Outcome {
    let t0 = Instant::now();
    let mut rng = RandomStream::new(202).rng();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let h = rayleigh_sample(&mut rng, 1.0);
        let sigma2 = rng.random_range(0.0..2.0);
        let bm = rng.random_range(0.2..4.0);
        let chan = ChannelRealization::new(vec![h], sigma2, 1).expect("channel");
        let z = solve_z(&chan, &[bm], DEFAULT_TOL_R).expect("solve").z;
        let expect = 4.0 + sigma2 / (h * h * bm * bm);
        worst = worst.max((z / expect - 1.0).abs());
    }
    let el = t0.elapsed();
    outcome(
        worst <= 1e-6 && within(el, 1),
        format!("20 instances, max rel err {worst:.2e}, {:.3}s", el.as_secs_f64()),
    )
}

fn convexity_chords() -> Outcome {
    let mut rng = RandomStream::new(303).rng();
    let mut violations = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=20);
        let h: Vec<f64> = (0..k).map(|_| rayleigh_sample(&mut rng, 1.0)).collect();
        let chan = ChannelRealization::new(h, rng.random_range(0.0..2.0), 1).expect("channel");
        let r = rng.random_range(0.1..10.0);
        let b1: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5f64.sqrt())).collect();
        let b2: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5f64.sqrt())).collect();
        let w: f64 = rng.random_range(0.0..=1.0);
        let mix: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        let lhs = constraint_gap(&chan, r, &mix);
        let rhs = w * constraint_gap(&chan, r, &b1) + (1.0 - w) * constraint_gap(&chan, r, &b2);
        let scale = 1.0 + lhs.abs().max(rhs.abs());
        if lhs > rhs + 1e-12 * scale {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("1000 chords, {violations} violations"))
}

fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.strategies = vec![
        StrategyKind::Normalized,
        StrategyKind::RawConservative,
        StrategyKind::Standardized,
    ];
    cfg
}

/// Case I runs of all three strategies on both desk-scale tasks.
struct SmoothRuns {
    label: &'static str,
    exp: Experiment,
    traces: Vec<Vec<RunTrace>>,
}

fn smooth_runs() -> (Vec<SmoothRuns>, Duration) {
    let t0 = Instant::now();
    let mut out = Vec::new();
    for (label, task) in [("ridge", TaskKind::Ridge), ("nonconvex", TaskKind::Nonconvex)] {
        let mut cfg = base_config();
        cfg.task = task;
        let exp = Experiment::build(&cfg).expect("build");
        let (traces, errors) = group_traces(exp.run_all().expect("run"), cfg.strategies.len());
        assert!(errors.is_empty(), "{errors:?}");
        out.push(SmoothRuns { label, exp, traces });
    }
    (out, t0.elapsed())
}

fn lemma1_holds(runs: &[SmoothRuns], elapsed: Duration) -> Outcome {
    let mut pass = within(elapsed, 600);
    let mut parts = Vec::new();
    for r in runs {
        match verify_lemma1(&r.traces[0], &r.exp.bound_inputs()) {
            Ok(rep) => {
                pass &= rep.violations == 0;
                parts.push(format!(
                    "{}: {} violations over T=1..{}, min bound/measured {:.2}, theta {:.3}",
                    r.label,
                    rep.violations,
                    rep.rows.len(),
                    rep.min_ratio,
                    rep.theta_used
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{}: {e}", r.label));
            }
        }
    }
    parts.push(format!("{:.0}s", elapsed.as_secs_f64()));
    outcome(pass, parts.join("; "))
}

fn lemma1_rate_shape(runs: &[SmoothRuns]) -> Outcome {
    let r = &runs[0];
    let inputs = r.exp.bound_inputs().with_delta_f(0.5);
    let p = r.exp.config.p;
    let at = |t: usize| lemma1_rhs(&inputs, t).expect("bound") * (t as f64).powf(1.0 - p);
    let base = at(1);
    let worst = (1..=5000).map(|t| (at(t) / base - 1.0).abs()).fold(0.0, f64::max);
    outcome(worst <= 1e-9, format!("T=1..5000, max rel deviation {worst:.2e}"))
}

/// Case II ridge runs for each target, long enough to reach the floor.
fn strongly_convex_runs(targets: &[f64]) -> (Vec<(Experiment, Vec<RunTrace>)>, Duration) {
    let t0 = Instant::now();
    let out = targets
        .iter()
        .map(|&eps| {
            let mut cfg = ExperimentConfig::default();
            cfg.case = Case::StronglyConvex;
            cfg.rounds = 3000;
            cfg.target_eps = Some(eps);
            let exp = Experiment::build(&cfg).expect("build");
            let (mut tr, errors) = group_traces(exp.run_all().expect("run"), 1);
            assert!(errors.is_empty(), "{errors:?}");
            (exp, tr.remove(0))
        })
        .collect();
    (out, t0.elapsed())
}

fn lemma2_holds(exp: &Experiment, traces: &[RunTrace], elapsed: Duration) -> Outcome {
    let eps = exp.plan.provenance.eps.expect("eps target");
    match verify_lemma2(traces, &exp.bound_inputs()) {
        Ok(rep) => {
            let steady_ok = rep.steady_gap <= eps + 2.0 * rep.steady_gap_se;
            outcome(
                rep.violations == 0 && steady_ok && within(elapsed, 600),
                format!(
                    "eps {eps:.3}: {} violations over T=1..{}, steady gap {:.3e} +- {:.1e}, {:.0}s",
                    rep.violations,
                    rep.rows.len(),
                    rep.steady_gap,
                    rep.steady_gap_se,
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn tail_gap(t: &RunTrace) -> f64 {
    let n = t.rounds.len();
    let tail = (n / 10).max(1);
    t.rounds[n - tail..].iter().map(|r| r.gap.expect("gap")).sum::<f64>() / tail as f64
}

fn tradeoff(runs: &[(Experiment, Vec<RunTrace>)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let qs: Vec<f64> = runs.iter().map(|(e, _)| e.plan.provenance.q_max.expect("q")).collect();
    parts.push(format!("q_max {:.5}/{:.5}/{:.5}", qs[0], qs[1], qs[2]));
    for w in 0..runs.len() - 1 {
        // runs[w] has the larger q_max.
        let (slow, fast) = (&runs[w].1, &runs[w + 1].1);
        let n = slow.len();
        let early = (0..n)
            .filter(|&s| slow[s].rounds[99].gap > fast[s].rounds[99].gap)
            .count();
        let floor = (0..n).filter(|&s| tail_gap(&slow[s]) < tail_gap(&fast[s])).count();
        let need = (0.95 * n as f64).ceil() as usize;
        pass &= qs[w] > qs[w + 1] && early >= need && floor >= need;
        parts.push(format!(
            "pair {}: slower at T=100 {early}/{n}, lower floor {floor}/{n}",
            w + 1
        ));
    }
    outcome(pass, parts.join("; "))
}

fn benchmark_ordering(runs: &[SmoothRuns]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let norm = &r.traces[0];
        let n = norm.len();
        let mean = |g: &[RunTrace]| g.iter().map(|t| t.final_loss).sum::<f64>() / g.len() as f64;
        for (j, kind) in r.exp.config.strategies.iter().enumerate().skip(1) {
            let other = &r.traces[j];
            let wins = (0..n).filter(|&s| norm[s].final_loss < other[s].final_loss).count();
            let p = sign_test_p(wins, n);
            pass &= mean(norm) <= mean(other) && p < 0.05;
            parts.push(format!("{} vs {kind}: {wins}/{n} (p={p:.1e})", r.label));
        }
    }
    outcome(pass, parts.join("; "))
}

fn optimization_benefit() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.sigma2 = 1e-12;
    cfg.skew = 0.8;
    let exp = Experiment::build(&cfg).expect("build");
    let at_box = exp
        .plan
        .b
        .iter()
        .zip(&exp.plan.b_max)
        .filter(|(b, m)| (*b - *m).abs() < 1e-12)
        .count();
    let (opt, _) = group_traces(exp.run_all().expect("run"), 1);
    let (base, _) = group_traces(exp.run_with_plan(&plan_unoptimized(&exp.plan)).expect("run"), 1);
    let (opt, base) = (&opt[0], &base[0]);
    let n = opt.len();
    let mean = |g: &[RunTrace]| g.iter().map(|t| t.final_loss).sum::<f64>() / n as f64;
    let wins = (0..n).filter(|&s| opt[s].final_loss < base[s].final_loss).count();
    let p = sign_test_p(wins, n);
    outcome(
        mean(opt) < mean(base) && p < 0.05,
        format!(
            "sigma2 1e-12, skew 0.8, {at_box}/{} devices at b_max: mean final {:.6e} vs {:.6e}, {wins}/{n} (p={p:.1e})",
            exp.plan.b.len(),
            mean(opt),
            mean(base)
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "rounds = 60\nseeds = 4\nchannel_mode = \"redraw\"\nbatch_size = 10\nstrategies = [\"normalized\", \"raw_conservative\", \"standardized\", \"ideal\"]\n",
    )
    .unwrap();
    let mut dirs = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("run{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_otafl"))
            .args(["train", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, String::from_utf8_lossy(&status.stderr).to_string());
        }
        let bounds = Command::new(env!("CARGO_BIN_EXE_otafl"))
            .args([
                "bounds",
                out.join("config.toml").to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        if !matches!(bounds.status.code(), Some(0) | Some(3)) {
            return outcome(false, String::from_utf8_lossy(&bounds.stderr).to_string());
        }
        dirs.push(csv_files(&out));
    }
    let same = dirs[0] == dirs[1];
    outcome(
        same && dirs[0].len() > 2,
        format!("{} CSV files compared across two train+bounds runs", dirs[0].len()),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "solver matches grid oracle", solver_vs_oracle()));
    results.push((2, "single-device closed form", k1_closed_form()));
    results.push((3, "constraint convexity", convexity_chords()));
    let (smooth, smooth_time) = smooth_runs();
    results.push((4, "smooth-case bound holds", lemma1_holds(&smooth, smooth_time)));
    results.push((5, "smooth-case bound rate shape", lemma1_rate_shape(&smooth)));
    let (convex, convex_time) = strongly_convex_runs(&[0.05, 0.1, 0.2]);
    results.push((
        6,
        "strongly convex bound holds",
        lemma2_holds(&convex[1].0, &convex[1].1, convex_time),
    ));
    results.push((7, "bias/rate tradeoff ordering", tradeoff(&convex)));
    results.push((8, "normalized beats benchmarks", benchmark_ordering(&smooth)));
    results.push((9, "optimized plan beats unoptimized", optimization_benefit()));
    results.push((10, "byte-identical reruns", determinism()));
    let mut failed = 0;
    for (i, name, o) in &results {
        println!(
            "{} criterion {i:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
