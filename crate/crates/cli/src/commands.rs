use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use otafl::aggregation::StrategyKind;
use otafl::bounds::{verify_lemma1, verify_lemma2, write_rows_csv};
use otafl::config::{Case, ExperimentConfig};
use otafl::experiment::{build_instance, build_plan, group_traces, Experiment};
use otafl::optimizer::{oracle_z, solve_z, AmplificationPlan, ORACLE_MAX_DEVICES};
use otafl::trainer::{mean_curves, mean_se, RunTrace};

use crate::{Common, EXIT_VIOLATION, OUT_DIR_ENV};

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    Ok(match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(o) = &cfg.output_dir {
        return o.clone();
    }
    let root = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("otafl-out"));
    root.join(&cfg.fingerprint()[..12])
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

fn print_plan(plan: &AmplificationPlan) {
    let p = &plan.provenance;
    println!("Z = {:.9e}", p.z);
    println!("r* = {:.9e}", p.r_star);
    if let Some(s) = p.s_case1 {
        println!("S = {s:.9e}");
    }
    if let (Some(s), Some(q), Some(e)) = (p.s, p.q_max, p.eps) {
        println!("s = {s:.9}  q_max = {q:.9}  eps = {e:.6e}");
    }
    println!("a = {:.9e}", plan.a);
}

pub fn optimize(common: &Common, oracle_grid: Option<usize>) -> Result<u8> {
    let cfg = load_config(common)?;
    let inst = build_instance(&cfg)?;
    let plan = build_plan(&cfg, &inst)?;
    print_plan(&plan);
    let out = out_dir(common, &cfg);
    fs::create_dir_all(&out)?;
    let path = out.join("artifacts.json");
    write_json(
        &path,
        &json!({
            "fingerprint": cfg.fingerprint(),
            "task": inst.task.name,
            "constants": inst.task.constants,
            "channel": inst.chan,
            "plan": plan,
        }),
    )?;
    println!("wrote {}", path.display());
    if let Some(grid) = oracle_grid {
        if inst.chan.devices() > ORACLE_MAX_DEVICES {
            bail!(
                "--oracle needs at most {ORACLE_MAX_DEVICES} devices, config has {}",
                inst.chan.devices()
            );
        }
        let z = oracle_z(&inst.chan, &inst.b_max, grid)?;
        let rel = (plan.provenance.z - z) / z;
        println!("oracle Z = {z:.9e} (grid {grid})  relative difference {rel:.3e}");
    }
    Ok(0)
}

pub fn oracle(common: &Common, grid: usize) -> Result<u8> {
    let cfg = load_config(common)?;
    let inst = build_instance(&cfg)?;
    if inst.chan.devices() > ORACLE_MAX_DEVICES {
        bail!(
            "oracle needs at most {ORACLE_MAX_DEVICES} devices, config has {}",
            inst.chan.devices()
        );
    }
    let solved = solve_z(&inst.chan, &inst.b_max, cfg.tol_r)?;
    let z = oracle_z(&inst.chan, &inst.b_max, grid)?;
    println!("solver Z = {:.9e}", solved.z);
    println!("oracle Z = {z:.9e} (grid {grid})");
    println!("relative difference {:.3e}", (solved.z - z) / z);
    Ok(0)
}

fn write_means(path: &Path, kinds: &[StrategyKind], traces: &[Vec<RunTrace>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "strategy",
        "t",
        "loss",
        "loss_se",
        "grad_norm",
        "min_grad_norm",
        "gap",
        "gap_se",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (kind, group) in kinds.iter().zip(traces) {
        for r in mean_curves(group)? {
            w.write_record([
                kind.to_string(),
                r.t.to_string(),
                r.loss.to_string(),
                r.loss_se.to_string(),
                r.grad_norm.to_string(),
                r.min_grad_norm.to_string(),
                opt(r.gap),
                opt(r.gap_se),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs a configuration and writes everything under `out`.
fn train_into(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let exp = Experiment::build(cfg)?;
    print_plan(&exp.plan);
    eprintln!(
        "training {} strategies x {} seeds x {} rounds",
        cfg.strategies.len(),
        cfg.seeds,
        cfg.rounds
    );
    let (traces, errors) = group_traces(exp.run_all()?, cfg.strategies.len());
    if !errors.is_empty() {
        bail!("{} runs failed: {}", errors.len(), errors.join("; "));
    }
    let trace_dir = out.join("traces");
    fs::create_dir_all(&trace_dir)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    write_json(
        &out.join("artifacts.json"),
        &json!({
            "fingerprint": exp.fingerprint,
            "task": exp.instance.task.name,
            "constants": exp.instance.task.constants,
            "channel": exp.instance.chan,
            "plan": exp.plan,
        }),
    )?;
    for t in traces.iter().flatten() {
        t.save(&trace_dir, &t.stem())?;
    }
    write_means(&out.join("means.csv"), &cfg.strategies, &traces)?;
    for (kind, group) in cfg.strategies.iter().zip(&traces) {
        let finals: Vec<f64> = group.iter().map(|t| t.final_loss).collect();
        let (m, se) = mean_se(&finals);
        print!("{kind}: final loss {m:.6e} +- {se:.1e}");
        let gaps: Option<Vec<f64>> = group.iter().map(|t| t.final_gap()).collect();
        if let Some(g) = gaps {
            print!("  final gap {:.6e}", mean_se(&g).0);
        }
        println!();
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train(common: &Common, strategies: &[String]) -> Result<u8> {
    let mut cfg = load_config(common)?;
    if !strategies.is_empty() {
        cfg.strategies = strategies.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
        cfg.validate()?;
    }
    train_into(&cfg, &out_dir(common, &cfg))?;
    Ok(0)
}

/// Replaces one key of the config, parsing the value as TOML and falling
/// back to a bare string.
fn with_param(cfg: &ExperimentConfig, key: &str, value: &str) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(&cfg.to_toml_string()?)?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    table.insert(key.to_string(), parsed);
    Ok(ExperimentConfig::from_toml_str(&toml::to_string(&table)?)?)
}

pub fn sweep(common: &Common, param: &str, values: &[String]) -> Result<u8> {
    let base = load_config(common)?;
    let root = out_dir(common, &base);
    for v in values {
        let mut cfg = with_param(&base, param, v)?;
        cfg.output_dir = None;
        println!("== {param} = {v}");
        train_into(&cfg, &root.join(format!("{param}={v}")))?;
    }
    Ok(0)
}

pub fn bounds(common: &Common, traces: Option<PathBuf>) -> Result<u8> {
    let cfg = load_config(common)?;
    let dir = traces.unwrap_or_else(|| out_dir(common, &cfg));
    if !cfg.strategies.contains(&StrategyKind::Normalized) {
        bail!("bounds: the config has no normalized strategy");
    }
    let fingerprint = cfg.fingerprint();
    let trace_dir = dir.join("traces");
    let mut runs = Vec::new();
    for seed in cfg.run_seeds() {
        let stem = format!("{}_seed{seed}", StrategyKind::Normalized);
        let t = RunTrace::load(&trace_dir, &stem)
            .with_context(|| format!("loading {}", trace_dir.join(&stem).display()))?;
        if t.fingerprint != fingerprint {
            return Err(otafl::Error::FingerprintMismatch {
                expected: fingerprint,
                found: t.fingerprint,
                path: trace_dir.join(format!("{stem}.json")).display().to_string(),
            }
            .into());
        }
        runs.push(t);
    }
    let exp = Experiment::build(&cfg)?;
    let inputs = exp.bound_inputs();
    let checked = match cfg.case {
        Case::Smooth => verify_lemma1(&runs, &inputs).map(|r| {
            println!(
                "smooth-case bound: {} rows, {} violations, min bound/measured {:.3}, theta used {:.4}",
                r.rows.len(),
                r.violations,
                r.min_ratio,
                r.theta_used
            );
            (r.violations, r.rows.clone(), serde_json::to_value(&r))
        }),
        Case::StronglyConvex => verify_lemma2(&runs, &inputs).map(|r| {
            println!(
                "strongly convex bound: {} rows, {} violations, q_max {:.6}, floor {:.4e}, steady gap {:.4e} +- {:.1e}",
                r.rows.len(),
                r.violations,
                r.q_max,
                r.floor_bound,
                r.steady_gap,
                r.steady_gap_se
            );
            (r.violations, r.rows.clone(), serde_json::to_value(&r))
        }),
    };
    let (violations, rows, report) = match checked {
        Ok(v) => v,
        Err(e) => {
            eprintln!("bound hypothesis violated: {e}");
            return Ok(EXIT_VIOLATION);
        }
    };
    write_json(&dir.join("bounds_report.json"), &report?)?;
    write_rows_csv(&rows, &dir.join("bounds.csv"))?;
    println!("wrote {}", dir.join("bounds_report.json").display());
    if violations > 0 {
        eprintln!("bound violated at {violations} horizons");
        return Ok(EXIT_VIOLATION);
    }
    Ok(0)
}
