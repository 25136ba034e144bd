use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use etir::codegen::{check_schedule, emit_source, lower};
use etir::cost::{estimate_cost, traffic_report};
use etir::engine::{optimize, EngineConfig, ScheduleRecord, ScheduleResult};
use etir::hardware::{bundled, load_hardware_spec, HardwareSpec, BUNDLED_PROFILES};
use etir::ir::{parse_op_spec, parse_op_suite, parse_op_value, EtirState, OpSpec};
use etir::markov::{
    check_aperiodic, entropy, enumerate_space, level_reports, stationary_distribution,
    stationary_residual, value_iteration, MarkovError, SpaceCaps,
};
use etir::tree::{construct_tree, TreeConfig};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{
    config_error, Cli, Command, CostCommand, EngineArg, Failure, Precision, EXIT_PARTIAL,
    EXIT_RESOURCE,
};

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Schedule => schedule(cli),
        Command::Compare { suite, seeds } => compare(cli, suite, seeds),
        Command::Analyze {
            max_states,
            vthreads,
            no_inv_tile,
            max_tile_factor,
        } => analyze(
            cli,
            *max_states,
            vthreads.as_deref(),
            !no_inv_tile,
            *max_tile_factor,
        ),
        Command::Verify { results, mode } => verify(results, *mode),
        Command::Emit { results, index } => emit(cli, results.as_deref(), *index),
        Command::Cost {
            command: CostCommand::Explain { results, index },
        } => explain(cli, results.as_deref(), *index),
    }
}

fn load_hw(arg: &str) -> Result<HardwareSpec> {
    if BUNDLED_PROFILES.contains(&arg) {
        return bundled(arg).map_err(|e| config_error(format!("--hw: {e}")));
    }
    let text = fs::read_to_string(arg)
        .map_err(|e| config_error(format!("--hw: cannot read `{arg}`: {e}")))?;
    load_hardware_spec(&text).map_err(|e| config_error(format!("--hw `{arg}`: {e}")))
}

fn load_op(cli: &Cli) -> Result<Arc<OpSpec>> {
    let path = cli
        .op
        .as_ref()
        .ok_or_else(|| config_error("--op is required"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| config_error(format!("--op: cannot read `{}`: {e}", path.display())))?;
    let op = parse_op_spec(&text)
        .map_err(|e| config_error(format!("--op `{}`: {e}", path.display())))?;
    Ok(Arc::new(op))
}

fn engine_config(cli: &Cli, hw: &HardwareSpec) -> Result<EngineConfig> {
    let mut cfg = EngineConfig {
        seed: cli.seed,
        ..EngineConfig::default()
    };
    cfg.vthread_options
        .retain(|v| hw.vthread_options.contains(v));
    if let Some(t0) = cli.t0 {
        cfg.t0 = t0;
    }
    if let Some(th) = cli.threshold {
        cfg.threshold = th;
    }
    if let Some(r) = cli.restarts {
        cfg.restarts = r;
    }
    if let Some(k) = cli.top_k {
        cfg.top_k = k;
    }
    cfg.validate()
        .map_err(|e| config_error(format!("--t0/--threshold/--restarts/--top-k: {e}")))?;
    Ok(cfg)
}

fn tree_config(cli: &Cli) -> Result<TreeConfig> {
    let cfg = TreeConfig {
        beam_width: cli.beam_width.unwrap_or(TreeConfig::default().beam_width),
    };
    if cfg.beam_width == 0 {
        return Err(config_error("--beam-width must be at least 1"));
    }
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultsFile {
    op: serde_json::Value,
    hw: HardwareSpec,
    graph_config: Option<EngineConfig>,
    tree_config: Option<TreeConfig>,
    results: Vec<ScheduleRecord>,
}

fn schedule(cli: &Cli) -> Result<u8> {
    let hw = load_hw(&cli.hw)?;
    let op = load_op(cli)?;
    let graph_cfg = engine_config(cli, &hw)?;
    let tree_cfg = tree_config(cli)?;
    let mut records = Vec::new();
    let mut summary = Vec::new();
    if matches!(cli.engine, EngineArg::Graph | EngineArg::Both) {
        let start = Instant::now();
        let res = optimize(op.clone(), &hw, &graph_cfg)?;
        summary.push(("graph", best_of(&res), start.elapsed().as_secs_f64() * 1e3));
        records.extend(res.iter().map(ScheduleResult::to_record));
    }
    if matches!(cli.engine, EngineArg::Tree | EngineArg::Both) {
        let start = Instant::now();
        let res = construct_tree(op.clone(), &hw, &tree_cfg)?;
        summary.push(("tree", best_of(&res), start.elapsed().as_secs_f64() * 1e3));
        records.extend(res.iter().map(ScheduleResult::to_record));
    }
    let file = ResultsFile {
        op: op.to_document(),
        hw: hw.clone(),
        graph_config: (cli.engine != EngineArg::Tree).then_some(graph_cfg),
        tree_config: (cli.engine != EngineArg::Graph).then_some(tree_cfg),
        results: records,
    };
    let path = write_file(
        &cli.out,
        "results.json",
        &(serde_json::to_string_pretty(&file)? + "\n"),
    )?;
    println!("{} on {}", op.label(), hw.name);
    println!(
        "{:<6} {:>14} {:>8} {:>10}",
        "engine", "best_cost_s", "trace", "wall_ms"
    );
    for (name, best, wall) in &summary {
        match best {
            Some(r) => println!(
                "{name:<6} {:>14.6e} {:>8} {wall:>10.1}",
                r.cost.est_seconds,
                r.trace.len()
            ),
            None => println!("{name:<6} {:>14} {:>8} {wall:>10.1}", "-", "-"),
        }
    }
    if let [(_, Some(g), _), (_, Some(t), _)] = summary.as_slice() {
        println!(
            "graph/tree ratio {:.6}",
            g.cost.est_seconds / t.cost.est_seconds
        );
    }
    println!("wrote {}", path.display());
    Ok(0)
}

fn best_of(results: &[ScheduleResult]) -> Option<ScheduleResult> {
    results.first().cloned()
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || config_error(format!("--seeds: cannot parse `{text}`"));
    if let Some((a, b)) = text.split_once('-') {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

fn geomean(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

fn compare(cli: &Cli, suite: &Path, seeds: &str) -> Result<u8> {
    let hw = load_hw(&cli.hw)?;
    let text = fs::read_to_string(suite)
        .map_err(|e| config_error(format!("--suite: cannot read `{}`: {e}", suite.display())))?;
    let ops = parse_op_suite(&text)
        .map_err(|e| config_error(format!("--suite `{}`: {e}", suite.display())))?;
    if ops.is_empty() {
        return Err(config_error("--suite lists no operators"));
    }
    let seeds = parse_seeds(seeds)?;
    let base = engine_config(cli, &hw)?;
    let tree_cfg = tree_config(cli)?;
    let mut csv =
        String::from("op_label,tree_cost,graph_cost,ratio,graph_wall_ms,tree_wall_ms,status\n");
    let (mut ratios, mut graphs, mut trees) = (Vec::new(), Vec::new(), Vec::new());
    let mut failed = 0;
    for op in ops {
        let op = Arc::new(op);
        let label = op.label();
        let start = Instant::now();
        let graph: Result<f64> = seeds.iter().try_fold(f64::INFINITY, |best, &seed| {
            let cfg = EngineConfig {
                seed,
                ..base.clone()
            };
            let res = optimize(op.clone(), &hw, &cfg)?;
            Ok(res.first().map_or(best, |r| best.min(r.cost.est_seconds)))
        });
        let graph_ms = start.elapsed().as_secs_f64() * 1e3;
        let start = Instant::now();
        let tree: Result<f64> = construct_tree(op.clone(), &hw, &tree_cfg)
            .map_err(anyhow::Error::from)
            .map(|r| r.first().map_or(f64::INFINITY, |r| r.cost.est_seconds));
        let tree_ms = start.elapsed().as_secs_f64() * 1e3;
        match (graph, tree) {
            (Ok(g), Ok(t)) if g.is_finite() && t.is_finite() => {
                let ratio = g / t;
                info!("{label}: graph {g:e} tree {t:e} ratio {ratio:.4}");
                csv.push_str(&format!(
                    "{label},{t:e},{g:e},{ratio:.9},{graph_ms:.1},{tree_ms:.1},ok\n"
                ));
                ratios.push(ratio);
                graphs.push(g);
                trees.push(t);
            }
            (g, t) => {
                failed += 1;
                let why = match (g, t) {
                    (Err(e), _) | (_, Err(e)) => e.to_string(),
                    _ => "no schedule".into(),
                };
                let why = why.replace([',', '\n'], " ");
                csv.push_str(&format!(
                    "{label},,,,{graph_ms:.1},{tree_ms:.1},error: {why}\n"
                ));
            }
        }
    }
    if !ratios.is_empty() {
        csv.push_str(&format!(
            "geomean,{:e},{:e},{:.9},,,ok\n",
            geomean(&trees),
            geomean(&graphs),
            geomean(&ratios)
        ));
    }
    let path = write_file(&cli.out, "compare.csv", &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(if failed > 0 { EXIT_PARTIAL } else { 0 })
}

fn analyze(
    cli: &Cli,
    max_states: usize,
    vthreads: Option<&[u64]>,
    inv_tile: bool,
    max_tile_factor: u64,
) -> Result<u8> {
    let hw = load_hw(&cli.hw)?;
    let op = load_op(cli)?;
    let mut cfg = EngineConfig {
        enable_inv_tile: inv_tile,
        max_tile_factor,
        ..EngineConfig::default()
    };
    if let Some(v) = vthreads {
        cfg.vthread_options = v.to_vec();
    }
    cfg.validate()
        .map_err(|e| config_error(format!("--vthreads/--max-tile-factor: {e}")))?;
    let caps = SpaceCaps {
        max_states,
        ..SpaceCaps::default()
    };
    let model = match enumerate_space(op.clone(), &hw, &cfg.moves(), &caps) {
        Ok(m) => m,
        Err(e @ MarkovError::SpaceTooLarge { .. }) => {
            return Err(Failure {
                code: EXIT_RESOURCE,
                message: e.to_string(),
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let levels = level_reports(&model);
    let stationary = stationary_distribution(&model, 0).ok();
    let values = value_iteration(&model, &hw)?;
    let absorbing = (0..model.len()).filter(|&i| model.is_absorbing(i)).count();
    let complete = model.states.iter().filter(|s| s.is_complete()).count();
    let report = json!({
        "op": op.label(),
        "hw": hw.name,
        "states": model.len(),
        "absorbing_states": absorbing,
        "complete_states": complete,
        "levels": levels,
        "irreducible": levels.iter().map(|l| l.irreducible).collect::<Vec<_>>(),
        "aperiodic": check_aperiodic(&model),
        "stationary_entropy": stationary.as_ref().map(|pi| entropy(pi)),
        "stationary_residual": stationary.as_ref().map(|pi| stationary_residual(&model, pi)),
        "value_initial": values.values[model.initial],
        "policy_payoff": values.policy_payoff(&model, model.initial),
        "value_iterations": values.iterations,
    });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    let path = write_file(&cli.out, "analysis.json", &text)?;
    print!("{text}");
    println!("wrote {}", path.display());
    Ok(0)
}

struct Loaded {
    op: Arc<OpSpec>,
    hw: HardwareSpec,
    records: Vec<ScheduleRecord>,
}

fn load_results(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_error(format!("--results: cannot read `{}`: {e}", path.display())))?;
    let file: ResultsFile = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("--results `{}`: {e}", path.display())))?;
    let op = parse_op_value(&file.op).map_err(|e| config_error(format!("--results op: {e}")))?;
    Ok(Loaded {
        op: Arc::new(op),
        hw: file.hw,
        records: file.results,
    })
}

/// Replays a stored trace; errors unless it reproduces the stored end state.
fn replay(op: &Arc<OpSpec>, record: &ScheduleRecord) -> Result<EtirState> {
    let stored = EtirState::from_record(op.clone(), &record.state)?;
    let replayed = EtirState::replay(op.clone(), record.state.num_level, &record.trace)
        .map_err(|e| anyhow::anyhow!("ReplayMismatch: {e}"))?;
    if replayed != stored {
        anyhow::bail!("ReplayMismatch: trace does not reproduce the stored state");
    }
    Ok(stored)
}

fn verify(results: &Path, mode: Precision) -> Result<u8> {
    let loaded = load_results(results)?;
    let tolerance = match mode {
        Precision::F64 => 1e-9,
        Precision::F32 => 1e-6,
    };
    let mut failures = 0;
    for (i, record) in loaded.records.iter().enumerate() {
        let outcome = replay(&loaded.op, record).and_then(|state| {
            check_schedule(&state, i as u64, mode == Precision::F32).map_err(anyhow::Error::from)
        });
        match outcome {
            Ok(err) if err <= tolerance => {
                println!("result {i} ({:?}): ok rel_err {err:.3e}", record.engine)
            }
            Ok(err) => {
                failures += 1;
                println!(
                    "result {i} ({:?}): FAIL rel_err {err:.3e} > {tolerance:e}",
                    record.engine
                );
            }
            Err(e) => {
                failures += 1;
                println!("result {i} ({:?}): FAIL {e}", record.engine);
            }
        }
    }
    println!(
        "{} of {} results within {tolerance:e}",
        loaded.records.len() - failures,
        loaded.records.len()
    );
    Ok(if failures > 0 { EXIT_PARTIAL } else { 0 })
}

/// The schedule selected by `--results`/`--index`, or the best graph schedule
/// for `--op`.
fn pick_schedule(
    cli: &Cli,
    results: Option<&Path>,
    index: usize,
) -> Result<(EtirState, HardwareSpec)> {
    match results {
        Some(path) => {
            let loaded = load_results(path)?;
            let record = loaded.records.get(index).ok_or_else(|| {
                config_error(format!(
                    "--index {index} out of range ({} results)",
                    loaded.records.len()
                ))
            })?;
            Ok((replay(&loaded.op, record)?, loaded.hw))
        }
        None => {
            let hw = load_hw(&cli.hw)?;
            let op = load_op(cli)?;
            let best = match cli.engine {
                EngineArg::Tree => construct_tree(op, &hw, &tree_config(cli)?)?,
                _ => optimize(op, &hw, &engine_config(cli, &hw)?)?,
            };
            let best = best
                .into_iter()
                .next()
                .ok_or_else(|| anyhow::anyhow!("no schedule found"))?;
            Ok((best.state, hw))
        }
    }
}

fn emit(cli: &Cli, results: Option<&Path>, index: usize) -> Result<u8> {
    let (state, _) = pick_schedule(cli, results, index)?;
    let prog = lower(&state)?;
    let name = format!("{}.c", state.op().label());
    let path = write_file(&cli.out, &name, &emit_source(&prog))?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn explain(cli: &Cli, results: Option<&Path>, index: usize) -> Result<u8> {
    let (state, hw) = pick_schedule(cli, results, index)?;
    let report = json!({
        "op": state.op().label(),
        "hw": hw.name,
        "state": state.to_record(),
        "traffic": traffic_report(&state, &hw)?,
        "cost": estimate_cost(&state, &hw)?,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}
