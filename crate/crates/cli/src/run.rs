use std::time::Instant;

use ditpar_core::config::{parse_strategy, RunConfig};
use ditpar_core::costmodel::{compare_strategies, rows_to_csv as cost_csv, rows_to_json, CostMode};
use ditpar_core::execute::{
    auto_warmup, build_toy_model, divergence, initial_latent, run_distrifusion, run_pipefusion, serial_reference,
    RunManifest,
};
use ditpar_core::freshness::{fresh_area_series, freshness_map};
use ditpar_core::model::{ParallelPlan, Strategy};
use ditpar_core::schedule::{build_distrifusion_schedule, build_pipefusion_schedule, Schedule};
use ditpar_core::simulate::{
    rows_to_csv, summarize, sweep_devices, sweep_patch_number, sweep_warmup, DeviceSweepStrategy,
};
use ditpar_core::Error;

use crate::{Cli, Command, Format, GridArgs, PlanArgs, ScheduleKindArg, SweepKind};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

pub fn dispatch(cli: &Cli) -> Outcome {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.execute.seed = seed;
    }
    let text = match &cli.command {
        Command::Cost { mode, devices, patches } => cost(&mut cfg, cli.global.format, mode, *devices, *patches)?,
        Command::Schedule { grid, gantt } => {
            let s = schedule(&cfg, grid)?;
            if *gantt {
                s.gantt()
            } else {
                match cli.global.format {
                    Format::Json => s.to_json(),
                    Format::Csv => rows_to_csv(&s.micro_steps),
                }
            }
        }
        Command::Freshness { grid, series, strip } => {
            let s = schedule(&cfg, grid)?;
            let map = freshness_map(&s);
            match (*strip, *series, cli.global.format) {
                (true, _, _) => map.heat_strip(),
                (false, true, Format::Csv) => rows_to_csv(&fresh_area_series(&s)),
                (false, true, Format::Json) => json(&fresh_area_series(&s)),
                (false, false, Format::Csv) => map.to_csv(),
                (false, false, Format::Json) => json(&map.entries),
            }
        }
        Command::Simulate { plan, trace, gantt } => {
            let p = apply_plan(&mut cfg, plan)?;
            let (tl, summary) = summarize(&p, &cfg.model, &cfg.workload, &cfg.cluster, &cfg.compute_model)?;
            if let Some(path) = trace {
                write_file(path, &tl.to_trace_json())?;
            }
            match (gantt, cli.global.format) {
                (Some(cols), _) => tl.ascii_gantt(*cols),
                (None, Format::Csv) => rows_to_csv(&[summary]),
                (None, Format::Json) => json(&summary),
            }
        }
        Command::Sweep {
            kind,
            plan,
            values,
            strategies,
        } => sweep(&mut cfg, cli.global.format, *kind, plan, values, strategies)?,
        Command::Execute { .. } => execute(&mut cfg, cli)?,
    };
    match &cli.global.out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &std::path::Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn cost(cfg: &mut RunConfig, format: Format, mode: &str, devices: Option<usize>, patches: Option<usize>) -> Result<String, Failure> {
    let mode: CostMode = mode.parse()?;
    if let Some(n) = devices {
        cfg.cluster.device_count = n;
    }
    let m = patches.unwrap_or(cfg.plan.patches);
    cfg.model.validate()?;
    cfg.workload.validate()?;
    cfg.cluster.validate()?;
    let plans: Vec<ParallelPlan> = Strategy::baseline_set(m).into_iter().map(ParallelPlan::new).collect();
    let rows = compare_strategies(&cfg.model, &cfg.workload, &cfg.cluster, &plans, mode)?;
    Ok(match format {
        Format::Csv => cost_csv(&rows),
        Format::Json => {
            let mut s = rows_to_json(&rows);
            s.push('\n');
            s
        }
    })
}

fn schedule(cfg: &RunConfig, grid: &GridArgs) -> Result<Schedule, Failure> {
    let n = grid.n.unwrap_or(cfg.cluster.device_count);
    let steps = grid.steps.unwrap_or(cfg.workload.diffusion_steps);
    let warmup = grid.warmup.unwrap_or(cfg.workload.warmup_steps.min(steps));
    Ok(match grid.kind {
        ScheduleKindArg::Pipefusion => {
            build_pipefusion_schedule(n, grid.m.unwrap_or(cfg.plan.patches), steps, warmup)?
        }
        ScheduleKindArg::Distrifusion => build_distrifusion_schedule(n, steps, warmup)?,
    })
}

fn apply_plan(cfg: &mut RunConfig, args: &PlanArgs) -> Result<ParallelPlan, Failure> {
    let p = &mut cfg.plan;
    if let Some(s) = &args.strategy {
        p.strategy = s.clone();
    }
    if let Some(m) = args.patches {
        p.patches = m;
    }
    if args.ulysses.is_some() || args.ring.is_some() {
        p.ulysses_degree = args.ulysses;
        p.ring_degree = args.ring;
    }
    if let Some(c) = args.cfg {
        p.cfg_degree = c;
        p.degree = None;
    }
    if let Some(n) = args.devices {
        cfg.cluster.device_count = n;
        cfg.plan.degree = None;
    }
    if let Some(s) = args.steps {
        cfg.workload.diffusion_steps = s;
    }
    if let Some(w) = args.warmup {
        cfg.workload.warmup_steps = w;
    }
    if let Some(bw) = args.bandwidth {
        cfg.cluster.link_bandwidth = bw;
    }
    Ok(cfg.validate()?)
}

fn sweep(
    cfg: &mut RunConfig,
    format: Format,
    kind: SweepKind,
    args: &PlanArgs,
    values: &[usize],
    strategies: &[String],
) -> Result<String, Failure> {
    let plan = apply_plan(cfg, args)?;
    let (m, w, c, cm) = (&cfg.model, &cfg.workload, &cfg.cluster, &cfg.compute_model);
    let pick = |default: &[usize]| if values.is_empty() { default.to_vec() } else { values.to_vec() };
    macro_rules! emit {
        ($rows:expr) => {{
            let rows = $rows;
            match format {
                Format::Csv => rows_to_csv(&rows),
                Format::Json => json(&rows),
            }
        }};
    }
    Ok(match kind {
        SweepKind::PatchNumber => emit!(sweep_patch_number(m, w, c, cm, &pick(&[2, 4, 8, 16, 32]))?),
        SweepKind::Warmup => {
            let values = pick(&[0, 1, 2, 4]);
            if let Some(&bad) = values.iter().find(|&&v| v > w.diffusion_steps) {
                return Err(usage(format!(
                    "warmup value {bad} exceeds the {} diffusion steps",
                    w.diffusion_steps
                )));
            }
            emit!(sweep_warmup(&plan, m, w, c, cm, &values)?)
        }
        SweepKind::Devices => {
            let names: Vec<String> = if strategies.is_empty() {
                ["pipefusion", "usp", "sp-ulysses", "sp-ring", "distrifusion", "tp"]
                    .map(String::from)
                    .to_vec()
            } else {
                strategies.to_vec()
            };
            let templates = names
                .iter()
                .map(|name| {
                    Ok(match name.as_str() {
                        "usp" => DeviceSweepStrategy::UspBest,
                        "pipefusion" => DeviceSweepStrategy::PipeFusionMatchDevices,
                        other => DeviceSweepStrategy::Fixed(parse_strategy(other, cfg.plan.patches, None, None, 1)?),
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let counts = pick(&[1, 2, 4, 8]);
            emit!(sweep_devices(&templates, m, w, c, cm, &counts)?)
        }
    })
}

fn execute(cfg: &mut RunConfig, cli: &Cli) -> Result<String, Failure> {
    let Command::Execute {
        strategy,
        compare,
        layers,
        hidden_size,
        heads,
        seq_len,
        steps,
        warmup,
        workers,
        patches,
        step_size,
        auto_warmup: threshold,
    } = &cli.command
    else {
        unreachable!("dispatched on Execute");
    };
    let ex = &mut cfg.execute;
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = $field { ex.$field = v.clone(); })*};
    }
    set!(strategy, layers, hidden_size, heads, seq_len, steps, warmup, workers, patches, step_size);
    if threshold.is_some() {
        ex.auto_warmup_threshold = *threshold;
    }
    let ex = cfg.execute.clone();
    let toy = build_toy_model(ex.seed, ex.layers, ex.hidden_size, ex.heads, ex.mlp_ratio)?;
    let x = initial_latent(ex.seed, ex.seq_len, ex.hidden_size);
    let mut spec = ex.run_spec();
    if let Some(th) = ex.auto_warmup_threshold {
        spec.warmup = auto_warmup(&toy, &x, ex.steps, ex.step_size, th)?.warmup;
    }
    let names: Vec<&str> = if *compare {
        vec!["serial", "pipefusion", "distrifusion"]
    } else {
        vec![ex.strategy.as_str()]
    };
    if let Some(bad) = names.iter().find(|n| !matches!(**n, "serial" | "pipefusion" | "distrifusion")) {
        return Err(usage(format!(
            "unknown execute strategy `{bad}` (expected serial, pipefusion or distrifusion)"
        )));
    }
    let started = Instant::now();
    let serial = serial_reference(&toy, &x, ex.steps, ex.step_size)?.final_state.x;
    let serial_time = started.elapsed().as_secs_f64();
    let mut manifests = Vec::new();
    for name in names {
        let started = Instant::now();
        let (final_x, workers, patches) = match name {
            "serial" => (serial.clone(), 1, 1),
            "pipefusion" => (run_pipefusion(&toy, &x, &spec)?.final_state.x, spec.workers, spec.patches),
            _ => (run_distrifusion(&toy, &x, &spec)?.final_state.x, spec.workers, spec.workers),
        };
        let wall_time = if name == "serial" {
            serial_time
        } else {
            started.elapsed().as_secs_f64()
        };
        manifests.push(RunManifest {
            seed: ex.seed,
            layers: ex.layers,
            hs: ex.hidden_size,
            heads: ex.heads,
            p: ex.seq_len,
            steps: ex.steps,
            warmup: spec.warmup,
            workers,
            patches,
            strategy: name.to_string(),
            step_size: ex.step_size,
            divergence: divergence(&final_x, &serial)?,
            wall_time,
        });
    }
    Ok(match cli.global.format {
        Format::Csv => rows_to_csv(&manifests),
        Format::Json if manifests.len() == 1 => json(&manifests[0]),
        Format::Json => json(&manifests),
    })
}
