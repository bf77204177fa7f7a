//! Parameter sweeps over the simulator.

use serde::Serialize;

use super::{simulate, ComputeModel};
use crate::error::{ensure, Result};
use crate::model::{ClusterSpec, ModelSpec, ParallelPlan, Strategy, WorkloadSpec};
use crate::schedule::{bubble_count, build_pipefusion_schedule};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchSweepRow {
    pub patches: usize,
    pub makespan_s: f64,
    pub bubbles: usize,
}

/// PipeFusion over the full cluster for each patch number.
pub fn sweep_patch_number(
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
    patches: &[usize],
) -> Result<Vec<PatchSweepRow>> {
    ensure!(!patches.is_empty(), "patch sweep needs at least one patch number");
    patches
        .iter()
        .map(|&m| {
            let plan = ParallelPlan::new(Strategy::PipeFusion { patches: m });
            let tl = simulate(&plan, model, workload, cluster, compute)?;
            let sched = build_pipefusion_schedule(
                cluster.device_count,
                m,
                workload.diffusion_steps,
                workload.warmup_steps,
            )?;
            Ok(PatchSweepRow {
                patches: m,
                makespan_s: tl.makespan_s,
                bubbles: bubble_count(&sched).total,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarmupSweepRow {
    pub warmup: usize,
    pub makespan_s: f64,
    /// Makespan over the no-warmup makespan, minus one.
    pub relative_increase: f64,
}

pub fn sweep_warmup(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
    warmups: &[usize],
) -> Result<Vec<WarmupSweepRow>> {
    ensure!(!warmups.is_empty(), "warmup sweep needs at least one warmup count");
    let run = |w: usize| {
        let wl = WorkloadSpec {
            warmup_steps: w,
            ..workload.clone()
        };
        simulate(plan, model, &wl, cluster, compute).map(|tl| tl.makespan_s)
    };
    let baseline = run(0)?;
    warmups
        .iter()
        .map(|&w| {
            let makespan_s = run(w)?;
            Ok(WarmupSweepRow {
                warmup: w,
                makespan_s,
                relative_increase: makespan_s / baseline - 1.0,
            })
        })
        .collect()
}

/// How a device sweep picks the strategy at each device count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceSweepStrategy {
    Fixed(Strategy),
    /// Fastest Ulysses x ring factorization of the device count.
    UspBest,
    /// PipeFusion with as many patches as devices.
    PipeFusionMatchDevices,
}

impl DeviceSweepStrategy {
    pub fn label(&self) -> String {
        match self {
            DeviceSweepStrategy::Fixed(s) => s.name(),
            DeviceSweepStrategy::UspBest => "usp-best".into(),
            DeviceSweepStrategy::PipeFusionMatchDevices => "pipefusion-m=n".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceSweepRow {
    pub devices: usize,
    pub strategy: String,
    /// Concrete strategy simulated; empty when the device count is invalid for the template.
    pub resolved: Option<String>,
    pub makespan_s: Option<f64>,
    /// Single-device makespan over this row's makespan.
    pub speedup: Option<f64>,
    pub note: Option<String>,
}

/// Every template at every device count. Invalid combinations become rows with a note
/// instead of failing the whole sweep.
pub fn sweep_devices(
    templates: &[DeviceSweepStrategy],
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
    device_counts: &[usize],
) -> Result<Vec<DeviceSweepRow>> {
    ensure!(!templates.is_empty(), "device sweep needs at least one strategy");
    ensure!(!device_counts.is_empty(), "device sweep needs at least one device count");
    let serial = simulate(
        &ParallelPlan::new(Strategy::TensorParallel),
        model,
        workload,
        &cluster.with_devices(1),
        compute,
    )?
    .makespan_s;
    let mut rows = Vec::new();
    for &n in device_counts {
        let c = cluster.with_devices(n);
        for t in templates {
            let outcome = match t {
                DeviceSweepStrategy::Fixed(s) => run_one(*s, model, workload, &c, compute),
                DeviceSweepStrategy::PipeFusionMatchDevices => {
                    run_one(Strategy::PipeFusion { patches: n }, model, workload, &c, compute)
                }
                DeviceSweepStrategy::UspBest => (1..=n)
                    .filter(|u| n % u == 0)
                    .map(|u| run_one(Strategy::Usp { ulysses: u, ring: n / u }, model, workload, &c, compute))
                    .collect::<Result<Vec<_>>>()
                    .map(|all| {
                        all.into_iter()
                            .min_by(|a, b| a.1.total_cmp(&b.1))
                            .expect("at least one factorization")
                    }),
            };
            rows.push(match outcome {
                Ok((s, makespan)) => DeviceSweepRow {
                    devices: n,
                    strategy: t.label(),
                    resolved: Some(s.name()),
                    makespan_s: Some(makespan),
                    speedup: Some(serial / makespan),
                    note: None,
                },
                Err(e) => DeviceSweepRow {
                    devices: n,
                    strategy: t.label(),
                    resolved: None,
                    makespan_s: None,
                    speedup: None,
                    note: Some(e.to_string()),
                },
            });
        }
    }
    Ok(rows)
}

fn run_one(
    s: Strategy,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
) -> Result<(Strategy, f64)> {
    let tl = simulate(&ParallelPlan::new(s), model, workload, cluster, compute)?;
    Ok((s, tl.makespan_s))
}

/// Rows as CSV with a header taken from the field names.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("utf-8")
}
