//! Timeline simulation of one diffusion job under a parallel plan.
//!
//! Compute durations come from a FLOP surrogate ([`ComputeModel`]); transfer
//! sizes come from [`crate::costmodel`]. Every transfer costs
//! `link_latency + per_message_overhead + bytes / link_bandwidth`. Strategies
//! whose communication overlaps computation put transfers on a separate comm
//! stream that runs concurrently with the compute stream; the others make the
//! next layer wait for the collective.

mod engine;
mod sweep;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::costmodel::{comm_cost, CostMode};
use crate::error::{ensure, Result};
use crate::model::{validate_plan, ClusterSpec, ModelSpec, ParallelPlan, Strategy, WorkloadSpec};
use crate::schedule::{build_pipefusion_schedule, SlotKind};
use engine::{Engine, Spec};

pub use sweep::{
    sweep_devices, sweep_patch_number, sweep_warmup, DeviceSweepRow, DeviceSweepStrategy,
    rows_to_csv, PatchSweepRow, WarmupSweepRow,
};

/// FLOP surrogate for one transformer layer over `q` query tokens attending to `kv` tokens:
/// `attention_coeff * q * kv * hs + linear_coeff * q * hs^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeModel {
    pub attention_coeff: f64,
    /// Defaults to `8 + 4 * mlp_ratio` (QKVO projections plus the MLP).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_coeff: Option<f64>,
    /// Fixed cost in seconds of every message, on top of the link latency.
    pub per_message_overhead: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel {
            attention_coeff: 4.0,
            linear_coeff: None,
            per_message_overhead: 50e-6,
        }
    }
}

impl ComputeModel {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.attention_coeff > 0.0 && self.attention_coeff.is_finite(),
            "compute_model.attention_coeff must be positive"
        );
        if let Some(b) = self.linear_coeff {
            ensure!(b > 0.0 && b.is_finite(), "compute_model.linear_coeff must be positive");
        }
        ensure!(
            self.per_message_overhead >= 0.0 && self.per_message_overhead.is_finite(),
            "compute_model.per_message_overhead must be non-negative"
        );
        Ok(())
    }

    pub fn linear_coeff_for(&self, mlp_ratio: f64) -> f64 {
        self.linear_coeff.unwrap_or(8.0 + 4.0 * mlp_ratio)
    }

    pub fn attention_flops(&self, q_tokens: f64, kv_tokens: f64, hidden: f64) -> f64 {
        self.attention_coeff * q_tokens * kv_tokens * hidden
    }

    pub fn projection_mlp_flops(&self, tokens: f64, hidden: f64, mlp_ratio: f64) -> f64 {
        self.linear_coeff_for(mlp_ratio) * tokens * hidden * hidden
    }

    pub fn layer_flops(&self, model: &ModelSpec, q_tokens: f64, kv_tokens: f64) -> f64 {
        let hs = model.hidden_size as f64;
        self.attention_flops(q_tokens, kv_tokens, hs) + self.projection_mlp_flops(q_tokens, hs, model.mlp_ratio)
    }

    /// Seconds for one full-model forward on one device.
    pub fn step_time(&self, model: &ModelSpec, workload: &WorkloadSpec, cluster: &ClusterSpec) -> f64 {
        let p = workload.seq_len as f64;
        model.layers as f64 * self.layer_flops(model, p, p) / cluster.device_flops
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Compute,
    Comm,
    /// Latent exchange between CFG groups.
    Exchange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub device: usize,
    pub stream: Stream,
    pub label: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub patch: Option<usize>,
    pub timestep: Option<usize>,
}

impl Event {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub devices: usize,
    pub events: Vec<Event>,
    pub makespan_s: f64,
    /// Compute-stream busy time over makespan, per device.
    pub busy_fraction: Vec<f64>,
    pub compute_s: Vec<f64>,
    /// Compute-stream idle time spent waiting on transfers, per device.
    pub comm_stall_s: Vec<f64>,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    name: &'a str,
    device: usize,
    stream: Stream,
    start_us: f64,
    dur_us: f64,
    patch: Option<usize>,
    timestep: Option<usize>,
}

impl Timeline {
    fn from_events(devices: usize, mut events: Vec<Event>, comm_stall_s: Vec<f64>) -> Self {
        events.sort_by(|a, b| {
            a.start_s
                .total_cmp(&b.start_s)
                .then(a.device.cmp(&b.device))
                .then(a.stream.cmp(&b.stream))
                .then_with(|| a.label.cmp(&b.label))
                .then(a.timestep.cmp(&b.timestep).reverse())
                .then(a.patch.cmp(&b.patch))
        });
        let makespan_s = events.iter().map(Event::end_s).fold(0.0, f64::max);
        let mut compute_s = vec![0.0; devices];
        for e in events.iter().filter(|e| e.stream == Stream::Compute) {
            compute_s[e.device] += e.duration_s;
        }
        let busy_fraction = compute_s
            .iter()
            .map(|c| if makespan_s > 0.0 { c / makespan_s } else { 0.0 })
            .collect();
        Timeline {
            devices,
            events,
            makespan_s,
            busy_fraction,
            compute_s,
            comm_stall_s,
        }
    }

    fn from_engine(devices: usize, engine: &Engine) -> Self {
        let mut stalls = vec![0.0; devices];
        for t in &engine.tasks {
            stalls[t.device] += t.comm_stall;
        }
        Self::from_events(devices, engine.events(), stalls)
    }

    pub fn comm_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.stream != Stream::Compute)
    }

    /// Largest total compute assigned to one device: a lower bound on the makespan.
    pub fn compute_lower_bound(&self) -> f64 {
        self.compute_s.iter().copied().fold(0.0, f64::max)
    }

    /// One text row per device and busy stream, `columns` characters wide. A cell shows the
    /// patch digit (or `#` for whole-sequence work, `~` for transfers) of the event covering
    /// the cell's midpoint, `.` when idle.
    pub fn ascii_gantt(&self, columns: usize) -> String {
        let columns = columns.max(1);
        let dt = self.makespan_s / columns as f64;
        let mut out = String::new();
        for d in 0..self.devices {
            for stream in [Stream::Compute, Stream::Comm, Stream::Exchange] {
                let evs: Vec<&Event> = self.events.iter().filter(|e| e.device == d && e.stream == stream).collect();
                if evs.is_empty() {
                    continue;
                }
                let tag = match stream {
                    Stream::Compute => "c",
                    Stream::Comm => "m",
                    Stream::Exchange => "x",
                };
                let mut line = format!("d{d}{tag} |");
                for c in 0..columns {
                    let mid = (c as f64 + 0.5) * dt;
                    let cell = evs
                        .iter()
                        .find(|e| e.start_s <= mid && mid < e.end_s())
                        .map_or('.', |e| match (stream, e.patch) {
                            (Stream::Compute, Some(p)) => std::char::from_digit((p % 36) as u32, 36).unwrap_or('#'),
                            (Stream::Compute, None) => '#',
                            _ => '~',
                        });
                    line.push(cell);
                }
                line.push_str("|\n");
                out.push_str(&line);
            }
        }
        out
    }

    /// Trace-viewer event array `[{name, device, stream, start_us, dur_us, patch, timestep}]`.
    pub fn to_trace_json(&self) -> String {
        let recs: Vec<_> = self
            .events
            .iter()
            .map(|e| TraceRecord {
                name: &e.label,
                device: e.device,
                stream: e.stream,
                start_us: e.start_s * 1e6,
                dur_us: e.duration_s * 1e6,
                patch: e.patch,
                timestep: e.timestep,
            })
            .collect();
        serde_json::to_string_pretty(&recs).expect("trace serializes")
    }
}

struct Ctx<'a> {
    model: &'a ModelSpec,
    workload: &'a WorkloadSpec,
    cluster: &'a ClusterSpec,
    compute: &'a ComputeModel,
}

impl Ctx<'_> {
    fn transfer(&self, bytes: f64) -> f64 {
        self.cluster.link_latency + self.compute.per_message_overhead + bytes / self.cluster.link_bandwidth
    }

    fn flops_time(&self, flops: f64) -> f64 {
        flops / self.cluster.device_flops
    }
}

fn validate_inputs(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
) -> Result<()> {
    model.validate()?;
    workload.validate()?;
    cluster.validate()?;
    compute.validate()?;
    validate_plan(plan, cluster)
}

/// Simulates the whole job and returns every compute and transfer event.
pub fn simulate(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
) -> Result<Timeline> {
    validate_inputs(plan, model, workload, cluster, compute)?;
    if plan.cfg_degree == 2 {
        return simulate_cfg(plan, model, workload, cluster, compute);
    }
    group_timeline(plan, model, workload, cluster, compute)
}

fn group_timeline(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
) -> Result<Timeline> {
    let n = plan.group_degree(cluster.device_count)?;
    let group_cluster = cluster.with_devices(n);
    let single = ParallelPlan::new(plan.strategy);
    let cost = comm_cost(&single, model, workload, &group_cluster, CostMode::PaperApprox)?;
    let ctx = Ctx {
        model,
        workload,
        cluster: &group_cluster,
        compute,
    };
    let bpe = model.bytes_per_element as f64;
    let volumes = Volumes {
        overlapped_bytes: cost.overlapped_elements.to_f64() * bpe,
        blocking_bytes: cost.blocking_elements.to_f64() * bpe,
    };
    let engine = match plan.strategy {
        Strategy::PipeFusion { patches } => pipefusion(&ctx, n, patches, &volumes)?,
        Strategy::DistriFusion => distrifusion(&ctx, n, &volumes),
        _ => layered(&ctx, n, &volumes),
    };
    Ok(Timeline::from_engine(n, &engine))
}

struct Volumes {
    overlapped_bytes: f64,
    blocking_bytes: f64,
}

/// Layer-synchronous strategies: TP, SP-Ulysses, SP-Ring and USP. Each layer's compute is
/// split evenly; the overlapped part of the traffic runs alongside the layer, the blocking
/// part after it.
fn layered(ctx: &Ctx<'_>, n: usize, v: &Volumes) -> Engine {
    let mut e = Engine::default();
    let layers = ctx.model.layers;
    let p = ctx.workload.seq_len as f64;
    let compute = ctx.flops_time(ctx.compute.layer_flops(ctx.model, p, p)) / n as f64;
    let multi = n > 1;
    let overlapped = multi && v.overlapped_bytes > 0.0;
    let blocking = multi && v.blocking_bytes > 0.0;
    let overlapped_dur = ctx.transfer(v.overlapped_bytes / layers as f64);
    let blocking_dur = ctx.transfer(v.blocking_bytes / layers as f64);
    let steps = ctx.workload.diffusion_steps;

    // Tasks the next layer must wait for, per device.
    let mut gate: Vec<Vec<usize>> = vec![Vec::new(); n];
    for s in 0..steps {
        let t = steps - 1 - s;
        for _ in 0..layers {
            let mut layer_tasks = Vec::with_capacity(2 * n);
            let mut ring_tasks = Vec::with_capacity(n);
            #[allow(clippy::needless_range_loop)]
            for d in 0..n {
                let deps = std::mem::take(&mut gate[d]);
                let c = e.add(Spec {
                    device: d,
                    stream: Stream::Compute,
                    label: "layer",
                    duration: compute,
                    deps: &deps,
                    patch: None,
                    timestep: Some(t),
                });
                layer_tasks.push(c);
                gate[d].push(c);
                if overlapped {
                    let r = e.add(Spec {
                        device: d,
                        stream: Stream::Comm,
                        label: "ring-kv",
                        duration: overlapped_dur,
                        deps: &deps,
                        patch: None,
                        timestep: Some(t),
                    });
                    ring_tasks.push(r);
                    gate[d].push(r);
                }
            }
            if blocking {
                layer_tasks.extend(ring_tasks);
                for (d, g) in gate.iter_mut().enumerate() {
                    let b = e.add(Spec {
                        device: d,
                        stream: Stream::Comm,
                        label: "collective",
                        duration: blocking_dur,
                        deps: &layer_tasks,
                        patch: None,
                        timestep: Some(t),
                    });
                    *g = vec![b];
                }
            }
        }
    }
    e
}

/// Every device runs all layers on `p/N` tokens against full-length KV. In steady steps the
/// per-layer all-gather runs on the comm stream and only has to land before the same layer of
/// the next step; warmup steps wait for it before moving on.
fn distrifusion(ctx: &Ctx<'_>, n: usize, v: &Volumes) -> Engine {
    let mut e = Engine::default();
    let layers = ctx.model.layers;
    let p = ctx.workload.seq_len as f64;
    let compute = ctx.flops_time(ctx.compute.layer_flops(ctx.model, p / n as f64, p));
    let gather_dur = ctx.transfer(v.overlapped_bytes / layers as f64);
    let steps = ctx.workload.diffusion_steps;
    let warmup = ctx.workload.warmup_steps;

    // gathers[l]: all-gather tasks of layer l from the previous step, one per device.
    let mut gathers: Vec<Vec<usize>> = vec![Vec::new(); layers];
    let mut sync_gate: Vec<usize> = Vec::new();
    for s in 0..steps {
        let t = steps - 1 - s;
        let synchronous = s < warmup;
        for prev in gathers.iter_mut() {
            let mut deps = std::mem::take(prev);
            deps.append(&mut sync_gate);
            let computes: Vec<usize> = (0..n)
                .map(|d| {
                    e.add(Spec {
                        device: d,
                        stream: Stream::Compute,
                        label: if synchronous { "warmup-layer" } else { "layer" },
                        duration: compute,
                        deps: &deps,
                        patch: Some(d),
                        timestep: Some(t),
                    })
                })
                .collect();
            if n == 1 {
                continue;
            }
            let issued: Vec<usize> = (0..n)
                .map(|d| {
                    let own = [computes[d]];
                    e.add(Spec {
                        device: d,
                        stream: Stream::Comm,
                        label: "allgather-kv",
                        duration: gather_dur,
                        deps: if synchronous { &computes } else { &own },
                        patch: Some(d),
                        timestep: Some(t),
                    })
                })
                .collect();
            if synchronous {
                sync_gate = issued.clone();
            }
            *prev = issued;
        }
    }
    e
}

/// Patch-level pipeline following the schedule grid. Warmup steps run each stage over the
/// full sequence before handing it on; pipelined micro-steps hand one patch at a time.
fn pipefusion(ctx: &Ctx<'_>, n: usize, patches: usize, v: &Volumes) -> Result<Engine> {
    let steps = ctx.workload.diffusion_steps;
    let schedule = build_pipefusion_schedule(n, patches, steps, ctx.workload.warmup_steps)?;
    let p = ctx.workload.seq_len as f64;
    let stage_layers = ctx.model.layers as f64 / n as f64;
    let patch_time = ctx.flops_time(stage_layers * ctx.compute.layer_flops(ctx.model, p / patches as f64, p));
    let full_time = ctx.flops_time(stage_layers * ctx.compute.layer_flops(ctx.model, p, p));
    let patch_msg = ctx.transfer(v.overlapped_bytes / patches as f64);
    let full_msg = ctx.transfer(v.overlapped_bytes);

    let mut e = Engine::default();
    // (stage, patch, timestep) -> task the next stage waits on.
    let mut handoff: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut warm_started: HashSet<(usize, usize)> = HashSet::new();
    for ms in schedule.micro_steps.iter().filter(|m| m.is_active()) {
        let (d, j, t) = (ms.device, ms.patch.unwrap(), ms.timestep.unwrap());
        let upstream = if d > 0 {
            handoff.get(&(d - 1, j, t)).copied()
        } else if t + 1 < steps {
            handoff.get(&(n - 1, j, t + 1)).copied()
        } else {
            None
        };
        let deps: Vec<usize> = upstream.into_iter().collect();
        let warm = ms.kind == SlotKind::Warmup;
        let (c, msg_dur) = if warm {
            // The whole sequence moves at once; later patches of the step share its handoff.
            if !warm_started.insert((d, t)) {
                let out = handoff[&(d, 0, t)];
                handoff.insert((d, j, t), out);
                continue;
            }
            let c = e.add(Spec {
                device: d,
                stream: Stream::Compute,
                label: "warmup-stage",
                duration: full_time,
                deps: &deps,
                patch: None,
                timestep: Some(t),
            });
            (c, full_msg)
        } else {
            let c = e.add(Spec {
                device: d,
                stream: Stream::Compute,
                label: "stage",
                duration: patch_time,
                deps: &deps,
                patch: Some(j),
                timestep: Some(t),
            });
            (c, patch_msg)
        };
        let out = if n > 1 {
            e.add(Spec {
                device: d,
                stream: Stream::Comm,
                label: if d + 1 == n { "p2p-eps" } else { "p2p-activation" },
                duration: msg_dur,
                deps: &[c],
                patch: if warm { None } else { Some(j) },
                timestep: Some(t),
            })
        } else {
            c
        };
        handoff.insert((d, j, t), out);
    }
    Ok(e)
}

/// Two identical CFG groups plus one latent exchange per diffusion step. The exchange of
/// step `t` delays every later step of both groups by its duration.
pub fn simulate_cfg(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
) -> Result<Timeline> {
    validate_inputs(plan, model, workload, cluster, compute)?;
    ensure!(plan.cfg_degree == 2, "CFG simulation needs cfg degree 2");
    ensure!(
        cluster.device_count.is_multiple_of(2),
        "CFG parallel needs an even device count (got {})",
        cluster.device_count
    );
    let group = group_timeline(plan, model, workload, cluster, compute)?;
    let n = group.devices;
    let bytes = (workload.seq_len * model.latent_channels) as f64 * model.bytes_per_element as f64;
    let exchange = cluster.link_latency + compute.per_message_overhead + bytes / cluster.link_bandwidth;
    let steps = workload.diffusion_steps;
    let shift = |t: Option<usize>| t.map_or(0.0, |t| (steps - 1 - t) as f64 * exchange);

    let mut events = Vec::with_capacity(2 * group.events.len() + 2 * steps);
    let mut step_end = vec![0.0f64; steps];
    for offset in [0, n] {
        for ev in &group.events {
            let mut ev = ev.clone();
            ev.device += offset;
            ev.start_s += shift(ev.timestep);
            if let Some(t) = ev.timestep {
                step_end[t] = step_end[t].max(ev.end_s());
            }
            events.push(ev);
        }
    }
    for offset in [0, n] {
        for (t, &end) in step_end.iter().enumerate() {
            events.push(Event {
                device: offset,
                stream: Stream::Exchange,
                label: "cfg-exchange".into(),
                start_s: end,
                duration_s: exchange,
                patch: None,
                timestep: Some(t),
            });
        }
    }
    let stalls = group.comm_stall_s.iter().chain(&group.comm_stall_s).copied().collect();
    Ok(Timeline::from_events(2 * n, events, stalls))
}

/// Headline numbers of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub strategy: String,
    pub devices: usize,
    pub cfg_degree: usize,
    pub makespan_s: f64,
    pub single_device_s: f64,
    pub speedup: f64,
    pub comm_share: f64,
    pub comm_stall_s: f64,
    pub mean_busy_fraction: f64,
    pub comm_events: usize,
}

/// Simulates `plan` and the same job on one device, and summarizes both.
pub fn summarize(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    compute: &ComputeModel,
) -> Result<(Timeline, SimulationSummary)> {
    let tl = simulate(plan, model, workload, cluster, compute)?;
    let single = simulate(
        &ParallelPlan::new(plan.strategy),
        model,
        workload,
        &cluster.with_devices(1),
        compute,
    )?
    .makespan_s;
    let n = cluster.device_count;
    let summary = SimulationSummary {
        strategy: plan.strategy.name(),
        devices: n,
        cfg_degree: plan.cfg_degree,
        makespan_s: tl.makespan_s,
        // A CFG run does both branches; one device would run them back to back.
        single_device_s: single * plan.cfg_degree as f64,
        speedup: single * plan.cfg_degree as f64 / tl.makespan_s,
        comm_share: comm_share(tl.makespan_s, single * plan.cfg_degree as f64, n)?,
        comm_stall_s: tl.comm_stall_s.iter().sum(),
        mean_busy_fraction: tl.busy_fraction.iter().sum::<f64>() / n as f64,
        comm_events: tl.comm_events().count(),
    };
    Ok((tl, summary))
}

/// Share of the parallel latency not explained by perfect N-way scaling:
/// `(T_parallel - T_single / N) / T_parallel`.
pub fn comm_share(parallel_makespan_s: f64, single_device_latency_s: f64, devices: usize) -> Result<f64> {
    ensure!(
        parallel_makespan_s > 0.0 && parallel_makespan_s.is_finite(),
        "parallel makespan must be positive (got {parallel_makespan_s})"
    );
    ensure!(devices >= 1, "device count must be at least 1");
    Ok((parallel_makespan_s - single_device_latency_s / devices as f64) / parallel_makespan_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ModelSpec, WorkloadSpec, ClusterSpec, ComputeModel) {
        let model = ModelSpec {
            layers: 8,
            hidden_size: 256,
            heads: 4,
            param_count: 1_000_000,
            latent_channels: 4,
            mlp_ratio: 4.0,
            bytes_per_element: 2,
        };
        let workload = WorkloadSpec {
            seq_len: 1024,
            diffusion_steps: 6,
            warmup_steps: 0,
            step_size: 0.05,
        };
        let cluster = ClusterSpec {
            device_count: 4,
            device_flops: 1e12,
            link_bandwidth: 1e9,
            link_latency: 1e-6,
        };
        (model, workload, cluster, ComputeModel::default())
    }

    fn assert_no_overlap(tl: &Timeline) {
        let mut by_res: HashMap<(usize, Stream), Vec<&Event>> = HashMap::new();
        for e in &tl.events {
            by_res.entry((e.device, e.stream)).or_default().push(e);
        }
        for evs in by_res.values() {
            for w in evs.windows(2) {
                assert!(w[0].end_s() <= w[1].start_s + 1e-15, "{:?} overlaps {:?}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn flops_increase_with_tokens_and_width() {
        let cm = ComputeModel::default();
        let (mut m, ..) = setup();
        let a = cm.layer_flops(&m, 100.0, 100.0);
        assert!(cm.layer_flops(&m, 101.0, 101.0) > a);
        m.hidden_size += 1;
        assert!(cm.layer_flops(&m, 100.0, 100.0) > a);
        assert_eq!(cm.linear_coeff_for(4.0), 24.0);
    }

    #[test]
    fn single_device_matches_serial_time() {
        let (m, w, c, cm) = setup();
        let c1 = c.with_devices(1);
        let serial = w.diffusion_steps as f64 * cm.step_time(&m, &w, &c1);
        for s in Strategy::baseline_set(4).into_iter().chain([Strategy::Usp { ulysses: 1, ring: 1 }]) {
            let tl = simulate(&ParallelPlan::new(s), &m, &w, &c1, &cm).unwrap();
            assert!((tl.makespan_s - serial).abs() <= 1e-12 * serial, "{s}: {} vs {serial}", tl.makespan_s);
            assert_eq!(tl.comm_events().count(), 0, "{s}");
        }
    }

    #[test]
    fn tp_slower_than_pipefusion() {
        let (m, w, c, cm) = setup();
        let tp = simulate(&ParallelPlan::new(Strategy::TensorParallel), &m, &w, &c, &cm).unwrap();
        let pf = simulate(&ParallelPlan::new(Strategy::PipeFusion { patches: 4 }), &m, &w, &c, &cm).unwrap();
        assert!(tp.makespan_s > pf.makespan_s, "{} vs {}", tp.makespan_s, pf.makespan_s);
    }

    #[test]
    fn streams_never_overlap() {
        let (m, mut w, c, cm) = setup();
        w.warmup_steps = 2;
        let mut strategies = Strategy::baseline_set(4);
        strategies.push(Strategy::Usp { ulysses: 2, ring: 2 });
        strategies.push(Strategy::PipeFusion { patches: 2 });
        for s in strategies {
            let tl = simulate(&ParallelPlan::new(s), &m, &w, &c, &cm).unwrap();
            assert_no_overlap(&tl);
            assert!(tl.makespan_s >= tl.compute_lower_bound());
        }
        let cfg = ParallelPlan::new(Strategy::PipeFusion { patches: 2 }).with_cfg(2);
        assert_no_overlap(&simulate(&cfg, &m, &w, &c, &cm).unwrap());
    }

    #[test]
    fn infinite_bandwidth_pipeline_is_slot_count_times_stage() {
        let (m, w, mut c, mut cm) = setup();
        c.link_bandwidth = f64::INFINITY;
        c.link_latency = 0.0;
        cm.per_message_overhead = 0.0;
        for (n, patches) in [(4, 4), (4, 8), (4, 2), (2, 3)] {
            let c = c.with_devices(n);
            let tl = simulate(&ParallelPlan::new(Strategy::PipeFusion { patches }), &m, &w, &c, &cm).unwrap();
            let sched = build_pipefusion_schedule(n, patches, w.diffusion_steps, 0).unwrap();
            let p = w.seq_len as f64;
            let stage = (m.layers as f64 / n as f64) * cm.layer_flops(&m, p / patches as f64, p) / c.device_flops;
            let expect = sched.total_slots as f64 * stage;
            assert!((tl.makespan_s - expect).abs() <= 1e-9 * expect, "n={n} m={patches}");
        }
    }

    #[test]
    fn overlapped_comm_hidden_when_cheap() {
        let (m, w, mut c, cm) = setup();
        c.link_bandwidth = 1e12;
        for s in [Strategy::DistriFusion, Strategy::SpRing, Strategy::PipeFusion { patches: 8 }] {
            let tl = simulate(&ParallelPlan::new(s), &m, &w, &c, &cm).unwrap();
            let stall: f64 = tl.comm_stall_s.iter().sum();
            assert!(stall <= 1e-12 * tl.makespan_s, "{s}: stall {stall}");
        }
        // Non-overlapped strategies always pay for their collectives.
        let tl = simulate(&ParallelPlan::new(Strategy::TensorParallel), &m, &w, &c, &cm).unwrap();
        assert!(tl.comm_stall_s.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn warmup_adds_time() {
        let (m, mut w, c, cm) = setup();
        let mut last = 0.0;
        for warm in 0..=w.diffusion_steps {
            w.warmup_steps = warm;
            let tl = simulate(&ParallelPlan::new(Strategy::PipeFusion { patches: 4 }), &m, &w, &c, &cm).unwrap();
            assert!(tl.makespan_s > last, "W={warm}");
            last = tl.makespan_s;
        }
    }

    #[test]
    fn cfg_adds_one_exchange_per_step() {
        let (m, w, c, cm) = setup();
        let c8 = c.with_devices(8);
        for s in [Strategy::PipeFusion { patches: 4 }, Strategy::TensorParallel, Strategy::DistriFusion] {
            let group = simulate(&ParallelPlan::new(s), &m, &w, &c, &cm).unwrap();
            let both = simulate(&ParallelPlan::new(s).with_cfg(2), &m, &w, &c8, &cm).unwrap();
            let bytes = (w.seq_len * m.latent_channels * 2) as f64;
            let x = c.link_latency + cm.per_message_overhead + bytes / c.link_bandwidth;
            let expect = group.makespan_s + w.diffusion_steps as f64 * x;
            assert!((both.makespan_s - expect).abs() <= 1e-12 * expect, "{s}");
            assert_eq!(both.events.iter().filter(|e| e.stream == Stream::Exchange).count(), 2 * w.diffusion_steps);
        }
    }

    #[test]
    fn cfg_with_free_exchange_matches_group() {
        let (m, w, mut c, mut cm) = setup();
        c.link_latency = 0.0;
        cm.per_message_overhead = 0.0;
        let group = simulate(&ParallelPlan::new(Strategy::SpRing), &m, &w, &c, &cm).unwrap();
        let mut c8 = c.with_devices(8);
        c8.link_bandwidth = f64::INFINITY;
        let mut g_inf = c.clone();
        g_inf.link_bandwidth = f64::INFINITY;
        let group_inf = simulate(&ParallelPlan::new(Strategy::SpRing), &m, &w, &g_inf, &cm).unwrap();
        let both = simulate(&ParallelPlan::new(Strategy::SpRing).with_cfg(2), &m, &w, &c8, &cm).unwrap();
        assert_eq!(both.makespan_s, group_inf.makespan_s);
        assert!(group.makespan_s >= group_inf.makespan_s);
    }

    #[test]
    fn cfg_rejects_bad_layouts() {
        let (m, w, c, cm) = setup();
        let c8 = c.with_devices(8);
        let ok = ParallelPlan::new(Strategy::PipeFusion { patches: 4 }).with_cfg(2).with_degree(4);
        assert!(simulate(&ok, &m, &w, &c8, &cm).is_ok());
        let bad = ParallelPlan::new(Strategy::PipeFusion { patches: 4 }).with_cfg(2).with_degree(8);
        assert!(simulate(&bad, &m, &w, &c8, &cm).is_err());
        let odd = ParallelPlan::new(Strategy::PipeFusion { patches: 4 }).with_cfg(2);
        assert!(simulate(&odd, &m, &w, &c.with_devices(7), &cm).is_err());
    }

    #[test]
    fn rejects_degenerate_hardware() {
        let (m, w, mut c, cm) = setup();
        c.link_bandwidth = 0.0;
        assert!(simulate(&ParallelPlan::new(Strategy::SpRing), &m, &w, &c, &cm).is_err());
        c.link_bandwidth = 1e9;
        c.device_flops = 0.0;
        assert!(simulate(&ParallelPlan::new(Strategy::SpRing), &m, &w, &c, &cm).is_err());
    }

    #[test]
    fn comm_share_examples() {
        let pf = comm_share(32.1, 244.89, 8).unwrap();
        let sp = comm_share(37.3, 244.89, 8).unwrap();
        assert!((0.045..=0.047).contains(&pf), "{pf}");
        assert!((0.178..=0.180).contains(&sp), "{sp}");
        assert_eq!(comm_share(10.0, 80.0, 8).unwrap(), 0.0);
        assert!(comm_share(0.0, 1.0, 8).is_err());
        assert!(comm_share(11.0, 80.0, 8).unwrap() < comm_share(12.0, 80.0, 8).unwrap());
    }

    #[test]
    fn summary_and_gantt() {
        let (m, w, c, cm) = setup();
        let plan = ParallelPlan::new(Strategy::PipeFusion { patches: 4 });
        let (tl, s) = summarize(&plan, &m, &w, &c, &cm).unwrap();
        assert_eq!(s.makespan_s, tl.makespan_s);
        assert!(s.speedup > 1.0 && s.speedup < 4.0);
        assert!(s.comm_share > 0.0 && s.comm_share < 1.0);
        let g = tl.ascii_gantt(40);
        assert_eq!(g.lines().count(), 8);
        assert!(g.lines().all(|l| l.chars().count() == "d0c |".len() + 41));
        assert!(g.starts_with("d0c |0"));
    }

    #[test]
    fn trace_json_fields() {
        let (m, w, c, cm) = setup();
        let tl = simulate(&ParallelPlan::new(Strategy::PipeFusion { patches: 4 }), &m, &w, &c, &cm).unwrap();
        let v: serde_json::Value = serde_json::from_str(&tl.to_trace_json()).unwrap();
        let first = v.as_array().unwrap()[0].as_object().unwrap();
        let mut keys: Vec<_> = first.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["device", "dur_us", "name", "patch", "start_us", "stream", "timestep"]);
        let again = simulate(&ParallelPlan::new(Strategy::PipeFusion { patches: 4 }), &m, &w, &c, &cm).unwrap();
        assert_eq!(tl.to_trace_json(), again.to_trace_json());
    }
}
