//! Micro-step grids for the patch-level pipeline and for displaced patch
//! parallelism, with dependency edges and bubble accounting.
//!
//! Slots count up from 0; diffusion timesteps count down from `S-1` to 0.
//! A producer at slot `k` can feed a consumer at slot `k+1` at the earliest
//! (asynchronous P2P is a one-slot lag).

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Warmup,
    Steady,
    Bubble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    PipeFusion,
    DistriFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MicroStep {
    pub device: usize,
    pub slot: usize,
    pub patch: Option<usize>,
    pub timestep: Option<usize>,
    pub kind: SlotKind,
    /// Which block of layers runs here; `None` for bubbles.
    #[serde(skip)]
    pub stage: Option<usize>,
}

impl MicroStep {
    pub fn is_active(&self) -> bool {
        self.kind != SlotKind::Bubble
    }

    fn triple(&self) -> Option<Triple> {
        Some(Triple {
            patch: self.patch?,
            timestep: self.timestep?,
            stage: self.stage?,
        })
    }
}

/// Identifies one unit of work: a patch through one stage at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub patch: usize,
    pub timestep: usize,
    pub stage: usize,
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(patch {}, timestep {}, stage {})", self.patch, self.timestep, self.stage)
    }
}

/// Edge between indices into `Schedule::micro_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dependency {
    pub producer: usize,
    pub consumer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub devices: usize,
    pub patches: usize,
    pub steps: usize,
    pub warmup: usize,
    pub stages: usize,
    pub total_slots: usize,
    /// Full device x slot grid, ordered by (slot, device).
    pub micro_steps: Vec<MicroStep>,
    pub dependencies: Vec<Dependency>,
}

impl Schedule {
    /// A schedule with no work at all.
    pub fn empty(kind: ScheduleKind) -> Self {
        Schedule {
            kind,
            devices: 0,
            patches: 0,
            steps: 0,
            warmup: 0,
            stages: 0,
            total_slots: 0,
            micro_steps: Vec::new(),
            dependencies: Vec::new(),
        }
    }

    /// Slots taken by the synchronous warmup segment.
    pub fn warmup_slots(&self) -> usize {
        match self.kind {
            ScheduleKind::PipeFusion => self.warmup * self.devices * self.patches,
            ScheduleKind::DistriFusion => self.warmup,
        }
    }

    pub fn steady_slots(&self) -> usize {
        self.total_slots - self.warmup_slots()
    }

    pub fn timestep_of_step(&self, step_index: usize) -> usize {
        self.steps - 1 - step_index
    }

    pub fn get(&self, device: usize, slot: usize) -> Option<&MicroStep> {
        self.micro_steps
            .get(slot * self.devices + device)
            .filter(|m| m.device == device && m.slot == slot)
    }

    /// Active micro-steps of one device in slot order.
    pub fn device_sequence(&self, device: usize) -> Vec<MicroStep> {
        self.micro_steps
            .iter()
            .filter(|m| m.device == device && m.is_active())
            .copied()
            .collect()
    }

    /// Slot at which `device` runs `patch` of `timestep`.
    pub fn slot_index(&self) -> HashMap<(usize, usize, usize), usize> {
        self.micro_steps
            .iter()
            .filter(|m| m.is_active())
            .map(|m| ((m.device, m.patch.unwrap(), m.timestep.unwrap()), m.slot))
            .collect()
    }

    /// One row per device; digits are patch indices, `.` is idle. Warmup rows come first,
    /// prefixed with `w`.
    pub fn gantt(&self) -> String {
        let glyph = |m: &MicroStep| match m.patch {
            None => '.',
            Some(p) if p < 10 => (b'0' + p as u8) as char,
            Some(p) if p < 36 => (b'A' + (p - 10) as u8) as char,
            Some(_) => '#',
        };
        let warm = self.warmup_slots();
        let mut out = String::new();
        let mut rows = |prefix: &str, range: std::ops::Range<usize>| {
            for d in 0..self.devices {
                let line: String = range
                    .clone()
                    .map(|s| self.get(d, s).map(glyph).unwrap_or(' '))
                    .collect();
                out.push_str(&format!("{prefix}d{d} |{line}|\n"));
            }
        };
        if warm > 0 {
            rows("w", 0..warm);
        }
        if self.total_slots > warm {
            rows(" ", warm..self.total_slots);
        }
        out
    }

    /// JSON event list `[{device, slot, patch, timestep, kind}]`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.micro_steps).expect("micro steps serialize")
    }
}

fn fill_grid(devices: usize, total_slots: usize, active: Vec<MicroStep>) -> Vec<MicroStep> {
    let mut grid: Vec<MicroStep> = (0..total_slots)
        .flat_map(|slot| {
            (0..devices).map(move |device| MicroStep {
                device,
                slot,
                patch: None,
                timestep: None,
                kind: SlotKind::Bubble,
                stage: None,
            })
        })
        .collect();
    for m in active {
        let cell = &mut grid[m.slot * devices + m.device];
        debug_assert!(!cell.is_active(), "two micro-steps on device {} slot {}", m.device, m.slot);
        *cell = m;
    }
    grid
}

/// The patch-level pipeline: `devices` stages, `patches` patches, `steps` diffusion steps
/// of which the first `warmup` run synchronously.
pub fn build_pipefusion_schedule(
    devices: usize,
    patches: usize,
    steps: usize,
    warmup: usize,
) -> Result<Schedule> {
    ensure!(devices >= 1, "pipeline needs at least one device");
    ensure!(patches >= 1, "pipeline needs at least one patch");
    ensure!(steps >= 1, "need at least one diffusion step");
    ensure!(
        warmup <= steps,
        "warmup steps ({warmup}) must not exceed diffusion steps ({steps})"
    );
    let (n, m) = (devices, patches);
    let warm_slots = warmup * n * m;
    // A device can only restart patch j once the last stage has returned it.
    let period = m.max(n);
    let pipelined = steps - warmup;
    let total_slots = warm_slots
        + if pipelined > 0 {
            n - 1 + (pipelined - 1) * period + m
        } else {
            0
        };

    let mut active = Vec::with_capacity(steps * n * m);
    for s in 0..warmup {
        let t = steps - 1 - s;
        for d in 0..n {
            for j in 0..m {
                active.push(MicroStep {
                    device: d,
                    slot: s * n * m + d * m + j,
                    patch: Some(j),
                    timestep: Some(t),
                    kind: SlotKind::Warmup,
                    stage: Some(d),
                });
            }
        }
    }
    for i in 0..pipelined {
        let t = steps - 1 - warmup - i;
        for d in 0..n {
            for j in 0..m {
                active.push(MicroStep {
                    device: d,
                    slot: warm_slots + d + i * period + j,
                    patch: Some(j),
                    timestep: Some(t),
                    kind: SlotKind::Steady,
                    stage: Some(d),
                });
            }
        }
    }
    let micro_steps = fill_grid(n, total_slots, active);

    let index: HashMap<Triple, usize> = micro_steps
        .iter()
        .enumerate()
        .filter_map(|(i, ms)| ms.triple().map(|t| (t, i)))
        .collect();
    let at = |patch, timestep, stage| index[&Triple { patch, timestep, stage }];
    let mut dependencies = Vec::new();
    for (consumer, ms) in micro_steps.iter().enumerate() {
        let Some(Triple { patch: j, timestep: t, stage: d }) = ms.triple() else {
            continue;
        };
        let mut producers = Vec::with_capacity(2);
        let synchronous = ms.kind == SlotKind::Warmup;
        if d > 0 {
            producers.push(at(j, t, d - 1));
            if synchronous {
                // Full-sequence attention waits for every patch of the previous stage.
                producers.push(at(m - 1, t, d - 1));
            }
        } else if t + 1 < steps {
            // Element-wise update of this patch needs the previous step's output.
            producers.push(at(j, t + 1, n - 1));
            if synchronous {
                producers.push(at(m - 1, t + 1, n - 1));
            }
        }
        producers.dedup();
        dependencies.extend(producers.into_iter().map(|producer| Dependency { producer, consumer }));
    }

    Ok(Schedule {
        kind: ScheduleKind::PipeFusion,
        devices: n,
        patches: m,
        steps,
        warmup,
        stages: n,
        total_slots,
        micro_steps,
        dependencies,
    })
}

/// Displaced patch parallelism: every device runs the whole network on its own shard,
/// one slot per diffusion step, reading the other shards' KV from the previous step.
pub fn build_distrifusion_schedule(devices: usize, steps: usize, warmup: usize) -> Result<Schedule> {
    ensure!(devices >= 1, "need at least one device");
    ensure!(steps >= 1, "need at least one diffusion step");
    ensure!(
        warmup <= steps,
        "warmup steps ({warmup}) must not exceed diffusion steps ({steps})"
    );
    let active = (0..steps)
        .flat_map(|s| {
            (0..devices).map(move |d| MicroStep {
                device: d,
                slot: s,
                patch: Some(d),
                timestep: Some(steps - 1 - s),
                kind: if s < warmup { SlotKind::Warmup } else { SlotKind::Steady },
                stage: Some(0),
            })
        })
        .collect();
    let micro_steps = fill_grid(devices, steps, active);
    let mut dependencies = Vec::new();
    for s in 1..steps {
        for d in 0..devices {
            for src in 0..devices {
                dependencies.push(Dependency {
                    producer: (s - 1) * devices + src,
                    consumer: s * devices + d,
                });
            }
        }
    }
    Ok(Schedule {
        kind: ScheduleKind::DistriFusion,
        devices,
        patches: devices,
        steps,
        warmup,
        stages: 1,
        total_slots: steps,
        micro_steps,
        dependencies,
    })
}

/// Fraction of pipelined slots doing useful work: `M*S / (M*S + N - 1)`.
pub fn effective_compute_ratio(devices: usize, patches: usize, steps: usize) -> f64 {
    let work = (patches * steps) as f64;
    work / (work + devices as f64 - 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BubbleReport {
    /// Idle slots before a device's first and after its last pipelined micro-step.
    pub startup: Vec<usize>,
    /// Idle slots between a device's first and last pipelined micro-step.
    pub waits: Vec<usize>,
    /// Idle slots inside the synchronous warmup segment.
    pub warmup_idle: Vec<usize>,
    pub total: usize,
}

/// Idle slots in the pipelined segment, split into fill/drain and interior waits.
pub fn bubble_count(schedule: &Schedule) -> BubbleReport {
    let warm = schedule.warmup_slots();
    let n = schedule.devices;
    let mut startup = vec![0; n];
    let mut waits = vec![0; n];
    let mut warmup_idle = vec![0; n];
    for d in 0..n {
        let mut first = None;
        let mut last = 0;
        let mut busy = 0;
        for slot in 0..schedule.total_slots {
            let active = schedule.get(d, slot).is_some_and(|m| m.is_active());
            if slot < warm {
                warmup_idle[d] += usize::from(!active);
            } else if active {
                first.get_or_insert(slot);
                last = slot;
                busy += 1;
            }
        }
        match first {
            Some(first) => {
                startup[d] = (first - warm) + (schedule.total_slots - 1 - last);
                waits[d] = last - first + 1 - busy;
            }
            None => startup[d] = schedule.total_slots - warm,
        }
    }
    let total = startup.iter().sum::<usize>() + waits.iter().sum::<usize>();
    BubbleReport {
        startup,
        waits,
        warmup_idle,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Coverage { triple: Triple, count: usize },
    Ordering { producer: Triple, producer_slot: usize, consumer: Triple, consumer_slot: usize },
    Cycle { involved: Vec<Triple> },
    DeviceConflict { device: usize, slot: usize },
    BubbleMismatch { device: usize, slot: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Coverage { triple, count } => {
                write!(f, "{triple} scheduled {count} times (expected exactly once)")
            }
            Violation::Ordering { producer, producer_slot, consumer, consumer_slot } => write!(
                f,
                "{consumer} at slot {consumer_slot} does not follow its producer {producer} at slot {producer_slot}"
            ),
            Violation::Cycle { involved } => {
                write!(f, "dependency cycle through {} micro-steps", involved.len())?;
                if let Some(t) = involved.first() {
                    write!(f, " including {t}")?;
                }
                Ok(())
            }
            Violation::DeviceConflict { device, slot } => {
                write!(f, "device {device} has two micro-steps at slot {slot}")
            }
            Violation::BubbleMismatch { device, slot } => {
                write!(f, "device {device} slot {slot}: bubble kind and patch disagree")
            }
        }
    }
}

/// Checks exactly-once coverage, producer-before-consumer ordering and acyclicity.
pub fn validate_dependencies(schedule: &Schedule) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let steps = &schedule.micro_steps;

    let mut seen_cells = HashMap::new();
    let mut counts: HashMap<Triple, usize> = HashMap::new();
    for ms in steps {
        if (ms.kind == SlotKind::Bubble) != ms.patch.is_none() {
            violations.push(Violation::BubbleMismatch { device: ms.device, slot: ms.slot });
        }
        if ms.is_active() {
            if seen_cells.insert((ms.device, ms.slot), ()).is_some() {
                violations.push(Violation::DeviceConflict { device: ms.device, slot: ms.slot });
            }
            if let Some(t) = ms.triple() {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    for stage in 0..schedule.stages {
        for timestep in 0..schedule.steps {
            for patch in 0..schedule.patches {
                let triple = Triple { patch, timestep, stage };
                let count = counts.get(&triple).copied().unwrap_or(0);
                if count != 1 {
                    violations.push(Violation::Coverage { triple, count });
                }
            }
        }
    }

    let describe = |i: usize| steps[i].triple().unwrap_or(Triple { patch: usize::MAX, timestep: usize::MAX, stage: usize::MAX });
    for dep in &schedule.dependencies {
        let (p, c) = (&steps[dep.producer], &steps[dep.consumer]);
        if p.slot >= c.slot {
            violations.push(Violation::Ordering {
                producer: describe(dep.producer),
                producer_slot: p.slot,
                consumer: describe(dep.consumer),
                consumer_slot: c.slot,
            });
        }
    }

    // Kahn's algorithm over the edge list.
    let mut indegree = vec![0usize; steps.len()];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); steps.len()];
    for dep in &schedule.dependencies {
        indegree[dep.consumer] += 1;
        out[dep.producer].push(dep.consumer);
    }
    let mut queue: VecDeque<usize> = (0..steps.len()).filter(|&i| indegree[i] == 0).collect();
    let mut visited = 0;
    while let Some(i) = queue.pop_front() {
        visited += 1;
        for &c in &out[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if visited < steps.len() {
        let involved = (0..steps.len()).filter(|&i| indegree[i] > 0).map(describe).collect();
        violations.push(Violation::Cycle { involved });
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
