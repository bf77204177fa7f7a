//! Age of the KV data each active micro-step attends to.
//!
//! An entry records, for the device computing at a slot, how many diffusion
//! steps old its buffered copy of every patch is. A device sees its own
//! recomputations immediately; other devices' output for the same layers only
//! arrives in a later slot. Patches never computed yet come from the initial
//! buffer and count as one step old.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::schedule::{Schedule, ScheduleKind, SlotKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FreshnessEntry {
    pub slot: usize,
    /// Observing device.
    pub device: usize,
    pub timestep: usize,
    pub patch: usize,
    /// Diffusion steps since this patch's KV was produced; 0 is fresh.
    pub age: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreshnessMap {
    pub kind: ScheduleKind,
    pub patches: usize,
    pub entries: Vec<FreshnessEntry>,
}

impl FreshnessMap {
    pub fn max_age(&self) -> usize {
        self.entries.iter().map(|e| e.age).max().unwrap_or(0)
    }

    pub fn ages_at(&self, slot: usize, device: usize) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.slot == slot && e.device == device)
            .map(|e| e.age)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["slot", "device", "patch", "age"]).expect("csv header");
        for e in &self.entries {
            w.serialize((e.slot, e.device, e.patch, e.age)).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf-8")
    }

    /// Per-timestep strips: one line per device, one `[..]` group per slot,
    /// `#` fresh and `-` stale.
    pub fn heat_strip(&self) -> String {
        let mut by_step: Vec<usize> = self.entries.iter().map(|e| e.timestep).collect();
        by_step.sort_unstable_by(|a, b| b.cmp(a));
        by_step.dedup();
        let mut out = String::new();
        for t in by_step {
            writeln!(out, "timestep {t}").unwrap();
            let mut devices: Vec<usize> = self
                .entries
                .iter()
                .filter(|e| e.timestep == t)
                .map(|e| e.device)
                .collect();
            devices.sort_unstable();
            devices.dedup();
            for d in devices {
                let mut line = format!("  d{d}");
                let mut slot = None;
                for e in self.entries.iter().filter(|e| e.timestep == t && e.device == d) {
                    if slot != Some(e.slot) {
                        if slot.is_some() {
                            line.push(']');
                        }
                        line.push_str(" [");
                        slot = Some(e.slot);
                    }
                    line.push(if e.age == 0 { '#' } else { '-' });
                }
                if slot.is_some() {
                    line.push(']');
                }
                writeln!(out, "{line}").unwrap();
            }
        }
        out
    }
}

/// Replays `schedule` and records the age of every patch as seen by each active micro-step.
type Production = (usize, usize, usize);

pub fn freshness_map(schedule: &Schedule) -> FreshnessMap {
    // (stage, patch) -> every (slot, device, timestep) that computed it.
    let mut produced: HashMap<(usize, usize), Vec<Production>> = HashMap::new();
    for ms in schedule.micro_steps.iter().filter(|m| m.is_active()) {
        produced
            .entry((ms.stage.unwrap(), ms.patch.unwrap()))
            .or_default()
            .push((ms.slot, ms.device, ms.timestep.unwrap()));
    }

    let mut entries = Vec::new();
    for ms in schedule.micro_steps.iter().filter(|m| m.is_active()) {
        let (stage, t) = (ms.stage.unwrap(), ms.timestep.unwrap());
        for q in 0..schedule.patches {
            let age = if ms.kind == SlotKind::Warmup {
                0
            } else {
                produced
                    .get(&(stage, q))
                    .into_iter()
                    .flatten()
                    .filter(|&&(slot, dev, _)| {
                        if dev == ms.device {
                            slot <= ms.slot
                        } else {
                            slot < ms.slot
                        }
                    })
                    .map(|&(_, _, src_t)| src_t)
                    .min()
                    .map_or(1, |src_t| src_t - t)
            };
            entries.push(FreshnessEntry {
                slot: ms.slot,
                device: ms.device,
                timestep: t,
                patch: q,
                age,
            });
        }
    }
    FreshnessMap {
        kind: schedule.kind,
        patches: schedule.patches,
        entries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreshFraction {
    pub slot: usize,
    pub device: usize,
    pub timestep: usize,
    pub fresh: usize,
    pub fraction: f64,
}

/// Fraction of fresh patches seen by each active (slot, device), in slot order.
pub fn fresh_area_series(schedule: &Schedule) -> Vec<FreshFraction> {
    let map = freshness_map(schedule);
    let mut out: Vec<FreshFraction> = Vec::new();
    for e in &map.entries {
        match out.last_mut() {
            Some(last) if last.slot == e.slot && last.device == e.device => {
                last.fresh += usize::from(e.age == 0);
            }
            _ => out.push(FreshFraction {
                slot: e.slot,
                device: e.device,
                timestep: e.timestep,
                fresh: usize::from(e.age == 0),
                fraction: 0.0,
            }),
        }
    }
    for f in &mut out {
        f.fraction = f.fresh as f64 / schedule.patches as f64;
    }
    out
}

/// Average age over every (slot, device, patch) entry.
pub fn mean_staleness(schedule: &Schedule) -> f64 {
    let map = freshness_map(schedule);
    if map.entries.is_empty() {
        return 0.0;
    }
    map.entries.iter().map(|e| e.age as f64).sum::<f64>() / map.entries.len() as f64
}
