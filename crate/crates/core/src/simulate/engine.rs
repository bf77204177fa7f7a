//! List-scheduling event replay.
//!
//! Tasks are bound to one (device, stream) resource and run in insertion
//! order on that resource. A task starts once its resource is free and every
//! dependency has finished. Dependencies must already be inserted, so one pass
//! in insertion order assigns every start time.

use std::collections::HashMap;

use super::{Event, Stream};

#[derive(Debug, Clone)]
pub(crate) struct Task {
    pub device: usize,
    pub stream: Stream,
    pub label: &'static str,
    pub patch: Option<usize>,
    pub timestep: Option<usize>,
    pub start: f64,
    pub end: f64,
    /// When the task could have started had every transfer been instantaneous.
    ready_without_comm: f64,
    /// Idle time on a compute stream caused by waiting for transfers.
    pub comm_stall: f64,
}

#[derive(Debug, Default)]
pub(crate) struct Engine {
    pub tasks: Vec<Task>,
    free: HashMap<(usize, Stream), f64>,
}

pub(crate) struct Spec<'a> {
    pub device: usize,
    pub stream: Stream,
    pub label: &'static str,
    pub duration: f64,
    pub deps: &'a [usize],
    pub patch: Option<usize>,
    pub timestep: Option<usize>,
}

impl Engine {
    pub fn add(&mut self, spec: Spec<'_>) -> usize {
        let id = self.tasks.len();
        let mut ready: f64 = 0.0;
        let mut ready_nc: f64 = 0.0;
        for &d in spec.deps {
            assert!(d < id, "dependency {d} inserted after its consumer {id}");
            let dep = &self.tasks[d];
            ready = ready.max(dep.end);
            ready_nc = ready_nc.max(match dep.stream {
                Stream::Compute => dep.end,
                Stream::Comm | Stream::Exchange => dep.ready_without_comm,
            });
        }
        let key = (spec.device, spec.stream);
        let previous = self.free.get(&key).copied();
        let free = previous.unwrap_or(0.0);
        let start = free.max(ready);
        let end = start + spec.duration;
        let comm_stall = match (spec.stream, previous) {
            (Stream::Compute, Some(_)) => (start - free.max(ready_nc)).max(0.0),
            _ => 0.0,
        };
        self.free.insert(key, end);
        self.tasks.push(Task {
            device: spec.device,
            stream: spec.stream,
            label: spec.label,
            patch: spec.patch,
            timestep: spec.timestep,
            start,
            end,
            ready_without_comm: free.max(ready_nc),
            comm_stall,
        });
        id
    }

    pub fn events(&self) -> Vec<Event> {
        self.tasks
            .iter()
            .map(|t| Event {
                device: t.device,
                stream: t.stream,
                label: t.label.to_string(),
                start_s: t.start,
                duration_s: t.end - t.start,
                patch: t.patch,
                timestep: t.timestep,
            })
            .collect()
    }
}
