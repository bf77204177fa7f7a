//! Patch pipeline over layer stages.
//!
//! Worker `d` owns layers `[d*L/N, (d+1)*L/N)` and a key/value buffer for every
//! patch of those layers. Activations flow stage to stage over bounded
//! channels arranged in a ring; the last stage sends the predicted noise back
//! to stage 0, which holds the latent and applies the update patch by patch.
//! A patch's own keys and values are always recomputed; other patches' come
//! from the buffer, either already refreshed this timestep or left over from
//! the previous one.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;

use super::{euler_update, first_failure, FreshRead, LatentState, Mat, RunOutput, RunSpec, ToyDiT};
use crate::error::{ensure, Error, Result};
use crate::schedule::{build_pipefusion_schedule, MicroStep, Schedule, SlotKind};

#[derive(Debug)]
enum Msg {
    /// Whole sequence from a synchronous step.
    Full { t: usize, h: Mat },
    Patch { t: usize, patch: usize, h: Mat },
}

struct CacheEntry {
    k: Mat,
    v: Mat,
    source: usize,
}

struct Stage<'a> {
    toy: &'a ToyDiT,
    spec: RunSpec,
    device: usize,
    layers: Range<usize>,
    patch_len: usize,
    /// `cache[layer - layers.start][patch]`.
    cache: Vec<Vec<CacheEntry>>,
    /// The latent; only stage 0 holds one.
    x: Option<Mat>,
    fresh_reads: Vec<FreshRead>,
    stale_reads: usize,
}

fn protocol(expected: &str, got: &Msg) -> Error {
    Error::Channel(format!("expected {expected}, received {got:?}"))
}

impl<'a> Stage<'a> {
    fn new(toy: &'a ToyDiT, spec: RunSpec, device: usize, x_init: &Mat) -> Self {
        let per = toy.layer_count() / spec.workers;
        let patch_len = x_init.rows() / spec.patches;
        let hs = toy.hidden_size;
        // Zero buffers tagged as one step older than the first timestep.
        let cache = (0..per)
            .map(|_| {
                (0..spec.patches)
                    .map(|_| CacheEntry {
                        k: Mat::zeros(patch_len, hs),
                        v: Mat::zeros(patch_len, hs),
                        source: spec.steps,
                    })
                    .collect()
            })
            .collect();
        Stage {
            toy,
            spec,
            device,
            layers: device * per..(device + 1) * per,
            patch_len,
            cache,
            x: (device == 0).then(|| x_init.clone()),
            fresh_reads: Vec::new(),
            stale_reads: 0,
        }
    }

    /// Runs one schedule micro-step; returns the message for the next stage.
    fn step(&mut self, ms: &MicroStep, recv: &mut dyn FnMut() -> Result<Msg>) -> Result<Option<Msg>> {
        let (j, t) = (ms.patch.expect("active"), ms.timestep.expect("active"));
        let warm = ms.kind == SlotKind::Warmup;
        // A synchronous step moves the whole sequence in its first micro-step.
        if warm && j > 0 {
            return Ok(None);
        }
        let h = if self.device == 0 {
            if t + 1 < self.spec.steps {
                self.absorb(t + 1, j, recv)?;
            }
            let x = self.x.as_ref().expect("stage 0 holds the latent");
            if warm {
                self.toy.embed(x)
            } else {
                self.toy.embed(&x.slice_rows(j * self.patch_len, self.patch_len))
            }
        } else {
            match recv()? {
                Msg::Full { t: mt, h } if warm && mt == t => h,
                Msg::Patch { t: mt, patch, h } if !warm && mt == t && patch == j => h,
                other => return Err(protocol(&format!("input for patch {j} at timestep {t}"), &other)),
            }
        };
        Ok(Some(if warm {
            Msg::Full {
                t,
                h: self.run_full(h, t)?,
            }
        } else {
            Msg::Patch {
                t,
                patch: j,
                h: self.run_patch(h, j, t)?,
            }
        }))
    }

    /// Stage 0: applies the noise predicted at `src_t` to patch `j` (to the whole latent after
    /// a synchronous step).
    fn absorb(&mut self, src_t: usize, j: usize, recv: &mut dyn FnMut() -> Result<Msg>) -> Result<()> {
        let eta = self.spec.step_size;
        let pl = self.patch_len;
        let x = self.x.as_mut().expect("stage 0 holds the latent");
        if self.spec.is_warmup(src_t) {
            if j > 0 {
                return Ok(());
            }
            match recv()? {
                Msg::Full { t, h } if t == src_t => *x = euler_update(x, &h, eta),
                other => return Err(protocol(&format!("noise for timestep {src_t}"), &other)),
            }
        } else {
            match recv()? {
                Msg::Patch { t, patch, h } if t == src_t && patch == j => {
                    let rows = euler_update(&x.slice_rows(j * pl, pl), &h, eta);
                    x.set_rows(j * pl, &rows);
                }
                other => return Err(protocol(&format!("noise for patch {j} at timestep {src_t}"), &other)),
            }
        }
        Ok(())
    }

    fn run_full(&mut self, mut h: Mat, t: usize) -> Result<Mat> {
        let pl = self.patch_len;
        for (i, l) in self.layers.clone().enumerate() {
            let (k, v) = self.toy.kv(l, &h);
            for (q, entry) in self.cache[i].iter_mut().enumerate() {
                *entry = CacheEntry {
                    k: k.slice_rows(q * pl, pl),
                    v: v.slice_rows(q * pl, pl),
                    source: t,
                };
            }
            h = self.toy.finish_layer(l, &h, &[(&k, &v)], t)?;
        }
        Ok(h)
    }

    fn run_patch(&mut self, mut h: Mat, j: usize, t: usize) -> Result<Mat> {
        for (i, l) in self.layers.clone().enumerate() {
            let (k, v) = self.toy.kv(l, &h);
            self.cache[i][j] = CacheEntry { k, v, source: t };
            let mut fresh = 0;
            for (q, entry) in self.cache[i].iter().enumerate() {
                if entry.source != t && entry.source != t + 1 {
                    return Err(Error::Staleness {
                        layer: l,
                        patch: q,
                        step: t,
                        source_step: entry.source,
                    });
                }
                fresh += usize::from(entry.source == t);
            }
            self.stale_reads += self.spec.patches - fresh;
            if i == 0 {
                self.fresh_reads.push(FreshRead {
                    device: self.device,
                    timestep: t,
                    patch: j,
                    fresh,
                });
            }
            let blocks: Vec<(&Mat, &Mat)> = self.cache[i].iter().map(|e| (&e.k, &e.v)).collect();
            h = self.toy.finish_layer(l, &h, &blocks, t)?;
        }
        Ok(h)
    }

    /// Stage 0 after its last micro-step: applies the noise of timestep 0.
    fn finish(&mut self, recv: &mut dyn FnMut() -> Result<Msg>) -> Result<()> {
        if self.device == 0 {
            for j in 0..self.spec.patches {
                self.absorb(0, j, recv)?;
            }
        }
        Ok(())
    }
}

fn prepare(toy: &ToyDiT, x_init: &Mat, spec: &RunSpec) -> Result<Schedule> {
    spec.validate_common(toy, x_init)?;
    ensure!(spec.patches >= 1, "patch count must be at least 1");
    ensure!(
        toy.layer_count().is_multiple_of(spec.workers),
        "layer count {} must be divisible by worker count {}",
        toy.layer_count(),
        spec.workers
    );
    ensure!(
        x_init.rows().is_multiple_of(spec.patches),
        "sequence length {} must be divisible by patch count {}",
        x_init.rows(),
        spec.patches
    );
    build_pipefusion_schedule(spec.workers, spec.patches, spec.steps, spec.warmup)
}

fn collect(stages: Vec<Stage<'_>>) -> RunOutput {
    let mut fresh_reads = Vec::new();
    let mut stale_reads = 0;
    let mut x = None;
    for mut s in stages {
        fresh_reads.append(&mut s.fresh_reads);
        stale_reads += s.stale_reads;
        if let Some(latent) = s.x.take() {
            x = Some(latent);
        }
    }
    fresh_reads.sort_by(|a, b| {
        (a.device, b.timestep, a.patch).cmp(&(b.device, a.timestep, b.patch))
    });
    RunOutput {
        final_state: LatentState::new(x.expect("stage 0 present"), 0),
        fresh_reads,
        stale_reads,
    }
}

/// One thread per stage.
pub fn run_pipefusion(toy: &ToyDiT, x_init: &Mat, spec: &RunSpec) -> Result<RunOutput> {
    let schedule = prepare(toy, x_init, spec)?;
    let n = spec.workers;
    // Channel d feeds stage d. At most `patches` messages circulate at once.
    let (senders, receivers): (Vec<SyncSender<Msg>>, Vec<Receiver<Msg>>) =
        (0..n).map(|_| sync_channel(spec.patches)).unzip();
    let results: Vec<Result<Stage<'_>>> = thread::scope(|scope| {
        let handles: Vec<_> = receivers
            .into_iter()
            .enumerate()
            .map(|(d, rx)| {
                let tx = senders[(d + 1) % n].clone();
                let sequence = schedule.device_sequence(d);
                scope.spawn(move || -> Result<Stage<'_>> {
                    let mut stage = Stage::new(toy, *spec, d, x_init);
                    let mut recv = || {
                        rx.recv()
                            .map_err(|_| Error::Channel(format!("stage {d} lost its upstream")))
                    };
                    for ms in sequence.iter().filter(|m| m.is_active()) {
                        if let Some(msg) = stage.step(ms, &mut recv)? {
                            tx.send(msg)
                                .map_err(|_| Error::Channel(format!("stage {d} lost its downstream")))?;
                        }
                    }
                    drop(tx);
                    stage.finish(&mut recv)?;
                    Ok(stage)
                })
            })
            .collect();
        drop(senders);
        handles
            .into_iter()
            .map(|h| h.join().expect("pipeline worker panicked"))
            .collect()
    });
    let stages = first_failure(results)?;
    Ok(collect(stages))
}

/// Same protocol on the calling thread, micro-steps taken in schedule slot order.
pub fn run_pipefusion_reference(toy: &ToyDiT, x_init: &Mat, spec: &RunSpec) -> Result<RunOutput> {
    let schedule = prepare(toy, x_init, spec)?;
    let n = spec.workers;
    let mut stages: Vec<Stage<'_>> = (0..n).map(|d| Stage::new(toy, *spec, d, x_init)).collect();
    let mut queues: Vec<VecDeque<Msg>> = (0..n).map(|_| VecDeque::new()).collect();
    for ms in schedule.micro_steps.iter().filter(|m| m.is_active()) {
        let d = ms.device;
        let inbox = &mut queues[d];
        let out = stages[d].step(ms, &mut || {
            inbox
                .pop_front()
                .ok_or_else(|| Error::Channel(format!("stage {d} has no input at slot {}", ms.slot)))
        })?;
        if let Some(msg) = out {
            queues[(d + 1) % n].push_back(msg);
        }
    }
    let inbox = &mut queues[0];
    stages[0].finish(&mut || {
        inbox
            .pop_front()
            .ok_or_else(|| Error::Channel("stage 0 is missing final noise".into()))
    })?;
    Ok(collect(stages))
}

#[cfg(test)]
mod tests {
    use super::super::{build_toy_model, divergence, initial_latent, serial_reference};
    use super::*;

    fn spec(workers: usize, patches: usize, warmup: usize) -> RunSpec {
        RunSpec {
            steps: 6,
            warmup,
            workers,
            patches,
            step_size: 0.05,
        }
    }

    #[test]
    fn full_warmup_matches_serial() {
        let toy = build_toy_model(1, 4, 16, 2, 2).unwrap();
        let x = initial_latent(1, 16, 16);
        let serial = serial_reference(&toy, &x, 6, 0.05).unwrap().final_state.x;
        for (n, m) in [(2, 2), (4, 4), (2, 8), (4, 2)] {
            let out = run_pipefusion(&toy, &x, &spec(n, m, 6)).unwrap();
            assert_eq!(out.final_state.x, serial, "n={n} m={m}");
            assert_eq!(out.stale_reads, 0);
        }
    }

    #[test]
    fn threads_match_interpreter() {
        let toy = build_toy_model(2, 4, 16, 2, 2).unwrap();
        let x = initial_latent(2, 16, 16);
        for (n, m, w) in [(2, 2, 0), (4, 4, 1), (2, 4, 2), (4, 2, 1), (1, 4, 0)] {
            let a = run_pipefusion(&toy, &x, &spec(n, m, w)).unwrap();
            let b = run_pipefusion_reference(&toy, &x, &spec(n, m, w)).unwrap();
            assert_eq!(a, b, "n={n} m={m} w={w}");
        }
    }

    #[test]
    fn stale_run_differs_but_stays_close() {
        let toy = build_toy_model(3, 4, 16, 2, 2).unwrap();
        let x = initial_latent(3, 16, 16);
        let serial = serial_reference(&toy, &x, 6, 0.05).unwrap().final_state.x;
        let out = run_pipefusion(&toy, &x, &spec(2, 4, 1)).unwrap();
        let d = divergence(&out.final_state.x, &serial).unwrap();
        assert!(d > 0.0 && d < 0.5, "{d}");
        assert!(out.stale_reads > 0);
    }

    #[test]
    fn divisibility_errors_name_the_constraint() {
        let toy = build_toy_model(0, 4, 16, 2, 2).unwrap();
        let x = initial_latent(0, 16, 16);
        let e = run_pipefusion(&toy, &x, &spec(3, 4, 0)).unwrap_err();
        assert!(e.to_string().contains("divisible by worker count"), "{e}");
        let e = run_pipefusion(&toy, &x, &spec(2, 3, 0)).unwrap_err();
        assert!(e.to_string().contains("divisible by patch count"), "{e}");
        assert!(run_pipefusion(&toy, &x, &spec(2, 2, 7)).unwrap_err().is_usage());
    }
}
