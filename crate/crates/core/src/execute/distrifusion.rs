//! Displaced patch parallelism.
//!
//! Worker `d` holds every layer and the `d`-th row block of the latent. At each
//! layer it recomputes its own keys and values and broadcasts them; the
//! broadcast of timestep `t` is what the other workers attend to at `t - 1`.
//! Synchronous steps wait for the broadcast of the current timestep instead.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;

use super::{euler_update, first_failure, FreshRead, LatentState, Mat, RunOutput, RunSpec, ToyDiT};
use crate::error::{ensure, Error, Result};

enum Packet {
    Kv(Kv),
    /// A peer failed; stop waiting for it.
    Abort,
}

struct Kv {
    t: usize,
    layer: usize,
    from: usize,
    k: Mat,
    v: Mat,
}

struct Shard<'a> {
    toy: &'a ToyDiT,
    spec: RunSpec,
    device: usize,
    x: Mat,
    h: Mat,
    own: Option<(Mat, Mat)>,
    /// Remote blocks by (timestep, layer, sender).
    store: HashMap<(usize, usize, usize), (Mat, Mat)>,
    zeros: Mat,
    fresh_reads: Vec<FreshRead>,
    stale_reads: usize,
}

impl<'a> Shard<'a> {
    fn new(toy: &'a ToyDiT, spec: RunSpec, device: usize, x_init: &Mat) -> Self {
        let rows = x_init.rows() / spec.workers;
        let x = x_init.slice_rows(device * rows, rows);
        Shard {
            toy,
            spec,
            device,
            h: x.clone(),
            x,
            own: None,
            store: HashMap::new(),
            zeros: Mat::zeros(rows, toy.hidden_size),
            fresh_reads: Vec::new(),
            stale_reads: 0,
        }
    }

    fn begin_step(&mut self, t: usize) {
        self.h = self.toy.embed(&self.x);
        self.store.retain(|&(src, _, _), _| src <= t + 1);
    }

    /// Timestep whose broadcast this step attends to; `None` means the zero buffer.
    fn source(&self, t: usize) -> Option<usize> {
        if self.spec.is_warmup(t) {
            Some(t)
        } else if t + 1 < self.spec.steps {
            Some(t + 1)
        } else {
            None
        }
    }

    /// Keys and values of this shard for layer `l`, to broadcast.
    fn publish(&mut self, l: usize) -> (Mat, Mat) {
        let kv = self.toy.kv(l, &self.h);
        self.own = Some(kv.clone());
        kv
    }

    fn missing(&self, t: usize, l: usize) -> bool {
        match self.source(t) {
            Some(src) => (0..self.spec.workers).any(|q| q != self.device && !self.store.contains_key(&(src, l, q))),
            None => false,
        }
    }

    fn attend(&mut self, t: usize, l: usize) -> Result<()> {
        let src = self.source(t);
        let (own_k, own_v) = self.own.take().expect("published before attending");
        let mut blocks: Vec<(&Mat, &Mat)> = Vec::with_capacity(self.spec.workers);
        for q in 0..self.spec.workers {
            if q == self.device {
                blocks.push((&own_k, &own_v));
                continue;
            }
            match src {
                Some(src) => {
                    let (k, v) = self
                        .store
                        .get(&(src, l, q))
                        .ok_or_else(|| Error::Channel(format!("worker {} is missing layer {l} of worker {q}", self.device)))?;
                    blocks.push((k, v));
                }
                None => blocks.push((&self.zeros, &self.zeros)),
            }
        }
        let stale = if src == Some(t) { 0 } else { self.spec.workers - 1 };
        self.stale_reads += stale;
        if l == 0 {
            self.fresh_reads.push(FreshRead {
                device: self.device,
                timestep: t,
                patch: self.device,
                fresh: self.spec.workers - stale,
            });
        }
        self.h = self.toy.finish_layer(l, &self.h, &blocks, t)?;
        Ok(())
    }

    fn end_step(&mut self) {
        self.x = euler_update(&self.x, &self.h, self.spec.step_size);
    }
}

fn prepare(toy: &ToyDiT, x_init: &Mat, spec: &RunSpec) -> Result<()> {
    spec.validate_common(toy, x_init)?;
    ensure!(
        x_init.rows().is_multiple_of(spec.workers),
        "sequence length {} must be divisible by worker count {}",
        x_init.rows(),
        spec.workers
    );
    Ok(())
}

fn collect(shards: Vec<Shard<'_>>, x_init: &Mat) -> RunOutput {
    let mut x = Mat::zeros(x_init.rows(), x_init.cols());
    let mut fresh_reads = Vec::new();
    let mut stale_reads = 0;
    for mut s in shards {
        x.set_rows(s.device * s.x.rows(), &s.x);
        fresh_reads.append(&mut s.fresh_reads);
        stale_reads += s.stale_reads;
    }
    fresh_reads.sort_by(|a, b| (a.device, b.timestep, a.patch).cmp(&(b.device, a.timestep, b.patch)));
    RunOutput {
        final_state: LatentState::new(x, 0),
        fresh_reads,
        stale_reads,
    }
}

/// One thread per worker, all-to-all bounded channels.
pub fn run_distrifusion(toy: &ToyDiT, x_init: &Mat, spec: &RunSpec) -> Result<RunOutput> {
    prepare(toy, x_init, spec)?;
    let n = spec.workers;
    let layers = toy.layer_count();
    // A worker can run at most one timestep ahead of any peer, so this never fills.
    let capacity = n * (2 * layers + 2);
    let (senders, receivers): (Vec<SyncSender<Packet>>, Vec<Receiver<Packet>>) =
        (0..n).map(|_| sync_channel(capacity)).unzip();
    let results: Vec<Result<Shard<'_>>> = thread::scope(|scope| {
        let handles: Vec<_> = receivers
            .into_iter()
            .enumerate()
            .map(|(d, rx)| {
                let peers: Vec<(usize, SyncSender<Packet>)> = senders
                    .iter()
                    .enumerate()
                    .filter(|&(q, _)| q != d)
                    .map(|(q, tx)| (q, tx.clone()))
                    .collect();
                scope.spawn(move || -> Result<Shard<'_>> {
                    let mut shard = Shard::new(toy, *spec, d, x_init);
                    let run = worker(&mut shard, &peers, &rx);
                    if run.is_err() {
                        for (_, tx) in &peers {
                            let _ = tx.try_send(Packet::Abort);
                        }
                    }
                    run.map(|()| shard)
                })
            })
            .collect();
        drop(senders);
        handles
            .into_iter()
            .map(|h| h.join().expect("distrifusion worker panicked"))
            .collect()
    });
    Ok(collect(first_failure(results)?, x_init))
}

fn worker(shard: &mut Shard<'_>, peers: &[(usize, SyncSender<Packet>)], rx: &Receiver<Packet>) -> Result<()> {
    let (d, spec) = (shard.device, shard.spec);
    for t in (0..spec.steps).rev() {
        shard.begin_step(t);
        // The last broadcast is only read by a synchronous final step.
        let broadcast = t > 0 || spec.is_warmup(t);
        for l in 0..shard.toy.layer_count() {
            let (k, v) = shard.publish(l);
            if broadcast {
                for (q, tx) in peers {
                    let kv = Kv {
                        t,
                        layer: l,
                        from: d,
                        k: k.clone(),
                        v: v.clone(),
                    };
                    tx.send(Packet::Kv(kv))
                        .map_err(|_| Error::Channel(format!("worker {d} lost worker {q}")))?;
                }
            }
            while shard.missing(t, l) {
                match rx.recv() {
                    Ok(Packet::Kv(m)) => {
                        shard.store.insert((m.t, m.layer, m.from), (m.k, m.v));
                    }
                    Ok(Packet::Abort) | Err(_) => {
                        return Err(Error::Channel(format!("worker {d} lost its peers")));
                    }
                }
            }
            shard.attend(t, l)?;
        }
        shard.end_step();
    }
    Ok(())
}

/// Same protocol on the calling thread: per layer, every worker publishes, then every worker
/// attends.
pub fn run_distrifusion_reference(toy: &ToyDiT, x_init: &Mat, spec: &RunSpec) -> Result<RunOutput> {
    prepare(toy, x_init, spec)?;
    let n = spec.workers;
    let mut shards: Vec<Shard<'_>> = (0..n).map(|d| Shard::new(toy, *spec, d, x_init)).collect();
    for t in (0..spec.steps).rev() {
        for s in shards.iter_mut() {
            s.begin_step(t);
        }
        for l in 0..toy.layer_count() {
            let mut outbox = VecDeque::new();
            for s in shards.iter_mut() {
                let (k, v) = s.publish(l);
                outbox.push_back((s.device, k, v));
            }
            while let Some((from, k, v)) = outbox.pop_front() {
                for s in shards.iter_mut().filter(|s| s.device != from) {
                    s.store.insert((t, l, from), (k.clone(), v.clone()));
                }
            }
            for s in shards.iter_mut() {
                s.attend(t, l)?;
            }
        }
        for s in shards.iter_mut() {
            s.end_step();
        }
    }
    Ok(collect(shards, x_init))
}
