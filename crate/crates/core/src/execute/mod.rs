//! Numerical emulation of stale-activation execution on a toy network.
//!
//! [`serial_reference`] runs the plain sampling loop. [`run_pipefusion`] and
//! [`run_distrifusion`] run the same loop over one thread per simulated device,
//! reusing one-step-old keys and values the way each method does. The
//! `*_reference` variants interpret the identical protocol on one thread and
//! serve as the oracle for the threaded runs.

mod distrifusion;
mod pipefusion;
mod tensor;
mod toy;

use serde::Serialize;

use crate::error::{ensure, Error, Result};

pub use distrifusion::{run_distrifusion, run_distrifusion_reference};
pub use pipefusion::{run_pipefusion, run_pipefusion_reference};
pub use tensor::{attention, Mat};
pub use toy::{build_toy_model, initial_latent, ToyDiT, ToyLayer};

/// Latent `x_t` about to be denoised at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Mat,
    pub timestep: usize,
}

impl LatentState {
    pub fn new(x: Mat, timestep: usize) -> Self {
        LatentState { x, timestep }
    }
}

/// `x - step_size * eps`, element by element.
pub fn euler_update(x: &Mat, eps: &Mat, step_size: f64) -> Mat {
    x.sub(&eps.map(|e| step_size * e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Final latent, after the update at timestep 0.
    pub final_state: LatentState,
    /// `x` before each step, from timestep `S-1` down, then the final latent.
    pub states: Vec<Mat>,
}

/// Plain sequential sampling: for `t = S-1 .. 0`, `x <- x - step_size * eps(x)`.
pub fn serial_reference(toy: &ToyDiT, x_init: &Mat, steps: usize, step_size: f64) -> Result<Trajectory> {
    ensure!(steps >= 1, "diffusion steps must be at least 1");
    let mut x = x_init.clone();
    let mut states = vec![x.clone()];
    for t in (0..steps).rev() {
        let eps = toy.forward(&x, t)?;
        x = euler_update(&x, &eps, step_size);
        states.push(x.clone());
    }
    Ok(Trajectory {
        final_state: LatentState::new(x, 0),
        states,
    })
}

/// Relative Frobenius distance `|a - b| / |b|`.
pub fn divergence(a: &Mat, b: &Mat) -> Result<f64> {
    ensure!(
        (a.rows(), a.cols()) == (b.rows(), b.cols()),
        "shape mismatch: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
    let denom = b.frobenius_norm();
    ensure!(denom > 0.0, "divergence against an all-zero reference is undefined");
    Ok(a.sub(b).frobenius_norm() / denom)
}

/// Unwraps every worker result. When several workers fail, a root cause is preferred over
/// the channel errors it triggers in the others.
fn first_failure<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut err: Option<Error> = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                if err.as_ref().is_none_or(|prev| matches!(prev, Error::Channel(_))) {
                    err = Some(e);
                }
            }
        }
    }
    match err {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

/// Shape of a parallel run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSpec {
    pub steps: usize,
    pub warmup: usize,
    pub workers: usize,
    /// PipeFusion patch count; DistriFusion always uses one patch per worker.
    pub patches: usize,
    pub step_size: f64,
}

impl RunSpec {
    fn validate_common(&self, toy: &ToyDiT, x: &Mat) -> Result<()> {
        ensure!(self.steps >= 1, "diffusion steps must be at least 1");
        ensure!(self.workers >= 1, "worker count must be at least 1");
        ensure!(
            self.warmup <= self.steps,
            "warmup steps ({}) must not exceed diffusion steps ({})",
            self.warmup,
            self.steps
        );
        ensure!(
            x.cols() == toy.hidden_size,
            "latent width {} does not match hidden size {}",
            x.cols(),
            toy.hidden_size
        );
        Ok(())
    }

    fn is_warmup(&self, t: usize) -> bool {
        self.steps - 1 - t < self.warmup
    }
}

/// How many key/value blocks a micro-step read fresh (produced at its own timestep).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FreshRead {
    pub device: usize,
    pub timestep: usize,
    pub patch: usize,
    pub fresh: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub final_state: LatentState,
    /// One record per pipelined micro-step, sorted by (device, timestep descending, patch).
    pub fresh_reads: Vec<FreshRead>,
    /// Key/value blocks read from the previous timestep.
    pub stale_reads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AutoWarmup {
    pub warmup: usize,
    /// False when the threshold was never met and every step stayed synchronous.
    pub threshold_met: bool,
}

/// Runs the serial loop until the relative latent change of one step drops below
/// `threshold`; the number of steps run so far becomes the warmup count.
pub fn auto_warmup(toy: &ToyDiT, x_init: &Mat, steps: usize, step_size: f64, threshold: f64) -> Result<AutoWarmup> {
    ensure!(steps >= 1, "diffusion steps must be at least 1");
    ensure!(threshold >= 0.0, "warmup threshold must be non-negative (got {threshold})");
    let mut x = x_init.clone();
    for (done, t) in (0..steps).rev().enumerate() {
        let eps = toy.forward(&x, t)?;
        let next = euler_update(&x, &eps, step_size);
        let norm = x.frobenius_norm();
        let change = if norm > 0.0 {
            next.sub(&x).frobenius_norm() / norm
        } else {
            f64::INFINITY
        };
        if change < threshold {
            return Ok(AutoWarmup {
                warmup: done + 1,
                threshold_met: true,
            });
        }
        x = next;
    }
    Ok(AutoWarmup {
        warmup: steps,
        threshold_met: false,
    })
}

/// Record of one emulated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub seed: u64,
    #[serde(rename = "L")]
    pub layers: usize,
    pub hs: usize,
    pub heads: usize,
    pub p: usize,
    #[serde(rename = "S")]
    pub steps: usize,
    #[serde(rename = "W")]
    pub warmup: usize,
    #[serde(rename = "N")]
    pub workers: usize,
    #[serde(rename = "M")]
    pub patches: usize,
    pub strategy: String,
    #[serde(rename = "η")]
    pub step_size: f64,
    /// Against the serial run; zero for the serial run itself.
    pub divergence: f64,
    /// Seconds; the only field that changes between identical runs.
    pub wall_time: f64,
}
