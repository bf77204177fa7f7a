//! Static description of the network, the job and the hardware, plus the
//! parallel plan that maps one onto the other.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Network shape. Sizes are element counts; `bytes_per_element` fixes the precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub param_count: u64,
    pub latent_channels: usize,
    pub mlp_ratio: f64,
    pub bytes_per_element: u32,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, "model.layers must be at least 1");
        ensure!(self.hidden_size >= 1, "model.hidden_size must be at least 1");
        ensure!(self.heads >= 1, "model.heads must be at least 1");
        ensure!(
            self.hidden_size.is_multiple_of(self.heads),
            "model.hidden_size ({}) must be divisible by model.heads ({})",
            self.hidden_size,
            self.heads
        );
        ensure!(self.latent_channels >= 1, "model.latent_channels must be at least 1");
        ensure!(
            self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0,
            "model.mlp_ratio must be positive"
        );
        ensure!(
            matches!(self.bytes_per_element, 1 | 2 | 4 | 8),
            "model.bytes_per_element must be one of 1, 2, 4, 8 (got {})",
            self.bytes_per_element
        );
        Ok(())
    }
}

impl Default for ModelSpec {
    /// A PixArt-sized backbone. Hidden size, heads and parameter count are illustrative.
    fn default() -> Self {
        ModelSpec {
            layers: 28,
            hidden_size: 1152,
            heads: 16,
            param_count: 600_000_000,
            latent_channels: 4,
            mlp_ratio: 4.0,
            bytes_per_element: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Latent tokens `p`.
    pub seq_len: usize,
    pub diffusion_steps: usize,
    pub warmup_steps: usize,
    pub step_size: f64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.seq_len >= 1, "workload.seq_len must be at least 1");
        ensure!(self.diffusion_steps >= 1, "workload.diffusion_steps must be at least 1");
        ensure!(
            self.warmup_steps <= self.diffusion_steps,
            "workload.warmup_steps ({}) must not exceed workload.diffusion_steps ({})",
            self.warmup_steps,
            self.diffusion_steps
        );
        ensure!(
            self.step_size.is_finite() && self.step_size > 0.0,
            "workload.step_size must be positive"
        );
        Ok(())
    }
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            seq_len: 4096,
            diffusion_steps: 20,
            warmup_steps: 1,
            step_size: 0.05,
        }
    }
}

/// Homogeneous devices on a uniform all-pairs link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    pub device_count: usize,
    /// FLOP/s per device.
    pub device_flops: f64,
    /// Bytes/s per link; `f64::INFINITY` is allowed.
    pub link_bandwidth: f64,
    /// Seconds per message.
    pub link_latency: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.device_count >= 1, "cluster.device_count must be at least 1");
        ensure!(
            self.device_flops > 0.0 && !self.device_flops.is_nan(),
            "cluster.device_flops must be positive"
        );
        ensure!(
            self.link_bandwidth > 0.0 && !self.link_bandwidth.is_nan(),
            "cluster.link_bandwidth must be positive"
        );
        ensure!(
            self.link_latency >= 0.0 && self.link_latency.is_finite(),
            "cluster.link_latency must be non-negative"
        );
        Ok(())
    }

    pub fn with_devices(&self, device_count: usize) -> Self {
        ClusterSpec {
            device_count,
            ..self.clone()
        }
    }
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            device_count: 8,
            device_flops: 150e12,
            link_bandwidth: 20e9,
            link_latency: 10e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    TensorParallel,
    SpUlysses,
    SpRing,
    Usp { ulysses: usize, ring: usize },
    DistriFusion,
    PipeFusion { patches: usize },
}

impl Strategy {
    /// Stable short name used in reports and as the last tie-breaker when ranking.
    pub fn name(&self) -> String {
        match self {
            Strategy::TensorParallel => "tp".into(),
            Strategy::SpUlysses => "sp-ulysses".into(),
            Strategy::SpRing => "sp-ring".into(),
            Strategy::Usp { ulysses, ring } => format!("usp-u{ulysses}-r{ring}"),
            Strategy::DistriFusion => "distrifusion".into(),
            Strategy::PipeFusion { patches } => format!("pipefusion-m{patches}"),
        }
    }

    /// Communication overlaps computation.
    pub fn overlappable(&self) -> bool {
        match self {
            Strategy::TensorParallel | Strategy::SpUlysses => false,
            Strategy::SpRing | Strategy::DistriFusion | Strategy::PipeFusion { .. } => true,
            // Ulysses all-to-all stays on the critical path.
            Strategy::Usp { ulysses, .. } => *ulysses == 1,
        }
    }

    /// The five single-technique strategies compared side by side, PipeFusion with `patches`.
    pub fn baseline_set(patches: usize) -> Vec<Strategy> {
        vec![
            Strategy::TensorParallel,
            Strategy::DistriFusion,
            Strategy::SpRing,
            Strategy::SpUlysses,
            Strategy::PipeFusion { patches },
        ]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// A strategy plus the CFG split. `degree` is the per-CFG-group device count;
/// when absent it is inferred as `device_count / cfg_degree`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub strategy: Strategy,
    pub cfg_degree: usize,
    pub degree: Option<usize>,
}

impl ParallelPlan {
    pub fn new(strategy: Strategy) -> Self {
        ParallelPlan {
            strategy,
            cfg_degree: 1,
            degree: None,
        }
    }

    pub fn with_cfg(mut self, cfg_degree: usize) -> Self {
        self.cfg_degree = cfg_degree;
        self
    }

    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = Some(degree);
        self
    }

    /// Devices per CFG group, after checking every degree invariant against `device_count`.
    pub fn group_degree(&self, device_count: usize) -> Result<usize> {
        ensure!(
            matches!(self.cfg_degree, 1 | 2),
            "cfg degree must be 1 or 2 (got {})",
            self.cfg_degree
        );
        ensure!(device_count >= 1, "device count must be at least 1");
        ensure!(
            device_count.is_multiple_of(self.cfg_degree),
            "degree mismatch: {} devices cannot be split into {} CFG groups",
            device_count,
            self.cfg_degree
        );
        let per_group = device_count / self.cfg_degree;
        if let Some(degree) = self.degree {
            ensure!(
                degree * self.cfg_degree == device_count,
                "degree mismatch: cfg {} x {} degree {} = {} but the cluster has {} devices",
                self.cfg_degree,
                self.strategy.name(),
                degree,
                degree * self.cfg_degree,
                device_count
            );
        }
        match self.strategy {
            Strategy::Usp { ulysses, ring } => {
                ensure!(ulysses >= 1, "USP ulysses degree must be at least 1");
                ensure!(ring >= 1, "USP ring degree must be at least 1");
                ensure!(
                    ulysses * ring == per_group,
                    "degree mismatch: USP ulysses {} x ring {} = {} but each CFG group has {} devices",
                    ulysses,
                    ring,
                    ulysses * ring,
                    per_group
                );
            }
            Strategy::PipeFusion { patches } => {
                ensure!(patches >= 1, "PipeFusion patch number must be at least 1");
            }
            _ => {}
        }
        Ok(per_group)
    }
}

/// Accepts the plan iff its degrees multiply out to the cluster's device count.
pub fn validate_plan(plan: &ParallelPlan, cluster: &ClusterSpec) -> Result<()> {
    plan.group_degree(cluster.device_count).map(|_| ())
}

/// Latent token count for an image: one token per `patchify x patchify` block of latent pixels.
pub fn tokens_from_resolution(
    height_px: usize,
    width_px: usize,
    vae_factor: usize,
    patchify: usize,
) -> Result<usize> {
    ensure!(
        vae_factor >= 1 && patchify >= 1,
        "vae factor and patchify must be positive"
    );
    ensure!(height_px >= 1 && width_px >= 1, "image dimensions must be positive");
    let block = vae_factor * patchify;
    for (name, value) in [("height", height_px), ("width", width_px)] {
        if value % block != 0 {
            return Err(Error::validation(format!(
                "{name} {value}px is not divisible by vae factor {vae_factor} x patchify {patchify}"
            )));
        }
    }
    Ok((height_px / block) * (width_px / block))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_for_common_resolutions() {
        assert_eq!(tokens_from_resolution(1024, 1024, 8, 1).unwrap(), 16384);
        assert_eq!(tokens_from_resolution(1024, 1024, 8, 2).unwrap(), 4096);
        assert_eq!(tokens_from_resolution(8, 8, 8, 1).unwrap(), 1);
    }

    #[test]
    fn tokens_reject_indivisible_dimension() {
        let err = tokens_from_resolution(1000, 1024, 16, 1).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let err = tokens_from_resolution(1024, 1000, 16, 1).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn doubling_resolution_quadruples_tokens() {
        for (h, w) in [(64, 64), (256, 512), (1024, 768)] {
            let base = tokens_from_resolution(h, w, 8, 2).unwrap();
            assert_eq!(tokens_from_resolution(2 * h, 2 * w, 8, 2).unwrap(), 4 * base);
        }
    }

    fn cluster(n: usize) -> ClusterSpec {
        ClusterSpec::default().with_devices(n)
    }

    #[test]
    fn plans_from_experiments_validate() {
        let pp = ParallelPlan::new(Strategy::PipeFusion { patches: 4 }).with_cfg(2);
        assert!(validate_plan(&pp, &cluster(8)).is_ok());
        let usp = ParallelPlan::new(Strategy::Usp { ulysses: 2, ring: 4 });
        assert!(validate_plan(&usp, &cluster(8)).is_ok());
        let bad = ParallelPlan::new(Strategy::SpUlysses).with_cfg(2);
        let err = validate_plan(&bad, &cluster(7)).unwrap_err();
        assert!(err.to_string().contains("degree mismatch"), "{err}");
    }

    #[test]
    fn explicit_degree_must_match() {
        let ok = ParallelPlan::new(Strategy::PipeFusion { patches: 4 })
            .with_cfg(2)
            .with_degree(4);
        assert!(validate_plan(&ok, &cluster(8)).is_ok());
        let bad = ParallelPlan::new(Strategy::PipeFusion { patches: 4 })
            .with_cfg(2)
            .with_degree(8);
        assert!(validate_plan(&bad, &cluster(8)).is_err());
    }

    #[test]
    fn zero_degrees_rejected() {
        let c = cluster(4);
        assert!(validate_plan(&ParallelPlan::new(Strategy::PipeFusion { patches: 0 }), &c).is_err());
        assert!(validate_plan(&ParallelPlan::new(Strategy::Usp { ulysses: 0, ring: 4 }), &c).is_err());
        assert!(validate_plan(&ParallelPlan::new(Strategy::Usp { ulysses: 4, ring: 0 }), &c).is_err());
        assert!(validate_plan(&ParallelPlan::new(Strategy::TensorParallel).with_cfg(3), &c).is_err());
    }

    #[test]
    fn accepted_plans_multiply_out() {
        let strategies = |n: usize| {
            let mut s = vec![
                Strategy::TensorParallel,
                Strategy::SpUlysses,
                Strategy::SpRing,
                Strategy::DistriFusion,
                Strategy::PipeFusion { patches: 3 },
            ];
            for u in 1..=n {
                for r in 1..=n {
                    s.push(Strategy::Usp { ulysses: u, ring: r });
                }
            }
            s
        };
        for n in 1..=16 {
            for strategy in strategies(n) {
                for cfg in 1..=2 {
                    for degree in [None, Some(n / cfg), Some(n)] {
                        let plan = ParallelPlan {
                            strategy,
                            cfg_degree: cfg,
                            degree,
                        };
                        if let Ok(g) = plan.group_degree(n) {
                            assert_eq!(g * cfg, n);
                            if let Strategy::Usp { ulysses, ring } = strategy {
                                assert_eq!(ulysses * ring * cfg, n);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn validation_messages_name_the_field() {
        let m = ModelSpec {
            heads: 7,
            ..ModelSpec::default()
        };
        assert!(m.validate().unwrap_err().to_string().contains("heads"));
        let w = WorkloadSpec {
            warmup_steps: 30,
            ..WorkloadSpec::default()
        };
        assert!(w.validate().unwrap_err().to_string().contains("warmup_steps"));
        let mut c = ClusterSpec {
            link_bandwidth: 0.0,
            ..ClusterSpec::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("link_bandwidth"));
        c.link_bandwidth = f64::INFINITY;
        assert!(c.validate().is_ok());
    }
}
