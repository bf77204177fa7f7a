//! TOML run configuration.
//!
//! Every section is optional and falls back to the type's defaults; unknown
//! keys are rejected by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::execute::RunSpec;
use crate::model::{ClusterSpec, ModelSpec, ParallelPlan, Strategy, WorkloadSpec};
use crate::simulate::ComputeModel;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub workload: WorkloadSpec,
    pub cluster: ClusterSpec,
    pub plan: PlanConfig,
    pub compute_model: ComputeModel,
    pub execute: ExecuteConfig,
}

/// `strategy` is one of `tp`, `sp-ulysses`, `sp-ring`, `usp`, `distrifusion`, `pipefusion`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub strategy: String,
    /// PipeFusion patch number.
    pub patches: usize,
    /// USP mesh; a missing side is inferred from the group size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ulysses_degree: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_degree: Option<usize>,
    pub cfg_degree: usize,
    /// Devices per CFG group; inferred when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            strategy: "pipefusion".into(),
            patches: 4,
            ulysses_degree: None,
            ring_degree: None,
            cfg_degree: 1,
            degree: None,
        }
    }
}

/// Parses a strategy name. USP takes its mesh from `usp` and needs `group` to fill in a missing
/// side.
pub fn parse_strategy(
    name: &str,
    patches: usize,
    ulysses: Option<usize>,
    ring: Option<usize>,
    group: usize,
) -> Result<Strategy> {
    Ok(match name {
        "tp" | "tensor-parallel" => Strategy::TensorParallel,
        "sp-ulysses" | "ulysses" => Strategy::SpUlysses,
        "sp-ring" | "ring" => Strategy::SpRing,
        "distrifusion" => Strategy::DistriFusion,
        "pipefusion" => Strategy::PipeFusion { patches },
        "usp" => {
            let infer = |other: usize| {
                ensure!(
                    other >= 1 && group.is_multiple_of(other),
                    "degree mismatch: USP degree {other} does not divide the group size {group}"
                );
                Ok(group / other)
            };
            let (u, r) = match (ulysses, ring) {
                (Some(u), Some(r)) => (u, r),
                (Some(u), None) => (u, infer(u)?),
                (None, Some(r)) => (infer(r)?, r),
                (None, None) => {
                    return Err(Error::validation(
                        "usp needs plan.ulysses_degree or plan.ring_degree",
                    ))
                }
            };
            Strategy::Usp { ulysses: u, ring: r }
        }
        other => {
            return Err(Error::validation(format!(
                "unknown strategy `{other}` (expected tp, sp-ulysses, sp-ring, usp, distrifusion or pipefusion)"
            )))
        }
    })
}

impl PlanConfig {
    pub fn to_plan(&self, cluster: &ClusterSpec) -> Result<ParallelPlan> {
        ensure!(
            self.cfg_degree >= 1,
            "plan.cfg_degree must be 1 or 2 (got {})",
            self.cfg_degree
        );
        let group = self.degree.unwrap_or(cluster.device_count / self.cfg_degree);
        let strategy = parse_strategy(&self.strategy, self.patches, self.ulysses_degree, self.ring_degree, group)?;
        let plan = ParallelPlan {
            strategy,
            cfg_degree: self.cfg_degree,
            degree: self.degree,
        };
        plan.group_degree(cluster.device_count)?;
        Ok(plan)
    }
}

/// Toy-network emulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecuteConfig {
    pub seed: u64,
    pub layers: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub warmup: usize,
    pub workers: usize,
    pub patches: usize,
    pub step_size: f64,
    /// `pipefusion`, `distrifusion` or `serial`.
    pub strategy: String,
    /// When set, the warmup count is chosen by latent-change detection instead of `warmup`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auto_warmup_threshold: Option<f64>,
}

impl Default for ExecuteConfig {
    fn default() -> Self {
        ExecuteConfig {
            seed: 0,
            layers: 4,
            hidden_size: 32,
            heads: 4,
            mlp_ratio: 4,
            seq_len: 64,
            steps: 20,
            warmup: 1,
            workers: 4,
            patches: 4,
            step_size: 0.05,
            strategy: "pipefusion".into(),
            auto_warmup_threshold: None,
        }
    }
}

impl ExecuteConfig {
    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            steps: self.steps,
            warmup: self.warmup,
            workers: self.workers,
            patches: self.patches,
            step_size: self.step_size,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the model, workload, cluster, compute model and plan together.
    pub fn validate(&self) -> Result<ParallelPlan> {
        self.model.validate()?;
        self.workload.validate()?;
        self.cluster.validate()?;
        self.compute_model.validate()?;
        self.plan.to_plan(&self.cluster)
    }
}

/// Bundled example scenarios. Bandwidth and throughput figures are illustrative, not measured.
pub const SCENARIOS: &[(&str, &str)] = &[
    ("l40_pcie", include_str!("../../../configs/l40_pcie.toml")),
    ("a100_nvlink", include_str!("../../../configs/a100_nvlink.toml")),
];

pub fn scenario(name: &str) -> Result<RunConfig> {
    let (_, text) = SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::validation(format!("unknown scenario `{name}`")))?;
    RunConfig::from_toml_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.validate().unwrap().strategy, Strategy::PipeFusion { patches: 4 });
    }

    #[test]
    fn unknown_keys_named() {
        let e = RunConfig::from_toml_str("[model]\nlayer = 3\n").unwrap_err();
        assert!(e.to_string().contains("layer"), "{e}");
        let e = RunConfig::from_toml_str("[modle]\n").unwrap_err();
        assert!(e.to_string().contains("modle"), "{e}");
        assert!(e.is_usage());
    }

    #[test]
    fn round_trip() {
        let text = "[model]\nlayers = 12\n[cluster]\ndevice_count = 4\nlink_bandwidth = inf\n\
                    [plan]\nstrategy = \"usp\"\nulysses_degree = 2\n[compute_model]\nlinear_coeff = 30.0\n\
                    [execute]\nauto_warmup_threshold = 0.1\n";
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model.layers, 12);
        assert!(cfg.cluster.link_bandwidth.is_infinite());
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.validate().unwrap().strategy, Strategy::Usp { ulysses: 2, ring: 2 });
    }

    #[test]
    fn scenarios_load_and_round_trip() {
        for (name, _) in SCENARIOS {
            let cfg = scenario(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        }
        assert!(scenario("h100").is_err());
    }

    #[test]
    fn plan_errors() {
        let cluster = ClusterSpec::default();
        let bad = PlanConfig {
            strategy: "megatron".into(),
            ..PlanConfig::default()
        };
        assert!(bad.to_plan(&cluster).unwrap_err().to_string().contains("unknown strategy"));
        let usp = PlanConfig {
            strategy: "usp".into(),
            ..PlanConfig::default()
        };
        assert!(usp.to_plan(&cluster).is_err());
        let cfg_pf8 = PlanConfig {
            cfg_degree: 2,
            patches: 8,
            degree: Some(8),
            ..PlanConfig::default()
        };
        assert!(cfg_pf8.to_plan(&cluster).unwrap_err().to_string().contains("degree mismatch"));
        let cfg_pf4 = PlanConfig {
            cfg_degree: 2,
            degree: Some(4),
            ..PlanConfig::default()
        };
        assert!(cfg_pf4.to_plan(&cluster).is_ok());
    }
}
