//! Per-diffusion-step communication and memory costs of each parallel strategy.
//!
//! All volumes are activation elements sent by one device during one diffusion
//! step; `O(p x hs)` is pinned to exactly `p * hs` elements. Shares such as
//! `4/N * p * hs * L` are kept as exact rationals so cross-strategy identities
//! hold without rounding.

use std::fmt;
use std::ops::{Add, Mul};

use num_rational::Ratio;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{ClusterSpec, ModelSpec, ParallelPlan, Strategy, WorkloadSpec};

/// An exact, possibly fractional, element count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Elements(Ratio<u64>);

impl Elements {
    pub const ZERO: Elements = Elements(Ratio::new_raw(0, 1));

    pub fn whole(n: u64) -> Self {
        Elements(Ratio::from_integer(n))
    }

    /// `num / den`; panics when `den == 0`.
    pub fn ratio(num: u64, den: u64) -> Self {
        Elements(Ratio::new(num, den))
    }

    pub fn as_ratio(&self) -> Ratio<u64> {
        self.0
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn to_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    pub fn is_zero(&self) -> bool {
        *self.0.numer() == 0
    }
}

impl Add for Elements {
    type Output = Elements;
    fn add(self, rhs: Elements) -> Elements {
        Elements(self.0 + rhs.0)
    }
}

impl Mul<Ratio<u64>> for Elements {
    type Output = Elements;
    fn mul(self, rhs: Ratio<u64>) -> Elements {
        Elements(self.0 * rhs)
    }
}

impl Mul<u64> for Elements {
    type Output = Elements;
    fn mul(self, rhs: u64) -> Elements {
        Elements(self.0 * rhs)
    }
}

impl fmt::Display for Elements {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}", self.to_f64())
        }
    }
}

impl Serialize for Elements {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_integer() {
            s.serialize_u64(*self.0.numer())
        } else {
            s.serialize_f64(self.to_f64())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Collective algobw factors `(n-1)/n` approximated by 1.
    #[default]
    PaperApprox,
    /// AllReduce `2(n-1)/n`, AllGather `(n-1)/n`, AllToAll and P2P `1`.
    Exact,
}

impl std::str::FromStr for CostMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-approx" | "approx" => Ok(CostMode::PaperApprox),
            "exact" => Ok(CostMode::Exact),
            other => Err(Error::validation(format!(
                "unknown cost mode '{other}' (expected paper-approx or exact)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommReport {
    pub strategy: Strategy,
    pub elements_total: Elements,
    pub bytes_total: Elements,
    /// `elements_total / L`.
    pub per_layer_elements: Elements,
    pub overlappable: bool,
    pub mode: CostMode,
    /// Part of `elements_total` that can run concurrently with compute.
    pub overlapped_elements: Elements,
    /// Part of `elements_total` that sits on the critical path.
    pub blocking_elements: Elements,
    /// CFG latent exchange, included in `elements_total`.
    pub cfg_exchange_elements: Elements,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub param_elements: Elements,
    pub kv_buffer_elements: Elements,
    /// One layer's K plus V over the full sequence: `2 * p * hs`.
    pub unit_kv: Elements,
}

struct Volumes {
    overlapped: Elements,
    blocking: Elements,
}

/// `(n-1)/n`, the algobw scaling shared by AllGather, ring P2P and (halved) AllReduce.
fn gather_factor(n: u64, mode: CostMode) -> Ratio<u64> {
    match mode {
        CostMode::PaperApprox => Ratio::from_integer(1),
        CostMode::Exact => Ratio::new(n - 1, n),
    }
}

fn volumes(strategy: Strategy, p: u64, hs: u64, layers: u64, n: u64, mode: CostMode) -> Volumes {
    let unit = p * hs;
    let zero = Elements::ZERO;
    if n == 1 {
        return Volumes {
            overlapped: zero,
            blocking: zero,
        };
    }
    let f = gather_factor(n, mode);
    match strategy {
        // Two AllReduces of p*hs per layer, each 2(n-1)/n.
        Strategy::TensorParallel => Volumes {
            overlapped: zero,
            blocking: Elements::whole(4 * unit * layers) * f,
        },
        Strategy::DistriFusion | Strategy::SpRing => Volumes {
            overlapped: Elements::whole(2 * unit * layers) * f,
            blocking: zero,
        },
        Strategy::SpUlysses => Volumes {
            overlapped: zero,
            blocking: Elements::ratio(4 * unit * layers, n),
        },
        Strategy::PipeFusion { .. } => Volumes {
            overlapped: Elements::whole(2 * unit),
            blocking: zero,
        },
        Strategy::Usp { ulysses, ring } => {
            let (u, r) = (ulysses as u64, ring as u64);
            let blocking = if u > 1 {
                Elements::ratio(4 * unit * layers, u * r)
            } else {
                zero
            };
            let overlapped = if r > 1 {
                Elements::ratio(2 * unit * layers, u) * gather_factor(r, mode)
            } else {
                zero
            };
            Volumes {
                overlapped,
                blocking,
            }
        }
    }
}

/// Elements one device sends per diffusion step under `plan`.
pub fn comm_cost(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    mode: CostMode,
) -> Result<CommReport> {
    let n = plan.group_degree(cluster.device_count)? as u64;
    let p = workload.seq_len as u64;
    let hs = model.hidden_size as u64;
    let layers = model.layers as u64;
    let v = volumes(plan.strategy, p, hs, layers, n, mode);
    let cfg_exchange = if plan.cfg_degree == 2 {
        Elements::whole(p * model.latent_channels as u64)
    } else {
        Elements::ZERO
    };
    let elements_total = v.overlapped + v.blocking + cfg_exchange;
    Ok(CommReport {
        strategy: plan.strategy,
        elements_total,
        bytes_total: elements_total * model.bytes_per_element as u64,
        per_layer_elements: elements_total * Ratio::new(1, layers),
        overlappable: plan.strategy.overlappable(),
        mode,
        overlapped_elements: v.overlapped,
        blocking_elements: v.blocking,
        cfg_exchange_elements: cfg_exchange,
    })
}

/// Per-device parameter and KV-buffer footprint.
pub fn memory_cost(
    plan: &ParallelPlan,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
) -> Result<MemoryReport> {
    let n = plan.group_degree(cluster.device_count)? as u64;
    let unit_kv = Elements::whole(2 * workload.seq_len as u64 * model.hidden_size as u64);
    let all_layers = unit_kv * model.layers as u64;
    let params = Elements::whole(model.param_count);
    let shard = Ratio::new(1, n);
    let (param_elements, kv_buffer_elements) = match plan.strategy {
        Strategy::TensorParallel | Strategy::PipeFusion { .. } => (params * shard, all_layers * shard),
        Strategy::SpUlysses | Strategy::SpRing | Strategy::Usp { .. } => (params, all_layers * shard),
        Strategy::DistriFusion => (params, all_layers),
    };
    Ok(MemoryReport {
        param_elements,
        kv_buffer_elements,
        unit_kv,
    })
}

/// Device count below which PipeFusion moves the fewest elements: `2L`.
pub fn crossover_parallel_degree(model: &ModelSpec) -> usize {
    2 * model.layers
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub comm: CommReport,
    pub memory: MemoryReport,
}

/// Ranks candidate plans by per-step communication volume, then KV memory, then name.
pub fn compare_strategies(
    model: &ModelSpec,
    workload: &WorkloadSpec,
    cluster: &ClusterSpec,
    plans: &[ParallelPlan],
    mode: CostMode,
) -> Result<Vec<StrategyRow>> {
    if plans.is_empty() {
        return Err(Error::validation("no candidate strategies to compare"));
    }
    let mut rows = plans
        .iter()
        .map(|plan| {
            Ok(StrategyRow {
                strategy: plan.strategy.name(),
                comm: comm_cost(plan, model, workload, cluster, mode)?,
                memory: memory_cost(plan, model, workload, cluster)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.comm
            .elements_total
            .cmp(&b.comm.elements_total)
            .then_with(|| a.memory.kv_buffer_elements.cmp(&b.memory.kv_buffer_elements))
            .then_with(|| a.strategy.cmp(&b.strategy))
    });
    Ok(rows)
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    strategy: &'a str,
    elements_total: Elements,
    bytes_total: Elements,
    overlappable: bool,
    param_elements: Elements,
    kv_buffer_elements: Elements,
}

fn records(rows: &[StrategyRow]) -> impl Iterator<Item = ReportRecord<'_>> {
    rows.iter().map(|r| ReportRecord {
        strategy: &r.strategy,
        elements_total: r.comm.elements_total,
        bytes_total: r.comm.bytes_total,
        overlappable: r.comm.overlappable,
        param_elements: r.memory.param_elements,
        kv_buffer_elements: r.memory.kv_buffer_elements,
    })
}

pub const REPORT_CSV_HEADER: &str =
    "strategy,elements_total,bytes_total,overlappable,param_elements,kv_buffer_elements";

pub fn rows_to_csv(rows: &[StrategyRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in records(rows) {
        w.serialize(rec).expect("in-memory csv write");
    }
    let bytes = w.into_inner().expect("in-memory csv flush");
    let out = String::from_utf8(bytes).expect("csv output is utf-8");
    if out.is_empty() {
        format!("{REPORT_CSV_HEADER}\n")
    } else {
        out
    }
}

pub fn rows_to_json(rows: &[StrategyRow]) -> String {
    let recs: Vec<_> = records(rows).collect();
    serde_json::to_string_pretty(&recs).expect("report rows serialize")
}
