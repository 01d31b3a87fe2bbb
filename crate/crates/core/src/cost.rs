//! Analytic latency model and the saving oracles built on it.
//!
//! Every scheduled kernel costs one launch plus the time to move its operand
//! bytes. Compute kernels touch operands through their resolved maps; a map
//! that breaks the coalescing unit slows the access by the configured
//! penalty. Data-movement kernels are assumed to be well-tiled copies and only
//! pay for the elements they still have to move.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecError};
use crate::graph::{CompGraph, NodeId};
use crate::greedy::SavingOracle;
use crate::mapping::{compose_with, ContiguityClass, IndexMap};
use crate::rules;
use crate::vtog::PointsToGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MachineParams {
    /// Bytes per time unit.
    pub bandwidth: f64,
    /// Minimal memory transaction, in bytes.
    pub coalesce_unit: usize,
    pub kernel_launch_overhead: f64,
    /// Slowdown of accesses through non-contiguous maps.
    pub noncoalesced_penalty: f64,
    /// Slowdown of partially contiguous accesses; 1 unless running the
    /// conservative model.
    pub partial_penalty: f64,
}

impl Default for MachineParams {
    fn default() -> Self {
        MachineParams {
            bandwidth: 1.0,
            coalesce_unit: 128,
            kernel_launch_overhead: 5.0,
            noncoalesced_penalty: 8.0,
            partial_penalty: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("parsing JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid machine parameters: {0}")]
    Invalid(String),
}

impl MachineParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let ok = self.bandwidth > 0.0
            && self.coalesce_unit > 0
            && self.kernel_launch_overhead > 0.0
            && self.noncoalesced_penalty >= 1.0
            && self.partial_penalty >= 1.0
            && self.bandwidth.is_finite()
            && self.kernel_launch_overhead.is_finite()
            && self.noncoalesced_penalty.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ParamsError::Invalid(format!("{self:?}")))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ParamsError> {
        let p: MachineParams = toml::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_json(text: &str) -> Result<Self, ParamsError> {
        let p: MachineParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// Loads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ParamsError::Io { path: path.display().to_string(), source })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    fn factor(&self, m: &IndexMap, elem: usize) -> f64 {
        match m.contiguity(elem, self.coalesce_unit).class {
            ContiguityClass::FullyContiguous => 1.0,
            ContiguityClass::PartiallyContiguous => 1.0 / self.partial_penalty,
            ContiguityClass::NonContiguous => 1.0 / self.noncoalesced_penalty,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OperandTraffic {
    pub tensor: String,
    pub bytes: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelTraffic {
    pub node: String,
    pub op: String,
    pub data_movement: bool,
    pub reads: Vec<OperandTraffic>,
    pub writes: Vec<OperandTraffic>,
    pub launches: u32,
    pub time: f64,
}

impl KernelTraffic {
    pub fn read_bytes(&self) -> f64 {
        self.reads.iter().map(|o| o.bytes).fold(0.0, |a, b| a + b)
    }

    pub fn write_bytes(&self) -> f64 {
        self.writes.iter().map(|o| o.bytes).fold(0.0, |a, b| a + b)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrafficEstimate {
    pub kernels: Vec<KernelTraffic>,
    pub total_time: f64,
}

impl TrafficEstimate {
    pub fn kernel(&self, node: &str) -> Option<&KernelTraffic> {
        self.kernels.iter().find(|k| k.node == node)
    }

    pub fn data_movement_time(&self) -> f64 {
        self.kernels.iter().filter(|k| k.data_movement).map(|k| k.time).fold(0.0, |a, b| a + b)
    }

    pub fn compute_time(&self) -> f64 {
        self.kernels.iter().filter(|k| !k.data_movement).map(|k| k.time).fold(0.0, |a, b| a + b)
    }

    pub fn data_movement_kernels(&self) -> usize {
        self.kernels.iter().filter(|k| k.data_movement).count()
    }
}

/// Modeled time of every kernel that `ptg` leaves scheduled.
pub fn estimate(g: &CompGraph, ptg: &PointsToGraph, params: &MachineParams) -> TrafficEstimate {
    let mut kernels = Vec::new();
    for &n in g.topo_order() {
        if !ptg.is_scheduled(n) {
            continue;
        }
        let node = g.node(n);
        let (reads, writes) =
            if node.is_data_movement() { movement_traffic(g, ptg, n) } else { compute_traffic(g, ptg, n, params) };
        let time = params.kernel_launch_overhead
            + reads.iter().chain(&writes).map(|o| o.bytes / (params.bandwidth * o.factor)).sum::<f64>();
        kernels.push(KernelTraffic {
            node: node.name.clone(),
            op: node.kind.name().to_string(),
            data_movement: node.is_data_movement(),
            reads,
            writes,
            launches: 1,
            time,
        });
    }
    let total_time = kernels.iter().map(|k| k.time).fold(0.0, |a, b| a + b);
    TrafficEstimate { kernels, total_time }
}

pub fn estimate_baseline(g: &CompGraph, params: &MachineParams) -> TrafficEstimate {
    estimate(g, &PointsToGraph::physical(g), params)
}

fn compute_traffic(
    g: &CompGraph,
    ptg: &PointsToGraph,
    n: NodeId,
    params: &MachineParams,
) -> (Vec<OperandTraffic>, Vec<OperandTraffic>) {
    let node = g.node(n);
    let operand = |t, unique: bool| {
        let m = ptg.resolved(t);
        let spec = g.tensor(t);
        let elem = spec.dtype.size_bytes();
        let count = if unique { m.unique_elements() } else { spec.numel() };
        OperandTraffic { tensor: spec.name.clone(), bytes: (count * elem) as f64, factor: params.factor(m, elem) }
    };
    let reads = node.inputs.iter().map(|&t| operand(t, true)).collect();
    let writes = node.outputs.iter().map(|&t| operand(t, false)).collect();
    (reads, writes)
}

fn movement_traffic(g: &CompGraph, ptg: &PointsToGraph, n: NodeId) -> (Vec<OperandTraffic>, Vec<OperandTraffic>) {
    let node = g.node(n);
    let mut reads = Vec::new();
    let mut writes = Vec::new();
    for (i, &o) in node.outputs.iter().enumerate() {
        let boxes = ptg.moved(n, i).unwrap_or(&[]);
        if boxes.is_empty() {
            continue;
        }
        let spec = g.tensor(o);
        let elem = spec.dtype.size_bytes();
        let moved: usize = boxes.iter().map(|b| b.volume()).sum();
        // Unique source elements behind the moved region.
        let src = rules::source_map(g, n, i);
        let unique = match compose_with(&src, |b| Some(ptg.resolved(b))) {
            Ok(through) => {
                let mut pieces = Vec::new();
                for b in boxes {
                    pieces.extend(through.restrict(b).pieces().iter().cloned());
                }
                IndexMap::new(through.virtual_shape().to_vec(), pieces, through.targets().clone())
                    .map(|m| m.unique_elements())
                    .unwrap_or(moved)
            }
            Err(_) => moved,
        };
        reads.push(OperandTraffic { tensor: spec.name.clone(), bytes: (unique * elem) as f64, factor: 1.0 });
        writes.push(OperandTraffic { tensor: spec.name.clone(), bytes: (moved * elem) as f64, factor: 1.0 });
    }
    (reads, writes)
}

/// ℓ: modeled baseline time minus modeled strategy time.
#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    pub params: MachineParams,
}

impl AnalyticOracle {
    pub fn new(params: MachineParams) -> Self {
        AnalyticOracle { params }
    }
}

impl SavingOracle for AnalyticOracle {
    fn evaluate(&mut self, g: &CompGraph, ptg: &PointsToGraph) -> anyhow::Result<f64> {
        let base = estimate_baseline(g, &self.params).total_time;
        Ok(base - estimate(g, ptg, &self.params).total_time)
    }
}

/// Median wall-clock difference between executing the baseline and the
/// strategy with the reference executor. Noisy; for demonstrations only.
#[derive(Debug, Clone)]
pub struct ExecutorTimedOracle {
    trials: usize,
    seed: u64,
}

impl ExecutorTimedOracle {
    pub fn new(trials: usize, seed: u64) -> Result<Self, ExecError> {
        if trials < 3 {
            return Err(ExecError::Config(format!("timed oracle needs at least 3 trials, got {trials}")));
        }
        Ok(ExecutorTimedOracle { trials, seed })
    }

    fn median_time(&self, g: &CompGraph, ptg: &PointsToGraph) -> Result<f64, ExecError> {
        let inputs = exec::random_inputs(g, self.seed);
        let mut times = Vec::with_capacity(self.trials);
        for _ in 0..self.trials {
            let start = Instant::now();
            exec::execute(g, ptg, &inputs)?;
            times.push(start.elapsed().as_secs_f64() * 1e6);
        }
        times.sort_by(f64::total_cmp);
        Ok(times[times.len() / 2])
    }
}

impl SavingOracle for ExecutorTimedOracle {
    fn evaluate(&mut self, g: &CompGraph, ptg: &PointsToGraph) -> anyhow::Result<f64> {
        if ptg.selected().is_empty() {
            return Ok(0.0);
        }
        let base = self.median_time(g, &PointsToGraph::physical(g))?;
        Ok(base - self.median_time(g, ptg)?)
    }
}

/// Modeled time split into data-movement and compute kernels.
#[derive(Debug, Clone, Serialize)]
pub struct Breakdown {
    pub data_movement_time: f64,
    pub compute_time: f64,
    pub data_movement_kernels: usize,
    pub compute_kernels: usize,
}

impl Breakdown {
    pub fn of(est: &TrafficEstimate) -> Self {
        Breakdown {
            data_movement_time: est.data_movement_time(),
            compute_time: est.compute_time(),
            data_movement_kernels: est.data_movement_kernels(),
            compute_kernels: est.kernels.len() - est.data_movement_kernels(),
        }
    }

    pub fn data_movement_share(&self) -> f64 {
        let total = self.data_movement_time + self.compute_time;
        if total == 0.0 {
            0.0
        } else {
            self.data_movement_time / total
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DType, GraphBuilder, OpAttrs, OpKind};
    use crate::vtog::{build_vtog, validate_ptg};

    #[test]
    fn params_from_toml_and_json() {
        let p = MachineParams::from_toml("noncoalesced_penalty = 64.0\nbandwidth = 2.0\n").unwrap();
        assert_eq!(p.noncoalesced_penalty, 64.0);
        assert_eq!(p.coalesce_unit, 128);
        let q = MachineParams::from_json(r#"{"kernel_launch_overhead": 1.5}"#).unwrap();
        assert_eq!(q.kernel_launch_overhead, 1.5);
        assert!(MachineParams::from_toml("bandwidth = 0.0").is_err());
        assert!(MachineParams::from_toml("speed = 3").is_err());
    }

    #[test]
    fn empty_graph_costs_nothing() {
        let mut b = GraphBuilder::new();
        b.input("x", &[3], DType::F64);
        let g = b.build().unwrap();
        assert_eq!(estimate_baseline(&g, &MachineParams::default()).total_time, 0.0);
    }

    #[test]
    fn virtual_transpose_saves_its_kernel() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4, 8], DType::F64);
        let t1 = b.op1("r1", OpKind::Relu, OpAttrs::None, &[x], "t1").unwrap();
        let t2 = b.op1("tr", OpKind::Transpose, OpAttrs::Transpose { perm: vec![1, 0] }, &[t1], "t2").unwrap();
        let y = b.op1("r2", OpKind::Relu, OpAttrs::None, &[t2], "y").unwrap();
        b.mark_output(y);
        let g = b.build().unwrap();
        let v = build_vtog(&g).unwrap();
        // Without a penalty the saving is exactly the transpose kernel:
        // one launch, 256 bytes read and 256 bytes written.
        let params = MachineParams { noncoalesced_penalty: 1.0, bandwidth: 2.0, ..Default::default() };
        let mut oracle = AnalyticOracle::new(params);
        for e in v.edges() {
            let ptg = validate_ptg(&v, &[e.id]).unwrap();
            let s = oracle.evaluate(&g, &ptg).unwrap();
            assert_eq!(s, 5.0 + 2.0 * 256.0 / 2.0);
        }
        // With the default penalty the strided access costs more than the
        // kernel it replaces.
        let mut oracle = AnalyticOracle::new(MachineParams::default());
        let ptg = validate_ptg(&v, &[v.edges()[0].id]).unwrap();
        assert!(oracle.evaluate(&g, &ptg).unwrap() < 0.0);
        assert_eq!(oracle.evaluate(&g, &v.all_physical()).unwrap(), 0.0);
    }

    #[test]
    fn timed_oracle_needs_three_trials() {
        assert!(ExecutorTimedOracle::new(1, 0).is_err());
        assert!(ExecutorTimedOracle::new(3, 0).is_ok());
    }
}
