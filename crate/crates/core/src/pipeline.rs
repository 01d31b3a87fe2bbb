//! End-to-end driver: VTOG → greedy → validation → optional verification,
//! producing the report artifacts used by the command-line tool.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::cost::{estimate, estimate_baseline, AnalyticOracle, Breakdown, ExecutorTimedOracle, MachineParams, TrafficEstimate};
use crate::exec::{self, ExecError};
use crate::graph::CompGraph;
use crate::greedy::{greedy_build, GreedyOutcome, SavingOracle};
use crate::vtog::{build_vtog, enumerate_ptgs, EdgeId, PointsToGraph, Vtog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleChoice {
    Analytic,
    Timed { trials: usize },
}

#[derive(Debug, Clone)]
pub struct OptimizeConfig {
    pub params: MachineParams,
    pub oracle: OracleChoice,
    pub seed: u64,
    /// Edge ids (`e3`) or labels (`a->b`) committed before the search.
    pub force_edges: Vec<String>,
    pub enumerate_limit: Option<usize>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            params: MachineParams::default(),
            oracle: OracleChoice::Analytic,
            seed: 0,
            force_edges: Vec::new(),
            enumerate_limit: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeReport {
    pub id: EdgeId,
    pub label: String,
    pub op: String,
    pub direction: String,
    pub class: String,
    /// Last profiled discrete derivative; absent if never profiled or invalid.
    pub saving: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnumerationReport {
    pub strategies: usize,
    pub best_saving: f64,
    pub greedy_matches_best: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub vtog_edges: usize,
    pub selected: Vec<EdgeReport>,
    pub virtual_tensors: Vec<String>,
    pub eliminated_ops: Vec<String>,
    pub eliminated_count: usize,
    pub total_saving: f64,
    pub final_saving: f64,
    pub iterations: usize,
    pub oracle_calls: usize,
    pub baseline: TrafficEstimate,
    pub optimized: TrafficEstimate,
    pub breakdown_before: Breakdown,
    pub breakdown_after: Breakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enumeration: Option<EnumerationReport>,
}

pub struct Optimized {
    pub vtog: Vtog,
    pub outcome: GreedyOutcome,
    pub report: Report,
}

impl Optimized {
    pub fn ptg(&self) -> &PointsToGraph {
        &self.outcome.ptg
    }
}

pub fn optimize(g: &CompGraph, cfg: &OptimizeConfig) -> Result<Optimized> {
    let vtog = build_vtog(g)?;
    let forced = cfg
        .force_edges
        .iter()
        .map(|s| vtog.find_edge(s))
        .collect::<Result<Vec<_>, _>>()
        .context("resolving --force-edge")?;
    let outcome = match cfg.oracle {
        OracleChoice::Analytic => greedy_build(&vtog, &mut AnalyticOracle::new(cfg.params), &forced)?,
        OracleChoice::Timed { trials } => greedy_build(&vtog, &mut ExecutorTimedOracle::new(trials, cfg.seed)?, &forced)?,
    };
    let enumeration = match cfg.enumerate_limit {
        Some(limit) => {
            let mut oracle = AnalyticOracle::new(cfg.params);
            let all = enumerate_ptgs(&vtog, Some(limit))?;
            let mut best = f64::NEG_INFINITY;
            for p in &all {
                best = best.max(oracle.evaluate(g, p)?);
            }
            let greedy = oracle.evaluate(g, &outcome.ptg)?;
            Some(EnumerationReport { strategies: all.len(), best_saving: best, greedy_matches_best: greedy >= best })
        }
        None => None,
    };
    let report = build_report(g, &vtog, &outcome, &cfg.params, enumeration);
    Ok(Optimized { vtog, outcome, report })
}

fn build_report(
    g: &CompGraph,
    v: &Vtog,
    outcome: &GreedyOutcome,
    params: &MachineParams,
    enumeration: Option<EnumerationReport>,
) -> Report {
    let ptg = &outcome.ptg;
    let selected = ptg
        .selected()
        .iter()
        .map(|&e| {
            let ed = v.edge(e);
            EdgeReport {
                id: e,
                label: v.edge_label(e),
                op: g.node(ed.eliminated_op).name.clone(),
                direction: format!("{:?}", ed.candidate.direction),
                class: format!("{:?}", ed.static_class()),
                saving: outcome.edge_savings[e.index()],
            }
        })
        .collect();
    let eliminated_ops: Vec<String> = ptg.eliminated().iter().map(|&n| g.node(n).name.clone()).collect();
    let baseline = estimate_baseline(g, params);
    let optimized = estimate(g, ptg, params);
    Report {
        vtog_edges: v.edges().len(),
        selected,
        virtual_tensors: g.tensor_ids().filter(|&t| ptg.is_virtual(t)).map(|t| g.name(t).to_string()).collect(),
        eliminated_count: eliminated_ops.len(),
        eliminated_ops,
        total_saving: outcome.total_saving,
        final_saving: outcome.final_saving,
        iterations: outcome.iterations,
        oracle_calls: outcome.oracle_calls,
        breakdown_before: Breakdown::of(&baseline),
        breakdown_after: Breakdown::of(&optimized),
        baseline,
        optimized,
        enumeration,
    }
}

/// Writes `report.json`, `decisions.jsonl` and optionally the DOT files.
pub fn write_artifacts(dir: &Path, opt: &Optimized, emit_dot: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&opt.report)?)?;
    fs::write(dir.join("decisions.jsonl"), opt.outcome.decisions_jsonl())?;
    if emit_dot {
        fs::write(dir.join("vtog.dot"), opt.vtog.to_dot())?;
        fs::write(dir.join("ptg.dot"), opt.ptg().to_dot(&opt.vtog))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputDigest {
    pub tensor: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub outputs: Vec<OutputDigest>,
}

/// Runs baseline and strategy on seeded inputs and demands bit equality.
pub fn verify(g: &CompGraph, ptg: &PointsToGraph, seed: u64) -> Result<VerifyReport, ExecError> {
    let inputs = exec::random_inputs(g, seed);
    let base = exec::execute(g, &PointsToGraph::physical(g), &inputs)?;
    let got = exec::execute(g, ptg, &inputs)?;
    exec::compare_outputs(g, &base, &got)?;
    let outputs = got
        .iter()
        .map(|(&t, x)| OutputDigest { tensor: g.name(t).to_string(), sha256: exec::digest(x, g.tensor(t).dtype) })
        .collect();
    Ok(VerifyReport { seed, outputs })
}

/// Test hook: corrupts the resolved map of the first virtual tensor that a
/// scheduled kernel reads or writes. Fails if there is none.
pub fn corrupt_strategy(g: &CompGraph, ptg: &PointsToGraph) -> Result<PointsToGraph> {
    let mut bad = ptg.clone();
    let touched = g
        .topo_order()
        .iter()
        .filter(|&&n| ptg.is_scheduled(n))
        .flat_map(|&n| g.node(n).inputs.iter().chain(&g.node(n).outputs).copied());
    for t in touched {
        if ptg.is_virtual(t) {
            if let Some(m) = ptg.resolved(t).rotated(t) {
                bad.corrupt_map(t, m);
                return Ok(bad);
            }
        }
    }
    bail!("strategy has no virtual tensor whose map can be corrupted")
}

/// Text table of modeled time split by kernel category.
pub fn render_breakdown(before: &Breakdown, after: &Breakdown) -> String {
    let row = |label: &str, b: &Breakdown| {
        format!(
            "{label:<10} {:>12.1} {:>12.1} {:>8} {:>8} {:>7.1}%\n",
            b.data_movement_time,
            b.compute_time,
            b.data_movement_kernels,
            b.compute_kernels,
            100.0 * b.data_movement_share()
        )
    };
    let mut s = format!(
        "{:<10} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
        "", "dm time", "compute", "dm krn", "cmp krn", "dm share"
    );
    s += &row("before", before);
    s += &row("after", after);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DType, GraphBuilder, OpAttrs, OpKind};

    #[test]
    fn no_edge_graph_reports_nothing() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4], DType::F64);
        let y = b.op1("r", OpKind::Relu, OpAttrs::None, &[x], "y").unwrap();
        b.mark_output(y);
        let g = b.build().unwrap();
        let opt = optimize(&g, &OptimizeConfig::default()).unwrap();
        assert_eq!(opt.report.eliminated_count, 0);
        assert_eq!(opt.report.total_saving, 0.0);
        assert_eq!(opt.outcome.iterations, 0);
        verify(&g, opt.ptg(), 1).unwrap();
    }
}
