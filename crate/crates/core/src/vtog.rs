//! The virtual tensor opportunity graph and points-to graph validation.
//!
//! Every VTOG edge `u -> v` says "u can live inside v" and removes exactly one
//! data-movement operator. A selection of edges (a points-to graph) is valid
//! when it is conflict free, acyclic, composes into maps of bounded size,
//! never writes through an aliasing map, and — checked by an exact symbolic
//! simulation of the schedule — never overwrites a value before its last
//! reader has seen it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

use crate::graph::{CompGraph, NodeId, TensorId, TensorKind};
use crate::mapping::{compose_with, suffix_products, IndexBox, IndexMap, MappingError, TypeClass};
use crate::rules::{self, Direction, RuleError, VtRuleCandidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EdgeId(pub u32);

impl EdgeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct VtEdge {
    pub id: EdgeId,
    /// Becomes virtual.
    pub src: TensorId,
    /// The base it points into.
    pub dst: TensorId,
    pub candidate: VtRuleCandidate,
    pub eliminated_op: NodeId,
}

impl VtEdge {
    pub fn static_class(&self) -> TypeClass {
        self.candidate.static_class
    }

    pub fn map(&self) -> &IndexMap {
        &self.candidate.map
    }
}

#[derive(Debug, Error)]
pub enum VtogError {
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error("edges {0} and {1} conflict")]
    ConflictViolation(EdgeId, EdgeId),
    #[error("selected edges form a cycle through {0:?}")]
    CycleDetected(Vec<String>),
    #[error("tensor `{0}` would be written through a non-injective map")]
    WriteAliasing(String),
    #[error("value of `{tensor}` is overwritten before it is read ({detail})")]
    Hazard { tensor: String, detail: String },
    #[error("unknown edge {0}")]
    UnknownEdge(String),
    #[error("{edges} edges is too many to enumerate without a limit")]
    SpaceTooLarge { edges: usize },
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// Per-graph facts shared by every points-to graph: source maps of the
/// data-movement outputs and the symbolic origin of every element.
#[derive(Debug, Clone)]
struct Analysis {
    source_maps: HashMap<(NodeId, usize), IndexMap>,
    /// `origins[t][i]`: the producing (tensor, element) of element `i` of
    /// `t`, after looking through data-movement copies, encoded as a number.
    origins: Vec<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct Vtog {
    graph: CompGraph,
    edges: Vec<VtEdge>,
    out_edges: Vec<Vec<EdgeId>>,
    /// S(u), stored with both orders of each pair.
    conflicts: BTreeMap<TensorId, BTreeSet<(EdgeId, EdgeId)>>,
    analysis: Analysis,
}

/// Builds the VTOG of `g`.
pub fn build_vtog(g: &CompGraph) -> Result<Vtog, VtogError> {
    let mut edges = Vec::new();
    for &n in g.topo_order() {
        if !g.node(n).is_data_movement() {
            continue;
        }
        for cand in rules::vt_rules(g, n)? {
            // Graph inputs and outputs always stay physical.
            if g.tensor(cand.virtual_tensor).is_boundary() {
                continue;
            }
            let id = EdgeId(edges.len() as u32);
            edges.push(VtEdge {
                id,
                src: cand.virtual_tensor,
                dst: cand.base_tensors[0],
                eliminated_op: cand.node,
                candidate: cand,
            });
        }
    }
    let mut out_edges = vec![Vec::new(); g.tensors().len()];
    for e in &edges {
        out_edges[e.src.index()].push(e.id);
    }
    let mut conflicts: BTreeMap<TensorId, BTreeSet<(EdgeId, EdgeId)>> = BTreeMap::new();
    for (u, outs) in out_edges.iter().enumerate() {
        for (i, &a) in outs.iter().enumerate() {
            for &b in &outs[i + 1..] {
                if edges[a.index()].map().disagrees_with(edges[b.index()].map()) {
                    let set = conflicts.entry(TensorId(u as u32)).or_default();
                    set.insert((a, b));
                    set.insert((b, a));
                }
            }
        }
    }
    let analysis = analyze(g);
    Ok(Vtog { graph: g.clone(), edges, out_edges, conflicts, analysis })
}

fn analyze(g: &CompGraph) -> Analysis {
    let mut source_maps = HashMap::new();
    let mut base = vec![0u64; g.tensors().len()];
    let mut next = 0u64;
    for t in g.tensor_ids() {
        base[t.index()] = next;
        next += g.tensor(t).numel() as u64;
    }
    let mut origins: Vec<Vec<u64>> = g
        .tensor_ids()
        .map(|t| (0..g.tensor(t).numel() as u64).map(|i| base[t.index()] + i).collect())
        .collect();
    for &n in g.topo_order() {
        let node = g.node(n);
        if !node.is_data_movement() {
            continue;
        }
        for (i, &o) in node.outputs.iter().enumerate() {
            let m = rules::source_map(g, n, i);
            let suffix = suffix_products(&g.tensor(o).shape);
            let mut out = vec![0u64; g.tensor(o).numel()];
            for p in m.pieces() {
                let src = &origins[p.target.index()];
                p.for_each_value(|idx, v| out[flat(idx, &suffix)] = src[v as usize]);
            }
            origins[o.index()] = out;
            source_maps.insert((n, i), m);
        }
    }
    Analysis { source_maps, origins }
}

fn flat(idx: &[usize], suffix: &[usize]) -> usize {
    idx.iter().zip(suffix).map(|(i, s)| i * s).sum()
}

impl Vtog {
    pub fn graph(&self) -> &CompGraph {
        &self.graph
    }

    /// V_VTOG: every tensor of the graph.
    pub fn nodes(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.graph.tensor_ids()
    }

    pub fn edges(&self) -> &[VtEdge] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> &VtEdge {
        &self.edges[e.index()]
    }

    pub fn out_edges(&self, t: TensorId) -> &[EdgeId] {
        &self.out_edges[t.index()]
    }

    pub fn conflicts(&self, t: TensorId) -> impl Iterator<Item = (EdgeId, EdgeId)> + '_ {
        self.conflicts.get(&t).into_iter().flatten().copied()
    }

    pub fn conflict(&self, a: EdgeId, b: EdgeId) -> bool {
        let src = self.edge(a).src;
        self.conflicts.get(&src).is_some_and(|s| s.contains(&(a, b)))
    }

    pub fn source_map(&self, n: NodeId, out_idx: usize) -> &IndexMap {
        &self.analysis.source_maps[&(n, out_idx)]
    }

    /// `src->dst` with tensor names, e.g. `a->q`.
    pub fn edge_label(&self, e: EdgeId) -> String {
        let ed = self.edge(e);
        format!("{}->{}", self.graph.name(ed.src), self.graph.name(ed.dst))
    }

    /// Resolves an edge reference: either an id (`e3`) or an unambiguous
    /// `src->dst` label.
    pub fn find_edge(&self, spec: &str) -> Result<EdgeId, VtogError> {
        if let Some(n) = spec.strip_prefix('e').and_then(|s| s.parse::<usize>().ok()) {
            if n < self.edges.len() {
                return Ok(EdgeId(n as u32));
            }
        }
        let hits: Vec<EdgeId> =
            self.edges.iter().map(|e| e.id).filter(|&e| self.edge_label(e) == spec).collect();
        match hits.as_slice() {
            [e] => Ok(*e),
            _ => Err(VtogError::UnknownEdge(spec.to_string())),
        }
    }

    pub fn all_physical(&self) -> PointsToGraph {
        validate_ptg(self, &[]).expect("the empty selection is always valid")
    }

    pub fn to_dot(&self) -> String {
        let g = &self.graph;
        let mut s = String::from("digraph vtog {\n  rankdir=LR;\n  node [shape=ellipse];\n");
        for t in g.tensor_ids() {
            let style = if g.tensor(t).is_boundary() { ", style=bold" } else { "" };
            let _ = writeln!(s, "  \"{}\" [label=\"{}\"{style}];", g.name(t), g.name(t));
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [label=\"{} {:?}\"];",
                g.name(e.src),
                g.name(e.dst),
                e.id,
                e.static_class()
            );
        }
        for pairs in self.conflicts.values() {
            for &(a, b) in pairs.iter().filter(|(a, b)| a < b) {
                let _ = writeln!(
                    s,
                    "  \"{}\" -> \"{}\" [style=dashed, color=red, dir=none, label=\"{a}x{b}\", constraint=false];",
                    g.name(self.edge(a).dst),
                    g.name(self.edge(b).dst)
                );
            }
        }
        s.push_str("}\n");
        s
    }
}

/// One complete virtualization strategy with every map resolved down to
/// physical storage.
#[derive(Debug, Clone)]
pub struct PointsToGraph {
    selected: Vec<EdgeId>,
    resolved: Vec<IndexMap>,
    storage: Vec<bool>,
    /// For data-movement nodes, per output, the boxes that still need a copy.
    moved: Vec<Option<Vec<Vec<IndexBox>>>>,
    scheduled: Vec<bool>,
}

impl PointsToGraph {
    /// Every tensor physical, every kernel scheduled.
    pub fn physical(g: &CompGraph) -> PointsToGraph {
        let resolved = g.tensor_ids().map(|t| IndexMap::identity(t, &g.tensor(t).shape)).collect();
        let moved = g
            .nodes()
            .iter()
            .map(|n| {
                n.is_data_movement()
                    .then(|| n.outputs.iter().map(|&o| vec![IndexBox::full(&g.tensor(o).shape)]).collect())
            })
            .collect();
        PointsToGraph {
            selected: Vec::new(),
            resolved,
            storage: vec![true; g.tensors().len()],
            moved,
            scheduled: vec![true; g.nodes().len()],
        }
    }

    pub fn selected(&self) -> &[EdgeId] {
        &self.selected
    }

    pub fn resolved(&self, t: TensorId) -> &IndexMap {
        &self.resolved[t.index()]
    }

    /// True when no element of `t` lives in its own buffer.
    pub fn is_virtual(&self, t: TensorId) -> bool {
        !self.resolved[t.index()].targets().contains_key(&t)
    }

    /// Tensors that own a buffer under this strategy.
    pub fn owns_storage(&self, t: TensorId) -> bool {
        self.storage[t.index()]
    }

    pub fn is_scheduled(&self, n: NodeId) -> bool {
        self.scheduled[n.index()]
    }

    pub fn moved(&self, n: NodeId, out_idx: usize) -> Option<&[IndexBox]> {
        self.moved[n.index()].as_ref().map(|v| v[out_idx].as_slice())
    }

    pub fn moved_elements(&self, n: NodeId) -> usize {
        self.moved[n.index()]
            .as_ref()
            .map(|v| v.iter().flatten().map(|b| b.volume()).sum())
            .unwrap_or(0)
    }

    pub fn eliminated(&self) -> Vec<NodeId> {
        (0..self.scheduled.len())
            .filter(|&i| !self.scheduled[i] && self.moved[i].is_some())
            .map(|i| NodeId(i as u32))
            .collect()
    }

    /// Test hook: replace one resolved map, bypassing validation.
    pub fn corrupt_map(&mut self, t: TensorId, m: IndexMap) {
        self.resolved[t.index()] = m;
    }

    pub fn to_dot(&self, v: &Vtog) -> String {
        let g = v.graph();
        let mut s = String::from("digraph ptg {\n  rankdir=LR;\n");
        for t in g.tensor_ids() {
            let style = if self.owns_storage(t) { "style=filled, fillcolor=lightgray" } else { "style=dashed" };
            let _ = writeln!(s, "  \"{}\" [{style}];", g.name(t));
        }
        for &e in &self.selected {
            let ed = v.edge(e);
            let _ = writeln!(s, "  \"{}\" -> \"{}\" [label=\"{e}\"];", g.name(ed.src), g.name(ed.dst));
        }
        s.push_str("}\n");
        s
    }
}

/// Checks a selection and resolves it into a [`PointsToGraph`].
pub fn validate_ptg(v: &Vtog, selected: &[EdgeId]) -> Result<PointsToGraph, VtogError> {
    let g = &v.graph;
    let mut sel: Vec<EdgeId> = selected.to_vec();
    sel.sort();
    sel.dedup();
    if let Some(e) = sel.iter().find(|e| e.index() >= v.edges.len()) {
        return Err(VtogError::UnknownEdge(e.to_string()));
    }
    let nt = g.tensors().len();
    let mut chosen: Vec<Vec<EdgeId>> = vec![Vec::new(); nt];
    for &e in &sel {
        chosen[v.edge(e).src.index()].push(e);
    }
    for outs in &chosen {
        for (i, &a) in outs.iter().enumerate() {
            for &b in &outs[i + 1..] {
                if v.conflict(a, b) {
                    return Err(VtogError::ConflictViolation(a, b));
                }
            }
        }
    }
    let order = base_first_order(v, &chosen)?;

    // Resolve maps, bases before the tensors pointing into them.
    let mut resolved: Vec<Option<IndexMap>> = vec![None; nt];
    for &t in &order {
        let ti = t.index();
        let shape = &g.tensor(t).shape;
        if chosen[ti].is_empty() {
            resolved[ti] = Some(IndexMap::identity(t, shape));
            continue;
        }
        let mut local = v.edge(chosen[ti][0]).map().clone();
        for &e in &chosen[ti][1..] {
            local = local.union(v.edge(e).map());
        }
        let local = local.fill_with_identity(t);
        let r = compose_with(&local, |b| if chosen[b.index()].is_empty() { None } else { resolved[b.index()].as_ref() })?;
        resolved[ti] = Some(r);
    }
    let resolved: Vec<IndexMap> = resolved.into_iter().map(|m| m.expect("every tensor resolved")).collect();

    let mut storage = vec![false; nt];
    for m in &resolved {
        for t in m.target_ids() {
            storage[t.index()] = true;
        }
    }

    // Which data-movement copies are already in place.
    let mut moved = vec![None; g.nodes().len()];
    let mut scheduled = vec![true; g.nodes().len()];
    for (ni, node) in g.nodes().iter().enumerate() {
        let n = NodeId(ni as u32);
        if !node.is_data_movement() {
            continue;
        }
        let mut per_out = Vec::with_capacity(node.outputs.len());
        for (i, &o) in node.outputs.iter().enumerate() {
            let src = v.source_map(n, i);
            let through = compose_with(src, |b| if chosen[b.index()].is_empty() { None } else { Some(&resolved[b.index()]) })?;
            per_out.push(resolved[o.index()].disagreement(&through));
        }
        scheduled[ni] = per_out.iter().any(|b| !b.is_empty());
        moved[ni] = Some(per_out);
    }

    let ptg = PointsToGraph { selected: sel, resolved, storage, moved, scheduled };

    // Scheduled kernels must write through injective maps.
    for (ni, node) in g.nodes().iter().enumerate() {
        if !ptg.scheduled[ni] {
            continue;
        }
        for (i, &o) in node.outputs.iter().enumerate() {
            let m = write_map(&ptg, NodeId(ni as u32), i, o);
            if !m.check_writable() {
                return Err(VtogError::WriteAliasing(g.name(o).to_string()));
            }
        }
    }

    simulate(v, &ptg)?;
    Ok(ptg)
}

/// The part of `R(o)` a scheduled node actually writes.
fn write_map(ptg: &PointsToGraph, n: NodeId, out_idx: usize, o: TensorId) -> IndexMap {
    let r = ptg.resolved(o);
    match ptg.moved(n, out_idx) {
        None => r.clone(),
        Some(boxes) => {
            let mut pieces = Vec::new();
            for b in boxes {
                pieces.extend(r.restrict(b).pieces().iter().cloned());
            }
            IndexMap::new_unchecked(r.virtual_shape().to_vec(), pieces, r.targets().clone())
        }
    }
}

/// Tensors ordered so that every selected edge's destination comes before
/// its source; fails on cycles.
fn base_first_order(v: &Vtog, chosen: &[Vec<EdgeId>]) -> Result<Vec<TensorId>, VtogError> {
    let nt = chosen.len();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; nt];
    let mut order = Vec::with_capacity(nt);
    for start in 0..nt {
        if state[start] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        state[start] = 1;
        while let Some(&mut (t, ref mut next)) = stack.last_mut() {
            if *next < chosen[t].len() {
                let d = v.edge(chosen[t][*next]).dst.index();
                *next += 1;
                match state[d] {
                    0 => {
                        state[d] = 1;
                        stack.push((d, 0));
                    }
                    1 => {
                        let pos = stack.iter().position(|&(x, _)| x == d).unwrap();
                        let names =
                            stack[pos..].iter().map(|&(x, _)| v.graph.name(TensorId(x as u32)).to_string()).collect();
                        return Err(VtogError::CycleDetected(names));
                    }
                    _ => {}
                }
            } else {
                state[t] = 2;
                order.push(TensorId(t as u32));
                stack.pop();
            }
        }
    }
    Ok(order)
}

const UNDEF: u64 = u64::MAX;

/// Replays the schedule over physical locations holding symbolic values and
/// checks that every read sees the value the unmodified graph would read.
fn simulate(v: &Vtog, ptg: &PointsToGraph) -> Result<(), VtogError> {
    let g = &v.graph;
    let origins = &v.analysis.origins;
    let mut mem: Vec<Vec<u64>> = g
        .tensor_ids()
        .map(|t| {
            if !ptg.owns_storage(t) {
                Vec::new()
            } else if g.tensor(t).kind == TensorKind::GraphInput {
                origins[t.index()].clone()
            } else {
                vec![UNDEF; g.tensor(t).numel()]
            }
        })
        .collect();
    let hazard = |t: TensorId, detail: String| VtogError::Hazard { tensor: g.name(t).to_string(), detail };

    // Checks that `m` (over tensor `t`'s index space, restricted to `region`)
    // reads the expected symbolic values.
    let check = |mem: &Vec<Vec<u64>>, t: TensorId, m: &IndexMap, what: &str| -> Result<(), VtogError> {
        let suffix = suffix_products(&g.tensor(t).shape);
        let want = &origins[t.index()];
        for p in m.pieces() {
            let buf = &mem[p.target.index()];
            let mut bad = None;
            p.for_each_value(|idx, val| {
                if bad.is_none() && buf[val as usize] != want[flat(idx, &suffix)] {
                    bad = Some(idx.to_vec());
                }
            });
            if let Some(idx) = bad {
                return Err(hazard(t, format!("{what} at index {idx:?}")));
            }
        }
        Ok(())
    };

    for &n in g.topo_order() {
        if !ptg.is_scheduled(n) {
            continue;
        }
        let node = g.node(n);
        let mut writes: Vec<(TensorId, IndexMap)> = Vec::new();
        if node.is_data_movement() {
            for (i, &o) in node.outputs.iter().enumerate() {
                let boxes = ptg.moved(n, i).unwrap_or(&[]);
                if boxes.is_empty() {
                    continue;
                }
                let src = v.source_map(n, i);
                let through = compose_with(src, |b| Some(ptg.resolved(b)))?;
                for b in boxes {
                    check(&mem, o, &through.restrict(b), &format!("copy by `{}`", node.name))?;
                }
                writes.push((o, write_map(ptg, n, i, o)));
            }
        } else {
            for &t in &node.inputs {
                check(&mem, t, ptg.resolved(t), &format!("read by `{}`", node.name))?;
            }
            for &o in &node.outputs {
                writes.push((o, ptg.resolved(o).clone()));
            }
        }
        for (o, m) in writes {
            let suffix = suffix_products(&g.tensor(o).shape);
            let val = &origins[o.index()];
            for p in m.pieces() {
                let buf = &mut mem[p.target.index()];
                p.for_each_value(|idx, off| buf[off as usize] = val[flat(idx, &suffix)]);
            }
        }
    }
    for t in g.observed() {
        check(&mem, t, ptg.resolved(t), "final value")?;
    }
    Ok(())
}

/// All valid points-to graphs, by increasing size and then lexicographic
/// edge order; stops after `limit` results when given.
pub fn enumerate_ptgs(v: &Vtog, limit: Option<usize>) -> Result<Vec<PointsToGraph>, VtogError> {
    let ne = v.edges.len();
    if limit.is_none() && ne > 20 {
        return Err(VtogError::SpaceTooLarge { edges: ne });
    }
    let cap = limit.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for size in 0..=ne {
        let mut comb: Vec<usize> = (0..size).collect();
        loop {
            if out.len() >= cap {
                return Ok(out);
            }
            let sel: Vec<EdgeId> = comb.iter().map(|&i| EdgeId(i as u32)).collect();
            if quick_ok(v, &sel) {
                if let Ok(p) = validate_ptg(v, &sel) {
                    out.push(p);
                }
            }
            // Next combination in lexicographic order.
            let mut i = size;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if comb[i] < ne - size + i {
                    comb[i] += 1;
                    for j in i + 1..size {
                        comb[j] = comb[j - 1] + 1;
                    }
                    break;
                }
                if i == 0 {
                    i = usize::MAX;
                    break;
                }
            }
            if size == 0 || i == usize::MAX {
                break;
            }
        }
    }
    Ok(out)
}

/// Cheap filters before full validation: pairwise conflicts and two-cycles.
fn quick_ok(v: &Vtog, sel: &[EdgeId]) -> bool {
    for (i, &a) in sel.iter().enumerate() {
        for &b in &sel[i + 1..] {
            let (ea, eb) = (v.edge(a), v.edge(b));
            if ea.src == eb.src && v.conflict(a, b) {
                return false;
            }
            if ea.src == eb.dst && ea.dst == eb.src {
                return false;
            }
        }
    }
    true
}

/// Count of InputOverOutput edges, used in reports.
pub fn count_direction(v: &Vtog, d: Direction) -> usize {
    v.edges.iter().filter(|e| e.candidate.direction == d).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DType, GraphBuilder, OpAttrs, OpKind};

    fn relu_transpose_relu() -> CompGraph {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[3, 4], DType::F64);
        let t1 = b.op1("r1", OpKind::Relu, OpAttrs::None, &[x], "t1").unwrap();
        let t2 = b.op1("tr", OpKind::Transpose, OpAttrs::Transpose { perm: vec![1, 0] }, &[t1], "t2").unwrap();
        let y = b.op1("r2", OpKind::Relu, OpAttrs::None, &[t2], "y").unwrap();
        b.mark_output(y);
        b.build().unwrap()
    }

    #[test]
    fn no_data_movement_means_no_edges() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 2], DType::F64);
        let y = b.op1("r", OpKind::Relu, OpAttrs::None, &[x], "y").unwrap();
        b.mark_output(y);
        let v = build_vtog(&b.build().unwrap()).unwrap();
        assert!(v.edges().is_empty());
        assert_eq!(v.nodes().count(), 2);
        assert_eq!(enumerate_ptgs(&v, None).unwrap().len(), 1);
    }

    #[test]
    fn transpose_both_directions_and_cycle() {
        let g = relu_transpose_relu();
        let v = build_vtog(&g).unwrap();
        assert_eq!(v.edges().len(), 2);
        for e in v.edges() {
            let p = validate_ptg(&v, &[e.id]).unwrap();
            assert_eq!(p.eliminated().len(), 1);
        }
        let both: Vec<EdgeId> = v.edges().iter().map(|e| e.id).collect();
        assert!(matches!(validate_ptg(&v, &both), Err(VtogError::CycleDetected(_))));
        assert_eq!(enumerate_ptgs(&v, None).unwrap().len(), 3);
    }

    #[test]
    fn empty_selection_is_identity() {
        let g = relu_transpose_relu();
        let v = build_vtog(&g).unwrap();
        let p = v.all_physical();
        for t in g.tensor_ids() {
            assert!(p.resolved(t).is_identity_of(t));
            assert!(p.owns_storage(t));
        }
        assert!(p.eliminated().is_empty());
    }

    #[test]
    fn enumeration_matches_subset_filter() {
        // Two independent transposes plus a reshape: 6 edges.
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3], DType::F64);
        let a = b.op1("r0", OpKind::Relu, OpAttrs::None, &[x], "a").unwrap();
        let t = b.op1("t", OpKind::Transpose, OpAttrs::Transpose { perm: vec![1, 0] }, &[a], "t").unwrap();
        let r = b.op1("rs", OpKind::Reshape, OpAttrs::Reshape { shape: vec![6] }, &[t], "r").unwrap();
        let u = b.op1("u", OpKind::Unsqueeze, OpAttrs::Unsqueeze { axes: vec![0] }, &[r], "u").unwrap();
        let y = b.op1("r1", OpKind::Relu, OpAttrs::None, &[u], "y").unwrap();
        b.mark_output(y);
        let v = build_vtog(&b.build().unwrap()).unwrap();
        assert_eq!(v.edges().len(), 6);
        let all = enumerate_ptgs(&v, None).unwrap();
        let mut direct = 0;
        for mask in 0u32..64 {
            let sel: Vec<EdgeId> = (0..6).filter(|i| mask & (1 << i) != 0).map(EdgeId).collect();
            if validate_ptg(&v, &sel).is_ok() {
                direct += 1;
            }
        }
        assert_eq!(all.len(), direct);
        // Without cycles each of the three operators offers one of two
        // directions or none, so 27 subsets are candidates before hazards.
        assert!((8..=27).contains(&direct), "{direct}");
        for w in all.windows(2) {
            assert!(w[0].selected().len() <= w[1].selected().len());
        }
    }

    #[test]
    fn conflicts_are_symmetric() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 4], DType::F64);
        let a = b.op1("r0", OpKind::Relu, OpAttrs::None, &[x], "a").unwrap();
        let c = b.op1("c", OpKind::Concat, OpAttrs::Concat { axis: 0 }, &[a, a], "c").unwrap();
        let y = b.op1("r1", OpKind::Relu, OpAttrs::None, &[c], "y").unwrap();
        b.mark_output(y);
        let v = build_vtog(&b.build().unwrap()).unwrap();
        let pairs: Vec<_> = v.conflicts(a).collect();
        assert!(!pairs.is_empty());
        for (p, q) in pairs {
            assert!(v.conflict(q, p));
        }
    }
}
