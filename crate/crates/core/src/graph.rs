//! Computation-graph IR: tensors, operator nodes, attribute schemas, shape
//! inference and the JSON fixture format.
//!
//! A [`CompGraph`] is immutable once built. Construction validates the
//! attribute record of every node, checks that the graph is a DAG where each
//! non-input tensor has exactly one producer, and infers every tensor shape
//! from the graph-input shapes.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorId(pub u32);

impl TensorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    I64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F64 | DType::I64 => 8,
            DType::F32 => 4,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F64 | DType::F32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorKind {
    GraphInput,
    GraphOutput,
    Intermediate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype.size_bytes()
    }

    /// Graph inputs and outputs must stay physical.
    pub fn is_boundary(&self) -> bool {
        matches!(self.kind, TensorKind::GraphInput | TensorKind::GraphOutput)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    SiLU,
    /// Fused scaled-dot-product attention over `(.., Lq, D)` queries and
    /// `(.., Lk, D)` keys/values.
    Attention,
    Transpose,
    Reshape,
    Split,
    Concat,
    Slice,
    Unsqueeze,
    Expand,
    ScatterND,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::SiLU,
        OpKind::Attention,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Split,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Unsqueeze,
        OpKind::Expand,
        OpKind::ScatterND,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "MatMul",
            OpKind::Add => "Add",
            OpKind::Sub => "Sub",
            OpKind::Mul => "Mul",
            OpKind::Relu => "Relu",
            OpKind::SiLU => "SiLU",
            OpKind::Attention => "Attention",
            OpKind::Transpose => "Transpose",
            OpKind::Reshape => "Reshape",
            OpKind::Split => "Split",
            OpKind::Concat => "Concat",
            OpKind::Slice => "Slice",
            OpKind::Unsqueeze => "Unsqueeze",
            OpKind::Expand => "Expand",
            OpKind::ScatterND => "ScatterND",
        }
    }

    pub fn from_name(name: &str) -> Result<OpKind, GraphError> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| GraphError::UnknownOperator(name.to_string()))
    }

    /// True when every output element is a copy of exactly one input element
    /// under a map known at compile time.
    pub fn is_data_movement(self) -> bool {
        matches!(
            self,
            OpKind::Transpose
                | OpKind::Reshape
                | OpKind::Split
                | OpKind::Concat
                | OpKind::Slice
                | OpKind::Unsqueeze
                | OpKind::Expand
                | OpKind::ScatterND
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Operator-specific attributes, already validated against the schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpAttrs {
    None,
    Transpose { perm: Vec<usize> },
    Reshape { shape: Vec<i64> },
    Split { axis: usize, split: Vec<usize> },
    Concat { axis: usize },
    Slice { starts: Vec<usize>, ends: Vec<usize>, axes: Vec<usize>, steps: Vec<usize> },
    Unsqueeze { axes: Vec<usize> },
    Expand { shape: Vec<usize> },
    /// Static scatter positions. `indices` holds one index tuple per update
    /// slice, laid out row-major over `batch_shape`.
    ScatterND { indices: Vec<Vec<usize>>, batch_shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpNode {
    pub name: String,
    pub kind: OpKind,
    pub attrs: OpAttrs,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl OpNode {
    pub fn is_data_movement(&self) -> bool {
        self.kind.is_data_movement()
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("graph contains a cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("shape error at node `{node}`: {msg}")]
    Shape { node: String, msg: String },
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn schema(msg: impl Into<String>) -> GraphError {
    GraphError::Schema(msg.into())
}

#[derive(Debug, Clone)]
pub struct CompGraph {
    tensors: Vec<TensorSpec>,
    nodes: Vec<OpNode>,
    by_name: HashMap<String, TensorId>,
    topo: Vec<NodeId>,
    producer: Vec<Option<NodeId>>,
    consumers: Vec<Vec<NodeId>>,
}

/// A tensor declaration before shape inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Option<Vec<usize>>,
    pub dtype: Option<DType>,
    pub kind: TensorKind,
}

impl CompGraph {
    /// Validates the declarations and infers every missing shape.
    pub fn new(decls: Vec<TensorDecl>, nodes: Vec<OpNode>) -> Result<CompGraph, GraphError> {
        let mut by_name = HashMap::new();
        for (i, d) in decls.iter().enumerate() {
            if by_name.insert(d.name.clone(), TensorId(i as u32)).is_some() {
                return Err(schema(format!("duplicate tensor id `{}`", d.name)));
            }
            if let Some(shape) = &d.shape {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(schema(format!("tensor `{}` has an empty or zero-sized shape", d.name)));
                }
            }
        }
        let mut node_names = BTreeSet::new();
        let mut producer = vec![None; decls.len()];
        let mut consumers = vec![Vec::new(); decls.len()];
        for (n, node) in nodes.iter().enumerate() {
            if !node_names.insert(node.name.clone()) {
                return Err(schema(format!("duplicate node id `{}`", node.name)));
            }
            for &t in node.inputs.iter().chain(&node.outputs) {
                if t.index() >= decls.len() {
                    return Err(schema(format!("node `{}` references unknown tensor {t}", node.name)));
                }
            }
            for &t in &node.inputs {
                if !consumers[t.index()].contains(&NodeId(n as u32)) {
                    consumers[t.index()].push(NodeId(n as u32));
                }
            }
            for &t in &node.outputs {
                if decls[t.index()].kind == TensorKind::GraphInput {
                    return Err(schema(format!(
                        "graph input `{}` is produced by node `{}`",
                        decls[t.index()].name,
                        node.name
                    )));
                }
                if producer[t.index()].replace(NodeId(n as u32)).is_some() {
                    return Err(schema(format!(
                        "tensor `{}` has more than one producer",
                        decls[t.index()].name
                    )));
                }
            }
        }
        for (i, d) in decls.iter().enumerate() {
            if d.kind != TensorKind::GraphInput && producer[i].is_none() {
                return Err(schema(format!("tensor `{}` has no producer", d.name)));
            }
            if d.kind == TensorKind::GraphInput && d.shape.is_none() {
                return Err(schema(format!("graph input `{}` needs a shape", d.name)));
            }
        }

        let topo = topo_order(&nodes, &producer)?;

        let mut shapes: Vec<Option<(Vec<usize>, DType)>> = decls
            .iter()
            .map(|d| match d.kind {
                TensorKind::GraphInput => Some((d.shape.clone().unwrap(), d.dtype.unwrap_or(DType::F64))),
                _ => None,
            })
            .collect();
        for &nid in &topo {
            let node = &nodes[nid.index()];
            let ins: Vec<(Vec<usize>, DType)> =
                node.inputs.iter().map(|t| shapes[t.index()].clone().unwrap()).collect();
            let outs = infer_node(node, &ins).map_err(|msg| GraphError::Shape { node: node.name.clone(), msg })?;
            if outs.len() != node.outputs.len() {
                return Err(GraphError::Shape {
                    node: node.name.clone(),
                    msg: format!("expected {} outputs, found {}", outs.len(), node.outputs.len()),
                });
            }
            for (&t, out) in node.outputs.iter().zip(outs) {
                let d = &decls[t.index()];
                if let Some(declared) = &d.shape {
                    if *declared != out.0 {
                        return Err(GraphError::Shape {
                            node: node.name.clone(),
                            msg: format!("tensor `{}` declared {:?} but inferred {:?}", d.name, declared, out.0),
                        });
                    }
                }
                if let Some(dt) = d.dtype {
                    if dt != out.1 {
                        return Err(GraphError::Shape {
                            node: node.name.clone(),
                            msg: format!("tensor `{}` declared {:?} but inferred {:?}", d.name, dt, out.1),
                        });
                    }
                }
                shapes[t.index()] = Some(out);
            }
        }

        let tensors = decls
            .into_iter()
            .zip(shapes)
            .map(|(d, s)| {
                let (shape, dtype) = s.expect("every tensor is an input or has a producer");
                TensorSpec { name: d.name, shape, dtype, kind: d.kind }
            })
            .collect();
        Ok(CompGraph { tensors, nodes, by_name, topo, producer, consumers })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, t: TensorId) -> &TensorSpec {
        &self.tensors[t.index()]
    }

    pub fn tensor_ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        (0..self.tensors.len()).map(|i| TensorId(i as u32))
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, t: TensorId) -> &str {
        &self.tensors[t.index()].name
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn node(&self, n: NodeId) -> &OpNode {
        &self.nodes[n.index()]
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(|i| NodeId(i as u32))
    }

    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn producer(&self, t: TensorId) -> Option<NodeId> {
        self.producer[t.index()]
    }

    pub fn consumers(&self, t: TensorId) -> &[NodeId] {
        &self.consumers[t.index()]
    }

    pub fn inputs(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.tensor_ids().filter(|&t| self.tensor(t).kind == TensorKind::GraphInput)
    }

    pub fn outputs(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.tensor_ids().filter(|&t| self.tensor(t).kind == TensorKind::GraphOutput)
    }

    /// Graph outputs plus intermediates nobody consumes. These are the values
    /// an execution must reproduce.
    pub fn observed(&self) -> Vec<TensorId> {
        self.tensor_ids()
            .filter(|&t| match self.tensor(t).kind {
                TensorKind::GraphOutput => true,
                TensorKind::Intermediate => self.consumers(t).is_empty(),
                TensorKind::GraphInput => false,
            })
            .collect()
    }

    pub fn data_movement_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.topo.iter().copied().filter(|&n| self.node(n).is_data_movement())
    }

    pub fn parse_json(text: &str) -> Result<CompGraph, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        CompGraph::from_doc(doc)
    }

    fn from_doc(doc: GraphDoc) -> Result<CompGraph, GraphError> {
        let mut index = HashMap::new();
        for (i, t) in doc.tensors.iter().enumerate() {
            index.insert(t.id.clone(), TensorId(i as u32));
        }
        let lookup = |name: &str, node: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| schema(format!("node `{node}` references unknown tensor `{name}`")))
        };
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for nd in &doc.nodes {
            let kind = OpKind::from_name(&nd.kind)?;
            let attrs = parse_attrs(kind, &nd.attrs).map_err(|m| schema(format!("node `{}`: {m}", nd.id)))?;
            let inputs = nd.inputs.iter().map(|s| lookup(s, &nd.id)).collect::<Result<Vec<_>, _>>()?;
            let outputs = nd.outputs.iter().map(|s| lookup(s, &nd.id)).collect::<Result<Vec<_>, _>>()?;
            nodes.push(OpNode { name: nd.id.clone(), kind, attrs, inputs, outputs });
        }
        let decls = doc
            .tensors
            .into_iter()
            .map(|t| TensorDecl { name: t.id, shape: t.shape, dtype: t.dtype, kind: t.kind })
            .collect();
        CompGraph::new(decls, nodes)
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorDoc {
                    id: t.name.clone(),
                    shape: Some(t.shape.clone()),
                    dtype: Some(t.dtype),
                    kind: t.kind,
                })
                .collect(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.name.clone(),
                    kind: n.kind.name().to_string(),
                    attrs: attrs_to_json(&n.attrs),
                    inputs: n.inputs.iter().map(|&t| self.name(t).to_string()).collect(),
                    outputs: n.outputs.iter().map(|&t| self.name(t).to_string()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph documents always serialize")
    }
}

/// Recomputes every non-input shape from the graph-input shapes.
///
/// Shapes are already inferred at construction, so this returns a graph
/// equal to its argument; it exists for callers holding a graph built from
/// edited declarations.
pub fn infer_shapes(g: &CompGraph) -> Result<CompGraph, GraphError> {
    let decls = g
        .tensors
        .iter()
        .map(|t| TensorDecl {
            name: t.name.clone(),
            shape: (t.kind == TensorKind::GraphInput).then(|| t.shape.clone()),
            dtype: (t.kind == TensorKind::GraphInput).then_some(t.dtype),
            kind: t.kind,
        })
        .collect();
    CompGraph::new(decls, g.nodes.clone())
}

pub fn is_data_movement(node: &OpNode) -> bool {
    node.is_data_movement()
}

fn topo_order(nodes: &[OpNode], producer: &[Option<NodeId>]) -> Result<Vec<NodeId>, GraphError> {
    let mut indegree = vec![0usize; nodes.len()];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (n, node) in nodes.iter().enumerate() {
        let mut preds = BTreeSet::new();
        for &t in &node.inputs {
            if let Some(p) = producer[t.index()] {
                preds.insert(p.index());
            }
        }
        indegree[n] = preds.len();
        for p in preds {
            succ[p].push(n);
        }
    }
    // Lowest node index first keeps the order stable across runs.
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&n| indegree[n] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(n) = ready.pop_first() {
        order.push(NodeId(n as u32));
        for &s in &succ[n] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).filter(|&n| indegree[n] > 0).map(|n| nodes[n].name.clone()).collect();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}

fn infer_node(node: &OpNode, ins: &[(Vec<usize>, DType)]) -> Result<Vec<(Vec<usize>, DType)>, String> {
    let arity = |n: usize| -> Result<(), String> {
        if ins.len() != n {
            return Err(format!("{} expects {n} inputs, got {}", node.kind, ins.len()));
        }
        Ok(())
    };
    if let Some(first) = ins.first() {
        if ins.iter().any(|(_, d)| *d != first.1) {
            return Err("inputs have mixed dtypes".into());
        }
    }
    let dtype = ins.first().map(|i| i.1).unwrap_or(DType::F64);
    let one = |shape: Vec<usize>| Ok(vec![(shape, dtype)]);
    match (&node.kind, &node.attrs) {
        (OpKind::Relu, _) => {
            arity(1)?;
            one(ins[0].0.clone())
        }
        (OpKind::SiLU, _) => {
            arity(1)?;
            if !dtype.is_float() {
                return Err("SiLU needs a floating-point input".into());
            }
            one(ins[0].0.clone())
        }
        (OpKind::Add | OpKind::Sub | OpKind::Mul, _) => {
            arity(2)?;
            if ins[0].0 != ins[1].0 {
                return Err(format!("operand shapes differ: {:?} vs {:?}", ins[0].0, ins[1].0));
            }
            one(ins[0].0.clone())
        }
        (OpKind::MatMul, _) => {
            arity(2)?;
            let (a, b) = (&ins[0].0, &ins[1].0);
            if a.len() < 2 || b.len() < 2 {
                return Err("MatMul operands need rank >= 2".into());
            }
            let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
            let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
            if ka != kb {
                return Err(format!("inner dimensions differ: {ka} vs {kb}"));
            }
            let mut out = broadcast_batch(&a[..a.len() - 2], &b[..b.len() - 2])?;
            out.extend([m, n]);
            one(out)
        }
        (OpKind::Attention, _) => {
            arity(3)?;
            if !dtype.is_float() {
                return Err("Attention needs floating-point inputs".into());
            }
            let (q, k, v) = (&ins[0].0, &ins[1].0, &ins[2].0);
            let r = q.len();
            if r < 2 || k.len() != r || v.len() != r {
                return Err("Attention operands need equal rank >= 2".into());
            }
            if q[..r - 2] != k[..r - 2] || q[..r - 2] != v[..r - 2] {
                return Err("Attention batch dimensions differ".into());
            }
            if q[r - 1] != k[r - 1] || k[r - 2] != v[r - 2] {
                return Err("Attention head/sequence dimensions disagree".into());
            }
            let mut out = q.clone();
            out[r - 1] = v[r - 1];
            one(out)
        }
        (OpKind::Transpose, OpAttrs::Transpose { perm }) => {
            arity(1)?;
            let s = &ins[0].0;
            check_perm(perm, s.len())?;
            one(perm.iter().map(|&p| s[p]).collect())
        }
        (OpKind::Reshape, OpAttrs::Reshape { shape }) => {
            arity(1)?;
            one(resolve_reshape(&ins[0].0, shape)?)
        }
        (OpKind::Split, OpAttrs::Split { axis, split }) => {
            arity(1)?;
            let s = &ins[0].0;
            if *axis >= s.len() {
                return Err(format!("axis {axis} out of range for rank {}", s.len()));
            }
            if split.is_empty() || split.contains(&0) {
                return Err("split sizes must be positive".into());
            }
            let total: usize = split.iter().sum();
            if total != s[*axis] {
                return Err(format!("split sizes sum to {total} but axis {axis} has {}", s[*axis]));
            }
            Ok(split
                .iter()
                .map(|&len| {
                    let mut o = s.clone();
                    o[*axis] = len;
                    (o, dtype)
                })
                .collect())
        }
        (OpKind::Concat, OpAttrs::Concat { axis }) => {
            if ins.is_empty() {
                return Err("Concat needs at least one input".into());
            }
            let s0 = &ins[0].0;
            if *axis >= s0.len() {
                return Err(format!("axis {axis} out of range for rank {}", s0.len()));
            }
            let mut out = s0.clone();
            out[*axis] = 0;
            for (s, _) in ins {
                if s.len() != s0.len() || s.iter().zip(s0).enumerate().any(|(i, (a, b))| i != *axis && a != b) {
                    return Err(format!("Concat operand {s:?} incompatible with {s0:?}"));
                }
                out[*axis] += s[*axis];
            }
            one(out)
        }
        (OpKind::Slice, OpAttrs::Slice { starts, ends, axes, steps }) => {
            arity(1)?;
            let s = &ins[0].0;
            let mut out = s.clone();
            let mut seen = BTreeSet::new();
            for i in 0..axes.len() {
                let (ax, st, en, sp) = (axes[i], starts[i], ends[i], steps[i]);
                if ax >= s.len() || !seen.insert(ax) {
                    return Err(format!("bad slice axis {ax}"));
                }
                if sp == 0 || st >= en || en > s[ax] {
                    return Err(format!("bad slice range {st}..{en} step {sp} on dim {}", s[ax]));
                }
                out[ax] = (en - st).div_ceil(sp);
            }
            one(out)
        }
        (OpKind::Unsqueeze, OpAttrs::Unsqueeze { axes }) => {
            arity(1)?;
            let s = &ins[0].0;
            let rank = s.len() + axes.len();
            let set: BTreeSet<usize> = axes.iter().copied().collect();
            if set.len() != axes.len() || set.iter().any(|&a| a >= rank) {
                return Err(format!("bad unsqueeze axes {axes:?} for output rank {rank}"));
            }
            let mut src = s.iter();
            one((0..rank).map(|i| if set.contains(&i) { 1 } else { *src.next().unwrap() }).collect())
        }
        (OpKind::Expand, OpAttrs::Expand { shape }) => {
            arity(1)?;
            let s = &ins[0].0;
            if shape.len() < s.len() {
                return Err("Expand target rank is smaller than input rank".into());
            }
            let padded = pad_left(s, shape.len());
            for (&t, &d) in shape.iter().zip(&padded) {
                if t == 0 || t % d != 0 {
                    return Err(format!("cannot expand {s:?} to {shape:?}"));
                }
            }
            one(shape.clone())
        }
        (OpKind::ScatterND, OpAttrs::ScatterND { indices, batch_shape }) => {
            arity(2)?;
            let (data, updates) = (&ins[0].0, &ins[1].0);
            let k = indices.first().map(|t| t.len()).ok_or("ScatterND needs at least one index")?;
            if k == 0 || k > data.len() {
                return Err(format!("index tuples of length {k} do not fit rank {}", data.len()));
            }
            let mut seen = BTreeSet::new();
            for tuple in indices {
                if tuple.len() != k || tuple.iter().zip(data).any(|(&i, &d)| i >= d) {
                    return Err(format!("index tuple {tuple:?} out of bounds for {data:?}"));
                }
                if !seen.insert(tuple.clone()) {
                    return Err(format!("duplicate scatter index {tuple:?}"));
                }
            }
            if batch_shape.iter().product::<usize>() != indices.len() {
                return Err("batch_shape does not match the number of index tuples".into());
            }
            let mut expect = batch_shape.clone();
            expect.extend_from_slice(&data[k..]);
            if *updates != expect {
                return Err(format!("updates shape {updates:?}, expected {expect:?}"));
            }
            one(data.clone())
        }
        (kind, attrs) => Err(format!("attributes {attrs:?} do not match operator {kind}")),
    }
}

pub(crate) fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut v = vec![1; rank - shape.len()];
    v.extend_from_slice(shape);
    v
}

pub(crate) fn broadcast_batch(a: &[usize], b: &[usize]) -> Result<Vec<usize>, String> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad_left(a, rank), pad_left(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(format!("batch dimensions {a:?} and {b:?} do not broadcast")),
        })
        .collect()
}

fn check_perm(perm: &[usize], rank: usize) -> Result<(), String> {
    let set: BTreeSet<usize> = perm.iter().copied().collect();
    if perm.len() != rank || set.len() != rank || set.iter().any(|&p| p >= rank) {
        return Err(format!("perm {perm:?} is not a permutation of 0..{rank}"));
    }
    Ok(())
}

pub(crate) fn resolve_reshape(input: &[usize], target: &[i64]) -> Result<Vec<usize>, String> {
    let numel: usize = input.iter().product();
    let wild = target.iter().filter(|&&d| d == -1).count();
    if wild > 1 || target.iter().any(|&d| d == 0 || d < -1) {
        return Err(format!("bad reshape target {target:?}"));
    }
    let known: usize = target.iter().filter(|&&d| d > 0).map(|&d| d as usize).product();
    let out: Vec<usize> = target
        .iter()
        .map(|&d| if d == -1 { numel.checked_div(known).unwrap_or(0) } else { d as usize })
        .collect();
    if out.is_empty() || out.iter().product::<usize>() != numel || out.contains(&0) {
        return Err(format!("cannot reshape {input:?} into {target:?}"));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    tensors: Vec<TensorDoc>,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<DType>,
    kind: TensorKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: String,
    #[serde(default)]
    attrs: Map<String, Value>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn usize_list(attrs: &Map<String, Value>, key: &str) -> Result<Option<Vec<usize>>, String> {
    match attrs.get(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|_| format!("attribute `{key}` must be a list of non-negative integers")),
    }
}

fn required_list(attrs: &Map<String, Value>, key: &str) -> Result<Vec<usize>, String> {
    usize_list(attrs, key)?.ok_or_else(|| format!("missing attribute `{key}`"))
}

fn required_usize(attrs: &Map<String, Value>, key: &str) -> Result<usize, String> {
    attrs
        .get(key)
        .ok_or_else(|| format!("missing attribute `{key}`"))?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| format!("attribute `{key}` must be a non-negative integer"))
}

fn parse_attrs(kind: OpKind, attrs: &Map<String, Value>) -> Result<OpAttrs, String> {
    let allowed: &[&str] = match kind {
        OpKind::Transpose => &["perm"],
        OpKind::Reshape | OpKind::Expand => &["shape"],
        OpKind::Split => &["axis", "split"],
        OpKind::Concat => &["axis"],
        OpKind::Slice => &["starts", "ends", "axes", "steps"],
        OpKind::Unsqueeze => &["axes"],
        OpKind::ScatterND => &["indices", "batch_shape"],
        _ => &[],
    };
    if let Some(k) = attrs.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(format!("unexpected attribute `{k}` for {kind}"));
    }
    Ok(match kind {
        OpKind::Transpose => OpAttrs::Transpose { perm: required_list(attrs, "perm")? },
        OpKind::Reshape => OpAttrs::Reshape {
            shape: serde_json::from_value(attrs.get("shape").cloned().ok_or("missing attribute `shape`")?)
                .map_err(|_| "attribute `shape` must be a list of integers".to_string())?,
        },
        OpKind::Split => OpAttrs::Split { axis: required_usize(attrs, "axis")?, split: required_list(attrs, "split")? },
        OpKind::Concat => OpAttrs::Concat { axis: required_usize(attrs, "axis")? },
        OpKind::Slice => {
            let starts = required_list(attrs, "starts")?;
            let ends = required_list(attrs, "ends")?;
            let axes = usize_list(attrs, "axes")?.unwrap_or_else(|| (0..starts.len()).collect());
            let steps = usize_list(attrs, "steps")?.unwrap_or_else(|| vec![1; starts.len()]);
            if ends.len() != starts.len() || axes.len() != starts.len() || steps.len() != starts.len() {
                return Err("slice attribute lists differ in length".into());
            }
            OpAttrs::Slice { starts, ends, axes, steps }
        }
        OpKind::Unsqueeze => OpAttrs::Unsqueeze { axes: required_list(attrs, "axes")? },
        OpKind::Expand => OpAttrs::Expand { shape: required_list(attrs, "shape")? },
        OpKind::ScatterND => {
            let indices: Vec<Vec<usize>> =
                serde_json::from_value(attrs.get("indices").cloned().ok_or("missing attribute `indices`")?)
                    .map_err(|_| {
                        "attribute `indices` must be a static list of index tuples (dynamic indices are not eliminable)"
                            .to_string()
                    })?;
            let batch_shape = usize_list(attrs, "batch_shape")?.unwrap_or_else(|| vec![indices.len()]);
            OpAttrs::ScatterND { indices, batch_shape }
        }
        _ => OpAttrs::None,
    })
}

fn attrs_to_json(attrs: &OpAttrs) -> Map<String, Value> {
    let v = match attrs {
        OpAttrs::None => json!({}),
        OpAttrs::Transpose { perm } => json!({ "perm": perm }),
        OpAttrs::Reshape { shape } => json!({ "shape": shape }),
        OpAttrs::Split { axis, split } => json!({ "axis": axis, "split": split }),
        OpAttrs::Concat { axis } => json!({ "axis": axis }),
        OpAttrs::Slice { starts, ends, axes, steps } => {
            json!({ "starts": starts, "ends": ends, "axes": axes, "steps": steps })
        }
        OpAttrs::Unsqueeze { axes } => json!({ "axes": axes }),
        OpAttrs::Expand { shape } => json!({ "shape": shape }),
        OpAttrs::ScatterND { indices, batch_shape } => json!({ "indices": indices, "batch_shape": batch_shape }),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

/// Incremental graph construction with shapes inferred as nodes are added.
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    decls: Vec<TensorDecl>,
    nodes: Vec<OpNode>,
    shapes: Vec<(Vec<usize>, DType)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, shape: &[usize], dtype: DType) -> TensorId {
        self.decls.push(TensorDecl {
            name: name.to_string(),
            shape: Some(shape.to_vec()),
            dtype: Some(dtype),
            kind: TensorKind::GraphInput,
        });
        self.shapes.push((shape.to_vec(), dtype));
        TensorId(self.decls.len() as u32 - 1)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.shapes[t.index()].0
    }

    pub fn dtype(&self, t: TensorId) -> DType {
        self.shapes[t.index()].1
    }

    pub fn tensor_count(&self) -> usize {
        self.decls.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn kind(&self, t: TensorId) -> TensorKind {
        self.decls[t.index()].kind
    }

    pub fn has_consumers(&self, t: TensorId) -> bool {
        self.nodes.iter().any(|n| n.inputs.contains(&t))
    }

    /// Adds a node whose outputs are named `out_names`; returns the output ids.
    pub fn op(
        &mut self,
        name: &str,
        kind: OpKind,
        attrs: OpAttrs,
        inputs: &[TensorId],
        out_names: &[&str],
    ) -> Result<Vec<TensorId>, GraphError> {
        let ins: Vec<_> = inputs.iter().map(|t| self.shapes[t.index()].clone()).collect();
        let probe = OpNode { name: name.to_string(), kind, attrs: attrs.clone(), inputs: inputs.to_vec(), outputs: vec![] };
        let outs = infer_node(&probe, &ins).map_err(|msg| GraphError::Shape { node: name.to_string(), msg })?;
        if outs.len() != out_names.len() {
            return Err(GraphError::Shape {
                node: name.to_string(),
                msg: format!("expected {} outputs, found {}", outs.len(), out_names.len()),
            });
        }
        let mut ids = Vec::new();
        for (n, (shape, dtype)) in out_names.iter().zip(outs) {
            self.decls.push(TensorDecl {
                name: n.to_string(),
                shape: Some(shape.clone()),
                dtype: Some(dtype),
                kind: TensorKind::Intermediate,
            });
            self.shapes.push((shape, dtype));
            ids.push(TensorId(self.decls.len() as u32 - 1));
        }
        self.nodes.push(OpNode { name: name.to_string(), kind, attrs, inputs: inputs.to_vec(), outputs: ids.clone() });
        Ok(ids)
    }

    /// Single-output shorthand for [`GraphBuilder::op`].
    pub fn op1(
        &mut self,
        name: &str,
        kind: OpKind,
        attrs: OpAttrs,
        inputs: &[TensorId],
        out: &str,
    ) -> Result<TensorId, GraphError> {
        Ok(self.op(name, kind, attrs, inputs, &[out])?[0])
    }

    pub fn mark_output(&mut self, t: TensorId) {
        self.decls[t.index()].kind = TensorKind::GraphOutput;
    }

    pub fn build(self) -> Result<CompGraph, GraphError> {
        CompGraph::new(self.decls, self.nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transpose_doc(perm: &str) -> String {
        format!(
            r#"{{"tensors":[{{"id":"x","shape":[2,3],"dtype":"f64","kind":"GraphInput"}},
                            {{"id":"y","kind":"GraphOutput"}}],
                "nodes":[{{"id":"t","kind":"Transpose","attrs":{{"perm":{perm}}},"inputs":["x"],"outputs":["y"]}}]}}"#
        )
    }

    #[test]
    fn identity_transpose_keeps_shape() {
        let g = CompGraph::parse_json(&transpose_doc("[0,1]")).unwrap();
        assert_eq!(g.tensor(g.tensor_by_name("y").unwrap()).shape, vec![2, 3]);
        let g = CompGraph::parse_json(&transpose_doc("[1,0]")).unwrap();
        assert_eq!(g.tensor(g.tensor_by_name("y").unwrap()).shape, vec![3, 2]);
    }

    #[test]
    fn bad_perm_is_a_shape_error() {
        let err = CompGraph::parse_json(&transpose_doc("[0,0]")).unwrap_err();
        assert!(matches!(err, GraphError::Shape { .. }), "{err}");
    }

    #[test]
    fn split_sizes_must_sum_to_axis() {
        let doc = r#"{"tensors":[{"id":"x","shape":[5,4],"kind":"GraphInput"},
                                 {"id":"a","kind":"GraphOutput"},{"id":"b","kind":"GraphOutput"}],
                      "nodes":[{"id":"s","kind":"Split","attrs":{"axis":0,"split":[2,2]},
                                "inputs":["x"],"outputs":["a","b"]}]}"#;
        let err = CompGraph::parse_json(doc).unwrap_err();
        assert!(matches!(err, GraphError::Shape { ref node, .. } if node == "s"), "{err}");
    }

    #[test]
    fn unknown_operator_and_missing_attr() {
        let doc = r#"{"tensors":[{"id":"x","shape":[2],"kind":"GraphInput"},{"id":"y","kind":"GraphOutput"}],
                      "nodes":[{"id":"n","kind":"Frobnicate","inputs":["x"],"outputs":["y"]}]}"#;
        assert!(matches!(CompGraph::parse_json(doc).unwrap_err(), GraphError::UnknownOperator(_)));
        let doc = doc.replace("Frobnicate", "Transpose");
        assert!(matches!(CompGraph::parse_json(&doc).unwrap_err(), GraphError::Schema(_)));
    }

    #[test]
    fn dynamic_scatter_indices_rejected() {
        let doc = r#"{"tensors":[{"id":"d","shape":[4,4],"kind":"GraphInput"},{"id":"u","shape":[1,4],"kind":"GraphInput"},
                                 {"id":"o","kind":"GraphOutput"}],
                      "nodes":[{"id":"s","kind":"ScatterND","attrs":{"indices":"u"},"inputs":["d","u"],"outputs":["o"]}]}"#;
        assert!(matches!(CompGraph::parse_json(doc).unwrap_err(), GraphError::Schema(_)));
    }

    #[test]
    fn cycle_detected() {
        let doc = r#"{"tensors":[{"id":"a","shape":[2],"kind":"Intermediate"},{"id":"b","shape":[2],"kind":"Intermediate"}],
                      "nodes":[{"id":"n1","kind":"Relu","inputs":["a"],"outputs":["b"]},
                               {"id":"n2","kind":"Relu","inputs":["b"],"outputs":["a"]}]}"#;
        assert!(matches!(CompGraph::parse_json(doc).unwrap_err(), GraphError::Cycle(_)));
    }

    #[test]
    fn shape_inference_examples() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3, 4], DType::F64);
        let e = b.op1("e", OpKind::Expand, OpAttrs::Expand { shape: vec![2, 9, 4] }, &[x], "xe").unwrap();
        assert_eq!(b.shape(e), &[2, 9, 4]);
        let u = b.op1("u", OpKind::Unsqueeze, OpAttrs::Unsqueeze { axes: vec![2] }, &[x], "xu").unwrap();
        assert_eq!(b.shape(u), &[2, 3, 1, 4]);
        let a = b.input("a", &[16, 4096], DType::F64);
        let w = b.input("w", &[4096, 6144], DType::F64);
        let m = b.op1("m", OpKind::MatMul, OpAttrs::None, &[a, w], "qkv").unwrap();
        assert_eq!(b.shape(m), &[16, 6144]);
        let w2 = b.input("w2", &[5, 3], DType::F64);
        let bm = b.op1("bm", OpKind::MatMul, OpAttrs::None, &[w2, x], "bm_out").unwrap();
        assert_eq!(b.shape(bm), &[2, 5, 4]);
    }

    #[test]
    fn expand_requires_multiples() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3], DType::F64);
        assert!(b.op1("e", OpKind::Expand, OpAttrs::Expand { shape: vec![2, 4] }, &[x], "y").is_err());
    }

    #[test]
    fn data_movement_classification() {
        assert!(OpKind::Transpose.is_data_movement());
        assert!(OpKind::ScatterND.is_data_movement());
        assert!(!OpKind::MatMul.is_data_movement());
        assert!(!OpKind::SiLU.is_data_movement());
    }

    #[test]
    fn declared_shape_contradiction() {
        let doc = r#"{"tensors":[{"id":"x","shape":[2,3],"kind":"GraphInput"},{"id":"y","shape":[2,3],"kind":"GraphOutput"}],
                      "nodes":[{"id":"t","kind":"Transpose","attrs":{"perm":[1,0]},"inputs":["x"],"outputs":["y"]}]}"#;
        assert!(matches!(CompGraph::parse_json(doc).unwrap_err(), GraphError::Shape { .. }));
    }
}
