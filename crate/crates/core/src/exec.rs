//! Reference interpreter over dense arrays.
//!
//! Tensors are held as `f64` arrays; `f32` results are rounded after every
//! operator and `i64` values stay exact integers. Virtual tensors are read and
//! written block by block through their resolved maps, so a strategy changes
//! data placement but never the arithmetic.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Dimension, IxDyn, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{self, CompGraph, DType, NodeId, OpAttrs, OpKind, OpNode, TensorId};
use crate::mapping::{suffix_products, IndexBox, IndexMap, MappingError};
use crate::vtog::PointsToGraph;

pub type TensorData = ArrayD<f64>;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("shape mismatch for `{tensor}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch { tensor: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("refusing to write `{0}` through a non-injective map")]
    WriteAliasing(String),
    #[error("access out of bounds: {0}")]
    OutOfBounds(String),
    #[error("outputs differ: `{tensor}` at {index:?}: expected {expected}, got {got}")]
    EquivalenceFailure { tensor: String, index: Vec<usize>, expected: f64, got: f64 },
    #[error("operator `{node}`: {msg}")]
    Operator { node: String, msg: String },
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad array file: {0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
}

/// Tiling of a map's index space with the piece covering each tile, if any.
#[derive(Debug, Clone)]
pub struct BlockAccessPlan {
    block_shape: Vec<usize>,
    shape: Vec<usize>,
    grid: Vec<usize>,
    /// `None` marks a tile that straddles piece boundaries.
    assignment: Vec<Option<usize>>,
}

impl BlockAccessPlan {
    pub fn new(m: &IndexMap, block_shape: &[usize]) -> Self {
        let shape = m.virtual_shape().to_vec();
        let block_shape: Vec<usize> = shape.iter().zip(block_shape).map(|(&s, &b)| b.clamp(1, s.max(1))).collect();
        let grid: Vec<usize> = shape.iter().zip(&block_shape).map(|(&s, &b)| s.div_ceil(b)).collect();
        let mut plan = BlockAccessPlan { block_shape, shape, grid, assignment: Vec::new() };
        let n: usize = plan.grid.iter().product();
        plan.assignment = (0..n)
            .map(|i| {
                let b = plan.block(i);
                m.pieces().iter().position(|p| p.region.contains_box(&b))
            })
            .collect();
        plan
    }

    /// Innermost tiles of `inner` elements, one index wide elsewhere.
    pub fn default_block(shape: &[usize], inner: usize) -> Vec<usize> {
        let mut b = vec![1; shape.len()];
        if let Some(l) = b.last_mut() {
            *l = inner;
        }
        b
    }

    pub fn block_shape(&self) -> &[usize] {
        &self.block_shape
    }

    pub fn num_blocks(&self) -> usize {
        self.assignment.len()
    }

    pub fn block(&self, i: usize) -> IndexBox {
        let mut rem = i;
        let mut lo = vec![0; self.grid.len()];
        for k in (0..self.grid.len()).rev() {
            lo[k] = (rem % self.grid[k]) * self.block_shape[k];
            rem /= self.grid[k];
        }
        let hi = lo.iter().zip(&self.block_shape).zip(&self.shape).map(|((&l, &b), &s)| (l + b).min(s)).collect();
        IndexBox::new(lo, hi)
    }

    pub fn assignment(&self, i: usize) -> Option<usize> {
        self.assignment[i]
    }

    pub fn split_blocks(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }
}

/// Buffers of the tensors that own storage under a strategy.
#[derive(Debug, Clone)]
pub struct PhysicalStore {
    buffers: Vec<Option<Vec<f64>>>,
}

impl PhysicalStore {
    pub fn new(g: &CompGraph, ptg: &PointsToGraph) -> Self {
        let buffers = g
            .tensor_ids()
            .map(|t| ptg.owns_storage(t).then(|| vec![f64::NAN; g.tensor(t).numel()]))
            .collect();
        PhysicalStore { buffers }
    }

    pub fn owns(&self, t: TensorId) -> bool {
        self.buffers[t.index()].is_some()
    }

    pub fn buffer(&self, t: TensorId) -> Option<&[f64]> {
        self.buffers[t.index()].as_deref()
    }

    fn buf(&self, t: TensorId) -> Result<&Vec<f64>, ExecError> {
        self.buffers[t.index()].as_ref().ok_or_else(|| ExecError::OutOfBounds(format!("{t} owns no storage")))
    }

    fn buf_mut(&mut self, t: TensorId) -> Result<&mut Vec<f64>, ExecError> {
        self.buffers[t.index()].as_mut().ok_or_else(|| ExecError::OutOfBounds(format!("{t} owns no storage")))
    }

    /// Gathers `region` of the virtual tensor described by `m`.
    pub fn load_virtual(&self, m: &IndexMap, region: &IndexBox, plan: &BlockAccessPlan) -> Result<TensorData, ExecError> {
        check_region(m, region)?;
        let ext = region.extents();
        let suffix = suffix_products(&ext);
        let mut out = vec![0.0; region.volume()];
        self.visit(m, region, plan, |t, off, local| {
            let b = self.buf(t)?;
            out[flat_local(local, &region.lo, &suffix)] = b[off];
            Ok(())
        })?;
        Ok(ArrayD::from_shape_vec(IxDyn(&ext), out).expect("volume matches extents"))
    }

    /// Scatters `values` (shaped like `region`) through `m`.
    pub fn store_virtual(
        &mut self,
        m: &IndexMap,
        region: &IndexBox,
        values: &ArrayViewD<f64>,
        plan: &BlockAccessPlan,
    ) -> Result<(), ExecError> {
        check_region(m, region)?;
        if values.shape() != region.extents().as_slice() {
            return Err(ExecError::ShapeMismatch {
                tensor: "block".into(),
                expected: region.extents(),
                got: values.shape().to_vec(),
            });
        }
        let vals: Vec<f64> = values.iter().copied().collect();
        let suffix = suffix_products(&region.extents());
        let mut writes = Vec::new();
        self.visit(m, region, plan, |t, off, local| {
            writes.push((t, off, vals[flat_local(local, &region.lo, &suffix)]));
            Ok(())
        })?;
        for (t, off, x) in writes {
            self.buf_mut(t)?[off] = x;
        }
        Ok(())
    }

    /// Calls `f(target, offset, index)` for every index of `region`.
    fn visit(
        &self,
        m: &IndexMap,
        region: &IndexBox,
        plan: &BlockAccessPlan,
        mut f: impl FnMut(TensorId, usize, &[usize]) -> Result<(), ExecError>,
    ) -> Result<(), ExecError> {
        let mut err = None;
        for i in 0..plan.num_blocks() {
            let Some(sub) = plan.block(i).intersect(region) else { continue };
            match plan.assignment(i) {
                Some(pi) => {
                    // The whole tile lies in one affine piece: one strided walk.
                    let p = m.pieces()[pi].restrict(sub);
                    p.for_each_value(|idx, off| {
                        if err.is_none() {
                            if let Err(e) = f(p.target, off as usize, idx) {
                                err = Some(e);
                            }
                        }
                    });
                }
                None => sub.for_each(|idx| {
                    if err.is_none() {
                        if let Err(e) = m.eval(idx).map_err(ExecError::from).and_then(|(t, off)| f(t, off, idx)) {
                            err = Some(e);
                        }
                    }
                }),
            }
            if let Some(e) = err.take() {
                return Err(e);
            }
        }
        Ok(())
    }
}

fn check_region(m: &IndexMap, region: &IndexBox) -> Result<(), ExecError> {
    if region.rank() != m.rank() || !region.fits(m.virtual_shape()) {
        return Err(ExecError::OutOfBounds(format!("{region:?} outside {:?}", m.virtual_shape())));
    }
    Ok(())
}

fn flat_local(idx: &[usize], lo: &[usize], suffix: &[usize]) -> usize {
    idx.iter().zip(lo).zip(suffix).map(|((i, l), s)| (i - l) * s).sum()
}

/// Block shape used for a tensor of the given shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// Tile extent of the innermost dimension.
    pub block_inner: usize,
    /// Tile extent of every other dimension.
    pub block_outer: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { block_inner: 64, block_outer: 1 }
    }
}

impl ExecOptions {
    pub fn block_for(&self, shape: &[usize]) -> Vec<usize> {
        let mut b = vec![self.block_outer; shape.len()];
        if let Some(l) = b.last_mut() {
            *l = self.block_inner;
        }
        b
    }
}

/// Runs `g` under strategy `ptg` and returns every observed tensor (graph
/// outputs and consumer-less intermediates).
pub fn execute(
    g: &CompGraph,
    ptg: &PointsToGraph,
    inputs: &HashMap<TensorId, TensorData>,
) -> Result<BTreeMap<TensorId, TensorData>, ExecError> {
    execute_with(g, ptg, inputs, ExecOptions::default())
}

pub fn execute_with(
    g: &CompGraph,
    ptg: &PointsToGraph,
    inputs: &HashMap<TensorId, TensorData>,
    opts: ExecOptions,
) -> Result<BTreeMap<TensorId, TensorData>, ExecError> {
    let mut store = PhysicalStore::new(g, ptg);
    let plan_for = |m: &IndexMap| BlockAccessPlan::new(m, &opts.block_for(m.virtual_shape()));
    for t in g.inputs() {
        let spec = g.tensor(t);
        let x = inputs.get(&t).ok_or_else(|| ExecError::MissingInput(spec.name.clone()))?;
        if x.shape() != spec.shape.as_slice() {
            return Err(ExecError::ShapeMismatch {
                tensor: spec.name.clone(),
                expected: spec.shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        let x = round_to(x.clone(), spec.dtype);
        let m = ptg.resolved(t);
        store.store_virtual(m, &IndexBox::full(&spec.shape), &x.view(), &plan_for(m))?;
    }
    for &n in g.topo_order() {
        if !ptg.is_scheduled(n) {
            continue;
        }
        let node = g.node(n);
        let operands = node
            .inputs
            .iter()
            .map(|&t| {
                let m = ptg.resolved(t);
                store.load_virtual(m, &IndexBox::full(&g.tensor(t).shape), &plan_for(m))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&TensorData> = operands.iter().collect();
        let outs = run_operator(node, &refs)?;
        for (i, (&o, val)) in node.outputs.iter().zip(outs).enumerate() {
            let spec = g.tensor(o);
            if val.shape() != spec.shape.as_slice() {
                return Err(ExecError::ShapeMismatch {
                    tensor: spec.name.clone(),
                    expected: spec.shape.clone(),
                    got: val.shape().to_vec(),
                });
            }
            let val = round_to(val, spec.dtype);
            let m = ptg.resolved(o);
            let boxes = write_region(ptg, n, i, &spec.shape);
            let mut pieces = Vec::new();
            for b in &boxes {
                pieces.extend(m.restrict(b).pieces().iter().cloned());
            }
            let written = IndexMap::new(m.virtual_shape().to_vec(), pieces, m.targets().clone())?;
            if !written.check_writable() {
                return Err(ExecError::WriteAliasing(spec.name.clone()));
            }
            let plan = plan_for(m);
            for b in &boxes {
                let view = val.slice_each_axis(|ax| {
                    let k = ax.axis.index();
                    Slice::from(b.lo[k]..b.hi[k])
                });
                store.store_virtual(m, b, &view, &plan)?;
            }
        }
    }
    let mut out = BTreeMap::new();
    for t in g.observed() {
        let m = ptg.resolved(t);
        out.insert(t, store.load_virtual(m, &IndexBox::full(&g.tensor(t).shape), &plan_for(m))?);
    }
    Ok(out)
}

fn write_region(ptg: &PointsToGraph, n: NodeId, out_idx: usize, shape: &[usize]) -> Vec<IndexBox> {
    match ptg.moved(n, out_idx) {
        Some(b) => b.to_vec(),
        None => vec![IndexBox::full(shape)],
    }
}

pub fn round_to(x: TensorData, dtype: DType) -> TensorData {
    match dtype {
        DType::F64 => x,
        DType::F32 => x.mapv(|v| v as f32 as f64),
        DType::I64 => x.mapv(|v| v.round()),
    }
}

/// Dense reference semantics of one operator.
pub fn run_operator(node: &OpNode, xs: &[&TensorData]) -> Result<Vec<TensorData>, ExecError> {
    let fail = |msg: String| ExecError::Operator { node: node.name.clone(), msg };
    let unary = |f: fn(f64) -> f64| Ok(vec![xs[0].mapv(f)]);
    let binary = |f: fn(f64, f64) -> f64| {
        if xs[0].shape() != xs[1].shape() {
            return Err(fail(format!("operand shapes {:?} and {:?}", xs[0].shape(), xs[1].shape())));
        }
        let mut out = xs[0].clone();
        out.zip_mut_with(xs[1], |a, &b| *a = f(*a, b));
        Ok(vec![out])
    };
    match (&node.kind, &node.attrs) {
        (OpKind::Relu, _) => unary(|x| if x > 0.0 { x } else { 0.0 }),
        (OpKind::SiLU, _) => unary(|x| x / (1.0 + (-x).exp())),
        (OpKind::Add, _) => binary(|a, b| a + b),
        (OpKind::Sub, _) => binary(|a, b| a - b),
        (OpKind::Mul, _) => binary(|a, b| a * b),
        (OpKind::MatMul, _) => matmul(xs[0], xs[1]).map(|o| vec![o]).map_err(fail),
        (OpKind::Attention, _) => attention(xs[0], xs[1], xs[2]).map(|o| vec![o]).map_err(fail),
        (OpKind::Transpose, OpAttrs::Transpose { perm }) => {
            if perm.len() != xs[0].ndim() {
                return Err(fail(format!("perm {perm:?} for rank {}", xs[0].ndim())));
            }
            Ok(vec![xs[0].view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned()])
        }
        (OpKind::Reshape, OpAttrs::Reshape { shape }) => {
            let target = graph::resolve_reshape(xs[0].shape(), shape).map_err(fail)?;
            reshape(xs[0], &target).map(|o| vec![o]).map_err(fail)
        }
        (OpKind::Unsqueeze, OpAttrs::Unsqueeze { axes }) => {
            let rank = xs[0].ndim() + axes.len();
            let mut src = xs[0].shape().iter();
            let target: Vec<usize> = (0..rank).map(|i| if axes.contains(&i) { 1 } else { *src.next().unwrap_or(&1) }).collect();
            reshape(xs[0], &target).map(|o| vec![o]).map_err(fail)
        }
        (OpKind::Split, OpAttrs::Split { axis, split }) => {
            let mut start = 0;
            let mut outs = Vec::new();
            for &len in split {
                if start + len > xs[0].shape()[*axis] {
                    return Err(fail("split sizes exceed the axis".into()));
                }
                outs.push(xs[0].slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned());
                start += len;
            }
            Ok(outs)
        }
        (OpKind::Concat, OpAttrs::Concat { axis }) => {
            let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
            Ok(vec![concatenate(Axis(*axis), &views).map_err(|e| fail(e.to_string()))?])
        }
        (OpKind::Slice, OpAttrs::Slice { starts, ends, axes, steps }) => {
            let out = xs[0].slice_each_axis(|ax| {
                match axes.iter().position(|&a| a == ax.axis.index()) {
                    Some(i) => Slice::new(starts[i] as isize, Some(ends[i] as isize), steps[i] as isize),
                    None => Slice::from(..),
                }
            });
            Ok(vec![out.to_owned()])
        }
        (OpKind::Expand, OpAttrs::Expand { shape }) => {
            let padded = graph::pad_left(xs[0].shape(), shape.len());
            let src = reshape(xs[0], &padded).map_err(fail)?;
            let out = ArrayD::from_shape_fn(IxDyn(shape), |idx| {
                let s: Vec<usize> = (0..shape.len()).map(|k| idx[k] % padded[k]).collect();
                src[IxDyn(&s)]
            });
            Ok(vec![out])
        }
        (OpKind::ScatterND, OpAttrs::ScatterND { indices, batch_shape }) => {
            let (data, updates) = (xs[0], xs[1]);
            let k = indices.first().map_or(0, |t| t.len());
            let nb = batch_shape.len();
            let rest: Vec<usize> = data.shape()[k..].to_vec();
            let mut flat_shape = vec![indices.len()];
            flat_shape.extend(&rest);
            if updates.shape()[nb..] != rest[..] {
                return Err(fail(format!("updates shape {:?}", updates.shape())));
            }
            let upd = reshape(updates, &flat_shape).map_err(fail)?;
            let mut out = data.clone();
            for (b, tuple) in indices.iter().enumerate() {
                let mut dst = out.view_mut();
                for &i in tuple {
                    dst = dst.index_axis_move(Axis(0), i);
                }
                dst.assign(&upd.index_axis(Axis(0), b));
            }
            Ok(vec![out])
        }
        (kind, attrs) => Err(fail(format!("attributes {attrs:?} do not match {kind}"))),
    }
}

fn reshape(x: &TensorData, shape: &[usize]) -> Result<TensorData, String> {
    let data: Vec<f64> = x.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| e.to_string())
}

/// Batched matrix product with broadcast batch dimensions and a fixed
/// accumulation order over k.
fn matmul(a: &TensorData, b: &TensorData) -> Result<TensorData, String> {
    let (ra, rb) = (a.ndim(), b.ndim());
    let (m, ka) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if ka != kb {
        return Err(format!("inner dimensions {ka} and {kb}"));
    }
    let batch = graph::broadcast_batch(&a.shape()[..ra - 2], &b.shape()[..rb - 2])?;
    let nbr = batch.len();
    let pa = graph::pad_left(&a.shape()[..ra - 2], nbr);
    let pb = graph::pad_left(&b.shape()[..rb - 2], nbr);
    let av: Vec<f64> = a.iter().copied().collect();
    let bv: Vec<f64> = b.iter().copied().collect();
    let nbatch: usize = batch.iter().product();
    let mut out = Vec::with_capacity(nbatch * m * n);
    let mut idx = vec![0usize; nbr];
    for bi in 0..nbatch {
        unflatten(bi, &batch, &mut idx);
        let oa = broadcast_offset(&idx, &pa) * m * ka;
        let ob = broadcast_offset(&idx, &pb) * kb * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..ka {
                    acc += av[oa + i * ka + k] * bv[ob + k * n + j];
                }
                out.push(acc);
            }
        }
    }
    let mut shape = batch;
    shape.extend([m, n]);
    ArrayD::from_shape_vec(IxDyn(&shape), out).map_err(|e| e.to_string())
}

/// softmax(q·kᵀ / sqrt(d)) · v over the last two dimensions.
fn attention(q: &TensorData, k: &TensorData, v: &TensorData) -> Result<TensorData, String> {
    let r = q.ndim();
    let (lq, d) = (q.shape()[r - 2], q.shape()[r - 1]);
    let (lk, dv) = (k.shape()[r - 2], v.shape()[r - 1]);
    if k.shape()[r - 1] != d || v.shape()[r - 2] != lk || q.shape()[..r - 2] != k.shape()[..r - 2] {
        return Err("attention operand shapes disagree".into());
    }
    let (qv, kv, vv): (Vec<f64>, Vec<f64>, Vec<f64>) =
        (q.iter().copied().collect(), k.iter().copied().collect(), v.iter().copied().collect());
    let nbatch: usize = q.shape()[..r - 2].iter().product();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(nbatch * lq * dv);
    let mut scores = vec![0.0; lk];
    for b in 0..nbatch {
        let (oq, ok, ov) = (b * lq * d, b * lk * d, b * lk * dv);
        for i in 0..lq {
            for j in 0..lk {
                let mut acc = 0.0;
                for x in 0..d {
                    acc += qv[oq + i * d + x] * kv[ok + j * d + x];
                }
                scores[j] = acc * scale;
            }
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for c in 0..dv {
                let mut acc = 0.0;
                for j in 0..lk {
                    acc += scores[j] * vv[ov + j * dv + c];
                }
                out.push(acc / sum);
            }
        }
    }
    let mut shape = q.shape().to_vec();
    shape[r - 1] = dv;
    ArrayD::from_shape_vec(IxDyn(&shape), out).map_err(|e| e.to_string())
}

fn unflatten(mut i: usize, shape: &[usize], idx: &mut [usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] = i % shape[k];
        i /= shape[k];
    }
}

fn broadcast_offset(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &s)| acc * s + if s == 1 { 0 } else { i })
}

/// Seeded inputs for every graph input: uniform in [-1, 1) for floats,
/// small integers for `i64`.
pub fn random_inputs(g: &CompGraph, seed: u64) -> HashMap<TensorId, TensorData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.inputs()
        .map(|t| {
            let spec = g.tensor(t);
            let data: Vec<f64> = (0..spec.numel())
                .map(|_| match spec.dtype {
                    DType::I64 => rng.random_range(-8i64..=8) as f64,
                    _ => rng.random_range(-1.0..1.0),
                })
                .collect();
            let x = ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("numel matches shape");
            (t, round_to(x, spec.dtype))
        })
        .collect()
}

/// Bitwise comparison; reports the first differing element.
pub fn compare_outputs(
    g: &CompGraph,
    expected: &BTreeMap<TensorId, TensorData>,
    got: &BTreeMap<TensorId, TensorData>,
) -> Result<(), ExecError> {
    for (&t, want) in expected {
        let name = g.name(t).to_string();
        let have = got.get(&t).ok_or_else(|| ExecError::MissingInput(name.clone()))?;
        if have.shape() != want.shape() {
            return Err(ExecError::ShapeMismatch {
                tensor: name,
                expected: want.shape().to_vec(),
                got: have.shape().to_vec(),
            });
        }
        for ((idx, &a), &b) in want.indexed_iter().zip(have.iter()) {
            if a.to_bits() != b.to_bits() {
                return Err(ExecError::EquivalenceFailure {
                    tensor: name,
                    index: idx.slice().to_vec(),
                    expected: a,
                    got: b,
                });
            }
        }
    }
    Ok(())
}

/// SHA-256 of the little-endian encoding of `x` in `dtype`.
pub fn digest(x: &TensorData, dtype: DType) -> String {
    let mut h = Sha256::new();
    h.update(encode_payload(x, dtype));
    hex::encode(h.finalize())
}

const MAGIC: &[u8; 4] = b"VTAR";

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F64 => 0,
        DType::F32 => 1,
        DType::I64 => 2,
    }
}

fn encode_payload(x: &TensorData, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(x.len() * dtype.size_bytes());
    for &v in x.iter() {
        match dtype {
            DType::F64 => out.extend(v.to_le_bytes()),
            DType::F32 => out.extend((v as f32).to_le_bytes()),
            DType::I64 => out.extend((v as i64).to_le_bytes()),
        }
    }
    out
}

/// Binary array container: magic, dtype code, rank, dims, then row-major
/// little-endian values.
pub fn write_array(w: &mut impl Write, x: &TensorData, dtype: DType) -> Result<(), ExecError> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype_code(dtype)])?;
    w.write_all(&(x.ndim() as u32).to_le_bytes())?;
    for &d in x.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&encode_payload(x, dtype))?;
    Ok(())
}

pub fn read_array(r: &mut impl Read) -> Result<(DType, TensorData), ExecError> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(ExecError::Format("missing magic".into()));
    }
    let dtype = match head[4] {
        0 => DType::F64,
        1 => DType::F32,
        2 => DType::I64,
        c => return Err(ExecError::Format(format!("unknown dtype code {c}"))),
    };
    let ndim = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * dtype.size_bytes()];
    r.read_exact(&mut payload)?;
    let vals: Vec<f64> = match dtype {
        DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::I64 => payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    let x = ArrayD::from_shape_vec(IxDyn(&shape), vals).map_err(|e| ExecError::Format(e.to_string()))?;
    Ok((dtype, x))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct ArrayManifest {
    pub arrays: Vec<ManifestEntry>,
}

/// Writes one `.vtar` file per tensor plus `manifest.json` into `dir`.
pub fn save_arrays(dir: &Path, g: &CompGraph, arrays: &BTreeMap<TensorId, TensorData>) -> Result<ArrayManifest, ExecError> {
    fs::create_dir_all(dir)?;
    let mut manifest = ArrayManifest::default();
    for (&t, x) in arrays {
        let spec = g.tensor(t);
        let file = format!("{}.vtar", spec.name);
        let mut f = fs::File::create(dir.join(&file))?;
        write_array(&mut f, x, spec.dtype)?;
        manifest.arrays.push(ManifestEntry {
            name: spec.name.clone(),
            file,
            dtype: spec.dtype,
            shape: spec.shape.clone(),
            sha256: digest(x, spec.dtype),
        });
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ExecError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_arrays(dir: &Path, g: &CompGraph) -> Result<BTreeMap<TensorId, TensorData>, ExecError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: ArrayManifest = serde_json::from_str(&text).map_err(|e| ExecError::Format(e.to_string()))?;
    let mut out = BTreeMap::new();
    for e in manifest.arrays {
        let t = g.tensor_by_name(&e.name).ok_or_else(|| ExecError::Format(format!("unknown tensor `{}`", e.name)))?;
        let (dtype, x) = read_array(&mut fs::File::open(dir.join(&e.file))?)?;
        if dtype != e.dtype || x.shape() != e.shape.as_slice() {
            return Err(ExecError::Format(format!("`{}` does not match its manifest entry", e.name)));
        }
        out.insert(t, x);
    }
    Ok(out)
}
