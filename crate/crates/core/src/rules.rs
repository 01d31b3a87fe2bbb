//! Per-operator virtualization rules.
//!
//! For every data-movement operator this module knows two things: the
//! *source map* giving, for each output element, the input element it copies;
//! and the list of legal (virtual, base) tensor pairs together with the index
//! map that would let the virtual tensor live inside the base tensor.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{CompGraph, NodeId, OpAttrs, OpKind, TensorId, TensorKind};
use crate::mapping::{
    box_difference, suffix_products, AffinePiece, IndexBox, IndexMap, MappingError, TypeClass,
};

/// Element size and coalescing unit used for the static pre-classification.
/// Only full contiguity matters for Type I, so neither value changes the
/// outcome.
const STATIC_COALESCE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    /// The operator's output becomes a view of its input.
    OutputOverInput,
    /// An input becomes a view of the operator's output.
    InputOverOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VtRuleCandidate {
    pub virtual_tensor: TensorId,
    pub base_tensors: Vec<TensorId>,
    /// Map from (a region of) the virtual tensor's index space onto the base.
    pub map: IndexMap,
    pub direction: Direction,
    pub static_class: TypeClass,
    /// The operator this candidate eliminates.
    pub node: NodeId,
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("no virtualization rule for operator `{0}`")]
    UnknownOperator(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

fn istrides(s: &[usize]) -> Vec<i64> {
    s.iter().map(|&v| v as i64).collect()
}

fn one_piece(shape: &[usize], region: IndexBox, target: TensorId, tnumel: usize, strides: Vec<i64>, offset: i64) -> IndexMap {
    IndexMap::new(
        shape.to_vec(),
        vec![AffinePiece { region, target, strides, offset }],
        BTreeMap::from([(target, tnumel)]),
    )
    .expect("rule maps are in bounds by construction")
}

/// Row-major flat identity between two shapes of equal element count.
fn flat_map(vshape: &[usize], target: TensorId, tnumel: usize) -> IndexMap {
    one_piece(vshape, IndexBox::full(vshape), target, tnumel, istrides(&suffix_products(vshape)), 0)
}

/// Map from the output of a data-movement node onto its inputs: output
/// element `i` is a copy of the element the map sends it to.
pub fn source_map(g: &CompGraph, n: NodeId, out_idx: usize) -> IndexMap {
    let node = g.node(n);
    let out = node.outputs[out_idx];
    let oshape = &g.tensor(out).shape;
    let x = node.inputs[0];
    let xshape = &g.tensor(x).shape;
    let xn = g.tensor(x).numel();
    let tx = suffix_products(xshape);
    match &node.attrs {
        OpAttrs::Transpose { perm } => {
            let strides = perm.iter().map(|&p| tx[p] as i64).collect();
            one_piece(oshape, IndexBox::full(oshape), x, xn, strides, 0)
        }
        OpAttrs::Reshape { .. } | OpAttrs::Unsqueeze { .. } => flat_map(oshape, x, xn),
        OpAttrs::Split { axis, split } => {
            let start: usize = split[..out_idx].iter().sum();
            one_piece(oshape, IndexBox::full(oshape), x, xn, istrides(&tx), (start * tx[*axis]) as i64)
        }
        OpAttrs::Concat { axis } => {
            let mut pieces = Vec::new();
            let mut targets = BTreeMap::new();
            let mut off = 0;
            for &i in &node.inputs {
                let ishape = &g.tensor(i).shape;
                let ti = suffix_products(ishape);
                let mut region = IndexBox::full(oshape);
                region.lo[*axis] = off;
                region.hi[*axis] = off + ishape[*axis];
                pieces.push(AffinePiece {
                    region,
                    target: i,
                    strides: istrides(&ti),
                    offset: -((off * ti[*axis]) as i64),
                });
                targets.insert(i, g.tensor(i).numel());
                off += ishape[*axis];
            }
            IndexMap::new(oshape.clone(), pieces, targets).expect("concat map is a partition")
        }
        OpAttrs::Slice { starts, axes, steps, .. } => {
            let mut strides = istrides(&tx);
            let mut offset = 0i64;
            for i in 0..axes.len() {
                strides[axes[i]] = (steps[i] * tx[axes[i]]) as i64;
                offset += (starts[i] * tx[axes[i]]) as i64;
            }
            one_piece(oshape, IndexBox::full(oshape), x, xn, strides, offset)
        }
        OpAttrs::Expand { .. } => expand_source(oshape, xshape, x),
        OpAttrs::ScatterND { indices, batch_shape } => {
            let upd = node.inputs[1];
            let ushape = &g.tensor(upd).shape;
            let tu = suffix_products(ushape);
            let to = suffix_products(oshape);
            let k = indices[0].len();
            let nb = batch_shape.len();
            let mut pieces = Vec::new();
            let mut holes = Vec::new();
            for (b, tuple) in indices.iter().enumerate() {
                let mut region = IndexBox::full(oshape);
                for j in 0..k {
                    region.lo[j] = tuple[j];
                    region.hi[j] = tuple[j] + 1;
                }
                // Batch slot `b` starts at b * (elements per slot) in `updates`.
                let slot: usize = ushape[nb..].iter().product();
                let mut strides = vec![0i64; oshape.len()];
                for j in k..oshape.len() {
                    strides[j] = tu[nb + j - k] as i64;
                }
                let offset = (b * slot) as i64;
                holes.push(region.clone());
                pieces.push(AffinePiece { region, target: upd, strides, offset });
            }
            for r in box_difference(&IndexBox::full(oshape), &holes) {
                pieces.push(AffinePiece { region: r, target: x, strides: istrides(&to), offset: 0 });
            }
            let targets = BTreeMap::from([(x, xn), (upd, g.tensor(upd).numel())]);
            let mut m = IndexMap::new(oshape.clone(), pieces, targets).expect("scatter map is a partition");
            m.merge_pieces();
            m
        }
        OpAttrs::None => unreachable!("source_map called on a non data-movement node"),
    }
}

/// Expand as tiling: every output dimension is a whole multiple of the
/// (left-padded) input dimension; each replica block reads the input.
fn expand_source(oshape: &[usize], xshape: &[usize], x: TensorId) -> IndexMap {
    let r = oshape.len();
    let padded = crate::graph::pad_left(xshape, r);
    let tp = suffix_products(&padded);
    let xn: usize = xshape.iter().product();
    let mut boxes = vec![(IndexBox::full(oshape), 0i64)];
    let mut strides = vec![0i64; r];
    for k in 0..r {
        let (p, d) = (padded[k], oshape[k]);
        if p == 1 {
            strides[k] = 0;
            continue;
        }
        strides[k] = tp[k] as i64;
        if p == d {
            continue;
        }
        let mut next = Vec::new();
        for (b, off) in boxes {
            for rep in 0..d / p {
                let mut nb = b.clone();
                nb.lo[k] = rep * p;
                nb.hi[k] = (rep + 1) * p;
                next.push((nb, off - (rep * p * tp[k]) as i64));
            }
        }
        boxes = next;
    }
    let pieces = boxes
        .into_iter()
        .map(|(region, offset)| AffinePiece { region, target: x, strides: strides.clone(), offset })
        .collect();
    IndexMap::new(oshape.to_vec(), pieces, BTreeMap::from([(x, xn)])).expect("expand map is a partition")
}

/// All legal virtualization candidates of one data-movement node.
pub fn vt_rules(g: &CompGraph, n: NodeId) -> Result<Vec<VtRuleCandidate>, RuleError> {
    let node = g.node(n);
    if !node.is_data_movement() {
        return Err(RuleError::UnknownOperator(node.kind.name().to_string()));
    }
    let mut out = Vec::new();
    let spec = |t: TensorId| g.tensor(t);
    let mut push = |virt: TensorId, base: TensorId, map: IndexMap, direction: Direction| {
        let elem = spec(virt).dtype.size_bytes();
        let static_class = map.contiguity(elem, STATIC_COALESCE).type_class;
        out.push(VtRuleCandidate { virtual_tensor: virt, base_tensors: vec![base], map, direction, static_class, node: n });
    };
    let x = node.inputs[0];
    let xshape = spec(x).shape.clone();
    let xn = spec(x).numel();
    match &node.attrs {
        OpAttrs::Transpose { perm } => {
            let y = node.outputs[0];
            push(y, x, source_map(g, n, 0), Direction::OutputOverInput);
            let ty = suffix_products(&spec(y).shape);
            let mut strides = vec![0i64; xshape.len()];
            for (k, &p) in perm.iter().enumerate() {
                strides[p] = ty[k] as i64;
            }
            let m = one_piece(&xshape, IndexBox::full(&xshape), y, spec(y).numel(), strides, 0);
            push(x, y, m, Direction::InputOverOutput);
        }
        OpAttrs::Reshape { .. } | OpAttrs::Unsqueeze { .. } => {
            let y = node.outputs[0];
            push(y, x, source_map(g, n, 0), Direction::OutputOverInput);
            push(x, y, flat_map(&xshape, y, spec(y).numel()), Direction::InputOverOutput);
        }
        OpAttrs::Split { axis, split } => {
            let mut start = 0;
            for (i, &len) in split.iter().enumerate() {
                let o = node.outputs[i];
                push(o, x, source_map(g, n, i), Direction::OutputOverInput);
                let to = suffix_products(&spec(o).shape);
                let mut region = IndexBox::full(&xshape);
                region.lo[*axis] = start;
                region.hi[*axis] = start + len;
                let m = one_piece(&xshape, region, o, spec(o).numel(), istrides(&to), -((start * to[*axis]) as i64));
                push(x, o, m, Direction::InputOverOutput);
                start += len;
            }
        }
        OpAttrs::Concat { axis } => {
            let y = node.outputs[0];
            let yshape = spec(y).shape.clone();
            let ty = suffix_products(&yshape);
            let src = source_map(g, n, 0);
            let mut off = 0;
            for &i in &node.inputs {
                let ishape = spec(i).shape.clone();
                let m = one_piece(&ishape, IndexBox::full(&ishape), y, spec(y).numel(), istrides(&ty), (off * ty[*axis]) as i64);
                push(i, y, m, Direction::InputOverOutput);
                let mut region = IndexBox::full(&yshape);
                region.lo[*axis] = off;
                region.hi[*axis] = off + ishape[*axis];
                let part = src.restrict(&region);
                let part = IndexMap::new(yshape.clone(), part.pieces().to_vec(), BTreeMap::from([(i, spec(i).numel())]))?;
                push(y, i, part, Direction::OutputOverInput);
                off += ishape[*axis];
            }
        }
        OpAttrs::Slice { starts, ends, axes, steps } => {
            let y = node.outputs[0];
            push(y, x, source_map(g, n, 0), Direction::OutputOverInput);
            if steps.iter().all(|&s| s == 1) {
                let ty = suffix_products(&spec(y).shape);
                let mut region = IndexBox::full(&xshape);
                let mut offset = 0i64;
                for i in 0..axes.len() {
                    region.lo[axes[i]] = starts[i];
                    region.hi[axes[i]] = ends[i];
                    offset -= (starts[i] * ty[axes[i]]) as i64;
                }
                let m = one_piece(&xshape, region, y, spec(y).numel(), istrides(&ty), offset);
                push(x, y, m, Direction::InputOverOutput);
            }
        }
        OpAttrs::Expand { .. } => {
            let y = node.outputs[0];
            push(y, x, source_map(g, n, 0), Direction::OutputOverInput);
            // The input becomes the first replica of the output.
            let yshape = &spec(y).shape;
            let pad = yshape.len() - xshape.len();
            let ty = suffix_products(yshape);
            let strides = (0..xshape.len()).map(|i| ty[i + pad] as i64).collect();
            let m = one_piece(&xshape, IndexBox::full(&xshape), y, spec(y).numel(), strides, 0);
            push(x, y, m, Direction::InputOverOutput);
        }
        OpAttrs::ScatterND { .. } => {
            let y = node.outputs[0];
            let upd = node.inputs[1];
            let src = source_map(g, n, 0);
            let from_updates: usize =
                src.pieces().iter().filter(|p| p.target == upd).map(|p| p.region.volume()).sum();
            // (i) the output updates `data` in place. Only safe when nobody
            // else reads `data` and its own value is not a graph result.
            let data_only_here = g.consumers(x).len() == 1 && node.inputs.iter().filter(|&&t| t == x).count() == 1;
            if data_only_here && spec(x).kind != TensorKind::GraphOutput && from_updates < xn && upd != x {
                let m = IndexMap::identity(x, &xshape);
                push(y, x, m, Direction::OutputOverInput);
            }
            // (ii) the updates are written straight into their output slots.
            let OpAttrs::ScatterND { indices, batch_shape } = &node.attrs else { unreachable!() };
            let ushape = spec(upd).shape.clone();
            let nb = batch_shape.len();
            let k = indices[0].len();
            let to = suffix_products(&xshape);
            let mut pieces = Vec::new();
            for (b, tuple) in indices.iter().enumerate() {
                let mut region = IndexBox::full(&ushape);
                let mut rem = b;
                for j in (0..nb).rev() {
                    region.lo[j] = rem % batch_shape[j];
                    region.hi[j] = region.lo[j] + 1;
                    rem /= batch_shape[j];
                }
                let mut strides = vec![0i64; ushape.len()];
                for j in nb..ushape.len() {
                    strides[j] = to[k + j - nb] as i64;
                }
                let offset: i64 = (0..k).map(|j| (tuple[j] * to[j]) as i64).sum();
                pieces.push(AffinePiece { region, target: y, strides, offset });
            }
            let mut m = IndexMap::new(ushape.clone(), pieces, BTreeMap::from([(y, spec(y).numel())]))?;
            m.merge_pieces();
            push(upd, y, m, Direction::InputOverOutput);
        }
        OpAttrs::None => unreachable!(),
    }
    out.retain(|c| {
        spec(c.virtual_tensor).kind == TensorKind::Intermediate
            && (c.direction == Direction::OutputOverInput || c.map.check_writable())
    });
    Ok(out)
}

/// True if `kind` has authored rules.
pub fn has_rules(kind: OpKind) -> bool {
    kind.is_data_movement()
}
