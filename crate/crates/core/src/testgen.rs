//! Seeded generators of small computation graphs for property tests,
//! acceptance runs and benchmarks.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::graph::{CompGraph, DType, GraphBuilder, OpAttrs, OpKind, TensorId, TensorKind};

const MAX_NUMEL: usize = 96;

fn fresh(b: &GraphBuilder) -> String {
    format!("t{}", b.tensor_count())
}

fn random_shape(rng: &mut impl Rng) -> Vec<usize> {
    loop {
        let rank = rng.random_range(1..=3);
        let s: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
        let n: usize = s.iter().product();
        if (2..=48).contains(&n) {
            return s;
        }
    }
}

/// A random factorization of `numel` into 1–3 dimensions.
fn factorize(rng: &mut impl Rng, numel: usize) -> Vec<i64> {
    let divisors: Vec<usize> = (1..=numel).filter(|d| numel.is_multiple_of(*d)).collect();
    let rank = rng.random_range(1..=3);
    let mut out = Vec::new();
    let mut rest = numel;
    for _ in 1..rank {
        let ds: Vec<usize> = divisors.iter().copied().filter(|d| rest.is_multiple_of(*d)).collect();
        let d = *ds.choose(rng).unwrap();
        out.push(d as i64);
        rest /= d;
    }
    out.push(rest as i64);
    out.shuffle(rng);
    out
}

/// Tries one randomly chosen operator on `t`; returns false when the draw
/// was not applicable.
fn random_op(rng: &mut impl Rng, b: &mut GraphBuilder, pool: &mut Vec<TensorId>, t: TensorId, type_i: bool) -> bool {
    let shape = b.shape(t).to_vec();
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    let name = format!("n{}", b.tensor_count());
    let choice = if type_i { rng.random_range(0..6) } else { rng.random_range(0..16) };
    let res: Option<Vec<TensorId>> = match choice {
        0 => b.op1(&name, OpKind::Relu, OpAttrs::None, &[t], &fresh(b)).ok().map(|o| vec![o]),
        1 => {
            let other = pool.iter().copied().rfind(|&u| u != t && b.shape(u) == shape.as_slice()).unwrap_or(t);
            b.op1(&name, OpKind::Add, OpAttrs::None, &[t, other], &fresh(b)).ok().map(|o| vec![o])
        }
        2 => {
            if rank < 2 {
                return false;
            }
            let k = shape[rank - 1];
            let n = rng.random_range(1..=4);
            let w = b.input(&format!("w{}", b.tensor_count()), &[k, n], DType::F64);
            b.op1(&name, OpKind::MatMul, OpAttrs::None, &[t, w], &fresh(b)).ok().map(|o| vec![o])
        }
        3 | 4 => {
            let shape = factorize(rng, numel);
            b.op1(&name, OpKind::Reshape, OpAttrs::Reshape { shape }, &[t], &fresh(b)).ok().map(|o| vec![o])
        }
        5 => {
            if rank >= 4 {
                return false;
            }
            let axes = vec![rng.random_range(0..=rank)];
            b.op1(&name, OpKind::Unsqueeze, OpAttrs::Unsqueeze { axes }, &[t], &fresh(b)).ok().map(|o| vec![o])
        }
        6 | 7 => {
            if rank < 2 {
                return false;
            }
            let mut perm: Vec<usize> = (0..rank).collect();
            while perm.iter().enumerate().all(|(i, &p)| i == p) {
                perm.shuffle(rng);
            }
            b.op1(&name, OpKind::Transpose, OpAttrs::Transpose { perm }, &[t], &fresh(b)).ok().map(|o| vec![o])
        }
        8 | 9 => {
            let axis = rng.random_range(0..rank);
            if shape[axis] < 2 {
                return false;
            }
            let first = rng.random_range(1..shape[axis]);
            let mut split = vec![first, shape[axis] - first];
            if split[1] >= 2 && rng.random_bool(0.3) {
                split = vec![first, 1, shape[axis] - first - 1];
            }
            let outs: Vec<String> = (0..split.len()).map(|i| format!("t{}_{i}", b.tensor_count())).collect();
            let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
            b.op(&name, OpKind::Split, OpAttrs::Split { axis, split }, &[t], &refs).ok()
        }
        10 | 11 => {
            if numel * 2 > MAX_NUMEL {
                return false;
            }
            let axis = rng.random_range(0..rank);
            let other = pool
                .iter()
                .copied()
                .rfind(|&u| {
                    let s = b.shape(u);
                    u != t && s.len() == rank && (0..rank).all(|i| i == axis || s[i] == shape[i])
                })
                .unwrap_or(t);
            let ins = if rng.random_bool(0.5) { [t, other] } else { [other, t] };
            b.op1(&name, OpKind::Concat, OpAttrs::Concat { axis }, &ins, &fresh(b)).ok().map(|o| vec![o])
        }
        12 => {
            let axis = rng.random_range(0..rank);
            if shape[axis] < 2 {
                return false;
            }
            let start = rng.random_range(0..shape[axis] - 1);
            let end = rng.random_range(start + 1..=shape[axis]);
            let step = if end - start >= 3 && rng.random_bool(0.4) { 2 } else { 1 };
            let attrs = OpAttrs::Slice { starts: vec![start], ends: vec![end], axes: vec![axis], steps: vec![step] };
            b.op1(&name, OpKind::Slice, attrs, &[t], &fresh(b)).ok().map(|o| vec![o])
        }
        13 => {
            if numel * 2 > MAX_NUMEL {
                return false;
            }
            let mut target = shape.clone();
            if rng.random_bool(0.5) || rank >= 4 {
                let k = rng.random_range(0..rank);
                target[k] *= 2;
            } else {
                target.insert(0, 2);
            }
            b.op1(&name, OpKind::Expand, OpAttrs::Expand { shape: target }, &[t], &fresh(b)).ok().map(|o| vec![o])
        }
        14 => {
            if shape[0] < 2 {
                return false;
            }
            let nb = rng.random_range(1..=2.min(shape[0] - 1));
            let mut rows: Vec<usize> = (0..shape[0]).collect();
            rows.shuffle(rng);
            let indices: Vec<Vec<usize>> = rows[..nb].iter().map(|&r| vec![r]).collect();
            let mut ushape = vec![nb];
            ushape.extend(&shape[1..]);
            let u = b.input(&format!("u{}", b.tensor_count()), &ushape, DType::F64);
            let Ok(ur) = b.op1(&format!("{name}r"), OpKind::Relu, OpAttrs::None, &[u], &fresh(b)) else {
                return false;
            };
            let attrs = OpAttrs::ScatterND { indices, batch_shape: vec![nb] };
            b.op1(&name, OpKind::ScatterND, attrs, &[t, ur], &fresh(b)).ok().map(|o| vec![o])
        }
        _ => b.op1(&name, OpKind::SiLU, OpAttrs::None, &[t], &fresh(b)).ok().map(|o| vec![o]),
    };
    match res {
        Some(outs) => {
            pool.extend(outs);
            true
        }
        None => false,
    }
}

fn generate(rng: &mut impl Rng, max_nodes: usize, type_i: bool) -> CompGraph {
    loop {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &random_shape(rng), DType::F64);
        let mut pool = vec![x];
        // A compute op first so there is an intermediate to play with.
        let Ok(first) = b.op1("n0", OpKind::Relu, OpAttrs::None, &[x], "t1") else { continue };
        pool.push(first);
        let target = rng.random_range(2..=max_nodes.max(2));
        let mut attempts = 0;
        while b.node_count() < target && attempts < 200 {
            attempts += 1;
            let recent = &pool[pool.len().saturating_sub(4)..];
            let t = if type_i || rng.random_bool(0.3) { *pool.choose(rng).unwrap() } else { *recent.choose(rng).unwrap() };
            random_op(rng, &mut b, &mut pool, t, type_i);
        }
        let last = *pool.last().unwrap();
        if b.kind(last) != TensorKind::Intermediate {
            continue;
        }
        for &t in &pool {
            if b.kind(t) == TensorKind::Intermediate && !b.has_consumers(t) && (t == last || rng.random_bool(0.6)) {
                b.mark_output(t);
            }
        }
        match b.build() {
            Ok(g) if g.data_movement_nodes().count() > 0 && g.nodes().len() <= max_nodes => return g,
            _ => continue,
        }
    }
}

/// Random graph with at most `max_nodes` operators and at least one
/// data-movement operator.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize) -> CompGraph {
    generate(rng, max_nodes, false)
}

/// Random graph whose data movement is limited to Reshape and Unsqueeze,
/// so every opportunity is fully contiguous.
pub fn type_i_graph(rng: &mut impl Rng, max_nodes: usize) -> CompGraph {
    generate(rng, max_nodes, true)
}

/// A chain alternating Relu with Reshape/Transpose, holding `n_tensors`
/// tensors in total.
pub fn chain_graph(n_tensors: usize) -> CompGraph {
    assert!(n_tensors >= 3);
    let mut b = GraphBuilder::new();
    let mut t = b.input("x", &[4, 8], DType::F64);
    let mut i = 0;
    while b.tensor_count() < n_tensors {
        let name = format!("n{i}");
        let out = format!("t{i}");
        t = match i % 4 {
            0 | 2 => b.op1(&name, OpKind::Relu, OpAttrs::None, &[t], &out),
            1 => {
                let s = b.shape(t).to_vec();
                b.op1(&name, OpKind::Reshape, OpAttrs::Reshape { shape: vec![s[1] as i64, s[0] as i64] }, &[t], &out)
            }
            _ => b.op1(&name, OpKind::Transpose, OpAttrs::Transpose { perm: vec![1, 0] }, &[t], &out),
        }
        .expect("chain operators are well formed");
        i += 1;
    }
    b.mark_output(t);
    b.build().expect("chain graph is valid")
}
