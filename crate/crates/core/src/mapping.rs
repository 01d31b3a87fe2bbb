//! Piecewise-affine index maps.
//!
//! A virtual tensor is described by an [`IndexMap`]: its index space is cut
//! into axis-aligned boxes, and on each box the flat physical offset is an
//! affine function `strides · I + offset` of the *global* virtual index `I`.
//! Index-dependent bias terms (Expand replicas, Concat inputs, ScatterND
//! update slots) are expressed by the partition itself.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::TensorId;

/// Hard cap on the number of pieces a composed map may carry.
pub const MAX_PIECES: usize = 4096;
/// Spaces up to this many elements are checked exhaustively when the analytic
/// test is inconclusive.
pub const EXHAUSTIVE_LIMIT: usize = 1 << 20;

const SPLIT_BUDGET: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    OutOfBounds { index: Vec<usize>, shape: Vec<usize> },
    #[error("index {0:?} is not covered by any piece")]
    Uncovered(Vec<usize>),
    #[error("no base map supplied for virtual tensor {0}")]
    MissingBaseMap(TensorId),
    #[error("composition is not piecewise affine: {0}")]
    NonAffineComposition(String),
    #[error("composed map needs more than {0} pieces")]
    PieceLimit(usize),
    #[error("invalid map: {0}")]
    Invalid(String),
}

pub fn suffix_products(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

/// Half-open box `[lo, hi)` over an index space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexBox {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl IndexBox {
    pub fn new(lo: Vec<usize>, hi: Vec<usize>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        IndexBox { lo, hi }
    }

    pub fn full(shape: &[usize]) -> Self {
        IndexBox { lo: vec![0; shape.len()], hi: shape.to_vec() }
    }

    pub fn rank(&self) -> usize {
        self.lo.len()
    }

    pub fn extent(&self, k: usize) -> usize {
        self.hi[k] - self.lo[k]
    }

    pub fn extents(&self) -> Vec<usize> {
        (0..self.rank()).map(|k| self.extent(k)).collect()
    }

    pub fn volume(&self) -> usize {
        (0..self.rank()).map(|k| self.hi[k].saturating_sub(self.lo[k])).product()
    }

    pub fn is_empty(&self) -> bool {
        (0..self.rank()).any(|k| self.hi[k] <= self.lo[k])
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        idx.len() == self.rank() && (0..self.rank()).all(|k| self.lo[k] <= idx[k] && idx[k] < self.hi[k])
    }

    pub fn contains_box(&self, other: &IndexBox) -> bool {
        (0..self.rank()).all(|k| self.lo[k] <= other.lo[k] && other.hi[k] <= self.hi[k])
    }

    pub fn fits(&self, shape: &[usize]) -> bool {
        self.rank() == shape.len() && (0..self.rank()).all(|k| self.hi[k] <= shape[k])
    }

    pub fn intersect(&self, other: &IndexBox) -> Option<IndexBox> {
        let lo: Vec<usize> = self.lo.iter().zip(&other.lo).map(|(a, b)| *a.max(b)).collect();
        let hi: Vec<usize> = self.hi.iter().zip(&other.hi).map(|(a, b)| *a.min(b)).collect();
        let b = IndexBox { lo, hi };
        (!b.is_empty()).then_some(b)
    }

    /// `self \ other` as a list of disjoint boxes.
    pub fn subtract(&self, other: &IndexBox) -> Vec<IndexBox> {
        let Some(cut) = self.intersect(other) else {
            return vec![self.clone()];
        };
        let mut out = Vec::new();
        let mut rest = self.clone();
        for k in 0..self.rank() {
            if rest.lo[k] < cut.lo[k] {
                let mut below = rest.clone();
                below.hi[k] = cut.lo[k];
                out.push(below);
                rest.lo[k] = cut.lo[k];
            }
            if cut.hi[k] < rest.hi[k] {
                let mut above = rest.clone();
                above.lo[k] = cut.hi[k];
                out.push(above);
                rest.hi[k] = cut.hi[k];
            }
        }
        out
    }

    pub fn split_at(&self, k: usize, m: usize) -> (IndexBox, IndexBox) {
        debug_assert!(self.lo[k] < m && m < self.hi[k]);
        let mut a = self.clone();
        let mut b = self.clone();
        a.hi[k] = m;
        b.lo[k] = m;
        (a, b)
    }

    /// Visits every index of the box in row-major order.
    pub fn for_each(&self, mut f: impl FnMut(&[usize])) {
        if self.is_empty() {
            return;
        }
        let n = self.rank();
        let mut idx = self.lo.clone();
        loop {
            f(&idx);
            let mut k = n;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < self.hi[k] {
                    break;
                }
                idx[k] = self.lo[k];
            }
        }
    }
}

/// Subtracts every box in `holes` from `base`.
pub fn box_difference(base: &IndexBox, holes: &[IndexBox]) -> Vec<IndexBox> {
    let mut parts = vec![base.clone()];
    for h in holes {
        parts = parts.iter().flat_map(|p| p.subtract(h)).collect();
        if parts.is_empty() {
            break;
        }
    }
    parts
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AffinePiece {
    pub region: IndexBox,
    pub target: TensorId,
    /// Element strides, one per virtual dimension.
    pub strides: Vec<i64>,
    /// Value at the virtual origin, so that `value(I) = strides · I + offset`.
    pub offset: i64,
}

impl AffinePiece {
    pub fn value(&self, idx: &[usize]) -> i64 {
        self.strides.iter().zip(idx).map(|(s, &i)| s * i as i64).sum::<i64>() + self.offset
    }

    pub fn value_at_lo(&self) -> i64 {
        self.value(&self.region.lo)
    }

    /// Smallest and largest value over the region.
    pub fn value_range(&self) -> (i64, i64) {
        let base = self.value_at_lo();
        let (mut lo, mut hi) = (base, base);
        for k in 0..self.strides.len() {
            let span = self.strides[k] * (self.region.extent(k) as i64 - 1);
            if span < 0 {
                lo += span;
            } else {
                hi += span;
            }
        }
        (lo, hi)
    }

    pub fn restrict(&self, region: IndexBox) -> AffinePiece {
        AffinePiece { region, target: self.target, strides: self.strides.clone(), offset: self.offset }
    }

    /// True when both pieces give the same value everywhere on `on`.
    pub fn agrees_on(&self, other: &AffinePiece, on: &IndexBox) -> bool {
        self.target == other.target
            && self.value(&on.lo) == other.value(&on.lo)
            && (0..on.rank()).all(|k| on.extent(k) <= 1 || self.strides[k] == other.strides[k])
    }

    /// Visits every (index, value) of the region, computing values
    /// incrementally.
    pub fn for_each_value(&self, mut f: impl FnMut(&[usize], i64)) {
        let r = &self.region;
        if r.is_empty() {
            return;
        }
        let n = r.rank();
        let mut idx = r.lo.clone();
        let mut v = self.value_at_lo();
        loop {
            f(&idx, v);
            let mut k = n;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                idx[k] += 1;
                v += self.strides[k];
                if idx[k] < r.hi[k] {
                    break;
                }
                v -= self.strides[k] * (r.hi[k] - r.lo[k]) as i64;
                idx[k] = r.lo[k];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContiguityClass {
    FullyContiguous,
    PartiallyContiguous,
    NonContiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypeClass {
    /// Always profitable.
    TypeI,
    /// Profitability depends on the cost model.
    TypeII,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContiguityReport {
    /// 1-based; `rank + 1` when not even the innermost dimension is contiguous.
    pub min_contiguous_dim: usize,
    pub contiguous_run_elems: usize,
    pub class: ContiguityClass,
    pub type_class: TypeClass,
}

/// A piecewise-affine map from a virtual index space onto flat offsets of
/// one or more physical tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    virtual_shape: Vec<usize>,
    pieces: Vec<AffinePiece>,
    /// Element count of every target tensor.
    targets: BTreeMap<TensorId, usize>,
}

impl IndexMap {
    /// Builds a map and checks piece bounds and disjointness. Coverage of the
    /// whole space is *not* required here; see [`IndexMap::is_total`].
    pub fn new(
        virtual_shape: Vec<usize>,
        pieces: Vec<AffinePiece>,
        targets: BTreeMap<TensorId, usize>,
    ) -> Result<IndexMap, MappingError> {
        let m = IndexMap { virtual_shape, pieces, targets };
        m.validate()?;
        Ok(m)
    }

    pub(crate) fn new_unchecked(
        virtual_shape: Vec<usize>,
        pieces: Vec<AffinePiece>,
        targets: BTreeMap<TensorId, usize>,
    ) -> IndexMap {
        IndexMap { virtual_shape, pieces, targets }
    }

    pub fn identity(t: TensorId, shape: &[usize]) -> IndexMap {
        let strides = suffix_products(shape).into_iter().map(|s| s as i64).collect();
        IndexMap {
            virtual_shape: shape.to_vec(),
            pieces: vec![AffinePiece { region: IndexBox::full(shape), target: t, strides, offset: 0 }],
            targets: BTreeMap::from([(t, shape.iter().product())]),
        }
    }

    pub fn virtual_shape(&self) -> &[usize] {
        &self.virtual_shape
    }

    pub fn rank(&self) -> usize {
        self.virtual_shape.len()
    }

    pub fn numel(&self) -> usize {
        self.virtual_shape.iter().product()
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    pub fn targets(&self) -> &BTreeMap<TensorId, usize> {
        &self.targets
    }

    pub fn target_ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.targets.keys().copied()
    }

    pub fn covered_volume(&self) -> usize {
        self.pieces.iter().map(|p| p.region.volume()).sum()
    }

    pub fn is_total(&self) -> bool {
        self.covered_volume() == self.numel()
    }

    pub fn is_identity_of(&self, t: TensorId) -> bool {
        *self == IndexMap::identity(t, &self.virtual_shape)
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: String| Err(MappingError::Invalid(m));
        if self.virtual_shape.is_empty() || self.virtual_shape.contains(&0) {
            return bad(format!("bad virtual shape {:?}", self.virtual_shape));
        }
        for p in &self.pieces {
            if p.region.rank() != self.rank() || p.strides.len() != self.rank() {
                return bad("piece rank differs from the virtual rank".into());
            }
            if p.region.is_empty() || !p.region.fits(&self.virtual_shape) {
                return bad(format!("piece region {:?} is empty or outside {:?}", p.region, self.virtual_shape));
            }
            let Some(&n) = self.targets.get(&p.target) else {
                return bad(format!("piece targets undeclared tensor {}", p.target));
            };
            let (lo, hi) = p.value_range();
            if lo < 0 || hi >= n as i64 {
                return bad(format!("piece values [{lo}, {hi}] exceed target {} of {n} elements", p.target));
            }
        }
        if self.covered_volume() > self.numel() {
            return bad("pieces overlap".into());
        }
        for (i, a) in self.pieces.iter().enumerate() {
            for b in &self.pieces[i + 1..] {
                if a.region.intersect(&b.region).is_some() {
                    return bad(format!("pieces {:?} and {:?} overlap", a.region, b.region));
                }
            }
        }
        Ok(())
    }

    pub fn piece_at(&self, idx: &[usize]) -> Option<&AffinePiece> {
        self.pieces.iter().find(|p| p.region.contains(idx))
    }

    pub fn eval(&self, idx: &[usize]) -> Result<(TensorId, usize), MappingError> {
        if idx.len() != self.rank() || idx.iter().zip(&self.virtual_shape).any(|(i, d)| i >= d) {
            return Err(MappingError::OutOfBounds { index: idx.to_vec(), shape: self.virtual_shape.clone() });
        }
        let p = self.piece_at(idx).ok_or_else(|| MappingError::Uncovered(idx.to_vec()))?;
        Ok((p.target, p.value(idx) as usize))
    }

    /// Keeps only the parts of pieces inside `region`.
    pub fn restrict(&self, region: &IndexBox) -> IndexMap {
        let pieces: Vec<_> =
            self.pieces.iter().filter_map(|p| p.region.intersect(region).map(|r| p.restrict(r))).collect();
        self.with_pieces(pieces)
    }

    fn with_pieces(&self, pieces: Vec<AffinePiece>) -> IndexMap {
        let targets = self
            .targets
            .iter()
            .filter(|(t, _)| pieces.iter().any(|p| p.target == **t))
            .map(|(t, n)| (*t, *n))
            .collect();
        IndexMap { virtual_shape: self.virtual_shape.clone(), pieces, targets }
    }

    /// Union of two maps over the same space. Overlapping regions keep the
    /// pieces of `self`; callers are expected to have checked agreement.
    pub fn union(&self, other: &IndexMap) -> IndexMap {
        assert_eq!(self.virtual_shape, other.virtual_shape);
        let mut pieces = self.pieces.clone();
        let mine: Vec<IndexBox> = self.pieces.iter().map(|p| p.region.clone()).collect();
        for p in &other.pieces {
            for r in box_difference(&p.region, &mine) {
                pieces.push(p.restrict(r));
            }
        }
        let mut targets = self.targets.clone();
        targets.extend(other.targets.iter().map(|(t, n)| (*t, *n)));
        let mut m = IndexMap { virtual_shape: self.virtual_shape.clone(), pieces, targets };
        m.merge_pieces();
        m
    }

    /// Regions of the space not covered by any piece.
    pub fn uncovered(&self) -> Vec<IndexBox> {
        let holes: Vec<IndexBox> = self.pieces.iter().map(|p| p.region.clone()).collect();
        box_difference(&IndexBox::full(&self.virtual_shape), &holes)
    }

    /// Fills the uncovered region with pieces of the identity map onto `t`,
    /// which must have the same shape as the virtual space.
    pub fn fill_with_identity(&self, t: TensorId) -> IndexMap {
        let id = IndexMap::identity(t, &self.virtual_shape);
        let mut pieces = self.pieces.clone();
        for r in self.uncovered() {
            pieces.push(id.pieces[0].restrict(r));
        }
        let mut targets = self.targets.clone();
        if pieces.iter().any(|p| p.target == t) {
            targets.insert(t, self.numel());
        }
        let mut m = IndexMap { virtual_shape: self.virtual_shape.clone(), pieces, targets };
        m.merge_pieces();
        m
    }

    /// True when the two maps assign different locations to some index
    /// covered by both.
    pub fn disagrees_with(&self, other: &IndexMap) -> bool {
        for a in &self.pieces {
            for b in &other.pieces {
                if let Some(x) = a.region.intersect(&b.region) {
                    if !a.agrees_on(b, &x) && !pointwise_agree(a, b, &x) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Boxes of the space where `self` and `other` differ (or only one is
    /// defined). Overlaps of pieces with different affine functions are
    /// bisected until each part agrees or disagrees throughout; past a split
    /// budget the remainder is reported whole, over-approximating.
    pub fn disagreement(&self, other: &IndexMap) -> Vec<IndexBox> {
        let mut out = Vec::new();
        let mut agreed = Vec::new();
        for a in &self.pieces {
            for b in &other.pieces {
                if let Some(x) = a.region.intersect(&b.region) {
                    let mut budget = DISAGREEMENT_SPLITS;
                    split_agreement(a, b, x, &mut budget, &mut agreed, &mut out);
                }
            }
        }
        // Indices covered by only one side count as disagreement too.
        let both: Vec<IndexBox> = agreed.iter().chain(&out).cloned().collect();
        let covered = |m: &IndexMap| m.pieces.iter().map(|p| p.region.clone()).collect::<Vec<_>>();
        for r in covered(self).iter().chain(covered(other).iter()) {
            let only_one = box_difference(r, &both);
            out.extend(only_one);
        }
        dedup_disjoint(out)
    }

    /// Merges adjacent pieces whose affine functions continue each other.
    pub fn merge_pieces(&mut self) {
        let n = self.rank();
        let mut changed = true;
        while changed {
            changed = false;
            for k in 0..n {
                let mut groups: HashMap<(TensorId, Vec<usize>, Vec<usize>), Vec<usize>> = HashMap::new();
                for (i, p) in self.pieces.iter().enumerate() {
                    let mut lo = p.region.lo.clone();
                    let mut hi = p.region.hi.clone();
                    lo[k] = 0;
                    hi[k] = 0;
                    groups.entry((p.target, lo, hi)).or_default().push(i);
                }
                let mut keep: Vec<Option<AffinePiece>> = self.pieces.drain(..).map(Some).collect();
                let mut keys: Vec<_> = groups.into_values().filter(|g| g.len() > 1).collect();
                keys.sort();
                for mut g in keys {
                    g.sort_by_key(|&i| keep[i].as_ref().unwrap().region.lo[k]);
                    let mut acc = g[0];
                    for &next in &g[1..] {
                        let a = keep[acc].as_ref().unwrap();
                        let b = keep[next].as_ref().unwrap();
                        if a.region.hi[k] == b.region.lo[k] {
                            if let Some(m) = try_merge(a, b, k) {
                                keep[acc] = Some(m);
                                keep[next] = None;
                                changed = true;
                                continue;
                            }
                        }
                        acc = next;
                    }
                }
                self.pieces = keep.into_iter().flatten().collect();
            }
        }
        self.pieces.sort_by(|a, b| a.region.lo.cmp(&b.region.lo));
    }

    /// Minimal contiguous dimension and the resulting classification.
    pub fn contiguity(&self, elem_size: usize, coalesce_unit: usize) -> ContiguityReport {
        let n = self.rank();
        let d = &self.virtual_shape;
        let suffix = suffix_products(d);
        let dim_ok = |k: usize| {
            d[k] == 1
                || self.pieces.iter().all(|p| {
                    p.region.lo[k] == 0 && p.region.hi[k] == d[k] && p.strides[k] == suffix[k] as i64
                })
        };
        let mut first = n; // 0-based index of the first contiguous dim
        while first > 0 && dim_ok(first - 1) {
            first -= 1;
        }
        let mut run: usize = d[first..].iter().product();
        if first > 0 && !self.pieces.is_empty() {
            // Pieces along the first non-contiguous dim may still be laid out
            // with the right stride; then a run extends over whole blocks of
            // that dim between piece boundaries.
            let k = first - 1;
            let stride_ok = self
                .pieces
                .iter()
                .all(|p| p.region.extent(k) == 1 || p.strides[k] == suffix[k] as i64);
            let inner_full = (first..n).all(|j| d[j] == 1 || self.pieces.iter().all(|p| p.region.extent(j) == d[j]));
            if stride_ok && inner_full {
                let g = self.pieces.iter().fold(0usize, |g, p| gcd(gcd(g, p.region.lo[k]), p.region.hi[k]));
                run *= g.max(1);
            }
        }
        let class = if first == 0 && self.is_total() && self.pieces.len() == 1 {
            ContiguityClass::FullyContiguous
        } else if run * elem_size >= coalesce_unit {
            ContiguityClass::PartiallyContiguous
        } else {
            ContiguityClass::NonContiguous
        };
        let type_class =
            if class == ContiguityClass::FullyContiguous { TypeClass::TypeI } else { TypeClass::TypeII };
        ContiguityReport { min_contiguous_dim: first + 1, contiguous_run_elems: run, class, type_class }
    }

    /// True iff no two covered indices reach the same physical location.
    pub fn check_writable(&self) -> bool {
        if !self.pieces.iter().all(piece_injective) {
            return false;
        }
        for (i, a) in self.pieces.iter().enumerate() {
            for b in &self.pieces[i + 1..] {
                if a.target != b.target {
                    continue;
                }
                let (alo, ahi) = a.value_range();
                let (blo, bhi) = b.value_range();
                if ahi < blo || bhi < alo {
                    continue;
                }
                if images_disjoint_by_box(a, b) {
                    continue;
                }
                if a.region.volume() + b.region.volume() <= EXHAUSTIVE_LIMIT {
                    let mut seen = std::collections::HashSet::new();
                    a.for_each_value(|_, v| {
                        seen.insert(v);
                    });
                    let mut clash = false;
                    b.for_each_value(|_, v| clash |= seen.contains(&v));
                    if clash {
                        return false;
                    }
                    continue;
                }
                return false;
            }
        }
        true
    }

    /// Number of distinct physical elements reached by the map.
    pub fn unique_elements(&self) -> usize {
        if self.covered_volume() <= EXHAUSTIVE_LIMIT {
            let mut total = 0;
            for (&t, &n) in &self.targets {
                let mut seen = vec![false; n];
                for p in self.pieces.iter().filter(|p| p.target == t) {
                    p.for_each_value(|_, v| {
                        if !seen[v as usize] {
                            seen[v as usize] = true;
                            total += 1;
                        }
                    });
                }
            }
            return total;
        }
        let mut per_target: BTreeMap<TensorId, usize> = BTreeMap::new();
        for p in &self.pieces {
            let reach: usize =
                (0..p.strides.len()).filter(|&k| p.strides[k] != 0).map(|k| p.region.extent(k)).product();
            *per_target.entry(p.target).or_default() += reach;
        }
        per_target.iter().map(|(t, c)| (*c).min(self.targets[t])).sum()
    }

    /// Test hook: the same map read with every index rotated by one along
    /// the first dimension of extent ≥ 2. Returns `None` for 1-element maps.
    pub fn rotated(&self, self_id: TensorId) -> Option<IndexMap> {
        let k = (0..self.rank()).rev().find(|&k| self.virtual_shape[k] >= 2)?;
        let shape = &self.virtual_shape;
        let suffix = suffix_products(shape);
        let strides: Vec<i64> = suffix.iter().map(|&s| s as i64).collect();
        let mut head = IndexBox::full(shape);
        head.hi[k] -= 1;
        let mut tail = IndexBox::full(shape);
        tail.lo[k] = shape[k] - 1;
        let rot = IndexMap {
            virtual_shape: shape.clone(),
            pieces: vec![
                AffinePiece { region: head, target: self_id, strides: strides.clone(), offset: suffix[k] as i64 },
                AffinePiece {
                    region: tail,
                    target: self_id,
                    strides,
                    offset: -((shape[k] - 1) as i64) * suffix[k] as i64,
                },
            ],
            targets: BTreeMap::from([(self_id, self.numel())]),
        };
        compose(&rot, &HashMap::from([(self_id, self.clone())])).ok()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn pointwise_agree(a: &AffinePiece, b: &AffinePiece, on: &IndexBox) -> bool {
    if a.target != b.target || on.volume() > 4096 {
        return false;
    }
    let mut ok = true;
    on.for_each(|i| ok &= a.value(i) == b.value(i));
    ok
}

fn dedup_disjoint(boxes: Vec<IndexBox>) -> Vec<IndexBox> {
    let mut out: Vec<IndexBox> = Vec::new();
    for b in boxes {
        let parts = box_difference(&b, &out);
        out.extend(parts);
    }
    out
}

fn try_merge(a: &AffinePiece, b: &AffinePiece, k: usize) -> Option<AffinePiece> {
    let n = a.strides.len();
    let ea = a.region.extent(k);
    let eb = b.region.extent(k);
    let va = a.value_at_lo();
    let vb = b.value_at_lo();
    for j in 0..n {
        if j != k && a.region.extent(j) > 1 && a.strides[j] != b.strides[j] {
            return None;
        }
    }
    let sigma = if ea > 1 {
        a.strides[k]
    } else if eb > 1 {
        b.strides[k]
    } else {
        vb - va
    };
    if sigma < 0 || vb != va + sigma * ea as i64 || (eb > 1 && b.strides[k] != sigma) {
        return None;
    }
    let mut region = a.region.clone();
    region.hi[k] = b.region.hi[k];
    let mut strides = a.strides.clone();
    strides[k] = sigma;
    let offset = va - strides.iter().zip(&region.lo).map(|(s, &l)| s * l as i64).sum::<i64>();
    Some(AffinePiece { region, target: a.target, strides, offset })
}

fn piece_injective(p: &AffinePiece) -> bool {
    let mut dims: Vec<(u64, usize)> = (0..p.strides.len())
        .filter(|&k| p.region.extent(k) > 1)
        .map(|k| (p.strides[k].unsigned_abs(), p.region.extent(k)))
        .collect();
    dims.sort();
    let mut reach: u64 = 0;
    let mut analytic = true;
    for &(s, e) in &dims {
        if s == 0 {
            return false;
        }
        if s <= reach {
            analytic = false;
            break;
        }
        reach += s * (e as u64 - 1);
    }
    if analytic {
        return true;
    }
    if p.region.volume() > EXHAUSTIVE_LIMIT {
        return false;
    }
    let mut seen = std::collections::HashSet::new();
    let mut ok = true;
    p.for_each_value(|_, v| ok &= seen.insert(v));
    ok
}

/// Two pieces whose strides coincide form images on a common lattice; when
/// their lattice boxes are disjoint so are the images (given injectivity).
fn images_disjoint_by_box(a: &AffinePiece, b: &AffinePiece) -> bool {
    if a.strides != b.strides {
        return false;
    }
    let n = a.strides.len();
    let diff = b.value_at_lo() - a.value_at_lo();
    // Express b's origin in a's coordinates: diff = Σ s_k δ_k, peel greedily
    // from the largest stride.
    let mut order: Vec<usize> = (0..n).filter(|&k| a.strides[k] > 0).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(a.strides[k]));
    let mut rem = diff;
    let mut delta = vec![0i64; n];
    for &k in &order {
        delta[k] = rem.div_euclid(a.strides[k]);
        rem = rem.rem_euclid(a.strides[k]);
    }
    if rem != 0 {
        return false;
    }
    // Injective lattices with non-negative strides: disjoint iff some axis
    // separates the boxes.
    let mut sorted = order.clone();
    sorted.sort_by_key(|&k| a.strides[k]);
    let mut reach = 0i64;
    for &k in &sorted {
        let e = a.region.extent(k).max(b.region.extent(k)) as i64;
        if a.strides[k] <= reach {
            return false;
        }
        reach += a.strides[k] * (e - 1);
    }
    order.iter().any(|&k| {
        let ea = a.region.extent(k) as i64;
        let eb = b.region.extent(k) as i64;
        delta[k] >= ea || delta[k] + eb <= 0
    })
}

/// Composes `outer` with base maps for its virtual targets. Targets without
/// a base map are treated as physical and kept as they are.
const DISAGREEMENT_SPLITS: usize = 512;

/// Partitions `x` into boxes where `a` and `b` agree and boxes where they
/// differ, by bisecting along dimensions whose strides differ.
fn split_agreement(
    a: &AffinePiece,
    b: &AffinePiece,
    x: IndexBox,
    budget: &mut usize,
    agreed: &mut Vec<IndexBox>,
    out: &mut Vec<IndexBox>,
) {
    if a.agrees_on(b, &x) {
        agreed.push(x);
        return;
    }
    if a.target != b.target {
        out.push(x);
        return;
    }
    // d(I) = a(I) - b(I) is affine; agreement means d(I) = 0.
    let diff: Vec<i64> = a.strides.iter().zip(&b.strides).map(|(p, q)| p - q).collect();
    let d0 = a.value(&x.lo) - b.value(&x.lo);
    let (mut lo, mut hi, mut g) = (d0, d0, 0i64);
    for (k, &dk) in diff.iter().enumerate() {
        let span = dk * (x.extent(k) as i64 - 1);
        if span < 0 {
            lo += span;
        } else {
            hi += span;
        }
        if x.extent(k) > 1 {
            g = gcd(g as usize, dk.unsigned_abs() as usize) as i64;
        }
    }
    let unreachable = lo > 0 || hi < 0 || (g > 0 && d0 % g != 0);
    let axis = (0..x.rank()).filter(|&k| diff[k] != 0 && x.extent(k) > 1).max_by_key(|&k| x.extent(k));
    match axis {
        Some(k) if !unreachable && *budget > 0 => {
            *budget -= 1;
            let (l, r) = x.split_at(k, x.lo[k] + x.extent(k) / 2);
            split_agreement(a, b, l, budget, agreed, out);
            split_agreement(a, b, r, budget, agreed, out);
        }
        _ => out.push(x),
    }
}

pub fn compose(outer: &IndexMap, bases: &HashMap<TensorId, IndexMap>) -> Result<IndexMap, MappingError> {
    compose_with(outer, |t| bases.get(&t))
}

pub fn compose_with<'a>(
    outer: &IndexMap,
    base_of: impl Fn(TensorId) -> Option<&'a IndexMap>,
) -> Result<IndexMap, MappingError> {
    let mut pieces = Vec::new();
    let mut targets = BTreeMap::new();
    for p in &outer.pieces {
        match base_of(p.target) {
            None => {
                targets.insert(p.target, outer.targets[&p.target]);
                pieces.push(p.clone());
            }
            Some(base) => {
                if base.numel() != outer.targets[&p.target] {
                    return Err(MappingError::Invalid(format!(
                        "base map for {} has {} elements, expected {}",
                        p.target,
                        base.numel(),
                        outer.targets[&p.target]
                    )));
                }
                if (0..p.strides.len()).any(|k| p.strides[k] < 0 && p.region.extent(k) > 1) {
                    return Err(MappingError::NonAffineComposition(format!(
                        "negative stride in piece over {:?}",
                        p.region
                    )));
                }
                let mut work = vec![p.region.clone()];
                let mut budget = SPLIT_BUDGET;
                while let Some(region) = work.pop() {
                    match compose_box(p, &region, base)? {
                        Step::Emit(q) => {
                            targets.insert(q.target, base.targets[&q.target]);
                            pieces.push(q);
                            if pieces.len() > SPLIT_BUDGET {
                                return Err(MappingError::PieceLimit(MAX_PIECES));
                            }
                        }
                        Step::Split(a, b) => {
                            budget = budget.checked_sub(1).ok_or(MappingError::PieceLimit(MAX_PIECES))?;
                            work.push(b);
                            work.push(a);
                        }
                    }
                }
            }
        }
    }
    let mut m = IndexMap { virtual_shape: outer.virtual_shape.clone(), pieces, targets };
    m.merge_pieces();
    if m.pieces.len() > MAX_PIECES {
        return Err(MappingError::PieceLimit(MAX_PIECES));
    }
    Ok(m)
}

enum Step {
    Emit(AffinePiece),
    Split(IndexBox, IndexBox),
}

fn digits(mut v: usize, suffix: &[usize]) -> Vec<usize> {
    suffix
        .iter()
        .map(|&s| {
            let d = v / s;
            v %= s;
            d
        })
        .collect()
}

fn bisect(region: &IndexBox, score: impl Fn(usize) -> usize) -> Step {
    let k = (0..region.rank())
        .filter(|&k| region.extent(k) > 1)
        .max_by_key(|&k| (score(k), std::cmp::Reverse(k)))
        .expect("a splittable box has a dimension of extent > 1");
    let (a, b) = region.split_at(k, region.lo[k] + region.extent(k) / 2);
    Step::Split(a, b)
}

fn compose_box(p: &AffinePiece, region: &IndexBox, base: &IndexMap) -> Result<Step, MappingError> {
    let shape = base.virtual_shape();
    let suffix = suffix_products(shape);
    let n_out = region.rank();
    let n_base = shape.len();
    let lo_val = p.value(&region.lo);
    let base_digits = digits(lo_val as usize, &suffix);
    let a: Vec<Vec<usize>> = (0..n_out)
        .map(|k| if region.extent(k) > 1 { digits(p.strides[k] as usize, &suffix) } else { vec![0; n_base] })
        .collect();
    let reach = |j: usize| -> usize { (0..n_out).map(|k| a[k][j] * (region.extent(k) - 1)).sum() };

    // (a) no carry between the target's mixed-radix digits.
    for j in 1..n_base {
        if base_digits[j] + reach(j) > shape[j] - 1 {
            let room = shape[j] - 1 - base_digits[j];
            for k in 0..n_out {
                if a[k][j] > 0 && region.extent(k) > 1 {
                    let m = region.lo[k] + room / a[k][j] + 1;
                    if m < region.hi[k] {
                        let (x, y) = region.split_at(k, m);
                        return Ok(Step::Split(x, y));
                    }
                }
            }
            return Ok(bisect(region, |k| a[k][j] * (region.extent(k) - 1)));
        }
    }
    // (b) the image box lies inside a single base piece.
    let q = base
        .piece_at(&base_digits)
        .ok_or_else(|| MappingError::Invalid(format!("base map does not cover {base_digits:?}")))?;
    for j in 0..n_base {
        let top = base_digits[j] + reach(j);
        if top >= q.region.hi[j] {
            let b = q.region.hi[j];
            for k in 0..n_out {
                if a[k][j] > 0 && region.extent(k) > 1 {
                    let steps = (b - base_digits[j]).div_ceil(a[k][j]);
                    let m = region.lo[k] + steps;
                    if m < region.hi[k] {
                        let (x, y) = region.split_at(k, m);
                        return Ok(Step::Split(x, y));
                    }
                }
            }
            return Ok(bisect(region, |k| a[k][j] * (region.extent(k) - 1)));
        }
    }
    let strides: Vec<i64> =
        (0..n_out).map(|k| (0..n_base).map(|j| q.strides[j] * a[k][j] as i64).sum()).collect();
    let at_lo = q.value(&base_digits);
    let offset = at_lo - strides.iter().zip(&region.lo).map(|(s, &l)| s * l as i64).sum::<i64>();
    Ok(Step::Emit(AffinePiece { region: region.clone(), target: q.target, strides, offset }))
}
