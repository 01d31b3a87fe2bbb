//! Iterative global greedy construction of a points-to graph.
//!
//! The anchor set `A` starts with every tensor that cannot be virtualized.
//! Each iteration picks the non-anchor tensor whose best conflict-free group
//! of edges into `A` promises the largest saving, commits that group and
//! anchors the tensor. Promised savings come from discrete derivatives
//! `w(e) = ℓ(C ∪ {e}) − ℓ(C)`; a group is committed only if its exact joint
//! saving is non-negative.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::graph::{CompGraph, TensorId};
use crate::vtog::{validate_ptg, EdgeId, PointsToGraph, Vtog, VtogError};

/// ℓ: latency saved by a strategy relative to the all-physical graph.
pub trait SavingOracle {
    fn evaluate(&mut self, g: &CompGraph, ptg: &PointsToGraph) -> anyhow::Result<f64>;
}

#[derive(Debug, Error)]
pub enum GreedyError {
    #[error("invalid VTOG selection: {0}")]
    InvalidVtog(#[from] VtogError),
    #[error("oracle failed: {0}")]
    Oracle(anyhow::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct Decision {
    pub iteration: usize,
    pub node: String,
    pub edges: Vec<String>,
    pub edge_ids: Vec<EdgeId>,
    /// Sum of the discrete derivatives of the chosen group.
    pub max_saving: f64,
    /// Exact change of ℓ when the group was committed.
    pub delta: f64,
    pub total_saving: f64,
    pub forced: bool,
}

#[derive(Debug, Clone)]
pub struct GreedyOutcome {
    pub ptg: PointsToGraph,
    /// Sum of the accepted deltas.
    pub total_saving: f64,
    /// ℓ of the final strategy, evaluated afresh.
    pub final_saving: f64,
    pub iterations: usize,
    pub oracle_calls: usize,
    pub edge_savings: Vec<Option<f64>>,
    pub decisions: Vec<Decision>,
}

impl GreedyOutcome {
    pub fn decisions_jsonl(&self) -> String {
        self.decisions.iter().map(|d| serde_json::to_string(d).expect("decision serializes") + "\n").collect()
    }
}

struct Evaluator<'a, O: SavingOracle> {
    v: &'a Vtog,
    oracle: &'a mut O,
    calls: usize,
    cache: HashMap<Vec<EdgeId>, Option<f64>>,
}

impl<O: SavingOracle> Evaluator<'_, O> {
    /// ℓ of a selection, or `None` when the selection is not a valid PTG.
    fn saving(&mut self, sel: &BTreeSet<EdgeId>) -> Result<Option<f64>, GreedyError> {
        if sel.is_empty() {
            return Ok(Some(0.0));
        }
        let key: Vec<EdgeId> = sel.iter().copied().collect();
        if let Some(&s) = self.cache.get(&key) {
            return Ok(s);
        }
        let s = match validate_ptg(self.v, &key) {
            Ok(ptg) => {
                self.calls += 1;
                Some(self.oracle.evaluate(self.v.graph(), &ptg).map_err(GreedyError::Oracle)?)
            }
            Err(e) => {
                log::debug!("selection {key:?} rejected: {e}");
                None
            }
        };
        self.cache.insert(key, s);
        Ok(s)
    }
}

/// Runs the greedy search. `forced` edges are committed before the search
/// starts and their sources are anchored.
pub fn greedy_build<O: SavingOracle>(
    v: &Vtog,
    oracle: &mut O,
    forced: &[EdgeId],
) -> Result<GreedyOutcome, GreedyError> {
    let g = v.graph();
    let nt = g.tensors().len();
    let mut ev = Evaluator { v, oracle, calls: 0, cache: HashMap::new() };
    let mut decisions = Vec::new();

    let mut chosen: BTreeSet<EdgeId> = forced.iter().copied().collect();
    let mut anchored = vec![false; nt];
    for t in g.tensor_ids() {
        anchored[t.index()] = v.out_edges(t).is_empty();
    }
    let mut current = 0.0;
    if !chosen.is_empty() {
        let sel: Vec<EdgeId> = chosen.iter().copied().collect();
        validate_ptg(v, &sel)?;
        current = ev.saving(&chosen)?.expect("validated above");
        for &e in &chosen {
            anchored[v.edge(e).src.index()] = true;
        }
        decisions.push(Decision {
            iteration: 0,
            node: String::new(),
            edges: sel.iter().map(|&e| v.edge_label(e)).collect(),
            edge_ids: sel,
            max_saving: current,
            delta: current,
            total_saving: current,
            forced: true,
        });
    }
    let mut total = current;

    // Initial profiling of every edge that can still be chosen.
    let mut w: Vec<Option<f64>> = vec![None; v.edges().len()];
    for e in v.edges() {
        if !anchored[e.src.index()] {
            w[e.id.index()] = profile(&mut ev, &chosen, e.id, current)?;
        }
    }

    let mut iterations = 0;
    while anchored.iter().any(|a| !a) {
        iterations += 1;
        let mut cands: Vec<(TensorId, Vec<EdgeId>, f64)> = Vec::new();
        for t in g.tensor_ids().filter(|t| !anchored[t.index()]) {
            let into_a: Vec<EdgeId> = v
                .out_edges(t)
                .iter()
                .copied()
                .filter(|&e| anchored[v.edge(e).dst.index()] && w[e.index()].is_some())
                .collect();
            if into_a.is_empty() {
                continue;
            }
            let (p, s) = max_edges(&into_a, |e| w[e.index()].unwrap_or(f64::NEG_INFINITY), |a, b| v.conflict(a, b));
            cands.push((t, p, s));
        }
        if cands.is_empty() {
            // Only edges among non-anchors remain: keep the first tensor by
            // name physical and carry on.
            let t = g
                .tensor_ids()
                .filter(|t| !anchored[t.index()])
                .min_by(|a, b| g.name(*a).cmp(g.name(*b)))
                .expect("loop condition");
            cands.push((t, Vec::new(), 0.0));
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| g.name(a.0).cmp(g.name(b.0))));

        let mut accepted = None;
        for (t, p, s) in &cands {
            if p.is_empty() {
                accepted = Some((*t, Vec::new(), *s, 0.0));
                break;
            }
            let mut next = chosen.clone();
            next.extend(p.iter().copied());
            if let Some(l) = ev.saving(&next)? {
                let delta = l - current;
                if delta >= 0.0 {
                    accepted = Some((*t, p.clone(), *s, delta));
                    break;
                }
            }
        }
        let (t, p, s, delta) = accepted.unwrap_or_else(|| {
            let t = cands.iter().map(|c| c.0).min_by(|a, b| g.name(*a).cmp(g.name(*b))).expect("non-empty");
            (t, Vec::new(), 0.0, 0.0)
        });
        anchored[t.index()] = true;
        chosen.extend(p.iter().copied());
        current += delta;
        total += delta;
        decisions.push(Decision {
            iteration: iterations,
            node: g.name(t).to_string(),
            edges: p.iter().map(|&e| v.edge_label(e)).collect(),
            edge_ids: p.clone(),
            max_saving: s,
            delta,
            total_saving: total,
            forced: false,
        });
        log::info!("iteration {iterations}: anchor {} with {} edges, delta {delta}", g.name(t), p.len());

        // Re-profile the edges that now point into the new anchor.
        for e in v.edges() {
            if e.dst == t && !anchored[e.src.index()] {
                w[e.id.index()] = profile(&mut ev, &chosen, e.id, current)?;
            }
        }
    }

    let sel: Vec<EdgeId> = chosen.iter().copied().collect();
    let ptg = validate_ptg(v, &sel)?;
    ev.calls += 1;
    let final_saving = ev.oracle.evaluate(g, &ptg).map_err(GreedyError::Oracle)?;
    Ok(GreedyOutcome {
        ptg,
        total_saving: total,
        final_saving,
        iterations,
        oracle_calls: ev.calls,
        edge_savings: w,
        decisions,
    })
}

fn profile<O: SavingOracle>(
    ev: &mut Evaluator<'_, O>,
    chosen: &BTreeSet<EdgeId>,
    e: EdgeId,
    current: f64,
) -> Result<Option<f64>, GreedyError> {
    let mut with = chosen.clone();
    with.insert(e);
    Ok(ev.saving(&with)?.map(|l| l - current))
}

/// Conflict-free subset of `cands` with the largest total weight, found by
/// branch and bound. Ties keep the subset found first, trying heavier edges
/// first; zero-weight edges are never added.
pub fn max_edges(
    cands: &[EdgeId],
    w: impl Fn(EdgeId) -> f64,
    conflict: impl Fn(EdgeId, EdgeId) -> bool,
) -> (Vec<EdgeId>, f64) {
    let mut pos: Vec<(EdgeId, f64)> = cands.iter().map(|&e| (e, w(e))).filter(|&(_, x)| x > 0.0).collect();
    pos.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut suffix = vec![0.0; pos.len() + 1];
    for i in (0..pos.len()).rev() {
        suffix[i] = suffix[i + 1] + pos[i].1;
    }
    let mut best = (Vec::new(), 0.0);
    let mut cur = Vec::new();
    bnb(&pos, &suffix, &conflict, 0, 0.0, &mut cur, &mut best);
    let mut set = best.0;
    set.sort();
    (set, best.1)
}

fn bnb(
    pos: &[(EdgeId, f64)],
    suffix: &[f64],
    conflict: &impl Fn(EdgeId, EdgeId) -> bool,
    i: usize,
    sum: f64,
    cur: &mut Vec<EdgeId>,
    best: &mut (Vec<EdgeId>, f64),
) {
    if sum > best.1 {
        *best = (cur.clone(), sum);
    }
    if i == pos.len() || sum + suffix[i] <= best.1 {
        return;
    }
    let (e, x) = pos[i];
    if cur.iter().all(|&c| !conflict(c, e)) {
        cur.push(e);
        bnb(pos, suffix, conflict, i + 1, sum + x, cur, best);
        cur.pop();
    }
    bnb(pos, suffix, conflict, i + 1, sum, cur, best);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<EdgeId> {
        v.iter().map(|&i| EdgeId(i)).collect()
    }

    #[test]
    fn max_edges_respects_conflicts() {
        // Edges 1 and 3 conflict, as do 2 and 3.
        let w = |e: EdgeId| [0.0, 5.0, 4.0, 6.0][e.index()];
        let c = |a: EdgeId, b: EdgeId| {
            let (x, y) = (a.0.min(b.0), a.0.max(b.0));
            (x, y) == (1, 3) || (x, y) == (2, 3)
        };
        assert_eq!(max_edges(&ids(&[1, 2, 3]), w, c), (ids(&[1, 2]), 9.0));
    }

    #[test]
    fn max_edges_trivial_cases() {
        let none = |_: EdgeId, _: EdgeId| false;
        assert_eq!(max_edges(&ids(&[0]), |_| -2.0, none), (vec![], 0.0));
        assert_eq!(max_edges(&ids(&[0, 1, 2]), |_| 1.0, none), (ids(&[0, 1, 2]), 3.0));
        assert_eq!(max_edges(&[], |_| 1.0, none), (vec![], 0.0));
    }

    #[test]
    fn max_edges_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(0..9u32);
            let ws: Vec<f64> = (0..n).map(|_| rng.random_range(-3..6) as f64).collect();
            let mut conf = vec![vec![false; n as usize]; n as usize];
            for a in 0..n as usize {
                for b in a + 1..n as usize {
                    let x = rng.random_bool(0.3);
                    conf[a][b] = x;
                    conf[b][a] = x;
                }
            }
            let cands: Vec<EdgeId> = (0..n).map(EdgeId).collect();
            let (set, s) = max_edges(&cands, |e| ws[e.index()], |a, b| conf[a.index()][b.index()]);
            let mut brute: f64 = 0.0;
            for mask in 0u32..(1 << n) {
                let m: Vec<usize> = (0..n as usize).filter(|i| mask & (1 << i) != 0).collect();
                if m.iter().any(|&a| m.iter().any(|&b| conf[a][b])) {
                    continue;
                }
                brute = brute.max(m.iter().map(|&i| ws[i]).sum());
            }
            assert_eq!(s, brute);
            assert_eq!(set.iter().map(|e| ws[e.index()]).sum::<f64>(), s);
        }
    }
}
