//! Every virtualization candidate must describe exactly the data its
//! operator moves: reading the virtual tensor through the candidate's map
//! gives the values the operator really produces (or consumes).

use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtelim_core::exec::{random_inputs, round_to, run_operator};
use vtelim_core::rules::vt_rules;
use vtelim_core::testgen::random_graph;
use vtelim_core::vtog::build_vtog;
use vtelim_core::{CompGraph, Direction, OpKind, TensorData, TensorId};

fn fixture(name: &str) -> CompGraph {
    let p = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    CompGraph::parse_json(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Plain interpretation of the whole graph, every tensor kept.
fn materialize(g: &CompGraph, seed: u64) -> HashMap<TensorId, TensorData> {
    let mut vals = random_inputs(g, seed);
    for &n in g.topo_order() {
        let node = g.node(n);
        let xs: Vec<&TensorData> = node.inputs.iter().map(|t| &vals[t]).collect();
        let outs = run_operator(node, &xs).unwrap();
        for (&t, y) in node.outputs.iter().zip(outs) {
            vals.insert(t, round_to(y, g.tensor(t).dtype));
        }
    }
    vals
}

fn check_graph(g: &CompGraph, seed: u64) -> Result<usize, TestCaseError> {
    let vals = materialize(g, seed);
    let mut checked = 0;
    for n in g.data_movement_nodes() {
        let node = g.node(n);
        let cands = vt_rules(g, n).unwrap();
        // ScatterND in place: the output aliases the data input except where
        // the updates land, which the updates-over-output map pins down.
        let mut updated = HashSet::new();
        if node.kind == OpKind::ScatterND {
            for c in cands.iter().filter(|c| c.direction == Direction::InputOverOutput) {
                for p in c.map.pieces() {
                    p.for_each_value(|_, off| {
                        updated.insert(off);
                    });
                }
            }
        }
        for c in cands {
            let in_place = node.kind == OpKind::ScatterND && c.direction == Direction::OutputOverInput;
            let vt = g.tensor(c.virtual_tensor);
            prop_assert_eq!(c.map.virtual_shape(), vt.shape.as_slice());
            prop_assert!(!vt.is_boundary(), "candidate virtualizes boundary tensor {}", vt.name);
            let opposite = match c.direction {
                Direction::OutputOverInput => &node.inputs,
                Direction::InputOverOutput => &node.outputs,
            };
            for b in &c.base_tensors {
                prop_assert!(opposite.contains(b));
            }
            let virt = vals[&c.virtual_tensor].as_standard_layout().into_owned();
            let virt = virt.as_slice().unwrap();
            let vt_shape = &vt.shape;
            for p in c.map.pieces() {
                let base = vals[&p.target].as_standard_layout().into_owned();
                let base = base.as_slice().unwrap();
                let mut bad = None;
                p.for_each_value(|idx, off| {
                    let flat = idx.iter().zip(vt_shape).fold(0, |a, (&i, &s)| a * s + i);
                    if in_place && updated.contains(&(flat as i64)) {
                        return;
                    }
                    if virt[flat].to_bits() != base[off as usize].to_bits() && bad.is_none() {
                        bad = Some(idx.to_vec());
                    }
                    checked += 1;
                });
                prop_assert!(bad.is_none(), "{} {:?} of {}: mismatch at {:?}", node.name, c.direction, vt.name, bad);
            }
        }
    }
    Ok(checked)
}

#[test]
fn fixture_candidates_are_sound() {
    for f in ["fig2_llama_subgraph.json", "fig6.json", "fig7_conflict.json", "fig9_efficientvit.json", "fig11_yolo_c3k2.json"] {
        let n = check_graph(&fixture(f), 3).unwrap();
        assert!(n > 0, "{f}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_candidates_are_sound(seed in any::<u64>()) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), 12);
        check_graph(&g, seed)?;
    }

    /// Each data-movement operator contributes a bounded number of edges, so
    /// the opportunity graph grows linearly with the computation graph.
    #[test]
    fn edge_count_is_linear(seed in any::<u64>()) {
        let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), 12);
        let v = build_vtog(&g).unwrap();
        let bound: usize = g
            .data_movement_nodes()
            .map(|n| 2 * (g.node(n).inputs.len() + g.node(n).outputs.len()))
            .sum();
        prop_assert!(v.edges().len() <= bound);
        for e in v.edges() {
            prop_assert!(!g.tensor(e.src).is_boundary());
            prop_assert!(g.node(e.eliminated_op).is_data_movement());
        }
        for t in g.tensor_ids() {
            for (a, b) in v.conflicts(t) {
                prop_assert_eq!(v.edge(a).src, t);
                prop_assert_eq!(v.edge(b).src, t);
            }
        }
    }
}
