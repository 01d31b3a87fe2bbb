//! Shared inputs for the criterion benches in `benches/`.

use std::path::PathBuf;

use vtelim_core::CompGraph;

/// Loads one of the workspace fixtures by file name.
pub fn fixture(name: &str) -> CompGraph {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    let text = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    CompGraph::parse_json(&text).expect("fixture parses")
}
