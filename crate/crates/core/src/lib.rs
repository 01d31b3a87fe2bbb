//! Data-movement elimination for tensor computation graphs.
//!
//! Intermediate tensors produced or consumed by data-movement operators
//! (Transpose, Reshape, Split, Concat, Slice, Unsqueeze, Expand, ScatterND)
//! can be replaced by *virtual tensors*: piecewise-affine index maps over
//! physical storage. The pipeline is
//!
//! 1. [`graph`]: parse and validate a computation graph,
//! 2. [`rules`]: enumerate per-operator virtualization candidates,
//! 3. [`vtog`]: build the opportunity graph and its conflict sets,
//! 4. [`greedy`]: pick a strategy against a [`greedy::SavingOracle`],
//! 5. [`exec`]: re-run the graph under the strategy and check bit equality.

pub mod cost;
pub mod exec;
pub mod graph;
pub mod greedy;
pub mod mapping;
pub mod pipeline;
pub mod rules;
pub mod testgen;
pub mod vtog;

pub use cost::{AnalyticOracle, MachineParams, TrafficEstimate};
pub use exec::{execute, TensorData};
pub use graph::{CompGraph, DType, NodeId, OpKind, OpNode, TensorId, TensorKind, TensorSpec};
pub use greedy::{greedy_build, GreedyOutcome, SavingOracle};
pub use mapping::{AffinePiece, ContiguityClass, ContiguityReport, IndexBox, IndexMap, TypeClass};
pub use rules::{Direction, VtRuleCandidate};
pub use vtog::{build_vtog, validate_ptg, EdgeId, PointsToGraph, VtEdge, Vtog};
