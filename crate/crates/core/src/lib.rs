//! stacksim — a trace-driven discrete-event simulator for LLM serving on
//! tiered HBM-PIM memory stacks.
//!
//! The simulator models a multi-GPU node whose memory stacks mix dense
//! capacity layers with PIM-enabled compute layers, plus the runtime
//! policies that keep hot KV-cache blocks next to the in-memory attention
//! engines: placement, category-aware demotion, inline K8V4 quantization,
//! bounded replication, and continuous batching. Four stack organizations
//! are built in (`hybrid`, `dedicated-pim`, `full-gpu`, `uniform`) so the
//! same trace can be replayed against each and compared.
//!
//! Pipeline:
//!
//! ```text
//! trace (JSONL / synthesized)
//!    └─> engine::run(model, trace, topology, policies) ─> RunMetrics
//!            └─> harness::run_sweep (modes × QPS grid)  ─> SweepResult ─> CSV/JSON
//! ```

pub mod engine;
pub mod harness;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod stack;
pub mod trace;

pub use engine::{run, EnergyParams, PolicyConfig, RunConfig, TimingParams};
pub use harness::{
    emit_report, percentile, run_sweep, slo_capacity, ExperimentConfig, SweepResult,
};
pub use metrics::{EnergyBreakdown, RunMetrics, RunOutcome};
pub use model::ModelConfig;
pub use stack::{NodeTopology, StackConfig, StackMode};
pub use trace::{load_trace, rescale_qps, synthesize_trace, trace_stats, Trace, TraceSpec};
