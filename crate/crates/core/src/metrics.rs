//! Run-level result types: per-request latency records, tier hit rates,
//! transfer byte totals, the demotion/promotion byte ledger, and the
//! five-component energy breakdown.

use serde::{Deserialize, Serialize};

use crate::trace::Category;

/// Energy totals in joules, reported in five components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// Weight bytes streamed for projection/FFN passes.
    pub fc_offchip_j: f64,
    /// KV bytes crossing UCIe or NVLink for attention.
    pub attn_offchip_j: f64,
    /// Projection/FFN arithmetic.
    pub fc_onchip_j: f64,
    /// Attention arithmetic, wherever it executes.
    pub attn_onchip_j: f64,
    /// Stack-internal DMA, base-die aggregation, quantization, and
    /// replica fanout.
    pub communication_j: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.fc_offchip_j
            + self.attn_offchip_j
            + self.fc_onchip_j
            + self.attn_onchip_j
            + self.communication_j
    }

    pub fn add(&mut self, other: &EnergyBreakdown) {
        self.fc_offchip_j += other.fc_offchip_j;
        self.attn_offchip_j += other.attn_offchip_j;
        self.fc_onchip_j += other.fc_onchip_j;
        self.attn_onchip_j += other.attn_onchip_j;
        self.communication_j += other.communication_j;
    }
}

/// Byte totals per transfer path and class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferTotals {
    pub tsv_foreground_bytes: u64,
    pub tsv_background_bytes: u64,
    /// Per-step streaming of capacity-resident context.
    pub tsv_stream_bytes: u64,
    pub nvlink_foreground_bytes: u64,
    pub nvlink_background_bytes: u64,
    /// KV streamed over the GPU-visible HBM interface for attention.
    pub ucie_attention_bytes: u64,
    pub basedie_agg_bytes: u64,
}

/// FP16-equivalent byte ledger for the demotion path. Every demoted byte
/// must later be promoted, still be resident, or have been garbage
/// collected; the ledger closing to zero is checked at end of run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteLedger {
    pub demoted_fp16: u64,
    pub promoted_fp16: u64,
    pub gc_fp16: u64,
    pub capacity_resident_fp16: u64,
}

impl ByteLedger {
    pub fn closes(&self) -> bool {
        self.demoted_fp16 == self.promoted_fp16 + self.gc_fp16 + self.capacity_resident_fp16
    }
}

/// Per-request latency record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub category: Category,
    pub arrival: f64,
    /// Delay from arrival to first scheduled work.
    pub queue_delay: f64,
    pub ttft: f64,
    pub e2e: f64,
    pub gen_tokens: u32,
    pub prompt_blocks: u32,
    /// Prompt blocks served from any resident copy instead of recompute.
    pub cached_prompt_blocks: u32,
}

/// Tier hit rates with both denominators: block accesses and bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HitRates {
    pub compute_access_hit_rate: f64,
    pub compute_byte_hit_rate: f64,
    /// Fraction of prompt blocks found resident at admission.
    pub prefix_hit_rate: f64,
}

/// Policy decision counters for one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyCounters {
    pub demotions: u64,
    pub promotions: u64,
    pub evictions: u64,
    pub callbacks: u64,
    pub replications: u64,
    pub revocations: u64,
    pub gc_blocks: u64,
    /// Prompt blocks recomputed because their KV had been discarded.
    pub recomputed_blocks: u64,
    pub cdf_refits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyEventKind {
    Demote,
    Promote,
    Evict,
    Callback,
    Replicate,
    Revoke,
    Gc,
}

/// One entry of the optional per-run policy debug log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvent {
    pub t: f64,
    pub kind: PolicyEventKind,
    pub block: u64,
    pub card: u32,
}

/// Nearest-rank latency percentiles, precomputed at end of run so that
/// stored metrics stay compact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50_ttft: f64,
    pub p95_ttft: f64,
    pub p50_tbt: f64,
    pub p95_tbt: f64,
    pub p50_e2e: f64,
    pub p95_e2e: f64,
}

/// Everything measured over one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_request: Vec<RequestRecord>,
    /// One sample per generated token (step duration of its decode step).
    /// Kept in memory for analysis; not serialized.
    #[serde(skip_serializing, default)]
    pub tbt_samples: Vec<f64>,
    pub latency: LatencySummary,
    pub makespan: f64,
    pub generated_tokens: u64,
    pub token_throughput: f64,
    pub request_throughput: f64,
    pub completed_requests: u32,
    /// Requests whose KV could never fit the node; excluded from latency.
    pub rejected_requests: u32,
    pub steps: u64,
    pub mean_decode_batch: f64,
    pub hit_rates: HitRates,
    pub energy: EnergyBreakdown,
    pub energy_per_token_j: f64,
    pub transfers: TransferTotals,
    pub ledger: ByteLedger,
    pub counters: PolicyCounters,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub policy_events: Option<Vec<PolicyEvent>>,
}

impl RunMetrics {
    pub fn ttft_series(&self) -> Vec<f64> {
        self.per_request.iter().map(|r| r.ttft).collect()
    }

    pub fn e2e_series(&self) -> Vec<f64> {
        self.per_request.iter().map(|r| r.e2e).collect()
    }

    pub fn queue_delay_series(&self) -> Vec<f64> {
        self.per_request.iter().map(|r| r.queue_delay).collect()
    }

    pub fn mean_queue_delay(&self) -> f64 {
        if self.per_request.is_empty() {
            return 0.0;
        }
        self.per_request.iter().map(|r| r.queue_delay).sum::<f64>()
            / self.per_request.len() as f64
    }
}

/// A run either completes or is infeasible at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum RunOutcome {
    Completed(RunMetrics),
    Infeasible { reason: String },
}

impl RunOutcome {
    pub fn metrics(&self) -> Option<&RunMetrics> {
        match self {
            RunOutcome::Completed(m) => Some(m),
            RunOutcome::Infeasible { .. } => None,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, RunOutcome::Infeasible { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_total_is_component_sum() {
        let e = EnergyBreakdown {
            fc_offchip_j: 1.0,
            attn_offchip_j: 2.0,
            fc_onchip_j: 3.0,
            attn_onchip_j: 4.0,
            communication_j: 5.0,
        };
        assert!((e.total() - 15.0).abs() < 1e-12);
        let mut sum = e;
        sum.add(&e);
        assert!((sum.total() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_closure() {
        let ledger = ByteLedger {
            demoted_fp16: 100,
            promoted_fp16: 40,
            gc_fp16: 10,
            capacity_resident_fp16: 50,
        };
        assert!(ledger.closes());
        let open = ByteLedger {
            demoted_fp16: 100,
            ..ledger
        };
        assert!(open.closes());
        let bad = ByteLedger {
            promoted_fp16: 41,
            ..ledger
        };
        assert!(!bad.closes());
    }
}
