//! Physical node model: stacks, layer types, banks, link bandwidths, and
//! the base-die residency table that maps logical KV blocks to physical
//! locations across tiers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GB: u64 = 1_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum StackError {
    #[error("stack must have at least one layer")]
    NoLayers,
    #[error("bandwidths must be positive")]
    NonPositiveBandwidth,
    #[error("compute layers present but PIM bank count is zero")]
    NoBanks,
    #[error("node needs at least one GPU")]
    NoGpus,
    #[error(
        "per-card weight shard ({weight_shard} B) does not fit the card's \
         {total} B of addressable memory"
    )]
    WeightsDoNotFit { weight_shard: u64, total: u64 },
    #[error("weight shard leaves no compute-domain space for KV")]
    NoKvSpace,
}

/// One memory stack: layer counts, per-layer densities, bank counts, and
/// the bandwidths of its internal and external interfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    /// Dense capacity-layer count (C).
    pub capacity_layers: u32,
    /// PIM-enabled compute-layer count (P).
    pub compute_layers: u32,
    /// Bytes per capacity layer.
    pub bytes_full_layer: u64,
    /// Bytes per compute layer (PIM logic halves density).
    pub bytes_half_layer: u64,
    /// PIM bank count across the stack's compute layers.
    pub pim_banks: u32,
    /// Capacity-layer bank count used for page interleaving.
    pub capacity_banks: u32,
    /// Stack-internal DMA bandwidth, bytes/s.
    pub tsv_bw: f64,
    /// Stack-to-GPU die-to-die bandwidth, bytes/s.
    pub ucie_bw: f64,
    /// Inline quantization engine bandwidth, bytes/s.
    pub quant_engine_bw: f64,
}

impl StackConfig {
    pub fn validate(&self) -> Result<(), StackError> {
        if self.capacity_layers + self.compute_layers == 0 {
            return Err(StackError::NoLayers);
        }
        if self.tsv_bw <= 0.0 || self.ucie_bw <= 0.0 || self.quant_engine_bw <= 0.0 {
            return Err(StackError::NonPositiveBandwidth);
        }
        if self.compute_layers > 0 && self.pim_banks == 0 {
            return Err(StackError::NoBanks);
        }
        Ok(())
    }

    /// Addressable bytes: C × B_full + P × B_half.
    pub fn total_capacity(&self) -> u64 {
        self.capacity_layers as u64 * self.bytes_full_layer
            + self.compute_layers as u64 * self.bytes_half_layer
    }
}

/// Round-robin page interleave across capacity-layer banks.
pub fn capacity_page_bank(page: u64, capacity_banks: u32) -> u32 {
    debug_assert!(capacity_banks >= 1);
    (page % capacity_banks as u64) as u32
}

/// The four stack organizations under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackMode {
    /// Capacity layers below PIM compute layers in every stack, managed by
    /// the logic base die.
    Hybrid,
    /// A fixed subset of dies is PIM, the rest standard HBM; evicted KV is
    /// discarded (no compressed staging tier).
    DedicatedPim,
    /// No PIM at all; attention runs on the GPU over streamed KV.
    FullGpu,
    /// Every layer carries PIM, halving density; single tier.
    Uniform,
}

impl StackMode {
    pub fn all() -> [StackMode; 4] {
        [
            StackMode::Hybrid,
            StackMode::DedicatedPim,
            StackMode::FullGpu,
            StackMode::Uniform,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StackMode::Hybrid => "hybrid",
            StackMode::DedicatedPim => "dedicated-pim",
            StackMode::FullGpu => "full-gpu",
            StackMode::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<StackMode> {
        match s {
            "hybrid" => Some(StackMode::Hybrid),
            "dedicated-pim" => Some(StackMode::DedicatedPim),
            "full-gpu" => Some(StackMode::FullGpu),
            "uniform" => Some(StackMode::Uniform),
            _ => None,
        }
    }

    /// Whether attention executes on PIM banks in this organization.
    pub fn has_pim(&self) -> bool {
        !matches!(self, StackMode::FullGpu)
    }

    /// Whether a compressed capacity tier exists for demoted KV.
    pub fn has_capacity_tier(&self) -> bool {
        matches!(self, StackMode::Hybrid)
    }
}

/// Whole-node description: GPUs, stacks per GPU, link bandwidths, and the
/// per-card capacity split between the compute and capacity domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTopology {
    pub gpus: u32,
    pub stacks_per_gpu: u32,
    pub stack: StackConfig,
    /// Inter-card bandwidth, bytes/s per card.
    pub nvlink_bw: f64,
    /// Per-GPU dense FLOP/s.
    pub gpu_flops: f64,
    pub mode: StackMode,
    /// Compute-domain bytes per card (KV adjacent to PIM, or the whole
    /// GPU-visible pool for `full-gpu`).
    pub comp_capacity_per_card: u64,
    /// Capacity-domain bytes per card (dense layers; zero for single-tier
    /// organizations).
    pub cap_capacity_per_card: u64,
}

impl NodeTopology {
    /// Built-in per-mode presets for a DGX-class 8-GPU node with five
    /// stacks per card.
    pub fn preset(mode: StackMode) -> NodeTopology {
        let base_stack = |cap_layers: u32, comp_layers: u32, full: u64, half: u64| StackConfig {
            capacity_layers: cap_layers,
            compute_layers: comp_layers,
            bytes_full_layer: full,
            bytes_half_layer: half,
            pim_banks: 256,
            capacity_banks: 64,
            tsv_bw: 896.0e9,
            ucie_bw: 512.0e9,
            quant_engine_bw: 896.0e9,
        };
        // Per-card domain splits; the per-stack layer counts divide them.
        let (stack, comp, cap) = match mode {
            StackMode::Hybrid => (base_stack(4, 4, 2 * GB, GB), 20 * GB, 40 * GB),
            StackMode::DedicatedPim => {
                (base_stack(4, 4, 800_000_000, 1_600_000_000), 32 * GB, 16 * GB)
            }
            StackMode::FullGpu => (base_stack(8, 0, 2 * GB, 0), 80 * GB, 0),
            StackMode::Uniform => (base_stack(0, 8, 0, GB), 40 * GB, 0),
        };
        NodeTopology {
            gpus: 8,
            stacks_per_gpu: 5,
            stack,
            nvlink_bw: 600.0e9,
            gpu_flops: 312.0e12,
            mode,
            comp_capacity_per_card: comp,
            cap_capacity_per_card: cap,
        }
    }

    pub fn validate(&self) -> Result<(), StackError> {
        if self.gpus == 0 {
            return Err(StackError::NoGpus);
        }
        if self.nvlink_bw <= 0.0 || self.gpu_flops <= 0.0 {
            return Err(StackError::NonPositiveBandwidth);
        }
        self.stack.validate()
    }

    /// GPU-visible HBM bandwidth per card (aggregate over its stacks).
    pub fn hbm_bw_per_card(&self) -> f64 {
        self.stack.ucie_bw * self.stacks_per_gpu as f64
    }

    /// Stack-internal DMA bandwidth per card.
    pub fn tsv_bw_per_card(&self) -> f64 {
        self.stack.tsv_bw * self.stacks_per_gpu as f64
    }

    /// Effective cross-tier bandwidth when the quantization engine sits
    /// inline on the DMA path.
    pub fn quantized_tsv_bw_per_card(&self) -> f64 {
        self.stack.tsv_bw.min(self.stack.quant_engine_bw) * self.stacks_per_gpu as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkPath {
    Tsv,
    Ucie,
    Xbar,
    Nvlink,
}

/// Configured bandwidth of one transfer path, bytes/s.
///
/// TSV and UCIe are per stack; the on-package crossbar defaults to the
/// destination stack's aggregate UCIe; NVLink is per card.
pub fn link_bandwidth(path: LinkPath, topo: &NodeTopology) -> f64 {
    match path {
        LinkPath::Tsv => topo.stack.tsv_bw,
        LinkPath::Ucie => topo.stack.ucie_bw,
        LinkPath::Xbar => topo.stack.ucie_bw,
        LinkPath::Nvlink => topo.nvlink_bw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Compute,
    Capacity,
}

/// Physical address of a KV block as resolved by layered translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalLocation {
    pub card: u32,
    pub stack: u32,
    pub layer_kind: LayerKind,
    pub bank: u32,
    pub page_offset: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("block {0} is not registered in the residency table")]
pub struct TranslateMiss(pub u64);

#[derive(Debug, Clone)]
struct Residency {
    primary: PhysicalLocation,
    replicas: Vec<u32>,
}

/// Per-run table mapping logical block ids to their current physical
/// location. One primary location per block; replicas are extra cards
/// holding read-only copies.
#[derive(Debug, Default)]
pub struct ResidencyTable {
    blocks: BTreeMap<u64, Residency>,
}

impl ResidencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Register or move a block's primary location. Promotion and demotion
    /// both come through here, keeping the logical id unchanged.
    pub fn place(&mut self, block: u64, loc: PhysicalLocation) {
        match self.blocks.get_mut(&block) {
            Some(r) => r.primary = loc,
            None => {
                self.blocks.insert(
                    block,
                    Residency {
                        primary: loc,
                        replicas: Vec::new(),
                    },
                );
            }
        }
    }

    /// A miss means the block must be rebuilt from scratch (prefill
    /// recompute); callers treat it as a signal, not a failure.
    pub fn translate(&self, block: u64) -> Result<PhysicalLocation, TranslateMiss> {
        self.blocks
            .get(&block)
            .map(|r| r.primary)
            .ok_or(TranslateMiss(block))
    }

    pub fn replicas(&self, block: u64) -> &[u32] {
        self.blocks
            .get(&block)
            .map(|r| r.replicas.as_slice())
            .unwrap_or(&[])
    }

    pub fn add_replica(&mut self, block: u64, card: u32) {
        if let Some(r) = self.blocks.get_mut(&block) {
            if !r.replicas.contains(&card) {
                r.replicas.push(card);
            }
        }
    }

    pub fn drop_replica(&mut self, block: u64, card: u32) {
        if let Some(r) = self.blocks.get_mut(&block) {
            r.replicas.retain(|&c| c != card);
        }
    }

    pub fn evict(&mut self, block: u64) {
        self.blocks.remove(&block);
    }
}

/// Per-card KV budgets after the weight shard has been reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CardBudget {
    pub comp_kv: u64,
    pub cap_kv: u64,
}

/// Reserve the tensor-parallel weight shard on each card and return what
/// is left for KV. Weights fill the capacity domain first; a shard larger
/// than the capacity domain overflows into compute layers, and a shard
/// larger than the whole card is an out-of-memory verdict.
pub fn reserve_weights(topo: &NodeTopology, total_weight_bytes: u64) -> Result<CardBudget, StackError> {
    let shard = total_weight_bytes / topo.gpus as u64;
    let comp = topo.comp_capacity_per_card;
    let cap = topo.cap_capacity_per_card;
    if shard >= comp + cap {
        return Err(StackError::WeightsDoNotFit {
            weight_shard: shard,
            total: comp + cap,
        });
    }
    let spill = shard.saturating_sub(cap);
    let comp_kv = comp - spill;
    if comp_kv == 0 {
        return Err(StackError::NoKvSpace);
    }
    Ok(CardBudget {
        comp_kv,
        cap_kv: cap.saturating_sub(shard),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_capacity_formula() {
        let s = StackConfig {
            capacity_layers: 4,
            compute_layers: 4,
            bytes_full_layer: 8 * GB,
            bytes_half_layer: 4 * GB,
            pim_banks: 256,
            capacity_banks: 64,
            tsv_bw: 1.0,
            ucie_bw: 1.0,
            quant_engine_bw: 1.0,
        };
        assert_eq!(s.total_capacity(), 48 * GB);

        let mut pure_hbm = s.clone();
        pure_hbm.compute_layers = 0;
        assert_eq!(pure_hbm.total_capacity(), 32 * GB);
    }

    #[test]
    fn hybrid_preset_splits_per_card() {
        let t = NodeTopology::preset(StackMode::Hybrid);
        assert_eq!(t.comp_capacity_per_card, 20 * GB);
        assert_eq!(t.cap_capacity_per_card, 40 * GB);
        // five stacks of C*full + P*half must reproduce the card totals
        let per_stack = t.stack.total_capacity();
        assert_eq!(
            per_stack * t.stacks_per_gpu as u64,
            t.comp_capacity_per_card + t.cap_capacity_per_card
        );
    }

    #[test]
    fn mode_presets_match_expected_budgets() {
        for (mode, comp, cap) in [
            (StackMode::DedicatedPim, 32 * GB, 16 * GB),
            (StackMode::FullGpu, 80 * GB, 0),
            (StackMode::Uniform, 40 * GB, 0),
        ] {
            let t = NodeTopology::preset(mode);
            assert_eq!((t.comp_capacity_per_card, t.cap_capacity_per_card), (comp, cap));
            t.validate().unwrap();
        }
    }

    #[test]
    fn page_bank_wraps() {
        assert_eq!(capacity_page_bank(0, 64), 0);
        assert_eq!(capacity_page_bank(64, 64), 0);
        assert_eq!(capacity_page_bank(65, 64), 1);
    }

    #[test]
    fn page_interleave_is_balanced() {
        // pages 0..k*B distribute exactly k per bank
        let b_cap = 7u32;
        let k = 13u64;
        let mut counts = vec![0u64; b_cap as usize];
        for p in 0..k * b_cap as u64 {
            counts[capacity_page_bank(p, b_cap) as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == k));
        // any contiguous range differs by at most 1 per bank
        let mut counts = vec![0i64; b_cap as usize];
        for p in 3..3 + 25 {
            counts[capacity_page_bank(p, b_cap) as usize] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1);
    }

    #[test]
    fn link_bandwidths_from_table() {
        let t = NodeTopology::preset(StackMode::Hybrid);
        assert_eq!(link_bandwidth(LinkPath::Tsv, &t), 896.0e9);
        assert_eq!(link_bandwidth(LinkPath::Ucie, &t), 512.0e9);
        assert_eq!(link_bandwidth(LinkPath::Nvlink, &t), 600.0e9);
        assert_eq!(link_bandwidth(LinkPath::Xbar, &t), 512.0e9);
    }

    #[test]
    fn translate_follows_moves_and_misses() {
        let mut table = ResidencyTable::new();
        assert_eq!(table.translate(7), Err(TranslateMiss(7)));

        let cap_loc = PhysicalLocation {
            card: 0,
            stack: 1,
            layer_kind: LayerKind::Capacity,
            bank: capacity_page_bank(5, 64),
            page_offset: 5,
        };
        table.place(7, cap_loc);
        assert_eq!(table.translate(7).unwrap().layer_kind, LayerKind::Capacity);

        // promotion keeps the logical id, changes the physical side
        let comp_loc = PhysicalLocation {
            card: 0,
            stack: 1,
            layer_kind: LayerKind::Compute,
            bank: 3,
            page_offset: 0,
        };
        table.place(7, comp_loc);
        let got = table.translate(7).unwrap();
        assert_eq!(got.layer_kind, LayerKind::Compute);
        assert_eq!(got.bank, 3);

        table.evict(7);
        assert!(table.translate(7).is_err());
    }

    #[test]
    fn one_primary_per_block() {
        let mut table = ResidencyTable::new();
        let loc = |card| PhysicalLocation {
            card,
            stack: 0,
            layer_kind: LayerKind::Compute,
            bank: 0,
            page_offset: 0,
        };
        table.place(1, loc(0));
        table.place(1, loc(2));
        table.add_replica(1, 5);
        table.add_replica(1, 5);
        assert_eq!(table.translate(1).unwrap().card, 2);
        assert_eq!(table.replicas(1), &[5]);
        table.drop_replica(1, 5);
        assert!(table.replicas(1).is_empty());
    }

    #[test]
    fn weight_reservation_and_oom() {
        let weights_175b = 175_000_000_000u64 * 2;
        // single-tier all-PIM card cannot hold the 43.75 GB shard
        let uniform = NodeTopology::preset(StackMode::Uniform);
        assert!(matches!(
            reserve_weights(&uniform, weights_175b),
            Err(StackError::WeightsDoNotFit { .. })
        ));
        // hybrid fits, with the shard overflowing into compute layers
        let hybrid = NodeTopology::preset(StackMode::Hybrid);
        let b = reserve_weights(&hybrid, weights_175b).unwrap();
        assert_eq!(b.cap_kv, 0);
        assert_eq!(b.comp_kv, 20 * GB - 3_750_000_000);
        // a small model leaves the compute domain untouched
        let small = reserve_weights(&hybrid, 8_000_000_000).unwrap();
        assert_eq!(small.comp_kv, 20 * GB);
        assert_eq!(small.cap_kv, 40 * GB - 1_000_000_000);
    }
}
