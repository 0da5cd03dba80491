//! Discrete-event simulation core: continuous batching over a roofline
//! timing model, tier bookkeeping, transfer scheduling, and per-step
//! energy accounting. One call to [`run`] executes a single
//! (model, trace, topology, QPS) cell to completion.
//!
//! Time advances through four event kinds: request arrivals, step
//! completions (one model pass over the current decode batch plus prefill
//! chunks), background-transfer completions, and periodic CDF refits.
//! All state lives in ordered containers, so a run is a pure function of
//! its inputs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::layout::{comm_volumes, select_layout, LayoutMode, LayoutParams};
use crate::metrics::{
    ByteLedger, EnergyBreakdown, HitRates, LatencySummary, PolicyCounters, PolicyEvent,
    PolicyEventKind, RequestRecord, RunMetrics, RunOutcome, TransferTotals,
};
use crate::model::{fc_work, kv_bytes_per_token, ModelConfig, Phase};
use crate::runtime::{
    classify_transfer, fit_category_cdf, prefix_retention, quantized_size, replica_revoke_check,
    replication_gate, BlockMeta, BlockTier, CategoryModel, DemotionQueues, EvictionConfig,
    EvictionPolicy, ReplicaStats, ReplicationConfig, TransferClass, TransferKind,
};
use crate::stack::{
    capacity_page_bank, reserve_weights, LayerKind, LinkPath, NodeTopology, PhysicalLocation,
    ResidencyTable, StackMode,
};
use crate::trace::{blocks_for_tokens, Category, Trace, BLOCK_TOKENS};

/// Latency-model constants. Bandwidths come from the topology; these are
/// the remaining knobs of the analytical timing model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingParams {
    /// Dense FLOP/s per GPU.
    pub gpu_flops: f64,
    /// Per-bank PIM read bandwidth, bytes/s. Aggregate attention bandwidth
    /// per card is banks × stacks × this.
    pub pim_bank_bw: f64,
    /// Base-die collection/reduction bandwidth per stack, bytes/s.
    pub basedie_agg_bw: f64,
    /// PIM MAC throughput per card, FLOP/s.
    pub pim_flops: f64,
    /// Fixed per-request decode-step overhead, seconds.
    pub t_fixed_step: f64,
    /// All-bank/single-bank switch stall per mixed step (uniform stacks).
    pub t_mode_switch: f64,
    /// Fixed cost per promoted block, seconds.
    pub promotion_fixed_latency: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            gpu_flops: 312.0e12,
            pim_bank_bw: 8.0e9,
            basedie_agg_bw: 64.0e9,
            pim_flops: 40.0e12,
            t_fixed_step: 5.0e-6,
            t_mode_switch: 0.5e-6,
            promotion_fixed_latency: 1.5e-6,
        }
    }
}

/// Energy coefficients. Absolute values are illustrative; reported energy
/// comparisons are ratio-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub fc_offchip_pj_per_byte: f64,
    pub attn_offchip_pj_per_byte: f64,
    pub fc_onchip_pj_per_flop: f64,
    pub attn_onchip_pj_per_flop: f64,
    pub tsv_pj_per_byte: f64,
    pub nvlink_pj_per_byte: f64,
    pub quant_pj_per_byte: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            fc_offchip_pj_per_byte: 6.0,
            attn_offchip_pj_per_byte: 6.0,
            fc_onchip_pj_per_flop: 0.8,
            attn_onchip_pj_per_flop: 0.8,
            tsv_pj_per_byte: 1.0,
            nvlink_pj_per_byte: 10.0,
            quant_pj_per_byte: 0.5,
        }
    }
}

const PJ: f64 = 1.0e-12;

/// Scheduler and policy knobs, including the ablation toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub eviction: EvictionConfig,
    pub replication: ReplicationConfig,
    /// Next-turn probability per category, compared against
    /// `retention_threshold` when deciding prefix retention.
    pub next_turn_prob: BTreeMap<Category, f64>,
    pub retention_threshold: f64,
    pub retention_budget_blocks: u32,
    pub chunk_tokens: u32,
    pub step_token_budget: u32,
    pub refit_period_s: f64,
    pub gc_horizon_s: f64,
    /// Resident idle blocks older than this multiple of the category
    /// lifespan are treated as misses at admission.
    pub admission_window_mult: f64,
    pub lambda_max: f64,
    // ablation toggles
    pub layout_aware: bool,
    pub topology_aware_homes: bool,
    pub quantized_demotion: bool,
    pub eviction_policy: EvictionPolicy,
    pub replication_enabled: bool,
    pub forced_layout: Option<LayoutMode>,
    /// Aggregation weight for layout selection; derived from the timing
    /// model when unset.
    pub gamma: Option<f64>,
    pub hysteresis: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let next_turn_prob = [
            (Category::Api, 0.6),
            (Category::Text, 0.5),
            (Category::Code, 0.4),
            (Category::Thinking, 0.05),
        ]
        .into_iter()
        .collect();
        PolicyConfig {
            eviction: EvictionConfig::default(),
            replication: ReplicationConfig::default(),
            next_turn_prob,
            retention_threshold: 0.5,
            retention_budget_blocks: 32,
            chunk_tokens: 512,
            step_token_budget: 2048,
            refit_period_s: 60.0,
            gc_horizon_s: 600.0,
            admission_window_mult: 4.0,
            lambda_max: 1.0e6,
            layout_aware: true,
            topology_aware_homes: true,
            quantized_demotion: true,
            eviction_policy: EvictionPolicy::CategoryAware,
            replication_enabled: true,
            forced_layout: None,
            gamma: None,
            hysteresis: 2.0,
        }
    }
}

impl PolicyConfig {
    /// Baseline organizations run the plain LRU/unique policy suite; only
    /// the hybrid stack gets the full policy set.
    pub fn effective_for(&self, mode: StackMode) -> PolicyConfig {
        let mut p = self.clone();
        if !mode.has_capacity_tier() {
            p.eviction_policy = EvictionPolicy::Lru;
            p.replication_enabled = false;
            p.quantized_demotion = false;
        }
        p
    }
}

/// Everything needed to execute one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub topo: NodeTopology,
    pub policy: PolicyConfig,
    pub timing: TimingParams,
    pub energy: EnergyParams,
    pub seed: u64,
    #[serde(default)]
    pub collect_policy_events: bool,
}

impl RunConfig {
    pub fn new(model: ModelConfig, topo: NodeTopology) -> RunConfig {
        RunConfig {
            model,
            topo,
            policy: PolicyConfig::default(),
            timing: TimingParams::default(),
            energy: EnergyParams::default(),
            seed: 0,
            collect_policy_events: false,
        }
    }
}

/// Duration of a single transfer at the path's configured bandwidth.
/// Quantized cross-tier moves run at min(TSV, quantization-engine)
/// bandwidth; foreground transfers never wait on background traffic.
pub fn transfer_time(bytes: u64, path: LinkPath, quantized: bool, topo: &NodeTopology) -> f64 {
    if bytes == 0 {
        return 0.0;
    }
    let bw = match (path, quantized) {
        (LinkPath::Tsv, true) => topo.stack.tsv_bw.min(topo.stack.quant_engine_bw),
        _ => crate::stack::link_bandwidth(path, topo),
    };
    bytes as f64 / bw
}

/// Byte classification of one request's context for a decode step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResidencyMix {
    /// Compute-resident on the home card (PIM-local).
    pub hot_bytes: u64,
    /// Capacity-resident, streamed through the quantization path.
    pub cold_bytes: u64,
    /// Compute-resident on another card, streamed over NVLink.
    pub remote_bytes: u64,
}

impl ResidencyMix {
    pub fn total(&self) -> u64 {
        self.hot_bytes + self.cold_bytes + self.remote_bytes
    }
}

/// Base-die aggregation traffic for one decode step of one request.
fn aggregation_bytes(layout: LayoutMode, context_len: u64, m: &ModelConfig, banks: u32) -> u64 {
    let p = LayoutParams {
        context_len,
        head_dim: m.head_dim(),
        banks,
        gamma: 1.0,
        hysteresis: 1.0,
    };
    let per_head = comm_volumes(layout, &p).t_agg;
    (per_head * m.dtype_bytes as f64 * m.heads as f64 * m.layers as f64) as u64
}

/// One request's decode-step attention time under the roofline model.
///
/// PIM organizations read hot bytes at bank-aggregate bandwidth, stream
/// capacity-resident bytes through the TSV/quantization path, pull remote
/// bytes over NVLink, and pay the base-die aggregation for their layout.
/// The GPU organization instead streams everything over the HBM interface
/// and computes attention on the GPU.
pub fn decode_attention_time(
    mix: &ResidencyMix,
    layout: LayoutMode,
    context_len: u64,
    m: &ModelConfig,
    topo: &NodeTopology,
    timing: &TimingParams,
) -> f64 {
    if context_len == 0 && mix.total() == 0 {
        return timing.t_fixed_step;
    }
    let flops = mix.total() as f64; // 2 FLOPs per 2-byte element
    let t = if topo.mode.has_pim() {
        let pim_bw =
            timing.pim_bank_bw * topo.stack.pim_banks as f64 * topo.stacks_per_gpu as f64;
        let hot_t = (mix.hot_bytes as f64 / pim_bw).max(flops / timing.pim_flops);
        let agg = aggregation_bytes(layout, context_len, m, topo.stack.pim_banks) as f64;
        let agg_t = agg / (timing.basedie_agg_bw * topo.stacks_per_gpu as f64);
        let cold_t = mix.cold_bytes as f64 / topo.quantized_tsv_bw_per_card();
        let remote_t = mix.remote_bytes as f64 / topo.nvlink_bw;
        hot_t + agg_t + cold_t + remote_t
    } else {
        let local = (mix.hot_bytes + mix.cold_bytes) as f64;
        (local / topo.hbm_bw_per_card()).max(flops / timing.gpu_flops)
            + mix.remote_bytes as f64 / topo.nvlink_bw
    };
    t + timing.t_fixed_step
}

fn time_bits(t: f64) -> u64 {
    debug_assert!(t >= 0.0 && t.is_finite());
    t.to_bits()
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Arrival(usize),
    StepComplete,
    TransferDone { block: u64 },
    Refit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlaceClass {
    Home,
    Cold,
    Remote(u32),
}

#[derive(Debug)]
struct ActiveReq {
    id: u64,
    category: Category,
    arrival: f64,
    home: u32,
    home_stack: u32,
    layout: LayoutMode,
    prompt_len: u32,
    gen_len: u32,
    unique_prompt: Vec<u64>,
    prefill_remaining: u32,
    generated: u32,
    gen_blocks: Vec<u64>,
    gen_plan: Vec<PlaceClass>, // placement class per future gen block
    mix: ResidencyMix,
    first_scheduled: f64,
    ttft: Option<f64>,
    cached_blocks: u32,
}

impl ActiveReq {
    fn context_len(&self) -> u64 {
        self.prompt_len as u64 + self.generated as u64
    }

    fn decoding(&self) -> bool {
        self.prefill_remaining == 0 && self.generated < self.gen_len
    }
}

#[derive(Debug, Default)]
struct Card {
    comp_budget: u64,
    cap_budget: u64,
    comp_used: u64,
    cap_used: u64,
    replica_used: u64,
    queues: DemotionQueues,
    cap_queue: DemotionQueues,
    // foreground transfer work accumulated for the next step
    fg_tsv_bytes: u64,
    fg_nvlink_bytes: u64,
    fg_promo_blocks: u32,
    fg_extra_stall: f64,
}

impl Card {
    fn comp_free(&self) -> u64 {
        self.comp_budget - self.comp_used
    }

    fn cap_free(&self) -> u64 {
        self.cap_budget - self.cap_used
    }
}

#[derive(Debug)]
struct StepPlan {
    decode: Vec<usize>,
    prefill: Vec<(usize, u32)>,
    duration: f64,
    fc_tokens: u64,
    // per-card foreground TSV bytes, for background-rate computation
    fg_tsv: Vec<u64>,
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    policy: PolicyConfig,
    trace: &'a Trace,
    block_bytes: u64,
    gamma: f64,
    now: f64,
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    payloads: BTreeMap<u64, Ev>,
    seq: u64,
    cards: Vec<Card>,
    waiting: VecDeque<usize>,
    active: BTreeMap<usize, ActiveReq>,
    metas: BTreeMap<u64, BlockMeta>,
    pins: BTreeMap<u64, u32>,
    residency: ResidencyTable,
    known_blocks: std::collections::BTreeSet<u64>,
    models: BTreeMap<Category, CategoryModel>,
    reuse_samples: BTreeMap<Category, Vec<f64>>,
    replica_stats: BTreeMap<(u64, u32), ReplicaStats>,
    in_flight: BTreeMap<u64, f64>,
    step: Option<StepPlan>,
    finished: u32,
    rejected: u32,
    // metrics accumulation
    records: Vec<RequestRecord>,
    tbt: Vec<f64>,
    energy: EnergyBreakdown,
    transfers: TransferTotals,
    ledger: ByteLedger,
    counters: PolicyCounters,
    hot_bytes_total: u64,
    cold_bytes_total: u64,
    remote_bytes_total: u64,
    prefix_blocks_seen: u64,
    prefix_blocks_hit: u64,
    generated_tokens: u64,
    steps: u64,
    decode_slot_steps: u64,
    events_log: Option<Vec<PolicyEvent>>,
}

/// Execute one run. Returns an infeasible verdict (not an error) when the
/// weight shard cannot fit the node.
pub fn run(cfg: &RunConfig, trace: &Trace) -> RunOutcome {
    if let Err(e) = cfg.model.validate() {
        return RunOutcome::Infeasible { reason: e.to_string() };
    }
    if let Err(e) = cfg.topo.validate() {
        return RunOutcome::Infeasible { reason: e.to_string() };
    }
    let budget = match reserve_weights(&cfg.topo, cfg.model.weight_bytes()) {
        Ok(b) => b,
        Err(e) => return RunOutcome::Infeasible { reason: e.to_string() },
    };
    if trace.requests.is_empty() {
        return RunOutcome::Completed(empty_metrics());
    }

    let policy = cfg.policy.effective_for(cfg.topo.mode);
    let block_bytes = BLOCK_TOKENS as u64 * kv_bytes_per_token(&cfg.model);
    let pim_card_bw =
        cfg.timing.pim_bank_bw * cfg.topo.stack.pim_banks.max(1) as f64 * cfg.topo.stacks_per_gpu as f64;
    let gamma = policy.gamma.unwrap_or(
        (pim_card_bw / cfg.topo.stack.pim_banks.max(1) as f64)
            / (cfg.timing.basedie_agg_bw * cfg.topo.stacks_per_gpu as f64),
    );

    let cards = (0..cfg.topo.gpus)
        .map(|_| Card {
            comp_budget: budget.comp_kv,
            cap_budget: if cfg.topo.mode.has_capacity_tier() {
                budget.cap_kv
            } else {
                0
            },
            ..Card::default()
        })
        .collect();

    let mut engine = Engine {
        cfg,
        policy,
        trace,
        block_bytes,
        gamma,
        now: 0.0,
        heap: BinaryHeap::new(),
        payloads: BTreeMap::new(),
        seq: 0,
        cards,
        waiting: VecDeque::new(),
        active: BTreeMap::new(),
        metas: BTreeMap::new(),
        pins: BTreeMap::new(),
        residency: ResidencyTable::new(),
        known_blocks: std::collections::BTreeSet::new(),
        models: Category::all()
            .into_iter()
            .map(|c| (c, CategoryModel::default_for(c)))
            .collect(),
        reuse_samples: BTreeMap::new(),
        replica_stats: BTreeMap::new(),
        in_flight: BTreeMap::new(),
        step: None,
        finished: 0,
        rejected: 0,
        records: Vec::with_capacity(trace.requests.len()),
        tbt: Vec::new(),
        energy: EnergyBreakdown::default(),
        transfers: TransferTotals::default(),
        ledger: ByteLedger::default(),
        counters: PolicyCounters::default(),
        hot_bytes_total: 0,
        cold_bytes_total: 0,
        remote_bytes_total: 0,
        prefix_blocks_seen: 0,
        prefix_blocks_hit: 0,
        generated_tokens: 0,
        steps: 0,
        decode_slot_steps: 0,
        events_log: cfg.collect_policy_events.then(Vec::new),
    };
    engine.execute();
    RunOutcome::Completed(engine.finalize())
}

fn empty_metrics() -> RunMetrics {
    RunMetrics {
        per_request: Vec::new(),
        tbt_samples: Vec::new(),
        latency: LatencySummary::default(),
        makespan: 0.0,
        generated_tokens: 0,
        token_throughput: 0.0,
        request_throughput: 0.0,
        completed_requests: 0,
        rejected_requests: 0,
        steps: 0,
        mean_decode_batch: 0.0,
        hit_rates: HitRates::default(),
        energy: EnergyBreakdown::default(),
        energy_per_token_j: 0.0,
        transfers: TransferTotals::default(),
        ledger: ByteLedger::default(),
        counters: PolicyCounters::default(),
        policy_events: None,
    }
}

impl<'a> Engine<'a> {
    fn push_event(&mut self, t: f64, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse((time_bits(t), seq)));
        self.payloads.insert(seq, ev);
    }

    fn log(&mut self, kind: PolicyEventKind, block: u64, card: u32) {
        let t = self.now;
        if let Some(log) = self.events_log.as_mut() {
            log.push(PolicyEvent { t, kind, block, card });
        }
    }

    fn execute(&mut self) {
        for (idx, r) in self.trace.requests.iter().enumerate() {
            self.push_event(r.arrival, Ev::Arrival(idx));
        }
        self.push_event(self.policy.refit_period_s, Ev::Refit);

        while let Some(Reverse((bits, seq))) = self.heap.pop() {
            self.now = f64::from_bits(bits);
            let ev = self.payloads.remove(&seq).expect("event payload");
            match ev {
                Ev::Arrival(idx) => self.on_arrival(idx),
                Ev::StepComplete => self.on_step_complete(),
                Ev::TransferDone { block } => {
                    self.in_flight.remove(&block);
                }
                Ev::Refit => self.on_refit(),
            }
            #[cfg(debug_assertions)]
            self.check_capacity_invariant();
        }
    }

    #[cfg(debug_assertions)]
    fn check_capacity_invariant(&self) {
        for (i, c) in self.cards.iter().enumerate() {
            debug_assert!(
                c.comp_used <= c.comp_budget,
                "card {i} compute tier over budget: {} > {}",
                c.comp_used,
                c.comp_budget
            );
            debug_assert!(c.cap_used <= c.cap_budget, "card {i} capacity tier over budget");
        }
    }

    fn node_kv_budget(&self) -> u64 {
        self.cards.iter().map(|c| c.comp_budget + c.cap_budget).sum()
    }

    fn on_arrival(&mut self, idx: usize) {
        let req = &self.trace.requests[idx];
        let need = (req.block_ids.len() + blocks_for_tokens(req.gen_len)) as u64 * self.block_bytes;
        if need > self.node_kv_budget() {
            self.rejected += 1;
            self.check_done();
            return;
        }
        self.waiting.push_back(idx);
        if self.step.is_none() {
            self.schedule_step();
        }
    }

    fn on_refit(&mut self) {
        // refit category CDFs from the window's inter-reuse samples
        let samples = std::mem::take(&mut self.reuse_samples);
        for (cat, s) in samples {
            let prior = self.models[&cat];
            let fitted = fit_category_cdf(&prior, &s, self.policy.lambda_max);
            if fitted != prior {
                self.counters.cdf_refits += 1;
            }
            self.models.insert(cat, fitted);
        }

        // revoke replicas whose window went quiet
        let stats = std::mem::take(&mut self.replica_stats);
        for ((block, card), s) in stats {
            if self.residency.replicas(block).contains(&card) {
                if replica_revoke_check(&s, &self.policy.replication) {
                    self.residency.drop_replica(block, card);
                    let bytes = self.metas.get(&block).map(|m| m.bytes_fp16 as u64).unwrap_or(0);
                    let c = &mut self.cards[card as usize];
                    c.replica_used = c.replica_used.saturating_sub(bytes);
                    c.comp_used = c.comp_used.saturating_sub(bytes);
                    self.counters.revocations += 1;
                    self.log(PolicyEventKind::Revoke, block, card);
                } else {
                    self.replica_stats.insert((block, card), ReplicaStats::default());
                }
            }
        }

        // garbage-collect capacity blocks past the horizon
        let horizon = self.policy.gc_horizon_s;
        for card_idx in 0..self.cards.len() {
            loop {
                let victim = {
                    let card = &self.cards[card_idx];
                    let mut pick = None;
                    for (&b, m) in self.metas.iter() {
                        if m.tier == BlockTier::Capacity
                            && m.home_card as usize == card_idx
                            && self.now - m.t_last > horizon
                            && card.cap_queue.contains(b)
                        {
                            pick = Some(b);
                            break;
                        }
                    }
                    pick
                };
                match victim {
                    Some(b) => self.discard_capacity_block(b, card_idx as u32, true),
                    None => break,
                }
            }
        }

        if (self.finished + self.rejected) < self.trace.requests.len() as u32 {
            self.push_event(self.now + self.policy.refit_period_s, Ev::Refit);
        }
    }

    // ---- block state transitions -------------------------------------

    fn pin(&mut self, block: u64) {
        let count = self.pins.entry(block).or_insert(0);
        *count += 1;
        if *count == 1 {
            if let Ok(loc) = self.residency.translate(block) {
                let card = &mut self.cards[loc.card as usize];
                card.queues.remove(block);
                card.cap_queue.remove(block);
            }
        }
    }

    fn unpin(&mut self, block: u64) {
        let count = self.pins.get_mut(&block).expect("unpin without pin");
        *count -= 1;
        if *count == 0 {
            self.pins.remove(&block);
            let Some(meta) = self.metas.get(&block) else { return };
            let (cat, t_last, tier) = (meta.category, meta.t_last, meta.tier);
            if let Ok(loc) = self.residency.translate(block) {
                let card = &mut self.cards[loc.card as usize];
                match tier {
                    BlockTier::Compute => card.queues.push(block, cat, t_last),
                    BlockTier::Capacity => card.cap_queue.push(block, cat, t_last),
                    BlockTier::Evicted => {}
                }
            }
        }
    }

    fn compute_location(&self, card: u32, stack: u32, block: u64) -> PhysicalLocation {
        PhysicalLocation {
            card,
            stack,
            layer_kind: LayerKind::Compute,
            bank: crate::layout::key_bank(block, self.cfg.topo.stack.pim_banks.max(1)),
            page_offset: 0,
        }
    }

    fn capacity_location(&self, card: u32, stack: u32, block: u64) -> PhysicalLocation {
        PhysicalLocation {
            card,
            stack,
            layer_kind: LayerKind::Capacity,
            bank: capacity_page_bank(block, self.cfg.topo.stack.capacity_banks.max(1)),
            page_offset: block,
        }
    }

    /// Create a fresh compute-resident block.
    fn materialize_block(
        &mut self,
        block: u64,
        category: Category,
        card: u32,
        stack: u32,
        offset_tokens: u32,
        charge: bool,
    ) {
        if charge {
            self.cards[card as usize].comp_used += self.block_bytes;
        }
        self.known_blocks.insert(block);
        self.metas.insert(
            block,
            BlockMeta::new(category, card as u8, stack as u8, offset_tokens, self.block_bytes as u32, self.now),
        );
        self.residency.place(block, self.compute_location(card, stack, block));
    }

    /// Create a fresh capacity-resident (cold) block.
    fn materialize_cold_block(
        &mut self,
        block: u64,
        category: Category,
        card: u32,
        stack: u32,
        offset_tokens: u32,
        charge: bool,
    ) {
        let q = self.cold_block_size();
        if charge {
            self.cards[card as usize].cap_used += q;
        }
        self.known_blocks.insert(block);
        let mut meta = BlockMeta::new(category, card as u8, stack as u8, offset_tokens, self.block_bytes as u32, self.now);
        meta.tier = BlockTier::Capacity;
        meta.quantized = self.policy.quantized_demotion;
        self.metas.insert(block, meta);
        self.residency.place(block, self.capacity_location(card, stack, block));
    }

    fn cold_block_size(&self) -> u64 {
        if self.policy.quantized_demotion {
            quantized_size(self.block_bytes)
        } else {
            self.block_bytes
        }
    }

    fn stored_capacity_size(&self, meta: &BlockMeta) -> u64 {
        if meta.quantized {
            quantized_size(meta.bytes_fp16 as u64)
        } else {
            meta.bytes_fp16 as u64
        }
    }

    /// Demote one compute block to the capacity tier (K8V4 inline), or
    /// discard it when no capacity tier exists.
    fn demote_block(&mut self, block: u64, card_idx: u32) {
        let meta = self.metas[&block];
        let fp16 = meta.bytes_fp16 as u64;
        if !self.cfg.topo.mode.has_capacity_tier() {
            self.evict_block(block, card_idx);
            return;
        }
        let stored = if self.policy.quantized_demotion {
            quantized_size(fp16)
        } else {
            fp16
        };
        // make room in the capacity tier, discarding LRU cold blocks
        while self.cards[card_idx as usize].cap_free() < stored {
            let victim = {
                let card = &mut self.cards[card_idx as usize];
                card.cap_queue
                    .pop_victim(EvictionPolicy::Lru, self.now, &self.metas, &self.models)
            };
            match victim {
                Some(v) => self.discard_capacity_block_inner(v, card_idx, false),
                None => {
                    // nowhere to stage it; drop entirely
                    self.evict_block(block, card_idx);
                    return;
                }
            }
        }
        {
            let card = &mut self.cards[card_idx as usize];
            card.comp_used -= fp16;
            card.cap_used += stored;
        }
        let stack = meta.home_stack as u32;
        let mut new_meta = meta;
        new_meta.tier = BlockTier::Capacity;
        new_meta.quantized = self.policy.quantized_demotion;
        self.metas.insert(block, new_meta);
        self.residency.place(block, self.capacity_location(card_idx, stack, block));
        self.cards[card_idx as usize]
            .cap_queue
            .push(block, meta.category, meta.t_last);
        self.ledger.demoted_fp16 += fp16;
        self.counters.demotions += 1;
        debug_assert_eq!(classify_transfer(TransferKind::Demotion), TransferClass::Background);
        self.transfers.tsv_background_bytes += fp16;
        self.energy.communication_j += fp16 as f64 * self.cfg.energy.tsv_pj_per_byte * PJ;
        if self.policy.quantized_demotion {
            self.energy.communication_j += fp16 as f64 * self.cfg.energy.quant_pj_per_byte * PJ;
        }
        let done = self.now + fp16 as f64 / self.background_tsv_rate(card_idx);
        self.in_flight.insert(block, done);
        self.push_event(done, Ev::TransferDone { block });
        self.log(PolicyEventKind::Demote, block, card_idx);
    }

    /// Background demotions only get bandwidth left over by foreground
    /// transfers in the current step window.
    fn background_tsv_rate(&self, card_idx: u32) -> f64 {
        let full = self.cfg.topo.quantized_tsv_bw_per_card();
        if let Some(plan) = &self.step {
            if plan.duration > 0.0 {
                let fg = plan.fg_tsv[card_idx as usize] as f64;
                let frac = (fg / (full * plan.duration)).min(0.95);
                return full * (1.0 - frac);
            }
        }
        full
    }

    /// Discard a compute-resident block outright (no staging tier).
    fn evict_block(&mut self, block: u64, card_idx: u32) {
        let meta = self.metas.remove(&block).expect("evict unknown block");
        debug_assert_eq!(meta.tier, BlockTier::Compute);
        let card = &mut self.cards[card_idx as usize];
        card.comp_used -= meta.bytes_fp16 as u64;
        card.queues.remove(block);
        self.residency.evict(block);
        self.counters.evictions += 1;
        self.log(PolicyEventKind::Evict, block, card_idx);
    }

    fn discard_capacity_block(&mut self, block: u64, card_idx: u32, gc: bool) {
        self.discard_capacity_block_inner(block, card_idx, gc);
    }

    fn discard_capacity_block_inner(&mut self, block: u64, card_idx: u32, gc: bool) {
        let meta = self.metas.remove(&block).expect("discard unknown block");
        debug_assert_eq!(meta.tier, BlockTier::Capacity);
        let stored = self.stored_capacity_size(&meta);
        let card = &mut self.cards[card_idx as usize];
        card.cap_used -= stored;
        card.cap_queue.remove(block);
        self.residency.evict(block);
        self.ledger.gc_fp16 += meta.bytes_fp16 as u64;
        self.counters.gc_blocks += 1;
        if gc {
            self.log(PolicyEventKind::Gc, block, card_idx);
        }
    }

    /// Promote a capacity-resident block to the home card's compute tier.
    /// Foreground: the admitting request stalls on it.
    fn promote_block(&mut self, block: u64, home: u32, home_stack: u32) {
        let meta = self.metas[&block];
        let stored = self.stored_capacity_size(&meta);
        let fp16 = meta.bytes_fp16 as u64;
        let src_card = meta.home_card as u32;
        {
            let src = &mut self.cards[src_card as usize];
            src.cap_used -= stored;
            src.cap_queue.remove(block);
        }
        let dst = &mut self.cards[home as usize];
        dst.comp_used += fp16;
        dst.fg_tsv_bytes += fp16;
        dst.fg_promo_blocks += 1;
        if let Some(done) = self.in_flight.get(&block) {
            // demotion DMA still draining; the promotion waits behind it
            dst.fg_extra_stall += (done - self.now).max(0.0);
        }
        if src_card != home {
            dst.fg_nvlink_bytes += fp16;
        }
        let mut new_meta = meta;
        new_meta.tier = BlockTier::Compute;
        new_meta.quantized = false;
        new_meta.home_card = home as u8;
        new_meta.home_stack = home_stack as u8;
        new_meta.t_last = self.now;
        self.metas.insert(block, new_meta);
        self.residency
            .place(block, self.compute_location(home, home_stack, block));
        self.ledger.promoted_fp16 += fp16;
        self.counters.promotions += 1;
        self.transfers.tsv_foreground_bytes += fp16;
        self.energy.communication_j += fp16 as f64 * self.cfg.energy.tsv_pj_per_byte * PJ;
        if meta.quantized {
            self.energy.communication_j += fp16 as f64 * self.cfg.energy.quant_pj_per_byte * PJ;
        }
        self.log(PolicyEventKind::Promote, block, home);
    }

    /// Free idle compute blocks on a card until `free_target` bytes are
    /// available (or the queues drain).
    fn make_room(&mut self, card_idx: u32, free_target: u64) {
        while self.cards[card_idx as usize].comp_free() < free_target {
            let victim = {
                let card = &mut self.cards[card_idx as usize];
                card.queues
                    .pop_victim(self.policy.eviction_policy, self.now, &self.metas, &self.models)
            };
            match victim {
                Some(v) => self.demote_block(v, card_idx),
                None => break,
            }
        }
    }

    /// Water-mark demotion loop: when compute occupancy exceeds θ_hi,
    /// demote queue victims until it drops to θ_lo (or queues drain).
    fn run_demotion(&mut self, card_idx: u32) {
        let (hi, lo) = {
            let c = &self.cards[card_idx as usize];
            (
                (self.policy.eviction.theta_hi * c.comp_budget as f64) as u64,
                (self.policy.eviction.theta_lo * c.comp_budget as f64) as u64,
            )
        };
        if self.cards[card_idx as usize].comp_used <= hi {
            return;
        }
        while self.cards[card_idx as usize].comp_used > lo {
            let victim = {
                let card = &mut self.cards[card_idx as usize];
                card.queues
                    .pop_victim(self.policy.eviction_policy, self.now, &self.metas, &self.models)
            };
            match victim {
                Some(v) => self.demote_block(v, card_idx),
                None => break,
            }
        }
    }

    // ---- admission ----------------------------------------------------

    fn admission_window(&self, category: Category) -> f64 {
        self.policy.admission_window_mult * self.models[&category].lifespan
    }

    fn try_admit(&mut self, idx: usize) -> bool {
        let req = &self.trace.requests[idx];
        let block_ids: Vec<u64> = req.block_ids.clone();
        let category = req.category;
        let gen_len = req.gen_len;
        let prompt_len = req.prompt_len;
        let arrival = req.arrival;
        let id = req.id;
        let turn = req.turn;
        let _ = turn;

        // home assignment from compute-resident prefix blocks
        let occupancy: Vec<u64> = self.cards.iter().map(|c| c.comp_used).collect();
        let home = if self.policy.topology_aware_homes {
            let mut resident = BTreeMap::new();
            for &b in &block_ids {
                if let Ok(loc) = self.residency.translate(b) {
                    if loc.layer_kind == LayerKind::Compute {
                        resident.insert(b, loc.card);
                    }
                }
            }
            crate::runtime::assign_home(
                &block_ids,
                &resident,
                &occupancy,
                self.cfg.topo.stacks_per_gpu,
            )
        } else {
            let card = occupancy
                .iter()
                .enumerate()
                .min_by(|(ia, a), (ib, b)| a.cmp(b).then(ia.cmp(ib)))
                .map(|(i, _)| i as u32)
                .unwrap_or(0);
            (card, 0)
        };
        let (home_card, home_stack) = home;

        // classify prompt blocks (first occurrence only); hits are pinned
        // right away so room-making below cannot steal them
        let mut seen = std::collections::BTreeSet::new();
        let mut hits_hot = Vec::new(); // compute-resident, home or replica-on-home
        let mut hits_remote = Vec::new(); // compute-resident on another card
        let mut hits_capacity = Vec::new(); // capacity-resident
        let mut misses = Vec::new(); // (block, offset) to recompute
        let window = self.admission_window(category);
        for (i, &b) in block_ids.iter().enumerate() {
            if !seen.insert(b) {
                continue;
            }
            let offset = i as u32 * BLOCK_TOKENS;
            match self.residency.translate(b) {
                Ok(loc) => {
                    let idle_pinned = self.pins.contains_key(&b);
                    let stale = !idle_pinned && self.now - self.metas[&b].t_last > window;
                    if stale {
                        // outside the category's admission window: drop and recompute
                        match loc.layer_kind {
                            LayerKind::Compute => self.evict_block(b, loc.card),
                            LayerKind::Capacity => self.discard_capacity_block(b, loc.card, false),
                        }
                        misses.push((b, offset));
                        continue;
                    }
                    self.pin(b);
                    match loc.layer_kind {
                        LayerKind::Compute => {
                            if loc.card == home_card
                                || self.residency.replicas(b).contains(&home_card)
                            {
                                hits_hot.push(b);
                            } else {
                                hits_remote.push(b);
                            }
                        }
                        LayerKind::Capacity => hits_capacity.push(b),
                    }
                }
                Err(_) => misses.push((b, offset)),
            }
        }

        // space demand on the home card: capacity hits promote, misses
        // materialize, and the whole generation is reserved up front
        let gen_blocks_total = blocks_for_tokens(gen_len) as u64;
        let need_blocks = hits_capacity.len() as u64 + misses.len() as u64 + gen_blocks_total;
        self.make_room(home_card, need_blocks * self.block_bytes);

        // feasibility: everything must land somewhere (home compute, home
        // capacity as cold, or a remote card's compute)
        let home_free = self.cards[home_card as usize].comp_free();
        let cap_free_blocks = if self.cfg.topo.mode.has_capacity_tier() {
            self.cards[home_card as usize].cap_free() / self.cold_block_size()
        } else {
            0
        };
        let remote_free_blocks: u64 = self
            .cards
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != home_card as usize)
            .map(|(_, c)| c.comp_free() / self.block_bytes)
            .sum();
        if need_blocks > home_free / self.block_bytes + cap_free_blocks + remote_free_blocks {
            // back out; the request retries once space drains
            for &b in hits_hot.iter().chain(&hits_remote).chain(&hits_capacity) {
                self.unpin(b);
            }
            return false;
        }

        let mut mix = ResidencyMix::default();
        let cached_blocks =
            (hits_hot.len() + hits_remote.len() + hits_capacity.len()) as u32;
        self.prefix_blocks_seen += seen.len() as u64;
        self.prefix_blocks_hit += cached_blocks as u64;

        // refresh metadata and sample inter-reuse gaps for the CDF fits
        for &b in hits_hot.iter().chain(&hits_remote).chain(&hits_capacity) {
            let meta = self.metas.get_mut(&b).expect("hit block has meta");
            let gap = self.now - meta.t_last;
            if gap > 0.0 {
                self.reuse_samples.entry(category).or_default().push(gap);
            }
            meta.t_last = self.now;
        }
        for &b in &hits_hot {
            // served by a replica: one callback eliminated
            if self.residency.translate(b).map(|l| l.card) != Ok(home_card) {
                let s = self.replica_stats.entry((b, home_card)).or_default();
                s.eliminated_callbacks += 1;
                s.window_accesses += 1;
            }
            mix.hot_bytes += self.block_bytes;
        }

        // remote compute hits: one foreground callback gathers the block,
        // and decode keeps streaming it over NVLink unless the three-gate
        // test grants it a replica in the requester's reserve
        for &b in &hits_remote {
            let meta = self.metas.get_mut(&b).expect("remote block meta");
            meta.note_remote_hit(home_card as u8);
            let meta_snapshot = *meta;
            self.counters.callbacks += 1;
            self.cards[home_card as usize].fg_nvlink_bytes += self.block_bytes;
            self.transfers.nvlink_foreground_bytes += self.block_bytes;
            self.energy.attn_offchip_j +=
                self.block_bytes as f64 * self.cfg.energy.attn_offchip_pj_per_byte * PJ;
            self.log(PolicyEventKind::Callback, b, home_card);

            let mut replicated = false;
            if self.policy.replication_enabled
                && replication_gate(&meta_snapshot, &self.policy.replication)
                && !self.residency.replicas(b).contains(&home_card)
            {
                let reserve_cap = (self.policy.replication.reserve_fraction
                    * self.cards[home_card as usize].comp_budget as f64)
                    as u64;
                let card = &mut self.cards[home_card as usize];
                if card.replica_used + self.block_bytes <= reserve_cap
                    && card.comp_free() >= self.block_bytes
                {
                    card.replica_used += self.block_bytes;
                    card.comp_used += self.block_bytes;
                    self.residency.add_replica(b, home_card);
                    self.replica_stats.insert((b, home_card), ReplicaStats::default());
                    self.counters.replications += 1;
                    self.transfers.nvlink_background_bytes += self.block_bytes;
                    self.energy.communication_j +=
                        self.block_bytes as f64 * self.cfg.energy.nvlink_pj_per_byte * PJ;
                    self.log(PolicyEventKind::Replicate, b, home_card);
                    replicated = true;
                }
            }
            if replicated {
                mix.hot_bytes += self.block_bytes;
            } else {
                mix.remote_bytes += self.block_bytes;
            }
        }

        // capacity hits: promote when the home card has room, else stream cold
        for &b in &hits_capacity {
            if self.cards[home_card as usize].comp_free() >= self.block_bytes {
                self.promote_block(b, home_card, home_stack);
                mix.hot_bytes += self.block_bytes;
            } else {
                mix.cold_bytes += self.block_bytes;
            }
        }

        // misses: recompute via prefill; place home, then cold, then remote
        let mut recompute_tokens = 0u32;
        for &(b, offset) in &misses {
            recompute_tokens += BLOCK_TOKENS.min(prompt_len.saturating_sub(offset));
            if self.known_blocks.contains(&b) {
                self.counters.recomputed_blocks += 1;
            }
            let placed_home = self.cards[home_card as usize].comp_free() >= self.block_bytes;
            if placed_home {
                self.materialize_block(b, category, home_card, home_stack, offset, true);
                mix.hot_bytes += self.block_bytes;
            } else if self.cfg.topo.mode.has_capacity_tier()
                && self.cards[home_card as usize].cap_free() >= self.cold_block_size()
            {
                self.materialize_cold_block(b, category, home_card, home_stack, offset, true);
                mix.cold_bytes += self.block_bytes;
            } else {
                let target = self
                    .cards
                    .iter()
                    .enumerate()
                    .filter(|(i, c)| {
                        *i != home_card as usize && c.comp_free() >= self.block_bytes
                    })
                    .max_by_key(|(i, c)| (c.comp_free(), usize::MAX - *i))
                    .map(|(i, _)| i as u32)
                    .expect("feasibility checked above");
                self.materialize_block(b, category, target, 0, offset, true);
                mix.remote_bytes += self.block_bytes;
            }
            self.pin(b);
        }

        // reserve space for generated KV up front, same placement order
        let mut gen_plan = Vec::with_capacity(gen_blocks_total as usize);
        for _ in 0..gen_blocks_total {
            if self.cards[home_card as usize].comp_free() >= self.block_bytes {
                self.cards[home_card as usize].comp_used += self.block_bytes;
                gen_plan.push(PlaceClass::Home);
            } else if self.cfg.topo.mode.has_capacity_tier()
                && self.cards[home_card as usize].cap_free() >= self.cold_block_size()
            {
                self.cards[home_card as usize].cap_used += self.cold_block_size();
                gen_plan.push(PlaceClass::Cold);
            } else {
                let target = self
                    .cards
                    .iter()
                    .enumerate()
                    .filter(|(i, c)| {
                        *i != home_card as usize && c.comp_free() >= self.block_bytes
                    })
                    .max_by_key(|(i, c)| (c.comp_free(), usize::MAX - *i))
                    .map(|(i, _)| i as u32)
                    .expect("feasibility checked above");
                self.cards[target as usize].comp_used += self.block_bytes;
                gen_plan.push(PlaceClass::Remote(target));
            }
        }

        let layout = if let Some(forced) = self.policy.forced_layout {
            forced
        } else if !self.policy.layout_aware {
            LayoutMode::TmTm // naive append order for both K and V
        } else {
            select_layout(&LayoutParams {
                context_len: prompt_len as u64,
                head_dim: self.cfg.model.head_dim(),
                banks: self.cfg.topo.stack.pim_banks.max(1),
                gamma: self.gamma,
                hysteresis: self.policy.hysteresis,
            })
        };

        let unique_prompt: Vec<u64> = seen.into_iter().collect();
        self.active.insert(
            idx,
            ActiveReq {
                id,
                category,
                arrival,
                home: home_card,
                home_stack,
                layout,
                prompt_len,
                gen_len,
                unique_prompt,
                prefill_remaining: recompute_tokens,
                generated: 0,
                gen_blocks: Vec::new(),
                gen_plan,
                mix,
                first_scheduled: self.now,
                ttft: None,
                cached_blocks,
            },
        );
        true
    }

    // ---- step scheduling ----------------------------------------------

    fn schedule_step(&mut self) {
        if self.step.is_some() {
            return;
        }
        // admit matured arrivals FCFS; stop at the first that cannot fit
        while let Some(&idx) = self.waiting.front() {
            if self.trace.requests[idx].arrival > self.now {
                break;
            }
            if self.try_admit(idx) {
                self.waiting.pop_front();
            } else {
                break;
            }
        }

        let mut budget = self.policy.step_token_budget as i64;
        let mut decode = Vec::new();
        let mut prefill = Vec::new();
        for (&idx, req) in self.active.iter() {
            if budget <= 0 {
                break;
            }
            if req.decoding() {
                decode.push(idx);
                budget -= 1;
            }
        }
        for (&idx, req) in self.active.iter() {
            if budget <= 0 {
                break;
            }
            if req.prefill_remaining > 0 {
                let chunk = self
                    .policy
                    .chunk_tokens
                    .min(req.prefill_remaining)
                    .min(budget as u32);
                prefill.push((idx, chunk));
                budget -= chunk as i64;
            }
        }

        let has_fg = self
            .cards
            .iter()
            .any(|c| c.fg_tsv_bytes > 0 || c.fg_nvlink_bytes > 0 || c.fg_extra_stall > 0.0);
        if decode.is_empty() && prefill.is_empty() && !has_fg {
            return; // idle until the next arrival or transfer event
        }

        // node-wide FC pass over every token in the step
        let fc_tokens: u64 =
            decode.len() as u64 + prefill.iter().map(|&(_, t)| t as u64).sum::<u64>();
        let fc_time = if fc_tokens > 0 {
            let work = fc_work(&self.cfg.model, fc_tokens, Phase::Decode).expect("tokens > 0");
            let flops_t =
                work.flops as f64 / (self.cfg.topo.gpus as f64 * self.cfg.timing.gpu_flops);
            let shard = work.weight_bytes as f64 / self.cfg.topo.gpus as f64;
            flops_t.max(shard / self.cfg.topo.hbm_bw_per_card())
        } else {
            0.0
        };

        // per-card attention plus pending foreground transfers
        let n_cards = self.cards.len();
        let mut attn = vec![0.0f64; n_cards];
        let mut fg_tsv = vec![0u64; n_cards];
        let mut attn_flops = 0.0f64;
        let mut step_energy = EnergyBreakdown::default();
        for &idx in &decode {
            let req = &self.active[&idx];
            let mix = req.mix;
            attn[req.home as usize] += decode_attention_time(
                &mix,
                req.layout,
                req.context_len(),
                &self.cfg.model,
                &self.cfg.topo,
                &self.cfg.timing,
            );
            attn_flops += mix.total() as f64;
            // byte accounting for hit rates and energy
            self.hot_bytes_total += mix.hot_bytes;
            self.cold_bytes_total += mix.cold_bytes;
            self.remote_bytes_total += mix.remote_bytes;
            self.transfers.tsv_stream_bytes += mix.cold_bytes;
            let agg = aggregation_bytes(
                req.layout,
                req.context_len(),
                &self.cfg.model,
                self.cfg.topo.stack.pim_banks.max(1),
            );
            if self.cfg.topo.mode.has_pim() {
                self.transfers.basedie_agg_bytes += agg;
                step_energy.communication_j += (mix.cold_bytes + agg) as f64
                    * self.cfg.energy.tsv_pj_per_byte
                    * PJ;
                if self.policy.quantized_demotion {
                    step_energy.communication_j +=
                        mix.cold_bytes as f64 * self.cfg.energy.quant_pj_per_byte * PJ;
                }
                step_energy.attn_offchip_j += mix.remote_bytes as f64
                    * self.cfg.energy.attn_offchip_pj_per_byte
                    * PJ;
            } else {
                self.transfers.ucie_attention_bytes += mix.total();
                step_energy.attn_offchip_j +=
                    mix.total() as f64 * self.cfg.energy.attn_offchip_pj_per_byte * PJ;
            }
        }
        for (i, card) in self.cards.iter_mut().enumerate() {
            let mut t = attn[i];
            if card.fg_tsv_bytes > 0 {
                t += card.fg_tsv_bytes as f64 / self.cfg.topo.quantized_tsv_bw_per_card();
            }
            if card.fg_nvlink_bytes > 0 {
                t += card.fg_nvlink_bytes as f64 / self.cfg.topo.nvlink_bw;
            }
            t += card.fg_promo_blocks as f64 * self.cfg.timing.promotion_fixed_latency;
            t += card.fg_extra_stall;
            if self.cfg.topo.mode == StackMode::Uniform && !decode.is_empty() && fc_tokens > 0 {
                t += self.cfg.timing.t_mode_switch;
            }
            fg_tsv[i] = card.fg_tsv_bytes;
            card.fg_tsv_bytes = 0;
            card.fg_nvlink_bytes = 0;
            card.fg_promo_blocks = 0;
            card.fg_extra_stall = 0.0;
            attn[i] = t;
        }
        let attn_time = attn.iter().copied().fold(0.0, f64::max);
        let duration = fc_time + attn_time;

        // FC energy: one weight pass shared by the whole batch
        if fc_tokens > 0 {
            let work = fc_work(&self.cfg.model, fc_tokens, Phase::Decode).unwrap();
            step_energy.fc_offchip_j +=
                work.weight_bytes as f64 * self.cfg.energy.fc_offchip_pj_per_byte * PJ;
            step_energy.fc_onchip_j +=
                work.flops as f64 * self.cfg.energy.fc_onchip_pj_per_flop * PJ;
        }
        step_energy.attn_onchip_j += attn_flops * self.cfg.energy.attn_onchip_pj_per_flop * PJ;
        self.energy.add(&step_energy);

        self.steps += 1;
        self.decode_slot_steps += decode.len() as u64;
        let plan = StepPlan {
            decode,
            prefill,
            duration,
            fc_tokens,
            fg_tsv,
        };
        let t_done = self.now + plan.duration;
        self.step = Some(plan);
        self.push_event(t_done, Ev::StepComplete);
    }

    fn on_step_complete(&mut self) {
        let plan = self.step.take().expect("step completion without a plan");
        let mut completed = Vec::new();

        for &(idx, tokens) in &plan.prefill {
            let req = self.active.get_mut(&idx).expect("prefill req active");
            req.prefill_remaining -= tokens;
        }
        // requests whose prefill just drained produce their first token now
        for (&idx, req) in self.active.iter_mut() {
            if req.prefill_remaining == 0 && req.ttft.is_none() {
                req.ttft = Some(self.now - req.arrival);
                req.generated = 1;
                self.generated_tokens += 1;
                self.tbt.push(0.0); // first token lands with prefill
                if req.generated >= req.gen_len {
                    completed.push(idx);
                }
                let _ = plan.fc_tokens;
            }
        }
        for &idx in &plan.decode {
            let req = self.active.get_mut(&idx).expect("decode req active");
            if req.generated == 0 || req.generated >= req.gen_len {
                continue;
            }
            req.generated += 1;
            self.generated_tokens += 1;
            self.tbt.push(plan.duration);
            if req.generated >= req.gen_len && !completed.contains(&idx) {
                completed.push(idx);
            }
        }

        // materialize generation blocks as token boundaries cross
        let active_ids: Vec<usize> = plan
            .decode
            .iter()
            .copied()
            .chain(completed.iter().copied())
            .collect();
        for idx in active_ids {
            self.materialize_gen_blocks(idx);
        }

        completed.sort_unstable();
        completed.dedup();
        for idx in completed {
            self.complete_request(idx);
        }

        for card_idx in 0..self.cards.len() as u32 {
            self.run_demotion(card_idx);
        }
        self.schedule_step();
        self.check_done();
    }

    fn materialize_gen_blocks(&mut self, idx: usize) {
        let (done, want, home, home_stack, category, generated) = {
            let Some(req) = self.active.get(&idx) else { return };
            (
                req.gen_blocks.len(),
                blocks_for_tokens(req.generated),
                req.home,
                req.home_stack,
                req.category,
                req.generated,
            )
        };
        let _ = generated;
        for k in done..want {
            let req = self.active.get(&idx).unwrap();
            let class = req.gen_plan[k];
            let block = crate::trace::gen_block_id(req.id, k as u64);
            let offset = req.prompt_len + k as u32 * BLOCK_TOKENS;
            match class {
                PlaceClass::Home => {
                    self.materialize_block(block, category, home, home_stack, offset, false);
                    self.active.get_mut(&idx).unwrap().mix.hot_bytes += self.block_bytes;
                }
                PlaceClass::Cold => {
                    self.materialize_cold_block(block, category, home, home_stack, offset, false);
                    self.active.get_mut(&idx).unwrap().mix.cold_bytes += self.block_bytes;
                }
                PlaceClass::Remote(card) => {
                    self.materialize_block(block, category, card, 0, offset, false);
                    self.active.get_mut(&idx).unwrap().mix.remote_bytes += self.block_bytes;
                }
            }
            self.pin(block);
            self.active.get_mut(&idx).unwrap().gen_blocks.push(block);
        }
    }

    fn complete_request(&mut self, idx: usize) {
        let req = self.active.remove(&idx).expect("completing inactive request");
        let e2e = self.now - req.arrival;
        self.records.push(RequestRecord {
            id: req.id,
            category: req.category,
            arrival: req.arrival,
            queue_delay: req.first_scheduled - req.arrival,
            ttft: req.ttft.unwrap_or(e2e),
            e2e,
            gen_tokens: req.generated,
            prompt_blocks: req.unique_prompt.len() as u32,
            cached_prompt_blocks: req.cached_blocks,
        });
        self.finished += 1;

        // generated KV is private to the request: release it
        for (k, &block) in req.gen_blocks.iter().enumerate() {
            self.unpin(block);
            let meta = self.metas.remove(&block).expect("gen block meta");
            self.residency.evict(block);
            let card = meta.home_card as usize;
            match req.gen_plan[k] {
                PlaceClass::Cold => {
                    let stored = self.stored_capacity_size(&meta);
                    self.cards[card].cap_used -= stored;
                    self.cards[card].cap_queue.remove(block);
                }
                _ => {
                    self.cards[card].comp_used -= meta.bytes_fp16 as u64;
                    self.cards[card].queues.remove(block);
                }
            }
        }
        // unreached generation reserve (gen_plan beyond materialized blocks)
        for k in req.gen_blocks.len()..req.gen_plan.len() {
            match req.gen_plan[k] {
                PlaceClass::Home => self.cards[req.home as usize].comp_used -= self.block_bytes,
                PlaceClass::Cold => {
                    self.cards[req.home as usize].cap_used -= self.cold_block_size()
                }
                PlaceClass::Remote(card) => {
                    self.cards[card as usize].comp_used -= self.block_bytes
                }
            }
        }

        // retention: refresh the keep-set so scoring protects it, then
        // hand every unpinned prompt block to the demotion queues
        let keep = prefix_retention(
            self.policy
                .next_turn_prob
                .get(&req.category)
                .copied()
                .unwrap_or(0.0),
            self.policy.retention_threshold,
            self.policy.retention_budget_blocks,
            req.unique_prompt.len(),
        );
        for (i, &block) in req.unique_prompt.iter().enumerate() {
            if i < keep {
                if let Some(meta) = self.metas.get_mut(&block) {
                    meta.t_last = self.now;
                }
            }
            self.unpin(block);
        }
    }

    fn check_done(&mut self) {
        // events drain naturally; nothing to force here
    }

    fn finalize(mut self) -> RunMetrics {
        debug_assert!(self.active.is_empty(), "run ended with active requests");
        debug_assert!(self.waiting.is_empty(), "run ended with queued requests");
        self.records.sort_by_key(|r| r.id);
        let makespan = self
            .records
            .iter()
            .map(|r| r.arrival + r.e2e)
            .fold(0.0f64, f64::max);
        let total_ctx = self.hot_bytes_total + self.cold_bytes_total + self.remote_bytes_total;
        let hit_rates = HitRates {
            compute_access_hit_rate: if total_ctx == 0 {
                1.0
            } else {
                (self.hot_bytes_total + self.remote_bytes_total) as f64 / total_ctx as f64
            },
            compute_byte_hit_rate: if total_ctx == 0 {
                1.0
            } else {
                self.hot_bytes_total as f64 / total_ctx as f64
            },
            prefix_hit_rate: if self.prefix_blocks_seen == 0 {
                0.0
            } else {
                self.prefix_blocks_hit as f64 / self.prefix_blocks_seen as f64
            },
        };
        self.ledger.capacity_resident_fp16 = self
            .metas
            .values()
            .filter(|m| m.tier == BlockTier::Capacity)
            .map(|m| m.bytes_fp16 as u64)
            .sum();
        let energy_per_token = if self.generated_tokens == 0 {
            0.0
        } else {
            self.energy.total() / self.generated_tokens as f64
        };
        let pct = |series: &[f64], p: f64| {
            crate::harness::percentile(series, p).unwrap_or(0.0)
        };
        let ttft: Vec<f64> = self.records.iter().map(|r| r.ttft).collect();
        let e2e: Vec<f64> = self.records.iter().map(|r| r.e2e).collect();
        let latency = LatencySummary {
            p50_ttft: pct(&ttft, 50.0),
            p95_ttft: pct(&ttft, 95.0),
            p50_tbt: pct(&self.tbt, 50.0),
            p95_tbt: pct(&self.tbt, 95.0),
            p50_e2e: pct(&e2e, 50.0),
            p95_e2e: pct(&e2e, 95.0),
        };
        RunMetrics {
            per_request: self.records,
            tbt_samples: self.tbt,
            latency,
            makespan,
            generated_tokens: self.generated_tokens,
            token_throughput: if makespan > 0.0 {
                self.generated_tokens as f64 / makespan
            } else {
                0.0
            },
            request_throughput: if makespan > 0.0 {
                self.finished as f64 / makespan
            } else {
                0.0
            },
            completed_requests: self.finished,
            rejected_requests: self.rejected,
            steps: self.steps,
            mean_decode_batch: if self.steps == 0 {
                0.0
            } else {
                self.decode_slot_steps as f64 / self.steps as f64
            },
            hit_rates,
            energy: self.energy,
            energy_per_token_j: energy_per_token,
            transfers: self.transfers,
            ledger: self.ledger,
            counters: self.counters,
            policy_events: self.events_log,
        }
    }
}
