//! Serving-time policies: reuse-probability estimation, lexicographic
//! demotion scoring and the water-mark demotion loop, K8V4 size
//! accounting, the three-gate replication test, transfer classification,
//! home assignment, and category CDF fitting.
//!
//! Policy functions that take explicit state are pure so they can be
//! tested against brute-force oracles in isolation; the event loop in
//! `engine` owns the mutable state and calls in here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Category;

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Residency tier of a KV block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockTier {
    Compute,
    Capacity,
    Evicted,
}

/// Per-block record the base die keeps for eviction and replication.
/// Mirrors the hardware budget: the whole struct must stay within 32
/// bytes (checked by a test below).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMeta {
    pub t_last: f64,
    /// FP16 size of the block.
    pub bytes_fp16: u32,
    /// Token-position offset of the block within its prompt.
    pub offset: u32,
    pub n_remote: u16,
    /// Bitmask of cards that fetched this block remotely.
    pub requester_mask: u8,
    pub home_card: u8,
    pub home_stack: u8,
    pub category: Category,
    pub tier: BlockTier,
    pub quantized: bool,
}

impl BlockMeta {
    pub fn new(
        category: Category,
        home_card: u8,
        home_stack: u8,
        offset: u32,
        bytes_fp16: u32,
        now: f64,
    ) -> Self {
        BlockMeta {
            t_last: now,
            bytes_fp16,
            offset,
            n_remote: 0,
            requester_mask: 0,
            home_card,
            home_stack,
            category,
            tier: BlockTier::Compute,
            quantized: false,
        }
    }

    /// Distinct cards that have pulled this block remotely.
    pub fn n_cards(&self) -> u8 {
        self.requester_mask.count_ones() as u8
    }

    pub fn note_remote_hit(&mut self, card: u8) {
        self.n_remote = self.n_remote.saturating_add(1);
        self.requester_mask |= 1u8 << (card & 7);
    }
}

/// Exponential fit of one category's reuse-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryModel {
    pub category: Category,
    /// Rate of F(t) = 1 − e^(−λt).
    pub lambda: f64,
    /// Lookahead horizon ℓ for the reuse-probability window.
    pub lifespan: f64,
    /// Seconds of history used when refitting.
    pub fit_window: f64,
}

impl CategoryModel {
    /// Defaults before the first runtime fit; lifespans are per category
    /// and get overwritten as reuse history accumulates.
    pub fn default_for(category: Category) -> CategoryModel {
        let lifespan = match category {
            Category::Api => 60.0,
            Category::Text => 300.0,
            Category::Code => 600.0,
            Category::Thinking => 30.0,
        };
        CategoryModel {
            category,
            lambda: 1.0 / lifespan,
            lifespan,
            fit_window: 60.0,
        }
    }
}

/// P(block of this category is reused within the next ℓ seconds, given it
/// was last touched dt seconds ago): F(dt+ℓ) − F(dt) = e^(−λ·dt)(1 − e^(−λ·ℓ)).
pub fn reuse_prob(cm: &CategoryModel, dt: f64) -> Result<f64, RuntimeError> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(RuntimeError::InvalidArgument(format!(
            "dt must be non-negative, got {dt}"
        )));
    }
    let p = (-cm.lambda * dt).exp() * (1.0 - (-cm.lambda * cm.lifespan).exp());
    Ok(p.clamp(0.0, 1.0))
}

/// Lexicographic demotion key (−reuse probability, +prompt offset,
/// −remote hits). `lex_cmp` orders demote-first: lowest reuse
/// probability, then deepest prompt position, then fewest remote hits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemotionScore {
    pub neg_reuse_prob: f64,
    pub offset: u32,
    pub neg_remote_hits: i32,
}

impl DemotionScore {
    /// Sentinel that never wins a victim selection.
    pub const WORST: DemotionScore = DemotionScore {
        neg_reuse_prob: f64::NEG_INFINITY,
        offset: 0,
        neg_remote_hits: i32::MIN,
    };

    pub fn lex_cmp(&self, other: &DemotionScore) -> std::cmp::Ordering {
        // low reuse first (-r descending), deeper offsets first, then
        // protect blocks with many remote hits
        other
            .neg_reuse_prob
            .total_cmp(&self.neg_reuse_prob)
            .then(self.offset.cmp(&other.offset).reverse())
            .then(other.neg_remote_hits.cmp(&self.neg_remote_hits))
    }
}

pub fn demotion_score(b: &BlockMeta, now: f64, cm: &CategoryModel) -> DemotionScore {
    debug_assert_eq!(b.tier, BlockTier::Compute);
    let dt = (now - b.t_last).max(0.0);
    DemotionScore {
        neg_reuse_prob: -reuse_prob(cm, dt).unwrap_or(0.0),
        offset: b.offset,
        neg_remote_hits: -(b.n_remote as i32),
    }
}

/// Occupancy water marks that start and stop the demotion loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvictionConfig {
    pub theta_hi: f64,
    pub theta_lo: f64,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        EvictionConfig {
            theta_hi: 0.95,
            theta_lo: 0.85,
        }
    }
}

impl EvictionConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let ok = self.theta_lo > 0.0 && self.theta_lo < self.theta_hi && self.theta_hi <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(RuntimeError::InvalidArgument(format!(
                "water marks must satisfy 0 < lo < hi <= 1, got lo={} hi={}",
                self.theta_lo, self.theta_hi
            )))
        }
    }
}

/// Selection rule used by the demotion loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvictionPolicy {
    /// Per-category queues scored lexicographically (reuse, offset, remote).
    CategoryAware,
    /// Plain least-recently-used across everything.
    Lru,
}

/// Idle compute-layer blocks eligible for demotion, grouped per category
/// and ordered by last access so only queue fronts need scoring. Each
/// victim selection examines one front per active category.
#[derive(Debug, Default)]
pub struct DemotionQueues {
    queues: BTreeMap<Category, BTreeMap<(u64, u64), u64>>,
    position: BTreeMap<u64, (Category, (u64, u64))>,
}

fn time_key(t: f64) -> u64 {
    // non-negative finite times sort correctly through their bit pattern
    debug_assert!(t >= 0.0);
    t.to_bits()
}

impl DemotionQueues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn contains(&self, block: u64) -> bool {
        self.position.contains_key(&block)
    }

    /// Enqueue an idle block. Re-enqueueing updates its order.
    pub fn push(&mut self, block: u64, category: Category, t_last: f64) {
        self.remove(block);
        let key = (time_key(t_last), block);
        self.queues.entry(category).or_default().insert(key, block);
        self.position.insert(block, (category, key));
    }

    pub fn remove(&mut self, block: u64) {
        if let Some((cat, key)) = self.position.remove(&block) {
            if let Some(q) = self.queues.get_mut(&cat) {
                q.remove(&key);
                if q.is_empty() {
                    self.queues.remove(&cat);
                }
            }
        }
    }

    fn front(&self, category: Category) -> Option<u64> {
        self.queues
            .get(&category)
            .and_then(|q| q.values().next().copied())
    }

    /// Pop the next victim: among per-category queue fronts, the block
    /// with the lexicographically smallest demotion score (or the oldest
    /// block under plain LRU). Ties resolve toward the lower block id.
    pub fn pop_victim(
        &mut self,
        policy: EvictionPolicy,
        now: f64,
        metas: &BTreeMap<u64, BlockMeta>,
        models: &BTreeMap<Category, CategoryModel>,
    ) -> Option<u64> {
        let mut best: Option<(DemotionScore, u64)> = None;
        match policy {
            EvictionPolicy::CategoryAware => {
                for cat in self.queues.keys().copied().collect::<Vec<_>>() {
                    let Some(block) = self.front(cat) else { continue };
                    let meta = &metas[&block];
                    let model = models
                        .get(&cat)
                        .copied()
                        .unwrap_or_else(|| CategoryModel::default_for(cat));
                    let score = demotion_score(meta, now, &model);
                    let better = match &best {
                        None => true,
                        Some((s, b)) => match score.lex_cmp(s) {
                            std::cmp::Ordering::Less => true,
                            std::cmp::Ordering::Equal => block < *b,
                            std::cmp::Ordering::Greater => false,
                        },
                    };
                    if better {
                        best = Some((score, block));
                    }
                }
            }
            EvictionPolicy::Lru => {
                let mut oldest: Option<((u64, u64), u64)> = None;
                for q in self.queues.values() {
                    if let Some((&key, &block)) = q.iter().next() {
                        if oldest.map(|(k, _)| key < k).unwrap_or(true) {
                            oldest = Some((key, block));
                        }
                    }
                }
                best = oldest.map(|(_, b)| (DemotionScore::WORST, b));
            }
        }
        let (_, victim) = best?;
        self.remove(victim);
        Some(victim)
    }
}

/// K8V4: the Key half compresses FP16→INT8, the Value half FP16→INT4,
/// shrinking a block to 3/8 of its size (an 8/3 ≈ 2.667× expansion of
/// effective capacity-layer space). Odd byte counts round up per half.
pub fn quantized_size(bytes_fp16: u64) -> u64 {
    let key_half = bytes_fp16.div_ceil(2);
    let value_half = bytes_fp16 / 2;
    key_half.div_ceil(2) + value_half.div_ceil(4)
}

/// Thresholds for the three-gate replication test and replica management.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationConfig {
    /// Gate 1: block offset must fall within the system-prompt region.
    pub tau_off: u32,
    /// Gate 2: distinct-card count must exceed this.
    pub tau_cards: u8,
    /// Gate 3: remote-hit count must exceed this.
    pub tau_hits: u16,
    /// Replicas whose callback-elimination ratio drops below this are revoked.
    pub revoke_threshold: f64,
    /// Fraction of compute-layer space reserved for replicas.
    pub reserve_fraction: f64,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        ReplicationConfig {
            tau_off: 512,
            tau_cards: 2,
            tau_hits: 8,
            revoke_threshold: 0.5,
            reserve_fraction: 0.1,
        }
    }
}

/// All three gates must pass: offset ≤ τ_off, n_cards > τ_cards,
/// n_remote > τ_hits.
pub fn replication_gate(b: &BlockMeta, rc: &ReplicationConfig) -> bool {
    b.offset <= rc.tau_off && b.n_cards() > rc.tau_cards && b.n_remote > rc.tau_hits
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplicaStats {
    pub eliminated_callbacks: u64,
    pub window_accesses: u64,
}

/// Revoke when the callback-elimination ratio falls below the threshold
/// (strictly; a ratio exactly at the threshold keeps the replica). An
/// access-free window counts as ratio zero.
pub fn replica_revoke_check(stats: &ReplicaStats, rc: &ReplicationConfig) -> bool {
    let ratio = if stats.window_accesses == 0 {
        0.0
    } else {
        stats.eliminated_callbacks as f64 / stats.window_accesses as f64
    };
    ratio < rc.revoke_threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferKind {
    Promotion,
    Callback,
    Demotion,
    ReplicaFanout,
    Gc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferClass {
    /// Latency-visible: the requester stalls until the bytes arrive.
    Foreground,
    /// Fills otherwise idle link slots.
    Background,
}

pub fn classify_transfer(kind: TransferKind) -> TransferClass {
    match kind {
        TransferKind::Promotion | TransferKind::Callback => TransferClass::Foreground,
        TransferKind::Demotion | TransferKind::ReplicaFanout | TransferKind::Gc => {
            TransferClass::Background
        }
    }
}

/// Pick the home (card, stack) for a new request: the card holding the
/// longest compute-resident leading run of its prompt blocks, ties and
/// empty lookups falling back to the least-occupied card.
///
/// `resident` maps block id → card for compute-resident blocks;
/// `occupancy` is per-card compute-domain usage in bytes.
pub fn assign_home(
    block_ids: &[u64],
    resident: &BTreeMap<u64, u32>,
    occupancy: &[u64],
    stacks_per_card: u32,
) -> (u32, u32) {
    debug_assert!(!occupancy.is_empty());
    let mut prefix_card: Option<(u32, u32)> = None; // (card, leading-run length)
    if let Some(&first_card) = block_ids.first().and_then(|b| resident.get(b)) {
        let mut run = 0u32;
        for b in block_ids {
            match resident.get(b) {
                Some(&c) if c == first_card => run += 1,
                _ => break,
            }
        }
        prefix_card = Some((first_card, run));
    }

    let least_occupied = || {
        occupancy
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| a.cmp(b).then(ia.cmp(ib)))
            .map(|(i, _)| i as u32)
            .unwrap_or(0)
    };

    let card = match prefix_card {
        Some((c, run)) if run > 0 => c,
        _ => least_occupied(),
    };
    let stack = if stacks_per_card == 0 {
        0
    } else {
        (block_ids.first().copied().unwrap_or(0) % stacks_per_card as u64) as u32
    };
    (card, stack)
}

/// Maximum-likelihood exponential refit from inter-reuse samples. Fewer
/// than two samples keeps the prior; a degenerate all-zero window clamps
/// λ at the configured maximum.
pub fn fit_category_cdf(prior: &CategoryModel, samples: &[f64], lambda_max: f64) -> CategoryModel {
    if samples.len() < 2 {
        return *prior;
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let lambda = if mean <= 0.0 {
        lambda_max
    } else {
        (1.0 / mean).min(lambda_max)
    };
    CategoryModel { lambda, ..*prior }
}

/// How many leading prompt blocks to retain in compute layers after a
/// request completes: up to the per-conversation budget when the
/// category's next-turn probability clears the threshold, zero otherwise.
pub fn prefix_retention(
    next_turn_prob: f64,
    threshold: f64,
    budget_blocks: u32,
    prompt_blocks: usize,
) -> usize {
    if next_turn_prob > threshold {
        prompt_blocks.min(budget_blocks as usize)
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(lambda: f64, lifespan: f64) -> CategoryModel {
        CategoryModel {
            category: Category::Api,
            lambda,
            lifespan,
            fit_window: 60.0,
        }
    }

    fn meta(category: Category, t_last: f64, offset: u32, n_remote: u16) -> BlockMeta {
        BlockMeta {
            t_last,
            bytes_fp16: 1,
            offset,
            n_remote,
            requester_mask: 0,
            home_card: 0,
            home_stack: 0,
            category,
            tier: BlockTier::Compute,
            quantized: false,
        }
    }

    #[test]
    fn block_meta_fits_hardware_record() {
        assert!(std::mem::size_of::<BlockMeta>() <= 32);
    }

    #[test]
    fn reuse_prob_closed_form() {
        let cm = model(1.0, 1.0);
        // λ=1, ℓ=1, dt=0 → 1 − e^(−1); cross-check by evaluating F at both points
        let f = |t: f64| 1.0 - (-t).exp();
        let expected = f(1.0) - f(0.0);
        assert!((reuse_prob(&cm, 0.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.6321).abs() < 1e-4);

        // near-infinite lifespan from dt=0 ≈ certain eventual reuse
        let cm = model(1.0, 1e9);
        assert!((reuse_prob(&cm, 0.0).unwrap() - 1.0).abs() < 1e-12);

        // tail vanishes
        let cm = model(1.0, 1.0);
        assert!(reuse_prob(&cm, 1e6).unwrap() < 1e-300);

        assert!(reuse_prob(&cm, -0.1).is_err());
    }

    #[test]
    fn demotion_score_lexicographic_order() {
        let cm = model(0.1, 10.0);
        let now = 100.0;

        // equal reuse prob: deeper offset demotes first
        let shallow = demotion_score(&meta(Category::Api, 50.0, 100, 0), now, &cm);
        let deep = demotion_score(&meta(Category::Api, 50.0, 500, 0), now, &cm);
        assert_eq!(deep.lex_cmp(&shallow), std::cmp::Ordering::Less);

        // equal reuse and offset: fewer remote hits demotes first
        let cold = demotion_score(&meta(Category::Api, 50.0, 100, 0), now, &cm);
        let hot = demotion_score(&meta(Category::Api, 50.0, 100, 9), now, &cm);
        assert_eq!(cold.lex_cmp(&hot), std::cmp::Ordering::Less);

        // reuse probability dominates everything else
        let likely = demotion_score(&meta(Category::Api, 99.9, 10_000, 0), now, &cm);
        let unlikely = demotion_score(&meta(Category::Api, 0.0, 0, 9999), now, &cm);
        assert_eq!(unlikely.lex_cmp(&likely), std::cmp::Ordering::Less);
    }

    #[test]
    fn score_order_invariant_under_probability_scaling() {
        // scaling all reuse probabilities by a positive constant preserves order
        let a = DemotionScore {
            neg_reuse_prob: -0.8,
            offset: 1,
            neg_remote_hits: 0,
        };
        let b = DemotionScore {
            neg_reuse_prob: -0.2,
            offset: 9,
            neg_remote_hits: -5,
        };
        let scale = |s: &DemotionScore, k: f64| DemotionScore {
            neg_reuse_prob: s.neg_reuse_prob * k,
            ..*s
        };
        for k in [0.01, 0.5, 3.0, 100.0] {
            assert_eq!(scale(&a, k).lex_cmp(&scale(&b, k)), a.lex_cmp(&b), "scale {k}");
        }
    }

    #[test]
    fn quantized_size_ratio() {
        let mib = 1u64 << 20;
        assert_eq!(quantized_size(mib), mib * 3 / 8); // 0.375 MiB
        assert_eq!(quantized_size(0), 0);
        // sizes whose halves quantize without remainder land on 3/8 exactly
        for bytes in (8u64..4096).step_by(8) {
            assert_eq!(quantized_size(bytes) * 8, bytes * 3, "8/3 ratio is exact");
        }
        // ragged sizes round up per half
        assert_eq!(quantized_size(1), 1);
        assert_eq!(quantized_size(7), 3);
        assert_eq!(quantized_size(2), 2);
    }

    #[test]
    fn replication_gates_are_conjunctive() {
        let rc = ReplicationConfig::default();
        let mut b = meta(Category::Api, 0.0, 10_000, 500);
        b.requester_mask = 0xff;
        assert!(!replication_gate(&b, &rc), "gate 1 fails on deep offset");

        let mut b = meta(Category::Api, 0.0, 0, 500);
        b.requester_mask = 0b11; // exactly tau_cards
        assert!(
            !replication_gate(&b, &rc),
            "distinct-card count must exceed threshold"
        );

        let mut b = meta(Category::Api, 0.0, 0, rc.tau_hits + 1);
        b.requester_mask = 0b111;
        assert!(replication_gate(&b, &rc));

        let mut b = meta(Category::Api, 0.0, 0, rc.tau_hits);
        b.requester_mask = 0b111;
        assert!(!replication_gate(&b, &rc), "remote hits must exceed threshold");
    }

    #[test]
    fn revoke_boundary_semantics() {
        let rc = ReplicationConfig::default();
        let stats = |e, w| ReplicaStats {
            eliminated_callbacks: e,
            window_accesses: w,
        };
        assert!(replica_revoke_check(&stats(0, 10), &rc));
        assert!(!replica_revoke_check(&stats(10, 10), &rc));
        assert!(!replica_revoke_check(&stats(5, 10), &rc), "exactly at threshold keeps");
        assert!(replica_revoke_check(&stats(4, 10), &rc));
        assert!(replica_revoke_check(&stats(0, 0), &rc), "idle replica revokes");
    }

    #[test]
    fn transfer_classes_partition() {
        use TransferClass::*;
        use TransferKind::*;
        assert_eq!(classify_transfer(Promotion), Foreground);
        assert_eq!(classify_transfer(Callback), Foreground);
        assert_eq!(classify_transfer(Demotion), Background);
        assert_eq!(classify_transfer(ReplicaFanout), Background);
        assert_eq!(classify_transfer(Gc), Background);
    }

    #[test]
    fn home_assignment_longest_prefix() {
        let occupancy = vec![100u64, 50, 75];

        // unanimous prefix on card 2
        let blocks: Vec<u64> = (0..8).collect();
        let mut resident = BTreeMap::new();
        for &b in &blocks {
            resident.insert(b, 2u32);
        }
        assert_eq!(assign_home(&blocks, &resident, &occupancy, 1).0, 2);

        // the leading run decides: 10 blocks on card 0, then 3 on card 1
        let blocks: Vec<u64> = (100..113).collect();
        let mut resident = BTreeMap::new();
        for &b in &blocks[..10] {
            resident.insert(b, 0u32);
        }
        for &b in &blocks[10..] {
            resident.insert(b, 1u32);
        }
        assert_eq!(assign_home(&blocks, &resident, &occupancy, 1).0, 0);

        // nothing resident: least occupied card
        let resident = BTreeMap::new();
        assert_eq!(assign_home(&blocks, &resident, &occupancy, 1).0, 1);
    }

    #[test]
    fn cdf_fit_is_mle() {
        let prior = CategoryModel::default_for(Category::Text);
        let fitted = fit_category_cdf(&prior, &[10.0, 10.0, 10.0], 1e6);
        assert!((fitted.lambda - 0.1).abs() < 1e-12);

        let fitted = fit_category_cdf(&prior, &[5.0, 15.0], 1e6);
        assert!((fitted.lambda - 0.1).abs() < 1e-12);

        // single sample keeps the prior
        let kept = fit_category_cdf(&prior, &[42.0], 1e6);
        assert_eq!(kept, prior);

        // all-zero window clamps
        let clamped = fit_category_cdf(&prior, &[0.0, 0.0], 123.0);
        assert_eq!(clamped.lambda, 123.0);
    }

    #[test]
    fn retention_rules() {
        assert_eq!(prefix_retention(0.05, 0.5, 32, 100), 0);
        assert_eq!(prefix_retention(0.6, 0.5, 32, 100), 32);
        assert_eq!(prefix_retention(0.6, 0.5, 32, 10), 10);
        assert_eq!(prefix_retention(0.6, 0.5, 0, 100), 0);
        assert_eq!(prefix_retention(0.5, 0.5, 32, 100), 0, "strict threshold");
    }

    /// Reference loop: each round, rebuild the per-category fronts from
    /// scratch (minimum t_last, then id), score them with the full
    /// formula, and pop the lexicographic minimum.
    fn oracle_demotion(
        blocks: &BTreeMap<u64, BlockMeta>,
        models: &BTreeMap<Category, CategoryModel>,
        now: f64,
        mut occupancy: u64,
        target: u64,
    ) -> Vec<u64> {
        let mut remaining: Vec<u64> = blocks.keys().copied().collect();
        let mut order = Vec::new();
        while occupancy > target && !remaining.is_empty() {
            let mut fronts: BTreeMap<Category, u64> = BTreeMap::new();
            for &id in &remaining {
                let m = &blocks[&id];
                let better = fronts
                    .get(&m.category)
                    .map(|&cur| {
                        let c = &blocks[&cur];
                        (m.t_last, id) < (c.t_last, cur)
                    })
                    .unwrap_or(true);
                if better {
                    fronts.insert(m.category, id);
                }
            }
            let mut best: Option<(DemotionScore, u64)> = None;
            for (&cat, &id) in &fronts {
                let score = demotion_score(&blocks[&id], now, &models[&cat]);
                let better = match &best {
                    None => true,
                    Some((s, b)) => match score.lex_cmp(s) {
                        std::cmp::Ordering::Less => true,
                        std::cmp::Ordering::Equal => id < *b,
                        std::cmp::Ordering::Greater => false,
                    },
                };
                if better {
                    best = Some((score, id));
                }
            }
            let (_, victim) = best.unwrap();
            remaining.retain(|&b| b != victim);
            occupancy -= blocks[&victim].bytes_fp16 as u64;
            order.push(victim);
        }
        order
    }

    #[test]
    fn demotion_queue_matches_front_scoring_oracle() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cats = [Category::Api, Category::Text, Category::Code];

        for case in 0..300 {
            let n = rng.gen_range(1..=12);
            let now = 1000.0;
            let mut blocks: BTreeMap<u64, BlockMeta> = BTreeMap::new();
            let mut models = BTreeMap::new();
            for &c in &cats {
                models.insert(
                    c,
                    CategoryModel {
                        category: c,
                        lambda: rng.gen_range(0.001..1.0),
                        lifespan: rng.gen_range(1.0..500.0),
                        fit_window: 60.0,
                    },
                );
            }
            let mut occupancy = 0u64;
            for id in 0..n {
                let cat = cats[rng.gen_range(0..cats.len())];
                let mut m = meta(
                    cat,
                    rng.gen_range(0.0..now),
                    rng.gen_range(0..2048),
                    rng.gen_range(0..20),
                );
                m.bytes_fp16 = rng.gen_range(1..100);
                occupancy += m.bytes_fp16 as u64;
                blocks.insert(id, m);
            }
            let target = occupancy / 2;

            let expected = oracle_demotion(&blocks, &models, now, occupancy, target);

            let mut queues = DemotionQueues::new();
            for (&id, m) in &blocks {
                queues.push(id, m.category, m.t_last);
            }
            let mut got = Vec::new();
            let mut occ = occupancy;
            while occ > target {
                let Some(victim) =
                    queues.pop_victim(EvictionPolicy::CategoryAware, now, &blocks, &models)
                else {
                    break;
                };
                occ -= blocks[&victim].bytes_fp16 as u64;
                got.push(victim);
            }
            assert_eq!(got, expected, "case {case}");
        }
    }

    #[test]
    fn lru_policy_pops_globally_oldest() {
        let mut queues = DemotionQueues::new();
        let mut blocks = BTreeMap::new();
        let models = BTreeMap::new();
        for (id, (cat, t)) in [
            (Category::Api, 5.0),
            (Category::Text, 2.0),
            (Category::Code, 9.0),
        ]
        .iter()
        .enumerate()
        {
            let m = meta(*cat, *t, 0, 0);
            blocks.insert(id as u64, m);
            queues.push(id as u64, *cat, *t);
        }
        assert_eq!(queues.pop_victim(EvictionPolicy::Lru, 10.0, &blocks, &models), Some(1));
        assert_eq!(queues.pop_victim(EvictionPolicy::Lru, 10.0, &blocks, &models), Some(0));
        assert_eq!(queues.pop_victim(EvictionPolicy::Lru, 10.0, &blocks, &models), Some(2));
        assert_eq!(queues.pop_victim(EvictionPolicy::Lru, 10.0, &blocks, &models), None);
    }
}
