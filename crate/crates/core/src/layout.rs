//! Compile-time placement objective and the asymmetric Key/Value layout
//! math: bank mappings, the per-step communication-cost model, and
//! layout-mode selection.
//!
//! Keys are laid out token-major (`b_K(n) = n mod B`) so each bank
//! computes its slice of the score vector independently; Values are laid
//! out dim-head (`b_V(j) = j mod B`) so output elements assemble by
//! concatenation. Neither phase then needs a cross-bank reduction, which
//! is what makes the default mode cheap at the base die.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::stack::LayerKind;

/// K/V bank-distribution pairs. `TmDh` is the default; the other two trade
/// a broadcast for a cross-bank reduction and win only at the extremes of
/// context length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutMode {
    TmDh,
    TmTm,
    DhDh,
}

impl LayoutMode {
    pub fn all() -> [LayoutMode; 3] {
        [LayoutMode::TmDh, LayoutMode::TmTm, LayoutMode::DhDh]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LayoutMode::TmDh => "tm-dh",
            LayoutMode::TmTm => "tm-tm",
            LayoutMode::DhDh => "dh-dh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    /// Context length in tokens (L).
    pub context_len: u64,
    /// Head dimension (d).
    pub head_dim: u32,
    /// PIM bank count (B).
    pub banks: u32,
    /// Aggregation cost weight γ in T = T_bank + γ·T_agg.
    pub gamma: f64,
    /// Multiplicative threshold widening; 1 disables it.
    pub hysteresis: f64,
}

/// Per-decode-step element volumes for one head group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommVolumes {
    /// Elements moved per bank, parallel across banks.
    pub t_bank: f64,
    /// Elements collected (and possibly reduced) at the base die.
    pub t_agg: f64,
}

/// Token-major Key mapping.
pub fn key_bank(token_index: u64, banks: u32) -> u32 {
    debug_assert!(banks >= 1);
    (token_index % banks as u64) as u32
}

/// Dim-head Value mapping.
pub fn value_bank(dim_index: u32, banks: u32) -> u32 {
    debug_assert!(banks >= 1);
    dim_index % banks
}

/// Communication volumes for the three layout configurations.
pub fn comm_volumes(mode: LayoutMode, p: &LayoutParams) -> CommVolumes {
    let l = p.context_len as f64;
    let d = p.head_dim as f64;
    let b = p.banks as f64;
    match mode {
        LayoutMode::TmDh => CommVolumes {
            t_bank: d + l / b + l + d / b,
            t_agg: l + d,
        },
        LayoutMode::TmTm => CommVolumes {
            t_bank: 2.0 * d + 2.0 * l / b,
            t_agg: l + b * d,
        },
        LayoutMode::DhDh => CommVolumes {
            t_bank: 2.0 * l + 2.0 * d / b,
            t_agg: b * l + d,
        },
    }
}

/// Modeled step cost T = T_bank + γ·T_agg.
pub fn layout_cost(mode: LayoutMode, p: &LayoutParams) -> f64 {
    let v = comm_volumes(mode, p);
    v.t_bank + p.gamma * v.t_agg
}

/// Pick the layout for a context of length L: token-major for both sides
/// once L clears d(1+γB) (widened by hysteresis), dim-head for both below
/// d/(1+γB), and the reduction-free default in between.
pub fn select_layout(p: &LayoutParams) -> LayoutMode {
    let l = p.context_len as f64;
    let d = p.head_dim as f64;
    let pivot = d * (1.0 + p.gamma * p.banks as f64);
    if l > p.hysteresis * pivot {
        LayoutMode::TmTm
    } else if l < d / (p.hysteresis * (1.0 + p.gamma * p.banks as f64)) {
        LayoutMode::DhDh
    } else {
        LayoutMode::TmDh
    }
}

/// One live data object competing for compute-layer space.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementObject {
    pub id: u64,
    pub size: u64,
    /// Normalized access frequency α ∈ [0, 1].
    pub alpha: f64,
    /// True iff the object is a KV block consumed by PIM-side attention.
    pub pim_eligible: bool,
}

/// Greedy placement maximizing Σ α·β over compute-resident objects subject
/// to the compute-layer byte budget. Non-eligible objects always land in
/// capacity layers; eligible ones are admitted by descending α (ties:
/// smaller size, then lower id) while they fit.
pub fn greedy_placement(objects: &[PlacementObject], c_comp: u64) -> BTreeMap<u64, LayerKind> {
    let mut placement = BTreeMap::new();
    let mut eligible: Vec<&PlacementObject> = Vec::new();
    for obj in objects {
        if obj.pim_eligible {
            eligible.push(obj);
        } else {
            placement.insert(obj.id, LayerKind::Capacity);
        }
    }
    eligible.sort_by(|a, b| {
        b.alpha
            .total_cmp(&a.alpha)
            .then(a.size.cmp(&b.size))
            .then(a.id.cmp(&b.id))
    });
    let mut used = 0u64;
    for obj in eligible {
        if used + obj.size <= c_comp {
            used += obj.size;
            placement.insert(obj.id, LayerKind::Compute);
        } else {
            placement.insert(obj.id, LayerKind::Capacity);
        }
    }
    placement
}
