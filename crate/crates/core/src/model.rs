//! Model geometry and the arithmetic that turns request lengths into KV
//! bytes, FLOPs, and weight traffic.
//!
//! Everything here is pure: a [`ModelConfig`] is immutable and the
//! conversions are plain formulas, so the timing and placement layers can
//! call them from anywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("hidden dimension {hidden} is not divisible by head count {heads}")]
    HiddenNotDivisible { hidden: u32, heads: u32 },
    #[error("layers and heads must both be at least 1")]
    DegenerateGeometry,
    #[error("token count must be at least 1")]
    ZeroTokens,
    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),
}

/// Transformer geometry for one served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: u32,
    pub hidden: u32,
    pub heads: u32,
    /// Total parameter count.
    pub params: u64,
    /// Bytes per element; 2 for FP16 weights and KV.
    pub dtype_bytes: u32,
    /// KV head count when attention is grouped-query. `None` means MHA
    /// (KV width equals the full hidden dimension).
    #[serde(default)]
    pub kv_heads: Option<u32>,
}

impl ModelConfig {
    pub fn new(name: &str, layers: u32, hidden: u32, heads: u32, params: u64) -> Self {
        ModelConfig {
            name: name.to_string(),
            layers,
            hidden,
            heads,
            params,
            dtype_bytes: 2,
            kv_heads: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 {
            return Err(ModelError::DegenerateGeometry);
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::HiddenNotDivisible {
                hidden: self.hidden,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u32 {
        self.hidden / self.heads
    }

    /// Effective KV width in elements per layer (scaled down under GQA).
    pub fn kv_width(&self) -> u64 {
        let kv_heads = self.kv_heads.unwrap_or(self.heads);
        self.head_dim() as u64 * kv_heads as u64
    }

    /// Total weight bytes for one full copy of the model.
    pub fn weight_bytes(&self) -> u64 {
        self.params * self.dtype_bytes as u64
    }

    /// Built-in presets.
    pub fn preset(name: &str) -> Result<ModelConfig, ModelError> {
        match name {
            "qwen3-4b" => Ok(ModelConfig::new("qwen3-4b", 36, 2560, 32, 4_000_000_000)),
            "qwen3-32b" => Ok(ModelConfig::new("qwen3-32b", 64, 5120, 64, 32_000_000_000)),
            "devstral-123b" => Ok(ModelConfig::new(
                "devstral-123b",
                80,
                12288,
                96,
                123_000_000_000,
            )),
            "gpt-175b" => Ok(ModelConfig::new("gpt-175b", 96, 12288, 96, 175_000_000_000)),
            other => Err(ModelError::UnknownPreset(other.to_string())),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["qwen3-4b", "qwen3-32b", "devstral-123b", "gpt-175b"]
    }
}

/// Bytes of K plus V state appended per token: 2 × layers × kv-width × dtype.
pub fn kv_bytes_per_token(m: &ModelConfig) -> u64 {
    2 * m.layers as u64 * m.kv_width() * m.dtype_bytes as u64
}

/// Memory traffic and arithmetic of one decode step over a given context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionTraffic {
    /// KV bytes reread for the step.
    pub bytes: u64,
    /// One multiply-accumulate per KV element.
    pub flops: u64,
}

/// Decode-step attention rereads the full accumulated KV state.
pub fn decode_attention_traffic(m: &ModelConfig, context_len: u64) -> AttentionTraffic {
    let bytes = context_len * kv_bytes_per_token(m);
    AttentionTraffic {
        bytes,
        flops: 2 * bytes / m.dtype_bytes as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcWork {
    pub flops: u64,
    /// Weight bytes streamed for one pass, shared by every token in the batch.
    pub weight_bytes: u64,
}

/// Dense-roofline cost of the projection and feed-forward layers.
///
/// Both phases use the same 2 × params × tokens approximation; the phase
/// tag exists so callers can account the work separately.
pub fn fc_work(m: &ModelConfig, tokens_in_batch: u64, _phase: Phase) -> Result<FcWork, ModelError> {
    if tokens_in_batch == 0 {
        return Err(ModelError::ZeroTokens);
    }
    Ok(FcWork {
        flops: 2 * m.params * tokens_in_batch,
        weight_bytes: m.weight_bytes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_bytes_matches_table_geometry() {
        let qwen = ModelConfig::preset("qwen3-4b").unwrap();
        assert_eq!(kv_bytes_per_token(&qwen), 368_640); // 2*36*2560*2
        let gpt = ModelConfig::preset("gpt-175b").unwrap();
        assert_eq!(kv_bytes_per_token(&gpt), 4_718_592); // 2*96*12288*2
    }

    #[test]
    fn kv_bytes_unit_case() {
        let mut m = ModelConfig::new("unit", 1, 1, 1, 1);
        m.dtype_bytes = 1;
        assert_eq!(kv_bytes_per_token(&m), 2);
    }

    #[test]
    fn gqa_override_scales_kv() {
        let mut m = ModelConfig::preset("qwen3-32b").unwrap();
        let full = kv_bytes_per_token(&m);
        m.kv_heads = Some(m.heads / 4);
        assert_eq!(kv_bytes_per_token(&m), full / 4);
    }

    #[test]
    fn decode_traffic_single_token_and_linearity() {
        let m = ModelConfig::preset("gpt-175b").unwrap();
        let one = decode_attention_traffic(&m, 1);
        assert_eq!(one.bytes, kv_bytes_per_token(&m));
        assert_eq!(one.flops, kv_bytes_per_token(&m)); // 2 flops per 2-byte element

        let ctx = decode_attention_traffic(&m, 4096);
        assert_eq!(ctx.bytes, 4096 * 4_718_592);
        // exact linearity
        let a = decode_attention_traffic(&m, 1000).bytes;
        let b = decode_attention_traffic(&m, 24).bytes;
        assert_eq!(decode_attention_traffic(&m, 1024).bytes, a + b);
        assert_eq!(decode_attention_traffic(&m, 2048).bytes, 2 * ctx.bytes / 4);
    }

    #[test]
    fn fc_work_formula_and_errors() {
        let m = ModelConfig::preset("qwen3-4b").unwrap();
        let w = fc_work(&m, 1, Phase::Decode).unwrap();
        assert_eq!(w.flops, 8_000_000_000); // 2 * 4e9 * 1
        assert_eq!(w.weight_bytes, 8_000_000_000);
        assert_eq!(fc_work(&m, 0, Phase::Prefill), Err(ModelError::ZeroTokens));
        // prefill of 1024 tokens equals 1024 single-token decodes
        let p = fc_work(&m, 1024, Phase::Prefill).unwrap();
        assert_eq!(p.flops, 1024 * w.flops);
    }

    #[test]
    fn kv_bytes_monotone_in_geometry() {
        let base = ModelConfig::new("b", 8, 1024, 8, 1);
        for (layers, hidden, dtype) in [(9u32, 1024u32, 2u32), (8, 2048, 2), (8, 1024, 4)] {
            let mut grown = base.clone();
            grown.layers = layers;
            grown.hidden = hidden;
            grown.dtype_bytes = dtype;
            assert!(kv_bytes_per_token(&grown) >= kv_bytes_per_token(&base));
        }
    }

    #[test]
    fn validate_rejects_bad_geometry() {
        let mut m = ModelConfig::new("bad", 4, 100, 3, 1);
        assert!(matches!(
            m.validate(),
            Err(ModelError::HiddenNotDivisible { .. })
        ));
        m.heads = 0;
        assert_eq!(m.validate(), Err(ModelError::DegenerateGeometry));
    }

    #[test]
    fn presets_all_validate() {
        for name in ModelConfig::preset_names() {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("nope").is_err());
    }
}
