use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Lstm,
    Transformer,
}

/// How raw precomputed features become encoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// One feature stream, each row projected independently (CNN vector or ViT tokens).
    Single,
    /// Detection boxes `(x, y, w, h, one-hot class)`, padded, flattened, projected to one token.
    Detection,
    /// Two streams projected separately and stacked along the token axis.
    Stacked,
}

impl AdapterKind {
    pub fn num_streams(self) -> usize {
        match self {
            AdapterKind::Single | AdapterKind::Detection => 1,
            AdapterKind::Stacked => 2,
        }
    }
}

pub const DEFAULT_MAX_BOXES: usize = 16;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_max_boxes() -> usize {
    DEFAULT_MAX_BOXES
}

/// Shape of one captioner: decoder family, adapter, widths and vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub decoder: DecoderKind,
    pub adapter: AdapterKind,
    pub embed_size: usize,
    pub num_layers: usize,
    /// Ignored by the LSTM decoder.
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Column count of each raw feature stream. Detection inputs use `4 + num_classes`.
    pub feature_dims: Vec<usize>,
    #[serde(default = "default_max_boxes")]
    pub max_boxes: usize,
}

impl ArchitectureConfig {
    /// Transformer or LSTM config with head count chosen for a head width of 64.
    pub fn new(
        decoder: DecoderKind,
        adapter: AdapterKind,
        embed_size: usize,
        num_layers: usize,
        vocab_size: usize,
        feature_dims: Vec<usize>,
    ) -> Self {
        Self {
            decoder,
            adapter,
            embed_size,
            num_layers,
            num_heads: default_heads(embed_size),
            ffn_size: 4 * embed_size,
            vocab_size,
            max_len: crate::text::DEFAULT_MAX_LEN,
            dropout: DEFAULT_DROPOUT,
            feature_dims,
            max_boxes: DEFAULT_MAX_BOXES,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.feature_dims.first().map_or(0, |d| d.saturating_sub(4))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.embed_size == 0 {
            return bad("embed_size must be positive".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.vocab_size <= crate::text::NUM_SPECIAL {
            return bad(format!("vocab_size {} leaves no corpus tokens", self.vocab_size));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.decoder == DecoderKind::Transformer {
            if self.num_heads == 0 || !self.embed_size.is_multiple_of(self.num_heads) {
                return bad(format!(
                    "embed_size {} not divisible by num_heads {}",
                    self.embed_size, self.num_heads
                ));
            }
            if self.ffn_size == 0 {
                return bad("ffn_size must be positive".into());
            }
        }
        if self.decoder == DecoderKind::Lstm && self.adapter == AdapterKind::Stacked {
            return bad("the LSTM decoder takes one feature token; the stacked adapter produces two".into());
        }
        if self.feature_dims.len() != self.adapter.num_streams() {
            return bad(format!(
                "{:?} adapter needs {} feature dims, got {}",
                self.adapter,
                self.adapter.num_streams(),
                self.feature_dims.len()
            ));
        }
        if self.feature_dims.contains(&0) {
            return bad("feature dims must be positive".into());
        }
        if self.adapter == AdapterKind::Detection {
            if self.feature_dims[0] <= 4 {
                return bad("detection features need 4 box coordinates plus at least one class".into());
            }
            if self.max_boxes == 0 {
                return bad("max_boxes must be positive".into());
            }
        }
        Ok(())
    }
}

/// 8 heads at 512, 4 at 256, otherwise `embed / 64` (at least one).
pub fn default_heads(embed_size: usize) -> usize {
    (embed_size / 64).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ArchitectureConfig {
        ArchitectureConfig::new(DecoderKind::Transformer, AdapterKind::Single, 256, 1, 20, vec![32])
    }

    #[test]
    fn defaults_follow_head_width() {
        assert_eq!(base().num_heads, 4);
        assert_eq!(default_heads(512), 8);
        assert_eq!(base().ffn_size, 1024);
        base().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = base();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.decoder = DecoderKind::Lstm;
        c.validate().unwrap();
    }

    #[test]
    fn stream_count_must_match_adapter() {
        let mut c = base();
        c.adapter = AdapterKind::Stacked;
        assert!(c.validate().is_err());
        c.feature_dims = vec![32, 16];
        c.validate().unwrap();
        c.decoder = DecoderKind::Lstm;
        assert!(c.validate().is_err());
    }

    #[test]
    fn detection_needs_classes() {
        let mut c = base();
        c.adapter = AdapterKind::Detection;
        c.feature_dims = vec![4];
        assert!(c.validate().is_err());
        c.feature_dims = vec![7];
        c.validate().unwrap();
        assert_eq!(c.num_classes(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(base()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ArchitectureConfig>(v).is_err());
    }
}
