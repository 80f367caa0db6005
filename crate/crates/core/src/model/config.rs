use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::kv::{format_f64, format_list, parse_list, parse_value, KvConfig};

/// Student architecture. Every strided stem stage halves the resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of the 3x3 stride-2 stem stages.
    pub stem_channels: Vec<usize>,
    /// Reduced visual width `C_v`.
    pub visual_channels: usize,
    /// Linguistic width `C_l`.
    pub text_channels: usize,
    /// Joint embedding width `D`.
    pub joint_dim: usize,
    /// Language tokens `N_l`, including the leading `[CLS]`.
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub visual_layers: usize,
    pub visual_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: vec![8, 16, 32],
            visual_channels: 32,
            text_channels: 32,
            joint_dim: 32,
            max_tokens: 20,
            vocab_size: Vocab::standard().len(),
            visual_layers: 1,
            visual_heads: 2,
            text_layers: 1,
            text_heads: 2,
            fusion_layers: 2,
            fusion_heads: 4,
            ffn_dim: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used by the gradient suites:
    /// `D = 8`, `N_v = 4`, `N_l = 4`.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            stem_channels: vec![3, 4, 4],
            visual_channels: 4,
            text_channels: 4,
            joint_dim: 8,
            max_tokens: 4,
            vocab_size: Vocab::standard().len(),
            visual_layers: 1,
            visual_heads: 2,
            text_layers: 1,
            text_heads: 2,
            fusion_layers: 1,
            fusion_heads: 2,
            ffn_dim: 8,
            dropout: 0.1,
        }
    }

    pub fn total_stride(&self) -> usize {
        1 << self.stem_channels.len()
    }

    /// Side length of the stem feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size / self.total_stride()
    }

    /// Visual token count `N_v = (H0 / stride)^2`.
    pub fn visual_tokens(&self) -> usize {
        self.feature_size() * self.feature_size()
    }

    /// Width of the joint sequence, `N_v + N_l + 1`.
    pub fn joint_tokens(&self) -> usize {
        self.visual_tokens() + self.max_tokens + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return bad("stem needs at least one stage with positive channels".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.total_stride()) {
            return bad(format!(
                "image size {} not divisible by total stem stride {}",
                self.image_size,
                self.total_stride()
            ));
        }
        for (name, v) in [
            ("visual_channels", self.visual_channels),
            ("text_channels", self.text_channels),
            ("joint_dim", self.joint_dim),
            ("max_tokens", self.max_tokens),
            ("ffn_dim", self.ffn_dim),
            ("visual_heads", self.visual_heads),
            ("text_heads", self.text_heads),
            ("fusion_heads", self.fusion_heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, width, heads) in [
            ("joint_dim", self.joint_dim, self.fusion_heads),
            ("visual_channels", self.visual_channels, self.visual_heads),
            ("text_channels", self.text_channels, self.text_heads),
        ] {
            if width % heads != 0 {
                return bad(format!("{name} {width} not divisible by {heads} heads"));
            }
        }
        if self.vocab_size < 3 {
            return bad("vocabulary must hold the three special tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_value(key, value)?,
            "stem_channels" => self.stem_channels = parse_list(key, value)?,
            "visual_channels" => self.visual_channels = parse_value(key, value)?,
            "text_channels" => self.text_channels = parse_value(key, value)?,
            "joint_dim" => self.joint_dim = parse_value(key, value)?,
            "max_tokens" => self.max_tokens = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "visual_layers" => self.visual_layers = parse_value(key, value)?,
            "visual_heads" => self.visual_heads = parse_value(key, value)?,
            "text_layers" => self.text_layers = parse_value(key, value)?,
            "text_heads" => self.text_heads = parse_value(key, value)?,
            "fusion_layers" => self.fusion_layers = parse_value(key, value)?,
            "fusion_heads" => self.fusion_heads = parse_value(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        [
            ("image_size", self.image_size.to_string()),
            ("stem_channels", format_list(&self.stem_channels)),
            ("visual_channels", self.visual_channels.to_string()),
            ("text_channels", self.text_channels.to_string()),
            ("joint_dim", self.joint_dim.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("visual_layers", self.visual_layers.to_string()),
            ("visual_heads", self.visual_heads.to_string()),
            ("text_layers", self.text_layers.to_string()),
            ("text_heads", self.text_heads.to_string()),
            ("fusion_layers", self.fusion_layers.to_string()),
            ("fusion_heads", self.fusion_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", format_f64(self.dropout)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_token_counts() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.visual_tokens(), 64);
        assert_eq!(c.joint_tokens(), 64 + 20 + 1);
        let t = ModelConfig::tiny();
        t.validate().unwrap();
        assert_eq!((t.joint_dim, t.visual_tokens(), t.max_tokens), (8, 4, 4));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            joint_dim: 30,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::tiny();
        c.dropout = 0.25;
        let mut back = ModelConfig::default();
        let pairs = c.pairs();
        back.apply_all(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert!(back.set("nope", "1").map(|known| !known).unwrap());
    }
}
