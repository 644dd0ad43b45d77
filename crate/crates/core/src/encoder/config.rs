use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Blocks per channel, fusion blocks included.
    pub n_layers: usize,
    /// Trailing blocks per channel that add cross-attention.
    pub n_fusion: usize,
    /// Hidden width of the block GeGLU MLPs.
    pub d_ff: usize,
    /// Hidden width of the kinematic input MLP.
    pub kin_hidden: usize,
    /// Rotated head dimensions given to (latitude, longitude, time).
    pub rope_split: [usize; 3],
    /// Multiplier on relative degrees before forming rotary angles.
    pub coord_scale: f64,
    pub rope_base: f64,
    pub max_seq_len: usize,
    /// Embedding table rows, special tokens included.
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Small configuration used by tests, gradient checks and desk runs.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 4,
            n_fusion: 1,
            d_ff: 64,
            kin_hidden: 32,
            rope_split: [6, 6, 4],
            coord_scale: 1e4,
            rope_base: 10_000.0,
            max_seq_len: 32,
            vocab_size,
        }
    }

    /// The full-size layout (512 wide, 8 heads, 16 layers, 4 fusion).
    pub fn full(vocab_size: usize) -> Self {
        EncoderConfig {
            d_model: 512,
            n_heads: 8,
            n_layers: 16,
            n_fusion: 4,
            d_ff: 2048,
            kin_hidden: 512,
            rope_split: [20, 20, 24],
            coord_scale: 1e4,
            rope_base: 10_000.0,
            max_seq_len: 192,
            vocab_size,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_self(&self) -> usize {
        self.n_layers - self.n_fusion
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_fusion > self.n_layers {
            return bad(format!("n_fusion {} > n_layers {}", self.n_fusion, self.n_layers));
        }
        if self.rope_split.iter().sum::<usize>() != self.d_head() {
            return bad(format!("rope_split {:?} does not sum to d_head {}", self.rope_split, self.d_head()));
        }
        if self.rope_split.iter().any(|p| p % 2 != 0) || self.d_head() % 2 != 0 {
            return bad("rope blocks must have even sizes".into());
        }
        if self.vocab_size < crate::vocab::NUM_SPECIAL + 1 {
            return bad("vocab_size must cover the special tokens and one cell".into());
        }
        if self.d_ff == 0 || self.kin_hidden == 0 || self.max_seq_len == 0 {
            return bad("zero-sized dimension".into());
        }
        if !(self.rope_base > 1.0) || !self.coord_scale.is_finite() {
            return bad("rope_base must exceed 1 and coord_scale be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_speed: f64,
    pub beta_heading: f64,
    /// Weight of the kinematic loss in the joint objective.
    pub lambda_kin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_speed: 1.0,
            beta_heading: 1.0,
            lambda_kin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.beta_speed, self.beta_heading, self.lambda_kin]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_and_full_are_valid() {
        EncoderConfig::toy(53).validate().unwrap();
        let full = EncoderConfig::full(1497);
        full.validate().unwrap();
        assert_eq!(full.d_head(), 64);
        assert_eq!(full.n_self(), 12);
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut c = EncoderConfig::toy(53);
        c.rope_split = [6, 6, 6];
        assert!(c.validate().is_err());
        c.rope_split = [5, 7, 4];
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy(53);
        c.n_fusion = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy(53);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(LossWeights { beta_speed: -1.0, ..Default::default() }.validate().is_err());
    }
}
