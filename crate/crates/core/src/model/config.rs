use crate::config::{parse_pair, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::PoolKind;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of slices along the beam axis (L).
    pub seq_len: usize,
    /// Slice height (H).
    pub height: usize,
    /// Slice width (W).
    pub width: usize,
    /// Transformer blocks (N).
    pub blocks: usize,
    /// Filters of the last encoder convolution (K).
    pub filters: usize,
    /// Attention heads (N_h).
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
    /// Channels of the two encoder blocks; the decoder mirrors them.
    pub encoder_channels: (usize, usize),
    /// Energy interval `[min, max]` in MeV used for normalisation.
    pub energy_range: (f64, f64),
    pub pool: PoolKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on a single CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            seq_len: 64,
            height: 16,
            width: 8,
            blocks: 1,
            filters: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout_rate: 0.1,
            encoder_channels: (8, 16),
            energy_range: (80.0, 130.0),
            pool: PoolKind::Average,
        }
    }

    /// Full-size blocks of 256 x 48 x 16 voxels (token size 480).
    pub fn paper() -> Self {
        ModelConfig {
            seq_len: 256,
            height: 48,
            width: 16,
            blocks: 1,
            filters: 10,
            heads: 16,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown model preset '{}'", other))),
        }
    }

    /// Token dimension D = (H/4)(W/4)K.
    pub fn token_dim(&self) -> usize {
        (self.height / 4) * (self.width / 4) * self.filters
    }

    /// Per-head dimension D_h = D / N_h.
    pub fn head_dim(&self) -> usize {
        self.token_dim() / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.token_dim()
    }

    /// Group count for a GroupNorm over `channels`.
    pub fn norm_groups(channels: usize) -> usize {
        channels.min(4)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seq_len == 0
            || self.blocks == 0
            || self.filters == 0
            || self.heads == 0
            || self.mlp_ratio == 0
        {
            return fail("seq_len, blocks, filters, heads and mlp_ratio must be positive".into());
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return fail(format!(
                "height {} and width {} must be positive multiples of 4",
                self.height, self.width
            ));
        }
        if !self.token_dim().is_multiple_of(self.heads) {
            return fail(format!(
                "token dim {} is not divisible by {} heads",
                self.token_dim(),
                self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        let (c1, c2) = self.encoder_channels;
        for c in [c1, c2] {
            if c == 0 || c % Self::norm_groups(c) != 0 {
                return fail(format!(
                    "encoder channel count {} cannot be group-normalised",
                    c
                ));
            }
        }
        let (lo, hi) = self.energy_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return fail(format!(
                "energy range {:?} must be increasing",
                self.energy_range
            ));
        }
        Ok(())
    }

    /// Maps an energy in MeV onto `[0, 1]` over the configured range.
    pub fn normalize_energy(&self, energy: f64) -> f64 {
        let (lo, hi) = self.energy_range;
        (energy - lo) / (hi - lo)
    }

    pub fn energy_in_range(&self, energy: f64) -> bool {
        let (lo, hi) = self.energy_range;
        (lo..=hi).contains(&energy)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seq_len", self.seq_len);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("blocks", self.blocks);
        kv.set("filters", self.filters);
        kv.set("heads", self.heads);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("dropout_rate", self.dropout_rate);
        kv.set(
            "encoder_channels",
            format!("{},{}", self.encoder_channels.0, self.encoder_channels.1),
        );
        kv.set(
            "energy_range",
            format!("{},{}", self.energy_range.0, self.energy_range.1),
        );
        kv.set("pool", self.pool);
        kv
    }

    /// Reads a config; a `preset` key selects the base, other keys override it.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let base = match kv.get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::desk(),
        };
        let channels = match kv.get("encoder_channels") {
            Some(s) => parse_pair(s)?,
            None => base.encoder_channels,
        };
        let energy_range = match kv.get("energy_range") {
            Some(s) => parse_pair(s)?,
            None => base.energy_range,
        };
        let cfg = ModelConfig {
            seq_len: kv.parsed_or("seq_len", base.seq_len)?,
            height: kv.parsed_or("height", base.height)?,
            width: kv.parsed_or("width", base.width)?,
            blocks: kv.parsed_or("blocks", base.blocks)?,
            filters: kv.parsed_or("filters", base.filters)?,
            heads: kv.parsed_or("heads", base.heads)?,
            mlp_ratio: kv.parsed_or("mlp_ratio", base.mlp_ratio)?,
            dropout_rate: kv.parsed_or("dropout_rate", base.dropout_rate)?,
            encoder_channels: channels,
            energy_range,
            pool: kv.parsed_or("pool", base.pool)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_dims() {
        let paper = ModelConfig::paper();
        assert_eq!(paper.token_dim(), 480);
        assert_eq!(paper.head_dim(), 30);
        let desk = ModelConfig::desk();
        assert_eq!(desk.token_dim(), 32);
        assert_eq!(desk.head_dim(), 8);
        desk.validate().unwrap();
        paper.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut c = ModelConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.height = 18;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.encoder_channels = (6, 16);
        assert!(c.validate().is_err());
    }

    #[test]
    fn key_value_round_trip_and_overrides() {
        let c = ModelConfig::paper();
        assert_eq!(ModelConfig::from_key_values(&c.to_key_values()).unwrap(), c);
        let kv = KeyValues::parse("preset = paper\nfilters = 16\nheads = 8\npool = max").unwrap();
        let c = ModelConfig::from_key_values(&kv).unwrap();
        assert_eq!(
            (c.filters, c.heads, c.seq_len, c.pool),
            (16, 8, 256, PoolKind::Max)
        );
    }

    #[test]
    fn energy_normalisation() {
        let c = ModelConfig::desk();
        assert_eq!(c.normalize_energy(80.0), 0.0);
        assert_eq!(c.normalize_energy(130.0), 1.0);
        assert!(c.energy_in_range(104.25));
        assert!(!c.energy_in_range(140.0));
    }
}
