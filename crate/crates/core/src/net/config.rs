use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the conditional velocity U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityNetConfig {
    pub base_channels: usize,
    /// One entry per resolution stage; stage `i` runs at `input_side / 2^i`.
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    /// Feature-map sides that get self-attention, expressed at
    /// `attention_reference_side` and rescaled to `input_side`.
    pub attention_at: Vec<usize>,
    pub attention_reference_side: usize,
    pub attention_heads: usize,
    pub dropout_p: f64,
    pub cond_channels: usize,
    pub time_embed_dim: usize,
    pub input_side: usize,
    pub norm_groups: usize,
    /// Zero the final projection so an untrained net predicts `v = 0`.
    pub zero_init_output: bool,
}

impl Default for VelocityNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VelocityNetConfig {
    /// Full-size 128³ network: 64·(1, 1, 2, 3, 4) channels, attention at 16³ and 8³.
    pub fn full_size() -> Self {
        Self {
            base_channels: 64,
            channel_multipliers: vec![1, 1, 2, 3, 4],
            blocks_per_level: 1,
            attention_at: vec![16, 8],
            attention_reference_side: 128,
            attention_heads: 1,
            dropout_p: 0.05,
            cond_channels: 64,
            time_embed_dim: 256,
            input_side: 128,
            norm_groups: 8,
            zero_init_output: true,
        }
    }

    /// 16³ network small enough for CPU training; attention on its two
    /// coarsest stages (8³ and 4³).
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            attention_at: vec![64, 32],
            cond_channels: 16,
            time_embed_dim: 64,
            input_side: 16,
            ..Self::full_size()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len().saturating_sub(1)
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels * self.channel_multipliers[stage]
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_side >> stage
    }

    /// Attention sides rescaled to this network's input side.
    pub fn attention_sides(&self) -> Vec<usize> {
        self.attention_at
            .iter()
            .map(|&s| s * self.input_side / self.attention_reference_side)
            .collect()
    }

    pub fn has_attention(&self, stage: usize) -> bool {
        self.attention_sides().contains(&self.stage_side(stage))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return err("channel_multipliers must be nonempty and positive".into());
        }
        if self.base_channels == 0 || self.cond_channels == 0 || self.time_embed_dim == 0 {
            return err("channel counts must be positive".into());
        }
        if self.blocks_per_level == 0 {
            return err("blocks_per_level must be >= 1".into());
        }
        let levels = self.levels();
        if self.input_side == 0 || !self.input_side.is_multiple_of(1 << levels) {
            return err(format!(
                "input_side {} is not divisible by 2^{levels}",
                self.input_side
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.attention_reference_side == 0 {
            return err("attention_reference_side must be positive".into());
        }
        let sides: Vec<usize> = (0..=levels).map(|s| self.stage_side(s)).collect();
        for (&given, side) in self.attention_at.iter().zip(self.attention_sides()) {
            if !(given * self.input_side).is_multiple_of(self.attention_reference_side)
                || !sides.contains(&side)
            {
                return err(format!(
                    "attention side {given} (at reference {}) maps to {side}, not one of the realized sides {sides:?}",
                    self.attention_reference_side
                ));
            }
        }
        let groups = self.norm_groups;
        if groups == 0 || (0..=levels).any(|s| !self.stage_channels(s).is_multiple_of(groups)) {
            return err(format!(
                "every stage channel count must be divisible by norm_groups {groups}"
            ));
        }
        if self.attention_heads == 0
            || (0..=levels).any(|s| {
                self.has_attention(s)
                    && !self.stage_channels(s).is_multiple_of(self.attention_heads)
            })
        {
            return err(format!(
                "attention_heads {} must divide attended channel counts",
                self.attention_heads
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_plan() {
        let cfg = VelocityNetConfig::full_size();
        cfg.validate().unwrap();
        assert_eq!(cfg.levels(), 4);
        let channels: Vec<usize> = (0..5).map(|s| cfg.stage_channels(s)).collect();
        assert_eq!(channels, [64, 64, 128, 192, 256]);
        let attended: Vec<usize> = (0..5)
            .filter(|&s| cfg.has_attention(s))
            .map(|s| cfg.stage_side(s))
            .collect();
        assert_eq!(attended, [16, 8]);
    }

    #[test]
    fn desk_plan_keeps_two_coarsest_attention_stages() {
        let cfg = VelocityNetConfig::desk();
        cfg.validate().unwrap();
        let attended: Vec<usize> = (0..=cfg.levels())
            .filter(|&s| cfg.has_attention(s))
            .collect();
        assert_eq!(attended, [1, 2]);
    }

    #[test]
    fn invalid_configs() {
        let bad_side = VelocityNetConfig {
            input_side: 18,
            ..VelocityNetConfig::desk()
        };
        assert!(bad_side.validate().is_err());
        let bad_attn = VelocityNetConfig {
            attention_at: vec![48],
            ..VelocityNetConfig::desk()
        };
        assert!(bad_attn.validate().is_err());
        let bad_groups = VelocityNetConfig {
            norm_groups: 5,
            ..VelocityNetConfig::desk()
        };
        assert!(bad_groups.validate().is_err());
    }
}
