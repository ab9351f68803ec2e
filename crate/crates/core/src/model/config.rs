use serde::{Deserialize, Serialize};

use crate::data::{PAST_LEN, PRED_LEN};
use crate::error::{Error, Result};

/// Layer widths and flow settings of the forecaster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub past_len: usize,
    pub horizon: usize,
    /// Width of the trajectory embedding and of the encoder LSTM.
    pub enc_hidden: usize,
    /// Side of the pooled scene-context grid fed to the backbone.
    pub ctx_size: usize,
    /// Output channels of conv1..conv4; conv3 is the global feature map.
    pub conv_channels: [usize; 4],
    /// Side of the upsampled local feature map.
    pub local_size: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    /// Verlet degradation coefficient of the mean constraint.
    pub alpha: f64,
}

impl ModelConfig {
    /// Widths of the published architecture.
    pub fn paper() -> Self {
        ModelConfig {
            past_len: PAST_LEN,
            horizon: PRED_LEN,
            enc_hidden: 128,
            ctx_size: 64,
            conv_channels: [16, 16, 32, 6],
            local_size: 100,
            dec_hidden: 150,
            att_dim: 150,
            fc_hidden: 50,
            dropout: 0.5,
            alpha: 0.5,
        }
    }

    /// Same topology with narrower layers, sized for single-core training runs.
    pub fn desk() -> Self {
        ModelConfig {
            enc_hidden: 32,
            ctx_size: 32,
            conv_channels: [8, 8, 16, 6],
            local_size: 50,
            dec_hidden: 32,
            att_dim: 32,
            fc_hidden: 32,
            ..Self::paper()
        }
    }

    /// Tiny configuration for finite-difference checks on 8x8 maps.
    pub fn micro(horizon: usize) -> Self {
        ModelConfig {
            past_len: PAST_LEN,
            horizon,
            enc_hidden: 6,
            ctx_size: 8,
            conv_channels: [3, 3, 4, 2],
            local_size: 6,
            dec_hidden: 5,
            att_dim: 5,
            fc_hidden: 4,
            dropout: 0.0,
            alpha: 0.5,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Precondition(format!("unknown model preset {name:?} (paper, desk)"))),
        }
    }

    /// Side of the global feature map.
    pub fn global_size(&self) -> usize {
        self.ctx_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.enc_hidden, self.dec_hidden, self.att_dim, self.fc_hidden, self.local_size];
        if self.past_len < 2 || self.horizon == 0 || widths.contains(&0) || self.conv_channels.contains(&0) {
            return Err(Error::Precondition("model widths and lengths must be positive".into()));
        }
        if self.ctx_size < 2 || !self.ctx_size.is_multiple_of(2) {
            return Err(Error::Precondition(format!("ctx_size {} must be even", self.ctx_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Precondition(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Precondition("alpha must be finite".into()));
        }
        Ok(())
    }
}
