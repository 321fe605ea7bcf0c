use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel width of contextual features at full scale.
pub const FULL_CHANNELS: usize = 128;
/// Update iterations at full scale.
pub const FULL_ITERS: usize = 22;
/// Feature resolutions relative to the input.
pub const SCALES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TscaConfig {
    pub height: usize,
    pub width: usize,
    /// Base channel count `c`; also the GRU hidden width at every scale.
    pub channels: usize,
    /// Correlation groups.
    pub groups: usize,
    /// Disparity bins at 1/4 resolution.
    pub d_max: usize,
    /// GRU update iterations `K`.
    pub iters: usize,
    /// Lookup radius around the current disparity, in bins.
    pub radius: usize,
    pub gamma: f64,
    pub seca: bool,
    pub triplet: bool,
}

impl Default for TscaConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 8,
            groups: 1,
            d_max: 16,
            iters: 4,
            radius: 2,
            gamma: 0.9,
            seca: true,
            triplet: true,
        }
    }
}

impl TscaConfig {
    /// Small configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 4,
            d_max: 8,
            iters: 2,
            ..Self::default()
        }
    }

    /// The four ablation rows: full, TA only, SECA only, neither.
    pub fn ablations(&self) -> [(&'static str, TscaConfig); 4] {
        let with = |triplet, seca| TscaConfig {
            triplet,
            seca,
            ..self.clone()
        };
        [
            ("baseline", with(false, false)),
            ("ta", with(true, false)),
            ("seca", with(false, true)),
            ("ta+seca", with(true, true)),
        ]
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Largest disparity the network can emit at input resolution.
    pub fn max_full_disparity(&self) -> f64 {
        4.0 * (self.d_max - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::InvalidArgument(format!(
                "input {}×{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("channels must be even and ≥ 2, got {}", self.channels)));
        }
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide channels {}",
                self.groups, self.channels
            )));
        }
        if self.d_max == 0 || !self.d_max.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!("d_max must be a positive multiple of 8, got {}", self.d_max)));
        }
        let (_, w4) = self.feature_dims();
        if self.d_max > w4 {
            return Err(Error::InvalidArgument(format!("d_max {} exceeds feature width {w4}", self.d_max)));
        }
        if self.iters == 0 {
            return Err(Error::InvalidArgument("iters must be ≥ 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}
