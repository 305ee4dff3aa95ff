use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coupling {
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Permutation {
    /// Learned invertible 1x1x1 convolution.
    InvConv,
}

/// Architecture of the multiscale flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Edge length of the cubic input volume.
    pub resolution: usize,
    /// Input channels.
    pub channels: usize,
    /// Number of squeeze/split levels.
    pub levels: usize,
    /// Flow steps (actnorm, 1x1x1 conv, coupling) per level.
    pub depth: usize,
    /// Hidden width of the coupling networks.
    pub width: usize,
    pub coupling: Coupling,
    pub permutation: Permutation,
    /// Learn the mean and log-scale of the top-level prior.
    pub learn_top: bool,
}

impl FlowConfig {
    pub fn new(resolution: usize, levels: usize, depth: usize, width: usize) -> Result<Self> {
        let cfg = FlowConfig {
            resolution,
            channels: 1,
            levels,
            depth,
            width,
            coupling: Coupling::Affine,
            permutation: Permutation::InvConv,
            learn_top: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-scale architecture: 128^3 input, 5 levels of depth 8, width 512.
    pub fn full_scale() -> Self {
        FlowConfig::new(128, 5, 8, 512).expect("valid")
    }

    /// Desktop default: 32^3 input, 3 levels of depth 2, width 16.
    pub fn desk() -> Self {
        FlowConfig::new(32, 3, 2, 16).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.depth == 0 || self.width == 0 || self.channels == 0 {
            return Err(contract(format!(
                "levels, depth, width and channels must all be >= 1 (got {self:?})"
            )));
        }
        let block = 1usize
            .checked_shl(self.levels as u32)
            .filter(|b| *b <= self.resolution)
            .ok_or_else(|| contract(format!("resolution {} too small for {} levels", self.resolution, self.levels)))?;
        if !self.resolution.is_multiple_of(block) {
            return Err(contract(format!(
                "resolution {} must be divisible by 2^{} = {block}",
                self.resolution, self.levels
            )));
        }
        Ok(())
    }

    /// Spatial edge length inside level `l` (1-based).
    pub fn level_extent(&self, l: usize) -> usize {
        self.resolution >> l
    }

    /// Channels processed by the flow steps of level `l` (after squeezing).
    pub fn step_channels(&self, l: usize) -> usize {
        2 * self.channels * 4usize.pow(l as u32)
    }

    /// Shape of latent `z_l`: levels below the top emit half of their
    /// channels (`C * 4^l`); the top level keeps all `2 * C * 4^L`.
    pub fn latent_shape(&self, l: usize) -> [usize; 4] {
        let s = self.level_extent(l);
        let c = if l == self.levels {
            self.step_channels(l)
        } else {
            self.step_channels(l) / 2
        };
        [s, s, s, c]
    }

    pub fn latent_shapes(&self) -> Vec<[usize; 4]> {
        (1..=self.levels).map(|l| self.latent_shape(l)).collect()
    }

    pub fn input_shape(&self) -> [usize; 4] {
        let r = self.resolution;
        [r, r, r, self.channels]
    }

    /// Total input dimension `R^3 * C`.
    pub fn dims(&self) -> usize {
        self.resolution.pow(3) * self.channels
    }
}
