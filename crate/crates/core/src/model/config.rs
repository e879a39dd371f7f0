//! Model hyperparameters.

use crate::det::{AnchorConfig, ProposalConfig, RoiSampleConfig, RpnAssignConfig};
use crate::error::{Error, Result};

/// Backbone variants. Both end at stride 8: the last two poolings are
/// removed to keep resolution for small lesions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackbonePreset {
    /// 13 conv layers in five blocks, pools after the first three blocks.
    Vgg16Like,
    /// Four thin stages for desk-scale runs, pools after the first three.
    Tiny,
}

impl BackbonePreset {
    pub fn name(&self) -> &'static str {
        match self {
            BackbonePreset::Vgg16Like => "vgg16-like",
            BackbonePreset::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vgg16-like" => Ok(BackbonePreset::Vgg16Like),
            "tiny" => Ok(BackbonePreset::Tiny),
            other => Err(Error::InvalidConfig(format!("unknown backbone preset {other:?}"))),
        }
    }

    pub fn stride(&self) -> usize {
        8
    }
}

/// Weight initialization scheme for feature layers (backbone, conv6, the
/// RPN conv, and fc7). Classifier heads always use std 0.01 and regression
/// heads std 0.001 with zero biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Zero-mean normal with std 0.01 on feature layers.
    SmallNormal,
    /// Fan-in scaled normal (std = sqrt(2/fan_in)) on feature layers,
    /// needed when the whole backbone trains from random initialization.
    HeFeature,
}

/// All detector hyperparameters.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// number of 3-channel images per sample (odd)
    pub m: usize,
    /// thin feature depth after conv6
    pub d: usize,
    /// pooled grid size
    pub s: usize,
    pub anchors: AnchorConfig,
    pub backbone: BackbonePreset,
    pub init: InitScheme,
    /// loss weight of the head bounding-box regression term
    pub bbox_reg_loss_weight: f32,
    pub base_lr: f64,
    /// learning rate is multiplied by 0.1 after each of these epochs
    pub lr_decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub fc7_width: usize,
    pub rpn_assign: RpnAssignConfig,
    pub roi_sample: RoiSampleConfig,
    pub proposal_train: ProposalConfig,
    pub proposal_test: ProposalConfig,
    /// per-class NMS threshold on final detections
    pub final_nms: f32,
    /// minimum score kept by inference (0 keeps everything)
    pub min_score: f32,
}

impl ModelConfig {
    pub fn new(backbone: BackbonePreset, m: usize) -> Self {
        let fc7_width = match backbone {
            BackbonePreset::Vgg16Like => 2048,
            BackbonePreset::Tiny => 256,
        };
        ModelConfig {
            m,
            d: 10,
            s: 7,
            anchors: AnchorConfig { scales: vec![16.0, 24.0, 32.0, 48.0, 96.0], ratios: vec![0.5, 1.0, 2.0], stride: backbone.stride() },
            backbone,
            init: InitScheme::HeFeature,
            bbox_reg_loss_weight: 10.0,
            base_lr: 1e-3,
            lr_decay_epochs: vec![4, 5],
            epochs: 6,
            momentum: 0.9,
            weight_decay: 5e-4,
            fc7_width,
            rpn_assign: RpnAssignConfig::default(),
            roi_sample: RoiSampleConfig::default(),
            proposal_train: match backbone {
                BackbonePreset::Vgg16Like => ProposalConfig::train_default(),
                BackbonePreset::Tiny => ProposalConfig::train_desk(),
            },
            proposal_test: match backbone {
                BackbonePreset::Vgg16Like => ProposalConfig::test_default(),
                BackbonePreset::Tiny => ProposalConfig::test_desk(),
            },
            final_nms: 0.3,
            min_score: 0.0,
        }
    }

    pub fn vgg16_like(m: usize) -> Self {
        Self::new(BackbonePreset::Vgg16Like, m)
    }

    pub fn tiny(m: usize) -> Self {
        Self::new(BackbonePreset::Tiny, m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m % 2 == 0 || self.m == 0 {
            return Err(Error::InvalidConfig(format!("M must be odd and >= 1, got {}", self.m)));
        }
        if self.d == 0 || self.s == 0 {
            return Err(Error::InvalidConfig("D and S must be >= 1".into()));
        }
        self.anchors.validate()?;
        if self.anchors.stride != self.backbone.stride() {
            return Err(Error::InvalidConfig(format!(
                "anchor stride {} must match backbone stride {}",
                self.anchors.stride,
                self.backbone.stride()
            )));
        }
        if self.fc7_width == 0 {
            return Err(Error::InvalidConfig("fc7 width must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("base learning rate must be positive".into()));
        }
        let fused = self.fused_channels();
        if fused != self.s * self.s * self.d * self.m {
            return Err(Error::InvalidConfig("fused channel arithmetic violated".into()));
        }
        Ok(())
    }

    /// Channels of the concatenated (fused) feature map: S^2 * D * M.
    pub fn fused_channels(&self) -> usize {
        self.conv6_channels() * self.m
    }

    /// Channels each image contributes after conv6: S^2 * D.
    pub fn conv6_channels(&self) -> usize {
        self.s * self.s * self.d
    }

    /// PSROI output channels per ROI: D * M.
    pub fn psroi_channels(&self) -> usize {
        self.d * self.m
    }

    /// Flattened head input per ROI: S^2 * D * M.
    pub fn head_input_width(&self) -> usize {
        self.psroi_channels() * self.s * self.s
    }

    /// Two samples per minibatch for small M, one for M >= 7.
    pub fn samples_per_minibatch(&self) -> usize {
        if self.m < 7 {
            2
        } else {
            1
        }
    }

    /// Learning rate for a 1-based epoch index: the base rate is reduced
    /// by a factor of 10 after each epoch listed in `lr_decay_epochs`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch > e).count();
        self.base_lr / 10f64.powi(decays as i32)
    }

    /// Stable fingerprint of the architecture-relevant fields, stored in
    /// checkpoints so mismatched loads are rejected.
    pub fn fingerprint(&self) -> u64 {
        let canon = format!(
            "m={};d={};s={};scales={:?};ratios={:?};stride={};backbone={};fc7={}",
            self.m,
            self.d,
            self.s,
            self.anchors.scales,
            self.anchors.ratios,
            self.anchors.stride,
            self.backbone.name(),
            self.fc7_width,
        );
        fnv1a64(canon.as_bytes())
    }
}

/// FNV-1a: stable across platforms and builds, unlike the std hasher.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_arithmetic_matches_s2dm() {
        for m in [1usize, 3, 5, 9] {
            let cfg = ModelConfig::tiny(m);
            cfg.validate().unwrap();
            assert_eq!(cfg.fused_channels(), 49 * 10 * m);
            assert_eq!(cfg.psroi_channels(), 10 * m);
            assert_eq!(cfg.head_input_width(), 49 * 10 * m);
        }
    }

    #[test]
    fn minibatch_rule() {
        assert_eq!(ModelConfig::tiny(1).samples_per_minibatch(), 2);
        assert_eq!(ModelConfig::tiny(3).samples_per_minibatch(), 2);
        assert_eq!(ModelConfig::tiny(5).samples_per_minibatch(), 2);
        assert_eq!(ModelConfig::tiny(7).samples_per_minibatch(), 1);
        assert_eq!(ModelConfig::tiny(9).samples_per_minibatch(), 1);
    }

    #[test]
    fn lr_schedule_decays_after_epochs_4_and_5() {
        let cfg = ModelConfig::tiny(3);
        for e in 1..=4 {
            assert_eq!(cfg.lr_for_epoch(e), 1e-3);
        }
        assert_eq!(cfg.lr_for_epoch(5), 1e-4);
        assert_eq!(cfg.lr_for_epoch(6), 1e-5);
    }

    #[test]
    fn rejects_even_m_and_stride_mismatch() {
        let mut cfg = ModelConfig::tiny(2);
        assert!(cfg.validate().is_err());
        cfg.m = 3;
        cfg.anchors.stride = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelConfig::tiny(3);
        let mut b = ModelConfig::tiny(3);
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.m = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = ModelConfig::tiny(3);
        c.base_lr = 0.5; // training detail, not architecture
        assert_eq!(a.fingerprint(), c.fingerprint());
    }
}
