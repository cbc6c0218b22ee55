//! Post-processing of second-stage detections: score filtering,
//! mask-IoU non-maximal suppression and top-K retention.
//!
//! [`cross_class_nms`] rejects an overlapping mask whatever its class, which
//! removes the duplicate detections a weak classifier produces when one
//! object is proposed several times with different labels.
//! [`standard_nms`] is the per-class baseline.

use serde::{Deserialize, Serialize};

use crate::data::{score_order, Instance};
use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuppressConfig {
    pub score_threshold: f64,
    pub top_k: usize,
    pub iou_threshold: f64,
}

impl Default for SuppressConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.0,
            top_k: 5,
            iou_threshold: 0.5,
        }
    }
}

impl SuppressConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!("score_threshold {} outside [0, 1]", self.score_threshold)));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!("iou_threshold {} outside [0, 1]", self.iou_threshold)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    /// Overlaps are rejected regardless of class.
    Cross,
    /// Overlaps are rejected only within a class.
    Standard,
}

/// Suppression across classes. Output is in descending score order.
pub fn cross_class_nms(instances: &[Instance], cfg: &SuppressConfig) -> Result<Vec<Instance>> {
    nms(instances, cfg, NmsMode::Cross)
}

/// Suppression within classes only.
pub fn standard_nms(instances: &[Instance], cfg: &SuppressConfig) -> Result<Vec<Instance>> {
    nms(instances, cfg, NmsMode::Standard)
}

pub fn nms(instances: &[Instance], cfg: &SuppressConfig, mode: NmsMode) -> Result<Vec<Instance>> {
    let kept = nms_untruncated(instances, cfg, mode)?;
    Ok(kept.into_iter().take(cfg.top_k).collect())
}

/// Steps 1-3 of suppression, before top-K truncation.
pub fn nms_untruncated(instances: &[Instance], cfg: &SuppressConfig, mode: NmsMode) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let candidates: Vec<&Instance> = instances
        .iter()
        .filter(|i| i.score >= cfg.score_threshold)
        .collect();
    if let Some(first) = candidates.first() {
        if let Some(bad) = candidates.iter().find(|i| i.mask.size() != first.mask.size()) {
            return Err(Error::SizeMismatch(format!(
                "instance {} has a different frame size than instance {}",
                bad.instance_id, first.instance_id
            )));
        }
    }
    let masks = candidates.iter().map(|i| i.decode_mask()).collect::<Result<Vec<BinaryMask>>>()?;

    let mut kept: Vec<usize> = Vec::new();
    for idx in score_order(&candidates) {
        let mut suppressed = false;
        for &k in &kept {
            if mode == NmsMode::Standard && candidates[k].class != candidates[idx].class {
                continue;
            }
            if mask_iou(&masks[idx], &masks[k])? > cfg.iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(idx);
        }
    }
    Ok(kept.into_iter().map(|i| candidates[i].clone()).collect())
}
