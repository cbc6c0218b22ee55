//! Seeded desk experiment for the MSMA classifier: train on one synthetic
//! scene, classify the predicted masks of another, and compare against a
//! box-attended control and a cross-entropy-only schedule.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::mask::{bbox_of, BinaryMask};
use crate::msma::{accuracy, train, MsmaConfig, MsmaModel, TrainExample, TrainSchedule};
use crate::synth::{generate, SynthConfig, SynthScene};

/// Region the classifier attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    /// The instance mask itself.
    Mask,
    /// Every pixel of the mask's tight bounding box.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: SynthConfig,
    pub test: SynthConfig,
    pub model: MsmaConfig,
    pub schedule: TrainSchedule,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = SynthConfig {
            seed: 1,
            frames: 160,
            ..SynthConfig::default()
        };
        let test = SynthConfig {
            seed: 2,
            frames: 40,
            mask_noise: 0.2,
            ..SynthConfig::default()
        };
        Self {
            train,
            test,
            model: MsmaConfig::default(),
            schedule: TrainSchedule::standard(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub train_instances: usize,
    pub test_instances: usize,
    /// Arc schedule, mask attention.
    pub mask_accuracy: f64,
    /// Arc schedule, bounding-box attention in training and testing.
    pub box_accuracy: f64,
    /// Cross-entropy-only schedule, mask attention.
    pub ce_only_accuracy: f64,
}

/// One example per instance of `masks_from`, labelled with the GT class of
/// the same frame and instance id.
pub fn scene_examples(scene: &SynthScene, masks_from: &Dataset, attention: Attention) -> Result<Vec<TrainExample>> {
    let pyramids: Vec<Arc<_>> = scene.pyramids.iter().cloned().map(Arc::new).collect();
    let frame_index: std::collections::HashMap<&str, usize> =
        scene.gt.frames().iter().enumerate().map(|(i, f)| (f.id.as_str(), i)).collect();
    let labels: std::collections::HashMap<(&str, u64), _> = scene
        .gt
        .instances()
        .iter()
        .map(|i| ((i.frame_id.as_str(), i.instance_id), i.class))
        .collect();
    masks_from
        .instances()
        .iter()
        .map(|inst| {
            let mask = inst.decode_mask()?;
            let mask = match attention {
                Attention::Mask => mask,
                Attention::Box => BinaryMask::from_box(mask.size(), &bbox_of(&mask)?)?,
            };
            Ok(TrainExample {
                pyramid: pyramids[frame_index[inst.frame_id.as_str()]].clone(),
                mask,
                target: labels[&(inst.frame_id.as_str(), inst.instance_id)],
            })
        })
        .collect()
}

fn fit_and_score(
    cfg: &ExperimentConfig,
    train_scene: &SynthScene,
    test_scene: &SynthScene,
    attention: Attention,
    schedule: &TrainSchedule,
) -> Result<f64> {
    let train_set = scene_examples(train_scene, &train_scene.gt, attention)?;
    let test_set = scene_examples(test_scene, &test_scene.pred, attention)?;
    let model = MsmaModel::new(&cfg.train.level_dims(), cfg.train.class_count, &cfg.model, cfg.seed)?;
    let (model, _) = train(model, &train_set, schedule, cfg.seed)?;
    accuracy(&model, &test_set)
}

/// Trains three models on the train scene (GT masks and labels) and
/// scores them on the test scene's predicted masks against GT labels.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let train_scene = generate(&cfg.train)?;
    let test_scene = generate(&cfg.test)?;
    let ce_only = cfg.schedule.clone().cross_entropy_only();
    Ok(ExperimentReport {
        train_instances: train_scene.gt.instances().len(),
        test_instances: test_scene.pred.instances().len(),
        mask_accuracy: fit_and_score(cfg, &train_scene, &test_scene, Attention::Mask, &cfg.schedule)?,
        box_accuracy: fit_and_score(cfg, &train_scene, &test_scene, Attention::Box, &cfg.schedule)?,
        ce_only_accuracy: fit_and_score(cfg, &train_scene, &test_scene, Attention::Mask, &ce_only)?,
    })
}
