//! Instances, frames and datasets; annotation JSON ingestion and emission;
//! greedy prediction↔GT matching and the GT-relabel experiment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask, FrameSize, RleMask};

/// 1-based class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(u32);

impl ClassId {
    /// Checks `1 ≤ id ≤ class_count`.
    pub fn new(id: u32, class_count: usize) -> Result<Self> {
        if id == 0 || id as usize > class_count {
            return Err(Error::BadTarget {
                target: id,
                class_count,
            });
        }
        Ok(ClassId(id))
    }

    /// Wraps an id without a bound check.
    pub const fn raw(id: u32) -> Self {
        ClassId(id)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Zero-based position, for indexing per-class arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        ClassId(index as u32 + 1)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One detection or ground-truth object.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub frame_id: String,
    pub instance_id: u64,
    pub class: ClassId,
    /// 1.0 for ground truth.
    pub score: f64,
    pub mask: RleMask,
}

impl Instance {
    pub fn decode_mask(&self) -> Result<BinaryMask> {
        self.mask.decode()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub id: String,
    pub size: FrameSize,
}

/// A validated collection of frames and instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    class_count: usize,
    class_names: Vec<String>,
    frames: Vec<Frame>,
    instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(
        class_names: Vec<String>,
        frames: Vec<Frame>,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let ds = Self {
            class_count: class_names.len(),
            class_names,
            frames,
            instances,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::schema("classes", "at least one class is required"));
        }
        let mut sizes: HashMap<&str, FrameSize> = HashMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            if sizes.insert(f.id.as_str(), f.size).is_some() {
                return Err(Error::schema(format!("frames[{i}].id"), format!("duplicate frame id '{}'", f.id)));
            }
        }
        let mut seen: HashSet<(&str, u64)> = HashSet::new();
        for (i, inst) in self.instances.iter().enumerate() {
            let loc = |field: &str| format!("instances[{i}].{field}");
            let size = sizes
                .get(inst.frame_id.as_str())
                .ok_or_else(|| Error::schema(loc("frame_id"), format!("unknown frame '{}'", inst.frame_id)))?;
            if inst.mask.size() != *size {
                return Err(Error::schema(loc("segmentation"), "mask size differs from frame size"));
            }
            if inst.class.get() == 0 || inst.class.get() as usize > self.class_count {
                return Err(Error::schema(
                    loc("class"),
                    format!("class {} outside 1..={}", inst.class, self.class_count),
                ));
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::schema(loc("score"), format!("score {} outside [0, 1]", inst.score)));
            }
            if !seen.insert((inst.frame_id.as_str(), inst.instance_id)) {
                return Err(Error::schema(
                    loc("instance_id"),
                    format!("duplicate instance id {} in frame '{}'", inst.instance_id, inst.frame_id),
                ));
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn frame(&self, id: &str) -> Option<&Frame> {
        self.frames.iter().find(|f| f.id == id)
    }

    /// Instances grouped by frame id, each group in dataset order.
    pub fn by_frame(&self) -> HashMap<&str, Vec<&Instance>> {
        let mut map: HashMap<&str, Vec<&Instance>> =
            self.frames.iter().map(|f| (f.id.as_str(), Vec::new())).collect();
        for inst in &self.instances {
            map.entry(inst.frame_id.as_str()).or_default().push(inst);
        }
        map
    }

    /// Same frames and classes, different instances.
    pub fn with_instances(&self, instances: Vec<Instance>) -> Result<Dataset> {
        Dataset::new(self.class_names.clone(), self.frames.clone(), instances)
    }

    /// Rewrites class labels through `remap` (old id → new id); unmapped
    /// ids are kept. Used to patch known GT labelling mistakes.
    pub fn remap_classes(&self, remap: &BTreeMap<u32, u32>) -> Result<Dataset> {
        let instances = self
            .instances
            .iter()
            .map(|inst| {
                let mut inst = inst.clone();
                if let Some(&to) = remap.get(&inst.class.get()) {
                    inst.class = ClassId::new(to, self.class_count)?;
                }
                Ok(inst)
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_instances(instances)
    }
}

#[derive(Serialize, Deserialize)]
struct RawSegmentation {
    size: [u32; 2],
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    id: String,
    height: u32,
    width: u32,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    frame_id: String,
    instance_id: u64,
    class: u32,
    score: f64,
    segmentation: RawSegmentation,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    class_count: usize,
    classes: Vec<String>,
    frames: Vec<RawFrame>,
    instances: Vec<RawInstance>,
}

impl Dataset {
    /// Parses annotation JSON text.
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Dataset> {
        let raw: RawDataset = serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => Error::schema(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            ),
            _ => Error::Parse {
                path: origin.to_path_buf(),
                message: e.to_string(),
            },
        })?;
        if raw.classes.len() != raw.class_count {
            return Err(Error::schema(
                "classes",
                format!("{} names for class_count {}", raw.classes.len(), raw.class_count),
            ));
        }
        let frames = raw
            .frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                let size = FrameSize::new(f.height, f.width)
                    .map_err(|e| Error::schema(format!("frames[{i}]"), e.to_string()))?;
                Ok(Frame { id: f.id, size })
            })
            .collect::<Result<Vec<_>>>()?;
        let instances = raw
            .instances
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let loc = format!("instances[{i}].segmentation");
                let [h, w] = r.segmentation.size;
                let size = FrameSize::new(h, w).map_err(|e| Error::schema(&loc, e.to_string()))?;
                let mask = RleMask::new(size, r.segmentation.counts)
                    .map_err(|e| Error::schema(&loc, e.to_string()))?;
                Ok(Instance {
                    frame_id: r.frame_id,
                    instance_id: r.instance_id,
                    class: ClassId::raw(r.class),
                    score: r.score,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(raw.classes, frames, instances)
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawDataset {
            class_count: self.class_count,
            classes: self.class_names.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| RawFrame {
                    id: f.id.clone(),
                    height: f.size.height(),
                    width: f.size.width(),
                })
                .collect(),
            instances: self
                .instances
                .iter()
                .map(|i| RawInstance {
                    frame_id: i.frame_id.clone(),
                    instance_id: i.instance_id,
                    class: i.class.get(),
                    score: i.score,
                    segmentation: RawSegmentation {
                        size: [i.mask.size().height(), i.mask.size().width()],
                        counts: i.mask.counts().to_vec(),
                    },
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("dataset serialization cannot fail")
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_json_str(&text, path)
}

/// Writes `ds` after re-checking its invariants, so nothing invalid reaches disk.
pub fn save_annotations(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let path = path.as_ref();
    std::fs::write(path, ds.to_json_string()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchPair {
    pub pred_id: u64,
    pub gt_id: u64,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<u64>,
    pub unmatched_gts: Vec<u64>,
}

/// Indices of `instances` by descending score, ties by lower instance id.
pub fn score_order(instances: &[&Instance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .score
            .total_cmp(&instances[a].score)
            .then(instances[a].instance_id.cmp(&instances[b].instance_id))
    });
    order
}

/// Greedy one-to-one matching within one frame.
///
/// Predictions are visited by descending score; each takes the still
/// unmatched GT of highest IoU (ties to the lower GT id) when that IoU is
/// positive and at least `iou_threshold`.
pub fn match_instances(preds: &[&Instance], gts: &[&Instance], iou_threshold: f64) -> Result<MatchResult> {
    let pred_masks = preds.iter().map(|p| p.decode_mask()).collect::<Result<Vec<_>>>()?;
    let gt_masks = gts.iter().map(|g| g.decode_mask()).collect::<Result<Vec<_>>>()?;
    match_decoded(preds, &pred_masks, gts, &gt_masks, iou_threshold)
}

pub(crate) fn match_decoded(
    preds: &[&Instance],
    pred_masks: &[BinaryMask],
    gts: &[&Instance],
    gt_masks: &[BinaryMask],
    iou_threshold: f64,
) -> Result<MatchResult> {
    let mut gt_taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let iou = mask_iou(&pred_masks[p], &gt_masks[g])?;
            let better = match best {
                None => true,
                Some((bg, biou)) => iou > biou || (iou == biou && gt.instance_id < gts[bg].instance_id),
            };
            if better {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou > 0.0 && iou >= iou_threshold => {
                gt_taken[g] = true;
                result.pairs.push(MatchPair {
                    pred_id: preds[p].instance_id,
                    gt_id: gts[g].instance_id,
                    iou,
                });
            }
            _ => result.unmatched_preds.push(preds[p].instance_id),
        }
    }
    result.unmatched_gts = gts
        .iter()
        .zip(&gt_taken)
        .filter(|(_, &t)| !t)
        .map(|(g, _)| g.instance_id)
        .collect();
    Ok(result)
}

/// Replaces each matched prediction's label with its GT's label.
pub fn relabel_with_gt(preds: &[&Instance], gts: &[&Instance], iou_threshold: f64) -> Result<Vec<Instance>> {
    let m = match_instances(preds, gts, iou_threshold)?;
    let gt_class: HashMap<u64, ClassId> = gts.iter().map(|g| (g.instance_id, g.class)).collect();
    let new_class: HashMap<u64, ClassId> = m.pairs.iter().map(|p| (p.pred_id, gt_class[&p.gt_id])).collect();
    Ok(preds
        .iter()
        .map(|&p| {
            let mut p = p.clone();
            if let Some(&c) = new_class.get(&p.instance_id) {
                p.class = c;
            }
            p
        })
        .collect())
}

/// Frame-by-frame [`relabel_with_gt`] over a whole prediction set.
pub fn relabel_dataset_with_gt(pred: &Dataset, gt: &Dataset, iou_threshold: f64) -> Result<Dataset> {
    let pred_frames = pred.by_frame();
    let gt_frames = gt.by_frame();
    let mut relabeled: HashMap<(String, u64), ClassId> = HashMap::new();
    for frame in pred.frames() {
        let preds = &pred_frames[frame.id.as_str()];
        if preds.is_empty() {
            continue;
        }
        let gts = gt_frames.get(frame.id.as_str()).cloned().unwrap_or_default();
        for inst in relabel_with_gt(preds, &gts, iou_threshold)? {
            relabeled.insert((inst.frame_id.clone(), inst.instance_id), inst.class);
        }
    }
    let instances = pred
        .instances()
        .iter()
        .map(|i| {
            let mut i = i.clone();
            i.class = relabeled[&(i.frame_id.clone(), i.instance_id)];
            i
        })
        .collect();
    Dataset::new(
        // the GT's class table wins so relabelled ids stay in range
        gt.class_names().to_vec(),
        pred.frames().to_vec(),
        instances,
    )
}
