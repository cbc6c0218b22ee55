//! Evaluation suite: Challenge IoU, ISINet IoU, mean-class IoU and AP50.
//!
//! All IoU metrics start from one quantity, the IoU between the pixel union
//! of every predicted instance of a class in a frame and the pixel union of
//! every GT instance of that class in the same frame. They differ only in
//! which (frame, class) terms they average and in what order:
//!
//! - Challenge IoU: per frame, mean over the classes in that frame's GT;
//!   then mean over frames that have any GT.
//! - ISI IoU: per frame, mean over GT ∪ predicted classes, so hallucinated
//!   classes add zero terms; frames with only predictions count as 0.
//! - mean-class IoU: per class, mean over frames where the class is in GT or
//!   prediction; then mean over every class that appears anywhere.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{match_decoded, ClassId, Dataset, Instance};
use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask};

pub const AP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameClassIou {
    pub frame_id: String,
    pub class: ClassId,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ap50 {
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ch_iou: f64,
    pub isi_iou: f64,
    pub mc_iou: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub ap50: Ap50,
}

/// Union of all masks of one class in one frame; `None` when absent.
fn class_union(instances: &[&Instance], class: ClassId) -> Result<Option<BinaryMask>> {
    let mut acc: Option<BinaryMask> = None;
    for inst in instances.iter().filter(|i| i.class == class) {
        let m = inst.decode_mask()?;
        match acc.as_mut() {
            None => acc = Some(m),
            Some(a) => a.union_in_place(&m)?,
        }
    }
    Ok(acc)
}

/// Semantic IoU of class `class` in one frame. Returns 0 when exactly one
/// side is absent, and also when both are.
pub fn frame_class_iou(preds: &[&Instance], gts: &[&Instance], class: ClassId) -> Result<f64> {
    match (class_union(preds, class)?, class_union(gts, class)?) {
        (Some(p), Some(g)) => mask_iou(&p, &g),
        _ => Ok(0.0),
    }
}

/// Per-frame class IoUs with the class sets each metric needs.
struct FrameTerms {
    gt_classes: BTreeSet<ClassId>,
    iou: BTreeMap<ClassId, f64>,
}

fn frame_terms(preds: &[&Instance], gts: &[&Instance]) -> Result<FrameTerms> {
    let gt_classes: BTreeSet<ClassId> = gts.iter().map(|i| i.class).collect();
    let pred_classes: BTreeSet<ClassId> = preds.iter().map(|i| i.class).collect();
    let iou = gt_classes
        .union(&pred_classes)
        .map(|&c| Ok((c, frame_class_iou(preds, gts, c)?)))
        .collect::<Result<_>>()?;
    Ok(FrameTerms { gt_classes, iou })
}

/// Predictions grouped onto the GT's frames, after checking compatibility.
fn paired_frames<'a>(gt: &'a Dataset, pred: &'a Dataset) -> Result<Vec<(&'a str, Vec<&'a Instance>, Vec<&'a Instance>)>> {
    let mut pred_by: HashMap<&str, Vec<&Instance>> = HashMap::new();
    for inst in pred.instances() {
        let frame = gt.frame(&inst.frame_id).ok_or_else(|| {
            Error::schema(
                format!("prediction {}/{}", inst.frame_id, inst.instance_id),
                "frame not present in ground truth",
            )
        })?;
        if frame.size != inst.mask.size() {
            return Err(Error::SizeMismatch(format!(
                "prediction {}/{} mask size differs from GT frame",
                inst.frame_id, inst.instance_id
            )));
        }
        pred_by.entry(inst.frame_id.as_str()).or_default().push(inst);
    }
    let mut gt_by = gt.by_frame();
    if gt.instances().is_empty() {
        return Err(Error::EmptyDataset("ground truth has no instances".into()));
    }
    Ok(gt
        .frames()
        .iter()
        .map(|f| {
            let id = f.id.as_str();
            (id, pred_by.remove(id).unwrap_or_default(), gt_by.remove(id).unwrap_or_default())
        })
        .collect())
}

fn all_frame_terms(gt: &Dataset, pred: &Dataset) -> Result<Vec<FrameTerms>> {
    let frames = paired_frames(gt, pred)?;
    frames
        .par_iter()
        .map(|(_, p, g)| frame_terms(p, g))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn challenge_from(terms: &[FrameTerms]) -> Result<f64> {
    let per_frame = terms
        .iter()
        .filter(|t| !t.gt_classes.is_empty())
        .map(|t| mean(t.gt_classes.iter().map(|c| t.iou[c])).unwrap());
    mean(per_frame).ok_or_else(|| Error::EmptyDataset("no frame has ground truth".into()))
}

fn isi_from(terms: &[FrameTerms]) -> Result<f64> {
    let per_frame = terms
        .iter()
        .filter(|t| !t.iou.is_empty())
        .map(|t| mean(t.iou.values().copied()).unwrap());
    mean(per_frame).ok_or_else(|| Error::EmptyDataset("no frame has ground truth".into()))
}

fn mc_from(terms: &[FrameTerms]) -> Result<(f64, BTreeMap<ClassId, f64>)> {
    let mut acc: BTreeMap<ClassId, (f64, usize)> = BTreeMap::new();
    for t in terms {
        for (&c, &iou) in &t.iou {
            let e = acc.entry(c).or_insert((0.0, 0));
            e.0 += iou;
            e.1 += 1;
        }
    }
    let per_class: BTreeMap<ClassId, f64> = acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let mc = mean(per_class.values().copied()).ok_or_else(|| Error::EmptyDataset("no classes present".into()))?;
    Ok((mc, per_class))
}

pub fn challenge_iou(gt: &Dataset, pred: &Dataset) -> Result<f64> {
    challenge_from(&all_frame_terms(gt, pred)?)
}

pub fn isi_iou(gt: &Dataset, pred: &Dataset) -> Result<f64> {
    isi_from(&all_frame_terms(gt, pred)?)
}

/// Mean-class IoU and its per-class breakdown.
pub fn mc_iou(gt: &Dataset, pred: &Dataset) -> Result<(f64, BTreeMap<ClassId, f64>)> {
    mc_from(&all_frame_terms(gt, pred)?)
}

/// Average precision from a ranked list of true/false positives, using the
/// monotone precision envelope at every recall step.
pub fn average_precision(ranked_tp: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Single-threshold (IoU 0.5) mask AP per GT class, and their mean.
pub fn ap50(gt: &Dataset, pred: &Dataset) -> Result<Ap50> {
    let frames = paired_frames(gt, pred)?;
    let classes: BTreeSet<ClassId> = gt.instances().iter().map(|i| i.class).collect();

    // (class, score, frame id, instance id, true positive)
    let per_frame: Vec<Vec<(ClassId, f64, &str, u64, bool)>> = frames
        .par_iter()
        .map(|(frame_id, preds, gts)| {
            let mut out = Vec::new();
            let pred_classes: BTreeSet<ClassId> = preds.iter().map(|i| i.class).collect();
            for &c in pred_classes.intersection(&classes) {
                let p: Vec<&Instance> = preds.iter().copied().filter(|i| i.class == c).collect();
                let g: Vec<&Instance> = gts.iter().copied().filter(|i| i.class == c).collect();
                let pm = p.iter().map(|i| i.decode_mask()).collect::<Result<Vec<_>>>()?;
                let gm = g.iter().map(|i| i.decode_mask()).collect::<Result<Vec<_>>>()?;
                let m = match_decoded(&p, &pm, &g, &gm, AP_IOU_THRESHOLD)?;
                let hits: BTreeSet<u64> = m.pairs.iter().map(|x| x.pred_id).collect();
                for i in &p {
                    out.push((c, i.score, *frame_id, i.instance_id, hits.contains(&i.instance_id)));
                }
            }
            Ok(out)
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<_>>()?;

    let mut gt_count: BTreeMap<ClassId, usize> = BTreeMap::new();
    for i in gt.instances() {
        *gt_count.entry(i.class).or_default() += 1;
    }
    let mut ranked: BTreeMap<ClassId, Vec<(f64, &str, u64, bool)>> = BTreeMap::new();
    for (c, s, f, id, tp) in per_frame.into_iter().flatten() {
        ranked.entry(c).or_default().push((s, f, id, tp));
    }
    let per_class: BTreeMap<ClassId, f64> = classes
        .iter()
        .map(|c| {
            let mut list = ranked.remove(c).unwrap_or_default();
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
            let hits: Vec<bool> = list.iter().map(|x| x.3).collect();
            (*c, average_precision(&hits, gt_count[c]))
        })
        .collect();
    let mean = mean(per_class.values().copied()).ok_or_else(|| Error::EmptyDataset("no GT classes".into()))?;
    Ok(Ap50 { per_class, mean })
}

/// Every metric in one pass.
pub fn evaluate(gt: &Dataset, pred: &Dataset) -> Result<EvalReport> {
    let terms = all_frame_terms(gt, pred)?;
    let (mc_iou, per_class) = mc_from(&terms)?;
    Ok(EvalReport {
        ch_iou: challenge_from(&terms)?,
        isi_iou: isi_from(&terms)?,
        mc_iou,
        per_class,
        ap50: ap50(gt, pred)?,
    })
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    fn class_rows(&self) -> Vec<(ClassId, Option<f64>, Option<f64>)> {
        let classes: BTreeSet<ClassId> = self.per_class.keys().chain(self.ap50.per_class.keys()).copied().collect();
        classes
            .into_iter()
            .map(|c| (c, self.per_class.get(&c).copied(), self.ap50.per_class.get(&c).copied()))
            .collect()
    }

    /// Fixed-width table for terminal output.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
        let mut s = String::new();
        s.push_str(&format!("Ch_IoU   {:.4}\n", self.ch_iou));
        s.push_str(&format!("ISI_IoU  {:.4}\n", self.isi_iou));
        s.push_str(&format!("mcIoU    {:.4}\n", self.mc_iou));
        s.push_str(&format!("AP50     {:.4}\n", self.ap50.mean));
        s.push_str("class  IoU     AP50\n");
        for (c, iou, ap) in self.class_rows() {
            s.push_str(&format!("{:<6} {:<7} {}\n", c.to_string(), fmt(iou), fmt(ap)));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
        let mut s = String::new();
        s.push_str("| metric | value |\n|---|---|\n");
        s.push_str(&format!("| Ch_IoU | {:.4} |\n", self.ch_iou));
        s.push_str(&format!("| ISI_IoU | {:.4} |\n", self.isi_iou));
        s.push_str(&format!("| mcIoU | {:.4} |\n", self.mc_iou));
        s.push_str(&format!("| AP50 | {:.4} |\n", self.ap50.mean));
        s.push_str("\n| class | IoU | AP50 |\n|---|---|---|\n");
        for (c, iou, ap) in self.class_rows() {
            s.push_str(&format!("| {} | {} | {} |\n", c, fmt(iou), fmt(ap)));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{}", v));
        let mut s = String::from("scope,metric,value\n");
        s.push_str(&format!("all,ch_iou,{}\n", self.ch_iou));
        s.push_str(&format!("all,isi_iou,{}\n", self.isi_iou));
        s.push_str(&format!("all,mc_iou,{}\n", self.mc_iou));
        s.push_str(&format!("all,ap50,{}\n", self.ap50.mean));
        for (c, iou, ap) in self.class_rows() {
            s.push_str(&format!("class_{c},iou,{}\n", fmt(iou)));
            s.push_str(&format!("class_{c},ap50,{}\n", fmt(ap)));
        }
        s
    }
}
