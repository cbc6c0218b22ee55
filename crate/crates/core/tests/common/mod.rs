//! Independent reference implementations and random scene builders shared
//! by the integration and acceptance tests. The oracles decode RLE and count
//! pixels themselves; nothing here calls the library's IoU or metric code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use s3kit::data::{ClassId, Dataset, Frame, Instance};
use s3kit::mask::{BinaryMask, FrameSize, RleMask};

/// Row-major pixels from column-major run lengths.
pub fn pixels(rle: &RleMask) -> Vec<bool> {
    let (h, w) = (rle.size().height() as usize, rle.size().width() as usize);
    let mut out = vec![false; h * w];
    let mut pos = 0usize;
    for (k, &run) in rle.counts().iter().enumerate() {
        for p in pos..pos + run as usize {
            if k % 2 == 1 {
                let (col, row) = (p / h, p % h);
                out[row * w + col] = true;
            }
        }
        pos += run as usize;
    }
    assert_eq!(pos, h * w);
    out
}

pub fn count_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn class_union(insts: &[&Instance], class: u32, n: usize) -> Option<Vec<bool>> {
    let mut any = false;
    let mut acc = vec![false; n];
    for i in insts.iter().filter(|i| i.class.get() == class) {
        any = true;
        for (a, p) in acc.iter_mut().zip(pixels(&i.mask)) {
            *a |= p;
        }
    }
    any.then_some(acc)
}

struct FrameView<'a> {
    gt: Vec<&'a Instance>,
    pred: Vec<&'a Instance>,
    n: usize,
}

fn frames<'a>(gt: &'a Dataset, pred: &'a Dataset) -> Vec<FrameView<'a>> {
    gt.frames()
        .iter()
        .map(|f| FrameView {
            gt: gt.instances().iter().filter(|i| i.frame_id == f.id).collect(),
            pred: pred.instances().iter().filter(|i| i.frame_id == f.id).collect(),
            n: f.size.area(),
        })
        .collect()
}

fn term(f: &FrameView, class: u32) -> f64 {
    match (class_union(&f.pred, class, f.n), class_union(&f.gt, class, f.n)) {
        (Some(p), Some(g)) => count_iou(&p, &g),
        _ => 0.0,
    }
}

fn classes(insts: &[&Instance]) -> BTreeSet<u32> {
    insts.iter().map(|i| i.class.get()).collect()
}

fn average(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn oracle_ch_iou(gt: &Dataset, pred: &Dataset) -> f64 {
    let per_frame: Vec<f64> = frames(gt, pred)
        .iter()
        .filter(|f| !f.gt.is_empty())
        .map(|f| average(&classes(&f.gt).iter().map(|&c| term(f, c)).collect::<Vec<_>>()))
        .collect();
    average(&per_frame)
}

pub fn oracle_isi_iou(gt: &Dataset, pred: &Dataset) -> f64 {
    let per_frame: Vec<f64> = frames(gt, pred)
        .iter()
        .filter(|f| !(f.gt.is_empty() && f.pred.is_empty()))
        .map(|f| {
            let set: BTreeSet<u32> = classes(&f.gt).union(&classes(&f.pred)).copied().collect();
            average(&set.iter().map(|&c| term(f, c)).collect::<Vec<_>>())
        })
        .collect();
    average(&per_frame)
}

pub fn oracle_mc_iou(gt: &Dataset, pred: &Dataset) -> (f64, BTreeMap<u32, f64>) {
    let fs = frames(gt, pred);
    let mut per_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for f in &fs {
        for c in classes(&f.gt).union(&classes(&f.pred)) {
            per_class.entry(*c).or_default().push(term(f, *c));
        }
    }
    let means: BTreeMap<u32, f64> = per_class.into_iter().map(|(c, v)| (c, average(&v))).collect();
    (average(&means.values().copied().collect::<Vec<_>>()), means)
}

/// AP50 by explicit PR-curve construction: every prediction of a class is
/// ranked globally, matched frame by frame, and the interpolated precision
/// at each recall level is the best precision at that recall or beyond.
pub fn oracle_ap50(gt: &Dataset, pred: &Dataset) -> (f64, BTreeMap<u32, f64>) {
    let gt_classes: BTreeSet<u32> = gt.instances().iter().map(|i| i.class.get()).collect();
    let mut aps = BTreeMap::new();
    for &c in &gt_classes {
        let gts: Vec<&Instance> = gt.instances().iter().filter(|i| i.class.get() == c).collect();
        let mut preds: Vec<&Instance> = pred.instances().iter().filter(|i| i.class.get() == c).collect();
        preds.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.frame_id.cmp(&b.frame_id))
                .then(a.instance_id.cmp(&b.instance_id))
        });
        let mut taken: BTreeSet<(String, u64)> = BTreeSet::new();
        let mut tp = Vec::new();
        for p in &preds {
            let pp = pixels(&p.mask);
            let mut best: Option<(f64, u64)> = None;
            for g in gts.iter().filter(|g| g.frame_id == p.frame_id) {
                if taken.contains(&(g.frame_id.clone(), g.instance_id)) {
                    continue;
                }
                let iou = count_iou(&pp, &pixels(&g.mask));
                let better = match best {
                    None => true,
                    Some((b, id)) => iou > b || (iou == b && g.instance_id < id),
                };
                if better {
                    best = Some((iou, g.instance_id));
                }
            }
            match best {
                Some((iou, id)) if iou > 0.0 && iou >= 0.5 => {
                    taken.insert((p.frame_id.clone(), id));
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        let total = gts.len() as f64;
        let mut points = Vec::new();
        let mut hits = 0usize;
        for (k, t) in tp.iter().enumerate() {
            hits += *t as usize;
            points.push((hits as f64 / total, hits as f64 / (k + 1) as f64));
        }
        let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
        recalls.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in recalls {
            let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
        aps.insert(c, ap);
    }
    (average(&aps.values().copied().collect::<Vec<_>>()), aps)
}

/// Greedy NMS written directly from the rule: sort, then keep whatever does
/// not overlap a kept mask too much, then cut to `top_k`.
pub fn oracle_nms(insts: &[Instance], score_threshold: f64, iou_threshold: f64, top_k: usize, cross: bool) -> Vec<u64> {
    let mut order: Vec<&Instance> = insts.iter().filter(|i| i.score >= score_threshold).collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.instance_id.cmp(&b.instance_id)));
    let mut kept: Vec<&Instance> = Vec::new();
    for cand in order {
        let clash = kept
            .iter()
            .any(|k| (cross || k.class == cand.class) && count_iou(&pixels(&k.mask), &pixels(&cand.mask)) > iou_threshold);
        if !clash {
            kept.push(cand);
        }
    }
    kept.truncate(top_k);
    kept.iter().map(|i| i.instance_id).collect()
}

pub fn random_rect(rng: &mut ChaCha8Rng, size: FrameSize) -> BinaryMask {
    let (h, w) = (size.height(), size.width());
    let y0 = rng.gen_range(0..h);
    let x0 = rng.gen_range(0..w);
    let y1 = rng.gen_range(y0 + 1..=h);
    let x1 = rng.gen_range(x0 + 1..=w);
    BinaryMask::from_fn(size, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
}

/// A random nonempty mask: rectangle, speckle or a union of both.
pub fn random_mask(rng: &mut ChaCha8Rng, size: FrameSize) -> BinaryMask {
    let mut m = match rng.gen_range(0..3) {
        0 => random_rect(rng, size),
        1 => {
            let p = rng.gen_range(0.1..0.6);
            BinaryMask::from_fn(size, |_, _| rng.gen_bool(p))
        }
        _ => {
            let mut a = random_rect(rng, size);
            a.union_in_place(&random_rect(rng, size)).unwrap();
            a
        }
    };
    if m.is_empty() {
        m.set(0, 0, true);
    }
    m
}

/// Small mutation of a mask: a few random pixel flips, never empty.
pub fn jitter(rng: &mut ChaCha8Rng, m: &BinaryMask) -> BinaryMask {
    let mut out = m.clone();
    let size = m.size();
    for _ in 0..rng.gen_range(0..4) {
        let (y, x) = (rng.gen_range(0..size.height()), rng.gen_range(0..size.width()));
        out.set(y, x, !out.get(y, x));
    }
    if out.is_empty() {
        m.clone()
    } else {
        out
    }
}

pub fn instance(frame: &str, id: u64, class: u32, score: f64, mask: &BinaryMask) -> Instance {
    Instance {
        frame_id: frame.to_string(),
        instance_id: id,
        class: ClassId::raw(class),
        score,
        mask: RleMask::encode(mask),
    }
}

/// Random GT and prediction sets: up to 3 frames of at most 16×16, up to 3
/// classes and up to 4 instances per frame on each side. Predictions mix
/// jittered copies of GT masks (sometimes relabelled) with fresh masks.
pub fn micro_scene(rng: &mut ChaCha8Rng) -> (Dataset, Dataset) {
    let class_count = rng.gen_range(1..=3usize);
    let names: Vec<String> = (1..=class_count).map(|c| format!("c{c}")).collect();
    let mut frames = Vec::new();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    let n_frames = rng.gen_range(1..=3);
    for f in 0..n_frames {
        let id = format!("f{f}");
        let size = FrameSize::new(rng.gen_range(2..=16), rng.gen_range(2..=16)).unwrap();
        frames.push(Frame { id: id.clone(), size });
        let n_gt = if f == 0 { rng.gen_range(1..=4) } else { rng.gen_range(0..=4) };
        let mut gt_masks = Vec::new();
        for k in 0..n_gt {
            let m = random_mask(rng, size);
            let c = rng.gen_range(1..=class_count as u32);
            gt.push(instance(&id, k as u64, c, 1.0, &m));
            gt_masks.push((c, m));
        }
        for k in 0..rng.gen_range(0..=4u64) {
            let (c, m) = if !gt_masks.is_empty() && rng.gen_bool(0.6) {
                let (c, m) = &gt_masks[rng.gen_range(0..gt_masks.len())];
                let c = if rng.gen_bool(0.3) { rng.gen_range(1..=class_count as u32) } else { *c };
                (c, jitter(rng, m))
            } else {
                (rng.gen_range(1..=class_count as u32), random_mask(rng, size))
            };
            // coarse scores make exact ties common
            let score = rng.gen_range(0..=10) as f64 / 10.0;
            pred.push(instance(&id, 100 + k, c, score, &m));
        }
    }
    (
        Dataset::new(names.clone(), frames.clone(), gt).unwrap(),
        Dataset::new(names, frames, pred).unwrap(),
    )
}

/// Up to `max` random instances on one 16×16 frame with coarse scores.
pub fn nms_frame(rng: &mut ChaCha8Rng, max: usize) -> Vec<Instance> {
    let size = FrameSize::new(16, 16).unwrap();
    let n = rng.gen_range(0..=max);
    let mut out: Vec<Instance> = Vec::new();
    for k in 0..n {
        let m = if !out.is_empty() && rng.gen_bool(0.4) {
            let src = out[rng.gen_range(0..out.len())].mask.decode().unwrap();
            jitter(rng, &src)
        } else {
            random_rect(rng, size)
        };
        let score = rng.gen_range(0..=20) as f64 / 20.0;
        out.push(instance("f", k as u64, rng.gen_range(1..=3), score, &m));
    }
    out
}
