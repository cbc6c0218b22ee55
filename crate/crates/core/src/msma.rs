//! Multi-scale mask-attended (MSMA) classifier.
//!
//! Each pyramid level is multiplied by the instance mask resized to that
//! level; finer levels are average-pooled to the coarsest grid, stacked
//! channel-wise and merged by a 1×1 convolution. The merged map is
//! averaged to a vector, projected to the embedding dimension and
//! normalized, and the arc head picks the class of largest cosine.
//!
//! The backbone lives outside the model: pyramids are inputs, so the
//! trainable parts are the merge, the embedding and the head.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arcloss::{self, ArcHead, Embedding};
use crate::data::{ClassId, Instance};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{
    affine, avg_pool_to, conv1x1, dot, global_avg_pool, l2_norm, mask_attend, resize_mask_nearest, ByteReader,
    FeaturePyramid, Tensor,
};

/// Model hyperparameters that are not learned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsmaConfig {
    pub embed_dim: usize,
    pub merge_channels: usize,
    pub margin: f64,
    pub scale: f64,
}

impl Default for MsmaConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            merge_channels: 16,
            margin: arcloss::DEFAULT_MARGIN,
            scale: arcloss::DEFAULT_SCALE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsmaModel {
    /// `(C, H, W)` of every pyramid level the model accepts.
    level_dims: Vec<(usize, usize, usize)>,
    merge_w: Tensor,
    merge_b: Tensor,
    embed_w: Tensor,
    embed_b: Tensor,
    head: ArcHead,
    provenance: String,
}

/// Result of classifying one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MsmaOutput {
    pub embedding: Embedding,
    pub class: ClassId,
    pub cosines: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl MsmaModel {
    /// Seeded initialization for pyramids with the given level dims.
    pub fn new(level_dims: &[(usize, usize, usize)], class_count: usize, cfg: &MsmaConfig, seed: u64) -> Result<Self> {
        if level_dims.is_empty() {
            return Err(Error::Config("model needs at least one pyramid level".into()));
        }
        let (_, ch, cw) = *level_dims.last().unwrap();
        for (i, &(c, h, w)) in level_dims.iter().enumerate() {
            if c == 0 || h < ch || w < cw {
                return Err(Error::Config(format!("level {i} ({c}x{h}x{w}) cannot pool to {ch}x{cw}")));
            }
        }
        if cfg.embed_dim < 2 || cfg.merge_channels == 0 {
            return Err(Error::Config("embed_dim must be ≥ 2 and merge_channels ≥ 1".into()));
        }
        let stacked: usize = level_dims.iter().map(|d| d.0).sum();
        let (m, d) = (cfg.merge_channels, cfg.embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut merge = uniform(&mut rng, m * stacked, 0.01);
        for o in 0..m {
            for c in 0..stacked {
                if o % stacked == c || c % m == o {
                    merge[o * stacked + c] += 1.0;
                }
            }
        }
        let eb = 1.0 / (m as f64).sqrt();
        let embed_w = uniform(&mut rng, d * m, eb);
        let hb = 1.0 / (d as f64).sqrt();
        let head_w = uniform(&mut rng, class_count * d, hb);

        Ok(Self {
            level_dims: level_dims.to_vec(),
            merge_w: Tensor::new(vec![m, stacked], merge)?,
            merge_b: Tensor::zeros(vec![m]),
            embed_w: Tensor::new(vec![d, m], embed_w)?,
            embed_b: Tensor::zeros(vec![d]),
            head: ArcHead::new(Tensor::new(vec![class_count, d], head_w)?, cfg.margin, cfg.scale)?,
            provenance: String::new(),
        })
    }

    pub fn level_dims(&self) -> &[(usize, usize, usize)] {
        &self.level_dims
    }

    pub fn head(&self) -> &ArcHead {
        &self.head
    }

    pub fn class_count(&self) -> usize {
        self.head.class_count()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_w.shape()[0]
    }

    pub fn merge_channels(&self) -> usize {
        self.merge_w.shape()[0]
    }

    pub fn stacked_channels(&self) -> usize {
        self.merge_w.shape()[1]
    }

    /// Free-form record of how the weights were produced.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, p: impl Into<String>) {
        self.provenance = p.into();
    }

    fn check_pyramid(&self, pyramid: &FeaturePyramid) -> Result<()> {
        let dims = pyramid.level_dims();
        if dims != self.level_dims {
            return Err(Error::ShapeMismatch(format!(
                "pyramid levels {dims:?}, model expects {:?}",
                self.level_dims
            )));
        }
        Ok(())
    }

    /// Mask-attended levels pooled to the coarsest grid and stacked:
    /// `[ΣC, H_c, W_c]`. `None` skips attention.
    pub fn attended_stack(&self, pyramid: &FeaturePyramid, mask: Option<&BinaryMask>) -> Result<Tensor> {
        self.check_pyramid(pyramid)?;
        let (_, ch, cw) = *self.level_dims.last().unwrap();
        let mut data = Vec::with_capacity(self.stacked_channels() * ch * cw);
        let mut covered = false;
        for level in pyramid.levels() {
            let (_, h, w) = level.chw()?;
            let attended = match mask {
                Some(m) => {
                    let rm = resize_mask_nearest(m, h, w)?;
                    covered |= rm.data().iter().any(|&v| v != 0.0);
                    mask_attend(level, &rm)?
                }
                None => {
                    covered = true;
                    level.clone()
                }
            };
            data.extend_from_slice(avg_pool_to(&attended, ch, cw)?.data());
        }
        if !covered {
            return Err(Error::EmptyMaskRegion);
        }
        Tensor::new(vec![self.stacked_channels(), ch, cw], data)
    }

    /// Unnormalized embedding `z` and merged pooled vector `g` from a stack.
    fn project(&self, stack: &Tensor) -> Result<(Tensor, Tensor)> {
        let merged = conv1x1(stack, &self.merge_w, &self.merge_b)?;
        let g = global_avg_pool(&merged)?;
        let z = affine(&g, &self.embed_w, &self.embed_b)?;
        Ok((z, g))
    }

    fn classify_stack(&self, stack: &Tensor) -> Result<MsmaOutput> {
        let (z, _) = self.project(stack)?;
        let n = l2_norm(z.data());
        if n <= 1e-12 {
            return Err(Error::ZeroVector);
        }
        let embedding = Embedding::new(z.data().iter().map(|v| v / n).collect())?;
        let cosines = arcloss::cos_angles(&self.head, &embedding)?;
        let class = arcloss::predict(&self.head, &embedding)?;
        Ok(MsmaOutput {
            embedding,
            class,
            cosines,
        })
    }

    /// Classification without mask attention, the whole frame contributing.
    pub fn forward_unmasked(&self, pyramid: &FeaturePyramid) -> Result<MsmaOutput> {
        self.classify_stack(&self.attended_stack(pyramid, None)?)
    }
}

/// Embeds and classifies one instance from its frame's pyramid and mask.
pub fn msma_forward(model: &MsmaModel, pyramid: &FeaturePyramid, mask: &BinaryMask) -> Result<MsmaOutput> {
    model.classify_stack(&model.attended_stack(pyramid, Some(mask))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Arc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainable {
    Merge,
    Embedding,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub loss: LossKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Pyramids are precomputed, so the backbone is fixed in every phase;
    /// the flag is kept for schedule fidelity.
    pub backbone_frozen: bool,
    pub trainable: Vec<Trainable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    1
}

const HEAD_ONLY: &[Trainable] = &[Trainable::Head];
const ALL: &[Trainable] = &[Trainable::Merge, Trainable::Embedding, Trainable::Head];

impl TrainSchedule {
    /// CE on the head for 10 epochs, arc on the head for 15, arc end to end
    /// for 5, then a final CE pass on the head alone. Adam at `head_lr` for
    /// head phases and `end_to_end_lr` for the end-to-end phase.
    pub fn staged(head_lr: f64, end_to_end_lr: f64, final_epochs: usize) -> Self {
        let phase = |name: &str, loss, epochs, lr, frozen, trainable: &[Trainable]| Phase {
            name: name.into(),
            loss,
            epochs,
            learning_rate: lr,
            optimizer: OptimizerKind::Adam,
            backbone_frozen: frozen,
            trainable: trainable.to_vec(),
        };
        Self {
            phases: vec![
                phase("ce_head", LossKind::Ce, 10, head_lr, true, HEAD_ONLY),
                phase("arc_head", LossKind::Arc, 15, head_lr, true, HEAD_ONLY),
                phase("arc_end_to_end", LossKind::Arc, 5, end_to_end_lr, false, ALL),
                phase("ce_final", LossKind::Ce, final_epochs, head_lr, true, HEAD_ONLY),
            ],
            batch_size: 1,
        }
    }

    /// The default staged schedule
    /// (Adam, 1e-5 for head phases, 1e-7 end to end).
    pub fn standard() -> Self {
        Self::staged(1e-5, 1e-7, 5)
    }

    /// Same phase structure with every loss replaced by cross-entropy.
    pub fn cross_entropy_only(mut self) -> Self {
        for p in &mut self.phases {
            p.loss = LossKind::Ce;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for p in &self.phases {
            if p.epochs == 0 {
                return Err(Error::Config(format!("phase '{}' has zero epochs", p.name)));
            }
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return Err(Error::Config(format!("phase '{}' learning rate must be positive", p.name)));
            }
            if p.trainable.is_empty() {
                return Err(Error::Config(format!("phase '{}' trains nothing", p.name)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: TrainSchedule = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct TrainExample {
    pub pyramid: Arc<FeaturePyramid>,
    pub mask: BinaryMask,
    pub target: ClassId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Parameter group indices into the flat optimizer state.
#[derive(Clone, Copy)]
enum Group {
    MergeW,
    MergeB,
    EmbedW,
    EmbedB,
    Head,
}

const GROUPS: [Group; 5] = [Group::MergeW, Group::MergeB, Group::EmbedW, Group::EmbedB, Group::Head];

impl Group {
    fn trainable(self) -> Trainable {
        match self {
            Group::MergeW | Group::MergeB => Trainable::Merge,
            Group::EmbedW | Group::EmbedB => Trainable::Embedding,
            Group::Head => Trainable::Head,
        }
    }
}

impl MsmaModel {
    fn params_mut(&mut self, g: Group) -> &mut [f64] {
        match g {
            Group::MergeW => self.merge_w.data_mut(),
            Group::MergeB => self.merge_b.data_mut(),
            Group::EmbedW => self.embed_w.data_mut(),
            Group::EmbedB => self.embed_b.data_mut(),
            Group::Head => self.head.weights_mut(),
        }
    }

    fn params(&self, g: Group) -> &[f64] {
        match g {
            Group::MergeW => self.merge_w.data(),
            Group::MergeB => self.merge_b.data(),
            Group::EmbedW => self.embed_w.data(),
            Group::EmbedB => self.embed_b.data(),
            Group::Head => self.head.weights(),
        }
    }

    fn param_len(&self, g: Group) -> usize {
        match g {
            Group::MergeW => self.merge_w.len(),
            Group::MergeB => self.merge_b.len(),
            Group::EmbedW => self.embed_w.len(),
            Group::EmbedB => self.embed_b.len(),
            Group::Head => self.head.weights().len(),
        }
    }
}

/// Gradients for every parameter group, laid out like the parameters.
struct Grads([Vec<f64>; 5]);

impl Grads {
    fn zeros(model: &MsmaModel) -> Self {
        Grads(GROUPS.map(|g| vec![0.0; model.param_len(g)]))
    }

    fn reset(&mut self) {
        for g in &mut self.0 {
            g.fill(0.0);
        }
    }
}

/// Per-example inputs that stay fixed while the backbone is frozen.
struct Cached {
    stack: Tensor,
    /// Channel means of `stack`, the gradient of the merge weights.
    stack_mean: Vec<f64>,
    target: ClassId,
}

/// Loss of one example; gradients are added into `grads` scaled by `weight`.
fn example_loss_grad(
    model: &MsmaModel,
    ex: &Cached,
    loss: LossKind,
    train: &[Trainable],
    weight: f64,
    grads: &mut Grads,
) -> Result<f64> {
    let (z, g) = model.project(&ex.stack)?;
    let zn = l2_norm(z.data());
    if zn <= 1e-12 {
        return Err(Error::ZeroVector);
    }
    let e: Vec<f64> = z.data().iter().map(|v| v / zn).collect();
    let [gmw, gmb, gew, geb, gh] = &mut grads.0;
    let mut head_scratch;
    let head_grad: &mut [f64] = if train.contains(&Trainable::Head) {
        gh
    } else {
        head_scratch = vec![0.0; gh.len()];
        &mut head_scratch
    };
    let sample = match loss {
        LossKind::Arc => arcloss::arc_sample_grad(&model.head, &e, ex.target, weight, head_grad),
        LossKind::Ce => arcloss::ce_sample_grad(&model.head, &e, ex.target, weight, head_grad),
    };
    let (value, ge) = match sample {
        Ok(v) => v,
        // target already aligned with its class row; nothing to learn here
        Err(Error::SingularAngle { .. }) => return arcloss::arc_loss(&model.head, &[(Embedding::new(e)?, ex.target)]),
        Err(err) => return Err(err),
    };
    let needs_embed = train.contains(&Trainable::Embedding);
    let needs_merge = train.contains(&Trainable::Merge);
    if !(needs_embed || needs_merge) {
        return Ok(value);
    }
    // through e = z / |z|
    let proj = dot(&ge, &e);
    let dz: Vec<f64> = ge.iter().zip(&e).map(|(gv, ev)| (gv - ev * proj) / zn).collect();
    let (d, m) = (model.embed_w.shape()[0], model.embed_w.shape()[1]);
    if needs_embed {
        for i in 0..d {
            for j in 0..m {
                gew[i * m + j] += dz[i] * g.data()[j];
            }
            geb[i] += dz[i];
        }
    }
    if needs_merge {
        let c = model.stacked_channels();
        let ew = model.embed_w.data();
        for j in 0..m {
            let dg: f64 = (0..d).map(|i| ew[i * m + j] * dz[i]).sum();
            for k in 0..c {
                gmw[j * c + k] += dg * ex.stack_mean[k];
            }
            gmb[j] += dg;
        }
    }
    Ok(value)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_step(
    model: &mut MsmaModel,
    grads: &Grads,
    phase: &Phase,
    adam: &mut Adam,
) {
    adam.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(adam.t);
    let bc2 = 1.0 - ADAM_BETA2.powi(adam.t);
    for (gi, group) in GROUPS.iter().enumerate() {
        if !phase.trainable.contains(&group.trainable()) {
            continue;
        }
        let grad = &grads.0[gi];
        let params = model.params_mut(*group);
        match phase.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= phase.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = (&mut adam.m[gi], &mut adam.v[gi]);
                for k in 0..params.len() {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grad[k];
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    params[k] -= phase.learning_rate * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Runs every phase of `schedule` in order. Shuffling is driven by `seed`,
/// so a fixed (model, data, schedule, seed) always yields the same weights.
pub fn train(
    mut model: MsmaModel,
    data: &[TrainExample],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(MsmaModel, Vec<EpochLoss>)> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()));
    }
    let cached = data
        .iter()
        .map(|ex| {
            let stack = model.attended_stack(&ex.pyramid, Some(&ex.mask))?;
            let stack_mean = global_avg_pool(&stack)?.into_data();
            if ex.target.index() >= model.class_count() {
                return Err(Error::BadTarget {
                    target: ex.target.get(),
                    class_count: model.class_count(),
                });
            }
            Ok(Cached {
                stack,
                stack_mean,
                target: ex.target,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cached.len()).collect();
    let mut grads = Grads::zeros(&model);
    let mut log = Vec::new();
    for phase in &schedule.phases {
        let mut adam = Adam {
            m: GROUPS.iter().map(|&g| vec![0.0; model.param_len(g)]).collect(),
            v: GROUPS.iter().map(|&g| vec![0.0; model.param_len(g)]).collect(),
            t: 0,
        };
        for epoch in 1..=phase.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(schedule.batch_size) {
                grads.reset();
                let w = 1.0 / batch.len() as f64;
                for &i in batch {
                    let l = example_loss_grad(&model, &cached[i], phase.loss, &phase.trainable, w, &mut grads)?;
                    if !l.is_finite() {
                        return Err(Error::DivergedLoss {
                            phase: phase.name.clone(),
                            epoch,
                            loss: l,
                        });
                    }
                    total += l;
                }
                apply_step(&mut model, &grads, phase, &mut adam);
            }
            let mean_loss = total / cached.len() as f64;
            let params_finite = GROUPS.iter().all(|&g| model.params(g).iter().all(|v| v.is_finite()));
            if !mean_loss.is_finite() || !params_finite || model.head.validate().is_err() {
                return Err(Error::DivergedLoss {
                    phase: phase.name.clone(),
                    epoch,
                    loss: mean_loss,
                });
            }
            log.push(EpochLoss {
                phase: phase.name.clone(),
                epoch,
                mean_loss,
            });
        }
    }
    model.provenance = format!("seed={seed}\n{}", schedule.to_json());
    Ok((model, log))
}

/// Fraction of examples whose predicted class equals the target.
pub fn accuracy(model: &MsmaModel, data: &[TrainExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no examples to score".into()));
    }
    let mut hits = 0usize;
    for ex in data {
        if msma_forward(model, &ex.pyramid, &ex.mask)?.class == ex.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Instances with their labels replaced by the classifier's, plus the ids
/// whose masks covered no feature cell (those keep their label).
#[derive(Clone, Debug, PartialEq)]
pub struct RelabelOutcome {
    pub instances: Vec<Instance>,
    pub empty_region: Vec<u64>,
}

/// Replaces each instance's provisional label with the MSMA prediction.
pub fn relabel(model: &MsmaModel, instances: &[Instance], pyramid: &FeaturePyramid) -> Result<RelabelOutcome> {
    let mut out = RelabelOutcome {
        instances: Vec::with_capacity(instances.len()),
        empty_region: Vec::new(),
    };
    for inst in instances {
        let mask = inst.decode_mask()?;
        let mut next = inst.clone();
        match msma_forward(model, pyramid, &mask) {
            Ok(o) => next.class = o.class,
            Err(Error::EmptyMaskRegion) => out.empty_region.push(inst.instance_id),
            Err(e) => return Err(e),
        }
        out.instances.push(next);
    }
    Ok(out)
}

pub const MODEL_MAGIC: &[u8; 4] = b"S3M1";
pub const MODEL_VERSION: u32 = 1;

impl MsmaModel {
    /// S3M1 layout: magic, version, level count, `(C,H,W)` per level,
    /// merge channels, embedding dim, class count, margin and scale (f64),
    /// then merge W, merge b, embedding W, embedding b and head W as f64
    /// blocks, then the provenance as length-prefixed UTF-8.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let u32s = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32s(&mut out, MODEL_VERSION as usize);
        u32s(&mut out, self.level_dims.len());
        for &(c, h, w) in &self.level_dims {
            u32s(&mut out, c);
            u32s(&mut out, h);
            u32s(&mut out, w);
        }
        u32s(&mut out, self.merge_channels());
        u32s(&mut out, self.embed_dim());
        u32s(&mut out, self.class_count());
        out.extend_from_slice(&self.head.margin().to_le_bytes());
        out.extend_from_slice(&self.head.scale().to_le_bytes());
        for block in [
            self.merge_w.data(),
            self.merge_b.data(),
            self.embed_w.data(),
            self.embed_b.data(),
            self.head.weights(),
        ] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        u32s(&mut out, self.provenance.len());
        out.extend_from_slice(self.provenance.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::VersionMismatch("missing S3M1 magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch(format!("model version {version}, expected {MODEL_VERSION}")));
        }
        let levels = r.u32()? as usize;
        if levels == 0 || levels > 64 {
            return Err(Error::VersionMismatch(format!("{levels} levels")));
        }
        let mut level_dims = Vec::with_capacity(levels);
        for _ in 0..levels {
            level_dims.push((r.u32()? as usize, r.u32()? as usize, r.u32()? as usize));
        }
        let m = r.u32()? as usize;
        let d = r.u32()? as usize;
        let c = r.u32()? as usize;
        let margin = r.f64()?;
        let scale = r.f64()?;
        let stacked: usize = level_dims.iter().map(|x| x.0).sum();
        let mut block = |shape: Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if n > bytes.len() / 8 {
                return Err(Error::VersionMismatch("weight block larger than file".into()));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Tensor::new(shape, data).map_err(|e| Error::VersionMismatch(e.to_string()))
        };
        let merge_w = block(vec![m, stacked])?;
        let merge_b = block(vec![m])?;
        let embed_w = block(vec![d, m])?;
        let embed_b = block(vec![d])?;
        let head_w = block(vec![c, d])?;
        let plen = r.u32()? as usize;
        let provenance = String::from_utf8(r.take(plen)?.to_vec())
            .map_err(|_| Error::VersionMismatch("provenance is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::VersionMismatch("trailing bytes after model".into()));
        }
        let head = ArcHead::new(head_w, margin, scale).map_err(|e| Error::VersionMismatch(e.to_string()))?;
        Ok(Self {
            level_dims,
            merge_w,
            merge_b,
            embed_w,
            embed_b,
            head,
            provenance,
        })
    }
}

pub fn save_model(model: &MsmaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MsmaModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MsmaModel::from_bytes(&bytes)
}
