//! Additive angular-margin ("arc") loss with analytic gradients, and plain
//! softmax cross-entropy over dot-product logits.
//!
//! For a sample with embedding `e` and target `t`, the arc logits are
//! `s·cos(θ_t + m)` for the target and `s·cos θ_j` elsewhere, where `θ_j` is
//! the angle between `e` and the j-th weight row. Only angles enter, so the
//! loss ignores the magnitude of both the embedding and every weight row.
//! The batch loss is the mean of per-sample negative log-softmax terms.

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Tensor};

/// Cosines are kept this far from ±1 before `acos`.
pub const COS_CLAMP: f64 = 1e-7;
/// Gradients are refused when the target cosine is this close to ±1.
pub const SINGULAR_GUARD: f64 = 1e-6;
pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_SCALE: f64 = 1.0;

/// Per-class weight rows plus the margin and logit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcHead {
    class_count: usize,
    dim: usize,
    weights: Vec<f64>,
    margin: f64,
    scale: f64,
}

/// A nonzero, finite embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue("embedding".into()));
        }
        if l2_norm(&v) <= 1e-12 {
            return Err(Error::ZeroVector);
        }
        Ok(Embedding(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Gradients of a batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// `[C, D]`, row-major.
    pub weights: Vec<f64>,
    /// One `[D]` gradient per sample.
    pub embeddings: Vec<Vec<f64>>,
}

impl ArcHead {
    pub fn new(weights: Tensor, margin: f64, scale: f64) -> Result<Self> {
        let (class_count, dim) = match weights.shape() {
            [c, d] => (*c, *d),
            s => return Err(Error::ShapeMismatch(format!("head weights must be [C,D], got {s:?}"))),
        };
        let head = Self {
            class_count,
            dim,
            weights: weights.into_data(),
            margin,
            scale,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("arc head needs at least two classes".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        if self.weights.len() != self.class_count * self.dim {
            return Err(Error::ShapeMismatch("head weight count".into()));
        }
        if let Some(j) = (0..self.class_count).find(|&j| l2_norm(self.row(j)) <= 1e-12) {
            return Err(Error::Config(format!("weight row {} is zero", j + 1)));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn with_margin(mut self, margin: f64) -> Result<Self> {
        self.margin = margin;
        self.validate()?;
        Ok(self)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    fn check_dim(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("embedding dim {} for head dim {}", e.len(), self.dim)));
        }
        Ok(())
    }

    fn check_target(&self, t: ClassId) -> Result<usize> {
        if t.get() == 0 || t.get() as usize > self.class_count {
            return Err(Error::BadTarget {
                target: t.get(),
                class_count: self.class_count,
            });
        }
        Ok(t.index())
    }

    /// Raw (unclamped) cosines between `e` and each weight row.
    fn raw_cosines(&self, e: &[f64]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        self.check_dim(e)?;
        let ne = l2_norm(e);
        if ne <= 1e-12 {
            return Err(Error::ZeroVector);
        }
        let mut norms = Vec::with_capacity(self.class_count);
        let mut cos = Vec::with_capacity(self.class_count);
        for j in 0..self.class_count {
            let w = self.row(j);
            let nw = l2_norm(w);
            if nw <= 1e-12 {
                return Err(Error::ZeroVector);
            }
            cos.push(dot(e, w) / (ne * nw));
            norms.push(nw);
        }
        Ok((cos, ne, norms))
    }
}

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

/// `cos θ_j` for every class, clamped away from ±1.
pub fn cos_angles(head: &ArcHead, e: &Embedding) -> Result<Vec<f64>> {
    Ok(head.raw_cosines(&e.0)?.0.into_iter().map(clamp_cos).collect())
}

/// Numerically stable `log Σ exp(x)`.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[target]`.
pub fn softmax_ce(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

/// Gradient of [`softmax_ce`] wrt the logits: `softmax - onehot`.
pub fn softmax_ce_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .enumerate()
        .map(|(j, l)| (l - lse).exp() - if j == target { 1.0 } else { 0.0 })
        .collect()
}

/// Arc logits of one sample plus `d logit_j / d rawcos_j`.
fn arc_logits(head: &ArcHead, raw_cos: &[f64], target: usize) -> (Vec<f64>, Vec<f64>) {
    let s = head.scale;
    let mut logits = Vec::with_capacity(raw_cos.len());
    let mut dlogit = Vec::with_capacity(raw_cos.len());
    for (j, &rc) in raw_cos.iter().enumerate() {
        let c = clamp_cos(rc);
        let clamped = c != rc;
        if j == target {
            let theta = c.acos();
            logits.push(s * (theta + head.margin).cos());
            // d/dc cos(acos c + m) = sin(acos c + m) / sqrt(1 - c²)
            dlogit.push(if clamped { 0.0 } else { s * (theta + head.margin).sin() / theta.sin() });
        } else {
            logits.push(s * c);
            dlogit.push(if clamped { 0.0 } else { s });
        }
    }
    (logits, dlogit)
}

fn check_batch(batch: &[(Embedding, ClassId)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("loss over an empty batch".into()));
    }
    Ok(())
}

/// Mean arc loss over the batch.
pub fn arc_loss(head: &ArcHead, batch: &[(Embedding, ClassId)]) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for (e, t) in batch {
        let t = head.check_target(*t)?;
        let (raw, _, _) = head.raw_cosines(&e.0)?;
        let (logits, _) = arc_logits(head, &raw, t);
        total += softmax_ce(&logits, t);
    }
    Ok(total / batch.len() as f64)
}

/// Loss of one sample and the gradient contributions, added into
/// `grad_w` (scaled by `weight`). Returns (loss, dL/de).
pub(crate) fn arc_sample_grad(
    head: &ArcHead,
    e: &[f64],
    target: ClassId,
    weight: f64,
    grad_w: &mut [f64],
) -> Result<(f64, Vec<f64>)> {
    let t = head.check_target(target)?;
    let (raw, ne, norms) = head.raw_cosines(e)?;
    if raw[t].abs() > 1.0 - SINGULAR_GUARD {
        return Err(Error::SingularAngle { cos: raw[t] });
    }
    let (logits, dlogit) = arc_logits(head, &raw, t);
    let loss = softmax_ce(&logits, t);
    let dl = softmax_ce_grad(&logits, t);
    let d = head.dim;
    let mut ge = vec![0.0; d];
    for j in 0..head.class_count {
        // dL/dcos_j, then chain through cos = <e,w>/(|e||w|)
        let g = weight * dl[j] * dlogit[j];
        if g == 0.0 {
            continue;
        }
        let w = head.row(j);
        let nw = norms[j];
        let c = raw[j];
        let gw = &mut grad_w[j * d..(j + 1) * d];
        for k in 0..d {
            ge[k] += g * (w[k] / (ne * nw) - c * e[k] / (ne * ne));
            gw[k] += g * (e[k] / (ne * nw) - c * w[k] / (nw * nw));
        }
    }
    Ok((loss, ge))
}

/// Analytic gradients of [`arc_loss`] wrt the head weights and every embedding.
pub fn arc_loss_grad(head: &ArcHead, batch: &[(Embedding, ClassId)]) -> Result<LossGrad> {
    check_batch(batch)?;
    let n = batch.len() as f64;
    let mut weights = vec![0.0; head.weights.len()];
    let mut embeddings = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (e, t) in batch {
        let (l, ge) = arc_sample_grad(head, &e.0, *t, 1.0 / n, &mut weights)?;
        loss += l;
        embeddings.push(ge);
    }
    Ok(LossGrad {
        loss: loss / n,
        weights,
        embeddings,
    })
}

/// Dot-product logits `⟨W_j, e⟩`.
pub fn linear_logits(head: &ArcHead, e: &[f64]) -> Result<Vec<f64>> {
    head.check_dim(e)?;
    Ok((0..head.class_count).map(|j| dot(head.row(j), e)).collect())
}

/// Mean softmax cross-entropy over dot-product logits.
pub fn ce_loss(head: &ArcHead, batch: &[(Embedding, ClassId)]) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for (e, t) in batch {
        let t = head.check_target(*t)?;
        total += softmax_ce(&linear_logits(head, &e.0)?, t);
    }
    Ok(total / batch.len() as f64)
}

pub(crate) fn ce_sample_grad(
    head: &ArcHead,
    e: &[f64],
    target: ClassId,
    weight: f64,
    grad_w: &mut [f64],
) -> Result<(f64, Vec<f64>)> {
    let t = head.check_target(target)?;
    let logits = linear_logits(head, e)?;
    let loss = softmax_ce(&logits, t);
    let dl = softmax_ce_grad(&logits, t);
    let d = head.dim;
    let mut ge = vec![0.0; d];
    for j in 0..head.class_count {
        let g = weight * dl[j];
        let w = head.row(j);
        let gw = &mut grad_w[j * d..(j + 1) * d];
        for k in 0..d {
            ge[k] += g * w[k];
            gw[k] += g * e[k];
        }
    }
    Ok((loss, ge))
}

pub fn ce_loss_grad(head: &ArcHead, batch: &[(Embedding, ClassId)]) -> Result<LossGrad> {
    check_batch(batch)?;
    let n = batch.len() as f64;
    let mut weights = vec![0.0; head.weights.len()];
    let mut embeddings = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (e, t) in batch {
        let (l, ge) = ce_sample_grad(head, &e.0, *t, 1.0 / n, &mut weights)?;
        loss += l;
        embeddings.push(ge);
    }
    Ok(LossGrad {
        loss: loss / n,
        weights,
        embeddings,
    })
}

/// Class of largest cosine; ties go to the lower class id.
pub fn predict(head: &ArcHead, e: &Embedding) -> Result<ClassId> {
    Ok(argmax_first(&head.raw_cosines(&e.0)?.0))
}

pub(crate) fn argmax_first(values: &[f64]) -> ClassId {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    ClassId::from_index(best)
}
