//! Dense f64 tensors with the few operations the mask-attended classifier
//! needs, the S3T1 feature-pyramid container, and a central-difference
//! gradient checker.
//!
//! Every kernel sums in a fixed order, so identical inputs give
//! bit-identical outputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Row-major tensor of rank 1 to 4 holding finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("element {i} of tensor {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch(format!("expected [C,H,W], got {:?}", self.shape))),
        }
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::ShapeMismatch(format!("{what}: expected rank {rank}, got {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Source index for nearest-neighbour sampling at pixel centres,
/// `floor((i + 0.5) * src / dst)`, in exact integer arithmetic.
fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    ((2 * i + 1) * src) / (2 * dst)
}

/// Nearest-neighbour resize of a hard mask to a `[1, h, w]` tensor of 0/1.
pub fn resize_mask_nearest(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<Tensor> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::ShapeMismatch(format!("resize target {target_h}x{target_w}")));
    }
    let sh = mask.size().height() as usize;
    let sw = mask.size().width() as usize;
    let mut data = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let sy = nearest_index(i, sh, target_h) as u32;
        for j in 0..target_w {
            let sx = nearest_index(j, sw, target_w) as u32;
            data.push(if mask.get(sy, sx) { 1.0 } else { 0.0 });
        }
    }
    Ok(Tensor {
        shape: vec![1, target_h, target_w],
        data,
    })
}

/// Multiplies every channel of `feat` by the single-channel mask.
pub fn mask_attend(feat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = feat.chw()?;
    if mask.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} for features {:?}",
            mask.shape(),
            feat.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let src = &feat.data[ch * plane..(ch + 1) * plane];
        data.extend(src.iter().zip(&mask.data).map(|(f, m)| f * m));
    }
    Ok(Tensor {
        shape: feat.shape.clone(),
        data,
    })
}

/// 1×1 convolution: `out[o,y,x] = bias[o] + Σ_c weights[o,c]·inp[c,y,x]`.
pub fn conv1x1(inp: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = inp.chw()?;
    weights.expect_rank(2, "conv1x1 weights")?;
    let out_c = weights.shape[0];
    if weights.shape[1] != c || bias.shape() != [out_c] {
        return Err(Error::ShapeMismatch(format!(
            "conv1x1 weights {:?} bias {:?} for input {:?}",
            weights.shape(),
            bias.shape(),
            inp.shape()
        )));
    }
    let plane = h * w;
    let mut data = vec![0.0; out_c * plane];
    for o in 0..out_c {
        let out = &mut data[o * plane..(o + 1) * plane];
        out.fill(bias.data[o]);
        for ci in 0..c {
            let wt = weights.data[o * c + ci];
            let src = &inp.data[ci * plane..(ci + 1) * plane];
            for (d, s) in out.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    Ok(Tensor {
        shape: vec![out_c, h, w],
        data,
    })
}

/// Mean over the spatial dims: `[C,H,W] → [C]`.
pub fn global_avg_pool(inp: &Tensor) -> Result<Tensor> {
    let (c, h, w) = inp.chw()?;
    let plane = h * w;
    let data = (0..c)
        .map(|ch| inp.data[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor { shape: vec![c], data })
}

/// Average-pools `[C,H,W]` down to `[C,target_h,target_w]`; output cell
/// `(i, j)` averages source rows `⌊iH/h⌋..⌊(i+1)H/h⌋` and the analogous
/// columns.
pub fn avg_pool_to(inp: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (c, h, w) = inp.chw()?;
    if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
        return Err(Error::ShapeMismatch(format!("cannot pool {h}x{w} to {target_h}x{target_w}")));
    }
    if target_h == h && target_w == w {
        return Ok(inp.clone());
    }
    let mut data = Vec::with_capacity(c * target_h * target_w);
    for ch in 0..c {
        let plane = &inp.data[ch * h * w..(ch + 1) * h * w];
        for i in 0..target_h {
            let (y0, y1) = (i * h / target_h, (i + 1) * h / target_h);
            for j in 0..target_w {
                let (x0, x1) = (j * w / target_w, (j + 1) * w / target_w);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += plane[y * w + x];
                    }
                }
                data.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, target_h, target_w],
        data,
    })
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit length; fails when `‖v‖ ≤ 1e-12`.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    v.expect_rank(1, "l2_normalize")?;
    let n = l2_norm(&v.data);
    if n <= 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok(Tensor {
        shape: v.shape.clone(),
        data: v.data.iter().map(|x| x / n).collect(),
    })
}

/// `W v + b` for `W: [D_out, D_in]`.
pub fn affine(v: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    v.expect_rank(1, "affine input")?;
    weights.expect_rank(2, "affine weights")?;
    let (d_out, d_in) = (weights.shape[0], weights.shape[1]);
    if v.len() != d_in || bias.shape() != [d_out] {
        return Err(Error::ShapeMismatch(format!(
            "affine weights {:?} bias {:?} input {:?}",
            weights.shape(),
            bias.shape(),
            v.shape()
        )));
    }
    let data = (0..d_out)
        .map(|o| bias.data[o] + dot(&weights.data[o * d_in..(o + 1) * d_in], &v.data))
        .collect();
    Ok(Tensor { shape: vec![d_out], data })
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let up = f(&probe);
        probe.data[i] = orig - epsilon;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteValue(format!("function value at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * epsilon));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: grad,
    })
}

/// Multi-scale features of one frame, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::ShapeMismatch("feature pyramid needs at least one level".into()));
        }
        let mut prev_h = usize::MAX;
        for (i, l) in levels.iter().enumerate() {
            let (_, h, _) = l.chw().map_err(|_| Error::ShapeMismatch(format!("level {i} is not [C,H,W]")))?;
            if h >= prev_h {
                return Err(Error::ShapeMismatch(format!("level {i} height {h} does not decrease")));
            }
            prev_h = h;
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    /// `(C, H, W)` per level.
    pub fn level_dims(&self) -> Vec<(usize, usize, usize)> {
        self.levels.iter().map(|l| l.chw().expect("validated")).collect()
    }

    pub fn level_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.levels[i]
    }

    /// Serializes to the S3T1 container: magic, level count, every level's
    /// rank and dims, then every level's f32 payload in level order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PYRAMID_MAGIC);
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for l in &self.levels {
            out.extend_from_slice(&(l.shape.len() as u32).to_le_bytes());
            for &d in &l.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for l in &self.levels {
            for &v in &l.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != PYRAMID_MAGIC {
            return Err(Error::VersionMismatch("missing S3T1 magic".into()));
        }
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::VersionMismatch(format!("level rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            shapes.push(dims);
        }
        let mut levels = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::VersionMismatch("level too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            levels.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::VersionMismatch("trailing bytes after pyramid payload".into()));
        }
        FeaturePyramid::new(levels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FeaturePyramid::from_bytes(&bytes)
    }
}

pub const PYRAMID_MAGIC: &[u8; 4] = b"S3T1";

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::VersionMismatch(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
