//! Binary mask algebra: dense masks, column-major run-length coding,
//! tight boxes, and the geometric quantities the evaluation and
//! diagnostics are built on.

use crate::error::{Error, Result};

/// Height and width of a frame grid, both at least one pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameSize {
    height: u32,
    width: u32,
}

impl FrameSize {
    pub fn new(height: u32, width: u32) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidFrameSize { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn area(&self) -> usize {
        self.height as usize * self.width as usize
    }
}

/// Dense boolean mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    size: FrameSize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(size: FrameSize) -> Self {
        Self {
            size,
            bits: vec![false; size.area()],
        }
    }

    pub fn full(size: FrameSize) -> Self {
        Self {
            size,
            bits: vec![true; size.area()],
        }
    }

    /// Builds a mask from row-major bits.
    pub fn from_bits(size: FrameSize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != size.area() {
            return Err(Error::SizeMismatch(format!(
                "{} bits for a {}x{} frame",
                bits.len(),
                size.height,
                size.width
            )));
        }
        Ok(Self { size, bits })
    }

    /// Builds a mask by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(size: FrameSize, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(size.area());
        for y in 0..size.height {
            for x in 0..size.width {
                bits.push(f(y, x));
            }
        }
        Self { size, bits }
    }

    /// A mask with exactly the pixels of `bbox` set.
    pub fn from_box(size: FrameSize, bbox: &BBox) -> Result<Self> {
        if bbox.x_max > size.width || bbox.y_max > size.height {
            return Err(Error::SizeMismatch(format!(
                "box {bbox:?} exceeds {}x{} frame",
                size.height, size.width
            )));
        }
        Ok(Self::from_fn(size, |y, x| bbox.contains(y, x)))
    }

    pub fn size(&self) -> FrameSize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.size.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let w = self.size.width as usize;
        self.bits[row as usize * w + col as usize] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same_size(&self, other: &BinaryMask) -> Result<()> {
        if self.size != other.size {
            return Err(Error::SizeMismatch(format!(
                "{}x{} vs {}x{}",
                self.size.height, self.size.width, other.size.height, other.size.width
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_size(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask { size: self.size, bits })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_size(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask { size: self.size, bits })
    }

    /// Merges `other` into `self` in place.
    pub fn union_in_place(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_same_size(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Intersection and union pixel counts.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(usize, usize)> {
        self.check_same_size(other)?;
        let mut inter = 0;
        let mut union = 0;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        Ok((inter, union))
    }

    /// Rotates the mask a quarter turn clockwise.
    pub fn rotate90(&self) -> BinaryMask {
        let h = self.size.height;
        let w = self.size.width;
        let size = FrameSize { height: w, width: h };
        // output (r, c) takes input (h - 1 - c, r)
        BinaryMask::from_fn(size, |r, c| self.get(h - 1 - c, r))
    }
}

/// Run-length coded mask: alternating runs of zeros and ones in
/// column-major scan order, starting with a (possibly empty) zero run.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RleMask {
    size: FrameSize,
    counts: Vec<u32>,
}

impl RleMask {
    /// Validates `counts` against `size`.
    pub fn new(size: FrameSize, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != size.area() as u64 {
            return Err(Error::MalformedRle(format!(
                "counts sum to {total}, frame area is {}",
                size.area()
            )));
        }
        if let Some(pos) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(Error::MalformedRle(format!("zero-length run at position {}", pos + 1)));
        }
        Ok(Self { size, counts })
    }

    pub fn size(&self) -> FrameSize {
        self.size
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Foreground pixel count, read directly from the odd runs.
    pub fn area(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }

    pub fn encode(mask: &BinaryMask) -> RleMask {
        let h = mask.size.height as usize;
        let w = mask.size.width as usize;
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let v = mask.bits[y * w + x];
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        RleMask { size: mask.size, counts }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let h = self.size.height as usize;
        let w = self.size.width as usize;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return Err(Error::MalformedRle(format!(
                "counts sum to {total}, frame area is {}",
                h * w
            )));
        }
        let mut bits = vec![false; h * w];
        let mut pos = 0usize;
        let mut value = false;
        for &c in &self.counts {
            if value {
                for k in pos..pos + c as usize {
                    // column-major position k is pixel (k % h, k / h)
                    bits[(k % h) * w + k / h] = true;
                }
            }
            pos += c as usize;
            value = !value;
        }
        Ok(BinaryMask { size: self.size, bits })
    }
}

impl From<&BinaryMask> for RleMask {
    fn from(mask: &BinaryMask) -> Self {
        RleMask::encode(mask)
    }
}

/// Axis-aligned box; `x_max` and `y_max` are exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() as usize * self.height() as usize
    }

    pub fn contains(&self, row: u32, col: u32) -> bool {
        row >= self.y_min && row < self.y_max && col >= self.x_min && col < self.x_max
    }

    /// Long side over short side, always ≥ 1.
    pub fn aspect_ratio(&self) -> f64 {
        let w = self.width() as f64;
        let h = self.height() as f64;
        w.max(h) / w.min(h)
    }
}

/// IoU of two masks; two empty masks score 0, never NaN.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = a.overlap_counts(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn mask_area(mask: &BinaryMask) -> usize {
    mask.area()
}

/// Tight hull of the set pixels.
pub fn bbox_of(mask: &BinaryMask) -> Result<BBox> {
    let w = mask.size.width;
    let mut bbox: Option<BBox> = None;
    for (i, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        let y = i as u32 / w;
        let x = i as u32 % w;
        bbox = Some(match bbox {
            None => BBox {
                x_min: x,
                y_min: y,
                x_max: x + 1,
                y_max: y + 1,
            },
            Some(b) => BBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x + 1),
                y_max: b.y_max.max(y + 1),
            },
        });
    }
    bbox.ok_or(Error::EmptyMask)
}

pub fn aspect_ratio(bbox: &BBox) -> f64 {
    bbox.aspect_ratio()
}

/// Fraction of the tight box covered by the mask.
pub fn occupancy(mask: &BinaryMask) -> Result<f64> {
    let bbox = bbox_of(mask)?;
    Ok(mask.area() as f64 / bbox.area() as f64)
}
