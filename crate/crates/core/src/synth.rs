//! Seeded synthetic scenes: oblique, overlapping bar-shaped instruments
//! whose shafts all look alike and whose tips carry a class colour, laid
//! over textured tissue with tip-coloured clutter. Each frame also gets a
//! handcrafted feature pyramid (colour and edge channels), a corrupted
//! "second-stage" prediction set, and aspect/occupancy diagnostics.
//!
//! Each frame draws from its own seeded substreams, one for geometry and
//! one for prediction noise, so changing the noise levels never moves an
//! instrument.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_annotations, ClassId, Dataset, Frame, Instance};
use crate::error::{Error, Result};
use crate::mask::{bbox_of, occupancy, BinaryMask, FrameSize, RleMask};
use crate::tensor::{FeaturePyramid, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub frame_height: u32,
    pub frame_width: u32,
    pub class_count: usize,
    /// Inclusive range.
    pub instances_per_frame: [usize; 2],
    pub bar_length: [f64; 2],
    pub bar_width: [f64; 2],
    /// Angle from the nearest image axis family, degrees. Each bar is
    /// mirrored to either diagonal and either axis at random.
    pub orientation_deg: [f64; 2],
    /// Length of the class-coloured tip along the bar axis, pixels.
    pub tip_size: f64,
    /// Tip-coloured clutter blobs per frame.
    pub clutter: usize,
    /// Fraction of predicted instances whose label is corrupted.
    pub label_noise: f64,
    /// Probability of flipping each boundary pixel of a predicted mask.
    pub mask_noise: f64,
    /// Downsampling factor of each pyramid level, finest first.
    pub level_strides: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 32,
            frame_height: 64,
            frame_width: 64,
            class_count: 4,
            instances_per_frame: [2, 4],
            bar_length: [28.0, 44.0],
            bar_width: [4.0, 7.0],
            orientation_deg: [15.0, 75.0],
            tip_size: 8.0,
            clutter: 4,
            label_noise: 0.0,
            mask_noise: 0.0,
            level_strides: vec![2, 4],
        }
    }
}

impl SynthConfig {
    /// Long thin instruments at shallow angles, giving boxes with high
    /// aspect ratio and low mask occupancy.
    pub fn elongated() -> Self {
        Self {
            instances_per_frame: [1, 3],
            bar_length: [36.0, 56.0],
            bar_width: [3.0, 4.0],
            orientation_deg: [4.0, 12.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let frame = FrameSize::new(self.frame_height, self.frame_width).map_err(|e| Error::Config(e.to_string()))?;
        let short = frame.height().min(frame.width()) as f64;
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.class_count < 2 {
            return bad("class_count must be at least 2".into());
        }
        let [imin, imax] = self.instances_per_frame;
        if imin == 0 || imin > imax {
            return bad(format!("instances_per_frame {imin}..={imax} is empty"));
        }
        for (name, [lo, hi]) in [("bar_length", self.bar_length), ("bar_width", self.bar_width)] {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.bar_length[1] > 1.5 * self.frame_width.max(self.frame_height) as f64 {
            return bad("bar_length exceeds the frame".into());
        }
        if self.bar_width[1] > short / 2.0 || self.bar_width[1] >= self.bar_length[0] {
            return bad("bar_width too large for frame or bar length".into());
        }
        let [alo, ahi] = self.orientation_deg;
        if !(0.0..=90.0).contains(&alo) || !(alo..=90.0).contains(&ahi) {
            return bad(format!("orientation range [{alo}, {ahi}] not within [0, 90]"));
        }
        if !(self.tip_size > 0.0 && self.tip_size < self.bar_length[0]) {
            return bad("tip_size must be positive and shorter than every bar".into());
        }
        if !(0.0..1.0).contains(&self.label_noise) || !(0.0..1.0).contains(&self.mask_noise) {
            return bad("label_noise and mask_noise must lie in [0, 1)".into());
        }
        if self.level_strides.is_empty() || self.level_strides.windows(2).any(|w| w[0] >= w[1]) {
            return bad("level_strides must be nonempty and strictly increasing".into());
        }
        if self.level_strides.iter().any(|&s| s == 0 || frame.height() as usize / s == 0 || frame.width() as usize / s == 0) {
            return bad("a level stride leaves no feature cells".into());
        }
        Ok(())
    }

    pub fn frame_size(&self) -> FrameSize {
        FrameSize::new(self.frame_height, self.frame_width).expect("validated")
    }

    /// `(C, H, W)` of the generated pyramids.
    pub fn level_dims(&self) -> Vec<(usize, usize, usize)> {
        self.level_strides
            .iter()
            .map(|&s| (FEATURE_CHANNELS, self.frame_height as usize / s, self.frame_width as usize / s))
            .collect()
    }
}

/// Three colour channels and two edge channels.
pub const FEATURE_CHANNELS: usize = 5;

/// A generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub gt: Dataset,
    /// GT masks with boundary noise, labels corrupted at `label_noise`.
    pub pred: Dataset,
    /// One pyramid per frame, in frame order.
    pub pyramids: Vec<FeaturePyramid>,
    /// Ids `(frame, instance)` of the predictions whose label was corrupted.
    pub corrupted: Vec<(String, u64)>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one frame and purpose.
fn substream(seed: u64, frame: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ salt.wrapping_mul(0xA24B_AED4_963E_E407)) ^ frame as u64))
}

const SHAFT: [f64; 3] = [0.72, 0.72, 0.76];
const TISSUE: [f64; 3] = [0.55, 0.27, 0.22];

/// Tip colour of a zero-based class index.
fn class_colour(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.95, 0.85, 0.15],
        [0.15, 0.85, 0.90],
        [0.90, 0.20, 0.85],
        [0.20, 0.35, 0.95],
        [0.25, 0.90, 0.25],
        [0.98, 0.55, 0.10],
    ];
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let h = splitmix64(class as u64);
    let c = |s: u32| 0.1 + 0.85 * ((h >> s) & 0xFF) as f64 / 255.0;
    [c(0), c(8), c(16)]
}

struct Bar {
    cx: f64,
    cy: f64,
    ux: f64,
    uy: f64,
    half_len: f64,
    half_width: f64,
    /// +1 when the tip is at the `+u` end.
    tip_sign: f64,
    tip: f64,
    class: usize,
}

impl Bar {
    /// `None` outside the bar, `Some(true)` on the tip.
    fn classify(&self, x: f64, y: f64) -> Option<bool> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * self.ux + dy * self.uy;
        let across = -dx * self.uy + dy * self.ux;
        if along.abs() > self.half_len || across.abs() > self.half_width {
            return None;
        }
        Some(along * self.tip_sign >= self.half_len - self.tip)
    }
}

fn sample_bar(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Bar {
    let (h, w) = (cfg.frame_height as f64, cfg.frame_width as f64);
    let [alo, ahi] = cfg.orientation_deg;
    let mut angle = if ahi > alo { rng.gen_range(alo..=ahi) } else { alo };
    if rng.gen_bool(0.5) {
        angle = 90.0 - angle;
    }
    if rng.gen_bool(0.5) {
        angle = -angle;
    }
    let rad = angle.to_radians();
    let len = rng.gen_range(cfg.bar_length[0]..=cfg.bar_length[1]);
    let width = rng.gen_range(cfg.bar_width[0]..=cfg.bar_width[1]);
    Bar {
        cx: rng.gen_range(0.3 * w..=0.7 * w),
        cy: rng.gen_range(0.3 * h..=0.7 * h),
        ux: rad.cos(),
        uy: rad.sin(),
        half_len: len / 2.0,
        half_width: width / 2.0,
        tip_sign: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        tip: cfg.tip_size,
        class: rng.gen_range(0..cfg.class_count),
    }
}

/// Rendered frame: colour image `[3, H, W]` and visible GT masks.
struct Rendered {
    image: Vec<f64>,
    masks: Vec<(usize, BinaryMask)>,
}

const MIN_VISIBLE: usize = 24;
const MIN_TIP_VISIBLE: usize = 6;
const MAX_FRAME_ATTEMPTS: usize = 200;

fn render_frame(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Rendered> {
    let size = cfg.frame_size();
    let (h, w) = (size.height() as usize, size.width() as usize);
    for _ in 0..MAX_FRAME_ATTEMPTS {
        let n = rng.gen_range(cfg.instances_per_frame[0]..=cfg.instances_per_frame[1]);
        let bars: Vec<Bar> = (0..n).map(|_| sample_bar(cfg, rng)).collect();

        // topmost bar wins each pixel
        let mut owner: Vec<Option<(usize, bool)>> = vec![None; h * w];
        for (k, bar) in bars.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if let Some(tip) = bar.classify(x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * w + x] = Some((k, tip));
                    }
                }
            }
        }
        let mut visible = vec![0usize; n];
        let mut tip_visible = vec![0usize; n];
        for (k, tip) in owner.iter().flatten() {
            visible[*k] += 1;
            tip_visible[*k] += *tip as usize;
        }
        if visible.iter().any(|&v| v < MIN_VISIBLE) || tip_visible.iter().any(|&v| v < MIN_TIP_VISIBLE) {
            continue;
        }

        let mut image = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    image[c * h * w + y * w + x] = TISSUE[c] + rng.gen_range(-0.08..0.08);
                }
            }
        }
        for _ in 0..cfg.clutter {
            let colour = class_colour(rng.gen_range(0..cfg.class_count));
            let (by, bx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let r = rng.gen_range(1.5..3.5);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - by, x as f64 + 0.5 - bx);
                    if dy * dy + dx * dx <= r * r {
                        for c in 0..3 {
                            image[c * h * w + y * w + x] = colour[c];
                        }
                    }
                }
            }
        }
        for (i, o) in owner.iter().enumerate() {
            if let Some((k, tip)) = o {
                let colour = if *tip { class_colour(bars[*k].class) } else { SHAFT };
                for c in 0..3 {
                    image[c * h * w + i] = colour[c] + rng.gen_range(-0.04..0.04);
                }
            }
        }

        let masks = (0..n)
            .map(|k| {
                let m = BinaryMask::from_fn(size, |y, x| matches!(owner[y as usize * w + x as usize], Some((o, _)) if o == k));
                (bars[k].class, m)
            })
            .collect();
        return Ok(Rendered { image, masks });
    }
    Err(Error::Config(format!(
        "could not place instruments with at least {MIN_VISIBLE} visible pixels in {MAX_FRAME_ATTEMPTS} attempts"
    )))
}

/// Colour channels relative to the shaft grey, so the shared shaft carries
/// almost no signal, plus signed horizontal and vertical luminance
/// gradients. Average-pooled by each stride and rounded to f32 so the S3T1
/// files reproduce them exactly.
fn build_pyramid(cfg: &SynthConfig, image: &[f64]) -> Result<FeaturePyramid> {
    let (h, w) = (cfg.frame_height as usize, cfg.frame_width as usize);
    let plane = h * w;
    let lum: Vec<f64> = (0..plane).map(|i| (image[i] + image[plane + i] + image[2 * plane + i]) / 3.0).collect();
    let mut full: Vec<f64> = (0..3 * plane).map(|i| image[i] - SHAFT[i / plane]).collect();
    let mut dx = vec![0.0; plane];
    let mut dy = vec![0.0; plane];
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                dx[y * w + x] = lum[y * w + x + 1] - lum[y * w + x];
            }
            if y + 1 < h {
                dy[y * w + x] = lum[(y + 1) * w + x] - lum[y * w + x];
            }
        }
    }
    full.extend(dx);
    full.extend(dy);
    let full = Tensor::new(vec![FEATURE_CHANNELS, h, w], full)?;
    let levels = cfg
        .level_strides
        .iter()
        .map(|&s| {
            let pooled = crate::tensor::avg_pool_to(&full, h / s, w / s)?;
            let shape = pooled.shape().to_vec();
            Tensor::new(shape, pooled.into_data().into_iter().map(|v| v as f32 as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

/// Flips each boundary pixel with probability `p`; keeps the original if
/// the result would be empty.
fn perturb_mask(mask: &BinaryMask, p: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    if p == 0.0 {
        return mask.clone();
    }
    let s = mask.size();
    let (h, w) = (s.height() as i64, s.width() as i64);
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && mask.get(y as u32, x as u32);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let v = at(y, x);
            let boundary = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|(a, b)| at(y + a, x + b) != v);
            if boundary && rng.gen_bool(p) {
                out.set(y as u32, x as u32, !v);
            }
        }
    }
    if out.is_empty() {
        mask.clone()
    } else {
        out
    }
}

/// Renders the whole scene described by `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let size = cfg.frame_size();
    let class_names: Vec<String> = (1..=cfg.class_count).map(|c| format!("instrument_{c}")).collect();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    let mut pyramids = Vec::with_capacity(cfg.frames);
    let mut corrupted = Vec::new();
    for f in 0..cfg.frames {
        let frame_id = format!("frame_{f:04}");
        let mut geo = substream(cfg.seed, f, 0);
        let mut noise = substream(cfg.seed, f, 1);
        let rendered = render_frame(cfg, &mut geo)?;
        pyramids.push(build_pyramid(cfg, &rendered.image)?);
        for (k, (class, mask)) in rendered.masks.iter().enumerate() {
            let id = k as u64 + 1;
            gt.push(Instance {
                frame_id: frame_id.clone(),
                instance_id: id,
                class: ClassId::from_index(*class),
                score: 1.0,
                mask: RleMask::encode(mask),
            });
            let flip = noise.gen_bool(cfg.label_noise);
            let label = if flip {
                let other = noise.gen_range(0..cfg.class_count - 1);
                if other >= *class { other + 1 } else { other }
            } else {
                *class
            };
            let score = if flip { noise.gen_range(0.05..0.6) } else { noise.gen_range(0.5..1.0) };
            let pmask = perturb_mask(mask, cfg.mask_noise, &mut noise);
            if flip {
                corrupted.push((frame_id.clone(), id));
            }
            pred.push(Instance {
                frame_id: frame_id.clone(),
                instance_id: id,
                class: ClassId::from_index(label),
                score,
                mask: RleMask::encode(&pmask),
            });
        }
        frames.push(Frame { id: frame_id, size });
    }
    Ok(SynthScene {
        config: cfg.clone(),
        gt: Dataset::new(class_names.clone(), frames.clone(), gt)?,
        pred: Dataset::new(class_names, frames, pred)?,
        pyramids,
        corrupted,
    })
}

pub const GT_FILE: &str = "gt.json";
pub const PRED_FILE: &str = "pred.json";
pub const CONFIG_FILE: &str = "synth_config.json";
pub const FEATURE_DIR: &str = "features";

/// Path of a frame's pyramid file inside a scene directory.
pub fn pyramid_path(dir: &Path, frame_id: &str) -> std::path::PathBuf {
    dir.join(FEATURE_DIR).join(format!("{frame_id}.s3t"))
}

impl SynthScene {
    /// Writes `gt.json`, `pred.json`, `synth_config.json` and one S3T1 file
    /// per frame under `features/`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let features = dir.join(FEATURE_DIR);
        std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        save_annotations(&self.gt, dir.join(GT_FILE))?;
        save_annotations(&self.pred, dir.join(PRED_FILE))?;
        let cfg_path = dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(&self.config).expect("config serialization cannot fail");
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        for (frame, p) in self.gt.frames().iter().zip(&self.pyramids) {
            p.save(pyramid_path(dir, &frame.id))?;
        }
        Ok(())
    }
}

/// Box-shape statistics over every instance of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectReport {
    pub instances: usize,
    pub above_ratio_3: usize,
    pub fraction_above_ratio_3: f64,
    pub mean_aspect_ratio: f64,
    pub mean_occupancy: f64,
    /// `(lower edge, count)` for aspect-ratio bins `[1,2) [2,3) [3,4) [4,6) [6,∞)`.
    pub histogram: Vec<(f64, usize)>,
}

const ASPECT_BINS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 6.0];

pub fn aspect_report(ds: &Dataset) -> Result<AspectReport> {
    if ds.instances().is_empty() {
        return Err(Error::EmptyDataset("no instances to measure".into()));
    }
    let mut histogram: Vec<(f64, usize)> = ASPECT_BINS.iter().map(|&b| (b, 0)).collect();
    let mut above = 0;
    let mut ratio_sum = 0.0;
    let mut occ_sum = 0.0;
    for inst in ds.instances() {
        let mask = inst.decode_mask()?;
        let ratio = bbox_of(&mask)?.aspect_ratio();
        occ_sum += occupancy(&mask)?;
        ratio_sum += ratio;
        above += (ratio > 3.0) as usize;
        let bin = ASPECT_BINS.iter().rposition(|&b| ratio >= b).unwrap_or(0);
        histogram[bin].1 += 1;
    }
    let n = ds.instances().len();
    Ok(AspectReport {
        instances: n,
        above_ratio_3: above,
        fraction_above_ratio_3: above as f64 / n as f64,
        mean_aspect_ratio: ratio_sum / n as f64,
        mean_occupancy: occ_sum / n as f64,
        histogram,
    })
}
