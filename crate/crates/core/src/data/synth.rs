//! Seeded synthetic benchmark: bright shapes of four kinds on a noisy,
//! cluttered background, with a guaranteed share of objects under 16 px.
//!
//! Class signatures (shape, intensity):
//! 1 filled rectangle (bright), 2 hollow rectangle (bright),
//! 3 filled ellipse (dim), 4 plus sign (dim).
//! Further classes cycle through the same shapes with shifted intensity.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::boxes::BBox;
use crate::data::csv::write_ground_truth;
use crate::data::pnm::Raster;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;

/// Heights below this count as small.
pub const SMALL_HEIGHT: usize = 16;
const PLACEMENT_RETRIES: usize = 64;
const GAP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub images: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub height_min: usize,
    pub height_max: usize,
    pub classes: usize,
    /// Clutter strokes per 32x32 block.
    pub clutter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Minimum share of small objects in each image, when the height range allows.
    pub small_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128,
            height: 128,
            images: 100,
            objects_min: 1,
            objects_max: 4,
            height_min: 6,
            height_max: 48,
            classes: 4,
            clutter: 0.5,
            noise: 0.03,
            small_fraction: 0.4,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("synth_config", msg));
        if self.width < 8 || self.height < 8 {
            return fail(format!("image {}x{} too small", self.width, self.height));
        }
        if self.objects_min > self.objects_max {
            return fail("objects_min exceeds objects_max".into());
        }
        if self.height_min < 4 || self.height_min > self.height_max || self.height_max > self.height {
            return fail(format!("height range [{}, {}] invalid", self.height_min, self.height_max));
        }
        if self.classes == 0 {
            return fail("no classes".into());
        }
        if !(0.0..=1.0).contains(&self.small_fraction) || self.clutter < 0.0 || self.noise < 0.0 {
            return fail("small_fraction, clutter or noise out of range".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Rect,
    Ring,
    Ellipse,
    Plus,
}

impl Glyph {
    pub fn of_class(class_id: usize) -> Glyph {
        [Glyph::Rect, Glyph::Ring, Glyph::Ellipse, Glyph::Plus][(class_id - 1) % 4]
    }

    /// Whether pixel (x, y), relative to a `w` x `h` box, belongs to the glyph.
    pub fn covers(self, x: usize, y: usize, w: usize, h: usize) -> bool {
        match self {
            Glyph::Rect => true,
            Glyph::Ring => {
                let t = (w.min(h) / 5).max(1);
                x < t || y < t || x + t >= w || y + t >= h
            }
            Glyph::Ellipse => {
                let dx = (x as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
                let dy = (y as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            Glyph::Plus => {
                let tx = (w / 3).max(2).min(w);
                let ty = (h / 3).max(2).min(h);
                let in_col = x >= (w - tx) / 2 && x < (w - tx) / 2 + tx;
                let in_row = y >= (h - ty) / 2 && y < (h - ty) / 2 + ty;
                in_col || in_row
            }
        }
    }
}

pub fn class_intensity(class_id: usize) -> f64 {
    let base = if matches!(Glyph::of_class(class_id), Glyph::Rect | Glyph::Ring) { 0.92 } else { 0.66 };
    base - 0.06 * ((class_id - 1) / 4 % 3) as f64
}

/// A placed object; its box spans whole pixels `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthObject {
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl SynthObject {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x as f64, self.y as f64, (self.x + self.w) as f64, (self.y + self.h) as f64)
    }

    fn clear_of(&self, other: &SynthObject) -> bool {
        self.x >= other.x + other.w + GAP
            || other.x >= self.x + self.w + GAP
            || self.y >= other.y + other.h + GAP
            || other.y >= self.y + self.h + GAP
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    pub raster: Raster,
    pub objects: Vec<SynthObject>,
    /// Objects dropped after exhausting placement retries.
    pub skipped: usize,
}

impl SynthImage {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .map(|o| GroundTruth {
                image_id: self.image_id.clone(),
                class_id: o.class_id,
                bbox: o.bbox(),
            })
            .collect()
    }
}

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

/// Renders image `index`. Each image draws from its own stream of the
/// seeded generator, so images can be produced in any order.
pub fn render_image(cfg: &SynthConfig, index: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width, cfg.height);

    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let small_hi = cfg.height_max.min(SMALL_HEIGHT - 1);
    let large_lo = cfg.height_min.max(SMALL_HEIGHT);
    let n_small = if cfg.height_min > small_hi {
        0
    } else if large_lo > cfg.height_max {
        n
    } else {
        (n as f64 * cfg.small_fraction).ceil() as usize
    };
    // Large objects first: they are the hardest to fit.
    let mut heights: Vec<usize> = (0..n)
        .map(|i| {
            if i >= n - n_small {
                rng.random_range(cfg.height_min..=small_hi)
            } else {
                rng.random_range(large_lo..=cfg.height_max)
            }
        })
        .collect();
    heights.sort_unstable_by(|a, b| b.cmp(a));

    let mut objects: Vec<SynthObject> = Vec::with_capacity(n);
    let mut skipped = 0;
    for oh in heights {
        let class_id = rng.random_range(1..=cfg.classes);
        let aspect: f64 = rng.random_range(0.75..1.34);
        let ow = ((oh as f64 * aspect).round() as usize).clamp(4, w);
        let placed = (0..PLACEMENT_RETRIES).find_map(|_| {
            let cand = SynthObject {
                class_id,
                x: rng.random_range(0..=w - ow),
                y: rng.random_range(0..=h - oh),
                w: ow,
                h: oh,
            };
            objects.iter().all(|o| cand.clear_of(o)).then_some(cand)
        });
        match placed {
            Some(o) => objects.push(o),
            None => {
                skipped += 1;
                log::warn!("image {}: no room for a {ow}x{oh} object; skipped", image_id(index));
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let background: f64 = rng.random_range(0.1..0.3);
    let mut canvas: Vec<f64> = vec![background; w * h];
    let strokes = (cfg.clutter * (w * h) as f64 / 1024.0).round() as usize;
    for _ in 0..strokes {
        let level: f64 = rng.random_range(0.35..0.55);
        let len = rng.random_range(5..=30usize);
        let (mut px, mut py) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..len {
            let (xi, yi) = (px.round() as isize, py.round() as isize);
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                canvas[yi as usize * w + xi as usize] = level;
            }
            px += angle.cos();
            py += angle.sin();
        }
    }
    for o in &objects {
        let glyph = Glyph::of_class(o.class_id);
        let level = class_intensity(o.class_id);
        for y in 0..o.h {
            for x in 0..o.w {
                if glyph.covers(x, y, o.w, o.h) {
                    canvas[(o.y + y) * w + o.x + x] = level;
                }
            }
        }
    }
    let pixels = canvas
        .into_iter()
        .map(|v| {
            let v = if cfg.noise > 0.0 { v + noise.sample(&mut rng) } else { v };
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    SynthImage {
        image_id: image_id(index),
        raster: Raster::new(w, h, 1, pixels).expect("sized above"),
        objects,
        skipped,
    }
}

/// Renders images `first .. first + cfg.images`.
pub fn generate(cfg: &SynthConfig, first: usize) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    Ok((first..first + cfg.images).into_par_iter().map(|i| render_image(cfg, i)).collect())
}

/// Height bucket edges of the manifest histogram.
pub const HISTOGRAM_EDGES: [usize; 7] = [0, 8, 12, 16, 24, 32, 48];

#[derive(Clone, Debug, PartialEq)]
pub struct SizeSummary {
    pub objects: usize,
    pub small: usize,
    pub skipped: usize,
    /// Counts per `[edge_i, edge_{i+1})`, last bucket open-ended.
    pub histogram: Vec<usize>,
}

impl SizeSummary {
    pub fn of(images: &[SynthImage]) -> Self {
        let mut histogram = vec![0; HISTOGRAM_EDGES.len()];
        let mut s = SizeSummary {
            objects: 0,
            small: 0,
            skipped: images.iter().map(|i| i.skipped).sum(),
            histogram: Vec::new(),
        };
        for o in images.iter().flat_map(|i| &i.objects) {
            s.objects += 1;
            s.small += usize::from(o.h < SMALL_HEIGHT);
            let bucket = HISTOGRAM_EDGES.iter().rposition(|&e| o.h >= e).expect("edge 0");
            histogram[bucket] += 1;
        }
        s.histogram = histogram;
        s
    }

    pub fn small_fraction(&self) -> f64 {
        if self.objects == 0 {
            0.0
        } else {
            self.small as f64 / self.objects as f64
        }
    }
}

pub fn manifest_text(cfg: &SynthConfig, summary: &SizeSummary) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "seed = {}", cfg.seed);
    let _ = writeln!(m, "images = {}", cfg.images);
    let _ = writeln!(m, "width = {}", cfg.width);
    let _ = writeln!(m, "height = {}", cfg.height);
    let _ = writeln!(m, "classes = {}", cfg.classes);
    let _ = writeln!(m, "objects_per_image = {}-{}", cfg.objects_min, cfg.objects_max);
    let _ = writeln!(m, "object_height = {}-{}", cfg.height_min, cfg.height_max);
    let _ = writeln!(m, "clutter = {}", cfg.clutter);
    let _ = writeln!(m, "noise = {}", cfg.noise);
    let _ = writeln!(m, "objects = {}", summary.objects);
    let _ = writeln!(m, "skipped = {}", summary.skipped);
    let _ = writeln!(m, "small_objects = {}", summary.small);
    let _ = writeln!(m, "small_fraction = {:.6}", summary.small_fraction());
    for (i, count) in summary.histogram.iter().enumerate() {
        let lo = HISTOGRAM_EDGES[i];
        match HISTOGRAM_EDGES.get(i + 1) {
            Some(hi) => {
                let _ = writeln!(m, "height_{lo}_{hi} = {count}");
            }
            None => {
                let _ = writeln!(m, "height_{lo}_up = {count}");
            }
        }
    }
    m
}

/// Writes `images/<id>.pgm`, `gt.csv` and `manifest.txt` under `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, images: &[SynthImage]) -> Result<SizeSummary> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    images
        .par_iter()
        .try_for_each(|im| im.raster.write(&img_dir.join(format!("{}.pgm", im.image_id))))?;
    let gts: Vec<GroundTruth> = images.iter().flat_map(SynthImage::ground_truth).collect();
    let mut buf = Vec::new();
    write_ground_truth(&mut buf, &gts)?;
    fs::write(dir.join("gt.csv"), buf)?;
    let summary = SizeSummary::of(images);
    fs::write(dir.join("manifest.txt"), manifest_text(cfg, &summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            images: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_order_free() {
        let cfg = small_cfg();
        let a = generate(&cfg, 0).unwrap();
        let b: Vec<SynthImage> = (0..cfg.images).rev().map(|i| render_image(&cfg, i)).collect();
        assert!(a.iter().eq(b.iter().rev()));
    }

    #[test]
    fn layout_invariants() {
        let cfg = small_cfg();
        for im in generate(&cfg, 0).unwrap() {
            for (i, a) in im.objects.iter().enumerate() {
                assert!(a.x + a.w <= cfg.width && a.y + a.h <= cfg.height);
                assert!((cfg.height_min..=cfg.height_max).contains(&a.h));
                for b in &im.objects[i + 1..] {
                    assert!(a.bbox().iou(&b.bbox()) < 0.3);
                }
            }
        }
    }

    #[test]
    fn small_share_is_guaranteed() {
        let summary = SizeSummary::of(&generate(&small_cfg(), 0).unwrap());
        assert!(summary.small_fraction() >= 0.3, "{summary:?}");
        let forced = SynthConfig {
            height_max: 15,
            ..small_cfg()
        };
        let summary = SizeSummary::of(&generate(&forced, 0).unwrap());
        assert_eq!(summary.small, summary.objects);
        assert!(manifest_text(&forced, &summary).contains("small_fraction = 1.000000"));
    }

    #[test]
    fn glyph_masks_span_their_boxes() {
        for class_id in 1..=4 {
            let g = Glyph::of_class(class_id);
            for h in 6..=48 {
                for w in [4, h * 3 / 4, h, h * 4 / 3] {
                    let w = w.max(4);
                    let mut xs = (usize::MAX, 0);
                    let mut ys = (usize::MAX, 0);
                    for y in 0..h {
                        for x in 0..w {
                            if g.covers(x, y, w, h) {
                                xs = (xs.0.min(x), xs.1.max(x + 1));
                                ys = (ys.0.min(y), ys.1.max(y + 1));
                            }
                        }
                    }
                    assert!(xs.0 <= 1 && xs.1 + 1 >= w && ys.0 <= 1 && ys.1 + 1 >= h, "class {class_id} {w}x{h}");
                }
            }
        }
    }
}
