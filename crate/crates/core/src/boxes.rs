//! Axis-aligned boxes, overlap, delta encoding and greedy NMS.

use std::fmt;

use crate::error::{Error, Result};

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Validating constructor: requires positive width and height.
    pub fn try_new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox::new(x_min, y_min, x_max, y_max);
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::invalid("box", format!("degenerate box {self}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Validated overlap score.
pub fn overlap(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Regression target of `gt` relative to `reference`:
/// `((gcx - bcx) / bw, (gcy - bcy) / bh, ln(gw / bw), ln(gh / bh))`.
pub fn encode_box(reference: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    reference.validate()?;
    gt.validate()?;
    let (bx, by) = reference.center();
    let (gx, gy) = gt.center();
    let (bw, bh) = (reference.width(), reference.height());
    Ok([
        (gx - bx) / bw,
        (gy - by) / bh,
        (gt.width() / bw).ln(),
        (gt.height() / bh).ln(),
    ])
}

/// Inverse of [`encode_box`]. Log-size deltas are clamped to `ln(1000 / 16)`
/// so untrained predictions cannot overflow.
pub fn decode_box(reference: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    reference.validate()?;
    const MAX_LOG: f64 = 4.135_166_556_742_356; // ln(1000 / 16)
    let (bx, by) = reference.center();
    let (bw, bh) = (reference.width(), reference.height());
    let cx = bx + deltas[0] * bw;
    let cy = by + deltas[1] * bh;
    let w = bw * deltas[2].min(MAX_LOG).exp();
    let h = bh * deltas[3].min(MAX_LOG).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// Greedy non-maximum suppression. Returns indices of kept boxes, highest
/// score first; ties keep the lower index first. A box is dropped when its
/// IoU with an already kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let areas: Vec<f64> = boxes.iter().map(BBox::area).collect();
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let inter = boxes[i].intersection(&boxes[j]);
            if inter > 0.0 && inter / (areas[i] + areas[j] - inter) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}
