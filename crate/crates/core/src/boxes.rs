//! Axis-aligned box types and geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area thresholds (in HR pixels²) separating small / medium / large objects.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn of_area(area: f64) -> Self {
        if area < SMALL_AREA {
            SizeBucket::Small
        } else if area < MEDIUM_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// Ground-truth box in normalized `cx, cy, w, h` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub size_bucket: SizeBucket,
}

impl GtBox {
    /// Builds a box from a pixel `[x, y, w, h]` rectangle on a `img_w × img_h`
    /// HR image, clamping it to the image.
    pub fn from_pixels(bbox: [f64; 4], class_id: usize, img_w: f64, img_h: f64) -> Result<Self> {
        let x0 = bbox[0].clamp(0.0, img_w);
        let y0 = bbox[1].clamp(0.0, img_h);
        let x1 = (bbox[0] + bbox[2]).clamp(0.0, img_w);
        let y1 = (bbox[1] + bbox[3]).clamp(0.0, img_h);
        let (w, h) = (x1 - x0, y1 - y0);
        if w <= 0.0 || h <= 0.0 || !(w * h).is_finite() {
            return Err(Error::DegenerateBox(format!("{bbox:?}")));
        }
        Ok(Self {
            cx: (x0 + x1) / (2.0 * img_w),
            cy: (y0 + y1) / (2.0 * img_h),
            w: w / img_w,
            h: h / img_h,
            class_id,
            size_bucket: SizeBucket::of_area(w * h),
        })
    }

    pub fn cxcywh(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn xyxy(&self) -> [f64; 4] {
        cxcywh_to_xyxy(self.cxcywh())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::DegenerateBox(format!("{:?}", self.cxcywh())));
        }
        Ok(())
    }
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

pub fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection-over-union of two xyxy boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two xyxy boxes with positive extents.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[2] > bx[0] && bx[3] > bx[1]) {
            return Err(Error::Contract(format!("degenerate box {bx:?}")));
        }
    }
    Ok(giou_unchecked(a, b))
}

pub(crate) fn giou_unchecked(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if enclose > 0.0 {
        iou - (enclose - union) / enclose
    } else {
        iou
    }
}
