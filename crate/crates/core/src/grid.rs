//! Geometry and grid types shared by every stage of the pipeline.
//!
//! Coordinates are continuous image pixels. Pixel `(c, r)` occupies the unit
//! square `[c, c+1) x [r, r+1)`. Grid cell `(gx, gy)` sits at grid coordinate
//! `(gx, gy)`, i.e. at pixel `(gx * stride_x, gy * stride_y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;

fn check_len(what: &'static str, rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows.checked_mul(cols) != Some(len) {
        return Err(Error::ShapeMismatch {
            what,
            expected: (rows, cols),
            found: (len, 1),
        });
    }
    Ok(())
}

/// Dense row-major grid of unbounded reals (raw logits, size maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Pre-sigmoid aligner output.
pub type LogitGrid = Grid;

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("grid", rows, cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// Elementwise logistic readout.
    pub fn sigmoid(&self) -> Heatmap {
        Heatmap {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| sigmoid(x)).collect(),
        }
    }
}

/// Grid of matching probabilities, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("heatmap", rows, cols, data.len())?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "heatmap",
                format!("value {bad} outside [0, 1]"),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Raises a cell to `value` if it is currently lower.
    #[inline]
    pub(crate) fn raise(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!((0.0..=1.0).contains(&value));
        let cell = &mut self.data[row * self.cols + col];
        if value > *cell {
            *cell = value;
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Row-major index and value of the largest cell; the first one wins ties.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = (0, self.data[0]);
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0 / self.cols, best.0 % self.cols, best.1)
    }

    /// Bilinear sample at a continuous grid coordinate, clamped to the grid.
    pub fn sample_bilinear(&self, gx: f64, gy: f64) -> f64 {
        let max_x = (self.cols - 1) as f64;
        let max_y = (self.rows - 1) as f64;
        let x = gx.clamp(0.0, max_x);
        let y = gy.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.cols - 1);
        let y1 = (y0 + 1).min(self.rows - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Axis-aligned box in continuous pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !finite || x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox(x0, y0, x1, y1));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// From COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Intersection with `[0, w) x [0, h)`; `None` when nothing is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<Self> {
        Self::new(
            self.x0.max(0.0),
            self.y0.max(0.0),
            self.x1.min(w),
            self.y1.min(h),
        )
        .ok()
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        Self::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        check_len("mask", rows, cols, bits.len())?;
        Ok(Self { rows, cols, bits })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    /// Sets every pixel whose center lies inside `bbox`.
    pub fn from_box(rows: usize, cols: usize, bbox: &BBox) -> Self {
        let mut mask = Self::empty(rows, cols);
        mask.fill_where(|x, y| bbox.contains(x, y));
        mask
    }

    /// Sets every pixel whose center satisfies `pred`.
    pub(crate) fn fill_where(&mut self, mut pred: impl FnMut(f64, f64) -> bool) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if pred(c as f64 + 0.5, r as f64 + 0.5) {
                    self.bits[r * self.cols + c] = true;
                }
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.cols + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `(|a & b|, |a | b|)`.
    pub fn intersection_union(&self, other: &BinaryMask) -> Result<(usize, usize)> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::ShapeMismatch {
                what: "mask pair",
                expected: (self.rows, self.cols),
                found: (other.rows, other.cols),
            });
        }
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok((inter, union))
    }
}

/// IoU of two equally sized masks; two empty masks count as a perfect match.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = a.intersection_union(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Tightest box enclosing every set pixel.
pub fn mask_to_box(mask: &BinaryMask) -> Result<BBox> {
    let mut min_c = usize::MAX;
    let mut min_r = usize::MAX;
    let mut max_c = 0;
    let mut max_r = 0;
    let mut any = false;
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            if mask.get(r, c) {
                any = true;
                min_c = min_c.min(c);
                max_c = max_c.max(c);
                min_r = min_r.min(r);
                max_r = max_r.max(r);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    BBox::new(
        min_c as f64,
        min_r as f64,
        (max_c + 1) as f64,
        (max_r + 1) as f64,
    )
}

/// Continuous grid coordinate of the box center.
pub fn box_to_grid_center(bbox: &BBox, img_w: f64, img_h: f64, grid: usize) -> (f64, f64) {
    let (cx, cy) = bbox.center();
    (cx * grid as f64 / img_w, cy * grid as f64 / img_h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Absent,
    Occluded,
    Visible,
}

impl Visibility {
    /// COCO `v` flag: 0 absent, 1 labeled but occluded, 2 visible.
    pub fn from_coco(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Absent),
            1 => Some(Self::Occluded),
            2 => Some(Self::Visible),
            _ => None,
        }
    }

    pub fn to_coco(self) -> u8 {
        match self {
            Self::Absent => 0,
            Self::Occluded => 1,
            Self::Visible => 2,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Self::Absent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

impl Keypoint {
    pub fn visible(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            visibility: Visibility::Visible,
        }
    }

    pub fn absent() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            visibility: Visibility::Absent,
        }
    }
}

/// A ground-truth or predicted object.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: u64,
    pub bbox: BBox,
    pub mask: Option<BinaryMask>,
    pub keypoints: Option<Vec<Keypoint>>,
    pub score: f64,
}

impl Instance {
    pub fn new(category: u64, bbox: BBox) -> Self {
        Self {
            category,
            bbox,
            mask: None,
            keypoints: None,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_mask(mut self, mask: BinaryMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_keypoints(mut self, keypoints: Vec<Keypoint>) -> Self {
        self.keypoints = Some(keypoints);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid("score", format!("{} outside [0, 1]", self.score)));
        }
        if let Some(kps) = &self.keypoints {
            for kp in kps {
                if kp.visibility.is_labeled() && !(kp.x.is_finite() && kp.y.is_finite()) {
                    return Err(Error::NonFinite("keypoint"));
                }
            }
        }
        Ok(())
    }
}

/// Decoding pathway selected by the task token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Detect,
    Ground,
    Segment,
    RefSegment,
    Pose,
    Count,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Detect,
        TaskKind::Ground,
        TaskKind::Segment,
        TaskKind::RefSegment,
        TaskKind::Pose,
        TaskKind::Count,
    ];

    /// Special routing token. Counting has none of its own and rides the
    /// detection token.
    pub fn token(self) -> &'static str {
        match self {
            TaskKind::Detect | TaskKind::Count => "[DET]",
            TaskKind::Ground => "[GROUND]",
            TaskKind::Segment => "[SEG]",
            TaskKind::RefSegment => "[REFSEG]",
            TaskKind::Pose => "[POINT]",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "detect" | "det" => Some(Self::Detect),
            "ground" => Some(Self::Ground),
            "segment" | "seg" => Some(Self::Segment),
            "refsegment" | "refseg" => Some(Self::RefSegment),
            "pose" | "point" => Some(Self::Pose),
            "count" => Some(Self::Count),
            _ => None,
        }
    }
}
