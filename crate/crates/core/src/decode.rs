//! Rule-based decoding of heatmaps into task outputs.
//!
//! Cell `(c, r)` of a `G x G` map corresponds to pixel `(c * sx, r * sy)`
//! with `sx = img_w / G`, `sy = img_h / G`.

use serde::{Deserialize, Serialize};

use crate::aligner::AlignerOutput;
use crate::error::{Error, Result};
use crate::grid::{box_iou, BBox, BinaryMask, Grid, Heatmap, TaskKind};

/// Upper bound on peaks considered when counting.
pub const COUNT_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub k: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
}

impl DecodeConfig {
    pub fn for_task(task: TaskKind) -> Self {
        let k = match task {
            TaskKind::Detect | TaskKind::Segment => 100,
            TaskKind::Ground | TaskKind::RefSegment | TaskKind::Pose => 1,
            TaskKind::Count => COUNT_CAP,
        };
        Self {
            k,
            nms_iou: 0.5,
            score_threshold: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        for (name, v) in [("nms_iou", self.nms_iou), ("score_threshold", self.score_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPoint {
    pub gx: usize,
    pub gy: usize,
    pub score: f64,
}

/// Cells strictly above every in-bounds 8-neighbor with `score >= threshold`,
/// best `k` by score; ties keep row-major order.
pub fn peak_select(heatmap: &Heatmap, k: usize, threshold: f64) -> Vec<PeakPoint> {
    let (rows, cols) = heatmap.shape();
    let mut peaks = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = heatmap.get(r, c);
            if v < threshold {
                continue;
            }
            let mut is_peak = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    if heatmap.get(nr as usize, nc as usize) >= v {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                peaks.push(PeakPoint { gx: c, gy: r, score: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks.truncate(k);
    peaks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// One box per peak from the size maps (grid units), clipped to the image.
/// Peaks whose box is empty after clipping are dropped.
pub fn box_readout(peaks: &[PeakPoint], h_map: &Grid, w_map: &Grid, img_w: f64, img_h: f64) -> Result<Vec<Detection>> {
    if h_map.shape() != w_map.shape() {
        return Err(Error::ShapeMismatch {
            what: "size maps",
            expected: h_map.shape(),
            found: w_map.shape(),
        });
    }
    let (rows, cols) = h_map.shape();
    let sx = img_w / cols as f64;
    let sy = img_h / rows as f64;
    let mut out = Vec::with_capacity(peaks.len());
    for p in peaks {
        if p.gx >= cols || p.gy >= rows {
            return Err(Error::OutsideGrid {
                x: p.gx as f64,
                y: p.gy as f64,
                rows,
                cols,
            });
        }
        let w = w_map.get(p.gy, p.gx) * sx;
        let h = h_map.get(p.gy, p.gx) * sy;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            continue;
        }
        let (cx, cy) = (p.gx as f64 * sx, p.gy as f64 * sy);
        let raw = BBox {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        };
        if let Some(bbox) = raw.clip(img_w, img_h) {
            out.push(Detection { bbox, score: p.score });
        }
    }
    Ok(out)
}

/// Greedy suppression in descending score order (stable for equal
/// scores) of boxes overlapping a kept box by IoU > `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| box_iou(&k.bbox, &dets[i].bbox) <= iou_thresh) {
            kept.push(dets[i]);
        }
    }
    kept
}

/// Visual prompt for a promptable mask decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPrompt {
    pub point: (f64, f64),
    pub bbox: BBox,
    pub score: f64,
}

impl MaskPrompt {
    pub fn new(point: (f64, f64), bbox: BBox, score: f64) -> Result<Self> {
        let inside = point.0 >= bbox.x0 && point.0 <= bbox.x1 && point.1 >= bbox.y0 && point.1 <= bbox.y1;
        if !inside {
            return Err(Error::invalid("mask prompt", format!("point {point:?} outside {bbox:?}")));
        }
        Ok(Self { point, bbox, score })
    }

    pub fn from_detection(det: &Detection) -> Self {
        Self {
            point: det.bbox.center(),
            bbox: det.bbox,
            score: det.score,
        }
    }
}

/// Placeholder mask decoder: pixels inside the prompt box whose bilinearly
/// upsampled heatmap value is positive and at least half the prompt score.
pub fn mask_from_prompt(prompt: &MaskPrompt, heatmap: &Heatmap, img_w: usize, img_h: usize) -> BinaryMask {
    let (rows, cols) = heatmap.shape();
    let sx = img_w as f64 / cols as f64;
    let sy = img_h as f64 / rows as f64;
    let level = 0.5 * prompt.score;
    let mut mask = BinaryMask::empty(img_h, img_w);
    mask.fill_where(|x, y| {
        if !prompt.bbox.contains(x, y) {
            return false;
        }
        let v = heatmap.sample_bilinear(x / sx, y / sy);
        v > 0.0 && v >= level
    });
    mask
}

/// Maps coordinates between a person crop, resized to the full frame size,
/// and the full image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub origin: (f64, f64),
    /// Full-image pixels per crop pixel.
    pub scale: (f64, f64),
}

impl CropTransform {
    pub fn to_full(&self, x: f64, y: f64) -> (f64, f64) {
        (self.origin.0 + x * self.scale.0, self.origin.1 + y * self.scale.1)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin.0) / self.scale.0, (y - self.origin.1) / self.scale.1)
    }
}

/// Crop of `person_box` (clipped to the image) stretched to `img_w x img_h`.
pub fn crop_for_pose(img_w: f64, img_h: f64, person_box: &BBox) -> Result<CropTransform> {
    if !(img_w > 0.0 && img_h > 0.0) {
        return Err(Error::invalid("image size", format!("{img_w}x{img_h}")));
    }
    let b = person_box
        .clip(img_w, img_h)
        .ok_or(Error::InvalidBox(person_box.x0, person_box.y0, person_box.x1, person_box.y1))?;
    Ok(CropTransform {
        origin: (b.x0, b.y0),
        scale: (b.width() / img_w, b.height() / img_h),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResult {
    pub prompt: MaskPrompt,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskResult {
    Boxes(Vec<Detection>),
    Masks(Vec<SegmentResult>),
    /// One point per keypoint heatmap, in the heatmap's image frame.
    Keypoints(Vec<ScoredPoint>),
    Count(usize),
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeInput<'a> {
    /// Heatmap with size maps in grid units.
    Dense {
        heatmap: &'a Heatmap,
        h_map: &'a Grid,
        w_map: &'a Grid,
    },
    Heatmap(&'a Heatmap),
    /// One heatmap per keypoint type.
    Keypoints(&'a [Heatmap]),
}

impl DecodeInput<'_> {
    fn heatmap(&self) -> Option<&Heatmap> {
        match self {
            DecodeInput::Dense { heatmap, .. } | DecodeInput::Heatmap(heatmap) => Some(heatmap),
            DecodeInput::Keypoints(_) => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            DecodeInput::Dense { .. } => "a heatmap with size maps",
            DecodeInput::Heatmap(_) => "a bare heatmap",
            DecodeInput::Keypoints(_) => "keypoint heatmaps",
        }
    }
}

fn argmax_point(hm: &Heatmap, img_w: f64, img_h: f64) -> ScoredPoint {
    let (rows, cols) = hm.shape();
    let (r, c, score) = hm.argmax();
    ScoredPoint {
        x: c as f64 * img_w / cols as f64,
        y: r as f64 * img_h / rows as f64,
        score,
    }
}

/// Routes a decoding request by task.
///
/// Detect: peaks (k) -> boxes -> NMS. Ground: best peak -> box. Segment and
/// RefSegment: the Detect/Ground pathway, then one mask per box. Pose: the
/// argmax of each keypoint heatmap. Count: number of peaks above threshold.
pub fn decode_task(input: DecodeInput, task: TaskKind, cfg: &DecodeConfig, img_w: f64, img_h: f64) -> Result<TaskResult> {
    cfg.validate()?;
    if !(img_w > 0.0 && img_h > 0.0 && img_w.is_finite() && img_h.is_finite()) {
        return Err(Error::invalid("image size", format!("{img_w}x{img_h}")));
    }
    let mismatch = || Error::TaskMismatch { task, input: input.kind() };
    match task {
        TaskKind::Detect | TaskKind::Ground | TaskKind::Segment | TaskKind::RefSegment => {
            let DecodeInput::Dense { heatmap, h_map, w_map } = input else {
                return Err(mismatch());
            };
            if heatmap.shape() != h_map.shape() {
                return Err(Error::ShapeMismatch {
                    what: "size maps",
                    expected: heatmap.shape(),
                    found: h_map.shape(),
                });
            }
            let single = matches!(task, TaskKind::Ground | TaskKind::RefSegment);
            let k = if single { 1 } else { cfg.k };
            let peaks = peak_select(heatmap, k, cfg.score_threshold);
            let mut dets = box_readout(&peaks, h_map, w_map, img_w, img_h)?;
            if !single {
                dets = nms(&dets, cfg.nms_iou);
            }
            if matches!(task, TaskKind::Detect | TaskKind::Ground) {
                return Ok(TaskResult::Boxes(dets));
            }
            let (w, h) = (img_w.round() as usize, img_h.round() as usize);
            Ok(TaskResult::Masks(
                dets.iter()
                    .map(|d| {
                        let prompt = MaskPrompt::from_detection(d);
                        SegmentResult {
                            mask: mask_from_prompt(&prompt, heatmap, w, h),
                            prompt,
                        }
                    })
                    .collect(),
            ))
        }
        TaskKind::Pose => {
            let points = match input {
                DecodeInput::Keypoints(maps) => maps.iter().map(|m| argmax_point(m, img_w, img_h)).collect(),
                other => vec![argmax_point(other.heatmap().unwrap(), img_w, img_h)],
            };
            Ok(TaskResult::Keypoints(points))
        }
        TaskKind::Count => {
            let hm = input.heatmap().ok_or_else(mismatch)?;
            Ok(TaskResult::Count(peak_select(hm, COUNT_CAP, cfg.score_threshold).len()))
        }
    }
}

/// Decodes an aligner prediction.
pub fn decode_output(out: &AlignerOutput, task: TaskKind, cfg: &DecodeConfig, img_w: f64, img_h: f64) -> Result<TaskResult> {
    let heatmap = out.heatmap();
    let input = DecodeInput::Dense {
        heatmap: &heatmap,
        h_map: &out.h_map,
        w_map: &out.w_map,
    };
    decode_task(input, task, cfg, img_w, img_h)
}
