//! Ground-truth heatmap and size-target construction.
//!
//! Objects become Gaussian bumps on a `grid x grid` heatmap. Detection and
//! segmentation use a size-adaptive spread derived from the box extent;
//! keypoints use a fixed spread. Overlapping bumps compose by per-cell max.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{box_to_grid_center, mask_to_box, BBox, Heatmap, Instance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeConfig {
    pub grid: usize,
    pub min_overlap: f64,
    /// Spread of keypoint bumps, in grid cells.
    pub keypoint_sigma: f64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            min_overlap: 0.7,
            keypoint_sigma: 2.0,
        }
    }
}

impl EncodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::invalid("grid", format!("{} < 4", self.grid)));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap < 1.0) {
            return Err(Error::invalid(
                "min_overlap",
                format!("{} not in (0, 1)", self.min_overlap),
            ));
        }
        if !(self.keypoint_sigma > 0.0) {
            return Err(Error::invalid("keypoint_sigma", "must be positive"));
        }
        Ok(())
    }
}

/// Height/width regression targets, set only at object center cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeTargets {
    pub rows: usize,
    pub cols: usize,
    /// Object height in grid cells.
    pub h_map: Vec<f64>,
    /// Object width in grid cells.
    pub w_map: Vec<f64>,
    pub pos_mask: Vec<bool>,
}

impl SizeTargets {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            h_map: vec![0.0; rows * cols],
            w_map: vec![0.0; rows * cols],
            pos_mask: vec![false; rows * cols],
        }
    }

    pub fn positives(&self) -> usize {
        self.pos_mask.iter().filter(|&&p| p).count()
    }

    /// Merges `other` in, keeping the larger object where centers collide.
    pub fn merge(&mut self, other: &SizeTargets) {
        for i in 0..self.pos_mask.len() {
            if other.pos_mask[i] {
                self.put(i, other.h_map[i], other.w_map[i]);
            }
        }
    }

    fn put(&mut self, idx: usize, h: f64, w: f64) {
        let replace = !self.pos_mask[idx]
            || (h * w, h, w) > (self.h_map[idx] * self.w_map[idx], self.h_map[idx], self.w_map[idx]);
        if replace {
            self.pos_mask[idx] = true;
            self.h_map[idx] = h;
            self.w_map[idx] = w;
        }
    }
}

/// Targets for one queried category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTargets {
    pub heatmap: Heatmap,
    pub sizes: SizeTargets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub per_category: BTreeMap<u64, CategoryTargets>,
}

impl DetectionTargets {
    /// Size targets of every category on one grid.
    pub fn combined_sizes(&self, grid: usize) -> SizeTargets {
        let mut all = SizeTargets::empty(grid, grid);
        for t in self.per_category.values() {
            all.merge(&t.sizes);
        }
        all
    }
}

/// Largest corner displacement (in the units of `h`, `w`) that keeps the
/// displaced box at IoU >= `min_overlap` with the original. Three cases:
/// both corners shifted the same way, box shrunk, box grown. The smallest
/// admissible displacement wins, floored at half a cell.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    const FLOOR: f64 = 0.5;
    let o = min_overlap;
    let s = h + w;
    let p = h * w;

    // (h - r)(w - r) / (2hw - (h - r)(w - r)) = o
    let c1 = p * (1.0 - o) / (1.0 + o);
    let r1 = (s - (s * s - 4.0 * c1).max(0.0).sqrt()) / 2.0;

    // (h - 2r)(w - 2r) / hw = o
    let r2 = (2.0 * s - (4.0 * s * s - 16.0 * p * (1.0 - o)).max(0.0).sqrt()) / 8.0;

    // hw / ((h + 2r)(w + 2r)) = o
    let r3 = (-2.0 * o * s + (4.0 * o * o * s * s + 16.0 * o * (1.0 - o) * p).sqrt()) / (8.0 * o);

    let r = r1.min(r2).min(r3);
    if r.is_finite() {
        r.max(FLOOR)
    } else {
        FLOOR
    }
}

/// Gaussian spread for a radius, `(2r + 1) / 6`.
pub fn sigma_from_radius(radius: f64) -> f64 {
    (2.0 * radius + 1.0) / 6.0
}

/// Max-composes `exp(-d^2 / (2 sigma^2))` around a continuous center onto
/// `target`, evaluated at every integer cell coordinate.
pub fn splat_gaussian(target: &mut Heatmap, center: (f64, f64), sigma: f64) -> Result<()> {
    let (gx, gy) = center;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("{sigma} must be positive")));
    }
    let (rows, cols) = target.shape();
    let inside = gx >= 0.0 && gx <= cols as f64 && gy >= 0.0 && gy <= rows as f64;
    if !inside {
        return Err(Error::OutsideGrid {
            x: gx,
            y: gy,
            rows,
            cols,
        });
    }
    let denom = 2.0 * sigma * sigma;
    for r in 0..rows {
        let dy = r as f64 - gy;
        for c in 0..cols {
            let dx = c as f64 - gx;
            target.raise(r, c, (-(dx * dx + dy * dy) / denom).exp());
        }
    }
    Ok(())
}

/// Half-up rounding of a continuous grid coordinate to a cell index.
pub fn center_cell(g: f64, n: usize) -> usize {
    ((g + 0.5).floor().max(0.0) as usize).min(n - 1)
}

fn check_box_in_image(bbox: &BBox, img_w: f64, img_h: f64, index: usize) -> Result<()> {
    let eps = 1e-9 * img_w.max(img_h);
    if bbox.x0 < -eps || bbox.y0 < -eps || bbox.x1 > img_w + eps || bbox.y1 > img_h + eps {
        return Err(Error::invalid(
            "instance",
            format!("box {index} {bbox:?} extends outside {img_w}x{img_h} image"),
        ));
    }
    Ok(())
}

/// Heatmap and size targets for the boxes of one category. Boxes of other
/// categories are ignored; a category with no boxes yields all-zero targets.
pub fn encode_boxes(
    boxes: &[BBox],
    img_w: f64,
    img_h: f64,
    cfg: &EncodeConfig,
) -> Result<CategoryTargets> {
    cfg.validate()?;
    let g = cfg.grid;
    let mut heatmap = Heatmap::zeros(g, g);
    let mut sizes = SizeTargets::empty(g, g);
    for (i, bbox) in boxes.iter().enumerate() {
        check_box_in_image(bbox, img_w, img_h, i)?;
        let center = box_to_grid_center(bbox, img_w, img_h, g);
        let h = bbox.height() * g as f64 / img_h;
        let w = bbox.width() * g as f64 / img_w;
        let sigma = sigma_from_radius(gaussian_radius(h, w, cfg.min_overlap));
        // Splat at the rounded cell so the peak is exactly 1 there.
        let (cx, cy) = (center_cell(center.0, g), center_cell(center.1, g));
        splat_gaussian(&mut heatmap, (cx as f64, cy as f64), sigma)?;
        sizes.put(cy * g + cx, h, w);
    }
    Ok(CategoryTargets { heatmap, sizes })
}

pub fn encode_category(
    instances: &[Instance],
    category: u64,
    img_w: f64,
    img_h: f64,
    cfg: &EncodeConfig,
) -> Result<CategoryTargets> {
    let boxes: Vec<BBox> = instances
        .iter()
        .filter(|i| i.category == category)
        .map(|i| i.bbox)
        .collect();
    encode_boxes(&boxes, img_w, img_h, cfg)
}

/// One heatmap (and size targets) per category present in `instances`.
pub fn encode_detection(
    instances: &[Instance],
    img_w: f64,
    img_h: f64,
    cfg: &EncodeConfig,
) -> Result<DetectionTargets> {
    cfg.validate()?;
    let mut by_cat: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for inst in instances {
        by_cat.entry(inst.category).or_default().push(inst.bbox);
    }
    let mut per_category = BTreeMap::new();
    for (cat, boxes) in by_cat {
        per_category.insert(cat, encode_boxes(&boxes, img_w, img_h, cfg)?);
    }
    Ok(DetectionTargets { per_category })
}

/// Detection encoding of each mask's enclosing box.
pub fn encode_segmentation(
    instances: &[Instance],
    img_w: f64,
    img_h: f64,
    cfg: &EncodeConfig,
) -> Result<DetectionTargets> {
    let boxed = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mask = inst.mask.as_ref().ok_or_else(|| {
                Error::invalid("instance", format!("instance {i} has no mask"))
            })?;
            let mut out = inst.clone();
            out.bbox = mask_to_box(mask)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    encode_detection(&boxed, img_w, img_h, cfg)
}

/// Keypoint heatmap plus the cells holding each rounded keypoint.
pub fn encode_keypoints_with_positives(
    instances: &[Instance],
    keypoint_category: usize,
    img_w: f64,
    img_h: f64,
    cfg: &EncodeConfig,
) -> Result<(Heatmap, Vec<bool>)> {
    cfg.validate()?;
    let g = cfg.grid;
    let mut heatmap = Heatmap::zeros(g, g);
    let mut positives = vec![false; g * g];
    for (i, inst) in instances.iter().enumerate() {
        let Some(kps) = &inst.keypoints else { continue };
        let kp = kps.get(keypoint_category).ok_or_else(|| {
            Error::invalid(
                "keypoint_category",
                format!("{keypoint_category} out of range for instance {i} with {} keypoints", kps.len()),
            )
        })?;
        // Occluded but annotated keypoints are encoded too.
        if !kp.visibility.is_labeled() {
            continue;
        }
        let gx = kp.x * g as f64 / img_w;
        let gy = kp.y * g as f64 / img_h;
        splat_gaussian(&mut heatmap, (gx, gy), cfg.keypoint_sigma)?;
        positives[center_cell(gy, g) * g + center_cell(gx, g)] = true;
    }
    Ok((heatmap, positives))
}

pub fn encode_keypoints(
    instances: &[Instance],
    keypoint_category: usize,
    img_w: f64,
    img_h: f64,
    cfg: &EncodeConfig,
) -> Result<Heatmap> {
    encode_keypoints_with_positives(instances, keypoint_category, img_w, img_h, cfg).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BinaryMask, Keypoint, Visibility};

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Geometric IoU of a box displaced according to each radius case.
    fn case_iou(case: usize, h: f64, w: f64, r: f64) -> f64 {
        match case {
            0 => {
                let i = (h - r).max(0.0) * (w - r).max(0.0);
                i / (2.0 * h * w - i)
            }
            1 => (h - 2.0 * r).max(0.0) * (w - 2.0 * r).max(0.0) / (h * w),
            _ => h * w / ((h + 2.0 * r) * (w + 2.0 * r)),
        }
    }

    /// Bisection on the geometric IoU of each case, independent of the
    /// closed-form roots.
    fn radius_oracle(h: f64, w: f64, o: f64) -> f64 {
        let mut best = f64::INFINITY;
        for case in 0..3 {
            let (mut lo, mut hi) = match case {
                0 => (0.0, h.min(w)),
                1 => (0.0, h.min(w) / 2.0),
                _ => (0.0, h + w),
            };
            for _ in 0..200 {
                let mid = (lo + hi) / 2.0;
                if case_iou(case, h, w, mid) >= o {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            best = best.min(lo);
        }
        best.max(0.5)
    }

    #[test]
    fn radius_matches_bisection_oracle() {
        for &(h, w) in &[(10.0, 10.0), (20.0, 20.0), (3.0, 17.0), (6.5, 5.2), (100.0, 40.0)] {
            for &o in &[0.3, 0.5, 0.7, 0.9] {
                let got = gaussian_radius(h, w, o);
                let want = radius_oracle(h, w, o);
                assert!((got - want).abs() < 1e-9, "h={h} w={w} o={o}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn radius_spot_values() {
        // Frozen from the bisection oracle.
        let r10 = gaussian_radius(10.0, 10.0, 0.7);
        assert!((r10 - radius_oracle(10.0, 10.0, 0.7)).abs() < 1e-12);
        assert!((r10 - 0.8167).abs() < 1e-4, "{r10}");
        assert!(gaussian_radius(20.0, 20.0, 0.7) > r10);
        assert_eq!(gaussian_radius(1e-9, 1e-9, 0.7), 0.5);
    }

    #[test]
    fn splat_peak_and_sigma_falloff() {
        let mut h = Heatmap::zeros(32, 32);
        splat_gaussian(&mut h, (16.0, 16.0), 2.0).unwrap();
        assert_eq!(h.get(16, 16), 1.0);
        assert!((h.get(16, 18) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((h.get(14, 16) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(splat_gaussian(&mut h, (33.0, 1.0), 1.0).is_err());
        assert!(splat_gaussian(&mut h, (3.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn overlapping_splats_take_cellwise_max() {
        let mut h = Heatmap::zeros(16, 16);
        let centers = [((5.3, 6.1), 1.5), ((7.9, 6.8), 2.2)];
        for &(c, s) in &centers {
            splat_gaussian(&mut h, c, s).unwrap();
        }
        for r in 0..16 {
            for c in 0..16 {
                let want = centers
                    .iter()
                    .map(|&((x, y), s)| {
                        let d2 = (c as f64 - x).powi(2) + (r as f64 - y).powi(2);
                        (-d2 / (2.0 * s * s)).exp()
                    })
                    .fold(0.0, f64::max);
                assert!((h.get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn detection_encoding_examples() {
        let cfg = EncodeConfig::default();
        let t = encode_detection(&[], 448.0, 448.0, &cfg).unwrap();
        assert!(t.per_category.is_empty());
        assert_eq!(t.combined_sizes(32).positives(), 0);

        let inst = Instance::new(3, bx(0.0, 0.0, 448.0, 448.0));
        let t = encode_detection(std::slice::from_ref(&inst), 448.0, 448.0, &cfg).unwrap();
        let ct = &t.per_category[&3];
        assert_eq!(ct.sizes.positives(), 1);
        let idx = 16 * 32 + 16;
        assert!(ct.sizes.pos_mask[idx]);
        assert_eq!(ct.sizes.h_map[idx], 32.0);
        assert_eq!(ct.sizes.w_map[idx], 32.0);
        assert_eq!(ct.heatmap.get(16, 16), 1.0);

        let twice = encode_detection(&[inst.clone(), inst], 448.0, 448.0, &cfg).unwrap();
        assert_eq!(twice, t);
    }

    #[test]
    fn absent_category_encodes_to_zero() {
        let cfg = EncodeConfig::default();
        let inst = Instance::new(1, bx(10.0, 10.0, 90.0, 90.0));
        let t = encode_category(&[inst], 2, 448.0, 448.0, &cfg).unwrap();
        assert_eq!(t.heatmap.max_value(), 0.0);
        assert_eq!(t.sizes.positives(), 0);
    }

    #[test]
    fn box_outside_image_is_an_error() {
        let cfg = EncodeConfig::default();
        let inst = Instance::new(1, bx(400.0, 10.0, 460.0, 90.0));
        assert!(encode_detection(&[inst], 448.0, 448.0, &cfg).is_err());
    }

    #[test]
    fn segmentation_matches_detection_on_box_masks() {
        let cfg = EncodeConfig::default();
        let b = bx(28.0, 42.0, 140.0, 126.0);
        let mask = BinaryMask::from_box(448, 448, &b);
        let seg = encode_segmentation(&[Instance::new(1, b).with_mask(mask)], 448.0, 448.0, &cfg)
            .unwrap();
        let det = encode_detection(&[Instance::new(1, b)], 448.0, 448.0, &cfg).unwrap();
        assert_eq!(seg, det);
    }

    #[test]
    fn one_pixel_mask_peaks_at_its_cell() {
        let cfg = EncodeConfig::default();
        let mut mask = BinaryMask::empty(448, 448);
        mask.set(5, 5, true);
        let b = mask_to_box(&mask).unwrap();
        let t = encode_segmentation(&[Instance::new(1, b).with_mask(mask)], 448.0, 448.0, &cfg)
            .unwrap();
        let (r, c, v) = t.per_category[&1].heatmap.argmax();
        // (5.5, 5.5) px is grid coordinate 0.39, nearest cell 0.
        assert_eq!((r, c), (0, 0));
        assert!(v > 0.0);
        assert!(encode_segmentation(&[Instance::new(1, b)], 448.0, 448.0, &cfg).is_err());
    }

    #[test]
    fn keypoint_encoding_examples() {
        let cfg = EncodeConfig::default();
        let b = bx(100.0, 100.0, 300.0, 300.0);
        let absent = Instance::new(0, b).with_keypoints(vec![Keypoint::absent(); 2]);
        let h = encode_keypoints(&[absent], 0, 448.0, 448.0, &cfg).unwrap();
        assert_eq!(h.max_value(), 0.0);

        let inst = Instance::new(0, b).with_keypoints(vec![Keypoint::visible(224.0, 224.0)]);
        let h = encode_keypoints(&[inst], 0, 448.0, 448.0, &cfg).unwrap();
        assert_eq!(h.get(16, 16), 1.0);
        assert!((h.get(16, 18) - (-0.5f64).exp()).abs() < 1e-15);

        let occluded = Instance::new(0, b).with_keypoints(vec![Keypoint {
            x: 224.0,
            y: 224.0,
            visibility: Visibility::Occluded,
        }]);
        assert_eq!(encode_keypoints(&[occluded], 0, 448.0, 448.0, &cfg).unwrap(), h);

        let inst = Instance::new(0, b).with_keypoints(vec![Keypoint::visible(1.0, 1.0)]);
        assert!(encode_keypoints(&[inst], 3, 448.0, 448.0, &cfg).is_err());
    }
}
