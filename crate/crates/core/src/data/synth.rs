//! Seeded synthetic shape scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Category, Dataset, ImageInfo, KeypointSchema};
use crate::error::{Error, Result};
use crate::grid::{BBox, Instance, Keypoint};

pub const KEYPOINT_NAMES: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
const KEYPOINT_ANCHORS: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
const KEYPOINT_JITTER: f64 = 0.1;
const SYNTH_KAPPA: f64 = 0.1;
const CLASS_NAMES: [&str; 8] = ["circle", "square", "triangle", "star", "ring", "cross", "diamond", "hexagon"];
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub grid: usize,
    /// Square image side in pixels.
    pub img_size: f64,
    pub classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Minimum distance between object centers, in grid cells.
    pub min_center_separation: f64,
    /// Inclusive range of box sides, in grid cells.
    pub size_range: (f64, f64),
    pub keypoints: bool,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 500,
            grid: 32,
            img_size: 448.0,
            classes: 3,
            objects_per_image: (1, 4),
            min_center_separation: 6.0,
            size_range: (5.0, 7.0),
            keypoints: true,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("synth config", reason));
        if self.grid < 4 {
            return bad(format!("grid {} < 4", self.grid));
        }
        if !(self.img_size > 0.0 && self.img_size.is_finite()) {
            return bad(format!("img_size {}", self.img_size));
        }
        if self.classes == 0 {
            return bad("need at least one class".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return bad(format!("objects_per_image range {lo}..={hi} is empty"));
        }
        if !(self.min_center_separation >= 2.0) {
            return bad(format!("min_center_separation {} < 2", self.min_center_separation));
        }
        let (smin, smax) = self.size_range;
        if !(smin > 0.0 && smin <= smax && smax <= self.grid as f64) {
            return bad(format!("size_range ({smin}, {smax}) must satisfy 0 < min <= max <= grid"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn stride(&self) -> f64 {
        self.img_size / self.grid as f64
    }
}

pub fn class_name(i: usize) -> String {
    CLASS_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("shape{i}"))
}

fn place_object(rng: &mut ChaCha8Rng, cfg: &SynthConfig, centers: &[(f64, f64)]) -> Option<Instance> {
    let stride = cfg.stride();
    let (smin, smax) = cfg.size_range;
    let w = rng.random_range(smin..=smax) * stride;
    let h = rng.random_range(smin..=smax) * stride;
    let cx = rng.random_range(w / 2.0..=cfg.img_size - w / 2.0);
    let cy = rng.random_range(h / 2.0..=cfg.img_size - h / 2.0);
    let far = centers.iter().all(|&(ox, oy)| {
        let dx = (cx - ox) / stride;
        let dy = (cy - oy) / stride;
        (dx * dx + dy * dy).sqrt() >= cfg.min_center_separation
    });
    if !far {
        return None;
    }
    let x0 = (cx - w / 2.0).max(0.0);
    let y0 = (cy - h / 2.0).max(0.0);
    let bbox = BBox::new(x0, y0, (x0 + w).min(cfg.img_size), (y0 + h).min(cfg.img_size)).ok()?;
    let category = rng.random_range(0..cfg.classes) as u64;
    let mut inst = Instance::new(category, bbox);
    if cfg.keypoints {
        let kps = KEYPOINT_ANCHORS
            .iter()
            .map(|&(ax, ay)| {
                let rx = ax + rng.random_range(-KEYPOINT_JITTER..=KEYPOINT_JITTER);
                let ry = ay + rng.random_range(-KEYPOINT_JITTER..=KEYPOINT_JITTER);
                Keypoint::visible(bbox.x0 + rx * bbox.width(), bbox.y0 + ry * bbox.height())
            })
            .collect();
        inst = inst.with_keypoints(kps);
    }
    Some(inst)
}

/// Generates `n_images` scenes with ids `0..n_images`.
pub fn synth_shapes(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = (0..cfg.n_images as u64)
        .map(|id| ImageInfo {
            id,
            width: cfg.img_size,
            height: cfg.img_size,
            file_name: None,
        })
        .collect();
    let categories = (0..cfg.classes)
        .map(|i| Category {
            id: i as u64,
            name: class_name(i),
        })
        .collect();
    let schema = cfg
        .keypoints
        .then(|| KeypointSchema::uniform(KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(), SYNTH_KAPPA));
    let mut dataset = Dataset::new(images, categories, schema);
    for image in 0..cfg.n_images as u64 {
        let wanted = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
        let mut centers = Vec::with_capacity(wanted);
        for _ in 0..wanted {
            let mut placed = None;
            for _ in 0..MAX_ATTEMPTS {
                if let Some(inst) = place_object(&mut rng, cfg, &centers) {
                    placed = Some(inst);
                    break;
                }
            }
            let inst = placed.ok_or(Error::Placement {
                image,
                wanted,
                attempts: MAX_ATTEMPTS,
            })?;
            centers.push(inst.bbox.center());
            dataset.push(image, inst)?;
        }
    }
    Ok(dataset)
}
