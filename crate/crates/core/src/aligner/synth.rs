//! Synthetic image embeddings standing in for a vision backbone.
//!
//! Every cell starts as the background prototype. Cells whose sample point
//! `(col * stride_x, row * stride_y)` lies inside an instance box take that
//! class's prototype, and optionally small squares around labeled keypoints
//! take the keypoint prototypes. The painted map is then smoothed with a
//! normalized Gaussian (a crude receptive field, so an object's features
//! peak at its center) and Gaussian noise is added.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use serde::{Deserialize, Serialize};

use super::ImageEmbeddings;
use crate::error::{Error, Result};
use crate::grid::Instance;

/// Fixed embedding vectors for background, object classes and keypoint
/// types. Class `c` is `classes[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrototypes")]
pub struct Prototypes {
    pub background: Vec<f64>,
    pub classes: Vec<Vec<f64>>,
    #[serde(default)]
    pub keypoints: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawPrototypes {
    background: Vec<f64>,
    classes: Vec<Vec<f64>>,
    #[serde(default)]
    keypoints: Vec<Vec<f64>>,
}

impl TryFrom<RawPrototypes> for Prototypes {
    type Error = Error;

    fn try_from(raw: RawPrototypes) -> Result<Self> {
        Self::new(raw.background, raw.classes, raw.keypoints)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl Prototypes {
    pub fn new(background: Vec<f64>, classes: Vec<Vec<f64>>, keypoints: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self {
            background,
            classes,
            keypoints,
        };
        p.validate()?;
        Ok(p)
    }

    /// Standard normal entries; deterministic per seed.
    pub fn random(dim: usize, classes: usize, keypoints: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = || (0..dim).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
        let background = draw();
        let classes = (0..classes).map(|_| draw()).collect();
        let keypoints = (0..keypoints).map(|_| draw()).collect();
        Self::new(background, classes, keypoints)
    }

    pub fn dim(&self) -> usize {
        self.background.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &Vec<f64>> {
        std::iter::once(&self.background)
            .chain(&self.classes)
            .chain(&self.keypoints)
    }

    fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::invalid("prototypes", "dimension must be positive"));
        }
        let all: Vec<&Vec<f64>> = self.all().collect();
        for (i, a) in all.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::invalid("prototypes", format!("vector {i} has length {}, expected {dim}", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) || a.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid("prototypes", format!("vector {i} is zero or non-finite")));
            }
            for (j, b) in all.iter().enumerate().skip(i + 1) {
                if cosine(a, b).abs() > 1.0 - 1e-9 {
                    return Err(Error::invalid("prototypes", format!("vectors {i} and {j} are collinear")));
                }
            }
        }
        Ok(())
    }

    pub fn class(&self, category: u64) -> Result<&[f64]> {
        self.classes
            .get(category as usize)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid("category", format!("{category} has no prototype")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    pub grid: usize,
    pub noise_sigma: f64,
    /// Smoothing spread in cells; 0 disables smoothing.
    pub blur_sigma: f64,
    /// Side of the square painted around each labeled keypoint, as a
    /// fraction of the smaller box side; 0 disables keypoint painting.
    pub part_extent: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            noise_sigma: 0.1,
            blur_sigma: 1.5,
            part_extent: 0.0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::invalid("grid", "must be >= 1"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
            ("part_extent", self.part_extent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("embed config", format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn paint(emb: &mut ImageEmbeddings, x0: f64, y0: f64, x1: f64, y1: f64, stride: (f64, f64), proto: &[f64]) {
    for r in 0..emb.rows {
        let y = r as f64 * stride.1;
        if y < y0 || y >= y1 {
            continue;
        }
        for c in 0..emb.cols {
            let x = c as f64 * stride.0;
            if x >= x0 && x < x1 {
                emb.cell_mut(r, c).copy_from_slice(proto);
            }
        }
    }
}

fn blur_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian smoothing, renormalized over in-bounds taps so a
/// constant field is left unchanged.
fn blur(emb: &ImageEmbeddings, sigma: f64) -> ImageEmbeddings {
    let taps = blur_taps(sigma);
    let radius = (taps.len() / 2) as i64;
    let (rows, cols, dim) = (emb.rows, emb.cols, emb.dim);
    let pass = |src: &ImageEmbeddings, horizontal: bool| {
        let mut dst = ImageEmbeddings::zeros(rows, cols, dim);
        for r in 0..rows {
            for c in 0..cols {
                let mut wsum = 0.0;
                let out = dst.cell_mut(r, c);
                for (t, &w) in taps.iter().enumerate() {
                    let off = t as i64 - radius;
                    let (rr, cc) = if horizontal {
                        (r as i64, c as i64 + off)
                    } else {
                        (r as i64 + off, c as i64)
                    };
                    if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    wsum += w;
                    for (o, v) in out.iter_mut().zip(src.cell(rr as usize, cc as usize)) {
                        *o += w * v;
                    }
                }
                for o in out.iter_mut() {
                    *o /= wsum;
                }
            }
        }
        dst
    };
    pass(&pass(emb, true), false)
}

/// Embeds one scene on a `grid x grid` lattice. Returns the embeddings and
/// one query embedding per class (the class prototype).
pub fn synth_embeddings(
    scene: &[Instance],
    img_w: f64,
    img_h: f64,
    protos: &Prototypes,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<(ImageEmbeddings, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if !(img_w > 0.0 && img_h > 0.0) {
        return Err(Error::invalid("image size", format!("{img_w}x{img_h}")));
    }
    let g = cfg.grid;
    let dim = protos.dim();
    let stride = (img_w / g as f64, img_h / g as f64);
    let mut emb = ImageEmbeddings::zeros(g, g, dim);
    for r in 0..g {
        for c in 0..g {
            emb.cell_mut(r, c).copy_from_slice(&protos.background);
        }
    }
    for inst in scene {
        let b = &inst.bbox;
        paint(&mut emb, b.x0, b.y0, b.x1, b.y1, stride, protos.class(inst.category)?);
    }
    if cfg.part_extent > 0.0 {
        for inst in scene {
            let Some(kps) = &inst.keypoints else { continue };
            let half = 0.5 * cfg.part_extent * inst.bbox.width().min(inst.bbox.height());
            for (k, kp) in kps.iter().enumerate() {
                if !kp.visibility.is_labeled() {
                    continue;
                }
                let proto = protos
                    .keypoints
                    .get(k)
                    .ok_or_else(|| Error::invalid("keypoints", format!("no prototype for keypoint {k}")))?;
                paint(&mut emb, kp.x - half, kp.y - half, kp.x + half, kp.y + half, stride, proto);
            }
        }
    }
    if cfg.blur_sigma > 0.0 {
        emb = blur(&emb, cfg.blur_sigma);
    }
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in &mut emb.data {
            *v += normal.sample(&mut rng);
        }
    }
    Ok((emb, protos.classes.clone()))
}
