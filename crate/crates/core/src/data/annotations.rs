//! COCO-style annotation files (a subset of the schema).
//!
//! ```json
//! {
//!   "images": [{"id": 1, "width": 448, "height": 448, "file_name": "a.png"}],
//!   "categories": [{"id": 0, "name": "circle"}],
//!   "keypoint_schema": {"names": ["tip"], "kappas": [0.1]},
//!   "annotations": [{
//!     "image_id": 1, "category_id": 0, "bbox": [x, y, w, h],
//!     "segmentation": [[x0, y0, x1, y1, ...]] | {"size": [h, w], "bits": "0110..."},
//!     "keypoints": [x, y, v, ...],
//!     "score": 0.9
//!   }]
//! }
//! ```
//!
//! Polygons are rasterized at pixel centers with the even-odd rule and
//! unioned. Written files always use the dense mask form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Category, Dataset, ImageInfo, KeypointSchema};
use crate::error::{Error, Result};
use crate::grid::{BBox, BinaryMask, Instance, Keypoint, Visibility};

/// Kappa assumed when a schema lists names without constants.
const DEFAULT_KAPPA: f64 = 0.1;

#[derive(Deserialize)]
struct RawFile {
    images: Vec<Value>,
    #[serde(default)]
    annotations: Vec<Value>,
    categories: Vec<Value>,
    #[serde(default)]
    keypoint_schema: Option<RawSchema>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kappas: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    id: u64,
    width: f64,
    height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSegmentation {
    Polygons(Vec<Vec<f64>>),
    Dense { size: [usize; 2], bits: String },
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<RawSegmentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

fn integral_dims(image: &ImageInfo) -> Option<(usize, usize)> {
    let ok = |v: f64| v.fract() == 0.0 && (1.0..=1e6).contains(&v);
    (ok(image.width) && ok(image.height)).then_some((image.height as usize, image.width as usize))
}

fn rasterize_polygons(polys: &[Vec<f64>], rows: usize, cols: usize) -> std::result::Result<BinaryMask, String> {
    let mut mask = BinaryMask::empty(rows, cols);
    for (k, poly) in polys.iter().enumerate() {
        if poly.len() < 6 || poly.len() % 2 != 0 {
            return Err(format!("polygon {k} needs an even number (>= 6) of coordinates"));
        }
        if poly.iter().any(|v| !v.is_finite()) {
            return Err(format!("polygon {k} has non-finite coordinates"));
        }
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        mask.fill_where(|x, y| {
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            inside
        });
    }
    Ok(mask)
}

fn decode_dense(size: [usize; 2], bits: &str) -> std::result::Result<BinaryMask, String> {
    let [rows, cols] = size;
    let parsed = bits
        .chars()
        .map(|ch| match ch {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(format!("mask bit string has invalid character {other:?}")),
        })
        .collect::<std::result::Result<Vec<bool>, String>>()?;
    BinaryMask::new(rows, cols, parsed).map_err(|e| e.to_string())
}

fn parse_keypoints(flat: &[f64]) -> std::result::Result<Vec<Keypoint>, String> {
    if !flat.len().is_multiple_of(3) {
        return Err(format!("keypoint array length {} is not a multiple of 3", flat.len()));
    }
    flat.chunks_exact(3)
        .enumerate()
        .map(|(k, t)| {
            let v = t[2];
            let vis = (v.fract() == 0.0 && (0.0..=2.0).contains(&v))
                .then(|| Visibility::from_coco(v as u8))
                .flatten()
                .ok_or_else(|| format!("keypoint {k} has visibility {v}, expected 0, 1 or 2"))?;
            Ok(Keypoint {
                x: t[0],
                y: t[1],
                visibility: vis,
            })
        })
        .collect()
}

fn convert_annotation(raw: RawAnnotation, dataset: &Dataset) -> std::result::Result<(u64, Instance), String> {
    let image = dataset
        .image(raw.image_id)
        .ok_or_else(|| format!("unknown image id {}", raw.image_id))?;
    if dataset.category_name(raw.category_id).is_none() {
        return Err(format!("unknown category id {}", raw.category_id));
    }
    let [x, y, w, h]: [f64; 4] = raw
        .bbox
        .as_slice()
        .try_into()
        .map_err(|_| format!("bbox has {} values, expected 4", raw.bbox.len()))?;
    let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| e.to_string())?;
    let mut inst = Instance::new(raw.category_id, bbox);
    if let Some(score) = raw.score {
        inst.score = score;
    }
    if let Some(seg) = raw.segmentation {
        let mask = match seg {
            RawSegmentation::Polygons(polys) => {
                let (rows, cols) = integral_dims(image)
                    .ok_or_else(|| format!("image {} has non-integral size for a polygon mask", image.id))?;
                rasterize_polygons(&polys, rows, cols)?
            }
            RawSegmentation::Dense { size, bits } => decode_dense(size, &bits)?,
        };
        inst.mask = Some(mask);
    }
    if let Some(flat) = raw.keypoints {
        inst.keypoints = Some(parse_keypoints(&flat)?);
    }
    Ok((raw.image_id, inst))
}

/// Parses and validates an annotation document.
pub fn parse_annotations(text: &str) -> Result<Dataset> {
    let raw: RawFile = serde_json::from_str(text)?;
    let images = raw
        .images
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let r: RawImage =
                serde_json::from_value(v).map_err(|e| Error::Format(format!("image record {i}: {e}")))?;
            Ok(ImageInfo {
                id: r.id,
                width: r.width,
                height: r.height,
                file_name: r.file_name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let categories = raw
        .categories
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let r: RawCategory =
                serde_json::from_value(v).map_err(|e| Error::Format(format!("category record {i}: {e}")))?;
            Ok(Category { id: r.id, name: r.name })
        })
        .collect::<Result<Vec<_>>>()?;
    let keypoints = raw.keypoint_schema.map(|s| {
        let kappas = s.kappas.unwrap_or_else(|| vec![DEFAULT_KAPPA; s.names.len()]);
        KeypointSchema { names: s.names, kappas }
    });
    let mut dataset = Dataset::new(images, categories, keypoints);
    dataset.validate()?;
    for (index, v) in raw.annotations.into_iter().enumerate() {
        let err = |reason: String| Error::Annotation { index, reason };
        let r: RawAnnotation = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
        let (image_id, inst) = convert_annotation(r, &dataset).map_err(err)?;
        dataset.push(image_id, inst).map_err(|e| match e {
            Error::Annotation { reason, .. } => err(reason),
            other => err(other.to_string()),
        })?;
    }
    Ok(dataset)
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    parse_annotations(&fs::read_to_string(path)?)
}

/// A width `w` with `start + w == end` in floating point, so that `[x, w]`
/// parses back to the same edges. Plain `end - start` can be off by an ulp.
fn exact_extent(start: f64, end: f64) -> f64 {
    let mut w = end - start;
    for _ in 0..4 {
        let got = start + w;
        if got == end {
            break;
        }
        w = if got < end { w.next_up() } else { w.next_down() };
    }
    w
}

fn raw_record(image_id: u64, inst: &Instance) -> RawAnnotation {
    let segmentation = inst.mask.as_ref().map(|m| RawSegmentation::Dense {
        size: [m.rows(), m.cols()],
        bits: m.bits().iter().map(|&b| if b { '1' } else { '0' }).collect(),
    });
    let keypoints = inst.keypoints.as_ref().map(|kps| {
        kps.iter()
            .flat_map(|k| [k.x, k.y, k.visibility.to_coco() as f64])
            .collect()
    });
    RawAnnotation {
        id: None,
        image_id,
        category_id: inst.category,
        bbox: vec![
            inst.bbox.x0,
            inst.bbox.y0,
            exact_extent(inst.bbox.x0, inst.bbox.x1),
            exact_extent(inst.bbox.y0, inst.bbox.y1),
        ],
        segmentation,
        keypoints,
        score: Some(inst.score),
    }
}

/// Serializes a dataset; parsing the result yields an equal dataset.
pub fn to_json(dataset: &Dataset) -> Result<Value> {
    dataset.validate()?;
    let images: Vec<RawImage> = dataset
        .images
        .iter()
        .map(|im| RawImage {
            id: im.id,
            width: im.width,
            height: im.height,
            file_name: im.file_name.clone(),
        })
        .collect();
    let categories: Vec<RawCategory> = dataset
        .categories
        .iter()
        .map(|c| RawCategory {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    let mut annotations = Vec::new();
    for (&image_id, insts) in &dataset.annotations {
        for inst in insts {
            let mut raw = raw_record(image_id, inst);
            raw.id = Some(annotations.len() as u64 + 1);
            raw.score = (inst.score != 1.0).then_some(inst.score);
            annotations.push(raw);
        }
    }
    let mut doc = serde_json::json!({
        "images": images,
        "categories": categories,
        "annotations": annotations,
    });
    if let Some(s) = &dataset.keypoints {
        doc["keypoint_schema"] = serde_json::to_value(RawSchema {
            names: s.names.clone(),
            kappas: Some(s.kappas.clone()),
        })?;
    }
    Ok(doc)
}

pub fn write_annotations(path: &Path, dataset: &Dataset) -> Result<()> {
    let doc = to_json(dataset)?;
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Serializes predictions as a bare array of scored annotation records.
pub fn results_to_json(results: &[(u64, Instance)]) -> Result<Value> {
    let records: Vec<RawAnnotation> = results.iter().map(|(id, inst)| raw_record(*id, inst)).collect();
    Ok(serde_json::to_value(records)?)
}

/// Parses an array of annotation records against the images and categories
/// of `reference`.
pub fn parse_results(text: &str, reference: &Dataset) -> Result<Dataset> {
    let records: Vec<Value> = serde_json::from_str(text)?;
    let mut dataset = Dataset::new(
        reference.images.clone(),
        reference.categories.clone(),
        reference.keypoints.clone(),
    );
    for (index, v) in records.into_iter().enumerate() {
        let err = |reason: String| Error::Annotation { index, reason };
        let r: RawAnnotation = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
        let (image_id, inst) = convert_annotation(r, &dataset).map_err(err)?;
        dataset.push(image_id, inst).map_err(|e| match e {
            Error::Annotation { reason, .. } => err(reason),
            other => err(other.to_string()),
        })?;
    }
    Ok(dataset)
}
