//! Datasets, annotation files, synthetic scenes, conversation templates and
//! binary grid files.

mod annotations;
mod conversation;
mod lumh;
mod synth;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::Instance;

pub use annotations::{load_annotations, parse_annotations, parse_results, results_to_json, to_json, write_annotations};
pub use conversation::{render_conversation, ConversationSample, ResponseFormat};
pub use lumh::{
    read_embeddings, read_grids, read_heatmap, write_embeddings, write_grids, write_heatmap, GridStack,
};
pub use synth::{synth_shapes, SynthConfig, KEYPOINT_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Keypoint names and their per-keypoint similarity constants.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSchema {
    pub names: Vec<String>,
    pub kappas: Vec<f64>,
}

impl KeypointSchema {
    pub fn uniform(names: Vec<String>, kappa: f64) -> Self {
        let kappas = vec![kappa; names.len()];
        Self { names, kappas }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Images, categories and per-image instances. Every image has an entry in
/// `annotations`, possibly empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub annotations: BTreeMap<u64, Vec<Instance>>,
    pub categories: Vec<Category>,
    pub keypoints: Option<KeypointSchema>,
}

impl Dataset {
    pub fn new(images: Vec<ImageInfo>, categories: Vec<Category>, keypoints: Option<KeypointSchema>) -> Self {
        let annotations = images.iter().map(|im| (im.id, Vec::new())).collect();
        Self {
            images,
            annotations,
            categories,
            keypoints,
        }
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn instances(&self, image_id: u64) -> &[Instance] {
        self.annotations.get(&image_id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn num_instances(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }

    /// Adds an instance after checking its references.
    pub fn push(&mut self, image_id: u64, inst: Instance) -> Result<()> {
        let index = self.num_instances();
        self.check_instance(index, image_id, &inst)?;
        self.annotations.entry(image_id).or_default().push(inst);
        Ok(())
    }

    fn check_instance(&self, index: usize, image_id: u64, inst: &Instance) -> Result<()> {
        let err = |reason: String| Error::Annotation { index, reason };
        let image = self
            .image(image_id)
            .ok_or_else(|| err(format!("unknown image id {image_id}")))?;
        if self.category_name(inst.category).is_none() {
            return Err(err(format!("unknown category id {}", inst.category)));
        }
        inst.validate().map_err(|e| err(e.to_string()))?;
        if let Some(mask) = &inst.mask {
            if (mask.rows() as f64, mask.cols() as f64) != (image.height, image.width) {
                return Err(err(format!(
                    "mask is {}x{} but image {image_id} is {}x{}",
                    mask.cols(),
                    mask.rows(),
                    image.width,
                    image.height
                )));
            }
        }
        if let (Some(kps), Some(schema)) = (&inst.keypoints, &self.keypoints) {
            if kps.len() != schema.len() {
                return Err(err(format!("{} keypoints, schema has {}", kps.len(), schema.len())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for im in &self.images {
            if !seen.insert(im.id) {
                return Err(Error::invalid("dataset", format!("duplicate image id {}", im.id)));
            }
            if !(im.width > 0.0 && im.height > 0.0 && im.width.is_finite() && im.height.is_finite()) {
                return Err(Error::invalid("dataset", format!("image {} has size {}x{}", im.id, im.width, im.height)));
            }
        }
        let mut cats = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::invalid("dataset", format!("duplicate category id {}", c.id)));
            }
        }
        if let Some(s) = &self.keypoints {
            if s.names.len() != s.kappas.len() || s.kappas.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
                return Err(Error::invalid("keypoint schema", "need one positive kappa per keypoint name"));
            }
        }
        let mut index = 0;
        for (&image_id, insts) in &self.annotations {
            for inst in insts {
                self.check_instance(index, image_id, inst)?;
                index += 1;
            }
        }
        Ok(())
    }
}
