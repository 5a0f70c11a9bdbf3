//! End-to-end synthetic pipeline: scenes, training samples, trained-model
//! evaluation and the demo report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aligner::{
    forward, synth_embeddings, train, AlignerConfig, AlignerModel, EmbedConfig, ImageEmbeddings, Prototypes,
    TrainConfig, TrainSample, TrainingSet,
};
use crate::data::{load_annotations, read_embeddings, synth_shapes, write_annotations, write_embeddings, Dataset, SynthConfig};
use crate::decode::{crop_for_pose, decode_output, peak_select, CropTransform, DecodeConfig, TaskResult};
use crate::encode::{encode_category, encode_keypoints_with_positives, EncodeConfig, SizeTargets};
use crate::error::{Error, Result};
use crate::eval::{detection_map, keypoint_map, EvalReport, ImagePair, OksParams};
use crate::grid::{BBox, Heatmap, Instance, Keypoint, TaskKind, Visibility};
use crate::math::mix_seed;

/// Synthetic scenes plus everything needed to embed them.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub dataset: Dataset,
    pub protos: Prototypes,
    pub embed: EmbedConfig,
    /// Embedding settings for person crops (keypoint parts painted).
    pub crop_embed: EmbedConfig,
    pub encode: EncodeConfig,
    pub seed: u64,
    objects: Vec<(u64, usize)>,
}

impl SyntheticTask {
    pub fn new(
        dataset: Dataset,
        protos: Prototypes,
        embed: EmbedConfig,
        crop_embed: EmbedConfig,
        encode: EncodeConfig,
        seed: u64,
    ) -> Result<Self> {
        if embed.grid != encode.grid || crop_embed.grid != encode.grid {
            return Err(Error::invalid("task", "embedding and encoding grids differ"));
        }
        dataset.validate()?;
        let objects = dataset
            .images
            .iter()
            .flat_map(|im| (0..dataset.instances(im.id).len()).map(move |k| (im.id, k)))
            .collect();
        Ok(Self {
            dataset,
            protos,
            embed,
            crop_embed,
            encode,
            seed,
            objects,
        })
    }

    /// `(image id, instance index)` of every object, image by image.
    pub fn objects(&self) -> &[(u64, usize)] {
        &self.objects
    }

    pub fn num_classes(&self) -> usize {
        self.protos.classes.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.protos.keypoints.len()
    }

    fn image_dims(&self, image_id: u64) -> Result<(f64, f64)> {
        let im = self
            .dataset
            .image(image_id)
            .ok_or_else(|| Error::invalid("image", format!("unknown id {image_id}")))?;
        Ok((im.width, im.height))
    }

    pub fn image_embeddings(&self, image_id: u64) -> Result<ImageEmbeddings> {
        let (w, h) = self.image_dims(image_id)?;
        let seed = mix_seed(mix_seed(self.seed, image_id), 0);
        let (emb, _) = synth_embeddings(self.dataset.instances(image_id), w, h, &self.protos, &self.embed, seed)?;
        Ok(emb)
    }

    /// The object as seen in its own crop, stretched to the image frame.
    pub fn crop(&self, image_id: u64, index: usize) -> Result<(Instance, CropTransform)> {
        let (w, h) = self.image_dims(image_id)?;
        let inst = self
            .dataset
            .instances(image_id)
            .get(index)
            .ok_or_else(|| Error::invalid("object", format!("image {image_id} has no instance {index}")))?;
        let t = crop_for_pose(w, h, &inst.bbox)?;
        let mut crop = Instance::new(inst.category, BBox::new(0.0, 0.0, w, h)?);
        if let Some(kps) = &inst.keypoints {
            crop.keypoints = Some(
                kps.iter()
                    .map(|k| {
                        let (x, y) = t.to_crop(k.x, k.y);
                        Keypoint {
                            x,
                            y,
                            visibility: k.visibility,
                        }
                    })
                    .collect(),
            );
        }
        Ok((crop, t))
    }

    pub fn crop_embeddings(&self, image_id: u64, index: usize) -> Result<ImageEmbeddings> {
        let (w, h) = self.image_dims(image_id)?;
        let (crop, _) = self.crop(image_id, index)?;
        let seed = mix_seed(mix_seed(self.seed, image_id), 1 + index as u64);
        let (emb, _) = synth_embeddings(&[crop], w, h, &self.protos, &self.crop_embed, seed)?;
        Ok(emb)
    }

    pub fn detection_sample(&self, image_id: u64, class: u64, emb: Arc<ImageEmbeddings>) -> Result<TrainSample> {
        let (w, h) = self.image_dims(image_id)?;
        let t = encode_category(self.dataset.instances(image_id), class, w, h, &self.encode)?;
        Ok(TrainSample {
            embeddings: emb,
            loc: self.protos.class(class)?.to_vec(),
            heatmap: t.heatmap,
            sizes: t.sizes,
            supervise_size: true,
        })
    }

    pub fn keypoint_sample(
        &self,
        image_id: u64,
        index: usize,
        keypoint: usize,
        emb: Arc<ImageEmbeddings>,
    ) -> Result<TrainSample> {
        let (w, h) = self.image_dims(image_id)?;
        let (crop, _) = self.crop(image_id, index)?;
        let (heatmap, positives) = encode_keypoints_with_positives(&[crop], keypoint, w, h, &self.encode)?;
        let g = self.encode.grid;
        let mut sizes = SizeTargets::empty(g, g);
        sizes.pos_mask = positives;
        Ok(TrainSample {
            embeddings: emb,
            loc: self.protos.keypoints[keypoint].clone(),
            heatmap,
            sizes,
            supervise_size: false,
        })
    }

    /// Detection samples (every image, every class) followed by one keypoint
    /// sample per object, built on demand. Object `i` supervises keypoint
    /// `i mod K`, which keeps the two tasks roughly balanced.
    pub fn training_set(&self) -> TaskTrainingSet<'_> {
        TaskTrainingSet { task: self }
    }

    /// Ground-truth heatmap of one class in one image.
    pub fn gt_heatmap(&self, image_id: u64, class: u64) -> Result<Heatmap> {
        let (w, h) = self.image_dims(image_id)?;
        Ok(encode_category(self.dataset.instances(image_id), class, w, h, &self.encode)?.heatmap)
    }
}

/// Settings that, with the annotations and prototypes, regenerate a task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub seed: u64,
    pub grid: usize,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub part_extent: f64,
    pub crop_part_extent: f64,
    pub min_overlap: f64,
    pub keypoint_sigma: f64,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const PROTOTYPES_FILE: &str = "prototypes.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_DIR: &str = "embeddings";

pub fn embeddings_path(dir: &Path, image_id: u64) -> PathBuf {
    dir.join(EMBEDDINGS_DIR).join(format!("{image_id}.lumh"))
}

impl SyntheticTask {
    pub fn manifest(&self) -> TaskManifest {
        TaskManifest {
            seed: self.seed,
            grid: self.encode.grid,
            noise_sigma: self.embed.noise_sigma,
            blur_sigma: self.embed.blur_sigma,
            part_extent: self.embed.part_extent,
            crop_part_extent: self.crop_embed.part_extent,
            min_overlap: self.encode.min_overlap,
            keypoint_sigma: self.encode.keypoint_sigma,
        }
    }

    pub fn from_manifest(dataset: Dataset, protos: Prototypes, m: &TaskManifest) -> Result<Self> {
        let embed = EmbedConfig {
            grid: m.grid,
            noise_sigma: m.noise_sigma,
            blur_sigma: m.blur_sigma,
            part_extent: m.part_extent,
        };
        let crop_embed = EmbedConfig {
            part_extent: m.crop_part_extent,
            ..embed
        };
        let encode = EncodeConfig {
            grid: m.grid,
            min_overlap: m.min_overlap,
            keypoint_sigma: m.keypoint_sigma,
        };
        Self::new(dataset, protos, embed, crop_embed, encode, m.seed)
    }

    /// Writes annotations, prototypes, the manifest and one embedding file
    /// per image into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(EMBEDDINGS_DIR))?;
        write_annotations(&dir.join(ANNOTATIONS_FILE), &self.dataset)?;
        fs::write(dir.join(PROTOTYPES_FILE), serde_json::to_string(&self.protos)?)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest())?)?;
        for im in &self.dataset.images {
            write_embeddings(&embeddings_path(dir, im.id), &self.image_embeddings(im.id)?)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`SyntheticTask::save`]. Embedding files
    /// are not read; see [`read_embeddings`].
    pub fn load(dir: &Path) -> Result<Self> {
        let dataset = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
        let protos: Prototypes = serde_json::from_str(&fs::read_to_string(dir.join(PROTOTYPES_FILE))?)?;
        let manifest: TaskManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        Self::from_manifest(dataset, protos, &manifest)
    }

    /// Embeddings of one image as stored in a saved task directory.
    pub fn load_embeddings(dir: &Path, image_id: u64) -> Result<ImageEmbeddings> {
        read_embeddings(&embeddings_path(dir, image_id))
    }
}

pub struct TaskTrainingSet<'a> {
    task: &'a SyntheticTask,
}

impl TrainingSet for TaskTrainingSet<'_> {
    fn len(&self) -> usize {
        let t = self.task;
        let kp = if t.num_keypoints() > 0 { t.objects.len() } else { 0 };
        t.dataset.images.len() * t.num_classes() + kp
    }

    fn get(&self, index: usize) -> Result<TrainSample> {
        let t = self.task;
        let classes = t.num_classes();
        let n_det = t.dataset.images.len() * classes;
        if index < n_det {
            let image_id = t.dataset.images[index / classes].id;
            let emb = Arc::new(t.image_embeddings(image_id)?);
            t.detection_sample(image_id, (index % classes) as u64, emb)
        } else {
            let i = index - n_det;
            let (image_id, obj) = t.objects[i];
            let emb = Arc::new(t.crop_embeddings(image_id, obj)?);
            t.keypoint_sample(image_id, obj, i % t.num_keypoints(), emb)
        }
    }
}

/// Detections for every class query on one image.
pub fn predict_detections(
    model: &AlignerModel,
    task: &SyntheticTask,
    image_id: u64,
    cfg: &DecodeConfig,
) -> Result<Vec<Instance>> {
    let (w, h) = task.image_dims(image_id)?;
    let emb = task.image_embeddings(image_id)?;
    let mut out = Vec::new();
    for class in 0..task.num_classes() as u64 {
        let (pred, _) = forward(model, &emb, task.protos.class(class)?)?;
        let TaskResult::Boxes(dets) = decode_output(&pred, TaskKind::Detect, cfg, w, h)? else {
            unreachable!("detect decodes to boxes")
        };
        out.extend(dets.into_iter().map(|d| Instance::new(class, d.bbox).with_score(d.score)));
    }
    Ok(out)
}

/// Top-down keypoints for one ground-truth object, in full-image pixels.
/// The score is the mean peak value.
pub fn predict_pose(model: &AlignerModel, task: &SyntheticTask, image_id: u64, index: usize) -> Result<Instance> {
    let (w, h) = task.image_dims(image_id)?;
    let gt = &task.dataset.instances(image_id)[index];
    let (_, transform) = task.crop(image_id, index)?;
    let emb = task.crop_embeddings(image_id, index)?;
    let cfg = DecodeConfig::for_task(TaskKind::Pose);
    let mut kps = Vec::with_capacity(task.num_keypoints());
    let mut score = 0.0;
    for proto in &task.protos.keypoints {
        let (pred, _) = forward(model, &emb, proto)?;
        let hm = pred.heatmap();
        let input = crate::decode::DecodeInput::Heatmap(&hm);
        let TaskResult::Keypoints(points) = crate::decode::decode_task(input, TaskKind::Pose, &cfg, w, h)? else {
            unreachable!("pose decodes to keypoints")
        };
        let p = points[0];
        let (x, y) = transform.to_full(p.x, p.y);
        kps.push(Keypoint {
            x,
            y,
            visibility: Visibility::Visible,
        });
        score += p.score;
    }
    let score = (score / task.num_keypoints().max(1) as f64).clamp(0.0, 1.0);
    Ok(Instance::new(gt.category, gt.bbox).with_keypoints(kps).with_score(score))
}

pub fn evaluate_detection(model: &AlignerModel, task: &SyntheticTask, cfg: &DecodeConfig) -> Result<EvalReport> {
    let preds = task
        .dataset
        .images
        .iter()
        .map(|im| predict_detections(model, task, im.id, cfg))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<ImagePair> = task
        .dataset
        .images
        .iter()
        .zip(&preds)
        .map(|(im, p)| ImagePair {
            gt: task.dataset.instances(im.id),
            pred: p,
        })
        .collect();
    detection_map(&pairs)
}

/// Keypoint AP with each object crop as its own evaluation unit.
pub fn evaluate_pose(model: &AlignerModel, task: &SyntheticTask) -> Result<EvalReport> {
    let params = match &task.dataset.keypoints {
        Some(s) => OksParams {
            kappas: s.kappas.clone(),
            area_floor: 1.0,
        },
        None => return Err(Error::invalid("dataset", "no keypoint schema")),
    };
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for &(image_id, index) in task.objects() {
        gts.push(task.dataset.instances(image_id)[index].clone());
        preds.push(predict_pose(model, task, image_id, index)?);
    }
    let pairs: Vec<ImagePair> = gts
        .iter()
        .zip(&preds)
        .map(|(g, p)| ImagePair {
            gt: std::slice::from_ref(g),
            pred: std::slice::from_ref(p),
        })
        .collect();
    keypoint_map(&pairs, &params)
}

/// Share of images where querying a class absent from the image yields no
/// detection at `threshold`, and the number of such queries.
pub fn absence_rate(model: &AlignerModel, task: &SyntheticTask, threshold: f64) -> Result<(f64, usize)> {
    let cfg = DecodeConfig {
        score_threshold: threshold,
        ..DecodeConfig::for_task(TaskKind::Detect)
    };
    let (mut clean, mut total) = (0usize, 0usize);
    for im in &task.dataset.images {
        let present: Vec<u64> = task.dataset.instances(im.id).iter().map(|i| i.category).collect();
        let Some(absent) = (0..task.num_classes() as u64).find(|c| !present.contains(c)) else {
            continue;
        };
        let emb = task.image_embeddings(im.id)?;
        let (pred, _) = forward(model, &emb, task.protos.class(absent)?)?;
        let TaskResult::Boxes(dets) = decode_output(&pred, TaskKind::Detect, &cfg, im.width, im.height)? else {
            unreachable!()
        };
        total += 1;
        clean += dets.is_empty() as usize;
    }
    Ok((if total == 0 { 1.0 } else { clean as f64 / total as f64 }, total))
}

/// Per image, the object count summed over class queries, paired with the
/// true count.
pub fn predicted_counts(model: &AlignerModel, task: &SyntheticTask, threshold: f64) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(task.dataset.images.len());
    for im in &task.dataset.images {
        let emb = task.image_embeddings(im.id)?;
        let mut n = 0;
        for class in 0..task.num_classes() as u64 {
            let (pred, _) = forward(model, &emb, task.protos.class(class)?)?;
            n += peak_select(&pred.heatmap(), crate::decode::COUNT_CAP, threshold).len();
        }
        out.push((n, task.dataset.instances(im.id).len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    /// Scene template; image counts and seeds are set per split.
    pub synth: SynthConfig,
    pub aligner: AlignerConfig,
    pub train: TrainConfig,
    pub embed: EmbedConfig,
    pub crop_part_extent: f64,
    pub encode: EncodeConfig,
    pub decode: DecodeConfig,
    /// Threshold for absence filtering and counting.
    pub filter_threshold: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_images: 500,
            test_images: 100,
            synth: SynthConfig::default(),
            aligner: AlignerConfig::default(),
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            embed: EmbedConfig::default(),
            crop_part_extent: 0.15,
            encode: EncodeConfig::default(),
            decode: DecodeConfig::for_task(TaskKind::Detect),
            filter_threshold: 0.3,
        }
    }
}

impl DemoConfig {
    fn task(&self, split: u64, n_images: usize, protos: &Prototypes) -> Result<SyntheticTask> {
        let synth = SynthConfig {
            n_images,
            seed: mix_seed(self.seed, split),
            grid: self.aligner.grid,
            ..self.synth
        };
        let embed = EmbedConfig {
            grid: self.aligner.grid,
            noise_sigma: self.synth.noise_sigma,
            ..self.embed
        };
        let crop_embed = EmbedConfig {
            part_extent: self.crop_part_extent,
            ..embed
        };
        let encode = EncodeConfig {
            grid: self.aligner.grid,
            ..self.encode
        };
        SyntheticTask::new(
            synth_shapes(&synth)?,
            protos.clone(),
            embed,
            crop_embed,
            encode,
            mix_seed(self.seed, split + 100),
        )
    }

    pub fn prototypes(&self) -> Result<Prototypes> {
        let k = if self.synth.keypoints { crate::data::KEYPOINT_NAMES.len() } else { 0 };
        Prototypes::random(self.aligner.dim, self.synth.classes, k, mix_seed(self.seed, 3))
    }

    pub fn train_task(&self) -> Result<SyntheticTask> {
        self.task(1, self.train_images, &self.prototypes()?)
    }

    pub fn test_task(&self) -> Result<SyntheticTask> {
        self.task(2, self.test_images, &self.prototypes()?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, 5),
            ..self.train
        }
    }

    pub fn init_model(&self) -> Result<AlignerModel> {
        AlignerModel::new(self.aligner, mix_seed(self.seed, 4))
    }

    /// Trains a fresh model on the training split.
    pub fn fit(&self) -> Result<(AlignerModel, Vec<f64>)> {
        let task = self.train_task()?;
        let mut model = self.init_model()?;
        let report = train(&mut model, &task.training_set(), &self.train_config())?;
        Ok((model, report.losses))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub detection: EvalReport,
    pub pose: EvalReport,
    pub absence_rate: f64,
    pub absence_queries: usize,
    pub count_exact: f64,
    pub count_within_one: f64,
}

fn window_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl DemoReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed={}\ntrain_images={}\ntest_images={}\nsteps={}\nloss.initial={:.6}\nloss.final={:.6}\n",
            self.seed, self.train_images, self.test_images, self.steps, self.initial_loss, self.final_loss
        );
        for (prefix, r) in [("detect", &self.detection), ("pose", &self.pose)] {
            for line in r.to_text().lines() {
                s += &format!("{prefix}.{line}\n");
            }
        }
        s += &format!(
            "absence.rate={:.6}\nabsence.queries={}\ncount.exact={:.6}\ncount.within_one={:.6}\n",
            self.absence_rate, self.absence_queries, self.count_exact, self.count_within_one
        );
        s
    }
}

/// Evaluates a trained model on the test split.
pub fn evaluate_demo(cfg: &DemoConfig, model: &AlignerModel, losses: &[f64]) -> Result<DemoReport> {
    let test = cfg.test_task()?;
    let detection = evaluate_detection(model, &test, &cfg.decode)?;
    let pose = evaluate_pose(model, &test)?;
    let (absence_rate, absence_queries) = absence_rate(model, &test, cfg.filter_threshold)?;
    let counts = predicted_counts(model, &test, cfg.filter_threshold)?;
    let n = counts.len().max(1) as f64;
    let exact = counts.iter().filter(|(p, t)| p == t).count() as f64 / n;
    let within = counts.iter().filter(|(p, t)| p.abs_diff(*t) <= 1).count() as f64 / n;
    let w = 10.min(losses.len());
    Ok(DemoReport {
        seed: cfg.seed,
        train_images: cfg.train_images,
        test_images: cfg.test_images,
        steps: losses.len(),
        initial_loss: window_mean(&losses[..w]),
        final_loss: window_mean(&losses[losses.len() - w..]),
        detection,
        pose,
        absence_rate,
        absence_queries,
        count_exact: exact,
        count_within_one: within,
    })
}

/// Synthesize, train, decode and evaluate.
pub fn run_demo(cfg: &DemoConfig) -> Result<(AlignerModel, DemoReport)> {
    let (model, losses) = cfg.fit()?;
    let report = evaluate_demo(cfg, &model, &losses)?;
    Ok((model, report))
}
