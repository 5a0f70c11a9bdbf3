//! Mini-batch training of the aligner with AdamW.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward_into, forward, AlignerGrads, AlignerModel, ImageEmbeddings, OutputGrads};
use crate::encode::SizeTargets;
use crate::error::{Error, Result};
use crate::grid::Heatmap;
use crate::loss::{gaussian_focal_loss_with_positives, size_l1_loss, total_loss, FocalParams, LossWeights};

/// One query against one image.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub embeddings: Arc<ImageEmbeddings>,
    pub loc: Vec<f64>,
    pub heatmap: Heatmap,
    /// Also supplies the focal-loss positives through `pos_mask`.
    pub sizes: SizeTargets,
    pub supervise_size: bool,
}

/// Indexable source of training samples. Implementations may build
/// samples on demand; `get` must be deterministic.
pub trait TrainingSet {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<TrainSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSet for [TrainSample] {
    fn len(&self) -> usize {
        <[TrainSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<TrainSample> {
        Ok(self[index].clone())
    }
}

impl TrainingSet for Vec<TrainSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<TrainSample> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub focal: FocalParams,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            focal: FocalParams::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("optimizer", "eps must be > 0 and weight_decay >= 0"));
        }
        self.focal.validate()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Trailing moving average over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        self.losses
            .windows(window.min(self.losses.len()).max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Loss of one sample, with its gradients accumulated into `grads` scaled
/// by `weight`.
pub fn sample_loss_into(
    model: &AlignerModel,
    sample: &TrainSample,
    cfg: &TrainConfig,
    weight: f64,
    grads: &mut AlignerGrads,
) -> Result<f64> {
    let (out, cache) = forward(model, &sample.embeddings, &sample.loc)?;
    let pred = out.heatmap();
    let focal = gaussian_focal_loss_with_positives(&pred, &sample.heatmap, &sample.sizes.pos_mask, &cfg.focal)?;
    let cells = pred.data().len();
    let mut up = OutputGrads::zeros(cells);
    let lh = cfg.weights.lambda_h * weight;
    for (i, (g, &p)) in focal.grad.iter().zip(pred.data()).enumerate() {
        up.m_logits[i] = lh * g * p * (1.0 - p);
    }
    let mut size = 0.0;
    if sample.supervise_size {
        let s = size_l1_loss(&out.h_map, &out.w_map, &sample.sizes)?;
        let ls = cfg.weights.lambda_size * weight;
        for i in 0..cells {
            up.h_map[i] = ls * s.grad_h[i];
            up.w_map[i] = ls * s.grad_w[i];
        }
        size = s.loss;
    }
    let loss = total_loss(focal.loss, size, &cfg.weights)?;
    backward_into(model, &cache, &up, grads)?;
    Ok(loss)
}

/// Trains `model` in place. Deterministic for a fixed config and data.
pub fn train(model: &mut AlignerModel, data: &dyn TrainingSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("dataset", "training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(model.num_params(), cfg);
    let mut grads = AlignerGrads::zeros(model);
    let mut losses = Vec::with_capacity(cfg.steps);
    let weight = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        grads.params.fill(0.0);
        grads.loc.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = data.get(order[cursor])?;
            cursor += 1;
            batch_loss += match sample_loss_into(model, &sample, cfg, weight, &mut grads) {
                Ok(l) => l * weight,
                Err(Error::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
        }
        if !batch_loss.is_finite() || grads.params.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: batch_loss });
        }
        losses.push(batch_loss);
        opt.step(model.params_mut(), &grads.params);
    }
    Ok(TrainReport { losses })
}
