//! Dense vision-language aligner.
//!
//! A prompt token (the query embedding) and three learnable output tokens
//! (`M` heatmap, `H` height, `W` width) run through `blocks` rounds of
//!
//! 1. token self-attention,
//! 2. token-to-image cross-attention,
//! 3. a token feed-forward network,
//! 4. image-to-token cross-attention,
//!
//! each with a residual connection. Every output map is the scaled dot
//! product of its token with the final per-cell image features, followed by
//! a sigmoid (heatmap) or softplus (sizes) readout.

mod attention;
pub mod checkpoint;
pub mod synth;
pub mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid, Heatmap, LogitGrid};
use crate::math::{axpy, dot, sigmoid, softplus, softplus_inv};
use attention::{AttnCache, AttnGrads, AttnParams, Dims};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use synth::{synth_embeddings, EmbedConfig, Prototypes};
pub use train::{sample_loss_into, train, AdamW, TrainConfig, TrainReport, TrainSample, TrainingSet};

/// Number of output tokens (`M`, `H`, `W`).
pub const OUTPUT_TOKENS: usize = 3;
const TOKENS: usize = OUTPUT_TOKENS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignerConfig {
    pub dim: usize,
    pub grid: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub heads: usize,
    /// Add fixed sinusoidal positions to the image embeddings.
    pub positional: bool,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            grid: 32,
            blocks: 2,
            ffn_mult: 2,
            heads: 1,
            positional: true,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "aligner config",
                format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads),
            ));
        }
        if self.blocks == 0 || self.grid == 0 || self.ffn_mult == 0 {
            return Err(Error::invalid("aligner config", "blocks, grid and ffn_mult must be >= 1"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    fn hidden(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTensor {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Parameter tensors in declaration order.
pub fn param_layout(cfg: &AlignerConfig) -> Vec<ParamTensor> {
    let d = cfg.dim;
    let hid = cfg.hidden();
    let mut out = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let t = ParamTensor { name, offset, shape };
        offset += t.len();
        out.push(t);
    };
    push("output_tokens".into(), vec![OUTPUT_TOKENS, d]);
    for b in 0..cfg.blocks {
        for attn in ["self_attn", "token_to_image"] {
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("block{b}.{attn}.{w}"), vec![d, d]);
            }
        }
        push(format!("block{b}.ffn.w1"), vec![hid, d]);
        push(format!("block{b}.ffn.b1"), vec![hid]);
        push(format!("block{b}.ffn.w2"), vec![d, hid]);
        push(format!("block{b}.ffn.b2"), vec![d]);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("block{b}.image_to_token.{w}"), vec![d, d]);
        }
    }
    push("readout.scale".into(), vec![OUTPUT_TOKENS]);
    push("readout.bias".into(), vec![OUTPUT_TOKENS]);
    out
}

/// Offsets of one block's tensors, resolved once from the layout.
#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    self_attn: [usize; 4],
    t2i: [usize; 4],
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    i2t: [usize; 4],
}

#[derive(Debug, Clone)]
struct Offsets {
    tokens: usize,
    blocks: Vec<BlockOffsets>,
    scale: usize,
    bias: usize,
    total: usize,
}

impl Offsets {
    fn new(cfg: &AlignerConfig) -> Self {
        let layout = param_layout(cfg);
        let at = |name: &str| layout.iter().find(|t| t.name == name).map(|t| t.offset).unwrap();
        let quad = |b: usize, attn: &str| {
            ["wq", "wk", "wv", "wo"].map(|w| at(&format!("block{b}.{attn}.{w}")))
        };
        let blocks = (0..cfg.blocks)
            .map(|b| BlockOffsets {
                self_attn: quad(b, "self_attn"),
                t2i: quad(b, "token_to_image"),
                w1: at(&format!("block{b}.ffn.w1")),
                b1: at(&format!("block{b}.ffn.b1")),
                w2: at(&format!("block{b}.ffn.w2")),
                b2: at(&format!("block{b}.ffn.b2")),
                i2t: quad(b, "image_to_token"),
            })
            .collect();
        let last = layout.last().unwrap();
        Self {
            tokens: at("output_tokens"),
            blocks,
            scale: at("readout.scale"),
            bias: at("readout.bias"),
            total: last.offset + last.len(),
        }
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Aligner parameters stored as one flat vector (see [`param_layout`]).
#[derive(Debug)]
pub struct AlignerModel {
    config: AlignerConfig,
    offsets: Offsets,
    params: Vec<f64>,
    /// Fixed positional table, empty when disabled.
    positions: Vec<f64>,
    id: u64,
    generation: u64,
}

impl Clone for AlignerModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            offsets: self.offsets.clone(),
            params: self.params.clone(),
            positions: self.positions.clone(),
            id: next_id(),
            generation: 0,
        }
    }
}

impl PartialEq for AlignerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Heatmap logit prior, `-ln((1 - 0.1) / 0.1)`.
const HEATMAP_BIAS_INIT: f64 = -2.197_224_577_336_219_6;
/// Initial size readout, in grid cells.
const SIZE_INIT: f64 = 4.0;

impl AlignerModel {
    /// Random initialization; deterministic per seed.
    pub fn new(config: AlignerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in param_layout(&config) {
            let fan_in = *t.shape.last().unwrap() as f64;
            let std = if t.name == "output_tokens" {
                1.0
            } else if t.name.starts_with("readout") || t.name.ends_with(".b1") || t.name.ends_with(".b2") {
                0.0
            } else {
                1.0 / fan_in.sqrt()
            };
            if std > 0.0 {
                let normal = Normal::new(0.0, std).unwrap();
                for v in &mut model.params[t.range()] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        let (s, b) = (model.offsets.scale, model.offsets.bias);
        // Unit scale saturates the softplus size heads at init.
        model.params[s..s + OUTPUT_TOKENS].fill(1.0 / (config.dim as f64).sqrt());
        model.params[b] = HEATMAP_BIAS_INIT;
        model.params[b + 1] = softplus_inv(SIZE_INIT);
        model.params[b + 2] = softplus_inv(SIZE_INIT);
        Ok(model)
    }

    pub fn zeros(config: AlignerConfig) -> Result<Self> {
        config.validate()?;
        let offsets = Offsets::new(&config);
        Ok(Self {
            config,
            params: vec![0.0; offsets.total],
            positions: if config.positional {
                positional_encoding(config.grid, config.dim)
            } else {
                Vec::new()
            },
            offsets,
            id: next_id(),
            generation: 0,
        })
    }

    pub fn config(&self) -> &AlignerConfig {
        &self.config
    }

    pub fn layout(&self) -> Vec<ParamTensor> {
        param_layout(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    fn attn(&self, off: [usize; 4]) -> AttnParams<'_> {
        let dd = self.config.dim * self.config.dim;
        let w = |o: usize| &self.params[o..o + dd];
        AttnParams {
            wq: w(off[0]),
            wk: w(off[1]),
            wv: w(off[2]),
            wo: w(off[3]),
        }
    }

    fn dims(&self) -> Dims {
        Dims {
            d: self.config.dim,
            heads: self.config.heads,
        }
    }
}

/// `grid x grid x dim` image features, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbeddings {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ImageEmbeddings {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::ShapeMismatch {
                what: "image embeddings",
                expected: (rows * cols, dim),
                found: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.cols + col) * self.dim;
        &mut self.data[i..i + self.dim]
    }
}

/// 2-D sinusoidal encoding: for each frequency, `sin/cos` of the column
/// then `sin/cos` of the row. Frequencies run geometrically from `pi`
/// (period two cells) down to about one cycle per grid.
pub fn positional_encoding(grid: usize, dim: usize) -> Vec<f64> {
    let nfreq = dim / 4;
    let mut pe = vec![0.0; grid * grid * dim];
    for r in 0..grid {
        for c in 0..grid {
            let cell = &mut pe[(r * grid + c) * dim..(r * grid + c + 1) * dim];
            for k in 0..nfreq {
                let w = std::f64::consts::PI * (grid as f64).powf(-(k as f64) / nfreq as f64);
                cell[4 * k] = (w * c as f64).sin();
                cell[4 * k + 1] = (w * c as f64).cos();
                cell[4 * k + 2] = (w * r as f64).sin();
                cell[4 * k + 3] = (w * r as f64).cos();
            }
        }
    }
    pe
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignerOutput {
    pub m_logits: LogitGrid,
    /// Height in grid cells (softplus, nonnegative).
    pub h_map: Grid,
    /// Width in grid cells (softplus, nonnegative).
    pub w_map: Grid,
}

impl AlignerOutput {
    pub fn heatmap(&self) -> Heatmap {
        self.m_logits.sigmoid()
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    t_in: Vec<f64>,
    sa: AttnCache,
    t1: Vec<f64>,
    t2i: AttnCache,
    t2: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    t3: Vec<f64>,
    f_in: Vec<f64>,
    i2t: AttnCache,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_id: u64,
    generation: u64,
    blocks: Vec<BlockCache>,
    tokens: Vec<f64>,
    features: Vec<f64>,
    /// Pre-activation readouts, `3 x cells`.
    readout_pre: Vec<f64>,
    /// Unscaled dot products `<t_k, f(p)> / sqrt(d)`, `3 x cells`.
    readout_dot: Vec<f64>,
}

/// Gradients in the same flat layout as the model parameters, plus the
/// gradient with respect to the query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerGrads {
    pub params: Vec<f64>,
    pub loc: Vec<f64>,
}

impl AlignerGrads {
    pub fn zeros(model: &AlignerModel) -> Self {
        Self {
            params: vec![0.0; model.num_params()],
            loc: vec![0.0; model.config.dim],
        }
    }
}

/// Upstream gradients with respect to the three output maps.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub m_logits: Vec<f64>,
    pub h_map: Vec<f64>,
    pub w_map: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros(cells: usize) -> Self {
        Self {
            m_logits: vec![0.0; cells],
            h_map: vec![0.0; cells],
            w_map: vec![0.0; cells],
        }
    }
}

#[inline]
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Runs the aligner on one image and query.
pub fn forward(
    model: &AlignerModel,
    image: &ImageEmbeddings,
    loc: &[f64],
) -> Result<(AlignerOutput, ForwardCache)> {
    let cfg = &model.config;
    let d = cfg.dim;
    let p = cfg.cells();
    if (image.rows, image.cols) != (cfg.grid, cfg.grid) || image.dim != d {
        return Err(Error::ShapeMismatch {
            what: "aligner image embeddings",
            expected: (cfg.grid * cfg.grid, d),
            found: (image.rows * image.cols, image.dim),
        });
    }
    if loc.len() != d {
        return Err(Error::ShapeMismatch {
            what: "query embedding",
            expected: (1, d),
            found: (1, loc.len()),
        });
    }
    check_finite(&image.data, "image embeddings")?;
    check_finite(loc, "query embedding")?;

    let mut f = image.data.clone();
    if cfg.positional {
        for (v, pe) in f.iter_mut().zip(&model.positions) {
            *v += pe;
        }
    }
    let mut t = Vec::with_capacity(TOKENS * d);
    t.extend_from_slice(loc);
    t.extend_from_slice(&model.params[model.offsets.tokens..model.offsets.tokens + OUTPUT_TOKENS * d]);

    let dims = model.dims();
    let hid = cfg.hidden();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for off in &model.offsets.blocks {
        let t_in = t.clone();
        let (sa_out, sa) = attention::forward(&t_in, TOKENS, &t_in, TOKENS, dims, &model.attn(off.self_attn));
        let t1: Vec<f64> = t_in.iter().zip(&sa_out).map(|(a, b)| a + b).collect();

        let (ca_out, t2i) = attention::forward(&t1, TOKENS, &f, p, dims, &model.attn(off.t2i));
        let t2: Vec<f64> = t1.iter().zip(&ca_out).map(|(a, b)| a + b).collect();

        let w1 = &model.params[off.w1..off.w1 + hid * d];
        let b1 = &model.params[off.b1..off.b1 + hid];
        let w2 = &model.params[off.w2..off.w2 + d * hid];
        let b2 = &model.params[off.b2..off.b2 + d];
        let mut ffn_pre = vec![0.0; TOKENS * hid];
        let mut ffn_act = vec![0.0; TOKENS * hid];
        let mut t3 = t2.clone();
        for i in 0..TOKENS {
            let ti = &t2[i * d..(i + 1) * d];
            for k in 0..hid {
                let z = dot(&w1[k * d..(k + 1) * d], ti) + b1[k];
                ffn_pre[i * hid + k] = z;
                ffn_act[i * hid + k] = gelu(z).0;
            }
            let act = &ffn_act[i * hid..(i + 1) * hid];
            let out = &mut t3[i * d..(i + 1) * d];
            for (r, o) in out.iter_mut().enumerate() {
                *o += dot(&w2[r * hid..(r + 1) * hid], act) + b2[r];
            }
        }

        let f_in = f;
        let (ia_out, i2t) = attention::forward(&f_in, p, &t3, TOKENS, dims, &model.attn(off.i2t));
        f = f_in.iter().zip(&ia_out).map(|(a, b)| a + b).collect();
        t = t3.clone();
        blocks.push(BlockCache {
            t_in,
            sa,
            t1,
            t2i,
            t2,
            ffn_pre,
            ffn_act,
            t3,
            f_in,
            i2t,
        });
    }

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let scale = &model.params[model.offsets.scale..model.offsets.scale + OUTPUT_TOKENS];
    let bias = &model.params[model.offsets.bias..model.offsets.bias + OUTPUT_TOKENS];
    let mut readout_dot = vec![0.0; OUTPUT_TOKENS * p];
    let mut readout_pre = vec![0.0; OUTPUT_TOKENS * p];
    for k in 0..OUTPUT_TOKENS {
        let tok = &t[(k + 1) * d..(k + 2) * d];
        for cell in 0..p {
            let s = dot(tok, &f[cell * d..(cell + 1) * d]) * inv_sqrt_d;
            readout_dot[k * p + cell] = s;
            readout_pre[k * p + cell] = scale[k] * s + bias[k];
        }
    }
    check_finite(&readout_pre, "aligner output")?;
    let g = cfg.grid;
    let m_logits = Grid::new(g, g, readout_pre[..p].to_vec())?;
    let h_map = Grid::new(g, g, readout_pre[p..2 * p].iter().map(|&z| softplus(z)).collect())?;
    let w_map = Grid::new(g, g, readout_pre[2 * p..].iter().map(|&z| softplus(z)).collect())?;
    let output = AlignerOutput {
        m_logits,
        h_map,
        w_map,
    };
    let cache = ForwardCache {
        model_id: model.id,
        generation: model.generation,
        blocks,
        tokens: t,
        features: f,
        readout_pre,
        readout_dot,
    };
    Ok((output, cache))
}

/// Exact gradients of the forward pass, accumulated into `grads`.
pub fn backward_into(
    model: &AlignerModel,
    cache: &ForwardCache,
    upstream: &OutputGrads,
    grads: &mut AlignerGrads,
) -> Result<()> {
    if cache.model_id != model.id || cache.generation != model.generation {
        return Err(Error::StaleCache("forward cache belongs to a different model state"));
    }
    let cfg = &model.config;
    let d = cfg.dim;
    let p = cfg.cells();
    let hid = cfg.hidden();
    for (g, name) in [
        (&upstream.m_logits, "m_logits"),
        (&upstream.h_map, "h_map"),
        (&upstream.w_map, "w_map"),
    ] {
        if g.len() != p {
            return Err(Error::ShapeMismatch {
                what: name,
                expected: (cfg.grid, cfg.grid),
                found: (g.len(), 1),
            });
        }
    }
    if grads.params.len() != model.num_params() || grads.loc.len() != d {
        return Err(Error::ShapeMismatch {
            what: "gradient buffers",
            expected: (model.num_params(), d),
            found: (grads.params.len(), grads.loc.len()),
        });
    }

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let off = &model.offsets;
    let scale = model.params[off.scale..off.scale + OUTPUT_TOKENS].to_vec();

    // Readout.
    let mut dz = vec![0.0; OUTPUT_TOKENS * p];
    dz[..p].copy_from_slice(&upstream.m_logits);
    for cell in 0..p {
        dz[p + cell] = upstream.h_map[cell] * sigmoid(cache.readout_pre[p + cell]);
        dz[2 * p + cell] = upstream.w_map[cell] * sigmoid(cache.readout_pre[2 * p + cell]);
    }
    let mut dt = vec![0.0; TOKENS * d];
    let mut df = vec![0.0; p * d];
    for k in 0..OUTPUT_TOKENS {
        let dzk = &dz[k * p..(k + 1) * p];
        grads.params[off.bias + k] += dzk.iter().sum::<f64>();
        grads.params[off.scale + k] +=
            dzk.iter().zip(&cache.readout_dot[k * p..(k + 1) * p]).map(|(a, b)| a * b).sum::<f64>();
        let tok = &cache.tokens[(k + 1) * d..(k + 2) * d];
        let dtok = &mut dt[(k + 1) * d..(k + 2) * d];
        for cell in 0..p {
            let g = dzk[cell] * scale[k] * inv_sqrt_d;
            if g != 0.0 {
                axpy(g, &cache.features[cell * d..(cell + 1) * d], dtok);
                axpy(g, tok, &mut df[cell * d..(cell + 1) * d]);
            }
        }
    }

    let dims = model.dims();
    let pg = &mut grads.params;
    for (bo, bc) in off.blocks.iter().zip(&cache.blocks).rev() {
        // f_out = f_in + i2t(f_in, t3)
        let mut dt3 = dt;
        let mut df_in = df.clone();
        {
            let mut ag = attn_grads(pg, bo.i2t, d * d);
            attention::backward(
                &bc.f_in,
                &bc.t3,
                &bc.i2t,
                dims,
                &model.attn(bo.i2t),
                &df,
                &mut ag,
                &mut df_in,
                &mut dt3,
            );
        }

        // t3 = t2 + w2 gelu(w1 t2 + b1) + b2
        let w1 = &model.params[bo.w1..bo.w1 + hid * d];
        let w2 = &model.params[bo.w2..bo.w2 + d * hid];
        let mut dt2 = dt3.clone();
        for i in 0..TOKENS {
            let dout = &dt3[i * d..(i + 1) * d];
            let act = &bc.ffn_act[i * hid..(i + 1) * hid];
            for (r, &g) in dout.iter().enumerate() {
                pg[bo.b2 + r] += g;
                axpy(g, act, &mut pg[bo.w2 + r * hid..bo.w2 + (r + 1) * hid]);
            }
            let t2i = &bc.t2[i * d..(i + 1) * d];
            for k in 0..hid {
                let dact: f64 = (0..d).map(|r| dout[r] * w2[r * hid + k]).sum();
                let dpre = dact * gelu(bc.ffn_pre[i * hid + k]).1;
                if dpre != 0.0 {
                    pg[bo.b1 + k] += dpre;
                    axpy(dpre, t2i, &mut pg[bo.w1 + k * d..bo.w1 + (k + 1) * d]);
                    axpy(dpre, &w1[k * d..(k + 1) * d], &mut dt2[i * d..(i + 1) * d]);
                }
            }
        }

        // t2 = t1 + t2i(t1, f_in)
        let mut dt1 = dt2.clone();
        {
            let mut ag = attn_grads(pg, bo.t2i, d * d);
            attention::backward(
                &bc.t1,
                &bc.f_in,
                &bc.t2i,
                dims,
                &model.attn(bo.t2i),
                &dt2,
                &mut ag,
                &mut dt1,
                &mut df_in,
            );
        }

        // t1 = t_in + sa(t_in, t_in)
        let mut dt_in = dt1.clone();
        let mut dt_src = vec![0.0; TOKENS * d];
        {
            let mut ag = attn_grads(pg, bo.self_attn, d * d);
            attention::backward(
                &bc.t_in,
                &bc.t_in,
                &bc.sa,
                dims,
                &model.attn(bo.self_attn),
                &dt1,
                &mut ag,
                &mut dt_in,
                &mut dt_src,
            );
        }
        for (a, b) in dt_in.iter_mut().zip(&dt_src) {
            *a += b;
        }
        dt = dt_in;
        df = df_in;
    }

    for (g, v) in grads.loc.iter_mut().zip(&dt[..d]) {
        *g += v;
    }
    for (g, v) in pg[off.tokens..off.tokens + OUTPUT_TOKENS * d].iter_mut().zip(&dt[d..]) {
        *g += v;
    }
    Ok(())
}

/// Disjoint mutable views of one attention's four weight gradients.
fn attn_grads(params: &mut [f64], off: [usize; 4], len: usize) -> AttnGrads<'_> {
    debug_assert!(off.windows(2).all(|w| w[1] == w[0] + len));
    let block = &mut params[off[0]..off[0] + 4 * len];
    let (wq, rest) = block.split_at_mut(len);
    let (wk, rest) = rest.split_at_mut(len);
    let (wv, wo) = rest.split_at_mut(len);
    AttnGrads { wq, wk, wv, wo }
}

/// Exact gradients of the forward pass.
pub fn backward(model: &AlignerModel, cache: &ForwardCache, upstream: &OutputGrads) -> Result<AlignerGrads> {
    let mut grads = AlignerGrads::zeros(model);
    backward_into(model, cache, upstream, &mut grads)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> AlignerConfig {
        AlignerConfig {
            dim: 8,
            grid: 4,
            blocks: 2,
            ffn_mult: 2,
            heads: 1,
            positional: true,
        }
    }

    fn random_input(cfg: &AlignerConfig, seed: u64) -> (ImageEmbeddings, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.cells() * cfg.dim;
        let img = ImageEmbeddings::new(
            cfg.grid,
            cfg.grid,
            cfg.dim,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let loc = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        (img, loc)
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = AlignerConfig::default();
        let layout = param_layout(&cfg);
        let mut next = 0;
        for t in &layout {
            assert_eq!(t.offset, next, "{}", t.name);
            next += t.len();
        }
        assert_eq!(AlignerModel::zeros(cfg).unwrap().num_params(), next);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.heads = 3;
        assert!(AlignerModel::new(cfg, 0).is_err());
        cfg.heads = 2;
        cfg.blocks = 0;
        assert!(AlignerModel::new(cfg, 0).is_err());
    }

    #[test]
    fn zero_image_gives_uniform_heatmap() {
        let mut cfg = tiny();
        cfg.positional = false;
        let mut model = AlignerModel::new(cfg, 3).unwrap();
        let b = model.offsets.bias;
        model.params_mut()[b] = 0.0;
        let img = ImageEmbeddings::zeros(4, 4, 8);
        let (out, _) = forward(&model, &img, &[0.3; 8]).unwrap();
        let first = out.m_logits.data()[0];
        assert!(out.m_logits.data().iter().all(|&v| v == first));
    }

    #[test]
    fn cell_permutation_is_equivariant_without_positions() {
        let mut cfg = tiny();
        cfg.positional = false;
        let model = AlignerModel::new(cfg, 9).unwrap();
        let (img, loc) = random_input(&cfg, 1);
        let (out, _) = forward(&model, &img, &loc).unwrap();
        let mut swapped = img.clone();
        let a = swapped.cell(0, 1).to_vec();
        let b = swapped.cell(3, 2).to_vec();
        swapped.cell_mut(0, 1).copy_from_slice(&b);
        swapped.cell_mut(3, 2).copy_from_slice(&a);
        let (out2, _) = forward(&model, &swapped, &loc).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
        assert!(close(out.m_logits.get(0, 1), out2.m_logits.get(3, 2)));
        assert!(close(out.m_logits.get(3, 2), out2.m_logits.get(0, 1)));
        assert!(close(out.h_map.get(1, 1), out2.h_map.get(1, 1)));
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let cfg = tiny();
        let model = AlignerModel::new(cfg, 0).unwrap();
        let (img, loc) = random_input(&cfg, 0);
        assert!(forward(&model, &ImageEmbeddings::zeros(3, 4, 8), &loc).is_err());
        assert!(forward(&model, &img, &loc[..7]).is_err());
        let mut bad = loc.clone();
        bad[2] = f64::NAN;
        assert!(matches!(forward(&model, &img, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny();
        let model = AlignerModel::new(cfg, 4).unwrap();
        let (img, loc) = random_input(&cfg, 2);
        let (_, cache) = forward(&model, &img, &loc).unwrap();
        let g = backward(&model, &cache, &OutputGrads::zeros(cfg.cells())).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.loc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = tiny();
        let mut model = AlignerModel::new(cfg, 4).unwrap();
        let (img, loc) = random_input(&cfg, 2);
        let (_, cache) = forward(&model, &img, &loc).unwrap();
        model.params_mut()[0] += 1.0;
        let up = OutputGrads::zeros(cfg.cells());
        assert!(matches!(backward(&model, &cache, &up), Err(Error::StaleCache(_))));
        let other = model.clone();
        let (_, cache) = forward(&model, &img, &loc).unwrap();
        assert!(backward(&other, &cache, &up).is_err());
        assert!(backward(&model, &cache, &up).is_ok());
    }

    #[test]
    fn multi_head_gradients_match_finite_differences() {
        let mut cfg = tiny();
        cfg.heads = 2;
        cfg.blocks = 1;
        let mut model = AlignerModel::new(cfg, 21).unwrap();
        let (img, loc) = random_input(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = cfg.cells();
        let coef: Vec<f64> = (0..3 * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = OutputGrads {
            m_logits: coef[..p].to_vec(),
            h_map: coef[p..2 * p].to_vec(),
            w_map: coef[2 * p..].to_vec(),
        };
        let objective = |m: &AlignerModel| {
            let (o, _) = forward(m, &img, &loc).unwrap();
            let all = o.m_logits.data().iter().chain(o.h_map.data()).chain(o.w_map.data());
            all.zip(&coef).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = forward(&model, &img, &loc).unwrap();
        let g = backward(&model, &cache, &up).unwrap();
        let step = 1e-5;
        let mut num = vec![0.0; model.num_params()];
        for i in 0..model.num_params() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + step;
            let a = objective(&model);
            model.params_mut()[i] = orig - step;
            let b = objective(&model);
            model.params_mut()[i] = orig;
            num[i] = (a - b) / (2.0 * step);
        }
        let diff: f64 = num.iter().zip(&g.params).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-6, "relative error {}", diff / norm);
    }
}
