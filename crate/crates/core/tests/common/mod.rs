//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vistask_core::aligner::{backward, forward, AlignerConfig, AlignerModel, ImageEmbeddings, OutputGrads};
use vistask_core::grid::{BBox, Instance};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller keeps this independent of the library's sampler.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub fn tiny_config(heads: usize) -> AlignerConfig {
    AlignerConfig {
        dim: 8,
        grid: 4,
        blocks: 2,
        ffn_mult: 2,
        heads,
        positional: true,
    }
}

/// A model whose readout scales and biases are randomized too, so every
/// parameter group carries gradient.
pub fn random_model(cfg: AlignerConfig, seed: u64) -> AlignerModel {
    perturbed_model(cfg, seed, 0.3)
}

/// Initialization plus N(0, std) on every parameter.
pub fn perturbed_model(cfg: AlignerConfig, seed: u64, std: f64) -> AlignerModel {
    let mut model = AlignerModel::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let noise = normal_vec(&mut r, model.num_params(), std);
    for (p, n) in model.params_mut().iter_mut().zip(noise) {
        *p += n;
    }
    model
}

pub fn random_inputs(cfg: &AlignerConfig, seed: u64) -> (ImageEmbeddings, Vec<f64>) {
    let mut r = rng(seed);
    let g = cfg.grid;
    let emb = ImageEmbeddings::new(g, g, cfg.dim, normal_vec(&mut r, g * g * cfg.dim, 1.0)).unwrap();
    let loc = normal_vec(&mut r, cfg.dim, 1.0);
    (emb, loc)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

/// Plain multi-head attention: queries `xs`, sources `ss`, weights by name.
fn attention(xs: &[Vec<f64>], ss: &[Vec<f64>], w: &dyn Fn(&str) -> Vec<f64>, d: usize, heads: usize) -> Vec<Vec<f64>> {
    let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
    let e = d / heads;
    let keys: Vec<Vec<f64>> = ss.iter().map(|s| matvec(&wk, d, d, s)).collect();
    let vals: Vec<Vec<f64>> = ss.iter().map(|s| matvec(&wv, d, d, s)).collect();
    xs.iter()
        .map(|x| {
            let q = matvec(&wq, d, d, x);
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let r = h * e..(h + 1) * e;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (e as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for (a, v) in ex.iter().zip(&vals) {
                    for i in r.clone() {
                        concat[i] += a / z * v[i];
                    }
                }
            }
            matvec(&wo, d, d, &concat)
        })
        .collect()
}

fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (x, y) in a.iter_mut().zip(b) {
        for (u, v) in x.iter_mut().zip(y) {
            *u += v;
        }
    }
}

/// Straight-line reimplementation of the aligner forward pass, reading
/// weights by tensor name. Returns `(m_logits, h, w)` per cell.
pub fn oracle_forward(model: &AlignerModel, emb: &ImageEmbeddings, loc: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = *model.config();
    let d = cfg.dim;
    let g = cfg.grid;
    let layout = model.layout();
    let tensor = |name: &str| -> Vec<f64> {
        let t = layout.iter().find(|t| t.name == name).unwrap_or_else(|| panic!("no tensor {name}"));
        model.params()[t.offset..t.offset + t.len()].to_vec()
    };
    let mut feats: Vec<Vec<f64>> = (0..g * g)
        .map(|cell| {
            let (r, c) = (cell / g, cell % g);
            let mut f = emb.cell(r, c).to_vec();
            if cfg.positional {
                for k in 0..d / 4 {
                    let w = std::f64::consts::PI * (g as f64).powf(-(k as f64) / (d / 4) as f64);
                    f[4 * k] += (w * c as f64).sin();
                    f[4 * k + 1] += (w * c as f64).cos();
                    f[4 * k + 2] += (w * r as f64).sin();
                    f[4 * k + 3] += (w * r as f64).cos();
                }
            }
            f
        })
        .collect();
    let out_tokens = tensor("output_tokens");
    let mut toks: Vec<Vec<f64>> = vec![loc.to_vec()];
    toks.extend(out_tokens.chunks(d).map(|c| c.to_vec()));
    let hid = cfg.ffn_mult * d;
    for b in 0..cfg.blocks {
        let sa = attention(&toks, &toks, &|w| tensor(&format!("block{b}.self_attn.{w}")), d, cfg.heads);
        add(&mut toks, &sa);
        let ca = attention(&toks, &feats, &|w| tensor(&format!("block{b}.token_to_image.{w}")), d, cfg.heads);
        add(&mut toks, &ca);
        let (w1, b1, w2, b2) = (
            tensor(&format!("block{b}.ffn.w1")),
            tensor(&format!("block{b}.ffn.b1")),
            tensor(&format!("block{b}.ffn.w2")),
            tensor(&format!("block{b}.ffn.b2")),
        );
        for t in toks.iter_mut() {
            let hidden: Vec<f64> = matvec(&w1, hid, d, t).iter().zip(&b1).map(|(z, b)| gelu(z + b)).collect();
            let o = matvec(&w2, d, hid, &hidden);
            for i in 0..d {
                t[i] += o[i] + b2[i];
            }
        }
        let ia = attention(&feats, &toks, &|w| tensor(&format!("block{b}.image_to_token.{w}")), d, cfg.heads);
        add(&mut feats, &ia);
    }
    let (scale, bias) = (tensor("readout.scale"), tensor("readout.bias"));
    let head = |k: usize| -> Vec<f64> {
        feats
            .iter()
            .map(|f| scale[k] * toks[1 + k].iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt() + bias[k])
            .collect()
    };
    let softplus = |z: f64| if z > 30.0 { z } else { z.exp().ln_1p() };
    (head(0), head(1).into_iter().map(softplus).collect(), head(2).into_iter().map(softplus).collect())
}

fn scalar_loss(model: &AlignerModel, emb: &ImageEmbeddings, loc: &[f64], up: &OutputGrads) -> f64 {
    let (out, _) = forward(model, emb, loc).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(out.m_logits.data(), &up.m_logits) + dot(out.h_map.data(), &up.h_map) + dot(out.w_map.data(), &up.w_map)
}

pub fn norm_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central-difference check of every parameter tensor and the query
/// embedding against a random linear functional of the outputs. Returns
/// `(group, relative error, analytic norm)`.
pub fn aligner_fd_errors(cfg: AlignerConfig, seed: u64, step: f64) -> Vec<(String, f64, f64)> {
    fd_errors_at(&random_model(cfg, seed), seed, step)
}

pub fn fd_errors_at(model: &AlignerModel, seed: u64, step: f64) -> Vec<(String, f64, f64)> {
    let cfg = *model.config();
    let (emb, loc) = random_inputs(&cfg, seed + 1);
    let cells = cfg.grid * cfg.grid;
    let mut r = rng(seed + 2);
    let up = OutputGrads {
        m_logits: normal_vec(&mut r, cells, 1.0),
        h_map: normal_vec(&mut r, cells, 1.0),
        w_map: normal_vec(&mut r, cells, 1.0),
    };
    let (_, cache) = forward(model, &emb, &loc).unwrap();
    let grads = backward(model, &cache, &up).unwrap();
    let mut out = Vec::new();
    for t in model.layout() {
        let numeric: Vec<f64> = t
            .range()
            .map(|i| {
                let mut plus = model.clone();
                plus.params_mut()[i] += step;
                let mut minus = model.clone();
                minus.params_mut()[i] -= step;
                (scalar_loss(&plus, &emb, &loc, &up) - scalar_loss(&minus, &emb, &loc, &up)) / (2.0 * step)
            })
            .collect();
        let analytic = &grads.params[t.range()];
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        out.push((t.name.clone(), norm_rel_error(analytic, &numeric), norm));
    }
    let numeric: Vec<f64> = (0..cfg.dim)
        .map(|i| {
            let mut lp = loc.clone();
            lp[i] += step;
            let mut lm = loc.clone();
            lm[i] -= step;
            (scalar_loss(model, &emb, &lp, &up) - scalar_loss(model, &emb, &lm, &up)) / (2.0 * step)
        })
        .collect();
    let norm = grads.loc.iter().map(|a| a * a).sum::<f64>().sqrt();
    out.push(("loc".into(), norm_rel_error(&grads.loc, &numeric), norm));
    out
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Exhaustive matcher for one image: among all injective partial
/// assignments of score-ordered predictions to ground truth with IoU >= t,
/// the lexicographically best one when each prediction in turn prefers
/// being matched, then higher IoU, then the lower ground-truth index.
pub fn brute_force_match(sims: &[Vec<f64>], n_gt: usize, t: f64) -> Vec<Option<usize>> {
    type Key = Vec<(u8, f64, i64)>;
    fn key(sims: &[Vec<f64>], a: &[Option<usize>]) -> Key {
        a.iter()
            .enumerate()
            .map(|(i, m)| match m {
                Some(j) => (1, sims[i][*j], -(*j as i64)),
                None => (0, 0.0, 0),
            })
            .collect()
    }
    fn better(a: &Key, b: &Key) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x.0 != y.0 {
                return x.0 > y.0;
            }
            if x.1 != y.1 {
                return x.1 > y.1;
            }
            if x.2 != y.2 {
                return x.2 > y.2;
            }
        }
        false
    }
    fn rec(
        i: usize,
        sims: &[Vec<f64>],
        n_gt: usize,
        t: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<(Key, Vec<Option<usize>>)>,
    ) {
        if i == sims.len() {
            let k = key(sims, cur);
            if best.as_ref().is_none_or(|(bk, _)| better(&k, bk)) {
                *best = Some((k, cur.clone()));
            }
            return;
        }
        cur.push(None);
        rec(i + 1, sims, n_gt, t, used, cur, best);
        cur.pop();
        for j in 0..n_gt {
            if !used[j] && sims[i][j] >= t {
                used[j] = true;
                cur.push(Some(j));
                rec(i + 1, sims, n_gt, t, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    rec(0, sims, n_gt, t, &mut vec![false; n_gt], &mut Vec::new(), &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

/// Reference 101-point interpolated AP.
pub fn reference_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        prec.push(tp / (i as f64 + 1.0));
        rec.push(tp / n_gt as f64);
    }
    (0..=100)
        .map(|s| {
            let r = s as f64 / 100.0;
            // interpolated precision: best precision at any recall >= r
            rec.iter()
                .zip(&prec)
                .filter(|(rv, _)| **rv >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Brute-force box AP at one IoU threshold, averaged over categories with
/// ground truth. Predictions are ranked by score; ties keep image order,
/// then input order.
pub fn brute_force_box_ap(images: &[(Vec<Instance>, Vec<Instance>)], t: f64) -> f64 {
    let mut cats: Vec<u64> = images
        .iter()
        .flat_map(|(g, p)| g.iter().chain(p).map(|i| i.category))
        .collect();
    cats.sort();
    cats.dedup();
    let mut aps = Vec::new();
    for c in cats {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0;
        for (gt, pred) in images {
            let gts: Vec<&Instance> = gt.iter().filter(|g| g.category == c).collect();
            let mut preds: Vec<&Instance> = pred.iter().filter(|p| p.category == c).collect();
            preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            n_gt += gts.len();
            let sims: Vec<Vec<f64>> = preds.iter().map(|p| gts.iter().map(|g| iou(&p.bbox, &g.bbox)).collect()).collect();
            let m = brute_force_match(&sims, gts.len(), t);
            scored.extend(preds.iter().zip(m).map(|(p, m)| (p.score, m.is_some())));
        }
        if n_gt == 0 {
            continue;
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        aps.push(reference_ap(&scored.iter().map(|s| s.1).collect::<Vec<_>>(), n_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Random images with up to four ground truths and four predictions, on a
/// coarse coordinate lattice so exact IoU and score ties occur.
pub fn random_eval_images(seed: u64, n_images: usize, categories: u64) -> Vec<(Vec<Instance>, Vec<Instance>)> {
    let mut r = rng(seed);
    let boxed = |r: &mut ChaCha8Rng| {
        let x = r.random_range(0..8) as f64 * 10.0;
        let y = r.random_range(0..8) as f64 * 10.0;
        let w = r.random_range(1..5) as f64 * 10.0;
        let h = r.random_range(1..5) as f64 * 10.0;
        BBox::from_xywh(x, y, w, h).unwrap()
    };
    (0..n_images)
        .map(|_| {
            let ng = r.random_range(0..=4);
            let np = r.random_range(0..=4);
            let gt: Vec<Instance> = (0..ng)
                .map(|_| {
                    let c = r.random_range(0..categories);
                    Instance::new(c, boxed(&mut r))
                })
                .collect();
            let pred: Vec<Instance> = (0..np)
                .map(|_| {
                    let c = r.random_range(0..categories);
                    // jitter a ground truth or draw a fresh box
                    let b = if !gt.is_empty() && r.random_bool(0.7) {
                        let g = gt[r.random_range(0..gt.len())].bbox;
                        let dx = r.random_range(-1..=1) as f64 * 5.0;
                        BBox::new(g.x0 + dx, g.y0, g.x1 + dx, g.y1).unwrap()
                    } else {
                        boxed(&mut r)
                    };
                    let score = r.random_range(1..=10) as f64 / 10.0;
                    Instance::new(c, b).with_score(score)
                })
                .collect();
            (gt, pred)
        })
        .collect()
}
