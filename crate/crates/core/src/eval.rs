//! COCO-style metrics: box/mask/keypoint AP and cumulative IoU.
//!
//! Matching runs per image and category. Predictions are visited in
//! descending score order (stable by input order, at most `max_dets` per
//! image and category); each takes the unmatched ground truth of highest
//! similarity at or above the threshold, lowest index on ties. AP is the
//! mean of the precision envelope sampled at 101 recall points.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{box_iou, mask_iou, BinaryMask, Instance, Keypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    BoxIou,
    MaskIou,
    Oks,
}

impl Similarity {
    pub fn name(self) -> &'static str {
        match self {
            Self::BoxIou => "box",
            Self::MaskIou => "mask",
            Self::Oks => "oks",
        }
    }
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSpec {
    pub similarity: Similarity,
    pub thresholds: Vec<f64>,
    pub per_category: bool,
    pub max_dets: usize,
}

impl MatchSpec {
    pub fn new(similarity: Similarity) -> Self {
        Self {
            similarity,
            thresholds: coco_thresholds(),
            per_category: true,
            max_dets: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::invalid("thresholds", "need at least one"));
        }
        let in_range = self.thresholds.iter().all(|&t| t > 0.0 && t <= 1.0);
        let increasing = self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if !in_range || !increasing {
            return Err(Error::invalid(
                "thresholds",
                format!("{:?} must be strictly increasing within (0, 1]", self.thresholds),
            ));
        }
        if self.max_dets == 0 {
            return Err(Error::invalid("max_dets", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-keypoint falloff constants and the minimum object scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    pub kappas: Vec<f64>,
    pub area_floor: f64,
}

const COCO_SIGMAS: [f64; 17] = [
    0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89,
];

impl OksParams {
    /// The 17 COCO person keypoints (kappa = 2 sigma).
    pub fn coco() -> Self {
        Self {
            kappas: COCO_SIGMAS.iter().map(|s| 2.0 * s / 10.0).collect(),
            area_floor: 1.0,
        }
    }

    pub fn uniform(n: usize, kappa: f64) -> Self {
        Self {
            kappas: vec![kappa; n],
            area_floor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappas.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::invalid("kappas", "must be positive and finite"));
        }
        if !(self.area_floor > 0.0) {
            return Err(Error::invalid("area_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Mean over labeled ground-truth keypoints of
/// `exp(-d^2 / (2 s^2 kappa^2))`, `s^2 = max(gt_area, area_floor)`.
/// Unlabeled predictions count as infinitely far.
pub fn oks(pred: &[Keypoint], gt: &[Keypoint], gt_area: f64, params: &OksParams) -> Result<f64> {
    params.validate()?;
    if pred.len() != gt.len() || gt.len() != params.kappas.len() {
        return Err(Error::invalid(
            "keypoints",
            format!("{} predicted, {} ground truth, {} kappas", pred.len(), gt.len(), params.kappas.len()),
        ));
    }
    let s2 = gt_area.max(params.area_floor);
    let mut total = 0.0;
    let mut labeled = 0usize;
    for ((p, g), k) in pred.iter().zip(gt).zip(&params.kappas) {
        if !g.visibility.is_labeled() {
            continue;
        }
        labeled += 1;
        if p.visibility.is_labeled() {
            let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
            total += (-d2 / (2.0 * s2 * k * k)).exp();
        }
    }
    if labeled == 0 {
        return Err(Error::invalid("keypoints", "ground truth has no labeled keypoints"));
    }
    Ok(total / labeled as f64)
}

/// Greedy matching for one image. `sims[i][j]` is the similarity of the
/// `i`-th prediction (already in score order) to ground truth `j`.
pub fn greedy_match(sims: &[Vec<f64>], n_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gt];
    sims.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &s) in row.iter().enumerate() {
                if taken[j] || s < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

/// 101-point interpolated AP of score-ordered hit flags against `n_gt`.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Ground truth and predictions of one image.
#[derive(Debug, Clone, Copy)]
pub struct ImagePair<'a> {
    pub gt: &'a [Instance],
    pub pred: &'a [Instance],
}

struct Scorer<'a> {
    similarity: Similarity,
    oks: Option<&'a OksParams>,
}

impl Scorer<'_> {
    fn sim(&self, pred: &Instance, gt: &Instance) -> Result<f64> {
        match self.similarity {
            Similarity::BoxIou => Ok(box_iou(&pred.bbox, &gt.bbox)),
            Similarity::MaskIou => {
                let (Some(p), Some(g)) = (&pred.mask, &gt.mask) else {
                    return Err(Error::invalid("instance", "mask IoU needs masks on both sides"));
                };
                mask_iou(p, g)
            }
            Similarity::Oks => {
                let params = self.oks.ok_or_else(|| Error::invalid("oks", "missing OKS parameters"))?;
                let (Some(p), Some(g)) = (&pred.keypoints, &gt.keypoints) else {
                    return Err(Error::invalid("instance", "OKS needs keypoints on both sides"));
                };
                oks(p, g, gt.bbox.area(), params)
            }
        }
    }
}

/// Similarity matrices per (image, category key), predictions score-sorted.
struct Prepared {
    /// `category -> [(scores, sims, n_gt)]` per image.
    groups: BTreeMap<Option<u64>, Vec<(Vec<f64>, Vec<Vec<f64>>, usize)>>,
}

fn prepare(images: &[ImagePair], spec: &MatchSpec, oks: Option<&OksParams>) -> Result<Prepared> {
    spec.validate()?;
    let scorer = Scorer {
        similarity: spec.similarity,
        oks,
    };
    let key = |inst: &Instance| spec.per_category.then_some(inst.category);
    let mut cats: BTreeSet<Option<u64>> = BTreeSet::new();
    for im in images {
        for inst in im.gt.iter().chain(im.pred) {
            inst.validate()?;
            cats.insert(key(inst));
        }
    }
    let mut groups = BTreeMap::new();
    for &cat in &cats {
        let mut per_image = Vec::with_capacity(images.len());
        for im in images {
            let gts: Vec<&Instance> = im.gt.iter().filter(|g| key(g) == cat).collect();
            let mut preds: Vec<&Instance> = im.pred.iter().filter(|p| key(p) == cat).collect();
            preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            preds.truncate(spec.max_dets);
            let sims = preds
                .iter()
                .map(|p| gts.iter().map(|g| scorer.sim(p, g)).collect::<Result<Vec<f64>>>())
                .collect::<Result<Vec<_>>>()?;
            per_image.push((preds.iter().map(|p| p.score).collect(), sims, gts.len()));
        }
        groups.insert(cat, per_image);
    }
    Ok(Prepared { groups })
}

struct Tally {
    ap: Option<f64>,
    tp: usize,
    fp: usize,
    n_gt: usize,
}

fn tally(per_image: &[(Vec<f64>, Vec<Vec<f64>>, usize)], t: f64) -> Tally {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for (scores, sims, ng) in per_image {
        n_gt += ng;
        for (s, m) in scores.iter().zip(greedy_match(sims, *ng, t)) {
            scored.push((*s, m.is_some()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let hits: Vec<bool> = scored.iter().map(|x| x.1).collect();
    let tp = hits.iter().filter(|&&h| h).count();
    Tally {
        ap: (n_gt > 0).then(|| interpolated_ap(&hits, n_gt)),
        tp,
        fp: hits.len() - tp,
        n_gt,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// AP at one threshold, averaged over categories that have ground truth.
/// Zero when no category has ground truth.
pub fn average_precision(images: &[ImagePair], spec: &MatchSpec, oks: Option<&OksParams>, threshold: f64) -> Result<f64> {
    let prepared = prepare(images, spec, oks)?;
    Ok(mean(prepared.groups.values().filter_map(|g| tally(g, threshold).ap)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    /// `None` when categories are pooled.
    pub category: Option<u64>,
    pub n_gt: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Similarity,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_category: Vec<CategoryReport>,
    /// Matches at IoU/OKS 0.5.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "metric={}\nap={:.6}\nap50={:.6}\nap75={:.6}\ntp={}\nfp={}\nfn={}\n",
            self.metric.name(),
            self.ap,
            self.ap50,
            self.ap75,
            self.tp,
            self.fp,
            self.fn_
        );
        for c in &self.per_category {
            let name = c.category.map_or("all".to_string(), |c| c.to_string());
            s += &format!(
                "category.{name}.ap={:.6}\ncategory.{name}.ap50={:.6}\ncategory.{name}.ap75={:.6}\ncategory.{name}.n_gt={}\n",
                c.ap, c.ap50, c.ap75, c.n_gt
            );
        }
        s
    }
}

/// Full report: AP averaged over `spec.thresholds`, plus AP50 and AP75.
pub fn evaluate(images: &[ImagePair], spec: &MatchSpec, oks: Option<&OksParams>) -> Result<EvalReport> {
    let prepared = prepare(images, spec, oks)?;
    let mut per_category = Vec::new();
    let (mut tp, mut fp, mut n_gt) = (0, 0, 0);
    let mut ap_by_t = vec![Vec::new(); spec.thresholds.len()];
    for (&cat, group) in &prepared.groups {
        let at50 = tally(group, 0.5);
        tp += at50.tp;
        fp += at50.fp;
        n_gt += at50.n_gt;
        let Some(ap50) = at50.ap else { continue };
        let ap75 = tally(group, 0.75).ap.unwrap_or(0.0);
        let mut aps = Vec::with_capacity(spec.thresholds.len());
        for (i, &t) in spec.thresholds.iter().enumerate() {
            let ap = tally(group, t).ap.unwrap_or(0.0);
            ap_by_t[i].push(ap);
            aps.push(ap);
        }
        per_category.push(CategoryReport {
            category: cat,
            n_gt: at50.n_gt,
            ap: mean(aps.into_iter()),
            ap50,
            ap75,
        });
    }
    Ok(EvalReport {
        metric: spec.similarity,
        ap: mean(ap_by_t.iter().map(|v| mean(v.iter().copied()))),
        ap50: mean(per_category.iter().map(|c| c.ap50)),
        ap75: mean(per_category.iter().map(|c| c.ap75)),
        per_category,
        tp,
        fp,
        fn_: n_gt - tp,
    })
}

pub fn detection_map(images: &[ImagePair]) -> Result<EvalReport> {
    evaluate(images, &MatchSpec::new(Similarity::BoxIou), None)
}

pub fn segmentation_map(images: &[ImagePair]) -> Result<EvalReport> {
    evaluate(images, &MatchSpec::new(Similarity::MaskIou), None)
}

pub fn keypoint_map(images: &[ImagePair], params: &OksParams) -> Result<EvalReport> {
    evaluate(images, &MatchSpec::new(Similarity::Oks), Some(params))
}

/// `sum(intersection) / sum(union)` over paired masks; 1 when every union
/// is empty.
pub fn cumulative_iou(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "masks",
            format!("{} predictions for {} ground truths", pred.len(), gt.len()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (i, u) = p.intersection_union(g)?;
        inter += i;
        union += u;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BBox;

    fn inst(cat: u64, x0: f64, score: f64) -> Instance {
        Instance::new(cat, BBox::new(x0, 0.0, x0 + 10.0, 10.0).unwrap()).with_score(score)
    }

    #[test]
    fn oks_examples() {
        let p = OksParams::uniform(1, 0.1);
        let g = [Keypoint::visible(10.0, 10.0)];
        assert_eq!(oks(&g, &g, 100.0, &p).unwrap(), 1.0);
        // d^2 = 2 s^2 k^2 with s^2 = 100, k = 0.1 -> d^2 = 2.
        let q = [Keypoint::visible(11.0, 11.0)];
        assert!((oks(&q, &g, 100.0, &p).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        // d = 10 s k
        let far = [Keypoint::visible(10.0 + 10.0 * 10.0 * 0.1, 10.0)];
        assert!(oks(&far, &g, 100.0, &p).unwrap() < 1e-21);
        assert!(oks(&g, &[Keypoint::absent()], 100.0, &p).is_err());
    }

    #[test]
    fn coco_kappas() {
        let p = OksParams::coco();
        assert_eq!(p.kappas.len(), 17);
        assert!((p.kappas[0] - 0.052).abs() < 1e-12);
        assert!((p.kappas[11] - 0.214).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        let gt = [inst(0, 0.0, 1.0)];
        let spec = MatchSpec::new(Similarity::BoxIou);
        let exact = [inst(0, 0.0, 0.7)];
        let one = [ImagePair { gt: &gt, pred: &exact }];
        assert_eq!(average_precision(&one, &spec, None, 0.5).unwrap(), 1.0);

        let preds = [inst(0, 50.0, 0.9), inst(0, 0.0, 0.8)];
        let two = [ImagePair { gt: &gt, pred: &preds }];
        assert!((average_precision(&two, &spec, None, 0.5).unwrap() - 0.5).abs() < 1e-12);

        let none = [ImagePair { gt: &gt, pred: &[] }];
        assert_eq!(average_precision(&none, &spec, None, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn categories_without_gt_are_excluded() {
        let gt = [inst(0, 0.0, 1.0)];
        let preds = [inst(0, 0.0, 0.9), inst(5, 30.0, 0.95)];
        let r = detection_map(&[ImagePair { gt: &gt, pred: &preds }]).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.per_category.len(), 1);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
    }

    #[test]
    fn greedy_prefers_highest_similarity_then_lowest_index() {
        let sims = vec![vec![0.6, 0.9, 0.9], vec![0.95, 0.2, 0.7]];
        assert_eq!(greedy_match(&sims, 3, 0.5), vec![Some(1), Some(0)]);
        let sims = vec![vec![0.4, 0.3]];
        assert_eq!(greedy_match(&sims, 2, 0.5), vec![None]);
    }

    #[test]
    fn ciou_examples() {
        let mk = |n: usize, set: usize| {
            let mut bits = vec![false; n];
            bits[..set].iter_mut().for_each(|b| *b = true);
            BinaryMask::new(1, n, bits).unwrap()
        };
        let a = mk(20, 10);
        assert_eq!(cumulative_iou(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 1.0);
        // Pair 1: I = 10, U = 20. Pair 2: I = 0, U = 10.
        let p1 = mk(20, 20);
        let p2 = BinaryMask::empty(1, 20);
        let g2 = mk(20, 10);
        let c = cumulative_iou(&[p1, p2], &[a.clone(), g2]).unwrap();
        assert!((c - 10.0 / 30.0).abs() < 1e-12);
        assert_eq!(cumulative_iou(&[BinaryMask::empty(1, 20)], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn report_text_lines() {
        let gt = [inst(2, 0.0, 1.0)];
        let r = detection_map(&[ImagePair { gt: &gt, pred: &gt }]).unwrap();
        let text = r.to_text();
        assert!(text.contains("ap=1.000000\n"));
        assert!(text.contains("category.2.ap50=1.000000\n"));
    }
}
