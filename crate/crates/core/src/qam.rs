//! Quality-aware pseudo-mask construction.
//!
//! For one ground-truth box the detector proposes candidate boxes, each with a
//! box score `s` (IOU-aware confidence), a plain classification score and a
//! probability mask. The pipeline is:
//!
//! 1. pick `K` from the object area ([`adaptive_k`]),
//! 2. keep the `K` candidates whose boxes best match the GT box ([`box_quality_ranking`]),
//! 3. fuse their masks with normalized `sqrt(s * u)` weights, ignoring
//!    candidates with `s <= tau_m` ([`qmf_fuse`]),
//! 4. score the fused mask as `sqrt(mean gated s * mean gated pixel inside the box)`
//!    ([`mask_quality_score`]).
//!
//! [`bpma_select`] is the NMS-by-classification-score baseline the ranking replaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_to_mask, iou, nms, BBox, GtInstance};
use crate::mask::{dice_loss, ProbMask};

/// IOU threshold used by the NMS step of [`bpma_select`].
pub const BPMA_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QamConfig {
    /// Box-score gate for fusion and pixel gate for quality scoring.
    pub tau_m: f64,
    pub k_min: usize,
    pub k_max: usize,
    /// Area (px^2) at or below which `k_min` is used.
    pub area_small: f64,
    /// Area (px^2) at or above which `k_max` is used.
    pub area_large: f64,
    pub adaptive_k: bool,
    /// `K` used when `adaptive_k` is off.
    pub k_fixed: usize,
}

impl Default for QamConfig {
    fn default() -> Self {
        Self {
            tau_m: 0.5,
            k_min: 2,
            k_max: 10,
            area_small: 32.0 * 32.0,
            area_large: 96.0 * 96.0,
            adaptive_k: true,
            k_fixed: 10,
        }
    }
}

impl QamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_m) {
            return Err(Error::InvalidParameter(format!("tau_m {} not in [0, 1]", self.tau_m)));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= k_min <= k_max, got {} and {}",
                self.k_min, self.k_max
            )));
        }
        if !(self.area_small > 0.0 && self.area_small < self.area_large) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < area_small < area_large, got {} and {}",
                self.area_small, self.area_large
            )));
        }
        if self.k_fixed < 1 {
            return Err(Error::InvalidParameter("k_fixed must be at least 1".into()));
        }
        Ok(())
    }

    /// `K` for an object of the given box area.
    pub fn k_for_area(&self, area: f64) -> usize {
        if self.adaptive_k {
            adaptive_k(area, self)
        } else {
            self.k_fixed
        }
    }
}

/// One detector proposal for a GT instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    /// IOU-aware box score `s`.
    pub box_score: f64,
    /// Plain classification score; only the baseline selector reads it.
    pub cls_score: f64,
    pub mask: ProbMask,
}

impl Candidate {
    pub fn new(bbox: BBox, box_score: f64, cls_score: f64, mask: ProbMask) -> Result<Self> {
        for (name, v) in [("box_score", box_score), ("cls_score", cls_score)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} {v} not in [0, 1]")));
            }
        }
        Ok(Self {
            bbox,
            box_score,
            cls_score,
            mask,
        })
    }

    /// Unnormalized fusion weight `sqrt(s * u)`.
    fn quality(&self, u: f64) -> f64 {
        (self.box_score * u).sqrt()
    }
}

/// Candidates proposed for one GT instance, with their box IOUs against the GT box.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    gt: GtInstance,
    candidates: Vec<Candidate>,
    box_ious: Vec<f64>,
    origin: Vec<usize>,
}

impl CandidateSet {
    /// All candidate masks must share one frame size.
    pub fn new(gt: GtInstance, candidates: Vec<Candidate>) -> Result<Self> {
        if let Some(first) = candidates.first() {
            for c in &candidates[1..] {
                first.mask.ensure_same_dims(&c.mask)?;
            }
        }
        let box_ious = candidates.iter().map(|c| iou(&c.bbox, &gt.bbox)).collect();
        let origin = (0..candidates.len()).collect();
        Ok(Self {
            gt,
            candidates,
            box_ious,
            origin,
        })
    }

    pub fn gt(&self) -> &GtInstance {
        &self.gt
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    /// `u` for each candidate, aligned with [`Self::candidates`].
    pub fn box_ious(&self) -> &[f64] {
        &self.box_ious
    }

    /// Index of each candidate in the set it was ranked from.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn frame(&self) -> Option<(usize, usize)> {
        self.candidates.first().map(|c| c.mask.dims())
    }

    /// Number of candidates with `s > tau_m`.
    pub fn valid_count(&self, tau_m: f64) -> usize {
        self.candidates.iter().filter(|c| c.box_score > tau_m).count()
    }

    fn select(&self, picks: &[usize]) -> CandidateSet {
        CandidateSet {
            gt: self.gt.clone(),
            candidates: picks.iter().map(|&i| self.candidates[i].clone()).collect(),
            box_ious: picks.iter().map(|&i| self.box_ious[i]).collect(),
            origin: picks.iter().map(|&i| self.origin[i]).collect(),
        }
    }
}

/// Fused pseudo mask for one GT instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPseudoMask {
    pub mask: ProbMask,
    /// Mask-quality score `w` in `[0, 1]`.
    pub quality: f64,
    /// Normalized fusion weight per ranked candidate.
    pub weights: Vec<f64>,
    /// Original candidate index for each entry of `weights`.
    pub contributors: Vec<usize>,
    /// `K` after adaptation.
    pub k_used: usize,
    /// Candidates that passed the box-score gate.
    pub valid_count: usize,
    /// Set when no candidate passed the gate and the best single candidate was used.
    pub fallback: bool,
}

impl FusedPseudoMask {
    /// A pseudo mask taken verbatim from a single source (e.g. a pasted object).
    pub fn single(mask: ProbMask, quality: f64) -> Self {
        Self {
            mask,
            quality,
            weights: vec![1.0],
            contributors: vec![0],
            k_used: 1,
            valid_count: 1,
            fallback: false,
        }
    }
}

/// Object-size dependent `K`: `k_min` up to `area_small`, `k_max` from
/// `area_large`, linear in `sqrt(area)` in between, rounded half up.
pub fn adaptive_k(area: f64, cfg: &QamConfig) -> usize {
    if area <= cfg.area_small {
        return cfg.k_min;
    }
    if area >= cfg.area_large {
        return cfg.k_max;
    }
    let span = (cfg.k_max - cfg.k_min) as f64;
    let t = (area.sqrt() - cfg.area_small.sqrt()) / (cfg.area_large.sqrt() - cfg.area_small.sqrt());
    let k = (cfg.k_min as f64 + span * t + 0.5).floor() as usize;
    k.clamp(cfg.k_min, cfg.k_max)
}

/// Keeps the `k` candidates with the highest box IOU.
///
/// Ties on IOU go to the higher box score, then to the lower index. `k` below
/// one is treated as one so the best-matching candidate always survives.
pub fn box_quality_ranking(set: &CandidateSet, k: usize) -> CandidateSet {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.box_ious[b]
            .total_cmp(&set.box_ious[a])
            .then(set.candidates[b].box_score.total_cmp(&set.candidates[a].box_score))
            .then(set.origin[a].cmp(&set.origin[b]))
    });
    order.truncate(k.max(1));
    set.select(&order)
}

/// Normalized fusion weights; zero for candidates at or below the gate.
pub fn fusion_weights(set: &CandidateSet, tau_m: f64) -> Result<Vec<f64>> {
    let raw: Vec<f64> = set
        .candidates
        .iter()
        .zip(&set.box_ious)
        .map(|(c, &u)| if c.box_score > tau_m { c.quality(u) } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if set.valid_count(tau_m) == 0 || total <= 0.0 {
        return Err(Error::NoValidCandidates);
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

fn weighted_sum(set: &CandidateSet, weights: &[f64]) -> Result<ProbMask> {
    let (h, w) = set.frame().ok_or(Error::NoValidCandidates)?;
    let mut acc = vec![0.0f64; h * w];
    for (c, &wt) in set.candidates.iter().zip(weights) {
        if wt == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(c.mask.values()) {
            *a += wt * v as f64;
        }
    }
    ProbMask::new(h, w, acc.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect())
}

/// Quality-aware fusion of the ranked candidates. `quality` is left at zero;
/// fill it with [`mask_quality_score`].
pub fn qmf_fuse(topk: &CandidateSet, cfg: &QamConfig) -> Result<FusedPseudoMask> {
    let weights = fusion_weights(topk, cfg.tau_m)?;
    let mask = weighted_sum(topk, &weights)?;
    Ok(FusedPseudoMask {
        mask,
        quality: 0.0,
        weights,
        contributors: topk.origin.clone(),
        k_used: topk.len(),
        valid_count: topk.valid_count(cfg.tau_m),
        fallback: false,
    })
}

/// Intermediate quantities of the mask-quality score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityStats {
    /// Mean box score over gated candidates.
    pub s_hat: f64,
    /// Mean fused probability over gated pixels inside the GT box.
    pub m_hat: f64,
    /// Gated candidate count.
    pub k_hat: usize,
    /// Gated pixel count inside the GT box.
    pub m_count: usize,
}

impl QualityStats {
    pub fn score(&self) -> f64 {
        if self.k_hat == 0 || self.m_count == 0 {
            return 0.0;
        }
        geometric_quality(self.s_hat, self.m_hat)
    }
}

/// `sqrt(s_hat * m_hat)` clamped to `[0, 1]`.
pub fn geometric_quality(s_hat: f64, m_hat: f64) -> f64 {
    (s_hat * m_hat).sqrt().clamp(0.0, 1.0)
}

/// Mean of `values` above `tau` inside the box, with the number of such pixels.
fn gated_mean_in_box(mask: &ProbMask, gt_box: &BBox, tau: f64) -> Result<(f64, usize)> {
    let inside = box_to_mask(gt_box, mask.height(), mask.width())?.mask;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&v, &b) in mask.values().iter().zip(inside.values()) {
        if b && (v as f64) > tau {
            sum += v as f64;
            n += 1;
        }
    }
    Ok(if n == 0 { (0.0, 0) } else { (sum / n as f64, n) })
}

pub fn quality_stats(topk: &CandidateSet, fused: &ProbMask, gt_box: &BBox, cfg: &QamConfig) -> Result<QualityStats> {
    let gated: Vec<f64> = topk
        .candidates
        .iter()
        .map(|c| c.box_score)
        .filter(|&s| s > cfg.tau_m)
        .collect();
    let k_hat = gated.len();
    let s_hat = if k_hat == 0 {
        0.0
    } else {
        gated.iter().sum::<f64>() / k_hat as f64
    };
    let (m_hat, m_count) = gated_mean_in_box(fused, gt_box, cfg.tau_m)?;
    Ok(QualityStats {
        s_hat,
        m_hat,
        k_hat,
        m_count,
    })
}

/// Mask-quality score `w`. Zero when no candidate or no pixel inside the GT
/// box passes the gate.
pub fn mask_quality_score(topk: &CandidateSet, fused: &ProbMask, gt_box: &BBox, cfg: &QamConfig) -> Result<f64> {
    Ok(quality_stats(topk, fused, gt_box, cfg)?.score())
}

/// `(1/N) * sum(w_i * loss_i)` over `(w, loss)` terms.
pub fn weighted_mean_loss(terms: &[(f64, f64)]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::EmptyInput("quality-weighted loss needs at least one pair"));
    }
    let total: f64 = terms.iter().map(|(w, l)| w * l).sum();
    Ok(total / terms.len() as f64)
}

/// Quality-weighted dice loss between student masks and fused pseudo masks.
pub fn quality_weighted_loss(pairs: &[(&ProbMask, &FusedPseudoMask)]) -> Result<f64> {
    let terms = pairs
        .iter()
        .map(|(student, pseudo)| Ok((pseudo.quality, dice_loss(student, &pseudo.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    weighted_mean_loss(&terms)
}

/// Baseline selector: NMS on classification scores, keep the top survivor,
/// accept it only if its box IOU with the GT exceeds `iou_threshold`.
/// Returns the candidate index.
pub fn bpma_select(set: &CandidateSet, iou_threshold: f64) -> Option<usize> {
    let scored: Vec<(BBox, f64)> = set.candidates.iter().map(|c| (c.bbox, c.cls_score)).collect();
    let best = *nms(&scored, BPMA_NMS_IOU).first()?;
    (set.box_ious[best] > iou_threshold).then_some(best)
}

/// Full pipeline for one GT instance. `None` for an empty candidate set.
///
/// When no ranked candidate passes the box-score gate, the ranked candidate
/// with the largest `sqrt(s * u)` is used alone; its quality uses that
/// candidate's own box score in place of the (empty) gated mean.
pub fn process_instance(set: &CandidateSet, cfg: &QamConfig) -> Option<FusedPseudoMask> {
    if set.is_empty() {
        return None;
    }
    let k = cfg.k_for_area(set.gt.area());
    let topk = box_quality_ranking(set, k);
    let gt_box = set.gt.bbox;
    match qmf_fuse(&topk, cfg) {
        Ok(mut fused) => {
            fused.quality = mask_quality_score(&topk, &fused.mask, &gt_box, cfg).ok()?;
            Some(fused)
        }
        Err(_) => {
            let best = (0..topk.len())
                .max_by(|&a, &b| {
                    let qa = topk.candidates[a].quality(topk.box_ious[a]);
                    let qb = topk.candidates[b].quality(topk.box_ious[b]);
                    qa.total_cmp(&qb).then(b.cmp(&a))
                })
                .expect("non-empty ranking");
            let pick = &topk.candidates[best];
            let (m_hat, m_count) = gated_mean_in_box(&pick.mask, &gt_box, cfg.tau_m).ok()?;
            let quality = if m_count == 0 {
                0.0
            } else {
                geometric_quality(pick.box_score, m_hat)
            };
            let mut weights = vec![0.0; topk.len()];
            weights[best] = 1.0;
            Some(FusedPseudoMask {
                mask: pick.mask.clone(),
                quality,
                weights,
                contributors: topk.origin.clone(),
                k_used: topk.len(),
                valid_count: 0,
                fallback: true,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(b: BBox) -> GtInstance {
        GtInstance::new(1, 0, b)
    }

    /// Box with the given IOU against `(0,0,10,10)`: `(0,0,10,10u)`.
    fn box_with_iou(u: f64) -> BBox {
        bx(0.0, 0.0, 10.0, 10.0 * u)
    }

    fn cand(u: f64, s: f64, cls: f64, fill: f32) -> Candidate {
        Candidate::new(box_with_iou(u), s, cls, ProbMask::filled(10, 10, fill).unwrap()).unwrap()
    }

    fn set(cands: Vec<Candidate>) -> CandidateSet {
        CandidateSet::new(gt(bx(0.0, 0.0, 10.0, 10.0)), cands).unwrap()
    }

    #[test]
    fn adaptive_k_breakpoints() {
        let cfg = QamConfig::default();
        assert_eq!(adaptive_k(1024.0, &cfg), 2);
        assert_eq!(adaptive_k(9216.0, &cfg), 10);
        // 2 + 8 * (64 - 32) / (96 - 32)
        assert_eq!(adaptive_k(4096.0, &cfg), 6);
        assert_eq!(adaptive_k(1.0, &cfg), 2);
        assert_eq!(adaptive_k(1e6, &cfg), 10);
    }

    #[test]
    fn adaptive_k_rounds_half_up() {
        let cfg = QamConfig::default();
        // sqrt(a) = 36 -> 2 + 8 * 4/64 = 2.5 -> 3
        assert_eq!(adaptive_k(36.0 * 36.0, &cfg), 3);
        // sqrt(a) = 35 -> 2.375 -> 2
        assert_eq!(adaptive_k(35.0 * 35.0, &cfg), 2);
    }

    #[test]
    fn config_validation() {
        assert!(QamConfig::default().validate().is_ok());
        let bad = QamConfig {
            k_min: 5,
            k_max: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = QamConfig {
            tau_m: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = QamConfig {
            area_small: 10.0,
            area_large: 5.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn candidate_set_caches_ious() {
        let s = set(vec![cand(0.3, 0.5, 0.5, 0.5), cand(0.9, 0.5, 0.5, 0.5)]);
        for (c, &u) in s.candidates().iter().zip(s.box_ious()) {
            assert!((iou(&c.bbox, &s.gt().bbox) - u).abs() < 1e-9);
        }
        let mismatched = vec![
            cand(0.3, 0.5, 0.5, 0.5),
            Candidate::new(box_with_iou(0.5), 0.5, 0.5, ProbMask::zeros(4, 4).unwrap()).unwrap(),
        ];
        assert!(CandidateSet::new(gt(bx(0.0, 0.0, 10.0, 10.0)), mismatched).is_err());
    }

    #[test]
    fn ranking_examples() {
        let one = set(vec![cand(0.4, 0.6, 0.5, 0.5)]);
        assert_eq!(box_quality_ranking(&one, 3).origin(), &[0]);

        let three = set(vec![
            cand(0.3, 0.6, 0.5, 0.5),
            cand(0.9, 0.6, 0.5, 0.5),
            cand(0.6, 0.6, 0.5, 0.5),
        ]);
        assert_eq!(box_quality_ranking(&three, 2).origin(), &[1, 2]);

        let tied = set(vec![cand(0.8, 0.4, 0.5, 0.5), cand(0.8, 0.7, 0.5, 0.5)]);
        assert_eq!(box_quality_ranking(&tied, 1).origin(), &[1]);

        let empty = set(vec![]);
        assert!(box_quality_ranking(&empty, 4).is_empty());
        assert_eq!(box_quality_ranking(&three, 0).origin(), &[1]);
    }

    #[test]
    fn fusion_single_candidate() {
        let s = set(vec![cand(0.9, 0.8, 0.5, 0.7)]);
        let f = qmf_fuse(&s, &QamConfig::default()).unwrap();
        assert_eq!(f.weights, vec![1.0]);
        assert_eq!(f.mask, s.candidates()[0].mask);
        assert_eq!(f.valid_count, 1);
    }

    #[test]
    fn fusion_two_candidate_weights() {
        let s = set(vec![cand(0.9, 0.8, 0.5, 1.0), cand(0.5, 0.6, 0.5, 0.0)]);
        let f = qmf_fuse(&s, &QamConfig::default()).unwrap();
        // sqrt(0.72) / (sqrt(0.72) + sqrt(0.30)), evaluated at 30 digits with mpmath
        assert!((f.weights[0] - 0.607_719_043_940_738).abs() < 1e-9);
        assert!((f.weights[1] - 0.392_280_956_059_262).abs() < 1e-9);
        assert!((f.mask.get(0, 0) as f64 - f.weights[0]).abs() < 1e-7);
    }

    #[test]
    fn fusion_gate_excludes_low_scores() {
        let s = set(vec![cand(0.9, 0.8, 0.5, 1.0), cand(0.5, 0.4, 0.5, 0.0)]);
        let f = qmf_fuse(&s, &QamConfig::default()).unwrap();
        assert_eq!(f.weights, vec![1.0, 0.0]);
        assert_eq!(f.valid_count, 1);

        let none = set(vec![cand(0.9, 0.4, 0.5, 1.0), cand(0.5, 0.5, 0.5, 0.0)]);
        assert_eq!(qmf_fuse(&none, &QamConfig::default()), Err(Error::NoValidCandidates));
    }

    #[test]
    fn quality_maximal_case() {
        let s = set(vec![cand(1.0, 1.0, 1.0, 1.0)]);
        let w = mask_quality_score(&s, &s.candidates()[0].mask, &s.gt().bbox, &QamConfig::default()).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn quality_geometric_mean() {
        // 52 pixels at 0.75 and 48 at 0.875 average to exactly 0.81
        let mut i = 0;
        let fused = ProbMask::from_fn(10, 10, |_, _| {
            i += 1;
            if i <= 52 {
                0.75
            } else {
                0.875
            }
        })
        .unwrap();
        let s = set(vec![cand(1.0, 0.64, 0.5, 0.5), cand(0.5, 0.64, 0.5, 0.5)]);
        let stats = quality_stats(&s, &fused, &s.gt().bbox, &QamConfig::default()).unwrap();
        assert_eq!(stats.k_hat, 2);
        assert_eq!(stats.m_count, 100);
        assert!((stats.score() - 0.72).abs() < 1e-12);
        assert!((geometric_quality(0.64, 0.81) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn quality_zero_when_nothing_gated() {
        let s = set(vec![cand(1.0, 0.9, 0.5, 0.5)]);
        let low = ProbMask::filled(10, 10, 0.5).unwrap();
        assert_eq!(
            mask_quality_score(&s, &low, &s.gt().bbox, &QamConfig::default()).unwrap(),
            0.0
        );
        let gated_out = set(vec![cand(1.0, 0.3, 0.5, 0.9)]);
        let high = ProbMask::filled(10, 10, 0.9).unwrap();
        assert_eq!(
            mask_quality_score(&gated_out, &high, &s.gt().bbox, &QamConfig::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn quality_ignores_pixels_outside_box() {
        let s = CandidateSet::new(gt(bx(0.0, 0.0, 2.0, 2.0)), vec![cand(1.0, 1.0, 0.5, 0.5)]).unwrap();
        let fused = ProbMask::from_fn(10, 10, |y, x| if y < 2 && x < 2 { 1.0 } else { 0.6 }).unwrap();
        let stats = quality_stats(&s, &fused, &s.gt().bbox, &QamConfig::default()).unwrap();
        assert_eq!(stats.m_count, 4);
        assert_eq!(stats.m_hat, 1.0);
    }

    fn binary_prob(h: usize, w: usize, f: impl FnMut(usize, usize) -> bool) -> ProbMask {
        ProbMask::from(&BinaryMask::from_fn(h, w, f).unwrap())
    }

    #[test]
    fn loss_examples() {
        let target = binary_prob(4, 4, |y, _| y < 2);
        let perfect = FusedPseudoMask::single(target.clone(), 0.8);
        assert!(quality_weighted_loss(&[(&target, &perfect)]).unwrap().abs() < 1e-6);

        let pred = ProbMask::new(1, 2, vec![1.0, 0.0]).unwrap();
        let half = FusedPseudoMask::single(ProbMask::new(1, 2, vec![1.0, 1.0]).unwrap(), 0.5);
        assert!((quality_weighted_loss(&[(&pred, &half)]).unwrap() - 1.0 / 6.0).abs() < 1e-6);

        // dice 0.2: 4 predicted pixels inside 6 target pixels -> 1 - 8/10
        let p1 = binary_prob(1, 20, |_, x| x < 4);
        let t1 = FusedPseudoMask::single(binary_prob(1, 20, |_, x| x < 6), 1.0);
        // dice 0.9: 1 predicted pixel inside 19 target pixels -> 1 - 2/20
        let p2 = binary_prob(1, 20, |_, x| x < 1);
        let t2 = FusedPseudoMask::single(binary_prob(1, 20, |_, x| x < 19), 0.0);
        let loss = quality_weighted_loss(&[(&p1, &t1), (&p2, &t2)]).unwrap();
        assert!((loss - 0.1).abs() < 1e-6);
        assert_eq!(weighted_mean_loss(&[(1.0, 0.2), (0.0, 0.9)]).unwrap(), 0.1);

        assert!(matches!(quality_weighted_loss(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn bpma_examples() {
        assert_eq!(bpma_select(&set(vec![cand(0.9, 0.5, 0.5, 0.5)]), 0.5), Some(0));
        assert_eq!(bpma_select(&set(vec![cand(0.3, 0.5, 0.5, 0.5)]), 0.5), None);
        assert_eq!(bpma_select(&set(vec![]), 0.5), None);
    }

    #[test]
    fn bpma_misses_fragment_that_ranking_keeps() {
        let gtb = bx(0.0, 0.0, 20.0, 10.0);
        let frame = || ProbMask::zeros(10, 20).unwrap();
        // A: fragment, high cls; B: nearly full extent, low cls; IOU(A, B) = 0.3
        let a = Candidate::new(bx(0.0, 0.0, 9.0, 10.0), 0.6, 0.9, frame()).unwrap();
        let b = Candidate::new(bx(3.0, 0.0, 20.0, 10.0), 0.7, 0.5, frame()).unwrap();
        let s = CandidateSet::new(gt(gtb), vec![a, b]).unwrap();
        assert!((s.box_ious()[0] - 0.45).abs() < 1e-12);
        assert!((s.box_ious()[1] - 0.85).abs() < 1e-12);
        assert_eq!(bpma_select(&s, 0.5), None);
        assert_eq!(box_quality_ranking(&s, 1).origin(), &[1]);
    }

    #[test]
    fn process_instance_perfect_candidate() {
        let gtb = bx(2.0, 2.0, 6.0, 6.0);
        let gt_mask = binary_prob(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let c = Candidate::new(gtb, 1.0, 1.0, gt_mask.clone()).unwrap();
        let s = CandidateSet::new(gt(gtb), vec![c]).unwrap();
        let f = process_instance(&s, &QamConfig::default()).unwrap();
        assert_eq!(f.mask, gt_mask);
        assert_eq!(f.weights, vec![1.0]);
        assert_eq!(f.quality, 1.0);
        assert!(!f.fallback);
    }

    #[test]
    fn process_instance_fallback() {
        let s = set(vec![cand(0.9, 0.3, 0.5, 0.9), cand(0.95, 0.2, 0.5, 0.8)]);
        let f = process_instance(&s, &QamConfig::default()).unwrap();
        assert!(f.fallback);
        assert_eq!(f.valid_count, 0);
        // sqrt(0.3 * 0.9) > sqrt(0.2 * 0.95); ranking puts u = 0.95 first
        assert_eq!(f.contributors, vec![1, 0]);
        assert_eq!(f.weights, vec![0.0, 1.0]);
        assert_eq!(f.mask, s.candidates()[0].mask);
        let expected = (0.3f64 * 0.9f32 as f64).sqrt();
        assert!((f.quality - expected).abs() < 1e-12);

        assert!(process_instance(&set(vec![]), &QamConfig::default()).is_none());
    }

    fn arb_set() -> impl Strategy<Value = CandidateSet> {
        prop::collection::vec(
            (0.05..1.0f64, 0.0..=1.0f64, prop::collection::vec(0.0f32..=1.0, 16)),
            1..8,
        )
        .prop_map(|cs| {
            let cands = cs
                .into_iter()
                .map(|(u, s, px)| Candidate::new(box_with_iou(u), s, 0.5, ProbMask::new(4, 4, px).unwrap()).unwrap())
                .collect();
            set(cands)
        })
    }

    proptest! {
        #[test]
        fn weights_on_simplex_and_fusion_convex(s in arb_set(), k in 1usize..8) {
            let cfg = QamConfig::default();
            let top = box_quality_ranking(&s, k);
            match qmf_fuse(&top, &cfg) {
                Ok(f) => {
                    prop_assert!(f.weights.iter().all(|&w| w >= 0.0));
                    prop_assert!((f.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for p in 0..16 {
                        let valid = top.candidates().iter().filter(|c| c.box_score > cfg.tau_m);
                        let (lo, hi) = valid.fold((f32::MAX, f32::MIN), |(lo, hi), c| {
                            (lo.min(c.mask.values()[p]), hi.max(c.mask.values()[p]))
                        });
                        let v = f.mask.values()[p];
                        prop_assert!(lo <= v && v <= hi);
                    }
                }
                Err(e) => prop_assert_eq!(top.valid_count(cfg.tau_m), 0, "{:?}", e),
            }
        }

        #[test]
        fn ranking_retains_argmax_iou(s in arb_set(), k in 1usize..8) {
            let top = box_quality_ranking(&s, k);
            let best = s.box_ious().iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(top.box_ious()[0], best);
            prop_assert!(top.len() <= k);
        }

        #[test]
        fn fusion_permutation_equivariant(s in arb_set(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut ious = s.box_ious().to_vec();
            ious.sort_by(f64::total_cmp);
            ious.dedup();
            prop_assume!(ious.len() == s.len());
            let mut perm: Vec<usize> = (0..s.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = set(perm.iter().map(|&i| s.candidates()[i].clone()).collect());
            let cfg = QamConfig { adaptive_k: false, k_fixed: 8, ..Default::default() };
            let a = process_instance(&s, &cfg).unwrap();
            let b = process_instance(&shuffled, &cfg).unwrap();
            prop_assert_eq!(a.mask.values(), b.mask.values());
            prop_assert_eq!(&a.weights, &b.weights);
            let mapped: Vec<usize> = b.contributors.iter().map(|&i| perm[i]).collect();
            prop_assert_eq!(a.contributors, mapped);
        }

        #[test]
        fn quality_in_unit_interval(s in arb_set()) {
            let f = process_instance(&s, &QamConfig::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&f.quality));
        }

        #[test]
        fn loss_linear_in_quality(qs in prop::collection::vec(0.0..=1.0f64, 1..6), c in 0.01..10.0f64) {
            let student = ProbMask::from_fn(3, 3, |y, x| ((y + x) % 3) as f32 / 2.0).unwrap();
            let base: Vec<FusedPseudoMask> = qs.iter().enumerate().map(|(i, &q)| {
                FusedPseudoMask::single(ProbMask::from_fn(3, 3, |y, x| ((y * 3 + x + i) % 4) as f32 / 3.0).unwrap(), q)
            }).collect();
            let scaled: Vec<FusedPseudoMask> = base.iter().cloned().map(|mut f| { f.quality *= c; f }).collect();
            let l1 = quality_weighted_loss(&base.iter().map(|f| (&student, f)).collect::<Vec<_>>()).unwrap();
            let l2 = quality_weighted_loss(&scaled.iter().map(|f| (&student, f)).collect::<Vec<_>>()).unwrap();
            prop_assert!((l2 - c * l1).abs() <= 1e-12 * (1.0 + l2.abs()));
        }

        #[test]
        fn adaptive_k_monotone(a in 1.0..20000.0f64, b in 1.0..20000.0f64) {
            let cfg = QamConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(adaptive_k(lo, &cfg) <= adaptive_k(hi, &cfg));
        }
    }
}
