//! Seeded synthetic scenes and noisy detector candidates.
//!
//! Candidate masks are the ground truth plus i.i.d. zero-mean noise drawn
//! uniformly from `[-sqrt(3) sigma, sqrt(3) sigma]`, clamped to `[0, 1]`.
//! Clamping biases the noise at saturated pixels; measurements that need exact
//! zero-mean noise should use mid-range truths (e.g. 0.5).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_to_mask, iou, BBox, GtInstance};
use crate::image::Image;
use crate::mask::{BinaryMask, ProbMask};
use crate::pc::Scene;
use crate::qam::{Candidate, CandidateSet};

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const NUM_CLASSES: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Capsule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapPolicy {
    Disjoint,
    AllowOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub instance_count: usize,
    pub shape: ShapeFamily,
    /// Object width range in pixels (inclusive).
    pub width_range: (f64, f64),
    /// Object height range in pixels (inclusive).
    pub height_range: (f64, f64),
    pub overlap: OverlapPolicy,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            instance_count: 3,
            shape: ShapeFamily::Ellipse,
            width_range: (10.0, 24.0),
            height_range: (10.0, 24.0),
            overlap: OverlapPolicy::Disjoint,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instance_count == 0 {
            return Err(Error::InvalidParameter("instance_count must be at least 1".into()));
        }
        for (name, (lo, hi), limit) in [
            ("width", self.width_range, self.width),
            ("height", self.height_range, self.height),
        ] {
            if !(lo >= 1.0 && lo <= hi && hi <= limit as f64) {
                return Err(Error::InvalidParameter(format!(
                    "{name} range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {limit}"
                )));
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Noise levels for candidate generation. All scales are standard deviations
/// of the uniform noise except `box_jitter`, which is the maximum corner
/// displacement as a fraction of the box side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpec {
    pub k: usize,
    pub sigma_mask: f64,
    pub box_jitter: f64,
    /// Relative noise on the box score: `s = u * (1 + e)`.
    pub score_noise: f64,
    pub seed: u64,
}

impl Default for CandidateSpec {
    fn default() -> Self {
        Self {
            k: 10,
            sigma_mask: 0.2,
            box_jitter: 0.1,
            score_noise: 0.1,
            seed: 0,
        }
    }
}

impl CandidateSpec {
    pub fn validate(&self) -> Result<()> {
        let scales = [self.sigma_mask, self.box_jitter, self.score_noise];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(
                "noise scales must be finite and nonnegative".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// A generated scene with the exact masks its boxes were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub scene: Scene,
    pub gt_masks: Vec<BinaryMask>,
}

/// Uniform draw from `[-sqrt(3) sigma, sqrt(3) sigma)`: zero mean, variance `sigma^2`.
pub fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let half = 3f64.sqrt() * sigma;
    (2.0 * rng.gen::<f64>() - 1.0) * half
}

/// Adds uniform noise of standard deviation `sigma` to every pixel, clamping to `[0, 1]`.
pub fn perturb_mask<R: Rng + ?Sized>(truth: &ProbMask, sigma: f64, rng: &mut R) -> ProbMask {
    let mut values = truth.values().iter();
    ProbMask::from_fn(truth.height(), truth.width(), |_, _| {
        let v = *values.next().expect("same size") as f64;
        (v + uniform_noise(rng, sigma)) as f32
    })
    .expect("truth has valid dimensions")
}

fn rasterize(shape: ShapeFamily, cx: f64, cy: f64, w: f64, h: f64, dims: (usize, usize)) -> Result<BinaryMask> {
    let (rows, cols) = dims;
    match shape {
        ShapeFamily::Rectangle => {
            let b = BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)?;
            Ok(box_to_mask(&b, rows, cols)?.mask)
        }
        ShapeFamily::Ellipse => {
            let (a, b) = (0.5 * w, 0.5 * h);
            BinaryMask::from_fn(rows, cols, |y, x| {
                let dx = (x as f64 + 0.5 - cx) / a;
                let dy = (y as f64 + 0.5 - cy) / b;
                dx * dx + dy * dy < 1.0
            })
        }
        ShapeFamily::Capsule => {
            // segment along the longer axis, radius half the shorter side
            let r = 0.5 * w.min(h);
            let (hx, hy) = (0.5 * w - r, 0.5 * h - r);
            BinaryMask::from_fn(rows, cols, |y, x| {
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let qx = px - px.clamp(-hx, hx);
                let qy = py - py.clamp(-hy, hy);
                qx * qx + qy * qy < r * r
            })
        }
    }
}

/// Tight box around the set pixels of `mask`.
pub fn tight_box(mask: &BinaryMask) -> Option<BBox> {
    let (r0, c0, r1, c1) = mask.bounds()?;
    BBox::new(c0 as f64, r0 as f64, c1 as f64, r1 as f64).ok()
}

fn draw_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a scene: a flat background with solid-colored shapes, boxes tight
/// around each rasterized shape. Identical specs give identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = (spec.height, spec.width);
    let background: Vec<f32> = (0..spec.channels).map(|_| rng.gen_range(0.05..0.35)).collect();
    let mut pixels = Vec::with_capacity(spec.height * spec.width * spec.channels);
    for _ in 0..spec.height * spec.width {
        pixels.extend_from_slice(&background);
    }
    let mut image = Image::new(spec.height, spec.width, spec.channels, pixels)?;

    let mut instances: Vec<GtInstance> = Vec::new();
    let mut gt_masks: Vec<BinaryMask> = Vec::new();
    for idx in 0..spec.instance_count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let w = draw_range(&mut rng, spec.width_range);
            let h = draw_range(&mut rng, spec.height_range);
            let cx = draw_range(&mut rng, (0.5 * w, spec.width as f64 - 0.5 * w));
            let cy = draw_range(&mut rng, (0.5 * h, spec.height as f64 - 0.5 * h));
            let mask = rasterize(spec.shape, cx, cy, w, h, dims)?;
            let Some(bbox) = tight_box(&mask) else { continue };
            let clashes = spec.overlap == OverlapPolicy::Disjoint
                && instances.iter().any(|o| o.bbox.intersection_area(&bbox) > 0.0);
            if !clashes {
                placed = Some((mask, bbox));
                break;
            }
        }
        let (mask, bbox) = placed.ok_or(Error::Placement {
            instance: idx,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let class_id = rng.gen_range(0..NUM_CLASSES);
        let color: Vec<f32> = (0..spec.channels).map(|_| rng.gen_range(0.5..1.0)).collect();
        for (y, x) in mask.set_pixels() {
            image.set_pixel(y, x, &color);
        }
        instances.push(GtInstance::new(idx as u64 + 1, class_id, bbox));
        gt_masks.push(mask);
    }

    Ok(SynthScene {
        scene: Scene::unlabeled(spec.seed, image, instances)?,
        gt_masks,
    })
}

fn jitter_box<R: Rng + ?Sized>(b: &BBox, jitter: f64, rng: &mut R) -> BBox {
    let (w, h) = (b.width(), b.height());
    for _ in 0..16 {
        let mut d = || (2.0 * rng.gen::<f64>() - 1.0) * jitter;
        let candidate = BBox::new(b.x1() + d() * w, b.y1() + d() * h, b.x2() + d() * w, b.y2() + d() * h);
        if let Ok(c) = candidate {
            return c;
        }
    }
    *b
}

/// Noisy candidates for one instance with a known true mask.
pub fn candidates_for<R: Rng + ?Sized>(
    gt: &GtInstance,
    truth: &ProbMask,
    spec: &CandidateSpec,
    rng: &mut R,
) -> Result<CandidateSet> {
    spec.validate()?;
    let mut cands = Vec::with_capacity(spec.k);
    for _ in 0..spec.k {
        let mask = perturb_mask(truth, spec.sigma_mask, rng);
        let bbox = jitter_box(&gt.bbox, spec.box_jitter, rng);
        let u = iou(&bbox, &gt.bbox);
        let s = (u * (1.0 + uniform_noise(rng, spec.score_noise))).clamp(0.0, 1.0);
        let cls = rng.gen::<f64>();
        cands.push(Candidate::new(bbox, s, cls, mask)?);
    }
    CandidateSet::new(gt.clone(), cands)
}

/// `spec.k` noisy candidates per instance of `synth`.
pub fn generate_candidates(synth: &SynthScene, spec: &CandidateSpec) -> Result<Vec<CandidateSet>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    synth
        .scene
        .instances
        .iter()
        .zip(&synth.gt_masks)
        .map(|(gt, m)| candidates_for(gt, &ProbMask::from(m), spec, &mut rng))
        .collect()
}

const FRAGMENTS_DIMS: (usize, usize) = (40, 64);

fn fragments_gt() -> (GtInstance, BinaryMask) {
    let bbox = BBox::new(8.0, 8.0, 48.0, 28.0).expect("fixture box");
    let mask = box_to_mask(&bbox, FRAGMENTS_DIMS.0, FRAGMENTS_DIMS.1)
        .expect("fixture frame")
        .mask;
    (GtInstance::new(1, 0, bbox), mask)
}

/// Single-object fixture with two confidently classified fragments and one
/// weakly classified candidate covering most of the object.
///
/// | idx | box              | u    | cls  | s    |
/// |-----|------------------|------|------|------|
/// | 0   | (8, 8, 26, 28)   | 0.45 | 0.90 | 0.45 |
/// | 1   | (30, 8, 48, 28)  | 0.45 | 0.85 | 0.40 |
/// | 2   | (8, 8, 48, 25)   | 0.85 | 0.50 | 0.85 |
///
/// Each candidate mask is 0.9 inside its own box and 0 elsewhere.
pub fn fragments_scenario() -> CandidateSet {
    let (gt, _) = fragments_gt();
    let (h, w) = FRAGMENTS_DIMS;
    let rows = [
        ([8.0, 8.0, 26.0, 28.0], 0.90, 0.45),
        ([30.0, 8.0, 48.0, 28.0], 0.85, 0.40),
        ([8.0, 8.0, 48.0, 25.0], 0.50, 0.85),
    ];
    let cands = rows
        .iter()
        .map(|&(b, cls, s)| {
            let bbox = BBox::try_from(b).expect("fixture box");
            let inside = box_to_mask(&bbox, h, w).expect("fixture frame").mask;
            let mask = ProbMask::from_fn(h, w, |y, x| if inside.get(y, x) { 0.9 } else { 0.0 }).expect("fixture mask");
            Candidate::new(bbox, s, cls, mask).expect("fixture candidate")
        })
        .collect();
    CandidateSet::new(gt, cands).expect("fixture set")
}

/// Scene matching [`fragments_scenario`]: gray background, one object.
pub fn fragments_scene() -> SynthScene {
    let (gt, mask) = fragments_gt();
    let (h, w) = FRAGMENTS_DIMS;
    let mut image = Image::filled(h, w, 3, 0.2).expect("fixture image");
    for (y, x) in mask.set_pixels() {
        image.set_pixel(y, x, &[0.85, 0.55, 0.25]);
    }
    SynthScene {
        scene: Scene::unlabeled(0, image, vec![gt]).expect("fixture scene"),
        gt_masks: vec![mask],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::rms_distance;
    use crate::qam::{box_quality_ranking, bpma_select, process_instance, QamConfig};

    #[test]
    fn rectangle_two_by_one() {
        let spec = SceneSpec {
            height: 4,
            width: 4,
            channels: 1,
            instance_count: 1,
            shape: ShapeFamily::Rectangle,
            width_range: (2.0, 2.0),
            height_range: (1.0, 1.0),
            overlap: OverlapPolicy::Disjoint,
            seed: 3,
        };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.gt_masks[0].count(), 2);
        assert_eq!(s.scene.instances[0].area(), 2.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SceneSpec {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = SceneSpec {
            seed: 43,
            ..Default::default()
        };
        assert_ne!(generate_scene(&spec).unwrap(), generate_scene(&other).unwrap());
        let cs = CandidateSpec {
            seed: 9,
            ..Default::default()
        };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(
            generate_candidates(&s, &cs).unwrap(),
            generate_candidates(&s, &cs).unwrap()
        );
    }

    #[test]
    fn disjoint_policy_and_tight_boxes() {
        for seed in 0..50 {
            for shape in [ShapeFamily::Ellipse, ShapeFamily::Rectangle, ShapeFamily::Capsule] {
                let spec = SceneSpec {
                    seed,
                    shape,
                    instance_count: 4,
                    ..Default::default()
                };
                let s = generate_scene(&spec).unwrap();
                let inst = &s.scene.instances;
                for i in 0..inst.len() {
                    assert_eq!(tight_box(&s.gt_masks[i]), Some(inst[i].bbox));
                    for j in i + 1..inst.len() {
                        assert_eq!(iou(&inst[i].bbox, &inst[j].bbox), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn crowded_disjoint_scene_fails() {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            instance_count: 10,
            width_range: (12.0, 12.0),
            height_range: (12.0, 12.0),
            ..Default::default()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Placement { .. })));
    }

    #[test]
    fn zero_noise_candidates_are_exact() {
        let s = generate_scene(&SceneSpec::default()).unwrap();
        let spec = CandidateSpec {
            k: 4,
            sigma_mask: 0.0,
            box_jitter: 0.0,
            score_noise: 0.0,
            seed: 1,
        };
        for (set, gt) in generate_candidates(&s, &spec).unwrap().iter().zip(&s.gt_masks) {
            for (c, &u) in set.candidates().iter().zip(set.box_ious()) {
                assert_eq!(c.mask, ProbMask::from(gt));
                assert_eq!(u, 1.0);
                assert_eq!(c.box_score, 1.0);
            }
        }
    }

    #[test]
    fn noisy_interior_pixels_stay_in_band() {
        let truth = ProbMask::filled(50, 50, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = perturb_mask(&truth, 0.2, &mut rng);
        let lo = (1.0 - 3f64.sqrt() * 0.2) as f32;
        assert!(m.values().iter().all(|&v| v >= lo && v <= 1.0));
    }

    #[test]
    fn unclamped_noise_moments() {
        let sigma = 0.1;
        let n = 100_000;
        let truth = ProbMask::filled(100, 1000, 0.5).unwrap();
        let m = perturb_mask(&truth, sigma, &mut ChaCha8Rng::seed_from_u64(8));
        let diffs: Vec<f64> = m.values().iter().map(|&v| v as f64 - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt());
        // variance of the sample variance for uniform noise: (9/5 - 1) sigma^4 / n
        let var_sd = (0.8f64).sqrt() * sigma * sigma / (n as f64).sqrt();
        assert!((var - sigma * sigma).abs() <= 3.0 * var_sd);
    }

    #[test]
    fn fragments_fixture_behaviour() {
        let set = fragments_scenario();
        let u = set.box_ious();
        assert!((u[0] - 0.45).abs() < 1e-12 && (u[1] - 0.45).abs() < 1e-12);
        assert!((u[2] - 0.85).abs() < 1e-12);
        assert_eq!(bpma_select(&set, 0.5), None);
        assert_eq!(box_quality_ranking(&set, 1).origin(), &[2]);

        let gt = ProbMask::from(&fragments_scene().gt_masks[0]);
        let fused = process_instance(&set, &QamConfig::default()).unwrap();
        let fused_err = rms_distance(&fused.mask, &gt).unwrap();
        for frag in &set.candidates()[..2] {
            assert!(fused_err < rms_distance(&frag.mask, &gt).unwrap());
        }
        assert_eq!(fragments_scenario(), set);
    }
}
