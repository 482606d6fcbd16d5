//! Axis-aligned boxes, IOU, non-maximum suppression and box rasterization.
//!
//! Pixel `(x, y)` covers the unit square `[x, x+1) x [y, y+1)` and belongs to a
//! box iff its center `(x + 0.5, y + 0.5)` lies in the half-open box
//! `[x1, x2) x [y1, y2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Grows the box by `dx` on the left and right and `dy` on top and bottom.
    pub fn dilate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 - dx, self.y1 - dy, self.x2 + dx, self.y2 + dy)
    }

    /// Whether the box intersects the frame `[0, width) x [0, height)` with positive area.
    pub fn intersects_frame(&self, height: usize, width: usize) -> bool {
        self.x2 > 0.0 && self.y2 > 0.0 && self.x1 < width as f64 && self.y1 < height as f64
    }

    /// Inclusive-exclusive pixel index ranges whose centers fall inside the box,
    /// clipped to the frame.
    pub fn pixel_span(&self, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (
            center_span(self.x1, self.x2, width),
            center_span(self.y1, self.y2, height),
        )
    }
}

/// Pixels `i` with `lo <= i + 0.5 < hi`, clipped to `0..len`.
fn center_span(lo: f64, hi: f64, len: usize) -> std::ops::Range<usize> {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().max(0.0);
    let start = (start as usize).min(len);
    let end = (end as usize).min(len);
    start..end.max(start)
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score, equal scores by ascending
/// index. A candidate is dropped when its IOU with an already kept box is
/// strictly greater than `iou_threshold`. Returns kept indices in visit order.
pub fn nms(candidates: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort keeps lower indices first among ties
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1));

    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        let suppressed = keep
            .iter()
            .any(|&k| iou(&candidates[k].0, &candidates[idx].0) > iou_threshold);
        if !suppressed {
            keep.push(idx);
        }
    }
    keep
}

/// Result of rasterizing a box onto a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRaster {
    pub mask: BinaryMask,
    /// Set when the box lies entirely outside the frame.
    pub out_of_frame: bool,
}

/// Rasterizes `bbox` onto an `height x width` frame using the pixel-center rule.
pub fn box_to_mask(bbox: &BBox, height: usize, width: usize) -> Result<BoxRaster> {
    let mut mask = BinaryMask::zeros(height, width)?;
    let out_of_frame = !bbox.intersects_frame(height, width);
    if !out_of_frame {
        let (xs, ys) = bbox.pixel_span(height, width);
        for y in ys {
            for x in xs.clone() {
                mask.set(y, x, true);
            }
        }
    }
    Ok(BoxRaster { mask, out_of_frame })
}

/// True iff at least one set pixel of `mask` lies inside `bbox`.
pub fn mask_overlaps_box(mask: &BinaryMask, bbox: &BBox) -> bool {
    let (xs, ys) = bbox.pixel_span(mask.height(), mask.width());
    ys.into_iter().any(|y| xs.clone().any(|x| mask.get(y, x)))
}

/// A ground-truth object annotated only by its class and box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub id: u64,
    pub class_id: u32,
    pub bbox: BBox,
}

impl GtInstance {
    pub fn new(id: u64, class_id: u32, bbox: BBox) -> Self {
        Self { id, class_id, bbox }
    }

    /// Box area in square pixels.
    pub fn area(&self) -> f64 {
        self.bbox.area()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts sample points of a fine grid that fall in both boxes / either box.
    fn grid_iou(a: &BBox, b: &BBox, steps_per_unit: usize) -> f64 {
        let lo_x = a.x1().min(b.x1());
        let lo_y = a.y1().min(b.y1());
        let hi_x = a.x2().max(b.x2());
        let hi_y = a.y2().max(b.y2());
        let step = 1.0 / steps_per_unit as f64;
        let nx = ((hi_x - lo_x) / step).round() as usize;
        let ny = ((hi_y - lo_y) / step).round() as usize;
        let inside = |r: &BBox, x: f64, y: f64| x >= r.x1() && x < r.x2() && y >= r.y1() && y < r.y2();
        let (mut inter, mut union) = (0usize, 0usize);
        for j in 0..ny {
            for i in 0..nx {
                let x = lo_x + (i as f64 + 0.5) * step;
                let y = lo_y + (j as f64 + 0.5) * step;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 2.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);

        let b = bx(1.0, 1.0, 3.0, 3.0);
        let oracle = grid_iou(&a, &b, 200);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        assert!((iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn box_to_mask_examples() {
        let full = box_to_mask(&bx(0.0, 0.0, 4.0, 4.0), 4, 4).unwrap();
        assert_eq!(full.mask.count(), 16);
        assert!(!full.out_of_frame);

        let tiny = box_to_mask(&bx(0.0, 0.0, 0.4, 0.4), 4, 4).unwrap();
        assert_eq!(tiny.mask.count(), 0);
        assert!(!tiny.out_of_frame);

        let two = box_to_mask(&bx(0.0, 0.0, 2.0, 1.0), 4, 4).unwrap();
        let set: Vec<(usize, usize)> = two.mask.set_pixels().collect();
        assert_eq!(set, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn box_to_mask_flags_out_of_frame() {
        let r = box_to_mask(&bx(10.0, 10.0, 12.0, 12.0), 4, 4).unwrap();
        assert!(r.out_of_frame);
        assert_eq!(r.mask.count(), 0);
        let r = box_to_mask(&bx(-5.0, -5.0, -1.0, -1.0), 4, 4).unwrap();
        assert!(r.out_of_frame);
    }

    #[test]
    fn box_to_mask_clips_partial_boxes() {
        let r = box_to_mask(&bx(-2.0, 2.0, 2.0, 10.0), 4, 4).unwrap();
        assert!(!r.out_of_frame);
        assert_eq!(r.mask.count(), 4);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        assert_eq!(nms(&[(bx(0.0, 0.0, 1.0, 1.0), 0.3)], 0.5), vec![0]);

        let b = bx(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[(b, 0.8), (b, 0.9)], 0.5), vec![1]);

        let a0 = bx(0.0, 0.0, 10.0, 10.0);
        let a1 = bx(0.0, 0.0, 10.0, 6.0);
        let a2 = bx(20.0, 20.0, 25.0, 25.0);
        assert!((iou(&a0, &a1) - 0.6).abs() < 1e-12);
        let kept = nms(&[(a0, 0.9), (a1, 0.8), (a2, 0.5)], 0.5);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[(b, 0.7), (b, 0.7), (b, 0.7)], 0.5), vec![0]);
    }

    #[test]
    fn mask_overlap_examples() {
        let zero = BinaryMask::zeros(8, 8).unwrap();
        assert!(!mask_overlaps_box(&zero, &bx(0.0, 0.0, 8.0, 8.0)));
        let ones = BinaryMask::from_fn(8, 8, |_, _| true).unwrap();
        assert!(mask_overlaps_box(&ones, &bx(2.0, 2.0, 3.0, 3.0)));
        let mut single = BinaryMask::zeros(8, 8).unwrap();
        single.set(3, 3, true);
        assert!(!mask_overlaps_box(&single, &bx(0.0, 0.0, 2.0, 2.0)));
        assert!(mask_overlaps_box(&single, &bx(3.0, 3.0, 4.0, 4.0)));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-20.0..40.0f64, -20.0..40.0f64, 0.1..30.0f64, 0.1..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a != b {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn raster_count_tracks_clipped_area(b in arb_box()) {
            let (h, w) = (24usize, 32usize);
            let r = box_to_mask(&b, h, w).unwrap();
            let cw = (b.x2().min(w as f64) - b.x1().max(0.0)).max(0.0);
            let ch = (b.y2().min(h as f64) - b.y1().max(0.0)).max(0.0);
            let area = cw * ch;
            let perimeter = 2.0 * (cw + ch);
            prop_assert!((r.mask.count() as f64 - area).abs() <= perimeter + 1.0);
        }

        #[test]
        fn nms_permutation_invariant(
            boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..boxes.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<(BBox, f64)> = perm.iter().map(|&i| boxes[i]).collect();

            // stable re-sort by (score desc, original index asc) recovers the canonical input
            let mut order: Vec<usize> = (0..permuted.len()).collect();
            order.sort_by(|&a, &b| {
                permuted[b].1.total_cmp(&permuted[a].1).then(perm[a].cmp(&perm[b]))
            });
            let resorted: Vec<(BBox, f64)> = order.iter().map(|&i| permuted[i]).collect();
            let mut kept_perm: Vec<usize> = nms(&resorted, 0.5)
                .into_iter()
                .map(|i| perm[order[i]])
                .collect();
            let mut kept = nms(&boxes, 0.5);
            kept.sort_unstable();
            kept_perm.sort_unstable();
            prop_assert_eq!(kept, kept_perm);
        }
    }
}
