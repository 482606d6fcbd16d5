//! Peer-assisted copy-paste.
//!
//! Objects whose pseudo masks score above `tau` and touch no other object's box
//! are collected as tutors in a bounded FIFO bank. During augmentation every
//! original instance of a scene (the learner) receives one tutor pasted so that
//! the two overlap; the pasted object occludes whatever lies beneath it.

use std::collections::{HashSet, VecDeque};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{mask_overlaps_box, BBox, GtInstance};
use crate::image::Image;
use crate::mask::{BinaryMask, ProbMask};
use crate::qam::FusedPseudoMask;

pub const DEFAULT_BANK_CAPACITY: usize = 80;
pub const DEFAULT_TUTOR_TAU: f64 = 0.5;
/// Pseudo-mask probability above which a pixel belongs to the object footprint.
pub const FOOTPRINT_THRESHOLD: f32 = 0.5;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 20;

/// An image with its box annotations and (optionally) per-instance pseudo masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub image: Image,
    pub instances: Vec<GtInstance>,
    pub pseudo: Vec<Option<FusedPseudoMask>>,
}

impl Scene {
    pub fn new(
        id: u64,
        image: Image,
        instances: Vec<GtInstance>,
        pseudo: Vec<Option<FusedPseudoMask>>,
    ) -> Result<Self> {
        if pseudo.len() != instances.len() {
            return Err(Error::InvalidParameter(format!(
                "{} pseudo entries for {} instances",
                pseudo.len(),
                instances.len()
            )));
        }
        for p in pseudo.iter().flatten() {
            if p.mask.dims() != image.dims() {
                return Err(Error::DimensionMismatch {
                    left: image.dims(),
                    right: p.mask.dims(),
                });
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = instances.iter().find(|i| !seen.insert(i.id)) {
            return Err(Error::InvalidParameter(format!("duplicate instance id {}", dup.id)));
        }
        Ok(Self {
            id,
            image,
            instances,
            pseudo,
        })
    }

    /// Scene without pseudo masks.
    pub fn unlabeled(id: u64, image: Image, instances: Vec<GtInstance>) -> Result<Self> {
        let pseudo = vec![None; instances.len()];
        Self::new(id, image, instances, pseudo)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    fn next_instance_id(&self) -> u64 {
        self.instances.iter().map(|i| i.id + 1).max().unwrap_or(0)
    }

    /// Binarized pseudo-mask footprint of instance `idx`.
    pub fn footprint(&self, idx: usize) -> Option<BinaryMask> {
        self.pseudo[idx].as_ref().map(|p| p.mask.binarize(FOOTPRINT_THRESHOLD))
    }
}

/// A stored peer object: the masked crop, its mask and its quality.
#[derive(Debug, Clone, PartialEq)]
pub struct TutorEntry {
    /// Tight crop of the source image with pixels outside `mask` zeroed.
    pub patch: Image,
    /// Object mask in patch coordinates.
    pub mask: BinaryMask,
    pub score: f64,
    pub class_id: u32,
    /// `(scene id, instance id)` the tutor was taken from.
    pub source: (u64, u64),
    /// Insertion counter, strictly increasing across the bank's lifetime.
    pub seq: u64,
}

/// Bounded FIFO of tutors.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: VecDeque<TutorEntry>,
    capacity: usize,
    tau: f64,
    next_seq: u64,
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new(DEFAULT_BANK_CAPACITY, DEFAULT_TUTOR_TAU).expect("valid defaults")
    }
}

impl MemoryBank {
    pub fn new(capacity: usize, tau: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("bank capacity must be at least 1".into()));
        }
        if !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tutor threshold {tau} is not finite")));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity + 1),
            capacity,
            tau,
            next_seq: 1,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &TutorEntry> {
        self.entries.iter()
    }

    pub fn get(&self, idx: usize) -> Option<&TutorEntry> {
        self.entries.get(idx)
    }

    /// Appends a tutor, assigning its `seq`; returns the evicted entry, if any.
    /// Entries at or below `tau` are rejected.
    pub fn push(&mut self, mut entry: TutorEntry) -> Result<Option<TutorEntry>> {
        if entry.score <= self.tau {
            return Err(Error::InvalidParameter(format!(
                "tutor score {} does not exceed {}",
                entry.score, self.tau
            )));
        }
        if entry.mask.count() == 0 || entry.mask.dims() != entry.patch.dims() {
            return Err(Error::InvalidParameter(
                "tutor mask must be non-empty and match its patch".into(),
            ));
        }
        entry.seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push_back(entry);
        Ok(if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        })
    }
}

/// Why an instance was or was not admitted as a tutor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eligibility {
    Eligible,
    NoPseudoMask,
    LowQuality,
    EmptyFootprint,
    OverlapsOther,
}

/// Admission test: quality above `tau`, non-empty footprint, and footprint
/// disjoint from every other instance's GT box.
pub fn tutor_eligibility(scene: &Scene, idx: usize, tau: f64) -> Eligibility {
    let Some(pseudo) = scene.pseudo[idx].as_ref() else {
        return Eligibility::NoPseudoMask;
    };
    if pseudo.quality <= tau {
        return Eligibility::LowQuality;
    }
    let footprint = pseudo.mask.binarize(FOOTPRINT_THRESHOLD);
    if footprint.count() == 0 {
        return Eligibility::EmptyFootprint;
    }
    let overlaps = scene
        .instances
        .iter()
        .enumerate()
        .any(|(j, other)| j != idx && mask_overlaps_box(&footprint, &other.bbox));
    if overlaps {
        Eligibility::OverlapsOther
    } else {
        Eligibility::Eligible
    }
}

/// Counters returned by [`update_bank`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BankUpdate {
    pub admitted: usize,
    pub evicted: usize,
    pub skipped_no_pseudo: usize,
    pub skipped_low_quality: usize,
    pub skipped_empty: usize,
    pub skipped_overlap: usize,
}

fn tutor_from_instance(scene: &Scene, idx: usize) -> Result<TutorEntry> {
    let pseudo = scene.pseudo[idx]
        .as_ref()
        .ok_or(Error::InvalidParameter("instance has no pseudo mask".into()))?;
    let footprint = pseudo.mask.binarize(FOOTPRINT_THRESHOLD);
    let (r0, c0, r1, c1) = footprint
        .bounds()
        .ok_or(Error::InvalidParameter("empty tutor footprint".into()))?;
    let (rows, cols) = (r1 - r0, c1 - c0);
    let patch = scene.image.crop_masked(r0, c0, rows, cols, &footprint)?;
    let mask = BinaryMask::from_fn(rows, cols, |y, x| footprint.get(r0 + y, c0 + x))?;
    let inst = &scene.instances[idx];
    Ok(TutorEntry {
        patch,
        mask,
        score: pseudo.quality,
        class_id: inst.class_id,
        source: (scene.id, inst.id),
        seq: 0,
    })
}

/// Collects every eligible instance of `scene` into the bank, evicting the
/// oldest entries once the capacity is exceeded.
pub fn update_bank(bank: &mut MemoryBank, scene: &Scene) -> Result<BankUpdate> {
    let mut report = BankUpdate::default();
    for idx in 0..scene.instances.len() {
        match tutor_eligibility(scene, idx, bank.tau) {
            Eligibility::Eligible => {
                let evicted = bank.push(tutor_from_instance(scene, idx)?)?;
                report.admitted += 1;
                report.evicted += evicted.is_some() as usize;
            }
            Eligibility::NoPseudoMask => report.skipped_no_pseudo += 1,
            Eligibility::LowQuality => report.skipped_low_quality += 1,
            Eligibility::EmptyFootprint => report.skipped_empty += 1,
            Eligibility::OverlapsOther => report.skipped_overlap += 1,
        }
    }
    Ok(report)
}

/// Uniform draw over the bank; `None` when it is empty.
pub fn select_tutor<'a, R: Rng + ?Sized>(bank: &'a MemoryBank, rng: &mut R) -> Option<&'a TutorEntry> {
    if bank.is_empty() {
        return None;
    }
    let idx = rng.gen_range(0..bank.len());
    bank.entries.get(idx)
}

/// Frame pixels covered by the tutor when its patch's top-left corner sits at `(top, left)`.
fn placed_footprint(
    tutor: &TutorEntry,
    dims: (usize, usize),
    top: i64,
    left: i64,
) -> Vec<(usize, usize, usize, usize)> {
    let (h, w) = (dims.0 as i64, dims.1 as i64);
    tutor
        .mask
        .set_pixels()
        .filter_map(|(py, px)| {
            let (y, x) = (top + py as i64, left + px as i64);
            (y >= 0 && y < h && x >= 0 && x < w).then_some((y as usize, x as usize, py, px))
        })
        .collect()
}

/// Pastes `tutor` with its patch's top-left corner at `(top, left)` if at least
/// one pasted pixel falls inside the learner's GT box. Returns the index of the
/// new instance, or `None` (scene untouched) when there is no overlap.
pub fn paste_at(scene: &mut Scene, learner: usize, tutor: &TutorEntry, top: i64, left: i64) -> Result<Option<usize>> {
    let dims = scene.dims();
    let learner_box = scene
        .instances
        .get(learner)
        .ok_or(Error::InvalidParameter(format!("no learner instance {learner}")))?
        .bbox;
    let pixels = placed_footprint(tutor, dims, top, left);
    let (xs, ys) = learner_box.pixel_span(dims.0, dims.1);
    if !pixels.iter().any(|&(y, x, _, _)| ys.contains(&y) && xs.contains(&x)) {
        return Ok(None);
    }

    let mut footprint = BinaryMask::zeros(dims.0, dims.1)?;
    for &(y, x, py, px) in &pixels {
        scene.image.set_pixel(y, x, tutor.patch.pixel(py, px));
        footprint.set(y, x, true);
    }
    // the pasted object lies on top: occlude existing pseudo masks
    for pseudo in scene.pseudo.iter_mut().flatten() {
        for &(y, x, _, _) in &pixels {
            pseudo.mask.set(y, x, 0.0);
        }
    }
    let (r0, c0, r1, c1) = footprint.bounds().expect("footprint overlaps the learner box");
    let bbox = BBox::new(c0 as f64, r0 as f64, c1 as f64, r1 as f64)?;
    let id = scene.next_instance_id();
    scene.instances.push(GtInstance::new(id, tutor.class_id, bbox));
    scene
        .pseudo
        .push(Some(FusedPseudoMask::single(ProbMask::from(&footprint), tutor.score)));
    Ok(Some(scene.instances.len() - 1))
}

/// Outcome of one paste attempt sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasteOutcome {
    Pasted {
        learner: usize,
        instance: usize,
        top: i64,
        left: i64,
        attempts: usize,
    },
    /// No overlapping placement found within [`MAX_PLACEMENT_ATTEMPTS`].
    Skipped { learner: usize },
}

impl PasteOutcome {
    pub fn is_pasted(&self) -> bool {
        matches!(self, PasteOutcome::Pasted { .. })
    }
}

/// Pastes `tutor` so that it overlaps the learner's GT box.
///
/// The patch center is drawn uniformly from the learner box dilated by half
/// the patch size; placements that miss the box are redrawn up to
/// [`MAX_PLACEMENT_ATTEMPTS`] times, after which the scene is left unchanged.
pub fn paste_overlapping<R: Rng + ?Sized>(
    scene: &mut Scene,
    learner: usize,
    tutor: &TutorEntry,
    rng: &mut R,
) -> Result<PasteOutcome> {
    let learner_box = scene
        .instances
        .get(learner)
        .ok_or(Error::InvalidParameter(format!("no learner instance {learner}")))?
        .bbox;
    let (ph, pw) = (tutor.mask.height() as f64, tutor.mask.width() as f64);
    let region = learner_box.dilate(0.5 * pw, 0.5 * ph)?;
    for attempt in 1..=MAX_PLACEMENT_ATTEMPTS {
        let cx = rng.gen_range(region.x1()..region.x2());
        let cy = rng.gen_range(region.y1()..region.y2());
        let left = (cx - 0.5 * pw).round() as i64;
        let top = (cy - 0.5 * ph).round() as i64;
        if let Some(instance) = paste_at(scene, learner, tutor, top, left)? {
            return Ok(PasteOutcome::Pasted {
                learner,
                instance,
                top,
                left,
                attempts: attempt,
            });
        }
    }
    Ok(PasteOutcome::Skipped { learner })
}

/// Pastes one randomly drawn tutor onto each original instance, in instance
/// order. An empty bank leaves the scene unchanged.
pub fn augment<R: Rng + ?Sized>(scene: &mut Scene, bank: &MemoryBank, rng: &mut R) -> Result<Vec<PasteOutcome>> {
    let learners = scene.instances.len();
    let mut outcomes = Vec::with_capacity(learners);
    for learner in 0..learners {
        let Some(tutor) = select_tutor(bank, rng) else {
            break;
        };
        outcomes.push(paste_overlapping(scene, learner, tutor, rng)?);
    }
    Ok(outcomes)
}
