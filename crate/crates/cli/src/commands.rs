use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use qamask_core::image::{encode_image, overlay_ppm, prob_mask_pgm};
use qamask_core::pc::FOOTPRINT_THRESHOLD;
use qamask_core::qam::{quality_stats, BPMA_NMS_IOU};
use qamask_core::synth::{
    fragments_scenario, fragments_scene, generate_candidates, generate_scene, CandidateSpec, SceneSpec, SynthScene,
};
use qamask_core::theory::{mc_verify_qmf, mqs_convergence, MqsCheck, NoiseStats};
use qamask_core::{
    augment, box_quality_ranking, bpma_select, dice_loss, process_instance, rms_distance, update_bank, CandidateSet,
    MemoryBank, PasteOutcome, ProbMask, QamConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::manifest::{read_mask, Bundle, Provenance, MANIFEST_FILE};

/// Scene and candidate settings for `synth`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthOptions {
    pub scene: SceneSpec,
    pub candidates: CandidateSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Fragments,
    Random,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub out: PathBuf,
    pub instances: usize,
    pub candidates: usize,
}

fn bundle_from_synth(synth: &SynthScene, sets: &[CandidateSet], provenance: Provenance) -> Bundle {
    Bundle {
        image: synth.scene.image.clone(),
        instances: synth.scene.instances.clone(),
        gt_masks: synth.gt_masks.iter().map(|m| Some(ProbMask::from(m))).collect(),
        candidates: sets.iter().map(|s| s.candidates().to_vec()).collect(),
        pseudo: None,
        provenance,
    }
}

pub fn synth(preset: Preset, opts: &SynthOptions, out: &Path) -> Result<SynthReport> {
    let bundle = match preset {
        Preset::Fragments => {
            let mut provenance = Provenance::default();
            provenance
                .config
                .insert("synth".into(), serde_json::json!({ "preset": "fragments" }));
            bundle_from_synth(&fragments_scene(), &[fragments_scenario()], provenance)
        }
        Preset::Random => {
            let synth = generate_scene(&opts.scene)?;
            let sets = generate_candidates(&synth, &opts.candidates)?;
            let mut provenance = Provenance {
                seed: Some(opts.scene.seed),
                ..Provenance::default()
            };
            let mut config = serde_json::to_value(opts)?;
            config["preset"] = "random".into();
            provenance.config.insert("synth".into(), config);
            bundle_from_synth(&synth, &sets, provenance)
        }
    };
    bundle.save(out)?;
    Ok(SynthReport {
        out: out.to_path_buf(),
        instances: bundle.instances.len(),
        candidates: bundle.candidates.iter().map(Vec::len).sum(),
    })
}

/// Seed for candidate noise derived from the scene seed.
pub fn candidate_seed(scene_seed: u64) -> u64 {
    scene_seed ^ 0x5DEE_CE66_D1CE_5EED
}

pub fn default_synth_options(seed: u64) -> SynthOptions {
    SynthOptions {
        scene: SceneSpec {
            seed,
            ..SceneSpec::default()
        },
        candidates: CandidateSpec {
            seed: candidate_seed(seed),
            ..CandidateSpec::default()
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FusedInstance {
    pub id: u64,
    pub fused: bool,
    pub fallback: bool,
    pub k_used: usize,
    pub valid_count: usize,
    pub quality: Option<f64>,
    pub weights: Vec<f64>,
    pub contributors: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FuseReport {
    pub out: PathBuf,
    pub instances: Vec<FusedInstance>,
}

pub fn fuse(manifest: &Path, out: &Path, cfg: &QamConfig) -> Result<FuseReport> {
    cfg.validate()?;
    let mut bundle = Bundle::load(manifest)?;
    let sets = bundle.candidate_sets()?;
    let pseudo: Vec<_> = sets.iter().map(|s| process_instance(s, cfg)).collect();
    let instances = bundle
        .instances
        .iter()
        .zip(&pseudo)
        .map(|(gt, p)| match p {
            Some(p) => FusedInstance {
                id: gt.id,
                fused: true,
                fallback: p.fallback,
                k_used: p.k_used,
                valid_count: p.valid_count,
                quality: Some(p.quality),
                weights: p.weights.clone(),
                contributors: p.contributors.clone(),
            },
            None => FusedInstance {
                id: gt.id,
                fused: false,
                fallback: false,
                k_used: 0,
                valid_count: 0,
                quality: None,
                weights: Vec::new(),
                contributors: Vec::new(),
            },
        })
        .collect();
    bundle.pseudo = Some(pseudo);
    bundle.record("fuse", serde_json::to_value(cfg)?);
    bundle.save(out)?;
    Ok(FuseReport {
        out: out.to_path_buf(),
        instances,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoredInstance {
    pub id: u64,
    pub s_hat: f64,
    pub m_hat: f64,
    pub k_hat: usize,
    pub m_count: usize,
    pub quality: f64,
    pub stored_quality: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub instances: Vec<ScoredInstance>,
}

/// Recomputes the quality statistics of every stored pseudo mask from its
/// ranked candidates. Fallback masks report their stored quality.
pub fn score(manifest: &Path, tau_m: f64) -> Result<ScoreReport> {
    let bundle = Bundle::load(manifest)?;
    let Some(pseudo) = &bundle.pseudo else {
        bail!("manifest has no pseudo masks; run `fuse` first");
    };
    let cfg = QamConfig {
        tau_m,
        ..QamConfig::default()
    };
    let sets = bundle.candidate_sets()?;
    let mut instances = Vec::new();
    for (set, p) in sets.iter().zip(pseudo) {
        let Some(p) = p else { continue };
        if set.is_empty() {
            continue;
        }
        let topk = box_quality_ranking(set, p.k_used);
        let stats = quality_stats(&topk, &p.mask, &set.gt().bbox, &cfg)?;
        instances.push(ScoredInstance {
            id: set.gt().id,
            s_hat: stats.s_hat,
            m_hat: stats.m_hat,
            k_hat: stats.k_hat,
            m_count: stats.m_count,
            quality: if p.fallback { p.quality } else { stats.score() },
            stored_quality: p.quality,
            fallback: p.fallback,
        });
    }
    Ok(ScoreReport { instances })
}

#[derive(Debug, Clone, Serialize)]
pub struct LossTerm {
    pub id: u64,
    pub quality: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub loss: f64,
    pub terms: Vec<LossTerm>,
}

/// Quality-weighted Dice loss of student masks against the stored pseudo
/// masks, one student file per pseudo-labelled instance in manifest order.
pub fn loss(manifest: &Path, students: &[PathBuf]) -> Result<LossReport> {
    let bundle = Bundle::load(manifest)?;
    let Some(pseudo) = &bundle.pseudo else {
        bail!("manifest has no pseudo masks; run `fuse` first");
    };
    let labelled: Vec<_> = bundle
        .instances
        .iter()
        .zip(pseudo)
        .filter_map(|(g, p)| Some((g, p.as_ref()?)))
        .collect();
    ensure!(
        labelled.len() == students.len(),
        "{} student masks for {} pseudo-labelled instances",
        students.len(),
        labelled.len()
    );
    let (h, w) = bundle.image.dims();
    let mut terms = Vec::with_capacity(students.len());
    for ((gt, p), path) in labelled.iter().zip(students) {
        let student = read_mask(path, h, w)?;
        terms.push(LossTerm {
            id: gt.id,
            quality: p.quality,
            dice: dice_loss(&student, &p.mask)?,
        });
    }
    let pairs: Vec<(f64, f64)> = terms.iter().map(|t| (t.quality, t.dice)).collect();
    let loss = qamask_core::qam::weighted_mean_loss(&pairs)?;
    Ok(LossReport { loss, terms })
}

#[derive(Debug, Clone, Serialize)]
pub struct PasteRecord {
    pub learner: usize,
    pub pasted: bool,
    pub instance: Option<usize>,
    pub top: Option<i64>,
    pub left: Option<i64>,
    pub attempts: Option<usize>,
}

impl From<PasteOutcome> for PasteRecord {
    fn from(o: PasteOutcome) -> Self {
        match o {
            PasteOutcome::Pasted {
                learner,
                instance,
                top,
                left,
                attempts,
            } => Self {
                learner,
                pasted: true,
                instance: Some(instance),
                top: Some(top),
                left: Some(left),
                attempts: Some(attempts),
            },
            PasteOutcome::Skipped { learner } => Self {
                learner,
                pasted: false,
                instance: None,
                top: None,
                left: None,
                attempts: None,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentReport {
    pub out: PathBuf,
    pub bank_scenes: usize,
    pub bank_len: usize,
    pub admitted: usize,
    pub evicted: usize,
    pub pastes: Vec<PasteRecord>,
}

/// Manifests feeding the memory bank: `<dir>/manifest.json` and
/// `<dir>/*/manifest.json`, in path order.
pub fn bank_manifests(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let top = dir.join(MANIFEST_FILE);
    if top.is_file() {
        found.push(top);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    found.extend(
        subdirs
            .into_iter()
            .map(|d| d.join(MANIFEST_FILE))
            .filter(|p| p.is_file()),
    );
    Ok(found)
}

pub fn augment_scene(
    manifest: &Path,
    bank_dir: &Path,
    out: &Path,
    seed: u64,
    capacity: usize,
    tau: f64,
) -> Result<AugmentReport> {
    let mut bank = MemoryBank::new(capacity, tau)?;
    let sources = bank_manifests(bank_dir)?;
    let (mut admitted, mut evicted) = (0, 0);
    for (i, path) in sources.iter().enumerate() {
        let scene = Bundle::load(path)?.scene(i as u64)?;
        let update = update_bank(&mut bank, &scene)?;
        admitted += update.admitted;
        evicted += update.evicted;
    }

    let mut bundle = Bundle::load(manifest)?;
    let mut scene = bundle.scene(u64::MAX)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcomes = augment(&mut scene, &bank, &mut rng)?;
    bundle.update_from_scene(&scene)?;
    bundle.record(
        "augment",
        serde_json::json!({ "seed": seed, "capacity": capacity, "tau": tau, "bank_scenes": sources.len() }),
    );
    bundle.save(out)?;
    Ok(AugmentReport {
        out: out.to_path_buf(),
        bank_scenes: sources.len(),
        bank_len: bank.len(),
        admitted,
        evicted,
        pastes: outcomes.into_iter().map(PasteRecord::from).collect(),
    })
}

/// Parameter grid and trial counts for `verify`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyPlan {
    pub mqs_sizes: Vec<usize>,
    pub mqs_eps: Vec<f64>,
    pub mqs_trials: usize,
    pub qmf_ks: Vec<usize>,
    pub qmf_trials: usize,
    pub qmf_tolerance: f64,
    /// Candidate mask noise sd for the fusion rows.
    pub qmf_sigma_mask: f64,
    pub slope_range: (f64, f64),
}

impl VerifyPlan {
    pub fn full() -> Self {
        Self {
            mqs_sizes: vec![16, 64, 256, 1024],
            mqs_eps: vec![0.05, 0.1, 0.2],
            mqs_trials: 5000,
            qmf_ks: vec![2, 4, 8, 10],
            qmf_trials: 2000,
            qmf_tolerance: 0.1,
            qmf_sigma_mask: 0.2,
            slope_range: (-0.65, -0.35),
        }
    }

    /// Smaller sizes and fewer trials; every quick grid point is also a
    /// point of the full grid.
    pub fn quick() -> Self {
        Self {
            mqs_sizes: vec![16, 64, 256],
            mqs_trials: 1000,
            qmf_ks: vec![2, 4, 8],
            qmf_trials: 1000,
            ..Self::full()
        }
    }
}

/// Noise used by the fusion rows: relative score sd 0.1 and relative corner
/// jitter 0.1 around the given mask noise.
pub fn verify_qmf_noise(sigma_mask: f64) -> NoiseStats {
    NoiseStats {
        sigma_s2: 0.01,
        sigma_m2: sigma_mask * sigma_mask,
        sigma_u2: 0.01,
        ..NoiseStats::default()
    }
}

/// One CSV row. Empty optional fields are written as blanks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub check: &'static str,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub eps: Option<f64>,
    pub trials: usize,
    /// Value the empirical column is compared against.
    pub bound: f64,
    /// Secondary bound reported for context.
    pub reference_bound: Option<f64>,
    pub empirical: f64,
    pub pass: bool,
}

pub const VERIFY_HEADER: &str = "check,k,m,eps,trials,bound,reference_bound,empirical,pass";

impl VerifyRow {
    pub fn to_csv(&self) -> String {
        fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        fn sci(v: f64) -> String {
            format!("{v:e}")
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.check,
            opt(self.k),
            opt(self.m),
            opt(self.eps),
            self.trials,
            sci(self.bound),
            self.reference_bound.map(sci).unwrap_or_default(),
            sci(self.empirical),
            self.pass
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(VERIFY_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

pub fn verify(plan: &VerifyPlan, seed: u64) -> Result<VerifyReport> {
    let mqs_noise = NoiseStats::default();
    let mut rows = Vec::new();

    let (conv, samples) = mqs_convergence(&mqs_noise, &plan.mqs_sizes, plan.mqs_trials, seed)?;
    for s in &samples {
        for &eps in &plan.mqs_eps {
            let c = MqsCheck::from_samples(s, &mqs_noise, eps);
            rows.push(VerifyRow {
                check: "mqs_tail",
                k: Some(c.k_hat),
                m: Some(c.m_hat),
                eps: Some(eps),
                trials: plan.mqs_trials,
                bound: c.classical_bound,
                reference_bound: Some(c.variance_bound),
                empirical: c.empirical_rate,
                pass: c.pass,
            });
        }
    }
    for (i, (&n, &rms)) in conv.sizes.iter().zip(&conv.rms_errors).enumerate() {
        let monotone = i == 0 || rms < conv.rms_errors[i - 1];
        rows.push(VerifyRow {
            check: "mqs_rms",
            k: Some(n),
            m: Some(n),
            eps: None,
            trials: plan.mqs_trials,
            bound: if i == 0 { f64::INFINITY } else { conv.rms_errors[i - 1] },
            reference_bound: None,
            empirical: rms,
            pass: monotone,
        });
    }
    let (lo, hi) = plan.slope_range;
    rows.push(VerifyRow {
        check: "mqs_slope",
        k: None,
        m: None,
        eps: None,
        trials: plan.mqs_trials,
        bound: lo,
        reference_bound: Some(hi),
        empirical: conv.slope,
        pass: conv.slope_within(lo, hi),
    });

    let qmf_noise = verify_qmf_noise(plan.qmf_sigma_mask);
    let cfg = QamConfig::default();
    let mut prev: Option<f64> = None;
    for &k in &plan.qmf_ks {
        let c = mc_verify_qmf(&qmf_noise, k, plan.qmf_trials, seed, &cfg)?;
        rows.push(VerifyRow {
            check: "qmf_gain",
            k: Some(k),
            m: None,
            eps: None,
            trials: plan.qmf_trials,
            bound: c.mean_candidate_mse,
            reference_bound: None,
            empirical: c.fused_mse,
            pass: c.pass,
        });
        if let Some(p) = prev {
            let limit = (1.0 + plan.qmf_tolerance) * p;
            rows.push(VerifyRow {
                check: "qmf_trend",
                k: Some(k),
                m: None,
                eps: None,
                trials: plan.qmf_trials,
                bound: limit,
                reference_bound: None,
                empirical: c.fused_mse,
                pass: c.fused_mse <= limit,
            });
        }
        prev = Some(c.fused_mse);
    }

    Ok(VerifyReport {
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BpmaRow {
    pub id: u64,
    pub bpma_pick: Option<usize>,
    pub bpma_iou: Option<f64>,
    pub bqr_pick: Option<usize>,
    pub bqr_iou: Option<f64>,
    /// Pixel-RMS error of the baseline mask (empty mask when it rejects).
    pub bpma_error: Option<f64>,
    pub qam_error: Option<f64>,
}

/// Baseline and quality-aware choices for one instance. Errors need a GT mask.
pub fn compare_instance(set: &CandidateSet, gt_mask: Option<&ProbMask>, cfg: &QamConfig) -> Result<BpmaRow> {
    let bpma = bpma_select(set, BPMA_NMS_IOU);
    let ranked = box_quality_ranking(set, 1);
    let bqr = ranked.origin().first().copied();
    let (mut bpma_error, mut qam_error) = (None, None);
    if let (Some(gt), Some((h, w))) = (gt_mask, set.frame()) {
        let empty = ProbMask::zeros(h, w)?;
        let baseline = bpma.map_or(&empty, |i| &set.candidates()[i].mask);
        bpma_error = Some(rms_distance(baseline, gt)?);
        if let Some(p) = process_instance(set, cfg) {
            qam_error = Some(rms_distance(&p.mask, gt)?);
        }
    }
    Ok(BpmaRow {
        id: set.gt().id,
        bpma_pick: bpma,
        bpma_iou: bpma.map(|i| set.box_ious()[i]),
        bqr_pick: bqr,
        bqr_iou: bqr.map(|i| set.box_ious()[i]),
        bpma_error,
        qam_error,
    })
}

pub fn compare_manifest(manifest: &Path, cfg: &QamConfig) -> Result<Vec<BpmaRow>> {
    let bundle = Bundle::load(manifest)?;
    bundle
        .candidate_sets()?
        .iter()
        .zip(&bundle.gt_masks)
        .map(|(set, gt)| compare_instance(set, gt.as_ref(), cfg))
        .collect()
}

pub fn bpma_table(rows: &[BpmaRow]) -> String {
    fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
        v.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
    }
    fn err(v: Option<f64>) -> String {
        v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
    }
    let mut s = String::from("id\tbpma_pick\tbpma_iou\tbqr_pick\tbqr_iou\tbpma_error\tqam_error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            opt(r.bpma_pick),
            err(r.bpma_iou),
            opt(r.bqr_pick),
            err(r.bqr_iou),
            err(r.bpma_error),
            err(r.qam_error)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BpmaSweep {
    pub scenes: usize,
    pub instances: usize,
    /// Instances where the fused mask is at least as close to the truth.
    pub qam_not_worse: usize,
    pub fraction: f64,
    pub pass: bool,
}

/// Share of instances over random scenes where fusion is no worse than the
/// baseline; passes at 90%.
pub fn bpma_sweep(scenes: usize, seed: u64, sigma_mask: f64, cfg: &QamConfig) -> Result<BpmaSweep> {
    ensure!(scenes > 0, "sweep needs at least one scene");
    let (mut instances, mut not_worse) = (0, 0);
    for i in 0..scenes as u64 {
        let mut opts = default_synth_options(seed.wrapping_add(i));
        opts.candidates.sigma_mask = sigma_mask;
        let synth = generate_scene(&opts.scene)?;
        let sets = generate_candidates(&synth, &opts.candidates)?;
        for (set, gt) in sets.iter().zip(&synth.gt_masks) {
            let row = compare_instance(set, Some(&ProbMask::from(gt)), cfg)?;
            if let (Some(b), Some(q)) = (row.bpma_error, row.qam_error) {
                instances += 1;
                if q <= b {
                    not_worse += 1;
                }
            }
        }
    }
    let fraction = if instances == 0 {
        0.0
    } else {
        not_worse as f64 / instances as f64
    };
    Ok(BpmaSweep {
        scenes,
        instances,
        qam_not_worse: not_worse,
        fraction,
        pass: fraction >= 0.9,
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

#[derive(Debug, Clone, Serialize)]
pub struct RenderedFile {
    pub path: String,
    /// Overlay pixels painted, for overlays.
    pub painted: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RenderReport {
    pub out: PathBuf,
    pub files: Vec<RenderedFile>,
}

/// Writes the image, each pseudo mask as PGM, and each binarized pseudo mask
/// painted over the image as PPM.
pub fn render(manifest: &Path, out: &Path) -> Result<RenderReport> {
    let bundle = Bundle::load(manifest)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = Vec::new();
    let image_name = if bundle.image.channels() == 1 {
        "image.pgm"
    } else {
        "image.ppm"
    };
    fs::write(out.join(image_name), encode_image(&bundle.image))?;
    files.push(RenderedFile {
        path: image_name.into(),
        painted: None,
    });
    if let Some(pseudo) = &bundle.pseudo {
        for (i, p) in pseudo.iter().enumerate() {
            let Some(p) = p else { continue };
            let mask_name = format!("mask_{i}.pgm");
            fs::write(out.join(&mask_name), prob_mask_pgm(&p.mask))?;
            files.push(RenderedFile {
                path: mask_name,
                painted: None,
            });
            let (bytes, painted) = overlay_ppm(
                &bundle.image,
                &p.mask.binarize(FOOTPRINT_THRESHOLD),
                PALETTE[i % PALETTE.len()],
            )?;
            let overlay_name = format!("overlay_{i}.ppm");
            fs::write(out.join(&overlay_name), bytes)?;
            files.push(RenderedFile {
                path: overlay_name,
                painted: Some(painted),
            });
        }
    }
    Ok(RenderReport {
        out: out.to_path_buf(),
        files,
    })
}
