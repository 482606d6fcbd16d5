//! Inputs shared by the pipeline benchmarks.

use qamask_core::synth::{generate_candidates, generate_scene, CandidateSpec, SceneSpec};
use qamask_core::{process_instance, update_bank, BBox, CandidateSet, MemoryBank, QamConfig, Result, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random boxes in a 260x260 area with uniform scores.
pub fn random_boxes(n: usize, seed: u64) -> Vec<(BBox, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0));
            let (w, h) = (rng.gen_range(5.0..60.0), rng.gen_range(5.0..60.0));
            (BBox::new(x, y, x + w, y + h).expect("positive size"), rng.gen())
        })
        .collect()
}

/// Ten candidates for one large object in a `side`x`side` frame.
pub fn large_instance(side: usize, seed: u64) -> Result<CandidateSet> {
    let spec = SceneSpec {
        height: side,
        width: side,
        width_range: (side as f64 * 0.3, side as f64 * 0.8),
        height_range: (side as f64 * 0.3, side as f64 * 0.8),
        instance_count: 1,
        seed,
        ..SceneSpec::default()
    };
    let synth = generate_scene(&spec)?;
    Ok(generate_candidates(&synth, &CandidateSpec::default())?.remove(0))
}

/// A default random scene with fused pseudo masks.
pub fn fused_scene(seed: u64) -> Result<Scene> {
    let synth = generate_scene(&SceneSpec {
        seed,
        ..SceneSpec::default()
    })?;
    let sets = generate_candidates(&synth, &CandidateSpec::default())?;
    let cfg = QamConfig::default();
    let pseudo = sets.iter().map(|s| process_instance(s, &cfg)).collect();
    Scene::new(seed, synth.scene.image, synth.scene.instances, pseudo)
}

/// Bank filled from the scenes with the given seeds.
pub fn filled_bank(seeds: impl IntoIterator<Item = u64>) -> Result<MemoryBank> {
    let mut bank = MemoryBank::default();
    for seed in seeds {
        update_bank(&mut bank, &fused_scene(seed)?)?;
    }
    Ok(bank)
}
