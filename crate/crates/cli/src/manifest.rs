//! Manifest schema v1.
//!
//! A manifest is a UTF-8 JSON document describing one scene. Pixel payloads
//! live next to it as raw little-endian float32 files (row-major, no header);
//! paths are relative to the manifest's directory.
//!
//! ```json
//! {
//!   "version": 1,
//!   "image": { "path": "image.f32", "height": 40, "width": 64, "channels": 3, "dtype": "f32le" },
//!   "instances": [ { "id": 1, "class_id": 0, "box": [8, 8, 48, 28], "gt_mask_path": "gt_0.f32" } ],
//!   "candidates": [ [ { "box": [8, 8, 26, 28], "box_score": 0.45, "cls_score": 0.9, "mask_path": "cand_0_0.f32" } ] ],
//!   "pseudo": [ { "mask_path": "pseudo_0.f32", "quality": 0.87, "weights": [1.0, 0.0], ... } ],
//!   "provenance": { "seed": 7, "config": { "synth": { ... } } }
//! }
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use qamask_core::image::{read_f32_le, write_f32_le};
use qamask_core::{BBox, Candidate, CandidateSet, FusedPseudoMask, GtInstance, Image, ProbMask, Scene};
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAW_DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub image: ImageEntry,
    pub instances: Vec<InstanceEntry>,
    /// One list per instance, aligned with `instances`.
    pub candidates: Vec<Vec<CandidateEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<Vec<Option<PseudoEntry>>>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub path: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub id: u64,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateEntry {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub box_score: f64,
    pub cls_score: f64,
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoEntry {
    pub mask_path: String,
    pub quality: f64,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub contributors: Vec<usize>,
    #[serde(default)]
    pub k_used: usize,
    #[serde(default)]
    pub valid_count: usize,
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: Option<u64>,
    /// Settings of every command that touched the scene, keyed by command name.
    #[serde(default)]
    pub config: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).context("parsing manifest JSON")?;
        m.check_shape()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    fn check_shape(&self) -> Result<()> {
        ensure!(
            self.version == MANIFEST_VERSION,
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            self.version
        );
        ensure!(
            self.image.dtype == RAW_DTYPE,
            "unsupported dtype {:?}",
            self.image.dtype
        );
        ensure!(
            self.candidates.len() == self.instances.len(),
            "{} candidate lists for {} instances",
            self.candidates.len(),
            self.instances.len()
        );
        if let Some(p) = &self.pseudo {
            ensure!(
                p.len() == self.instances.len(),
                "{} pseudo entries for {} instances",
                p.len(),
                self.instances.len()
            );
        }
        Ok(())
    }
}

/// Resolves a manifest argument: a directory means `<dir>/manifest.json`.
pub fn manifest_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(MANIFEST_FILE)
    } else {
        arg.to_path_buf()
    }
}

pub fn read_raw(path: &Path, len: usize) -> Result<Vec<f32>> {
    let meta = fs::metadata(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        meta.len() == (len * 4) as u64,
        "{}: expected {} bytes, found {}",
        path.display(),
        len * 4,
        meta.len()
    );
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_f32_le(BufReader::new(f), len).with_context(|| format!("reading {}", path.display()))
}

pub fn write_raw(path: &Path, values: &[f32]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_f32_le(&mut w, values)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn read_mask(path: &Path, height: usize, width: usize) -> Result<ProbMask> {
    let data = read_raw(path, height * width)?;
    ProbMask::new(height, width, data).with_context(|| format!("invalid mask {}", path.display()))
}

/// A scene with every payload loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub image: Image,
    pub instances: Vec<GtInstance>,
    pub gt_masks: Vec<Option<ProbMask>>,
    pub candidates: Vec<Vec<Candidate>>,
    pub pseudo: Option<Vec<Option<FusedPseudoMask>>>,
    pub provenance: Provenance,
}

impl Bundle {
    pub fn load(arg: &Path) -> Result<Self> {
        let path = manifest_path(arg);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let manifest = Manifest::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, base)
    }

    pub fn from_manifest(m: &Manifest, base: &Path) -> Result<Self> {
        let (h, w, c) = (m.image.height, m.image.width, m.image.channels);
        let pixels = read_raw(&base.join(&m.image.path), h * w * c)?;
        let image = Image::new(h, w, c, pixels).context("invalid image payload")?;

        let mut instances = Vec::with_capacity(m.instances.len());
        let mut gt_masks = Vec::with_capacity(m.instances.len());
        for inst in &m.instances {
            let bbox = BBox::try_from(inst.bbox).with_context(|| format!("instance {}", inst.id))?;
            instances.push(GtInstance::new(inst.id, inst.class_id, bbox));
            gt_masks.push(match &inst.gt_mask_path {
                Some(p) => Some(read_mask(&base.join(p), h, w)?),
                None => None,
            });
        }

        let candidates = m
            .candidates
            .iter()
            .map(|list| {
                list.iter()
                    .map(|c| {
                        let bbox = BBox::try_from(c.bbox)?;
                        let mask = read_mask(&base.join(&c.mask_path), h, w)?;
                        Ok(Candidate::new(bbox, c.box_score, c.cls_score, mask)?)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let pseudo = match &m.pseudo {
            None => None,
            Some(list) => Some(
                list.iter()
                    .map(|p| {
                        p.as_ref()
                            .map(|p| -> Result<FusedPseudoMask> {
                                ensure!(
                                    (0.0..=1.0).contains(&p.quality),
                                    "pseudo quality {} not in [0, 1]",
                                    p.quality
                                );
                                Ok(FusedPseudoMask {
                                    mask: read_mask(&base.join(&p.mask_path), h, w)?,
                                    quality: p.quality,
                                    weights: p.weights.clone(),
                                    contributors: p.contributors.clone(),
                                    k_used: p.k_used,
                                    valid_count: p.valid_count,
                                    fallback: p.fallback,
                                })
                            })
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };

        Ok(Self {
            image,
            instances,
            gt_masks,
            candidates,
            pseudo,
            provenance: m.provenance.clone(),
        })
    }

    /// Writes every payload and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let image_path = "image.f32".to_string();
        write_raw(&dir.join(&image_path), self.image.values())?;

        let mut instances = Vec::with_capacity(self.instances.len());
        for (i, (inst, gt)) in self.instances.iter().zip(&self.gt_masks).enumerate() {
            let gt_mask_path = match gt {
                Some(m) => {
                    let p = format!("gt_{i}.f32");
                    write_raw(&dir.join(&p), m.values())?;
                    Some(p)
                }
                None => None,
            };
            instances.push(InstanceEntry {
                id: inst.id,
                class_id: inst.class_id,
                bbox: inst.bbox.into(),
                gt_mask_path,
            });
        }

        let mut candidates = Vec::with_capacity(self.candidates.len());
        for (i, list) in self.candidates.iter().enumerate() {
            let mut entries = Vec::with_capacity(list.len());
            for (n, c) in list.iter().enumerate() {
                let p = format!("cand_{i}_{n}.f32");
                write_raw(&dir.join(&p), c.mask.values())?;
                entries.push(CandidateEntry {
                    bbox: c.bbox.into(),
                    box_score: c.box_score,
                    cls_score: c.cls_score,
                    mask_path: p,
                });
            }
            candidates.push(entries);
        }

        let pseudo = match &self.pseudo {
            None => None,
            Some(list) => {
                let mut entries = Vec::with_capacity(list.len());
                for (i, p) in list.iter().enumerate() {
                    entries.push(match p {
                        None => None,
                        Some(p) => {
                            let path = format!("pseudo_{i}.f32");
                            write_raw(&dir.join(&path), p.mask.values())?;
                            Some(PseudoEntry {
                                mask_path: path,
                                quality: p.quality,
                                weights: p.weights.clone(),
                                contributors: p.contributors.clone(),
                                k_used: p.k_used,
                                valid_count: p.valid_count,
                                fallback: p.fallback,
                            })
                        }
                    });
                }
                Some(entries)
            }
        };

        let manifest = Manifest {
            version: MANIFEST_VERSION,
            image: ImageEntry {
                path: image_path,
                height: self.image.height(),
                width: self.image.width(),
                channels: self.image.channels(),
                dtype: RAW_DTYPE.to_string(),
            },
            instances,
            candidates,
            pseudo,
            provenance: self.provenance.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), manifest.to_json()?)?;
        Ok(manifest)
    }

    pub fn candidate_sets(&self) -> Result<Vec<CandidateSet>> {
        self.instances
            .iter()
            .zip(&self.candidates)
            .map(|(gt, list)| Ok(CandidateSet::new(gt.clone(), list.clone())?))
            .collect()
    }

    pub fn scene(&self, id: u64) -> Result<Scene> {
        let pseudo = self.pseudo.clone().unwrap_or_else(|| vec![None; self.instances.len()]);
        Ok(Scene::new(id, self.image.clone(), self.instances.clone(), pseudo)?)
    }

    /// Replaces image, instances and pseudo masks with those of `scene`;
    /// instances added by the scene get no candidates and no GT mask.
    pub fn update_from_scene(&mut self, scene: &Scene) -> Result<()> {
        if scene.instances.len() < self.instances.len() {
            bail!("scene dropped instances");
        }
        let extra = scene.instances.len() - self.instances.len();
        self.image = scene.image.clone();
        self.instances = scene.instances.clone();
        self.gt_masks.extend(std::iter::repeat_n(None, extra));
        self.candidates.extend(std::iter::repeat_n(Vec::new(), extra));
        self.pseudo = Some(scene.pseudo.clone());
        Ok(())
    }

    pub fn record(&mut self, command: &str, config: serde_json::Value) {
        self.provenance.config.insert(command.to_string(), config);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_version_and_fields() {
        let good = r#"{"version":1,"image":{"path":"i","height":1,"width":1,"channels":1,"dtype":"f32le"},
            "instances":[],"candidates":[],"provenance":{"seed":null}}"#;
        assert!(Manifest::from_json(good).is_ok());
        assert!(Manifest::from_json(&good.replace("\"version\":1", "\"version\":2")).is_err());
        assert!(Manifest::from_json(&good.replace("f32le", "u8")).is_err());
        assert!(Manifest::from_json(&good.replace("\"instances\":[]", "\"instances\":[],\"extra\":1")).is_err());
    }

    #[test]
    fn rejects_misaligned_candidates() {
        let text = r#"{"version":1,"image":{"path":"i","height":1,"width":1,"channels":1,"dtype":"f32le"},
            "instances":[{"id":1,"class_id":0,"box":[0,0,1,1]}],"candidates":[],"provenance":{"seed":null}}"#;
        assert!(Manifest::from_json(text).is_err());
    }
}
