#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qamask_cli::manifest::{Bundle, Provenance};
use qamask_core::{BBox, Candidate, GtInstance, Image, ProbMask};

pub fn qamask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qamask"))
        .args(args)
        .env_remove(qamask_cli::OUT_DIR_ENV)
        .output()
        .expect("spawn qamask")
}

/// Runs the binary and asserts the exit code, returning stdout.
pub fn qamask_ok(args: &[&str]) -> String {
    let out = qamask(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "qamask {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn json(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout).expect("json stdout")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `dir` keyed by its relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("read dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Mask equal to `value` on the pixels whose centers fall inside `b`.
pub fn box_mask(h: usize, w: usize, b: &BBox, value: f32) -> ProbMask {
    ProbMask::from_fn(h, w, |y, x| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        if cx >= b.x1() && cx < b.x2() && cy >= b.y1() && cy < b.y2() {
            value
        } else {
            0.0
        }
    })
    .unwrap()
}

/// One 10x10 GT box in a 16x16 frame with two candidates:
/// (s, u) = (0.8, 0.9) and (0.6, 0.5).
pub fn two_candidate_bundle() -> Bundle {
    let (h, w) = (16, 16);
    let gt = bx(0.0, 0.0, 10.0, 10.0);
    let a = bx(0.0, 0.0, 10.0, 9.0);
    let b = bx(0.0, 0.0, 10.0, 5.0);
    Bundle {
        image: Image::filled(h, w, 1, 0.5).unwrap(),
        instances: vec![GtInstance::new(1, 0, gt)],
        gt_masks: vec![Some(box_mask(h, w, &gt, 1.0))],
        candidates: vec![vec![
            Candidate::new(a, 0.8, 0.7, box_mask(h, w, &a, 0.9)).unwrap(),
            Candidate::new(b, 0.6, 0.7, box_mask(h, w, &b, 0.7)).unwrap(),
        ]],
        pseudo: None,
        provenance: Provenance::default(),
    }
}

pub fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}
