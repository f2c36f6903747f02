#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use spinalxfer::backbone::encode_feature_file;
use spinalxfer::ingest::{encode_idx_images, encode_idx_labels};
use spinalxfer::layers::seeded_rng;

pub const SIDE: usize = 8;

/// Noisy 8×8 images where class `c` lights a 3×3 block at a class-specific
/// position.
pub fn synthetic_images(n: usize, classes: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = seeded_rng(&[seed, 77]);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let (oy, ox) = ((c * 3) % 6, (c * 5 + c / 2) % 6);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let on = (oy..oy + 3).contains(&y) && (ox..ox + 3).contains(&x);
                let base: f64 = if on { 200.0 } else { 20.0 };
                pixels.push((base + rng.gen_range(-20.0..20.0)).clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(c as u8);
    }
    (pixels, labels)
}

/// IDX files in the layout the `mnist` data kind expects.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize, classes: usize) {
    fs::create_dir_all(dir).unwrap();
    let (p, l) = synthetic_images(n_train, classes, 1);
    fs::write(dir.join("train-images-idx3-ubyte"), encode_idx_images(n_train, SIDE, SIDE, &p)).unwrap();
    fs::write(dir.join("train-labels-idx1-ubyte"), encode_idx_labels(&l)).unwrap();
    let (p, l) = synthetic_images(n_test, classes, 2);
    fs::write(dir.join("t10k-images-idx3-ubyte"), encode_idx_images(n_test, SIDE, SIDE, &p)).unwrap();
    fs::write(dir.join("t10k-labels-idx1-ubyte"), encode_idx_labels(&l)).unwrap();
}

/// Config text from `(section, key, value)` triples; later triples replace
/// earlier ones with the same section and key.
pub fn config_text(pairs: &[(&str, &str, String)]) -> String {
    let mut sections: Vec<(&str, Vec<(&str, &str)>)> = Vec::new();
    for (s, k, v) in pairs {
        let idx = match sections.iter().position(|(name, _)| name == s) {
            Some(i) => i,
            None => {
                sections.push((s, Vec::new()));
                sections.len() - 1
            }
        };
        let keys = &mut sections[idx].1;
        keys.retain(|(key, _)| key != k);
        keys.push((k, v.as_str()));
    }
    let mut out = String::new();
    for (s, keys) in sections {
        out.push_str(&format!("[{s}]\n"));
        for (k, v) in keys {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push('\n');
    }
    out
}

/// Small image setup: 8×8 inputs, widths 4,8, a 2+2 epoch schedule.
pub fn image_pairs(data_dir: &Path, out: &Path) -> Vec<(&'static str, &'static str, String)> {
    vec![
        ("run", "name", "t".into()),
        ("run", "output_root", out.display().to_string()),
        ("data", "kind", "mnist".into()),
        ("data", "dir", data_dir.display().to_string()),
        ("augment", "train", "none".into()),
        ("augment", "resize", "8".into()),
        ("backbone", "widths", "4,8".into()),
        ("head", "width", "4".into()),
        ("head", "sublayers", "2".into()),
        ("head", "hidden", "8".into()),
        ("schedule", "stage1_epochs", "2".into()),
        ("schedule", "stage2_epochs", "2".into()),
        ("schedule", "step_size", "1".into()),
        ("schedule", "batch_size", "16".into()),
    ]
}

pub fn with(
    mut pairs: Vec<(&'static str, &'static str, String)>,
    extra: &[(&'static str, &'static str, &str)],
) -> Vec<(&'static str, &'static str, String)> {
    pairs.extend(extra.iter().map(|&(s, k, v)| (s, k, v.to_string())));
    pairs
}

pub fn write_config(dir: &Path, name: &str, pairs: &[(&str, &str, String)]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, config_text(pairs)).unwrap();
    p
}

/// One-hot features: `counts[i][j]` rows of true class `i` encoded as `e_j`.
pub fn one_hot_features(counts: &[Vec<u64>]) -> Vec<u8> {
    let c = counts.len();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            for _ in 0..n {
                feats.extend((0..c).map(|k| if k == j { 1.0f32 } else { 0.0 }));
                labels.push(i);
            }
        }
    }
    encode_feature_file(&feats, c, &labels).unwrap()
}

pub fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}
