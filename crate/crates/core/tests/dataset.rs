//! Dataset rendering and generation checked against spectral, statistical
//! and file-level oracles.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use sha2::{Digest, Sha256};
use sslab::data::{
    generate_dataset, generate_sample, labels_for, read_manifest, render_texture, DatasetConfig, Split, TextureClass,
    TextureParams, NUM_CLASSES,
};
use sslab::imageio::{load_rgb, save_rgb};

fn dominant_bin(row: &[f64]) -> usize {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    (1..buf.len() / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap()
}

#[test]
fn stripes_peak_at_their_frequency() {
    let size = 64;
    for f in [4.0, 6.0, 8.0, 11.0, 13.0] {
        for (orientation, along_x) in [(0.0, true), (std::f64::consts::FRAC_PI_2, false)] {
            let p = TextureParams {
                frequency: f,
                orientation,
                ..TextureParams::default()
            };
            let t = render_texture(TextureClass::Stripes, &p, size).cast::<f64>();
            let line: Vec<f64> = (0..size)
                .map(|i| {
                    let (y, x) = if along_x { (size / 2, i) } else { (i, size / 2) };
                    t.data()[y * size + x]
                })
                .collect();
            assert_eq!(dominant_bin(&line), f as usize, "f={f} orientation={orientation}");
        }
    }
}

/// Upper 1% point of the χ² distribution with 6 degrees of freedom.
const CHI2_6DF_01: f64 = 16.812;

#[test]
fn cue_conflict_textures_uniform_given_shape() {
    let mut counts = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for i in 0..800 {
        let (s, t) = labels_for(Split::CueConflict, i);
        assert_ne!(s, t);
        counts[s][t] += 1;
    }
    for (s, row) in counts.iter().enumerate() {
        let n: usize = row.iter().sum();
        assert_eq!(n, 100);
        let expected = n as f64 / 7.0;
        let chi2: f64 = (0..NUM_CLASSES)
            .filter(|&t| t != s)
            .map(|t| (row[t] as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < CHI2_6DF_01, "shape {s}: chi2 {chi2}");
    }
}

#[test]
fn png_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let (_, img) = generate_sample(split, i * 13, 4, 64).unwrap();
        let path = dir.path().join(format!("{i}.png"));
        save_rgb(&path, &img).unwrap();
        let back = load_rgb::<f32>(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 255.0 + 1e-6, "max error {worst}");
    }
}

fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, format!("{digest:x}"));
            }
        }
    }
    out
}

#[test]
fn generation_is_deterministic_and_counted() {
    let cfg = DatasetConfig {
        train: 24,
        clean: 8,
        cue_conflict: 16,
        stylized: 8,
        image_size: 32,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 9, a.path()).unwrap();
    generate_dataset(&cfg, 9, b.path()).unwrap();
    assert_eq!(tree_hashes(a.path()), tree_hashes(b.path()));

    let entries = read_manifest(a.path()).unwrap();
    assert_eq!(entries.len(), 56);
    for e in &entries {
        assert!(a.path().join(&e.path).is_file());
        match e.split {
            Split::Train | Split::Clean => assert_eq!(e.shape, e.texture),
            Split::CueConflict | Split::Stylized => assert_ne!(e.shape, e.texture),
        }
    }
    let train: Vec<_> = entries.iter().filter(|e| e.split == Split::Train).collect();
    for class in 0..NUM_CLASSES {
        assert_eq!(train.iter().filter(|e| e.shape == class).count(), 3);
    }

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 10, c.path()).unwrap();
    assert_ne!(tree_hashes(a.path()), tree_hashes(c.path()));
}
