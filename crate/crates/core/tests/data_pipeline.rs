mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use adnet_core::data::{
    self, decode_planar, epoch_order, load_image, scan_dataset, stratified_split, Fraction, ImageSet, Split,
    IMAGE_LEN, IMAGE_SIDE,
};
use adnet_core::{Error, Exec, Tensor};

fn solid_rgb(path: &Path, side: u32, rgb: [u8; 3]) {
    image::RgbImage::from_pixel(side, side, image::Rgb(rgb)).save(path).unwrap();
}

#[test]
fn pixel_normalization() {
    let dir = tempfile::tempdir().unwrap();
    for (name, v, want) in [("black", 0u8, 0.0), ("white", 255, 1.0), ("mid", 128, 0.501_960_784_313_725_5)] {
        let p = dir.path().join(format!("{name}.png"));
        solid_rgb(&p, 100, [v; 3]);
        let t: Tensor<f64> = load_image(&p, false).unwrap();
        assert_eq!(t.shape(), [3, 100, 100]);
        assert!(t.data().iter().all(|&x| (x - want).abs() < 1e-15), "{name}");
    }
}

#[test]
fn grayscale_is_replicated_and_channels_stay_planar() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("g.png");
    image::GrayImage::from_fn(100, 100, |x, y| image::Luma([((x + 2 * y) % 256) as u8]))
        .save(&gray)
        .unwrap();
    let bytes = decode_planar(&gray, false).unwrap();
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    assert_eq!(bytes.len(), IMAGE_LEN);
    assert_eq!(bytes[..plane], bytes[plane..2 * plane]);
    assert_eq!(bytes[..plane], bytes[2 * plane..]);
    assert_eq!(bytes[3], 3);
    assert_eq!(bytes[100], 2);

    let color = dir.path().join("c.png");
    solid_rgb(&color, 100, [10, 20, 30]);
    let bytes = decode_planar(&color, false).unwrap();
    assert!(bytes[..plane].iter().all(|&b| b == 10));
    assert!(bytes[plane..2 * plane].iter().all(|&b| b == 20));
    assert!(bytes[2 * plane..].iter().all(|&b| b == 30));
}

#[test]
fn wrong_size_needs_resize() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("big.png");
    solid_rgb(&p, 128, [77, 77, 77]);
    match decode_planar(&p, false) {
        Err(Error::Dimension { width, height, path }) => {
            assert_eq!((width, height), (128, 128));
            assert_eq!(path, p);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
    let bytes = decode_planar(&p, true).unwrap();
    assert_eq!(bytes.len(), IMAGE_LEN);
    assert!(bytes.iter().all(|&b| b == 77));
}

#[test]
fn unreadable_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.png");
    std::fs::write(&p, b"not an image").unwrap();
    match decode_planar(&p, false) {
        Err(e @ Error::Ingest { .. }) => assert!(e.to_string().contains("broken.png"), "{e}"),
        other => panic!("expected ingest error, got {other:?}"),
    }
}

#[test]
fn byte_round_trip_is_lossless() {
    for b in 0..=255u8 {
        let mut x = [0.0f64];
        data::normalize_bytes(&[b], &mut x);
        assert_eq!((x[0] * 255.0).round() as u8, b);
        let mut y = [0.0f32];
        data::normalize_bytes(&[b], &mut y);
        assert_eq!((y[0] * 255.0).round() as u8, b);
    }
}

fn build_tree(root: &Path, layout: &[(&str, usize)]) {
    for (class, n) in layout {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..*n {
            solid_rgb(&dir.join(format!("{i}.png")), 100, [(i * 20) as u8; 3]);
        }
    }
}

#[test]
fn scan_skips_moderate_class_and_uses_canonical_order() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(
        dir.path(),
        &[("MildDemented", 2), ("ModerateDemented", 4), ("NonDemented", 3), ("VeryMildDemented", 1)],
    );
    std::fs::write(dir.path().join("NonDemented/notes.txt"), "x").unwrap();
    let scanned = scan_dataset(dir.path()).unwrap();
    assert_eq!(scanned.skipped, ["ModerateDemented"]);
    assert_eq!(scanned.classes.names(), ["NonDemented", "VeryMildDemented", "MildDemented"]);
    let labels: Vec<usize> = scanned.items.iter().map(|(_, l)| *l).collect();
    assert_eq!(labels, [0, 0, 0, 1, 2, 2]);
}

#[test]
fn other_class_names_fall_back_to_alphabetical() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path(), &[("zebra", 1), ("apple", 1)]);
    let scanned = scan_dataset(dir.path()).unwrap();
    assert_eq!(scanned.classes.names(), ["apple", "zebra"]);
}

fn toy_manifest(root: &Path, per_class: &[usize]) -> data::Manifest {
    let names = ["NonDemented", "VeryMildDemented", "MildDemented"];
    let layout: Vec<(&str, usize)> = names.iter().copied().zip(per_class.iter().copied()).collect();
    build_tree(root, &layout);
    let scanned = scan_dataset(root).unwrap();
    stratified_split(&scanned.items, &scanned.classes, Fraction::new(8, 10).unwrap(), 11).unwrap()
}

#[test]
fn streaming_batches_cover_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path(), &[5, 3, 2]);
    let train_labels: Vec<usize> = manifest.split_entries(Split::Train).iter().map(|e| e.label).collect();
    let n = train_labels.len();

    let one: Vec<_> = data::batches::<f64>(&manifest, Split::Train, n + 5, 0, 3, Exec::Sequential)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].0.shape(), [n, 3, 100, 100]);

    let chunks: Vec<_> = data::batches::<f64>(&manifest, Split::Train, 3, 2, 3, Exec::Parallel)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(chunks.len(), n.div_ceil(3));
    let mut seen: Vec<usize> = chunks.iter().flat_map(|(_, l)| l.clone()).collect();
    let mut want = train_labels.clone();
    seen.sort();
    want.sort();
    assert_eq!(seen, want);

    let order = epoch_order(n, 2, 3);
    let first: Vec<usize> = order[..3].iter().map(|&i| train_labels[i]).collect();
    assert_eq!(chunks[0].1, first);

    assert!(matches!(
        data::batches::<f64>(&manifest, Split::Train, 0, 0, 3, Exec::Sequential),
        Err(Error::Param(_))
    ));
}

#[test]
fn in_memory_batches_match_streaming() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path(), &[5, 3, 2]);
    let set = ImageSet::load(&manifest, Split::Train, false, Exec::Parallel).unwrap();
    let streamed: Vec<(Tensor<f32>, Vec<usize>)> = data::batches(&manifest, Split::Train, 4, 5, 9, Exec::Sequential)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    let cached: Vec<_> = set.batches::<f32>(4, 5, 9).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(streamed.len(), cached.len());
    for ((images, labels), b) in streamed.iter().zip(&cached) {
        assert_eq!(images, &b.images);
        assert_eq!(labels, &b.labels);
    }
}

#[test]
fn epoch_orders_differ_and_repeat() {
    let a = epoch_order(64, 0, 1);
    assert_eq!(a, epoch_order(64, 0, 1));
    assert_ne!(a, epoch_order(64, 1, 1));
    assert_ne!(a, epoch_order(64, 0, 2));
    let distinct: BTreeSet<Vec<usize>> = (0..10).map(|e| epoch_order(64, e, 1)).collect();
    assert_eq!(distinct.len(), 10);
}

#[test]
fn manifest_file_round_trip_and_split_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let manifest = toy_manifest(&data_dir, &[5, 3, 2]);
    assert_eq!(manifest.counts(), [(4, 1), (2, 1), (2, 0)]);
    let path = dir.path().join("m.csv");
    manifest.write(&path).unwrap();
    let back = data::Manifest::read(&path).unwrap();
    assert_eq!(back, manifest);
    let paths: BTreeSet<PathBuf> = back.entries.iter().map(|e| e.path.clone()).collect();
    assert_eq!(paths.len(), 10);
}

#[test]
fn synthetic_set_is_class_separable() {
    let dir = tempfile::tempdir().unwrap();
    let (_, set) = common::synthetic_train_set(dir.path(), 4, 1);
    let batch = set.batch::<f64>(&(0..set.len()).collect::<Vec<_>>()).unwrap();
    let means: Vec<f64> = batch
        .images
        .data()
        .chunks(IMAGE_LEN)
        .map(|img| img.iter().sum::<f64>() / IMAGE_LEN as f64)
        .collect();
    for (m, &l) in means.iter().zip(&batch.labels) {
        let centre = [50.0, 128.0, 205.0][l] / 255.0;
        assert!((m - centre).abs() < 0.02, "label {l} mean {m}");
    }
}
