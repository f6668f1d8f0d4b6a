//! Label-file parsing, image decoding and on-disk dataset round trips.

use std::fs;
use std::path::Path;

use refocus::ingest::{load_dataset, load_image, read_label_file, save_png, write_dataset};
use refocus::Error;
use refocus_core::synth::{generate, SyntheticConfig};
use refocus_core::Tensor;

fn blank_png(path: &Path) {
    save_png(&Tensor::filled(3, 8, 8, 0.5), path).unwrap();
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SyntheticConfig::separable(2);
    cfg.num_images = 12;
    let data = generate(&cfg).unwrap();
    let labels = write_dataset(dir.path(), &data.manifest, &data.images).unwrap();
    let loaded = load_dataset(dir.path(), &labels, cfg.size).unwrap();
    assert_eq!(loaded.manifest.label_names, data.manifest.label_names);
    assert_eq!(loaded.manifest.len(), 12);
    for (a, b) in loaded.manifest.items.iter().zip(&data.manifest.items) {
        assert_eq!(a.labels, b.labels);
        assert!(a.image_id.starts_with(&b.image_id));
    }
    // PNG stores 8 bits per channel.
    for (a, b) in loaded.images.iter().zip(&data.images) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "quantization error {worst}");
    }
}

#[test]
fn images_are_resized_to_the_requested_side() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    blank_png(&path);
    let t = load_image(&path, 32).unwrap();
    assert_eq!((t.channels(), t.height(), t.width()), (3, 32, 32));
    assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-9));
}

#[test]
fn non_binary_label_names_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    blank_png(&dir.path().join("a.png"));
    blank_png(&dir.path().join("b.png"));
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "image,x,y\na.png,0,1\nb.png,1,2\n").unwrap();
    match read_label_file(dir.path(), &labels) {
        Err(Error::Core(refocus_core::Error::NonBinaryLabel { row, column })) => assert_eq!((row, column), (1, 1)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_label_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    blank_png(&dir.path().join("a.png"));
    let labels = dir.path().join("labels.csv");
    for text in ["image\na.png\n", "image,x,y\na.png,0\n"] {
        fs::write(&labels, text).unwrap();
        assert!(matches!(read_label_file(dir.path(), &labels), Err(Error::LabelFile { .. })), "{text:?}");
    }
    fs::write(&labels, "image,x\nmissing.png,1\n").unwrap();
    assert!(matches!(read_label_file(dir.path(), &labels), Err(Error::NotFound(_))));
    assert!(matches!(read_label_file(dir.path(), &dir.path().join("nope.csv")), Err(Error::LabelFile { .. })));
}

#[test]
fn undecodable_image_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.png"), b"not an image").unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "image,x\na.png,1\n").unwrap();
    assert!(matches!(load_dataset(dir.path(), &labels, 32), Err(Error::Image { .. })));
}
