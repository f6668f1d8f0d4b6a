//! Label-file parsing and image decoding.
//!
//! The label file is UTF-8 CSV with a header row: the first column holds the
//! image path relative to the dataset root (it doubles as the image id), the
//! remaining columns hold 0/1 values, one per label.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use refocus_core::dataset::{DatasetManifest, ImageRecord};
use refocus_core::Tensor;

use crate::error::{Error, Result};

/// A manifest together with its decoded images, in item order.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

/// Parses the label file into a manifest. Paths are resolved against `root`
/// and must exist.
pub fn read_label_file(root: &Path, labels_file: &Path) -> Result<DatasetManifest> {
    let label_err = |message: String| Error::LabelFile {
        path: labels_file.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(labels_file)
        .map_err(|e| label_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| label_err(e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(label_err("header needs an image column and at least one label column".into()));
    }
    let label_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut items = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| label_err(e.to_string()))?;
        if record.len() != header.len() {
            return Err(label_err(format!("row {row}: expected {} columns, found {}", header.len(), record.len())));
        }
        let rel = &record[0];
        let path = root.join(rel);
        if !path.is_file() {
            return Err(Error::NotFound(format!("image file {}", path.display())));
        }
        let labels = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(column, cell)| match cell {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                _ => Err(Error::Core(refocus_core::Error::NonBinaryLabel { row, column })),
            })
            .collect::<Result<Vec<_>>>()?;
        items.push(ImageRecord {
            image_id: rel.to_string(),
            path: path.to_string_lossy().into_owned(),
            labels,
        });
    }
    let dataset_id = labels_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(DatasetManifest::new(dataset_id, label_names, items)?)
}

/// Decodes an image file to a 3-channel tensor in `[0, 1]` at `size × size`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let side = u32::try_from(size).map_err(|_| Error::Config(format!("image size {size} too large")))?;
    let rgb = if rgb.dimensions() == (side, side) {
        rgb
    } else {
        image::imageops::resize(&rgb, side, side, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(3, size, size, data)?)
}

pub fn load_images(manifest: &DatasetManifest, size: usize) -> Result<Vec<Tensor>> {
    manifest
        .items
        .iter()
        .map(|it| load_image(Path::new(&it.path), size))
        .collect()
}

/// Reads the label file and decodes every image.
pub fn load_dataset(root: &Path, labels_file: &Path, size: usize) -> Result<LoadedDataset> {
    let manifest = read_label_file(root, labels_file)?;
    let images = load_images(&manifest, size)?;
    Ok(LoadedDataset { manifest, images })
}

/// Encodes a `[0, 1]` RGB tensor as an 8-bit PNG.
pub fn save_png(tensor: &Tensor, path: &Path) -> Result<()> {
    if tensor.channels() != 3 {
        return Err(Error::Rejected(format!("expected 3 channels, got {}", tensor.channels())));
    }
    let (h, w) = (tensor.height(), tensor.width());
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (tensor.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes images and a label file for `manifest` under `root`, one PNG per
/// item. Used to materialize synthetic fixtures as an on-disk dataset.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, images: &[Tensor]) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let labels_path = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| Error::LabelFile {
        path: labels_path.clone(),
        message: e.to_string(),
    })?;
    let mut header = vec!["image".to_string()];
    header.extend(manifest.label_names.iter().cloned());
    let csv_err = |e: csv::Error| Error::LabelFile {
        path: labels_path.clone(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for (item, image) in manifest.items.iter().zip(images) {
        let file = format!("{}.png", item.image_id);
        save_png(image, &root.join(&file))?;
        let mut row = vec![file];
        row.extend(item.labels.iter().map(u8::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(labels_path)
}
