//! Synthetic two-label image fixtures with known signal locations, and an
//! oracle annotator that masks exactly the planted regions.
//!
//! Label 0 is a low-contrast checker patch. Label 1 is a bright marker that,
//! outside the test split, accompanies label 0 far more often than chance.
//! A classifier can therefore score label 0 from the marker alone; test
//! items break that shortcut by drawing the marker independently.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use alloc::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{rasterize, PolygonAnnotation};
use crate::dataset::{split_sizes, DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::tensor::{Grid, Tensor};

pub const TARGET_LABEL: usize = 0;
pub const MARKER_LABEL: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub size: usize,
    /// P(label 0).
    pub prevalence: f64,
    /// P(marker | label 0) in train and val.
    pub cooccurrence: f64,
    /// P(marker | not label 0) in train and val.
    pub marker_rate: f64,
    /// When set, test-split markers are drawn with the overall marker rate,
    /// independent of label 0.
    pub decorrelate_test: bool,
    /// Side length of the checker patch, in pixels.
    pub patch: usize,
    /// Side length of the marker, in pixels.
    pub marker: usize,
    /// Checker amplitude around the background level.
    pub contrast: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SyntheticConfig {
    /// Biased fixture: the marker co-occurs with 80% of label-0 positives.
    pub fn confounded(seed: u64) -> Self {
        Self {
            num_images: 600,
            size: 64,
            prevalence: 0.35,
            cooccurrence: 0.8,
            marker_rate: 0.1,
            decorrelate_test: true,
            patch: 16,
            marker: 8,
            contrast: 0.1,
            noise: 0.1,
            ratios: (0.7, 0.15, 0.15),
            seed,
        }
    }

    /// Unbiased, easy fixture: both labels independent and clearly visible.
    pub fn separable(seed: u64) -> Self {
        Self {
            num_images: 200,
            size: 32,
            prevalence: 0.5,
            cooccurrence: 0.5,
            marker_rate: 0.5,
            decorrelate_test: false,
            patch: 10,
            marker: 6,
            contrast: 0.3,
            noise: 0.03,
            ratios: (0.7, 0.15, 0.15),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.prevalence, self.cooccurrence, self.marker_rate];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if self.patch + self.marker + 2 > self.size || self.patch == 0 || self.marker == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch {} and marker {} do not fit a {}px image",
                self.patch, self.marker, self.size
            )));
        }
        Ok(())
    }

    /// Overall marker rate in the biased splits.
    pub fn overall_marker_rate(&self) -> f64 {
        self.prevalence * self.cooccurrence + (1.0 - self.prevalence) * self.marker_rate
    }
}

/// Axis-aligned square in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub y: usize,
    pub x: usize,
    pub side: usize,
}

impl Region {
    fn overlaps(&self, other: &Region, gap: usize) -> bool {
        self.y < other.y + other.side + gap
            && other.y < self.y + self.side + gap
            && self.x < other.x + other.side + gap
            && other.x < self.x + self.side + gap
    }

    /// Outline in normalized image coordinates.
    pub fn polygon(&self, image_size: usize) -> Vec<[f64; 2]> {
        let s = image_size as f64;
        let (x0, y0) = (self.x as f64 / s, self.y as f64 / s);
        let (x1, y1) = ((self.x + self.side) as f64 / s, (self.y + self.side) as f64 / s);
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
    /// Planted regions per item, indexed by label.
    pub regions: Vec<[Option<Region>; 2]>,
}

impl SyntheticDataset {
    pub fn truth(&self, index: usize) -> Vec<f64> {
        self.manifest.items[index].truth()
    }
}

const BACKGROUND: f64 = 0.4;
const MARKER_LEVEL: f64 = 0.95;

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let (n_train, n_val, n_test) = split_sizes(config.num_images, config.ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut items = Vec::with_capacity(config.num_images);
    let mut images = Vec::with_capacity(config.num_images);
    let mut regions = Vec::with_capacity(config.num_images);
    let mut split = BTreeMap::new();
    let splits = [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)];
    let mut index = 0;
    for (which, count) in splits {
        for _ in 0..count {
            let a = rng.random_bool(config.prevalence);
            let p_marker = match (which, config.decorrelate_test, a) {
                (Split::Test, true, _) => config.overall_marker_rate(),
                (_, _, true) => config.cooccurrence,
                (_, _, false) => config.marker_rate,
            };
            let b = rng.random_bool(p_marker);
            let (image, planted) = draw(config, a, b, &mut rng);
            let image_id = format!("syn_{index:05}");
            split.insert(image_id.clone(), which);
            items.push(ImageRecord {
                image_id,
                path: String::new(),
                labels: vec![a as u8, b as u8],
            });
            images.push(image);
            regions.push(planted);
            index += 1;
        }
    }
    let mut manifest = DatasetManifest::new(
        format!("synthetic-{}", config.seed),
        vec!["patch".into(), "marker".into()],
        items,
    )?;
    manifest.split = split;
    manifest.seed = Some(config.seed);
    manifest.validate()?;
    Ok(SyntheticDataset {
        config: config.clone(),
        manifest,
        images,
        regions,
    })
}

fn place<R: Rng>(rng: &mut R, size: usize, side: usize, avoid: Option<&Region>) -> Region {
    loop {
        let r = Region {
            y: rng.random_range(0..=size - side),
            x: rng.random_range(0..=size - side),
            side,
        };
        if avoid.is_none_or(|o| !r.overlaps(o, 1)) {
            return r;
        }
    }
}

fn draw<R: Rng>(config: &SyntheticConfig, a: bool, b: bool, rng: &mut R) -> (Tensor, [Option<Region>; 2]) {
    let s = config.size;
    let mut img = Tensor::zeros(3, s, s);
    for v in img.data_mut() {
        *v = BACKGROUND + rng.random_range(-config.noise..=config.noise);
    }
    let patch = a.then(|| place(rng, s, config.patch, None));
    let marker = b.then(|| place(rng, s, config.marker, patch.as_ref()));
    if let Some(r) = patch {
        for y in r.y..r.y + r.side {
            for x in r.x..r.x + r.side {
                let sign = if ((y - r.y) / 2 + (x - r.x) / 2) % 2 == 0 { 1.0 } else { -1.0 };
                for c in 0..3 {
                    let v = img.get(c, y, x) + sign * config.contrast;
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    if let Some(r) = marker {
        for y in r.y..r.y + r.side {
            for x in r.x..r.x + r.side {
                img.set(0, y, x, MARKER_LEVEL);
                img.set(1, y, x, MARKER_LEVEL);
                img.set(2, y, x, 0.1);
            }
        }
    }
    (img, [patch, marker])
}

/// Produces ground-truth attention masks for synthetic items.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleAnnotator;

impl OracleAnnotator {
    /// Polygon annotation of the planted region for `label`, if the item
    /// carries one.
    pub fn annotate(&self, data: &SyntheticDataset, index: usize, label: usize, round: u32) -> Result<Option<PolygonAnnotation>> {
        let regions = data.regions.get(index).ok_or(Error::InvalidArgument(format!("no item {index}")))?;
        let region = *regions.get(label).ok_or(Error::LabelOutOfRange { index: label, labels: 2 })?;
        Ok(region.map(|r| PolygonAnnotation {
            image_id: data.manifest.items[index].image_id.clone(),
            label_index: label,
            round_index: round,
            accepted_from_heatmap: false,
            note: String::from("oracle"),
            polygons: vec![r.polygon(data.config.size)],
        }))
    }

    /// Rasterized oracle mask at `rows × cols`.
    pub fn mask(&self, data: &SyntheticDataset, index: usize, label: usize, rows: usize, cols: usize) -> Result<Option<Grid>> {
        match self.annotate(data, index, label, 0)? {
            Some(a) => Ok(Some(rasterize(&a, rows, cols)?.mask)),
            None => Ok(None),
        }
    }
}
