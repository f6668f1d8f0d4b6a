//! Dataset manifest, label statistics and the label co-occurrence matrix.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: String,
    /// Multi-hot ground truth, one entry per label.
    pub labels: Vec<u8>,
}

impl ImageRecord {
    pub fn has_label(&self, label: usize) -> bool {
        self.labels.get(label).copied() == Some(1)
    }

    pub fn truth(&self) -> Vec<f64> {
        self.labels.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub label_names: Vec<String>,
    pub items: Vec<ImageRecord>,
    pub split: BTreeMap<String, Split>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    /// Builds a validated manifest. Every item starts in the train split
    /// until [`split_dataset`] assigns the final partition.
    pub fn new(dataset_id: impl Into<String>, label_names: Vec<String>, items: Vec<ImageRecord>) -> Result<Self> {
        let split = items
            .iter()
            .map(|it| (it.image_id.clone(), Split::Train))
            .collect();
        let manifest = Self {
            dataset_id: dataset_id.into(),
            label_names,
            items,
            split,
            seed: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.label_names.len();
        if k == 0 {
            return Err(Error::InvalidDataset("no label columns".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &self.label_names {
            if name.trim().is_empty() {
                return Err(Error::InvalidDataset("empty label name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate label name `{name}`")));
            }
        }
        let mut ids = BTreeSet::new();
        for (row, item) in self.items.iter().enumerate() {
            if item.labels.len() != k {
                return Err(Error::InvalidDataset(format!(
                    "row {row} (`{}`) has {} labels, expected {k}",
                    item.image_id,
                    item.labels.len()
                )));
            }
            if let Some(column) = item.labels.iter().position(|&v| v > 1) {
                return Err(Error::NonBinaryLabel { row, column });
            }
            if !ids.insert(item.image_id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate image id `{}`", item.image_id)));
            }
            if !self.split.contains_key(&item.image_id) {
                return Err(Error::InvalidDataset(format!("image `{}` has no split", item.image_id)));
            }
        }
        if self.split.len() != self.items.len() {
            return Err(Error::InvalidDataset("split references unknown images".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.split.get(image_id).copied()
    }

    /// Item indices belonging to `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| self.split.get(&it.image_id) == Some(&split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let mut sizes = (0, 0, 0);
        for s in self.split.values() {
            match s {
                Split::Train => sizes.0 += 1,
                Split::Val => sizes.1 += 1,
                Split::Test => sizes.2 += 1,
            }
        }
        sizes
    }

    pub fn item(&self, image_id: &str) -> Option<(usize, &ImageRecord)> {
        self.items.iter().enumerate().find(|(_, it)| it.image_id == image_id)
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    pub total: usize,
}

pub fn compute_label_stats(manifest: &DatasetManifest) -> Result<LabelStats> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0usize; manifest.num_labels()];
    for item in &manifest.items {
        for (c, &v) in item.labels.iter().enumerate() {
            counts[c] += usize::from(v);
        }
    }
    let total = manifest.len();
    let proportions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(LabelStats {
        counts,
        proportions,
        total,
    })
}

/// Symmetric count matrix; `get(i, j)` is the number of images carrying both
/// labels. The diagonal is zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoOccurrenceMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl CoOccurrenceMatrix {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    /// Builds a matrix from explicit rows, checking symmetry and a zero diagonal.
    pub fn from_rows<R: AsRef<[u64]>>(rows: &[R]) -> Result<Self> {
        let size = rows.len();
        let mut counts = Vec::with_capacity(size * size);
        for r in rows {
            let r = r.as_ref();
            if r.len() != size {
                return Err(Error::LengthMismatch {
                    expected: size,
                    actual: r.len(),
                });
            }
            counts.extend_from_slice(r);
        }
        let m = Self { size, counts };
        for i in 0..size {
            if m.get(i, i) != 0 {
                return Err(Error::InvalidArgument(format!("diagonal entry {i} is nonzero")));
            }
            for j in 0..i {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::InvalidArgument(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.size..(i + 1) * self.size]
    }

    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        (0..self.size).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..self.size).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

pub fn compute_cooccurrence(manifest: &DatasetManifest) -> Result<CoOccurrenceMatrix> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = manifest.num_labels();
    let mut m = CoOccurrenceMatrix::zeros(k);
    let mut present = Vec::with_capacity(k);
    for item in &manifest.items {
        present.clear();
        present.extend(item.labels.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i));
        for (a, &i) in present.iter().enumerate() {
            for &j in &present[a + 1..] {
                m.counts[i * k + j] += 1;
                m.counts[j * k + i] += 1;
            }
        }
    }
    Ok(m)
}

/// Target sizes for a (train, val, test) split of `n` items: val and test
/// are rounded shares, train takes the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || !(tr + va + te - 1.0).abs().le(&1e-9) {
        return Err(Error::InvalidRatios(format!("({tr}, {va}, {te})")));
    }
    if n < 3 {
        return Err(Error::TooFewItems(n));
    }
    let val = math::round(n as f64 * va) as usize;
    let test = math::round(n as f64 * te) as usize;
    if val == 0 || test == 0 || val + test >= n {
        return Err(Error::InvalidRatios(format!(
            "ratios ({tr}, {va}, {te}) leave an empty split for {n} items"
        )));
    }
    Ok((n - val - test, val, test))
}

/// Assigns every item to exactly one split using a seeded shuffle.
pub fn split_dataset(manifest: &DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    let (_, val, test) = split_sizes(manifest.len(), ratios)?;
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = manifest.clone();
    out.split.clear();
    for (pos, &idx) in order.iter().enumerate() {
        let s = if pos < val {
            Split::Val
        } else if pos < val + test {
            Split::Test
        } else {
            Split::Train
        };
        out.split.insert(manifest.items[idx].image_id.clone(), s);
    }
    out.seed = Some(seed);
    Ok(out)
}

/// Proportional random subsample keeping `fraction` of the items (at least
/// one). Item order and split assignments are preserved; label patterns are
/// only preserved in expectation.
pub fn subsample(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
    }
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let keep = (math::round(manifest.len() as f64 * fraction) as usize).max(1);
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    let items: Vec<ImageRecord> = chosen.iter().map(|&i| manifest.items[i].clone()).collect();
    let split = items
        .iter()
        .map(|it| (it.image_id.clone(), manifest.split[&it.image_id]))
        .collect();
    Ok(DatasetManifest {
        dataset_id: format!("{}-sub", manifest.dataset_id),
        label_names: manifest.label_names.clone(),
        items,
        split,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn manifest(rows: &[&[u8]]) -> DatasetManifest {
        let k = rows.first().map_or(2, |r| r.len());
        let names = (0..k).map(|i| format!("L{i}")).collect();
        let items = rows
            .iter()
            .enumerate()
            .map(|(i, r)| ImageRecord {
                image_id: format!("img{i:03}"),
                path: format!("img{i:03}.png"),
                labels: r.to_vec(),
            })
            .collect();
        DatasetManifest::new("test", names, items).unwrap()
    }

    #[test]
    fn stats_small_example() {
        let m = manifest(&[&[1, 0], &[1, 1]]);
        let s = compute_label_stats(&m).unwrap();
        assert_eq!(s.counts, [2, 1]);
        assert_eq!(s.proportions, [1.0, 0.5]);
    }

    #[test]
    fn stats_all_zero() {
        let m = manifest(&[&[0, 0], &[0, 0], &[0, 0], &[0, 0]]);
        assert_eq!(compute_label_stats(&m).unwrap().counts, [0, 0]);
    }

    #[test]
    fn stats_empty_is_error() {
        let m = DatasetManifest::new("e", alloc::vec!["a".to_string()], Vec::new()).unwrap();
        assert_eq!(compute_label_stats(&m), Err(Error::EmptyDataset));
        assert_eq!(compute_cooccurrence(&m), Err(Error::EmptyDataset));
    }

    #[test]
    fn cooccurrence_single_image() {
        let m = manifest(&[&[1, 1]]);
        let c = compute_cooccurrence(&m).unwrap();
        assert_eq!(c.get(0, 1), 1);
        assert_eq!(c.get(1, 0), 1);
        assert_eq!(c.get(0, 0), 0);
    }

    #[test]
    fn rejects_bad_manifests() {
        let names = alloc::vec!["a".to_string(), "a".to_string()];
        assert!(DatasetManifest::new("x", names, Vec::new()).is_err());
        let item = ImageRecord {
            image_id: "i".into(),
            path: "i".into(),
            labels: alloc::vec![0, 2],
        };
        let names = alloc::vec!["a".to_string(), "b".to_string()];
        assert_eq!(
            DatasetManifest::new("x", names, alloc::vec![item]),
            Err(Error::NonBinaryLabel { row: 0, column: 1 })
        );
    }

    #[test]
    fn split_sizes_match_rounded_shares() {
        assert_eq!(split_sizes(100, (0.8, 0.1, 0.1)).unwrap(), (80, 10, 10));
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(2, (0.8, 0.1, 0.1)), Err(Error::TooFewItems(2)));
        assert!(split_sizes(10, (0.5, 0.5, 0.1)).is_err());
    }

    #[test]
    fn split_is_deterministic_and_complete() {
        let rows: Vec<[u8; 2]> = (0..37).map(|i| [(i % 2) as u8, (i % 3 == 0) as u8]).collect();
        let refs: Vec<&[u8]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = manifest(&refs);
        let a = split_dataset(&m, (0.8, 0.1, 0.1), 42).unwrap();
        let b = split_dataset(&m, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, Some(42));
        let (tr, va, te) = a.split_sizes();
        assert_eq!(tr + va + te, 37);
        assert_eq!((va, te), (4, 4));
        a.validate().unwrap();
        let c = split_dataset(&m, (0.8, 0.1, 0.1), 43).unwrap();
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn subsample_keeps_fraction() {
        let rows: Vec<[u8; 2]> = (0..50).map(|i| [(i % 2) as u8, 1]).collect();
        let refs: Vec<&[u8]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = manifest(&refs);
        let s = subsample(&m, 0.1, 3).unwrap();
        assert_eq!(s.len(), 5);
        s.validate().unwrap();
    }
}
