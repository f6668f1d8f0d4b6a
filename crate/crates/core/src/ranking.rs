//! Review-priority scores: prediction confidence, heatmap concentration and
//! co-occurrence dependency, plus the ordering contract for each.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{CoOccurrenceMatrix, ImageRecord};
use crate::error::{Error, Result};
use crate::explain::Heatmap;
use crate::math;
use crate::nn::PredictionVector;

/// Added to co-occurrence counts before inversion.
pub const INVERSE_FREQUENCY_OFFSET: f64 = 0.01;
pub const DEFAULT_TOP_FRACTION: f64 = 0.05;
pub const DEFAULT_DEPENDENCY_THRESHOLD: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMode {
    Accuracy,
    Concentration,
    Dependency,
}

impl RankingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "concentration" => Ok(Self::Concentration),
            "dependency" => Ok(Self::Dependency),
            other => Err(Error::InvalidArgument(format!("unknown ranking mode `{other}`"))),
        }
    }

    /// Whether the first image to review has the lowest score.
    pub fn ascending(self) -> bool {
        !matches!(self, Self::Dependency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingScore {
    pub image_id: String,
    pub label_index: usize,
    pub mode: RankingMode,
    pub score: f64,
    /// 1-based position after [`rank_images`]; 0 before ranking.
    pub rank: usize,
}

/// Confidence toward the correct answer for one label: `p` for a positive,
/// `1 - p` for a negative.
pub fn accuracy_deviation_score(prediction: &PredictionVector, truth: &[u8], label: usize) -> Result<f64> {
    let k = prediction.len();
    if label >= k || label >= truth.len() {
        return Err(Error::LabelOutOfRange { index: label, labels: k });
    }
    let p = prediction.probabilities[label].clamp(0.0, 1.0);
    Ok(if truth[label] == 1 { p } else { 1.0 - p })
}

/// Share of total heatmap mass held by the largest `ceil(p · n)` cells.
/// A degenerate (all-zero) map scores `p`.
pub fn concentration_score(heatmap: &Heatmap, top_fraction: f64) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("top fraction {top_fraction} not in (0, 1)")));
    }
    let values = heatmap.values.data();
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty heatmap".into()));
    }
    let total: f64 = values.iter().sum();
    if heatmap.degenerate || total <= 0.0 {
        return Ok(top_fraction);
    }
    let take = (math::ceil(top_fraction * values.len() as f64) as usize).clamp(1, values.len());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top: f64 = sorted[..take].iter().sum();
    Ok((top / total).clamp(0.0, 1.0))
}

pub fn inverse_frequency(m: &CoOccurrenceMatrix, c: usize, j: usize) -> Result<f64> {
    check_label(m, c)?;
    check_label(m, j)?;
    if c == j {
        return Err(Error::SameLabel(c));
    }
    Ok(1.0 / (m.get(c, j) as f64 + INVERSE_FREQUENCY_OFFSET))
}

fn check_label(m: &CoOccurrenceMatrix, c: usize) -> Result<()> {
    if c >= m.size() {
        return Err(Error::LabelOutOfRange {
            index: c,
            labels: m.size(),
        });
    }
    Ok(())
}

fn dependency_parts(m: &CoOccurrenceMatrix, c: usize, threshold: u64, include: impl Fn(usize) -> bool) -> Result<f64> {
    if m.size() < 2 {
        return Err(Error::TooFewLabels(m.size()));
    }
    check_label(m, c)?;
    if threshold < 1 {
        return Err(Error::InvalidArgument("dependency threshold must be at least 1".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for j in (0..m.size()).filter(|&j| j != c) {
        let inv = inverse_frequency(m, c, j)?;
        den += inv;
        if m.get(c, j) >= threshold && include(j) {
            num += inv;
        }
    }
    Ok(num / den)
}

/// Normalized inverse-frequency mass of the labels co-occurring with `c` at
/// least `threshold` times. The denominator runs over every other label.
pub fn dependency_score(m: &CoOccurrenceMatrix, c: usize, threshold: u64) -> Result<f64> {
    dependency_parts(m, c, threshold, |_| true)
}

/// Per-image variant of [`dependency_score`]: only partners present in the
/// image count toward the numerator.
pub fn image_dependency_score(m: &CoOccurrenceMatrix, item: &ImageRecord, c: usize, threshold: u64) -> Result<f64> {
    if item.labels.len() != m.size() {
        return Err(Error::LengthMismatch {
            expected: m.size(),
            actual: item.labels.len(),
        });
    }
    dependency_parts(m, c, threshold, |j| item.labels[j] == 1)
}

/// Orders scores for review and assigns 1-based ranks. Ties keep
/// ascending `image_id` order.
pub fn rank_images(mut scores: Vec<RankingScore>, mode: RankingMode) -> Result<Vec<RankingScore>> {
    if let Some(first) = scores.first() {
        let label = first.label_index;
        if scores.iter().any(|s| s.mode != mode || s.label_index != label) {
            return Err(Error::MixedRanking);
        }
    }
    scores.sort_by(|a, b| {
        let by_score = if mode.ascending() {
            a.score.total_cmp(&b.score)
        } else {
            b.score.total_cmp(&a.score)
        };
        match by_score {
            Ordering::Equal => a.image_id.cmp(&b.image_id),
            o => o,
        }
    });
    for (i, s) in scores.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Grid;
    use alloc::vec;

    fn heat(values: Grid) -> Heatmap {
        Heatmap {
            image_id: String::new(),
            label_index: 0,
            round_index: 0,
            raw: values.clone(),
            values,
            degenerate: false,
        }
    }

    #[test]
    fn accuracy_examples() {
        let p = PredictionVector::new(vec![0.9, 0.5]);
        assert_eq!(accuracy_deviation_score(&p, &[1, 1], 0).unwrap(), 0.9);
        assert!((accuracy_deviation_score(&p, &[0, 1], 0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(accuracy_deviation_score(&p, &[1, 1], 1).unwrap(), 0.5);
        assert!(accuracy_deviation_score(&p, &[1, 1], 2).is_err());
    }

    #[test]
    fn concentration_examples() {
        let mut g = Grid::zeros(10, 10);
        g.set(3, 4, 1.0);
        assert_eq!(concentration_score(&heat(g), 0.05).unwrap(), 1.0);
        let u = concentration_score(&heat(Grid::filled(10, 10, 1.0)), 0.05).unwrap();
        assert!((u - 0.05).abs() < 1e-12);
        // Top cell holds half of the mass.
        let mut g = Grid::filled(4, 4, 1.0 / 15.0);
        g.set(0, 0, 1.0);
        let s = concentration_score(&heat(g), 1.0 / 16.0).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        let mut d = heat(Grid::zeros(3, 3));
        d.degenerate = true;
        assert_eq!(concentration_score(&d, 0.05).unwrap(), 0.05);
        assert!(concentration_score(&heat(Grid::zeros(0, 0)), 0.05).is_err());
    }

    #[test]
    fn inverse_frequency_examples() {
        let m = CoOccurrenceMatrix::from_rows(&[[0, 10, 0], [10, 0, 75], [0, 75, 0]]).unwrap();
        assert!((inverse_frequency(&m, 0, 1).unwrap() - 1.0 / 10.01).abs() < 1e-15);
        assert!((inverse_frequency(&m, 0, 2).unwrap() - 100.0).abs() < 1e-9);
        assert!((inverse_frequency(&m, 2, 1).unwrap() - 0.013_331_555_792_561).abs() < 1e-12);
        assert_eq!(inverse_frequency(&m, 1, 1), Err(Error::SameLabel(1)));
    }

    #[test]
    fn dependency_full_partner_set_is_one() {
        let m = CoOccurrenceMatrix::from_rows(&[[0, 3, 4], [3, 0, 0], [4, 0, 0]]).unwrap();
        assert!((dependency_score(&m, 0, 1).unwrap() - 1.0).abs() < 1e-15);
        let single = CoOccurrenceMatrix::from_rows(&[[0]]).unwrap();
        assert_eq!(dependency_score(&single, 0, 1), Err(Error::TooFewLabels(1)));
    }

    #[test]
    fn rank_examples() {
        let s = |id: &str, score: f64, mode| RankingScore {
            image_id: id.into(),
            label_index: 0,
            mode,
            score,
            rank: 0,
        };
        let r = rank_images(
            vec![s("a", 0.9, RankingMode::Accuracy), s("b", 0.1, RankingMode::Accuracy), s("c", 0.5, RankingMode::Accuracy)],
            RankingMode::Accuracy,
        )
        .unwrap();
        assert_eq!(r.iter().map(|x| x.score).collect::<Vec<_>>(), [0.1, 0.5, 0.9]);
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), [1, 2, 3]);
        let r = rank_images(
            vec![s("z", 0.3, RankingMode::Accuracy), s("y", 0.3, RankingMode::Accuracy)],
            RankingMode::Accuracy,
        )
        .unwrap();
        assert_eq!(r[0].image_id, "y");
        let r = rank_images(
            vec![s("a", 0.2, RankingMode::Dependency), s("b", 0.8, RankingMode::Dependency)],
            RankingMode::Dependency,
        )
        .unwrap();
        assert_eq!(r[0].score, 0.8);
        assert_eq!(
            rank_images(vec![s("a", 0.2, RankingMode::Dependency)], RankingMode::Accuracy),
            Err(Error::MixedRanking)
        );
    }
}
