//! Reference Agatston scorer and the six-class risk categorisation that
//! defines ground-truth labels.
//!
//! Scoring is classic per-slice Agatston: voxels at or above 130 HU are
//! grouped into 8-connected in-plane lesions, lesions under 1 mm² are
//! discarded, and each remaining lesion contributes its area times a density
//! weight taken from its peak HU. Lesions are never merged across slices.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Roi, StudyVolume};
use crate::error::{Error, Result};

pub const CALCIUM_THRESHOLD_HU: i16 = 130;
pub const MIN_LESION_AREA_MM2: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CacCategory {
    VeryLow = 0,
    Low = 1,
    LowModerate = 2,
    Moderate = 3,
    ModerateHigh = 4,
    High = 5,
}

impl CacCategory {
    pub const ALL: [CacCategory; 6] = [
        CacCategory::VeryLow,
        CacCategory::Low,
        CacCategory::LowModerate,
        CacCategory::Moderate,
        CacCategory::ModerateHigh,
        CacCategory::High,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn display_name(self) -> &'static str {
        match self {
            CacCategory::VeryLow => "Very Low Risk",
            CacCategory::Low => "Low Risk",
            CacCategory::LowModerate => "Low/Moderate Risk",
            CacCategory::Moderate => "Moderate Risk",
            CacCategory::ModerateHigh => "Moderate/High Risk",
            CacCategory::High => "High Risk",
        }
    }

    /// Score interval `(lower, upper]` covered by the category; `VeryLow` is `{0}`.
    pub fn score_bounds(self) -> (f64, f64) {
        match self {
            CacCategory::VeryLow => (0.0, 0.0),
            CacCategory::Low => (0.0, 10.0),
            CacCategory::LowModerate => (10.0, 100.0),
            CacCategory::Moderate => (100.0, 400.0),
            CacCategory::ModerateHigh => (400.0, 1000.0),
            CacCategory::High => (1000.0, f64::INFINITY),
        }
    }
}

impl fmt::Display for CacCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

pub fn class_names() -> Vec<String> {
    CacCategory::ALL.iter().map(|c| c.display_name().to_string()).collect()
}

/// Maps a total Agatston score onto the six bins
/// `{0}, (0,10], (10,100], (100,400], (400,1000], (1000,inf)`.
pub fn categorize(score: f64) -> Result<CacCategory> {
    if score.is_nan() || score < 0.0 {
        return Err(Error::Data(format!("calcium score {score} is negative or NaN")));
    }
    Ok(match score {
        0.0 => CacCategory::VeryLow,
        s if s <= 10.0 => CacCategory::Low,
        s if s <= 100.0 => CacCategory::LowModerate,
        s if s <= 400.0 => CacCategory::Moderate,
        s if s <= 1000.0 => CacCategory::ModerateHigh,
        _ => CacCategory::High,
    })
}

/// Agatston density weight for a lesion's peak HU.
pub fn density_weight(peak_hu: i16) -> u8 {
    match peak_hu {
        h if h < CALCIUM_THRESHOLD_HU => 0,
        h if h < 200 => 1,
        h if h < 300 => 2,
        h if h < 400 => 3,
        _ => 4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub slice_index: usize,
    /// `(row, col)` pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub area_mm2: f64,
    pub peak_hu: i16,
    pub weight: u8,
    /// Zero for lesions below the minimum area.
    pub score: f64,
}

pub fn threshold_mask(slice: &[i16], threshold: i16) -> Vec<bool> {
    slice.iter().map(|&hu| hu >= threshold).collect()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// 8-connected components of a row-major `height x width` mask, ordered by
/// `(min row, min col)`. Pixels within a component are row-major.
pub fn connected_components_2d(mask: &[bool], height: usize, width: usize) -> Vec<Vec<(usize, usize)>> {
    assert_eq!(mask.len(), height * width, "mask size");
    const UNSET: usize = usize::MAX;
    let mut label = vec![UNSET; mask.len()];
    let mut parent: Vec<usize> = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let idx = r * width + c;
            if !mask[idx] {
                continue;
            }
            // previously visited 8-neighbours: W, NW, N, NE
            let mut neighbours = [UNSET; 4];
            if c > 0 {
                neighbours[0] = label[idx - 1];
            }
            if r > 0 {
                let up = idx - width;
                if c > 0 {
                    neighbours[1] = label[up - 1];
                }
                neighbours[2] = label[up];
                if c + 1 < width {
                    neighbours[3] = label[up + 1];
                }
            }
            let mut root = UNSET;
            for &n in neighbours.iter().filter(|&&n| n != UNSET) {
                let rn = find(&mut parent, n);
                root = match root {
                    UNSET => rn,
                    cur if cur == rn => cur,
                    cur => {
                        let (lo, hi) = (cur.min(rn), cur.max(rn));
                        parent[hi] = lo;
                        lo
                    }
                };
            }
            if root == UNSET {
                root = parent.len();
                parent.push(root);
            }
            label[idx] = root;
        }
    }
    let mut slot = vec![UNSET; parent.len()];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for (idx, &l) in label.iter().enumerate() {
        if l == UNSET {
            continue;
        }
        let root = find(&mut parent, l);
        if slot[root] == UNSET {
            slot[root] = components.len();
            components.push(Vec::new());
        }
        components[slot[root]].push((idx / width, idx % width));
    }
    components.sort_by_key(|px| {
        let min_row = px.iter().map(|p| p.0).min().unwrap_or(0);
        let min_col = px.iter().map(|p| p.1).min().unwrap_or(0);
        (min_row, min_col)
    });
    components
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub score: f64,
    pub lesions: Vec<Lesion>,
}

/// Agatston score of one `height x width` HU slice with `(row, col)` pixel
/// spacing in mm. With an ROI, voxels outside it are ignored.
pub fn agatston_slice_score(
    slice: &[i16],
    height: usize,
    width: usize,
    pixel_spacing: (f64, f64),
    roi: Option<&Roi>,
    slice_index: usize,
) -> SliceScore {
    let mut mask = threshold_mask(slice, CALCIUM_THRESHOLD_HU);
    if let Some(roi) = roi {
        for (idx, m) in mask.iter_mut().enumerate() {
            *m &= roi.contains(idx / width, idx % width);
        }
    }
    let pixel_area = pixel_spacing.0 * pixel_spacing.1;
    let mut score = 0.0;
    let mut lesions = Vec::new();
    for pixels in connected_components_2d(&mask, height, width) {
        let area_mm2 = pixels.len() as f64 * pixel_area;
        let peak_hu = pixels
            .iter()
            .map(|&(r, c)| slice[r * width + c])
            .max()
            .expect("component is non-empty");
        let weight = density_weight(peak_hu);
        let lesion_score = if area_mm2 >= MIN_LESION_AREA_MM2 {
            area_mm2 * f64::from(weight)
        } else {
            0.0
        };
        score += lesion_score;
        lesions.push(Lesion {
            slice_index,
            pixels,
            area_mm2,
            peak_hu,
            weight,
            score: lesion_score,
        });
    }
    SliceScore { score, lesions }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyScore {
    pub total: f64,
    pub per_slice: Vec<f64>,
    pub lesion_count: usize,
}

/// Sum of per-slice scores in slice order.
pub fn agatston_study_score(volume: &StudyVolume, roi: Option<&Roi>) -> StudyScore {
    let slices: Vec<SliceScore> = (0..volume.depth)
        .into_par_iter()
        .map(|z| {
            agatston_slice_score(
                volume.slice(z),
                volume.height,
                volume.width,
                volume.pixel_spacing,
                roi,
                z,
            )
        })
        .collect();
    let per_slice: Vec<f64> = slices.iter().map(|s| s.score).collect();
    StudyScore {
        total: per_slice.iter().sum(),
        per_slice,
        lesion_count: slices.iter().map(|s| s.lesions.iter().filter(|l| l.score > 0.0).count()).sum(),
    }
}

/// Machine-readable output of the `score` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub study_id: String,
    pub total_score: f64,
    pub category_index: usize,
    pub category_name: String,
    pub roi_restricted: bool,
    pub per_slice: Vec<f64>,
}

pub fn score_report(volume: &StudyVolume, roi: Option<&Roi>) -> Result<ScoreReport> {
    let score = agatston_study_score(volume, roi);
    let category = categorize(score.total)?;
    Ok(ScoreReport {
        study_id: volume.study_id.clone(),
        total_score: score.total,
        category_index: category.index(),
        category_name: category.display_name().to_string(),
        roi_restricted: roi.is_some(),
        per_slice: score.per_slice,
    })
}
