//! Study volumes on disk, HU normalisation, slice labelling and
//! patient-level splits, folds and batches.
//!
//! A study is a directory holding `manifest.json` and a raw little-endian
//! int16 voxel file in `(z, y, x)` order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agatston::{categorize, CacCategory};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAW_FILE: &str = "volume.raw";
pub const LABELS_FILE: &str = "labels.json";

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 4000;
/// Display window mapped onto `[0, 1]`.
pub const HU_WINDOW: (f64, f64) = (-1000.0, 2000.0);
pub const DEFAULT_SLICE_SIZE: usize = 128;
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.49, 0.21, 0.30];

/// Half-open rectangle `[row0, row1) x [col0, col1)` in slice pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Roi {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn height(&self) -> usize {
        self.row1.saturating_sub(self.row0)
    }

    pub fn width(&self) -> usize {
        self.col1.saturating_sub(self.col0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyVolume {
    pub study_id: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// HU values, `(z, y, x)` row-major.
    pub voxels: Vec<i16>,
    /// `(row, col)` spacing in mm.
    pub pixel_spacing: (f64, f64),
    pub slice_thickness: f64,
    pub cardiac_roi: Option<Roi>,
}

impl StudyVolume {
    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.height * self.width;
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [i16] {
        let n = self.height * self.width;
        &mut self.voxels[z * n..(z + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub study_id: String,
    pub z: usize,
    pub h: usize,
    pub w: usize,
    pub pixel_spacing_mm: [f64; 2],
    pub slice_thickness_mm: f64,
    pub raw_file: String,
    /// Added to every stored value to obtain HU.
    #[serde(default)]
    pub hu_offset: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardiac_roi: Option<Roi>,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a study from its manifest file or from the directory holding it.
pub fn load_study(path: &Path) -> Result<StudyVolume> {
    let manifest_path = manifest_path(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: StudyManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let bad = |message: String| Error::Manifest {
        path: manifest_path.clone(),
        message,
    };
    if manifest.z == 0 || manifest.h == 0 || manifest.w == 0 {
        return Err(bad(format!(
            "empty volume extents {}x{}x{}",
            manifest.z, manifest.h, manifest.w
        )));
    }
    if manifest.pixel_spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(bad(format!(
            "pixel spacing {:?} must be positive",
            manifest.pixel_spacing_mm
        )));
    }
    let raw_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.raw_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = (manifest.z * manifest.h * manifest.w * 2) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::CorruptVolume {
            path: raw_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut clipped = 0usize;
    let voxels = bytes
        .chunks_exact(2)
        .map(|b| {
            let hu = i32::from(i16::from_le_bytes([b[0], b[1]])) + manifest.hu_offset;
            let c = hu.clamp(i32::from(HU_MIN), i32::from(HU_MAX));
            if c != hu {
                clipped += 1;
            }
            c as i16
        })
        .collect();
    if clipped > 0 {
        log::warn!(
            "{}: clipped {clipped} voxels into [{HU_MIN}, {HU_MAX}] HU",
            manifest.study_id
        );
    }
    Ok(StudyVolume {
        study_id: manifest.study_id,
        depth: manifest.z,
        height: manifest.h,
        width: manifest.w,
        voxels,
        pixel_spacing: (manifest.pixel_spacing_mm[0], manifest.pixel_spacing_mm[1]),
        slice_thickness: manifest.slice_thickness_mm,
        cardiac_roi: manifest.cardiac_roi,
    })
}

/// Writes `manifest.json` and `volume.raw` into `dir`, creating it if needed.
pub fn write_study(volume: &StudyVolume, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = StudyManifest {
        study_id: volume.study_id.clone(),
        z: volume.depth,
        h: volume.height,
        w: volume.width,
        pixel_spacing_mm: [volume.pixel_spacing.0, volume.pixel_spacing.1],
        slice_thickness_mm: volume.slice_thickness,
        raw_file: RAW_FILE.to_string(),
        hu_offset: 0,
        cardiac_roi: volume.cardiac_roi,
    };
    let raw: Vec<u8> = volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&dir.join(RAW_FILE), &raw)?;
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Clips to the HU window and maps affinely onto `[0, 1]`.
pub fn normalize_hu_value(hu: f64) -> f64 {
    let (lo, hi) = HU_WINDOW;
    (hu.clamp(lo, hi) - lo) / (hi - lo)
}

/// Bilinear resample of a row-major image, sampling at pixel centres.
fn resample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// One `1 x size x size` image in `[0, 1]` per slice.
pub fn normalize_hu(volume: &StudyVolume, size: usize) -> Vec<Tensor<f32>> {
    (0..volume.depth)
        .map(|z| {
            let norm: Vec<f64> = volume
                .slice(z)
                .iter()
                .map(|&hu| normalize_hu_value(f64::from(hu)))
                .collect();
            let resampled = resample_bilinear(&norm, volume.height, volume.width, size, size);
            Tensor::new(
                vec![1, size, size],
                resampled.into_iter().map(|v| v as f32).collect(),
            )
            .expect("slice shape")
        })
        .collect()
}

/// A normalised slice carrying its patient's class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSlice {
    pub image: Tensor<f32>,
    pub label: usize,
    pub patient_id: String,
    pub slice_index: usize,
}

/// Every slice of the study receives the category of the patient's total score.
pub fn label_study(volume: &StudyVolume, agatston_total: f64, size: usize) -> Result<Vec<LabeledSlice>> {
    let label = categorize(agatston_total)?.index();
    Ok(normalize_hu(volume, size)
        .into_iter()
        .enumerate()
        .map(|(slice_index, image)| LabeledSlice {
            image,
            label,
            patient_id: volume.study_id.clone(),
            slice_index,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    /// Train / validation / test.
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

fn check_disjoint<'a>(parts: impl IntoIterator<Item = (&'a str, &'a [String])>) -> Result<()> {
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for (name, ids) in parts {
        for id in ids {
            if let Some(prev) = owner.insert(id, name) {
                return Err(Error::Leakage(format!(
                    "patient {id} appears in both {prev} and {name}"
                )));
            }
        }
    }
    Ok(())
}

impl SplitManifest {
    /// Errors with [`Error::Leakage`] if any patient id is listed twice.
    pub fn validate(&self) -> Result<()> {
        check_disjoint([
            ("train", self.train.as_slice()),
            ("validation", self.validation.as_slice()),
            ("test", self.test.as_slice()),
        ])
    }
}

fn seeded_shuffle(ids: &[String], seed: u64) -> Result<Vec<String>> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Data("duplicate patient ids in input".into()));
    }
    // sort first so the result does not depend on input order
    let mut sorted: Vec<String> = unique.into_iter().cloned().collect();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sorted)
}

/// Part sizes for a train/validation/test split: every part after the first
/// gets `round(n * f)`, the first takes the remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must lie in [0, 1] and sum to 1 (sum {sum})"
        )));
    }
    let val = (n as f64 * fractions[1]).round() as usize;
    let test = (n as f64 * fractions[2]).round() as usize;
    let train = n
        .checked_sub(val + test)
        .ok_or_else(|| Error::Config(format!("fractions {fractions:?} over-allocate {n} patients")))?;
    Ok([train, val, test])
}

/// Seeded patient-level split into train / validation / test.
pub fn split_patients(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ids.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 patients to split, got {}",
            ids.len()
        )));
    }
    let [n_train, n_val, _] = split_counts(ids.len(), fractions)?;
    let shuffled = seeded_shuffle(ids, seed)?;
    let manifest = SplitManifest {
        seed,
        fractions,
        train: shuffled[..n_train].to_vec(),
        validation: shuffled[n_train..n_train + n_val].to_vec(),
        test: shuffled[n_train + n_val..].to_vec(),
    };
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldManifest {
    pub fn validate(&self) -> Result<()> {
        let names: Vec<String> = (0..self.folds.len()).map(|i| format!("fold {i}")).collect();
        check_disjoint(names.iter().map(String::as_str).zip(self.folds.iter().map(Vec::as_slice)))
    }
}

/// Seeded shuffle then round-robin assignment to `k` folds.
pub fn kfold_patients(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 || k > ids.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} patients",
            ids.len()
        )));
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in seeded_shuffle(ids, seed)?.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}

/// Example indices grouped into batches for one epoch, shuffled with
/// `seed ^ epoch`. The final batch may be short.
pub fn batch_iter(n_examples: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n_examples == 0 || batch_size == 0 {
        return Err(Error::Config(format!(
            "cannot batch {n_examples} examples with batch size {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub score: f64,
    pub category: CacCategory,
}

pub type Labels = BTreeMap<String, LabelEntry>;

pub fn load_labels(path: &Path) -> Result<Labels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads and labels every slice of the given patients, in the given order.
/// Study directories are `data_dir/<patient_id>`.
pub fn load_labeled_slices(
    data_dir: &Path,
    patient_ids: &[String],
    labels: &Labels,
    size: usize,
) -> Result<Vec<LabeledSlice>> {
    let per_study: Vec<Vec<LabeledSlice>> = patient_ids
        .par_iter()
        .map(|id| {
            let entry = labels
                .get(id)
                .ok_or_else(|| Error::Data(format!("no label for patient {id}")))?;
            let volume = load_study(&data_dir.join(id))?;
            label_study(&volume, entry.score, size)
        })
        .collect::<Result<_>>()?;
    Ok(per_study.into_iter().flatten().collect())
}
