//! Seeded synthetic cardiac CT studies with analytically known calcium.
//!
//! Each slice is a chest cross-section: air, a soft-tissue body ellipse, two
//! lungs and a rectangular cardiac region of interest. Calcium is planted as
//! axis-aligned boxes inside the ROI with constant HU, so every lesion's
//! Agatston contribution is `pixels * pixel_area * weight` per slice it
//! covers. Background noise is clipped below the 130 HU threshold, which
//! keeps the truth exact. Optional ribs and a vertebra sit outside the ROI.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agatston::{categorize, density_weight, CacCategory, CALCIUM_THRESHOLD_HU, MIN_LESION_AREA_MM2};
use crate::data::{write_study, LabelEntry, Labels, Roi, StudyVolume, HU_MIN, LABELS_FILE};
use crate::error::{Error, Result};
use crate::io::write_json_atomic;
use crate::model::stream_rng;

pub const TRUTH_FILE: &str = "truth.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const DEFAULT_SLICE_RANGE: (usize, usize) = (56, 96);

const AIR_HU: f64 = -1000.0;
const SOFT_TISSUE_HU: f64 = 40.0;
const HEART_HU: f64 = 45.0;
const LUNG_HU: f64 = -800.0;
const BONE_HU: (i16, i16) = (700, 1200);
/// Background voxels never exceed this, whatever the noise draw.
const BACKGROUND_CEILING_HU: i16 = CALCIUM_THRESHOLD_HU - 1;
/// Minimum gap in pixels between planted structures and the ROI border.
const MARGIN: usize = 2;
/// Low-risk specks are `1 x SPECK_WIDTH` pixels, too small to score.
const SPECK_WIDTH: usize = 2;
const SPECK_HU: (i16, i16) = (330, 370);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub study_id: String,
    pub target_category: CacCategory,
    pub slices: usize,
    /// Slices are `size x size`.
    pub size: usize,
    pub pixel_spacing: (f64, f64),
    pub slice_thickness: f64,
    pub include_bone_distractors: bool,
    pub noise_std: f64,
    /// Upper bound on scored lesion boxes.
    pub max_lesions: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            study_id: "P000".into(),
            target_category: CacCategory::VeryLow,
            slices: 64,
            size: 128,
            pixel_spacing: (0.5, 0.5),
            slice_thickness: 3.0,
            include_bone_distractors: false,
            noise_std: 15.0,
            max_lesions: 3,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::Spec("phantom needs at least one slice".into()));
        }
        if self.size < 64 {
            return Err(Error::Spec(format!("slice size {} below 64", self.size)));
        }
        if !(self.pixel_spacing.0 > 0.0 && self.pixel_spacing.1 > 0.0) {
            return Err(Error::Spec(format!(
                "pixel spacing {:?} must be positive",
                self.pixel_spacing
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Spec(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }

    pub fn cardiac_roi(&self) -> Roi {
        let s = self.size as f64;
        Roi {
            row0: (0.32 * s) as usize,
            col0: (0.40 * s) as usize,
            row1: (0.68 * s) as usize,
            col1: (0.60 * s) as usize,
        }
    }
}

/// A constant-HU box spanning slices `z0..z1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedLesion {
    pub z0: usize,
    pub z1: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub hu: i16,
    /// Agatston contribution summed over all covered slices.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub study_id: String,
    pub lesions: Vec<PlantedLesion>,
    /// Sub-threshold-area specks (`1 x 2` pixels) as `(z, row, col, hu)`
    /// of their left pixel; they contribute nothing to the score.
    pub specks: Vec<(usize, usize, usize, i16)>,
    pub score: f64,
    pub category: CacCategory,
    pub cardiac_roi: Roi,
    pub has_distractors: bool,
}

/// Per-category lesion recipe: HU, and the total score aimed for.
fn recipe(category: CacCategory) -> Option<(i16, f64)> {
    match category {
        CacCategory::VeryLow => None,
        CacCategory::Low => Some((160, 5.0)),
        CacCategory::LowModerate => Some((195, 55.0)),
        CacCategory::Moderate => Some((600, 250.0)),
        CacCategory::ModerateHigh => Some((1100, 700.0)),
        CacCategory::High => Some((1800, 2000.0)),
    }
}

fn near_square(pixels: usize) -> (usize, usize) {
    let rows = ((pixels as f64).sqrt().floor() as usize).max(1);
    (rows, pixels.div_ceil(rows))
}

/// Box shape and number of covered slices that land the analytic score in
/// the target category.
fn plan_box(spec: &PhantomSpec, hu: i16, target: f64) -> Result<((usize, usize), usize)> {
    let category = spec.target_category;
    let (lo, hi) = category.score_bounds();
    let pixel_area = spec.pixel_spacing.0 * spec.pixel_spacing.1;
    let weight = f64::from(density_weight(hu));
    let min_pixels = ((MIN_LESION_AREA_MM2 / pixel_area) - 1e-9).ceil().max(1.0) as usize;
    let roi = spec.cardiac_roi();
    let fits = |(h, w): (usize, usize)| h + 2 * MARGIN <= roi.height() && w + 2 * MARGIN <= roi.width();
    let per_slice = |shape: (usize, usize)| (shape.0 * shape.1) as f64 * pixel_area * weight;
    let unreachable = || {
        Error::Spec(format!(
            "cannot reach {category:?} with {} slices at spacing {:?}",
            spec.slices, spec.pixel_spacing
        ))
    };

    let wanted = (target / spec.slices as f64 / (weight * pixel_area)).round() as usize;
    let mut pixels = if category == CacCategory::Low {
        min_pixels
    } else {
        wanted.max(min_pixels)
    };
    // short studies: settle for the largest box that fits
    while !fits(near_square(pixels)) && pixels > min_pixels {
        pixels -= 1;
    }
    let mut shape = near_square(pixels);
    if !fits(shape) {
        return Err(unreachable());
    }
    let mut covered = if category == CacCategory::Low {
        ((target / per_slice(shape)).floor() as usize).clamp(1, spec.slices)
    } else {
        spec.slices
    };
    // grow the box while the score is still at or below the category floor
    while per_slice(shape) * covered as f64 <= lo {
        let next = near_square(shape.0 * shape.1 + 1);
        if !fits(next) {
            return Err(unreachable());
        }
        shape = next;
    }
    // then shrink the covered slices if it overshoots the ceiling
    if per_slice(shape) * covered as f64 > hi {
        covered = (hi / per_slice(shape)).floor() as usize;
    }
    let total = per_slice(shape) * covered as f64;
    if covered == 0 || total <= lo || total > hi {
        return Err(unreachable());
    }
    Ok((shape, covered))
}

struct Canvas<'a> {
    size: usize,
    slice: &'a mut [i16],
}

impl Canvas<'_> {
    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, mut value: impl FnMut() -> i16) {
        for r in 0..self.size {
            for c in 0..self.size {
                let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    self.slice[r * self.size + c] = value();
                }
            }
        }
    }
}

/// Smooth anatomy without noise, as float HU.
fn anatomy(size: usize, roi: &Roi) -> Vec<f64> {
    let s = size as f64;
    let mut base = vec![AIR_HU; size * size];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let inside = |cy: f64, cx: f64, ry: f64, rx: f64| {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            };
            let v = &mut base[r * size + c];
            if inside(0.5 * s, 0.5 * s, 0.40 * s, 0.47 * s) {
                *v = SOFT_TISSUE_HU;
            }
            if inside(0.48 * s, 0.27 * s, 0.24 * s, 0.12 * s) || inside(0.48 * s, 0.73 * s, 0.24 * s, 0.12 * s) {
                *v = LUNG_HU;
            }
            if roi.contains(r, c) {
                *v = HEART_HU;
            }
        }
    }
    base
}

fn draw_bones(canvas: &mut Canvas<'_>, rng: &mut ChaCha8Rng, ribs: &[(f64, f64)], vertebra_hu: i16) {
    let s = canvas.size as f64;
    canvas.ellipse(0.80 * s, 0.5 * s, 0.07 * s, 0.08 * s, || vertebra_hu);
    for &(cy, cx) in ribs {
        let hu = rng.random_range(BONE_HU.0..=BONE_HU.1);
        canvas.ellipse(cy, cx, 0.025 * s, 0.04 * s, || hu);
    }
}

/// Rib centres on a ring just inside the body outline, clear of the ROI.
fn rib_centres(size: usize) -> Vec<(f64, f64)> {
    let s = size as f64;
    [200.0f64, 225.0, 250.0, 290.0, 315.0, 340.0, 20.0, 160.0]
        .iter()
        .map(|deg| {
            let t = deg.to_radians();
            (0.5 * s - 0.34 * s * t.sin(), 0.5 * s + 0.41 * s * t.cos())
        })
        .collect()
}

/// True if no pixel within `MARGIN` of the box is already calcified.
fn clear_of(occupied: &[bool], size: usize, row: usize, col: usize, h: usize, w: usize) -> bool {
    let (r0, c0) = (row.saturating_sub(MARGIN), col.saturating_sub(MARGIN));
    let (r1, c1) = ((row + h + MARGIN).min(size), (col + w + MARGIN).min(size));
    (r0..r1).all(|r| (c0..c1).all(|c| !occupied[r * size + c]))
}

fn random_position(rng: &mut ChaCha8Rng, roi: &Roi, h: usize, w: usize) -> (usize, usize) {
    let row = rng.random_range(roi.row0 + MARGIN..=roi.row1 - MARGIN - h);
    let col = rng.random_range(roi.col0 + MARGIN..=roi.col1 - MARGIN - w);
    (row, col)
}

/// Builds one phantom study and its analytic truth.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(StudyVolume, PhantomTruth)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let size = spec.size;
    let roi = spec.cardiac_roi();
    let pixel_area = spec.pixel_spacing.0 * spec.pixel_spacing.1;

    let mut lesions = Vec::new();
    if let Some((hu, target)) = recipe(spec.target_category) {
        if spec.max_lesions == 0 {
            return Err(Error::Spec(format!(
                "{:?} requires calcium but max_lesions is 0",
                spec.target_category
            )));
        }
        let ((h, w), covered) = plan_box(spec, hu, target)?;
        let segments = rng.random_range(1..=spec.max_lesions.min(3).min(covered));
        let start = rng.random_range(0..=spec.slices - covered);
        let mut z = start;
        for i in 0..segments {
            let len = covered / segments + usize::from(i < covered % segments);
            let (row, col) = random_position(&mut rng, &roi, h, w);
            lesions.push(PlantedLesion {
                z0: z,
                z1: z + len,
                row,
                col,
                height: h,
                width: w,
                hu,
                score: 0.0,
            });
            z += len;
        }
    }

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let clip = 3.0 * spec.noise_std;
    let base = anatomy(size, &roi);
    let ribs = rib_centres(size);
    let vertebra_hu = rng.random_range(BONE_HU.0..=BONE_HU.1);
    let make_specks =
        spec.target_category == CacCategory::Low && SPECK_WIDTH as f64 * pixel_area < MIN_LESION_AREA_MM2;

    let mut voxels = vec![0i16; spec.slices * size * size];
    let mut specks = Vec::new();
    let mut per_slice_score = vec![0.0f64; spec.slices];
    for (z, slice) in voxels.chunks_exact_mut(size * size).enumerate() {
        for (v, &b) in slice.iter_mut().zip(&base) {
            let n = if spec.noise_std > 0.0 {
                noise.sample(&mut rng).clamp(-clip, clip)
            } else {
                0.0
            };
            *v = ((b + n).round() as i16).clamp(HU_MIN, BACKGROUND_CEILING_HU);
        }
        let mut canvas = Canvas { size, slice };
        if spec.include_bone_distractors {
            draw_bones(&mut canvas, &mut rng, &ribs, vertebra_hu);
        }
        let slice = canvas.slice;
        let mut occupied = vec![false; size * size];
        for lesion in lesions.iter_mut().filter(|l| (l.z0..l.z1).contains(&z)) {
            for r in lesion.row..lesion.row + lesion.height {
                for c in lesion.col..lesion.col + lesion.width {
                    slice[r * size + c] = lesion.hu;
                    occupied[r * size + c] = true;
                }
            }
            let area = (lesion.height * lesion.width) as f64 * pixel_area;
            let s = area * f64::from(density_weight(lesion.hu));
            lesion.score += s;
            per_slice_score[z] += s;
        }
        if make_specks {
            let mut placed = 0;
            for _ in 0..50 {
                if placed == 2 {
                    break;
                }
                let (r, c) = random_position(&mut rng, &roi, 1, SPECK_WIDTH);
                if clear_of(&occupied, size, r, c, 1, SPECK_WIDTH) {
                    let hu = rng.random_range(SPECK_HU.0..=SPECK_HU.1);
                    for i in r * size + c..r * size + c + SPECK_WIDTH {
                        slice[i] = hu;
                        occupied[i] = true;
                    }
                    specks.push((z, r, c, hu));
                    placed += 1;
                }
            }
        }
    }

    let score: f64 = per_slice_score.iter().sum();
    let category = categorize(score)?;
    if category != spec.target_category {
        return Err(Error::Spec(format!(
            "planted score {score} falls in {category:?}, not {:?}",
            spec.target_category
        )));
    }
    let volume = StudyVolume {
        study_id: spec.study_id.clone(),
        depth: spec.slices,
        height: size,
        width: size,
        voxels,
        pixel_spacing: spec.pixel_spacing,
        slice_thickness: spec.slice_thickness,
        cardiac_roi: Some(roi),
    };
    let truth = PhantomTruth {
        study_id: spec.study_id.clone(),
        lesions,
        specks,
        score,
        category,
        cardiac_roi: roi,
        has_distractors: spec.include_bone_distractors,
    };
    Ok((volume, truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub include_bone_distractors: bool,
    pub noise_std: f64,
    pub slice_range: (usize, usize),
    pub size: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            include_bone_distractors: false,
            noise_std: 15.0,
            slice_range: DEFAULT_SLICE_RANGE,
            size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStudy {
    pub study_id: String,
    pub category: CacCategory,
    pub slices: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub mix: [f64; 6],
    pub counts: [usize; 6],
    pub options: DatasetOptions,
    pub studies: Vec<DatasetStudy>,
}

/// Hamilton apportionment: floors first, then leftover seats by largest
/// fractional part (lower index wins ties).
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn validate_mix(mix: &[f64; 6]) -> Result<()> {
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || mix.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::Config(format!(
            "category mix {mix:?} must be non-negative and sum to 1 (sum {sum})"
        )));
    }
    Ok(())
}

/// Specs for a whole dataset, without touching the filesystem.
pub fn dataset_specs(n_patients: usize, mix: &[f64; 6], seed: u64, options: &DatasetOptions) -> Result<Vec<PhantomSpec>> {
    validate_mix(mix)?;
    let (lo, hi) = options.slice_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("bad slice range {:?}", options.slice_range)));
    }
    let counts = largest_remainder(n_patients, mix);
    let mut categories: Vec<CacCategory> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(CacCategory::ALL[c], k))
        .collect();
    rand::seq::SliceRandom::shuffle(categories.as_mut_slice(), &mut stream_rng(seed, u64::MAX));
    Ok(categories
        .into_iter()
        .enumerate()
        .map(|(i, target_category)| {
            let mut rng = stream_rng(seed, i as u64);
            PhantomSpec {
                study_id: format!("P{i:03}"),
                target_category,
                slices: rng.random_range(lo..=hi),
                size: options.size,
                include_bone_distractors: options.include_bone_distractors,
                noise_std: options.noise_std,
                seed: rng.next_u64(),
                ..PhantomSpec::default()
            }
        })
        .collect())
}

/// Writes `n_patients` phantom studies plus `labels.json` and `dataset.json`
/// under `out_dir`.
pub fn generate_dataset(
    n_patients: usize,
    mix: &[f64; 6],
    seed: u64,
    out_dir: &Path,
    options: &DatasetOptions,
) -> Result<DatasetManifest> {
    let specs = dataset_specs(n_patients, mix, seed, options)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let studies: Vec<DatasetStudy> = specs
        .par_iter()
        .map(|spec| {
            let (volume, truth) = generate_phantom(spec)?;
            let dir: PathBuf = out_dir.join(&spec.study_id);
            write_study(&volume, &dir)?;
            write_json_atomic(&dir.join(TRUTH_FILE), &truth)?;
            Ok(DatasetStudy {
                study_id: spec.study_id.clone(),
                category: truth.category,
                slices: spec.slices,
                score: truth.score,
            })
        })
        .collect::<Result<_>>()?;
    let labels: Labels = studies
        .iter()
        .map(|s| {
            (
                s.study_id.clone(),
                LabelEntry {
                    score: s.score,
                    category: s.category,
                },
            )
        })
        .collect();
    write_json_atomic(&out_dir.join(LABELS_FILE), &labels)?;
    let counts = largest_remainder(n_patients, mix);
    let manifest = DatasetManifest {
        seed,
        mix: *mix,
        counts: std::array::from_fn(|i| counts[i]),
        options: options.clone(),
        studies,
    };
    write_json_atomic(&out_dir.join(DATASET_FILE), &manifest)?;
    Ok(manifest)
}
