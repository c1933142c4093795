//! Exam directories, per-slice normalization and 2.5D input stacks.
//!
//! An exam is a base-to-apex stack of short-axis slices sharing one pixel
//! spacing. On disk it is a directory holding `meta.json`, one 16-bit PGM per
//! slice (`slice_NNN.pgm`) and, optionally, one 8-bit PGM mask per slice
//! (`mask_NNN.pgm`).

pub mod pgm;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse::Mask;
use crate::net::ProbabilityMap;

/// Smallest accepted slice edge; the encoder reaches stride 32.
pub const MIN_SLICE_EDGE: usize = 32;
/// Standard deviation below which a slice is treated as constant.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Base,
    Middle,
    Apex,
    Unknown,
}

impl Region {
    pub const REPORTED: [Region; 3] = [Region::Base, Region::Middle, Region::Apex];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Base => "base",
            Region::Middle => "middle",
            Region::Apex => "apex",
            Region::Unknown => "unknown",
        }
    }
}

/// Region labels for an `n`-slice stack by index thirds: the first
/// `ceil(n/3)` slices are base, the last `ceil(n/3)` of the remainder apex,
/// the rest middle.
pub fn regions_by_thirds(n: usize) -> Vec<Region> {
    let third = n.div_ceil(3);
    let base = third.min(n);
    let apex = third.min(n - base);
    (0..n)
        .map(|i| {
            if i < base {
                Region::Base
            } else if i >= n - apex {
                Region::Apex
            } else {
                Region::Middle
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities. Raw slices hold integers in `[0, 65535]`.
    pub pixels: Vec<f64>,
    pub index: usize,
    pub region: Region,
    pub normalized: bool,
}

impl Slice {
    pub fn from_raw(height: usize, width: usize, raw: &[u16], index: usize, region: Region) -> Self {
        assert_eq!(raw.len(), height * width);
        Slice {
            height,
            width,
            pixels: raw.iter().map(|&v| v as f64).collect(),
            index,
            region,
            normalized: false,
        }
    }

    /// Raw samples, if this slice still holds unnormalized integer intensities.
    pub fn raw_samples(&self) -> Option<Vec<u16>> {
        if self.normalized {
            return None;
        }
        self.pixels
            .iter()
            .map(|&v| (v.fract() == 0.0 && (0.0..=65535.0).contains(&v)).then_some(v as u16))
            .collect()
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        let var = self.pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exam {
    pub id: String,
    pub slices: Vec<Slice>,
    /// (row spacing, column spacing) in millimetres.
    pub pixel_spacing_mm: (f64, f64),
    pub masks: Option<Vec<Mask>>,
}

impl Exam {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices
            .first()
            .map(|s| (s.height, s.width))
            .unwrap_or((0, 0))
    }

    /// Per-slice regions with `Unknown` labels resolved by index thirds.
    pub fn effective_regions(&self) -> Vec<Region> {
        let thirds = regions_by_thirds(self.slices.len());
        self.slices
            .iter()
            .zip(thirds)
            .map(|(s, t)| if s.region == Region::Unknown { t } else { s.region })
            .collect()
    }

    /// Copy of the exam with every slice z-scored.
    pub fn normalized(&self) -> Exam {
        Exam {
            slices: self.slices.iter().map(normalize_slice).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.slices.first() else {
            return Err(Error::Consistency(format!("exam {} has no slices", self.id)));
        };
        let (h, w) = (first.height, first.width);
        if h < MIN_SLICE_EDGE || w < MIN_SLICE_EDGE {
            return Err(Error::Consistency(format!(
                "exam {}: slices {h}x{w} smaller than {MIN_SLICE_EDGE}x{MIN_SLICE_EDGE}",
                self.id
            )));
        }
        for (i, s) in self.slices.iter().enumerate() {
            if s.index != i {
                return Err(Error::Consistency(format!(
                    "exam {}: slice at position {i} has index {}",
                    self.id, s.index
                )));
            }
            if (s.height, s.width) != (h, w) || s.pixels.len() != h * w {
                return Err(Error::Consistency(format!(
                    "exam {}: slice {i} is {}x{}, expected {h}x{w}",
                    self.id, s.height, s.width
                )));
            }
        }
        let (sr, sc) = self.pixel_spacing_mm;
        if !(sr > 0.0 && sc > 0.0 && sr.is_finite() && sc.is_finite()) {
            return Err(Error::Consistency(format!(
                "exam {}: pixel spacing ({sr}, {sc}) must be positive",
                self.id
            )));
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.slices.len() {
                return Err(Error::Consistency(format!(
                    "exam {}: {} masks for {} slices",
                    self.id,
                    masks.len(),
                    self.slices.len()
                )));
            }
            for (i, m) in masks.iter().enumerate() {
                if (m.height, m.width) != (h, w) {
                    return Err(Error::Consistency(format!(
                        "exam {}: mask {i} is {}x{}, expected {h}x{w}",
                        self.id, m.height, m.width
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Three-channel 2.5D input: normalized slices `center-1`, `center`, `center+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack {
    pub height: usize,
    pub width: usize,
    /// Channel-major `3 x height x width`.
    pub channels: Vec<f64>,
    pub center_index: usize,
    pub exam_id: String,
}

impl InputStack {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.channels[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<(String, usize)>,
    pub validation: Vec<(String, usize)>,
    pub test: Vec<(String, usize)>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExamMeta {
    id: String,
    num_slices: usize,
    height: usize,
    width: usize,
    pixel_spacing_mm: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regions: Option<Vec<Region>>,
    has_masks: bool,
}

pub fn slice_file_name(index: usize) -> String {
    format!("slice_{index:03}.pgm")
}

pub fn mask_file_name(index: usize) -> String {
    format!("mask_{index:03}.pgm")
}

pub fn load_exam(dir: &Path) -> Result<Exam> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::format(&meta_path, format!("cannot read metadata: {e}")))?;
    let meta: ExamMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.num_slices == 0 {
        return Err(Error::format(&meta_path, "num_slices must be at least 1"));
    }
    if let Some(regions) = &meta.regions {
        if regions.len() != meta.num_slices {
            return Err(Error::format(
                &meta_path,
                format!("{} regions for {} slices", regions.len(), meta.num_slices),
            ));
        }
    }

    let mut slices = Vec::with_capacity(meta.num_slices);
    for i in 0..meta.num_slices {
        let path = dir.join(slice_file_name(i));
        let img = pgm::read(&path)?;
        if img.maxval != 65535 {
            return Err(Error::format(&path, format!("slice maxval {} (expected 65535)", img.maxval)));
        }
        if (img.height, img.width) != (meta.height, meta.width) {
            return Err(Error::Consistency(format!(
                "{}: {}x{} but meta.json declares {}x{}",
                path.display(),
                img.height,
                img.width,
                meta.height,
                meta.width
            )));
        }
        let region = meta.regions.as_ref().map_or(Region::Unknown, |r| r[i]);
        slices.push(Slice::from_raw(img.height, img.width, &img.samples, i, region));
    }

    let masks = if meta.has_masks {
        let mut masks = Vec::with_capacity(meta.num_slices);
        for i in 0..meta.num_slices {
            let path = dir.join(mask_file_name(i));
            if !path.exists() {
                return Err(Error::Consistency(format!(
                    "exam {}: has_masks is set but {} is missing",
                    meta.id,
                    path.display()
                )));
            }
            masks.push(read_mask(&path, &meta.id, i)?);
        }
        Some(masks)
    } else {
        None
    };

    let exam = Exam {
        id: meta.id,
        slices,
        pixel_spacing_mm: (meta.pixel_spacing_mm[0], meta.pixel_spacing_mm[1]),
        masks,
    };
    exam.validate()?;
    Ok(exam)
}

pub fn save_exam(exam: &Exam, dir: &Path) -> Result<()> {
    exam.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = exam.shape();
    let regions = exam
        .slices
        .iter()
        .all(|s| s.region != Region::Unknown)
        .then(|| exam.slices.iter().map(|s| s.region).collect());
    let meta = ExamMeta {
        id: exam.id.clone(),
        num_slices: exam.slices.len(),
        height: h,
        width: w,
        pixel_spacing_mm: [exam.pixel_spacing_mm.0, exam.pixel_spacing_mm.1],
        regions,
        has_masks: exam.masks.is_some(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    for s in &exam.slices {
        let samples = s.raw_samples().ok_or_else(|| {
            Error::Precondition(format!(
                "exam {}: slice {} does not hold raw 16-bit intensities",
                exam.id, s.index
            ))
        })?;
        pgm::write(
            &dir.join(slice_file_name(s.index)),
            &pgm::Pgm {
                width: w,
                height: h,
                maxval: 65535,
                samples,
            },
        )?;
    }
    if let Some(masks) = &exam.masks {
        for (i, m) in masks.iter().enumerate() {
            write_mask(&dir.join(mask_file_name(i)), m)?;
        }
    }
    Ok(())
}

pub fn read_mask(path: &Path, exam_id: &str, slice_index: usize) -> Result<Mask> {
    let img = pgm::read(path)?;
    if img.maxval != 255 {
        return Err(Error::format(path, format!("mask maxval {} (expected 255)", img.maxval)));
    }
    let values = img
        .samples
        .iter()
        .map(|&v| match v {
            0 => Ok(0u8),
            255 => Ok(1u8),
            other => Err(Error::format(path, format!("mask sample {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Mask {
        height: img.height,
        width: img.width,
        values,
        exam_id: exam_id.to_string(),
        slice_index,
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    pgm::write(
        path,
        &pgm::Pgm {
            width: mask.width,
            height: mask.height,
            maxval: 255,
            samples: mask.values.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        },
    )
}

/// Probability scale of 16-bit probability-map PGMs.
pub const PROBABILITY_MAXVAL: u16 = 65535;

/// Stores `round(p * 65535)` per pixel as a 16-bit PGM.
pub fn write_probability_map(path: &Path, prob: &ProbabilityMap) -> Result<()> {
    let scale = PROBABILITY_MAXVAL as f64;
    pgm::write(
        path,
        &pgm::Pgm {
            width: prob.width,
            height: prob.height,
            maxval: PROBABILITY_MAXVAL,
            samples: prob.values.iter().map(|&p| (p * scale).round().clamp(0.0, scale) as u16).collect(),
        },
    )
}

/// Inverse of [`write_probability_map`] up to the 1/65535 quantization; values
/// are kept strictly inside (0, 1).
pub fn read_probability_map(path: &Path, exam_id: &str, slice_index: usize) -> Result<ProbabilityMap> {
    let img = pgm::read(path)?;
    if img.maxval != PROBABILITY_MAXVAL {
        return Err(Error::format(path, format!("probability maxval {} (expected 65535)", img.maxval)));
    }
    let scale = PROBABILITY_MAXVAL as f64;
    let half_step = 0.5 / scale;
    Ok(ProbabilityMap {
        height: img.height,
        width: img.width,
        values: img
            .samples
            .iter()
            .map(|&v| (v as f64 / scale).clamp(half_step, 1.0 - half_step))
            .collect(),
        exam_id: exam_id.to_string(),
        slice_index,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    exams: Vec<String>,
}

/// Writes each exam to `root/<id>/` plus a `manifest.json` listing them.
/// Returns the manifest path.
pub fn save_exam_set(exams: &[Exam], root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for exam in exams {
        save_exam(exam, &root.join(&exam.id))?;
    }
    let manifest = Manifest {
        exams: exams.iter().map(|e| e.id.clone()).collect(),
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Exam directories under `root`: those listed in `manifest.json` when present,
/// otherwise every subdirectory holding a `meta.json`, in name order.
pub fn exam_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        return Ok(manifest.exams.iter().map(|id| root.join(id)).collect());
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_exam_set(root: &Path) -> Result<Vec<Exam>> {
    exam_dirs(root)?.iter().map(|d| load_exam(d)).collect()
}

/// Per-slice z-score; slices with standard deviation below [`STD_GUARD`] map to zeros.
pub fn normalize_slice(slice: &Slice) -> Slice {
    let (mean, std) = slice.mean_std();
    let pixels = if std < STD_GUARD {
        vec![0.0; slice.pixels.len()]
    } else {
        slice.pixels.iter().map(|v| (v - mean) / std).collect()
    };
    Slice {
        pixels,
        normalized: true,
        ..slice.clone()
    }
}

/// Builds the 2.5D stack centred on `center_index`, replicating the edge
/// slice where a neighbour falls outside the exam.
pub fn stack_25d(exam: &Exam, center_index: usize) -> Result<InputStack> {
    let n = exam.slices.len();
    if center_index >= n {
        return Err(Error::Bounds {
            index: center_index,
            len: n,
        });
    }
    if let Some(s) = exam.slices.iter().find(|s| !s.normalized) {
        return Err(Error::Precondition(format!(
            "exam {}: slice {} is not normalized",
            exam.id, s.index
        )));
    }
    let prev = center_index.saturating_sub(1);
    let next = (center_index + 1).min(n - 1);
    let (h, w) = exam.shape();
    let mut channels = Vec::with_capacity(3 * h * w);
    for idx in [prev, center_index, next] {
        channels.extend_from_slice(&exam.slices[idx].pixels);
    }
    Ok(InputStack {
        height: h,
        width: w,
        channels,
        center_index,
        exam_id: exam.id.clone(),
    })
}

/// Deterministic exam-level split; whatever is not train or validation is test.
pub fn split_dataset(exams: &[Exam], fractions: (f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (ft, fv) = fractions;
    if !(ft > 0.0 && fv > 0.0 && ft + fv < 1.0) {
        return Err(Error::Config(format!(
            "split fractions ({ft}, {fv}) must be positive with sum below 1"
        )));
    }
    let n = exams.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "{n} exams cannot fill train, validation and test partitions"
        )));
    }
    let mut ids = HashSet::new();
    for e in exams {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::Consistency(format!("duplicate exam id {}", e.id)));
        }
    }

    let mut n_val = ((fv * n as f64).round() as usize).max(1);
    let mut n_train = ((ft * n as f64).round() as usize).max(1);
    while n_train + n_val > n - 1 {
        if n_train >= n_val && n_train > 1 {
            n_train -= 1;
        } else {
            n_val -= 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let slices_of = |picked: &[usize]| -> Vec<(String, usize)> {
        let mut sorted = picked.to_vec();
        sorted.sort_unstable();
        sorted
            .iter()
            .flat_map(|&e| (0..exams[e].slices.len()).map(move |s| (exams[e].id.clone(), s)))
            .collect()
    };
    Ok(DatasetSplit {
        train: slices_of(&order[..n_train]),
        validation: slices_of(&order[n_train..n_train + n_val]),
        test: slices_of(&order[n_train + n_val..]),
        seed,
    })
}

impl DatasetSplit {
    pub fn exam_ids(part: &[(String, usize)]) -> Vec<String> {
        let mut ids: Vec<String> = part.iter().map(|(id, _)| id.clone()).collect();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_slice(h: usize, w: usize, f: impl Fn(usize) -> u16, index: usize) -> Slice {
        let raw: Vec<u16> = (0..h * w).map(f).collect();
        Slice::from_raw(h, w, &raw, index, Region::Unknown)
    }

    fn exam(n: usize, id: &str) -> Exam {
        Exam {
            id: id.to_string(),
            slices: (0..n).map(|i| raw_slice(32, 32, |p| (p * (i + 1)) as u16, i)).collect(),
            pixel_spacing_mm: (1.25, 1.25),
            masks: None,
        }
    }

    #[test]
    fn two_point_zscore() {
        let s = raw_slice(32, 32, |p| if p % 2 == 0 { 0 } else { 2 }, 0);
        let z = normalize_slice(&s);
        assert!(z.pixels.iter().all(|&v| v == -1.0 || v == 1.0));
    }

    #[test]
    fn constant_slice_maps_to_zero() {
        let z = normalize_slice(&raw_slice(32, 32, |_| 500, 0));
        assert!(z.pixels.iter().all(|&v| v == 0.0));
        assert!(z.normalized);
    }

    #[test]
    fn four_by_four_ramp() {
        let s = Slice::from_raw(4, 4, &(1..=16).collect::<Vec<u16>>(), 0, Region::Unknown);
        let (mean, std) = s.mean_std();
        assert_eq!(mean, 8.5);
        assert!((std - 21.25f64.sqrt()).abs() < 1e-12);
        let z = normalize_slice(&s);
        assert!((z.pixels[0] - (-7.5 / 21.25f64.sqrt())).abs() < 1e-12);
        assert!((z.pixels[0] + 1.6270).abs() < 1e-4);
    }

    #[test]
    fn stack_interior_and_boundaries() {
        let e = exam(6, "e").normalized();
        let st = stack_25d(&e, 3).unwrap();
        assert_eq!(st.channel(0), &e.slices[2].pixels[..]);
        assert_eq!(st.channel(1), &e.slices[3].pixels[..]);
        assert_eq!(st.channel(2), &e.slices[4].pixels[..]);
        let st0 = stack_25d(&e, 0).unwrap();
        assert_eq!(st0.channel(0), &e.slices[0].pixels[..]);
        assert_eq!(st0.channel(2), &e.slices[1].pixels[..]);
        let last = stack_25d(&e, 5).unwrap();
        assert_eq!(last.channel(2), &e.slices[5].pixels[..]);
        assert!(matches!(stack_25d(&e, 6), Err(Error::Bounds { index: 6, len: 6 })));
    }

    #[test]
    fn single_slice_stack_replicates() {
        let e = exam(1, "one").normalized();
        let st = stack_25d(&e, 0).unwrap();
        assert_eq!(st.channel(0), st.channel(1));
        assert_eq!(st.channel(2), st.channel(1));
    }

    #[test]
    fn stack_requires_normalized_slices() {
        assert!(matches!(stack_25d(&exam(3, "raw"), 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn thirds_assignment() {
        use Region::*;
        assert_eq!(regions_by_thirds(6), vec![Base, Base, Middle, Middle, Apex, Apex]);
        assert_eq!(regions_by_thirds(5), vec![Base, Base, Middle, Apex, Apex]);
        assert_eq!(regions_by_thirds(1), vec![Base]);
        assert_eq!(regions_by_thirds(2), vec![Base, Apex]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let exams: Vec<Exam> = (0..10).map(|i| exam(2, &format!("e{i}"))).collect();
        let a = split_dataset(&exams, (0.6, 0.2), 7).unwrap();
        let b = split_dataset(&exams, (0.6, 0.2), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(DatasetSplit::exam_ids(&a.train).len(), 6);
        assert_eq!(DatasetSplit::exam_ids(&a.validation).len(), 2);
        assert_eq!(DatasetSplit::exam_ids(&a.test).len(), 2);

        let three: Vec<Exam> = (0..3).map(|i| exam(1, &format!("t{i}"))).collect();
        let s = split_dataset(&three, (0.34, 0.33), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 1, 1));

        let two: Vec<Exam> = (0..2).map(|i| exam(1, &format!("t{i}"))).collect();
        assert!(matches!(
            split_dataset(&two, (0.5, 0.3), 1),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(split_dataset(&three, (0.7, 0.3), 1), Err(Error::Config(_))));
    }

    #[test]
    fn consistency_errors() {
        let mut e = exam(3, "bad");
        e.slices[2] = raw_slice(64, 64, |_| 1, 2);
        assert!(matches!(e.validate(), Err(Error::Consistency(_))));
        let mut e = exam(3, "bad");
        e.pixel_spacing_mm = (0.0, 1.0);
        assert!(matches!(e.validate(), Err(Error::Consistency(_))));
    }
}
