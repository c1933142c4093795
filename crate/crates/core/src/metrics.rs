//! Slice-level segmentation metrics, agreement statistics and the per-region
//! evaluation report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Exam, Region};
use crate::error::{Error, Result};
use crate::fuse::Mask;

/// Largest sample size for which the Wilcoxon p-value is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_shape(b) || a.values.len() != b.values.len() {
        return Err(Error::Shape(format!(
            "masks {}x{} and {}x{} differ in shape",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with a 4-neighbour that is background or outside the image,
/// in row-major order.
pub fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Squared physical distance between two pixel centres.
#[inline]
pub fn squared_distance_mm(a: (usize, usize), b: (usize, usize), spacing: (f64, f64)) -> f64 {
    let dr = (a.0 as f64 - b.0 as f64) * spacing.0;
    let dc = (a.1 as f64 - b.1 as f64) * spacing.1;
    dr * dr + dc * dc
}

/// Directed Hausdorff `max_a min_b |a - b|^2`, breaking out of the inner scan
/// as soon as a point cannot raise the running maximum.
fn directed_sq(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> f64 {
    let mut cmax = 0.0f64;
    for &a in from {
        let mut cmin = f64::INFINITY;
        for &b in to {
            let d = squared_distance_mm(a, b, spacing);
            if d < cmin {
                cmin = d;
                if cmin <= cmax {
                    break;
                }
            }
        }
        if cmin > cmax {
            cmax = cmin;
        }
    }
    cmax
}

/// Symmetric Hausdorff distance in millimetres between the boundary sets of
/// `a` and `b`. Two empty masks give `Some(0.0)`; exactly one empty mask
/// gives `None` (undefined).
pub fn hausdorff_mm(a: &Mask, b: &Mask, spacing: (f64, f64)) -> Result<Option<f64>> {
    check_shapes(a, b)?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::Precondition(format!("pixel spacing {spacing:?} must be positive")));
    }
    let (ba, bb) = (boundary_pixels(a), boundary_pixels(b));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let d2 = directed_sq(&ba, &bb, spacing).max(directed_sq(&bb, &ba, spacing));
    Ok(Some(d2.sqrt()))
}

pub fn surface_area_mm2(mask: &Mask, spacing: (f64, f64)) -> f64 {
    mask.count() as f64 * spacing.0 * spacing.1
}

/// Sample Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Precondition(format!(
            "pearson_r needs two equal-length sequences of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::Degenerate("pearson_r of a constant sequence".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson_r with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaNormalization {
    /// Difference divided by the pair mean.
    #[default]
    PairMean,
    /// Difference divided by the reference value.
    Reference,
}

/// Percent Bland-Altman bias and its sample standard deviation.
pub fn bland_altman_percent(pred: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
    bland_altman_percent_with(pred, reference, BaNormalization::PairMean)
}

pub fn bland_altman_percent_with(pred: &[f64], reference: &[f64], norm: BaNormalization) -> Result<(f64, f64)> {
    if pred.len() != reference.len() || pred.len() < 2 {
        return Err(Error::Precondition(format!(
            "Bland-Altman needs two equal-length sequences of at least 2 values, got {} and {}",
            pred.len(),
            reference.len()
        )));
    }
    let denominators: Vec<f64> = pred
        .iter()
        .zip(reference)
        .map(|(&p, &r)| match norm {
            BaNormalization::PairMean => (p + r) / 2.0,
            BaNormalization::Reference => r,
        })
        .collect();
    let bad: Vec<usize> = denominators
        .iter()
        .enumerate()
        .filter(|(_, &d)| !(d > 0.0))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Degenerate(format!("zero normalizer at pair indices {bad:?}")));
    }
    let d: Vec<f64> = pred
        .iter()
        .zip(reference)
        .zip(&denominators)
        .map(|((&p, &r), &m)| 100.0 * (p - r) / m)
        .collect();
    let n = d.len() as f64;
    let bias = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - bias) * (v - bias)).sum::<f64>() / (n - 1.0);
    Ok((bias, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences ranked.
    pub n: usize,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Ranks of `|d|` (1-based), doubled so that mid-ranks of ties stay integral.
pub fn doubled_midranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && abs[order[j]] == abs[order[i]] {
            j += 1;
        }
        // Positions i+1..=j share the mid-rank (i + 1 + j) / 2.
        let r2 = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r2;
        }
        i = j;
    }
    ranks
}

/// Wilcoxon signed-rank test on paired differences.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.is_empty() {
        return Err(Error::Precondition("Wilcoxon test on an empty sample".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Precondition("Wilcoxon test on non-finite differences".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_two_sided: 1.0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let r2 = doubled_midranks(&abs);
    let w2_plus: u64 = nz.iter().zip(&r2).filter(|(d, _)| **d > 0.0).map(|(_, &r)| r).sum();
    let total2: u64 = r2.iter().sum();
    let w_plus = w2_plus as f64 / 2.0;
    let w_minus = (total2 - w2_plus) as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX_N {
        // Null distribution of the doubled W+ over all 2^n sign patterns.
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &r2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let w = w2_plus as usize;
        let lower: u64 = counts[..=w].iter().sum();
        let upper: u64 = counts[w..].iter().sum();
        let total = (1u64 << n) as f64;
        let p = (2.0 * lower.min(upper) as f64 / total).min(1.0);
        return Ok(WilcoxonResult {
            w_plus,
            w_minus,
            n,
            p_two_sided: p,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = r2.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = libm::erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n,
        p_two_sided: p,
        method: WilcoxonMethod::NormalApprox,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub exam_id: String,
    pub slice_index: usize,
    pub region: Region,
    pub dsc: f64,
    /// `None` when exactly one of the two masks is empty.
    pub hd_mm: Option<f64>,
    pub area_ref_mm2: f64,
    pub area_pred_mm2: f64,
}

/// Aggregates for one row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub label: String,
    pub n_slices: usize,
    pub mean_dsc_percent: Option<f64>,
    pub mean_hd_mm: Option<f64>,
    pub n_hd_undefined: usize,
    pub pearson_r: Option<f64>,
    pub ba_bias_percent: Option<f64>,
    pub ba_sd_percent: Option<f64>,
    pub wilcoxon_p: Option<f64>,
}

/// Base / middle / apex / overall rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub base: RegionStats,
    pub middle: RegionStats,
    pub apex: RegionStats,
    pub overall: RegionStats,
    pub wilcoxon: Option<WilcoxonResult>,
    pub slices: Vec<SliceMetrics>,
}

impl RegionReport {
    pub fn rows(&self) -> [&RegionStats; 4] {
        [&self.base, &self.middle, &self.apex, &self.overall]
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();
        let mut s = String::from(
            "region,n_slices,mean_dsc_percent,mean_hd_mm,n_hd_undefined,pearson_r,ba_bias_percent,ba_sd_percent,wilcoxon_p\n",
        );
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                r.n_slices,
                opt(r.mean_dsc_percent, 2),
                opt(r.mean_hd_mm, 2),
                r.n_hd_undefined,
                opt(r.pearson_r, 4),
                opt(r.ba_bias_percent, 2),
                opt(r.ba_sd_percent, 2),
                opt(r.wilcoxon_p, 4),
            );
        }
        s
    }

    pub fn slices_csv(&self) -> String {
        let mut s = String::from("exam_id,slice_index,region,dsc,hd_mm,area_ref_mm2,area_pred_mm2\n");
        for m in &self.slices {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.exam_id,
                m.slice_index,
                m.region.as_str(),
                m.dsc,
                m.hd_mm.map(|v| v.to_string()).unwrap_or_default(),
                m.area_ref_mm2,
                m.area_pred_mm2
            );
        }
        s
    }

    /// Fixed-width table: DSC (%), HD (mm), r, BA bias (sd).
    pub fn render_table(&self) -> String {
        let mut s = format!("{:<8} {:>8} {:>8} {:>7} {:>16}\n", "", "DSC (%)", "HD (mm)", "r", "BA Bias (%)");
        for r in self.rows() {
            let _ = writeln!(s, "{}", format_row(r));
        }
        s
    }
}

pub fn format_row(r: &RegionStats) -> String {
    let f = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "n/a".into());
    let ba = match (r.ba_bias_percent, r.ba_sd_percent) {
        (Some(b), Some(sd)) => format!("{b:.2}({sd:.2})"),
        _ => "n/a".into(),
    };
    let mut label = r.label.clone();
    if let Some(first) = label.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    format!(
        "{:<8} {:>8} {:>8} {:>7} {:>16}",
        label,
        f(r.mean_dsc_percent, 2),
        f(r.mean_hd_mm, 2),
        f(r.pearson_r, 3),
        ba
    )
}

fn aggregate(label: &str, rows: &[&SliceMetrics], norm: BaNormalization, with_wilcoxon: bool) -> (RegionStats, Option<WilcoxonResult>) {
    let n = rows.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let dsc: Vec<f64> = rows.iter().map(|m| m.dsc * 100.0).collect();
    let hd: Vec<f64> = rows.iter().filter_map(|m| m.hd_mm).collect();
    let refs: Vec<f64> = rows.iter().map(|m| m.area_ref_mm2).collect();
    let preds: Vec<f64> = rows.iter().map(|m| m.area_pred_mm2).collect();
    let pearson = pearson_r(&refs, &preds).ok();
    // Pairs where both masks are empty agree perfectly but have no percent difference.
    let (ba_pred, ba_ref): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|m| m.area_ref_mm2 + m.area_pred_mm2 > 0.0)
        .map(|m| (m.area_pred_mm2, m.area_ref_mm2))
        .unzip();
    let ba = bland_altman_percent_with(&ba_pred, &ba_ref, norm).ok();
    let wilcoxon = if with_wilcoxon && n > 0 {
        let diffs: Vec<f64> = rows.iter().map(|m| m.area_pred_mm2 - m.area_ref_mm2).collect();
        wilcoxon_signed_rank(&diffs).ok()
    } else {
        None
    };
    (
        RegionStats {
            label: label.to_string(),
            n_slices: n,
            mean_dsc_percent: mean(&dsc),
            mean_hd_mm: mean(&hd),
            n_hd_undefined: n - hd.len(),
            pearson_r: pearson,
            ba_bias_percent: ba.map(|b| b.0),
            ba_sd_percent: ba.map(|b| b.1),
            wilcoxon_p: wilcoxon.map(|w| w.p_two_sided),
        },
        wilcoxon,
    )
}

/// Per-slice metrics for one exam's predictions against its references.
pub fn slice_metrics(exam: &Exam, preds: &[Mask], refs: &[Mask]) -> Result<Vec<SliceMetrics>> {
    if preds.len() != exam.len() || refs.len() != exam.len() {
        return Err(Error::Consistency(format!(
            "exam {}: {} slices, {} predictions, {} references",
            exam.id,
            exam.len(),
            preds.len(),
            refs.len()
        )));
    }
    let spacing = exam.pixel_spacing_mm;
    let regions = exam.effective_regions();
    preds
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (p, r))| {
            Ok(SliceMetrics {
                exam_id: exam.id.clone(),
                slice_index: i,
                region: regions[i],
                dsc: dice(p, r)?,
                hd_mm: hausdorff_mm(p, r, spacing)?,
                area_ref_mm2: surface_area_mm2(r, spacing),
                area_pred_mm2: surface_area_mm2(p, spacing),
            })
        })
        .collect()
}

pub fn evaluate_exam_set(preds: &[Vec<Mask>], refs: &[Vec<Mask>], exams: &[Exam]) -> Result<RegionReport> {
    evaluate_exam_set_with(preds, refs, exams, BaNormalization::PairMean)
}

/// Evaluates aligned prediction and reference mask sets (one `Vec<Mask>` per
/// exam, one mask per slice). The overall row pools every slice.
pub fn evaluate_exam_set_with(
    preds: &[Vec<Mask>],
    refs: &[Vec<Mask>],
    exams: &[Exam],
    norm: BaNormalization,
) -> Result<RegionReport> {
    if preds.len() != exams.len() || refs.len() != exams.len() {
        return Err(Error::Consistency(format!(
            "{} exams, {} prediction sets, {} reference sets",
            exams.len(),
            preds.len(),
            refs.len()
        )));
    }
    let mut slices = Vec::new();
    for ((exam, p), r) in exams.iter().zip(preds).zip(refs) {
        slices.extend(slice_metrics(exam, p, r)?);
    }
    let select = |region: Region| -> Vec<&SliceMetrics> { slices.iter().filter(|m| m.region == region).collect() };
    let (base, _) = aggregate("base", &select(Region::Base), norm, false);
    let (middle, _) = aggregate("middle", &select(Region::Middle), norm, false);
    let (apex, _) = aggregate("apex", &select(Region::Apex), norm, false);
    let all: Vec<&SliceMetrics> = slices.iter().collect();
    let (overall, wilcoxon) = aggregate("overall", &all, norm, true);
    Ok(RegionReport {
        base,
        middle,
        apex,
        overall,
        wilcoxon,
        slices,
    })
}
