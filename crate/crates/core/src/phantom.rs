//! Synthetic LGE-like short-axis exams with analytic myocardium masks.
//!
//! Each slice shows a bright blood pool disk inside a dark myocardial annulus
//! on a background brighter than the wall. Optional scar arcs brighten part of the wall to
//! near blood-pool intensity. Radii shrink linearly from base to apex.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{regions_by_thirds, Exam, Slice};
use crate::error::{Error, Result};
use crate::fuse::Mask;

pub const PHANTOM_SPACING_MM: (f64, f64) = (1.25, 1.25);
pub const DEFAULT_APEX_SCALE: f64 = 0.6;

/// A bright arc of the myocardial wall, angles in degrees measured
/// counter-clockwise from the +column axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScarArc {
    pub start_deg: f64,
    pub end_deg: f64,
    pub intensity: f64,
    /// Fraction of the wall thickness covered, measured from the blood pool.
    pub transmurality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    /// (rows, columns).
    pub image_size: (usize, usize),
    pub n_slices: usize,
    /// Annulus centre in continuous pixel coordinates; pixel `(r, c)` has its
    /// centre at `(r + 0.5, c + 0.5)`.
    pub center: (f64, f64),
    pub inner_radius_px: f64,
    pub outer_radius_px: f64,
    /// Radius scale on the last (apical) slice.
    pub apex_scale: f64,
    pub blood_intensity: f64,
    pub myo_intensity: f64,
    pub background_intensity: f64,
    pub scar_arcs: Vec<ScarArc>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams::with_size(64, 64)
    }
}

impl PhantomParams {
    /// Centred geometry scaled to the image, no scar, moderate noise.
    pub fn with_size(height: usize, width: usize) -> Self {
        let edge = height.min(width) as f64;
        PhantomParams {
            image_size: (height, width),
            n_slices: 6,
            center: (height as f64 / 2.0, width as f64 / 2.0),
            inner_radius_px: 0.18 * edge,
            outer_radius_px: 0.34 * edge,
            apex_scale: DEFAULT_APEX_SCALE,
            blood_intensity: 30000.0,
            myo_intensity: 8000.0,
            background_intensity: 22000.0,
            scar_arcs: Vec::new(),
            noise_sigma: 1500.0,
            seed: 0,
        }
    }

    /// Seed-derived variation of [`PhantomParams::with_size`]: shifted centre,
    /// jittered radii and intensities, and zero to two scar arcs.
    pub fn randomized(height: usize, width: usize, seed: u64) -> Self {
        let base = PhantomParams::with_size(height, width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0FFA_470A);
        let edge = height.min(width) as f64;
        let jitter = |rng: &mut ChaCha8Rng, v: f64, frac: f64| v * (1.0 + rng.random_range(-frac..=frac));
        let inner = jitter(&mut rng, base.inner_radius_px, 0.12);
        let outer = jitter(&mut rng, base.outer_radius_px, 0.08).max(inner + 0.08 * edge);
        let shift = 0.06 * edge;
        let center = (
            base.center.0 + rng.random_range(-shift..=shift),
            base.center.1 + rng.random_range(-shift..=shift),
        );
        let blood = jitter(&mut rng, base.blood_intensity, 0.1);
        let n_arcs = rng.random_range(0..=2usize);
        let scar_arcs = (0..n_arcs)
            .map(|_| {
                let start = rng.random_range(0.0..360.0);
                ScarArc {
                    start_deg: start,
                    end_deg: start + rng.random_range(30.0..90.0),
                    intensity: blood * rng.random_range(0.85..0.95),
                    transmurality: rng.random_range(0.3..0.7),
                }
            })
            .collect();
        PhantomParams {
            center,
            inner_radius_px: inner,
            outer_radius_px: outer,
            blood_intensity: blood,
            myo_intensity: jitter(&mut rng, base.myo_intensity, 0.1),
            background_intensity: jitter(&mut rng, base.background_intensity, 0.1),
            scar_arcs,
            seed,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let fail = |m: String| Err(Error::Precondition(m));
        if h == 0 || w == 0 || self.n_slices == 0 {
            return fail(format!("phantom needs a nonempty image and stack, got {h}x{w}, {} slices", self.n_slices));
        }
        let half = h.min(w) as f64 / 2.0;
        if !(self.inner_radius_px > 0.0 && self.inner_radius_px < self.outer_radius_px && self.outer_radius_px < half) {
            return fail(format!(
                "radii must satisfy 0 < inner ({}) < outer ({}) < {half}",
                self.inner_radius_px, self.outer_radius_px
            ));
        }
        if !(self.apex_scale > 0.0 && self.apex_scale <= 1.0) {
            return fail(format!("apex scale {} must lie in (0, 1]", self.apex_scale));
        }
        let levels = [self.blood_intensity, self.myo_intensity, self.background_intensity];
        let scar = self.scar_arcs.iter().map(|a| a.intensity);
        if levels.into_iter().chain(scar).any(|v| !(0.0..=65535.0).contains(&v)) {
            return fail("intensities must lie in [0, 65535]".into());
        }
        if self.scar_arcs.iter().any(|a| !(a.transmurality > 0.0 && a.transmurality <= 1.0)) {
            return fail("scar transmurality must lie in (0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise sigma {} must be finite and non-negative", self.noise_sigma));
        }
        Ok(())
    }

    /// Linear radius scale: 1 on the first slice, `apex_scale` on the last.
    pub fn radius_scale(&self, slice_index: usize) -> f64 {
        if self.n_slices <= 1 {
            return 1.0;
        }
        1.0 - (1.0 - self.apex_scale) * slice_index as f64 / (self.n_slices - 1) as f64
    }

    pub fn radii(&self, slice_index: usize) -> (f64, f64) {
        let s = self.radius_scale(slice_index);
        (self.inner_radius_px * s, self.outer_radius_px * s)
    }

    fn exam_id(&self) -> String {
        format!("phantom_{:06}", self.seed)
    }

    fn polar(&self, r: usize, c: usize) -> (f64, f64) {
        let dy = r as f64 + 0.5 - self.center.0;
        let dx = c as f64 + 0.5 - self.center.1;
        ((dy * dy + dx * dx).sqrt(), (-dy).atan2(dx).to_degrees().rem_euclid(360.0))
    }
}

fn angle_in_arc(theta: f64, arc: &ScarArc) -> bool {
    let span = (arc.end_deg - arc.start_deg).clamp(0.0, 360.0);
    (theta - arc.start_deg).rem_euclid(360.0) <= span
}

/// Myocardium mask of one slice: pixels whose centre lies within the
/// (scaled) annulus, boundaries included.
pub fn analytic_annulus_mask(params: &PhantomParams, slice_index: usize) -> Result<Mask> {
    params.validate()?;
    if slice_index >= params.n_slices {
        return Err(Error::Bounds {
            index: slice_index,
            len: params.n_slices,
        });
    }
    let (inner, outer) = params.radii(slice_index);
    let (h, w) = params.image_size;
    Ok(Mask::from_fn(h, w, |r, c| {
        let (d, _) = params.polar(r, c);
        d >= inner && d <= outer
    })
    .with_origin(&params.exam_id(), slice_index))
}

/// Noise-free intensity image of one slice.
fn clean_slice(params: &PhantomParams, slice_index: usize) -> Vec<f64> {
    let (inner, outer) = params.radii(slice_index);
    let (h, w) = params.image_size;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (d, theta) = params.polar(r, c);
            let v = if d < inner {
                params.blood_intensity
            } else if d <= outer {
                let depth = (d - inner) / (outer - inner);
                params
                    .scar_arcs
                    .iter()
                    .rev()
                    .find(|a| depth <= a.transmurality && angle_in_arc(theta, a))
                    .map_or(params.myo_intensity, |a| a.intensity)
            } else {
                params.background_intensity
            };
            out.push(v);
        }
    }
    out
}

/// Builds a full exam with masks; identical parameters give bit-identical
/// exams.
pub fn generate_phantom_exam(params: &PhantomParams) -> Result<Exam> {
    params.validate()?;
    let (h, w) = params.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Precondition(e.to_string()))?;
    let regions = regions_by_thirds(params.n_slices);
    let mut slices = Vec::with_capacity(params.n_slices);
    let mut masks = Vec::with_capacity(params.n_slices);
    for i in 0..params.n_slices {
        let raw: Vec<u16> = clean_slice(params, i)
            .into_iter()
            .map(|v| {
                let v = if params.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
                v.round().clamp(0.0, 65535.0) as u16
            })
            .collect();
        slices.push(Slice::from_raw(h, w, &raw, i, regions[i]));
        masks.push(analytic_annulus_mask(params, i)?);
    }
    Ok(Exam {
        id: params.exam_id(),
        slices,
        pixel_spacing_mm: PHANTOM_SPACING_MM,
        masks: Some(masks),
    })
}

/// `count` randomized exams with seeds `seed, seed + 1, ...`.
pub fn generate_phantom_set(count: usize, seed: u64, size: (usize, usize), n_slices: usize) -> Result<Vec<Exam>> {
    (0..count as u64)
        .map(|i| {
            let mut p = PhantomParams::randomized(size.0, size.1, seed.wrapping_add(i));
            p.n_slices = n_slices;
            generate_phantom_exam(&p)
        })
        .collect()
}
