//! Binarization and pixel-level late fusion of ensemble members.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::InputStack;
use crate::error::{Error, Result};
use crate::net::{self, ModelParams, ProbabilityMap};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binary segmentation of one slice; `values` entries are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
    pub exam_id: String,
    pub slice_index: usize,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![0; height * width],
            exam_id: String::new(),
            slice_index: 0,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::empty(height, width);
        for r in 0..height {
            for c in 0..width {
                m.values[r * width + c] = f(r, c) as u8;
            }
        }
        m
    }

    pub fn with_origin(mut self, exam_id: &str, slice_index: usize) -> Self {
        self.exam_id = exam_id.to_string();
        self.slice_index = slice_index;
        self
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.width + c] != 0
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Binarize each member, then pixelwise majority vote.
    #[default]
    Majority,
    /// Average member probabilities, then binarize.
    MeanProb,
    /// Pixelwise maximum probability, then binarize.
    MaxProb,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(FusionStrategy::Majority),
            "mean_prob" => Ok(FusionStrategy::MeanProb),
            "max_prob" => Ok(FusionStrategy::MaxProb),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
    #[serde(default)]
    pub strategy: FusionStrategy,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        validate_fusion(self.members.len(), self.strategy, self.threshold)
    }

    pub fn load(path: &Path) -> Result<EnsembleSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: EnsembleSpec =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        // Relative member paths are resolved against the spec file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut spec.members {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("ensemble spec serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn validate_fusion(members: usize, strategy: FusionStrategy, threshold: f64) -> Result<()> {
    if members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    if strategy == FusionStrategy::Majority && members.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "majority voting needs an odd member count, got {members}"
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(())
}

/// Foreground where `prob > threshold`; ties go to background.
pub fn binarize(prob: &ProbabilityMap, threshold: f64) -> Mask {
    Mask {
        height: prob.height,
        width: prob.width,
        values: prob.values.iter().map(|&p| (p > threshold) as u8).collect(),
        exam_id: prob.exam_id.clone(),
        slice_index: prob.slice_index,
    }
}

/// Pixel is foreground iff a strict majority of the (odd number of) members vote for it.
pub fn majority_vote(masks: &[Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Config("majority vote over zero masks".into()))?;
    if masks.len().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "majority vote needs an odd member count, got {}",
            masks.len()
        )));
    }
    if let Some(bad) = masks.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match {}x{}",
            bad.height, bad.width, first.height, first.width
        )));
    }
    let quorum = masks.len() / 2 + 1;
    let values = (0..first.values.len())
        .map(|i| {
            let votes = masks.iter().filter(|m| m.values[i] != 0).count();
            (votes >= quorum) as u8
        })
        .collect();
    Ok(Mask {
        values,
        ..first.clone()
    })
}

/// Fuses already-computed member probability maps.
pub fn fuse_probabilities(
    probs: &[ProbabilityMap],
    strategy: FusionStrategy,
    threshold: f64,
) -> Result<Mask> {
    validate_fusion(probs.len(), strategy, threshold)?;
    let first = &probs[0];
    if let Some(bad) = probs
        .iter()
        .find(|p| (p.height, p.width) != (first.height, first.width))
    {
        return Err(Error::Shape(format!(
            "probability map {}x{} does not match {}x{}",
            bad.height, bad.width, first.height, first.width
        )));
    }
    match strategy {
        FusionStrategy::Majority => {
            let masks: Vec<Mask> = probs.iter().map(|p| binarize(p, threshold)).collect();
            majority_vote(&masks)
        }
        FusionStrategy::MeanProb | FusionStrategy::MaxProb => {
            let n = first.values.len();
            let combined: Vec<f64> = (0..n)
                .map(|i| {
                    if strategy == FusionStrategy::MeanProb {
                        // Sorted summation keeps the mean independent of member order.
                        let mut v: Vec<f64> = probs.iter().map(|p| p.values[i]).collect();
                        v.sort_by(f64::total_cmp);
                        v.iter().sum::<f64>() / probs.len() as f64
                    } else {
                        probs.iter().map(|p| p.values[i]).fold(f64::NEG_INFINITY, f64::max)
                    }
                })
                .collect();
            let fused = ProbabilityMap {
                values: combined,
                ..first.clone()
            };
            Ok(binarize(&fused, threshold))
        }
    }
}

/// An ensemble whose member checkpoints have been loaded.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<ModelParams>,
    pub strategy: FusionStrategy,
    pub threshold: f64,
}

impl Ensemble {
    pub fn load(spec: &EnsembleSpec) -> Result<Ensemble> {
        spec.validate()?;
        let members = spec
            .members
            .iter()
            .map(|p| {
                net::checkpoint::load(p).map_err(|e| Error::Dependency {
                    member: p.display().to_string(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble {
            members,
            strategy: spec.strategy,
            threshold: spec.threshold,
        })
    }

    pub fn member_probabilities(&self, stack: &InputStack) -> Result<Vec<ProbabilityMap>> {
        self.members.iter().map(|m| net::forward(m, stack)).collect()
    }

    pub fn predict(&self, stack: &InputStack) -> Result<Mask> {
        let probs = self.member_probabilities(stack)?;
        fuse_probabilities(&probs, self.strategy, self.threshold)
    }
}

/// Loads every member named in `spec` and fuses their predictions on `stack`.
pub fn fuse_ensemble(spec: &EnsembleSpec, stack: &InputStack) -> Result<Mask> {
    Ensemble::load(spec)?.predict(stack)
}
