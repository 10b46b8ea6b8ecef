//! Merging follower refinements into the leader's upsampled coarse result.

use serde::{Deserialize, Serialize};

use crate::backends::SegPrediction;
use crate::error::{Error, Result};
use crate::world::GeoRect;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Refined areas overwrite the coarse result.
    Replace,
    /// Per pixel, the strictly more confident prediction wins.
    #[default]
    Prob,
}

impl FusionMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Replace => "replace",
            Self::Prob => "prob",
        }
    }
}

fn check(coarse: &SegPrediction, rect: &GeoRect, patch: &SegPrediction) -> Result<()> {
    if !rect.fits_within(coarse.width(), coarse.height()) {
        return Err(Error::Shape(format!(
            "rect {rect:?} outside {}x{} coarse prediction",
            coarse.width(),
            coarse.height()
        )));
    }
    if patch.dims() != (rect.height(), rect.width()) {
        return Err(Error::Shape(format!(
            "refinement {:?} does not match rect {}x{}",
            patch.dims(),
            rect.height(),
            rect.width()
        )));
    }
    Ok(())
}

/// Inside each rect, labels and probabilities come from the refinement.
/// Overlaps resolve in list order, last writer wins.
pub fn replacement_fusion(coarse: &SegPrediction, refinements: &[(GeoRect, SegPrediction)]) -> Result<SegPrediction> {
    fuse(coarse, refinements, |_, _| true)
}

/// Inside each rect a refinement pixel replaces the current one only when
/// its probability is strictly higher.
pub fn probability_fusion(coarse: &SegPrediction, refinements: &[(GeoRect, SegPrediction)]) -> Result<SegPrediction> {
    fuse(coarse, refinements, |current, incoming| incoming > current)
}

pub fn fuse_with(mode: FusionMode, coarse: &SegPrediction, refinements: &[(GeoRect, SegPrediction)]) -> Result<SegPrediction> {
    match mode {
        FusionMode::Replace => replacement_fusion(coarse, refinements),
        FusionMode::Prob => probability_fusion(coarse, refinements),
    }
}

fn fuse(
    coarse: &SegPrediction,
    refinements: &[(GeoRect, SegPrediction)],
    take: impl Fn(f32, f32) -> bool,
) -> Result<SegPrediction> {
    for (rect, patch) in refinements {
        check(coarse, rect, patch)?;
    }
    let (mut labels, mut probs) = coarse.clone().without_class_probs().into_parts();
    for (rect, patch) in refinements {
        for r in 0..rect.height() {
            let gr = rect.y0 as usize + r;
            for c in 0..rect.width() {
                let gc = rect.x0 as usize + c;
                let p = patch.probs().get(r, c);
                if take(probs.get(gr, gc), p) {
                    labels.set(gr, gc, patch.labels().get(r, c));
                    probs.set(gr, gc, p);
                }
            }
        }
    }
    SegPrediction::new(labels, probs)
}
