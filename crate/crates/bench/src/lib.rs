//! Fixtures shared by the benchmarks.

use skyseg_core::backends::{AttentionStack, SegPrediction, StageAttention, STAGE_SIZES};
use skyseg_core::numerics::{Grid, Tensor};
use skyseg_core::tta::{NormStats, StatSet};
use skyseg_core::world::GeoRect;

/// Deterministic attention stack with a smooth gradient per stage.
pub fn attention_stack() -> AttentionStack {
    let stages = STAGE_SIZES
        .iter()
        .map(|&size| {
            let map = Tensor::from_fn2(size, size, |r, c| 1.0 + ((r * 7 + c * 3) % 11) as f32 / 11.0).unwrap();
            StageAttention { size, blocks: [map.clone(), map] }
        })
        .collect();
    AttentionStack::new(stages).unwrap()
}

pub fn prediction(h: usize, w: usize, salt: usize) -> SegPrediction {
    SegPrediction::new(
        Grid::from_fn(h, w, |r, c| ((r + c + salt) % 6) as u16).unwrap(),
        Grid::from_fn(h, w, |r, c| ((r * 31 + c * 17 + salt) % 100) as f32 / 100.0).unwrap(),
    )
    .unwrap()
}

/// Coarse 1200x800 prediction plus three quadrant refinements.
pub fn fusion_inputs() -> (SegPrediction, Vec<(GeoRect, SegPrediction)>) {
    let coarse = prediction(800, 1200, 0);
    let quads = GeoRect::full(1200, 800).quadrants().unwrap();
    let refs = quads[..3]
        .iter()
        .enumerate()
        .map(|(i, q)| (*q, prediction(q.height(), q.width(), i + 1)))
        .collect();
    (coarse, refs)
}

pub fn stat_set(layer_channels: &[usize], shift: f64) -> StatSet {
    layer_channels
        .iter()
        .map(|&c| {
            NormStats::new(
                (0..c).map(|i| shift + (i % 13) as f64 * 0.01).collect(),
                (0..c).map(|i| 1.0 + (i % 7) as f64 * 0.02).collect(),
            )
            .unwrap()
        })
        .collect()
}
