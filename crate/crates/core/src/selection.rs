//! Attention-based patch selection.
//!
//! Per stage the two block maps are averaged, stages 1-3 are pooled down to
//! 16x16 (windows 8, 4, 2), the four 16x16 maps are combined with stage
//! weights, and a final 8x8 pooling leaves one score per quadrant of the
//! leader's view. The top-k quadrants are handed to followers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{AttentionStack, STAGE_SIZES};
use crate::error::{Error, Result};
use crate::numerics::{avg_pool2d, Tensor};
use crate::world::GeoRect;

pub const MAX_PATCHES: usize = 4;
const MERGED_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct SelectionWeights([f64; 4]);

impl SelectionWeights {
    pub fn new(w: [f64; 4]) -> Result<Self> {
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(format!("stage weights must be non-negative, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("stage weights must sum to 1, got {sum}")));
        }
        Ok(Self(w))
    }

    pub fn get(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for SelectionWeights {
    fn default() -> Self {
        Self([0.1, 0.2, 0.3, 0.4])
    }
}

impl TryFrom<[f64; 4]> for SelectionWeights {
    type Error = Error;
    fn try_from(w: [f64; 4]) -> Result<Self> {
        Self::new(w)
    }
}

impl From<SelectionWeights> for [f64; 4] {
    fn from(w: SelectionWeights) -> Self {
        w.0
    }
}

/// How the leader picks follower patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    /// Uniformly random distinct quadrants.
    Random,
    /// Quadrants in ascending index order.
    Order,
    /// Quadrants in descending index order.
    Reorder,
    #[default]
    Attention,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 4] = [Self::Random, Self::Order, Self::Reorder, Self::Attention];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Order => "order",
            Self::Reorder => "reorder",
            Self::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedPatch {
    pub index: u8,
    pub score: f32,
    pub rect: GeoRect,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchRanking {
    /// Row-major 2x2 scores.
    pub final_map: [f32; 4],
    pub ranked: Vec<RankedPatch>,
}

impl PatchRanking {
    pub fn indices(&self) -> Vec<u8> {
        self.ranked.iter().map(|p| p.index).collect()
    }
}

/// Averages the two block maps of a stage.
pub fn channel_merge(a1: &Tensor, a2: &Tensor) -> Result<Tensor> {
    if a1.shape() != a2.shape() {
        return Err(Error::Shape(format!(
            "block maps differ in shape: {:?} vs {:?}",
            a1.shape(),
            a2.shape()
        )));
    }
    Tensor::new(
        a1.shape().to_vec(),
        a1.data().iter().zip(a2.data()).map(|(x, y)| (x + y) / 2.0).collect(),
    )
}

/// Pools the four stage maps (128, 64, 32, 16) to 16x16 each.
pub fn patch_merge(stages: &[Tensor; 4]) -> Result<[Tensor; 4]> {
    let mut out = Vec::with_capacity(4);
    for (m, &size) in stages.iter().zip(&STAGE_SIZES) {
        if m.shape() != [size, size] {
            return Err(Error::Shape(format!(
                "stage map {:?}, expected {size}x{size}",
                m.shape()
            )));
        }
        out.push(match size / MERGED_SIZE {
            1 => m.clone(),
            w => avg_pool2d(m, w)?,
        });
    }
    Ok(out.try_into().expect("four stages"))
}

/// `sum_i w_i * map_i`, elementwise.
pub fn weighted_fuse(maps: &[Tensor; 4], w: &SelectionWeights) -> Result<Tensor> {
    let shape = maps[0].shape().to_vec();
    if maps.iter().any(|m| m.shape() != shape.as_slice()) {
        return Err(Error::Shape("fused maps must share one shape".into()));
    }
    let mut out = vec![0.0f32; maps[0].len()];
    for (m, &wi) in maps.iter().zip(&w.get()) {
        for (o, &v) in out.iter_mut().zip(m.data()) {
            *o += wi as f32 * v;
        }
    }
    Tensor::new(shape, out)
}

/// 8x8 pooling of the fused 16x16 map into a 2x2 map.
pub fn finalize(fused: &Tensor) -> Result<Tensor> {
    if fused.shape() != [MERGED_SIZE, MERGED_SIZE] {
        return Err(Error::Shape(format!(
            "fused map must be 16x16, got {:?}",
            fused.shape()
        )));
    }
    avg_pool2d(fused, 8)
}

/// Full pipeline from an attention stack to the 2x2 score map.
pub fn final_attention(stack: &AttentionStack, w: &SelectionWeights) -> Result<Tensor> {
    let merged = stack
        .stages()
        .iter()
        .map(|s| channel_merge(&s.blocks[0], &s.blocks[1]))
        .collect::<Result<Vec<_>>>()?;
    let merged: [Tensor; 4] = merged
        .try_into()
        .map_err(|_| Error::Shape("attention stack must have 4 stages".into()))?;
    finalize(&weighted_fuse(&patch_merge(&merged)?, w)?)
}

fn check_k(k: usize) -> Result<()> {
    if !(1..=MAX_PATCHES).contains(&k) {
        return Err(Error::Parameter(format!("k = {k}, expected 1..={MAX_PATCHES}")));
    }
    Ok(())
}

fn scores_of(final_map: &Tensor) -> Result<[f32; 4]> {
    if final_map.shape() != [2, 2] {
        return Err(Error::Shape(format!("final map must be 2x2, got {:?}", final_map.shape())));
    }
    Ok(final_map.data().try_into().expect("2x2"))
}

/// Top-k quadrants of `leader_rect` by score; ties go to the lower index.
pub fn select_patches(final_map: &Tensor, k: usize, leader_rect: &GeoRect) -> Result<PatchRanking> {
    check_k(k)?;
    let scores = scores_of(final_map)?;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranking(scores, &order[..k], leader_rect)
}

fn ranking(scores: [f32; 4], order: &[usize], leader_rect: &GeoRect) -> Result<PatchRanking> {
    let quads = leader_rect.quadrants()?;
    Ok(PatchRanking {
        final_map: scores,
        ranked: order
            .iter()
            .map(|&i| RankedPatch { index: i as u8, score: scores[i], rect: quads[i] })
            .collect(),
    })
}

/// Picks `k` patches with the given method. `final_map` is only consulted
/// for scores (and for the ranking under [`SelectionMethod::Attention`]).
pub fn choose_patches<R: Rng>(
    method: SelectionMethod,
    final_map: &Tensor,
    k: usize,
    leader_rect: &GeoRect,
    rng: &mut R,
) -> Result<PatchRanking> {
    check_k(k)?;
    let scores = scores_of(final_map)?;
    let order: Vec<usize> = match method {
        SelectionMethod::Attention => return select_patches(final_map, k, leader_rect),
        SelectionMethod::Order => (0..k).collect(),
        SelectionMethod::Reorder => (0..4).rev().take(k).collect(),
        SelectionMethod::Random => {
            let mut all = [0usize, 1, 2, 3];
            all.shuffle(rng);
            all[..k].to_vec()
        }
    };
    ranking(scores, &order, leader_rect)
}
