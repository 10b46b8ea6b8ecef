//! Controlled-accuracy backends for experiments where segmentation quality
//! has to be dialed in rather than learned.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{AttentionStack, SegPrediction, StageAttention, STAGE_SIZES};
use crate::error::{Error, Result};
use crate::numerics::{area_resize, block_mode, softmax_in_place, Grid, Tensor};
use crate::seed::{rng_for, tag};
use crate::world::{GeoRect, Scene};

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Parameter(format!("{name} {v} outside [0, 1]")));
    }
    Ok(())
}

/// Copies `gt`, keeping each pixel with probability `accuracy(row, col)` and
/// otherwise replacing it with a uniformly drawn wrong class. Every pixel
/// reports `confidence` as its probability.
pub fn oracle_predict<R: Rng>(
    gt: &Grid<u16>,
    num_classes: usize,
    accuracy: impl Fn(usize, usize) -> f64,
    confidence: f64,
    rng: &mut R,
) -> Result<SegPrediction> {
    check_unit("confidence", confidence)?;
    if num_classes < 2 {
        return Err(Error::Parameter("oracle needs at least two classes".into()));
    }
    let (h, w) = gt.dims();
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let truth = gt.get(r, c);
            let keep = rng.gen::<f64>() < accuracy(r, c);
            labels.push(if keep {
                truth
            } else {
                let wrong = rng.gen_range(0..num_classes as u16 - 1);
                if wrong >= truth {
                    wrong + 1
                } else {
                    wrong
                }
            });
        }
    }
    SegPrediction::new(
        Grid::new(h, w, labels)?,
        Grid::filled(h, w, confidence as f32)?,
    )
}

/// Oracle prediction of `rect` at native resolution.
pub fn oracle_forward(scene: &Scene, rect: &GeoRect, accuracy: f64, confidence: f64, seed: u64) -> Result<SegPrediction> {
    check_unit("accuracy", accuracy)?;
    let gt = scene.labels_in(rect)?;
    let mut rng = rng_for(
        seed,
        &[tag::ORACLE, rect.x0 as u64, rect.y0 as u64, rect.x1 as u64, rect.y1 as u64],
    );
    oracle_predict(&gt, scene.num_classes(), |_, _| accuracy, confidence, &mut rng)
}

/// Leader-side oracle. Its coarse prediction is the block-majority ground
/// truth at leader resolution, corrupted at rate `1 - accuracy`, with
/// `hotspots` quadrant-local regions where accuracy drops to
/// `hotspot_accuracy`. Its attention maps put mass where errors are expected.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLeader {
    pub accuracy: f64,
    pub confidence: f64,
    pub hotspots: usize,
    pub hotspot_accuracy: f64,
    /// Softmax temperature applied to the expected-error map.
    pub sharpness: f32,
}

pub struct OracleLeaderOutput {
    /// Prediction at leader resolution.
    pub prediction: SegPrediction,
    pub attention: AttentionStack,
    /// Hotspot regions in scene coordinates.
    pub hotspots: Vec<GeoRect>,
    pub macs: u64,
}

impl OracleLeader {
    pub fn new(accuracy: f64, confidence: f64, hotspots: usize, hotspot_accuracy: f64) -> Result<Self> {
        check_unit("accuracy", accuracy)?;
        check_unit("confidence", confidence)?;
        check_unit("hotspot accuracy", hotspot_accuracy)?;
        if hotspots > 4 {
            return Err(Error::Parameter(format!("at most 4 hotspots (one per quadrant), got {hotspots}")));
        }
        Ok(Self { accuracy, confidence, hotspots, hotspot_accuracy, sharpness: 8.0 })
    }

    pub fn infer(&self, scene: &Scene, leader_h: usize, leader_w: usize, seed: u64) -> Result<OracleLeaderOutput> {
        let (sh, sw) = (scene.height(), scene.width());
        if leader_h == 0 || leader_w == 0 || sh % leader_h != 0 || sw % leader_w != 0 {
            return Err(Error::Shape(format!(
                "scene {sh}x{sw} is not an integer multiple of leader view {leader_h}x{leader_w}"
            )));
        }
        let (fh, fw) = (sh / leader_h, sw / leader_w);
        let gt = block_mode(scene.labels(), fh, fw)?;

        let mut rng = rng_for(seed, &[tag::HOTSPOT]);
        let mut quadrants = [0usize, 1, 2, 3];
        quadrants.shuffle(&mut rng);
        let (qh, qw) = (leader_h / 2, leader_w / 2);
        let (hh, hw) = ((qh / 2).max(1), (qw / 2).max(1));
        let mut spots = Vec::with_capacity(self.hotspots);
        for &q in &quadrants[..self.hotspots] {
            let (qr, qc) = ((q / 2) * qh, (q % 2) * qw);
            let r0 = qr + rng.gen_range(0..=qh - hh);
            let c0 = qc + rng.gen_range(0..=qw - hw);
            spots.push((r0, c0));
        }
        let in_spot = |r: usize, c: usize| {
            spots
                .iter()
                .any(|&(r0, c0)| r >= r0 && r < r0 + hh && c >= c0 && c < c0 + hw)
        };
        let acc = Grid::from_fn(leader_h, leader_w, |r, c| {
            if in_spot(r, c) {
                self.hotspot_accuracy
            } else {
                self.accuracy
            }
        })?;

        let mut noise_rng = rng_for(seed, &[tag::ORACLE]);
        let prediction = oracle_predict(
            &gt,
            scene.num_classes(),
            |r, c| acc.get(r, c),
            self.confidence,
            &mut noise_rng,
        )?;

        let err = Tensor::new(
            vec![leader_h, leader_w, 1],
            acc.data().iter().map(|&a| (1.0 - a) as f32).collect(),
        )?;
        let mut stages = Vec::with_capacity(4);
        for size in STAGE_SIZES {
            let small = area_resize(&err, size, size)?;
            let mut row: Vec<f32> = small.data().iter().map(|&e| self.sharpness * e).collect();
            softmax_in_place(&mut row);
            let scale = (size * size) as f32;
            let map = Tensor::new(vec![size, size], row.iter().map(|p| p * scale).collect())?;
            stages.push(StageAttention { size, blocks: [map.clone(), map] });
        }

        let hotspots = spots
            .iter()
            .map(|&(r0, c0)| {
                GeoRect::new(
                    (c0 * fw) as u32,
                    (r0 * fh) as u32,
                    ((c0 + hw) * fw) as u32,
                    ((r0 + hh) * fh) as u32,
                )
            })
            .collect::<Result<_>>()?;
        Ok(OracleLeaderOutput {
            prediction,
            attention: AttentionStack::new(stages)?,
            hotspots,
            macs: (leader_h * leader_w * scene.num_classes()) as u64,
        })
    }
}
