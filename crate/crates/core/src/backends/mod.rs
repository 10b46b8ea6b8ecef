//! Forward-only segmenters: a hierarchical attention model (leader), a
//! batch-norm CNN (followers), and a controlled-accuracy oracle.

mod cnn;
mod oracle;
mod transformer;
mod weights;

pub use cnn::{BnMode, CnnBackend, CnnConfig, CnnOutput, DEFAULT_BN_CHANNELS, DEFAULT_BN_LAYERS};
pub use oracle::{oracle_forward, oracle_predict, OracleLeader, OracleLeaderOutput};
pub use transformer::{
    TransformerBackend, TransformerConfig, TransformerOutput, INPUT_SIZE, STAGE_SIZES,
};

use crate::error::{Error, Result};
use crate::numerics::{image_dims, matmul, resize_nearest, softmax_rows, upsample_nearest, Grid, Tensor};
use crate::world::GeoRect;

/// Per-pixel class labels plus the winning-class probability.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    labels: Grid<u16>,
    probs: Grid<f32>,
    class_probs: Option<Tensor>,
}

impl SegPrediction {
    pub fn new(labels: Grid<u16>, probs: Grid<f32>) -> Result<Self> {
        if labels.dims() != probs.dims() {
            return Err(Error::Shape(format!(
                "labels {:?} and probs {:?} differ",
                labels.dims(),
                probs.dims()
            )));
        }
        if probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { labels, probs, class_probs: None })
    }

    /// Derives labels (argmax, lowest class on ties) and winning
    /// probabilities from a full `[H, W, K]` class-probability tensor.
    pub fn from_class_probs(class_probs: Tensor) -> Result<Self> {
        let (h, w, k) = image_dims(&class_probs)?;
        if k > u16::MAX as usize + 1 {
            return Err(Error::Parameter(format!("{k} classes exceed u16 labels")));
        }
        let mut labels = Vec::with_capacity(h * w);
        let mut probs = Vec::with_capacity(h * w);
        for px in class_probs.data().chunks_exact(k) {
            let mut best = 0;
            for (c, &p) in px.iter().enumerate().skip(1) {
                if p > px[best] {
                    best = c;
                }
            }
            labels.push(best as u16);
            probs.push(px[best].clamp(0.0, 1.0));
        }
        let mut out = Self::new(Grid::new(h, w, labels)?, Grid::new(h, w, probs)?)?;
        out.class_probs = Some(class_probs);
        Ok(out)
    }

    pub fn labels(&self) -> &Grid<u16> {
        &self.labels
    }

    pub fn probs(&self) -> &Grid<f32> {
        &self.probs
    }

    pub fn class_probs(&self) -> Option<&Tensor> {
        self.class_probs.as_ref()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn into_parts(self) -> (Grid<u16>, Grid<f32>) {
        (self.labels, self.probs)
    }

    pub fn max_label(&self) -> u16 {
        self.labels.data().iter().copied().max().unwrap_or(0)
    }

    /// Drops the full class distribution, keeping labels and winning probs.
    pub fn without_class_probs(mut self) -> Self {
        self.class_probs = None;
        self
    }

    pub fn crop(&self, rect: &GeoRect) -> Result<Self> {
        let (r, c, h, w) = (rect.y0 as usize, rect.x0 as usize, rect.height(), rect.width());
        Self::new(self.labels.crop(r, c, h, w)?, self.probs.crop(r, c, h, w)?)
    }

    pub fn upsample(&self, target_h: usize, target_w: usize) -> Result<Self> {
        Self::new(
            upsample_nearest(&self.labels, target_h, target_w)?,
            upsample_nearest(&self.probs, target_h, target_w)?,
        )
    }

    pub fn resize_nearest(&self, target_h: usize, target_w: usize) -> Result<Self> {
        Self::new(
            resize_nearest(&self.labels, target_h, target_w)?,
            resize_nearest(&self.probs, target_h, target_w)?,
        )
    }
}

/// Attention maps of one stage: one spatial map per transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct StageAttention {
    pub size: usize,
    pub blocks: [Tensor; 2],
}

/// Spatial attention maps of all four stages, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    stages: Vec<StageAttention>,
}

impl AttentionStack {
    pub fn new(stages: Vec<StageAttention>) -> Result<Self> {
        if stages.len() != 4 {
            return Err(Error::Shape(format!("expected 4 stages, got {}", stages.len())));
        }
        for st in &stages {
            for b in &st.blocks {
                if b.shape() != [st.size, st.size] {
                    return Err(Error::Shape(format!(
                        "stage map {:?} does not match size {}",
                        b.shape(),
                        st.size
                    )));
                }
                if b.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::Parameter("attention maps must be non-negative".into()));
                }
            }
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[StageAttention] {
        &self.stages
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.size).collect()
    }
}

/// `softmax_rows(q . k^T / sqrt(d))`.
pub fn attention_scores(q: &Tensor, k: &Tensor, d: usize) -> Result<Tensor> {
    let (_, qd) = q.dims2()?;
    let (_, kd) = k.dims2()?;
    if d == 0 || qd != d || kd != d {
        return Err(Error::Shape(format!(
            "q has {qd} columns and k has {kd}, expected d = {d}"
        )));
    }
    let logits = matmul(q, &k.transpose2()?)?.scale(1.0 / (d as f32).sqrt())?;
    softmax_rows(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_of_zeros_is_uniform() {
        let z = Tensor::zeros(&[5, 3]).unwrap();
        let a = attention_scores(&z, &z, 3).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn attention_matches_direct_formula() {
        let q = Tensor::new(vec![2, 4], vec![0.5, -1.0, 0.25, 2.0, 1.0, 0.0, -0.5, 0.3]).unwrap();
        let k = Tensor::new(vec![3, 4], vec![1.0, 0.2, 0.0, -1.0, 0.3, 0.3, 0.3, 0.3, -2.0, 1.0, 0.5, 0.0]).unwrap();
        for (qq, d) in [(q.clone(), 4usize), (q.scale(2.0).unwrap(), 4)] {
            let a = attention_scores(&qq, &k, d).unwrap();
            for i in 0..2 {
                let logits: Vec<f64> = (0..3)
                    .map(|j| {
                        (0..4).map(|c| qq.at2(i, c) as f64 * k.at2(j, c) as f64).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    assert!((a.at2(i, j) as f64 - l.exp() / z).abs() < 1e-6);
                }
            }
        }
        let a1 = attention_scores(&q, &k, 4).unwrap();
        let a2 = attention_scores(&q.scale(2.0).unwrap(), &k, 4).unwrap();
        assert!(a1.max_abs_diff(&a2) > 1e-3);
        assert!(attention_scores(&q, &k, 3).is_err());
    }

    #[test]
    fn aligned_query_peaks_at_its_key() {
        let e = Tensor::from_fn2(4, 4, |r, c| if r == c { 6.0 } else { 0.0 }).unwrap();
        let a = attention_scores(&e, &e, 4).unwrap();
        for i in 0..4 {
            let row: Vec<f32> = (0..4).map(|j| a.at2(i, j)).collect();
            let argmax = (0..4).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            assert_eq!(argmax, i);
        }
    }

    #[test]
    fn prediction_from_class_probs_breaks_ties_low() {
        let t = Tensor::new(vec![1, 2, 3], vec![0.4, 0.4, 0.2, 0.1, 0.2, 0.7]).unwrap();
        let p = SegPrediction::from_class_probs(t).unwrap();
        assert_eq!(p.labels().data(), &[0, 2]);
        assert_eq!(p.probs().data(), &[0.4, 0.7]);
    }

    #[test]
    fn prediction_validates() {
        let l = Grid::filled(2, 2, 0u16).unwrap();
        assert!(SegPrediction::new(l.clone(), Grid::filled(2, 3, 0.5).unwrap()).is_err());
        assert!(SegPrediction::new(l, Grid::filled(2, 2, 1.5).unwrap()).is_err());
    }
}
