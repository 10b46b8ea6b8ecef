//! Test-time adaptation of normalization statistics.
//!
//! The leader keeps one scalar `(mean, var)` pair per layer-norm layer; each
//! follower keeps per-channel pairs for every batch-norm layer. Both are
//! smoothed with an exponential moving average. Followers additionally mix in
//! the statistics their peers published for the same round before the EMA
//! step, which acts like a larger effective batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Running or batch statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of EMA updates folded into these statistics.
    pub t: u64,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::Config(format!(
                "mean/var length mismatch: {} vs {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| v < 0.0 || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter("statistics must be finite with var >= 0".into()));
        }
        Ok(Self { mean, var, t: 0 })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean], vec![var])
    }

    /// Zero mean, unit variance over `channels`.
    pub fn standard(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            t: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check_layout(&self, other: &NormStats) -> Result<()> {
        if self.channels() != other.channels() {
            return Err(Error::Config(format!(
                "channel layout mismatch: {} vs {}",
                self.channels(),
                other.channels()
            )));
        }
        Ok(())
    }
}

/// Per-layer statistics of a whole model.
pub type StatSet = Vec<NormStats>;

pub fn check_set_layout(a: &[NormStats], b: &[NormStats]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "layer count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    a.iter().zip(b).try_for_each(|(x, y)| x.check_layout(y))
}

pub fn total_channels(set: &[NormStats]) -> usize {
    set.iter().map(NormStats::channels).sum()
}

/// Scalar mean and population variance over every element of `x`.
pub fn ln_batch_stats(x: &Tensor) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::Shape("empty tensor".into()));
    }
    Ok(moments(x.data()))
}

pub(crate) fn moments(data: &[f32]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// Per-channel spatial mean and population variance of a `1 x C x H x W`
/// feature map.
pub fn bn_batch_stats(x: &Tensor) -> Result<NormStats> {
    match x.shape() {
        &[1, c, h, w] => Ok(channel_moments(x.data(), c, h * w)),
        s => Err(Error::Shape(format!(
            "expected 1 x C x H x W feature map, got {s:?}"
        ))),
    }
}

/// Same as [`bn_batch_stats`] on a channel-major buffer.
pub(crate) fn channel_moments(data: &[f32], channels: usize, plane: usize) -> NormStats {
    let (mean, var) = (0..channels)
        .map(|c| moments(&data[c * plane..(c + 1) * plane]))
        .unzip();
    NormStats { mean, var, t: 0 }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - alpha) * prev + alpha * incoming`, channel-wise for mean and var.
pub fn ema_update(prev: &NormStats, incoming: &NormStats, alpha: f64) -> Result<NormStats> {
    check_alpha(alpha)?;
    prev.check_layout(incoming)?;
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&p, &i)| (1.0 - alpha) * p + alpha * i)
            .collect()
    };
    Ok(NormStats {
        mean: mix(&prev.mean, &incoming.mean),
        var: mix(&prev.var, &incoming.var),
        t: prev.t + 1,
    })
}

/// How peer statistics are combined before the EMA step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    /// Arithmetic mean over all participating devices.
    #[default]
    Mean,
    /// Sum over devices without normalizing.
    Sum,
}

impl AggregateMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        }
    }
}

/// Combines `local` with peer statistics channel-wise. Peers are folded in
/// the order given; callers that need bit-identical results across devices
/// pass the contributions in device-id order.
pub fn aggregate_peers(peers: &[&NormStats], local: &NormStats, mode: AggregateMode) -> Result<NormStats> {
    let mut parts: Vec<&NormStats> = Vec::with_capacity(peers.len() + 1);
    parts.push(local);
    parts.extend_from_slice(peers);
    combine(&parts, mode)
}

fn combine(parts: &[&NormStats], mode: AggregateMode) -> Result<NormStats> {
    let first = parts
        .first()
        .ok_or_else(|| Error::State("nothing to aggregate".into()))?;
    for p in &parts[1..] {
        first.check_layout(p)?;
    }
    let n = parts.len() as f64;
    let c = first.channels();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for p in parts {
        for ch in 0..c {
            mean[ch] += p.mean[ch];
            var[ch] += p.var[ch];
        }
    }
    if mode == AggregateMode::Mean {
        for ch in 0..c {
            mean[ch] /= n;
            var[ch] /= n;
        }
    }
    Ok(NormStats { mean, var, t: 0 })
}

/// One leader LN adaptation step: EMA of every layer's running pair toward
/// the statistics of the newly captured image.
pub fn adapt_step_leader(model: Option<&[NormStats]>, batch: &[NormStats], alpha: f64) -> Result<StatSet> {
    let model = model.ok_or_else(|| {
        Error::State("leader statistics not initialized from training data".into())
    })?;
    check_set_layout(model, batch)?;
    model
        .iter()
        .zip(batch)
        .map(|(m, b)| ema_update(m, b, alpha))
        .collect()
}

/// Leader-side LN adaptation state.
#[derive(Clone, Debug)]
pub struct LnAdapter {
    running: Option<StatSet>,
    alpha: f64,
}

impl LnAdapter {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { running: None, alpha })
    }

    pub fn initialize(&mut self, training: StatSet) {
        self.running = Some(training);
    }

    pub fn running(&self) -> Option<&[NormStats]> {
        self.running.as_deref()
    }

    pub fn step(&mut self, batch: &[NormStats]) -> Result<&[NormStats]> {
        let next = adapt_step_leader(self.running.as_deref(), batch, self.alpha)?;
        Ok(self.running.insert(next))
    }
}

pub type DeviceId = u8;

#[derive(Clone, Debug)]
struct PeerEntry {
    round: u32,
    stats: StatSet,
}

/// A follower's adaptation state: its running BN statistics plus the latest
/// statistics published by each peer.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    owner: DeviceId,
    alpha: f64,
    mode: AggregateMode,
    running: StatSet,
    peers: BTreeMap<DeviceId, PeerEntry>,
}

impl MemoryBank {
    /// `initial` are the training-data statistics.
    pub fn new(owner: DeviceId, initial: StatSet, alpha: f64, mode: AggregateMode) -> Result<Self> {
        check_alpha(alpha)?;
        if initial.is_empty() {
            return Err(Error::Config("memory bank needs at least one layer".into()));
        }
        Ok(Self {
            owner,
            alpha,
            mode,
            running: initial,
            peers: BTreeMap::new(),
        })
    }

    pub fn owner(&self) -> DeviceId {
        self.owner
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mode(&self) -> AggregateMode {
        self.mode
    }

    pub fn running(&self) -> &[NormStats] {
        &self.running
    }

    pub fn peer_count(&self) -> usize {
        self.peers.len()
    }

    /// Stores a peer's published statistics for `round`, replacing any
    /// older entry from the same peer.
    pub fn store_peer(&mut self, peer: DeviceId, round: u32, stats: StatSet) -> Result<()> {
        if peer == self.owner {
            return Err(Error::Parameter(format!("device {peer} cannot be its own peer")));
        }
        check_set_layout(&self.running, &stats)?;
        self.peers.insert(peer, PeerEntry { round, stats });
        Ok(())
    }

    /// Peers whose latest entry belongs to `round`.
    pub fn peers_for_round(&self, round: u32) -> Vec<DeviceId> {
        self.peers
            .iter()
            .filter(|(_, e)| e.round == round)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Aggregates `local` with every peer entry for `round` (in device-id
    /// order, with `local` at the owner's position) and applies the EMA.
    /// Peers without an entry for this round are skipped.
    pub fn adapt_step_follower(&mut self, round: u32, local: &[NormStats]) -> Result<&[NormStats]> {
        check_set_layout(&self.running, local)?;
        let mut contributors: Vec<(DeviceId, &[NormStats])> = self
            .peers
            .iter()
            .filter(|(_, e)| e.round == round)
            .map(|(&id, e)| (id, e.stats.as_slice()))
            .collect();
        contributors.push((self.owner, local));
        contributors.sort_by_key(|(id, _)| *id);

        let mut next = Vec::with_capacity(self.running.len());
        for (layer, prev) in self.running.iter().enumerate() {
            let parts: Vec<&NormStats> = contributors.iter().map(|(_, s)| &s[layer]).collect();
            let agg = combine(&parts, self.mode)?;
            next.push(ema_update(prev, &agg, self.alpha)?);
        }
        self.running = next;
        Ok(&self.running)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(mean: &[f64], var: &[f64]) -> NormStats {
        NormStats::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn ln_stats_examples() {
        let c = Tensor::filled(&[2, 3, 3], 1.5).unwrap();
        assert_eq!(ln_batch_stats(&c).unwrap(), (1.5, 0.0));
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(ln_batch_stats(&x).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn ln_stats_of_standard_normal() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..64 * 32 * 32).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(vec![64, 32, 32], data).unwrap();
        let (m, v) = ln_batch_stats(&x).unwrap();
        assert!(m.abs() < 0.05 && (v - 1.0).abs() < 0.1, "{m} {v}");
    }

    #[test]
    fn bn_stats_examples() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![0.0, 2.0, 4.0, 4.0]).unwrap();
        let st = bn_batch_stats(&x).unwrap();
        assert_eq!(st.mean, vec![1.0, 4.0]);
        assert_eq!(st.var, vec![1.0, 0.0]);
        assert_eq!(st.channels(), 2);
        assert!(bn_batch_stats(&Tensor::zeros(&[2, 2, 1, 2]).unwrap()).is_err());
    }

    #[test]
    fn ema_examples() {
        let prev = s(&[0.0], &[1.0]);
        let inc = s(&[1.0], &[3.0]);
        assert_eq!(ema_update(&prev, &inc, 0.0).unwrap().mean, prev.mean);
        let full = ema_update(&prev, &inc, 1.0).unwrap();
        assert_eq!((full.mean.clone(), full.var.clone()), (inc.mean.clone(), inc.var.clone()));
        let step = ema_update(&prev, &inc, 0.05).unwrap();
        assert!((step.mean[0] - 0.05).abs() < 1e-15);
        assert_eq!(step.t, 1);
        assert!(matches!(
            ema_update(&prev, &s(&[0.0, 0.0], &[1.0, 1.0]), 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let local = s(&[0.0], &[1.0]);
        assert_eq!(aggregate_peers(&[], &local, AggregateMode::Mean).unwrap().mean, vec![0.0]);
        let two = s(&[2.0], &[3.0]);
        let agg = aggregate_peers(&[&two], &local, AggregateMode::Mean).unwrap();
        assert_eq!((agg.mean[0], agg.var[0]), (1.0, 2.0));
        let summed = aggregate_peers(&[&two], &local, AggregateMode::Sum).unwrap();
        assert_eq!((summed.mean[0], summed.var[0]), (2.0, 4.0));
        let same = s(&[0.3, -1.0], &[0.5, 2.0]);
        let agg = aggregate_peers(&[&same, &same, &same], &same, AggregateMode::Mean).unwrap();
        assert_eq!(agg.mean, same.mean);
        assert_eq!(agg.var, same.var);
    }

    #[test]
    fn leader_step_requires_initialization() {
        let batch = vec![s(&[0.0], &[1.0])];
        assert!(matches!(adapt_step_leader(None, &batch, 0.05), Err(Error::State(_))));
        let mut ad = LnAdapter::new(0.05).unwrap();
        assert!(ad.step(&batch).is_err());
        ad.initialize(vec![s(&[0.0], &[1.0])]);
        assert_eq!(ad.step(&batch).unwrap()[0].mean, vec![0.0]);
        let toward = vec![s(&[1.0], &[1.0])];
        let mut ad = LnAdapter::new(0.05).unwrap();
        ad.initialize(vec![s(&[0.0], &[1.0])]);
        assert!((ad.step(&toward).unwrap()[0].mean[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn leader_converges_geometrically() {
        let alpha = 0.05;
        let mut ad = LnAdapter::new(alpha).unwrap();
        ad.initialize(vec![s(&[0.0], &[1.0])]);
        let target = vec![s(&[2.0], &[0.5])];
        for t in 1..=60 {
            let cur = ad.step(&target).unwrap()[0].clone();
            let decay = (1.0 - alpha).powi(t);
            assert!((cur.mean[0] - (2.0 - 2.0 * decay)).abs() < 1e-12);
            assert!((cur.var[0] - (0.5 + 0.5 * decay)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_follower_matches_plain_ema() {
        let init = vec![s(&[0.0, 1.0], &[1.0, 1.0])];
        let mut bank = MemoryBank::new(1, init.clone(), 0.1, AggregateMode::Mean).unwrap();
        let mut plain = init[0].clone();
        for round in 0..20u32 {
            let b = s(&[round as f64, -(round as f64)], &[0.5, 2.0]);
            bank.adapt_step_follower(round, std::slice::from_ref(&b)).unwrap();
            plain = ema_update(&plain, &b, 0.1).unwrap();
            assert_eq!(bank.running()[0], plain);
        }
    }

    #[test]
    fn stale_peer_entries_are_skipped() {
        let init = vec![s(&[0.0], &[1.0])];
        let mut bank = MemoryBank::new(1, init, 1.0, AggregateMode::Mean).unwrap();
        bank.store_peer(2, 0, vec![s(&[10.0], &[1.0])]).unwrap();
        let out = bank.adapt_step_follower(1, &[s(&[2.0], &[1.0])]).unwrap();
        assert_eq!(out[0].mean, vec![2.0]);
        assert!(bank.store_peer(1, 0, vec![s(&[0.0], &[1.0])]).is_err());
        assert!(bank.store_peer(3, 0, vec![s(&[0.0, 0.0], &[1.0, 1.0])]).is_err());
    }

    fn stats_strategy(c: usize) -> impl Strategy<Value = NormStats> {
        (
            proptest::collection::vec(-100.0f64..100.0, c),
            proptest::collection::vec(0.0f64..100.0, c),
        )
            .prop_map(|(m, v)| NormStats::new(m, v).unwrap())
    }

    proptest! {
        #[test]
        fn ema_is_convex(prev in stats_strategy(4), inc in stats_strategy(4), alpha in 0.0f64..=1.0) {
            let out = ema_update(&prev, &inc, alpha).unwrap();
            for c in 0..4 {
                let (lo, hi) = (prev.mean[c].min(inc.mean[c]), prev.mean[c].max(inc.mean[c]));
                prop_assert!(out.mean[c] >= lo - 1e-12 && out.mean[c] <= hi + 1e-12);
                let (lo, hi) = (prev.var[c].min(inc.var[c]), prev.var[c].max(inc.var[c]));
                prop_assert!(out.var[c] >= lo - 1e-12 && out.var[c] <= hi + 1e-12);
                prop_assert!(out.var[c] >= 0.0);
            }
        }

        #[test]
        fn aggregation_is_permutation_invariant(a in stats_strategy(3), b in stats_strategy(3), c in stats_strategy(3), local in stats_strategy(3)) {
            let x = aggregate_peers(&[&a, &b, &c], &local, AggregateMode::Mean).unwrap();
            let y = aggregate_peers(&[&c, &a, &b], &local, AggregateMode::Mean).unwrap();
            for ch in 0..3 {
                prop_assert!((x.mean[ch] - y.mean[ch]).abs() < 1e-12);
                prop_assert!((x.var[ch] - y.var[ch]).abs() < 1e-12);
            }
        }
    }
}
