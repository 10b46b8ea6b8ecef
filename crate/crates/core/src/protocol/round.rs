//! One collaboration round and multi-round missions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::message::{decode, encode, quantize_stats, Message, Payload};
use super::network::NetworkModel;
use crate::backends::{
    oracle_forward, AttentionStack, BnMode, CnnBackend, OracleLeader, SegPrediction, TransformerBackend, INPUT_SIZE,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse_with, FusionMode};
use crate::metrics::miou;
use crate::numerics::{resize_image_nearest, Grid};
use crate::seed::{derive_seed, rng_for, tag};
use crate::selection::{choose_patches, final_attention, RankedPatch, SelectionMethod, SelectionWeights, MAX_PATCHES};
use crate::tta::{AggregateMode, DeviceId, LnAdapter, MemoryBank, NormStats, StatSet};
use crate::world::{apply_corruption, follower_capture, leader_capture, CorruptionKind, Scene};

pub const LEADER_ID: DeviceId = 0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtaMode {
    /// Normalization statistics stay at their training values.
    Off,
    /// Each device adapts from its own batch statistics.
    Local,
    /// Followers also fold in statistics published by their peers.
    #[default]
    Cross,
}

impl TtaMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::Local => "local",
            Self::Cross => "cross",
        }
    }
}

/// Throughput figures used to turn work into modeled latency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    pub leader_macs_per_sec: f64,
    pub follower_macs_per_sec: f64,
    pub fusion_pixels_per_sec: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self { leader_macs_per_sec: 2e9, follower_macs_per_sec: 4e9, fusion_pixels_per_sec: 1e8 }
    }
}

impl ComputeModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("leader_macs_per_sec", self.leader_macs_per_sec),
            ("follower_macs_per_sec", self.follower_macs_per_sec),
            ("fusion_pixels_per_sec", self.fusion_pixels_per_sec),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("compute.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub enum LeaderModel {
    Transformer(Box<TransformerBackend>),
    Oracle(OracleLeader),
}

pub struct Leader {
    model: LeaderModel,
    ln: Option<LnAdapter>,
    view_h: usize,
    view_w: usize,
}

impl Leader {
    /// The backend must be calibrated; its training statistics seed the LN
    /// adapter.
    pub fn transformer(backend: TransformerBackend, alpha: f64, view_h: usize, view_w: usize) -> Result<Self> {
        let training = backend
            .training_ln()
            .ok_or_else(|| Error::State("leader statistics not initialized from training data".into()))?
            .to_vec();
        let mut ln = LnAdapter::new(alpha)?;
        ln.initialize(training);
        Ok(Self { model: LeaderModel::Transformer(Box::new(backend)), ln: Some(ln), view_h, view_w })
    }

    pub fn oracle(model: OracleLeader, view_h: usize, view_w: usize) -> Self {
        Self { model: LeaderModel::Oracle(model), ln: None, view_h, view_w }
    }

    pub fn model(&self) -> &LeaderModel {
        &self.model
    }

    pub fn ln(&self) -> Option<&LnAdapter> {
        self.ln.as_ref()
    }

    pub fn view(&self) -> (usize, usize) {
        (self.view_h, self.view_w)
    }

    fn infer(&mut self, scene: &Scene, cfg: &RoundConfig, round: u32) -> Result<(SegPrediction, AttentionStack, u64)> {
        let (vh, vw) = (self.view_h, self.view_w);
        match &self.model {
            LeaderModel::Oracle(o) => {
                let out = o.infer(scene, vh, vw, derive_seed(cfg.seed, &[tag::ORACLE, round as u64, LEADER_ID as u64]))?;
                Ok((out.prediction, out.attention, out.macs))
            }
            LeaderModel::Transformer(t) => {
                let obs = leader_capture(scene, vh, vw)?;
                let obs = apply_corruption(
                    &obs,
                    cfg.corruption,
                    cfg.severity,
                    derive_seed(cfg.seed, &[tag::CORRUPTION, round as u64, LEADER_ID as u64]),
                )?;
                let input = resize_image_nearest(&obs.image, INPUT_SIZE, INPUT_SIZE)?;
                let adapting = cfg.tta != TtaMode::Off;
                let ln = self.ln.as_mut().expect("transformer leaders carry an LN adapter");
                let out = t.forward(&input, if adapting { ln.running() } else { None })?;
                if adapting {
                    ln.step(&out.ln_stats)?;
                }
                let pred = out.prediction.resize_nearest(vh, vw)?.without_class_probs();
                Ok((pred, out.attention, out.macs))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FollowerModel {
    Cnn,
    Oracle { accuracy: f64, confidence: f64 },
}

pub struct Follower {
    id: DeviceId,
    model: FollowerModel,
    cnn: Arc<CnnBackend>,
    bank: MemoryBank,
}

impl Follower {
    /// The bank starts from the CNN's running (training) statistics.
    pub fn new(id: DeviceId, model: FollowerModel, cnn: Arc<CnnBackend>, alpha: f64, aggregate: AggregateMode) -> Result<Self> {
        if id == LEADER_ID || id == super::message::GROUND {
            return Err(Error::Config(format!("follower id {id} is reserved")));
        }
        let bank = MemoryBank::new(id, cnn.running_stats().to_vec(), alpha, aggregate)?;
        Ok(Self { id, model, cnn, bank })
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn model(&self) -> FollowerModel {
        self.model
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    /// Refinement of `patch` plus this round's BN batch statistics when
    /// adapting.
    fn work(&self, scene: &Scene, patch: &RankedPatch, cfg: &RoundConfig, round: u32) -> Result<(SegPrediction, Option<StatSet>, u64)> {
        let adapting = cfg.tta != TtaMode::Off;
        let needs_cnn = adapting || self.model == FollowerModel::Cnn;
        let (mut pred, mut stats, mut macs) = (None, None, 0);
        if needs_cnn {
            let obs = follower_capture(scene, &patch.rect)?;
            let obs = apply_corruption(
                &obs,
                cfg.corruption,
                cfg.severity,
                derive_seed(cfg.seed, &[tag::CORRUPTION, round as u64, self.id as u64]),
            )?;
            let mode = if adapting { BnMode::Collecting } else { BnMode::Frozen };
            let out = self.cnn.forward(&obs.image, mode, adapting.then(|| self.bank.running()))?;
            pred = Some(out.prediction.without_class_probs());
            stats = out.batch_stats;
            macs = out.macs;
        }
        if let FollowerModel::Oracle { accuracy, confidence } = self.model {
            let seed = derive_seed(cfg.seed, &[tag::ORACLE, round as u64, self.id as u64]);
            pred = Some(oracle_forward(scene, &patch.rect, accuracy, confidence, seed)?);
            macs += (patch.rect.area() * scene.num_classes()) as u64;
        }
        Ok((pred.expect("some backend ran"), stats, macs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub selection: SelectionMethod,
    pub weights: SelectionWeights,
    pub fusion: FusionMode,
    pub tta: TtaMode,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub compute: ComputeModel,
    /// Drives corruption noise, oracle noise and random selection.
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            selection: SelectionMethod::Attention,
            weights: SelectionWeights::default(),
            fusion: FusionMode::Prob,
            tta: TtaMode::Cross,
            corruption: CorruptionKind::None,
            severity: 0,
            compute: ComputeModel::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PhaseLatency {
    pub leader_inference: f64,
    /// Slowest single assignment transfer.
    pub assignment_tx: f64,
    /// Slowest single follower inference.
    pub follower_inference: f64,
    /// Slowest single refinement transfer.
    pub refinement_tx: f64,
    /// Slowest complete follower path (assignment, inference, refinement).
    pub follower_phase: f64,
    pub fusion: f64,
    pub tta_exchange: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FollowerPath {
    pub follower: DeviceId,
    pub patch: u8,
    pub assignment_tx: f64,
    pub inference: f64,
    pub refinement_tx: f64,
    pub total: f64,
    /// Statistic values sent to peers, 4 bytes per channel per message.
    pub stat_value_bytes: u64,
    pub stat_tx: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkRecord {
    pub variant: &'static str,
    pub sender: DeviceId,
    pub recipient: DeviceId,
    pub bytes: u64,
    pub payload_bytes: u64,
    pub delivered: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VolumeSummary {
    pub assignment_bytes: u64,
    pub refinement_payload_bytes: u64,
    pub refinement_bytes: u64,
    /// Means and variances only; comparable to the 4-bytes-per-channel figure.
    pub stat_value_bytes: u64,
    /// Per-layer channel-count words carried alongside the values.
    pub stat_count_bytes: u64,
    pub stat_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub final_attention: [f32; 4],
    /// Patch index assigned to each follower, in follower order.
    pub selected: Vec<u8>,
    pub latency: PhaseLatency,
    pub follower_paths: Vec<FollowerPath>,
    pub volume: VolumeSummary,
    pub links: Vec<LinkRecord>,
    pub lost_messages: u32,
    pub miou_coarse: f64,
    pub miou_fused: f64,
}

impl RoundReport {
    /// One line per message, for replay comparison.
    pub fn log_lines(&self) -> Vec<String> {
        self.links
            .iter()
            .map(|l| {
                format!(
                    "round={} variant={} from={} to={} bytes={} delivered={} sha256={}",
                    self.round, l.variant, l.sender, l.recipient, l.bytes, l.delivered, l.sha256
                )
            })
            .collect()
    }
}

/// Adaptation inputs and result of one follower in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct FollowerTta {
    pub follower: DeviceId,
    pub local: StatSet,
    pub published: bool,
    /// Peers whose statistics arrived this round.
    pub received_from: Vec<DeviceId>,
    pub adapted: StatSet,
}

pub struct RoundOutput {
    pub coarse: SegPrediction,
    pub fused: SegPrediction,
    pub report: RoundReport,
    pub tta: Vec<FollowerTta>,
}

struct Sent {
    record: LinkRecord,
    frame: Vec<u8>,
    time: f64,
}

fn send(msg: &Message, net: &NetworkModel, links: &mut Vec<LinkRecord>) -> Result<Sent> {
    let frame = encode(msg)?;
    let record = LinkRecord {
        variant: msg.variant().name(),
        sender: msg.sender,
        recipient: msg.recipient,
        bytes: frame.len() as u64,
        payload_bytes: msg.payload_len() as u64,
        delivered: net.delivered(msg.round, msg.variant() as u8, msg.sender, msg.recipient),
        sha256: hex::encode(Sha256::digest(&frame)),
    };
    links.push(record.clone());
    Ok(Sent { time: net.transmission_time(frame.len() as u64), record, frame })
}

fn check_followers(followers: &[Follower]) -> Result<()> {
    if followers.len() > MAX_PATCHES {
        return Err(Error::Config(format!(
            "{} followers requested; the 2x2 grid supports at most {MAX_PATCHES}",
            followers.len()
        )));
    }
    let mut ids: Vec<DeviceId> = followers.iter().map(|f| f.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != followers.len() {
        return Err(Error::Config("follower ids must be unique".into()));
    }
    Ok(())
}

/// Runs capture, leader inference, selection, assignment, follower
/// refinement, fusion and statistics exchange for one round.
pub fn run_round(
    scene: &Scene,
    leader: &mut Leader,
    followers: &mut [Follower],
    net: &NetworkModel,
    cfg: &RoundConfig,
    round: u32,
) -> Result<RoundOutput> {
    check_followers(followers)?;
    net.validate()?;
    cfg.compute.validate()?;
    let (sh, sw) = (scene.height(), scene.width());
    let mut links = Vec::new();

    let (lead_pred, attention, leader_macs) = leader.infer(scene, cfg, round)?;
    let coarse = lead_pred.upsample(sh, sw)?;

    let final_map = final_attention(&attention, &cfg.weights)?;
    let final_scores: [f32; 4] = final_map.data().try_into().expect("2x2 map");
    let ranked = if followers.is_empty() {
        Vec::new()
    } else {
        let mut rng = rng_for(cfg.seed, &[tag::SELECTION, round as u64]);
        choose_patches(cfg.selection, &final_map, followers.len(), &scene.rect(), &mut rng)?.ranked
    };

    // Assignment: follower i receives the i-th ranked patch.
    let mut assigned: Vec<Option<(RankedPatch, f64)>> = Vec::with_capacity(followers.len());
    for (f, patch) in followers.iter().zip(&ranked) {
        let msg = Message {
            sender: LEADER_ID,
            recipient: f.id,
            round,
            payload: Payload::TaskAssign { rects: vec![patch.rect] },
        };
        let sent = send(&msg, net, &mut links)?;
        assigned.push(if sent.record.delivered {
            let Payload::TaskAssign { rects } = decode(&sent.frame)?.payload else {
                return Err(Error::State("assignment decoded to another variant".into()));
            };
            Some((RankedPatch { rect: rects[0], ..patch.clone() }, sent.time))
        } else {
            None
        });
    }

    let work: Vec<Option<(SegPrediction, Option<StatSet>, u64)>> = followers
        .par_iter()
        .zip(&assigned)
        .map(|(f, a)| a.as_ref().map(|(p, _)| f.work(scene, p, cfg, round)).transpose())
        .collect::<Result<_>>()?;

    let mut refinements = Vec::new();
    let mut paths = Vec::new();
    for ((f, a), w) in followers.iter().zip(&assigned).zip(&work) {
        let (Some((patch, assign_time)), Some((pred, _, macs))) = (a, w) else {
            continue;
        };
        let msg = Message {
            sender: f.id,
            recipient: LEADER_ID,
            round,
            payload: Payload::refinement(patch.index, pred),
        };
        let sent = send(&msg, net, &mut links)?;
        if sent.record.delivered {
            let Payload::Refinement { patch_index, labels, probs } = decode(&sent.frame)?.payload else {
                return Err(Error::State("refinement decoded to another variant".into()));
            };
            if patch_index != patch.index {
                return Err(Error::State(format!("refinement for patch {patch_index}, expected {}", patch.index)));
            }
            let (h, w) = (patch.rect.height(), patch.rect.width());
            let received = SegPrediction::new(Grid::new(h, w, labels)?, Grid::new(h, w, probs)?)?;
            refinements.push((patch.rect, received));
        }
        let inference = *macs as f64 / cfg.compute.follower_macs_per_sec;
        paths.push(FollowerPath {
            follower: f.id,
            patch: patch.index,
            assignment_tx: *assign_time,
            inference,
            refinement_tx: sent.time,
            total: assign_time + inference + sent.time,
            stat_value_bytes: 0,
            stat_tx: 0.0,
        });
    }

    let fused = fuse_with(cfg.fusion, &coarse, &refinements)?;
    let fused_pixels: usize = refinements.iter().map(|(r, _)| r.area()).sum();

    let tta = exchange_and_adapt(followers, &work, net, cfg, round, &mut links, &mut paths)?;

    let max_of = |f: fn(&FollowerPath) -> f64| paths.iter().map(f).fold(0.0, f64::max);
    let mut latency = PhaseLatency {
        leader_inference: leader_macs as f64 / cfg.compute.leader_macs_per_sec,
        assignment_tx: max_of(|p| p.assignment_tx),
        follower_inference: max_of(|p| p.inference),
        refinement_tx: max_of(|p| p.refinement_tx),
        follower_phase: max_of(|p| p.total),
        fusion: (sh * sw + fused_pixels) as f64 / cfg.compute.fusion_pixels_per_sec,
        tta_exchange: max_of(|p| p.stat_tx),
        total: 0.0,
    };
    latency.total = latency.leader_inference + latency.follower_phase + latency.fusion + latency.tta_exchange;

    let mut volume = VolumeSummary::default();
    for l in &links {
        volume.total_bytes += l.bytes;
        match l.variant {
            "task_assign" => volume.assignment_bytes += l.bytes,
            "refinement" => {
                volume.refinement_bytes += l.bytes;
                volume.refinement_payload_bytes += l.payload_bytes;
            }
            "stat_share" => volume.stat_bytes += l.bytes,
            _ => {}
        }
    }
    volume.stat_value_bytes = paths.iter().map(|p| p.stat_value_bytes).sum();
    volume.stat_count_bytes = links
        .iter()
        .filter(|l| l.variant == "stat_share")
        .map(|l| l.payload_bytes)
        .sum::<u64>()
        - volume.stat_value_bytes;

    let report = RoundReport {
        round,
        corruption: cfg.corruption,
        severity: cfg.severity,
        final_attention: final_scores,
        selected: paths.iter().map(|p| p.patch).collect(),
        latency,
        follower_paths: paths,
        volume,
        lost_messages: links.iter().filter(|l| !l.delivered).count() as u32,
        links,
        miou_coarse: miou(coarse.labels(), scene.labels(), scene.num_classes())?,
        miou_fused: miou(fused.labels(), scene.labels(), scene.num_classes())?,
    };
    Ok(RoundOutput { coarse, fused, report, tta })
}

fn exchange_and_adapt(
    followers: &mut [Follower],
    work: &[Option<(SegPrediction, Option<StatSet>, u64)>],
    net: &NetworkModel,
    cfg: &RoundConfig,
    round: u32,
    links: &mut Vec<LinkRecord>,
    paths: &mut [FollowerPath],
) -> Result<Vec<FollowerTta>> {
    if cfg.tta == TtaMode::Off {
        return Ok(Vec::new());
    }
    let locals: Vec<Option<&StatSet>> = work
        .iter()
        .map(|w| w.as_ref().and_then(|(_, s, _)| s.as_ref()))
        .collect();
    let ids: Vec<DeviceId> = followers.iter().map(|f| f.id).collect();
    let publishing = cfg.tta == TtaMode::Cross && followers.len() > 1;

    let mut received: Vec<Vec<DeviceId>> = vec![Vec::new(); followers.len()];
    if publishing {
        for (i, local) in locals.iter().enumerate() {
            let Some(local) = local else { continue };
            let mut value_bytes = 0u64;
            let mut tx = 0.0;
            for (j, &peer) in ids.iter().enumerate() {
                if j == i {
                    continue;
                }
                let msg = Message {
                    sender: ids[i],
                    recipient: peer,
                    round,
                    payload: Payload::StatShare { stats: (*local).clone() },
                };
                let sent = send(&msg, net, links)?;
                value_bytes += local.iter().map(|s| 4 * s.channels() as u64).sum::<u64>();
                tx += sent.time;
                if sent.record.delivered {
                    let Payload::StatShare { stats } = decode(&sent.frame)?.payload else {
                        return Err(Error::State("statistics decoded to another variant".into()));
                    };
                    followers[j].bank.store_peer(ids[i], round, stats)?;
                    received[j].push(ids[i]);
                }
            }
            if let Some(p) = paths.iter_mut().find(|p| p.follower == ids[i]) {
                p.stat_value_bytes = value_bytes;
                p.stat_tx = tx;
            }
        }
    }

    let mut out = Vec::new();
    for (i, f) in followers.iter_mut().enumerate() {
        let Some(local) = locals[i] else { continue };
        // Publishers adapt from the same binary16 values their peers see,
        // which keeps every device's aggregate bit-identical.
        let used = if publishing { quantize_stats(local)? } else { local.clone() };
        let adapted = f.bank.adapt_step_follower(round, &used)?.to_vec();
        received[i].sort_unstable();
        out.push(FollowerTta {
            follower: f.id,
            local: local.clone(),
            published: publishing,
            received_from: std::mem::take(&mut received[i]),
            adapted,
        });
    }
    Ok(out)
}

/// Piecewise-constant corruption over rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionPhase {
    pub from_round: u32,
    pub kind: CorruptionKind,
    pub severity: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorruptionSchedule(pub Vec<CorruptionPhase>);

impl CorruptionSchedule {
    pub fn constant(kind: CorruptionKind, severity: u8) -> Self {
        Self(vec![CorruptionPhase { from_round: 0, kind, severity }])
    }

    /// The latest phase starting at or before `round`; clean before any.
    pub fn at(&self, round: u32) -> (CorruptionKind, u8) {
        self.0
            .iter()
            .filter(|p| p.from_round <= round)
            .max_by_key(|p| p.from_round)
            .map_or((CorruptionKind::None, 0), |p| (p.kind, p.severity))
    }
}

/// Runs `rounds` consecutive rounds. Adaptation state carries over; the
/// corruption of each round comes from `schedule`. `observe` sees every
/// round's full output.
#[allow(clippy::too_many_arguments)]
pub fn run_mission(
    leader: &mut Leader,
    followers: &mut [Follower],
    net: &NetworkModel,
    base: &RoundConfig,
    schedule: &CorruptionSchedule,
    rounds: u32,
    mut scene_for: impl FnMut(u32) -> Result<Arc<Scene>>,
    mut observe: impl FnMut(&RoundOutput),
) -> Result<Vec<RoundReport>> {
    if rounds == 0 {
        return Err(Error::Config("a mission needs at least one round".into()));
    }
    let mut reports = Vec::with_capacity(rounds as usize);
    for round in 0..rounds {
        let (corruption, severity) = schedule.at(round);
        let cfg = RoundConfig { corruption, severity, ..base.clone() };
        let scene = scene_for(round)?;
        let out = run_round(&scene, leader, followers, net, &cfg, round)?;
        log::info!(
            "round {round}: coarse {:.2} fused {:.2} bytes {}",
            out.report.miou_coarse,
            out.report.miou_fused,
            out.report.volume.total_bytes
        );
        observe(&out);
        reports.push(out.report);
    }
    Ok(reports)
}

/// Channel-wise distance between two statistic sets, for trace checks.
pub fn max_stat_diff(a: &[NormStats], b: &[NormStats]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.mean
                .iter()
                .zip(&y.mean)
                .chain(x.var.iter().zip(&y.var))
                .map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
