//! Scenario configuration, party construction and mission reports.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{CnnBackend, CnnConfig, OracleLeader, TransformerBackend, TransformerConfig, INPUT_SIZE};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::numerics::resize_image_nearest;
use crate::protocol::{
    run_mission, ComputeModel, CorruptionPhase, CorruptionSchedule, Follower, FollowerModel, Leader, NetworkModel,
    RoundConfig, RoundOutput, RoundReport, TtaMode,
};
use crate::selection::{SelectionMethod, SelectionWeights, MAX_PATCHES};
use crate::seed::{derive_seed, tag};
use crate::tta::{AggregateMode, DeviceId};
use crate::world::{follower_capture, generate_scene, leader_capture, CorruptionKind, Scene, MAX_SEVERITY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Draw a fresh scene every round instead of revisiting one.
    pub dynamic: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 1200, height: 800, num_classes: 6, dynamic: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LeaderBackend {
    Transformer {
        /// Stage widths are 64/128/160/256 divided by this.
        embed_divisor: usize,
    },
    Oracle {
        accuracy: f64,
        confidence: f64,
        hotspots: usize,
        hotspot_accuracy: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeaderConfig {
    pub view_width: usize,
    pub view_height: usize,
    pub backend: LeaderBackend,
}

impl Default for LeaderConfig {
    fn default() -> Self {
        Self { view_width: 600, view_height: 400, backend: LeaderBackend::Transformer { embed_divisor: 4 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnSpec {
    pub layers: usize,
    pub channels: usize,
    pub fan_in: usize,
    pub stride: usize,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self { layers: 60, channels: 17872, fan_in: 4, stride: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FollowerConfig {
    pub backend: FollowerModel,
    pub cnn: CnnSpec,
}

impl Default for FollowerConfig {
    fn default() -> Self {
        Self { backend: FollowerModel::Cnn, cnn: CnnSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub rounds: u32,
    pub followers: usize,
    pub fusion: FusionMode,
    pub selection: SelectionMethod,
    pub selection_weights: SelectionWeights,
    pub tta: TtaMode,
    pub aggregate: AggregateMode,
    pub alpha: f64,
    pub corruption: CorruptionKind,
    pub severity: u8,
    /// Overrides `corruption`/`severity` when non-empty.
    pub schedule: Vec<CorruptionPhase>,
    /// Clean scenes used to initialize normalization statistics.
    pub calibration_scenes: usize,
    pub scene: SceneConfig,
    pub leader: LeaderConfig,
    pub follower: FollowerConfig,
    pub network: NetworkModel,
    pub compute: ComputeModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 10,
            followers: 3,
            fusion: FusionMode::Prob,
            selection: SelectionMethod::Attention,
            selection_weights: SelectionWeights::default(),
            tta: TtaMode::Cross,
            aggregate: AggregateMode::Mean,
            alpha: 0.05,
            corruption: CorruptionKind::None,
            severity: 0,
            schedule: Vec::new(),
            calibration_scenes: 2,
            scene: SceneConfig::default(),
            leader: LeaderConfig::default(),
            follower: FollowerConfig::default(),
            network: NetworkModel::default(),
            compute: ComputeModel::default(),
        }
    }
}

/// Every seed a run depends on, derived from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedSeeds {
    pub master: u64,
    pub scene: u64,
    pub leader_weights: u64,
    pub follower_weights: u64,
    pub calibration: u64,
    pub rounds: u64,
    pub network: u64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets a dotted key such as `followers` or `network.bandwidth`. The
    /// value is parsed as JSON when possible, otherwise taken as a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let parsed: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = parsed;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn schedule(&self) -> CorruptionSchedule {
        if self.schedule.is_empty() {
            CorruptionSchedule::constant(self.corruption, self.severity)
        } else {
            CorruptionSchedule(self.schedule.clone())
        }
    }

    pub fn seeds(&self) -> ResolvedSeeds {
        let s = self.seed;
        ResolvedSeeds {
            master: s,
            scene: derive_seed(s, &[tag::SCENE]),
            leader_weights: derive_seed(s, &[tag::TRAINING, 0]),
            follower_weights: derive_seed(s, &[tag::TRAINING, 1]),
            calibration: derive_seed(s, &[tag::TRAINING, 2]),
            rounds: derive_seed(s, &[tag::SELECTION]),
            network: self.network.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.followers > MAX_PATCHES {
            return cfg(format!(
                "followers = {}: the 2x2 grid supports at most {MAX_PATCHES}",
                self.followers
            ));
        }
        if self.rounds == 0 {
            return cfg("rounds must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return cfg(format!("alpha {} outside [0, 1]", self.alpha));
        }
        let severities = std::iter::once(self.severity).chain(self.schedule.iter().map(|p| p.severity));
        for s in severities {
            if s > MAX_SEVERITY {
                return cfg(format!("severity {s} outside 0..={MAX_SEVERITY}"));
            }
        }
        let sc = &self.scene;
        if sc.num_classes < 2 || sc.width == 0 || sc.height == 0 {
            return cfg("scene needs positive dims and at least 2 classes".into());
        }
        let (vw, vh) = (self.leader.view_width, self.leader.view_height);
        if vw == 0 || vh == 0 || !sc.width.is_multiple_of(vw) || !sc.height.is_multiple_of(vh) {
            return cfg(format!(
                "leader view {vw}x{vh} must divide the {}x{} scene evenly",
                sc.width, sc.height
            ));
        }
        if !sc.width.is_multiple_of(2) || !sc.height.is_multiple_of(2) {
            return cfg("scene dims must be even to split into quadrants".into());
        }
        let stride = self.follower.cnn.stride;
        if stride == 0 || !(sc.width / 2).is_multiple_of(stride) || !(sc.height / 2).is_multiple_of(stride) {
            return cfg(format!("quadrant dims must be divisible by CNN stride {stride}"));
        }
        if self.calibration_scenes == 0 {
            return cfg("calibration_scenes must be at least 1".into());
        }
        self.network.validate()?;
        self.compute.validate()?;
        self.cnn_config()?;
        if let LeaderBackend::Transformer { embed_divisor } = self.leader.backend {
            TransformerConfig::scaled(sc.num_classes, embed_divisor)?;
        }
        Ok(())
    }

    fn cnn_config(&self) -> Result<CnnConfig> {
        let c = &self.follower.cnn;
        CnnConfig::uniform(self.scene.num_classes, c.layers, c.channels, c.fan_in, c.stride)
    }

    fn round_config(&self) -> RoundConfig {
        RoundConfig {
            selection: self.selection,
            weights: self.selection_weights,
            fusion: self.fusion,
            tta: self.tta,
            corruption: self.corruption,
            severity: self.severity,
            compute: self.compute,
            seed: self.seeds().rounds,
        }
    }
}

/// Built parties and scene source for one scenario.
pub struct Mission {
    config: ScenarioConfig,
    seeds: ResolvedSeeds,
    leader: Leader,
    followers: Vec<Follower>,
    base_scene: Arc<Scene>,
}

impl Mission {
    /// Builds weights from the configured seeds and initializes
    /// normalization statistics from clean training scenes.
    pub fn build(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let seeds = config.seeds();
        let sc = &config.scene;
        let needs_cnn = config.followers > 0
            && (config.follower.backend == FollowerModel::Cnn || config.tta != TtaMode::Off);
        let needs_training = needs_cnn || matches!(config.leader.backend, LeaderBackend::Transformer { .. });
        let training: Vec<Scene> = if needs_training {
            (0..config.calibration_scenes)
                .map(|i| generate_scene(derive_seed(seeds.calibration, &[i as u64]), sc.width, sc.height, sc.num_classes))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let (vw, vh) = (config.leader.view_width, config.leader.view_height);

        let leader = match config.leader.backend {
            LeaderBackend::Oracle { accuracy, confidence, hotspots, hotspot_accuracy } => {
                Leader::oracle(OracleLeader::new(accuracy, confidence, hotspots, hotspot_accuracy)?, vh, vw)
            }
            LeaderBackend::Transformer { embed_divisor } => {
                let mut t = TransformerBackend::new(
                    TransformerConfig::scaled(sc.num_classes, embed_divisor)?,
                    seeds.leader_weights,
                )?;
                let images = training
                    .iter()
                    .map(|s| resize_image_nearest(&leader_capture(s, vh, vw)?.image, INPUT_SIZE, INPUT_SIZE))
                    .collect::<Result<Vec<_>>>()?;
                t.calibrate(&images)?;
                Leader::transformer(t, config.alpha, vh, vw)?
            }
        };

        let mut cnn = CnnBackend::new(config.cnn_config()?, seeds.follower_weights)?;
        if needs_cnn {
            let mut images = Vec::new();
            for s in &training {
                for q in s.rect().quadrants()? {
                    images.push(follower_capture(s, &q)?.image);
                }
            }
            cnn.calibrate(&images)?;
        }
        let cnn = Arc::new(cnn);
        let followers = (1..=config.followers as DeviceId)
            .map(|id| Follower::new(id, config.follower.backend, cnn.clone(), config.alpha, config.aggregate))
            .collect::<Result<_>>()?;

        let base_scene = Arc::new(generate_scene(seeds.scene, sc.width, sc.height, sc.num_classes)?);
        Ok(Self { config, seeds, leader, followers, base_scene })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn leader(&self) -> &Leader {
        &self.leader
    }

    pub fn followers(&self) -> &[Follower] {
        &self.followers
    }

    pub fn scene_for(&self, round: u32) -> Result<Arc<Scene>> {
        scene_at(&self.config.scene, self.seeds.scene, &self.base_scene, round)
    }

    pub fn run(&mut self, observe: impl FnMut(&RoundOutput)) -> Result<MissionReport> {
        let base = self.config.round_config();
        let schedule = self.config.schedule();
        let (sc, seed, base_scene) = (self.config.scene.clone(), self.seeds.scene, self.base_scene.clone());
        let rounds = run_mission(
            &mut self.leader,
            &mut self.followers,
            &self.config.network,
            &base,
            &schedule,
            self.config.rounds,
            |round| scene_at(&sc, seed, &base_scene, round),
            observe,
        )?;
        let summary = MissionSummary::from_rounds(&rounds);
        Ok(MissionReport { config: self.config.clone(), seeds: self.seeds.clone(), summary, rounds })
    }
}

fn scene_at(sc: &SceneConfig, seed: u64, base: &Arc<Scene>, round: u32) -> Result<Arc<Scene>> {
    if !sc.dynamic {
        return Ok(base.clone());
    }
    let s = generate_scene(derive_seed(seed, &[round as u64]), sc.width, sc.height, sc.num_classes)?;
    Ok(Arc::new(s))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MissionSummary {
    pub rounds: usize,
    pub mean_miou_coarse: f64,
    pub mean_miou_fused: f64,
    pub mean_latency: f64,
    /// Largest per-round refinement payload.
    pub refinement_payload_bytes_per_round: u64,
    /// Largest statistic-value volume any follower sent in one round.
    pub stat_value_bytes_per_follower: u64,
    pub stat_count_bytes_per_round: u64,
    pub total_bytes: u64,
    pub lost_messages: u64,
}

impl MissionSummary {
    pub fn from_rounds(rounds: &[RoundReport]) -> Self {
        let n = rounds.len().max(1) as f64;
        let mean = |f: fn(&RoundReport) -> f64| rounds.iter().map(f).sum::<f64>() / n;
        Self {
            rounds: rounds.len(),
            mean_miou_coarse: mean(|r| r.miou_coarse),
            mean_miou_fused: mean(|r| r.miou_fused),
            mean_latency: mean(|r| r.latency.total),
            refinement_payload_bytes_per_round: rounds
                .iter()
                .map(|r| r.volume.refinement_payload_bytes)
                .max()
                .unwrap_or(0),
            stat_value_bytes_per_follower: rounds
                .iter()
                .flat_map(|r| r.follower_paths.iter().map(|p| p.stat_value_bytes))
                .max()
                .unwrap_or(0),
            stat_count_bytes_per_round: rounds.iter().map(|r| r.volume.stat_count_bytes).max().unwrap_or(0),
            total_bytes: rounds.iter().map(|r| r.volume.total_bytes).sum(),
            lost_messages: rounds.iter().map(|r| r.lost_messages as u64).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MissionReport {
    pub config: ScenarioConfig,
    pub seeds: ResolvedSeeds,
    pub summary: MissionSummary,
    pub rounds: Vec<RoundReport>,
}

pub const ROUND_CSV_HEADER: &str = "round,corruption,severity,selected,miou_coarse,miou_fused,\
latency_total,leader_inference,follower_phase,fusion,tta_exchange,\
assignment_bytes,refinement_payload_bytes,stat_value_bytes,stat_count_bytes,total_bytes,lost_messages";

impl MissionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per round.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROUND_CSV_HEADER);
        out.push('\n');
        for r in &self.rounds {
            let selected: Vec<String> = r.selected.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.round,
                r.corruption.name(),
                r.severity,
                selected.join(" "),
                r.miou_coarse,
                r.miou_fused,
                r.latency.total,
                r.latency.leader_inference,
                r.latency.follower_phase,
                r.latency.fusion,
                r.latency.tta_exchange,
                r.volume.assignment_bytes,
                r.volume.refinement_payload_bytes,
                r.volume.stat_value_bytes,
                r.volume.stat_count_bytes,
                r.volume.total_bytes,
                r.lost_messages
            ));
        }
        out
    }

    /// Message log, one line per frame.
    pub fn message_log(&self) -> String {
        self.rounds
            .iter()
            .flat_map(|r| r.log_lines())
            .map(|l| l + "\n")
            .collect()
    }
}

/// Builds and runs `config`.
pub fn run_scenario(config: ScenarioConfig) -> Result<MissionReport> {
    Mission::build(config)?.run(|_| {})
}
