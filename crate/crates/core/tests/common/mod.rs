#![allow(dead_code)]

use skyseg_core::protocol::{FollowerModel, TtaMode};
use skyseg_core::scenario::{CnnSpec, LeaderBackend, LeaderConfig, SceneConfig, ScenarioConfig};

/// 240x160 scene, 120x80 leader view, oracle leader with one hotspot.
pub fn small_oracle(seed: u64, followers: usize) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        rounds: 1,
        followers,
        tta: TtaMode::Off,
        scene: SceneConfig { width: 240, height: 160, num_classes: 5, dynamic: false },
        leader: LeaderConfig {
            view_width: 120,
            view_height: 80,
            backend: LeaderBackend::Oracle { accuracy: 0.7, confidence: 0.6, hotspots: 1, hotspot_accuracy: 0.2 },
        },
        follower: skyseg_core::scenario::FollowerConfig {
            backend: FollowerModel::Oracle { accuracy: 0.95, confidence: 0.9 },
            cnn: CnnSpec { layers: 6, channels: 48, fan_in: 4, stride: 8 },
        },
        ..Default::default()
    }
}

/// Same geometry with CNN followers.
pub fn small_cnn(seed: u64, followers: usize, tta: TtaMode) -> ScenarioConfig {
    let mut c = small_oracle(seed, followers);
    c.follower.backend = FollowerModel::Cnn;
    c.tta = tta;
    c
}
