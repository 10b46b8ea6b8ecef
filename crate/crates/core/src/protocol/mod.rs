//! Leader-follower rounds, wire encoding and link modeling.

mod message;
mod network;
mod round;

pub use message::{decode, encode, quantize_stats, Message, Payload, Variant, GROUND, HEADER_LEN, MAGIC};
pub use network::{transmission_time, NetworkModel};
pub use round::{
    max_stat_diff, run_mission, run_round, ComputeModel, CorruptionPhase, CorruptionSchedule, Follower,
    FollowerModel, FollowerPath, FollowerTta, Leader, LeaderModel, LinkRecord, PhaseLatency, RoundConfig,
    RoundOutput, RoundReport, TtaMode, VolumeSummary, LEADER_ID,
};
