//! Discrete-event simulation of one training pipeline: a controller running
//! wall-time epochs, readers filling a host buffer, a trainer draining it,
//! and the checkpoint, hold and preemption protocols around them.
//!
//! Time is integer microseconds. Events at equal times run in insertion
//! order, so a (scenario, seed) pair always yields the same report.

mod audit;
mod chaos;
mod engine;
mod fleet;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audit::{audit_exactly_once, protocol_violations, AuditReport, Violation};
pub use chaos::{
    calibration_scenario, chaos_scenario, preemption_commit_fraction, CALIBRATION_MEAN_WARNING_US, CALIBRATION_SEED,
};
pub use engine::{autoscale_readers, run};
pub use fleet::FLEET_SNAPSHOT_US;
pub use fleet::{
    chip_demand_snapshot, documented_fleet, fleet_at, state_at, write_chip_demand_csv, ChipDemand, FleetMember,
    PipelineState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// The whole stream is available at time zero (historical backfill).
    #[default]
    AtStart,
    /// Event `i` becomes available at `(i + 1) * data_time_per_event_us`.
    Realtime,
}

/// Uniform read-and-transform time of one work unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceTime {
    pub min_us: u64,
    pub max_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReaderScaling {
    /// Buffer fullness below which one more work unit is kept in flight.
    pub low: f64,
    /// Fullness above which one fewer is kept in flight.
    pub high: f64,
    pub interval_us: u64,
    pub initial_in_flight: u32,
    pub max_in_flight: u32,
}

impl Default for ReaderScaling {
    fn default() -> Self {
        Self {
            low: 0.3,
            high: 0.8,
            interval_us: 1_000,
            initial_in_flight: 2,
            max_in_flight: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// A component crash or network error. The epoch restarts from the last
    /// checkpoint without a hold.
    Transient {
        #[serde(default = "default_component")]
        component: String,
    },
    /// A non-recoverable error such as a NaN. Places a hold that is never
    /// released automatically.
    Permanent,
    /// Memoized inputs are unavailable for `duration_us`.
    SigStall { duration_us: u64 },
    /// Shutdown notice for `job` with `warning_us` of lead time.
    Preemption { warning_us: u64, job: String },
}

fn default_component() -> String {
    "reader".into()
}

impl FaultKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Transient { .. } => "transient",
            Self::Permanent => "permanent",
            Self::SigStall { .. } => "sig_stall",
            Self::Preemption { .. } => "preemption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_us: u64,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimScenario {
    pub total_events: u64,
    pub arrival: Arrival,
    /// Data time covered by one event; also the realtime arrival spacing.
    pub data_time_per_event_us: u64,
    pub work_unit_size: u64,
    pub host_buffer_capacity: u64,
    pub read_service: ServiceTime,
    pub train_us_per_event: u64,
    pub checkpoint_us: u64,
    pub epoch_wall_time_us: u64,
    /// Delay before retrying after a transient fault.
    pub restart_delay_us: u64,
    /// Time a preempted job needs to come back.
    pub preempt_restart_us: u64,
    pub scaling: ReaderScaling,
    pub chips: u32,
    pub faults: Vec<FaultSpec>,
    pub horizon_us: Option<u64>,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            total_events: 10_000,
            arrival: Arrival::AtStart,
            data_time_per_event_us: 1_000,
            work_unit_size: 50,
            host_buffer_capacity: 400,
            read_service: ServiceTime {
                min_us: 200,
                max_us: 600,
            },
            train_us_per_event: 2,
            checkpoint_us: 100,
            epoch_wall_time_us: 2_000,
            restart_delay_us: 500,
            preempt_restart_us: 1_000,
            scaling: ReaderScaling::default(),
            chips: 8,
            faults: Vec::new(),
            horizon_us: None,
        }
    }
}

impl SimScenario {
    /// Lists every malformed field at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        need(self.work_unit_size > 0, "work_unit_size must be > 0");
        need(
            self.host_buffer_capacity >= self.work_unit_size,
            "host_buffer_capacity must hold at least one work unit",
        );
        need(
            self.read_service.min_us <= self.read_service.max_us,
            "read_service.min_us must be <= max_us",
        );
        need(self.epoch_wall_time_us > 0, "epoch_wall_time_us must be > 0");
        need(
            self.arrival == Arrival::AtStart || self.data_time_per_event_us > 0,
            "data_time_per_event_us must be > 0 for realtime arrival",
        );
        let s = &self.scaling;
        need(
            (0.0..=1.0).contains(&s.low) && (0.0..=1.0).contains(&s.high) && s.low < s.high,
            "scaling bands need 0 <= low < high <= 1",
        );
        need(s.interval_us > 0, "scaling.interval_us must be > 0");
        need(s.initial_in_flight >= 1, "scaling.initial_in_flight must be >= 1");
        need(
            s.max_in_flight >= s.initial_in_flight,
            "scaling.max_in_flight must be >= initial_in_flight",
        );
        for (i, f) in self.faults.iter().enumerate() {
            if let FaultKind::SigStall { duration_us: 0 } = f.kind {
                errs.push(format!("faults[{i}].duration_us must be > 0"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Upper bound on quiesce plus checkpoint time from any point of an
    /// epoch: outstanding reads finish within one maximum service time, after
    /// which the trainer never idles while it works through the buffer, every
    /// reader slot and the unit it may already be training.
    pub fn worst_case_drain_us(&self) -> u64 {
        let events = self.work_unit_size * (self.scaling.max_in_flight as u64 + 1) + self.host_buffer_capacity;
        self.read_service.max_us + events * self.train_us_per_event + self.checkpoint_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    ComponentFailure,
    PreemptionTimeout,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Number of checkpoints committed before this attempt. Replays of a
    /// failed epoch share its index.
    pub epoch: u32,
    /// Sequential id of this attempt.
    pub attempt: u32,
    /// Half-open event range assigned during the attempt.
    pub events: (u64, u64),
    pub started_us: u64,
    pub ended_us: u64,
    pub committed: bool,
    pub checkpoint: Option<u32>,
    pub reason: Option<AbortReason>,
    /// Ended early because of a preemption notice.
    pub early: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: u32,
    pub epoch: u32,
    /// Last event id trained into the checkpointed state.
    pub watermark: u64,
    pub digest: String,
    pub written_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldKind {
    PermanentError,
    TransientStall,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingHold {
    pub kind: HoldKind,
    pub placed_us: u64,
    pub released_us: Option<u64>,
    pub resources_released: bool,
}

impl TrainingHold {
    pub fn active_at(&self, t: u64) -> bool {
        self.placed_us <= t && self.released_us.is_none_or(|r| t < r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreemptOutcome {
    CommittedEarly,
    RestartFromCheckpoint,
    /// The notice arrived with no epoch in progress.
    NoEpoch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreemptionRecord {
    pub job: String,
    pub notice_us: u64,
    pub deadline_us: u64,
    pub acknowledged: bool,
    pub attempt: Option<u32>,
    pub outcome: Option<PreemptOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TimelineKind {
    EpochStarted {
        attempt: u32,
        epoch: u32,
        first_event: u64,
    },
    UnitIssued {
        attempt: u32,
        start: u64,
        end: u64,
    },
    UnitTrained {
        attempt: u32,
        start: u64,
        end: u64,
    },
    QuiesceBegun {
        attempt: u32,
    },
    EpochCommitted {
        attempt: u32,
        checkpoint: u32,
        watermark: u64,
    },
    EpochAborted {
        attempt: u32,
        reason: AbortReason,
    },
    Fault {
        index: usize,
        kind: String,
    },
    HoldPlaced {
        hold: usize,
        kind: HoldKind,
    },
    HoldReleased {
        hold: usize,
    },
    ResourcesReleased,
    ResourcesReacquired,
    PreemptionNotice {
        index: usize,
        job: String,
        deadline_us: u64,
    },
    JobDown {
        job: String,
    },
    JobRejoined {
        job: String,
    },
    ReadersScaled {
        in_flight: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub t_us: u64,
    #[serde(flatten)]
    pub kind: TimelineKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReaderSample {
    pub t_us: u64,
    pub fullness: f64,
    pub in_flight: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvancingSample {
    pub t_us: u64,
    pub data_us: u64,
    pub rate: f64,
}

/// Run-length encoded count of committed trainings per event id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainedRun {
    pub start: u64,
    pub end: u64,
    pub count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalState {
    #[serde(rename = "COMPLETED")]
    Completed,
    #[serde(rename = "HOLD(permanent)")]
    HeldPermanent,
    #[serde(rename = "HORIZON")]
    Horizon,
}

impl std::fmt::Display for FinalState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Completed => "COMPLETED",
            Self::HeldPermanent => "HOLD(permanent)",
            Self::Horizon => "HORIZON",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub total_events: u64,
    pub data_time_per_event_us: u64,
    pub end_us: u64,
    pub final_state: FinalState,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub trained: Vec<TrainedRun>,
    pub holds: Vec<TrainingHold>,
    pub preemptions: Vec<PreemptionRecord>,
    pub reader_series: Vec<ReaderSample>,
    pub advancing_series: Vec<AdvancingSample>,
    pub timeline: Vec<TimelineEntry>,
}

impl SimReport {
    pub fn final_watermark(&self) -> Option<u64> {
        self.checkpoints.last().map(|c| c.watermark)
    }

    /// Committed training count for every event id.
    pub fn trained_counts(&self) -> Vec<u32> {
        let mut counts = vec![0; self.total_events as usize];
        for r in &self.trained {
            for c in &mut counts[r.start as usize..r.end as usize] {
                *c = r.count;
            }
        }
        counts
    }

    /// Fraction of preempted epochs that committed early. `None` if no
    /// notice hit a running epoch.
    pub fn preemption_commit_fraction(&self) -> Option<f64> {
        let (mut early, mut total) = (0, 0);
        for p in &self.preemptions {
            match p.outcome {
                Some(PreemptOutcome::CommittedEarly) => {
                    early += 1;
                    total += 1;
                }
                Some(PreemptOutcome::RestartFromCheckpoint) => total += 1,
                _ => {}
            }
        }
        (total > 0).then(|| early as f64 / total as f64)
    }

    /// Data time trained over wall time at the last checkpoint.
    pub fn advancing_rate(&self) -> Option<f64> {
        self.advancing_series.last().map(|s| s.rate)
    }

    pub fn write_reader_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_us", "fullness", "in_flight"])?;
        for s in &self.reader_series {
            out.write_record([
                s.t_us.to_string(),
                format!("{:.6}", s.fullness),
                s.in_flight.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_advancing_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_us", "data_us", "rate"])?;
        for s in &self.advancing_series {
            out.write_record([s.t_us.to_string(), s.data_us.to_string(), format!("{:.6}", s.rate)])?;
        }
        out.flush()?;
        Ok(())
    }
}
