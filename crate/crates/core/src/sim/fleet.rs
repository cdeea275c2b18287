use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{run, FaultKind, FaultSpec, FinalState, SimReport, SimScenario};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineState {
    Training,
    Queued,
    OnHold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetMember {
    pub name: String,
    pub chips: u32,
    pub state: PipelineState,
}

/// Chip demand by pipeline state. Ratios are relative to training demand
/// and absent when nothing is training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipDemand {
    pub training: u64,
    pub queued: u64,
    pub on_hold: u64,
    pub ratios: Option<[f64; 3]>,
}

pub fn chip_demand_snapshot(fleet: &[FleetMember]) -> ChipDemand {
    let sum = |s: PipelineState| {
        fleet
            .iter()
            .filter(|m| m.state == s)
            .map(|m| m.chips as u64)
            .sum::<u64>()
    };
    let (training, queued, on_hold) = (
        sum(PipelineState::Training),
        sum(PipelineState::Queued),
        sum(PipelineState::OnHold),
    );
    let ratios = (training > 0).then(|| {
        let t = training as f64;
        [1.0, queued as f64 / t, on_hold as f64 / t]
    });
    ChipDemand {
        training,
        queued,
        on_hold,
        ratios,
    }
}

/// State of a simulated pipeline at `t`, or `None` once it has finished.
pub fn state_at(report: &SimReport, t: u64) -> Option<PipelineState> {
    if report.holds.iter().any(|h| h.active_at(t)) {
        return Some(PipelineState::OnHold);
    }
    let done = report.final_state == FinalState::Completed && t >= report.end_us;
    (!done).then_some(PipelineState::Training)
}

/// Snapshot of several pipelines under a chip ceiling. Held pipelines have
/// released their chips; the rest are admitted in order while they fit and
/// queue otherwise.
pub fn fleet_at(pipelines: &[(String, u32, &SimReport)], ceiling: u64, t: u64) -> Vec<FleetMember> {
    let mut used = 0u64;
    pipelines
        .iter()
        .filter_map(|(name, chips, report)| {
            let state = match state_at(report, t)? {
                PipelineState::OnHold => PipelineState::OnHold,
                _ if used + *chips as u64 <= ceiling => {
                    used += *chips as u64;
                    PipelineState::Training
                }
                _ => PipelineState::Queued,
            };
            Some(FleetMember {
                name: name.clone(),
                chips: *chips,
                state,
            })
        })
        .collect()
}

/// Chip demand of one pipeline over time, sampled at every reader-series
/// point and at the end. Columns: t_us, state, training_chips, on_hold_chips.
pub fn write_chip_demand_csv<W: Write>(report: &SimReport, chips: u32, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t_us", "state", "training_chips", "on_hold_chips"])?;
    let mut times: Vec<u64> = report.reader_series.iter().map(|s| s.t_us).collect();
    times.push(report.end_us);
    times.dedup();
    for t in times {
        let (state, training, held) = match state_at(report, t) {
            Some(PipelineState::OnHold) => ("on_hold", 0, chips),
            Some(_) => ("training", chips, 0),
            None => ("finished", 0, 0),
        };
        out.write_record([t.to_string(), state.to_string(), training.to_string(), held.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Time at which [`documented_fleet`] is sampled.
pub const FLEET_SNAPSHOT_US: u64 = 5_000;

/// A fleet whose demand mix is set to training 100, queued 103 and on-hold
/// 249 chips under a 100-chip ceiling. Held pipelines hit a permanent fault
/// or a long input stall before the snapshot.
pub fn documented_fleet(seed: u64) -> Result<(Vec<FleetMember>, ChipDemand)> {
    let running = SimScenario {
        total_events: 50_000,
        horizon_us: Some(2 * FLEET_SNAPSHOT_US),
        ..SimScenario::default()
    };
    let with_fault = |kind: FaultKind| SimScenario {
        faults: vec![FaultSpec { at_us: 1_000, kind }],
        ..running.clone()
    };
    let permanent = with_fault(FaultKind::Permanent);
    let stalled = with_fault(FaultKind::SigStall { duration_us: 100_000 });
    let mix: [(&str, u32, &SimScenario); 14] = [
        ("train-a", 32, &running),
        ("train-b", 32, &running),
        ("train-c", 16, &running),
        ("train-d", 8, &running),
        ("train-e", 8, &running),
        ("train-f", 4, &running),
        ("queue-a", 64, &running),
        ("queue-b", 32, &running),
        ("queue-c", 7, &running),
        ("held-a", 128, &permanent),
        ("held-b", 64, &stalled),
        ("held-c", 32, &permanent),
        ("held-d", 16, &stalled),
        ("held-e", 9, &permanent),
    ];
    let reports: Vec<SimReport> = mix
        .iter()
        .enumerate()
        .map(|(i, (_, _, sc))| run(sc, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let pipelines: Vec<(String, u32, &SimReport)> = mix
        .iter()
        .zip(&reports)
        .map(|((name, chips, _), r)| (name.to_string(), *chips, r))
        .collect();
    let fleet = fleet_at(&pipelines, 100, FLEET_SNAPSHOT_US);
    let demand = chip_demand_snapshot(&fleet);
    Ok((fleet, demand))
}
