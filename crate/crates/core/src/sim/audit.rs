use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{SimReport, TimelineKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub event: u64,
    pub count: u32,
    pub expected: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pass: bool,
    pub final_watermark: Option<u64>,
    pub violations: Vec<Violation>,
}

/// Every event at or below the final committed watermark must have been
/// trained into a committed state exactly once, and every event above it
/// never.
pub fn audit_exactly_once(report: &SimReport) -> AuditReport {
    let wm = report.final_watermark();
    let violations: Vec<Violation> = report
        .trained_counts()
        .into_iter()
        .enumerate()
        .filter_map(|(i, count)| {
            let expected = u32::from(wm.is_some_and(|w| i as u64 <= w));
            (count != expected).then_some(Violation {
                event: i as u64,
                count,
                expected,
            })
        })
        .collect();
    AuditReport {
        pass: violations.is_empty(),
        final_watermark: wm,
        violations,
    }
}

/// Checkpoint-protocol checks against the timeline: committed epochs carry
/// a checkpoint and aborted ones a reason, watermarks strictly increase, and
/// no attempt that saw a fault committed.
pub fn protocol_violations(report: &SimReport) -> Vec<String> {
    let mut out = Vec::new();
    for e in &report.epochs {
        if e.committed != e.checkpoint.is_some() || e.committed == e.reason.is_some() {
            out.push(format!(
                "attempt {}: committed={} checkpoint={:?} reason={:?}",
                e.attempt, e.committed, e.checkpoint, e.reason
            ));
        }
    }
    for w in report.checkpoints.windows(2) {
        if w[0].watermark >= w[1].watermark {
            out.push(format!(
                "checkpoint {} watermark {} does not exceed {}",
                w[1].id, w[1].watermark, w[0].watermark
            ));
        }
    }
    let mut open: Option<u32> = None;
    let mut faulted = BTreeSet::new();
    for entry in &report.timeline {
        match &entry.kind {
            TimelineKind::EpochStarted { attempt, .. } => open = Some(*attempt),
            TimelineKind::EpochCommitted { .. } | TimelineKind::EpochAborted { .. } => open = None,
            TimelineKind::Fault { kind, .. } if kind != "preemption" => {
                if let Some(a) = open {
                    faulted.insert(a);
                }
            }
            _ => {}
        }
    }
    for e in report
        .epochs
        .iter()
        .filter(|e| faulted.contains(&e.attempt) && e.committed)
    {
        out.push(format!("attempt {} committed despite a failure", e.attempt));
    }
    out
}
