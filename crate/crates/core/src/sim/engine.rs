use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::*;
use crate::rng::{derive_seed, rng_from_seed, SimRng};

/// One step of the reader autoscaler: below the low band keep one more
/// work unit in flight, above the high band one fewer, never below 1 or
/// above `max`.
pub fn autoscale_readers(fullness: f64, in_flight: u32, low: f64, high: f64, max: u32) -> u32 {
    let next = if fullness < low {
        in_flight.saturating_add(1)
    } else if fullness > high {
        in_flight.saturating_sub(1)
    } else {
        in_flight
    };
    next.clamp(1, max.max(1))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Fault(usize),
    Start,
    EpochEnd(u32),
    ReadDone(u32, u64, u64),
    TrainDone(u32, u64, u64),
    CheckpointDone(u32),
    TryIssue(u32),
    Autoscale,
    HoldRelease(usize),
    RestartReady,
    PreemptDeadline(u32, usize),
    JobRejoin(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Running,
    Draining,
    Checkpointing,
    Held,
    Finished,
}

struct Sim<'a> {
    sc: &'a SimScenario,
    rng: SimRng,
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    seq: u64,
    now: u64,
    phase: Phase,
    attempts: u32,
    active: Option<u32>,
    attempt_start: u64,
    attempt_started_us: u64,
    cursor: u64,
    watermark: Option<u64>,
    reading: u32,
    blocked: VecDeque<(u64, u64)>,
    buffer: VecDeque<(u64, u64)>,
    buffered: u64,
    /// Integral of `buffered` over time since the last autoscale tick.
    fill_area: u128,
    fill_since: u64,
    training: bool,
    uncommitted: Vec<(u64, u64)>,
    try_pending: bool,
    in_flight: u32,
    pending_preempts: Vec<usize>,
    restart_until: Option<u64>,
    hold: Option<(usize, u64)>,
    jobs_down: BTreeMap<String, u64>,
    counts: Vec<u32>,
    digest: [u8; 32],
    report: SimReport,
}

impl<'a> Sim<'a> {
    fn schedule(&mut self, at: u64, ev: Ev) {
        self.heap.push(Reverse((at, self.seq, ev)));
        self.seq += 1;
    }

    fn log(&mut self, kind: TimelineKind) {
        self.report.timeline.push(TimelineEntry { t_us: self.now, kind });
    }

    /// Adds the buffer occupancy since the last change to the window
    /// integral. Called before every change of `buffered`.
    fn account(&mut self) {
        self.fill_area += self.buffered as u128 * (self.now - self.fill_since) as u128;
        self.fill_since = self.now;
    }

    /// Mean fullness over the window ending now, which is then restarted.
    fn window_fullness(&mut self, window: u64) -> f64 {
        self.account();
        let mean = self.fill_area as f64 / (window.max(1) as f64 * self.sc.host_buffer_capacity as f64);
        self.fill_area = 0;
        mean
    }

    fn live(&self, attempt: u32) -> bool {
        self.active == Some(attempt)
    }

    fn sample_readers(&mut self) {
        let (fullness, in_flight) = match self.phase {
            Phase::Running | Phase::Draining | Phase::Checkpointing => (
                self.buffered as f64 / self.sc.host_buffer_capacity as f64,
                self.in_flight,
            ),
            _ => (0.0, 0),
        };
        self.report.reader_series.push(ReaderSample {
            t_us: self.now,
            fullness,
            in_flight,
        });
    }

    fn blocked_on_something(&self) -> bool {
        self.restart_until.is_some() || self.hold.is_some() || !self.jobs_down.is_empty()
    }

    fn maybe_start(&mut self) {
        if self.phase != Phase::Idle || self.blocked_on_something() {
            return;
        }
        if self.cursor >= self.sc.total_events {
            self.phase = Phase::Finished;
            return;
        }
        let attempt = self.attempts;
        self.attempts += 1;
        self.active = Some(attempt);
        self.phase = Phase::Running;
        self.attempt_start = self.cursor;
        self.attempt_started_us = self.now;
        let epoch = self.report.checkpoints.len() as u32;
        self.log(TimelineKind::EpochStarted {
            attempt,
            epoch,
            first_event: self.cursor,
        });
        self.schedule(self.now + self.sc.epoch_wall_time_us, Ev::EpochEnd(attempt));
        self.sample_readers();
        self.issue();
    }

    fn issue(&mut self) {
        if self.phase != Phase::Running {
            return;
        }
        let attempt = self.active.expect("running");
        while self.reading + (self.blocked.len() as u32) < self.in_flight && self.cursor < self.sc.total_events {
            let end = (self.cursor + self.sc.work_unit_size).min(self.sc.total_events);
            if self.sc.arrival == Arrival::Realtime {
                let available = end * self.sc.data_time_per_event_us;
                if available > self.now {
                    if !self.try_pending {
                        self.try_pending = true;
                        self.schedule(available, Ev::TryIssue(attempt));
                    }
                    break;
                }
            }
            let rt = self
                .rng
                .random_range(self.sc.read_service.min_us..=self.sc.read_service.max_us);
            self.reading += 1;
            self.log(TimelineKind::UnitIssued {
                attempt,
                start: self.cursor,
                end,
            });
            self.schedule(self.now + rt, Ev::ReadDone(attempt, self.cursor, end));
            self.cursor = end;
        }
    }

    fn try_train(&mut self) {
        if self.training {
            return;
        }
        let Some((s, e)) = self.buffer.pop_front() else { return };
        self.account();
        self.buffered -= e - s;
        self.training = true;
        let attempt = self.active.expect("training needs an attempt");
        self.schedule(
            self.now + (e - s) * self.sc.train_us_per_event,
            Ev::TrainDone(attempt, s, e),
        );
        while let Some(&(bs, be)) = self.blocked.front() {
            if self.buffered + (be - bs) > self.sc.host_buffer_capacity {
                break;
            }
            self.blocked.pop_front();
            self.buffer.push_back((bs, be));
            self.buffered += be - bs;
        }
        self.issue();
    }

    fn check_quiesced(&mut self) {
        let draining =
            self.phase == Phase::Draining || (self.phase == Phase::Running && self.cursor >= self.sc.total_events);
        if !draining || self.reading > 0 || !self.blocked.is_empty() || !self.buffer.is_empty() || self.training {
            return;
        }
        if self.cursor == self.attempt_start {
            // a preemption drained an attempt that never received work
            self.abort(AbortReason::PreemptionTimeout);
            return;
        }
        self.phase = Phase::Checkpointing;
        let attempt = self.active.expect("draining");
        self.schedule(self.now + self.sc.checkpoint_us, Ev::CheckpointDone(attempt));
    }

    fn take_job_down(&mut self, job: String) {
        let back = self.now + self.sc.preempt_restart_us;
        let until = self.jobs_down.entry(job.clone()).or_insert(0);
        if *until < back {
            *until = back;
            self.schedule(back, Ev::JobRejoin(job.clone()));
        }
        self.log(TimelineKind::JobDown { job });
    }

    fn settle_preempts(&mut self, outcome: PreemptOutcome) {
        for idx in std::mem::take(&mut self.pending_preempts) {
            self.report.preemptions[idx].outcome = Some(outcome);
            let job = self.report.preemptions[idx].job.clone();
            self.take_job_down(job);
        }
    }

    fn reset_attempt(&mut self) {
        self.account();
        self.active = None;
        self.reading = 0;
        self.blocked.clear();
        self.buffer.clear();
        self.buffered = 0;
        self.training = false;
        self.uncommitted.clear();
        self.try_pending = false;
    }

    fn abort(&mut self, reason: AbortReason) {
        let Some(attempt) = self.active else { return };
        self.report.epochs.push(EpochRecord {
            epoch: self.report.checkpoints.len() as u32,
            attempt,
            events: (self.attempt_start, self.cursor),
            started_us: self.attempt_started_us,
            ended_us: self.now,
            committed: false,
            checkpoint: None,
            reason: Some(reason),
            early: false,
        });
        self.log(TimelineKind::EpochAborted { attempt, reason });
        self.reset_attempt();
        self.cursor = self.watermark.map_or(0, |w| w + 1);
        self.phase = Phase::Idle;
        self.settle_preempts(PreemptOutcome::RestartFromCheckpoint);
        self.sample_readers();
    }

    fn commit(&mut self) {
        let attempt = self.active.expect("checkpointing");
        let mut covered = 0;
        for &(s, e) in &self.uncommitted {
            covered += e - s;
            for c in &mut self.counts[s as usize..e as usize] {
                *c += 1;
            }
        }
        debug_assert_eq!(covered, self.cursor - self.attempt_start);
        let watermark = self.cursor - 1;
        let epoch = self.report.checkpoints.len() as u32;
        let mut h = Sha256::new();
        h.update(self.digest);
        h.update(epoch.to_le_bytes());
        h.update(watermark.to_le_bytes());
        self.digest = h.finalize().into();
        self.report.checkpoints.push(CheckpointRecord {
            id: epoch,
            epoch,
            watermark,
            digest: hex::encode(self.digest),
            written_us: self.now,
        });
        self.report.epochs.push(EpochRecord {
            epoch,
            attempt,
            events: (self.attempt_start, self.cursor),
            started_us: self.attempt_started_us,
            ended_us: self.now,
            committed: true,
            checkpoint: Some(epoch),
            reason: None,
            early: !self.pending_preempts.is_empty(),
        });
        self.log(TimelineKind::EpochCommitted {
            attempt,
            checkpoint: epoch,
            watermark,
        });
        self.watermark = Some(watermark);
        if self.now > 0 {
            let data_us = (watermark + 1) * self.sc.data_time_per_event_us;
            self.report.advancing_series.push(AdvancingSample {
                t_us: self.now,
                data_us,
                rate: data_us as f64 / self.now as f64,
            });
        }
        self.reset_attempt();
        self.phase = Phase::Idle;
        self.settle_preempts(PreemptOutcome::CommittedEarly);
        if self.cursor >= self.sc.total_events {
            self.phase = Phase::Finished;
        } else {
            self.maybe_start();
        }
    }

    fn place_hold(&mut self, kind: HoldKind) -> usize {
        let idx = self.report.holds.len();
        self.report.holds.push(TrainingHold {
            kind,
            placed_us: self.now,
            released_us: None,
            resources_released: true,
        });
        self.log(TimelineKind::HoldPlaced { hold: idx, kind });
        self.log(TimelineKind::ResourcesReleased);
        idx
    }

    fn fault(&mut self, index: usize) {
        let kind = self.sc.faults[index].kind.clone();
        self.log(TimelineKind::Fault {
            index,
            kind: kind.label().into(),
        });
        match kind {
            FaultKind::Transient { .. } => {
                self.abort(AbortReason::ComponentFailure);
                let until = self.now + self.sc.restart_delay_us;
                if self.restart_until.is_none_or(|u| u < until) {
                    self.restart_until = Some(until);
                    self.schedule(until, Ev::RestartReady);
                }
            }
            FaultKind::Permanent => {
                self.abort(AbortReason::Hold);
                if let Some((idx, _)) = self.hold.take() {
                    self.report.holds[idx].released_us = Some(self.now);
                    self.log(TimelineKind::HoldReleased { hold: idx });
                }
                self.place_hold(HoldKind::PermanentError);
                self.phase = Phase::Held;
                self.sample_readers();
            }
            FaultKind::SigStall { duration_us } => {
                self.abort(AbortReason::Hold);
                let until = self.now + duration_us;
                match self.hold {
                    Some((idx, cur)) if cur >= until => self.hold = Some((idx, cur)),
                    Some((idx, _)) => {
                        self.hold = Some((idx, until));
                        self.schedule(until, Ev::HoldRelease(idx));
                    }
                    None => {
                        let idx = self.place_hold(HoldKind::TransientStall);
                        self.hold = Some((idx, until));
                        self.schedule(until, Ev::HoldRelease(idx));
                        self.sample_readers();
                    }
                }
            }
            FaultKind::Preemption { warning_us, job } => {
                let idx = self.report.preemptions.len();
                let deadline = self.now + warning_us;
                self.report.preemptions.push(PreemptionRecord {
                    job: job.clone(),
                    notice_us: self.now,
                    deadline_us: deadline,
                    acknowledged: true,
                    attempt: self.active,
                    outcome: None,
                });
                self.log(TimelineKind::PreemptionNotice {
                    index: idx,
                    job: job.clone(),
                    deadline_us: deadline,
                });
                match (self.phase, self.active) {
                    (Phase::Running | Phase::Draining | Phase::Checkpointing, Some(attempt)) => {
                        self.pending_preempts.push(idx);
                        self.schedule(deadline, Ev::PreemptDeadline(attempt, idx));
                        if self.phase == Phase::Running {
                            self.phase = Phase::Draining;
                            self.log(TimelineKind::QuiesceBegun { attempt });
                            self.check_quiesced();
                        }
                    }
                    _ => {
                        self.report.preemptions[idx].outcome = Some(PreemptOutcome::NoEpoch);
                        self.take_job_down(job);
                    }
                }
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Fault(i) => self.fault(i),
            Ev::Start => self.maybe_start(),
            Ev::EpochEnd(a) => {
                if !self.live(a) || self.phase != Phase::Running {
                    return;
                }
                if self.cursor == self.attempt_start {
                    // nothing arrived yet; keep the epoch open
                    self.schedule(self.now + self.sc.epoch_wall_time_us, Ev::EpochEnd(a));
                    return;
                }
                self.phase = Phase::Draining;
                self.log(TimelineKind::QuiesceBegun { attempt: a });
                self.check_quiesced();
            }
            Ev::ReadDone(a, s, e) => {
                if !self.live(a) {
                    return;
                }
                self.reading -= 1;
                self.account();
                if self.blocked.is_empty() && self.buffered + (e - s) <= self.sc.host_buffer_capacity {
                    self.buffer.push_back((s, e));
                    self.buffered += e - s;
                } else {
                    self.blocked.push_back((s, e));
                }
                self.try_train();
                self.issue();
                self.check_quiesced();
            }
            Ev::TrainDone(a, s, e) => {
                if !self.live(a) {
                    return;
                }
                self.training = false;
                self.uncommitted.push((s, e));
                self.log(TimelineKind::UnitTrained {
                    attempt: a,
                    start: s,
                    end: e,
                });
                self.try_train();
                self.check_quiesced();
            }
            Ev::CheckpointDone(a) => {
                if self.live(a) && self.phase == Phase::Checkpointing {
                    self.commit();
                }
            }
            Ev::TryIssue(a) => {
                if self.live(a) {
                    self.try_pending = false;
                    self.issue();
                }
            }
            Ev::Autoscale => {
                let fullness = self.window_fullness(self.sc.scaling.interval_us);
                if matches!(self.phase, Phase::Running | Phase::Draining) {
                    let s = self.sc.scaling;
                    let next = autoscale_readers(fullness, self.in_flight, s.low, s.high, s.max_in_flight);
                    if next != self.in_flight {
                        self.in_flight = next;
                        self.log(TimelineKind::ReadersScaled { in_flight: next });
                    }
                    self.report.reader_series.push(ReaderSample {
                        t_us: self.now,
                        fullness,
                        in_flight: self.in_flight,
                    });
                    self.issue();
                }
                self.schedule(self.now + self.sc.scaling.interval_us, Ev::Autoscale);
            }
            Ev::HoldRelease(idx) => {
                if self.hold == Some((idx, self.now)) {
                    self.hold = None;
                    self.report.holds[idx].released_us = Some(self.now);
                    self.log(TimelineKind::HoldReleased { hold: idx });
                    self.log(TimelineKind::ResourcesReacquired);
                    self.maybe_start();
                }
            }
            Ev::RestartReady => {
                if self.restart_until == Some(self.now) {
                    self.restart_until = None;
                    self.maybe_start();
                }
            }
            Ev::PreemptDeadline(a, idx) => {
                if self.live(a) && self.report.preemptions[idx].outcome.is_none() {
                    self.abort(AbortReason::PreemptionTimeout);
                }
            }
            Ev::JobRejoin(job) => {
                if self.jobs_down.get(&job) == Some(&self.now) {
                    self.jobs_down.remove(&job);
                    self.log(TimelineKind::JobRejoined { job });
                    self.maybe_start();
                }
            }
        }
    }
}

fn run_length(counts: &[u32]) -> Vec<TrainedRun> {
    let mut runs: Vec<TrainedRun> = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.count == c => r.end = i as u64 + 1,
            _ => runs.push(TrainedRun {
                start: i as u64,
                end: i as u64 + 1,
                count: c,
            }),
        }
    }
    runs
}

/// Runs the event loop until the stream is fully checkpointed, a permanent
/// hold is placed or the horizon passes.
pub fn run(scenario: &SimScenario, seed: u64) -> Result<SimReport> {
    scenario.validate()?;
    let mut sim = Sim {
        sc: scenario,
        rng: rng_from_seed(derive_seed(seed, 0x5ea)),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0,
        phase: Phase::Idle,
        attempts: 0,
        active: None,
        attempt_start: 0,
        attempt_started_us: 0,
        cursor: 0,
        watermark: None,
        reading: 0,
        blocked: VecDeque::new(),
        buffer: VecDeque::new(),
        buffered: 0,
        fill_area: 0,
        fill_since: 0,
        training: false,
        uncommitted: Vec::new(),
        try_pending: false,
        in_flight: scenario.scaling.initial_in_flight,
        pending_preempts: Vec::new(),
        restart_until: None,
        hold: None,
        jobs_down: BTreeMap::new(),
        counts: vec![0; scenario.total_events as usize],
        digest: [0; 32],
        report: SimReport {
            seed,
            total_events: scenario.total_events,
            data_time_per_event_us: scenario.data_time_per_event_us,
            end_us: 0,
            final_state: FinalState::Completed,
            epochs: Vec::new(),
            checkpoints: Vec::new(),
            trained: Vec::new(),
            holds: Vec::new(),
            preemptions: Vec::new(),
            reader_series: Vec::new(),
            advancing_series: Vec::new(),
            timeline: Vec::new(),
        },
    };
    for (i, f) in scenario.faults.iter().enumerate() {
        sim.schedule(f.at_us, Ev::Fault(i));
    }
    sim.schedule(0, Ev::Start);
    sim.schedule(scenario.scaling.interval_us, Ev::Autoscale);
    while let Some(Reverse((at, _, ev))) = sim.heap.pop() {
        if scenario.horizon_us.is_some_and(|h| at > h) {
            sim.report.final_state = FinalState::Horizon;
            sim.now = scenario.horizon_us.unwrap_or(at);
            break;
        }
        sim.now = at;
        sim.handle(ev);
        match sim.phase {
            Phase::Finished => break,
            Phase::Held => {
                sim.report.final_state = FinalState::HeldPermanent;
                break;
            }
            _ => {}
        }
    }
    sim.report.end_us = sim.now;
    sim.report.trained = run_length(&sim.counts);
    Ok(sim.report)
}
