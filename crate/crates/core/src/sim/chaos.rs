use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::{run, Arrival, FaultKind, FaultSpec, ReaderScaling, ServiceTime, SimScenario};
use crate::error::Result;
use crate::rng::{derive_seed, rng_from_seed};

const JOBS: [&str; 3] = ["trainer", "reader", "controller"];

/// Random small scenario with transient faults, preemptions carrying
/// warnings from zero to twice the worst-case drain, SIG stalls and, for
/// one seed in ten, a permanent fault.
pub fn chaos_scenario(seed: u64) -> SimScenario {
    let mut rng = rng_from_seed(derive_seed(seed, 0xc4a05));
    let unit = rng.random_range(5..=40);
    let min_read = rng.random_range(50..400);
    let mut sc = SimScenario {
        total_events: rng.random_range(300..3_000),
        arrival: if rng.random_bool(0.2) {
            Arrival::Realtime
        } else {
            Arrival::AtStart
        },
        data_time_per_event_us: rng.random_range(1..20),
        work_unit_size: unit,
        host_buffer_capacity: unit * rng.random_range(1..8),
        read_service: ServiceTime {
            min_us: min_read,
            max_us: min_read + rng.random_range(0..600),
        },
        train_us_per_event: rng.random_range(1..6),
        checkpoint_us: rng.random_range(0..400),
        epoch_wall_time_us: rng.random_range(500..5_000),
        restart_delay_us: rng.random_range(0..1_000),
        preempt_restart_us: rng.random_range(0..2_000),
        scaling: ReaderScaling {
            low: 0.25,
            high: 0.75,
            interval_us: rng.random_range(100..1_000),
            initial_in_flight: 1,
            max_in_flight: rng.random_range(1..10),
        },
        chips: 4,
        faults: Vec::new(),
        horizon_us: None,
    };
    let span = sc.total_events * sc.train_us_per_event.max(sc.data_time_per_event_us) + 5_000;
    let drain = sc.worst_case_drain_us();
    let mut at = || rng.random_range(0..span);
    let mut faults: Vec<FaultSpec> = Vec::new();
    for _ in 0..at() % 6 {
        faults.push(FaultSpec {
            at_us: at(),
            kind: FaultKind::Transient {
                component: "reader".into(),
            },
        });
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0xfa17));
    for _ in 0..rng.random_range(0..5) {
        faults.push(FaultSpec {
            at_us: rng.random_range(0..span),
            kind: FaultKind::Preemption {
                warning_us: rng.random_range(0..=2 * drain),
                job: JOBS[rng.random_range(0..JOBS.len())].into(),
            },
        });
    }
    for _ in 0..rng.random_range(0..3) {
        faults.push(FaultSpec {
            at_us: rng.random_range(0..span),
            kind: FaultKind::SigStall {
                duration_us: rng.random_range(1..3_000),
            },
        });
    }
    if rng.random_bool(0.1) {
        faults.push(FaultSpec {
            at_us: rng.random_range(0..span),
            kind: FaultKind::Permanent,
        });
    }
    faults.sort_by_key(|f| f.at_us);
    sc.faults = faults;
    sc
}

/// Mean of the exponential warning distribution in
/// [`calibration_scenario`], chosen so that about 61% of preempted epochs
/// commit early.
pub const CALIBRATION_MEAN_WARNING_US: f64 = 2_600.0;

/// Seed of the documented calibration run.
pub const CALIBRATION_SEED: u64 = 2024;

/// A long backfill run with 400 preemption notices spaced 30 ms apart, whose
/// warnings are exponential with the given mean.
pub fn calibration_scenario(mean_warning_us: f64, seed: u64) -> SimScenario {
    let mut rng = rng_from_seed(derive_seed(seed, 0xca1));
    let exp = Exp::new(1.0 / mean_warning_us.max(1e-9)).expect("positive rate");
    let spacing = 30_000;
    let faults = (0..400u64)
        .map(|i| FaultSpec {
            at_us: 10_000 + i * spacing + rng.random_range(0..spacing / 2),
            kind: FaultKind::Preemption {
                warning_us: exp.sample(&mut rng).round() as u64,
                job: JOBS[(i % 3) as usize].into(),
            },
        })
        .collect();
    SimScenario {
        total_events: 1_300_000,
        work_unit_size: 10,
        host_buffer_capacity: 100,
        read_service: ServiceTime {
            min_us: 200,
            max_us: 600,
        },
        train_us_per_event: 10,
        checkpoint_us: 300,
        epoch_wall_time_us: 20_000,
        restart_delay_us: 500,
        preempt_restart_us: 2_000,
        scaling: ReaderScaling {
            low: 0.3,
            high: 0.8,
            interval_us: 500,
            initial_in_flight: 2,
            max_in_flight: 8,
        },
        faults,
        ..SimScenario::default()
    }
}

/// Commit fraction over preempted epochs in the calibration scenario.
pub fn preemption_commit_fraction(mean_warning_us: f64, seed: u64) -> Result<f64> {
    let report = run(&calibration_scenario(mean_warning_us, seed), seed)?;
    Ok(report.preemption_commit_fraction().unwrap_or(0.0))
}
