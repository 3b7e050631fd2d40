//! Turns the two fitted cluster models into the static three-option sync
//! schedule that the controller broadcasts at the start of an iteration.
//!
//! Each option fixes a rendezvous time: the percentile-based availability
//! threshold of each cluster, with the option time as their max. Option 1
//! assumes both clusters arrive on their usual early distribution; option
//! 2 covers the slow cluster running late while the fast one either waits
//! or squeezes in a local task; option 3 is the last resort with the fast
//! cluster's late local task folded in. All times are relative to the
//! start of the iteration's work; the simulator anchors them on its own
//! clock.

use crate::clustering::ClusterModel;
use crate::game::{self, Decision, PayoffParameters};
use crate::stats::{sum_gaussians, Component, Gaussian, StatsError};
use thiserror::Error;

/// Lowest percentile a schedule will plan for: below the median, workers
/// in a cluster could no longer be expected to behave alike.
pub const PERCENTILE_MIN: f64 = 0.5;
/// Highest percentile: 1.0 is unattainable for a Gaussian.
pub const PERCENTILE_MAX: f64 = 0.999;
/// Grid spacing for the percentile search at options 2 and 3.
pub const PERCENTILE_STEP: f64 = 0.005;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error(
        "quorum needs {required:.1} workers but the two clusters only hold {available}; \
         clustering left too many outliers"
    )]
    InfeasibleQuorum { required: f64, available: usize },
    #[error("no percentile pair satisfies the constraints for option {option}")]
    NoFeasibleGridPoint { option: usize },
    #[error("option times went backwards: {times:?}")]
    NonMonotonicSchedule { times: [f64; 3] },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// How option-2/3 thresholds compose a finished task with a local task.
///
/// `Literal` adds the base threshold to the percentile of the summed
/// distribution, even though the sum already contains the first task's
/// duration — kept as the default reading of the source equations.
/// `Corrected` drops that leading base threshold. The difference is
/// surfaced, not silently resolved; reports carry the mode used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FormulaMode {
    #[default]
    Literal,
    Corrected,
}

/// One sync option: when to meet and what each cluster is assumed to be
/// doing up to that moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionEntry {
    /// Rendezvous time, always the max of the two thresholds.
    pub sync_time: f64,
    /// Expected-availability cutoff per cluster (fast, slow).
    pub thresholds: [f64; 2],
    /// Percentile backing each threshold (shared at option 1).
    pub percentiles: [f64; 2],
    /// Whether the threshold assumes that cluster ran a local task first.
    pub local_task_planned: [bool; 2],
    /// A percentile or quorum hit the clamp bounds; the schedule is valid
    /// but covers less of the distribution than the quorum ratio asked.
    pub percentile_clamped: bool,
    /// A missing local-task model forced the wait branch.
    pub fallback_wait: bool,
}

/// The intermediate quantities behind options 2 and 3, kept for reports
/// and for the simulator's game-scenario construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionDerivation {
    /// Fast cluster's expected wait for the late slow cluster (option 2),
    /// measured from the fast cluster's own availability.
    pub expected_wait_w2: f64,
    /// Slow cluster's expected wait at option 3.
    pub expected_wait_w1: f64,
    /// Expected duration of the fast cluster's first local task.
    pub expected_local_1: f64,
    /// Expected duration of the slow cluster's local task.
    pub expected_local_2: f64,
    pub decision_1: Decision,
    pub decision_2: Decision,
}

impl Default for OptionDerivation {
    fn default() -> Self {
        OptionDerivation {
            expected_wait_w2: 0.0,
            expected_wait_w1: 0.0,
            expected_local_1: 0.0,
            expected_local_2: 0.0,
            decision_1: Decision::WaitForSync,
            decision_2: Decision::WaitForSync,
        }
    }
}

/// The complete broadcastable schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncSchedule {
    pub options: [OptionEntry; 3],
    pub alpha: f64,
    pub n_total: u32,
    pub derivation: OptionDerivation,
    pub mode: FormulaMode,
}

/// The percentile candidates: PERCENTILE_MIN upward in PERCENTILE_STEP
/// increments, topped off with PERCENTILE_MAX.
fn percentile_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..)
        .map(|i| PERCENTILE_MIN + PERCENTILE_STEP * i as f64)
        .take_while(|&p| p < PERCENTILE_MAX - 1e-12)
        .collect();
    grid.push(PERCENTILE_MAX);
    grid
}

/// The participation the quorum really demands: α·N, saturated at what
/// the two clusters can deliver at the top percentile so that extreme
/// quorum ratios still produce a schedule instead of failing.
fn required_participation(alpha: f64, n_total: u32, members: usize) -> f64 {
    (alpha * n_total as f64).min(PERCENTILE_MAX * members as f64)
}

const QUORUM_EPS: f64 = 1e-9;

/// Fixes option 1: both clusters planned at the shared percentile that
/// exactly meets the quorum, reading each cluster's early distribution.
pub fn fix_first_option(
    fast: &ClusterModel,
    slow: &ClusterModel,
    alpha: f64,
    n_total: u32,
) -> Result<OptionEntry, SchedulerError> {
    let members = fast.size + slow.size;
    let required = alpha * n_total as f64;
    if (members as f64) < required - QUORUM_EPS {
        return Err(SchedulerError::InfeasibleQuorum {
            required,
            available: members,
        });
    }
    let raw = required / members as f64;
    let p = raw.clamp(PERCENTILE_MIN, PERCENTILE_MAX);
    let x1 = fast.model.quantile(Component::Early, p)?;
    let x2 = slow.model.quantile(Component::Early, p)?;
    Ok(OptionEntry {
        sync_time: x1.max(x2),
        thresholds: [x1, x2],
        percentiles: [p, p],
        local_task_planned: [false, false],
        percentile_clamped: p != raw,
        fallback_wait: false,
    })
}

/// One grid candidate considered by the option-2/3 searches.
struct Candidate {
    sync_time: f64,
    participation: f64,
    thresholds: [f64; 2],
    percentiles: [f64; 2],
    wait: f64,
    decision: Decision,
}

fn better(candidate: &Candidate, best: &Option<Candidate>) -> bool {
    match best {
        None => true,
        Some(b) => {
            candidate.sync_time < b.sync_time
                || (candidate.sync_time == b.sync_time
                    && candidate.participation > b.participation)
        }
    }
}

/// Fixes option 2: the slow cluster is read from its late distribution;
/// the fast cluster either holds its option-1 threshold (wait branch) or
/// extends it by its early local task (run branch), decided by whether
/// the local gain beats the expected wait. Percentiles are grid-searched
/// to minimize the option time subject to the quorum and to never
/// scheduling before option 1.
pub fn fix_second_option(
    fast: &ClusterModel,
    slow: &ClusterModel,
    alpha: f64,
    n_total: u32,
    option1: &OptionEntry,
    params: &PayoffParameters,
    mode: FormulaMode,
) -> Result<(OptionEntry, OptionDerivation), SchedulerError> {
    let x1 = option1.thresholds[0];
    let c1 = fast.size as f64;
    let c2 = slow.size as f64;
    let required = required_participation(alpha, n_total, fast.size + slow.size);

    let local_1 = fast.model.local_early;
    let early_1 = fast.model.component(Component::Early)?;
    let run_base = match local_1 {
        Some(lo) => Some(sum_gaussians(early_1, lo)),
        None => None,
    };

    let grid = percentile_grid();
    // Per-p2 state: the slow threshold, the wait it implies for the fast
    // cluster, and the resulting branch decision.
    struct SlowSide {
        p2: f64,
        x2: f64,
        wait: f64,
        decision: Decision,
    }
    let slow_side = grid
        .iter()
        .map(|&p2| -> Result<SlowSide, SchedulerError> {
            let x2 = slow.model.quantile(Component::Late, p2)?;
            let wait = (x2 - x1).max(0.0);
            let decision = match local_1 {
                Some(lo) if game::prefers_local_task(params, wait, Some(lo.mean())) => {
                    Decision::RunLocalTask
                }
                _ => Decision::WaitForSync,
            };
            Ok(SlowSide {
                p2,
                x2,
                wait,
                decision,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let run_q: Vec<Option<f64>> = match run_base {
        Some(sum) => grid
            .iter()
            .map(|&p1| sum.quantile(p1).map(Some))
            .collect::<Result<_, _>>()?,
        None => vec![None; grid.len()],
    };

    let mut best: Option<Candidate> = None;
    for (i, &p1) in grid.iter().enumerate() {
        for s in &slow_side {
            let participation = p1 * c1 + s.p2 * c2;
            if participation < required - QUORUM_EPS {
                continue;
            }
            let x1_prime = match s.decision {
                Decision::WaitForSync => x1,
                Decision::RunLocalTask => {
                    let q = run_q[i].expect("run branch implies a local model");
                    match mode {
                        FormulaMode::Literal => x1 + q,
                        FormulaMode::Corrected => q,
                    }
                }
            };
            let sync_time = x1_prime.max(s.x2);
            if sync_time < option1.sync_time {
                continue; // option 2 may not precede option 1
            }
            let candidate = Candidate {
                sync_time,
                participation,
                thresholds: [x1_prime, s.x2],
                percentiles: [p1, s.p2],
                wait: s.wait,
                decision: s.decision,
            };
            if better(&candidate, &best) {
                best = Some(candidate);
            }
        }
    }
    let chosen = best.ok_or(SchedulerError::NoFeasibleGridPoint { option: 2 })?;

    let entry = OptionEntry {
        sync_time: chosen.sync_time,
        thresholds: chosen.thresholds,
        percentiles: chosen.percentiles,
        local_task_planned: [chosen.decision == Decision::RunLocalTask, false],
        percentile_clamped: required < alpha * n_total as f64 - QUORUM_EPS,
        fallback_wait: local_1.is_none(),
    };
    let derivation = OptionDerivation {
        expected_wait_w2: chosen.wait,
        expected_local_1: local_1.map(|g| g.mean()).unwrap_or(0.0),
        decision_1: chosen.decision,
        ..OptionDerivation::default()
    };
    Ok((entry, derivation))
}

/// Fixes option 3: the fast cluster's threshold folds in its late local
/// task unconditionally (it has been busy since option 2); the slow
/// cluster either keeps its option-2 threshold (wait branch — the value
/// is reused exactly, including its percentile) or extends it with its
/// own local task. Grid search as in option 2, with option 2 as the
/// ordering floor.
pub fn fix_third_option(
    fast: &ClusterModel,
    slow: &ClusterModel,
    alpha: f64,
    n_total: u32,
    option1: &OptionEntry,
    option2: &OptionEntry,
    params: &PayoffParameters,
    mode: FormulaMode,
) -> Result<(OptionEntry, OptionDerivation), SchedulerError> {
    let x1 = option1.thresholds[0];
    let x2_prime = option2.thresholds[1];
    let p2_prev = option2.percentiles[1];
    let c1 = fast.size as f64;
    let c2 = slow.size as f64;
    let required = required_participation(alpha, n_total, fast.size + slow.size);

    let early_1 = fast.model.component(Component::Early)?;
    // The late local model is what the equation asks for; fall back to
    // the early one, then to "no local time at all", rather than refusing
    // to schedule a last-resort option.
    let (local_1_late, fallback_1) = match (fast.model.local_late, fast.model.local_early) {
        (Some(g), _) => (g, false),
        (None, Some(g)) => (g, true),
        (None, None) => (Gaussian::new(0.0, 0.0)?, true),
    };
    let sum_fast = sum_gaussians(early_1, local_1_late);

    let late_2 = slow.model.component(Component::Late)?;
    let local_2 = slow.model.local_early;
    let run_sum = local_2.map(|lo| sum_gaussians(late_2, lo));

    let grid = percentile_grid();
    let run_q: Vec<Option<f64>> = match run_sum {
        Some(sum) => grid
            .iter()
            .map(|&p2| sum.quantile(p2).map(Some))
            .collect::<Result<_, _>>()?,
        None => vec![None; grid.len()],
    };

    let mut best: Option<Candidate> = None;
    let mut chosen_fallback_2 = false;
    for &p1 in &grid {
        let q1 = sum_fast.quantile(p1)?;
        let x1_pp = match mode {
            FormulaMode::Literal => x1 + q1,
            FormulaMode::Corrected => q1,
        };
        let wait = (x1_pp - x2_prime).max(0.0);
        let (decision, fallback_2) = match local_2 {
            Some(lo) => (
                if game::prefers_local_task(params, wait, Some(lo.mean())) {
                    Decision::RunLocalTask
                } else {
                    Decision::WaitForSync
                },
                false,
            ),
            None => (Decision::WaitForSync, true),
        };

        let mut consider = |p2: f64, x2_pp: f64, best: &mut Option<Candidate>| {
            let participation = p1 * c1 + p2 * c2;
            if participation < required - QUORUM_EPS {
                return false;
            }
            let sync_time = x1_pp.max(x2_pp);
            if sync_time < option2.sync_time {
                return false; // option 3 may not precede option 2
            }
            let candidate = Candidate {
                sync_time,
                participation,
                thresholds: [x1_pp, x2_pp],
                percentiles: [p1, p2],
                wait,
                decision,
            };
            if better(&candidate, best) {
                *best = Some(candidate);
                return true;
            }
            false
        };

        match decision {
            Decision::WaitForSync => {
                // The slow side is pinned to its option-2 plan, value and
                // percentile alike.
                if consider(p2_prev, x2_prime, &mut best) {
                    chosen_fallback_2 = fallback_2;
                }
            }
            Decision::RunLocalTask => {
                for (j, &p2) in grid.iter().enumerate() {
                    let q2 = run_q[j].expect("run branch implies a local model");
                    let x2_pp = match mode {
                        FormulaMode::Literal => x2_prime + q2,
                        FormulaMode::Corrected => q2,
                    };
                    if consider(p2, x2_pp, &mut best) {
                        chosen_fallback_2 = fallback_2;
                    }
                }
            }
        }
    }
    let chosen = best.ok_or(SchedulerError::NoFeasibleGridPoint { option: 3 })?;

    let entry = OptionEntry {
        sync_time: chosen.sync_time,
        thresholds: chosen.thresholds,
        percentiles: chosen.percentiles,
        local_task_planned: [true, chosen.decision == Decision::RunLocalTask],
        percentile_clamped: required < alpha * n_total as f64 - QUORUM_EPS,
        fallback_wait: fallback_1 || chosen_fallback_2,
    };
    let derivation = OptionDerivation {
        expected_wait_w1: chosen.wait,
        expected_local_2: local_2.map(|g| g.mean()).unwrap_or(0.0),
        decision_2: chosen.decision,
        ..OptionDerivation::default()
    };
    Ok((entry, derivation))
}

/// Runs the three fix operations in order and assembles the schedule,
/// re-checking the option-time ordering that the searches were
/// constrained to respect.
pub fn build_schedule(
    fast: &ClusterModel,
    slow: &ClusterModel,
    alpha: f64,
    n_total: u32,
    params: &PayoffParameters,
    mode: FormulaMode,
) -> Result<SyncSchedule, SchedulerError> {
    fast.model.validate()?;
    slow.model.validate()?;

    let option1 = fix_first_option(fast, slow, alpha, n_total)?;
    let (option2, d2) = fix_second_option(fast, slow, alpha, n_total, &option1, params, mode)?;
    let (option3, d3) =
        fix_third_option(fast, slow, alpha, n_total, &option1, &option2, params, mode)?;

    let times = [option1.sync_time, option2.sync_time, option3.sync_time];
    if !(times[0] <= times[1] && times[1] <= times[2]) {
        return Err(SchedulerError::NonMonotonicSchedule { times });
    }

    Ok(SyncSchedule {
        options: [option1, option2, option3],
        alpha,
        n_total,
        derivation: OptionDerivation {
            expected_wait_w2: d2.expected_wait_w2,
            expected_local_1: d2.expected_local_1,
            decision_1: d2.decision_1,
            expected_wait_w1: d3.expected_wait_w1,
            expected_local_2: d3.expected_local_2,
            decision_2: d3.decision_2,
        },
        mode,
    })
}
