//! Per-worker runtime for the three-option sync schedule.
//!
//! Each worker runs a small state machine driven by the simulator: it
//! executes its task, shows up at the earliest sync option it can make,
//! and reacts to late notifications and option deadlines. Lateness is
//! self-detected at the halfway point of the current task by linear
//! extrapolation, and announced to the other cluster through a bounded
//! number of redundant notifications that embed every earlier
//! notification from the same cluster and option, so a single delivered
//! message is enough to reconstruct the whole story.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::clustering::{ClusterRole, WorkerId};
use crate::scheduler::SyncSchedule;

/// How many reconstructed notifications classify the sending cluster as
/// late. The redundant extra senders exist to survive message loss, not
/// to form a voting threshold, so one delivered notification suffices.
pub const LATE_THRESHOLD: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("event delivered to a worker already in terminal phase {phase:?}")]
    TerminalState { phase: Phase },
    #[error("{event} event does not apply in phase {phase:?}")]
    UnexpectedEvent { phase: Phase, event: &'static str },
    #[error("late-notification probability needs a cluster of at least 2 workers, got {size}")]
    ClusterTooSmall { size: usize },
    #[error("sync option {option} is outside 1..=3")]
    BadOption { option: u8 },
}

/// Which group a worker belongs to for the current window. Outliers sit
/// outside both fitted clusters and follow the broadcast schedule
/// passively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerCluster {
    Fast,
    Slow,
    Outlier,
}

impl WorkerCluster {
    /// Index into the `[fast, slow]` arrays of a schedule, if any.
    pub fn index(&self) -> Option<usize> {
        match self {
            WorkerCluster::Fast => Some(0),
            WorkerCluster::Slow => Some(1),
            WorkerCluster::Outlier => None,
        }
    }

    /// The cluster role as stamped onto outgoing notifications.
    pub fn role(&self) -> Option<ClusterRole> {
        match self {
            WorkerCluster::Fast => Some(ClusterRole::Fast),
            WorkerCluster::Slow => Some(ClusterRole::Slow),
            WorkerCluster::Outlier => None,
        }
    }
}

impl From<ClusterRole> for WorkerCluster {
    fn from(role: ClusterRole) -> Self {
        match role {
            ClusterRole::Fast => WorkerCluster::Fast,
            ClusterRole::Slow => WorkerCluster::Slow,
        }
    }
}

/// Where a worker stands relative to the three sync options.
///
/// The option number inside the first three variants is the worker's
/// current target: `BeforeOption(n)` is still executing a task and will
/// next show up at option `n`, `AtOption(n)` is waiting at option `n`'s
/// barrier, and `RunningLocal(n)` squeezed in a local task and will
/// arrive at option `n` once it finishes. `Synced` and `Aborted` are
/// terminal and record the option that settled the sync point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BeforeOption(u8),
    AtOption(u8),
    RunningLocal(u8),
    Synced(u8),
    Aborted(u8),
}

impl Phase {
    /// The option this worker is currently headed for, or `None` once
    /// terminal. Never decreases over a worker's lifetime.
    pub fn position(&self) -> Option<u8> {
        match self {
            Phase::BeforeOption(n) | Phase::AtOption(n) | Phase::RunningLocal(n) => Some(*n),
            Phase::Synced(_) | Phase::Aborted(_) => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.position().is_none()
    }
}

/// Compact record of one notification, as carried inside later
/// notifications from the same cluster and option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NotificationSummary {
    pub origin_worker: WorkerId,
    pub origin_cluster: ClusterRole,
    pub option_index: u8,
    pub sequence: u32,
}

/// A lateness announcement broadcast by a worker whose cluster will miss
/// its threshold at `option_index`. Every earlier notification the
/// sender has seen from its own cluster for this option rides along in
/// `embedded`, so receivers can reconstruct lost messages.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct LateNotification {
    pub origin_worker: WorkerId,
    pub origin_cluster: ClusterRole,
    pub option_index: u8,
    pub sequence: u32,
    pub embedded: Vec<NotificationSummary>,
}

impl LateNotification {
    /// A fresh notification with nothing embedded yet; [`merge_notifications`]
    /// fills in the sequence number and history.
    pub fn first(origin_worker: WorkerId, origin_cluster: ClusterRole, option_index: u8) -> Self {
        LateNotification {
            origin_worker,
            origin_cluster,
            option_index,
            sequence: 1,
            embedded: Vec::new(),
        }
    }

    pub fn summary(&self) -> NotificationSummary {
        NotificationSummary {
            origin_worker: self.origin_worker,
            origin_cluster: self.origin_cluster,
            option_index: self.option_index,
            sequence: self.sequence,
        }
    }
}

/// Everything a worker knows about its own progress through the current
/// sync window. `progress` and `task_started_at` are maintained by the
/// driver as the current task (iteration or local) executes.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub id: WorkerId,
    pub cluster: WorkerCluster,
    pub phase: Phase,
    /// When this worker became (or expects to become) available at its
    /// current target option.
    pub t_av: f64,
    /// Fraction of the current task completed.
    pub progress: f64,
    /// Start time of the current task, the anchor for extrapolation.
    pub task_started_at: f64,
    /// Notifications delivered from the other cluster.
    pub notifications_received: BTreeSet<LateNotification>,
    /// Sends observed from the worker's own cluster (its own included),
    /// kept for embedding into any notification it sends later.
    pub cluster_history: Vec<NotificationSummary>,
    /// Whether this worker already sent a notification per option.
    pub sent_late: [bool; 3],
}

impl WorkerState {
    pub fn new(id: WorkerId, cluster: WorkerCluster) -> Self {
        WorkerState {
            id,
            cluster,
            phase: Phase::BeforeOption(1),
            t_av: 0.0,
            progress: 0.0,
            task_started_at: 0.0,
            notifications_received: BTreeSet::new(),
            cluster_history: Vec::new(),
            sent_late: [false; 3],
        }
    }

    /// Own-cluster sends seen for `option`, ordered by sequence number.
    fn history_for(&self, option: u8) -> Vec<NotificationSummary> {
        let mut h: Vec<NotificationSummary> = self
            .cluster_history
            .iter()
            .filter(|s| s.option_index == option)
            .copied()
            .collect();
        h.sort_by_key(|s| s.sequence);
        h
    }

    fn record_own_cluster(&mut self, summary: NotificationSummary) {
        if !self.cluster_history.contains(&summary) {
            self.cluster_history.push(summary);
        }
    }
}

/// What the simulator tells a worker.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkerEvent {
    /// The current task finished and the worker stands at its target
    /// option's barrier as of `at`.
    ReachedSyncPoint { at: f64 },
    /// A broadcast notification was delivered.
    NotificationArrived(LateNotification),
    /// The planned local task finished at `at`.
    LocalTaskDone { at: f64 },
    /// Option `option`'s rendezvous time passed; `sync_succeeded` says
    /// whether the barrier met its quorum.
    OptionDeadlinePassed { option: u8, sync_succeeded: bool },
}

impl WorkerEvent {
    fn name(&self) -> &'static str {
        match self {
            WorkerEvent::ReachedSyncPoint { .. } => "ReachedSyncPoint",
            WorkerEvent::NotificationArrived(_) => "NotificationArrived",
            WorkerEvent::LocalTaskDone { .. } => "LocalTaskDone",
            WorkerEvent::OptionDeadlinePassed { .. } => "OptionDeadlinePassed",
        }
    }
}

/// What a worker asks the simulator to do in response.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkerAction {
    /// Commit to option `option`'s barrier and wait for its rendezvous.
    ExecuteSync { option: u8 },
    /// Start the planned local task; the duration is the planned mean,
    /// the driver samples the actual one.
    ExecuteLocal { expected_duration: f64 },
    /// Broadcast this notification to every other worker.
    SendNotification(LateNotification),
    /// Give up on the sync point at `option`.
    Abort { option: u8 },
    /// Move on to option `option` without committing yet.
    ProceedToOption { option: u8 },
}

/// True once a worker halfway through its task can tell it will miss
/// the cluster's predicted finish: before the 50% checkpoint nothing is
/// claimed, after it the finish time is extrapolated linearly as
/// `started + elapsed / 0.5`.
pub fn detect_lateness(state: &WorkerState, predicted_finish: f64, now: f64) -> bool {
    if state.progress < 0.5 {
        return false;
    }
    let elapsed = now - state.task_started_at;
    state.task_started_at + elapsed / 0.5 > predicted_finish
}

/// Whether a worker that detected lateness should actually broadcast.
///
/// The first detector in a cluster always sends; everyone after that
/// sends with probability `2 / (N - 1)`, which makes three expected
/// notifications when a whole cluster of `N` goes late — redundancy
/// against lost messages, not chatter proportional to cluster size.
pub fn should_send_late_notification(
    state: &WorkerState,
    cluster_size: usize,
    rng: &mut impl Rng,
    is_first_detector: bool,
) -> Result<bool, ProtocolError> {
    if cluster_size < 2 {
        return Err(ProtocolError::ClusterTooSmall { size: cluster_size });
    }
    let current = state.phase.position();
    if current.is_some_and(|n| state.sent_late[(n - 1) as usize]) {
        return Ok(false);
    }
    if is_first_detector {
        return Ok(true);
    }
    let p = (2.0 / (cluster_size - 1) as f64).min(1.0);
    Ok(rng.gen_bool(p))
}

/// Stamps `new` with its place in the cluster's notification history:
/// sequence number `|history| + 1` and all prior sends embedded.
pub fn merge_notifications(
    mut new: LateNotification,
    history: &[NotificationSummary],
) -> LateNotification {
    let mut embedded = history.to_vec();
    embedded.sort_by_key(|s| s.sequence);
    new.sequence = embedded.len() as u32 + 1;
    new.embedded = embedded;
    new
}

/// Distinct notifications known for `option`, counting embedded copies
/// as received. A receiver holding only the k-th send still counts all
/// k of them.
pub fn reconstructed_count(received: &BTreeSet<LateNotification>, option: u8) -> usize {
    let mut seen: BTreeSet<(WorkerId, u32)> = BTreeSet::new();
    for n in received {
        if n.option_index == option {
            seen.insert((n.origin_worker, n.sequence));
            for s in &n.embedded {
                if s.option_index == option {
                    seen.insert((s.origin_worker, s.sequence));
                }
            }
        }
    }
    seen.len()
}

/// Whether the notifications in hand classify the other cluster as late
/// at `option`, against the default threshold of [`LATE_THRESHOLD`].
pub fn cluster_is_late(received: &BTreeSet<LateNotification>, option: u8) -> bool {
    cluster_is_late_with_threshold(received, option, LATE_THRESHOLD)
}

/// Same with an explicit threshold, for runs that want to require more
/// redundancy before reacting.
pub fn cluster_is_late_with_threshold(
    received: &BTreeSet<LateNotification>,
    option: u8,
    threshold: usize,
) -> bool {
    reconstructed_count(received, option) >= threshold
}

/// The halfway-checkpoint routine the driver calls while a task runs:
/// detect lateness against the cluster threshold for the current target
/// option, roll the send probability, and if sending, build the
/// notification with the full embedded history. Returns the message to
/// broadcast, if any. Outliers and workers not currently executing stay
/// silent.
pub fn checkpoint_late_notification(
    state: &mut WorkerState,
    schedule: &SyncSchedule,
    now: f64,
    cluster_size: usize,
    rng: &mut impl Rng,
) -> Result<Option<LateNotification>, ProtocolError> {
    let Some(role) = state.cluster.role() else {
        return Ok(None);
    };
    let idx = state.cluster.index().expect("clustered worker has an index");
    let executing = matches!(state.phase, Phase::BeforeOption(_) | Phase::RunningLocal(_));
    let Some(option) = state.phase.position() else {
        return Ok(None);
    };
    if !executing {
        return Ok(None);
    }
    let predicted = schedule.options[(option - 1) as usize].thresholds[idx];
    if !detect_lateness(state, predicted, now) {
        return Ok(None);
    }
    if state.sent_late[(option - 1) as usize] {
        return Ok(None);
    }
    let history = state.history_for(option);
    let is_first = history.is_empty();
    if !should_send_late_notification(state, cluster_size, rng, is_first)? {
        return Ok(None);
    }
    let notif = merge_notifications(LateNotification::first(state.id, role, option), &history);
    state.sent_late[(option - 1) as usize] = true;
    state.record_own_cluster(notif.summary());
    Ok(Some(notif))
}

/// Advances one worker by one event.
///
/// On-time workers commit to their option's barrier and wait; a
/// notification (or an arrival past the own threshold) reroutes them to
/// the next option, with the planned local task squeezed in when the
/// schedule planned one and the other cluster's expected lateness fits
/// the slack before the rendezvous. A deadline that passes with the
/// barrier quorate settles every remaining worker on `Synced`; one that
/// passes in silence aborts the committed waiters. Nothing outlives
/// option 3.
pub fn worker_step(
    state: &mut WorkerState,
    schedule: &SyncSchedule,
    event: WorkerEvent,
) -> Result<Vec<WorkerAction>, ProtocolError> {
    if state.phase.is_terminal() {
        return Err(ProtocolError::TerminalState { phase: state.phase });
    }
    match event {
        WorkerEvent::ReachedSyncPoint { at } => match state.phase {
            Phase::BeforeOption(n) => {
                state.progress = 1.0;
                Ok(arrive(state, schedule, n, at))
            }
            phase => Err(ProtocolError::UnexpectedEvent {
                phase,
                event: "ReachedSyncPoint",
            }),
        },
        WorkerEvent::LocalTaskDone { at } => match state.phase {
            Phase::RunningLocal(n) => {
                state.progress = 1.0;
                Ok(arrive(state, schedule, n, at))
            }
            phase => Err(ProtocolError::UnexpectedEvent {
                phase,
                event: "LocalTaskDone",
            }),
        },
        WorkerEvent::NotificationArrived(notif) => handle_notification(state, schedule, notif),
        WorkerEvent::OptionDeadlinePassed {
            option,
            sync_succeeded,
        } => {
            if !(1..=3).contains(&option) {
                return Err(ProtocolError::BadOption { option });
            }
            if sync_succeeded {
                // The barrier met quorum: everyone still in flight adopts
                // the committed sync point, barrier presence or not.
                state.phase = Phase::Synced(option);
                return Ok(Vec::new());
            }
            let position = state.phase.position().expect("terminal handled above");
            if option < position {
                // A deadline for an option this worker already moved past.
                return Ok(Vec::new());
            }
            if option > position {
                return Err(ProtocolError::UnexpectedEvent {
                    phase: state.phase,
                    event: "OptionDeadlinePassed",
                });
            }
            match state.phase {
                Phase::BeforeOption(n) => {
                    // Still executing when the option lapsed.
                    if n == 3 {
                        state.phase = Phase::Aborted(3);
                        Ok(vec![WorkerAction::Abort { option: 3 }])
                    } else {
                        state.phase = Phase::BeforeOption(n + 1);
                        Ok(vec![WorkerAction::ProceedToOption { option: n + 1 }])
                    }
                }
                Phase::RunningLocal(n) => {
                    // The local task overran its window; retarget the next
                    // option and keep working.
                    if n == 3 {
                        state.phase = Phase::Aborted(3);
                        Ok(vec![WorkerAction::Abort { option: 3 }])
                    } else {
                        state.phase = Phase::RunningLocal(n + 1);
                        Ok(vec![WorkerAction::ProceedToOption { option: n + 1 }])
                    }
                }
                Phase::AtOption(n) => {
                    if state.cluster == WorkerCluster::Outlier && n < 3 {
                        // Outliers keep trying whatever the schedule still
                        // offers.
                        let mut actions = vec![WorkerAction::ProceedToOption { option: n + 1 }];
                        actions.extend(arrive(state, schedule, n + 1, state.t_av));
                        Ok(actions)
                    } else {
                        // A committed waiter heard nothing and nobody came.
                        state.phase = Phase::Aborted(n);
                        Ok(vec![WorkerAction::Abort { option: n }])
                    }
                }
                Phase::Synced(_) | Phase::Aborted(_) => unreachable!("terminal handled above"),
            }
        }
    }
}

fn handle_notification(
    state: &mut WorkerState,
    schedule: &SyncSchedule,
    notif: LateNotification,
) -> Result<Vec<WorkerAction>, ProtocolError> {
    if !(1..=3).contains(&notif.option_index) {
        return Err(ProtocolError::BadOption {
            option: notif.option_index,
        });
    }
    let Some(own_role) = state.cluster.role() else {
        // Outliers play no part in the notification protocol.
        return Ok(Vec::new());
    };
    if notif.origin_cluster == own_role {
        // A cluster mate went public; remember it for embedding.
        state.record_own_cluster(notif.summary());
        return Ok(Vec::new());
    }
    let option = notif.option_index;
    state.notifications_received.insert(notif);
    match state.phase {
        // A committed waiter just learned the cluster it waits for is
        // late at this very option: re-plan right away.
        Phase::AtOption(n) if n == option => Ok(skip_notified_option(state, schedule, n)),
        // Everyone else acts on it at their next arrival.
        _ => Ok(Vec::new()),
    }
}

/// A worker reaches (or re-reaches) option `n`'s barrier at time `t` and
/// decides what to do there.
fn arrive(state: &mut WorkerState, schedule: &SyncSchedule, n: u8, t: f64) -> Vec<WorkerAction> {
    state.t_av = t;
    let entry = &schedule.options[(n - 1) as usize];
    let Some(idx) = state.cluster.index() else {
        // Outliers have no cluster threshold: present by the rendezvous
        // time means waiting at the barrier.
        return if t <= entry.sync_time {
            state.phase = Phase::AtOption(n);
            vec![WorkerAction::ExecuteSync { option: n }]
        } else if n == 3 {
            state.phase = Phase::Aborted(3);
            vec![WorkerAction::Abort { option: 3 }]
        } else {
            let mut actions = vec![WorkerAction::ProceedToOption { option: n + 1 }];
            actions.extend(arrive(state, schedule, n + 1, t));
            actions
        };
    };

    let on_time = t <= entry.thresholds[idx];
    let other_late = cluster_is_late(&state.notifications_received, n);
    if on_time && !other_late {
        // Nothing suggests trouble: commit and wait for the rendezvous.
        state.phase = Phase::AtOption(n);
        vec![WorkerAction::ExecuteSync { option: n }]
    } else if on_time {
        skip_notified_option(state, schedule, n)
    } else {
        // Own lateness, discovered only now. The halfway checkpoint
        // normally catches this earlier; if nobody in the cluster has
        // spoken up yet, fill the first-detector role on the spot.
        let mut actions = Vec::new();
        if let Some(notif) = late_arrival_notification(state, n) {
            actions.push(WorkerAction::SendNotification(notif));
        }
        if n == 3 {
            state.phase = Phase::Aborted(3);
            actions.push(WorkerAction::Abort { option: 3 });
        } else {
            actions.push(WorkerAction::ProceedToOption { option: n + 1 });
            actions.extend(arrive(state, schedule, n + 1, t));
        }
        actions
    }
}

/// An on-time worker that knows the other cluster is late at option `n`
/// skips it: no further option exists after 3, so that one aborts;
/// otherwise the planned local task runs if the schedule planned one and
/// the other side's expected lateness fits the slack before the
/// rendezvous, and the worker proceeds either way.
fn skip_notified_option(state: &mut WorkerState, schedule: &SyncSchedule, n: u8) -> Vec<WorkerAction> {
    if n == 3 {
        state.phase = Phase::Aborted(3);
        return vec![WorkerAction::Abort { option: 3 }];
    }
    let idx = state.cluster.index().expect("outliers never reach the skip branch");
    let planned = schedule.options[n as usize].local_task_planned[idx];
    let other_lateness = match idx {
        0 => schedule.derivation.expected_wait_w2,
        _ => schedule.derivation.expected_wait_w1,
    };
    let slack = schedule.options[(n - 1) as usize].sync_time - state.t_av;
    if planned && other_lateness <= slack {
        let expected_duration = match idx {
            0 => schedule.derivation.expected_local_1,
            _ => schedule.derivation.expected_local_2,
        };
        state.phase = Phase::RunningLocal(n + 1);
        vec![
            WorkerAction::ExecuteLocal { expected_duration },
            WorkerAction::ProceedToOption { option: n + 1 },
        ]
    } else {
        let mut actions = vec![WorkerAction::ProceedToOption { option: n + 1 }];
        actions.extend(arrive(state, schedule, n + 1, state.t_av));
        actions
    }
}

/// First-detector fallback for lateness that surfaces only at arrival:
/// deterministic (no probability roll is available here), so only the
/// first voice in the cluster speaks.
fn late_arrival_notification(state: &mut WorkerState, n: u8) -> Option<LateNotification> {
    let role = state.cluster.role()?;
    if state.sent_late[(n - 1) as usize] {
        return None;
    }
    let history = state.history_for(n);
    if !history.is_empty() {
        return None;
    }
    let notif = merge_notifications(LateNotification::first(state.id, role, n), &history);
    state.sent_late[(n - 1) as usize] = true;
    state.record_own_cluster(notif.summary());
    Some(notif)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::Decision;
    use crate::scheduler::{FormulaMode, OptionDerivation, OptionEntry, SyncSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(
        sync_time: f64,
        thresholds: [f64; 2],
        local_task_planned: [bool; 2],
    ) -> OptionEntry {
        OptionEntry {
            sync_time,
            thresholds,
            percentiles: [0.7, 0.7],
            local_task_planned,
            percentile_clamped: false,
            fallback_wait: false,
        }
    }

    /// A hand-built schedule: option 1 at 33.5, option 2 at 45 with a
    /// planned fast-cluster local task, option 3 at 52 with both planned.
    fn fixture() -> SyncSchedule {
        SyncSchedule {
            options: [
                entry(33.5, [26.0, 33.5], [false, false]),
                entry(45.0, [40.0, 45.0], [true, false]),
                entry(52.0, [52.0, 45.0], [true, true]),
            ],
            alpha: 0.7,
            n_total: 20,
            derivation: OptionDerivation {
                expected_wait_w2: 5.0,
                expected_wait_w1: 4.0,
                expected_local_1: 7.0,
                expected_local_2: 6.0,
                decision_1: Decision::RunLocalTask,
                decision_2: Decision::RunLocalTask,
            },
            mode: FormulaMode::Literal,
        }
    }

    fn fast_worker(id: WorkerId) -> WorkerState {
        WorkerState::new(id, WorkerCluster::Fast)
    }

    fn slow_notification(option: u8) -> LateNotification {
        LateNotification::first(7, ClusterRole::Slow, option)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn lateness_shows_at_the_halfway_checkpoint() {
        let mut w = fast_worker(0);
        w.progress = 0.5;
        // Halfway after 20ms extrapolates to 40ms, past a 25ms prediction.
        assert!(detect_lateness(&w, 25.0, 20.0));
        // Halfway after 12ms extrapolates to 24ms, still in time.
        assert!(!detect_lateness(&w, 25.0, 12.0));
    }

    #[test]
    fn no_claim_before_the_checkpoint() {
        let mut w = fast_worker(0);
        w.progress = 0.4;
        assert!(!detect_lateness(&w, 25.0, 1000.0));
    }

    #[test]
    fn first_detector_always_sends() {
        let w = fast_worker(0);
        assert_eq!(
            should_send_late_notification(&w, 20, &mut rng(), true),
            Ok(true)
        );
    }

    #[test]
    fn three_worker_cluster_sends_unconditionally() {
        // 2/(3-1) is already probability one.
        let w = fast_worker(0);
        for _ in 0..50 {
            assert_eq!(
                should_send_late_notification(&w, 3, &mut rng(), false),
                Ok(true)
            );
        }
    }

    #[test]
    fn cluster_of_one_cannot_run_the_protocol() {
        let w = fast_worker(0);
        assert_eq!(
            should_send_late_notification(&w, 1, &mut rng(), true),
            Err(ProtocolError::ClusterTooSmall { size: 1 })
        );
    }

    #[test]
    fn one_send_per_option_per_worker() {
        let mut w = fast_worker(0);
        w.sent_late[0] = true;
        assert_eq!(
            should_send_late_notification(&w, 20, &mut rng(), true),
            Ok(false)
        );
    }

    #[test]
    fn whole_late_cluster_sends_three_notifications_on_average() {
        // First detector sends for sure, the other 19 of a 20-worker
        // cluster send with probability 2/19 each: 3 expected in total.
        let mut r = rng();
        let trials = 10_000;
        let mut total = 0u64;
        for _ in 0..trials {
            let mut count = 1u64;
            for k in 1..20 {
                let w = fast_worker(k);
                if should_send_late_notification(&w, 20, &mut r, false).unwrap() {
                    count += 1;
                }
            }
            total += count;
        }
        let mean = total as f64 / trials as f64;
        assert!((2.8..=3.2).contains(&mean), "mean {mean} out of range");
    }

    #[test]
    fn merge_assigns_sequence_and_embeds_history() {
        let first = merge_notifications(slow_notification(1), &[]);
        assert_eq!(first.sequence, 1);
        assert!(first.embedded.is_empty());

        let second = merge_notifications(
            LateNotification::first(8, ClusterRole::Slow, 1),
            &[first.summary()],
        );
        assert_eq!(second.sequence, 2);
        assert_eq!(second.embedded, vec![first.summary()]);
    }

    #[test]
    fn one_delivered_message_reconstructs_the_chain() {
        let first = merge_notifications(slow_notification(1), &[]);
        let second = merge_notifications(
            LateNotification::first(8, ClusterRole::Slow, 1),
            &[first.summary()],
        );
        let third = merge_notifications(
            LateNotification::first(9, ClusterRole::Slow, 1),
            &[first.summary(), second.summary()],
        );
        // Only the last of three sends arrives.
        let mut received = BTreeSet::new();
        received.insert(third);
        assert_eq!(reconstructed_count(&received, 1), 3);
        assert_eq!(reconstructed_count(&received, 2), 0);
    }

    #[test]
    fn one_notification_marks_the_cluster_late() {
        let mut received = BTreeSet::new();
        assert!(!cluster_is_late(&received, 1));
        received.insert(merge_notifications(slow_notification(1), &[]));
        assert!(cluster_is_late(&received, 1));
        assert!(!cluster_is_late(&received, 2));
        assert!(!cluster_is_late_with_threshold(&received, 1, 3));
    }

    #[test]
    fn on_time_worker_commits_to_the_barrier() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::ExecuteSync { option: 1 }]);
        assert_eq!(w.phase, Phase::AtOption(1));
        assert_eq!(w.t_av, 26.0);
    }

    #[test]
    fn notified_worker_fits_the_local_task_then_proceeds() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        // The other cluster's announced lateness (5ms) fits the slack
        // before the 33.5ms rendezvous when available at 26ms.
        worker_step(
            &mut w,
            &schedule,
            WorkerEvent::NotificationArrived(slow_notification(1)),
        )
        .unwrap();
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
        )
        .unwrap();
        assert_eq!(
            actions,
            vec![
                WorkerAction::ExecuteLocal {
                    expected_duration: 7.0
                },
                WorkerAction::ProceedToOption { option: 2 },
            ]
        );
        assert_eq!(w.phase, Phase::RunningLocal(2));
    }

    #[test]
    fn unplanned_local_task_is_not_improvised() {
        let mut schedule = fixture();
        schedule.options[1].local_task_planned = [false, false];
        let mut w = fast_worker(0);
        worker_step(
            &mut w,
            &schedule,
            WorkerEvent::NotificationArrived(slow_notification(1)),
        )
        .unwrap();
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
        )
        .unwrap();
        // No local task: straight to the next barrier and wait there.
        assert_eq!(
            actions,
            vec![
                WorkerAction::ProceedToOption { option: 2 },
                WorkerAction::ExecuteSync { option: 2 },
            ]
        );
        assert_eq!(w.phase, Phase::AtOption(2));
    }

    #[test]
    fn lateness_that_outruns_the_slack_skips_the_local_task() {
        let mut schedule = fixture();
        schedule.derivation.expected_wait_w2 = 9.0;
        let mut w = fast_worker(0);
        worker_step(
            &mut w,
            &schedule,
            WorkerEvent::NotificationArrived(slow_notification(1)),
        )
        .unwrap();
        // 9ms of expected lateness does not fit the 7.5ms slack.
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
        )
        .unwrap();
        assert_eq!(
            actions,
            vec![
                WorkerAction::ProceedToOption { option: 2 },
                WorkerAction::ExecuteSync { option: 2 },
            ]
        );
        assert_eq!(w.phase, Phase::AtOption(2));
    }

    #[test]
    fn silence_at_the_deadline_aborts_the_waiter() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
        )
        .unwrap();
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 1,
                sync_succeeded: false,
            },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::Abort { option: 1 }]);
        assert_eq!(w.phase, Phase::Aborted(1));
    }

    #[test]
    fn third_option_lateness_is_final() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        w.phase = Phase::BeforeOption(3);
        worker_step(
            &mut w,
            &schedule,
            WorkerEvent::NotificationArrived(slow_notification(3)),
        )
        .unwrap();
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 50.0 },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::Abort { option: 3 }]);
        assert_eq!(w.phase, Phase::Aborted(3));
    }

    #[test]
    fn midwait_notification_reroutes_the_worker() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
        )
        .unwrap();
        // The notification lands while the worker already waits at the
        // barrier: same skip logic, evaluated on the spot.
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::NotificationArrived(slow_notification(1)),
        )
        .unwrap();
        assert_eq!(
            actions,
            vec![
                WorkerAction::ExecuteLocal {
                    expected_duration: 7.0
                },
                WorkerAction::ProceedToOption { option: 2 },
            ]
        );
        assert_eq!(w.phase, Phase::RunningLocal(2));

        // Local task done at 34ms: on time for option 2, commit there.
        let actions = worker_step(&mut w, &schedule, WorkerEvent::LocalTaskDone { at: 34.0 }).unwrap();
        assert_eq!(actions, vec![WorkerAction::ExecuteSync { option: 2 }]);
        assert_eq!(w.phase, Phase::AtOption(2));

        // Option 1's deadline passing is old news by now.
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 1,
                sync_succeeded: false,
            },
        )
        .unwrap();
        assert!(actions.is_empty());

        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 2,
                sync_succeeded: true,
            },
        )
        .unwrap();
        assert!(actions.is_empty());
        assert_eq!(w.phase, Phase::Synced(2));
    }

    #[test]
    fn late_arrival_notifies_first_and_chases_the_next_option() {
        let schedule = fixture();
        let mut w = WorkerState::new(3, WorkerCluster::Slow);
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 40.0 },
        )
        .unwrap();
        // 40ms is past the slow threshold 33.5 but fine for option 2's 45.
        let expected_notif = LateNotification::first(3, ClusterRole::Slow, 1);
        assert_eq!(
            actions,
            vec![
                WorkerAction::SendNotification(expected_notif),
                WorkerAction::ProceedToOption { option: 2 },
                WorkerAction::ExecuteSync { option: 2 },
            ]
        );
        assert_eq!(w.phase, Phase::AtOption(2));
        assert!(w.sent_late[0]);

        // A cluster mate arriving just as late stays silent: the first
        // voice already spoke.
        let mut peer = WorkerState::new(4, WorkerCluster::Slow);
        worker_step(
            &mut peer,
            &schedule,
            WorkerEvent::NotificationArrived(LateNotification::first(3, ClusterRole::Slow, 1)),
        )
        .unwrap();
        let actions = worker_step(
            &mut peer,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 40.0 },
        )
        .unwrap();
        assert_eq!(
            actions,
            vec![
                WorkerAction::ProceedToOption { option: 2 },
                WorkerAction::ExecuteSync { option: 2 },
            ]
        );
    }

    #[test]
    fn deadline_cascade_ends_in_abort() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        for option in 1..=2 {
            let actions = worker_step(
                &mut w,
                &schedule,
                WorkerEvent::OptionDeadlinePassed {
                    option,
                    sync_succeeded: false,
                },
            )
            .unwrap();
            assert_eq!(
                actions,
                vec![WorkerAction::ProceedToOption { option: option + 1 }]
            );
            assert_eq!(w.phase, Phase::BeforeOption(option + 1));
        }
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 3,
                sync_succeeded: false,
            },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::Abort { option: 3 }]);
        assert_eq!(w.phase, Phase::Aborted(3));
    }

    #[test]
    fn quorate_deadline_reaches_workers_still_in_flight() {
        let schedule = fixture();
        let mut executing = fast_worker(0);
        worker_step(
            &mut executing,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 1,
                sync_succeeded: true,
            },
        )
        .unwrap();
        assert_eq!(executing.phase, Phase::Synced(1));

        let mut local = fast_worker(1);
        local.phase = Phase::RunningLocal(2);
        worker_step(
            &mut local,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 1,
                sync_succeeded: true,
            },
        )
        .unwrap();
        assert_eq!(local.phase, Phase::Synced(1));
    }

    #[test]
    fn overrunning_local_task_retargets_the_next_option() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        w.phase = Phase::RunningLocal(2);
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 2,
                sync_succeeded: false,
            },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::ProceedToOption { option: 3 }]);
        assert_eq!(w.phase, Phase::RunningLocal(3));

        // Still not done by the last rendezvous: the sync point is gone.
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 3,
                sync_succeeded: false,
            },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::Abort { option: 3 }]);
        assert_eq!(w.phase, Phase::Aborted(3));
    }

    #[test]
    fn outliers_follow_the_schedule_and_ignore_gossip() {
        let schedule = fixture();
        let mut w = WorkerState::new(9, WorkerCluster::Outlier);
        // Notifications neither recorded nor acted on.
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::NotificationArrived(slow_notification(1)),
        )
        .unwrap();
        assert!(actions.is_empty());
        assert!(w.notifications_received.is_empty());

        // Present by the rendezvous time (no cluster threshold applies).
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 30.0 },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::ExecuteSync { option: 1 }]);

        // A failed option is not a reason to give up before the last one.
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 1,
                sync_succeeded: false,
            },
        )
        .unwrap();
        assert_eq!(
            actions,
            vec![
                WorkerAction::ProceedToOption { option: 2 },
                WorkerAction::ExecuteSync { option: 2 },
            ]
        );
        assert_eq!(w.phase, Phase::AtOption(2));

        worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 2,
                sync_succeeded: false,
            },
        )
        .unwrap();
        let actions = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 3,
                sync_succeeded: false,
            },
        )
        .unwrap();
        assert_eq!(actions, vec![WorkerAction::Abort { option: 3 }]);
        assert_eq!(w.phase, Phase::Aborted(3));
    }

    #[test]
    fn terminal_workers_reject_events() {
        let schedule = fixture();
        for phase in [Phase::Synced(1), Phase::Aborted(3)] {
            let mut w = fast_worker(0);
            w.phase = phase;
            let err = worker_step(
                &mut w,
                &schedule,
                WorkerEvent::ReachedSyncPoint { at: 1.0 },
            )
            .unwrap_err();
            assert_eq!(err, ProtocolError::TerminalState { phase });
        }
    }

    #[test]
    fn out_of_order_deadline_is_a_driver_bug() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        let err = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 2,
                sync_succeeded: false,
            },
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedEvent { .. }));

        let err = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::OptionDeadlinePassed {
                option: 7,
                sync_succeeded: false,
            },
        )
        .unwrap_err();
        assert_eq!(err, ProtocolError::BadOption { option: 7 });
    }

    #[test]
    fn misplaced_task_events_are_driver_bugs() {
        let schedule = fixture();
        let mut w = fast_worker(0);
        let err = worker_step(&mut w, &schedule, WorkerEvent::LocalTaskDone { at: 5.0 }).unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedEvent { .. }));

        w.phase = Phase::AtOption(1);
        let err = worker_step(
            &mut w,
            &schedule,
            WorkerEvent::ReachedSyncPoint { at: 30.0 },
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedEvent { .. }));
    }

    #[test]
    fn checkpoint_sends_once_and_embeds_the_cluster_history() {
        let schedule = fixture();
        let mut r = rng();
        // Halfway through a task started at 10ms, now 28ms: extrapolated
        // finish 46ms, past the fast threshold of 26ms.
        let mut first = fast_worker(0);
        first.task_started_at = 10.0;
        first.progress = 0.5;
        let notif = checkpoint_late_notification(&mut first, &schedule, 28.0, 3, &mut r)
            .unwrap()
            .expect("first detector sends");
        assert_eq!(notif.sequence, 1);
        assert!(notif.embedded.is_empty());
        assert!(first.sent_late[0]);
        // Second look at the same option stays silent.
        assert_eq!(
            checkpoint_late_notification(&mut first, &schedule, 29.0, 3, &mut r).unwrap(),
            None
        );

        // A cluster mate that saw the broadcast sends with the history
        // embedded (cluster of 3 rolls probability one).
        let mut peer = fast_worker(1);
        peer.task_started_at = 10.0;
        peer.progress = 0.5;
        worker_step(
            &mut peer,
            &schedule,
            WorkerEvent::NotificationArrived(notif.clone()),
        )
        .unwrap();
        let second = checkpoint_late_notification(&mut peer, &schedule, 28.0, 3, &mut r)
            .unwrap()
            .expect("probability one for a cluster of three");
        assert_eq!(second.sequence, 2);
        assert_eq!(second.embedded, vec![notif.summary()]);

        // A slow-cluster receiver of only the second message still counts
        // both sends.
        let mut receiver = WorkerState::new(5, WorkerCluster::Slow);
        worker_step(
            &mut receiver,
            &schedule,
            WorkerEvent::NotificationArrived(second),
        )
        .unwrap();
        assert_eq!(reconstructed_count(&receiver.notifications_received, 1), 2);

        // An on-pace worker has nothing to announce: halfway at 17ms
        // extrapolates to 24ms, inside the 26ms threshold.
        let mut on_pace = fast_worker(2);
        on_pace.task_started_at = 10.0;
        on_pace.progress = 0.5;
        assert_eq!(
            checkpoint_late_notification(&mut on_pace, &schedule, 17.0, 3, &mut r).unwrap(),
            None
        );
    }

    #[test]
    fn same_cluster_same_inputs_same_actions() {
        let schedule = fixture();
        let events = [
            WorkerEvent::NotificationArrived(slow_notification(1)),
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
            WorkerEvent::LocalTaskDone { at: 34.0 },
            WorkerEvent::OptionDeadlinePassed {
                option: 1,
                sync_succeeded: false,
            },
            WorkerEvent::OptionDeadlinePassed {
                option: 2,
                sync_succeeded: true,
            },
        ];
        let mut a = fast_worker(0);
        let mut b = fast_worker(1);
        for event in events {
            let actions_a = worker_step(&mut a, &schedule, event.clone()).unwrap();
            let actions_b = worker_step(&mut b, &schedule, event).unwrap();
            assert_eq!(actions_a, actions_b);
            assert_eq!(a.phase, b.phase);
        }
        assert_eq!(a.phase, Phase::Synced(2));
    }

    #[test]
    fn every_transition_moves_forward_and_terminals_absorb() {
        let schedule = fixture();
        let phases = [
            Phase::BeforeOption(1),
            Phase::BeforeOption(2),
            Phase::BeforeOption(3),
            Phase::AtOption(1),
            Phase::AtOption(2),
            Phase::AtOption(3),
            Phase::RunningLocal(2),
            Phase::RunningLocal(3),
            Phase::Synced(1),
            Phase::Aborted(3),
        ];
        let mut events = vec![
            WorkerEvent::ReachedSyncPoint { at: 26.0 },
            WorkerEvent::ReachedSyncPoint { at: 60.0 },
            WorkerEvent::NotificationArrived(slow_notification(1)),
            WorkerEvent::NotificationArrived(slow_notification(2)),
            WorkerEvent::NotificationArrived(slow_notification(3)),
            WorkerEvent::LocalTaskDone { at: 34.0 },
            WorkerEvent::LocalTaskDone { at: 60.0 },
        ];
        for option in 1..=3 {
            for sync_succeeded in [false, true] {
                events.push(WorkerEvent::OptionDeadlinePassed {
                    option,
                    sync_succeeded,
                });
            }
        }
        for cluster in [WorkerCluster::Fast, WorkerCluster::Slow, WorkerCluster::Outlier] {
            for phase in phases {
                for event in &events {
                    let mut w = WorkerState::new(0, cluster);
                    w.phase = phase;
                    w.t_av = 26.0;
                    match worker_step(&mut w, &schedule, event.clone()) {
                        Ok(_) => {
                            // Forward progress only: the target option never
                            // decreases, and a terminal state stays terminal.
                            if let (Some(before), Some(after)) =
                                (phase.position(), w.phase.position())
                            {
                                assert!(
                                    after >= before,
                                    "{phase:?} + {event:?} went backwards to {:?}",
                                    w.phase
                                );
                            }
                        }
                        Err(_) => {
                            assert_eq!(w.phase, phase, "a rejected event must not change state");
                        }
                    }
                    if phase.is_terminal() {
                        assert_eq!(
                            worker_step(&mut w, &schedule, event.clone()),
                            Err(ProtocolError::TerminalState { phase })
                        );
                    }
                }
            }
        }
    }
}
