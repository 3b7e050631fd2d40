//! Payoff model for the three-pass synchronization game played between the
//! fast and the slow cluster.
//!
//! Each sync point offers up to three chances ("passes") to rendezvous. At
//! every pass each cluster picks a strategy: synchronize now, skip, or
//! skip because a late notification arrived. Synchronizing together earns
//! the shared utility of that pass; a one-sided attempt wastes it and
//! costs both sides; a notified skip can be spent on local work. The
//! solver walks the whole game tree and returns the path with the best
//! cumulative payoff, which the scheduler and protocol then treat as the
//! intended behavior.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("durations must be non-negative and finite, got {0}")]
    NegativeDuration(f64),
    #[error("sync utilities must strictly decrease across passes")]
    UtilityOrder,
    #[error("abort costs must strictly increase across passes")]
    AbortCostOrder,
    #[error(
        "first-pass share {share:.3} must exceed second-pass share plus the \
         best local gain {floor:.3}; syncing late would never be worth it"
    )]
    FeasibilityMargin { share: f64, floor: f64 },
    #[error("sync group size must be at least 1")]
    EmptySyncGroup,
    #[error("cluster {cluster} may not play {strategy:?} at pass {pass}")]
    DisallowedStrategy {
        pass: usize,
        cluster: usize,
        strategy: Strategy,
    },
    #[error("scenario waits and task durations must be finite and non-negative")]
    InvalidScenario,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Show up at the sync point and wait for the other cluster.
    Sync,
    /// Skip this pass: forced for a cluster that is itself late, a blind
    /// defection for one that is on time.
    NoSyncLate,
    /// Skip this pass because the other cluster announced it is late; the
    /// announcement costs a little handling time but lets this cluster
    /// plan local work into the gap instead of waiting for a no-show.
    NoSyncLateNotification,
}

/// How a cluster stands relative to a pass deadline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lateness {
    OnTime,
    /// Late, and the other side has been told.
    LateNotified,
    /// Late without telling anyone.
    LateSilent,
}

/// Whether a cluster should fill an expected wait with a local task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    WaitForSync,
    RunLocalTask,
}

/// Tunable payoff constants. Utilities are per sync point and shared by
/// the workers that take part, so the per-worker share at pass `c` is
/// `sync_utils[c] / n_sync`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayoffParameters {
    /// Utility of a successful sync at pass 1, 2, 3 — decreasing, since a
    /// later rendezvous means staler shared state.
    pub sync_utils: [f64; 3],
    /// Cost of a failed rendezvous at pass 1, 2, 3 — increasing, since
    /// more has been invested by then.
    pub abort_costs: [f64; 3],
    /// Utility lost per time unit spent waiting at a sync point.
    pub wait_rate: f64,
    /// Utility gained per time unit of useful local work.
    pub local_rate: f64,
    /// Utility lost per time unit of late-notification handling.
    pub notify_rate: f64,
}

impl Default for PayoffParameters {
    fn default() -> Self {
        PayoffParameters {
            sync_utils: [100.0, 60.0, 30.0],
            abort_costs: [5.0, 10.0, 20.0],
            wait_rate: 1.0,
            local_rate: 1.0,
            notify_rate: 1.0,
        }
    }
}

impl PayoffParameters {
    /// Checks the orderings that make the game meaningful for a sync group
    /// of `n_sync` workers whose best alternative is a local task worth at
    /// most `max_local_gain` time units: per-worker shares must strictly
    /// decrease fast enough that an immediate sync beats doing local work
    /// and syncing a pass later, and failure must hurt more the longer
    /// everyone has already waited.
    pub fn validate(&self, n_sync: u32, max_local_gain: f64) -> Result<(), GameError> {
        for (name, v) in [
            ("sync utility", self.sync_utils.as_slice()),
            ("abort cost", self.abort_costs.as_slice()),
        ] {
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(GameError::NonPositive(name));
            }
        }
        for (name, k) in [
            ("wait_rate", self.wait_rate),
            ("local_rate", self.local_rate),
            ("notify_rate", self.notify_rate),
        ] {
            if !(k.is_finite() && k > 0.0) {
                return Err(GameError::NonPositive(name));
            }
        }
        if !(max_local_gain.is_finite() && max_local_gain >= 0.0) {
            return Err(GameError::NonPositive("max_local_gain"));
        }
        let s1 = sync_utility(self.sync_utils[0], n_sync)?;
        let s2 = sync_utility(self.sync_utils[1], n_sync)?;
        let s3 = sync_utility(self.sync_utils[2], n_sync)?;
        if !(s1 > s2 && s2 > s3) {
            return Err(GameError::UtilityOrder);
        }
        if !(self.abort_costs[0] < self.abort_costs[1]
            && self.abort_costs[1] < self.abort_costs[2])
        {
            return Err(GameError::AbortCostOrder);
        }
        let floor = s2 + self.local_rate * max_local_gain;
        if s1 <= floor {
            return Err(GameError::FeasibilityMargin { share: s1, floor });
        }
        Ok(())
    }
}

/// Per-worker share of a sync utility split across the sync group.
pub fn sync_utility(utility: f64, n_sync: u32) -> Result<f64, GameError> {
    if n_sync == 0 {
        return Err(GameError::EmptySyncGroup);
    }
    Ok(utility / n_sync as f64)
}

/// Utility lost by waiting `t` time units.
pub fn waiting_cost(params: &PayoffParameters, t: f64) -> Result<f64, GameError> {
    nonneg(t)?;
    Ok(params.wait_rate * t)
}

/// Utility gained by `t_local` time units of local work.
pub fn local_task_utility(params: &PayoffParameters, t_local: f64) -> Result<f64, GameError> {
    nonneg(t_local)?;
    Ok(params.local_rate * t_local)
}

/// Utility lost to handling a late notification for `t` time units.
pub fn notification_cost(params: &PayoffParameters, t: f64) -> Result<f64, GameError> {
    nonneg(t)?;
    Ok(params.notify_rate * t)
}

fn nonneg(t: f64) -> Result<(), GameError> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(GameError::NegativeDuration(t))
    }
}

/// Should a cluster with a `local_duration` task fill an `expected_wait`
/// with it? Only when the weighted gain strictly beats the weighted wait;
/// an exact tie keeps waiting, the safer choice for the rendezvous.
pub fn cluster_decision(
    params: &PayoffParameters,
    local_duration: f64,
    expected_wait: f64,
) -> Result<Decision, GameError> {
    let gain = local_task_utility(params, local_duration)?;
    let cost = waiting_cost(params, expected_wait)?;
    Ok(if gain > cost {
        Decision::RunLocalTask
    } else {
        Decision::WaitForSync
    })
}

/// [`cluster_decision`] for callers that may have no local task queued.
pub fn prefers_local_task(
    params: &PayoffParameters,
    expected_wait: f64,
    local_duration: Option<f64>,
) -> bool {
    local_duration.is_some_and(|l| {
        cluster_decision(params, l, expected_wait) == Ok(Decision::RunLocalTask)
    })
}

/// One concrete situation at a sync point, from the solver's point of
/// view: who is late at each pass, what local work each cluster could do
/// instead of waiting, and the expected waiting times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    /// Lateness per pass, per cluster (`passes[pass][cluster]`).
    pub passes: [[Lateness; 2]; 3],
    /// Expected duration of the local task each cluster could run while
    /// skipping a pass, if it has one queued.
    pub local_task: [Option<f64>; 2],
    /// Expected wait at the sync point, per pass per cluster, if that
    /// cluster shows up (`expected_wait[pass][cluster]`).
    pub expected_wait: [[f64; 2]; 3],
    /// Expected overhead of receiving and handling a late notification.
    pub notify_wait: f64,
    /// Workers sharing the sync utility.
    pub n_sync: u32,
}

impl Scenario {
    fn check(&self) -> Result<(), GameError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.notify_wait)
            || self.expected_wait.iter().flatten().any(|w| !ok(*w))
            || self.local_task.iter().flatten().any(|l| !ok(*l))
        {
            return Err(GameError::InvalidScenario);
        }
        if self.n_sync == 0 {
            return Err(GameError::EmptySyncGroup);
        }
        Ok(())
    }

    fn max_local_gain(&self) -> f64 {
        self.local_task
            .iter()
            .flatten()
            .fold(0.0f64, |acc, &l| acc.max(l))
    }
}

/// A full plan: one strategy per cluster per pass. Strategies after the
/// terminal pass are irrelevant but still part of the profile.
pub type Profile = [[Strategy; 2]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Both clusters synchronized at this pass (1-based).
    Synced(usize),
    /// The sync point was abandoned at this pass (1-based).
    Aborted(usize),
}

impl Outcome {
    pub fn pass(&self) -> usize {
        match *self {
            Outcome::Synced(p) | Outcome::Aborted(p) => p,
        }
    }
}

/// One root-to-leaf walk of the game tree: the joint strategies actually
/// played, the per-cluster payoffs they accumulate, and how it ended.
#[derive(Debug, Clone, PartialEq)]
pub struct GameOutcome {
    pub path: Vec<[Strategy; 2]>,
    pub payoffs: [f64; 2],
    /// Cumulative joint payoff, the solver's objective.
    pub joint: f64,
    pub terminal: Outcome,
}

/// Strategies `cluster` may play at `pass` (0-based). A late cluster can
/// only skip; an on-time cluster may sync or skip, and may skip "on
/// notification" exactly when the other cluster is late and said so.
pub fn allowed_strategies(scenario: &Scenario, pass: usize, cluster: usize) -> Vec<Strategy> {
    let own = scenario.passes[pass][cluster];
    let other = scenario.passes[pass][1 - cluster];
    match own {
        Lateness::LateNotified | Lateness::LateSilent => vec![Strategy::NoSyncLate],
        Lateness::OnTime => {
            let mut s = vec![Strategy::Sync, Strategy::NoSyncLate];
            if other == Lateness::LateNotified {
                s.push(Strategy::NoSyncLateNotification);
            }
            s
        }
    }
}

/// The payoff bookkeeping for one pass, isolated here so every caller —
/// profile evaluation, tree enumeration, tests recomputing additivity —
/// prices a node identically. Returns the per-cluster payoff increments
/// and the terminal outcome if this pass ends the game.
///
/// Pricing rules: a mutual sync pays each cluster its pass share minus
/// its waiting cost. A one-sided show-up aborts: both pay the pass abort
/// cost and the cluster that showed up also loses its wasted wait. A
/// mutual skip at the final pass abandons the sync point, costing each
/// still-on-time cluster the final abort cost. An interior mutual skip
/// costs an on-time blind skipper its idled-out wait; a notified skipper
/// instead runs its local task when the gain beats that wait (minus the
/// notification handling fee either way); a late cluster is busy with its
/// own work and neither gains nor loses.
fn pass_increment(
    scenario: &Scenario,
    params: &PayoffParameters,
    pass: usize,
    joint: [Strategy; 2],
) -> (
    [f64; 2],
    Option<Outcome>,
) {
    let mut inc = [0.0f64; 2];
    let share = params.sync_utils[pass] / scenario.n_sync as f64;
    let syncs = [joint[0] == Strategy::Sync, joint[1] == Strategy::Sync];

    if syncs[0] && syncs[1] {
        for c in 0..2 {
            inc[c] = share - params.wait_rate * scenario.expected_wait[pass][c];
        }
        return (inc, Some(Outcome::Synced(pass + 1)));
    }
    if syncs[0] || syncs[1] {
        for c in 0..2 {
            inc[c] = -params.abort_costs[pass];
            if syncs[c] {
                inc[c] -= params.wait_rate * scenario.expected_wait[pass][c];
            }
        }
        return (inc, Some(Outcome::Aborted(pass + 1)));
    }

    if pass == 2 {
        for c in 0..2 {
            if scenario.passes[pass][c] == Lateness::OnTime {
                inc[c] = -params.abort_costs[pass];
            }
        }
        return (inc, Some(Outcome::Aborted(3)));
    }

    for c in 0..2 {
        if scenario.passes[pass][c] != Lateness::OnTime {
            continue;
        }
        let wait_cost = params.wait_rate * scenario.expected_wait[pass][c];
        if joint[c] == Strategy::NoSyncLateNotification {
            let local_gain = scenario.local_task[c].map(|l| params.local_rate * l);
            inc[c] = match local_gain {
                Some(g) if g > wait_cost => g,
                _ => -wait_cost,
            };
            inc[c] -= params.notify_rate * scenario.notify_wait;
        } else {
            inc[c] = -wait_cost;
        }
    }
    (inc, None)
}

/// Walks the profile pass by pass and accumulates payoffs until it hits a
/// terminal outcome; errors if any prescribed strategy is not allowed in
/// the scenario.
pub fn evaluate_profile(
    scenario: &Scenario,
    params: &PayoffParameters,
    profile: &Profile,
) -> Result<GameOutcome, GameError> {
    scenario.check()?;
    let mut payoffs = [0.0f64; 2];
    let mut path = Vec::new();
    for pass in 0..3 {
        for cluster in 0..2 {
            if !allowed_strategies(scenario, pass, cluster).contains(&profile[pass][cluster]) {
                return Err(GameError::DisallowedStrategy {
                    pass: pass + 1,
                    cluster,
                    strategy: profile[pass][cluster],
                });
            }
        }
        let (inc, terminal) = pass_increment(scenario, params, pass, profile[pass]);
        payoffs[0] += inc[0];
        payoffs[1] += inc[1];
        path.push(profile[pass]);
        if let Some(terminal) = terminal {
            return Ok(GameOutcome {
                path,
                payoffs,
                joint: payoffs[0] + payoffs[1],
                terminal,
            });
        }
    }
    unreachable!("pass 3 always terminates");
}

/// Exhaustively enumerates every root-to-leaf path of the game tree, in a
/// fixed order (cluster 1's strategy varying slowest at each pass). The
/// parameters are validated against the scenario's sync-group size and
/// best local gain first, so outcomes are only produced for games whose
/// orderings actually hold.
pub fn enumerate_game(
    scenario: &Scenario,
    params: &PayoffParameters,
) -> Result<Vec<GameOutcome>, GameError> {
    scenario.check()?;
    params.validate(scenario.n_sync, scenario.max_local_gain())?;
    let mut out = Vec::new();
    let mut path = Vec::new();
    walk(scenario, params, 0, [0.0; 2], &mut path, &mut out);
    Ok(out)
}

fn walk(
    scenario: &Scenario,
    params: &PayoffParameters,
    pass: usize,
    payoffs: [f64; 2],
    path: &mut Vec<[Strategy; 2]>,
    out: &mut Vec<GameOutcome>,
) {
    for &a in &allowed_strategies(scenario, pass, 0) {
        for &b in &allowed_strategies(scenario, pass, 1) {
            let (inc, terminal) = pass_increment(scenario, params, pass, [a, b]);
            let next = [payoffs[0] + inc[0], payoffs[1] + inc[1]];
            path.push([a, b]);
            match terminal {
                Some(terminal) => out.push(GameOutcome {
                    path: path.clone(),
                    payoffs: next,
                    joint: next[0] + next[1],
                    terminal,
                }),
                None => walk(scenario, params, pass + 1, next, path, out),
            }
            path.pop();
        }
    }
}

/// The outcome with the best cumulative joint payoff. Ties prefer the
/// earlier terminal pass, then a sync over an abort, then enumeration
/// order, so the answer is deterministic.
pub fn optimal_profile(
    scenario: &Scenario,
    params: &PayoffParameters,
) -> Result<GameOutcome, GameError> {
    let mut best: Option<GameOutcome> = None;
    for outcome in enumerate_game(scenario, params)? {
        let better = match &best {
            None => true,
            Some(cur) => {
                let key = |o: &GameOutcome| {
                    let synced = matches!(o.terminal, Outcome::Synced(_)) as u8;
                    (o.joint, std::cmp::Reverse(o.terminal.pass()), synced)
                };
                key(&outcome)
                    .partial_cmp(&key(cur))
                    .is_some_and(|o| o == std::cmp::Ordering::Greater)
            }
        };
        if better {
            best = Some(outcome);
        }
    }
    Ok(best.expect("the game tree always has at least one leaf"))
}
