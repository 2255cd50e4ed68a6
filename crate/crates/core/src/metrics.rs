//! Performance metrics, status profiles, and the conservation audit.
//!
//! Everything here is a pure function of the event log: recomputing from a
//! persisted log reproduces the report bit-exactly. Warmup agents stay in
//! the log (the trajectory includes them) but are excluded from every
//! numerator and denominator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, PassengerStatus};
use crate::log::{LogRecord, Payload, TerminationSummary};

#[derive(Debug)]
pub struct AuditError(pub String);

impl fmt::Display for AuditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "audit failed: {}", self.0)
    }
}

impl std::error::Error for AuditError {}

/// Metric values; `None` marks undefined (no agents in the denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Wall-clock runtime is never derivable from the log; populated only
    /// in console summaries, never in files.
    pub runtime_min: Option<f64>,
    pub driver_excess_time_pct: Option<f64>,
    pub passenger_excess_time_pct: Option<f64>,
    pub driver_success_rate: Option<f64>,
    pub passenger_success_rate: Option<f64>,
    pub overall_success_rate: Option<f64>,
    pub expected_pickup_wait_min: Option<f64>,
    /// Mean pickup wait over served passengers, before the success-rate
    /// weighting; reported for transparency.
    pub mean_pickup_wait_min: Option<f64>,
    pub driver_accept_rate: Option<f64>,
    pub passenger_accept_rate: Option<f64>,
    pub expected_matching_success_rate: Option<f64>,
    pub actual_matching_success_rate: Option<f64>,
    pub matching_execution_rate: Option<f64>,
    pub vkt_saving_pct: Option<f64>,
    pub counts: Counts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub passengers_generated: u64,
    pub drivers_generated: u64,
    pub passengers_served: u64,
    pub passengers_quit: u64,
    pub passengers_left_before_matching: u64,
    pub drivers_finished: u64,
    pub drivers_with_delivery: u64,
    pub matching_rounds: u64,
    pub no_shows: u64,
}

impl MetricsReport {
    /// Stable (name, value) listing used by CSV outputs.
    pub fn named_values(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("runtime_min", self.runtime_min),
            ("driver_excess_time_pct", self.driver_excess_time_pct),
            ("passenger_excess_time_pct", self.passenger_excess_time_pct),
            ("driver_success_rate", self.driver_success_rate),
            ("passenger_success_rate", self.passenger_success_rate),
            ("overall_success_rate", self.overall_success_rate),
            ("expected_pickup_wait_min", self.expected_pickup_wait_min),
            ("mean_pickup_wait_min", self.mean_pickup_wait_min),
            ("driver_accept_rate", self.driver_accept_rate),
            ("passenger_accept_rate", self.passenger_accept_rate),
            ("expected_matching_success_rate", self.expected_matching_success_rate),
            ("actual_matching_success_rate", self.actual_matching_success_rate),
            ("matching_execution_rate", self.matching_execution_rate),
            ("vkt_saving_pct", self.vkt_saving_pct),
            (
                "passengers_left_before_matching",
                Some(self.counts.passengers_left_before_matching as f64),
            ),
            ("no_shows", Some(self.counts.no_shows as f64)),
        ]
    }
}

#[derive(Debug, Clone, Default)]
struct PassengerTrace {
    warmup: bool,
    sp_time: f64,
    sp_distance: f64,
    responses: u64,
    accepts: u64,
    pickup_time: Option<f64>,
    dropoff_time: Option<f64>,
    notified_before_pickup: Option<f64>,
    final_status: Option<PassengerStatus>,
    quit_while_unmatched: bool,
}

#[derive(Debug, Clone, Default)]
struct DriverTrace {
    warmup: bool,
    ridesharing: bool,
    depart_time: f64,
    speed_factor: f64,
    sp_time: f64,
    sp_distance: f64,
    responses: u64,
    accepts: u64,
    assigned: u64,
    delivered: u64,
    distance_driven: f64,
    arrival_time: Option<f64>,
    finished: bool,
}

struct Replay {
    passengers: BTreeMap<AgentId, PassengerTrace>,
    drivers: BTreeMap<AgentId, DriverTrace>,
    /// Per round: (non-warmup pool size, expected matched, actual matched,
    /// had_rejection, expected z, actual z).
    rounds: Vec<RoundTrace>,
    no_shows: u64,
}

#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub t: f64,
    pub round: u32,
    pub pool_drivers: u64,
    pub pool_passengers: u64,
    pub expected_matched: u64,
    pub actual_matched: u64,
    pub had_rejection: bool,
    pub expected_objective_km: f64,
    pub actual_objective_km: f64,
}

fn replay(log: &[LogRecord]) -> Result<Replay, AuditError> {
    let mut passengers: BTreeMap<AgentId, PassengerTrace> = BTreeMap::new();
    let mut drivers: BTreeMap<AgentId, DriverTrace> = BTreeMap::new();
    let mut rounds = Vec::new();
    let mut no_shows = 0;

    for rec in log {
        match &rec.payload {
            Payload::AgentGeneration { warmup, passengers: ps, drivers: ds, .. } => {
                for seed in ps {
                    passengers.insert(seed.id, PassengerTrace {
                        warmup: *warmup,
                        sp_time: seed.sp_time_min,
                        sp_distance: seed.sp_distance_km,
                        ..Default::default()
                    });
                }
                for seed in ds {
                    drivers.insert(seed.id, DriverTrace {
                        warmup: *warmup,
                        ridesharing: seed.ridesharing,
                        depart_time: seed.depart_time,
                        speed_factor: seed.speed_factor,
                        sp_time: seed.sp_time_min,
                        sp_distance: seed.sp_distance_km,
                        ..Default::default()
                    });
                }
            }
            Payload::RidesharingMatching {
                round,
                pool_drivers,
                pool_passengers,
                expected_matched,
                actual_matched,
                responses,
                finalized,
                expected_objective_km,
                actual_objective_km,
                ..
            } => {
                for r in responses {
                    if let Some(p) = passengers.get_mut(&r.agent) {
                        p.responses += 1;
                        p.accepts += r.accept as u64;
                    } else if let Some(d) = drivers.get_mut(&r.agent) {
                        d.responses += 1;
                        d.accepts += r.accept as u64;
                    }
                }
                for f in finalized {
                    if let Some(d) = drivers.get_mut(&f.driver) {
                        d.assigned += f.added.len() as u64;
                    }
                    for pid in &f.added {
                        if let Some(p) = passengers.get_mut(pid) {
                            p.notified_before_pickup = Some(rec.t);
                        }
                    }
                }
                let non_warmup = |ids: &Vec<AgentId>| {
                    ids.iter()
                        .filter(|id| {
                            passengers.get(id).map(|p| !p.warmup).unwrap_or(false)
                                || drivers.get(id).map(|d| !d.warmup).unwrap_or(false)
                        })
                        .count() as u64
                };
                rounds.push(RoundTrace {
                    t: rec.t,
                    round: *round,
                    pool_drivers: non_warmup(pool_drivers),
                    pool_passengers: non_warmup(pool_passengers),
                    expected_matched: non_warmup(expected_matched),
                    actual_matched: non_warmup(actual_matched),
                    had_rejection: responses.iter().any(|r| !r.accept),
                    expected_objective_km: *expected_objective_km,
                    actual_objective_km: *actual_objective_km,
                });
            }
            Payload::Pickup { passenger, no_show, .. } => {
                if *no_show {
                    no_shows += 1;
                } else if let Some(p) = passengers.get_mut(passenger) {
                    p.pickup_time = Some(rec.t);
                }
            }
            Payload::DropOff { passenger, driver, .. } => {
                if let Some(p) = passengers.get_mut(passenger) {
                    p.dropoff_time = Some(rec.t);
                }
                if let Some(d) = drivers.get_mut(driver) {
                    d.delivered += 1;
                }
            }
            Payload::AgentTermination { agent, summary } => match summary {
                TerminationSummary::Passenger { status, quit_while_unmatched, .. } => {
                    let p = passengers
                        .get_mut(agent)
                        .ok_or_else(|| AuditError(format!("unknown passenger {agent}")))?;
                    if p.final_status.is_some() {
                        return Err(AuditError(format!("double termination for {agent}")));
                    }
                    p.final_status = Some(*status);
                    p.quit_while_unmatched = *quit_while_unmatched;
                }
                TerminationSummary::Driver {
                    arrival_time,
                    distance_driven_km,
                    assigned_count,
                    delivered_count,
                    ..
                } => {
                    let d = drivers
                        .get_mut(agent)
                        .ok_or_else(|| AuditError(format!("unknown driver {agent}")))?;
                    if d.finished {
                        return Err(AuditError(format!("double termination for {agent}")));
                    }
                    d.finished = true;
                    d.arrival_time = Some(*arrival_time);
                    d.distance_driven = *distance_driven_km;
                    d.assigned = *assigned_count as u64;
                    d.delivered = *delivered_count as u64;
                }
            },
            _ => {}
        }
    }

    Ok(Replay { passengers, drivers, rounds, no_shows })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Compute the full report from an event log.
pub fn compute(log: &[LogRecord]) -> Result<MetricsReport, AuditError> {
    let replayed = replay(log)?;
    let ps: Vec<&PassengerTrace> =
        replayed.passengers.values().filter(|p| !p.warmup).collect();
    let ds: Vec<&DriverTrace> = replayed
        .drivers
        .values()
        .filter(|d| !d.warmup && d.ridesharing)
        .collect();

    // Excess travel times. Passengers: pickup-to-drop-off vs shortest path.
    // Drivers: whole trip vs their own-speed direct time, so an unmatched
    // driver scores exactly zero.
    let passenger_excess = mean(ps.iter().filter_map(|p| {
        let (pick, drop) = (p.pickup_time?, p.dropoff_time?);
        Some(((drop - pick) - p.sp_time) / p.sp_time)
    }))
    .map(|v| v * 100.0);
    let driver_excess = mean(ds.iter().filter_map(|d| {
        let arrival = d.arrival_time?;
        let direct = d.sp_time / d.speed_factor;
        Some(((arrival - d.depart_time) - direct) / direct)
    }))
    .map(|v| v * 100.0);

    let served: Vec<&&PassengerTrace> =
        ps.iter().filter(|p| p.final_status == Some(PassengerStatus::DroppedOff)).collect();
    let passenger_success = if ps.is_empty() {
        None
    } else {
        Some(served.len() as f64 / ps.len() as f64)
    };
    let winners = ds.iter().filter(|d| d.delivered > 0).count();
    let driver_success =
        if ds.is_empty() { None } else { Some(winners as f64 / ds.len() as f64) };
    let overall_success = if ps.is_empty() && ds.is_empty() {
        None
    } else {
        Some((served.len() + winners) as f64 / (ps.len() + ds.len()) as f64)
    };

    // Expected pickup wait: mean wait over served passengers, inflated by
    // the odds of being served at all, so scarce supply reads as a longer
    // expected wait.
    let mean_wait = mean(served.iter().filter_map(|p| {
        let notified = p.notified_before_pickup?;
        Some(p.pickup_time? - notified)
    }));
    let expected_wait = match (mean_wait, passenger_success) {
        (Some(w), Some(s)) if s > 0.0 => Some(w / s),
        _ => None,
    };

    let passenger_accept = mean(
        ps.iter()
            .filter(|p| p.responses > 0)
            .map(|p| p.accepts as f64 / p.responses as f64),
    );
    let driver_accept = mean(
        ds.iter()
            .filter(|d| d.responses > 0)
            .map(|d| d.accepts as f64 / d.responses as f64),
    );

    let active_rounds: Vec<&RoundTrace> = replayed
        .rounds
        .iter()
        .filter(|r| r.pool_drivers + r.pool_passengers > 0)
        .collect();
    let expected_rate = mean(active_rounds.iter().map(|r| {
        r.expected_matched as f64 / (r.pool_drivers + r.pool_passengers) as f64
    }));
    let actual_rate = mean(active_rounds.iter().map(|r| {
        r.actual_matched as f64 / (r.pool_drivers + r.pool_passengers) as f64
    }));

    let execution_rate = mean(
        ds.iter()
            .filter(|d| d.assigned > 0)
            .map(|d| d.delivered as f64 / d.assigned as f64),
    );

    // VKT saving: base case everyone drives alone; with ridesharing the
    // drivers' realized distances replace served passengers' own trips.
    let base: f64 = ds.iter().map(|d| d.sp_distance).sum::<f64>()
        + ps.iter().map(|p| p.sp_distance).sum::<f64>();
    let with_rs: f64 = ds
        .iter()
        .map(|d| if d.finished { d.distance_driven } else { d.sp_distance })
        .sum::<f64>()
        + ps.iter()
            .filter(|p| p.final_status != Some(PassengerStatus::DroppedOff))
            .map(|p| p.sp_distance)
            .sum::<f64>();
    let vkt_saving = if base > 0.0 { Some((base - with_rs) / base * 100.0) } else { None };

    let counts = Counts {
        passengers_generated: ps.len() as u64,
        drivers_generated: ds.len() as u64,
        passengers_served: served.len() as u64,
        passengers_quit: ps
            .iter()
            .filter(|p| p.final_status == Some(PassengerStatus::Quit))
            .count() as u64,
        passengers_left_before_matching: ps.iter().filter(|p| p.quit_while_unmatched).count()
            as u64,
        drivers_finished: ds.iter().filter(|d| d.finished).count() as u64,
        drivers_with_delivery: winners as u64,
        matching_rounds: replayed.rounds.len() as u64,
        no_shows: replayed.no_shows,
    };

    Ok(MetricsReport {
        runtime_min: None,
        driver_excess_time_pct: driver_excess,
        passenger_excess_time_pct: passenger_excess,
        driver_success_rate: driver_success,
        passenger_success_rate: passenger_success,
        overall_success_rate: overall_success,
        expected_pickup_wait_min: expected_wait,
        mean_pickup_wait_min: mean_wait,
        driver_accept_rate: driver_accept,
        passenger_accept_rate: passenger_accept,
        expected_matching_success_rate: expected_rate,
        actual_matching_success_rate: actual_rate,
        matching_execution_rate: execution_rate,
        vkt_saving_pct: vkt_saving,
        counts,
    })
}

/// Per-round provider trace (expected vs actual matches and objectives).
pub fn round_traces(log: &[LogRecord]) -> Result<Vec<RoundTrace>, AuditError> {
    Ok(replay(log)?.rounds)
}

/// Conservation audit: every generated agent reaches exactly one terminal
/// state and passenger statuses follow the legal transition graph.
pub fn audit(log: &[LogRecord]) -> Result<(), AuditError> {
    use crate::domain::{passenger_transition, PassengerEvent};

    let mut status: BTreeMap<AgentId, PassengerStatus> = BTreeMap::new();
    let mut driver_done: BTreeMap<AgentId, bool> = BTreeMap::new();
    let mut terminated: BTreeSet<AgentId> = BTreeSet::new();
    // Passengers whose quit failed to cancel; a later driver-side removal
    // quits them outright instead of returning them to the pool.
    let mut armed: BTreeSet<AgentId> = BTreeSet::new();

    let step = |status: &mut BTreeMap<AgentId, PassengerStatus>,
                id: AgentId,
                ev: PassengerEvent|
     -> Result<(), AuditError> {
        let cur = *status
            .get(&id)
            .ok_or_else(|| AuditError(format!("event for unknown passenger {id}")))?;
        let next = passenger_transition(cur, ev)
            .map_err(|e| AuditError(format!("illegal transition for {id}: {e}")))?;
        status.insert(id, next);
        Ok(())
    };

    for rec in log {
        match &rec.payload {
            Payload::AgentGeneration { passengers, drivers, .. } => {
                for p in passengers {
                    status.insert(p.id, PassengerStatus::NotMatched);
                }
                for d in drivers {
                    driver_done.insert(d.id, false);
                }
            }
            Payload::RidesharingMatching { finalized, .. } => {
                for f in finalized {
                    for pid in &f.added {
                        step(&mut status, *pid, PassengerEvent::MatchFinalized)?;
                    }
                }
            }
            Payload::StayLeaveDecision { agent, outcome, canceled, .. } => {
                use crate::log::DecisionOutcome as O;
                match outcome {
                    O::LeaveService if status.contains_key(agent) => {
                        step(&mut status, *agent, PassengerEvent::QuitService)?;
                    }
                    O::LeaveService => {
                        for pid in canceled {
                            if armed.contains(pid) {
                                step(&mut status, *pid, PassengerEvent::QuitService)?;
                            } else {
                                step(&mut status, *pid, PassengerEvent::DriverCanceled)?;
                            }
                        }
                    }
                    O::NoShowArmed => {
                        armed.insert(*agent);
                    }
                    _ => {}
                }
            }
            Payload::Reschedule { removed, decisions, .. } => {
                // Removed passengers transitioned inline: driver-canceled
                // ones go back to the pool, self-canceled ones quit.
                let mut self_canceled: BTreeSet<AgentId> = BTreeSet::new();
                for d in decisions {
                    if d.outcome == crate::log::DecisionOutcome::NoShowArmed {
                        armed.insert(d.agent);
                    }
                    if d.outcome == crate::log::DecisionOutcome::LeaveService
                        && status.contains_key(&d.agent)
                    {
                        self_canceled.insert(d.agent);
                    }
                }
                for pid in removed {
                    if self_canceled.contains(pid) || armed.contains(pid) {
                        step(&mut status, *pid, PassengerEvent::QuitService)?;
                    } else {
                        step(&mut status, *pid, PassengerEvent::DriverCanceled)?;
                    }
                }
            }
            Payload::Pickup { passenger, no_show, .. } => {
                if *no_show {
                    step(&mut status, *passenger, PassengerEvent::QuitService)?;
                } else {
                    step(&mut status, *passenger, PassengerEvent::PickedUp)?;
                }
            }
            Payload::DropOff { passenger, .. } => {
                step(&mut status, *passenger, PassengerEvent::DroppedOff)?;
            }
            Payload::AgentTermination { agent, summary } => {
                if terminated.contains(agent) {
                    return Err(AuditError(format!("{agent} terminated twice")));
                }
                terminated.insert(*agent);
                match summary {
                    TerminationSummary::Passenger { status: final_status, .. } => {
                        let replayed = *status.get(agent).ok_or_else(|| {
                            AuditError(format!("termination for unknown {agent}"))
                        })?;
                        if replayed != *final_status {
                            return Err(AuditError(format!(
                                "replay status {replayed:?} != terminal {final_status:?} for {agent}"
                            )));
                        }
                        if !final_status.is_terminal() {
                            return Err(AuditError(format!(
                                "{agent} terminated in nonterminal state"
                            )));
                        }
                    }
                    TerminationSummary::Driver { .. } => {
                        driver_done.insert(*agent, true);
                    }
                }
            }
            _ => {}
        }
    }

    for (id, st) in &status {
        if !st.is_terminal() {
            return Err(AuditError(format!("passenger {id} never reached a terminal state")));
        }
        if !terminated.contains(id) {
            return Err(AuditError(format!("passenger {id} missing termination event")));
        }
    }
    for (id, done) in &driver_done {
        if !done {
            return Err(AuditError(format!("driver {id} never finished")));
        }
    }
    Ok(())
}

/// Status-count time series plus per-round provider series, as
/// (time, series, value) rows.
pub fn collect_profiles(log: &[LogRecord], step_min: f64) -> Vec<(f64, String, f64)> {
    #[derive(Default, Clone)]
    struct Snapshot {
        p_waiting: i64,
        p_matched: i64,
        p_onboard: i64,
        p_finished: i64,
        p_quit: i64,
        d_waiting: i64,
        d_matched: i64,
        d_offline: i64,
        d_finished: i64,
    }

    let end = log.last().map(|r| r.t).unwrap_or(0.0);
    let steps = (end / step_min).ceil() as usize + 1;
    let mut out = Vec::new();

    // Change points per passenger/driver, replayed into step bins.
    let mut cur = Snapshot::default();
    let mut series: Vec<Snapshot> = Vec::with_capacity(steps);
    let mut t_cursor = 0.0;
    let mut idx = 0usize;

    let mut p_state: BTreeMap<AgentId, u8> = BTreeMap::new(); // 0 wait,1 matched,2 onboard
    let mut p_online: BTreeSet<AgentId> = BTreeSet::new();
    let mut d_state: BTreeMap<AgentId, u8> = BTreeMap::new(); // 0 wait,1 matched
    let mut d_online: BTreeSet<AgentId> = BTreeSet::new();
    let mut d_started: BTreeSet<AgentId> = BTreeSet::new();

    let push_until = |t: f64, cur: &Snapshot, series: &mut Vec<Snapshot>,
                      t_cursor: &mut f64, idx: &mut usize| {
        while *t_cursor + step_min <= t && *idx < steps {
            series.push(cur.clone());
            *t_cursor += step_min;
            *idx += 1;
        }
    };

    for rec in log {
        push_until(rec.t, &cur, &mut series, &mut t_cursor, &mut idx);
        match &rec.payload {
            Payload::AgentGeneration { drivers, .. } => {
                for d in drivers {
                    d_started.insert(d.id);
                }
            }
            Payload::OnlineOffline { agent, online, .. } => {
                if let Some(state) = p_state.get(agent).copied() {
                    if *online && !p_online.contains(agent) {
                        p_online.insert(*agent);
                        if state == 0 {
                            cur.p_waiting += 1;
                        }
                    } else if !*online && p_online.contains(agent) {
                        p_online.remove(agent);
                        if state == 0 {
                            cur.p_waiting -= 1;
                        }
                    }
                } else if d_started.contains(agent) {
                    let state = d_state.get(agent).copied().unwrap_or(0);
                    if *online && !d_online.contains(agent) {
                        d_online.insert(*agent);
                        if state == 0 {
                            cur.d_waiting += 1;
                        } else {
                            cur.d_matched += 1;
                        }
                        if cur.d_offline > 0 {
                            cur.d_offline -= 1;
                        }
                    } else if !*online && d_online.contains(agent) {
                        d_online.remove(agent);
                        if state == 0 {
                            cur.d_waiting -= 1;
                        } else {
                            cur.d_matched -= 1;
                        }
                        cur.d_offline += 1;
                    }
                }
            }
            _ => {}
        }
        // Track passenger/driver lifecycle through the remaining payloads.
        match &rec.payload {
            Payload::AgentGeneration { passengers, drivers, .. } => {
                for p in passengers {
                    p_state.insert(p.id, 0);
                }
                for d in drivers {
                    d_state.insert(d.id, 0);
                    cur.d_offline += 1; // starts offline, traveling
                }
            }
            Payload::RidesharingMatching { finalized, .. } => {
                for f in finalized {
                    for pid in &f.added {
                        if p_state.get(pid) == Some(&0) {
                            p_state.insert(*pid, 1);
                            if p_online.contains(pid) {
                                cur.p_waiting -= 1;
                            }
                            cur.p_matched += 1;
                        }
                    }
                    if d_state.get(&f.driver) == Some(&0) {
                        d_state.insert(f.driver, 1);
                        if d_online.contains(&f.driver) {
                            cur.d_waiting -= 1;
                            cur.d_matched += 1;
                        }
                    }
                }
            }
            Payload::Pickup { passenger, no_show, .. } => {
                if !*no_show && p_state.get(passenger) == Some(&1) {
                    p_state.insert(*passenger, 2);
                    cur.p_matched -= 1;
                    cur.p_onboard += 1;
                }
            }
            Payload::AgentTermination { agent, summary } => match summary {
                TerminationSummary::Passenger { status, .. } => {
                    match p_state.get(agent) {
                        Some(0) => {
                            if p_online.contains(agent) {
                                cur.p_waiting -= 1;
                                p_online.remove(agent);
                            }
                        }
                        Some(1) => cur.p_matched -= 1,
                        Some(2) => cur.p_onboard -= 1,
                        _ => {}
                    }
                    p_state.remove(agent);
                    if *status == PassengerStatus::DroppedOff {
                        cur.p_finished += 1;
                    } else {
                        cur.p_quit += 1;
                    }
                }
                TerminationSummary::Driver { .. } => {
                    if d_online.contains(agent) {
                        match d_state.get(agent) {
                            Some(0) => cur.d_waiting -= 1,
                            _ => cur.d_matched -= 1,
                        }
                        d_online.remove(agent);
                    } else if cur.d_offline > 0 {
                        cur.d_offline -= 1;
                    }
                    d_state.remove(agent);
                    cur.d_finished += 1;
                }
            },
            _ => {}
        }
    }
    while idx < steps {
        series.push(cur.clone());
        idx += 1;
    }

    for (i, snap) in series.iter().enumerate() {
        let t = i as f64 * step_min;
        for (name, v) in [
            ("passengers_waiting", snap.p_waiting),
            ("passengers_matched_waiting", snap.p_matched),
            ("passengers_on_board", snap.p_onboard),
            ("passengers_finished", snap.p_finished),
            ("passengers_quit", snap.p_quit),
            ("drivers_waiting", snap.d_waiting),
            ("drivers_matched", snap.d_matched),
            ("drivers_offline", snap.d_offline),
            ("drivers_finished", snap.d_finished),
        ] {
            out.push((t, name.to_string(), v as f64));
        }
    }

    if let Ok(rounds) = round_traces(log) {
        for r in rounds {
            out.push((r.t, "round_requested".into(), (r.pool_drivers + r.pool_passengers) as f64));
            out.push((r.t, "round_expected_matched".into(), r.expected_matched as f64));
            out.push((r.t, "round_actual_matched".into(), r.actual_matched as f64));
            out.push((r.t, "round_expected_objective_km".into(), r.expected_objective_km));
            out.push((r.t, "round_actual_objective_km".into(), r.actual_objective_km));
        }
    }
    out
}

/// Aggregate of replication reports: mean and sample standard deviation
/// per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub replications: usize,
    pub metrics: BTreeMap<String, MetricStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: Option<f64>,
    pub stdev: Option<f64>,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let mut metrics = BTreeMap::new();
    if reports.is_empty() {
        return AggregateReport { replications: 0, metrics };
    }
    let names: Vec<&'static str> =
        reports[0].named_values().iter().map(|(n, _)| *n).collect();
    for name in names {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| {
                r.named_values()
                    .iter()
                    .find(|(n, _)| *n == name)
                    .and_then(|(_, v)| *v)
            })
            .collect();
        let stat = if values.is_empty() {
            MetricStat { mean: None, stdev: None }
        } else {
            let m = values.iter().sum::<f64>() / values.len() as f64;
            let sd = if values.len() > 1 {
                let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>()
                    / (values.len() - 1) as f64;
                var.sqrt()
            } else {
                0.0
            };
            MetricStat { mean: Some(m), stdev: Some(sd) }
        };
        metrics.insert(name.to_string(), stat);
    }
    AggregateReport { replications: reports.len(), metrics }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::{DriverSeed, PassengerSeed, ResponseRecord};
    use crate::network::NodeId;

    fn generation(ps: Vec<PassengerSeed>, ds: Vec<DriverSeed>) -> LogRecord {
        LogRecord {
            t: 0.0,
            seq: 0,
            agents: vec![],
            payload: Payload::AgentGeneration {
                period: 1,
                warmup: false,
                passengers: ps,
                drivers: ds,
                discarded: vec![],
            },
        }
    }

    fn pseed(id: u32, sp_time: f64, sp_dist: f64) -> PassengerSeed {
        PassengerSeed {
            id: AgentId(id),
            origin: NodeId(0),
            destination: NodeId(1),
            depart_time: 0.0,
            online_time: 0.0,
            sp_time_min: sp_time,
            sp_distance_km: sp_dist,
            seats: 1,
        }
    }

    fn dseed(id: u32, sp_time: f64, sp_dist: f64) -> DriverSeed {
        DriverSeed {
            id: AgentId(id),
            origin: NodeId(0),
            destination: NodeId(1),
            depart_time: 0.0,
            online_time: 0.0,
            sp_time_min: sp_time,
            sp_distance_km: sp_dist,
            speed_factor: 1.0,
            capacity: 4,
            ridesharing: true,
        }
    }

    fn terminate_passenger(t: f64, seq: u64, id: u32, served: bool) -> LogRecord {
        LogRecord {
            t,
            seq,
            agents: vec![AgentId(id)],
            payload: Payload::AgentTermination {
                agent: AgentId(id),
                summary: TerminationSummary::Passenger {
                    status: if served {
                        PassengerStatus::DroppedOff
                    } else {
                        PassengerStatus::Quit
                    },
                    pickup_time: served.then_some(5.0),
                    dropoff_time: served.then_some(17.0),
                    notified_time: served.then_some(2.0),
                    quit_while_unmatched: !served,
                },
            },
        }
    }

    fn terminate_driver(t: f64, seq: u64, id: u32, km: f64, delivered: u32) -> LogRecord {
        LogRecord {
            t,
            seq,
            agents: vec![AgentId(id)],
            payload: Payload::AgentTermination {
                agent: AgentId(id),
                summary: TerminationSummary::Driver {
                    status: crate::domain::DriverStatus::Finished,
                    arrival_time: t,
                    distance_driven_km: km,
                    assigned_count: delivered,
                    delivered_count: delivered,
                },
            },
        }
    }

    #[test]
    fn single_passenger_excess_time() {
        // SP 10 min, RS ride 12 min -> 20% excess.
        let mut log = vec![generation(vec![pseed(1, 10.0, 4.0)], vec![dseed(0, 10.0, 10.0)])];
        log.push(LogRecord {
            t: 2.0,
            seq: 1,
            agents: vec![],
            payload: Payload::RidesharingMatching {
                round: 1,
                pool_drivers: vec![AgentId(0)],
                pool_passengers: vec![AgentId(1)],
                auto_offline: vec![],
                combination_count: 3,
                expected_matched: vec![AgentId(0), AgentId(1)],
                expected_objective_km: 12.0,
                responses: vec![ResponseRecord {
                    agent: AgentId(0),
                    option_driver: AgentId(0),
                    prior: true,
                    accept: true,
                }],
                finalized: vec![crate::log::FinalizedRecord {
                    driver: AgentId(0),
                    added: vec![AgentId(1)],
                    vkt_km: 12.0,
                }],
                actual_matched: vec![AgentId(0), AgentId(1)],
                actual_objective_km: 12.0,
            },
        });
        log.push(LogRecord {
            t: 5.0,
            seq: 2,
            agents: vec![AgentId(0), AgentId(1)],
            payload: Payload::Pickup {
                driver: AgentId(0),
                passenger: AgentId(1),
                no_show: false,
            },
        });
        log.push(LogRecord {
            t: 17.0,
            seq: 3,
            agents: vec![AgentId(0), AgentId(1)],
            payload: Payload::DropOff {
                driver: AgentId(0),
                passenger: AgentId(1),
                payment: 14.4,
                ride_min: 12.0,
            },
        });
        log.push(terminate_passenger(17.0, 4, 1, true));
        log.push(terminate_driver(20.0, 5, 0, 12.0, 1));
        let report = compute(&log).unwrap();
        assert!((report.passenger_excess_time_pct.unwrap() - 20.0).abs() < 1e-9);
        // VKT: base 10 + 4 = 14, with RS 12 -> saving 2/14.
        assert!((report.vkt_saving_pct.unwrap() - 100.0 * 2.0 / 14.0).abs() < 1e-9);
        assert_eq!(report.passenger_success_rate, Some(1.0));
        audit(&log).unwrap();
    }

    #[test]
    fn zero_served_reports_undefined_markers() {
        let log = vec![
            generation(vec![], vec![]),
        ];
        let report = compute(&log).unwrap();
        assert_eq!(report.passenger_excess_time_pct, None);
        assert_eq!(report.vkt_saving_pct, None);
        assert_eq!(report.expected_pickup_wait_min, None);
    }

    #[test]
    fn nobody_matched_means_zero_saving() {
        let mut log = vec![generation(
            vec![pseed(1, 10.0, 4.0)],
            vec![dseed(0, 10.0, 10.0)],
        )];
        log.push(LogRecord {
            t: 3.0,
            seq: 1,
            agents: vec![AgentId(1)],
            payload: Payload::StayLeaveDecision {
                agent: AgentId(1),
                context: crate::log::DecisionContext::UnmatchedPassenger,
                outcome: crate::log::DecisionOutcome::LeaveService,
                canceled: vec![],
            },
        });
        log.push(terminate_passenger(3.0, 2, 1, false));
        log.push(terminate_driver(10.0, 3, 0, 10.0, 0));
        let report = compute(&log).unwrap();
        assert_eq!(report.vkt_saving_pct, Some(0.0));
        assert_eq!(report.counts.passengers_left_before_matching, 1);
        audit(&log).unwrap();
    }

    #[test]
    fn accept_and_execution_rates_follow_their_ratios() {
        let mut log = vec![generation(vec![], vec![dseed(0, 10.0, 10.0)])];
        // Five driver responses, three accepts.
        let mut responses = Vec::new();
        for (i, accept) in [true, true, false, false, true].iter().enumerate() {
            responses.push(ResponseRecord {
                agent: AgentId(0),
                option_driver: AgentId(0),
                prior: true,
                accept: *accept,
            });
            let _ = i;
        }
        log.push(LogRecord {
            t: 2.0,
            seq: 1,
            agents: vec![],
            payload: Payload::RidesharingMatching {
                round: 1,
                pool_drivers: vec![AgentId(0)],
                pool_passengers: vec![],
                auto_offline: vec![],
                combination_count: 1,
                expected_matched: vec![],
                expected_objective_km: 10.0,
                responses,
                finalized: vec![],
                actual_matched: vec![],
                actual_objective_km: 10.0,
            },
        });
        // Driver delivered 2 of 3 assigned.
        log.push(LogRecord {
            t: 30.0,
            seq: 2,
            agents: vec![AgentId(0)],
            payload: Payload::AgentTermination {
                agent: AgentId(0),
                summary: TerminationSummary::Driver {
                    status: crate::domain::DriverStatus::Finished,
                    arrival_time: 30.0,
                    distance_driven_km: 12.0,
                    assigned_count: 3,
                    delivered_count: 2,
                },
            },
        });
        let report = compute(&log).unwrap();
        assert!((report.driver_accept_rate.unwrap() - 0.6).abs() < 1e-12);
        assert!((report.matching_execution_rate.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn round_with_nobody_matched_counts_as_zero() {
        let log = vec![
            generation(vec![pseed(1, 10.0, 4.0)], vec![dseed(0, 10.0, 10.0)]),
            LogRecord {
                t: 2.0,
                seq: 1,
                agents: vec![],
                payload: Payload::RidesharingMatching {
                    round: 1,
                    pool_drivers: vec![AgentId(0)],
                    pool_passengers: vec![AgentId(1)],
                    auto_offline: vec![],
                    combination_count: 2,
                    expected_matched: vec![],
                    expected_objective_km: 14.0,
                    responses: vec![],
                    finalized: vec![],
                    actual_matched: vec![],
                    actual_objective_km: 14.0,
                },
            },
        ];
        let traces = round_traces(&log).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].expected_matched, 0);
        assert_eq!(traces[0].actual_matched, 0);
    }

    #[test]
    fn profiles_conserve_passengers() {
        let log = vec![
            generation(vec![pseed(1, 10.0, 4.0), pseed(2, 8.0, 3.0)], vec![]),
            LogRecord {
                t: 1.0,
                seq: 1,
                agents: vec![AgentId(1)],
                payload: Payload::OnlineOffline {
                    agent: AgentId(1),
                    online: true,
                    noop: false,
                },
            },
            terminate_passenger(4.0, 2, 1, false),
            terminate_passenger(6.0, 3, 2, false),
        ];
        let rows = collect_profiles(&log, 1.0);
        // Final step: everything quit.
        let last_t = rows.iter().map(|r| r.0).fold(0.0, f64::max);
        let quit: f64 = rows
            .iter()
            .filter(|r| r.0 == last_t && r.1 == "passengers_quit")
            .map(|r| r.2)
            .sum();
        assert_eq!(quit, 2.0);
    }

    #[test]
    fn aggregate_mean_and_stdev() {
        let mut a = compute(&[generation(vec![], vec![])]).unwrap();
        let mut b = a.clone();
        a.vkt_saving_pct = Some(4.0);
        b.vkt_saving_pct = Some(8.0);
        let agg = aggregate(&[a, b]);
        let stat = &agg.metrics["vkt_saving_pct"];
        assert_eq!(stat.mean, Some(6.0));
        // Sample stdev of {4, 8} is sqrt(8).
        assert!((stat.stdev.unwrap() - 8.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.replications, 2);
    }
}
