//! Agent records, status machines, and the stop/trip/schedule composition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::network::{Itinerary, NodeId};

/// Global agent identifier, unique across passengers and drivers.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassengerStatus {
    NotMatched,
    MatchedWaitingForPickup,
    OnBoard,
    DroppedOff,
    Quit,
}

impl PassengerStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, PassengerStatus::DroppedOff | PassengerStatus::Quit)
    }
}

/// Events that drive the passenger status machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassengerEvent {
    MatchFinalized,
    DriverCanceled,
    PickedUp,
    DroppedOff,
    QuitService,
}

/// Legal passenger transitions; anything else is a simulation bug.
pub fn passenger_transition(
    status: PassengerStatus,
    event: PassengerEvent,
) -> Result<PassengerStatus, TransitionError> {
    use PassengerEvent as E;
    use PassengerStatus as S;
    let next = match (status, event) {
        (S::NotMatched, E::MatchFinalized) => S::MatchedWaitingForPickup,
        (S::NotMatched, E::QuitService) => S::Quit,
        (S::MatchedWaitingForPickup, E::PickedUp) => S::OnBoard,
        (S::MatchedWaitingForPickup, E::DriverCanceled) => S::NotMatched,
        (S::MatchedWaitingForPickup, E::QuitService) => S::Quit,
        (S::OnBoard, E::DroppedOff) => S::DroppedOff,
        _ => return Err(TransitionError { status, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionError {
    pub status: PassengerStatus,
    pub event: PassengerEvent,
}

impl fmt::Display for TransitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "illegal passenger transition {:?} + {:?}", self.status, self.event)
    }
}

impl std::error::Error for TransitionError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverStatus {
    Traveling,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverType {
    DriveAlone,
    Ridesharing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Origin,
    Destination,
    Pickup,
    DropOff,
}

impl StopKind {
    fn rank(self) -> u8 {
        match self {
            StopKind::Origin => 0,
            StopKind::Pickup => 1,
            StopKind::DropOff => 2,
            StopKind::Destination => 3,
        }
    }
}

/// A service location with its time window and seat effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub node: NodeId,
    pub kind: StopKind,
    pub agent: AgentId,
    pub earliest: f64,
    pub latest: f64,
    /// Positive for pickups, negative for drop-offs.
    pub seat_delta: i32,
}

impl Stop {
    /// Deterministic ordering key used for tie-breaking.
    pub fn order_key(&self) -> (u32, u8, u32) {
        (self.agent.0, self.kind.rank(), self.node.0)
    }
}

/// One leg of a driver's schedule: the stop being headed to plus its
/// scheduled itinerary and, once assigned to a driver, the actual one.
#[derive(Debug, Clone)]
pub struct Trip {
    pub target: Stop,
    pub scheduled: Itinerary,
    pub actual: Option<Itinerary>,
}

/// Ordered stop sequence with times, legs, and the cost/earning breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Where the schedule starts (driver position when it was built).
    pub anchor_node: NodeId,
    pub anchor_time: f64,
    pub stops: Vec<Stop>,
    /// Service time per stop: max(leg arrival, stop earliest).
    pub times: Vec<f64>,
    /// Leg itineraries; legs[i] ends at stops[i].
    pub legs: Vec<Itinerary>,
    pub vkt: f64,
    pub payments: BTreeMap<AgentId, f64>,
    pub earning: f64,
    pub operational_cost: f64,
}

impl Schedule {
    /// Trivial schedule for a driver with no remaining stops.
    pub fn empty(anchor_node: NodeId, anchor_time: f64) -> Schedule {
        Schedule {
            anchor_node,
            anchor_time,
            stops: Vec::new(),
            times: Vec::new(),
            legs: Vec::new(),
            vkt: 0.0,
            payments: BTreeMap::new(),
            earning: 0.0,
            operational_cost: 0.0,
        }
    }

    pub fn final_arrival(&self) -> f64 {
        self.times.last().copied().unwrap_or(self.anchor_time)
    }

    /// Distinct passengers with a pickup or drop-off on this schedule.
    pub fn passenger_ids(&self) -> BTreeSet<AgentId> {
        self.stops
            .iter()
            .filter(|s| matches!(s.kind, StopKind::Pickup | StopKind::DropOff))
            .map(|s| s.agent)
            .collect()
    }

    /// Scheduled service time of a stop matching `kind` for `agent`.
    pub fn stop_time(&self, agent: AgentId, kind: StopKind) -> Option<f64> {
        self.stops
            .iter()
            .position(|s| s.agent == agent && s.kind == kind)
            .map(|i| self.times[i])
    }
}

/// Per-passenger feasibility inputs for checking a schedule.
#[derive(Debug, Clone, Copy)]
pub struct RideConstraint {
    /// Max pickup-to-drop-off duration: shortest-path time + max excess.
    pub max_ride_min: f64,
    pub seats: u32,
}

/// Driver-side feasibility inputs.
#[derive(Debug, Clone, Copy)]
pub struct DriverConstraint {
    pub capacity: u32,
    /// Seats already occupied at the schedule anchor.
    pub initial_occupancy: u32,
    /// min(latest arrival, departure + max driving time).
    pub effective_latest_arrival: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Precedence { stop: usize },
    Capacity { stop: usize },
    Window { stop: usize },
    RideTime { agent: AgentId },
    DriverArrival,
    TimeOrder { stop: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Precedence { stop } => write!(f, "precedence at stop {stop}"),
            Violation::Capacity { stop } => write!(f, "capacity at stop {stop}"),
            Violation::Window { stop } => write!(f, "time window at stop {stop}"),
            Violation::RideTime { agent } => write!(f, "ride time for agent {agent}"),
            Violation::DriverArrival => write!(f, "driver latest arrival"),
            Violation::TimeOrder { stop } => write!(f, "nonmonotone time at stop {stop}"),
        }
    }
}

/// Check every schedule invariant; returns the first violation found.
///
/// `rides` maps passengers that appear as pickup+drop-off pairs on the
/// schedule; passengers with only a drop-off are treated as on board from
/// the start (their ride cap is encoded in the stop's `latest`).
pub fn schedule_feasible(
    schedule: &Schedule,
    driver: &DriverConstraint,
    rides: &BTreeMap<AgentId, RideConstraint>,
) -> Result<(), Violation> {
    let mut occupancy = driver.initial_occupancy as i64;
    let mut picked: BTreeMap<AgentId, f64> = BTreeMap::new();
    let mut done: BTreeSet<AgentId> = BTreeSet::new();
    let mut prev_time = schedule.anchor_time;

    for (i, stop) in schedule.stops.iter().enumerate() {
        let t = schedule.times[i];
        if t < prev_time - 1e-9 {
            return Err(Violation::TimeOrder { stop: i });
        }
        prev_time = t;
        if t < stop.earliest - 1e-9 || t > stop.latest + 1e-9 {
            return Err(Violation::Window { stop: i });
        }
        match stop.kind {
            StopKind::Pickup => {
                if picked.contains_key(&stop.agent) || done.contains(&stop.agent) {
                    return Err(Violation::Precedence { stop: i });
                }
                picked.insert(stop.agent, t);
            }
            StopKind::DropOff => {
                if let Some(&pick_t) = picked.get(&stop.agent) {
                    if let Some(rc) = rides.get(&stop.agent) {
                        if t - pick_t > rc.max_ride_min + 1e-9 {
                            return Err(Violation::RideTime { agent: stop.agent });
                        }
                    }
                    picked.remove(&stop.agent);
                    done.insert(stop.agent);
                } else if done.contains(&stop.agent) {
                    return Err(Violation::Precedence { stop: i });
                } else {
                    // On board since before the anchor; window encodes the cap.
                    done.insert(stop.agent);
                }
            }
            StopKind::Origin | StopKind::Destination => {}
        }
        occupancy += stop.seat_delta as i64;
        if occupancy < 0 || occupancy > driver.capacity as i64 {
            return Err(Violation::Capacity { stop: i });
        }
    }

    if !picked.is_empty() {
        // A pickup without its drop-off.
        return Err(Violation::Precedence { stop: schedule.stops.len() });
    }
    if schedule.final_arrival() > driver.effective_latest_arrival + 1e-9 {
        return Err(Violation::DriverArrival);
    }
    Ok(())
}

/// Option presented to agents: a driver, the passengers it would add, the
/// full schedule, and the quantities each agent sees.
#[derive(Debug, Clone)]
pub struct MatchingOption {
    pub driver: AgentId,
    pub added_passengers: Vec<AgentId>,
    pub schedule: Schedule,
    pub option_id: u64,
    pub round: u32,
}

/// Passenger agent record.
#[derive(Debug, Clone)]
pub struct Passenger {
    pub id: AgentId,
    pub status: PassengerStatus,
    pub origin: NodeId,
    pub destination: NodeId,
    /// Desired departure time; earliest pickup.
    pub depart_time: f64,
    pub seats: u32,
    /// Utility per minute; negative.
    pub beta_time: f64,
    /// Utility per cost unit; negative.
    pub beta_cost: f64,
    /// Perceived travel-alone unit cost, cost per minute.
    pub alone_unit_cost: f64,
    /// Expected ridesharing payment as a multiplier on the alone cost.
    pub beta_exp_pay: f64,
    pub max_excess_min: f64,
    /// Max wait for any matching option before the first quit decision.
    pub max_matching_wait_min: f64,
    /// Derived max pickup waiting time.
    pub max_pickup_wait_min: f64,
    /// Time of the first ridesharing request (online time).
    pub first_request_time: f64,
    /// Shortest-path duration and distance at the desired departure.
    pub sp_time_min: f64,
    pub sp_distance_km: f64,
    pub coupon: f64,
    pub online: bool,
    pub matched_driver: Option<AgentId>,
    /// Time the latest finalized matching was announced.
    pub notified_time: Option<f64>,
    pub pickup_time: Option<f64>,
    pub dropoff_time: Option<f64>,
    /// Set when a quit decision silently failed to cancel.
    pub will_no_show: bool,
    /// Whether any matching was ever finalized for this passenger.
    pub ever_matched: bool,
    pub warmup: bool,
    /// Counter for the agent's decision RNG stream.
    pub draw_counter: u64,
}

/// Driver agent record.
#[derive(Debug, Clone)]
pub struct Driver {
    pub id: AgentId,
    pub driver_type: DriverType,
    pub status: DriverStatus,
    pub online: bool,
    pub origin: NodeId,
    pub destination: NodeId,
    pub depart_time: f64,
    pub capacity: u32,
    pub occupied_seats: u32,
    pub max_total_passengers: u32,
    pub effective_latest_arrival: f64,
    pub beta_time: f64,
    pub beta_cost: f64,
    pub operating_cost_per_km: f64,
    pub speed_factor: f64,
    pub sp_time_min: f64,
    pub sp_distance_km: f64,
    pub schedule: Schedule,
    /// Bumped on every schedule modification; stale trip events are ignored.
    pub schedule_version: u64,
    /// Current leg toward schedule.stops[0] (or the destination).
    pub trip: Option<Trip>,
    /// Matched, not yet picked up.
    pub assigned: BTreeSet<AgentId>,
    /// Picked up, not yet dropped off.
    pub onboard: BTreeSet<AgentId>,
    pub delivered: BTreeSet<AgentId>,
    /// Distinct passengers ever finalized to this driver.
    pub ever_assigned: BTreeSet<AgentId>,
    pub distance_driven_km: f64,
    pub finished_time: Option<f64>,
    pub warmup: bool,
    pub draw_counter: u64,
}

impl Driver {
    pub fn is_active(&self) -> bool {
        self.status == DriverStatus::Traveling
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ItineraryKind;

    #[test]
    fn status_machine_follows_the_status_list() {
        assert_eq!(
            passenger_transition(PassengerStatus::NotMatched, PassengerEvent::MatchFinalized)
                .unwrap(),
            PassengerStatus::MatchedWaitingForPickup
        );
        assert_eq!(
            passenger_transition(PassengerStatus::OnBoard, PassengerEvent::DroppedOff).unwrap(),
            PassengerStatus::DroppedOff
        );
        assert_eq!(
            passenger_transition(
                PassengerStatus::MatchedWaitingForPickup,
                PassengerEvent::DriverCanceled
            )
            .unwrap(),
            PassengerStatus::NotMatched
        );
    }

    #[test]
    fn picked_up_passengers_cannot_quit() {
        let err =
            passenger_transition(PassengerStatus::OnBoard, PassengerEvent::QuitService)
                .unwrap_err();
        assert_eq!(err.status, PassengerStatus::OnBoard);
    }

    #[test]
    fn terminal_states_are_absorbing() {
        for s in [PassengerStatus::DroppedOff, PassengerStatus::Quit] {
            for e in [
                PassengerEvent::MatchFinalized,
                PassengerEvent::DriverCanceled,
                PassengerEvent::PickedUp,
                PassengerEvent::DroppedOff,
                PassengerEvent::QuitService,
            ] {
                assert!(passenger_transition(s, e).is_err());
            }
        }
    }

    fn leg(from: u32, to: u32, t0: f64, t1: f64, km: f64) -> Itinerary {
        Itinerary {
            nodes: vec![(NodeId(from), t0), (NodeId(to), t1)],
            distance_km: km,
            kind: ItineraryKind::Scheduled,
        }
    }

    fn stop(node: u32, kind: StopKind, agent: u32, seats: i32) -> Stop {
        Stop {
            node: NodeId(node),
            kind,
            agent: AgentId(agent),
            earliest: 0.0,
            latest: f64::INFINITY,
            seat_delta: seats,
        }
    }

    #[test]
    fn empty_schedule_is_feasible() {
        let sched = Schedule {
            anchor_node: NodeId(0),
            anchor_time: 0.0,
            stops: vec![stop(3, StopKind::Destination, 0, 0)],
            times: vec![3.0],
            legs: vec![leg(0, 3, 0.0, 3.0, 3.0)],
            vkt: 3.0,
            payments: BTreeMap::new(),
            earning: 0.0,
            operational_cost: 0.0,
        };
        let driver = DriverConstraint {
            capacity: 4,
            initial_occupancy: 0,
            effective_latest_arrival: 100.0,
        };
        assert!(schedule_feasible(&sched, &driver, &BTreeMap::new()).is_ok());
    }

    #[test]
    fn pickup_after_dropoff_is_precedence_violation() {
        let sched = Schedule {
            anchor_node: NodeId(0),
            anchor_time: 0.0,
            stops: vec![
                stop(1, StopKind::DropOff, 7, -1),
                stop(2, StopKind::Pickup, 7, 1),
                stop(3, StopKind::Destination, 0, 0),
            ],
            times: vec![1.0, 2.0, 3.0],
            legs: vec![
                leg(0, 1, 0.0, 1.0, 1.0),
                leg(1, 2, 1.0, 2.0, 1.0),
                leg(2, 3, 2.0, 3.0, 1.0),
            ],
            vkt: 3.0,
            payments: BTreeMap::new(),
            earning: 0.0,
            operational_cost: 0.0,
        };
        let driver = DriverConstraint {
            capacity: 4,
            initial_occupancy: 1,
            effective_latest_arrival: 100.0,
        };
        // Agent 7's drop-off consumes the on-board slot; the later pickup
        // is then out of order.
        let err = schedule_feasible(&sched, &driver, &BTreeMap::new()).unwrap_err();
        assert_eq!(err, Violation::Precedence { stop: 1 });
    }

    #[test]
    fn seat_running_sum_exceeding_capacity_is_infeasible() {
        // Two passengers of 3 seats each, capacity 4, overlapping rides:
        // occupancy after second pickup = 6 > 4.
        let sched = Schedule {
            anchor_node: NodeId(0),
            anchor_time: 0.0,
            stops: vec![
                stop(1, StopKind::Pickup, 10, 3),
                stop(2, StopKind::Pickup, 11, 3),
                stop(3, StopKind::DropOff, 10, -3),
                stop(4, StopKind::DropOff, 11, -3),
                stop(5, StopKind::Destination, 0, 0),
            ],
            times: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            legs: vec![
                leg(0, 1, 0.0, 1.0, 1.0),
                leg(1, 2, 1.0, 2.0, 1.0),
                leg(2, 3, 2.0, 3.0, 1.0),
                leg(3, 4, 3.0, 4.0, 1.0),
                leg(4, 5, 4.0, 5.0, 1.0),
            ],
            vkt: 5.0,
            payments: BTreeMap::new(),
            earning: 0.0,
            operational_cost: 0.0,
        };
        let driver = DriverConstraint {
            capacity: 4,
            initial_occupancy: 0,
            effective_latest_arrival: 100.0,
        };
        let mut rides = BTreeMap::new();
        rides.insert(AgentId(10), RideConstraint { max_ride_min: 100.0, seats: 3 });
        rides.insert(AgentId(11), RideConstraint { max_ride_min: 100.0, seats: 3 });
        let err = schedule_feasible(&sched, &driver, &rides).unwrap_err();
        assert_eq!(err, Violation::Capacity { stop: 1 });
    }
}
