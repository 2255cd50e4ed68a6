//! Dial-a-ride schedule construction for a single driver.
//!
//! `best_schedule` runs an exhaustive depth-first search over stop
//! interleavings with feasibility pruning and a VKT bound. Per-driver
//! passenger counts are small (capacity-bounded), so exact search is
//! tractable; ties break to the lexicographically smallest stop order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::domain::{
    schedule_feasible, AgentId, DriverConstraint, RideConstraint, Schedule, Stop, StopKind,
};
use crate::network::{Itinerary, Network, NodeId};

/// Driver state a schedule is built from.
#[derive(Debug, Clone)]
pub struct DriverSnapshot {
    pub driver: AgentId,
    /// Projected position and the time the driver is available there.
    pub position: NodeId,
    pub available_at: f64,
    pub destination: NodeId,
    pub capacity: u32,
    /// Seats occupied by on-board passengers at the position.
    pub occupancy: u32,
    pub effective_latest_arrival: f64,
}

/// A passenger to insert (or retain): pickup and drop-off plus ride cap.
#[derive(Debug, Clone)]
pub struct CandidatePair {
    pub passenger: AgentId,
    pub pickup: Stop,
    pub dropoff: Stop,
    /// Max pickup-to-drop-off duration.
    pub max_ride_min: f64,
}

/// Inputs to `best_schedule`: fixed drop-offs of on-board passengers and
/// candidate pickup/drop-off pairs.
#[derive(Debug, Clone)]
pub struct ScheduleRequest {
    pub snapshot: DriverSnapshot,
    pub fixed_dropoffs: Vec<Stop>,
    pub candidates: Vec<CandidatePair>,
}

#[derive(Debug, Clone)]
pub struct Infeasible {
    /// Constraint that bound the deepest partial sequence explored.
    pub binding: String,
}

impl fmt::Display for Infeasible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no feasible schedule ({})", self.binding)
    }
}

/// Internal search item: a stop plus bookkeeping.
#[derive(Clone)]
struct Item {
    stop: Stop,
    /// Candidate index for pickups/drop-offs of candidate pairs.
    pair: Option<usize>,
}

struct Search<'a> {
    net: &'a Network,
    req: &'a ScheduleRequest,
    items: Vec<Item>,
    best_vkt: f64,
    best_order: Option<Vec<usize>>,
    deepest: usize,
    deepest_binding: String,
    leg_memo: HashMap<(u32, u32, u64), Itinerary>,
}

impl<'a> Search<'a> {
    fn leg(&mut self, from: NodeId, to: NodeId, depart: f64) -> Option<Itinerary> {
        let key = (from.0, to.0, depart.to_bits());
        if let Some(it) = self.leg_memo.get(&key) {
            return Some(it.clone());
        }
        let it = self.net.shortest_itinerary(from, to, depart).ok()?;
        self.leg_memo.insert(key, it.clone());
        Some(it)
    }

    fn note_binding(&mut self, depth: usize, what: &str) {
        if depth >= self.deepest {
            self.deepest = depth;
            self.deepest_binding = what.to_string();
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        &mut self,
        order: &mut Vec<usize>,
        used: &mut Vec<bool>,
        node: NodeId,
        time: f64,
        occupancy: i64,
        vkt: f64,
        picked_at: &mut BTreeMap<usize, f64>,
    ) {
        let snapshot = &self.req.snapshot;
        if vkt >= self.best_vkt {
            return; // bound: legs only add distance
        }
        if order.len() == self.items.len() {
            // Close with the leg to the driver destination.
            let Some(leg) = self.leg(node, snapshot.destination, time) else {
                self.note_binding(order.len(), "destination unreachable");
                return;
            };
            let arrival = leg.end_time();
            let total = vkt + leg.distance_km;
            if arrival > snapshot.effective_latest_arrival + 1e-9 {
                self.note_binding(order.len(), "driver latest arrival");
                return;
            }
            if total < self.best_vkt {
                self.best_vkt = total;
                self.best_order = Some(order.clone());
            }
            return;
        }

        // Children in deterministic stop order; first optimum found is the
        // lexicographically smallest.
        let mut child_idx: Vec<usize> = (0..self.items.len()).filter(|&i| !used[i]).collect();
        child_idx.sort_by_key(|&i| self.items[i].stop.order_key());

        for i in child_idx {
            let item = self.items[i].clone();
            let stop = &item.stop;
            // Precedence: candidate drop-off needs its pickup first.
            if stop.kind == StopKind::DropOff {
                if let Some(p) = item.pair {
                    if !picked_at.contains_key(&p) {
                        continue;
                    }
                }
            }
            let occ = occupancy + stop.seat_delta as i64;
            if occ > snapshot.capacity as i64 || occ < 0 {
                self.note_binding(order.len() + 1, "capacity");
                continue;
            }
            let Some(leg) = self.leg(node, stop.node, time) else {
                self.note_binding(order.len() + 1, "stop unreachable");
                continue;
            };
            let service = leg.end_time().max(stop.earliest);
            if service > stop.latest + 1e-9 {
                self.note_binding(order.len() + 1, "stop time window");
                continue;
            }
            if service > snapshot.effective_latest_arrival + 1e-9 {
                self.note_binding(order.len() + 1, "driver latest arrival");
                continue;
            }
            if stop.kind == StopKind::DropOff {
                if let Some(p) = item.pair {
                    let cap = self.req.candidates[p].max_ride_min;
                    if service - picked_at[&p] > cap + 1e-9 {
                        self.note_binding(order.len() + 1, "ride time");
                        continue;
                    }
                }
            }

            order.push(i);
            used[i] = true;
            let mut inserted_pick = false;
            if stop.kind == StopKind::Pickup {
                if let Some(p) = item.pair {
                    picked_at.insert(p, service);
                    inserted_pick = true;
                }
            }
            self.dfs(order, used, stop.node, service, occ, vkt + leg.distance_km, picked_at);
            if inserted_pick {
                picked_at.remove(&item.pair.unwrap());
            }
            used[i] = false;
            order.pop();
        }
    }
}

/// Minimum-VKT feasible stop sequence serving all fixed drop-offs and all
/// candidate pairs, ending at the driver destination.
pub fn best_schedule(req: &ScheduleRequest, net: &Network) -> Result<Schedule, Infeasible> {
    let mut items = Vec::new();
    for s in &req.fixed_dropoffs {
        debug_assert!(s.kind == StopKind::DropOff);
        items.push(Item { stop: s.clone(), pair: None });
    }
    for (p, c) in req.candidates.iter().enumerate() {
        items.push(Item { stop: c.pickup.clone(), pair: Some(p) });
        items.push(Item { stop: c.dropoff.clone(), pair: Some(p) });
    }

    let mut search = Search {
        net,
        req,
        items,
        best_vkt: f64::INFINITY,
        best_order: None,
        deepest: 0,
        deepest_binding: "no sequence explored".to_string(),
        leg_memo: HashMap::new(),
    };
    let n = search.items.len();
    let mut order = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut picked = BTreeMap::new();
    search.dfs(
        &mut order,
        &mut used,
        req.snapshot.position,
        req.snapshot.available_at,
        req.snapshot.occupancy as i64,
        0.0,
        &mut picked,
    );

    let Some(best) = search.best_order.clone() else {
        return Err(Infeasible { binding: search.deepest_binding });
    };

    // Materialize the winning sequence.
    let snapshot = &req.snapshot;
    let mut stops = Vec::with_capacity(best.len() + 1);
    let mut times = Vec::with_capacity(best.len() + 1);
    let mut legs = Vec::with_capacity(best.len() + 1);
    let mut node = snapshot.position;
    let mut time = snapshot.available_at;
    let mut vkt = 0.0;
    for &i in &best {
        let stop = search.items[i].stop.clone();
        let leg = search.leg(node, stop.node, time).expect("leg existed during search");
        time = leg.end_time().max(stop.earliest);
        node = stop.node;
        vkt += leg.distance_km;
        legs.push(leg);
        times.push(time);
        stops.push(stop);
    }
    let leg = search
        .leg(node, snapshot.destination, time)
        .expect("destination leg existed during search");
    time = leg.end_time();
    vkt += leg.distance_km;
    legs.push(leg);
    times.push(time);
    stops.push(Stop {
        node: snapshot.destination,
        kind: StopKind::Destination,
        agent: snapshot.driver,
        earliest: 0.0,
        latest: snapshot.effective_latest_arrival,
        seat_delta: 0,
    });

    let schedule = Schedule {
        anchor_node: snapshot.position,
        anchor_time: snapshot.available_at,
        stops,
        times,
        legs,
        vkt,
        payments: BTreeMap::new(),
        earning: 0.0,
        operational_cost: 0.0,
    };

    debug_assert!({
        let driver = DriverConstraint {
            capacity: snapshot.capacity,
            initial_occupancy: snapshot.occupancy,
            effective_latest_arrival: snapshot.effective_latest_arrival,
        };
        let rides = request_ride_constraints(req);
        schedule_feasible(&schedule, &driver, &rides).is_ok()
    });

    Ok(schedule)
}

/// Ride constraints implied by a request's candidate pairs.
pub fn request_ride_constraints(req: &ScheduleRequest) -> BTreeMap<AgentId, RideConstraint> {
    req.candidates
        .iter()
        .map(|c| {
            (
                c.passenger,
                RideConstraint {
                    max_ride_min: c.max_ride_min,
                    seats: c.pickup.seat_delta.max(0) as u32,
                },
            )
        })
        .collect()
}

/// Build the request that drops `ids` from a schedule. On-board passengers
/// cannot be removed; their drop-offs stay fixed.
pub fn remove_passengers(
    schedule: &Schedule,
    snapshot: DriverSnapshot,
    ids: &BTreeSet<AgentId>,
    ride_caps: &BTreeMap<AgentId, f64>,
) -> Result<ScheduleRequest, RemoveError> {
    let mut fixed = Vec::new();
    let mut pairs: BTreeMap<AgentId, (Option<Stop>, Option<Stop>)> = BTreeMap::new();
    for stop in &schedule.stops {
        match stop.kind {
            StopKind::Pickup => {
                pairs.entry(stop.agent).or_default().0 = Some(stop.clone());
            }
            StopKind::DropOff => {
                let entry = pairs.entry(stop.agent).or_default();
                entry.1 = Some(stop.clone());
            }
            _ => {}
        }
    }

    let mut candidates = Vec::new();
    for (agent, (pickup, dropoff)) in pairs {
        let dropoff = dropoff.expect("every served passenger has a drop-off");
        match pickup {
            None => {
                // Already on board.
                if ids.contains(&agent) {
                    return Err(RemoveError::OnBoard(agent));
                }
                fixed.push(dropoff);
            }
            Some(pickup) => {
                if ids.contains(&agent) {
                    continue;
                }
                let cap = ride_caps.get(&agent).copied().unwrap_or(f64::INFINITY);
                candidates.push(CandidatePair {
                    passenger: agent,
                    pickup,
                    dropoff,
                    max_ride_min: cap,
                });
            }
        }
    }
    Ok(ScheduleRequest { snapshot, fixed_dropoffs: fixed, candidates })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RemoveError {
    OnBoard(AgentId),
}

impl fmt::Display for RemoveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RemoveError::OnBoard(a) => {
                write!(f, "cannot remove on-board passenger {a} from a schedule")
            }
        }
    }
}

/// Total distance of a schedule's legs.
pub fn schedule_vkt(schedule: &Schedule) -> f64 {
    schedule.legs.iter().map(|l| l.distance_km).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Link, Network, Profile};

    fn line(n: u32) -> Network {
        let nodes: Vec<_> = (0..n).map(|i| (NodeId(i), i as f64, 0.0)).collect();
        let mut links = Vec::new();
        for i in 0..n - 1 {
            for (a, b) in [(i, i + 1), (i + 1, i)] {
                links.push(Link {
                    from: NodeId(a),
                    to: NodeId(b),
                    length_km: 1.0,
                    profile: Profile::constant(1.0),
                });
            }
        }
        Network::new(nodes, links, 15.0).unwrap()
    }

    fn snapshot(pos: u32, dest: u32) -> DriverSnapshot {
        DriverSnapshot {
            driver: AgentId(0),
            position: NodeId(pos),
            available_at: 0.0,
            destination: NodeId(dest),
            capacity: 4,
            occupancy: 0,
            effective_latest_arrival: f64::INFINITY,
        }
    }

    fn pair(agent: u32, pick: u32, drop: u32) -> CandidatePair {
        CandidatePair {
            passenger: AgentId(agent),
            pickup: Stop {
                node: NodeId(pick),
                kind: StopKind::Pickup,
                agent: AgentId(agent),
                earliest: 0.0,
                latest: f64::INFINITY,
                seat_delta: 1,
            },
            dropoff: Stop {
                node: NodeId(drop),
                kind: StopKind::DropOff,
                agent: AgentId(agent),
                earliest: 0.0,
                latest: f64::INFINITY,
                seat_delta: -1,
            },
            max_ride_min: f64::INFINITY,
        }
    }

    #[test]
    fn drive_alone_schedule_is_the_shortest_path() {
        let net = line(4);
        let req = ScheduleRequest {
            snapshot: snapshot(0, 3),
            fixed_dropoffs: vec![],
            candidates: vec![],
        };
        let s = best_schedule(&req, &net).unwrap();
        assert_eq!(s.vkt, 3.0);
        assert_eq!(s.stops.len(), 1);
        assert_eq!(s.stops[0].kind, StopKind::Destination);
    }

    #[test]
    fn on_path_passenger_adds_zero_detour() {
        let net = line(4);
        let req = ScheduleRequest {
            snapshot: snapshot(0, 3),
            fixed_dropoffs: vec![],
            candidates: vec![pair(10, 1, 2)],
        };
        let s = best_schedule(&req, &net).unwrap();
        assert_eq!(s.vkt, 3.0);
        let kinds: Vec<_> = s.stops.iter().map(|st| st.kind).collect();
        assert_eq!(kinds, vec![StopKind::Pickup, StopKind::DropOff, StopKind::Destination]);
    }

    #[test]
    fn schedule_vkt_sums_leg_distances() {
        let net = line(4);
        let req = ScheduleRequest {
            snapshot: snapshot(0, 3),
            fixed_dropoffs: vec![],
            candidates: vec![pair(10, 2, 1)],
        };
        // Pickup at 2, drop at 1, then back out to 3: 2 + 1 + 2 = 5 km.
        let s = best_schedule(&req, &net).unwrap();
        assert_eq!(schedule_vkt(&s), s.vkt);
        assert_eq!(s.vkt, 5.0);
        let empty = Schedule::empty(NodeId(0), 0.0);
        assert_eq!(schedule_vkt(&empty), 0.0);
    }

    #[test]
    fn infeasible_when_window_unmeetable() {
        let net = line(4);
        let mut c = pair(10, 1, 2);
        c.pickup.latest = 0.2; // cannot reach node 1 before 1.0
        let req = ScheduleRequest {
            snapshot: snapshot(0, 3),
            fixed_dropoffs: vec![],
            candidates: vec![c],
        };
        let err = best_schedule(&req, &net).unwrap_err();
        assert!(err.binding.contains("window"), "{}", err.binding);
    }

    #[test]
    fn remove_passengers_keeps_other_pairs() {
        let net = line(6);
        let req = ScheduleRequest {
            snapshot: snapshot(0, 5),
            fixed_dropoffs: vec![],
            candidates: vec![pair(10, 1, 2), pair(11, 3, 4)],
        };
        let s = best_schedule(&req, &net).unwrap();
        let mut caps = BTreeMap::new();
        caps.insert(AgentId(10), 100.0);
        caps.insert(AgentId(11), 100.0);
        let removed = remove_passengers(
            &s,
            snapshot(0, 5),
            &BTreeSet::from([AgentId(10)]),
            &caps,
        )
        .unwrap();
        assert_eq!(removed.candidates.len(), 1);
        assert_eq!(removed.candidates[0].passenger, AgentId(11));
        assert!(removed.fixed_dropoffs.is_empty());

        // Removing nothing keeps both pairs.
        let same =
            remove_passengers(&s, snapshot(0, 5), &BTreeSet::new(), &caps).unwrap();
        assert_eq!(same.candidates.len(), 2);

        // Only unpicked passenger removed leaves a drive-alone request.
        let req1 = ScheduleRequest {
            snapshot: snapshot(0, 5),
            fixed_dropoffs: vec![],
            candidates: vec![pair(10, 1, 2)],
        };
        let s1 = best_schedule(&req1, &net).unwrap();
        let alone = remove_passengers(
            &s1,
            snapshot(0, 5),
            &BTreeSet::from([AgentId(10)]),
            &caps,
        )
        .unwrap();
        assert!(alone.candidates.is_empty());
        assert!(alone.fixed_dropoffs.is_empty());
    }

    #[test]
    fn removing_on_board_passenger_is_an_error() {
        let mut s = Schedule::empty(NodeId(0), 0.0);
        s.stops.push(Stop {
            node: NodeId(2),
            kind: StopKind::DropOff,
            agent: AgentId(42),
            earliest: 0.0,
            latest: f64::INFINITY,
            seat_delta: -1,
        });
        s.times.push(2.0);
        let err = remove_passengers(
            &s,
            snapshot(0, 5),
            &BTreeSet::from([AgentId(42)]),
            &BTreeMap::new(),
        )
        .unwrap_err();
        assert_eq!(err, RemoveError::OnBoard(AgentId(42)));
    }

    #[test]
    fn adding_a_candidate_never_reduces_optimal_vkt() {
        let net = line(8);
        let base = ScheduleRequest {
            snapshot: snapshot(0, 7),
            fixed_dropoffs: vec![],
            candidates: vec![pair(10, 2, 5)],
        };
        let with_extra = ScheduleRequest {
            snapshot: snapshot(0, 7),
            fixed_dropoffs: vec![],
            candidates: vec![pair(10, 2, 5), pair(11, 6, 1)],
        };
        let a = best_schedule(&base, &net).unwrap().vkt;
        let b = best_schedule(&with_extra, &net).unwrap().vkt;
        assert!(b >= a);
    }
}
