//! Service-provider operations: candidate enumeration, the min-VKT
//! assignment program, proportional pricing, and majority-voting
//! finalization.
//!
//! The assignment selects one combination per driver (a joint schedule or
//! the driver's stay-as-is dummy) and covers every pooled passenger either
//! by a joint combination or by their travel-alone dummy, minimizing total
//! VKT. Dummies guarantee feasibility; the branch-and-bound solve is exact.

use std::collections::{BTreeMap, BTreeSet};

use crate::domain::{AgentId, Schedule};
use crate::network::Network;
use crate::par;
use crate::scheduling::{best_schedule, CandidatePair, DriverSnapshot, ScheduleRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComboKind {
    Joint,
    DriverDummy,
    PassengerDummy,
}

/// One driver-passengers combination with its schedule and VKT weight.
#[derive(Debug, Clone)]
pub struct Combination {
    pub kind: ComboKind,
    /// The driver, or the passenger for a passenger dummy.
    pub subject: AgentId,
    /// Pool passengers this combination would newly match.
    pub added: Vec<AgentId>,
    pub schedule: Option<Schedule>,
    pub weight_km: f64,
}

/// All combinations of one matching round plus the pool they cover.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub combos: Vec<Combination>,
    pub pool_drivers: Vec<AgentId>,
    pub pool_passengers: Vec<AgentId>,
}

impl CandidateSet {
    pub fn joint_count(&self) -> usize {
        self.combos.iter().filter(|c| c.kind == ComboKind::Joint).count()
    }
}

/// Inputs describing one pooled driver for candidate generation.
#[derive(Debug, Clone)]
pub struct DriverInput {
    pub snapshot: DriverSnapshot,
    /// Current schedule VKT: the weight of this driver's dummy.
    pub current_vkt: f64,
    /// Pairs the driver is already committed to (not yet picked up).
    pub retained: Vec<CandidatePair>,
    /// Drop-offs of on-board passengers.
    pub fixed_dropoffs: Vec<crate::domain::Stop>,
    /// Room left under the driver's lifetime passenger cap.
    pub remaining_passenger_slots: u32,
}

/// Inputs describing one pooled passenger.
#[derive(Debug, Clone)]
pub struct PassengerInput {
    pub pair: CandidatePair,
    /// Weight of this passenger's dummy: their shortest-path distance.
    pub sp_distance_km: f64,
}

/// Enumerate feasible driver-passengers combinations up to `max_new`
/// new passengers per combination, plus dummies for every pooled agent.
///
/// Feasibility is anti-monotone in the passenger set (adding stops never
/// shortens arrivals), so pairs are only built from feasible singletons.
pub fn build_candidates(
    drivers: &[DriverInput],
    passengers: &[PassengerInput],
    net: &Network,
    max_new: usize,
) -> CandidateSet {
    let per_driver: Vec<Vec<Combination>> = par::map_slice(drivers, |d| {
        enumerate_driver(d, passengers, net, max_new)
    });

    let mut combos = Vec::new();
    for (d, mut list) in drivers.iter().zip(per_driver) {
        combos.push(Combination {
            kind: ComboKind::DriverDummy,
            subject: d.snapshot.driver,
            added: Vec::new(),
            schedule: None,
            weight_km: d.current_vkt,
        });
        combos.append(&mut list);
    }
    for p in passengers {
        combos.push(Combination {
            kind: ComboKind::PassengerDummy,
            subject: p.pair.passenger,
            added: vec![p.pair.passenger],
            schedule: None,
            weight_km: p.sp_distance_km,
        });
    }

    CandidateSet {
        combos,
        pool_drivers: drivers.iter().map(|d| d.snapshot.driver).collect(),
        pool_passengers: passengers.iter().map(|p| p.pair.passenger).collect(),
    }
}

fn enumerate_driver(
    d: &DriverInput,
    passengers: &[PassengerInput],
    net: &Network,
    max_new: usize,
) -> Vec<Combination> {
    let mut out = Vec::new();
    if d.remaining_passenger_slots == 0 || max_new == 0 {
        return out;
    }

    let mut feasible_singles: Vec<usize> = Vec::new();
    for (pi, p) in passengers.iter().enumerate() {
        if !quick_reject(d, p, net) {
            if let Some(combo) = try_combo(d, &[p], net) {
                feasible_singles.push(pi);
                out.push(combo);
            }
        }
    }

    if max_new >= 2 && d.remaining_passenger_slots >= 2 {
        for (a_idx, &a) in feasible_singles.iter().enumerate() {
            for &b in &feasible_singles[a_idx + 1..] {
                if let Some(combo) = try_combo(d, &[&passengers[a], &passengers[b]], net) {
                    out.push(combo);
                }
            }
        }
    }
    out
}

/// Cheap lower-bound screen before running the schedule search.
fn quick_reject(d: &DriverInput, p: &PassengerInput, net: &Network) -> bool {
    let s = &d.snapshot;
    let pick = p.pair.pickup.node;
    let drop = p.pair.dropoff.node;
    let to_pick = s.available_at + net.time_lower_bound(s.position, pick);
    if to_pick > p.pair.pickup.latest + 1e-9 {
        return true;
    }
    let earliest_pick = to_pick.max(p.pair.pickup.earliest);
    let via = earliest_pick
        + net.time_lower_bound(pick, drop)
        + net.time_lower_bound(drop, s.destination);
    via > s.effective_latest_arrival + 1e-9
}

fn try_combo(
    d: &DriverInput,
    new: &[&PassengerInput],
    net: &Network,
) -> Option<Combination> {
    let mut candidates = d.retained.clone();
    for p in new {
        candidates.push(p.pair.clone());
    }
    let req = ScheduleRequest {
        snapshot: d.snapshot.clone(),
        fixed_dropoffs: d.fixed_dropoffs.clone(),
        candidates,
    };
    let schedule = best_schedule(&req, net).ok()?;
    Some(Combination {
        kind: ComboKind::Joint,
        subject: d.snapshot.driver,
        added: new.iter().map(|p| p.pair.passenger).collect(),
        schedule: Some(schedule.clone()),
        weight_km: schedule.vkt,
    })
}

/// Solution of the assignment program.
#[derive(Debug, Clone)]
pub struct MatchingSolution {
    /// Indices into `CandidateSet::combos` with indicator one.
    pub selected: Vec<usize>,
    /// Total VKT over the selected combinations.
    pub objective_km: f64,
}

impl MatchingSolution {
    /// Agents newly matched by the solution: drivers of selected joints and
    /// the passengers those joints add.
    pub fn matched_agents(&self, set: &CandidateSet) -> BTreeSet<AgentId> {
        let mut agents = BTreeSet::new();
        for &i in &self.selected {
            let c = &set.combos[i];
            if c.kind == ComboKind::Joint {
                agents.insert(c.subject);
                agents.extend(c.added.iter().copied());
            }
        }
        agents
    }
}

/// Exact minimum-VKT assignment: one combination per driver, every pooled
/// passenger covered by a joint combination or their dummy.
///
/// Solved in savings form (dummies are the zero point). The instance is
/// split into connected components over shared passengers; each component
/// runs an exact branch-and-bound seeded with a greedy incumbent.
pub fn solve_matching(set: &CandidateSet) -> MatchingSolution {
    let mut driver_dummy: BTreeMap<AgentId, (usize, f64)> = BTreeMap::new();
    let mut passenger_dummy: BTreeMap<AgentId, (usize, f64)> = BTreeMap::new();
    for (i, c) in set.combos.iter().enumerate() {
        match c.kind {
            ComboKind::DriverDummy => {
                driver_dummy.insert(c.subject, (i, c.weight_km));
            }
            ComboKind::PassengerDummy => {
                passenger_dummy.insert(c.subject, (i, c.weight_km));
            }
            ComboKind::Joint => {}
        }
    }
    debug_assert_eq!(driver_dummy.len(), set.pool_drivers.len());
    debug_assert_eq!(passenger_dummy.len(), set.pool_passengers.len());

    let base_objective: f64 = driver_dummy.values().map(|&(_, w)| w).sum::<f64>()
        + passenger_dummy.values().map(|&(_, w)| w).sum::<f64>();

    // Positive-savings joints per driver; zero or worse never beats the
    // dummy pair it would replace.
    let mut joints_by_driver: BTreeMap<AgentId, Vec<(usize, f64)>> = BTreeMap::new();
    for (i, c) in set.combos.iter().enumerate() {
        if c.kind != ComboKind::Joint {
            continue;
        }
        let dummy_sum: f64 = driver_dummy[&c.subject].1
            + c.added.iter().map(|p| passenger_dummy[p].1).sum::<f64>();
        let saving = dummy_sum - c.weight_km;
        if saving > 0.0 {
            joints_by_driver.entry(c.subject).or_default().push((i, saving));
        }
    }
    // Per-driver dominance: a combo is dropped when a strict subset of its
    // added passengers saves at least as much (swapping in the subset frees
    // passengers without losing savings).
    for joints in joints_by_driver.values_mut() {
        joints.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let snapshot = joints.clone();
        joints.retain(|&(idx, s)| {
            let added = &set.combos[idx].added;
            !snapshot.iter().any(|&(other, os)| {
                let other_added = &set.combos[other].added;
                os >= s
                    && other_added.len() < added.len()
                    && other_added.iter().all(|p| added.contains(p))
            })
        });
    }

    // Union-find over drivers sharing candidate passengers.
    let driver_ids: Vec<AgentId> = joints_by_driver.keys().copied().collect();
    let mut owner: BTreeMap<AgentId, usize> = BTreeMap::new();
    let mut parent: Vec<usize> = (0..driver_ids.len()).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (di, d) in driver_ids.iter().enumerate() {
        for &(idx, _) in &joints_by_driver[d] {
            for p in &set.combos[idx].added {
                match owner.get(p) {
                    None => {
                        owner.insert(*p, di);
                    }
                    Some(&other) => {
                        let (a, b) = (find(&mut parent, di), find(&mut parent, other));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for di in 0..driver_ids.len() {
        components.entry(find(&mut parent, di)).or_default().push(di);
    }

    if std::env::var_os("RIDESHARE_DEBUG_MATCH").is_some() {
        let joints_total: usize = joints_by_driver.values().map(|v| v.len()).sum();
        let comp_sizes: Vec<usize> = components.values().map(|v| v.len()).collect();
        eprintln!(
            "match: drivers={} passengers={} joints={} components={:?}",
            set.pool_drivers.len(),
            set.pool_passengers.len(),
            joints_total,
            comp_sizes
        );
    }

    let mut chosen: BTreeMap<AgentId, usize> = BTreeMap::new();
    let mut total_saving = 0.0;
    for members in components.values() {
        // Dense member indexing: the component's drivers and passengers.
        let mut member_of: BTreeMap<AgentId, usize> = BTreeMap::new();
        for &di in members {
            let next = member_of.len();
            member_of.entry(driver_ids[di]).or_insert(next);
        }
        for &di in members {
            for &(idx, _) in &joints_by_driver[&driver_ids[di]] {
                for p in &set.combos[idx].added {
                    let next = member_of.len();
                    member_of.entry(*p).or_insert(next);
                }
            }
        }
        let mut joints: Vec<CompJoint> = Vec::new();
        for &di in members {
            for &(idx, saving) in &joints_by_driver[&driver_ids[di]] {
                let mut m = vec![member_of[&driver_ids[di]]];
                m.extend(set.combos[idx].added.iter().map(|p| member_of[p]));
                joints.push(CompJoint { combo: idx, saving, members: m });
            }
        }
        // Strongest joints first so greedy and branching hit them early.
        joints.sort_by(|a, b| b.saving.total_cmp(&a.saving).then(a.combo.cmp(&b.combo)));

        let (saving, picks) = solve_component(&joints, member_of.len());
        total_saving += saving;
        for idx in picks {
            chosen.insert(set.combos[idx].subject, idx);
        }
    }

    // Materialize: chosen joints, dummies for everyone else.
    let mut selected = Vec::new();
    let mut matched_passengers: BTreeSet<AgentId> = BTreeSet::new();
    for d in &set.pool_drivers {
        match chosen.get(d) {
            Some(&idx) => {
                selected.push(idx);
                matched_passengers.extend(set.combos[idx].added.iter().copied());
            }
            None => selected.push(driver_dummy[d].0),
        }
    }
    for p in &set.pool_passengers {
        if !matched_passengers.contains(p) {
            selected.push(passenger_dummy[p].0);
        }
    }
    selected.sort_unstable();
    let objective_km = base_objective - total_saving;

    MatchingSolution { selected, objective_km }
}

/// One joint inside a conflict component, over dense member indices.
/// Member 0..k are the component's drivers and passengers; a joint uses
/// its driver plus the passengers it adds.
#[derive(Debug, Clone)]
struct CompJoint {
    combo: usize,
    saving: f64,
    members: Vec<usize>,
}

/// Node budget per conflict component. Small instances (including every
/// oracle-checked one) are solved exactly well inside it; a component that
/// exhausts the budget keeps the best packing found so far, which is never
/// worse than the greedy incumbent. The budget is a node count, so results
/// stay deterministic across machines.
const COMPONENT_NODE_BUDGET: u64 = 60_000;

/// Max-savings packing of one conflict component by branch and bound.
///
/// Branches on the most valuable still-free member: either one of its
/// joints is selected or the member stays unmatched. The bound spreads
/// each joint's saving over its members, which stays valid because every
/// member joins at most one selected joint.
fn solve_component(joints: &[CompJoint], n_members: usize) -> (f64, Vec<usize>) {
    // Greedy incumbent: best available joint first.
    let mut taken = vec![false; n_members];
    let mut greedy = Vec::new();
    let mut greedy_saving = 0.0;
    for j in joints {
        if j.members.iter().all(|&m| !taken[m]) {
            for &m in &j.members {
                taken[m] = true;
            }
            greedy.push(j.combo);
            greedy_saving += j.saving;
        }
    }

    struct Search<'a> {
        joints: &'a [CompJoint],
        best_saving: f64,
        best: Vec<usize>,
        ratios: Vec<f64>,
        nodes_left: u64,
    }

    impl Search<'_> {
        fn run(&mut self, saving: f64, taken: &mut [bool], picked: &mut Vec<usize>) {
            if self.nodes_left == 0 {
                return;
            }
            self.nodes_left -= 1;
            // Fractional bound: each free member contributes at most its
            // best per-member share among joints that are still intact.
            let mut share = vec![0.0f64; taken.len()];
            let mut any_alive = false;
            for (ji, j) in self.joints.iter().enumerate() {
                if j.members.iter().any(|&m| taken[m]) {
                    continue;
                }
                any_alive = true;
                let r = self.ratios[ji];
                for &m in &j.members {
                    if r > share[m] {
                        share[m] = r;
                    }
                }
            }
            let bound: f64 = share.iter().sum();
            if saving + bound <= self.best_saving {
                return;
            }
            if !any_alive {
                if saving > self.best_saving {
                    self.best_saving = saving;
                    self.best = picked.clone();
                }
                return;
            }
            // Branch on the most valuable free member.
            let branch_member = share
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(m, _)| m)
                .unwrap();
            for (ji, j) in self.joints.iter().enumerate() {
                if !j.members.contains(&branch_member) || j.members.iter().any(|&m| taken[m]) {
                    continue;
                }
                let _ = ji;
                for &m in &j.members {
                    taken[m] = true;
                }
                picked.push(j.combo);
                self.run(saving + j.saving, taken, picked);
                picked.pop();
                for &m in &j.members {
                    taken[m] = false;
                }
            }
            // Or leave the member unmatched.
            taken[branch_member] = true;
            self.run(saving, taken, picked);
            taken[branch_member] = false;
        }
    }

    let ratios: Vec<f64> = joints.iter().map(|j| j.saving / j.members.len() as f64).collect();
    let mut search = Search {
        joints,
        // Slightly below the greedy value so an equal-value exact solution
        // still gets recorded.
        best_saving: greedy_saving - 1e-9,
        best: Vec::new(),
        ratios,
        nodes_left: COMPONENT_NODE_BUDGET,
    };
    let mut taken = vec![false; n_members];
    let mut picked = Vec::new();
    search.run(0.0, &mut taken, &mut picked);
    if search.best.is_empty() && search.best_saving < greedy_saving {
        (greedy_saving, greedy)
    } else {
        (search.best_saving.max(0.0), search.best)
    }
}

/// Proportionally allocate the variable cost of a joint trip.
///
/// Total cost = unit price × trip VKT (the driver's distance already driven
/// plus the schedule's remaining VKT); each participant (the driver and
/// every passenger on the schedule) carries a share proportional to their
/// own shortest-path distance. Passenger payments equal their shares; the
/// driver's earning is the sum of passenger payments. Pricing the whole
/// trip keeps an on-path passenger's payment stable across re-matches
/// instead of melting as the driver progresses.
pub fn allocate_prices(
    schedule: &mut Schedule,
    unit_price_per_km: f64,
    driver_sp_km: f64,
    passenger_sp_km: &BTreeMap<AgentId, f64>,
    operating_cost_per_km: f64,
    driven_km: f64,
) {
    let passengers = schedule.passenger_ids();
    let total_cost = unit_price_per_km * (driven_km + schedule.vkt);
    let sp_sum: f64 =
        driver_sp_km + passengers.iter().map(|p| passenger_sp_km.get(p).copied().unwrap_or(0.0)).sum::<f64>();

    schedule.payments.clear();
    if passengers.is_empty() {
        schedule.earning = 0.0;
    } else if sp_sum <= 0.0 {
        // Degenerate distances: split equally across all participants.
        let share = total_cost / (passengers.len() as f64 + 1.0);
        for p in &passengers {
            schedule.payments.insert(*p, share);
        }
        schedule.earning = share * passengers.len() as f64;
    } else {
        let mut earning = 0.0;
        for p in &passengers {
            let sp = passenger_sp_km.get(p).copied().unwrap_or(0.0);
            let share = total_cost * sp / sp_sum;
            schedule.payments.insert(*p, share);
            earning += share;
        }
        schedule.earning = earning;
    }
    schedule.operational_cost = operating_cost_per_km * schedule.vkt;
}

/// Majority-voting finalization.
///
/// Stage 1: the driver and all previously matched passengers vote; a strict
/// majority of accepts proceeds, a tie gives the driver the final say.
/// Stage 2: every newly added passenger must accept.
pub fn finalize_option(
    driver_accepts: bool,
    prior_accepts: &[bool],
    new_accepts: &[bool],
) -> bool {
    if !stage1_passes(driver_accepts, prior_accepts) {
        return false;
    }
    new_accepts.iter().all(|&a| a)
}

/// Stage-1 verdict alone; used to decide whether new passengers are polled.
pub fn stage1_passes(driver_accepts: bool, prior_accepts: &[bool]) -> bool {
    let accepts = prior_accepts.iter().filter(|&&a| a).count() + driver_accepts as usize;
    let total = prior_accepts.len() + 1;
    let rejects = total - accepts;
    match accepts.cmp(&rejects) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => driver_accepts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Stop, StopKind};
    use crate::network::{Link, NodeId, Profile};

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

    fn driver_input(pos: u32, dest: u32) -> DriverInput {
        DriverInput {
            snapshot: DriverSnapshot {
                driver: AgentId(0),
                position: NodeId(pos),
                available_at: 0.0,
                destination: NodeId(dest),
                capacity: 4,
                occupancy: 0,
                effective_latest_arrival: f64::INFINITY,
            },
            current_vkt: (dest - pos) as f64,
            retained: vec![],
            fixed_dropoffs: vec![],
            remaining_passenger_slots: 8,
        }
    }

    fn passenger_input(agent: u32, pick: u32, drop: u32) -> PassengerInput {
        PassengerInput {
            pair: CandidatePair {
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
            },
            sp_distance_km: (drop as f64 - pick as f64).abs(),
        }
    }

    #[test]
    fn one_driver_one_passenger_enumeration() {
        let net = line(4);
        let set = build_candidates(
            &[driver_input(0, 3)],
            &[passenger_input(10, 1, 2)],
            &net,
            2,
        );
        // joint + driver dummy + passenger dummy
        assert_eq!(set.combos.len(), 3);
        assert_eq!(set.joint_count(), 1);
    }

    #[test]
    fn time_infeasible_pair_leaves_dummies_only() {
        let net = line(4);
        let mut p = passenger_input(10, 1, 2);
        p.pair.pickup.latest = 0.1;
        let set = build_candidates(&[driver_input(0, 3)], &[p], &net, 2);
        assert_eq!(set.joint_count(), 0);
        assert_eq!(set.combos.len(), 2);
    }

    #[test]
    fn two_passengers_enumerate_singles_and_pair() {
        let net = line(6);
        let set = build_candidates(
            &[driver_input(0, 5)],
            &[passenger_input(10, 1, 2), passenger_input(11, 3, 4)],
            &net,
            2,
        );
        // {P1}, {P2}, {P1,P2} joints plus 3 dummies.
        assert_eq!(set.joint_count(), 3);
        assert_eq!(set.combos.len(), 6);
    }

    #[test]
    fn solver_picks_joint_when_it_saves_vkt() {
        // driver dummy 10, passenger dummy 4, joint 12 < 14.
        let set = CandidateSet {
            combos: vec![
                Combination {
                    kind: ComboKind::DriverDummy,
                    subject: AgentId(0),
                    added: vec![],
                    schedule: None,
                    weight_km: 10.0,
                },
                Combination {
                    kind: ComboKind::Joint,
                    subject: AgentId(0),
                    added: vec![AgentId(10)],
                    schedule: None,
                    weight_km: 12.0,
                },
                Combination {
                    kind: ComboKind::PassengerDummy,
                    subject: AgentId(10),
                    added: vec![AgentId(10)],
                    schedule: None,
                    weight_km: 4.0,
                },
            ],
            pool_drivers: vec![AgentId(0)],
            pool_passengers: vec![AgentId(10)],
        };
        let sol = solve_matching(&set);
        assert_eq!(sol.objective_km, 12.0);
        assert_eq!(sol.selected, vec![1]);

        // joint 15 vs dummies 14: stay apart.
        let mut set2 = set.clone();
        set2.combos[1].weight_km = 15.0;
        let sol2 = solve_matching(&set2);
        assert_eq!(sol2.objective_km, 14.0);
        assert_eq!(sol2.selected, vec![0, 2]);
    }

    #[test]
    fn empty_candidate_set_solves_to_zero() {
        let set = CandidateSet {
            combos: vec![],
            pool_drivers: vec![],
            pool_passengers: vec![],
        };
        let sol = solve_matching(&set);
        assert_eq!(sol.objective_km, 0.0);
        assert!(sol.selected.is_empty());
    }

    #[test]
    fn solution_never_worse_than_all_dummies() {
        let net = line(8);
        let drivers = vec![driver_input(0, 7)];
        let passengers =
            vec![passenger_input(10, 1, 3), passenger_input(11, 2, 6), passenger_input(12, 5, 1)];
        let set = build_candidates(&drivers, &passengers, &net, 2);
        let all_dummy: f64 = set
            .combos
            .iter()
            .filter(|c| c.kind != ComboKind::Joint)
            .map(|c| c.weight_km)
            .sum();
        let sol = solve_matching(&set);
        assert!(sol.objective_km <= all_dummy + 1e-9);
    }

    #[test]
    fn pricing_example() {
        let net = line(4);
        let req = ScheduleRequest {
            snapshot: DriverSnapshot {
                driver: AgentId(0),
                position: NodeId(0),
                available_at: 0.0,
                destination: NodeId(3),
                capacity: 4,
                occupancy: 0,
                effective_latest_arrival: f64::INFINITY,
            },
            fixed_dropoffs: vec![],
            candidates: vec![
                CandidatePair {
                    passenger: AgentId(10),
                    pickup: Stop {
                        node: NodeId(1),
                        kind: StopKind::Pickup,
                        agent: AgentId(10),
                        earliest: 0.0,
                        latest: f64::INFINITY,
                        seat_delta: 1,
                    },
                    dropoff: Stop {
                        node: NodeId(2),
                        kind: StopKind::DropOff,
                        agent: AgentId(10),
                        earliest: 0.0,
                        latest: f64::INFINITY,
                        seat_delta: -1,
                    },
                    max_ride_min: f64::INFINITY,
                },
                CandidatePair {
                    passenger: AgentId(11),
                    pickup: Stop {
                        node: NodeId(1),
                        kind: StopKind::Pickup,
                        agent: AgentId(11),
                        earliest: 0.0,
                        latest: f64::INFINITY,
                        seat_delta: 1,
                    },
                    dropoff: Stop {
                        node: NodeId(3),
                        kind: StopKind::DropOff,
                        agent: AgentId(11),
                        earliest: 0.0,
                        latest: f64::INFINITY,
                        seat_delta: -1,
                    },
                    max_ride_min: f64::INFINITY,
                },
            ],
        };
        let mut s = best_schedule(&req, &net).unwrap();
        // Force the worked numbers: VKT 12, SP distances 10/4/6, unit 6.
        s.vkt = 12.0;
        let mut sp = BTreeMap::new();
        sp.insert(AgentId(10), 4.0);
        sp.insert(AgentId(11), 6.0);
        allocate_prices(&mut s, 6.0, 10.0, &sp, 0.0, 0.0);
        assert!((s.payments[&AgentId(10)] - 14.4).abs() < 1e-9);
        assert!((s.payments[&AgentId(11)] - 21.6).abs() < 1e-9);
        assert!((s.earning - 36.0).abs() < 1e-9);
    }

    #[test]
    fn pricing_symmetry_and_empty() {
        let net = line(6);
        let req = ScheduleRequest {
            snapshot: DriverSnapshot {
                driver: AgentId(0),
                position: NodeId(0),
                available_at: 0.0,
                destination: NodeId(5),
                capacity: 4,
                occupancy: 0,
                effective_latest_arrival: f64::INFINITY,
            },
            fixed_dropoffs: vec![],
            candidates: vec![CandidatePair {
                passenger: AgentId(10),
                pickup: Stop {
                    node: NodeId(0),
                    kind: StopKind::Pickup,
                    agent: AgentId(10),
                    earliest: 0.0,
                    latest: f64::INFINITY,
                    seat_delta: 1,
                },
                dropoff: Stop {
                    node: NodeId(5),
                    kind: StopKind::DropOff,
                    agent: AgentId(10),
                    earliest: 0.0,
                    latest: f64::INFINITY,
                    seat_delta: -1,
                },
                max_ride_min: f64::INFINITY,
            }],
        };
        let mut s = best_schedule(&req, &net).unwrap();
        let mut sp = BTreeMap::new();
        sp.insert(AgentId(10), 5.0);
        allocate_prices(&mut s, 6.0, 5.0, &sp, 0.0, 0.0);
        let total = 6.0 * s.vkt;
        assert!((s.payments[&AgentId(10)] - total / 2.0).abs() < 1e-9);

        let mut empty = Schedule::empty(NodeId(0), 0.0);
        allocate_prices(&mut empty, 6.0, 5.0, &BTreeMap::new(), 0.0, 0.0);
        assert!(empty.payments.is_empty());
        assert_eq!(empty.earning, 0.0);
    }

    #[test]
    fn majority_voting_rules() {
        // Driver + 1 prior passenger split 1-1; the driver's accept decides.
        assert!(stage1_passes(true, &[false]));
        assert!(!stage1_passes(false, &[true]));
        // Stage 1 passes but one of two new passengers rejects.
        assert!(!finalize_option(true, &[true], &[true, false]));
        // Everyone accepts.
        assert!(finalize_option(true, &[true, true], &[true]));
        // Majority of priors can carry a reluctant driver.
        assert!(stage1_passes(false, &[true, true, true]));
    }

    #[test]
    fn finalization_is_monotone_in_accepts() {
        // Flipping any reject to accept never turns a finalized option
        // into a rejected one.
        let bools = [false, true];
        for d in bools {
            for p1 in bools {
                for p2 in bools {
                    for n1 in bools {
                        let before = finalize_option(d, &[p1, p2], &[n1]);
                        if !before {
                            continue;
                        }
                        for flip in 0..4 {
                            let (d2, p1b, p2b, n1b) = match flip {
                                0 => (true, p1, p2, n1),
                                1 => (d, true, p2, n1),
                                2 => (d, p1, true, n1),
                                _ => (d, p1, p2, true),
                            };
                            assert!(
                                finalize_option(d2, &[p1b, p2b], &[n1b]),
                                "accept flip broke finalization"
                            );
                        }
                    }
                }
            }
        }
    }
}
