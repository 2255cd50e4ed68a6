//! Road network, time-dependent shortest paths, and itinerary handling.
//!
//! Links carry piecewise-constant travel-time profiles indexed by entry-time
//! bins. Profiles are normalized at load so that entering a link later never
//! yields an earlier exit (FIFO); routing is A* with a Euclidean-over-max-speed
//! heuristic, which stays admissible under FIFO.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// External node identifier as it appears in the input files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Free-flow pace used when a link has no profile rows.
pub const DEFAULT_MIN_PER_KM: f64 = 1.5;

/// Default width of a travel-time bin in minutes.
pub const DEFAULT_BIN_MINUTES: f64 = 15.0;

#[derive(Debug)]
pub enum NetworkError {
    Io(String),
    Parse { file: String, line: usize, msg: String },
    Validation(String),
}

impl fmt::Display for NetworkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkError::Io(msg) => write!(f, "io error: {msg}"),
            NetworkError::Parse { file, line, msg } => {
                write!(f, "parse error in {file} line {line}: {msg}")
            }
            NetworkError::Validation(msg) => write!(f, "invalid network: {msg}"),
        }
    }
}

impl std::error::Error for NetworkError {}

/// Per-link travel-time profile with FIFO exit clamping baked in.
#[derive(Debug, Clone)]
pub struct Profile {
    /// Raw minutes-per-traversal, one entry per bin.
    times: Vec<f64>,
    /// `floor[i]` = latest exit reachable from any entry strictly before
    /// bin i's start; exits are clamped up to it.
    floor: Vec<f64>,
}

impl Profile {
    /// Build a profile from per-bin travel times; `bin_min` is the bin width.
    pub fn new(times: Vec<f64>, bin_min: f64) -> Profile {
        debug_assert!(!times.is_empty());
        let mut floor = Vec::with_capacity(times.len());
        let mut peak = f64::NEG_INFINITY;
        for (i, &tt) in times.iter().enumerate() {
            floor.push(peak);
            peak = peak.max((i + 1) as f64 * bin_min + tt);
        }
        Profile { times, floor }
    }

    pub fn constant(tt: f64) -> Profile {
        Profile { times: vec![tt], floor: vec![f64::NEG_INFINITY] }
    }

    fn bin(&self, t: f64, bin_min: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        ((t / bin_min) as usize).min(self.times.len() - 1)
    }

    /// Exit time for entering the link at `t`. Nondecreasing in `t`.
    pub fn exit(&self, t: f64, bin_min: f64) -> f64 {
        let i = self.bin(t, bin_min);
        (t + self.times[i]).max(self.floor[i])
    }

    pub fn min_time(&self) -> f64 {
        self.times.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    pub length_km: f64,
    pub profile: Profile,
}

/// Immutable road network; all routing goes through it.
#[derive(Debug, Clone)]
pub struct Network {
    ids: Vec<NodeId>,
    coords: Vec<(f64, f64)>,
    index: BTreeMap<NodeId, usize>,
    links: Vec<Link>,
    /// Outgoing (dense node, link idx), sorted by target id for determinism.
    adjacency: Vec<Vec<(usize, usize)>>,
    bin_minutes: f64,
    /// Max observed speed over all (link, bin) pairs, km/min.
    vmax: f64,
}

impl Network {
    pub fn new(
        nodes: Vec<(NodeId, f64, f64)>,
        links: Vec<Link>,
        bin_minutes: f64,
    ) -> Result<Network, NetworkError> {
        let mut sorted = nodes;
        sorted.sort_by_key(|(id, _, _)| *id);
        sorted.dedup_by_key(|(id, _, _)| *id);
        let ids: Vec<NodeId> = sorted.iter().map(|(id, _, _)| *id).collect();
        let coords: Vec<(f64, f64)> = sorted.iter().map(|(_, x, y)| (*x, *y)).collect();
        let index: BTreeMap<NodeId, usize> =
            ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

        let mut vmax: f64 = 0.0;
        for link in &links {
            if !index.contains_key(&link.from) || !index.contains_key(&link.to) {
                return Err(NetworkError::Validation(format!(
                    "link {}->{} references an unknown node",
                    link.from, link.to
                )));
            }
            if !(link.length_km > 0.0) {
                return Err(NetworkError::Validation(format!(
                    "link {}->{} has nonpositive length",
                    link.from, link.to
                )));
            }
            for &tt in &link.profile.times {
                if !(tt > 0.0) {
                    return Err(NetworkError::Validation(format!(
                        "link {}->{} has nonpositive travel time",
                        link.from, link.to
                    )));
                }
                vmax = vmax.max(link.length_km / tt);
            }
        }

        let mut adjacency = vec![Vec::new(); ids.len()];
        let mut order: Vec<usize> = (0..links.len()).collect();
        order.sort_by_key(|&i| (links[i].from, links[i].to));
        for li in order {
            let link = &links[li];
            adjacency[index[&link.from]].push((index[&link.to], li));
        }

        Ok(Network { ids, coords, index, links, adjacency, bin_minutes, vmax })
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.index.contains_key(&node)
    }

    pub fn coord(&self, node: NodeId) -> Option<(f64, f64)> {
        self.index.get(&node).map(|&i| self.coords[i])
    }

    /// Max observed speed in km/min.
    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    pub fn euclid_km(&self, a: NodeId, b: NodeId) -> f64 {
        let (ax, ay) = self.coords[self.index[&a]];
        let (bx, by) = self.coords[self.index[&b]];
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Lower bound on travel time between nodes, minutes.
    pub fn time_lower_bound(&self, a: NodeId, b: NodeId) -> f64 {
        self.euclid_km(a, b) / self.vmax
    }

    /// Exit time when entering link `li` at time `t`.
    pub fn traverse(&self, li: usize, t: f64) -> f64 {
        self.links[li].profile.exit(t, self.bin_minutes)
    }

    pub fn link(&self, li: usize) -> &Link {
        &self.links[li]
    }

    /// Length of the direct link between two nodes, if one exists.
    pub fn link_length(&self, from: NodeId, to: NodeId) -> Option<f64> {
        let fi = *self.index.get(&from)?;
        let ti = *self.index.get(&to)?;
        self.adjacency[fi]
            .iter()
            .find(|&&(v, _)| v == ti)
            .map(|&(_, li)| self.links[li].length_km)
    }

    /// Time-dependent earliest-arrival path. Ties on arrival time break to
    /// the lexicographically smaller node-id sequence discovered by the
    /// search, which makes results deterministic.
    pub fn shortest_itinerary(
        &self,
        origin: NodeId,
        dest: NodeId,
        depart: f64,
    ) -> Result<Itinerary, RouteError> {
        let o = *self.index.get(&origin).ok_or(RouteError::UnknownNode(origin))?;
        let d = *self.index.get(&dest).ok_or(RouteError::UnknownNode(dest))?;
        if o == d {
            return Ok(Itinerary {
                nodes: vec![(origin, depart)],
                distance_km: 0.0,
                kind: ItineraryKind::Scheduled,
            });
        }

        let n = self.ids.len();
        let mut arrival = vec![f64::INFINITY; n];
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut settled = vec![false; n];
        let goal = self.coords[d];
        let h = |i: usize| {
            let (x, y) = self.coords[i];
            ((x - goal.0).powi(2) + (y - goal.1).powi(2)).sqrt() / self.vmax
        };

        let mut heap: BinaryHeap<Reverse<(HeapKey, u32, usize)>> = BinaryHeap::new();
        arrival[o] = depart;
        heap.push(Reverse((HeapKey(depart + h(o)), self.ids[o].0, o)));

        while let Some(Reverse((_, _, u))) = heap.pop() {
            if settled[u] {
                continue;
            }
            settled[u] = true;
            if u == d {
                break;
            }
            let t = arrival[u];
            for &(v, li) in &self.adjacency[u] {
                if settled[v] {
                    continue;
                }
                let exit = self.traverse(li, t);
                if exit < arrival[v] {
                    arrival[v] = exit;
                    parent[v] = Some((u, li));
                    heap.push(Reverse((HeapKey(exit + h(v)), self.ids[v].0, v)));
                } else if exit == arrival[v] && parent[v].is_some() {
                    // Equal arrival: keep the lexicographically smaller path.
                    let mut cand = self.walk_ids(&parent, u);
                    cand.push(self.ids[v].0);
                    let cur = self.walk_ids(&parent, v);
                    if cand < cur {
                        parent[v] = Some((u, li));
                        heap.push(Reverse((HeapKey(exit + h(v)), self.ids[v].0, v)));
                    }
                }
            }
        }

        if !arrival[d].is_finite() {
            return Err(RouteError::NoPath { origin, dest });
        }

        let mut chain = Vec::new();
        let mut cur = d;
        loop {
            chain.push(cur);
            match parent[cur] {
                Some((p, _)) => cur = p,
                None => break,
            }
        }
        chain.reverse();
        let mut nodes = Vec::with_capacity(chain.len());
        let mut distance = 0.0;
        let mut t = depart;
        nodes.push((self.ids[chain[0]], t));
        for w in chain.windows(2) {
            let (_, li) = parent[w[1]].unwrap();
            t = self.traverse(li, t);
            distance += self.links[li].length_km;
            nodes.push((self.ids[w[1]], t));
        }
        Ok(Itinerary { nodes, distance_km: distance, kind: ItineraryKind::Scheduled })
    }

    fn walk_ids(&self, parent: &[Option<(usize, usize)>], mut v: usize) -> Vec<u32> {
        let mut ids = vec![self.ids[v].0];
        while let Some((p, _)) = parent[v] {
            ids.push(self.ids[p].0);
            v = p;
        }
        ids.reverse();
        ids
    }
}

/// f64 heap key with a total order; all keys are finite.
#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapKey(f64);

impl Eq for HeapKey {}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug)]
pub enum RouteError {
    UnknownNode(NodeId),
    NoPath { origin: NodeId, dest: NodeId },
}

impl fmt::Display for RouteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteError::UnknownNode(n) => write!(f, "unknown node {n}"),
            RouteError::NoPath { origin, dest } => {
                write!(f, "no path from {origin} to {dest}")
            }
        }
    }
}

impl std::error::Error for RouteError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItineraryKind {
    Scheduled,
    Actual,
}

/// Ordered (node, timestamp) sequence over network links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Itinerary {
    pub nodes: Vec<(NodeId, f64)>,
    pub distance_km: f64,
    pub kind: ItineraryKind,
}

impl Itinerary {
    pub fn start_time(&self) -> f64 {
        self.nodes.first().map(|&(_, t)| t).unwrap_or(0.0)
    }

    pub fn end_time(&self) -> f64 {
        self.nodes.last().map(|&(_, t)| t).unwrap_or(0.0)
    }

    pub fn end_node(&self) -> NodeId {
        self.nodes.last().expect("nonempty itinerary").0
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }
}

/// Result of projecting a driver position onto an itinerary at time `now`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    /// Next node the driver can act at, and when they reach it.
    EnRoute { node: NodeId, available_at: f64 },
    /// `now` is past the itinerary end; the trip leg is complete.
    Arrived { node: NodeId, at: f64 },
}

/// First itinerary node with timestamp >= `now`. Pickups and drop-offs are
/// never placed mid-link, so a mid-link position rounds forward.
pub fn advance_position(itinerary: &Itinerary, now: f64) -> Position {
    debug_assert!(!itinerary.nodes.is_empty());
    for &(node, t) in &itinerary.nodes {
        if t >= now {
            return Position::EnRoute { node, available_at: t };
        }
    }
    let &(node, t) = itinerary.nodes.last().unwrap();
    Position::Arrived { node, at: t }
}

/// Scale segment durations by 1/speed_factor; first timestamp unchanged.
pub fn actualize_itinerary(scheduled: &Itinerary, speed_factor: f64) -> Itinerary {
    debug_assert!(speed_factor > 0.0);
    let mut nodes = Vec::with_capacity(scheduled.nodes.len());
    let mut t = scheduled.start_time();
    nodes.push((scheduled.nodes[0].0, t));
    for w in scheduled.nodes.windows(2) {
        let dt = w[1].1 - w[0].1;
        t += dt / speed_factor;
        nodes.push((w[1].0, t));
    }
    Itinerary { nodes, distance_km: scheduled.distance_km, kind: ItineraryKind::Actual }
}

/// CSV loaders for the three network files.
///
/// nodes: `node_id,x,y` (km plane); links: `from,to,length_km`;
/// profiles: `from,to,bin_start_min,travel_time_min`. Missing bins inherit
/// the previous bin; links without profile rows get a constant free-flow
/// time of length × `free_flow_min_per_km`.
pub struct NetworkLoader {
    pub bin_minutes: f64,
    pub free_flow_min_per_km: f64,
}

impl Default for NetworkLoader {
    fn default() -> Self {
        NetworkLoader {
            bin_minutes: DEFAULT_BIN_MINUTES,
            free_flow_min_per_km: DEFAULT_MIN_PER_KM,
        }
    }
}

impl NetworkLoader {
    pub fn load(
        &self,
        nodes_file: &Path,
        links_file: &Path,
        profiles_file: &Path,
    ) -> Result<Network, NetworkError> {
        let nodes = self.load_nodes(nodes_file)?;
        let raw_links = self.load_links(links_file)?;
        let profiles = self.load_profiles(profiles_file)?;
        self.assemble(nodes, raw_links, profiles)
    }

    pub fn assemble(
        &self,
        nodes: Vec<(NodeId, f64, f64)>,
        raw_links: Vec<(NodeId, NodeId, f64)>,
        mut profiles: BTreeMap<(NodeId, NodeId), BTreeMap<i64, f64>>,
    ) -> Result<Network, NetworkError> {
        let mut links = Vec::with_capacity(raw_links.len());
        for (from, to, length_km) in raw_links {
            let profile = match profiles.remove(&(from, to)) {
                Some(bins) => self.bins_to_profile(&bins)?,
                None => Profile::constant(length_km * self.free_flow_min_per_km),
            };
            links.push(Link { from, to, length_km, profile });
        }
        Network::new(nodes, links, self.bin_minutes)
    }

    fn bins_to_profile(&self, bins: &BTreeMap<i64, f64>) -> Result<Profile, NetworkError> {
        let last = *bins.keys().last().expect("nonempty profile");
        let count = (last.max(0) as usize) + 1;
        let mut times = Vec::with_capacity(count);
        // Bins before the first row backfill from it; later gaps inherit.
        let mut current = *bins.values().next().unwrap();
        for b in 0..count as i64 {
            if let Some(&tt) = bins.get(&b) {
                current = tt;
            }
            times.push(current);
        }
        Ok(Profile::new(times, self.bin_minutes))
    }

    fn load_nodes(&self, path: &Path) -> Result<Vec<(NodeId, f64, f64)>, NetworkError> {
        let mut out = Vec::new();
        for (line, rec) in read_csv(path)?.into_iter().enumerate() {
            let err = |msg: &str| NetworkError::Parse {
                file: path.display().to_string(),
                line: line + 2,
                msg: msg.to_string(),
            };
            if rec.len() < 3 {
                return Err(err("expected node_id,x,y"));
            }
            let id: u32 = rec[0].trim().parse().map_err(|_| err("bad node_id"))?;
            let x: f64 = rec[1].trim().parse().map_err(|_| err("bad x"))?;
            let y: f64 = rec[2].trim().parse().map_err(|_| err("bad y"))?;
            out.push((NodeId(id), x, y));
        }
        Ok(out)
    }

    fn load_links(&self, path: &Path) -> Result<Vec<(NodeId, NodeId, f64)>, NetworkError> {
        let mut out = Vec::new();
        for (line, rec) in read_csv(path)?.into_iter().enumerate() {
            let err = |msg: &str| NetworkError::Parse {
                file: path.display().to_string(),
                line: line + 2,
                msg: msg.to_string(),
            };
            if rec.len() < 3 {
                return Err(err("expected from,to,length_km"));
            }
            let from: u32 = rec[0].trim().parse().map_err(|_| err("bad from"))?;
            let to: u32 = rec[1].trim().parse().map_err(|_| err("bad to"))?;
            let length: f64 = rec[2].trim().parse().map_err(|_| err("bad length_km"))?;
            out.push((NodeId(from), NodeId(to), length));
        }
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn load_profiles(
        &self,
        path: &Path,
    ) -> Result<BTreeMap<(NodeId, NodeId), BTreeMap<i64, f64>>, NetworkError> {
        let mut out: BTreeMap<(NodeId, NodeId), BTreeMap<i64, f64>> = BTreeMap::new();
        for (line, rec) in read_csv(path)?.into_iter().enumerate() {
            let err = |msg: &str| NetworkError::Parse {
                file: path.display().to_string(),
                line: line + 2,
                msg: msg.to_string(),
            };
            if rec.len() < 4 {
                return Err(err("expected from,to,bin_start_min,travel_time_min"));
            }
            let from: u32 = rec[0].trim().parse().map_err(|_| err("bad from"))?;
            let to: u32 = rec[1].trim().parse().map_err(|_| err("bad to"))?;
            let start: f64 = rec[2].trim().parse().map_err(|_| err("bad bin_start_min"))?;
            let tt: f64 = rec[3].trim().parse().map_err(|_| err("bad travel_time_min"))?;
            let bin = (start / self.bin_minutes).round() as i64;
            if bin < 0 {
                return Err(err("negative bin_start_min"));
            }
            out.entry((NodeId(from), NodeId(to))).or_default().insert(bin, tt);
        }
        Ok(out)
    }
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, NetworkError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(|s| s.to_string()).collect());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_network(n: u32, length: f64, tt: f64) -> Network {
        let nodes: Vec<_> = (0..n).map(|i| (NodeId(i), i as f64, 0.0)).collect();
        let mut links = Vec::new();
        for i in 0..n - 1 {
            links.push(Link {
                from: NodeId(i),
                to: NodeId(i + 1),
                length_km: length,
                profile: Profile::constant(tt),
            });
        }
        Network::new(nodes, links, DEFAULT_BIN_MINUTES).unwrap()
    }

    #[test]
    fn minimal_two_node_network() {
        let net = Network::new(
            vec![(NodeId(0), 0.0, 0.0), (NodeId(1), 1.0, 0.0)],
            vec![Link {
                from: NodeId(0),
                to: NodeId(1),
                length_km: 1.0,
                profile: Profile::constant(1.5),
            }],
            DEFAULT_BIN_MINUTES,
        )
        .unwrap();
        assert_eq!(net.link_count(), 1);
    }

    #[test]
    fn dangling_node_reference_rejected() {
        let err = Network::new(
            vec![(NodeId(0), 0.0, 0.0)],
            vec![Link {
                from: NodeId(0),
                to: NodeId(99),
                length_km: 1.0,
                profile: Profile::constant(1.0),
            }],
            DEFAULT_BIN_MINUTES,
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::Validation(_)));
    }

    #[test]
    fn nonpositive_length_rejected() {
        let err = Network::new(
            vec![(NodeId(0), 0.0, 0.0), (NodeId(1), 1.0, 0.0)],
            vec![Link {
                from: NodeId(0),
                to: NodeId(1),
                length_km: 0.0,
                profile: Profile::constant(1.0),
            }],
            DEFAULT_BIN_MINUTES,
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::Validation(_)));
    }

    #[test]
    fn fifo_clamp_applies_to_dropping_profile() {
        // Bin width 5: entering at 0 exits at 10; raw exit at 5 would be 6.
        // The clamp keeps exit(5) at or above the exit reachable earlier.
        let p = Profile::new(vec![10.0, 1.0], 5.0);
        let exit0 = p.exit(0.0, 5.0);
        let exit5 = p.exit(5.0, 5.0);
        assert_eq!(exit0, 10.0);
        assert!(exit5 >= 10.0, "exit at 5 must be >= 10, got {exit5}");
        // Hand-applied clamp formula: max(5 + 1, floor = 5 + 10) = 15.
        assert_eq!(exit5, 15.0);
    }

    #[test]
    fn fifo_exit_is_monotone() {
        let p = Profile::new(vec![10.0, 1.0, 4.0, 2.0], 5.0);
        let mut prev = f64::NEG_INFINITY;
        let mut t = 0.0;
        while t < 30.0 {
            let e = p.exit(t, 5.0);
            assert!(e >= prev, "exit decreased at t={t}");
            prev = e;
            t += 0.25;
        }
    }

    #[test]
    fn identity_route() {
        let net = line_network(4, 1.0, 1.0);
        let it = net.shortest_itinerary(NodeId(2), NodeId(2), 7.0).unwrap();
        assert_eq!(it.nodes, vec![(NodeId(2), 7.0)]);
        assert_eq!(it.distance_km, 0.0);
    }

    #[test]
    fn chain_route() {
        let net = line_network(4, 1.0, 1.0);
        let it = net.shortest_itinerary(NodeId(0), NodeId(3), 0.0).unwrap();
        let expect: Vec<(NodeId, f64)> =
            (0..4).map(|i| (NodeId(i), i as f64)).collect();
        assert_eq!(it.nodes, expect);
        assert_eq!(it.distance_km, 3.0);
    }

    #[test]
    fn unreachable_destination() {
        // Two disconnected nodes.
        let net = Network::new(
            vec![(NodeId(0), 0.0, 0.0), (NodeId(1), 5.0, 0.0)],
            vec![],
            DEFAULT_BIN_MINUTES,
        )
        .unwrap();
        assert!(matches!(
            net.shortest_itinerary(NodeId(0), NodeId(1), 0.0),
            Err(RouteError::NoPath { .. })
        ));
    }

    #[test]
    fn advance_position_rounds_forward_to_next_node() {
        // Driver on link (2,3) at now=16; node 3 is stamped 17.
        let it = Itinerary {
            nodes: vec![
                (NodeId(1), 10.0),
                (NodeId(2), 14.0),
                (NodeId(3), 17.0),
                (NodeId(4), 21.0),
            ],
            distance_km: 3.0,
            kind: ItineraryKind::Actual,
        };
        assert_eq!(
            advance_position(&it, 16.0),
            Position::EnRoute { node: NodeId(3), available_at: 17.0 }
        );
        // Exact node timestamp boundary.
        assert_eq!(
            advance_position(&it, 14.0),
            Position::EnRoute { node: NodeId(2), available_at: 14.0 }
        );
        // Before departure.
        assert_eq!(
            advance_position(&it, 0.0),
            Position::EnRoute { node: NodeId(1), available_at: 10.0 }
        );
        // Past the end.
        assert_eq!(advance_position(&it, 30.0), Position::Arrived { node: NodeId(4), at: 21.0 });
    }

    #[test]
    fn actualize_scales_durations() {
        let it = Itinerary {
            nodes: vec![
                (NodeId(0), 0.0),
                (NodeId(1), 1.0),
                (NodeId(2), 2.0),
                (NodeId(3), 3.0),
            ],
            distance_km: 3.0,
            kind: ItineraryKind::Scheduled,
        };
        let same = actualize_itinerary(&it, 1.0);
        assert_eq!(same.nodes, it.nodes);
        let fast = actualize_itinerary(&it, 2.0);
        let times: Vec<f64> = fast.nodes.iter().map(|&(_, t)| t).collect();
        assert_eq!(times, vec![0.0, 0.5, 1.0, 1.5]);
        let slow = actualize_itinerary(&it, 0.5);
        let times: Vec<f64> = slow.nodes.iter().map(|&(_, t)| t).collect();
        assert_eq!(times, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(slow.kind, ItineraryKind::Actual);
    }

    #[test]
    fn distance_is_departure_time_invariant() {
        let net = line_network(6, 1.3, 2.0);
        let a = net.shortest_itinerary(NodeId(0), NodeId(5), 0.0).unwrap();
        let b = net.shortest_itinerary(NodeId(0), NodeId(5), 37.0).unwrap();
        assert_eq!(a.distance_km, b.distance_km);
    }
}
