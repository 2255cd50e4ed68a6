//! Scenario configuration, demand/supply generation, replications, and
//! sensitivity sweeps.
//!
//! A scenario draws origin-destination pairs from a trip table (a CSV file
//! or the built-in synthetic grid city), splits them over demand periods,
//! samples agent attributes from configured distributions, and runs one or
//! more replications with seeds derived from the master seed.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::behavior::ChoiceMode;
use crate::engine::{
    self, DriverSpec, EngineOutput, GenerationBatch, PassengerSpec, Population, SimParams,
};
use crate::metrics::{self, MetricsReport};
use crate::network::{Link, Network, NetworkLoader, NodeId, Profile};
use crate::par;
use crate::rng::{self, streams, Stream};
use crate::AgentId;

#[derive(Debug)]
pub enum ScenarioError {
    Config(String),
    Io(String),
    Network(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Config(m) => write!(f, "config error: {m}"),
            ScenarioError::Io(m) => write!(f, "io error: {m}"),
            ScenarioError::Network(m) => write!(f, "network error: {m}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

/// A named sampling distribution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Dist {
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

impl Dist {
    pub fn sample(&self, s: &mut Stream) -> f64 {
        match *self {
            Dist::Uniform { low, high } => s.uniform(low, high),
            Dist::Constant { value } => value,
        }
    }

    fn validate(&self, name: &str) -> Result<(), ScenarioError> {
        if let Dist::Uniform { low, high } = self {
            if low > high {
                return Err(ScenarioError::Config(format!(
                    "attributes.{name}: low {low} > high {high}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSection {
    pub passengers: u32,
    /// Absolute driver count; `supply_level` (fraction of passengers)
    /// wins when set.
    pub drivers: u32,
    pub supply_level: Option<f64>,
    pub period_minutes: f64,
    pub demand_shares: Vec<f64>,
    pub warmup: bool,
    /// Fraction of totals in each of the two warmup periods.
    pub warmup_share: f64,
    pub replications: u32,
    pub master_seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            passengers: 2000,
            drivers: 1600,
            supply_level: None,
            period_minutes: 15.0,
            demand_shares: vec![0.1, 0.4, 0.4, 0.1],
            warmup: true,
            warmup_share: 0.1,
            replications: 1,
            master_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingSection {
    pub window_min: f64,
    pub decision_interval_min: f64,
    pub unit_price_per_km: f64,
    pub cancellation_fee: f64,
    pub noshow_probability: f64,
    pub max_new_passengers: usize,
    pub response_mode: ChoiceMode,
    pub reschedule_tolerance_min: f64,
}

impl Default for MatchingSection {
    fn default() -> Self {
        let p = SimParams::default();
        MatchingSection {
            window_min: p.matching_window_min,
            decision_interval_min: p.decision_interval_min,
            unit_price_per_km: p.unit_price_per_km,
            cancellation_fee: p.cancellation_fee,
            noshow_probability: p.noshow_probability,
            max_new_passengers: p.max_new_passengers,
            response_mode: p.response_mode,
            reschedule_tolerance_min: p.reschedule_tolerance_min,
        }
    }
}

impl MatchingSection {
    pub fn params(&self) -> SimParams {
        SimParams {
            matching_window_min: self.window_min,
            decision_interval_min: self.decision_interval_min,
            unit_price_per_km: self.unit_price_per_km,
            cancellation_fee: self.cancellation_fee,
            noshow_probability: self.noshow_probability,
            max_new_passengers: self.max_new_passengers,
            response_mode: self.response_mode,
            reschedule_tolerance_min: self.reschedule_tolerance_min,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    /// CSV inputs; when absent the grid generator is used.
    pub nodes: Option<PathBuf>,
    pub links: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub od: Option<PathBuf>,
    pub bin_minutes: Option<f64>,
    pub grid: GridParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    pub n: u32,
    pub spacing_km: f64,
    pub total_trips: u64,
    /// Gravity deterrence scale, km.
    pub deterrence_km: f64,
    /// Gravity distance exponent; larger favors longer trips.
    pub distance_exponent: f64,
    /// Peak multiplier on link travel times during the demand hour.
    pub peak_factor: f64,
    pub bin_minutes: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            n: 10,
            spacing_km: 1.0,
            total_trips: 50_000,
            deterrence_km: 6.0,
            distance_exponent: 2.0,
            peak_factor: 1.3,
            bin_minutes: 15.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Attributes {
    pub vot_passenger: Dist,
    pub vot_driver: Dist,
    pub alone_unit_cost: Dist,
    pub rs_unit_cost: Dist,
    pub max_excess_min: Dist,
    pub matching_wait_min: Dist,
    pub speed_factor: Dist,
    pub capacity: Dist,
    pub seats: Dist,
    pub max_total_passengers: Dist,
    pub op_cost_per_km: Dist,
}

impl Default for Attributes {
    fn default() -> Self {
        Attributes {
            vot_passenger: Dist::Uniform { low: 0.5, high: 1.0 },
            vot_driver: Dist::Uniform { low: 3.0, high: 3.5 },
            alone_unit_cost: Dist::Uniform { low: 3.0, high: 3.5 },
            rs_unit_cost: Dist::Uniform { low: 1.5, high: 3.5 },
            max_excess_min: Dist::Uniform { low: 15.0, high: 45.0 },
            matching_wait_min: Dist::Uniform { low: 5.0, high: 10.0 },
            speed_factor: Dist::Uniform { low: 0.9, high: 1.1 },
            capacity: Dist::Constant { value: 4.0 },
            seats: Dist::Constant { value: 1.0 },
            max_total_passengers: Dist::Constant { value: 8.0 },
            op_cost_per_km: Dist::Constant { value: 0.0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Outputs {
    pub matching_trace: bool,
    pub profile_step_min: f64,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs { matching_trace: false, profile_step_min: 1.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub matching: MatchingSection,
    pub network: NetworkSection,
    pub attributes: Attributes,
    pub outputs: Outputs,
}

impl ScenarioConfig {
    pub fn driver_count(&self) -> u32 {
        match self.scenario.supply_level {
            Some(level) => (level * self.scenario.passengers as f64).round() as u32,
            None => self.scenario.drivers,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let s = &self.scenario;
        let share_sum: f64 = s.demand_shares.iter().sum();
        if s.demand_shares.is_empty() || (share_sum - 1.0).abs() > 1e-9 {
            return Err(ScenarioError::Config(format!(
                "scenario.demand_shares must sum to 1 (got {share_sum})"
            )));
        }
        if s.demand_shares.iter().any(|&x| x < 0.0) {
            return Err(ScenarioError::Config("negative demand share".into()));
        }
        if !(s.period_minutes > 0.0) {
            return Err(ScenarioError::Config("scenario.period_minutes must be > 0".into()));
        }
        if !(self.matching.window_min > 0.0) {
            return Err(ScenarioError::Config("matching.window_min must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.matching.noshow_probability) {
            return Err(ScenarioError::Config(
                "matching.noshow_probability must be in [0, 1]".into(),
            ));
        }
        let a = &self.attributes;
        for (name, d) in [
            ("vot_passenger", a.vot_passenger),
            ("vot_driver", a.vot_driver),
            ("alone_unit_cost", a.alone_unit_cost),
            ("rs_unit_cost", a.rs_unit_cost),
            ("max_excess_min", a.max_excess_min),
            ("matching_wait_min", a.matching_wait_min),
            ("speed_factor", a.speed_factor),
            ("capacity", a.capacity),
            ("seats", a.seats),
            ("max_total_passengers", a.max_total_passengers),
            ("op_cost_per_km", a.op_cost_per_km),
        ] {
            d.validate(name)?;
        }
        Ok(())
    }
}

/// Parse a TOML config file, then apply dotted-path overrides like
/// `matching.window_min=4`.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: ScenarioConfig = value
        .try_into()
        .map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ScenarioError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ScenarioError::Config(format!("override `{spec}` is not key=value")))?;
    let parsed: toml::Value = if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if raw.trim_start().starts_with('[') {
        raw.parse::<toml::Value>()
            .map_err(|e| ScenarioError::Config(format!("override `{spec}`: {e}")))?
    } else {
        toml::Value::String(raw.to_string())
    };
    let mut cur = root;
    let parts: Vec<&str> = path.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            cur.as_table_mut()
                .ok_or_else(|| {
                    ScenarioError::Config(format!("override `{spec}`: {part} is not a table"))
                })?
                .insert(part.to_string(), parsed);
            return Ok(());
        }
        let table = cur.as_table_mut().ok_or_else(|| {
            ScenarioError::Config(format!("override `{spec}`: {part} is not a table"))
        })?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// Origin-destination trip table; the sampling weight is the trip count.
#[derive(Debug, Clone)]
pub struct OdTable {
    pub entries: Vec<(NodeId, NodeId, u64)>,
    pub total_trips: u64,
}

impl OdTable {
    fn prefix_sums(&self) -> Vec<u64> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.entries.len());
        for &(_, _, w) in &self.entries {
            acc += w;
            out.push(acc);
        }
        out
    }
}

/// Load `origin,destination,trips` CSV.
pub fn load_od_csv(path: &Path) -> Result<OdTable, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    let mut total = 0u64;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let err = |m: &str| {
            ScenarioError::Config(format!("{} line {}: {m}", path.display(), i + 2))
        };
        let o: u32 = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err("bad origin"))?;
        let d: u32 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err("bad destination"))?;
        let w: u64 = rec
            .get(2)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err("bad trips"))?;
        if w > 0 {
            entries.push((NodeId(o), NodeId(d), w));
            total += w;
        }
    }
    Ok(OdTable { entries, total_trips: total })
}

/// Build the synthetic grid city: an n×n lattice with a mid-horizon
/// congestion bump on every link, plus a gravity-weighted trip table.
pub fn grid_city(p: &GridParams) -> Result<(Network, OdTable), ScenarioError> {
    if p.n < 2 {
        return Err(ScenarioError::Config("grid.n must be at least 2".into()));
    }
    let n = p.n;
    let id = |r: u32, c: u32| NodeId(r * n + c);
    let mut nodes = Vec::new();
    for r in 0..n {
        for c in 0..n {
            nodes.push((id(r, c), c as f64 * p.spacing_km, r as f64 * p.spacing_km));
        }
    }
    let base_tt = p.spacing_km * crate::network::DEFAULT_MIN_PER_KM;
    let bump = (p.peak_factor - 1.0).max(0.0);
    let factors = [1.0, 1.0, 1.0 + 0.5 * bump, 1.0 + bump, 1.0 + bump, 1.0 + 0.5 * bump, 1.0, 1.0];
    let times: Vec<f64> = factors.iter().map(|f| base_tt * f).collect();
    let mut links = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let mut push = |a: NodeId, b: NodeId| {
                links.push(Link {
                    from: a,
                    to: b,
                    length_km: p.spacing_km,
                    profile: Profile::new(times.clone(), p.bin_minutes),
                });
            };
            if c + 1 < n {
                push(id(r, c), id(r, c + 1));
                push(id(r, c + 1), id(r, c));
            }
            if r + 1 < n {
                push(id(r, c), id(r + 1, c));
                push(id(r + 1, c), id(r, c));
            }
        }
    }
    let net = Network::new(nodes, links, p.bin_minutes)
        .map_err(|e| ScenarioError::Network(e.to_string()))?;

    // Gravity weights over euclidean distances.
    let ids: Vec<NodeId> = net.nodes().to_vec();
    let mut weights = Vec::new();
    let mut weight_sum = 0.0;
    for &a in &ids {
        for &b in &ids {
            if a == b {
                continue;
            }
            let d = net.euclid_km(a, b);
            let w = d.powf(p.distance_exponent) * (-d / p.deterrence_km).exp();
            weights.push((a, b, w));
            weight_sum += w;
        }
    }
    let mut entries = Vec::with_capacity(weights.len());
    let mut total = 0u64;
    for (a, b, w) in weights {
        let trips = (p.total_trips as f64 * w / weight_sum).round() as u64;
        if trips > 0 {
            entries.push((a, b, trips));
            total += trips;
        }
    }
    Ok((net, OdTable { entries, total_trips: total }))
}

/// Resolve the configured network and trip table.
pub fn build_network(cfg: &ScenarioConfig) -> Result<(Network, OdTable), ScenarioError> {
    match (&cfg.network.nodes, &cfg.network.links) {
        (Some(nodes), Some(links)) => {
            let profiles = cfg.network.profiles.clone().ok_or_else(|| {
                ScenarioError::Config("network.profiles required with nodes/links".into())
            })?;
            let od_path = cfg.network.od.clone().ok_or_else(|| {
                ScenarioError::Config("network.od required with nodes/links".into())
            })?;
            let loader = NetworkLoader {
                bin_minutes: cfg
                    .network
                    .bin_minutes
                    .unwrap_or(crate::network::DEFAULT_BIN_MINUTES),
                ..NetworkLoader::default()
            };
            let net = loader
                .load(nodes, links, &profiles)
                .map_err(|e| ScenarioError::Network(e.to_string()))?;
            let od = load_od_csv(&od_path)?;
            Ok((net, od))
        }
        (None, None) => grid_city(&cfg.network.grid),
        _ => Err(ScenarioError::Config(
            "network.nodes and network.links must be given together".into(),
        )),
    }
}

/// Split `total` across periods by shares using largest remainders.
fn split_counts(total: u32, shares: &[f64]) -> Vec<u32> {
    let mut counts: Vec<u32> = shares.iter().map(|s| (s * total as f64).floor() as u32).collect();
    let mut remainders: Vec<(usize, f64)> = shares
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s * total as f64 - (s * total as f64).floor()))
        .collect();
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let assigned: u32 = counts.iter().sum();
    for k in 0..(total - assigned) as usize {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    counts
}

/// Draw `k` distinct trip-unit indices from [0, total) without replacement.
fn sample_units(total: u64, k: u64, stream: &mut Stream) -> Vec<u64> {
    assert!(k <= total);
    let mut swaps: HashMap<u64, u64> = HashMap::new();
    let mut out = Vec::with_capacity(k as usize);
    for i in 0..k {
        let j = i + stream.below(total - i);
        let vi = *swaps.get(&i).unwrap_or(&i);
        let vj = *swaps.get(&j).unwrap_or(&j);
        out.push(vj);
        swaps.insert(j, vi);
    }
    out
}

fn unit_to_od(od: &OdTable, prefix: &[u64], unit: u64) -> (NodeId, NodeId) {
    let idx = prefix.partition_point(|&acc| acc <= unit);
    let (o, d, _) = od.entries[idx];
    (o, d)
}

/// Sample the full population per the configured demand pattern. Warmup
/// periods (when enabled) come first and are flagged.
pub fn sample_population(
    cfg: &ScenarioConfig,
    od: &OdTable,
    seed: u64,
) -> Result<Population, ScenarioError> {
    let s = &cfg.scenario;
    let n_p = s.passengers;
    let n_d = cfg.driver_count();
    let warmup_p = if s.warmup { (s.warmup_share * n_p as f64).round() as u32 } else { 0 };
    let warmup_d = if s.warmup { (s.warmup_share * n_d as f64).round() as u32 } else { 0 };

    let total_agents = (n_p + n_d + 2 * (warmup_p + warmup_d)) as u64;
    if total_agents > od.total_trips {
        return Err(ScenarioError::Config(format!(
            "sample of {total_agents} trips exceeds the {} trips in the OD table",
            od.total_trips
        )));
    }

    let mut unit_stream = Stream::new(seed, streams::POPULATION);
    let units = sample_units(od.total_trips, total_agents, &mut unit_stream);
    let prefix = od.prefix_sums();
    let mut unit_iter = units.into_iter();

    // Period layout: two warmup periods precede the main ones.
    let period_len = s.period_minutes;
    let warmup_periods = if s.warmup { 2 } else { 0 };
    let offset = warmup_periods as f64 * period_len;

    let p_counts = split_counts(n_p, &s.demand_shares);
    let d_counts = split_counts(n_d, &s.demand_shares);

    struct PeriodPlan {
        start: f64,
        end: f64,
        period: u32,
        warmup: bool,
        passengers: u32,
        drivers: u32,
    }
    let mut plans = Vec::new();
    for w in 0..warmup_periods {
        plans.push(PeriodPlan {
            start: w as f64 * period_len,
            end: (w + 1) as f64 * period_len,
            period: w,
            warmup: true,
            passengers: warmup_p,
            drivers: warmup_d,
        });
    }
    for (k, (&pc, &dc)) in p_counts.iter().zip(&d_counts).enumerate() {
        plans.push(PeriodPlan {
            start: offset + k as f64 * period_len,
            end: offset + (k + 1) as f64 * period_len,
            period: warmup_periods + k as u32,
            warmup: false,
            passengers: pc,
            drivers: dc,
        });
    }

    let mut next_id = 0u32;
    let mut batches = Vec::new();
    for plan in plans {
        let mut passengers = Vec::new();
        let mut drivers = Vec::new();
        for _ in 0..plan.passengers {
            let id = next_id;
            next_id += 1;
            let (origin, destination) =
                unit_to_od(od, &prefix, unit_iter.next().expect("unit per agent"));
            let mut attr =
                Stream::new(seed, streams::agent(streams::AGENT_ATTRS, id as u64));
            let st = attr.uniform(plan.start, plan.end);
            let ot = attr.uniform(st, plan.end);
            let vot = cfg.attributes.vot_passenger.sample(&mut attr);
            let alone_unit = cfg.attributes.alone_unit_cost.sample(&mut attr);
            let rs_unit = cfg.attributes.rs_unit_cost.sample(&mut attr);
            let max_excess = cfg.attributes.max_excess_min.sample(&mut attr);
            let wait_base = cfg.attributes.matching_wait_min.sample(&mut attr);
            let seats = cfg.attributes.seats.sample(&mut attr).round().max(1.0) as u32;
            passengers.push(PassengerSpec {
                id: AgentId(id),
                origin,
                destination,
                depart_time: st,
                online_time: ot,
                seats,
                beta_time: -vot,
                beta_cost: -1.0,
                alone_unit_cost: alone_unit,
                beta_exp_pay: rs_unit / alone_unit,
                max_excess_min: max_excess,
                matching_wait_base_min: wait_base,
            });
        }
        for _ in 0..plan.drivers {
            let id = next_id;
            next_id += 1;
            let (origin, destination) =
                unit_to_od(od, &prefix, unit_iter.next().expect("unit per agent"));
            let mut attr =
                Stream::new(seed, streams::agent(streams::AGENT_ATTRS, id as u64));
            let st = attr.uniform(plan.start, plan.end);
            let ot = attr.uniform(st, plan.end);
            let vot = cfg.attributes.vot_driver.sample(&mut attr);
            let max_excess = cfg.attributes.max_excess_min.sample(&mut attr);
            let capacity = cfg.attributes.capacity.sample(&mut attr).round().max(1.0) as u32;
            let max_total =
                cfg.attributes.max_total_passengers.sample(&mut attr).round().max(1.0) as u32;
            let op_cost = cfg.attributes.op_cost_per_km.sample(&mut attr);
            let speed = cfg.attributes.speed_factor.sample(&mut attr);
            let decision_frac = attr.unit();
            drivers.push(DriverSpec {
                id: AgentId(id),
                origin,
                destination,
                depart_time: st,
                online_time: ot,
                capacity,
                max_total_passengers: max_total,
                max_excess_min: max_excess,
                beta_time: -vot,
                beta_cost: -1.0,
                operating_cost_per_km: op_cost,
                speed_factor: speed,
                ridesharing: true,
                decision_frac,
            });
        }
        batches.push(GenerationBatch {
            time: plan.start,
            period: plan.period,
            warmup: plan.warmup,
            passengers,
            drivers,
        });
    }

    Ok(Population { batches })
}

/// One replication: sample, simulate, audit, measure.
pub fn run_one(
    cfg: &ScenarioConfig,
    net: &Network,
    od: &OdTable,
    seed: u64,
) -> Result<(EngineOutput, MetricsReport), ScenarioError> {
    let population = sample_population(cfg, od, seed)?;
    let params = cfg.matching.params();
    let output = engine::run(net, &population, &params, seed);
    metrics::audit(&output.log)
        .map_err(|e| ScenarioError::Config(format!("conservation audit: {e}")))?;
    let report = metrics::compute(&output.log)
        .map_err(|e| ScenarioError::Config(format!("metrics: {e}")))?;
    Ok((output, report))
}

/// Seed for replication `rep` under a master seed.
pub fn replication_seed(master: u64, rep: u32) -> u64 {
    rng::keyed_u64(master, 0xC0FFEE, rep as u64)
}

/// Run all configured replications in parallel (with the `parallel`
/// feature) and return per-replication outputs in replication order.
pub fn run_replications(
    cfg: &ScenarioConfig,
    net: &Network,
    od: &OdTable,
) -> Result<Vec<(u64, EngineOutput, MetricsReport)>, ScenarioError> {
    let reps = cfg.scenario.replications.max(1);
    let results: Vec<Result<(u64, EngineOutput, MetricsReport), String>> =
        par::map_range(reps as usize, |i| {
            let seed = replication_seed(cfg.scenario.master_seed, i as u32);
            let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                run_one(cfg, net, od, seed)
            }));
            match run {
                Ok(Ok(out)) => Ok((seed, out.0, out.1)),
                Ok(Err(e)) => Err(format!("replication {i} (seed {seed}): {e}")),
                Err(_) => Err(format!("replication {i} (seed {seed}) panicked")),
            }
        });
    results
        .into_iter()
        .collect::<Result<Vec<_>, String>>()
        .map_err(ScenarioError::Config)
}

/// Sequential twin of [`run_replications`]; benchmarks compare the two.
pub fn run_replications_seq(
    cfg: &ScenarioConfig,
    net: &Network,
    od: &OdTable,
) -> Result<Vec<(u64, EngineOutput, MetricsReport)>, ScenarioError> {
    let reps = cfg.scenario.replications.max(1);
    let results: Vec<Result<(u64, EngineOutput, MetricsReport), String>> =
        par::map_range_seq(reps as usize, |i| {
            let seed = replication_seed(cfg.scenario.master_seed, i as u32);
            match run_one(cfg, net, od, seed) {
                Ok(out) => Ok((seed, out.0, out.1)),
                Err(e) => Err(format!("replication {i} (seed {seed}): {e}")),
            }
        });
    results
        .into_iter()
        .collect::<Result<Vec<_>, String>>()
        .map_err(ScenarioError::Config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepFactor {
    SupplyLevel,
    MatchingWindow,
}

impl SweepFactor {
    pub fn parse(s: &str) -> Result<SweepFactor, ScenarioError> {
        match s {
            "supply-level" => Ok(SweepFactor::SupplyLevel),
            "matching-window" => Ok(SweepFactor::MatchingWindow),
            other => Err(ScenarioError::Config(format!(
                "unknown sweep factor `{other}` (supply-level | matching-window)"
            ))),
        }
    }

    pub fn apply(&self, cfg: &ScenarioConfig, level: f64) -> ScenarioConfig {
        let mut out = cfg.clone();
        match self {
            SweepFactor::SupplyLevel => out.scenario.supply_level = Some(level),
            SweepFactor::MatchingWindow => out.matching.window_min = level,
        }
        out
    }
}

/// Per-level aggregated reports for a sensitivity sweep.
pub fn sweep(
    cfg: &ScenarioConfig,
    net: &Network,
    od: &OdTable,
    factor: SweepFactor,
    levels: &[f64],
) -> Result<Vec<(f64, metrics::AggregateReport)>, ScenarioError> {
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let level_cfg = factor.apply(cfg, level);
        let runs = run_replications(&level_cfg, net, od)?;
        let reports: Vec<MetricsReport> = runs.into_iter().map(|(_, _, r)| r).collect();
        out.push((level, metrics::aggregate(&reports)));
    }
    Ok(out)
}

/// Collect the per-round matching trace rows of a log as CSV-ready tuples.
pub fn matching_trace_rows(
    log: &[crate::log::LogRecord],
) -> Result<Vec<(u32, f64, u64, u64, u64, u64, f64, f64)>, ScenarioError> {
    let rounds = metrics::round_traces(log)
        .map_err(|e| ScenarioError::Config(format!("trace: {e}")))?;
    Ok(rounds
        .into_iter()
        .map(|r| {
            (
                r.round,
                r.t,
                r.pool_drivers,
                r.pool_passengers,
                r.expected_matched,
                r.actual_matched,
                r.expected_objective_km,
                r.actual_objective_km,
            )
        })
        .collect())
}

/// Deterministic default levels for each sweep factor.
pub fn default_levels(factor: SweepFactor) -> Vec<f64> {
    match factor {
        SweepFactor::SupplyLevel => vec![
            0.01, 0.05, 0.10, 0.20, 0.40, 0.50, 0.60, 0.80, 1.00, 1.20, 1.50, 2.00, 2.50,
            3.00, 3.50, 4.00,
        ],
        SweepFactor::MatchingWindow => {
            vec![0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
        }
    }
}

/// Agent counts per batch, exposed for tests and validation output.
pub fn batch_summary(pop: &Population) -> Vec<(u32, bool, usize, usize)> {
    pop.batches
        .iter()
        .map(|b| (b.period, b.warmup, b.passengers.len(), b.drivers.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_cfg(passengers: u32, drivers: u32) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.scenario.passengers = passengers;
        cfg.scenario.drivers = drivers;
        cfg.scenario.warmup = false;
        cfg.scenario.replications = 1;
        cfg
    }

    #[test]
    fn counts_split_matches_demand_shares() {
        assert_eq!(split_counts(2000, &[0.1, 0.4, 0.4, 0.1]), vec![200, 800, 800, 200]);
        assert_eq!(split_counts(1600, &[0.1, 0.4, 0.4, 0.1]), vec![160, 640, 640, 160]);
        assert_eq!(split_counts(7, &[1.0, 0.0, 0.0, 0.0]), vec![7, 0, 0, 0]);
    }

    #[test]
    fn shares_must_sum_to_one() {
        let mut cfg = grid_cfg(10, 5);
        cfg.scenario.demand_shares = vec![0.5, 0.4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn population_is_deterministic_for_a_seed() {
        let cfg = grid_cfg(40, 20);
        let (_, od) = grid_city(&cfg.network.grid).unwrap();
        let a = sample_population(&cfg, &od, 9).unwrap();
        let b = sample_population(&cfg, &od, 9).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let c = sample_population(&cfg, &od, 10).unwrap();
        assert_ne!(format!("{a:?}"), format!("{c:?}"));
    }

    #[test]
    fn all_agents_in_first_period_when_shares_say_so() {
        let mut cfg = grid_cfg(12, 6);
        cfg.scenario.demand_shares = vec![1.0, 0.0, 0.0, 0.0];
        let (_, od) = grid_city(&cfg.network.grid).unwrap();
        let pop = sample_population(&cfg, &od, 3).unwrap();
        let summary = batch_summary(&pop);
        assert_eq!(summary[0].2, 12);
        assert_eq!(summary[0].3, 6);
        for s in &summary[1..] {
            assert_eq!(s.2 + s.3, 0);
        }
    }

    #[test]
    fn warmup_prepends_two_flagged_batches() {
        let mut cfg = grid_cfg(100, 50);
        cfg.scenario.warmup = true;
        let (_, od) = grid_city(&cfg.network.grid).unwrap();
        let pop = sample_population(&cfg, &od, 3).unwrap();
        let summary = batch_summary(&pop);
        assert_eq!(summary.len(), 6);
        assert!(summary[0].1 && summary[1].1);
        assert_eq!(summary[0].2, 10);
        assert_eq!(summary[0].3, 5);
        assert!(summary[2..].iter().all(|s| !s.1));
        // Main periods shifted behind the warmups.
        assert_eq!(pop.batches[2].time, 30.0);
    }

    #[test]
    fn oversized_sample_is_a_config_error() {
        let mut cfg = grid_cfg(10, 5);
        cfg.network.grid.total_trips = 10;
        let (_, od) = grid_city(&cfg.network.grid).unwrap();
        assert!(sample_population(&cfg, &od, 1).is_err());
    }

    #[test]
    fn sampling_without_replacement_yields_distinct_units() {
        let mut s = Stream::new(5, 1);
        let units = sample_units(100, 60, &mut s);
        let mut sorted = units.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 60);
        assert!(units.iter().all(|&u| u < 100));
    }

    #[test]
    fn grid_city_shapes_up() {
        let p = GridParams::default();
        let (net, od) = grid_city(&p).unwrap();
        assert_eq!(net.node_count(), 100);
        // 4-neighbor lattice: 2 * 2 * n * (n-1) directed links.
        assert_eq!(net.link_count(), 360);
        assert!(od.total_trips > 40_000);
    }

    #[test]
    fn supply_level_overrides_driver_count() {
        let mut cfg = grid_cfg(200, 160);
        cfg.scenario.supply_level = Some(0.5);
        assert_eq!(cfg.driver_count(), 100);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut value: toml::Value = "".parse().unwrap();
        apply_override(&mut value, "matching.window_min=4").unwrap();
        apply_override(&mut value, "scenario.warmup=false").unwrap();
        let cfg: ScenarioConfig = value.try_into().unwrap();
        assert_eq!(cfg.matching.window_min, 4.0);
        assert!(!cfg.scenario.warmup);
    }

    #[test]
    fn replication_aggregate_is_reproducible() {
        let mut cfg = grid_cfg(12, 8);
        cfg.scenario.replications = 2;
        let (net, od) = build_network(&cfg).unwrap();
        let a = run_replications(&cfg, &net, &od).unwrap();
        let b = run_replications(&cfg, &net, &od).unwrap();
        assert_eq!(a.len(), 2);
        for ((s1, o1, r1), (s2, o2, r2)) in a.iter().zip(&b) {
            assert_eq!(s1, s2);
            assert_eq!(o1.log, o2.log);
            assert_eq!(r1, r2);
        }
    }
}
