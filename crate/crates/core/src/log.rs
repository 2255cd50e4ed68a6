//! Event log records: the engine's only output and the metrics input.
//!
//! One JSON object per executed event. Records carry enough payload to
//! recompute every metric from the file alone, so `report` on a persisted
//! log reproduces the original metrics byte for byte.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::behavior::StayLeaveOutcome;
use crate::domain::{AgentId, DriverStatus, PassengerStatus};
use crate::network::NodeId;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub seq: u64,
    pub agents: Vec<AgentId>,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    AgentGeneration {
        period: u32,
        warmup: bool,
        passengers: Vec<PassengerSeed>,
        drivers: Vec<DriverSeed>,
        /// Agents dropped because their trip could not be routed.
        discarded: Vec<AgentId>,
    },
    OnlineOffline {
        agent: AgentId,
        online: bool,
        /// True when the event found a terminal agent and did nothing.
        noop: bool,
    },
    RidesharingMatching {
        round: u32,
        pool_drivers: Vec<AgentId>,
        pool_passengers: Vec<AgentId>,
        /// Drivers taken offline by the low-slack rule during sync.
        auto_offline: Vec<AgentId>,
        combination_count: usize,
        expected_matched: Vec<AgentId>,
        expected_objective_km: f64,
        responses: Vec<ResponseRecord>,
        finalized: Vec<FinalizedRecord>,
        actual_matched: Vec<AgentId>,
        actual_objective_km: f64,
    },
    StayLeaveDecision {
        agent: AgentId,
        context: DecisionContext,
        outcome: DecisionOutcome,
        /// Passengers canceled as a result (driver decisions).
        canceled: Vec<AgentId>,
    },
    Reschedule {
        driver: AgentId,
        cause: RescheduleCause,
        /// Inline stay/leave evaluations during the recursive update.
        decisions: Vec<InlineDecision>,
        /// Passengers dropped from the schedule by this event.
        removed: Vec<AgentId>,
        schedule_version: u64,
        new_vkt: f64,
    },
    Pickup {
        driver: AgentId,
        passenger: AgentId,
        no_show: bool,
    },
    DropOff {
        driver: AgentId,
        passenger: AgentId,
        payment: f64,
        ride_min: f64,
    },
    AgentTermination {
        agent: AgentId,
        summary: TerminationSummary,
    },
}

impl Payload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Payload::AgentGeneration { .. } => "agent_generation",
            Payload::OnlineOffline { .. } => "online_offline",
            Payload::RidesharingMatching { .. } => "ridesharing_matching",
            Payload::StayLeaveDecision { .. } => "stay_leave_decision",
            Payload::Reschedule { .. } => "reschedule",
            Payload::Pickup { .. } => "pickup",
            Payload::DropOff { .. } => "drop_off",
            Payload::AgentTermination { .. } => "agent_termination",
        }
    }
}

/// Static passenger facts recorded at generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PassengerSeed {
    pub id: AgentId,
    pub origin: NodeId,
    pub destination: NodeId,
    pub depart_time: f64,
    pub online_time: f64,
    pub sp_time_min: f64,
    pub sp_distance_km: f64,
    pub seats: u32,
}

/// Static driver facts recorded at generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DriverSeed {
    pub id: AgentId,
    pub origin: NodeId,
    pub destination: NodeId,
    pub depart_time: f64,
    pub online_time: f64,
    pub sp_time_min: f64,
    pub sp_distance_km: f64,
    pub speed_factor: f64,
    pub capacity: u32,
    pub ridesharing: bool,
}

/// One agent's accept/reject response to a proposed matching option.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResponseRecord {
    pub agent: AgentId,
    pub option_driver: AgentId,
    /// Whether the agent was already matched to the option's driver.
    pub prior: bool,
    pub accept: bool,
}

/// A finalized matching assignment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalizedRecord {
    pub driver: AgentId,
    pub added: Vec<AgentId>,
    pub vkt_km: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DecisionContext {
    UnmatchedPassenger,
    MatchedPassenger,
    OnBoardPassenger,
    DriverWithOrders,
    DriverIdle,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DecisionOutcome {
    Stay,
    LeaveMatching,
    LeaveService,
    /// A leave draw that silently failed to cancel.
    NoShowArmed,
    /// Terminal or forced-stay agents: nothing to decide.
    Noop,
}

impl From<StayLeaveOutcome> for DecisionOutcome {
    fn from(o: StayLeaveOutcome) -> Self {
        match o {
            StayLeaveOutcome::Stay => DecisionOutcome::Stay,
            StayLeaveOutcome::LeaveMatching => DecisionOutcome::LeaveMatching,
            StayLeaveOutcome::LeaveService => DecisionOutcome::LeaveService,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RescheduleCause {
    Delay,
    PassengerCancel,
    DriverCancel,
    NoShow,
}

/// One inline evaluation inside a reschedule's recursive update.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InlineDecision {
    pub agent: AgentId,
    pub schedule_version: u64,
    pub outcome: DecisionOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum TerminationSummary {
    Passenger {
        status: PassengerStatus,
        pickup_time: Option<f64>,
        dropoff_time: Option<f64>,
        notified_time: Option<f64>,
        quit_while_unmatched: bool,
    },
    Driver {
        status: DriverStatus,
        arrival_time: f64,
        distance_driven_km: f64,
        assigned_count: u32,
        delivered_count: u32,
    },
}

/// Serialize records as JSON Lines.
pub fn write_jsonl<W: Write>(mut w: W, records: &[LogRecord]) -> std::io::Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec).expect("log records serialize");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a JSONL event log.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LogRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord =
            serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(rec);
    }
    Ok(out)
}
