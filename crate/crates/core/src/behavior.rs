//! Agent choice behavior: matching-option responses and stay/leave decisions.
//!
//! Responses to matching options use a multinomial logit over the offered
//! option plus the status-quo alternative; stay/leave decisions are binary
//! logit draws. Both work on plain utility numbers so they stay pure and
//! independent of engine state.

use serde::{Deserialize, Serialize};

/// How an agent turns choice probabilities into a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceMode {
    /// Deterministic: highest utility wins, ties go to the status quo.
    Argmax,
    /// Simulated: sampled from the logit distribution.
    Sampled,
}

/// Utility of a matching option for a driver:
/// time burden plus net money flow (cost minus earning).
pub fn driver_option_utility(
    beta_time: f64,
    beta_cost: f64,
    tt_min: f64,
    cost: f64,
    earning: f64,
) -> f64 {
    beta_time * tt_min + beta_cost * (cost - earning)
}

/// Utility of traveling alone for a driver on the shortest path.
pub fn driver_alone_utility(beta_time: f64, beta_cost: f64, tt_min: f64, cost: f64) -> f64 {
    beta_time * tt_min + beta_cost * cost
}

/// Utility of a matching option for a passenger.
pub fn passenger_option_utility(
    beta_time: f64,
    beta_cost: f64,
    tt_min: f64,
    payment: f64,
) -> f64 {
    beta_time * tt_min + beta_cost * payment
}

/// Utility of traveling alone for a passenger.
pub fn passenger_alone_utility(beta_time: f64, beta_cost: f64, tt_min: f64, cost: f64) -> f64 {
    beta_time * tt_min + beta_cost * cost
}

/// Multinomial logit probabilities over the full alternative set.
/// Shift-invariant and sums to one.
pub fn mnl_probabilities(utilities: &[f64]) -> Vec<f64> {
    debug_assert!(!utilities.is_empty());
    let peak = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utilities.iter().map(|u| (u - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Choice over alternatives; index 0 is the status-quo alternative.
/// Returns the chosen index.
pub fn choose_option(utilities: &[f64], mode: ChoiceMode, draw: f64) -> usize {
    debug_assert!(!utilities.is_empty());
    match mode {
        ChoiceMode::Argmax => {
            let mut best = 0usize;
            for (i, &u) in utilities.iter().enumerate().skip(1) {
                // Strict improvement only: ties keep the status quo.
                if u > utilities[best] {
                    best = i;
                }
            }
            best
        }
        ChoiceMode::Sampled => {
            let probs = mnl_probabilities(utilities);
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if draw < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

/// Probability of picking the first alternative in a binary logit.
pub fn binary_logit_first(u_first: f64, u_second: f64) -> f64 {
    // Equivalent to e^a / (e^a + e^b), computed stably.
    1.0 / (1.0 + (u_second - u_first).exp())
}

/// Outcome of an agent staying/leaving decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StayLeaveOutcome {
    /// Stay with the current matching / keep waiting.
    Stay,
    /// Leave the current matching but stay in the service.
    LeaveMatching,
    /// Leave the ridesharing service.
    LeaveService,
}

/// Binary stay-vs-leave draw. A `leave` draw resolves to leaving the
/// service; the engine applies matched-vs-unmatched mechanics on top.
pub fn decide_stay_leave(stay_utility: f64, leave_utility: f64, draw: f64) -> StayLeaveOutcome {
    let p_stay = binary_logit_first(stay_utility, leave_utility);
    if draw < p_stay {
        StayLeaveOutcome::Stay
    } else {
        StayLeaveOutcome::LeaveService
    }
}

/// Utility terms for a matched passenger deciding whether to keep waiting.
///
/// Waiting: scheduled travel time plus elapsed wait, scheduled payment net
/// of coupons. Quitting: travel alone now, plus the cancellation fee.
pub struct MatchedWaitInputs {
    pub beta_time: f64,
    pub beta_cost: f64,
    /// Scheduled time from now to the passenger's drop-off.
    pub scheduled_tt_min: f64,
    pub payment: f64,
    pub coupon: f64,
    /// Elapsed wait since the first ridesharing request.
    pub waited_min: f64,
    /// Travel-alone time from now.
    pub alone_tt_min: f64,
    pub alone_cost: f64,
    pub cancellation_fee: f64,
}

pub fn matched_wait_utilities(inp: &MatchedWaitInputs) -> (f64, f64) {
    let stay = inp.beta_time * (inp.scheduled_tt_min + inp.waited_min)
        + inp.beta_cost * (inp.payment - inp.coupon);
    let quit = inp.beta_time * inp.alone_tt_min
        + inp.beta_cost * (inp.alone_cost + inp.cancellation_fee);
    (stay, quit)
}

/// Utility terms for an unmatched passenger deciding whether to keep waiting.
pub struct UnmatchedWaitInputs {
    pub beta_time: f64,
    pub beta_cost: f64,
    pub beta_exp_pay: f64,
    pub coupon: f64,
    pub waited_min: f64,
    pub alone_tt_min: f64,
    pub alone_cost: f64,
}

pub fn unmatched_wait_utilities(inp: &UnmatchedWaitInputs) -> (f64, f64) {
    let stay = inp.beta_time * (inp.alone_tt_min + inp.waited_min)
        + inp.beta_cost * (inp.beta_exp_pay * inp.alone_cost - inp.coupon);
    let quit = inp.beta_time * inp.alone_tt_min + inp.beta_cost * inp.alone_cost;
    (stay, quit)
}

/// Utility terms for a driver deciding whether to cancel not-yet-picked
/// passengers (and leave the service).
pub struct DriverStayInputs {
    pub beta_time: f64,
    pub beta_cost: f64,
    /// Current schedule: remaining time, operating cost, earning.
    pub tt_min: f64,
    pub cost: f64,
    pub earning: f64,
    /// Schedule with unpicked passengers removed.
    pub reduced_tt_min: f64,
    pub reduced_cost: f64,
    pub reduced_earning: f64,
    pub cancellation_fee: f64,
}

pub fn driver_stay_utilities(inp: &DriverStayInputs) -> (f64, f64) {
    let stay = driver_option_utility(inp.beta_time, inp.beta_cost, inp.tt_min, inp.cost, inp.earning);
    let cancel = inp.beta_time * inp.reduced_tt_min
        + inp.beta_cost * (inp.reduced_cost + inp.cancellation_fee - inp.reduced_earning);
    (stay, cancel)
}

/// Closed-form max pickup waiting time: the elapsed wait at which staying
/// unmatched stops beating traveling alone. Clamped at zero.
pub fn max_pickup_wait(
    beta_time: f64,
    beta_cost: f64,
    alone_cost: f64,
    beta_exp_pay: f64,
    coupon: f64,
) -> f64 {
    let wt = (beta_cost / beta_time) * (alone_cost * (1.0 - beta_exp_pay) + coupon);
    wt.max(0.0)
}
