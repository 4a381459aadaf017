//! Training signals derived from traces: the composite per-role reward,
//! group-relative advantages, and turn-level SFT samples with reasoning
//! masked out of the context.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::find_marker;
use crate::domain::{Money, Role};
use crate::engine::{EventKind, NegotiationTrace};
use crate::metrics::SurplusShare;

pub const ADVANTAGE_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub parsing: f64,
    pub execution: f64,
    pub constraints: f64,
    pub utility: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { parsing: 0.5, execution: 0.5, constraints: 0.5, utility: 1.0 }
    }
}

impl RewardWeights {
    pub fn max_total(&self) -> f64 {
        self.parsing + self.execution + self.constraints + self.utility
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsistencyFlags {
    /// Accepted a price worse than a counterpart offer it had rejected earlier.
    pub accepted_worse_offer_later: bool,
    /// Proposed a price worse than a counterpart offer it had rejected earlier.
    pub proposed_worse_than_rejected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_parsing: f64,
    pub r_execution: f64,
    pub r_constraints: f64,
    pub r_utility: f64,
    pub total: f64,
    pub flags: ConsistencyFlags,
    pub overflow: bool,
}

impl RewardBreakdown {
    pub fn combine(weights: &RewardWeights, r_parsing: f64, r_execution: f64, r_constraints: f64, r_utility: f64) -> f64 {
        weights.parsing * r_parsing + weights.execution * r_execution + weights.constraints * r_constraints + weights.utility * r_utility
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("trace has no agent messages for the {0}")]
    MissingParseReports(Role),
}

/// Flags from the role's own decisions, judged against the best counterpart
/// offer it had rejected so far (explicitly, or by countering it).
pub fn consistency_flags(trace: &NegotiationTrace, role: Role) -> ConsistencyFlags {
    let mut flags = ConsistencyFlags::default();
    let mut best_rejected: Option<Money> = None;
    let reject = |p: Money, best: &mut Option<Money>| {
        if best.is_none_or(|b| role.prefers(p, b)) {
            *best = Some(p);
        }
    };
    for e in trace.events.iter().filter(|e| e.actor == role) {
        match e.kind {
            EventKind::RespondToOffer { accept: false, price } => reject(price, &mut best_rejected),
            EventKind::RespondToOffer { accept: true, price } => {
                if best_rejected.is_some_and(|b| role.prefers(b, price)) {
                    flags.accepted_worse_offer_later = true;
                }
            }
            EventKind::MakeOffer { price, countered, .. } => {
                if let Some(q) = countered {
                    reject(q, &mut best_rejected);
                }
                if best_rejected.is_some_and(|b| role.prefers(b, price)) {
                    flags.proposed_worse_than_rejected = true;
                }
            }
            _ => {}
        }
    }
    flags
}

pub fn compute_reward(trace: &NegotiationTrace, role: Role, weights: &RewardWeights) -> Result<RewardBreakdown, RewardError> {
    let reports: Vec<_> = trace.turns_of(role).flat_map(|t| t.messages.iter().map(|m| &m.report)).collect();
    if reports.is_empty() {
        return Err(RewardError::MissingParseReports(role));
    }
    let flags = consistency_flags(trace, role);
    if trace.outcome.overflow {
        return Ok(RewardBreakdown {
            r_parsing: 0.0,
            r_execution: 0.0,
            r_constraints: 0.0,
            r_utility: 0.0,
            total: 0.0,
            flags,
            overflow: true,
        });
    }
    let parseable = reports.iter().filter(|r| r.parseable).count();
    let succeeded = reports.iter().filter(|r| r.block_succeeded()).count();
    let r_parsing = parseable as f64 / reports.len() as f64;
    let r_execution = if parseable == 0 { 0.0 } else { succeeded as f64 / parseable as f64 };
    let r_constraints =
        0.5 * (1.0 - flags.accepted_worse_offer_later as u8 as f64) + 0.5 * (1.0 - flags.proposed_worse_than_rejected as u8 as f64);
    let sc = &trace.header.scenario;
    let r_utility = trace
        .outcome
        .status
        .deal_price()
        .and_then(|p| SurplusShare::of(sc.buyer_reservation, sc.seller_reservation, p))
        .map_or(0.0, |s| s.get(role));
    Ok(RewardBreakdown {
        r_parsing,
        r_execution,
        r_constraints,
        r_utility,
        total: RewardBreakdown::combine(weights, r_parsing, r_execution, r_constraints, r_utility),
        flags,
        overflow: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub size: usize,
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub epsilon: f64,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdvantageError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("expected {expected} rewards, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("reward {0} is not finite")]
    NonFinite(f64),
}

/// `(R - mean) / (std + 1e-4)` within one group of rollouts.
pub fn group_advantages(rewards: &[f64], group_size: usize) -> Result<AdvantageGroup, AdvantageError> {
    if group_size < 2 {
        return Err(AdvantageError::GroupTooSmall(group_size));
    }
    if rewards.len() != group_size {
        return Err(AdvantageError::SizeMismatch { expected: group_size, got: rewards.len() });
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(AdvantageError::NonFinite(bad));
    }
    let g = group_size as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let all_equal = rewards.iter().all(|r| *r == rewards[0]);
    let (std, advantages) = if all_equal {
        (0.0, vec![0.0; group_size])
    } else {
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g).sqrt();
        (std, rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPSILON)).collect())
    };
    Ok(AdvantageGroup { size: group_size, rewards: rewards.to_vec(), mean, std, epsilon: ADVANTAGE_EPSILON, advantages })
}

// ---------------------------------------------------------------------------
// SFT export

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndelimitedPolicy {
    /// Drop everything from an unterminated opener to the Code block (or the end).
    #[default]
    Strip,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Remove `<think>...</think>` spans.
    pub think: bool,
    /// Remove the `Thought:` block.
    pub thought: bool,
    pub undelimited: UndelimitedPolicy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { think: true, thought: true, undelimited: UndelimitedPolicy::Strip }
    }
}

impl MaskConfig {
    /// Parses a comma list such as `thought,think`; an empty list masks nothing.
    pub fn from_list(list: &str) -> Result<Self, SftError> {
        let mut cfg = MaskConfig { think: false, thought: false, undelimited: UndelimitedPolicy::Strip };
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "think" => cfg.think = true,
                "thought" => cfg.thought = true,
                other => return Err(SftError::UnknownMask(other.to_string())),
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SftError {
    #[error("trajectory {trajectory}, turn {turn}: reasoning span is not closed")]
    UndelimitedReasoning { trajectory: String, turn: u32 },
    #[error("unknown mask {0:?}; expected thought or think")]
    UnknownMask(String),
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("reasoning span is not terminated")]
pub struct UnterminatedReasoning;

/// Byte ranges of reasoning in `raw`, sorted and merged. Fails when a span is
/// unterminated and the policy is to reject.
pub fn reasoning_spans(raw: &str, cfg: &MaskConfig) -> Result<Vec<Range<usize>>, UnterminatedReasoning> {
    let mut spans = Vec::new();
    let strip = cfg.undelimited == UndelimitedPolicy::Strip;
    let code_after = |from: usize| find_marker(raw, "Code:", from);
    if cfg.think {
        let first_open = raw.find(THINK_OPEN);
        if let Some(close) = raw.find(THINK_CLOSE) {
            if first_open.is_none_or(|o| close < o) {
                // Closing tag with no opener: everything before it is reasoning.
                if !strip {
                    return Err(UnterminatedReasoning);
                }
                spans.push(0..close + THINK_CLOSE.len());
            }
        }
        let mut pos = 0;
        while let Some(rel) = raw[pos..].find(THINK_OPEN) {
            let start = pos + rel;
            match raw[start..].find(THINK_CLOSE) {
                Some(c) => {
                    let end = start + c + THINK_CLOSE.len();
                    spans.push(start..end);
                    pos = end;
                }
                None if strip => {
                    spans.push(start..code_after(start).unwrap_or(raw.len()));
                    break;
                }
                None => return Err(UnterminatedReasoning),
            }
        }
    }
    if cfg.thought {
        if let Some(t) = find_marker(raw, "Thought:", 0) {
            match code_after(t) {
                Some(c) => spans.push(t..c),
                None if strip => spans.push(t..raw.len()),
                None => return Err(UnterminatedReasoning),
            }
        }
    }
    spans.sort_by_key(|r| r.start);
    let mut merged: Vec<Range<usize>> = Vec::with_capacity(spans.len());
    for s in spans {
        match merged.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => merged.push(s),
        }
    }
    Ok(merged)
}

pub fn remove_spans(raw: &str, spans: &[Range<usize>]) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut last = 0;
    for s in spans {
        out.push_str(&raw[last..s.start]);
        last = s.end;
    }
    out.push_str(&raw[last..]);
    out.trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: String,
    pub content: String,
}

impl SftMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        SftMessage { role: role.to_string(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub trajectory_id: String,
    /// 1-based index of the target turn within the trajectory.
    pub turn_index: u32,
    pub agent_role: Role,
    pub context: Vec<SftMessage>,
    /// The turn's full output, verbatim.
    pub target: String,
    #[serde(default)]
    pub overflow: bool,
}

impl SftSample {
    pub fn context_len(&self) -> usize {
        self.context.iter().map(|m| m.content.len()).sum()
    }
}

/// One side of one negotiation.
#[derive(Debug, Clone, Copy)]
pub struct Trajectory<'a> {
    pub trace: &'a NegotiationTrace,
    pub role: Role,
}

impl Trajectory<'_> {
    pub fn id(&self) -> String {
        let h = &self.trace.header;
        format!("{}/{}-vs-{}/{}", h.scenario.id(), h.buyer.name, h.seller.name, self.role)
    }

    /// Turns with an executed output.
    pub fn turn_count(&self) -> usize {
        self.trace.turns_of(self.role).filter(|t| t.final_message().is_some()).count()
    }
}

/// A trajectory with `t` turns yields `t` samples; sample `k` sees turns
/// `1..k` with reasoning masked, then predicts turn `k` verbatim.
pub fn export_trajectory(traj: Trajectory<'_>, mask: &MaskConfig) -> Result<Vec<SftSample>, SftError> {
    let id = traj.id();
    let system = match traj.role {
        Role::Buyer => &traj.trace.header.buyer.system_prompt,
        Role::Seller => &traj.trace.header.seller.system_prompt,
    };
    let mut context = vec![SftMessage::new("system", system.clone())];
    let mut samples = Vec::new();
    for (k, turn) in traj.trace.turns_of(traj.role).filter(|t| t.final_message().is_some()).enumerate() {
        let raw = &turn.final_message().expect("filtered").raw;
        context.push(SftMessage::new("user", turn.observation.clone()));
        samples.push(SftSample {
            trajectory_id: id.clone(),
            turn_index: k as u32 + 1,
            agent_role: traj.role,
            context: context.clone(),
            target: raw.clone(),
            overflow: traj.trace.outcome.overflow,
        });
        let spans = reasoning_spans(raw, mask).map_err(|_| SftError::UndelimitedReasoning { trajectory: id.clone(), turn: turn.turn })?;
        context.push(SftMessage::new("assistant", remove_spans(raw, &spans)));
    }
    Ok(samples)
}

pub fn export_sft<'a>(trajectories: impl IntoIterator<Item = Trajectory<'a>>, mask: &MaskConfig) -> Result<Vec<SftSample>, SftError> {
    let mut out = Vec::new();
    for t in trajectories {
        out.extend(export_trajectory(t, mask)?);
    }
    Ok(out)
}

pub fn write_samples<W: Write>(mut w: W, samples: &[SftSample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
