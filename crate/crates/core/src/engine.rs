//! Discrete-event negotiation simulator.
//!
//! The seller posts the listing, then the two agents alternate turns. Each
//! turn executes up to three tool calls; the resulting events go through a
//! timestamp-ordered queue and are batched per (timestamp, actor) into the
//! observation handed to the counterpart. A negotiation ends on acceptance,
//! on `quit_negotiation`, or when the round limit is reached.
//!
//! Two counters are kept: `turns` (one per agent turn) and `rounds` (one per
//! buyer turn + seller turn pair, i.e. `ceil(turns / 2)`).

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::actions::{parse_turn, AgentTurnOutput, Diagnostic, ParseReport, ToolCall};
use crate::agents::{Agent, AgentError, AgentInfo, AgentMessage, TokenUsage};
use crate::domain::{Fault, Listing, Money, Outcome, OutcomeStatus, Role, Scenario};

pub const DEFAULT_MAX_ROUNDS: u32 = 10;
pub const TRACE_VERSION: u32 = 1;
/// Stands in for a reply whose prompt did not fit the context limit.
pub const OVERFLOW_REPLY: &str = "Code:\nquit_negotiation()";

/// Simulation time in whole milliseconds. Serialized as seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        if !secs.is_finite() || secs <= 0.0 {
            return SimTime(0);
        }
        SimTime((secs * 1000.0).round().min(u64::MAX as f64) as u64)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn advance(self, by: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(by.0))
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_secs_f64())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs < 0.0 {
            return Err(serde::de::Error::custom("timestamp must be a non-negative number"));
        }
        Ok(SimTime::from_secs_f64(secs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    ListingPosted {
        price: Money,
    },
    MakeOffer {
        price: Money,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        side_offer: Option<String>,
        /// Counterpart offer that was pending and is implicitly rejected.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        countered: Option<Money>,
    },
    RespondToOffer {
        accept: bool,
        price: Money,
    },
    SendMessage {
        content: String,
    },
    SearchPrice {
        price_low: Money,
        price_high: Money,
    },
    QuitNegotiation,
    WaitForResponse,
    WaitForTimePeriod {
        duration_s: f64,
    },
    Terminated {
        outcome: OutcomeStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u32,
    pub timestamp: SimTime,
    pub actor: Role,
    /// Turn that produced the event; `None` for the listing post.
    #[serde(default)]
    pub turn: Option<u32>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingOffer {
    pub by: Role,
    pub price: Money,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side_offer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub machine: Vec<Event>,
}

/// Result of one executed (or refused) tool call, returned to the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallResult {
    pub tool: String,
    pub ok: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_rounds: u32,
    /// Who acts first after the listing is posted.
    pub first_mover: Role,
    /// Posted price; defaults to the listing's historical high.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listing_price: Option<Money>,
    /// Additional attempts after an agent error before the agent is faulted.
    pub agent_retries: u32,
    /// Simulation time that elapses between consecutive turns.
    pub turn_gap_s: f64,
    /// Prompt size (reported input tokens) past which the episode is cut
    /// short: the reply is replaced by a quit and the outcome is flagged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit_tokens: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_rounds: DEFAULT_MAX_ROUNDS,
            first_mover: Role::Buyer,
            listing_price: None,
            agent_retries: 2,
            turn_gap_s: 1.0,
            context_limit_tokens: None,
        }
    }
}

impl EngineConfig {
    pub fn overflows(&self, usage: Option<TokenUsage>) -> bool {
        matches!((self.context_limit_tokens, usage), (Some(limit), Some(u)) if u.input_tokens > limit)
    }

    pub fn listing_price_for(&self, listing: &Listing) -> Money {
        self.listing_price.unwrap_or(listing.price_high)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("listing price must be positive, got {0}")]
    InvalidListingPrice(Money),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TurnRejected {
    #[error("it is the {expected}'s turn")]
    NotYourTurn { expected: Role },
    #[error("negotiation already terminated")]
    AlreadyTerminated,
}

/// Per-call execution failures. These are recorded and skipped; the turn goes on.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecFailure {
    #[error("no pending offer to respond to")]
    NoPendingOffer,
    #[error("cannot respond to your own offer")]
    OwnOffer,
    #[error("agent {claimed:?} does not match acting role {actual}")]
    AgentMismatch { claimed: String, actual: Role },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecReport {
    pub executed_ok: u32,
    pub attempted: u32,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// What the counterpart gets to see.
    pub observation: Observation,
    /// Private per-call results for the actor.
    pub feedback: Vec<CallResult>,
    pub report: ExecReport,
}

/// Min-heap of events keyed by (timestamp, sequence number).
#[derive(Debug, Default, Clone)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<QueuedEvent>>,
}

#[derive(Debug, Clone)]
struct QueuedEvent(Event);

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl QueuedEvent {
    fn key(&self) -> (SimTime, u32) {
        (self.0.timestamp, self.0.seq)
    }
}

impl EventQueue {
    pub fn push(&mut self, event: Event) {
        self.heap.push(Reverse(QueuedEvent(event)));
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    /// Pops the earliest event together with every following event that
    /// shares its timestamp and actor.
    pub fn pop_batch(&mut self) -> Vec<Event> {
        let Some(Reverse(QueuedEvent(first))) = self.heap.pop() else {
            return Vec::new();
        };
        let (ts, actor) = (first.timestamp, first.actor);
        let mut batch = vec![first];
        while let Some(Reverse(QueuedEvent(next))) = self.heap.peek() {
            if next.timestamp != ts || next.actor != actor {
                break;
            }
            batch.push(self.heap.pop().unwrap().0 .0);
        }
        batch
    }
}

#[derive(Debug, Clone)]
pub struct NegotiationState {
    scenario: Scenario,
    config: EngineConfig,
    listing_price: Money,
    clock: SimTime,
    turns: u32,
    to_move: Role,
    pending_offer: Option<PendingOffer>,
    history: Vec<Event>,
    terminated: Option<OutcomeStatus>,
    fault: Option<Fault>,
    overflow: bool,
    queue: EventQueue,
    next_seq: u32,
}

impl NegotiationState {
    pub fn init(scenario: Scenario, listing_price: Money, config: EngineConfig) -> Result<Self, EngineError> {
        if !listing_price.is_positive() {
            return Err(EngineError::InvalidListingPrice(listing_price));
        }
        let mut state = NegotiationState {
            to_move: config.first_mover,
            scenario,
            config,
            listing_price,
            clock: SimTime::ZERO,
            turns: 0,
            pending_offer: None,
            history: Vec::new(),
            terminated: None,
            fault: None,
            overflow: false,
            queue: EventQueue::default(),
            next_seq: 0,
        };
        state.emit(Role::Seller, None, EventKind::ListingPosted { price: listing_price });
        let posted = state.drain_queue();
        state.history.extend(posted);
        Ok(state)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
    pub fn config(&self) -> &EngineConfig {
        &self.config
    }
    pub fn listing_price(&self) -> Money {
        self.listing_price
    }
    pub fn clock(&self) -> SimTime {
        self.clock
    }
    pub fn turns(&self) -> u32 {
        self.turns
    }
    /// Rounds started so far (a round is a pair of turns).
    pub fn round(&self) -> u32 {
        self.turns.div_ceil(2)
    }
    pub fn to_move(&self) -> Role {
        self.to_move
    }
    pub fn pending_offer(&self) -> Option<&PendingOffer> {
        self.pending_offer.as_ref()
    }
    pub fn history(&self) -> &[Event] {
        &self.history
    }
    pub fn terminated(&self) -> Option<&OutcomeStatus> {
        self.terminated.as_ref()
    }
    pub fn is_terminated(&self) -> bool {
        self.terminated.is_some()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        let status = self.terminated?;
        let mut outcome = Outcome::new(&self.scenario, status, self.round(), self.turns);
        outcome.fault = self.fault.clone();
        outcome.overflow = self.overflow;
        Some(outcome)
    }

    /// Observation for whoever moves first: the listing post.
    pub fn opening_observation(&self) -> Observation {
        let recipient = self.to_move;
        Observation { text: render_events(&self.history, recipient), machine: self.history.clone() }
    }

    fn emit(&mut self, actor: Role, turn: Option<u32>, kind: EventKind) {
        let event = Event { seq: self.next_seq, timestamp: self.clock, actor, turn, kind };
        self.next_seq += 1;
        self.queue.push(event);
    }

    fn drain_queue(&mut self) -> Vec<Event> {
        let mut out = Vec::with_capacity(self.queue.len());
        while !self.queue.is_empty() {
            out.extend(self.queue.pop_batch());
        }
        out
    }

    fn terminate(&mut self, actor: Role, turn: u32, status: OutcomeStatus) {
        if self.terminated.is_none() {
            self.terminated = Some(status);
            self.pending_offer = None;
            self.emit(actor, Some(turn), EventKind::Terminated { outcome: status });
        }
    }

    /// Ends the negotiation because an agent could not produce a turn.
    pub fn fault(&mut self, role: Role, cause: impl Into<String>) -> Result<(), TurnRejected> {
        if self.terminated.is_some() {
            return Err(TurnRejected::AlreadyTerminated);
        }
        self.turns += 1;
        let turn = self.turns;
        self.fault = Some(Fault { role, cause: cause.into() });
        self.terminate(role, turn, OutcomeStatus::Quit { by: role });
        let events = self.drain_queue();
        self.history.extend(events);
        Ok(())
    }

    /// Executes one agent turn.
    pub fn step(&mut self, actor: Role, turn: &AgentTurnOutput) -> Result<StepResult, TurnRejected> {
        if self.terminated.is_some() {
            return Err(TurnRejected::AlreadyTerminated);
        }
        if actor != self.to_move {
            return Err(TurnRejected::NotYourTurn { expected: self.to_move });
        }
        self.turns += 1;
        let turn_no = self.turns;
        let mut report = ExecReport::default();
        let mut feedback = Vec::new();

        for parsed in &turn.calls {
            if self.terminated.is_some() {
                report
                    .diagnostics
                    .push(Diagnostic::at(parsed.position, format!("{} skipped: negotiation already ended", parsed.call.name())));
                continue;
            }
            report.attempted += 1;
            let result = match parsed.agent.as_deref().map(str::parse::<Role>) {
                Some(Ok(r)) if r != actor => {
                    Err(ExecFailure::AgentMismatch { claimed: parsed.agent.clone().unwrap_or_default(), actual: actor })
                }
                Some(Err(_)) => Err(ExecFailure::AgentMismatch { claimed: parsed.agent.clone().unwrap_or_default(), actual: actor }),
                _ => self.execute(actor, turn_no, &parsed.call),
            };
            match result {
                Ok(message) => {
                    report.executed_ok += 1;
                    feedback.push(CallResult { tool: parsed.call.name().into(), ok: true, message });
                }
                Err(e) => {
                    report.diagnostics.push(Diagnostic::at(parsed.position, format!("{} failed: {e}", parsed.call.name())));
                    feedback.push(CallResult { tool: parsed.call.name().into(), ok: false, message: e.to_string() });
                }
            }
            if matches!(parsed.call, ToolCall::WaitForResponse) {
                break;
            }
        }

        if self.terminated.is_none() && self.turns >= 2 * self.config.max_rounds {
            self.terminate(actor, turn_no, OutcomeStatus::RoundLimit);
        }

        let mut machine = Vec::new();
        while !self.queue.is_empty() {
            machine.extend(self.queue.pop_batch());
        }
        self.history.extend(machine.iter().cloned());
        let observation = Observation { text: render_events(&machine, actor.counterpart()), machine };

        self.clock = self.clock.advance(SimTime::from_secs_f64(self.config.turn_gap_s));
        self.to_move = actor.counterpart();
        Ok(StepResult { observation, feedback, report })
    }

    fn execute(&mut self, actor: Role, turn: u32, call: &ToolCall) -> Result<String, ExecFailure> {
        match call {
            ToolCall::MakeOffer { price, side_offer } => {
                let countered = match &self.pending_offer {
                    Some(p) if p.by != actor => Some(p.price),
                    _ => None,
                };
                self.pending_offer = Some(PendingOffer { by: actor, price: *price, side_offer: side_offer.clone() });
                self.emit(actor, Some(turn), EventKind::MakeOffer { price: *price, side_offer: side_offer.clone(), countered });
                Ok(format!("Offer of {} sent.", price.display_dollars()))
            }
            ToolCall::RespondToOffer { accept } => {
                let pending = self.pending_offer.clone().ok_or(ExecFailure::NoPendingOffer)?;
                if pending.by == actor {
                    return Err(ExecFailure::OwnOffer);
                }
                self.pending_offer = None;
                self.emit(actor, Some(turn), EventKind::RespondToOffer { accept: *accept, price: pending.price });
                if *accept {
                    self.terminate(actor, turn, OutcomeStatus::Deal { price: pending.price });
                    Ok(format!("Accepted {}. Deal closed.", pending.price.display_dollars()))
                } else {
                    Ok(format!("Rejected {}.", pending.price.display_dollars()))
                }
            }
            ToolCall::SendMessage { content } => {
                self.emit(actor, Some(turn), EventKind::SendMessage { content: content.clone() });
                Ok("Message sent.".into())
            }
            ToolCall::SearchPrice => {
                let (low, high) = (self.scenario.listing.price_low, self.scenario.listing.price_high);
                self.emit(actor, Some(turn), EventKind::SearchPrice { price_low: low, price_high: high });
                Ok(format!("Historical prices: highest {}, lowest {}.", high.display_dollars(), low.display_dollars()))
            }
            ToolCall::QuitNegotiation => {
                self.emit(actor, Some(turn), EventKind::QuitNegotiation);
                self.terminate(actor, turn, OutcomeStatus::Quit { by: actor });
                Ok("You left the negotiation.".into())
            }
            ToolCall::WaitForResponse => {
                self.emit(actor, Some(turn), EventKind::WaitForResponse);
                Ok("Waiting for the counterpart.".into())
            }
            ToolCall::WaitForTimePeriod { duration_s } => {
                self.emit(actor, Some(turn), EventKind::WaitForTimePeriod { duration_s: *duration_s });
                self.clock = self.clock.advance(SimTime::from_secs_f64(*duration_s));
                Ok(format!("Waited {duration_s} seconds."))
            }
        }
    }
}

fn who(actor: Role, recipient: Role) -> &'static str {
    if actor == recipient {
        "You"
    } else {
        actor.title()
    }
}

/// Natural-language rendering of a batch of events, from `recipient`'s point
/// of view. Only public event content is rendered.
pub fn render_events(events: &[Event], recipient: Role) -> String {
    let mut lines = Vec::new();
    for e in events {
        let subject = who(e.actor, recipient);
        let line = match &e.kind {
            EventKind::ListingPosted { price } => format!("{subject} listed the item at {}.", price.display_dollars()),
            EventKind::MakeOffer { price, side_offer, countered } => {
                let mut s = match countered {
                    Some(old) if e.actor != recipient => {
                        format!("{subject} rejected your offer of {} and proposed {}", old.display_dollars(), price.display_dollars())
                    }
                    _ => format!("{subject} proposed {}", price.display_dollars()),
                };
                if let Some(side) = side_offer {
                    s.push_str(&format!(" with a side offer: \"{side}\""));
                }
                s.push('.');
                s
            }
            EventKind::RespondToOffer { accept: true, price } => {
                format!("{subject} accepted the offer of {}.", price.display_dollars())
            }
            EventKind::RespondToOffer { accept: false, price } => {
                format!("{subject} rejected the offer of {}.", price.display_dollars())
            }
            EventKind::SendMessage { content } => format!("{subject} said: \"{content}\""),
            EventKind::SearchPrice { .. } => format!("{subject} checked market reference prices."),
            EventKind::QuitNegotiation => format!("{subject} left the negotiation."),
            EventKind::WaitForResponse => format!("{subject} is waiting for a response."),
            EventKind::WaitForTimePeriod { duration_s } => format!("{subject} paused for {duration_s} seconds."),
            EventKind::Terminated { outcome } => match outcome {
                OutcomeStatus::Deal { price } => format!("Deal closed at {}.", price.display_dollars()),
                OutcomeStatus::Quit { .. } => "The negotiation ended without a deal.".to_string(),
                OutcomeStatus::RoundLimit => "The round limit was reached. The negotiation ended without a deal.".to_string(),
            },
        };
        lines.push(line);
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub scenario: Scenario,
    pub listing_price: Money,
    pub config: EngineConfig,
    pub buyer: AgentInfo,
    pub seller: AgentInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    /// Verbatim agent output.
    pub raw: String,
    pub report: ParseReport,
    #[serde(default)]
    pub transport_retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    pub round: u32,
    pub actor: Role,
    /// Observation delivered to the agent before it acted.
    pub observation: String,
    /// Every message the agent produced this turn, reprompts included; the
    /// last one is the one executed.
    pub messages: Vec<MessageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agent_errors: Vec<String>,
}

impl TurnRecord {
    pub fn final_message(&self) -> Option<&MessageRecord> {
        self.messages.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationTrace {
    pub header: TraceHeader,
    pub events: Vec<Event>,
    pub turns: Vec<TurnRecord>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(Box<TraceHeader>),
    Turn(TurnRecord),
    Event(Event),
    Outcome(Outcome),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("malformed trace: {0}")]
    Malformed(String),
}

impl NegotiationTrace {
    pub fn turns_of(&self, role: Role) -> impl Iterator<Item = &TurnRecord> {
        self.turns.iter().filter(move |t| t.actor == role)
    }

    /// Records in file order: header, listing post, then each turn followed by
    /// its events, then the outcome.
    pub fn records(&self) -> Vec<TraceRecord> {
        let mut out = Vec::with_capacity(2 + self.turns.len() + self.events.len());
        out.push(TraceRecord::Header(Box::new(self.header.clone())));
        out.extend(self.events.iter().filter(|e| e.turn.is_none()).cloned().map(TraceRecord::Event));
        for t in &self.turns {
            out.push(TraceRecord::Turn(t.clone()));
            out.extend(self.events.iter().filter(|e| e.turn == Some(t.turn)).cloned().map(TraceRecord::Event));
        }
        out.push(TraceRecord::Outcome(self.outcome.clone()));
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut header = None;
        let mut events = Vec::new();
        let mut turns = Vec::new();
        let mut outcome = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|source| TraceError::Json { line: i + 1, source })?;
            if outcome.is_some() {
                return Err(TraceError::Malformed(format!("line {}: record after outcome", i + 1)));
            }
            match rec {
                TraceRecord::Header(h) if header.is_none() => header = Some(*h),
                TraceRecord::Header(_) => return Err(TraceError::Malformed("duplicate header".into())),
                _ if header.is_none() => return Err(TraceError::Malformed("first record must be the header".into())),
                TraceRecord::Turn(t) => turns.push(t),
                TraceRecord::Event(e) => events.push(e),
                TraceRecord::Outcome(o) => outcome = Some(o),
            }
        }
        let header = header.ok_or_else(|| TraceError::Malformed("empty trace".into()))?;
        let outcome = outcome.ok_or_else(|| TraceError::Malformed("missing outcome record".into()))?;
        Ok(NegotiationTrace { header, events, turns, outcome })
    }

    pub fn from_jsonl(s: &str) -> Result<Self, TraceError> {
        Self::read_jsonl(s.as_bytes())
    }
}

impl fmt::Display for NegotiationTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_jsonl())
    }
}

// ---------------------------------------------------------------------------
// Running

/// Runs one negotiation to completion.
pub fn run(
    scenario: &Scenario,
    buyer: &mut dyn Agent,
    seller: &mut dyn Agent,
    config: &EngineConfig,
) -> Result<NegotiationTrace, EngineError> {
    let listing_price = config.listing_price_for(&scenario.listing);
    let mut state = NegotiationState::init(scenario.clone(), listing_price, config.clone())?;
    let header = TraceHeader {
        version: TRACE_VERSION,
        scenario: scenario.clone(),
        listing_price,
        config: config.clone(),
        buyer: buyer.info(),
        seller: seller.info(),
    };

    let opening = state.opening_observation();
    let mut observations = [opening.clone(), opening];
    let mut feedback: [Vec<CallResult>; 2] = [Vec::new(), Vec::new()];
    let idx = |r: Role| match r {
        Role::Buyer => 0,
        Role::Seller => 1,
    };
    let mut own_turns = [0u32; 2];
    let mut turns = Vec::new();

    while !state.is_terminated() {
        let actor = state.to_move();
        let agent: &mut dyn Agent = match actor {
            Role::Buyer => &mut *buyer,
            Role::Seller => &mut *seller,
        };
        let turn_no = state.turns() + 1;
        let ctx = TurnContext {
            role: actor,
            turn: turn_no,
            own_turn: own_turns[idx(actor)],
            round: turn_no.div_ceil(2),
            max_rounds: config.max_rounds,
            listing: &scenario.listing,
            listing_price,
            pending_offer: state.pending_offer(),
            history: state.history(),
            observation: &observations[idx(actor)],
            feedback: &feedback[idx(actor)],
        };
        let mut errors = Vec::new();
        let mut reply = None;
        for _ in 0..=config.agent_retries {
            match agent.take_turn(&ctx) {
                Ok(r) if !r.messages.is_empty() => {
                    reply = Some(r);
                    break;
                }
                Ok(_) => errors.push("agent returned no message".to_string()),
                Err(e) => errors.push(e.to_string()),
            }
        }
        let observation_text = observations[idx(actor)].text.clone();
        own_turns[idx(actor)] += 1;

        let Some(reply) = reply else {
            log::warn!("{actor} agent failed after {} attempts: {}", errors.len(), errors.last().map_or("", String::as_str));
            let cause = AgentError::Exhausted { attempts: errors.len() as u32, last: errors.last().cloned().unwrap_or_default() };
            state.fault(actor, cause.to_string()).expect("negotiation is live");
            turns.push(TurnRecord {
                turn: turn_no,
                round: turn_no.div_ceil(2),
                actor,
                observation: observation_text,
                messages: Vec::new(),
                usage: None,
                agent_errors: errors,
            });
            break;
        };

        let overflow = config.overflows(reply.usage);
        let replies = if overflow {
            log::info!("{actor} prompt exceeds {} tokens; ending the episode", config.context_limit_tokens.unwrap_or_default());
            vec![AgentMessage::new(OVERFLOW_REPLY)]
        } else {
            reply.messages
        };
        let mut messages: Vec<MessageRecord> = Vec::with_capacity(replies.len());
        let mut last_parse = None;
        for m in &replies {
            let parsed = parse_turn(&m.raw);
            messages.push(MessageRecord {
                raw: m.raw.clone(),
                report: ParseReport::from_parse(&parsed),
                transport_retries: m.transport_retries,
            });
            last_parse = Some(parsed);
        }
        let executable = match last_parse.expect("reply has at least one message") {
            Ok(out) => out,
            Err(_) => AgentTurnOutput { thought: String::new(), calls: Vec::new(), raw: String::new(), diagnostics: Vec::new() },
        };
        let step = state.step(actor, &executable).expect("engine drives turn order");
        if overflow {
            state.overflow = true;
        }
        let last = messages.last_mut().expect("non-empty");
        if last.report.parseable {
            last.report.executed_ok = step.report.executed_ok;
            last.report.exec_attempted = step.report.attempted;
            last.report.diagnostics.extend(step.report.diagnostics);
        }
        turns.push(TurnRecord {
            turn: turn_no,
            round: turn_no.div_ceil(2),
            actor,
            observation: observation_text,
            messages,
            usage: reply.usage,
            agent_errors: errors,
        });
        feedback[idx(actor)] = step.feedback;
        observations[idx(actor.counterpart())] = step.observation;
    }

    let outcome = state.outcome().expect("loop ends on termination");
    Ok(NegotiationTrace { header, events: state.history().to_vec(), turns, outcome })
}

/// Re-executes a recorded trace's turns and returns the resulting outcome.
pub fn replay(trace: &NegotiationTrace) -> Result<Outcome, TraceError> {
    let h = &trace.header;
    let mut state =
        NegotiationState::init(h.scenario.clone(), h.listing_price, h.config.clone()).map_err(|e| TraceError::Malformed(e.to_string()))?;
    for t in &trace.turns {
        match t.final_message() {
            None => {
                let cause = trace.outcome.fault.as_ref().map_or_else(|| "agent failure".to_string(), |f| f.cause.clone());
                state.fault(t.actor, cause).map_err(|e| TraceError::Malformed(e.to_string()))?;
            }
            Some(m) => {
                let out = parse_turn(&m.raw).unwrap_or_else(|_| AgentTurnOutput {
                    thought: String::new(),
                    calls: Vec::new(),
                    raw: m.raw.clone(),
                    diagnostics: Vec::new(),
                });
                state.step(t.actor, &out).map_err(|e| TraceError::Malformed(format!("turn {}: {e}", t.turn)))?;
                state.overflow |= h.config.overflows(t.usage);
            }
        }
    }
    state.outcome().ok_or_else(|| TraceError::Malformed("replay did not terminate".into()))
}

/// Everything an agent may see when asked for a turn.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    pub role: Role,
    /// 1-based index over both agents' turns.
    pub turn: u32,
    /// How many turns this agent has already taken.
    pub own_turn: u32,
    pub round: u32,
    pub max_rounds: u32,
    pub listing: &'a Listing,
    pub listing_price: Money,
    pub pending_offer: Option<&'a PendingOffer>,
    pub history: &'a [Event],
    pub observation: &'a Observation,
    pub feedback: &'a [CallResult],
}

impl TurnContext<'_> {
    /// Offers this role has made so far, oldest first.
    pub fn own_offers(&self) -> Vec<Money> {
        offers_by(self.history, self.role)
    }

    /// Pending offer from the counterpart, if any.
    pub fn counter_offer(&self) -> Option<Money> {
        self.pending_offer.filter(|p| p.by != self.role).map(|p| p.price)
    }
}

pub fn offers_by(events: &[Event], role: Role) -> Vec<Money> {
    events
        .iter()
        .filter(|e| e.actor == role)
        .filter_map(|e| match e.kind {
            EventKind::MakeOffer { price, .. } => Some(price),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{laptop_gft, laptop_ngft};

    fn turn(raw: &str) -> AgentTurnOutput {
        parse_turn(raw).unwrap()
    }

    fn seller_first() -> EngineConfig {
        EngineConfig { first_mover: Role::Seller, ..EngineConfig::default() }
    }

    #[test]
    fn init_posts_the_listing() {
        let s = NegotiationState::init(laptop_gft(), Money::from_dollars(1500), EngineConfig::default()).unwrap();
        assert_eq!(s.history().len(), 1);
        assert_eq!(s.history()[0].kind, EventKind::ListingPosted { price: Money::from_dollars(1500) });
        assert_eq!(s.to_move(), Role::Buyer);
        assert_eq!((s.turns(), s.round(), s.clock()), (0, 0, SimTime::ZERO));
        assert_eq!(
            NegotiationState::init(laptop_gft(), Money::ZERO, EngineConfig::default()).unwrap_err(),
            EngineError::InvalidListingPrice(Money::ZERO)
        );
    }

    #[test]
    fn gft_transcript_closes_at_1050() {
        let mut s = NegotiationState::init(laptop_gft(), Money::from_dollars(1500), seller_first()).unwrap();
        s.step(Role::Seller, &turn("Code: make_offer(1400)")).unwrap();
        let r = s.step(Role::Buyer, &turn("Code: send_message(\"Your price is too high for a used laptop\")\nmake_offer(950)")).unwrap();
        assert!(r.observation.text.contains("Buyer rejected your offer of $1,400 and proposed $950."));
        s.step(Role::Seller, &turn("Code: send_message(\"I can't go that low, but I can offer a discount\")\nmake_offer(1150)")).unwrap();
        s.step(Role::Buyer, &turn("Code: make_offer(1050)")).unwrap();
        let r = s.step(Role::Seller, &turn("Code: respond_to_offer(True)")).unwrap();
        assert_eq!(r.report.executed_ok, 1);
        let out = s.outcome().unwrap();
        assert_eq!(out.status, OutcomeStatus::Deal { price: Money::from_dollars(1050) });
        assert_eq!((out.buyer_utility, out.seller_utility), (Money::from_dollars(150), Money::from_dollars(150)));
        assert_eq!((out.turns_used, out.rounds_used), (5, 3));
        assert_eq!(s.step(Role::Buyer, &turn("Code: make_offer(1)")).unwrap_err(), TurnRejected::AlreadyTerminated);
    }

    #[test]
    fn respond_without_pending_offer_is_an_execution_failure() {
        let mut s = NegotiationState::init(laptop_gft(), Money::from_dollars(1500), EngineConfig::default()).unwrap();
        let r = s.step(Role::Buyer, &turn("Code: respond_to_offer(True)\nmake_offer(900)\nwait_for_response()")).unwrap();
        assert_eq!((r.report.executed_ok, r.report.attempted), (2, 3));
        assert!(!r.feedback[0].ok);
        assert!(!s.is_terminated());
        assert_eq!(s.pending_offer().unwrap().price, Money::from_dollars(900));
        // Own offer cannot be accepted either.
        let r = s.step(Role::Seller, &turn("Code: send_message(\"hm\")")).unwrap();
        assert_eq!(r.report.executed_ok, 1);
        let r = s.step(Role::Buyer, &turn("Code: respond_to_offer(True)")).unwrap();
        assert_eq!(r.report.executed_ok, 0);
    }

    #[test]
    fn quit_ends_with_zero_utilities() {
        let mut s = NegotiationState::init(laptop_ngft(), Money::from_dollars(1500), EngineConfig::default()).unwrap();
        s.step(Role::Buyer, &turn("Code: quit_negotiation(agent=\"buyer\")\nsend_message(\"late\")")).unwrap();
        let out = s.outcome().unwrap();
        assert_eq!(out.status, OutcomeStatus::Quit { by: Role::Buyer });
        assert_eq!((out.buyer_utility, out.seller_utility), (Money::ZERO, Money::ZERO));
    }

    #[test]
    fn agent_impersonation_fails_the_call() {
        let mut s = NegotiationState::init(laptop_gft(), Money::from_dollars(1500), EngineConfig::default()).unwrap();
        let r =
            s.step(Role::Buyer, &turn("Code: make_offer(agent=\"seller\", price=100)\nmake_offer(agent=\"BUYER\", price=200)")).unwrap();
        assert_eq!((r.report.executed_ok, r.report.attempted), (1, 2));
        assert_eq!(s.pending_offer().unwrap().price, Money::from_dollars(200));
    }

    #[test]
    fn not_your_turn() {
        let mut s = NegotiationState::init(laptop_gft(), Money::from_dollars(1500), EngineConfig::default()).unwrap();
        assert_eq!(
            s.step(Role::Seller, &turn("Code: wait_for_response()")).unwrap_err(),
            TurnRejected::NotYourTurn { expected: Role::Buyer }
        );
    }

    #[test]
    fn stalling_hits_the_round_limit() {
        let mut s = NegotiationState::init(laptop_gft(), Money::from_dollars(1500), EngineConfig::default()).unwrap();
        let mut role = Role::Buyer;
        while !s.is_terminated() {
            s.step(role, &turn("Code: send_message(\"hello\")\nsearch_price()")).unwrap();
            role = role.counterpart();
        }
        let out = s.outcome().unwrap();
        assert_eq!(out.status, OutcomeStatus::RoundLimit);
        assert_eq!((out.rounds_used, out.turns_used), (10, 20));
    }

    #[test]
    fn waiting_moves_the_clock_and_batches_by_timestamp() {
        let mut s = NegotiationState::init(laptop_gft(), Money::from_dollars(1500), EngineConfig::default()).unwrap();
        let r = s.step(Role::Buyer, &turn("Code: send_message(\"one moment\")\nwait_for_time_period(30)\nmake_offer(700)")).unwrap();
        assert!(r.observation.text.contains("paused for 30 seconds"));
        let ts: Vec<_> = r.observation.machine.iter().map(|e| e.timestamp.millis()).collect();
        assert_eq!(ts, vec![0, 0, 30_000]);
        assert!(r.observation.machine.iter().all(|e| e.actor == Role::Buyer));
        assert_eq!(s.clock(), SimTime::from_millis(31_000));

        let mut q = EventQueue::default();
        for e in &r.observation.machine {
            q.push(e.clone());
        }
        assert_eq!(q.pop_batch().len(), 2);
        assert_eq!(q.pop_batch().len(), 1);
        assert!(q.pop_batch().is_empty());
    }

    /// Haggles forever; its reported prompt grows by 1000 tokens per turn.
    struct Growing(Money);

    impl Agent for Growing {
        fn info(&self) -> AgentInfo {
            AgentInfo { name: "growing".into(), kind: "test".into(), temperature: None, system_prompt: String::new() }
        }

        fn take_turn(&mut self, ctx: &TurnContext<'_>) -> Result<crate::agents::AgentReply, AgentError> {
            let raw = format!("Thought: hold.\nCode:\nmake_offer(price={})\nwait_for_response()", self.0);
            let usage = TokenUsage { input_tokens: 1000 * (ctx.own_turn as u64 + 1), output_tokens: 50 };
            Ok(crate::agents::AgentReply { messages: vec![AgentMessage::new(raw)], usage: Some(usage) })
        }
    }

    #[test]
    fn oversized_prompt_ends_the_episode_with_a_flagged_quit() {
        let config = EngineConfig { context_limit_tokens: Some(2500), ..EngineConfig::default() };
        let (mut b, mut s) = (Growing(Money::from_dollars(900)), Growing(Money::from_dollars(1200)));
        let t = run(&laptop_gft(), &mut b, &mut s, &config).unwrap();

        assert_eq!(t.outcome.status, OutcomeStatus::Quit { by: Role::Buyer });
        assert!(t.outcome.overflow);
        assert_eq!(t.outcome.turns_used, 5);
        let last = t.turns.last().unwrap();
        assert_eq!(last.messages.len(), 1);
        assert_eq!(last.messages[0].raw, OVERFLOW_REPLY);
        assert_eq!(replay(&t).unwrap(), t.outcome);
        assert_eq!(NegotiationTrace::from_jsonl(&t.to_jsonl()).unwrap(), t);

        let t = run(&laptop_gft(), &mut b, &mut s, &EngineConfig::default()).unwrap();
        assert_eq!(t.outcome.status, OutcomeStatus::RoundLimit);
        assert!(!t.outcome.overflow);
    }

    #[test]
    fn trace_records_round_trip() {
        let ev = Event {
            seq: 3,
            timestamp: SimTime::from_millis(1500),
            actor: Role::Seller,
            turn: Some(2),
            kind: EventKind::MakeOffer { price: Money::from_dollars(1150), side_offer: None, countered: Some(Money::from_dollars(950)) },
        };
        let line = serde_json::to_string(&TraceRecord::Event(ev.clone())).unwrap();
        assert_eq!(
            line,
            r#"{"record":"event","seq":3,"timestamp":1.5,"actor":"seller","turn":2,"kind":"make_offer","price":"1150.00","countered":"950.00"}"#
        );
        assert_eq!(serde_json::from_str::<TraceRecord>(&line).unwrap(), TraceRecord::Event(ev));

        let out = Outcome::new(&laptop_gft(), OutcomeStatus::Deal { price: Money::from_dollars(1050) }, 3, 5);
        let line = serde_json::to_string(&TraceRecord::Outcome(out.clone())).unwrap();
        assert_eq!(serde_json::from_str::<TraceRecord>(&line).unwrap(), TraceRecord::Outcome(out));
    }
}
