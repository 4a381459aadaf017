//! Agent interface plus the scripted and remote implementations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Money, Role, Scenario};
use crate::engine::TurnContext;

pub mod fake_server;
pub mod prompt;
pub mod ratelimit;
pub mod remote;
pub mod scripted;

pub use prompt::{assemble_prompt, PromptBundle, PromptTemplate, TemplateError};
pub use remote::{ApiFlavor, RemoteAgent, RemoteConfig};
pub use scripted::{PolicyId, PolicyParams, ScriptedAgent};

/// Descriptive metadata written into trace headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub system_prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn add(&mut self, other: TokenUsage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

/// One raw completion produced during a turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentMessage {
    pub raw: String,
    /// Transport-level retries (e.g. HTTP 429) spent obtaining this message.
    pub transport_retries: u32,
}

impl AgentMessage {
    pub fn new(raw: impl Into<String>) -> Self {
        AgentMessage { raw: raw.into(), transport_retries: 0 }
    }
}

/// Everything an agent produced for one turn. The last message is executed;
/// earlier ones are outputs that failed to parse and triggered a reprompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AgentReply {
    pub messages: Vec<AgentMessage>,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("transport error: HTTP {status}")]
    Transport { status: u16 },
    #[error("connection error: {0}")]
    Connection(String),
    #[error("request timed out")]
    Timeout,
    #[error("environment variable {var} with the API key is not set")]
    AuthMissing { var: String },
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("unknown scripted policy {0:?}")]
    UnknownPolicy(String),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

pub trait Agent: Send {
    fn info(&self) -> AgentInfo;
    fn take_turn(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError>;
}

/// Roster entry: a named agent template independent of role and scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AgentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentKind {
    Remote(RemoteConfig),
    Scripted {
        policy: PolicyId,
        #[serde(default)]
        params: PolicyParams,
    },
}

/// A roster template bound to one side of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub spec: AgentSpec,
    pub role: Role,
    pub reservation: Money,
}

impl AgentConfig {
    pub fn for_scenario(spec: &AgentSpec, scenario: &Scenario, role: Role) -> Self {
        AgentConfig { spec: spec.clone(), role, reservation: scenario.reservation(role) }
    }

    /// Builds a ready-to-run agent for `scenario`.
    pub fn build(&self, scenario: &Scenario, listing_price: Money, template: &PromptTemplate) -> Result<Box<dyn Agent>, AgentError> {
        if !self.reservation.is_positive() {
            return Err(AgentError::InvalidConfig(format!("reservation must be positive, got {}", self.reservation)));
        }
        let bundle = assemble_prompt(scenario, self.role, listing_price, template).map_err(|e| AgentError::InvalidConfig(e.to_string()))?;
        Ok(match &self.spec.kind {
            AgentKind::Scripted { policy, params } => Box::new(ScriptedAgent::new(
                &self.spec.name,
                *policy,
                params.clone(),
                self.role,
                self.reservation,
                scenario.seed,
                bundle.system,
            )),
            AgentKind::Remote(cfg) => Box::new(RemoteAgent::new(&self.spec.name, cfg.clone(), self.role, bundle)?),
        })
    }
}

/// Roster file: `[[agents]]` tables in TOML, or `{"agents": [...]}` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    pub agents: Vec<AgentSpec>,
}

#[derive(Debug, Error)]
pub enum RosterError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate agent name {0:?}")]
    DuplicateName(String),
}

impl Roster {
    pub fn parse(text: &str, json: bool) -> Result<Self, RosterError> {
        let roster: Roster = if json { serde_json::from_str(text)? } else { toml::from_str(text)? };
        let mut seen = std::collections::BTreeSet::new();
        for a in &roster.agents {
            if !seen.insert(a.name.as_str()) {
                return Err(RosterError::DuplicateName(a.name.clone()));
            }
        }
        Ok(roster)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RosterError> {
        let text = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json)
    }
}
