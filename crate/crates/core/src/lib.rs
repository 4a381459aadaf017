//! Deterministic bilateral bargaining environment: alternating-offer
//! negotiations between scripted or hosted agents, trace-based metrics, and
//! training-signal preparation.

pub mod actions;
pub mod agents;
pub mod domain;
pub mod engine;
pub mod metrics;
pub mod rlprep;
pub mod scenarios;
pub mod tournament;

pub use actions::{parse_turn, AgentTurnOutput, ParseError, ParseReport, ToolCall};
pub use agents::{Agent, AgentConfig, AgentError, AgentKind, AgentSpec, PolicyId, PolicyParams, Roster};
pub use domain::{Listing, Money, Outcome, OutcomeStatus, Regime, Role, Scenario, Split};
pub use engine::{run, EngineConfig, NegotiationTrace};
pub use metrics::{aggregate, score_negotiation, AggregateReport, Grouping, NegotiationMetrics, SurplusShare};
pub use rlprep::{compute_reward, export_sft, group_advantages, MaskConfig, RewardBreakdown, RewardWeights, SftSample, Trajectory};
pub use scenarios::{gft_probability, sample_scenario, Catalog, Sampler, SamplerConfig, ScenarioMix};
pub use tournament::{execute, plan, ExecuteOptions, PricingTable, TournamentConfig, TournamentPlan, TournamentSummary};
