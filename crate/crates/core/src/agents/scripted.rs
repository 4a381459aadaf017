//! Deterministic baseline policies.
//!
//! Every IR-respecting policy clamps its offers to its own reservation and
//! accepts a counterpart offer only when it is individually rational and at
//! least as good as the offer it would make next.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentError, AgentInfo, AgentMessage, AgentReply};
use crate::actions::{render_turn, ToolCall};
use crate::domain::{Money, Role};
use crate::engine::TurnContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyId {
    LinearConceder,
    Boulware,
    Conceder,
    FirmAnchor,
    AlwaysAccept,
    AlwaysQuit,
    IrViolator,
}

impl PolicyId {
    pub const ALL: [PolicyId; 7] = [
        PolicyId::LinearConceder,
        PolicyId::Boulware,
        PolicyId::Conceder,
        PolicyId::FirmAnchor,
        PolicyId::AlwaysAccept,
        PolicyId::AlwaysQuit,
        PolicyId::IrViolator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::LinearConceder => "linear_conceder",
            PolicyId::Boulware => "boulware",
            PolicyId::Conceder => "conceder",
            PolicyId::FirmAnchor => "firm_anchor",
            PolicyId::AlwaysAccept => "always_accept",
            PolicyId::AlwaysQuit => "always_quit",
            PolicyId::IrViolator => "ir_violator",
        }
    }

    /// Whether the policy never accepts or proposes a price beyond its reservation.
    pub fn respects_ir(self) -> bool {
        !matches!(self, PolicyId::AlwaysAccept | PolicyId::IrViolator)
    }
}

impl std::str::FromStr for PolicyId {
    type Err = AgentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        PolicyId::ALL.into_iter().find(|p| p.as_str().replace('_', "") == norm).ok_or_else(|| AgentError::UnknownPolicy(s.to_string()))
    }
}

/// Optional knobs; unset fields fall back to per-policy defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    /// Opening offer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open: Option<Money>,
    /// Fraction of the remaining distance to the reservation conceded per offer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    /// Concession exponent for time-dependent tactics (< 1 holds firm, > 1 concedes early).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// How far past its reservation an IR violator goes, as a fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overshoot: Option<f64>,
    /// Send a short chat message alongside each offer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chatty: Option<bool>,
}

const BUYER_LINES: &[&str] = &[
    "That is more than I planned to spend.",
    "I have seen similar items go for less.",
    "I can pick it up today if the price works.",
    "Let's find a number that works for both of us.",
];
const SELLER_LINES: &[&str] = &[
    "It is in excellent condition.",
    "I have had other people asking about it.",
    "That price is already fair for what you get.",
    "I can include the original accessories.",
];

pub struct ScriptedAgent {
    name: String,
    policy: PolicyId,
    params: PolicyParams,
    role: Role,
    reservation: Money,
    rng: ChaCha8Rng,
    system_prompt: String,
}

impl ScriptedAgent {
    pub fn new(
        name: &str,
        policy: PolicyId,
        params: PolicyParams,
        role: Role,
        reservation: Money,
        seed: u64,
        system_prompt: String,
    ) -> Self {
        let stream = match role {
            Role::Buyer => 0x6275_7965,
            Role::Seller => 0x7365_6c6c,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        ScriptedAgent { name: name.to_string(), policy, params, role, reservation, rng, system_prompt }
    }

    pub fn policy(&self) -> PolicyId {
        self.policy
    }

    fn default_open(&self, listing_price: Money) -> Money {
        match self.role {
            Role::Seller => listing_price,
            Role::Buyer => Money::from_cents_f64(listing_price.cents() as f64 * 0.6).unwrap_or(listing_price),
        }
    }

    fn clamp_ir(&self, price: Money) -> Money {
        match self.role {
            Role::Buyer => price.min(self.reservation),
            Role::Seller => price.max(self.reservation),
        }
    }

    fn is_ir(&self, price: Money) -> bool {
        match self.role {
            Role::Buyer => price <= self.reservation,
            Role::Seller => price >= self.reservation,
        }
    }

    /// The offer this policy makes on its next turn.
    fn next_offer(&self, ctx: &TurnContext<'_>) -> Money {
        let own = ctx.own_offers();
        let open = self.clamp_ir(self.params.open.unwrap_or_else(|| self.default_open(ctx.listing_price)));
        let res = self.reservation.cents() as f64;
        let toward = |from: Money, fraction: f64| -> Money {
            let from_c = from.cents() as f64;
            Money::from_cents_f64(from_c + fraction * (res - from_c)).unwrap_or(from)
        };
        match self.policy {
            PolicyId::LinearConceder => match own.last() {
                None => open,
                Some(&last) => self.clamp_ir(toward(last, self.params.rate.unwrap_or(0.3))),
            },
            PolicyId::Boulware | PolicyId::Conceder => {
                let beta = self.params.beta.unwrap_or(if self.policy == PolicyId::Boulware { 0.2 } else { 5.0 });
                let horizon = ctx.max_rounds.saturating_sub(1).max(1) as f64;
                let t = (own.len() as f64 / horizon).min(1.0);
                self.clamp_ir(toward(open, t.powf(1.0 / beta)))
            }
            PolicyId::FirmAnchor => open,
            PolicyId::AlwaysAccept => self.reservation,
            PolicyId::IrViolator => {
                let over = self.params.overshoot.unwrap_or(0.1);
                let delta = (self.reservation.cents() as f64 * over).max(100.0);
                let cents = match self.role {
                    Role::Buyer => res + delta,
                    Role::Seller => (res - delta).max(1.0),
                };
                Money::from_cents_f64(cents).unwrap_or(self.reservation)
            }
            PolicyId::AlwaysQuit => self.reservation,
        }
    }

    fn decide(&mut self, ctx: &TurnContext<'_>) -> (String, Vec<ToolCall>) {
        let counter = ctx.counter_offer();
        if self.policy == PolicyId::AlwaysQuit {
            return ("I will not negotiate on this item.".into(), vec![ToolCall::QuitNegotiation]);
        }
        if let Some(c) = counter {
            let accept = match self.policy {
                PolicyId::AlwaysAccept | PolicyId::IrViolator => true,
                _ => {
                    let next = self.next_offer(ctx);
                    let last_chance = ctx.turn + 2 > 2 * ctx.max_rounds;
                    self.is_ir(c) && (last_chance || !self.role.prefers(next, c))
                }
            };
            if accept {
                let thought = format!("The offer of {} works for me. Accepting.", c.display_dollars());
                return (thought, vec![ToolCall::RespondToOffer { accept: true }]);
            }
        }
        let next = self.next_offer(ctx);
        let own = ctx.own_offers();
        let mut calls = Vec::with_capacity(3);
        if self.params.chatty.unwrap_or(true) {
            let lines = match self.role {
                Role::Buyer => BUYER_LINES,
                Role::Seller => SELLER_LINES,
            };
            let line = lines[self.rng.random_range(0..lines.len())];
            calls.push(ToolCall::SendMessage { content: line.to_string() });
        }
        let thought = match (own.last(), counter) {
            (None, _) => format!("Opening at {}.", next.display_dollars()),
            (Some(_), Some(c)) => {
                format!("Their offer of {} is not good enough. Countering at {}.", c.display_dollars(), next.display_dollars())
            }
            (Some(_), None) => format!("Offering {}.", next.display_dollars()),
        };
        calls.push(ToolCall::MakeOffer { price: next, side_offer: None });
        calls.push(ToolCall::WaitForResponse);
        (thought, calls)
    }
}

impl Agent for ScriptedAgent {
    fn info(&self) -> AgentInfo {
        AgentInfo {
            name: self.name.clone(),
            kind: format!("scripted:{}", self.policy.as_str()),
            temperature: None,
            system_prompt: self.system_prompt.clone(),
        }
    }

    fn take_turn(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        let (thought, calls) = self.decide(ctx);
        let raw = render_turn(&thought, &calls, self.role);
        Ok(AgentReply { messages: vec![AgentMessage::new(raw)], usage: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{laptop_gft, laptop_ngft};
    use crate::domain::{OutcomeStatus, Scenario};
    use crate::engine::{run, EngineConfig, EventKind, NegotiationTrace};

    fn agent(policy: PolicyId, params: PolicyParams, role: Role, s: &Scenario) -> ScriptedAgent {
        ScriptedAgent::new(policy.as_str(), policy, params, role, s.reservation(role), s.seed, String::new())
    }

    fn offers(trace: &NegotiationTrace, role: Role) -> Vec<Money> {
        crate::engine::offers_by(&trace.events, role)
    }

    fn linear(open: i64, rate: f64) -> PolicyParams {
        PolicyParams { open: Some(Money::from_dollars(open)), rate: Some(rate), ..Default::default() }
    }

    #[test]
    fn policy_ids_parse() {
        assert_eq!("LinearConceder".parse::<PolicyId>().unwrap(), PolicyId::LinearConceder);
        assert_eq!("ir_violator".parse::<PolicyId>().unwrap(), PolicyId::IrViolator);
        assert_eq!("IRViolator".parse::<PolicyId>().unwrap(), PolicyId::IrViolator);
        assert!(matches!("Tit4Tat".parse::<PolicyId>(), Err(AgentError::UnknownPolicy(_))));
    }

    #[test]
    fn linear_conceder_follows_the_geometric_sequence() {
        let s = laptop_gft();
        let mut seller = agent(PolicyId::LinearConceder, linear(1400, 0.5), Role::Seller, &s);
        let mut buyer =
            agent(PolicyId::FirmAnchor, PolicyParams { open: Some(Money::from_dollars(300)), ..Default::default() }, Role::Buyer, &s);
        let cfg = EngineConfig { first_mover: Role::Seller, ..EngineConfig::default() };
        let trace = run(&s, &mut buyer, &mut seller, &cfg).unwrap();
        // Oracle: p_{t+1} = p_t - rate * (p_t - s), rounded to cents.
        let mut expected = vec![140_000i64];
        while expected.len() < 10 {
            let p = *expected.last().unwrap() as f64;
            expected.push((p - 0.5 * (p - 90_000.0)).round_ties_even() as i64);
        }
        let got: Vec<i64> = offers(&trace, Role::Seller).iter().map(|m| m.cents()).collect();
        assert_eq!(&got[..3], &[140_000, 115_000, 102_500]);
        assert_eq!(got, expected);
        // The firm buyer takes the seller's tenth offer on its own last turn.
        assert_eq!(trace.outcome.status, OutcomeStatus::Deal { price: Money::from_cents(expected[9]) });
        assert_eq!(trace.outcome.turns_used, 20);
    }

    #[test]
    fn conceder_pair_crosses_where_hand_simulation_says() {
        let s = laptop_gft();
        let mut buyer = agent(PolicyId::LinearConceder, linear(950, 0.4), Role::Buyer, &s);
        let mut seller = agent(PolicyId::LinearConceder, linear(1400, 0.5), Role::Seller, &s);
        let trace = run(&s, &mut buyer, &mut seller, &EngineConfig::default()).unwrap();
        // Buyer 950, seller 1400, buyer 1050, seller 1150, buyer 1110; the
        // seller's next offer (1025) is below 1110 so it accepts.
        assert_eq!(offers(&trace, Role::Buyer), vec![Money::from_dollars(950), Money::from_dollars(1050), Money::from_dollars(1110)]);
        assert_eq!(trace.outcome.status, OutcomeStatus::Deal { price: Money::from_dollars(1110) });
        assert_eq!(trace.outcome.turns_used, 6);
        assert_eq!(trace.outcome.rounds_used, 3);
    }

    #[test]
    fn always_quit_quits_immediately() {
        let s = laptop_gft();
        let mut buyer = agent(PolicyId::AlwaysQuit, PolicyParams::default(), Role::Buyer, &s);
        let mut seller = agent(PolicyId::Boulware, PolicyParams::default(), Role::Seller, &s);
        let trace = run(&s, &mut buyer, &mut seller, &EngineConfig::default()).unwrap();
        assert_eq!(trace.outcome.status, OutcomeStatus::Quit { by: Role::Buyer });
        assert_eq!(trace.outcome.turns_used, 1);
    }

    #[test]
    fn ir_violator_buyer_accepts_anything() {
        let s = laptop_gft();
        let mut buyer = agent(PolicyId::IrViolator, PolicyParams::default(), Role::Buyer, &s);
        let mut seller =
            agent(PolicyId::FirmAnchor, PolicyParams { open: Some(Money::from_cents(120_001)), ..Default::default() }, Role::Seller, &s);
        let cfg = EngineConfig { first_mover: Role::Seller, ..EngineConfig::default() };
        let trace = run(&s, &mut buyer, &mut seller, &cfg).unwrap();
        assert_eq!(trace.outcome.status, OutcomeStatus::Deal { price: Money::from_cents(120_001) });
        assert_eq!(trace.outcome.buyer_utility, Money::from_cents(-1));
    }

    #[test]
    fn ir_policies_never_deal_without_gains_from_trade() {
        let s = laptop_ngft();
        let ir = [PolicyId::LinearConceder, PolicyId::Boulware, PolicyId::Conceder, PolicyId::FirmAnchor];
        for b in ir {
            for sp in ir {
                let mut buyer = agent(b, PolicyParams::default(), Role::Buyer, &s);
                let mut seller = agent(sp, PolicyParams::default(), Role::Seller, &s);
                let trace = run(&s, &mut buyer, &mut seller, &EngineConfig::default()).unwrap();
                assert!(!trace.outcome.is_deal(), "{b:?} vs {sp:?}");
                assert_eq!(trace.outcome.status, OutcomeStatus::RoundLimit);
                assert!(trace.outcome.rounds_used <= 10);
            }
        }
    }

    #[test]
    fn time_dependent_offers_match_closed_form() {
        let s = laptop_gft();
        let cfg = EngineConfig::default();
        let offers_of = |p| {
            let mut buyer =
                agent(PolicyId::FirmAnchor, PolicyParams { open: Some(Money::from_dollars(100)), ..Default::default() }, Role::Buyer, &s);
            let mut seller = agent(p, PolicyParams::default(), Role::Seller, &s);
            offers(&run(&s, &mut buyer, &mut seller, &cfg).unwrap(), Role::Seller)
        };
        // offer_k = open + (s - open) * (k / 9)^(1 / beta), open = listing price.
        let oracle = |beta: f64, k: usize| {
            let (open, res) = (150_000.0, 90_000.0);
            Money::from_cents((open + (res - open) * (k as f64 / 9.0).powf(1.0 / beta)).round_ties_even() as i64)
        };
        let (b, c) = (offers_of(PolicyId::Boulware), offers_of(PolicyId::Conceder));
        assert_eq!(b.len(), 9);
        for k in 0..b.len() {
            assert_eq!(b[k], oracle(0.2, k), "boulware offer {k}");
            assert_eq!(c[k], oracle(5.0, k), "conceder offer {k}");
        }
        assert!(b.iter().zip(&c).skip(1).all(|(x, y)| x > y));
    }

    #[test]
    fn scripted_runs_are_deterministic() {
        let s = laptop_gft();
        let go = || {
            let mut buyer = agent(PolicyId::Conceder, PolicyParams::default(), Role::Buyer, &s);
            let mut seller = agent(PolicyId::Boulware, PolicyParams::default(), Role::Seller, &s);
            run(&s, &mut buyer, &mut seller, &EngineConfig::default()).unwrap().to_jsonl()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn ir_policies_never_accept_irrational_offers() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        let ir = [PolicyId::LinearConceder, PolicyId::Boulware, PolicyId::Conceder, PolicyId::FirmAnchor];
        runner
            .run(&(0usize..4, 0usize..7, 1_000i64..200_000, 1_000i64..200_000, any::<u64>()), |(pi, oi, b, s, seed)| {
                let listing = crate::domain::fixtures::laptop();
                let sc = Scenario::new(listing, Money::from_cents(b), Money::from_cents(s), crate::domain::Split::Test, seed);
                for role in [Role::Buyer, Role::Seller] {
                    let mut me = agent(ir[pi], PolicyParams::default(), role, &sc);
                    let mut other = agent(PolicyId::ALL[oi], PolicyParams::default(), role.counterpart(), &sc);
                    let trace = match role {
                        Role::Buyer => run(&sc, &mut me, &mut other, &EngineConfig::default()).unwrap(),
                        Role::Seller => run(&sc, &mut other, &mut me, &EngineConfig::default()).unwrap(),
                    };
                    for e in &trace.events {
                        if e.actor != role {
                            continue;
                        }
                        match e.kind {
                            EventKind::RespondToOffer { accept: true, price } | EventKind::MakeOffer { price, .. } => {
                                prop_assert!(me.is_ir(price), "{role} {:?} at {price}", ir[pi]);
                            }
                            _ => {}
                        }
                    }
                    prop_assert!(trace.outcome.utility(role) >= Money::ZERO);
                }
                Ok(())
            })
            .unwrap();
    }
}
