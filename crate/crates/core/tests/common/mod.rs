#![allow(dead_code)]

use bargainbench_core::agents::{AgentInfo, AgentMessage, AgentReply, PolicyId, ScriptedAgent};
use bargainbench_core::domain::ListingSource;
use bargainbench_core::engine::TurnContext;
use bargainbench_core::{Agent, AgentError, Listing, Money, Role, Scenario, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn laptop() -> Listing {
    Listing {
        id: "used-laptop".into(),
        title: "Used Laptop".into(),
        category: "Electronics".into(),
        description: vec!["A used laptop in working condition.".into()],
        price_high: Money::from_dollars(1500),
        price_low: Money::from_dollars(800),
        source: ListingSource::AmazonHistory,
    }
}

pub fn laptop_scenario(buyer: i64, seller: i64) -> Scenario {
    Scenario::new(laptop(), Money::from_dollars(buyer), Money::from_dollars(seller), Split::Test, 7)
}

/// Listings with random price ranges, seeded.
pub fn random_listings(n: usize, seed: u64) -> Vec<Listing> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let low = rng.random_range(500..500_000i64);
            let high = low + rng.random_range(0..=low * 2);
            Listing {
                id: format!("item-{seed}-{i}"),
                title: format!("Item {i}"),
                category: "Misc".into(),
                description: vec![],
                price_high: Money::from_cents(high),
                price_low: Money::from_cents(low),
                source: ListingSource::AmazonHistory,
            }
        })
        .collect()
}

/// Plays back fixed raw outputs, one per turn.
pub struct Transcript {
    pub name: String,
    pub turns: std::vec::IntoIter<String>,
}

impl Transcript {
    pub fn new(name: &str, turns: &[&str]) -> Self {
        Transcript { name: name.into(), turns: turns.iter().map(|s| s.to_string()).collect::<Vec<_>>().into_iter() }
    }
}

impl Agent for Transcript {
    fn info(&self) -> AgentInfo {
        AgentInfo {
            name: self.name.clone(),
            kind: "transcript".into(),
            temperature: None,
            system_prompt: format!("You are {}.", self.name),
        }
    }

    fn take_turn(&mut self, _ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        let raw = self.turns.next().unwrap_or_else(|| "Code: quit_negotiation()".into());
        Ok(AgentReply { messages: vec![AgentMessage::new(raw)], usage: None })
    }
}

/// Wraps a scripted agent. Optionally prefixes an unparseable draft (as a
/// reprompted model would produce) and tags reasoning with a marker so
/// masking can be checked byte-for-byte.
pub struct Noisy {
    pub inner: ScriptedAgent,
    pub rng: ChaCha8Rng,
    pub garbage_prob: f64,
    pub reasoning_tag: Option<String>,
    pub turn: u32,
}

pub const REASONING_MARK: &str = "PRIVATE-REASONING";

impl Noisy {
    pub fn new(name: &str, policy: PolicyId, role: Role, scenario: &Scenario, seed: u64) -> Self {
        let inner =
            ScriptedAgent::new(name, policy, Default::default(), role, scenario.reservation(role), seed, format!("You are {name}."));
        Noisy { inner, rng: ChaCha8Rng::seed_from_u64(seed), garbage_prob: 0.0, reasoning_tag: None, turn: 0 }
    }
}

impl Agent for Noisy {
    fn info(&self) -> AgentInfo {
        self.inner.info()
    }

    fn take_turn(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        self.turn += 1;
        let mut reply = self.inner.take_turn(ctx)?;
        if let Some(tag) = &self.reasoning_tag {
            for m in &mut reply.messages {
                let mark = format!("{REASONING_MARK}-{tag}-{}", self.turn);
                m.raw = format!("<think>{mark} weighing the offer</think>\n{}", m.raw.replacen("Thought:", &format!("Thought: {mark}"), 1));
            }
        }
        if self.rng.random_bool(self.garbage_prob) {
            reply.messages.insert(0, AgentMessage::new("Let me think about the price a little more."));
        }
        Ok(reply)
    }
}
