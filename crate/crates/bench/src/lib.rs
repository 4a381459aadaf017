//! Shared fixtures for the benchmarks.

use bargainbench_core::agents::ScriptedAgent;
use bargainbench_core::domain::ListingSource;
use bargainbench_core::{run, sample_scenario, EngineConfig, Listing, Money, NegotiationTrace, PolicyId, Role, Scenario};

/// Deterministic listings with spreads from 0% to 150% of the low price.
pub fn listings(n: usize) -> Vec<Listing> {
    (0..n)
        .map(|i| {
            let low = 2_000 + (i as i64 * 7_919) % 200_000;
            Listing {
                id: format!("bench-{i}"),
                title: format!("Bench item {i}"),
                category: "Misc".into(),
                description: vec!["Lightly used.".into()],
                price_high: Money::from_cents(low + low * (i as i64 % 16) / 10),
                price_low: Money::from_cents(low),
                source: ListingSource::AmazonHistory,
            }
        })
        .collect()
}

pub fn scenarios(n: usize) -> Vec<Scenario> {
    listings(n).iter().enumerate().map(|(i, l)| sample_scenario(l, i as u64)).collect()
}

pub fn negotiate(scenario: &Scenario, buyer: PolicyId, seller: PolicyId) -> NegotiationTrace {
    let agent = |name: &str, policy, role| {
        ScriptedAgent::new(name, policy, Default::default(), role, scenario.reservation(role), scenario.seed, String::new())
    };
    let mut b = agent("buyer", buyer, Role::Buyer);
    let mut s = agent("seller", seller, Role::Seller);
    run(scenario, &mut b, &mut s, &EngineConfig::default()).expect("scripted run")
}
