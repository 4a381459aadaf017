//! System-prompt assembly.
//!
//! The default template follows a fixed section skeleton with our own
//! strategy wording. Custom templates may reorder or
//! rewrite sections but must contain `{RESERVATION}` and `{UTILITY_FORMULA}`
//! exactly once and `{TOOLS}` at least once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::MAX_CALLS_PER_TURN;
use crate::domain::{Money, Role, Scenario};
use crate::engine::DEFAULT_MAX_ROUNDS;

pub const DEFAULT_TEMPLATE: &str = r#"# Role and Objective
You are a skilled bargaining agent negotiating on behalf of the {ROLE} in a one-on-one negotiation over a single item. Your objective is to reach the deal that maximizes your own utility, or to walk away when no acceptable deal exists.

# Item
Title: {ITEM_TITLE}
Category: {ITEM_CATEGORY}
Description:
{ITEM_DESCRIPTION}
Listing price: {LISTING_PRICE}

# Critical Rule: Constraint Compliance
Your hard limit is private and binding. Violating it is the worst possible outcome, worse than no deal.

## Variable Definitions
HARD_LIMITS: {RESERVATION}
UTILITY: {UTILITY_FORMULA}

## Constraint Rules
{HARD_LIMIT_RULE}
Never propose or accept a price that gives you negative utility. Walking away yields zero utility, which is always better than a negative one.

## Mandatory Decision Process
Before every offer or response:
1. Identify the price currently on the table.
2. Recall your hard limit.
3. Calculate your utility at that price.
4. Decide: accept only if the utility is non-negative and you do not expect a better offer; otherwise counter or walk away.

# Negotiation Strategy Guidelines
- General approach: open with a deliberate anchor and aim to maximize your utility, not merely to close.
- Anchoring and positioning: use precise numbers and justify them; an ambitious but credible first offer shapes the rest of the negotiation.
- Concessions: make each concession smaller than the last to signal that you are approaching your limit.
- Non-monetary negotiation: side offers such as accessories, bundles or faster pickup can close a gap without moving the price.

# Rules You Must Follow
- Be persuasive and professional.
- Never reveal your hard limit to the {COUNTERPART}.
- If the {COUNTERPART} will not move into an acceptable range, exit firmly with quit_negotiation.
- The negotiation lasts at most {MAX_ROUNDS} rounds; each round is one buyer turn and one seller turn.

# How You Operate
Every reply has two parts:
Thought: your private reasoning. The {COUNTERPART} never sees it.
Code: up to {MAX_CALLS} tool calls, one per line, in the syntax shown below. Your turn ends after wait_for_response(), after a terminal call, or after {MAX_CALLS} calls.

# Tool Space and API Definitions
{TOOLS}

# Critical Tool Usage Patterns
Compute your utility in the Thought block before every make_offer or respond_to_offer call.

# Code Rules
- Only the calls listed above are available; there is no other code execution.
- Use agent="{AGENT}" in every call.
- Prices are plain numbers in dollars, e.g. price=1050.00.
"#;

pub const TOOLS_DOC: &str = r#"make_offer(agent, price, side_offer=None)
    Propose a price in dollars, optionally with a side offer. Replaces any offer of yours that is still pending; making an offer while the counterpart's offer is pending rejects it.
respond_to_offer(agent, response)
    Accept (True) or reject (False) the counterpart's pending offer. Accepting closes the deal at that price.
send_message(agent, content)
    Send a free-text message to the counterpart.
search_price(agent)
    Look up the item's historical highest and lowest market prices.
quit_negotiation(agent)
    Walk away. Both sides receive zero utility.
wait_for_response(agent)
    End your turn and wait for the counterpart.
wait_for_time_period(agent, duration)
    Let `duration` seconds of simulated time pass."#;

const PLACEHOLDERS: &[&str] = &[
    "ROLE",
    "ROLE_TITLE",
    "COUNTERPART",
    "AGENT",
    "ITEM_TITLE",
    "ITEM_CATEGORY",
    "ITEM_DESCRIPTION",
    "LISTING_PRICE",
    "RESERVATION",
    "UTILITY_FORMULA",
    "HARD_LIMIT_RULE",
    "MAX_ROUNDS",
    "MAX_CALLS",
    "TOOLS",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template is missing the {{{0}}} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("placeholder {{{0}}} must appear exactly once")]
    DuplicatePlaceholder(&'static str),
    #[error("unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate { text: DEFAULT_TEMPLATE.to_string() }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        PromptTemplate { text: text.into() }
    }

    fn count(&self, name: &str) -> usize {
        self.text.matches(&format!("{{{name}}}")).count()
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for name in ["RESERVATION", "UTILITY_FORMULA"] {
            match self.count(name) {
                0 => return Err(TemplateError::MissingPlaceholder(name)),
                1 => {}
                _ => return Err(TemplateError::DuplicatePlaceholder(name)),
            }
        }
        if self.count("TOOLS") == 0 {
            return Err(TemplateError::MissingPlaceholder("TOOLS"));
        }
        for (_, name) in placeholders(&self.text) {
            if !PLACEHOLDERS.contains(&name) {
                return Err(TemplateError::UnknownPlaceholder(name.to_string()));
            }
        }
        Ok(())
    }
}

/// `{NAME}` tokens (upper-case ASCII and underscores) with their byte offsets.
fn placeholders(text: &str) -> Vec<(usize, &str)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_uppercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, &text[start..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    /// Observations delivered so far, oldest first.
    pub history_rendering: Vec<String>,
    pub tools_doc: String,
}

pub fn reservation_line(role: Role, reservation: Money) -> String {
    match role {
        Role::Buyer => format!("b = {}", reservation.display_dollars()),
        Role::Seller => format!("s = {}", reservation.display_dollars()),
    }
}

pub fn utility_formula(role: Role) -> &'static str {
    match role {
        Role::Buyer => "U_B = b - p if a deal closes at price p; U_B = 0 if no deal is reached.",
        Role::Seller => "U_S = p - s if a deal closes at price p; U_S = 0 if no deal is reached.",
    }
}

fn hard_limit_rule(role: Role) -> &'static str {
    match role {
        Role::Buyer => "Never pay more than b. Any price above b gives you negative utility.",
        Role::Seller => "Never sell for less than s. Any price below s gives you negative utility.",
    }
}

/// Renders the system prompt for one side of a scenario. Only that side's
/// reservation is substituted.
pub fn assemble_prompt(
    scenario: &Scenario,
    role: Role,
    listing_price: Money,
    template: &PromptTemplate,
) -> Result<PromptBundle, TemplateError> {
    template.validate()?;
    let listing = &scenario.listing;
    let description = if listing.description.is_empty() {
        "- (no description)".to_string()
    } else {
        listing.description.iter().map(|d| format!("- {d}")).collect::<Vec<_>>().join("\n")
    };
    let value = |name: &str| -> String {
        match name {
            "ROLE" => role.as_str().to_string(),
            "ROLE_TITLE" => role.title().to_string(),
            "COUNTERPART" => role.counterpart().as_str().to_string(),
            "AGENT" => role.as_str().to_string(),
            "ITEM_TITLE" => listing.title.clone(),
            "ITEM_CATEGORY" => listing.category.clone(),
            "ITEM_DESCRIPTION" => description.clone(),
            "LISTING_PRICE" => listing_price.display_dollars(),
            "RESERVATION" => reservation_line(role, scenario.reservation(role)),
            "UTILITY_FORMULA" => utility_formula(role).to_string(),
            "HARD_LIMIT_RULE" => hard_limit_rule(role).to_string(),
            "MAX_ROUNDS" => DEFAULT_MAX_ROUNDS.to_string(),
            "MAX_CALLS" => MAX_CALLS_PER_TURN.to_string(),
            "TOOLS" => TOOLS_DOC.to_string(),
            _ => unreachable!("validated"),
        }
    };
    let text = &template.text;
    let mut system = String::with_capacity(text.len() + TOOLS_DOC.len());
    let mut last = 0;
    for (at, name) in placeholders(text) {
        system.push_str(&text[last..at]);
        system.push_str(&value(name));
        last = at + name.len() + 2;
    }
    system.push_str(&text[last..]);
    Ok(PromptBundle { system, history_rendering: Vec::new(), tools_doc: TOOLS_DOC.to_string() })
}
