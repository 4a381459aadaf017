//! Value types shared by every stage of the pipeline: money, roles, listings,
//! scenarios and negotiation outcomes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// An amount of money in integer cents.
///
/// Prices are always positive when they appear in offers; utilities reuse the
/// same type and may be negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid money amount {input:?}: {reason}")]
pub struct MoneyParseError {
    pub input: String,
    pub reason: &'static str,
}

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    pub const fn from_dollars(dollars: i64) -> Self {
        Money(dollars * 100)
    }

    /// Rounds a dollar amount to the nearest cent, ties to even.
    ///
    /// Returns `None` for non-finite input or values outside the `i64` cent range.
    pub fn from_dollars_f64(dollars: f64) -> Option<Self> {
        Self::from_cents_f64(dollars * 100.0)
    }

    /// Rounds a (fractional) cent amount to whole cents, ties to even.
    pub fn from_cents_f64(cents: f64) -> Option<Self> {
        if !cents.is_finite() {
            return None;
        }
        let rounded = cents.round_ties_even();
        if rounded.abs() >= 9.0e18 {
            return None;
        }
        Some(Money(rounded as i64))
    }

    pub const fn cents(self) -> i64 {
        self.0
    }

    pub fn as_dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub const fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn checked_add(self, other: Money) -> Option<Money> {
        self.0.checked_add(other.0).map(Money)
    }

    pub fn checked_sub(self, other: Money) -> Option<Money> {
        self.0.checked_sub(other.0).map(Money)
    }

    /// Human-facing rendering used in prompts and observations: `$1,200` or
    /// `$1,050.50`.
    pub fn display_dollars(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = abs / 100;
        let frac = abs % 100;
        let digits = whole.to_string();
        let mut grouped = String::with_capacity(digits.len() + digits.len() / 3);
        for (i, ch) in digits.chars().enumerate() {
            if i > 0 && (digits.len() - i).is_multiple_of(3) {
                grouped.push(',');
            }
            grouped.push(ch);
        }
        if frac == 0 {
            format!("{sign}${grouped}")
        } else {
            format!("{sign}${grouped}.{frac:02}")
        }
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl std::ops::Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

/// Canonical decimal form with exactly two fraction digits, e.g. `1050.00`.
impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

/// Parses a plain decimal string. Digits beyond the second fraction digit are
/// rounded half-to-even.
impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(input: &str) -> Result<Self, Self::Err> {
        let err = |reason| MoneyParseError { input: input.to_string(), reason };
        let s = input.trim();
        let (negative, s) = match s.as_bytes().first() {
            Some(b'-') => (true, &s[1..]),
            Some(b'+') => (false, &s[1..]),
            _ => (false, s),
        };
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err("no digits"));
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("expected a decimal number"));
        }
        let whole: i64 = if int_part.is_empty() { 0 } else { int_part.parse().map_err(|_| err("out of range"))? };
        let frac = frac_part.as_bytes();
        let digit = |i: usize| frac.get(i).map_or(0, |b| (b - b'0') as i64);
        let mut cents = whole.checked_mul(100).and_then(|c| c.checked_add(digit(0) * 10 + digit(1))).ok_or_else(|| err("out of range"))?;
        if frac.len() > 2 {
            let rest = &frac[2..];
            let first = rest[0];
            let tail_nonzero = rest[1..].iter().any(|&b| b != b'0');
            let round_up = first > b'5' || (first == b'5' && (tail_nonzero || cents % 2 == 1));
            if round_up {
                cents = cents.checked_add(1).ok_or_else(|| err("out of range"))?;
            }
        }
        Ok(Money(if negative { -cents } else { cents }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Int(i64),
            Float(f64),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Int(d) => d.checked_mul(100).map(Money).ok_or_else(|| serde::de::Error::custom("amount out of range")),
            Repr::Float(d) => Money::from_dollars_f64(d).ok_or_else(|| serde::de::Error::custom("amount out of range")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Buyer,
    Seller,
}

impl Role {
    pub const fn counterpart(self) -> Role {
        match self {
            Role::Buyer => Role::Seller,
            Role::Seller => Role::Buyer,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Role::Buyer => "buyer",
            Role::Seller => "seller",
        }
    }

    pub const fn title(self) -> &'static str {
        match self {
            Role::Buyer => "Buyer",
            Role::Seller => "Seller",
        }
    }

    /// True when `a` is strictly better than `b` for this role.
    pub fn prefers(self, a: Money, b: Money) -> bool {
        match self {
            Role::Buyer => a < b,
            Role::Seller => a > b,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "buyer" => Ok(Role::Buyer),
            "seller" => Ok(Role::Seller),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListingSource {
    AmazonHistory,
    PostedPrice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Listing {
    pub id: String,
    pub title: String,
    pub category: String,
    #[serde(default)]
    pub description: Vec<String>,
    pub price_high: Money,
    pub price_low: Money,
    pub source: ListingSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ListingError {
    #[error("listing {id}: prices must be positive")]
    NonPositivePrice { id: String },
    #[error("listing {id}: price_low {low} exceeds price_high {high}")]
    InvertedRange { id: String, low: Money, high: Money },
    #[error("listing {id}: posted-price listing must have price_low = {expected}, got {got}")]
    PostedPriceLow { id: String, expected: Money, got: Money },
}

impl Listing {
    /// Lower price bound for a posted-price listing: half the posted price,
    /// rounded half-to-even to the cent.
    pub fn posted_price_low(high: Money) -> Money {
        let c = high.cents();
        let half = c / 2;
        if c % 2 == 0 || half % 2 == 0 {
            Money::from_cents(half)
        } else {
            Money::from_cents(half + 1)
        }
    }

    pub fn validate(&self) -> Result<(), ListingError> {
        if !self.price_high.is_positive() || !self.price_low.is_positive() {
            return Err(ListingError::NonPositivePrice { id: self.id.clone() });
        }
        if self.price_low > self.price_high {
            return Err(ListingError::InvertedRange { id: self.id.clone(), low: self.price_low, high: self.price_high });
        }
        if self.source == ListingSource::PostedPrice {
            let expected = Self::posted_price_low(self.price_high);
            if self.price_low != expected {
                return Err(ListingError::PostedPriceLow { id: self.id.clone(), expected, got: self.price_low });
            }
        }
        Ok(())
    }

    /// Midpoint of the historical range, in cents (may be fractional).
    pub fn reference_price_cents(&self) -> f64 {
        (self.price_high.cents() as f64 + self.price_low.cents() as f64) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "GFT")]
    Gft,
    #[serde(rename = "NGFT")]
    Ngft,
}

impl Regime {
    pub const fn as_str(self) -> &'static str {
        match self {
            Regime::Gft => "GFT",
            Regime::Ngft => "NGFT",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Gains from trade exist exactly when the buyer values the item at least as
/// much as the seller.
pub fn classify_regime(buyer_reservation: Money, seller_reservation: Money) -> Regime {
    if buyer_reservation >= seller_reservation {
        Regime::Gft
    } else {
        Regime::Ngft
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub listing: Listing,
    pub buyer_reservation: Money,
    pub seller_reservation: Money,
    pub regime: Regime,
    pub split: Split,
    pub seed: u64,
}

impl Scenario {
    /// Builds a scenario with the regime derived from the reservations.
    pub fn new(listing: Listing, buyer_reservation: Money, seller_reservation: Money, split: Split, seed: u64) -> Self {
        Scenario {
            regime: classify_regime(buyer_reservation, seller_reservation),
            listing,
            buyer_reservation,
            seller_reservation,
            split,
            seed,
        }
    }

    pub fn id(&self) -> String {
        format!("{}#{:016x}", self.listing.id, self.seed)
    }

    pub fn reservation(&self, role: Role) -> Money {
        match role {
            Role::Buyer => self.buyer_reservation,
            Role::Seller => self.seller_reservation,
        }
    }

    /// Width of the zone of possible agreement, `b - s`; `None` without gains
    /// from trade.
    pub fn zopa_width(&self) -> Option<Money> {
        match self.regime {
            Regime::Gft => Some(self.buyer_reservation - self.seller_reservation),
            Regime::Ngft => None,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.regime == classify_regime(self.buyer_reservation, self.seller_reservation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OutcomeStatus {
    Deal { price: Money },
    Quit { by: Role },
    RoundLimit,
}

impl OutcomeStatus {
    pub fn deal_price(&self) -> Option<Money> {
        match self {
            OutcomeStatus::Deal { price } => Some(*price),
            _ => None,
        }
    }
}

/// Signed utilities for both parties. A deal outside a party's reservation
/// yields a negative value here; the metrics layer flags it as a violation.
pub fn utilities(scenario: &Scenario, status: &OutcomeStatus) -> (Money, Money) {
    match status {
        OutcomeStatus::Deal { price } => (scenario.buyer_reservation - *price, *price - scenario.seller_reservation),
        OutcomeStatus::Quit { .. } | OutcomeStatus::RoundLimit => (Money::ZERO, Money::ZERO),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub role: Role,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(flatten)]
    pub status: OutcomeStatus,
    pub rounds_used: u32,
    pub turns_used: u32,
    pub buyer_utility: Money,
    pub seller_utility: Money,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub overflow: bool,
}

impl Outcome {
    pub fn new(scenario: &Scenario, status: OutcomeStatus, rounds_used: u32, turns_used: u32) -> Self {
        let (buyer_utility, seller_utility) = utilities(scenario, &status);
        Outcome { status, rounds_used, turns_used, buyer_utility, seller_utility, fault: None, overflow: false }
    }

    pub fn is_deal(&self) -> bool {
        matches!(self.status, OutcomeStatus::Deal { .. })
    }

    pub fn utility(&self, role: Role) -> Money {
        match role {
            Role::Buyer => self.buyer_utility,
            Role::Seller => self.seller_utility,
        }
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn money_parsing_rounds_half_even() {
        assert_eq!("1050".parse::<Money>().unwrap(), Money::from_cents(105_000));
        assert_eq!("429.99".parse::<Money>().unwrap(), Money::from_cents(42_999));
        assert_eq!("0.125".parse::<Money>().unwrap(), Money::from_cents(12));
        assert_eq!("0.135".parse::<Money>().unwrap(), Money::from_cents(14));
        assert_eq!("0.1251".parse::<Money>().unwrap(), Money::from_cents(13));
        assert_eq!("-3.5".parse::<Money>().unwrap(), Money::from_cents(-350));
        assert_eq!(".5".parse::<Money>().unwrap(), Money::from_cents(50));
        assert!("1,050".parse::<Money>().is_err());
        assert!("".parse::<Money>().is_err());
        assert!(".".parse::<Money>().is_err());
    }

    #[test]
    fn money_renders() {
        assert_eq!(Money::from_dollars(1050).to_string(), "1050.00");
        assert_eq!(Money::from_cents(-5).to_string(), "-0.05");
        assert_eq!(Money::from_dollars(1200).display_dollars(), "$1,200");
        assert_eq!(Money::from_cents(105_050).display_dollars(), "$1,050.50");
        assert_eq!(Money::from_dollars(1_234_567).display_dollars(), "$1,234,567");
        assert_eq!(Money::from_dollars(999).display_dollars(), "$999");
    }

    #[test]
    fn money_json_accepts_strings_and_numbers() {
        let m: Money = serde_json::from_str("\"365.49\"").unwrap();
        assert_eq!(m.cents(), 36_549);
        let m: Money = serde_json::from_str("100").unwrap();
        assert_eq!(m.cents(), 10_000);
        let m: Money = serde_json::from_str("12.345").unwrap();
        assert_eq!(m.cents(), 1234);
        assert_eq!(serde_json::to_string(&Money::from_cents(42_999)).unwrap(), "\"429.99\"");
    }

    #[test]
    fn utilities_follow_the_deal_price() {
        let gft = laptop_gft();
        let deal = OutcomeStatus::Deal { price: Money::from_dollars(1050) };
        assert_eq!(utilities(&gft, &deal), (Money::from_dollars(150), Money::from_dollars(150)));

        let ngft = laptop_ngft();
        let quit = OutcomeStatus::Quit { by: Role::Buyer };
        assert_eq!(utilities(&ngft, &quit), (Money::ZERO, Money::ZERO));

        let x = Money::from_dollars(100);
        let point = Scenario::new(laptop(), x, x, Split::Train, 0);
        assert_eq!(utilities(&point, &OutcomeStatus::Deal { price: x }), (Money::ZERO, Money::ZERO));
        assert_eq!(utilities(&point, &OutcomeStatus::RoundLimit), (Money::ZERO, Money::ZERO));
    }

    #[test]
    fn regime_classification() {
        assert_eq!(classify_regime(Money::from_dollars(1200), Money::from_dollars(900)), Regime::Gft);
        assert_eq!(classify_regime(Money::from_dollars(850), Money::from_dollars(1100)), Regime::Ngft);
        assert_eq!(classify_regime(Money::from_dollars(100), Money::from_dollars(100)), Regime::Gft);
        assert_eq!(laptop_gft().zopa_width(), Some(Money::from_dollars(300)));
        assert_eq!(laptop_ngft().zopa_width(), None);
    }

    #[test]
    fn posted_price_listings_halve_the_high() {
        assert_eq!(Listing::posted_price_low(Money::from_dollars(100)), Money::from_dollars(50));
        assert_eq!(Listing::posted_price_low(Money::from_cents(9_999)), Money::from_cents(5_000));
        assert_eq!(Listing::posted_price_low(Money::from_cents(10_001)), Money::from_cents(5_000));
        let mut l = laptop();
        l.source = ListingSource::PostedPrice;
        assert!(matches!(l.validate(), Err(ListingError::PostedPriceLow { .. })));
        l.price_low = Money::from_dollars(750);
        l.validate().unwrap();
        l.price_low = Money::from_dollars(2000);
        assert!(matches!(l.validate(), Err(ListingError::InvertedRange { .. })));
    }

    fn cents() -> impl Strategy<Value = Money> {
        (1i64..10_000_000).prop_map(Money::from_cents)
    }

    proptest! {
        #[test]
        fn in_zopa_deals_split_the_whole_surplus(b in cents(), s in cents(), t in 0.0f64..=1.0) {
            prop_assume!(b >= s);
            let p = Money::from_cents(s.cents() + ((b.cents() - s.cents()) as f64 * t) as i64);
            let sc = Scenario::new(laptop(), b, s, Split::Train, 1);
            let (ub, us) = utilities(&sc, &OutcomeStatus::Deal { price: p });
            prop_assert_eq!(ub + us, b - s);
        }

        #[test]
        fn ngft_deals_hurt_someone(b in cents(), s in cents(), p in cents()) {
            prop_assume!(b < s);
            let sc = Scenario::new(laptop(), b, s, Split::Train, 1);
            let (ub, us) = utilities(&sc, &OutcomeStatus::Deal { price: p });
            prop_assert!(ub.min(us) < Money::ZERO);
        }

        #[test]
        fn regime_is_monotone(b in cents(), s in cents(), up in 0i64..1_000_000, down in 0i64..1_000_000) {
            if classify_regime(b, s) == Regime::Gft {
                let s2 = Money::from_cents((s.cents() - down).max(1));
                prop_assert_eq!(classify_regime(b + Money::from_cents(up), s2), Regime::Gft);
            }
        }

        #[test]
        fn money_display_round_trips(c in -1_000_000_000i64..1_000_000_000) {
            let m = Money::from_cents(c);
            prop_assert_eq!(m.to_string().parse::<Money>().unwrap(), m);
        }
    }
}
