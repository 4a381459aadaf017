//! Per-negotiation scoring, grouped aggregation and reservation-quintile
//! decomposition.
//!
//! Three families of numbers come out of a trace: individual rationality
//! (did someone agree to a price that hurts them), outcome quality (deal
//! rate, utilities, surplus shares) and behavioural drivers (opening
//! aggressiveness, concession rates, patience).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{utilities, Money, OutcomeStatus, Regime, Role};
use crate::engine::{offers_by, EventKind, NegotiationTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("cannot aggregate an empty group")]
    EmptyGroup,
    #[error("quintiles need at least 5 data points, got {0}")]
    TooFewPoints(usize),
}

/// Exact surplus split of an in-ZOPA deal: numerators over the ZOPA width, in cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurplusShare {
    pub buyer_cents: i64,
    pub seller_cents: i64,
    pub width_cents: i64,
}

impl SurplusShare {
    /// Defined only when `s <= p <= b` and `b > s`.
    pub fn of(buyer_reservation: Money, seller_reservation: Money, price: Money) -> Option<Self> {
        let width = (buyer_reservation - seller_reservation).cents();
        if width <= 0 || price < seller_reservation || price > buyer_reservation {
            return None;
        }
        Some(SurplusShare {
            buyer_cents: (buyer_reservation - price).cents(),
            seller_cents: (price - seller_reservation).cents(),
            width_cents: width,
        })
    }

    pub fn get(&self, role: Role) -> f64 {
        let num = match role {
            Role::Buyer => self.buyer_cents,
            Role::Seller => self.seller_cents,
        };
        num as f64 / self.width_cents as f64
    }

    pub fn buyer(&self) -> f64 {
        self.get(Role::Buyer)
    }

    pub fn seller(&self) -> f64 {
        self.get(Role::Seller)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationMetrics {
    pub scenario_id: String,
    pub buyer_agent: String,
    pub seller_agent: String,
    pub regime: Regime,
    pub buyer_reservation: Money,
    pub seller_reservation: Money,
    pub reference_price_cents: f64,
    pub status: OutcomeStatus,
    pub deal: bool,
    pub buyer_utility: Money,
    pub seller_utility: Money,
    pub violation_buyer: bool,
    pub violation_seller: bool,
    pub surplus_share: Option<SurplusShare>,
    pub listing_price: Money,
    pub seller_opening: Option<Money>,
    pub buyer_opening: Option<Money>,
    /// Seller opening over seller reservation.
    pub seller_init_aggr: Option<f64>,
    /// Fraction of the seller's opening that the buyer's opening leaves open.
    pub buyer_gap_closure: Option<f64>,
    /// Same, measured against the posted listing price.
    pub buyer_gap_closure_listing: Option<f64>,
    /// Buyer's opening distance below its reservation, over the reservation.
    pub buyer_reservation_ratio: Option<f64>,
    pub seller_concessions: Vec<f64>,
    pub buyer_concessions: Vec<f64>,
    pub seller_retrogression: bool,
    pub buyer_retrogression: bool,
    pub rounds: u32,
    pub turns: u32,
    pub fault: bool,
}

impl NegotiationMetrics {
    pub fn violation(&self, role: Role) -> bool {
        match role {
            Role::Buyer => self.violation_buyer,
            Role::Seller => self.violation_seller,
        }
    }

    pub fn any_violation(&self) -> bool {
        self.violation_buyer || self.violation_seller
    }

    pub fn reservation(&self, role: Role) -> Money {
        match role {
            Role::Buyer => self.buyer_reservation,
            Role::Seller => self.seller_reservation,
        }
    }

    pub fn agent(&self, role: Role) -> &str {
        match role {
            Role::Buyer => &self.buyer_agent,
            Role::Seller => &self.seller_agent,
        }
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// Per-offer concession fractions. A term is skipped when the offer already
/// sits at or past the reservation (non-positive denominator).
pub fn concession_series(offers: &[Money], reservation: Money, role: Role) -> Vec<f64> {
    let res = reservation.cents() as f64;
    offers
        .windows(2)
        .filter_map(|w| {
            let (p, next) = (w[0].cents() as f64, w[1].cents() as f64);
            let (moved, room) = match role {
                Role::Seller => (p - next, p - res),
                Role::Buyer => (next - p, res - p),
            };
            (room > 0.0).then(|| moved / room)
        })
        .collect()
}

pub fn score_negotiation(trace: &NegotiationTrace) -> Result<NegotiationMetrics, MetricsError> {
    let sc = &trace.header.scenario;
    let out = &trace.outcome;
    let malformed = |m: String| Err(MetricsError::MalformedTrace(m));
    let (bu, su) = utilities(sc, &out.status);
    if (bu, su) != (out.buyer_utility, out.seller_utility) {
        return malformed(format!("recorded utilities ({}, {}) do not match outcome ({bu}, {su})", out.buyer_utility, out.seller_utility));
    }
    match trace.events.last().map(|e| &e.kind) {
        Some(EventKind::Terminated { outcome }) if *outcome == out.status => {}
        _ => return malformed("event log does not end with the recorded termination".into()),
    }
    if let OutcomeStatus::Deal { price } = out.status {
        let accepted = trace.events.iter().rev().find_map(|e| match e.kind {
            EventKind::RespondToOffer { accept: true, price } => Some(price),
            _ => None,
        });
        if accepted != Some(price) {
            return malformed(format!("deal at {price} without a matching acceptance"));
        }
    }
    if trace.events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return malformed("timestamps decrease".into());
    }

    let (b, s) = (sc.buyer_reservation, sc.seller_reservation);
    let deal_price = out.status.deal_price();
    let deal = deal_price.is_some();
    let violation_buyer = deal && bu < Money::ZERO;
    let violation_seller = deal && su < Money::ZERO;
    let surplus_share = match (sc.regime, deal_price) {
        (Regime::Gft, Some(p)) => SurplusShare::of(b, s, p),
        _ => None,
    };

    let seller_offers = offers_by(&trace.events, Role::Seller);
    let buyer_offers = offers_by(&trace.events, Role::Buyer);
    let (p0s, p0b) = (seller_offers.first().copied(), buyer_offers.first().copied());
    let c = |m: Money| m.cents() as f64;
    let seller_init_aggr = p0s.and_then(|p| ratio(c(p), c(s)));
    let buyer_gap_closure = match (p0s, p0b) {
        (Some(ps), Some(pb)) => ratio(c(ps) - c(pb), c(ps)),
        _ => None,
    };
    let listing_price = trace.header.listing_price;
    let buyer_gap_closure_listing = p0b.and_then(|pb| ratio(c(listing_price) - c(pb), c(listing_price)));
    let buyer_reservation_ratio = p0b.and_then(|pb| ratio(c(b) - c(pb), c(b)));

    let valid_deal = deal && !violation_buyer && !violation_seller;
    let (seller_concessions, buyer_concessions) = if valid_deal {
        (concession_series(&seller_offers, s, Role::Seller), concession_series(&buyer_offers, b, Role::Buyer))
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(NegotiationMetrics {
        scenario_id: sc.id(),
        buyer_agent: trace.header.buyer.name.clone(),
        seller_agent: trace.header.seller.name.clone(),
        regime: sc.regime,
        buyer_reservation: b,
        seller_reservation: s,
        reference_price_cents: sc.listing.reference_price_cents(),
        status: out.status,
        deal,
        buyer_utility: bu,
        seller_utility: su,
        violation_buyer,
        violation_seller,
        surplus_share,
        listing_price,
        seller_opening: p0s,
        buyer_opening: p0b,
        seller_init_aggr,
        buyer_gap_closure,
        buyer_gap_closure_listing,
        buyer_reservation_ratio,
        seller_retrogression: seller_concessions.iter().any(|x| *x < 0.0),
        buyer_retrogression: buyer_concessions.iter().any(|x| *x < 0.0),
        seller_concessions,
        buyer_concessions,
        rounds: out.rounds_used,
        turns: out.turns_used,
        fault: out.fault.is_some(),
    })
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanAcc {
    pub n: u64,
    pub sum: f64,
}

impl MeanAcc {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
    }

    pub fn push_opt(&mut self, x: Option<f64>) {
        if let Some(x) = x {
            self.push(x);
        }
    }

    pub fn merge(&mut self, o: &MeanAcc) {
        self.n += o.n;
        self.sum += o.sum;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Mergeable sufficient statistics for a group of negotiations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Accumulator {
    pub n: u64,
    pub deals: u64,
    pub violations_buyer: u64,
    pub violations_seller: u64,
    pub violations_any: u64,
    pub faults: u64,
    pub buyer_utility_cents: i128,
    pub seller_utility_cents: i128,
    pub buyer_utility_deal_cents: i128,
    pub seller_utility_deal_cents: i128,
    pub buyer_share: MeanAcc,
    pub seller_share: MeanAcc,
    pub seller_init_aggr: MeanAcc,
    pub buyer_gap_closure: MeanAcc,
    pub buyer_gap_closure_listing: MeanAcc,
    pub buyer_reservation_ratio: MeanAcc,
    /// Mean of each negotiation's mean concession.
    pub seller_concession: MeanAcc,
    pub buyer_concession: MeanAcc,
    pub seller_retrogressions: u64,
    pub buyer_retrogressions: u64,
    pub rounds: u64,
    pub turns: u64,
}

impl Accumulator {
    pub fn push(&mut self, m: &NegotiationMetrics) {
        self.n += 1;
        self.faults += m.fault as u64;
        self.violations_buyer += m.violation_buyer as u64;
        self.violations_seller += m.violation_seller as u64;
        self.violations_any += m.any_violation() as u64;
        self.buyer_utility_cents += m.buyer_utility.cents() as i128;
        self.seller_utility_cents += m.seller_utility.cents() as i128;
        if m.deal {
            self.deals += 1;
            self.buyer_utility_deal_cents += m.buyer_utility.cents() as i128;
            self.seller_utility_deal_cents += m.seller_utility.cents() as i128;
        }
        if let Some(sh) = m.surplus_share {
            self.buyer_share.push(sh.buyer());
            self.seller_share.push(sh.seller());
        }
        self.seller_init_aggr.push_opt(m.seller_init_aggr);
        self.buyer_gap_closure.push_opt(m.buyer_gap_closure);
        self.buyer_gap_closure_listing.push_opt(m.buyer_gap_closure_listing);
        self.buyer_reservation_ratio.push_opt(m.buyer_reservation_ratio);
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        self.seller_concession.push_opt(mean(&m.seller_concessions));
        self.buyer_concession.push_opt(mean(&m.buyer_concessions));
        self.seller_retrogressions += m.seller_retrogression as u64;
        self.buyer_retrogressions += m.buyer_retrogression as u64;
        self.rounds += m.rounds as u64;
        self.turns += m.turns as u64;
    }

    pub fn merge(&mut self, o: &Accumulator) {
        self.n += o.n;
        self.deals += o.deals;
        self.violations_buyer += o.violations_buyer;
        self.violations_seller += o.violations_seller;
        self.violations_any += o.violations_any;
        self.faults += o.faults;
        self.buyer_utility_cents += o.buyer_utility_cents;
        self.seller_utility_cents += o.seller_utility_cents;
        self.buyer_utility_deal_cents += o.buyer_utility_deal_cents;
        self.seller_utility_deal_cents += o.seller_utility_deal_cents;
        self.buyer_share.merge(&o.buyer_share);
        self.seller_share.merge(&o.seller_share);
        self.seller_init_aggr.merge(&o.seller_init_aggr);
        self.buyer_gap_closure.merge(&o.buyer_gap_closure);
        self.buyer_gap_closure_listing.merge(&o.buyer_gap_closure_listing);
        self.buyer_reservation_ratio.merge(&o.buyer_reservation_ratio);
        self.seller_concession.merge(&o.seller_concession);
        self.buyer_concession.merge(&o.buyer_concession);
        self.seller_retrogressions += o.seller_retrogressions;
        self.buyer_retrogressions += o.buyer_retrogressions;
        self.rounds += o.rounds;
        self.turns += o.turns;
    }

    pub fn summary(&self) -> Result<Summary, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::EmptyGroup);
        }
        let n = self.n as f64;
        let dollars = |cents: i128, count: u64| (count > 0).then(|| cents as f64 / 100.0 / count as f64);
        Ok(Summary {
            n: self.n,
            deals: self.deals,
            deal_rate: self.deals as f64 / n,
            buyer_violation_rate: self.violations_buyer as f64 / n,
            seller_violation_rate: self.violations_seller as f64 / n,
            combined_violation_rate: self.violations_any as f64 / n,
            fault_rate: self.faults as f64 / n,
            avg_buyer_utility: self.buyer_utility_cents as f64 / 100.0 / n,
            avg_seller_utility: self.seller_utility_cents as f64 / 100.0 / n,
            avg_buyer_utility_deals: dollars(self.buyer_utility_deal_cents, self.deals),
            avg_seller_utility_deals: dollars(self.seller_utility_deal_cents, self.deals),
            mean_buyer_share: self.buyer_share.mean(),
            mean_seller_share: self.seller_share.mean(),
            seller_init_aggr: self.seller_init_aggr.mean(),
            buyer_gap_closure: self.buyer_gap_closure.mean(),
            buyer_gap_closure_listing: self.buyer_gap_closure_listing.mean(),
            buyer_reservation_ratio: self.buyer_reservation_ratio.mean(),
            seller_concession: self.seller_concession.mean(),
            buyer_concession: self.buyer_concession.mean(),
            seller_retrogression_rate: self.seller_retrogressions as f64 / n,
            buyer_retrogression_rate: self.buyer_retrogressions as f64 / n,
            temporal_patience: self.rounds as f64 / n,
            mean_turns: self.turns as f64 / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: u64,
    pub deals: u64,
    pub deal_rate: f64,
    pub buyer_violation_rate: f64,
    pub seller_violation_rate: f64,
    pub combined_violation_rate: f64,
    pub fault_rate: f64,
    /// Dollars, no-deal outcomes included as zero.
    pub avg_buyer_utility: f64,
    pub avg_seller_utility: f64,
    pub avg_buyer_utility_deals: Option<f64>,
    pub avg_seller_utility_deals: Option<f64>,
    pub mean_buyer_share: Option<f64>,
    pub mean_seller_share: Option<f64>,
    pub seller_init_aggr: Option<f64>,
    pub buyer_gap_closure: Option<f64>,
    pub buyer_gap_closure_listing: Option<f64>,
    pub buyer_reservation_ratio: Option<f64>,
    pub seller_concession: Option<f64>,
    pub buyer_concession: Option<f64>,
    pub seller_retrogression_rate: f64,
    pub buyer_retrogression_rate: f64,
    /// Mean rounds to termination.
    pub temporal_patience: f64,
    pub mean_turns: f64,
}

impl Summary {
    pub fn violation_rate(&self, role: Role) -> f64 {
        match role {
            Role::Buyer => self.buyer_violation_rate,
            Role::Seller => self.seller_violation_rate,
        }
    }

    pub fn mean_share(&self, role: Role) -> Option<f64> {
        match role {
            Role::Buyer => self.mean_buyer_share,
            Role::Seller => self.mean_seller_share,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    All,
    Regime,
    Pairing,
    PairingRegime,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub buyer_agent: Option<String>,
    pub seller_agent: Option<String>,
    pub regime: Option<Regime>,
}

impl GroupKey {
    pub fn of(m: &NegotiationMetrics, g: Grouping) -> Self {
        let pairing = matches!(g, Grouping::Pairing | Grouping::PairingRegime);
        let regime = matches!(g, Grouping::Regime | Grouping::PairingRegime);
        GroupKey {
            buyer_agent: pairing.then(|| m.buyer_agent.clone()),
            seller_agent: pairing.then(|| m.seller_agent.clone()),
            regime: regime.then_some(m.regime),
        }
    }
}

pub type AggregateReport = BTreeMap<GroupKey, Summary>;

pub fn accumulate<'a>(metrics: impl IntoIterator<Item = &'a NegotiationMetrics>, grouping: Grouping) -> BTreeMap<GroupKey, Accumulator> {
    let mut groups: BTreeMap<GroupKey, Accumulator> = BTreeMap::new();
    for m in metrics {
        groups.entry(GroupKey::of(m, grouping)).or_default().push(m);
    }
    groups
}

pub fn aggregate(metrics: &[NegotiationMetrics], grouping: Grouping) -> Result<AggregateReport, MetricsError> {
    if metrics.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    accumulate(metrics, grouping).into_iter().map(|(k, a)| a.summary().map(|s| (k, s))).collect()
}

// ---------------------------------------------------------------------------
// Quintiles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuintileKey {
    /// The side's own reservation price.
    #[default]
    Reservation,
    /// Midpoint of the listing's historical price range.
    ReferencePrice,
}

fn key_value(m: &NegotiationMetrics, role: Role, key: QuintileKey) -> f64 {
    match key {
        QuintileKey::Reservation => m.reservation(role).cents() as f64,
        QuintileKey::ReferencePrice => m.reference_price_cents,
    }
}

/// Nearest-rank 20/40/60/80th percentiles of `values`.
pub fn quintile_boundaries(values: &[f64]) -> Result<[f64; 4], MetricsError> {
    if values.len() < 5 {
        return Err(MetricsError::TooFewPoints(values.len()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok([1, 2, 3, 4].map(|k| v[(k * n).div_ceil(5) - 1]))
}

/// Index 0..5 of the quintile holding `x`; values on a boundary go to the lower quintile.
pub fn quintile_of(x: f64, bounds: &[f64; 4]) -> usize {
    bounds.iter().position(|b| x <= *b).unwrap_or(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileReport {
    pub side: Role,
    pub key: QuintileKey,
    pub boundaries: [f64; 4],
    pub cells: Vec<Option<Summary>>,
    pub accumulators: Vec<Accumulator>,
}

impl QuintileReport {
    /// Spread of one metric across the five cells; `None` if no cell has a value.
    pub fn spread(&self, f: impl Fn(&Summary) -> Option<f64>) -> Option<f64> {
        let values: Vec<f64> = self.cells.iter().flatten().filter_map(f).collect();
        spread(&values)
    }
}

/// `max - min`, or `None` for an empty slice.
pub fn spread<T: Copy + PartialOrd + std::ops::Sub<Output = T>>(values: &[T]) -> Option<T> {
    let first = *values.first()?;
    let (mut lo, mut hi) = (first, first);
    for &v in &values[1..] {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    Some(hi - lo)
}

/// Buckets metrics by the `side`'s key into quintiles of the evaluated set.
pub fn quintile_decompose(metrics: &[NegotiationMetrics], side: Role, key: QuintileKey) -> Result<QuintileReport, MetricsError> {
    let values: Vec<f64> = metrics.iter().map(|m| key_value(m, side, key)).collect();
    let boundaries = quintile_boundaries(&values)?;
    let mut accumulators = vec![Accumulator::default(); 5];
    for (m, x) in metrics.iter().zip(&values) {
        accumulators[quintile_of(*x, &boundaries)].push(m);
    }
    let cells = accumulators.iter().map(|a| a.summary().ok()).collect();
    Ok(QuintileReport { side, key, boundaries, cells, accumulators })
}

// ---------------------------------------------------------------------------
// Report files

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

fn regime_str(r: Option<Regime>) -> &'static str {
    match r {
        Some(Regime::Gft) => "GFT",
        Some(Regime::Ngft) => "NGFT",
        None => "ALL",
    }
}

fn key_cols(k: &GroupKey) -> [String; 3] {
    [k.buyer_agent.clone().unwrap_or_else(|| "*".into()), k.seller_agent.clone().unwrap_or_else(|| "*".into()), regime_str(k.regime).into()]
}

pub fn write_ir_csv<W: Write>(w: W, report: &AggregateReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "buyer_agent",
        "seller_agent",
        "regime",
        "n",
        "deals",
        "deal_rate",
        "buyer_violation_rate",
        "seller_violation_rate",
        "combined_violation_rate",
    ])?;
    for (k, s) in report {
        let [b, sl, r] = key_cols(k);
        out.write_record([
            b,
            sl,
            r,
            s.n.to_string(),
            s.deals.to_string(),
            fmt_f(s.deal_rate),
            fmt_f(s.buyer_violation_rate),
            fmt_f(s.seller_violation_rate),
            fmt_f(s.combined_violation_rate),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_surplus_deal_csv<W: Write>(w: W, report: &AggregateReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "buyer_agent",
        "seller_agent",
        "regime",
        "n",
        "deal_rate",
        "avg_buyer_utility",
        "avg_seller_utility",
        "avg_buyer_utility_deals",
        "avg_seller_utility_deals",
        "mean_buyer_share",
        "mean_seller_share",
    ])?;
    for (k, s) in report {
        let [b, sl, r] = key_cols(k);
        out.write_record([
            b,
            sl,
            r,
            s.n.to_string(),
            fmt_f(s.deal_rate),
            fmt_f(s.avg_buyer_utility),
            fmt_f(s.avg_seller_utility),
            fmt_opt(s.avg_buyer_utility_deals),
            fmt_opt(s.avg_seller_utility_deals),
            fmt_opt(s.mean_buyer_share),
            fmt_opt(s.mean_seller_share),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_drivers_csv<W: Write>(w: W, report: &AggregateReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "buyer_agent",
        "seller_agent",
        "regime",
        "n",
        "seller_init_aggr",
        "buyer_gap_closure",
        "buyer_gap_closure_listing",
        "buyer_reservation_ratio",
        "seller_concession",
        "buyer_concession",
        "seller_retrogression_rate",
        "buyer_retrogression_rate",
        "temporal_patience",
        "mean_turns",
    ])?;
    for (k, s) in report {
        let [b, sl, r] = key_cols(k);
        out.write_record([
            b,
            sl,
            r,
            s.n.to_string(),
            fmt_opt(s.seller_init_aggr),
            fmt_opt(s.buyer_gap_closure),
            fmt_opt(s.buyer_gap_closure_listing),
            fmt_opt(s.buyer_reservation_ratio),
            fmt_opt(s.seller_concession),
            fmt_opt(s.buyer_concession),
            fmt_f(s.seller_retrogression_rate),
            fmt_f(s.buyer_retrogression_rate),
            fmt_f(s.temporal_patience),
            fmt_f(s.mean_turns),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A named per-group statistic.
pub type QuintileMetric = (&'static str, Box<dyn Fn(&Summary) -> Option<f64>>);

/// Side-specific metrics reported per quintile.
pub fn quintile_metrics(side: Role) -> Vec<QuintileMetric> {
    vec![
        ("surplus_share", Box::new(move |s: &Summary| s.mean_share(side))),
        ("deal_rate", Box::new(|s: &Summary| Some(s.deal_rate))),
        ("violation_rate", Box::new(move |s: &Summary| Some(s.violation_rate(side)))),
        ("combined_violation_rate", Box::new(|s: &Summary| Some(s.combined_violation_rate))),
        (
            "avg_utility",
            Box::new(move |s: &Summary| {
                Some(match side {
                    Role::Buyer => s.avg_buyer_utility,
                    Role::Seller => s.avg_seller_utility,
                })
            }),
        ),
    ]
}

/// One row per (agent, side, regime, metric): Q1..Q5 and the spread of those cells.
#[derive(Debug, Clone, PartialEq)]
pub struct QuintileRow {
    pub agent: String,
    pub side: Role,
    pub regime: Regime,
    pub metric: &'static str,
    pub cells: [Option<f64>; 5],
    pub spread: Option<f64>,
}

/// Per-agent quintile tables: each agent's buyer-side metrics keyed by `b`
/// and seller-side metrics keyed by `s`, pooled over opponents.
pub fn quintile_rows(metrics: &[NegotiationMetrics], key: QuintileKey) -> Vec<QuintileRow> {
    let mut groups: BTreeMap<(String, Role, Regime), Vec<NegotiationMetrics>> = BTreeMap::new();
    for m in metrics {
        for side in [Role::Buyer, Role::Seller] {
            groups.entry((m.agent(side).to_string(), side, m.regime)).or_default().push(m.clone());
        }
    }
    let mut rows = Vec::new();
    for ((agent, side, regime), ms) in groups {
        let Ok(report) = quintile_decompose(&ms, side, key) else {
            continue;
        };
        for (metric, f) in quintile_metrics(side) {
            let cells: [Option<f64>; 5] = std::array::from_fn(|i| report.cells[i].as_ref().and_then(&f));
            let present: Vec<f64> = cells.iter().flatten().copied().collect();
            rows.push(QuintileRow { agent: agent.clone(), side, regime, metric, cells, spread: spread(&present) });
        }
    }
    rows
}

pub fn write_quintiles_csv<W: Write>(w: W, rows: &[QuintileRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["agent", "side", "regime", "metric", "q1", "q2", "q3", "q4", "q5", "spread"])?;
    for r in rows {
        let mut rec = vec![r.agent.clone(), r.side.to_string(), regime_str(Some(r.regime)).to_string(), r.metric.to_string()];
        rec.extend(r.cells.iter().map(|c| fmt_opt(*c)));
        rec.push(fmt_opt(r.spread));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Long format (buyer_model, seller_model, metric, value) for heatmaps. The
/// regime is folded into the metric name.
pub fn write_heatmap_csv<W: Write>(w: W, report: &AggregateReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["buyer_model", "seller_model", "metric", "value"])?;
    for (k, s) in report {
        let [b, sl, r] = key_cols(k);
        let values: [(&str, Option<f64>); 8] = [
            ("deal_rate", Some(s.deal_rate)),
            ("buyer_violation_rate", Some(s.buyer_violation_rate)),
            ("seller_violation_rate", Some(s.seller_violation_rate)),
            ("combined_violation_rate", Some(s.combined_violation_rate)),
            ("avg_buyer_utility", Some(s.avg_buyer_utility)),
            ("avg_seller_utility", Some(s.avg_seller_utility)),
            ("mean_buyer_share", s.mean_buyer_share),
            ("mean_seller_share", s.mean_seller_share),
        ];
        for (name, v) in values {
            out.write_record([b.clone(), sl.clone(), format!("{name}@{r}"), fmt_opt(v)])?;
        }
    }
    out.flush()?;
    Ok(())
}
