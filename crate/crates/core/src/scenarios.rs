//! Catalog ingestion, reservation-price sampling, regime labelling and
//! dataset splits.
//!
//! Reservations are drawn uniformly:
//! seller `s ~ U[0.6 p_min, 0.9 p_min]`, buyer
//! `b ~ U[0.4 p_min, p_max + 0.1 (p_max - p_min)]`, where `p_min`/`p_max`
//! are the listing's historical low/high. Every draw uses its own ChaCha8
//! stream keyed by SHA-256 of (master seed, listing id, draw index), so a
//! dataset is byte-identical across platforms and independent of
//! generation order.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Listing, ListingError, ListingSource, Money, Regime, Scenario, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seller_lo_mult: f64,
    pub seller_hi_mult: f64,
    pub buyer_lo_mult: f64,
    pub buyer_hi_slack: f64,
    /// Train, validation and test fractions.
    pub split_fractions: [f64; 3],
    pub master_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seller_lo_mult: 0.6,
            seller_hi_mult: 0.9,
            buyer_lo_mult: 0.4,
            buyer_hi_slack: 0.1,
            split_fractions: [0.80, 0.085, 0.115],
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("sampler multipliers must be positive and finite")]
    NonPositiveMultiplier,
    #[error("seller range is empty: lo multiplier {lo} > hi multiplier {hi}")]
    EmptySellerRange { lo: f64, hi: f64 },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadSplitFractions([f64; 3]),
}

impl SamplerConfig {
    pub fn with_seed(master_seed: u64) -> Self {
        SamplerConfig { master_seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mults = [self.seller_lo_mult, self.seller_hi_mult, self.buyer_lo_mult, self.buyer_hi_slack];
        if mults.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(ConfigError::NonPositiveMultiplier);
        }
        if self.seller_lo_mult > self.seller_hi_mult {
            return Err(ConfigError::EmptySellerRange { lo: self.seller_lo_mult, hi: self.seller_hi_mult });
        }
        let f = self.split_fractions;
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ConfigError::BadSplitFractions(f));
        }
        Ok(())
    }
}

/// Continuous sampling bounds in cents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReservationBounds {
    pub seller: (f64, f64),
    pub buyer: (f64, f64),
}

impl ReservationBounds {
    pub fn of(listing: &Listing, cfg: &SamplerConfig) -> Self {
        let lo = listing.price_low.cents() as f64;
        let hi = listing.price_high.cents() as f64;
        ReservationBounds {
            seller: (cfg.seller_lo_mult * lo, cfg.seller_hi_mult * lo),
            buyer: (cfg.buyer_lo_mult * lo, hi + cfg.buyer_hi_slack * (hi - lo)),
        }
    }

    /// Bounds after rounding to the cent; every stored reservation lies inside these.
    pub fn rounded(&self) -> ((Money, Money), (Money, Money)) {
        let r = |x: f64| Money::from_cents(x.round_ties_even() as i64);
        ((r(self.seller.0), r(self.seller.1)), (r(self.buyer.0), r(self.buyer.1)))
    }
}

fn substream(master_seed: u64, listing_id: &str, draw_index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((listing_id.len() as u64).to_le_bytes());
    h.update(listing_id.as_bytes());
    h.update(draw_index.to_le_bytes());
    h.finalize().into()
}

fn draw_cents(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> Money {
    let u: f64 = rng.random();
    let x = lo + u * (hi - lo);
    let m = Money::from_cents(x.round_ties_even() as i64);
    m.clamp(Money::from_cents(lo.round_ties_even() as i64), Money::from_cents(hi.round_ties_even() as i64))
}

#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Sampler { config })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Draw number `draw_index` for `listing`. The regime is classified on
    /// the rounded reservations.
    pub fn sample(&self, listing: &Listing, draw_index: u64, split: Split) -> Scenario {
        let key = substream(self.config.master_seed, &listing.id, draw_index);
        let mut rng = ChaCha8Rng::from_seed(key);
        let bounds = ReservationBounds::of(listing, &self.config);
        let s = draw_cents(&mut rng, bounds.seller);
        let b = draw_cents(&mut rng, bounds.buyer);
        let seed = u64::from_le_bytes(key[..8].try_into().expect("32-byte digest"));
        Scenario::new(listing.clone(), b, s, split, seed)
    }

    pub fn gft_probability(&self, listing: &Listing) -> f64 {
        let b = ReservationBounds::of(listing, &self.config);
        uniform_ge_probability(b.buyer, b.seller)
    }

    /// `n` scenarios cycling through `listings`, with whatever regime mix the
    /// sampler produces.
    pub fn draw(&self, listings: &[Listing], n: usize, split: Split) -> Result<Vec<Scenario>, ScenarioError> {
        if listings.is_empty() {
            return Err(ScenarioError::NoListings);
        }
        let k = listings.len();
        Ok((0..n).map(|i| self.sample(&listings[i % k], (i / k) as u64, split)).collect())
    }

    /// Draws scenarios cycling through `listings` until `n_gft` GFT and
    /// `n_ngft` NGFT scenarios are collected.
    pub fn generate(&self, listings: &[Listing], n_gft: usize, n_ngft: usize, split: Split) -> Result<Vec<Scenario>, ScenarioError> {
        if listings.is_empty() {
            return Err(ScenarioError::NoListings);
        }
        let mut out = Vec::with_capacity(n_gft + n_ngft);
        let (mut gft, mut ngft) = (0, 0);
        let budget = (1000 * (n_gft + n_ngft)).max(10_000) as u64;
        let mut draw = 0u64;
        while gft < n_gft || ngft < n_ngft {
            if draw >= budget {
                return Err(ScenarioError::QuotaUnreachable { gft, ngft, draws: draw });
            }
            let listing = &listings[(draw % listings.len() as u64) as usize];
            let sc = self.sample(listing, draw / listings.len() as u64, split);
            draw += 1;
            match sc.regime {
                Regime::Gft if gft < n_gft => gft += 1,
                Regime::Ngft if ngft < n_ngft => ngft += 1,
                _ => continue,
            }
            out.push(sc);
        }
        Ok(out)
    }
}

/// One-off draw with `seed` as master seed and draw index 0.
pub fn sample_scenario(listing: &Listing, seed: u64) -> Scenario {
    Sampler::new(SamplerConfig::with_seed(seed)).expect("default config is valid").sample(listing, 0, Split::Test)
}

/// Exact `P(B >= S)` for independent uniforms on `buyer` and `seller`.
pub fn uniform_ge_probability(buyer: (f64, f64), seller: (f64, f64)) -> f64 {
    let (b0, b1) = buyer;
    let (s0, s1) = seller;
    // Survival function of B evaluated at x.
    let surv = |x: f64| {
        if b1 <= b0 {
            return if x <= b0 { 1.0 } else { 0.0 };
        }
        ((b1 - x) / (b1 - b0)).clamp(0.0, 1.0)
    };
    if s1 <= s0 {
        return surv(s0);
    }
    // Integral of surv over [s0, s1]: a flat part below b0 and a linear part on [b0, b1].
    let flat = (s1.min(b0) - s0).max(0.0);
    let (u, v) = (s0.max(b0), s1.min(b1));
    let ramp = if v > u && b1 > b0 { ((b1 - u).powi(2) - (b1 - v).powi(2)) / (2.0 * (b1 - b0)) } else { 0.0 };
    ((flat + ramp) / (s1 - s0)).clamp(0.0, 1.0)
}

pub fn gft_probability(listing: &Listing) -> f64 {
    Sampler::new(SamplerConfig::default()).expect("default config is valid").gft_probability(listing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioMix {
    pub n_gft: usize,
    pub n_ngft: usize,
}

impl ScenarioMix {
    /// Benchmark mix: 400 GFT and 200 NGFT.
    pub const BENCHMARK: ScenarioMix = ScenarioMix { n_gft: 400, n_ngft: 200 };
    /// Training evaluation mix: 400 of each.
    pub const TRAINING_EVAL: ScenarioMix = ScenarioMix { n_gft: 400, n_ngft: 400 };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "benchmark" => Some(Self::BENCHMARK),
            "training-eval" | "training_eval" => Some(Self::TRAINING_EVAL),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("no listings to sample from")]
    NoListings,
    #[error("could not reach the requested regime mix after {draws} draws (got {gft} GFT, {ngft} NGFT)")]
    QuotaUnreachable { gft: usize, ngft: usize, draws: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: scenario regime does not match its reservations")]
    Inconsistent { line: usize },
}

pub fn write_scenarios<W: Write>(mut w: W, scenarios: &[Scenario]) -> std::io::Result<()> {
    for s in scenarios {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenarios<R: BufRead>(r: R) -> Result<Vec<Scenario>, ScenarioError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sc: Scenario = serde_json::from_str(&line).map_err(|source| ScenarioError::Json { line: i + 1, source })?;
        if !sc.is_consistent() {
            return Err(ScenarioError::Inconsistent { line: i + 1 });
        }
        out.push(sc);
    }
    Ok(out)
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    read_scenarios(std::io::BufReader::new(std::fs::File::open(path)?))
}

// ---------------------------------------------------------------------------
// Catalog

/// Catalog record. `price_low` may be omitted for posted-price items, in
/// which case it is set to half the posted price.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogRecord {
    id: String,
    title: String,
    #[serde(default)]
    category: String,
    #[serde(default)]
    description: Vec<String>,
    price_high: Money,
    #[serde(default)]
    price_low: Option<Money>,
    #[serde(default)]
    source: Option<ListingSource>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {record}: {message}")]
    Schema { record: usize, message: String },
    #[error("record {record}: {source}")]
    Invalid { record: usize, source: ListingError },
    #[error("record {record}: duplicate listing id {id:?}")]
    DuplicateId { record: usize, id: String },
    #[error("catalog is empty")]
    EmptyCatalog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CatalogCounts {
    pub total: usize,
    pub amazon_history: usize,
    pub posted_price: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub listings: Vec<Listing>,
    pub counts: CatalogCounts,
}

fn to_listing(rec: CatalogRecord, record: usize) -> Result<Listing, CatalogError> {
    let source = rec.source.unwrap_or(if rec.price_low.is_some() { ListingSource::AmazonHistory } else { ListingSource::PostedPrice });
    let price_low = match (source, rec.price_low) {
        (ListingSource::PostedPrice, None) => Listing::posted_price_low(rec.price_high),
        (_, Some(low)) => low,
        (ListingSource::AmazonHistory, None) => {
            return Err(CatalogError::Schema { record, message: "price-history listing needs price_low".into() })
        }
    };
    let listing = Listing {
        id: rec.id,
        title: rec.title,
        category: rec.category,
        description: rec.description,
        price_high: rec.price_high,
        price_low,
        source,
    };
    listing.validate().map_err(|source| CatalogError::Invalid { record, source })?;
    Ok(listing)
}

/// Parses a catalog given as a JSON array or as JSON lines. Records are
/// numbered from 1 (array element or line number).
pub fn parse_catalog(text: &str) -> Result<Catalog, CatalogError> {
    let mut records: Vec<(usize, CatalogRecord)> = Vec::new();
    if text.trim_start().starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(text).map_err(|e| CatalogError::Schema { record: e.line(), message: e.to_string() })?;
        for (i, v) in values.into_iter().enumerate() {
            let rec = serde_json::from_value(v).map_err(|e| CatalogError::Schema { record: i + 1, message: e.to_string() })?;
            records.push((i + 1, rec));
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|e| CatalogError::Schema { record: i + 1, message: e.to_string() })?;
            records.push((i + 1, rec));
        }
    }
    if records.is_empty() {
        return Err(CatalogError::EmptyCatalog);
    }
    let mut seen = HashSet::new();
    let mut listings = Vec::with_capacity(records.len());
    let mut counts = CatalogCounts::default();
    for (record, rec) in records {
        if !seen.insert(rec.id.clone()) {
            return Err(CatalogError::DuplicateId { record, id: rec.id });
        }
        let l = to_listing(rec, record)?;
        counts.total += 1;
        match l.source {
            ListingSource::AmazonHistory => counts.amazon_history += 1,
            ListingSource::PostedPrice => counts.posted_price += 1,
        }
        listings.push(l);
    }
    log::info!("catalog: {} listings ({} price-history, {} posted-price)", counts.total, counts.amazon_history, counts.posted_price);
    Ok(Catalog { listings, counts })
}

pub fn load_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    parse_catalog(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub train: Vec<Listing>,
    pub val: Vec<Listing>,
    pub test: Vec<Listing>,
}

impl Partition {
    pub fn get(&self, split: Split) -> &[Listing] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Largest-remainder apportionment of `n` items by `fractions`; ties in the
/// remainder go to the earlier bucket.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Deterministic shuffle (by hash of seed and id) followed by apportionment.
pub fn make_splits(catalog: &[Listing], config: &SamplerConfig) -> Result<Partition, ConfigError> {
    config.validate()?;
    let mut keyed: Vec<([u8; 32], usize)> =
        catalog.iter().enumerate().map(|(i, l)| (substream(config.master_seed, &l.id, u64::MAX), i)).collect();
    keyed.sort();
    let [n_train, n_val, _] = apportion(catalog.len(), config.split_fractions);
    let mut p = Partition::default();
    for (rank, (_, i)) in keyed.into_iter().enumerate() {
        let l = catalog[i].clone();
        if rank < n_train {
            p.train.push(l);
        } else if rank < n_train + n_val {
            p.val.push(l);
        } else {
            p.test.push(l);
        }
    }
    Ok(p)
}
