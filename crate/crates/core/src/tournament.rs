//! Round-robin tournaments: every roster agent meets every other (and
//! itself) on a shared scenario list, under a bounded worker pool with an
//! append-only journal for crash-safe resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentConfig, AgentKind, AgentSpec, PromptTemplate, Roster, TokenUsage};
use crate::domain::{Role, Scenario};
use crate::engine::{run, EngineConfig, NegotiationTrace};
use crate::metrics::{
    aggregate, quintile_rows, score_negotiation, write_drivers_csv, write_heatmap_csv, write_ir_csv, write_quintiles_csv,
    write_surplus_deal_csv, AggregateReport, Grouping, NegotiationMetrics, QuintileKey,
};

pub const DEFAULT_CONCURRENCY: usize = 8;
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const TRACE_DIR: &str = "traces";
pub const REPORT_DIR: &str = "reports";

#[derive(Debug, Error)]
pub enum TournamentError {
    #[error("roster is empty")]
    EmptyRoster,
    #[error("scenario list is empty")]
    EmptyScenarios,
    #[error("duplicate agent name {0:?}")]
    DuplicateAgent(String),
    #[error("duplicate scenario id {0:?}")]
    DuplicateScenario(String),
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
    #[error("journal line {line}: {message}")]
    CorruptJournal { line: usize, message: String },
    #[error("pricing: {0}")]
    Pricing(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct TournamentConfig {
    pub concurrency: usize,
    pub engine: EngineConfig,
    pub template: PromptTemplate,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        TournamentConfig { concurrency: DEFAULT_CONCURRENCY, engine: EngineConfig::default(), template: PromptTemplate::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pairing {
    pub buyer: usize,
    pub seller: usize,
}

/// One negotiation: a pairing on one scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub index: usize,
    pub id: String,
    pub buyer: usize,
    pub seller: usize,
    pub scenario: usize,
}

#[derive(Debug, Clone)]
pub struct TournamentPlan {
    pub roster: Vec<AgentSpec>,
    pub scenarios: Vec<Scenario>,
    /// Buyer-major, self-play included.
    pub pairings: Vec<Pairing>,
    pub config: TournamentConfig,
}

pub fn plan(roster: &Roster, scenarios: Vec<Scenario>, config: TournamentConfig) -> Result<TournamentPlan, TournamentError> {
    if roster.agents.is_empty() {
        return Err(TournamentError::EmptyRoster);
    }
    if scenarios.is_empty() {
        return Err(TournamentError::EmptyScenarios);
    }
    if config.concurrency == 0 {
        return Err(TournamentError::ZeroConcurrency);
    }
    let mut names = BTreeSet::new();
    for a in &roster.agents {
        if !names.insert(a.name.as_str()) {
            return Err(TournamentError::DuplicateAgent(a.name.clone()));
        }
    }
    let mut ids = BTreeSet::new();
    for s in &scenarios {
        if !ids.insert(s.id()) {
            return Err(TournamentError::DuplicateScenario(s.id()));
        }
    }
    let n = roster.agents.len();
    let pairings = (0..n).flat_map(|b| (0..n).map(move |s| Pairing { buyer: b, seller: s })).collect();
    Ok(TournamentPlan { roster: roster.agents.clone(), scenarios, pairings, config })
}

impl TournamentPlan {
    pub fn job_count(&self) -> usize {
        self.pairings.len() * self.scenarios.len()
    }

    /// Jobs in deterministic order: buyer, then seller, then scenario.
    pub fn jobs(&self) -> impl Iterator<Item = Job> + '_ {
        self.pairings.iter().flat_map(move |p| self.scenarios.iter().enumerate().map(move |(si, sc)| (p, si, sc))).enumerate().map(
            |(index, (p, si, sc))| Job {
                index,
                id: format!("{}/{}/{}", self.roster[p.buyer].name, self.roster[p.seller].name, sc.id()),
                buyer: p.buyer,
                seller: p.seller,
                scenario: si,
            },
        )
    }

    /// Trace location relative to the output directory.
    pub fn trace_path(&self, job: &Job) -> PathBuf {
        Path::new(TRACE_DIR)
            .join(file_safe(&self.roster[job.buyer].name))
            .join(file_safe(&self.roster[job.seller].name))
            .join(format!("{}.jsonl", file_safe(&self.scenarios[job.scenario].id())))
    }

    fn run_job(&self, job: &Job) -> Result<NegotiationTrace, String> {
        let sc = &self.scenarios[job.scenario];
        let cfg = &self.config.engine;
        let listing_price = cfg.listing_price_for(&sc.listing);
        let build = |idx: usize, role: Role| {
            AgentConfig::for_scenario(&self.roster[idx], sc, role)
                .build(sc, listing_price, &self.config.template)
                .map_err(|e| format!("building {role} agent {:?}: {e}", self.roster[idx].name))
        };
        let mut buyer = build(job.buyer, Role::Buyer)?;
        let mut seller = build(job.seller, Role::Seller)?;
        run(sc, buyer.as_mut(), seller.as_mut(), cfg).map_err(|e| e.to_string())
    }
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

// ---------------------------------------------------------------------------
// Journal

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub job_id: String,
    pub trace_path: Option<String>,
    pub status: JobStatus,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Latest entry per job id. A torn final line (from a crash mid-write) is
/// dropped; damage anywhere else is an error.
pub fn read_journal(path: &Path) -> Result<BTreeMap<String, JournalEntry>, TournamentError> {
    let mut out = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalEntry>(line) {
            Ok(e) => {
                out.insert(e.job_id.clone(), e);
            }
            Err(_) if i == last => log::warn!("ignoring torn final journal line {}", i + 1),
            Err(e) => return Err(TournamentError::CorruptJournal { line: i + 1, message: e.to_string() }),
        }
    }
    Ok(out)
}

/// Opens the journal for appending, cutting any torn final line first.
fn open_journal(path: &Path, resume: bool) -> std::io::Result<File> {
    if !resume {
        return File::create(path);
    }
    let mut f = OpenOptions::new().read(true).append(true).create(true).open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if !buf.is_empty() && !buf.ends_with(b"\n") {
        let keep = buf.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        f.set_len(keep as u64)?;
        f.seek(SeekFrom::End(0))?;
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    pub resume: bool,
    /// Stop dispatching after this many jobs; simulates an interrupted run.
    pub max_jobs: Option<usize>,
    pub pricing: Option<PricingTable>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedJob {
    pub job_id: String,
    pub error: String,
}

/// Message-level accounting over all completed traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MessageAccounting {
    pub turns: u64,
    pub messages: u64,
    /// Messages beyond the first within a turn.
    pub reprompts: u64,
    pub unparseable: u64,
    pub transport_retries: u64,
    pub agent_errors: u64,
}

impl MessageAccounting {
    pub fn of(trace: &NegotiationTrace) -> Self {
        let mut a = MessageAccounting::default();
        for t in &trace.turns {
            a.turns += 1;
            a.messages += t.messages.len() as u64;
            a.reprompts += t.messages.len().saturating_sub(1) as u64;
            a.unparseable += t.messages.iter().filter(|m| !m.report.parseable).count() as u64;
            a.transport_retries += t.messages.iter().map(|m| m.transport_retries as u64).sum::<u64>();
            a.agent_errors += t.agent_errors.len() as u64;
        }
        a
    }

    fn add(&mut self, o: MessageAccounting) {
        self.turns += o.turns;
        self.messages += o.messages;
        self.reprompts += o.reprompts;
        self.unparseable += o.unparseable;
        self.transport_retries += o.transport_retries;
        self.agent_errors += o.agent_errors;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentSummary {
    pub planned: usize,
    pub completed: usize,
    /// Completed in an earlier run and skipped on resume.
    pub resumed: usize,
    pub failed: Vec<FailedJob>,
    /// Jobs never started (interrupted run).
    pub pending: usize,
    pub accounting: MessageAccounting,
    /// Report files written, relative to the output directory.
    pub reports: Vec<String>,
}

impl TournamentSummary {
    pub fn is_complete(&self) -> bool {
        self.pending == 0 && self.failed.is_empty()
    }
}

struct JobResult {
    job: Job,
    entry: JournalEntry,
}

/// Runs every pending job, then scores and reports over all completed traces.
pub fn execute(plan: &TournamentPlan, out_dir: &Path, opts: &ExecuteOptions) -> Result<TournamentSummary, TournamentError> {
    fs::create_dir_all(out_dir.join(TRACE_DIR))?;
    let journal_path = out_dir.join(JOURNAL_FILE);
    let prior = if opts.resume { read_journal(&journal_path)? } else { BTreeMap::new() };
    let done = |job: &Job| {
        prior
            .get(&job.id)
            .is_some_and(|e| e.status == JobStatus::Completed && e.trace_path.as_ref().is_some_and(|p| out_dir.join(p).is_file()))
    };
    let all: Vec<Job> = plan.jobs().collect();
    let resumed = all.iter().filter(|j| done(j)).count();
    let mut todo: Vec<&Job> = all.iter().filter(|j| !done(j)).collect();
    if let Some(cap) = opts.max_jobs {
        todo.truncate(cap);
    }

    let mut journal = BufWriter::new(open_journal(&journal_path, opts.resume)?);
    let mut this_run: BTreeMap<String, JournalEntry> = BTreeMap::new();
    let next = AtomicUsize::new(0);
    let workers = plan.config.concurrency.min(todo.len()).max(1);
    let (tx, rx) = mpsc::channel::<JobResult>();
    let write_result: Result<(), TournamentError> = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next) = (&todo, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = todo.get(i) else { break };
                let started = Instant::now();
                let entry = run_and_store(plan, job, out_dir, started);
                if tx.send(JobResult { job: (*job).clone(), entry }).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: the journal is only touched from this thread.
        for r in rx {
            serde_json::to_writer(&mut journal, &r.entry).map_err(std::io::Error::from)?;
            journal.write_all(b"\n")?;
            journal.flush()?;
            log::debug!("job {} {:?}", r.job.index, r.entry.status);
            this_run.insert(r.entry.job_id.clone(), r.entry);
        }
        Ok(())
    });
    write_result?;
    drop(journal);

    let mut failed = Vec::new();
    let mut traces = Vec::new();
    let mut pending = 0;
    for job in &all {
        let entry = this_run.get(&job.id).or_else(|| prior.get(&job.id).filter(|_| done(job)));
        match entry {
            None => pending += 1,
            Some(JournalEntry { status: JobStatus::Failed, error, .. }) => {
                failed.push(FailedJob { job_id: job.id.clone(), error: error.clone().unwrap_or_default() })
            }
            Some(JournalEntry { trace_path: Some(p), .. }) => {
                let file = File::open(out_dir.join(p))?;
                match NegotiationTrace::read_jsonl(BufReader::new(file)) {
                    Ok(t) => traces.push((job.id.clone(), t)),
                    Err(e) => failed.push(FailedJob { job_id: job.id.clone(), error: format!("unreadable trace: {e}") }),
                }
            }
            Some(_) => failed.push(FailedJob { job_id: job.id.clone(), error: "journal entry has no trace".into() }),
        }
    }

    let mut accounting = MessageAccounting::default();
    let mut metrics = Vec::with_capacity(traces.len());
    for (id, t) in &traces {
        accounting.add(MessageAccounting::of(t));
        match score_negotiation(t) {
            Ok(m) => metrics.push(m),
            Err(e) => failed.push(FailedJob { job_id: id.clone(), error: format!("scoring: {e}") }),
        }
    }
    let reports = write_reports(out_dir, &metrics, &traces, opts.pricing.as_ref())?;
    let summary = TournamentSummary { planned: all.len(), completed: metrics.len(), resumed, failed, pending, accounting, reports };
    let mut f = BufWriter::new(File::create(out_dir.join(REPORT_DIR).join("summary.json"))?);
    serde_json::to_writer_pretty(&mut f, &summary).map_err(std::io::Error::from)?;
    f.write_all(b"\n")?;
    Ok(summary)
}

fn run_and_store(plan: &TournamentPlan, job: &Job, out_dir: &Path, started: Instant) -> JournalEntry {
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| plan.run_job(job)))
        .unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        })
        .and_then(|trace| {
            let rel = plan.trace_path(job);
            store_trace(&out_dir.join(&rel), &trace).map_err(|e| format!("writing trace: {e}"))?;
            Ok(rel)
        });
    let wall_time = started.elapsed().as_secs_f64();
    match outcome {
        Ok(rel) => JournalEntry {
            job_id: job.id.clone(),
            trace_path: Some(rel.to_string_lossy().replace('\\', "/")),
            status: JobStatus::Completed,
            wall_time,
            error: None,
        },
        Err(e) => {
            log::warn!("job {} failed: {e}", job.id);
            JournalEntry { job_id: job.id.clone(), trace_path: None, status: JobStatus::Failed, wall_time, error: Some(e) }
        }
    }
}

/// Write-then-rename so a crash never leaves a half-written trace behind.
fn store_trace(path: &Path, trace: &NegotiationTrace) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        trace.write_jsonl(&mut w)?;
        w.flush()?;
    }
    fs::rename(tmp, path)
}

pub const REPORT_FILES: [&str; 7] =
    ["ir.csv", "surplus_deal.csv", "drivers.csv", "quintiles.csv", "quintiles_reference_price.csv", "heatmap.csv", "cost.csv"];

/// Writes the report family; returns paths relative to `out_dir`.
pub fn write_reports(
    out_dir: &Path,
    metrics: &[NegotiationMetrics],
    traces: &[(String, NegotiationTrace)],
    pricing: Option<&PricingTable>,
) -> Result<Vec<String>, TournamentError> {
    let dir = out_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    let create = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
    let report: AggregateReport =
        if metrics.is_empty() { AggregateReport::new() } else { aggregate(metrics, Grouping::PairingRegime).expect("non-empty") };
    write_ir_csv(create("ir.csv")?, &report)?;
    write_surplus_deal_csv(create("surplus_deal.csv")?, &report)?;
    write_drivers_csv(create("drivers.csv")?, &report)?;
    write_quintiles_csv(create("quintiles.csv")?, &quintile_rows(metrics, QuintileKey::Reservation))?;
    write_quintiles_csv(create("quintiles_reference_price.csv")?, &quintile_rows(metrics, QuintileKey::ReferencePrice))?;
    write_heatmap_csv(create("heatmap.csv")?, &report)?;
    write_cost_csv(create("cost.csv")?, &cost_rows(traces.iter().map(|(_, t)| t), pricing))?;
    Ok(REPORT_FILES.iter().map(|f| format!("{REPORT_DIR}/{f}")).collect())
}

// ---------------------------------------------------------------------------
// Cost accounting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    /// USD per million input tokens.
    pub input_per_million: f64,
    pub output_per_million: f64,
}

/// `[models.<name>]` tables keyed by agent name or remote model id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PricingTable {
    #[serde(default)]
    pub models: BTreeMap<String, Price>,
}

impl PricingTable {
    pub fn parse(text: &str) -> Result<Self, TournamentError> {
        let t: PricingTable = toml::from_str(text).map_err(|e| TournamentError::Pricing(e.to_string()))?;
        for (name, p) in &t.models {
            if !(p.input_per_million >= 0.0 && p.output_per_million >= 0.0) {
                return Err(TournamentError::Pricing(format!("{name}: prices must be non-negative")));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TournamentError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Agent name first, then the remote model id.
    pub fn price_for(&self, agent: &str, model: Option<&str>) -> Option<Price> {
        self.models.get(agent).or_else(|| model.and_then(|m| self.models.get(m))).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub agent: String,
    pub negotiations: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: Option<f64>,
}

pub fn cost_rows<'a>(traces: impl IntoIterator<Item = &'a NegotiationTrace>, pricing: Option<&PricingTable>) -> Vec<CostRow> {
    let mut per_agent: BTreeMap<String, (u64, TokenUsage, Option<String>)> = BTreeMap::new();
    for t in traces {
        for role in [Role::Buyer, Role::Seller] {
            let info = match role {
                Role::Buyer => &t.header.buyer,
                Role::Seller => &t.header.seller,
            };
            let e = per_agent.entry(info.name.clone()).or_insert_with(|| (0, TokenUsage::default(), None));
            e.0 += 1;
            for u in t.turns_of(role).filter_map(|r| r.usage) {
                e.1.add(u);
            }
            if let Some(model) = info.kind.strip_prefix("remote:") {
                e.2 = Some(model.to_string());
            }
        }
    }
    per_agent
        .into_iter()
        .map(|(agent, (n, usage, model))| {
            let cost = pricing
                .and_then(|p| p.price_for(&agent, model.as_deref()))
                .map(|p| (usage.input_tokens as f64 * p.input_per_million + usage.output_tokens as f64 * p.output_per_million) / 1e6);
            CostRow { agent, negotiations: n, input_tokens: usage.input_tokens, output_tokens: usage.output_tokens, cost_usd: cost }
        })
        .collect()
}

pub fn write_cost_csv<W: Write>(w: W, rows: &[CostRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["agent", "negotiations", "input_tokens", "output_tokens", "cost_usd"])?;
    for r in rows {
        out.write_record([
            r.agent.clone(),
            r.negotiations.to_string(),
            r.input_tokens.to_string(),
            r.output_tokens.to_string(),
            r.cost_usd.map_or(String::new(), |c| format!("{c:.6}")),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A scripted roster of the given policies with default parameters.
pub fn scripted_roster(policies: &[crate::agents::PolicyId]) -> Roster {
    Roster {
        agents: policies
            .iter()
            .map(|p| AgentSpec { name: p.as_str().to_string(), kind: AgentKind::Scripted { policy: *p, params: Default::default() } })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::PolicyId;
    use crate::domain::Split;
    use crate::scenarios::tests::listing;
    use crate::scenarios::{Sampler, SamplerConfig};

    fn scenarios(n_gft: usize, n_ngft: usize) -> Vec<Scenario> {
        let listings: Vec<_> = (0..8).map(|i| listing(&format!("item-{i}"), 10_000 + 5_000 * i, 30_000 + 8_000 * i)).collect();
        Sampler::new(SamplerConfig::with_seed(3)).unwrap().generate(&listings, n_gft, n_ngft, Split::Test).unwrap()
    }

    fn small_plan(n: usize) -> TournamentPlan {
        let roster = scripted_roster(&[PolicyId::Boulware, PolicyId::Conceder, PolicyId::FirmAnchor]);
        plan(&roster, scenarios(n, n), TournamentConfig { concurrency: 4, ..Default::default() }).unwrap()
    }

    fn read_reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
        REPORT_FILES.iter().map(|f| (f.to_string(), fs::read(dir.join(REPORT_DIR).join(f)).unwrap())).collect()
    }

    #[test]
    fn plan_sizes_and_errors() {
        let roster = scripted_roster(&[PolicyId::Boulware, PolicyId::Conceder]);
        let p = plan(&roster, scenarios(5, 5), TournamentConfig::default()).unwrap();
        assert_eq!(p.job_count(), 40);
        assert_eq!(p.jobs().count(), 40);
        let diag = p.pairings.iter().filter(|x| x.buyer == x.seller).count();
        assert_eq!(diag, 2);
        let one = plan(&scripted_roster(&[PolicyId::Boulware]), scenarios(1, 0), TournamentConfig::default()).unwrap();
        assert_eq!(one.job_count(), 1);
        assert!(matches!(
            plan(&Roster { agents: vec![] }, scenarios(1, 0), TournamentConfig::default()),
            Err(TournamentError::EmptyRoster)
        ));
        assert!(matches!(plan(&roster, vec![], TournamentConfig::default()), Err(TournamentError::EmptyScenarios)));
    }

    #[test]
    fn every_pairing_sees_the_same_scenarios() {
        let p = small_plan(3);
        let mut per_pair: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
        for j in p.jobs() {
            per_pair.entry((j.buyer, j.seller)).or_default().push(p.scenarios[j.scenario].id());
        }
        assert_eq!(per_pair.len(), 9);
        let first = per_pair.values().next().unwrap().clone();
        assert!(per_pair.values().all(|v| *v == first));
    }

    #[test]
    fn rerun_is_byte_identical_and_resume_matches() {
        let p = small_plan(10);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = execute(&p, a.path(), &ExecuteOptions::default()).unwrap();
        assert!(sa.is_complete());
        assert_eq!(sa.completed, 180);

        // Interrupted run, then a torn journal line, then resume.
        let part = execute(&p, b.path(), &ExecuteOptions { max_jobs: Some(70), ..Default::default() }).unwrap();
        assert_eq!((part.completed, part.pending), (70, 110));
        let mut j = OpenOptions::new().append(true).open(b.path().join(JOURNAL_FILE)).unwrap();
        j.write_all(b"{\"job_id\":\"tor").unwrap();
        drop(j);
        let sb = execute(&p, b.path(), &ExecuteOptions { resume: true, ..Default::default() }).unwrap();
        assert_eq!((sb.resumed, sb.completed, sb.pending), (70, 180, 0));
        assert_eq!(read_reports(a.path()), read_reports(b.path()));

        let journal = read_journal(&b.path().join(JOURNAL_FILE)).unwrap();
        assert_eq!(journal.len(), 180);
        let lines = fs::read_to_string(b.path().join(JOURNAL_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 180, "resume never re-runs a completed job");
    }

    #[test]
    fn failures_are_collected_not_fatal() {
        let mut roster = scripted_roster(&[PolicyId::Conceder]);
        let mut remote = crate::agents::RemoteConfig::new("http://127.0.0.1:9", "m");
        remote.auth_env = Some("BARGAIN_TEST_KEY_THAT_IS_NEVER_SET".into());
        roster.agents.push(AgentSpec { name: "remote".into(), kind: AgentKind::Remote(remote) });
        let p = plan(&roster, scenarios(2, 0), TournamentConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = execute(&p, dir.path(), &ExecuteOptions::default()).unwrap();
        assert_eq!(s.completed, 2);
        assert_eq!(s.failed.len(), 6);
        assert!(s.failed.iter().all(|f| f.error.contains("BARGAIN_TEST_KEY")));
    }

    #[test]
    fn firm_seller_beats_conceding_buyer() {
        let roster = scripted_roster(&[PolicyId::Conceder, PolicyId::FirmAnchor]);
        let p = plan(&roster, scenarios(20, 0), TournamentConfig::default()).unwrap();
        let shares: Vec<f64> = p
            .jobs()
            .filter(|j| j.buyer == 0 && j.seller == 1)
            .filter_map(|j| score_negotiation(&p.run_job(&j).unwrap()).unwrap().surplus_share.map(|s| s.seller()))
            .collect();
        assert!(!shares.is_empty());
        let mean = shares.iter().sum::<f64>() / shares.len() as f64;
        assert!(mean > 0.5, "mean seller share {mean}");
    }

    #[test]
    fn cost_uses_pricing_table() {
        let mut t = crate::metrics::tests::laptop_deal();
        t.turns.push(crate::engine::TurnRecord {
            turn: 1,
            round: 1,
            actor: Role::Seller,
            observation: String::new(),
            messages: vec![],
            usage: Some(TokenUsage { input_tokens: 1_000_000, output_tokens: 500_000 }),
            agent_errors: vec![],
        });
        let pricing = PricingTable::parse("[models.S]\ninput_per_million = 2.0\noutput_per_million = 8.0\n").unwrap();
        let rows = cost_rows([&t], Some(&pricing));
        let s = rows.iter().find(|r| r.agent == "S").unwrap();
        assert_eq!(s.cost_usd, Some(6.0));
        assert_eq!(rows.iter().find(|r| r.agent == "B").unwrap().cost_usd, None);
        assert!(PricingTable::parse("[models.x]\ninput_per_million = -1.0\noutput_per_million = 1.0\n").is_err());
    }

    #[test]
    fn corrupt_journal_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(JOURNAL_FILE);
        fs::write(&p, "garbage\n{\"job_id\":\"a\",\"trace_path\":null,\"status\":\"failed\",\"wall_time\":0.1}\n").unwrap();
        assert!(matches!(read_journal(&p), Err(TournamentError::CorruptJournal { line: 1, .. })));
    }
}
