use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bargainbench_core::agents::fake_server::{FakeServer, FakeServerConfig};
use bargainbench_core::agents::PromptTemplate;
use bargainbench_core::engine::NegotiationTrace;
use bargainbench_core::rlprep::{write_samples, UndelimitedPolicy};
use bargainbench_core::scenarios::{load_catalog, load_scenarios, make_splits, write_scenarios};
use bargainbench_core::tournament::{TournamentConfig, REPORT_DIR};
use bargainbench_core::{
    compute_reward, execute, export_sft, group_advantages, plan, run, score_negotiation, AgentConfig, EngineConfig, ExecuteOptions,
    MaskConfig, OutcomeStatus, PricingTable, RewardWeights, Role, Roster, Sampler, SamplerConfig, ScenarioMix, Split, Trajectory,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bargainbench", version, about = "Bilateral price negotiation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample negotiation scenarios from a listing catalog.
    Sample(SampleArgs),
    /// Run one negotiation between two roster agents.
    Run(RunArgs),
    /// Round-robin tournament over a roster and a scenario file.
    Tournament(TournamentArgs),
    /// Print the metrics of one trace as JSON.
    Score {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Composite training reward of one side of a trace.
    Reward(RewardArgs),
    /// Turn-level SFT samples from a directory of traces.
    ExportSft(ExportArgs),
    /// Group-relative advantages for a flat list of rewards.
    Advantages {
        /// One reward per line, or a JSON array.
        #[arg(long)]
        rewards: PathBuf,
        #[arg(long)]
        group_size: usize,
    },
    /// Serve an offline chat endpoint that negotiates and injects faults.
    FakeServer(FakeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Buyer,
    Seller,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Buyer => Role::Buyer,
            RoleArg::Seller => Role::Seller,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    catalog: PathBuf,
    /// Number of scenarios, regime mix left to chance.
    #[arg(long, conflicts_with_all = ["mix", "gft"])]
    n: Option<usize>,
    /// Preset regime quota: `benchmark` (400/200) or `training-eval` (400/400).
    #[arg(long, conflicts_with = "gft")]
    mix: Option<String>,
    /// Explicit GFT quota; pair with --ngft.
    #[arg(long, requires = "ngft")]
    gft: Option<usize>,
    #[arg(long, requires = "gft")]
    ngft: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample only from this split of the catalog. Without it every listing
    /// is used and scenarios are labelled `test`.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, default_value_t = bargainbench_core::engine::DEFAULT_MAX_ROUNDS)]
    max_rounds: u32,
    #[arg(long, value_enum, default_value = "buyer")]
    first_mover: RoleArg,
    /// Prompt template file; the built-in template is used otherwise.
    #[arg(long)]
    template: Option<PathBuf>,
    /// End an episode (flagged as overflow) once a prompt exceeds this many input tokens.
    #[arg(long)]
    context_limit_tokens: Option<u64>,
}

impl EngineArgs {
    fn engine(&self) -> EngineConfig {
        EngineConfig {
            max_rounds: self.max_rounds,
            first_mover: self.first_mover.into(),
            context_limit_tokens: self.context_limit_tokens,
            ..EngineConfig::default()
        }
    }

    fn template(&self) -> Result<PromptTemplate> {
        let Some(path) = &self.template else { return Ok(PromptTemplate::default()) };
        let t = PromptTemplate::new(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?);
        t.validate().with_context(|| format!("template {}", path.display()))?;
        Ok(t)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    roster: PathBuf,
    #[arg(long)]
    buyer: String,
    #[arg(long)]
    seller: String,
    #[arg(long)]
    scenarios: PathBuf,
    /// Zero-based line in the scenario file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TournamentArgs {
    #[arg(long)]
    roster: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = bargainbench_core::tournament::DEFAULT_CONCURRENCY)]
    concurrency: usize,
    /// Skip jobs the journal already records as completed.
    #[arg(long)]
    resume: bool,
    /// Token prices (TOML) for the cost report.
    #[arg(long)]
    pricing: Option<PathBuf>,
    /// Stop after starting this many jobs.
    #[arg(long)]
    max_jobs: Option<usize>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct RewardArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum)]
    role: RoleArg,
    /// Component weights: parsing,execution,constraints,utility.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    weights: Option<Vec<f64>>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reasoning to mask from contexts: any of `thought`, `think`.
    #[arg(long, default_value = "thought,think")]
    mask: String,
    /// Fail on an unterminated reasoning span instead of stripping it.
    #[arg(long)]
    reject_undelimited: bool,
}

#[derive(Args)]
struct FakeArgs {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    #[arg(long, default_value_t = 20)]
    rate_limit_pct: u8,
    #[arg(long, default_value_t = 10)]
    garbage_pct: u8,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Sample(a) => sample(a),
        Command::Run(a) => run_one(a),
        Command::Tournament(a) => tournament(a),
        Command::Score { trace } => print_json(&score_negotiation(&load_trace(&trace)?)?),
        Command::Reward(a) => reward(a),
        Command::ExportSft(a) => export(a),
        Command::Advantages { rewards, group_size } => advantages(&rewards, group_size),
        Command::FakeServer(a) => fake_server(a),
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog).with_context(|| format!("loading {}", a.catalog.display()))?;
    let cfg = SamplerConfig::with_seed(a.seed);
    let sampler = Sampler::new(cfg.clone())?;
    let (listings, split) = match a.split {
        Some(s) => (make_splits(&catalog.listings, &cfg)?.get(s.into()).to_vec(), s.into()),
        None => (catalog.listings.clone(), Split::Test),
    };
    let scenarios = match (a.n, a.mix, a.gft, a.ngft) {
        (Some(n), ..) => sampler.draw(&listings, n, split)?,
        (None, Some(name), ..) => {
            let mix = ScenarioMix::preset(&name).with_context(|| format!("unknown mix {name:?}; use benchmark or training-eval"))?;
            sampler.generate(&listings, mix.n_gft, mix.n_ngft, split)?
        }
        (None, None, Some(g), Some(ng)) => sampler.generate(&listings, g, ng, split)?,
        _ => bail!("give --n, --mix, or --gft with --ngft"),
    };
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_scenarios(&mut w, &scenarios)?;
    w.flush()?;
    let gft = scenarios.iter().filter(|s| s.regime == bargainbench_core::Regime::Gft).count();
    eprintln!("wrote {} scenarios ({gft} GFT, {} NGFT) from {} listings", scenarios.len(), scenarios.len() - gft, listings.len());
    Ok(())
}

fn run_one(a: RunArgs) -> Result<()> {
    let roster = Roster::load(&a.roster).with_context(|| format!("loading {}", a.roster.display()))?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let sc = scenarios.get(a.index).with_context(|| format!("scenario index {} out of range ({} scenarios)", a.index, scenarios.len()))?;
    let spec = |name: &str| roster.agents.iter().find(|s| s.name == name).with_context(|| format!("no agent {name:?} in roster"));
    let engine = a.engine.engine();
    let template = a.engine.template()?;
    let listing_price = engine.listing_price_for(&sc.listing);
    let mut buyer = AgentConfig::for_scenario(spec(&a.buyer)?, sc, Role::Buyer).build(sc, listing_price, &template)?;
    let mut seller = AgentConfig::for_scenario(spec(&a.seller)?, sc, Role::Seller).build(sc, listing_price, &template)?;
    let trace = run(sc, buyer.as_mut(), seller.as_mut(), &engine)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    let o = &trace.outcome;
    let status = match o.status {
        OutcomeStatus::Deal { price } => format!("deal at {}", price.display_dollars()),
        OutcomeStatus::Quit { by } => format!("{by} quit"),
        OutcomeStatus::RoundLimit => "round limit".into(),
    };
    println!(
        "{}: {status} after {} rounds; buyer {} seller {}",
        sc.id(),
        o.rounds_used,
        o.buyer_utility.display_dollars(),
        o.seller_utility.display_dollars()
    );
    Ok(())
}

fn tournament(a: TournamentArgs) -> Result<()> {
    let roster = Roster::load(&a.roster).with_context(|| format!("loading {}", a.roster.display()))?;
    let scenarios = load_scenarios(&a.scenarios)?;
    let config = TournamentConfig { concurrency: a.concurrency, engine: a.engine.engine(), template: a.engine.template()? };
    let p = plan(&roster, scenarios, config)?;
    let pricing = a.pricing.as_deref().map(PricingTable::load).transpose()?;
    eprintln!("{} agents, {} scenarios, {} jobs", p.roster.len(), p.scenarios.len(), p.job_count());
    let summary = execute(&p, &a.out, &ExecuteOptions { resume: a.resume, max_jobs: a.max_jobs, pricing })?;
    eprintln!(
        "completed {} ({} resumed), failed {}, pending {}; reports in {}",
        summary.completed,
        summary.resumed,
        summary.failed.len(),
        summary.pending,
        a.out.join(REPORT_DIR).display()
    );
    for f in summary.failed.iter().take(20) {
        eprintln!("  failed {}: {}", f.job_id, f.error);
    }
    if summary.failed.len() > 20 {
        eprintln!("  ... {} more in summary.json", summary.failed.len() - 20);
    }
    ensure!(summary.failed.is_empty(), "{} jobs failed", summary.failed.len());
    Ok(())
}

fn reward(a: RewardArgs) -> Result<()> {
    let weights = match a.weights.as_deref() {
        Some(&[parsing, execution, constraints, utility]) => RewardWeights { parsing, execution, constraints, utility },
        Some(_) => bail!("--weights takes four numbers"),
        None => RewardWeights::default(),
    };
    print_json(&compute_reward(&load_trace(&a.trace)?, a.role.into(), &weights)?)
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "jsonl") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn export(a: ExportArgs) -> Result<()> {
    let mut mask = MaskConfig::from_list(&a.mask)?;
    if a.reject_undelimited {
        mask.undelimited = UndelimitedPolicy::Reject;
    }
    let traces = trace_files(&a.traces)?.iter().map(|p| load_trace(p)).collect::<Result<Vec<_>>>()?;
    ensure!(!traces.is_empty(), "no .jsonl traces under {}", a.traces.display());
    let trajectories = traces.iter().flat_map(|t| [Role::Buyer, Role::Seller].map(|role| Trajectory { trace: t, role }));
    let samples = export_sft(trajectories, &mask)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_samples(&mut w, &samples)?;
    w.flush()?;
    eprintln!("wrote {} samples from {} traces", samples.len(), traces.len());
    Ok(())
}

fn read_rewards(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    BufReader::new(text.as_bytes())
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| l?.trim().parse::<f64>().with_context(|| format!("line {}", i + 1)))
        .collect()
}

fn advantages(path: &Path, group_size: usize) -> Result<()> {
    let rewards = read_rewards(path)?;
    ensure!(group_size > 0 && rewards.len() % group_size == 0, "{} rewards do not split into groups of {group_size}", rewards.len());
    let mut out = String::new();
    for chunk in rewards.chunks(group_size) {
        out.push_str(&serde_json::to_string(&group_advantages(chunk, group_size)?)?);
        out.push('\n');
    }
    write_stdout(&out)
}

fn fake_server(a: FakeArgs) -> Result<()> {
    let cfg = FakeServerConfig { rate_limit_pct: a.rate_limit_pct, garbage_pct: a.garbage_pct, ..FakeServerConfig::default() };
    let server = FakeServer::bind(&a.addr, cfg).with_context(|| format!("binding {}", a.addr))?;
    println!("fake endpoint listening on {}", server.url());
    server.join();
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    write_stdout(&(serde_json::to_string_pretty(value)? + "\n"))
}

/// A closed pipe (e.g. `| head`) is not an error.
fn write_stdout(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn load_trace(path: &Path) -> Result<NegotiationTrace> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    NegotiationTrace::read_jsonl(BufReader::new(f)).with_context(|| format!("reading trace {}", path.display()))
}
