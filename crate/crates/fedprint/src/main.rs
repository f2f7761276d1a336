use std::fs;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedprint_core::augment::{AugmentConfig, DEFAULT_PHI};
use fedprint_core::datapipe::{read_corpus, split_corpus, write_corpus, CorpusMeta, SplitConfig};
use fedprint_core::fedavg::{
    handshake, run_client, run_server, AggregationPolicy, ReaderClient, ServerConfig, StreamTransport,
};
use fedprint_core::harness::{emit_report, load_catalog, run_experiment, run_suite, ExperimentSpec, Mode, Suite};
use fedprint_core::neuralnet::{save_checkpoint, ArchConfig};
use fedprint_core::signalgen::{generate_population, synthesize_scenario, ImpairmentRanges, SynthConfig};

#[derive(Parser)]
#[command(name = "fedprint", version, about = "RFID radio fingerprinting with federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a corpus of tag replies and write it as FPRN files.
    Gen(GenArgs),
    /// Train and test on one scenario.
    Train(TrainArgs),
    /// Train one model per scenario and test each on every scenario.
    Cross(CrossArgs),
    /// Run every experiment of a suite file.
    Run(RunArgs),
    /// Summarise a results directory.
    Report(ReportArgs),
    /// Coordinate a federated run over TCP.
    Serve(ServeArgs),
    /// Take part in a federated run as one reader.
    Client(ClientArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Built-in catalog name or catalog file.
    #[arg(long, default_value = "desk")]
    catalog: String,
    /// Scenarios to synthesise; all of the catalog when omitted.
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<String>,
    #[arg(long, default_value_t = 20)]
    tags: u32,
    #[arg(long, default_value_t = 200)]
    comms: usize,
    /// Seed of the tag population.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    #[arg(long, default_value = "desk")]
    catalog: String,
    /// Read the corpus from a `gen` output directory instead of synthesising.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    tags: u32,
    #[arg(long, default_value_t = 200)]
    comms: usize,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    convs: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Early-stopping patience in epochs; 0 disables it.
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    population_seed: u64,
    #[arg(long, default_value_t = 2)]
    split_seed: u64,
    #[arg(long, default_value_t = 3)]
    model_seed: u64,
    #[arg(long, default_value_t = 4)]
    augment_seed: u64,
    /// Output directory for the results record.
    #[arg(long)]
    out: PathBuf,
}

impl ExperimentArgs {
    fn spec(&self, name: &str, mode: Mode, scenarios: Vec<String>) -> ExperimentSpec {
        let mut s = ExperimentSpec::desk(name, mode);
        s.catalog = self.catalog.clone();
        s.scenarios = scenarios;
        s.data_dir = self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        s.tags = self.tags;
        s.comms_per_tag = self.comms;
        s.fraction = self.fraction;
        s.window = self.window;
        s.convs = self.convs;
        s.epochs = self.epochs;
        s.patience = self.patience;
        s.batch_size = self.batch_size;
        s.population_seed = self.population_seed;
        s.split_seed = self.split_seed;
        s.model_seed = self.model_seed;
        s.augment_seed = self.augment_seed;
        s
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: String,
    /// Add noisy copies of the training set; optionally `phi=0.2,0.1,...`.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    augment: Option<String>,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct CrossArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    scenarios: Vec<String>,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Number of tags the classifier separates.
    #[arg(long, default_value_t = 20)]
    tags: u32,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    convs: usize,
}

impl ModelArgs {
    fn arch(&self) -> Result<ArchConfig> {
        let arch = ArchConfig::new(self.window, self.tags as usize).with_blocks(self.convs);
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    readers: usize,
    #[arg(long, default_value_t = 30)]
    rounds: u32,
    #[arg(long, default_value = "uniform")]
    policy: AggregationPolicy,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 1)]
    local_epochs: u32,
    #[arg(long, default_value_t = 0)]
    bootstrap_epochs: u32,
    /// Seed of the initial weights.
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    /// Write the final global checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long)]
    reader_id: u32,
    /// Corpus directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Scenario to train on; defaults to the corpus scenario at index `reader-id`.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    server: String,
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    convs: usize,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 2)]
    split_seed: u64,
    /// Seed of the reader's shuffling.
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Add noisy copies of the local training set; optionally `phi=...`.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    augment: Option<String>,
    #[arg(long, default_value_t = 4)]
    augment_seed: u64,
    /// Write the final synchronised checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_augment(arg: &str) -> Result<Vec<f64>> {
    if arg.is_empty() {
        return Ok(DEFAULT_PHI.to_vec());
    }
    AugmentConfig::parse_phi(arg).map_err(anyhow::Error::msg)
}

fn gen(args: &GenArgs) -> Result<()> {
    let catalog = load_catalog(&args.catalog)?;
    let scenarios = if args.scenario.is_empty() {
        catalog.scenarios.clone()
    } else {
        args.scenario
            .iter()
            .map(|n| catalog.get(n).cloned().with_context(|| format!("scenario {n} not in {}", args.catalog)))
            .collect::<Result<_>>()?
    };
    let profiles = generate_population(args.tags, args.seed, &ImpairmentRanges::default());
    let mut waves = Vec::new();
    for s in &scenarios {
        log::info!("synthesising {}", s.name);
        waves.extend(synthesize_scenario(&profiles, s, args.comms, &SynthConfig::default())?);
    }
    let meta = CorpusMeta {
        num_classes: args.tags,
        population_seed: args.seed,
        comms_per_tag: args.comms as u64,
        link_timing: None,
        scenarios,
    };
    let manifest = write_corpus(&args.out, &waves, &meta)?;
    println!("wrote {} files to {}", manifest.files.len(), args.out.display());
    Ok(())
}

fn finish(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let record = run_experiment(spec)?;
    if out.exists() {
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    record.write(out)?;
    println!("{}: test accuracy {:.4}", spec.name, record.test_accuracy);
    if let Some(cross) = &record.cross {
        for (name, row) in cross.scenarios.iter().zip(&cross.accuracy) {
            let cells: Vec<String> = row.iter().map(|a| format!("{a:.4}")).collect();
            println!("  {name}: {}", cells.join(" "));
        }
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mode = if args.augment.is_some() { Mode::UnionDa } else { Mode::Local };
    let mut spec = args.exp.spec(&format!("train-{}", args.scenario), mode, vec![args.scenario.clone()]);
    if let Some(a) = &args.augment {
        spec.augment_phi = parse_augment(a)?;
    }
    finish(&spec, &args.exp.out)
}

fn cross(args: &CrossArgs) -> Result<()> {
    if args.scenarios.len() < 2 {
        bail!("cross needs at least two scenarios");
    }
    let spec = args.exp.spec("cross", Mode::Cross, args.scenarios.clone());
    finish(&spec, &args.exp.out)
}

fn run(args: &RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.suite).with_context(|| format!("reading {}", args.suite.display()))?;
    let suite = Suite::from_toml(&text)?;
    let outcome = run_suite(&suite, &args.out)?;
    println!("{} succeeded, {} failed", outcome.succeeded.len(), outcome.failed.len());
    for (name, err) in &outcome.failed {
        println!("  {name}: {err}");
    }
    emit_report(&args.out)?;
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let cfg = ServerConfig {
        arch: args.model.arch()?,
        rounds: args.rounds,
        local_epochs: args.local_epochs,
        bootstrap_epochs: args.bootstrap_epochs,
        policy: args.policy,
        model_seed: args.seed,
    };
    let listener = TcpListener::bind((args.host.as_str(), args.port))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let mut sessions = Vec::with_capacity(args.readers);
    while sessions.len() < args.readers {
        let (stream, peer) = listener.accept()?;
        stream.set_nodelay(true)?;
        match handshake(StreamTransport::new(stream)) {
            Ok(s) => {
                log::info!("reader {} joined from {peer}", s.reader_id);
                sessions.push(s);
            }
            Err(e) => log::warn!("rejected connection from {peer}: {e}"),
        }
    }
    let report = run_server(sessions, &cfg)?;
    for t in &report.traffic {
        log::info!(
            "round {}: {} bytes up, {} bytes down",
            t.round,
            t.upload_bytes,
            t.download_bytes
        );
    }
    if let Some(out) = &args.out {
        save_checkpoint(&report.final_weights, out)?;
    }
    println!("finished {} rounds with readers {:?}", args.rounds, report.reader_ids);
    Ok(())
}

fn client(args: &ClientArgs) -> Result<()> {
    let (manifest, waves) = read_corpus(&args.data)?;
    let scenario = match &args.scenario {
        Some(s) => s.clone(),
        None => manifest
            .scenarios
            .get(args.reader_id as usize)
            .map(|s| s.name.clone())
            .with_context(|| format!("corpus has no scenario at index {}; pass --scenario", args.reader_id))?,
    };
    let waves: Vec<_> = waves.into_iter().filter(|w| w.scenario_name == scenario).collect();
    if waves.is_empty() {
        bail!("scenario {scenario} not in {}", args.data.display());
    }
    let data = split_corpus(&waves, &SplitConfig::new(args.window, args.fraction, args.split_seed))?;
    let arch = ArchConfig::new(args.window, manifest.num_classes as usize).with_blocks(args.convs);
    let augment = match &args.augment {
        Some(a) => Some(AugmentConfig {
            phi: parse_augment(a)?,
            seed: args.augment_seed,
        }),
        None => None,
    };
    let mut reader = ReaderClient::new(args.reader_id, data, &arch, augment.as_ref(), args.seed)?;
    reader.batch_size = args.batch_size;
    let stream = TcpStream::connect(&args.server).with_context(|| format!("connecting to {}", args.server))?;
    stream.set_nodelay(true)?;
    let mut conn = StreamTransport::new(stream);
    let report = run_client(&mut conn, &mut reader)?;
    if let Some(out) = &args.out {
        fs::write(out, &report.final_checkpoint).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("reader {} trained {} rounds on {scenario}", args.reader_id, report.rounds_trained);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Cross(a) => cross(a),
        Command::Run(a) => run(a),
        Command::Report(a) => {
            print!("{}", emit_report(&a.dir)?);
            Ok(())
        }
        Command::Serve(a) => serve(a),
        Command::Client(a) => client(a),
    }
}
