use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kzone::pipeline::{self, DatasetSpec, ProviderKind, RunConfig, StageName};
use kzone::synthetic::{blob_corpus, BlobSpec};

#[derive(Parser)]
#[command(name = "kzone", version, about = "Cluster-count sweep over embedded short-text corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit GMM and random-baseline clusterings for every (dataset, K).
    Cluster(RunArgs),
    /// Estimate semantic density for both clusterings.
    Density(RunArgs),
    /// Name clusters with the configured provider.
    Name(RunArgs),
    /// Classify a sample of documents against the cluster names.
    Classify(RunArgs),
    /// Compute AMI, accuracy and encoder complexity.
    Evaluate(RunArgs),
    /// Aggregate metrics across datasets and detect the zone.
    Goldilocks(RunArgs),
    /// Fit the pooled logistic regression on cosine features.
    Regress(RunArgs),
    /// Write the CSV bundle from a complete run.
    Report(ReportArgs),
    /// Run every stage, reusing completed work.
    Run(RunArgs),
    /// Write a synthetic blob dataset in the embedding-store format.
    Synth(SynthArgs),
    /// Print a default config as TOML.
    InitConfig {
        /// Embedding-store manifests to list as datasets.
        manifests: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Uses the HTTP provider at this base URL.
    #[arg(long)]
    provider_endpoint: Option<String>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Concurrent units; 0 uses one per core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory; defaults to the config's output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[arg(short, long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory that receives `<tag>.manifest.json`, `<tag>.f32` and `<tag>.documents.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    tag: String,
    #[arg(long, default_value_t = 1000)]
    n_docs: usize,
    #[arg(long, default_value_t = 8)]
    blobs: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(endpoint) = &self.provider_endpoint {
            cfg.provider.kind = ProviderKind::Http;
            cfg.provider.endpoint = Some(endpoint.clone());
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(workers) = self.workers {
            cfg.workers = workers;
        }
        Ok(cfg)
    }
}

fn run_stage(args: &RunArgs, upto: StageName) -> anyhow::Result<()> {
    let cfg = args.config()?;
    let outcome = pipeline::run(&cfg, upto)?;
    println!(
        "{upto}: {} stages executed, {} reused, output in {}",
        outcome.executed.len(),
        outcome.reused.len(),
        cfg.output_dir.display()
    );
    if upto >= StageName::Goldilocks {
        print_zone(&cfg.output_dir)?;
    }
    Ok(())
}

fn print_zone(out: &std::path::Path) -> anyhow::Result<()> {
    let path = out.join("global").join("goldilocks.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: kzone::goldilocks::GoldilocksReport = serde_json::from_str(&text)?;
    match report.zone {
        Some((lo, hi)) => println!("goldilocks zone: K = {lo}..{hi}, crossings at {:?}", report.crossings),
        None => println!("goldilocks zone: none (no crossings)"),
    }
    Ok(())
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let out = match (&args.output_dir, &args.config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(config)) => RunConfig::load(config)?.output_dir,
        (None, None) => bail!("report needs --output-dir or --config"),
    };
    let bundle = pipeline::report(&out)?;
    for f in &bundle.files {
        println!("{}", f.display());
    }
    match bundle.zone {
        Some((lo, hi)) => println!("goldilocks zone: K = {lo}..{hi}"),
        None => println!("goldilocks zone: none"),
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let blobs = blob_corpus(&BlobSpec {
        tag: args.tag.clone(),
        n_docs: args.n_docs,
        n_blobs: args.blobs,
        dim: args.dim,
        noise: args.noise,
        seed: args.seed,
        ..BlobSpec::default()
    })?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    println!("{}", blobs.save(&args.out)?.display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Cluster(a) => run_stage(&a, StageName::Cluster),
        Command::Density(a) => run_stage(&a, StageName::Density),
        Command::Name(a) => run_stage(&a, StageName::Name),
        Command::Classify(a) => run_stage(&a, StageName::Classify),
        Command::Evaluate(a) => run_stage(&a, StageName::Evaluate),
        Command::Goldilocks(a) => run_stage(&a, StageName::Goldilocks),
        Command::Regress(a) => run_stage(&a, StageName::Regression),
        Command::Run(a) => run_stage(&a, StageName::Report),
        Command::Report(a) => report(&a),
        Command::Synth(a) => synth(&a),
        Command::InitConfig { manifests } => {
            let cfg = RunConfig {
                datasets: manifests.into_iter().map(|manifest| DatasetSpec { manifest, tag: None }).collect(),
                ..RunConfig::default()
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
