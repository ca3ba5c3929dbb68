use clap::{Parser, Subcommand};
use gradex::affinity::nmi;
use gradex::io;
use gradex::pipeline::{self as pl, file, Artifacts, RunConfig};
use gradex::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gradex", version, about = "Task-affinity estimation from projected policy gradients")]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "gradex-out")]
    out: PathBuf,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate the configuration and print it resolved, without writing.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the meta-policy on all tasks.
    Train,
    /// Project per-transition score gradients into the store.
    Extract,
    /// Sample subsets and fit the surrogate on each.
    Estimate,
    /// Build the affinity matrix from subset scores.
    Affinity,
    /// Solve the relaxation and round it to a partition.
    Cluster,
    /// Fine-tune on every subset and compare with the estimate.
    Oracle {
        /// Subsets to fine-tune on; defaults to the sampled ones.
        #[arg(long)]
        subsets: Option<PathBuf>,
    },
    /// First-order residuals at given relative distances.
    Taylor {
        #[arg(long, value_delimiter = ',')]
        distances: Option<Vec<f64>>,
    },
    /// Hessian trace, loss gap and bound of an adapted policy.
    Hessian,
    /// Normalized mutual information between two partition files.
    Nmi { a: PathBuf, b: PathBuf },
    /// Train, extract, estimate, build the affinity and cluster.
    Run,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Numeric { .. } => 3,
        Error::Stale { .. } => 4,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> gradex::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(&io::read_text(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolved())
}

fn run(cli: &Cli) -> gradex::Result<()> {
    if let Command::Nmi { a, b } = &cli.command {
        let score = nmi(&pl::load_partition(a)?, &pl::load_partition(b)?)?;
        println!("{score:?}");
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let suite = cfg.validate()?;
    if cli.dry_run {
        print!("{}", io::to_json(&cfg)?);
        return Ok(());
    }
    let art = Artifacts::new(&cli.out);
    let checksum = || -> gradex::Result<[u8; 8]> { Ok(pl::load_meta(&art)?.0.checksum()) };
    match &cli.command {
        Command::Train => {
            pl::write_resolved_config(&cfg, &art)?;
            let out = pl::train_stage(&cfg, &suite, &art).map_err(|e| e.in_stage("train"))?;
            println!("theta checksum {}", io::checksum_hex(out.policy.checksum()));
        }
        Command::Extract => {
            let (p, v) = pl::load_meta(&art)?;
            let ex = pl::extract_stage(&cfg, &suite, &art, &p, &v).map_err(|e| e.in_stage("extract"))?;
            println!("{} records, {} dropped", ex.store.records.len(), ex.dropped);
        }
        Command::Estimate => {
            let store = pl::load_store(&art, checksum()?)?;
            let scores = pl::estimate_stage(&cfg, &art, &store).map_err(|e| e.in_stage("estimate"))?;
            println!("{} subsets scored", scores.len());
        }
        Command::Affinity => {
            let sum = checksum()?;
            let scores = pl::load_scores(&art, file::SCORES, sum)?;
            let pairs: Vec<_> = scores.iter().map(|s| (s.subset.clone(), s.score)).collect();
            let u = pl::affinity_stage(&art, file::AFFINITY, &pairs, suite.n_tasks(), sum)
                .map_err(|e| e.in_stage("affinity"))?;
            println!("{} missing pairs", u.missing_pairs());
        }
        Command::Cluster => {
            let sum = checksum()?;
            let u = pl::load_matrix(&art, file::AFFINITY, sum)?;
            let (_, partition) = pl::cluster_stage(&cfg, &art, &u, sum, pl::PIPELINE_CLUSTER)
                .map_err(|e| e.in_stage("cluster"))?;
            print!("{}", io::to_json(&partition)?);
        }
        Command::Oracle { subsets } => {
            let sum = checksum()?;
            let path = subsets.clone().unwrap_or_else(|| art.path(file::SUBSETS));
            let subsets = pl::read_subsets(&path, sum)?;
            let report = pl::run_oracle(&cfg, &cli.out, &subsets)?;
            print!("{}", io::to_json(&report.partition)?);
            if let Some(c) = report.comparison {
                print!("{}", io::to_json(&c)?);
            }
        }
        Command::Taylor { distances } => {
            let d = distances.clone().unwrap_or_else(|| cfg.analysis.taylor.distances.clone());
            pl::taylor_stage(&cfg, &suite, &art, &d).map_err(|e| e.in_stage("taylor"))?;
            print!("{}", io::read_text(&art.path(file::TAYLOR_CSV))?);
        }
        Command::Hessian => {
            let out = pl::hessian_stage(&cfg, &suite, &art).map_err(|e| e.in_stage("hessian"))?;
            print!("{}", io::to_json(&out)?);
        }
        Command::Run => {
            let report = pl::run_pipeline(&cfg, &cli.out)?;
            print!("{}", io::to_json(&report.partition)?);
        }
        Command::Nmi { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
