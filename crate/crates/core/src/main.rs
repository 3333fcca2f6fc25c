use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use taxoneg::ann::{filter_results, AnnIndex, IndexKind};
use taxoneg::catalog::{
    aggregate_engagement, load_customers, load_engagement, Catalog, CustomerContext,
};
use taxoneg::config::PipelineConfig;
use taxoneg::encoder::ModelParams;
use taxoneg::eval::bench::{bench_csv, bench_samplers};
use taxoneg::eval::{
    add_segments, evaluate_model, frequency_segment, specificity_segment, Frequency, Specificity,
};
use taxoneg::experiment::{index_catalog, run_from_config, Dataset};
use taxoneg::lexical::{InvertedIndex, DEFAULT_B, DEFAULT_K1};
use taxoneg::sampling::{
    build_triplets, read_triplets, write_triplets, SamplerConfig, SamplerKind, SamplerResources,
};
use taxoneg::synth::{self, Split, SynthSpec};
use taxoneg::training::{reports_csv, train, AnceRefresh, TrainMode};

#[derive(Parser)]
#[command(
    name = "taxoneg",
    version,
    about = "Taxonomy-based hard-negative retrieval toolkit"
)]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic catalog, engagement log, customers and truth.
    Generate(GenerateArgs),
    /// Validate inputs and print a load summary as JSON.
    Ingest(IngestArgs),
    /// Lexical (BM25) index commands.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Build training triplets with one of the negative samplers.
    Mine(MineArgs),
    /// Train a two-tower model from triplet files.
    Train(TrainArgs),
    /// Encode the catalog and build an exact or IVF index.
    BuildAnn(BuildAnnArgs),
    /// Retrieve items for a query; prints item_id, score, title.
    Search(SearchArgs),
    /// Evaluation commands.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Time the samplers on synthetic catalogs (CSV to stdout or --out).
    Bench(BenchArgs),
    /// Compare samplers and training modes end to end.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    items_per_leaf: Option<usize>,
    #[arg(long)]
    customers: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    ambiguous_fraction: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    engagement: Option<PathBuf>,
    #[arg(long)]
    customers: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build a BM25 index over the catalog and save it as JSON.
    Build {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K1)]
        k1: f64,
        #[arg(long, default_value_t = DEFAULT_B)]
        b: f64,
    },
    /// Lexical top-k for a query.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Args)]
struct MineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "tb_hns")]
    sampler: SamplerKind,
    /// Key positives by (query, customer) and attach customer context.
    #[arg(long)]
    personalized: bool,
    /// Model used by the ANCE miner.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sampler statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    customers: Option<PathBuf>,
    /// Non-personalized triplet file.
    #[arg(long)]
    triplets: Option<PathBuf>,
    /// Personalized triplet file.
    #[arg(long)]
    per_triplets: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args)]
struct BuildAnnArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    kind: Option<IndexKind>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long)]
    customer: Option<String>,
    #[arg(long)]
    customers: Option<PathBuf>,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long, default_value_t = f64::NEG_INFINITY, allow_negative_numbers = true)]
    min_score: f64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Recall@k of a trained model on the truth file.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        nprobe: Option<usize>,
        /// Evaluate every truth record instead of the test split only.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sampler timing table.
    Bench(BenchArgs),
    /// Specific/general and head/tail labels per truth record.
    Segment {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        all: bool,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10000,100000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    bucket_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "tb_hns,random,bm25")]
    samplers: Vec<SamplerKind>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p).context("config")?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    match cli.command {
        Command::Generate(a) => generate(&config, a),
        Command::Ingest(a) => ingest(&config, a),
        Command::Index(c) => index(c),
        Command::Mine(a) => mine(&config, a),
        Command::Train(a) => train_cmd(&config, a),
        Command::BuildAnn(a) => build_ann(&config, a),
        Command::Search(a) => search(&config, a),
        Command::Eval(c) => eval(&config, c),
        Command::Bench(a) => bench(&config, a),
        Command::Experiment(a) => experiment(config, a),
    }
}

fn load_catalog(path: &Path) -> Result<Catalog> {
    Catalog::load(path).context("ingest")
}

fn load_customer_map(
    config: &PipelineConfig,
    path: Option<&Path>,
) -> Result<BTreeMap<String, CustomerContext>> {
    match path {
        Some(p) => load_customers(p, config.train.dims.d_cust, config.synth.history_window)
            .context("ingest"),
        None => Ok(BTreeMap::new()),
    }
}

fn generate(config: &PipelineConfig, a: GenerateArgs) -> Result<()> {
    let mut spec: SynthSpec = config.synth.clone();
    spec.seed = config.seed;
    spec.feature_dim = config.train.dims.d_cust;
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => {
            $(if let Some(v) = $arg { spec.$field = v; })*
        };
    }
    set!(
        branching <- a.branching,
        depth <- a.depth,
        items_per_leaf <- a.items_per_leaf,
        n_customers <- a.customers,
        n_queries <- a.queries,
        noise_rate <- a.noise_rate,
        ambiguous_fraction <- a.ambiguous_fraction
    );
    let data = synth::generate(&spec).context("generate")?;
    data.write(&a.out).context("generate")?;
    println!(
        "{{\"items\":{},\"events\":{},\"customers\":{},\"truth\":{}}}",
        data.items.len(),
        data.events.len(),
        data.customers.len(),
        data.truth.len()
    );
    Ok(())
}

fn ingest(config: &PipelineConfig, a: IngestArgs) -> Result<()> {
    let catalog = load_catalog(&a.data.catalog)?;
    let mut summary = serde_json::Map::new();
    summary.insert("items".into(), catalog.len().into());
    summary.insert(
        "categories".into(),
        (catalog.taxonomy().node_count() - 1).into(),
    );
    summary.insert(
        "load_report".into(),
        serde_json::to_value(catalog.report())?,
    );
    if let Some(p) = &a.data.engagement {
        let events = load_engagement(p).context("ingest")?;
        let agg = aggregate_engagement(&catalog, &events);
        summary.insert("events_counted".into(), agg.counted.into());
        summary.insert("events_skipped".into(), agg.skipped.into());
        summary.insert("queries".into(), agg.query_frequency.len().into());
        summary.insert("query_customer_pairs".into(), agg.cells.len().into());
    }
    let customers = load_customer_map(config, a.data.customers.as_deref())?;
    if a.data.customers.is_some() {
        summary.insert("customers".into(), customers.len().into());
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn index(c: IndexCommand) -> Result<()> {
    match c {
        IndexCommand::Build {
            catalog,
            out,
            k1,
            b,
        } => {
            let catalog = load_catalog(&catalog)?;
            let index = InvertedIndex::build(&catalog, k1, b).context("index")?;
            let json = serde_json::to_string(&index)?;
            std::fs::write(&out, json).with_context(|| format!("index: writing {}", out.display()))
        }
        IndexCommand::Query { index, query, k } => {
            let text = std::fs::read_to_string(&index)
                .with_context(|| format!("index: reading {}", index.display()))?;
            let index: InvertedIndex = serde_json::from_str(&text).context("index")?;
            let mut out = std::io::stdout().lock();
            for (id, score) in index.topk(&query, k).context("index")? {
                writeln!(out, "{id}\t{score:.6}")?;
            }
            Ok(())
        }
    }
}

fn mine(config: &PipelineConfig, a: MineArgs) -> Result<()> {
    let catalog = load_catalog(&a.data.catalog)?;
    let Some(engagement) = &a.data.engagement else {
        bail!("mine: --engagement is required");
    };
    let events = load_engagement(engagement).context("ingest")?;
    let customers = load_customer_map(config, a.data.customers.as_deref())?;
    let agg = aggregate_engagement(&catalog, &events);
    let bm25 = match a.sampler {
        SamplerKind::Bm25 => {
            Some(InvertedIndex::build(&catalog, DEFAULT_K1, DEFAULT_B).context("mine")?)
        }
        _ => None,
    };
    let ance = match (a.sampler, &a.params) {
        (SamplerKind::Ance, Some(p)) => {
            let params = ModelParams::load(p).context("mine")?;
            let index = index_catalog(&params, &catalog, config).context("mine")?;
            Some((params, index))
        }
        (SamplerKind::Ance, None) => bail!("mine: the ance sampler needs --params"),
        _ => None,
    };
    let sampler_cfg = SamplerConfig {
        kind: a.sampler,
        ..config.sampler.clone()
    };
    let resources = SamplerResources {
        bm25: bm25.as_ref(),
        ance: ance.as_ref().map(|(p, i)| (p, i)),
    };
    let set = build_triplets(
        &agg,
        &catalog,
        &customers,
        &sampler_cfg,
        resources,
        a.personalized,
        config.seed,
    )
    .context("mine")?;
    write_triplets(&a.out, &set.triplets, &catalog).context("mine")?;
    let stats = serde_json::to_string_pretty(&set.stats)?;
    match &a.stats {
        Some(p) => std::fs::write(p, stats + "\n")
            .with_context(|| format!("mine: writing {}", p.display()))?,
        None => eprintln!("{stats}"),
    }
    Ok(())
}

fn train_cmd(config: &PipelineConfig, a: TrainArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog)?;
    let customers = load_customer_map(config, a.customers.as_deref())?;
    let read = |p: &Option<PathBuf>| -> Result<Vec<_>> {
        match p {
            Some(p) => read_triplets(p, &catalog, &customers).context("train"),
            None => Ok(Vec::new()),
        }
    };
    let nper = read(&a.triplets)?;
    let per = read(&a.per_triplets)?;
    let mode = a.mode.unwrap_or(match (per.is_empty(), nper.is_empty()) {
        (false, true) => TrainMode::Personalized,
        (false, false) => TrainMode::Combined,
        _ => TrainMode::NonPersonalized,
    });
    let mut cfg = config.train.clone();
    cfg.seed = config.seed;
    cfg.mode = mode;
    let ance_mined = per
        .iter()
        .chain(&nper)
        .any(|t| t.sampler == SamplerKind::Ance);
    let positives = if ance_mined {
        let mut map: BTreeMap<_, taxoneg::sampling::PositiveSet> = BTreeMap::new();
        for t in per.iter().chain(&nper) {
            map.entry(t.key.clone())
                .or_default()
                .items
                .insert(t.positive);
        }
        map
    } else {
        BTreeMap::new()
    };
    let refresh = AnceRefresh {
        positives: &positives,
        pool_k: config.sampler.ance_pool_k,
        index_kind: config.ann_kind,
        n_clusters: config.n_clusters,
    };
    if ance_mined && cfg.ance_refresh_epochs.is_none() {
        cfg.ance_refresh_epochs = Some(1);
    }
    let outcome =
        train(&catalog, &per, &nper, &cfg, ance_mined.then_some(&refresh)).context("train")?;
    outcome.params.save(&a.out).context("train")?;
    let csv = reports_csv(&outcome.reports);
    match &a.losses {
        Some(p) => {
            std::fs::write(p, csv).with_context(|| format!("train: writing {}", p.display()))?
        }
        None => eprint!("{csv}"),
    }
    Ok(())
}

fn build_ann(config: &PipelineConfig, a: BuildAnnArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog)?;
    let params = ModelParams::load(&a.params).context("build-ann")?;
    let mut cfg = config.clone();
    if let Some(k) = a.kind {
        cfg.ann_kind = k;
    }
    if a.clusters.is_some() {
        cfg.n_clusters = a.clusters;
    }
    let index = index_catalog(&params, &catalog, &cfg).context("build-ann")?;
    index.save(&a.out).context("build-ann")?;
    Ok(())
}

fn search(config: &PipelineConfig, a: SearchArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog)?;
    let params = ModelParams::load(&a.params).context("search")?;
    let index = AnnIndex::load(&a.index).context("search")?;
    let context = match &a.customer {
        Some(id) => {
            let customers = load_customer_map(config, a.customers.as_deref())?;
            let found = customers.get(id).cloned();
            if found.is_none() {
                eprintln!("warning: unknown customer `{id}`; searching without personalization");
            }
            found
        }
        None => None,
    };
    let q = params
        .encode_query(&a.query, context.as_ref(), &catalog)
        .context("search")?;
    let nprobe = a.nprobe.unwrap_or_else(|| index.full_probe());
    let hits = index.search(&q.embedding, a.k, nprobe).context("search")?;
    let hits = filter_results(hits, a.min_score, |id| catalog.get(id).is_some());
    let mut out = std::io::stdout().lock();
    for (id, score) in hits {
        let title = catalog.get(&id).map_or("", |it| it.title.as_str());
        writeln!(out, "{id}\t{score:.6}\t{title}")?;
    }
    Ok(())
}

fn load_dataset(config: &PipelineConfig, data: &DataArgs, truth: &Path) -> Result<Dataset> {
    let Some(engagement) = &data.engagement else {
        bail!("ingest: --engagement is required");
    };
    Dataset::load(
        &data.catalog,
        engagement,
        data.customers.as_deref(),
        truth,
        config.train.dims.d_cust,
        config.synth.history_window,
    )
    .context("ingest")
}

fn eval(config: &PipelineConfig, c: EvalCommand) -> Result<()> {
    match c {
        EvalCommand::Run {
            data,
            truth,
            params,
            index,
            nprobe,
            all,
            out,
        } => {
            let ds = load_dataset(config, &data, &truth)?;
            let cases = ds
                .eval_cases((!all).then_some(Split::Test))
                .context("eval")?;
            let params = ModelParams::load(&params).context("eval")?;
            let index = AnnIndex::load(&index).context("eval")?;
            let probe = nprobe.unwrap_or_else(|| index.full_probe());
            let outcome = evaluate_model(&params, &index, &ds.catalog, &cases, &config.ks, probe)
                .context("eval")?;
            let mut report = outcome.report;
            add_segments(
                &mut report,
                &cases,
                &outcome.per_case,
                &config.ks,
                &config.segments,
            )
            .context("eval")?;
            if !outcome.latencies_ms.is_empty() {
                report.latency_p95 = Some(
                    taxoneg::eval::latency_percentile(&outcome.latencies_ms, 0.95)
                        .context("eval")?,
                );
            }
            let json = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => std::fs::write(&p, json)
                    .with_context(|| format!("eval: writing {}", p.display()))?,
                None => print!("{json}"),
            }
            Ok(())
        }
        EvalCommand::Bench(a) => bench(config, a),
        EvalCommand::Segment { data, truth, all } => {
            let ds = load_dataset(config, &data, &truth)?;
            let cases = ds
                .eval_cases((!all).then_some(Split::Test))
                .context("eval")?;
            let freq =
                frequency_segment(&cases, config.segments.head_percentile).context("eval")?;
            let mut out = std::io::stdout().lock();
            writeln!(
                out,
                "query\tcustomer\tfrequency\tspecificity\tfrequency_segment"
            )?;
            for (case, f) in cases.iter().zip(freq) {
                let spec = match specificity_segment(case, config.segments.entropy_threshold) {
                    Ok(Specificity::Specific) => "specific",
                    Ok(Specificity::General) => "general",
                    Err(_) => "-",
                };
                let f = match f {
                    Frequency::Head => "head",
                    Frequency::Tail => "tail",
                };
                let cust = case
                    .context
                    .as_ref()
                    .map_or("-", |c| c.customer_id.as_str());
                writeln!(
                    out,
                    "{}\t{cust}\t{}\t{spec}\t{f}",
                    case.query_text, case.query_frequency
                )?;
            }
            Ok(())
        }
    }
}

fn bench(config: &PipelineConfig, a: BenchArgs) -> Result<()> {
    let rows = bench_samplers(&a.sizes, a.bucket_size, &a.samplers, a.trials, config.seed)
        .context("bench")?;
    let csv = bench_csv(&rows);
    match a.out {
        Some(p) => {
            std::fs::write(&p, csv).with_context(|| format!("bench: writing {}", p.display()))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn experiment(mut config: PipelineConfig, a: ExperimentArgs) -> Result<()> {
    if let Some(out) = a.out {
        config.out_dir = out;
    }
    let report = run_from_config(&config)?;
    print!("{}", report.comparison_tsv());
    Ok(())
}
