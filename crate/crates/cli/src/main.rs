//! `mrcl`: data generation, descriptor inspection, training, evaluation and
//! export.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical divergence. Failures print one `error: ...` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mrcl_core::config::RunConfig;
use mrcl_core::corpus::read_scene;
use mrcl_core::eval::{mean_top1, ExportMode};
use mrcl_core::force::{symmetric_force_banner, ForceConfig};
use mrcl_core::graph::build_graph;
use mrcl_core::pipeline;
use mrcl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mrcl", version, about = "Multi-hop relational contrastive learning on synthetic scenes")]
struct Cli {
    /// Worker threads for data preparation and evaluation.
    #[arg(long, global = true, env = "MRCL_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus.
    GenData(GenDataArgs),
    /// Print the symmetric force banner of one object pair.
    Sfb(SfbArgs),
    /// Print the scene graph of one scene.
    Graph(GraphArgs),
    /// Train encoders on a corpus.
    Train(TrainArgs),
    /// Content-based graph retrieval on the validation split.
    EvalCbgr(ModelArgs),
    /// Linear-probe spatial relation recognition.
    ProbeSrr(ModelArgs),
    /// Export object, path or graph embeddings for every scene.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// `W` or `WxH`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    objects_min: Option<usize>,
    #[arg(long)]
    objects_max: Option<usize>,
    /// Run config; only its `[data]` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace an existing corpus in `--out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SfbArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    i: usize,
    #[arg(long)]
    j: usize,
    #[arg(long, default_value_t = 64)]
    theta_bins: usize,
    /// Comma-separated force levels.
    #[arg(long, default_value = "0,2")]
    levels: String,
}

#[derive(Args)]
struct GraphArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-scene banner caches.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// object, path or graph.
    #[arg(long)]
    mode: String,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--grid expects W or WxH, got {s:?}"));
    match s.split_once('x') {
        Some((w, h)) => Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?)),
        None => {
            let n = s.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn parse_levels(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("--levels expects integers, got {s:?}"))))
        .collect()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut data = load_config(a.config.as_deref())?.data;
    if let Some(g) = &a.grid {
        (data.grid_width, data.grid_height) = parse_grid(g)?;
    }
    if let Some(v) = a.objects_min {
        data.objects_min = v;
    }
    if let Some(v) = a.objects_max {
        data.objects_max = v;
    }
    let m = pipeline::gen_data(&a.out, a.seed, a.count, &data, a.force)?;
    println!("corpus_hash = {}", m.corpus_hash);
    Ok(())
}

fn sfb(a: SfbArgs) -> Result<()> {
    let scene = read_scene(&a.scene)?;
    let cfg = ForceConfig::new(a.theta_bins, &parse_levels(&a.levels)?);
    cfg.validate()?;
    let n = scene.objects.len();
    if a.i >= n || a.j >= n {
        return Err(Error::Config(format!("object ids must be < {n}")));
    }
    let (i, j) = (a.i.min(a.j), a.i.max(a.j));
    let banner = symmetric_force_banner(&scene.objects[i].mask, &scene.objects[j].mask, &cfg)?;
    print!("{}", banner.dump());
    Ok(())
}

fn graph(a: GraphArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let scene = read_scene(&a.scene)?;
    print!("{}", build_graph(&scene, &cfg.force, &cfg.graph)?.dump());
    Ok(())
}

fn workspace(c: &CommonArgs) -> Result<(RunConfig, pipeline::Workspace)> {
    let cfg = load_config(c.config.as_deref())?;
    pipeline::prepare_output(&c.out, c.force)?;
    let ws = pipeline::load_workspace(&c.corpus, &cfg, c.cache.as_deref())?;
    Ok((cfg, ws))
}

fn train(a: TrainArgs) -> Result<()> {
    let (cfg, ws) = workspace(&a.common)?;
    let out = pipeline::run_train(&ws, &cfg, &a.common.out)?;
    if let Some(last) = out.history.last() {
        println!("final_train_total = {:.6}", last.train.total);
    }
    println!("checkpoint = {}", a.common.out.join(pipeline::MODEL_FILE).display());
    Ok(())
}

fn eval_cbgr(a: ModelArgs) -> Result<()> {
    let (cfg, ws) = workspace(&a.common)?;
    let params = pipeline::load_model(&a.checkpoint, &ws.spec)?;
    for r in pipeline::run_eval_cbgr(&ws, &cfg, &params, &a.common.out)? {
        println!("{} = {:.6}", r.method, r.mean_ndcg);
    }
    Ok(())
}

fn probe_srr(a: ModelArgs) -> Result<()> {
    let (cfg, ws) = workspace(&a.common)?;
    let params = pipeline::load_model(&a.checkpoint, &ws.spec)?;
    let r = pipeline::run_probe_srr(&ws, &cfg, &params, &a.common.out)?;
    println!("mrcl_top1 = {:.6}", mean_top1(&r.reports, "mrcl"));
    println!("untrained_top1 = {:.6}", mean_top1(&r.reports, "untrained"));
    println!("majority = {:.6}", r.majority);
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let mode = ExportMode::parse(&a.mode)?;
    let (cfg, ws) = workspace(&a.model.common)?;
    let params = pipeline::load_model(&a.model.checkpoint, &ws.spec)?;
    let t = pipeline::run_export(&ws, &cfg, &params, mode, &a.model.common.out)?;
    println!("rows = {}", t.rows.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Sfb(a) => sfb(a),
        Command::Graph(a) => graph(a),
        Command::Train(a) => train(a),
        Command::EvalCbgr(a) => eval_cbgr(a),
        Command::ProbeSrr(a) => probe_srr(a),
        Command::Export(a) => export(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRCL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
