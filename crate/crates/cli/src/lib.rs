//! The `davr` command line.

pub mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use davr_core::data::{generate_synthetic_domains, load_dataset_index, DatasetIndex, Layout, SyntheticSpec};
use davr_core::embedding::{read_embeddings, write_embeddings};
use davr_core::metrics::{evaluate, vehicleid_multi_trial_eval, EvalReport, Protocol};
use davr_core::train::{
    embed_index, load_attnet, load_checkpoint, train_dan, train_reid, translate_dataset, DataSource, Direction, Stage,
    TrainConfig,
};

pub const DATA_ROOT_ENV: &str = "DAVR_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "davr", version, about = "Cross-domain vehicle re-identification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic two-domain corpus.
    Synth(SynthArgs),
    /// Train the translation network on unlabeled source and target images.
    TrainDan(TrainArgs),
    /// Translate a dataset with a trained translation checkpoint.
    Translate(TranslateArgs),
    /// Train the re-identification network on a labeled index.
    TrainReid(TrainArgs),
    /// Score query embeddings against gallery embeddings.
    Eval(EvalArgs),
    /// Write retrieval embeddings of an index.
    ExportEmbeddings(ExportArgs),
    /// Draw CMC curves of one or more evaluation reports.
    PlotCmc(PlotArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    ids: usize,
    #[arg(long, default_value_t = 8)]
    per_id: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// The full-scale recipe.
    Full,
    /// Reduced widths and 32x32 images for CPU runs.
    Smoke,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set dan.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index JSON or dataset root of the images to translate.
    #[arg(long)]
    index: PathBuf,
    #[arg(long, value_enum, default_value = "source-to-target")]
    direction: DirectionArg,
    /// Config the checkpoint is expected to have been trained with.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    SourceToTarget,
    TargetToSource,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Plain,
    VeriCrossCamera,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Query embeddings (`.bin` with its `.json` sidecar).
    #[arg(long)]
    query: PathBuf,
    /// Gallery embeddings; omit together with `--vehicleid-test-size`.
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "plain")]
    protocol: ProtocolArg,
    /// Run the multi-trial random-gallery protocol on `--query` alone.
    #[arg(long)]
    vehicleid_test_size: Option<usize>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Output `.bin`; the sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Report JSON; repeatable.
    #[arg(long = "report", required = true)]
    reports: Vec<PathBuf>,
    /// Output PNG; the CSV twin gets the same stem.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` and runs the subcommand: 0 on success, 1 on usage
/// errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::TrainDan(a) => train(a, Stage::Dan),
        Command::Translate(a) => translate(a),
        Command::TrainReid(a) => train(a, Stage::Reid),
        Command::Eval(a) => eval(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::PlotCmc(a) => {
            let reports = a
                .reports
                .iter()
                .map(|p| {
                    let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok((name, EvalReport::read_json(p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            plot::plot_cmc(&reports, &a.out)?;
            println!("wrote {} and {}", a.out.display(), a.out.with_extension("csv").display());
            Ok(())
        }
    }
}

/// Relative paths are taken under `$DAVR_DATA_ROOT` when it is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() && !path.exists() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_index(path: &Path, layout: Option<&Layout>) -> Result<DatasetIndex> {
    let path = resolve_data_path(path);
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(DatasetIndex::read_json(&path)?);
    }
    let report = load_dataset_index(&path, layout.unwrap_or(&Layout::Flat))?;
    if !report.skipped.is_empty() {
        log::warn!("skipped {} unrecognized files under {}", report.skipped.len(), path.display());
    }
    Ok(report.index)
}

fn load_source(source: Option<&DataSource>, what: &str) -> Result<DatasetIndex> {
    let Some(src) = source else { bail!("no {what} dataset configured; set data.{what}.path") };
    load_index(&src.path, src.layout.as_ref())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec::new(a.ids, a.per_id, a.size, a.seed);
    let (source, target) = generate_synthetic_domains(&spec, &a.out)?;
    println!("wrote {} source and {} target images under {}", source.len(), target.len(), a.out.join("synth").display());
    Ok(())
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|kv| {
            let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
            Ok((k.trim().to_string(), v.to_string()))
        })
        .collect()
}

fn build_config(a: &TrainArgs, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match (stage, a.preset) {
        (Stage::Dan, Preset::Full) => TrainConfig::dan_default(),
        (Stage::Dan, Preset::Smoke) => TrainConfig::dan_smoke(),
        (Stage::Reid, Preset::Full) => TrainConfig::reid_default(),
        (Stage::Reid, Preset::Smoke) => TrainConfig::reid_smoke(),
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let doc: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg = cfg.overlay(&doc).with_context(|| format!("applying {}", path.display()))?;
    }
    cfg = cfg.with_overrides(&parse_overrides(&a.overrides)?)?;
    if let Some(out) = &a.out {
        cfg.checkpoint_dir = out.clone();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if cfg.stage != stage {
        bail!("config stage is {:?} but this command trains {stage:?}", cfg.stage);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, stage: Stage) -> Result<()> {
    let cfg = build_config(&a, stage)?;
    log::info!("effective config: {}", cfg.to_json());
    let history = match stage {
        Stage::Dan => {
            let source = load_source(cfg.data.source.as_ref(), "source")?;
            let target = load_source(cfg.data.target.as_ref(), "target")?;
            train_dan(&cfg, &source.unlabeled(), &target.unlabeled())?.checkpoint.history
        }
        Stage::Reid => train_reid(&cfg, &load_source(cfg.data.source.as_ref(), "source")?)?.checkpoint.history,
    };
    for r in &history {
        println!("epoch {} total {:.6}", r.epoch, r.losses.get("total").copied().unwrap_or(f64::NAN));
    }
    println!("checkpoints in {}", cfg.checkpoint_dir.display());
    Ok(())
}

fn translate(a: TranslateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        ckpt.verify_config(&TrainConfig::dan_default().overlay(&doc)?, a.force)?;
    }
    let index = load_index(&a.index, None)?;
    let direction = match a.direction {
        DirectionArg::SourceToTarget => Direction::SourceToTarget,
        DirectionArg::TargetToSource => Direction::TargetToSource,
    };
    let out = translate_dataset(&ckpt, &index, direction, &a.out)?;
    println!("translated {} images into {}", out.len(), a.out.join("translated").join(direction.as_str()).display());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let net = load_attnet(&load_checkpoint(&a.checkpoint)?)?;
    let index = load_index(&a.index, None)?;
    let emb = embed_index(&net, &index, a.batch_size)?;
    write_embeddings(&a.out, &emb, &index.records)?;
    println!("wrote {} x {} embeddings to {}", emb.rows(), emb.dim(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (q, q_records) = read_embeddings(&a.query)?;
    let report = match (a.vehicleid_test_size, &a.gallery) {
        (Some(size), None) => {
            let index = DatasetIndex::new(davr_core::data::Split::Gallery, q_records);
            vehicleid_multi_trial_eval(&index, &q, size, a.trials, a.seed)?
        }
        (None, Some(gallery)) => {
            let (g, g_records) = read_embeddings(gallery)?;
            let protocol = match a.protocol {
                ProtocolArg::Plain => Protocol::Plain,
                ProtocolArg::VeriCrossCamera => Protocol::VeriCrossCamera,
            };
            evaluate(&q_records, &g_records, &q, &g, protocol)?
        }
        _ => bail!("pass either --gallery or --vehicleid-test-size"),
    };
    println!(
        "mAP={:.4} rank1={:.4} rank5={:.4} queries={} gallery={} skipped={}",
        report.map,
        report.rank(1),
        report.rank(5),
        report.num_queries,
        report.num_gallery,
        report.num_skipped
    );
    if let Some(out) = &a.out {
        report.write_json(out)?;
        fs::write(out.with_extension("csv"), report.cmc_csv()).with_context(|| "writing CMC csv")?;
    }
    Ok(())
}
