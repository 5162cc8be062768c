//! Command-line front end.
//!
//! Every subcommand writes `manifest.json` into its output directory with
//! the arguments it ran with and SHA-256 hashes of what it produced.
//! Validation failures exit with status 1 and a `[module] message` line;
//! usage errors exit with status 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment;
use crate::densitymap::{make_density, save_grid, KernelSpec};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::imagedata::{self, create_dir, read_text, write_text, LabeledSample, PointAnnotation, RawImage, RgbImage, SplitRatios};
use crate::losses::classify_count;
use crate::network::checkpoint::Checkpoint;
use crate::network::{predict, ImageTensor, ModelConfig, TOTAL_STRIDE};
use crate::rankpairs::{self, PairSet, RankedPair, SubregionSpec};
use crate::synthgen::{self, SynthSpec};
use crate::trainer::{self, AblationConfig, AblationData, TrainConfig, TrainData, TrainStart};

pub const THREADS_ENV: &str = "SCHOOLCOUNT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "schoolcount", version, about = "Density-map fish counting: data, training, evaluation")]
pub struct Cli {
    /// Root seed; every subcommand derives its randomness from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled and unlabelled dataset.
    Synth(SynthArgs),
    /// Write ground-truth density grids for every labelled image.
    Densify(DensifyArgs),
    /// Build ranked pairs from the unlabelled frames.
    Pairs(PairsArgs),
    /// Expand the training split with annotation-preserving augmentation.
    Augment(AugmentArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Count fish in one image.
    Infer(InferArgs),
    /// Render evaluation and ablation CSVs as Markdown.
    Report(ReportArgs),
    /// Run the nine-way ablation.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (TOML or JSON).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub labelled: usize,
    #[arg(long, default_value_t = 500)]
    pub unlabelled: usize,
}

#[derive(Debug, Args)]
pub struct DensifyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 32)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of pairs to keep; defaults to all `6 * |U|`.
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Skip writing subregion PNGs.
    #[arg(long)]
    pub no_images: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Size of the augmented training set, originals included.
    #[arg(long, default_value_t = 1050)]
    pub target: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a `last.sckt` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Skip heat-map rendering.
    #[arg(long)]
    pub no_heatmaps: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Heat-map output path.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Print the count rounded to an integer.
    #[arg(long)]
    pub round: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `eval`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Ablation CSV.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
    /// Training history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Markdown output; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the trial count of the config.
    #[arg(long)]
    pub trials: Option<usize>,
}

/// Settings file of `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    /// Train on `augmented/<seed>/` instead of the plain training split.
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
    pub settings: serde_json::Value,
    /// Output-relative path to lowercase hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes `files`, relative to `root`, and writes `root/manifest.json`.
fn write_manifest(root: &Path, mut manifest: RunManifest, files: &[PathBuf]) -> Result<()> {
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
        manifest.artifacts.insert(rel, sha256_hex(&bytes));
    }
    create_dir(root)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&root.join("manifest.json"), &text)
}

fn manifest(sub: &str, seed: u64, config: Option<&Path>, inputs: &[&Path], output: &Path, settings: serde_json::Value) -> RunManifest {
    RunManifest {
        subcommand: sub.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: config.map(Path::to_path_buf),
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        output: output.to_path_buf(),
        settings,
        artifacts: BTreeMap::new(),
    }
}

/// Parses a settings file, TOML unless the extension is `.json`.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn unlabelled_root(data: &Path) -> PathBuf {
    data.join("unlabelled")
}

fn truth_path(data: &Path, id: &str) -> PathBuf {
    unlabelled_root(data).join("truth").join(format!("{id}.json"))
}

/// Hidden ground truth of an unlabelled frame written by `synth`.
pub fn read_hidden_points(data: &Path, id: &str) -> Result<Vec<PointAnnotation>> {
    let p = truth_path(data, id);
    serde_json::from_str(&read_text(&p)?).map_err(|e| Error::json(&p, e))
}

/// Split written by `synth` for `seed`.
pub fn load_split(data: &Path, seed: u64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>)> {
    let path = imagedata::split_path(data, seed);
    if !path.exists() {
        return Err(Error::Split(format!("{} not found; run `synth` with --seed {seed}", path.display())));
    }
    let split = imagedata::read_split(&path)?;
    Ok((imagedata::read_samples(data, &split.train)?, imagedata::read_samples(data, &split.val)?, imagedata::read_samples(data, &split.test)?))
}

fn cmd_synth(seed: u64, a: &SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_config(p)?,
        None => SynthSpec::default(),
    };
    spec.seed = seed;
    let ds = synthgen::generate_dataset(&spec, a.labelled, a.unlabelled)?;
    let mut files = Vec::new();
    for s in &ds.labelled {
        imagedata::write_sample(&a.out, s)?;
        files.push(imagedata::image_path(&a.out, s.id()));
        files.push(imagedata::annotation_path(&a.out, s.id()));
    }
    let ur = unlabelled_root(&a.out);
    if !ds.unlabelled.is_empty() {
        create_dir(&ur.join("truth"))?;
    }
    for u in &ds.unlabelled {
        imagedata::write_image(&ur, &u.image)?;
        let tp = truth_path(&a.out, &u.image.meta.source_id);
        write_text(&tp, &serde_json::to_string(&u.hidden_points).expect("points serialize"))?;
        files.push(imagedata::image_path(&ur, &u.image.meta.source_id));
        files.push(tp);
    }
    if ds.labelled.len() >= 3 {
        let ids: Vec<String> = ds.labelled.iter().map(|s| s.id().to_string()).collect();
        let strata: Vec<u32> = ds.labelled.iter().map(|s| classify_count(s.count() as f64) as u32).collect();
        let split = imagedata::split_dataset(&ids, &strata, SplitRatios::default(), seed)?;
        imagedata::write_split(&a.out, &split)?;
        files.push(imagedata::split_path(&a.out, seed));
    }
    let inputs: Vec<&Path> = a.spec.iter().map(PathBuf::as_path).collect();
    let settings = serde_json::json!({ "spec": spec, "labelled": a.labelled, "unlabelled": a.unlabelled });
    write_manifest(&a.out, manifest("synth", seed, a.spec.as_deref(), &inputs, &a.out, settings), &files)?;
    println!("wrote {} labelled and {} unlabelled frames to {}", ds.labelled.len(), ds.unlabelled.len(), a.out.display());
    Ok(())
}

fn cmd_densify(seed: u64, a: &DensifyArgs) -> Result<()> {
    let kernel = KernelSpec { size: a.kernel_size, sigma: a.sigma, stride: a.stride };
    let out = a.data.join("density");
    create_dir(&out)?;
    let mut files = Vec::new();
    let mut max_err = 0.0f64;
    for id in imagedata::list_ids(&a.data)? {
        let s = imagedata::read_sample(&a.data, &id)?;
        let map = make_density(&s.points, s.image.height(), s.image.width(), kernel)?;
        max_err = max_err.max((crate::densitymap::integrate_count(&map) - s.count() as f64).abs());
        let p = out.join(format!("{id}.scdm"));
        save_grid(&map, &p)?;
        files.push(p);
    }
    let settings = serde_json::json!({ "kernel_size": a.kernel_size, "sigma": a.sigma, "stride": a.stride });
    write_manifest(&out, manifest("densify", seed, None, &[&a.data], &out, settings), &files)?;
    println!("wrote {} density grids (max count deviation {max_err:.2e})", files.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub seed: u64,
    pub background: [u8; 3],
    pub sources: Vec<String>,
    pub specs: Vec<[SubregionSpec; 3]>,
    pub pairs: Vec<RankedPair>,
    /// Data-relative image paths of each pair, when images were written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<Vec<[String; 2]>>,
}

fn pairs_dir(data: &Path) -> PathBuf {
    data.join("pairs")
}

fn cmd_pairs(seed: u64, a: &PairsArgs) -> Result<()> {
    let ur = unlabelled_root(&a.data);
    let ids = imagedata::list_ids(&ur)?;
    let frames: Vec<RawImage> = ids.iter().map(|id| imagedata::read_image(&ur, id)).collect::<Result<_>>()?;
    let background = match load_split(&a.data, seed) {
        Ok((train, _, _)) => augment::background_median(&train),
        Err(_) => augment::background_median(&[]),
    };
    let n = a.n_pairs.unwrap_or(rankpairs::PAIRS_PER_SOURCE * frames.len());
    let set = rankpairs::generate_pairs(frames, n, background, seed)?;
    let dir = pairs_dir(&a.data);
    create_dir(&dir)?;
    let mut files = Vec::new();
    if !a.no_images {
        let img_dir = dir.join("images");
        create_dir(&img_dir)?;
        let mut used: Vec<(usize, usize)> = set.pairs.iter().flat_map(|p| [(p.source, p.first), (p.source, p.second)]).filter(|&(_, e)| e > 0).collect();
        used.sort_unstable();
        used.dedup();
        for (src, e) in used {
            let p = img_dir.join(format!("{}_e{e}.png", ids[src]));
            set.render(src, e).write_png(&p)?;
            files.push(p);
        }
    }
    let element_path = |src: usize, e: usize| {
        if e == 0 {
            format!("unlabelled/images/{}.png", ids[src])
        } else {
            format!("pairs/images/{}_e{e}.png", ids[src])
        }
    };
    let paths = (!a.no_images).then(|| set.pairs.iter().map(|p| [element_path(p.source, p.first), element_path(p.source, p.second)]).collect());
    let pm = PairManifest { seed, background, sources: ids.clone(), specs: set.specs.clone(), pairs: set.pairs.clone(), paths };
    let mp = dir.join("pairs.json");
    write_text(&mp, &serde_json::to_string_pretty(&pm).expect("pairs serialize"))?;
    files.push(mp);
    let settings = serde_json::json!({ "n_pairs": n });
    write_manifest(&dir, manifest("pairs", seed, None, &[&a.data], &dir, settings), &files)?;
    println!("wrote {} ranked pairs from {} frames", set.pairs.len(), set.sources.len());
    Ok(())
}

/// Pair set saved by `pairs`, with its source frames loaded.
pub fn load_pairs(data: &Path) -> Result<PairSet> {
    let mp = pairs_dir(data).join("pairs.json");
    if !mp.exists() {
        return Err(Error::Pairs(format!("{} not found; run `pairs` first", mp.display())));
    }
    let pm: PairManifest = serde_json::from_str(&read_text(&mp)?).map_err(|e| Error::json(&mp, e))?;
    let ur = unlabelled_root(data);
    let sources = pm.sources.iter().map(|id| imagedata::read_image(&ur, id)).collect::<Result<_>>()?;
    Ok(PairSet { sources, specs: pm.specs, pairs: pm.pairs, background: pm.background, seed: pm.seed })
}

fn augmented_root(data: &Path, seed: u64) -> PathBuf {
    data.join("augmented").join(seed.to_string())
}

fn cmd_augment(seed: u64, a: &AugmentArgs) -> Result<()> {
    let (train, _, _) = load_split(&a.data, seed)?;
    let out = augmented_root(&a.data, seed);
    let all = augment::augment_dataset(&train, a.target, seed)?;
    let mut files = Vec::new();
    for s in &all {
        imagedata::write_sample(&out, s)?;
        files.push(imagedata::image_path(&out, s.id()));
        files.push(imagedata::annotation_path(&out, s.id()));
    }
    let settings = serde_json::json!({ "target": a.target });
    write_manifest(&out, manifest("augment", seed, None, &[&a.data], &out, settings), &files)?;
    println!("wrote {} samples ({} augmented) to {}", all.len(), all.len() - train.len(), out.display());
    Ok(())
}

fn cmd_train(seed: u64, a: &TrainArgs) -> Result<()> {
    let mut tf: TrainFile = read_config(&a.config)?;
    tf.train.seed = seed;
    tf.model.validate()?;
    tf.train.validate()?;
    let (train, val, _) = load_split(&a.data, seed)?;
    let train = if tf.data.augmented {
        let root = augmented_root(&a.data, seed);
        if !root.exists() {
            return Err(Error::Config(format!("{} not found; run `augment` first", root.display())));
        }
        imagedata::read_samples(&root, &imagedata::list_ids(&root)?)?
    } else {
        train
    };
    for s in train.iter().chain(&val) {
        if (s.image.height(), s.image.width()) != tf.model.input_size {
            return Err(Error::Shape {
                expected: format!("{}x{} images", tf.model.input_size.0, tf.model.input_size.1),
                actual: format!("{} is {}x{}", s.id(), s.image.height(), s.image.width()),
            });
        }
    }
    let pairs = if tf.train.loss.use_rank { Some(load_pairs(&a.data)?) } else { None };
    let start = match &a.resume {
        Some(p) => TrainStart::Resume(Checkpoint::load(p, Some(&tf.model))?),
        None => TrainStart::Fresh,
    };
    create_dir(&a.out)?;
    let last_path = a.out.join("last.sckt");
    let best_path = a.out.join("best.sckt");
    let data = TrainData { train: &train, val: &val, pairs: pairs.as_ref().map(|p| p as &dyn rankpairs::PairSource) };
    let outcome = trainer::train_with(&tf.train, &tf.model, data, start, &mut |ck| {
        if let Some(h) = ck.meta.get("history").and_then(|h| h.as_array()).and_then(|h| h.last()) {
            eprintln!("epoch {} val_MAE {}", ck.epoch, h.get("val_mae").and_then(|v| v.as_f64()).unwrap_or(f64::NAN));
        }
        ck.save(&last_path)
    })?;
    outcome.last.save(&last_path)?;
    outcome.best_checkpoint().save(&best_path)?;
    let hp = a.out.join("history.csv");
    write_text(&hp, &trainer::history_csv(&outcome.history))?;
    let settings = serde_json::to_value(&tf).expect("config serializes");
    let files = [best_path.clone(), last_path, hp];
    write_manifest(&a.out, manifest("train", seed, Some(&a.config), &[&a.data], &a.out, settings), &files)?;
    println!(
        "best val MAE {:.4} at epoch {} ({} epochs run{}); checkpoint {}",
        outcome.best_val_mae,
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early { ", stopped early" } else { "" },
        best_path.display()
    );
    Ok(())
}

fn cmd_eval(seed: u64, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt, None)?;
    let (train, val, test) = load_split(&a.data, seed)?;
    let samples = match a.split.as_str() {
        "train" => train,
        "val" => val,
        "test" => test,
        other => return Err(Error::Config(format!("unknown split `{other}`; use train, val or test"))),
    };
    let predictions = evaluation::predict_samples(&ck.params, &samples)?;
    let mut files = Vec::new();
    if !a.no_heatmaps {
        let dir = a.out.join("heatmaps");
        create_dir(&dir)?;
        for (s, (r, out)) in samples.iter().zip(&predictions) {
            let p = dir.join(format!("{}.png", r.id));
            evaluation::render_heatmap(&evaluation::density_of(out), &s.image.pixels).write_png(&p)?;
            files.push(p);
        }
    }
    let report = evaluation::MetricsReport::from_results(predictions.into_iter().map(|(r, _)| r).collect())?;
    let rp = a.out.join("report.csv");
    let sp = a.out.join("summary.csv");
    evaluation::write_report_csv(&rp, &report.per_sample)?;
    evaluation::write_summary_csv(&sp, &report)?;
    files.push(rp);
    files.push(sp);
    let settings = serde_json::json!({ "split": a.split });
    write_manifest(&a.out, manifest("eval", seed, None, &[&a.ckpt, &a.data], &a.out, settings), &files)?;
    println!("MAE {:.4} RMSE {:.4} on {} {} samples", report.mae, report.rmse, report.per_sample.len(), a.split);
    if let Some(c) = report.correlation {
        println!("logvar vs |error|: r = {:.4}, one-tailed p = {:.3e}", c.r, c.p_one_tailed);
    }
    println!("{:.0}% of samples have 0 <= logvar < 1.7", 100.0 * report.logvar_low_share);
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt, None)?;
    let mut img = RgbImage::read_png(&a.image)?;
    if img.height() % TOTAL_STRIDE != 0 || img.width() % TOTAL_STRIDE != 0 {
        let (h, w) = ck.params.config.input_size;
        eprintln!("resizing {}x{} input to {h}x{w}", img.height(), img.width());
        img = imagedata::resize_pixels(&img, h, w);
    }
    let out = predict(&ck.params, &ImageTensor::from_rgb(&img))?;
    if a.round {
        println!("count\t{}", out.count().round());
    } else {
        println!("count\t{}", out.count());
    }
    println!("logvar\t{}", out.logvar());
    if let Some(p) = &a.heatmap {
        evaluation::render_heatmap(&evaluation::density_of(&out), &img).write_png(p)?;
        println!("heatmap\t{}", p.display());
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut md = String::new();
    if let Some(dir) = &a.eval {
        md.push_str("## Evaluation summary\n\n");
        md.push_str(&evaluation::csv_to_markdown(&dir.join("summary.csv"))?);
        md.push('\n');
    }
    if let Some(p) = &a.ablation {
        md.push_str("## Ablation\n\n");
        md.push_str(&evaluation::csv_to_markdown(p)?);
        md.push('\n');
    }
    if let Some(p) = &a.history {
        md.push_str("## Training history\n\n");
        md.push_str(&evaluation::csv_to_markdown(p)?);
        md.push('\n');
    }
    if md.is_empty() {
        return Err(Error::Config("nothing to report; pass --eval, --ablation or --history".into()));
    }
    print!("{md}");
    if let Some(p) = &a.out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_text(p, &md)?;
    }
    Ok(())
}

fn cmd_ablation(seed: u64, a: &AblationArgs) -> Result<()> {
    let mut cfg: AblationConfig = read_config(&a.config)?;
    cfg.seed = seed;
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    let (train, val, test) = load_split(&a.data, seed)?;
    let pairs = load_pairs(&a.data)?;
    let outcome = trainer::run_ablation_suite(&cfg, AblationData { train: &train, val: &val, test: &test, pairs: &pairs }, &mut |m| eprintln!("{m}"))?;
    create_dir(&a.out)?;
    let p = a.out.join("ablation.csv");
    write_text(&p, &outcome.table.to_csv())?;
    let settings = serde_json::to_value(&cfg).expect("config serializes");
    write_manifest(&a.out, manifest("ablation", seed, Some(&a.config), &[&a.data], &a.out, settings), &[p.clone()])?;
    print!("{}", outcome.table.to_csv());
    Ok(())
}

/// Sizes the global worker pool from `SCHOOLCOUNT_THREADS` (0 or unset
/// means one worker per core).
pub fn configure_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a non-negative integer")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(a) => cmd_synth(seed, a),
        Command::Densify(a) => cmd_densify(seed, a),
        Command::Pairs(a) => cmd_pairs(seed, a),
        Command::Augment(a) => cmd_augment(seed, a),
        Command::Train(a) => cmd_train(seed, a),
        Command::Eval(a) => cmd_eval(seed, a),
        Command::Infer(a) => cmd_infer(a),
        Command::Report(a) => cmd_report(a),
        Command::Ablation(a) => cmd_ablation(seed, a),
    }
}

/// Parses `argv`, runs it and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("[{}] {e}", e.module());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(dispatch(["schoolcount", "frobnicate"]), 2);
        assert_eq!(dispatch(["schoolcount", "synth", "--bogus"]), 2);
    }

    #[test]
    fn missing_input_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = dispatch(["schoolcount", "densify", "--data", dir.path().join("nope").to_str().unwrap()]);
        assert_eq!(code, 1);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn train_file_defaults() {
        let tf: TrainFile = toml::from_str("[train]\nepochs = 3\n[train.loss]\nuse_au = true\n").unwrap();
        assert_eq!(tf.train.epochs, 3);
        assert!(tf.train.loss.use_au);
        assert_eq!(tf.model, ModelConfig::default());
        assert!(toml::from_str::<TrainFile>("[train]\nepochz = 3\n").is_err());
    }
}
