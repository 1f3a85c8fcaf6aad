use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use fsce_core::ablation::{consistency_grid, run_ablation, temperature_width_grid, AblationCell, CellMetrics};
use fsce_core::data::{build_kshot_split, generate_synthetic, load_dataset, save_dataset, DetectionDataset, ShapeKind};
use fsce_core::detector::{self, load_checkpoint, save_checkpoint, DetectorState, StepLosses};
use fsce_core::eval::{self, cluster_statistics, coco_thresholds, read_embeddings_csv, write_embeddings_csv, Interpolation};
use serde_json::json;

use crate::config::{RunConfig, Variant};
use crate::manifest::Manifest;
use crate::{plot as render, ConfigArgs, OUTPUT_ROOT_ENV};

/// Joins a relative output path onto the output root when one is set.
fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn output_dir(p: &Path) -> Result<PathBuf> {
    let dir = output_path(p);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn require(p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("path does not exist: {}", p.display());
    }
    Ok(())
}

fn load_data(p: &Path) -> Result<DetectionDataset> {
    require(p)?;
    load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))
}

fn load_model(p: &Path) -> Result<DetectorState> {
    require(p)?;
    load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn write_text(dir: &Path, name: &str, text: &str, manifest: &mut Manifest) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.artifacts.push(name.to_string());
    Ok(())
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let named = [
        ("seed", &args.seed),
        ("cpe.temperature", &args.cpe_temperature),
        ("cpe.phi", &args.cpe_phi),
        ("cpe.reweight", &args.cpe_reweight),
        ("cpe.lambda", &args.cpe_lambda),
        ("detector.steps", &args.detector_steps),
        ("finetune.steps", &args.finetune_steps),
        ("finetune.variant", &args.finetune_variant),
        ("finetune.contrast_dim", &args.finetune_contrast_dim),
    ];
    let mut overrides: Vec<(String, String)> = named
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(p) = &args.config {
        require(p)?;
    }
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn class_ids(dataset: &DetectionDataset, names: &str) -> Result<Vec<u32>> {
    names
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|n| Ok(dataset.registry.id_by_name(n)?))
        .collect()
}

fn losses_jsonl(log: &[StepLosses]) -> Result<String> {
    let mut out = String::new();
    for l in log {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 500)]
    images: usize,
    /// Uses the first N shape classes.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated class names marked novel, e.g. `ring,cross`.
    #[arg(long, default_value = "")]
    novel: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    if a.classes < 2 || a.classes > ShapeKind::ALL.len() {
        bail!("--classes must be in 2..={}, got {}", ShapeKind::ALL.len(), a.classes);
    }
    let mut ds = generate_synthetic(a.images, &ShapeKind::ALL[..a.classes], a.image_size, a.seed)?;
    let novel = class_ids(&ds, &a.novel)?;
    let reg = ds.registry.clone().with_novel(&novel)?;
    ds = ds.with_registry(reg)?;
    let dir = output_dir(&a.out)?;
    save_dataset(&ds, &dir)?;
    let mut m = Manifest::new("generate", a.seed, json!({"images": a.images, "classes": a.classes, "image_size": a.image_size, "novel": novel}));
    m.artifacts.push("dataset".into());
    m.write(&dir)?;
    println!("wrote {} images to {}", ds.len(), dir.display());
    Ok(())
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    /// Comma-separated novel class names.
    #[arg(long)]
    novel: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn split(a: SplitArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let novel = class_ids(&ds, &a.novel)?;
    let split = build_kshot_split(&ds, &novel, a.k, a.seed)?;
    let dir = output_dir(&a.out)?;
    save_dataset(&split.dataset, &dir)?;
    let mut m = Manifest::new("split", a.seed, json!({"k": a.k, "novel": novel}));
    m.input("data", &a.data)?;
    m.artifacts.push("dataset".into());
    m.write(&dir)?;
    for (c, n) in &split.per_class_counts {
        println!("{} {n}", split.dataset.registry.name(*c));
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainBaseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn train_base(a: TrainBaseArgs) -> Result<()> {
    let cfg = run_config(&a.config)?;
    let ds = load_data(&a.data)?;
    let outcome = detector::train_base(&ds.base_only(), &cfg.detector, cfg.seed)?;
    let dir = output_dir(&a.out)?;
    save_checkpoint(&outcome.state, &dir.join("model.ckpt"))?;
    let mut m = Manifest::new("train-base", cfg.seed, serde_json::to_value(&cfg)?);
    write_text(&dir, "config.txt", &cfg.to_text(), &mut m)?;
    m.input("data", &a.data)?;
    m.artifacts.push("model.ckpt".into());
    write_text(&dir, "train_log.jsonl", &losses_jsonl(outcome.log())?, &mut m)?;
    m.write(&dir)?;
    if let Some(last) = outcome.log().last() {
        println!("step {} total loss {:.4}", last.step, last.total);
    }
    println!("wrote {}", dir.join("model.ckpt").display());
    Ok(())
}

#[derive(Args)]
pub struct FinetuneArgs {
    /// Base-stage checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Balanced K-shot dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = run_config(&a.config)?;
    let base = load_model(&a.base)?;
    let ds = load_data(&a.data)?;
    let det = cfg.finetune_detector(&base.config);
    let outcome = detector::fine_tune(&base, &ds, &det, &cfg.cpe, cfg.seed)?;
    let dir = output_dir(&a.out)?;
    save_checkpoint(&outcome.state, &dir.join("model.ckpt"))?;
    let mut m = Manifest::new("finetune", cfg.seed, serde_json::to_value(&cfg)?);
    write_text(&dir, "config.txt", &cfg.to_text(), &mut m)?;
    m.input("base", &a.base)?;
    m.input("data", &a.data)?;
    m.extra(
        "strong_baseline",
        cfg.finetune.variant == Variant::Strong && !cfg.cpe.is_enabled(),
    );
    m.extra("contrastive", cfg.cpe.is_enabled());
    m.extra("detector", serde_json::to_value(&det)?);
    m.artifacts.push("model.ckpt".into());
    write_text(&dir, "train_log.jsonl", &losses_jsonl(outcome.log())?, &mut m)?;
    m.write(&dir)?;
    println!("wrote {}", dir.join("model.ckpt").display());
    Ok(())
}

fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    if s == "coco" {
        return Ok(coco_thresholds());
    }
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad IoU threshold `{t}`")))
        .collect()
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `coco` for 0.50:0.05:0.95 or a comma-separated list.
    #[arg(long, default_value = "coco")]
    thresholds: String,
    #[arg(long, default_value = "all-point")]
    interpolation: Interpolation,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let state = load_model(&a.model)?;
    let ds = load_data(&a.data)?;
    let report = eval::evaluate(&state, &ds, &parse_thresholds(&a.thresholds)?, a.interpolation)?;
    let dir = output_dir(&a.out)?;
    let mut m = Manifest::new("evaluate", state.seed, json!({"thresholds": report.thresholds, "interpolation": a.interpolation}));
    m.input("model", &a.model)?;
    m.input("data", &a.data)?;
    let text = report.to_key_value();
    write_text(&dir, "report.txt", &text, &mut m)?;
    write_text(&dir, "report.json", &(serde_json::to_string_pretty(&report)? + "\n"), &mut m)?;
    m.write(&dir)?;
    print!("{text}");
    Ok(())
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Adds proposal statistics of this model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Post-NMS proposal cap; defaults to the model's.
    #[arg(long)]
    proposal_cap: Option<usize>,
    /// Writes `stats.json` here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let counts = ds.instance_counts();
    let mut text = format!("images {}\n", ds.len());
    let mut per_class = serde_json::Map::new();
    for (c, n) in &counts {
        let info = ds.registry.get(*c).expect("registered");
        writeln!(text, "instances.{} {n} {}", info.shape, info.partition)?;
        per_class.insert(info.shape.to_string(), json!({"instances": n, "partition": info.partition}));
    }
    let mut out = json!({"images": ds.len(), "classes": per_class});
    let mut seed = 0;
    if let Some(p) = &a.model {
        let state = load_model(p)?;
        seed = state.seed;
        let mut cfg = state.config.clone();
        if let Some(cap) = a.proposal_cap {
            cfg.rpn_post_nms_cap = cap;
        }
        cfg.validate()?;
        if ds.image_size() != Some(cfg.image_size) {
            bail!("dataset images are not {}x{}", cfg.image_size, cfg.image_size);
        }
        let s = detector::collect_stats(&state, &ds, &cfg);
        writeln!(text, "proposal_cap {}", cfg.rpn_post_nms_cap)?;
        writeln!(text, "mean_positive_anchors {:.4}", s.mean_positive_anchors)?;
        writeln!(text, "mean_foreground_proposals {:.4}", s.mean_foreground_proposals)?;
        out["proposal_cap"] = json!(cfg.rpn_post_nms_cap);
        out["proposals"] = serde_json::to_value(&s)?;
    }
    if let Some(o) = &a.out {
        let dir = output_dir(o)?;
        let mut m = Manifest::new("stats", seed, json!({"proposal_cap": a.proposal_cap}));
        m.input("data", &a.data)?;
        if let Some(p) = &a.model {
            m.input("model", p)?;
        }
        write_text(&dir, "stats.json", &(serde_json::to_string_pretty(&out)? + "\n"), &mut m)?;
        m.write(&dir)?;
    }
    print!("{text}");
    Ok(())
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    max_images: usize,
    /// Seeds the image order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn export_embeddings(a: ExportArgs) -> Result<()> {
    let state = load_model(&a.model)?;
    let ds = load_data(&a.data)?;
    let rows = eval::export_embeddings(&state, &ds, a.max_images, a.seed)?;
    let dir = output_dir(&a.out)?;
    let mut m = Manifest::new("export-embeddings", a.seed, json!({"max_images": a.max_images}));
    m.input("model", &a.model)?;
    m.input("data", &a.data)?;
    write_embeddings_csv(&rows, state.config.contrast_dim, &dir.join("embeddings.csv"))?;
    m.artifacts.push("embeddings.csv".into());
    let clusters = cluster_statistics(&rows)?;
    write_text(&dir, "clusters.json", &(serde_json::to_string_pretty(&clusters)? + "\n"), &mut m)?;
    m.write(&dir)?;
    let novel = ds.registry.novel_ids();
    println!("rows {}", rows.len());
    if let Some(w) = clusters.mean_within(&novel) {
        println!("within_novel {w:.4}");
    }
    println!("cross {:.4}", clusters.cross);
    Ok(())
}

/// `tau:dim:phi:g` cells separated by `;`.
fn parse_cells(s: &str) -> Result<Vec<AblationCell>> {
    s.split(';')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|c| {
            let f: Vec<&str> = c.split(':').collect();
            if f.len() != 4 {
                bail!("ablation cell `{c}` must be tau:dim:phi:g");
            }
            Ok(AblationCell {
                temperature: f[0].parse().with_context(|| format!("bad temperature in `{c}`"))?,
                contrast_dim: f[1].parse().with_context(|| format!("bad width in `{c}`"))?,
                phi: f[2].parse().with_context(|| format!("bad phi in `{c}`"))?,
                reweight: f[3].parse()?,
            })
        })
        .collect()
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    base: PathBuf,
    /// Balanced K-shot dataset.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `temperature-width`, `consistency`, or explicit cells `tau:dim:phi:g;...` (empty for none).
    #[arg(long, default_value = "temperature-width")]
    grid: String,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = run_config(&a.config)?;
    let cells = match a.grid.as_str() {
        "temperature-width" => temperature_width_grid(),
        "consistency" => consistency_grid(),
        other => parse_cells(other)?,
    };
    let base = load_model(&a.base)?;
    let train = load_data(&a.data)?;
    let test = load_data(&a.test)?;
    let table = run_ablation(&cells, &a.seeds, |cell: &AblationCell, seed| {
        let mut run = cfg.clone();
        run.finetune.contrast_dim = Some(cell.contrast_dim);
        let det = run.finetune_detector(&base.config);
        let state = detector::fine_tune(&base, &train, &det, &cell.cpe_config(cfg.cpe.lambda), seed)?.state;
        let r = eval::evaluate(&state, &test, &coco_thresholds(), Interpolation::AllPoint)?;
        Ok(CellMetrics {
            nap50: r.nap50.unwrap_or(0.0),
            nap75: r.nap75.unwrap_or(0.0),
            nap: r.nap.unwrap_or(0.0),
        })
    });
    let dir = output_dir(&a.out)?;
    let mut m = Manifest::new("ablate", cfg.seed, serde_json::to_value(&cfg)?);
    write_text(&dir, "config.txt", &cfg.to_text(), &mut m)?;
    m.input("base", &a.base)?;
    m.input("data", &a.data)?;
    m.input("test", &a.test)?;
    m.extra("seeds", a.seeds.clone());
    let text = table.to_text();
    write_text(&dir, "ablation.txt", &text, &mut m)?;
    write_text(&dir, "ablation.json", &(table.to_json()? + "\n"), &mut m)?;
    m.write(&dir)?;
    print!("{text}");
    Ok(())
}

#[derive(Args)]
pub struct PlotArgs {
    /// CSV written by `export-embeddings`.
    #[arg(long)]
    embeddings: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    size: u32,
}

pub fn plot(a: PlotArgs) -> Result<()> {
    require(&a.embeddings)?;
    let rows = read_embeddings_csv(&a.embeddings)?;
    let path = output_path(&a.out);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    render::embedding_scatter(&rows, a.size, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
