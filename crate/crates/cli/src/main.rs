//! Command-line entry points wiring the whole pipeline into reproducible
//! experiments: benchmark generation, training, evaluation, ablations, and
//! multi-run reports.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use coseg_core::datagen::{
    build_cdssdg_split, DatasetManifest, RecordSource, SceneSpec, Split,
};
use coseg_core::evaluate::{aggregate_runs, evaluate_domain, write_dsc_bar_chart, MetricResult};
use coseg_core::trainer::{
    checkpoint_summary, load_checkpoint, materialize, run_training, save_image, save_mask,
    TrainConfig, Variant,
};
use coseg_core::CosegError;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "coseg",
    about = "Cross-domain semi-supervised segmentation: synthetic benchmarks, co-training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain benchmark and its manifest.
    GenData(GenDataArgs),
    /// Train the co-trained model pair on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest's target domain.
    Eval(EvalArgs),
    /// Train several variants over several seeds and tabulate target DSC.
    Ablate(AblateArgs),
    /// Merge evaluation CSVs into mean/std tables and bar charts.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (defaults under COSEG_OUT_ROOT or ./coseg-out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of source domains.
    #[arg(long, default_value_t = 3)]
    domains: usize,
    /// Images per domain (sources and target alike).
    #[arg(long, default_value_t = 80)]
    per_domain: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0.2)]
    labeled_ratio: f64,
    /// Keep records as generation seeds instead of materializing PNGs.
    #[arg(long, default_value_t = false)]
    seeds_only: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest produced by gen-data (or a folder-dataset manifest).
    #[arg(long)]
    manifest: PathBuf,
    /// Preset: desk, fundus, polyp, or scgm.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML config overriding the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant: full, cps_only, cps+cfs, cps+aux, symmetric_loc,
    /// symmetric_rot.
    #[arg(long)]
    variant: Option<String>,
    /// Resolve and write the configuration, then exit without training.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Comma-separated variant list.
    #[arg(long, default_value = "full,cps_only")]
    variants: String,
    /// Seeds per variant.
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation CSVs produced by `coseg eval`.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Report(args) => cmd_report(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        let code = err
            .downcast_ref::<CosegError>()
            .map(CosegError::exit_code)
            .unwrap_or(1);
        std::process::exit(code);
    }
}

fn out_dir(explicit: Option<PathBuf>, command: &str) -> anyhow::Result<PathBuf> {
    let dir = explicit.unwrap_or_else(|| {
        let root = std::env::var("COSEG_OUT_ROOT").unwrap_or_else(|_| "coseg-out".into());
        Path::new(&root).join(command)
    });
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Source domains A, B, C, ...; the letter T is reserved for the target.
fn default_domains(n: usize) -> anyhow::Result<Vec<String>> {
    if n == 0 || n > 19 {
        return Err(CosegError::Config(format!(
            "domain count {n} outside 1..=19"
        ))
        .into());
    }
    Ok((0..n)
        .map(|i| char::from(b'A' + i as u8).to_string())
        .collect())
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let dir = out_dir(args.out, "gen-data")?;
    let scene = SceneSpec {
        image_side: args.side,
        ..SceneSpec::default()
    };
    let domains = default_domains(args.domains)?;
    let mut manifest = build_cdssdg_split(
        &domains,
        args.per_domain,
        &domains[0],
        args.labeled_ratio,
        "T",
        scene,
        args.seed,
    )?;

    if !args.seeds_only {
        let pre_materialize = manifest.clone();
        for record in &mut manifest.records {
            let RecordSource::Seed(s) = record.source else {
                continue;
            };
            let rel_img = Path::new(&record.domain)
                .join("images")
                .join(format!("s{s:016x}.png"));
            record.source = RecordSource::Path(rel_img);
        }
        // materialize pixels from the original seed records
        let pool_manifest = pre_materialize;
        for record in &pool_manifest.records {
            let RecordSource::Seed(s) = record.source else {
                continue;
            };
            let scene = pool_manifest.scene.as_ref().expect("synthetic manifest");
            let (img, mask) = coseg_core::datagen::generate_scene::<f32>(scene, s)?;
            let style = &pool_manifest.styles[&record.domain];
            let img = coseg_core::datagen::apply_domain_style(
                &img,
                style,
                coseg_core::rng::derive_seed(s, "record-style", 0),
            )?;
            let img_path = dir
                .join(&record.domain)
                .join("images")
                .join(format!("s{s:016x}.png"));
            let mask_path = dir
                .join(&record.domain)
                .join("masks")
                .join(format!("s{s:016x}.png"));
            std::fs::create_dir_all(img_path.parent().expect("parent"))?;
            std::fs::create_dir_all(mask_path.parent().expect("parent"))?;
            save_image(&img, &img_path)?;
            save_mask(&mask, &mask_path)?;
        }
    }

    let provenance = vec![format!(
        "version={} seed={} generator=gen-data",
        env!("CARGO_PKG_VERSION"),
        args.seed
    )];
    let manifest_path = dir.join("manifest.tsv");
    manifest.save(&manifest_path, &provenance)?;
    println!(
        "wrote {} ({} records: {} labeled, {} unlabeled, {} target)",
        manifest_path.display(),
        manifest.records.len(),
        manifest.count(Split::Labeled),
        manifest.count(Split::Unlabeled),
        manifest.count(Split::Target),
    );
    Ok(())
}

fn resolve_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CosegError::io(path.clone(), e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::preset(&args.preset)?,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &args.variant {
        cfg.variant = Variant::parse(v)?;
    }
    let cfg = cfg.normalized();
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved_config(cfg: &TrainConfig, dir: &Path) -> anyhow::Result<PathBuf> {
    let path = dir.join("resolved_config.toml");
    let mut text = String::new();
    let _ = writeln!(
        text,
        "# version={} config-sha256={} seed={}",
        env!("CARGO_PKG_VERSION"),
        cfg.config_hash(),
        cfg.seed
    );
    text.push_str(&cfg.to_toml());
    std::fs::write(&path, text).map_err(|e| CosegError::io(&path, e))?;
    Ok(path)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&args)?;
    if !args.manifest.is_file() {
        return Err(CosegError::Config(format!(
            "manifest {} not found",
            args.manifest.display()
        ))
        .into());
    }
    let manifest = DatasetManifest::load(&args.manifest)?;
    let dir = out_dir(args.out, "train")?;
    let cfg_path = write_resolved_config(&cfg, &dir)?;
    println!("resolved config -> {}", cfg_path.display());
    if args.dry_run {
        return Ok(());
    }

    let manifest_dir = args.manifest.parent().map(Path::to_path_buf);
    let artifacts = run_training::<f32>(
        &cfg,
        &manifest,
        manifest_dir.as_deref(),
        Some(dir.as_path()),
    )?;

    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "# version={} config-sha256={} seed={}",
        env!("CARGO_PKG_VERSION"),
        cfg.config_hash(),
        cfg.seed
    );
    let _ = writeln!(summary, "epochs\t{}", cfg.epochs);
    let _ = writeln!(summary, "variant\t{}", cfg.variant.as_str());
    if let Some(last) = artifacts.epoch_metrics.last() {
        let _ = writeln!(summary, "final_mean_total_loss\t{}", last.mean_loss.total);
        for (c, d) in last.val_dsc.iter().enumerate() {
            let _ = writeln!(summary, "final_val_dsc_c{c}\t{d}");
        }
    }
    std::fs::write(dir.join("summary.txt"), summary)
        .map_err(|e| CosegError::io(dir.join("summary.txt"), e))?;
    println!(
        "training complete: {} steps logged, checkpoints in {}",
        artifacts.step_log.len(),
        dir.display()
    );
    Ok(())
}

fn eval_checkpoint_on_target(
    checkpoint: &Path,
    manifest_path: &Path,
) -> anyhow::Result<(MetricResult, u64, String, DatasetManifest)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    // refuse leaked targets before touching the model
    for r in &manifest.records {
        if r.domain == manifest.target_domain && r.split != Split::Target {
            return Err(CosegError::Config(
                "target domain leaked into a training split; refusing to evaluate".into(),
            )
            .into());
        }
    }
    let (seed, _, config_hash) = checkpoint_summary(checkpoint)?;
    let state = load_checkpoint::<f32>(checkpoint)?;
    let pool = materialize::<f32>(
        &manifest,
        state.cfg.crop_size,
        state.cfg.model.num_classes,
        0.0,
        state.cfg.seed,
        manifest_path.parent(),
    )?;
    if pool.target.is_empty() {
        return Err(CosegError::Config("manifest has no labeled target data".into()).into());
    }
    let metrics = evaluate_domain(
        &state.model1,
        &state.model2,
        &state.store,
        &pool.target,
        &manifest.target_domain,
        state.cfg.sigma,
    )?;
    Ok((metrics, seed, config_hash, manifest))
}

fn write_eval_csv(
    path: &Path,
    rows: &[(u64, String, String, usize, f64, f64)],
    provenance: &str,
) -> anyhow::Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# {provenance}");
    text.push_str("run_seed,target_domain,labeled_domain,class,dsc,iou\n");
    for (seed, target, labeled, class, d, i) in rows {
        let _ = writeln!(text, "{seed},{target},{labeled},{class},{d},{i}");
    }
    std::fs::write(path, text).map_err(|e| CosegError::io(path, e))?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let dir = out_dir(args.out, "eval")?;
    let (metrics, seed, config_hash, manifest) =
        eval_checkpoint_on_target(&args.checkpoint, &args.manifest)?;
    let rows: Vec<_> = metrics
        .per_class_dsc
        .iter()
        .zip(metrics.per_class_iou.iter())
        .enumerate()
        .map(|(c, (d, i))| {
            (
                seed,
                manifest.target_domain.clone(),
                manifest.labeled_domain.clone(),
                c,
                *d,
                *i,
            )
        })
        .collect();
    let csv_path = dir.join("target_metrics.csv");
    write_eval_csv(
        &csv_path,
        &rows,
        &format!(
            "version={} config-sha256={config_hash} seed={seed}",
            env!("CARGO_PKG_VERSION")
        ),
    )?;
    let bars: Vec<(String, f64)> = metrics
        .per_class_dsc
        .iter()
        .enumerate()
        .map(|(c, d)| (format!("class{c}"), *d))
        .collect();
    write_dsc_bar_chart(
        &dir.join(format!("dsc_{}.png", manifest.target_domain)),
        &format!("target {}", manifest.target_domain),
        &bars,
    )?;
    for (c, d) in metrics.per_class_dsc.iter().enumerate() {
        println!(
            "target {} class {c}: DSC {d:.2} IoU {:.2}",
            manifest.target_domain, metrics.per_class_iou[c]
        );
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let dir = out_dir(args.out, "ablate")?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let manifest_dir = args.manifest.parent().map(Path::to_path_buf);
    let base = TrainConfig::preset(&args.preset)?;
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .map(|s| Variant::parse(s.trim()))
        .collect::<Result<_, _>>()?;

    let mut table = String::new();
    let _ = writeln!(
        table,
        "# version={} seed={} preset={}",
        env!("CARGO_PKG_VERSION"),
        args.seed,
        args.preset
    );
    table.push_str("variant,run_seed,mean_target_dsc\n");
    let mut means: Vec<(Variant, f64)> = Vec::new();
    for variant in &variants {
        let mut dsc_runs = Vec::new();
        for run in 0..args.runs {
            let mut cfg = base.clone();
            cfg.variant = *variant;
            cfg.seed = args.seed + run as u64;
            let cfg = cfg.normalized();
            let run_dir = dir.join(format!("{}_seed{}", variant.as_str(), cfg.seed));
            let artifacts =
                run_training::<f32>(&cfg, &manifest, manifest_dir.as_deref(), Some(&run_dir))?;
            let pool = materialize::<f32>(
                &manifest,
                cfg.crop_size,
                cfg.model.num_classes,
                0.0,
                cfg.seed,
                manifest_dir.as_deref(),
            )?;
            let m = evaluate_domain(
                &artifacts.state.model1,
                &artifacts.state.model2,
                &artifacts.state.store,
                &pool.target,
                &manifest.target_domain,
                cfg.sigma,
            )?;
            let mean_dsc =
                m.per_class_dsc.iter().sum::<f64>() / m.per_class_dsc.len() as f64;
            let _ = writeln!(table, "{},{},{}", variant.as_str(), cfg.seed, mean_dsc);
            println!(
                "variant {} seed {}: mean target DSC {mean_dsc:.2}",
                variant.as_str(),
                cfg.seed
            );
            dsc_runs.push(mean_dsc);
        }
        means.push((
            *variant,
            dsc_runs.iter().sum::<f64>() / dsc_runs.len().max(1) as f64,
        ));
    }
    for (variant, mean) in &means {
        let _ = writeln!(table, "# mean {} {}", variant.as_str(), mean);
    }
    std::fs::write(dir.join("ablation.csv"), table)
        .map_err(|e| CosegError::io(dir.join("ablation.csv"), e))?;
    println!("wrote {}", dir.join("ablation.csv").display());
    Ok(())
}

fn parse_eval_csv(path: &Path) -> anyhow::Result<Vec<(u64, String, String, usize, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CosegError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("run_seed") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(CosegError::data(path, format!("bad row: {line}")).into());
        }
        rows.push((
            f[0].parse()
                .map_err(|_| CosegError::data(path, "bad seed"))?,
            f[1].to_string(),
            f[2].to_string(),
            f[3].parse()
                .map_err(|_| CosegError::data(path, "bad class"))?,
            f[4].parse()
                .map_err(|_| CosegError::data(path, "bad dsc"))?,
            f[5].parse()
                .map_err(|_| CosegError::data(path, "bad iou"))?,
        ));
    }
    Ok(rows)
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let dir = out_dir(args.out, "report")?;
    let mut all_rows = Vec::new();
    for input in &args.inputs {
        all_rows.extend(parse_eval_csv(input)?);
    }
    if all_rows.is_empty() {
        return Err(CosegError::Input("no evaluation rows found".into()).into());
    }

    // group rows by target domain; one MetricResult per run seed
    let mut targets: Vec<String> = all_rows.iter().map(|r| r.1.clone()).collect();
    targets.sort();
    targets.dedup();

    let mut report = String::new();
    let _ = writeln!(report, "# version={}", env!("CARGO_PKG_VERSION"));
    report.push_str("target_domain,class,runs,dsc_mean,dsc_std,iou_mean,iou_std\n");
    for target in &targets {
        let mut seeds: Vec<u64> = all_rows
            .iter()
            .filter(|r| &r.1 == target)
            .map(|r| r.0)
            .collect();
        seeds.sort();
        seeds.dedup();
        let per_run: Vec<MetricResult> = seeds
            .iter()
            .map(|seed| {
                let mut rows: Vec<_> = all_rows
                    .iter()
                    .filter(|r| &r.1 == target && r.0 == *seed)
                    .collect();
                rows.sort_by_key(|r| r.3);
                MetricResult {
                    per_class_dsc: rows.iter().map(|r| r.4).collect(),
                    per_class_iou: rows.iter().map(|r| r.5).collect(),
                    domain_id: target.clone(),
                    num_samples: rows.len(),
                }
            })
            .collect();
        let agg = aggregate_runs(&per_run)?;
        let classes = agg.mean.per_class_dsc.len();
        for c in 0..classes {
            let _ = writeln!(
                report,
                "{target},{c},{},{},{},{},{}",
                agg.num_runs,
                agg.mean.per_class_dsc[c],
                agg.std.per_class_dsc[c],
                agg.mean.per_class_iou[c],
                agg.std.per_class_iou[c],
            );
        }
        let bars: Vec<(String, f64)> = agg
            .mean
            .per_class_dsc
            .iter()
            .enumerate()
            .map(|(c, d)| (format!("class{c}"), *d))
            .collect();
        write_dsc_bar_chart(
            &dir.join(format!("dsc_{target}.png")),
            &format!("target {target} mean DSC over {} runs", agg.num_runs),
            &bars,
        )?;
    }
    std::fs::write(dir.join("report.csv"), report)
        .map_err(|e| CosegError::io(dir.join("report.csv"), e))?;
    println!("wrote {}", dir.join("report.csv").display());
    Ok(())
}
