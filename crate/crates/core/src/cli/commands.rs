use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{resolve_run_root, RunConfig};
use super::{AblateArgs, Axis, EvalArgs, ExportArgs, RankArgs, SyntheticArgs, TrainArgs};
use crate::data::{load_source, sample_episode, DegradationPreset, EpisodeSpec, SplitRole, Splits, SyntheticSource};
use crate::error::{BmlError, Result};
use crate::evaluator::{
    export_embeddings, meta_test, similarity_ranking, write_csv_summary, write_json, Branch, Fusion, MetaTestConfig,
    MetaTestReport, SummaryRow,
};
use crate::model::{parameter_count, BmlNetwork};
use crate::rng::{derive_seed, stream};
use crate::trainer::{Checkpoint, Mode, RunDir, TrainConfig, Trainer};

fn load_splits(source: &str, image_size: usize) -> Result<Splits> {
    if !source.starts_with("synthetic://") && !Path::new(source).exists() {
        return Err(BmlError::Dataset(format!("dataset path {source} does not exist")));
    }
    load_source(source, image_size)
}

/// The run config stored next to a checkpoint at `<run>/checkpoints/x.ckpt`.
fn snapshot_for(ckpt: &Path) -> Option<RunConfig> {
    let snap = ckpt.parent()?.parent()?.join("config.snapshot");
    let text = std::fs::read_to_string(snap).ok()?;
    RunConfig::from_table(toml::from_str(&text).ok()?).ok()
}

/// Dataset source for a checkpoint command: the flag, else the run snapshot.
fn checkpoint_source(ckpt: &Path, flag: Option<&str>) -> Result<String> {
    match flag {
        Some(s) => Ok(s.to_string()),
        None => snapshot_for(ckpt).map(|c| c.data.source).ok_or_else(|| {
            BmlError::Config(format!(
                "no --data given and no config.snapshot found for {}",
                ckpt.display()
            ))
        }),
    }
}

fn load_model(ckpt: &Path) -> Result<(Checkpoint, BmlNetwork)> {
    let ckpt = Checkpoint::load(ckpt)?;
    let net = ckpt.network()?;
    Ok((ckpt, net))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    if let Some(name) = &args.name {
        cfg.name = name.clone();
        cfg.validate()?;
    }
    let root = resolve_run_root(args.run_root.as_deref()).join(&cfg.name);
    let run = RunDir { root: root.clone() };
    let last = run.checkpoint("last");

    if args.resume {
        let ckpt = Checkpoint::load(&last)?;
        let mut trainer = Trainer::resume(ckpt, Some(cfg.train.clone()), args.force)?;
        std::fs::write(run.config_snapshot(), cfg.to_toml()?)?;
        log::info!("resuming {} at epoch {}", root.display(), trainer.epoch());
        let splits = load_splits(&cfg.data.source, cfg.train.model.input_size)?;
        return fit_and_report(&mut trainer, &splits, &run);
    }
    if last.exists() {
        return Err(BmlError::Config(format!(
            "run {} already exists; pass --resume or choose another --name",
            root.display()
        )));
    }
    let run = RunDir::create(&root)?;
    std::fs::write(run.config_snapshot(), cfg.to_toml()?)?;
    let splits = load_splits(&cfg.data.source, cfg.train.model.input_size)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &splits)?;
    fit_and_report(&mut trainer, &splits, &run)
}

fn fit_and_report(trainer: &mut Trainer, splits: &Splits, run: &RunDir) -> Result<()> {
    let epochs = trainer.config().epochs;
    let outcome = trainer.fit(splits, epochs, Some(run), &mut |_| Ok(()))?;
    println!(
        "trained {} epochs; best validation {} at epoch {}; run dir {}",
        outcome.epochs_completed,
        outcome.best_val.map_or("-".into(), |v| format!("{v:.2}")),
        outcome.best_epoch.map_or("-".into(), |e| e.to_string()),
        run.root.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    config_hash: String,
    mode: Mode,
    epoch: usize,
    split: SplitRole,
    seed: u64,
    fusion: Fusion,
    reports: Vec<LabeledReport>,
}

#[derive(Debug, Serialize)]
struct LabeledReport {
    setting: String,
    degradation: Option<DegradationPreset>,
    #[serde(flatten)]
    report: MetaTestReport,
}

fn setting_name(spec: EpisodeSpec, preset: Option<DegradationPreset>) -> String {
    let base = format!("{}way-{}shot", spec.n_way, spec.k_shot);
    match preset {
        Some(p) => format!("{base}+{p}"),
        None => base,
    }
}

fn summary_rows(method: &str, reports: &[LabeledReport]) -> Vec<SummaryRow> {
    reports
        .iter()
        .flat_map(|r| {
            Branch::ALL.into_iter().map(|b| {
                let res = r.report.get(b);
                SummaryRow {
                    method: method.to_string(),
                    setting: r.setting.clone(),
                    branch: b.name().to_string(),
                    accuracy: res.mean_accuracy,
                    ci95: res.ci95,
                }
            })
        })
        .collect()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (ckpt, net) = load_model(&args.checkpoint)?;
    let snapshot = snapshot_for(&args.checkpoint);
    let source = checkpoint_source(&args.checkpoint, args.data.as_deref())?;
    let defaults = snapshot.map(|c| c.eval).unwrap_or_default();

    let specs = if args.way.is_some() || args.shot.is_some() || args.query.is_some() {
        vec![EpisodeSpec::new(args.way.unwrap_or(5), args.shot.unwrap_or(1), args.query.unwrap_or(15))?]
    } else {
        defaults.specs.clone()
    };
    let n_episodes = args.n.unwrap_or(defaults.n_episodes);
    let split_role = args.split.unwrap_or(defaults.split);
    let fusion = args.fusion.unwrap_or(defaults.fusion);
    let presets: Vec<Option<DegradationPreset>> = if args.degrade.is_empty() {
        std::iter::once(None).chain(defaults.degradations.iter().copied().map(Some)).collect()
    } else {
        args.degrade.iter().copied().map(Some).collect()
    };

    let splits = load_splits(&source, ckpt.config.model.input_size)?;
    let split = splits.get(split_role);
    let mut reports = Vec::new();
    for &spec in &specs {
        for &preset in &presets {
            let mut mt = MetaTestConfig::new(spec, n_episodes, args.seed);
            mt.fusion = fusion;
            mt.metric.squared = ckpt.config.losses.metric.squared;
            mt.degradations = preset.map(|p| p.degradation(ckpt.config.model.input_size)).into_iter().collect();
            let report = meta_test(&net, split, &mt)?;
            let setting = setting_name(spec, preset);
            println!(
                "{setting}: fused {:.2}±{:.2} global {:.2}±{:.2} local {:.2}±{:.2}",
                report.fused.mean_accuracy,
                report.fused.ci95,
                report.global.mean_accuracy,
                report.global.ci95,
                report.local.mean_accuracy,
                report.local.ci95
            );
            reports.push(LabeledReport {
                setting,
                degradation: preset,
                report,
            });
        }
    }

    let out_dir = match &args.out {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|run| run.join("reports"))
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out_dir)?;
    let rows = summary_rows(ckpt.config.mode.name(), &reports);
    let output = EvalOutput {
        config_hash: ckpt.config_hash(),
        mode: ckpt.config.mode,
        epoch: ckpt.epoch,
        split: split_role,
        seed: args.seed,
        fusion,
        reports,
    };
    write_json(&output, &out_dir.join("eval.json"))?;
    write_csv_summary(&rows, &out_dir.join("eval.csv"))?;
    println!("wrote {}", out_dir.join("eval.json").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    axis: String,
    variant: String,
    seed: String,
    setting: String,
    fused: f64,
    fused_ci95: Option<f64>,
    global: f64,
    local: f64,
    params: Option<usize>,
}

fn variants(axis: Axis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Mutual => [0.0, 1.0]
            .into_iter()
            .map(|g| (format!("gamma={g}"), with(&|c| c.losses.weights.gamma = g)))
            .collect(),
        Axis::Elastic => [false, true]
            .into_iter()
            .map(|on| (format!("elastic={on}"), with(&|c| c.losses.elastic.enabled = on)))
            .collect(),
        Axis::SharedDepth => (0..=3)
            .map(|k| (format!("S{k}I{}", 4 - k), with(&|c| c.model.shared_depth = k)))
            .collect(),
        Axis::Mode => Mode::ALL
            .into_iter()
            .map(|m| (m.name().to_string(), with(&|c| c.mode = m)))
            .collect(),
    }
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set)?;
    let name = args.name.clone().unwrap_or_else(|| format!("ablate-{}", args.axis.name()));
    let run = RunDir::create(resolve_run_root(args.run_root.as_deref()).join(&name))?;
    std::fs::write(run.config_snapshot(), cfg.to_toml()?)?;
    let splits = load_splits(&cfg.data.source, cfg.train.model.input_size)?;

    let mut rows = Vec::new();
    for (variant, train_cfg) in variants(args.axis, &cfg.train) {
        let params = matches!(args.axis, Axis::SharedDepth)
            .then(|| parameter_count(&train_cfg.model, splits.base.num_classes()));
        let mut per_spec: Vec<Vec<MetaTestReport>> = vec![Vec::new(); cfg.eval.specs.len()];
        for &seed in &args.seeds {
            let mut tc = train_cfg.clone();
            tc.seed = seed;
            let mut trainer = Trainer::new(tc, &splits)?;
            let epochs = trainer.config().epochs;
            trainer.fit(&splits, epochs, None, &mut |_| Ok(()))?;
            for (i, &spec) in cfg.eval.specs.iter().enumerate() {
                let mut mt = MetaTestConfig::new(spec, cfg.eval.n_episodes, derive_seed(seed, &[stream::EVAL_EPISODE]));
                mt.fusion = cfg.eval.fusion;
                mt.metric.squared = train_cfg.losses.metric.squared;
                let report = meta_test(trainer.network(), splits.get(cfg.eval.split), &mt)?;
                log::info!("{variant} seed {seed} {}: fused {:.2}", setting_name(spec, None), report.fused.mean_accuracy);
                rows.push(AblationRow {
                    axis: args.axis.name().into(),
                    variant: variant.clone(),
                    seed: seed.to_string(),
                    setting: setting_name(spec, None),
                    fused: report.fused.mean_accuracy,
                    fused_ci95: Some(report.fused.ci95),
                    global: report.global.mean_accuracy,
                    local: report.local.mean_accuracy,
                    params,
                });
                per_spec[i].push(report);
            }
        }
        for (spec, reports) in cfg.eval.specs.iter().zip(&per_spec) {
            let mean = |b: Branch| reports.iter().map(|r| r.get(b).mean_accuracy).sum::<f64>() / reports.len() as f64;
            rows.push(AblationRow {
                axis: args.axis.name().into(),
                variant: variant.clone(),
                seed: "mean".into(),
                setting: setting_name(*spec, None),
                fused: mean(Branch::Fused),
                fused_ci95: None,
                global: mean(Branch::Global),
                local: mean(Branch::Local),
                params,
            });
        }
    }

    let path = run.reports().join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| BmlError::invalid(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| BmlError::invalid(e.to_string()))?;
    }
    w.flush()?;
    for row in rows.iter().filter(|r| r.seed == "mean") {
        println!("{} {}: fused {:.2} global {:.2} local {:.2}", row.variant, row.setting, row.fused, row.global, row.local);
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn rank(args: &RankArgs) -> Result<()> {
    let (ckpt, net) = load_model(&args.checkpoint)?;
    let source = checkpoint_source(&args.checkpoint, args.data.as_deref())?;
    let splits = load_splits(&source, ckpt.config.model.input_size)?;
    let split = splits.get(args.split);
    let spec = EpisodeSpec::new(args.way, args.shot, args.query)?;
    let episode = sample_episode(split, spec, derive_seed(args.seed, &[stream::EVAL_EPISODE, 0]))?;
    let report = similarity_ranking(&net, &episode, args.fusion, &ckpt.config.losses.metric)?;

    let mut text = String::new();
    let _ = writeln!(text, "{}-way {}-shot, seed {}", spec.n_way, spec.k_shot, args.seed);
    for (local, &class) in report.class_map.iter().enumerate() {
        let _ = writeln!(text, "  class {local}: {}", split.classes[class]);
    }
    for q in &report.queries {
        let ranked: Vec<String> = q.ranking.iter().map(|(c, s)| format!("{c}({s:.3})")).collect();
        let _ = writeln!(text, "{}  true={}  rank={}  {}", q.query_id, q.true_class, q.truth_rank, ranked.join(" > "));
    }
    let _ = writeln!(text, "mean rank of true class: {:.3}", report.mean_truth_rank);

    match &args.out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &args.json {
        write_json(&report, p)?;
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<()> {
    let (ckpt, net) = load_model(&args.checkpoint)?;
    let source = checkpoint_source(&args.checkpoint, args.data.as_deref())?;
    let splits = load_splits(&source, ckpt.config.model.input_size)?;
    let rows = export_embeddings(&net, splits.get(args.split), args.max_per_class, &args.out)?;
    println!("wrote {rows} rows to {}", args.out.display());
    Ok(())
}

pub fn make_synthetic(args: &SyntheticArgs) -> Result<()> {
    let source = SyntheticSource {
        classes: args.classes,
        per_class: args.per,
        size: args.size,
        seed: args.seed,
        split: args.split,
        variation: args.var,
    };
    let splits = source.build()?;
    let mut manifest = String::from("class,split\n");
    for role in SplitRole::ALL {
        let split = splits.get(role);
        for (class, imgs) in split.classes.iter().zip(&split.images) {
            let dir = args.out.join(role.as_str()).join(class);
            std::fs::create_dir_all(&dir)?;
            for (i, rec) in imgs.iter().enumerate() {
                let (h, w, _) = rec.pixels.dim();
                let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let px = |c| (rec.pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    image::Rgb([px(0), px(1), px(2)])
                });
                let path = dir.join(format!("{i:04}.png"));
                img.save(&path).map_err(|source| BmlError::Image { path, source })?;
            }
            let _ = writeln!(manifest, "{class},{role}");
        }
    }
    std::fs::write(args.out.join("manifest.csv"), manifest)?;
    println!(
        "wrote {} classes ({} per class) to {}",
        args.classes,
        args.per,
        args.out.display()
    );
    Ok(())
}
