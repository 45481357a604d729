use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ror_core::aging::{compute_curve_sets, suggest_weights, AgingCurve, CurveConfig, DEFAULT_LEVELS};
use ror_core::arch::{build, depth_report, kind_name, ArchSpec, ShortcutKind};
use ror_core::data::{assign_folds, load_manifest, synth_dataset, write_manifest, Dataset, LabelField, SynthConfig};
use ror_core::model::RorModel;
use ror_core::objective::{mean_std, Metrics};
use ror_core::plot::{curve_plot, error_plot, LinePlot, Series};
use ror_core::tensor::Element;
use ror_core::trainer::{evaluate, load_checkpoint, read_log, run_stage, LabeledSet, StageInit, TrainError};
use serde::Serialize;
use serde_json::json;

use crate::config::{label_space, load_arch, read_toml, CurveRunConfig, DatasetConfig, RunConfig, Split};
use crate::{CliError, Context};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    write(path, text + "\n")
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn inspect(ctx: &mut Context, spec_path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::usage(format!("{}: {e}", spec_path.display())))?;
    ctx.inputs.push(spec_path.to_path_buf());
    let spec = ArchSpec::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", spec_path.display())))?;
    let graph = build(&spec).map_err(|e| CliError::usage(e.to_string()))?;
    let depth = depth_report(&spec);
    if let Some(w) = &depth.warning {
        eprintln!("warning: {w}");
    }
    let census = graph.census();
    let totals: BTreeMap<&str, usize> = [ShortcutKind::Identity, ShortcutKind::A, ShortcutKind::B]
        .into_iter()
        .map(|k| (kind_name(k), census.total(k)))
        .collect();
    let report = json!({
        "spec": spec,
        "depth": depth,
        "param_count": graph.param_count(),
        "blocks": graph.blocks,
        "census": census.counts,
        "shortcut_totals": totals,
    });
    write_json(&ctx.out.join("graph.json"), &graph.to_json())?;
    write(&ctx.out.join("graph.dot"), graph.to_dot())?;
    write_json(&ctx.out.join("report.json"), &report)?;
    println!("depth {}", depth.computed);
    println!("parameters {}", graph.param_count());
    for (level, kinds) in &census.counts {
        for (kind, n) in kinds {
            println!("shortcuts {level} {kind} {n}");
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct StageReport {
    name: String,
    seed: u64,
    epochs: usize,
    halted: Option<String>,
    body_checksum_start: String,
    body_checksum_end: String,
    best_epoch: Option<usize>,
    best: Option<Metrics>,
    /// Final-model metrics on the validation split, or on the training split without one.
    final_metrics: Option<Metrics>,
    final_on: &'static str,
}

pub fn train(ctx: &mut Context, config_path: &Path) -> Result<(), CliError> {
    let cfg: RunConfig = read_toml(config_path)?;
    ctx.inputs.push(config_path.to_path_buf());
    let base = parent(config_path);
    let seed = ctx.seed.or(cfg.seed).unwrap_or(0);
    ctx.seeds.insert("base".into(), seed);
    let (arch, arch_path) = load_arch(&cfg.arch, &base)?;
    ctx.inputs.extend(arch_path);
    if cfg.stages.is_empty() {
        return Err(CliError::usage("config has no stages"));
    }

    // resolve every stage's data before any training starts
    let mut splits: BTreeMap<String, Split> = BTreeMap::new();
    let mut sets = Vec::new();
    for (i, stage) in cfg.stages.iter().enumerate() {
        if stage.name.is_empty() || !stage.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
            return Err(CliError::usage(format!("stage name `{}` must be nonempty [A-Za-z0-9_-]", stage.name)));
        }
        if cfg.stages[..i].iter().any(|s| s.name == stage.name) {
            return Err(CliError::usage(format!("duplicate stage name `{}`", stage.name)));
        }
        if i == 0 && stage.init == StageInit::Previous {
            return Err(CliError::usage(format!("first stage `{}` cannot continue a previous stage", stage.name)));
        }
        stage.optim.validate()?;
        if !splits.contains_key(&stage.dataset) {
            let ds: &DatasetConfig = cfg
                .datasets
                .get(&stage.dataset)
                .ok_or_else(|| CliError::usage(format!("stage `{}` uses unknown dataset `{}`", stage.name, stage.dataset)))?;
            let split = ds.load(&stage.dataset, &base, seed)?;
            ctx.inputs.extend(split.inputs.iter().cloned());
            splits.insert(stage.dataset.clone(), split);
        }
        let split = &splits[&stage.dataset];
        let space = label_space(stage.field, stage.head_classes);
        let train = LabeledSet::from_dataset(&split.train, None, stage.field, space.clone())?;
        let val = split
            .val
            .as_ref()
            .map(|v| LabeledSet::from_dataset(v, None, stage.field, space))
            .transpose()?;
        sets.push((train, val));
    }
    match ctx.precision {
        crate::Precision::Single => train_stages::<f32>(ctx, &cfg, &arch, seed, &sets),
        crate::Precision::Double => train_stages::<f64>(ctx, &cfg, &arch, seed, &sets),
    }
}

fn train_stages<T: Element>(
    ctx: &mut Context,
    cfg: &RunConfig,
    arch: &ArchSpec,
    seed: u64,
    sets: &[(LabeledSet, Option<LabeledSet>)],
) -> Result<(), CliError> {
    let mut reports: Vec<StageReport> = Vec::new();
    let mut previous: Option<RorModel<T>> = None;
    for (stage, (train, val)) in cfg.stages.iter().zip(sets) {
        let mut stage = stage.clone();
        stage.seed = seed.wrapping_add(stage.seed);
        ctx.seeds.insert(format!("stage.{}", stage.name), stage.seed);
        let dir = ctx.out.join(&stage.name);
        let out = run_stage::<T>(&stage, arch, train, val.as_ref(), previous.take(), Some(&dir))?;
        let (eval_set, final_on) = match val {
            Some(v) => (v, "validation"),
            None => (train, "train"),
        };
        let final_metrics = match out.halted {
            Some(_) => None,
            None => Some(evaluate(&out.model, eval_set, &out.normalizer)?),
        };
        if let Some(m) = &final_metrics {
            println!(
                "{}: {} epochs, final {final_on} exact {:.4}{}",
                stage.name,
                out.log.len(),
                m.exact,
                m.one_off.map(|v| format!(" one-off {v:.4}")).unwrap_or_default()
            );
        }
        reports.push(StageReport {
            name: stage.name.clone(),
            seed: stage.seed,
            epochs: out.log.len(),
            halted: out.halted.clone(),
            body_checksum_start: out.body_checksum_at_start.clone(),
            body_checksum_end: out.model.body_checksum(),
            best_epoch: out.best.as_ref().map(|b| b.0),
            best: out.best.as_ref().map(|b| b.1.clone()),
            final_metrics,
            final_on,
        });
        write_json(&ctx.out.join("metrics.json"), &json!({ "stages": reports }))?;
        if let Some(reason) = out.halted {
            return Err(CliError::runtime(format!("stage `{}` halted: {reason}", stage.name)));
        }
        previous = Some(out.model);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRecord {
    checkpoint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
    samples: usize,
    #[serde(flatten)]
    metrics: Metrics,
}

fn summary(values: &[f64]) -> serde_json::Value {
    let (mean, std) = mean_std(values);
    json!({
        "mean": mean,
        "std": std,
        "formatted": ror_core::objective::format_mean_std(values),
        "values": values,
    })
}

pub struct EvalArgs<'a> {
    pub checkpoints: &'a [PathBuf],
    pub manifest: &'a Path,
    pub field: LabelField,
    pub classes: Option<usize>,
    pub folds: Option<usize>,
}

pub fn eval(ctx: &mut Context, args: EvalArgs) -> Result<(), CliError> {
    match ctx.precision {
        crate::Precision::Single => eval_typed::<f32>(ctx, args),
        crate::Precision::Double => eval_typed::<f64>(ctx, args),
    }
}

fn eval_typed<T: Element>(ctx: &mut Context, args: EvalArgs) -> Result<(), CliError> {
    if args.checkpoints.is_empty() {
        return Err(CliError::usage("at least one --checkpoint is needed"));
    }
    let dataset = load_manifest(args.manifest).map_err(|e| CliError::usage(e.to_string()))?;
    ctx.inputs.push(args.manifest.to_path_buf());
    let classes = args.classes.unwrap_or(match args.field {
        LabelField::Age => 8,
        LabelField::Gender => 2,
    });
    let space = label_space(args.field, classes);
    let seed = ctx.seed.unwrap_or(0);

    // (checkpoint, fold, sample indices)
    let mut jobs: Vec<(&PathBuf, Option<usize>, Vec<usize>)> = Vec::new();
    match args.folds {
        Some(n) => {
            ctx.seeds.insert("folds".into(), seed);
            let folds = assign_folds(&dataset, n, seed).map_err(|e| CliError::usage(e.to_string()))?;
            let per_fold = match args.checkpoints.len() {
                1 => false,
                c if c == n => true,
                c => return Err(CliError::usage(format!("{c} checkpoints for {n} folds (give 1 or {n})"))),
            };
            for fold in 0..n {
                let ck = &args.checkpoints[if per_fold { fold } else { 0 }];
                jobs.push((ck, Some(fold), folds.split(&dataset, fold).1));
            }
        }
        None => {
            for ck in args.checkpoints {
                jobs.push((ck, None, (0..dataset.len()).collect()));
            }
        }
    }

    let mut records = Vec::new();
    let mut loaded: BTreeMap<&PathBuf, (RorModel<T>, ror_core::data::ChannelStats)> = BTreeMap::new();
    for (ck, fold, idx) in jobs {
        if !loaded.contains_key(ck) {
            let (model, meta) = load_checkpoint::<T>(ck).map_err(|e| CliError::usage(e.to_string()))?;
            ctx.inputs.push(ck.join(ror_core::trainer::MANIFEST));
            ctx.inputs.push(ck.join(ror_core::trainer::TENSORS));
            let norm = meta
                .normalizer
                .ok_or_else(|| CliError::usage(format!("{}: checkpoint has no input normalizer", ck.display())))?;
            loaded.insert(ck, (model, norm));
        }
        let (model, norm) = &loaded[ck];
        let set = LabeledSet::from_dataset(&dataset, Some(&idx), args.field, space.clone())?;
        let metrics = evaluate(model, &set, norm)?;
        records.push(EvalRecord {
            checkpoint: ck.display().to_string(),
            fold,
            samples: set.len(),
            metrics,
        });
    }
    let exact: Vec<f64> = records.iter().map(|r| r.metrics.exact).collect();
    let mut report = json!({ "field": args.field, "classes": classes, "records": records });
    if records.len() > 1 {
        let mut s = json!({ "exact": summary(&exact) });
        let one_off: Option<Vec<f64>> = records.iter().map(|r| r.metrics.one_off).collect();
        if let Some(v) = one_off {
            s["one_off"] = summary(&v);
        }
        report["summary"] = s;
    }
    write_json(&ctx.out.join("eval.json"), &report)?;
    for r in &records {
        println!(
            "{}{}: exact {:.4}{}",
            r.checkpoint,
            r.fold.map(|f| format!(" fold {f}")).unwrap_or_default(),
            r.metrics.exact,
            r.metrics.one_off.map(|v| format!(" one-off {v:.4}")).unwrap_or_default()
        );
    }
    if records.len() > 1 {
        println!("exact {}", ror_core::objective::format_mean_std(&exact));
    }
    Ok(())
}

pub fn curve(ctx: &mut Context, config_path: &Path) -> Result<(), CliError> {
    let cfg: CurveRunConfig = read_toml(config_path)?;
    ctx.inputs.push(config_path.to_path_buf());
    let base = parent(config_path);
    let seed = ctx.seed.or(cfg.seed).unwrap_or(0);
    ctx.seeds.insert("base".into(), seed);
    let (arch, arch_path) = load_arch(&cfg.arch, &base)?;
    ctx.inputs.extend(arch_path);
    let mut data = cfg.dataset.clone();
    if data.val_manifest.is_none() && data.val_synthetic.is_none() && data.folds.is_none() {
        data.folds = Some(5);
        data.fold = 0;
    }
    let split = data.load("dataset", &base, seed)?;
    ctx.inputs.extend(split.inputs.iter().cloned());
    let space = label_space(LabelField::Age, cfg.classes);
    let train = LabeledSet::from_dataset(&split.train, None, LabelField::Age, space.clone())?;
    let val = LabeledSet::from_dataset(split.val.as_ref().expect("validation split"), None, LabelField::Age, space)?;
    let curve_cfg = CurveConfig {
        arch,
        optim: cfg.optim.clone(),
        drop_p_last: cfg.drop_p_last,
        augment: cfg.augment,
        seed,
    };
    let curve = match ctx.precision {
        crate::Precision::Single => compute_curve_sets::<f32>(&curve_cfg, &train, &val, ctx.threads)?,
        crate::Precision::Double => compute_curve_sets::<f64>(&curve_cfg, &train, &val, ctx.threads)?,
    };
    let levels = cfg.levels.clone().unwrap_or(DEFAULT_LEVELS.to_vec());
    let weights = suggest_weights(&curve, &levels).map_err(|e| CliError::usage(e.to_string()))?;
    curve.write_csv(&ctx.out.join("curve.csv"))?;
    write(&ctx.out.join("curve.svg"), curve_plot(&curve).to_svg())?;
    write_json(
        &ctx.out.join("weights.json"),
        &json!({
            "weights": weights.weights,
            "name": weights.name,
            "levels": levels,
            "partial": curve.is_partial(),
            "failed": curve.failed,
            "points": curve.points,
        }),
    )?;
    for (k, a) in &curve.points {
        println!("k {k}: {a:.4}");
    }
    println!("weights {weights}");
    if curve.is_partial() {
        eprintln!("warning: partial curve, thresholds {:?} failed", curve.failed);
    }
    Ok(())
}

fn series_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match (stem.as_str(), path.parent().and_then(|p| p.file_name())) {
        ("log" | "curve", Some(dir)) => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

pub fn plot(ctx: &mut Context, files: &[PathBuf], labels: &[String], name: &str) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::usage("no input files"));
    }
    if !labels.is_empty() && labels.len() != files.len() {
        return Err(CliError::usage(format!("{} labels for {} files", labels.len(), files.len())));
    }
    let mut logs = Vec::new();
    let mut curves = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let head = fs::read_to_string(f).map_err(|e| CliError::usage(format!("{}: {e}", f.display())))?;
        ctx.inputs.push(f.clone());
        let label = labels.get(i).cloned().unwrap_or_else(|| series_label(f));
        if head.lines().next().is_some_and(|l| l.trim() == "k,accuracy") {
            let c = AgingCurve::read_csv(f, 0).map_err(|e| CliError::usage(e.to_string()))?;
            curves.push((label, c));
        } else {
            let log = read_log(f).map_err(|e| CliError::usage(e.to_string()))?;
            logs.push((label, log));
        }
    }
    let plot: LinePlot = match (logs.is_empty(), curves.is_empty()) {
        (false, true) => error_plot(&logs),
        (true, false) => {
            let mut p = curve_plot(&curves[0].1);
            p.series = curves
                .iter()
                .map(|(label, c)| Series {
                    label: label.clone(),
                    points: c.points.iter().map(|&(k, a)| (k as f64, a)).collect(),
                })
                .collect();
            p
        }
        _ => return Err(CliError::usage("cannot mix training logs and curves in one plot")),
    };
    let name = if name.ends_with(".svg") { name.to_string() } else { format!("{name}.svg") };
    write(&ctx.out.join(name), plot.to_svg())
}

pub struct SynthArgs {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub overlap: Vec<usize>,
    pub noise: Option<f64>,
}

pub fn synth(ctx: &mut Context, args: SynthArgs) -> Result<(), CliError> {
    let seed = ctx.seed.unwrap_or(0);
    ctx.seeds.insert("synthetic".into(), seed);
    let mut cfg = SynthConfig::new(args.classes, args.per_class, args.size, seed).with_overlap(&args.overlap);
    if let Some(n) = args.noise {
        cfg.noise = n;
    }
    let s = synth_dataset(&cfg).map_err(|e| CliError::usage(e.to_string()))?;
    let ds: &Dataset = &s.dataset;
    let path = write_manifest(ds, &ctx.out).map_err(|e| CliError::runtime(e.to_string()))?;
    write_json(&ctx.out.join("synthetic.json"), &cfg)?;
    println!("{} samples written to {}", ds.len(), path.display());
    Ok(())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::LabelSpace { .. } | TrainError::BodyMismatch(_) | TrainError::Objective(_) => {
                CliError::usage(e.to_string())
            }
            _ => CliError::runtime(e.to_string()),
        }
    }
}
