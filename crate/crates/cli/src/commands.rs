use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use crate::{record, CliError, CliResult, Common};
use wnet::data::{
    filter_for_tasks, generate_synthetic, load_manifest, load_records, write_dataset, SyntheticSceneSpec,
};
use wnet::evaluation::{evaluate_predictions, overlay, write_pr_csv, EvalReport, ImageMasks};
use wnet::models::{predict as predict_image, Arch, Task};
use wnet::preprocess::{load_gray, prepare, resize_or_pad, save_gray, save_rgb, standardize, ImageRecord};
use wnet::tensor::{Real, Tensor};
use wnet::training::{
    cross_validate, default_omega_grid, make_folds, predict_samples, prepare_samples, sweep_csv, sweep_omega,
    train as train_fold, train_records, write_trace_csv, Checkpoint, EpochStats, FoldPlan, Precision, RunConfig, SweepRow,
};

/// Calls `$f::<f32>` or `$f::<f64>` according to the config's precision.
macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    wnet::Error::io(path, e).into()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Resolved config, written so the run can be repeated from its outputs.
fn save_config(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    write_text(&out.join("config.toml"), &cfg.to_toml())
}

fn inputs<'a>(config: Option<&'a Path>, rest: &[&'a Path]) -> Vec<&'a Path> {
    config.into_iter().chain(rest.iter().copied()).collect()
}

fn records_for(manifest: &Path, tasks: &[Task]) -> CliResult<Vec<ImageRecord>> {
    let m = load_manifest(manifest)?;
    let records = filter_for_tasks(load_records(&m)?, tasks);
    if records.is_empty() {
        return Err(wnet::Error::InvalidArgument(format!(
            "{} has no record with {} masks",
            manifest.display(),
            tasks.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" and ")
        ))
        .into());
    }
    Ok(records)
}

fn fold_plan(cfg: &RunConfig, records: &[ImageRecord]) -> CliResult<FoldPlan> {
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    Ok(make_folds(&ids, cfg.fold_count, cfg.seed)?)
}

fn check_fold(fold: usize, cfg: &RunConfig) -> CliResult<()> {
    if fold >= cfg.fold_count {
        return Err(CliError::Usage(format!("fold {fold} out of range for fold_count {}", cfg.fold_count)));
    }
    Ok(())
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(wnet::Error::from)?;
    write_text(path, &(text + "\n"))
}

fn write_report(out: &Path, report: &EvalReport) -> CliResult<()> {
    report.save(&out.join("report.json"))?;
    for (task, agg) in &report.aggregate {
        if let Some(pr) = &agg.pr {
            write_pr_csv(&out.join(format!("pr_{task}.csv")), pr)?;
        }
    }
    Ok(())
}

pub fn synth(out: &Path, count: usize, size: usize, seed: u64, name: &str, argv: &[String]) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    create_dir(out)?;
    let records = generate_synthetic(&SyntheticSceneSpec::with_size(size), count, seed)?;
    let manifest = write_dataset(out, name, &records, "synthetic")?;
    info!("wrote {count} images to {}", manifest.display());
    record::write(out, "synth", None, Some(seed), &[], argv)
}

pub fn preprocess(common: &Common, manifest: &Path, argv: &[String]) -> CliResult<()> {
    let cfg = load_config(common.config.as_deref())?;
    create_dir(&common.out)?;
    let m = load_manifest(manifest)?;
    let pre = cfg.preprocess();
    let prepared = load_records(&m)?
        .iter()
        .map(|r| prepare(r, &pre))
        .collect::<wnet::Result<Vec<_>>>()?;
    let name = m.name.as_deref().unwrap_or("dataset");
    write_dataset(&common.out, &format!("{name}-{}px", cfg.input_size), &prepared, "preprocessed")?;
    save_config(&common.out, &cfg)?;
    record::write(&common.out, "preprocess", Some(&cfg), None, &inputs(common.config.as_deref(), &[manifest]), argv)
}

fn train_impl<T: Real>(
    cfg: &RunConfig,
    out: &Path,
    records: &[ImageRecord],
    fold: Option<usize>,
    cv: bool,
    folds: Option<&[usize]>,
) -> CliResult<()> {
    if cv {
        let plan = fold_plan(cfg, records)?;
        write_json(&out.join("folds.json"), &plan)?;
        let outcome = cross_validate::<T>(cfg, &plan, records, folds)?;
        for f in &outcome.folds {
            write_trace_csv(&out.join(format!("trace_fold{}.csv", f.fold)), &f.trace)?;
        }
        write_json(&out.join("cv.json"), &outcome)?;
        write_report(out, &outcome.pooled)?;
        for task in cfg.model_spec().tasks() {
            if let Some(f1) = outcome.mean_fold_f1(task) {
                println!("{task} mean fold F1 {f1:.4}");
            }
        }
        return Ok(());
    }
    match fold {
        Some(k) => {
            let plan = fold_plan(cfg, records)?;
            write_json(&out.join("folds.json"), &plan)?;
            let outcome = train_fold::<T>(cfg, &plan, k, records)?;
            outcome.best_checkpoint(cfg).save(&out.join("best.wnt"))?;
            outcome.last_checkpoint(cfg).save(&out.join("last.wnt"))?;
            write_trace_csv(&out.join("trace.csv"), &outcome.trace)?;
            println!(
                "best epoch {} held-out mean F1 {:.4}",
                outcome.best_epoch,
                outcome.best_score.unwrap_or(0.0)
            );
        }
        None => {
            let outcome = train_records::<T>(cfg, records, &[])?;
            outcome.last_checkpoint(cfg).save(&out.join("model.wnt"))?;
            write_trace_csv(&out.join("trace.csv"), &outcome.trace)?;
            if let Some(last) = outcome.trace.last() {
                println!("final training loss {:.4}", last.train_loss);
            }
        }
    }
    Ok(())
}

pub fn train(
    common: &Common,
    manifest: &Path,
    fold: Option<usize>,
    cv: bool,
    folds: Option<&[usize]>,
    argv: &[String],
) -> CliResult<()> {
    let cfg = load_config(common.config.as_deref())?;
    if let Some(k) = fold {
        check_fold(k, &cfg)?;
    }
    for &k in folds.unwrap_or(&[]) {
        check_fold(k, &cfg)?;
    }
    create_dir(&common.out)?;
    let records = records_for(manifest, &cfg.model_spec().tasks())?;
    with_precision!(cfg, train_impl(&cfg, &common.out, &records, fold, cv, folds))?;
    save_config(&common.out, &cfg)?;
    record::write(&common.out, "train", Some(&cfg), None, &inputs(common.config.as_deref(), &[manifest]), argv)
}

struct Evaluated {
    items: Vec<ImageMasks>,
    /// Background image per id for overlays, at the evaluation resolution.
    images: BTreeMap<String, Tensor<f32>>,
}

fn eval_checkpoint<T: Real>(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    fold: Option<usize>,
) -> CliResult<Evaluated> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let spec = &ck.meta.spec;
    let tasks = spec.tasks();
    let mut records = records_for(manifest, &tasks)?;
    if let Some(k) = fold {
        let plan = fold_plan(cfg, &records)?;
        let held = plan.heldout_ids(k);
        records.retain(|r| held.contains(&r.id.as_str()));
    }
    let samples = prepare_samples(&records, &ck.meta.preprocess, &tasks)?;
    let items = predict_samples(&ck.params, spec, &samples, cfg.threshold, fold, true)?;
    let images = records
        .iter()
        .map(|r| Ok((r.id.clone(), prepare(r, &ck.meta.preprocess)?.rgb)))
        .collect::<wnet::Result<_>>()?;
    Ok(Evaluated { items, images })
}

fn probs_path(dir: &Path, task: Task, id: &str) -> PathBuf {
    dir.join("probs").join(task.to_string()).join(format!("{id}.png"))
}

fn eval_predictions(manifest: &Path, predictions: &Path) -> CliResult<Evaluated> {
    let truth = load_records(&load_manifest(manifest)?)?;
    let preds: BTreeMap<String, ImageRecord> = load_records(&load_manifest(predictions)?)?
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    let pred_dir = predictions.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    let mut images = BTreeMap::new();
    for gt in truth {
        let Some(pred) = preds.get(&gt.id) else {
            info!("no prediction for `{}`", gt.id);
            continue;
        };
        let (ph, pw) = pred.size()?;
        let gt = if gt.size()? == (ph, pw) {
            gt
        } else if ph == pw {
            resize_or_pad(&gt, ph)?
        } else {
            return Err(wnet::Error::InvalidArgument(format!(
                "`{}`: prediction is {ph}x{pw} but ground truth is {:?}",
                gt.id,
                gt.size()?
            ))
            .into());
        };
        for task in [Task::Od, Task::Ex] {
            let (Some(p), Some(g)) = (pred.mask(task), gt.mask(task)) else {
                continue;
            };
            let probs_file = probs_path(pred_dir, task, &gt.id);
            let probs = probs_file.exists().then(|| load_gray(&probs_file)).transpose()?;
            items.push(ImageMasks {
                id: gt.id.clone(),
                fold: None,
                task,
                pred: p.clone(),
                probs,
                gt: g.clone(),
            });
        }
        images.insert(gt.id.clone(), gt.rgb);
    }
    if items.is_empty() {
        return Err(wnet::Error::InvalidArgument("no prediction matches a ground-truth mask".into()).into());
    }
    Ok(Evaluated { items, images })
}

pub fn eval(
    common: &Common,
    manifest: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    fold: Option<usize>,
    overlays: bool,
    argv: &[String],
) -> CliResult<()> {
    let cfg = load_config(common.config.as_deref())?;
    if let Some(k) = fold {
        check_fold(k, &cfg)?;
    }
    create_dir(&common.out)?;
    let evaluated = match (checkpoint, predictions) {
        (Some(ck), _) => with_precision!(cfg, eval_checkpoint(&cfg, manifest, ck, fold))?,
        (None, Some(p)) => {
            if fold.is_some() {
                return Err(CliError::Usage("--fold applies to checkpoint evaluation only".into()));
            }
            eval_predictions(manifest, p)?
        }
        (None, None) => return Err(CliError::Usage("one of --checkpoint or --predictions is required".into())),
    };
    let report = evaluate_predictions(&evaluated.items, cfg.sigma, cfg.pr_averaging)?;
    write_report(&common.out, &report)?;
    if overlays {
        let dir = common.out.join("overlays");
        create_dir(&dir)?;
        for item in &evaluated.items {
            let image = &evaluated.images[&item.id];
            save_rgb(&dir.join(format!("{}_{}.png", item.id, item.task)), &overlay(&item.pred, &item.gt, image)?)?;
        }
    }
    for (task, agg) in &report.aggregate {
        println!("{task} F1 {:.4} over {} images", agg.task_f1, agg.images);
    }
    let mut files: Vec<&Path> = vec![manifest];
    files.extend(checkpoint);
    files.extend(predictions);
    record::write(&common.out, "eval", Some(&cfg), None, &inputs(common.config.as_deref(), &files), argv)
}

fn predict_impl<T: Real>(cfg: &RunConfig, out: &Path, manifest: &Path, checkpoint: &Path) -> CliResult<()> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let (spec, pre) = (&ck.meta.spec, &ck.meta.preprocess);
    let mut written = Vec::new();
    for r in load_records(&load_manifest(manifest)?)? {
        let prepared = prepare(&r, pre)?;
        let pred = predict_image(&ck.params, spec, &standardize(&prepared.rgb), cfg.threshold)?;
        for tp in &pred.tasks {
            let path = probs_path(out, tp.task, &r.id);
            create_dir(path.parent().expect("probs path has a parent"))?;
            save_gray(&path, &tp.probs)?;
        }
        let mask = |task| pred.get(task).map(|tp| tp.mask.clone());
        written.push(ImageRecord::new(r.id.clone(), prepared.rgb, mask(Task::Od), mask(Task::Ex))?);
    }
    write_dataset(out, "predictions", &written, "predicted")?;
    info!("wrote predictions for {} images", written.len());
    Ok(())
}

pub fn predict(common: &Common, manifest: &Path, checkpoint: &Path, argv: &[String]) -> CliResult<()> {
    let cfg = load_config(common.config.as_deref())?;
    create_dir(&common.out)?;
    with_precision!(cfg, predict_impl(&cfg, &common.out, manifest, checkpoint))?;
    record::write(
        &common.out,
        "predict",
        Some(&cfg),
        None,
        &inputs(common.config.as_deref(), &[manifest, checkpoint]),
        argv,
    )
}

fn sweep_impl<T: Real>(
    cfg: &RunConfig,
    plan: &FoldPlan,
    records: &[ImageRecord],
    grid: &[f64],
    folds: Option<&[usize]>,
) -> CliResult<Vec<SweepRow>> {
    Ok(sweep_omega::<T>(cfg, plan, records, grid, folds)?)
}

pub fn sweep(
    common: &Common,
    manifest: &Path,
    grid: Option<Vec<f64>>,
    folds: Option<&[usize]>,
    argv: &[String],
) -> CliResult<()> {
    let cfg = load_config(common.config.as_deref())?;
    if cfg.arch != Arch::Wnet {
        return Err(CliError::Usage(format!("sweep-omega needs arch = \"wnet\", got {}", cfg.arch)));
    }
    let grid = grid.unwrap_or_else(default_omega_grid);
    if grid.is_empty() || grid.iter().any(|w| !(0.0..=1.0).contains(w)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Usage(format!(
            "--grid must be strictly increasing within [0, 1], got {grid:?}"
        )));
    }
    for &k in folds.unwrap_or(&[]) {
        check_fold(k, &cfg)?;
    }
    create_dir(&common.out)?;
    let records = records_for(manifest, &cfg.model_spec().tasks())?;
    let plan = fold_plan(&cfg, &records)?;
    let rows = with_precision!(cfg, sweep_impl(&cfg, &plan, &records, &grid, folds))?;
    sweep_csv(&common.out.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!("omega {:.3}  od {:.4}  ex {:.4}  mean {:.4}", r.omega, r.od_f1, r.ex_f1, r.mean_f1);
    }
    save_config(&common.out, &cfg)?;
    record::write(&common.out, "sweep-omega", Some(&cfg), None, &inputs(common.config.as_deref(), &[manifest]), argv)
}

fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<R>> {
    let mut reader = csv::Reader::from_path(path).map_err(wnet::Error::from)?;
    let rows = reader.deserialize().collect::<Result<Vec<R>, _>>().map_err(wnet::Error::from)?;
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn eval_section(report: &EvalReport, md: &mut String) {
    md.push_str("## Evaluation\n\n");
    md.push_str("| task | images | headline F1 | pixel sens | pixel prec | pixel F1 | lesion sens | lesion prec | lesion F1 | mean eta | AUC |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for (task, a) in &report.aggregate {
        let _ = writeln!(
            md,
            "| {task} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
            a.images,
            a.task_f1,
            a.pixel_rates.sensitivity,
            a.pixel_rates.precision,
            a.pixel_rates.f1,
            a.lesion_rates.sensitivity,
            a.lesion_rates.precision,
            a.lesion_rates.f1,
            fmt_opt(a.mean_eta),
            fmt_opt(a.auc),
        );
    }
    let _ = writeln!(md, "\nLesion overlap factor {}.\n", report.sigma);
}

fn sweep_section(rows: &[SweepRow], md: &mut String) {
    md.push_str("## Omega sweep\n\n| omega | OD F1 | EX F1 | mean F1 |\n|---|---|---|---|\n");
    let best = rows.iter().map(|r| r.mean_f1).fold(f64::NEG_INFINITY, f64::max);
    for r in rows {
        let mark = if r.mean_f1 == best { " (best)" } else { "" };
        let _ = writeln!(md, "| {} | {:.4} | {:.4} | {:.4}{mark} |", r.omega, r.od_f1, r.ex_f1, r.mean_f1);
    }
    md.push('\n');
}

fn trace_section(trace: &[EpochStats], md: &mut String) {
    md.push_str("## Training trace\n\n");
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        md.push_str("Empty trace.\n\n");
        return;
    };
    let _ = writeln!(md, "- epochs: {}", trace.len());
    let _ = writeln!(md, "- loss: {:.4} at epoch {} to {:.4} at epoch {}", first.train_loss, first.epoch, last.train_loss, last.epoch);
    let scored = trace.iter().filter_map(|s| {
        let f: Vec<f64> = [s.od_f1, s.ex_f1].into_iter().flatten().collect();
        (!f.is_empty()).then(|| (s.epoch, f.iter().sum::<f64>() / f.len() as f64))
    });
    if let Some((epoch, f1)) = scored.fold(None, |best: Option<(usize, f64)>, (e, f)| match best {
        Some((_, b)) if b >= f => best,
        _ => Some((e, f)),
    }) {
        let _ = writeln!(md, "- best held-out mean F1: {f1:.4} at epoch {epoch}");
    }
    md.push('\n');
}

pub fn report(
    out: &Path,
    eval: Option<&Path>,
    sweep: Option<&Path>,
    trace: Option<&Path>,
    argv: &[String],
) -> CliResult<()> {
    if eval.is_none() && sweep.is_none() && trace.is_none() {
        return Err(CliError::Usage("report needs at least one of --eval, --sweep, --trace".into()));
    }
    create_dir(out)?;
    let mut md = String::from("# wnet report\n\n");
    if let Some(p) = eval {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(wnet::Error::from)?;
        eval_section(&report, &mut md);
    }
    if let Some(p) = sweep {
        sweep_section(&read_csv::<SweepRow>(p)?, &mut md);
    }
    if let Some(p) = trace {
        trace_section(&read_csv::<EpochStats>(p)?, &mut md);
    }
    write_text(&out.join("summary.md"), &md)?;
    print!("{md}");
    let files: Vec<&Path> = [eval, sweep, trace].into_iter().flatten().collect();
    record::write(out, "report", None, None, &files, argv)
}
