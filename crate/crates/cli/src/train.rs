use std::path::PathBuf;

use clap::Args;
use mtsunet::trainer::{cross_validate, cv_report, split_folds};
use mtsunet::Task;

use crate::data::{load_cases, load_config, manifest_path, select_cohort, too_few};
use crate::fail::CliResult;
use crate::out::{prepare_out_dir, resolve_out, write_json};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `model.task`.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` config override; repeatable, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: TrainArgs) -> CliResult {
    let mut overrides = Vec::new();
    if let Some(t) = args.task {
        overrides.push(format!("model.task=\"{t}\""));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("train.seed={s}"));
    }
    overrides.extend(args.overrides);
    let file = load_config(args.config.as_deref(), &overrides)?;
    let cfg = file.train_config()?;
    let task = cfg.model.task;
    let manifest = manifest_path(args.manifest, &file)?;
    let cohort = select_cohort(&manifest, &cfg.model, true)?;
    if cohort.included.len() < cfg.folds {
        return Err(too_few(task, &cohort, cfg.folds));
    }
    let out = resolve_out(args.out, &format!("train-{task}-seed{}", cfg.seed))?;
    prepare_out_dir(&out, args.force)?;
    std::fs::write(out.join("config.toml"), file.to_toml())
        .map_err(|e| crate::fail::Failure::usage(format!("{}: {e}", out.display())))?;

    let cases = load_cases(&cohort.included, &file.preprocess())?;
    let items: Vec<(String, Option<usize>)> = cases
        .iter()
        .map(|c| (c.case_id.clone(), task.class_index(&c.labels)))
        .collect();
    let plan = split_folds(&items, cfg.folds, cfg.seed)?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }
    let counts: Vec<serde_json::Value> = plan
        .class_counts
        .iter()
        .map(|m| {
            m.iter()
                .map(|(k, v)| (k.map_or("unlabeled".to_string(), |c| c.to_string()), serde_json::json!(v)))
                .collect::<serde_json::Map<_, _>>()
                .into()
        })
        .collect();
    write_json(
        &out.join("folds.json"),
        &serde_json::json!({"folds": plan.folds, "class_counts": counts, "warnings": plan.warnings}),
    )?;
    if cfg.model.is_unguided() {
        log::info!("loss.alpha = 0: training without segmentation guidance (SwinT mode)");
    }

    let runs = cross_validate(&cfg, &plan, &cases, Some(&out))?;
    for r in &runs {
        let path = out.join(format!("fold{}", r.record.fold)).join("run.json");
        write_json(&path, &serde_json::to_value(&r.record).expect("record serializes"))?;
    }
    let report = cv_report(&cfg, &plan, &runs, &cases, &file.data.cohort)?;
    report.save(&out.join("report"))?;

    println!(
        "trained {} folds on {} cases ({} excluded){}; report in {}",
        runs.len(),
        cases.len(),
        cohort.excluded.len(),
        if cfg.model.is_unguided() { " in SwinT mode" } else { "" },
        out.join("report.csv").display()
    );
    for (col, agg) in report.summary() {
        println!("  {col}: {agg}");
    }
    Ok(())
}
