use std::path::PathBuf;

use clap::Args;
use mtsunet::trainer::{run_ablation, split_folds, AblationGrid};

use crate::data::{load_cases, load_config, manifest_path, select_cohort, too_few};
use crate::fail::{CliResult, Failure};
use crate::out::{prepare_out_dir, resolve_out};

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// modules, depth or sequences.
    pub grid: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: AblateArgs) -> CliResult {
    let grid: AblationGrid = args.grid.parse()?;
    let mut overrides = Vec::new();
    if let Some(s) = args.seed {
        overrides.push(format!("train.seed={s}"));
    }
    overrides.extend(args.overrides);
    let file = load_config(args.config.as_deref(), &overrides)?;
    let cfg = file.train_config()?;
    if !cfg.model.task.is_classification() {
        return Err(Failure::usage("ablation grids compare classifiers; model.task must be a classification task"));
    }
    let manifest = manifest_path(args.manifest, &file)?;
    // The widest variant of every grid needs all sequences and both branches.
    let mut widest = cfg.model.clone();
    widest.head = mtsunet::model::ClassifierMode::Dsf;
    widest.modalities = mtsunet::volumes::Modality::ALL.to_vec();
    let cohort = select_cohort(&manifest, &widest, true)?;
    if cohort.included.len() < cfg.folds {
        return Err(too_few(cfg.model.task, &cohort, cfg.folds));
    }
    let out = resolve_out(args.out, &format!("ablate-{grid}"))?;
    prepare_out_dir(&out, args.force)?;

    let cases = load_cases(&cohort.included, &file.preprocess())?;
    let task = cfg.model.task;
    let items: Vec<(String, Option<usize>)> = cases
        .iter()
        .map(|c| (c.case_id.clone(), task.class_index(&c.labels)))
        .collect();
    let plan = split_folds(&items, cfg.folds, cfg.seed)?;
    let table = run_ablation(grid, &cfg, &plan, &cases, Some(&out))?;
    let stem = out.join(format!("ablation_{grid}"));
    table.save(&stem)?;
    println!(
        "{grid} ablation: {} rows x {} column(s); table in {}",
        table.rows().len(),
        table.columns().len().max(1),
        stem.with_extension("csv").display()
    );
    Ok(())
}
