use std::path::PathBuf;

use clap::Args;
use mtsunet::graph::softmax_channels;
use mtsunet::metrics::{dice_region, report_regions, MetricReport};
use mtsunet::model::ModelInput;
use mtsunet::trainer::{classification_row, mean_probabilities, seg_argmax, segmentation_row, Ensemble, CLASSIFICATION_COLUMNS};
use mtsunet::volumes::{Case, MaskVolume, PreprocessConfig};
use mtsunet::{Task, Tensor};

use crate::data::{load_cases, select_cohort};
use crate::fail::{CliResult, Failure};
use crate::out::{prepare_out_dir, require_file, resolve_out, write_json};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint; repeat to average an ensemble.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the checkpoint's primary task.
    #[arg(long)]
    pub task: Option<Task>,
    /// Only evaluate manifest rows with this split tag.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value = "external")]
    pub cohort: String,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn member_label(i: usize) -> String {
    format!("model{i}")
}

pub fn run(args: EvalArgs) -> CliResult {
    for c in &args.checkpoints {
        require_file(c, "checkpoint")?;
    }
    if args.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be positive"));
    }
    let ens = Ensemble::from_checkpoints(&args.checkpoints)?;
    let with_ensemble = ens.len() > 1;
    if !with_ensemble {
        log::warn!("a single checkpoint was given; reporting it alone without an ensemble column");
        eprintln!("warning: single checkpoint, no ensemble");
    }
    let cfg = ens.config().clone();
    let task = args.task.unwrap_or(cfg.task);
    let mut trained: Vec<Task> = std::iter::once(cfg.task).chain(cfg.aux_tasks.iter().copied()).collect();
    if !cfg.loss.is_unguided() && !trained.contains(&Task::Segmentation) {
        trained.push(Task::Segmentation);
    }
    if !trained.contains(&task) {
        return Err(Failure::usage(format!(
            "the checkpoints were trained for {}, not {task}",
            trained.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }

    let manifest = args.manifest;
    require_file(&manifest, "manifest")?;
    let eval_cfg = mtsunet::model::ModelConfig { task, ..cfg.clone() };
    let mut cohort = select_cohort(&manifest, &eval_cfg, false)?;
    if let Some(tag) = &args.split {
        cohort.included.retain(|e| &e.split == tag);
    }
    if cohort.included.is_empty() {
        return Err(Failure::data(format!("no eligible {task} cases in {}", manifest.display())));
    }
    let out = resolve_out(args.out, &format!("eval-{task}"))?;
    prepare_out_dir(&out, args.force)?;
    let cases = load_cases(&cohort.included, &PreprocessConfig { target: cfg.backbone.input_size })?;

    let report = if task == Task::Segmentation {
        // A two-channel head predicts whole tumor only.
        let cases = if cfg.backbone.seg_channels == 2 {
            cases
                .iter()
                .map(|c| {
                    let mask = mask_of(c)?.to_binary();
                    Ok(c.with_content(c.volumes().clone(), Some(mask))?)
                })
                .collect::<CliResult<Vec<_>>>()?
        } else {
            cases.clone()
        };
        eval_segmentation(&ens, &cases, args.batch_size, &args.cohort, &out)?
    } else {
        eval_classification(&ens, task, &cases, args.batch_size, &args.cohort, &out)?
    };
    report.save(&out.join("report"))?;
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({
            "task": task,
            "checkpoints": args.checkpoints,
            "ensemble": with_ensemble,
            "cases": cases.len(),
            "excluded": cohort.excluded,
            "auc_degenerate": task.is_classification() && report.column("AUC").is_empty(),
        }),
    )?;
    println!("evaluated {} cases with {} checkpoint(s); report in {}", cases.len(), ens.len(), out.join("report.csv").display());
    let last = report.rows.last().expect("at least one row");
    for (k, v) in &last.values {
        println!("  {} {k}: {v:.4}", last.label);
    }
    Ok(())
}

fn eval_classification(ens: &Ensemble, task: Task, cases: &[Case], batch: usize, cohort: &str, out: &std::path::Path) -> CliResult<MetricReport> {
    let k = ens.len();
    let mut member_probs = vec![Vec::new(); k];
    let mut mean_probs = Vec::new();
    for chunk in cases.chunks(batch) {
        let refs: Vec<&Case> = chunk.iter().collect();
        let input = ModelInput::from_cases(&refs, ens.config())?;
        let (per, mean) = ens.predict_all(&input)?;
        for (i, p) in per.iter().enumerate() {
            let b = &p[&task];
            member_probs[i].extend((0..b.batch()).map(|j| b.positive_probability(j)));
        }
        let b = &mean[&task];
        mean_probs.extend((0..b.batch()).map(|j| b.positive_probability(j)));
    }
    let labels: Vec<usize> = cases
        .iter()
        .map(|c| task.class_index(&c.labels).expect("cohort filtered unknown labels"))
        .collect();
    if labels.iter().all(|&l| l == labels[0]) {
        log::warn!("single-class cohort: AUC is degenerate and omitted");
        eprintln!("warning: all cases share one {task} label; AUC marked degenerate");
    }

    let path = out.join("predictions.csv");
    let write = || -> csv::Result<()> {
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["case_id".to_string(), "label".to_string()];
        header.extend((0..k).map(member_label));
        if k > 1 {
            header.push("ensemble".into());
        }
        header.push("predicted".into());
        w.write_record(&header)?;
        for (i, c) in cases.iter().enumerate() {
            let mut rec = vec![c.case_id.clone(), labels[i].to_string()];
            rec.extend(member_probs.iter().map(|p| format!("{:.6}", p[i])));
            if k > 1 {
                rec.push(format!("{:.6}", mean_probs[i]));
            }
            rec.push(u8::from(mean_probs[i] > 0.5).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;

    let mut report = MetricReport::new(task.name(), cohort, &CLASSIFICATION_COLUMNS);
    for (i, p) in member_probs.iter().enumerate() {
        report.push(member_label(i), classification_row(p, &labels)?);
    }
    if k > 1 {
        report.push("ensemble", classification_row(&mean_probs, &labels)?);
    }
    Ok(report)
}

fn eval_segmentation(ens: &Ensemble, cases: &[Case], batch: usize, cohort: &str, out: &std::path::Path) -> CliResult<MetricReport> {
    let k = ens.len();
    let mut member_masks: Vec<Vec<MaskVolume>> = vec![Vec::new(); k];
    let mut mean_masks = Vec::new();
    for chunk in cases.chunks(batch) {
        let refs: Vec<&Case> = chunk.iter().collect();
        let input = ModelInput::from_cases(&refs, ens.config())?;
        let mut probs: Vec<Tensor> = Vec::with_capacity(k);
        for (i, m) in ens.members().iter().enumerate() {
            let logits = m.predict(&input, true)?.seg_logits.expect("decoder ran");
            for (b, c) in chunk.iter().enumerate() {
                member_masks[i].push(seg_argmax(&logits, b, mask_of(c)?)?);
            }
            probs.push(softmax_channels(&logits));
        }
        let refs: Vec<&Tensor> = probs.iter().collect();
        let mean = mean_probabilities(&refs)?;
        for (b, c) in chunk.iter().enumerate() {
            mean_masks.push(seg_argmax(&mean, b, mask_of(c)?)?);
        }
    }
    let refs: Vec<&Case> = cases.iter().collect();

    let path = out.join("predictions.csv");
    let write = || -> CliResult<()> {
        let csv_err = |e: csv::Error| Failure::usage(format!("cannot write {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        let regions = report_regions(mask_of(&cases[0])?);
        let mut header = vec!["case_id".to_string()];
        header.extend(regions.iter().map(|r| format!("{}_Dice", r.tag())));
        w.write_record(&header).map_err(csv_err)?;
        for (c, p) in cases.iter().zip(&mean_masks) {
            let gt = mask_of(c)?;
            let mut rec = vec![c.case_id.clone()];
            for r in &regions {
                rec.push(format!("{:.6}", dice_region(p, gt, *r)?));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
    };
    write()?;

    let mut report = MetricReport::new(Task::Segmentation.name(), cohort, &[]);
    for (i, masks) in member_masks.iter().enumerate() {
        report.push(member_label(i), segmentation_row(masks, &refs)?);
    }
    if k > 1 {
        report.push("ensemble", segmentation_row(&mean_masks, &refs)?);
    }
    Ok(report)
}

fn mask_of(c: &Case) -> CliResult<&MaskVolume> {
    c.mask
        .as_ref()
        .ok_or_else(|| Failure::data(format!("{} has no mask", c.case_id)))
}
