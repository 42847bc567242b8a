use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use mtsunet::checkpoint::load_checkpoint;
use mtsunet::explain::{gradcam, occlusion_map, save_heatmap, Layer, Method, OcclusionConfig};
use mtsunet::model::{ClassifierMode, ModelInput};
use mtsunet::volumes::{load_case, ManifestEntry, Modality, PreprocessConfig};
use mtsunet::Task;

use crate::fail::{CliResult, Failure};
use crate::out::{prepare_out_dir, require_file, resolve_out, write_json};

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Case directory holding `<modality>.nii.gz` files (t1, t1c, t2,
    /// flair) and optionally `mask.nii.gz`, as written by `phantom`.
    #[arg(long)]
    pub case: PathBuf,
    /// occlusion or gradcam.
    #[arg(long, default_value = "occlusion")]
    pub method: String,
    /// Grad-CAM layer: x1..x4, cmd.t2 or cmd.flair.
    #[arg(long, default_value = "x4")]
    pub layer: String,
    #[arg(long)]
    pub task: Option<Task>,
    /// Explained class; defaults to the predicted one.
    #[arg(long)]
    pub class: Option<usize>,
    /// Occlusion cube edge in voxels.
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.0)]
    pub fill: f64,
    /// Overlay opacity of the PNG montage.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn case_entry(dir: &Path, needed: &[Modality]) -> CliResult<ManifestEntry> {
    if !dir.is_dir() {
        return Err(Failure::usage(format!("case directory {} does not exist", dir.display())));
    }
    let mut modalities = BTreeMap::new();
    for m in Modality::ALL {
        let p = dir.join(format!("{}.nii.gz", m.name()));
        if p.is_file() {
            modalities.insert(m, p);
        } else if needed.contains(&m) {
            return Err(Failure::usage(format!("case file {} does not exist", p.display())));
        }
    }
    let mask = dir.join("mask.nii.gz");
    Ok(ManifestEntry {
        case_id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into()),
        modalities,
        mask: mask.is_file().then_some(mask),
        labels: Default::default(),
        split: String::new(),
        row: 0,
    })
}

pub fn run(args: ExplainArgs) -> CliResult {
    let method: Method = args.method.parse()?;
    let layer: Layer = args.layer.parse()?;
    require_file(&args.checkpoint, "checkpoint")?;
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(Failure::usage(format!("--alpha {} outside [0, 1]", args.alpha)));
    }
    let model = load_checkpoint(&args.checkpoint)?;
    let cfg = model.config().clone();
    let task = args.task.unwrap_or(cfg.task);
    if !task.is_classification() {
        return Err(Failure::usage("explanations target a classification task"));
    }
    let mut needed = cfg.modalities.clone();
    if matches!(cfg.head, ClassifierMode::Cmd | ClassifierMode::Dsf) {
        needed.extend([Modality::T2, Modality::Flair]);
    }
    let entry = case_entry(&args.case, &needed)?;
    let case = load_case(&entry, &PreprocessConfig { target: cfg.backbone.input_size })?;

    let input = ModelInput::from_cases(&[&case], &cfg)?;
    let pred = model.predict(&input, false)?;
    let bundle = pred
        .bundles
        .get(&task)
        .ok_or_else(|| Failure::usage(format!("the checkpoint has no {task} head")))?;
    let predicted = bundle.predicted_class(0);
    let class = args.class.unwrap_or(predicted);
    if class > 1 {
        return Err(Failure::usage(format!("--class {class}: tasks are binary")));
    }

    let map = match method {
        Method::Occlusion => {
            let occ = OcclusionConfig {
                patch: [args.patch; 3],
                stride: [args.stride; 3],
                fill: args.fill,
            };
            occlusion_map(&model, &case, task, class, &occ)?
        }
        Method::Gradcam => gradcam(&model, &case, task, layer, class)?,
    };

    let out = resolve_out(args.out, &format!("explain-{}", case.case_id))?;
    prepare_out_dir(&out, args.force)?;
    let stem = match method {
        Method::Occlusion => out.join(format!("{}_{method}", case.case_id)),
        Method::Gradcam => out.join(format!("{}_{method}_{layer}", case.case_id)),
    };
    let underlay = case.volume(Modality::Flair).or_else(|| case.volumes().values().next());
    let (nii, png) = save_heatmap(&map, &stem, underlay, args.alpha)?;
    write_json(
        &out.join("explain.json"),
        &serde_json::json!({
            "case": case.case_id,
            "task": task,
            "method": method,
            "layer": (method == Method::Gradcam).then(|| layer.to_string()),
            "target_class": class,
            "predicted_class": predicted,
            "positive_probability": bundle.positive_probability(0),
            "max": map.max(),
            "peak_zyx": map.peak(),
            "evaluations": map.evaluations,
        }),
    )?;
    println!("wrote {} and {}", nii.display(), png.display());
    Ok(())
}
