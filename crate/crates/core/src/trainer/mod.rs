//! Cross-validation, augmentation, the training loop with early stopping,
//! probability ensembling and ablation grids.

mod ablation;
mod augment;
mod ensemble;
mod folds;
mod report;
mod train;

pub use ablation::{
    ablation_variants, depth_variant, run_ablation, AblationEntry, AblationGrid, AblationTable, AblationVariant,
    ABLATION_METRICS, SEQUENCE_SUBSETS,
};
pub use augment::{augment, flip, rot90, scale_intensity, AugmentConfig};
pub use ensemble::{ensemble_predict, mean_probabilities, Ensemble};
pub use folds::{split_folds, split_manifest, FoldPlan};
pub use report::{classification_row, cv_report, model_row, positive_probabilities, segmentation_row, CLASSIFICATION_COLUMNS};
pub use train::{
    case_ineligibility, check_eligible, cross_validate, evaluate, seg_argmax, train_fold, train_on, EarlyStopping,
    EpochRecord, FoldRun, RunRecord, StopDecision, TrainConfig,
};
