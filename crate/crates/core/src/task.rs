use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::volumes::{Codel, Grade, Idh, Labels, Modality};

/// Prediction target. Classification tasks are binary; class index 1 is the
/// "positive" class (IDH-mutant, 1p/19q-codeleted, high grade).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Idh,
    Codel,
    Grade,
}

impl Task {
    pub const CLASSIFICATION: [Task; 3] = [Task::Idh, Task::Codel, Task::Grade];

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Idh => "idh",
            Task::Codel => "codel",
            Task::Grade => "grade",
        }
    }

    pub fn is_classification(self) -> bool {
        self != Task::Segmentation
    }

    /// Class index for this task, or `None` when the label is unknown.
    pub fn class_index(self, labels: &Labels) -> Option<usize> {
        match self {
            Task::Segmentation => None,
            Task::Idh => match labels.idh {
                Idh::Mutant => Some(1),
                Idh::Wildtype => Some(0),
                Idh::Unknown => None,
            },
            Task::Codel => match labels.codel {
                Codel::Codeleted => Some(1),
                Codel::Intact => Some(0),
                Codel::Unknown => None,
            },
            Task::Grade => match labels.grade {
                Grade::Hgg => Some(1),
                Grade::Lgg => Some(0),
                Grade::Unknown => None,
            },
        }
    }

    /// Modalities a case must provide to take part in this task. IDH and
    /// segmentation need the full conventional set; 1p/19q and grade cohorts
    /// only guarantee post-contrast T1 and T2.
    pub fn required_modalities(self) -> &'static [Modality] {
        match self {
            Task::Segmentation | Task::Idh => &Modality::ALL,
            Task::Codel | Task::Grade => &[Modality::T1c, Modality::T2],
        }
    }

    pub fn class_names(self) -> [&'static str; 2] {
        match self {
            Task::Segmentation => ["background", "tumor"],
            Task::Idh => ["wildtype", "mutant"],
            Task::Codel => ["intact", "codeleted"],
            Task::Grade => ["LGG", "HGG"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "segmentation" | "seg" => Ok(Task::Segmentation),
            "idh" => Ok(Task::Idh),
            "codel" | "1p19q" => Ok(Task::Codel),
            "grade" => Ok(Task::Grade),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}
