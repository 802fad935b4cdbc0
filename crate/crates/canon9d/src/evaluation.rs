//! File-level evaluation of predicted boxes against ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use canon9d_core::eval::{evaluate, EvalError, EvalOptions, EvalReport};
use canon9d_core::geometry::Pose9D;
use serde::Serialize;
use thiserror::Error;

use crate::records::{compile_rules, pose_from_json, read_json, EvalEntry, RecordError, RulesFile};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("object {id:?}: {source}")]
    Pose {
        id: String,
        source: canon9d_core::geometry::GeometryError,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryJson {
    pub samples: usize,
    pub missing: usize,
    pub acc_aware: f64,
    pub acc_unaware: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportJson {
    pub acc_aware: f64,
    pub acc_unaware: f64,
    pub mean_iou: f64,
    pub samples: usize,
    pub excluded_categories: Vec<String>,
    pub per_category: BTreeMap<String, CategoryJson>,
}

impl From<&EvalReport> for ReportJson {
    fn from(r: &EvalReport) -> Self {
        Self {
            acc_aware: r.acc_aware,
            acc_unaware: r.acc_unaware,
            mean_iou: r.mean_iou,
            samples: r.samples,
            excluded_categories: r.excluded_categories.clone(),
            per_category: r
                .per_category
                .iter()
                .map(|(k, c)| {
                    (
                        k.clone(),
                        CategoryJson {
                            samples: c.samples,
                            missing: c.missing,
                            acc_aware: c.acc_aware,
                            acc_unaware: c.acc_unaware,
                            mean_iou: c.mean_iou,
                        },
                    )
                })
                .collect(),
        }
    }
}

fn poses(entries: &BTreeMap<String, EvalEntry>) -> Result<BTreeMap<String, Pose9D>, EvaluationError> {
    entries
        .iter()
        .map(|(id, e)| {
            pose_from_json(e.pose())
                .map(|p| (id.clone(), p))
                .map_err(|source| EvaluationError::Pose { id: id.clone(), source })
        })
        .collect()
}

/// Categories come from ground-truth entries, falling back to predictions.
pub fn evaluate_entries(
    pred: &BTreeMap<String, EvalEntry>,
    gt: &BTreeMap<String, EvalEntry>,
    rules: &RulesFile,
    options: &EvalOptions,
) -> Result<EvalReport, EvaluationError> {
    let categories = gt
        .iter()
        .filter_map(|(id, e)| {
            e.category()
                .or_else(|| pred.get(id).and_then(EvalEntry::category))
                .map(|c| (id.clone(), c.to_string()))
        })
        .collect();
    let symmetry = compile_rules(rules)?;
    Ok(evaluate(&poses(pred)?, &poses(gt)?, &symmetry, &categories, options)?)
}

pub fn evaluate_files(
    pred: &Path,
    gt: &Path,
    rules: &RulesFile,
    options: &EvalOptions,
) -> Result<EvalReport, EvaluationError> {
    let pred: BTreeMap<String, EvalEntry> = read_json(pred)?;
    let gt: BTreeMap<String, EvalEntry> = read_json(gt)?;
    evaluate_entries(&pred, &gt, rules, options)
}
