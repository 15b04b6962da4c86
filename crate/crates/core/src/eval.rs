//! PCK@0.2 evaluation with visible/occluded splits. The reference length is
//! the ground-truth torso diagonal (left shoulder to right hip), falling back
//! to half the bbox diagonal when either end is unlabeled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::model::PoseModel;
use crate::numerics::{Params, Tape};
use crate::train::{assemble_sample, build_model, TrainError};
use crate::keypoints::Visibility;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint does not fit the configured model: {0}")]
    ParamMismatch(String),
    #[error("dataset person has {found} joints, model expects {expected}")]
    JointCountMismatch { found: usize, expected: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub const PCK_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean PCK@0.2 over all labeled joints.
    pub pck_mean: f64,
    pub pck_per_joint: Vec<f64>,
    /// PCK over joints labeled visible (v = 2).
    pub pck_visible: f64,
    /// PCK over occluded labels (v = 1 or 3).
    pub pck_occluded: f64,
    pub mean_px_error: f64,
    pub labeled_joints: usize,
    pub occluded_joints: usize,
}

/// Check that `params` has exactly the names and shapes the model defines.
pub fn validate_params(model: &PoseModel, params: &Params) -> Result<(), EvalError> {
    let expected = model.init_params(0);
    let mut problems = Vec::new();
    for (name, t) in expected.iter() {
        match params.get(name) {
            None => problems.push(format!("missing `{name}`")),
            Some(p) if p.shape() != t.shape() => problems.push(format!(
                "`{name}` has shape {:?}, expected {:?}",
                p.shape(),
                t.shape()
            )),
            _ => {}
        }
    }
    for (name, _) in params.iter() {
        if expected.get(name).is_none() {
            problems.push(format!("unexpected `{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(EvalError::ParamMismatch(problems.join("; ")))
    }
}

/// Evaluate a parameter set over a dataset with the config's toggles.
pub fn evaluate(
    dataset: &Dataset,
    params: &Params,
    run: &RunConfig,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let joints = dataset.samples[0].target().keypoints.len();
    let model = build_model(run, joints)?;
    validate_params(&model, params)?;

    let ls = model.skeleton.joint_index("left_shoulder");
    let rh = model.skeleton.joint_index("right_hip");

    let mut hits = vec![0usize; joints];
    let mut counts = vec![0usize; joints];
    let mut visible = (0usize, 0usize);
    let mut occluded = (0usize, 0usize);
    let mut px_error_sum = 0.0;

    for img in &dataset.samples {
        let found = img.target().keypoints.len();
        if found != joints {
            return Err(EvalError::JointCountMismatch {
                found,
                expected: joints,
            });
        }
        let sample = assemble_sample(img, run, &[], None)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &sample.crop, sample.center)?;
        let pred = out.final_pose();

        let reference = match (ls, rh) {
            (Some(a), Some(b))
                if sample.gt_pose.joints[a].v.is_labeled()
                    && sample.gt_pose.joints[b].v.is_labeled() =>
            {
                let ja = &sample.gt_pose.joints[a];
                let jb = &sample.gt_pose.joints[b];
                ((ja.x - jb.x).powi(2) + (ja.y - jb.y).powi(2)).sqrt()
            }
            _ => sample.bbox_diagonal * 0.5,
        }
        .max(1e-6);

        for (j, gt) in sample.gt_pose.joints.iter().enumerate() {
            if !gt.v.is_labeled() {
                continue;
            }
            let p = &pred.joints[j];
            let dist = ((p.x - gt.x).powi(2) + (p.y - gt.y).powi(2)).sqrt();
            let hit = dist <= PCK_THRESHOLD * reference;
            counts[j] += 1;
            px_error_sum += dist;
            if hit {
                hits[j] += 1;
            }
            if gt.v == Visibility::Visible {
                visible.1 += 1;
                visible.0 += hit as usize;
            } else if gt.v.is_occluded_split() {
                occluded.1 += 1;
                occluded.0 += hit as usize;
            }
        }
    }

    let total_labeled: usize = counts.iter().sum();
    let total_hits: usize = hits.iter().sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(EvalReport {
        samples: dataset.len(),
        pck_mean: ratio(total_hits, total_labeled),
        pck_per_joint: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| ratio(h, c))
            .collect(),
        pck_visible: ratio(visible.0, visible.1),
        pck_occluded: ratio(occluded.0, occluded.1),
        mean_px_error: if total_labeled == 0 {
            0.0
        } else {
            px_error_sum / total_labeled as f64
        },
        labeled_joints: total_labeled,
        occluded_joints: occluded.1,
    })
}

/// PCK computed directly from prediction/ground-truth pose pairs; the unit
/// oracle behind [`evaluate`] and the fixture tests.
pub fn pck_from_pairs(
    pairs: &[(crate::keypoints::KeypointSet, crate::keypoints::KeypointSet, f64)],
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (pred, gt, reference) in pairs {
        for (p, g) in pred.joints.iter().zip(&gt.joints) {
            if !g.v.is_labeled() {
                continue;
            }
            total += 1;
            let dist = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
            if dist <= PCK_THRESHOLD * reference {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::{Joint, KeypointSet};

    fn pose(points: &[(f64, f64)], v: Visibility) -> KeypointSet {
        KeypointSet {
            joints: points.iter().map(|&(x, y)| Joint { x, y, v }).collect(),
        }
    }

    #[test]
    fn exact_predictions_have_pck_one() {
        let gt = pose(&[(3.0, 4.0), (10.0, 2.0)], Visibility::Visible);
        let pairs = vec![(gt.clone(), gt.clone(), 10.0)];
        assert_eq!(pck_from_pairs(&pairs), 1.0);
    }

    #[test]
    fn origin_predictions_have_pck_zero() {
        let gt = pose(&[(30.0, 40.0), (50.0, 20.0)], Visibility::Visible);
        let pred = pose(&[(0.0, 0.0), (0.0, 0.0)], Visibility::Visible);
        let pairs = vec![(pred, gt, 10.0)];
        assert_eq!(pck_from_pairs(&pairs), 0.0);
    }

    #[test]
    fn hand_counted_fixture_is_two_thirds() {
        // three one-joint samples with reference 10: threshold distance 2.
        let mk = |gx: f64, px: f64| {
            (
                pose(&[(px, 0.0)], Visibility::Visible),
                pose(&[(gx, 0.0)], Visibility::Visible),
                10.0,
            )
        };
        let pairs = vec![
            mk(0.0, 1.0),  // hit
            mk(0.0, 1.9),  // hit
            mk(0.0, 2.1),  // miss
        ];
        let pck = pck_from_pairs(&pairs);
        assert!((pck - 2.0 / 3.0).abs() < 1e-12);
    }
}
