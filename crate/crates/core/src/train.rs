//! Training: sample assembly (augment, crop, encode), the composite loss, an
//! adaptive-moment optimizer, and the epoch loop. Identical (dataset, config,
//! seed) triples produce bitwise-identical trajectories.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::BodyCenter;
use crate::augment::augment_sample;
use crate::config::RunConfig;
use crate::crop::{crop_transform, extract_crop, transform_keypoints};
use crate::dataset::Dataset;
use crate::heatmap::{encode_heatmaps, HeatmapSet, HEATMAP_STRIDE};
use crate::keypoints::{AnnotatedImage, KeypointSet, Visibility};
use crate::model::{ModelConfig, ModelError, PoseModel};
use crate::numerics::{NumericsError, Params, Tape, Tensor, TensorId};
use crate::skeleton::{coco17_skeleton_with, crowdpose14_skeleton_with, HopSupport, SkeletonGraph};
use crate::util::mix_seed2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {dataset} joints per person but no matching skeleton (expected 17 or 14)")]
    UnsupportedJointCount { dataset: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Loss weights of the composite objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pose: f64,
}

/// Scalar tape nodes of the loss terms, plus the total.
pub struct LossNodes {
    pub multi: TensorId,
    pub target: TensorId,
    pub pose: TensorId,
    pub total: TensorId,
}

/// Mean squared error between a predicted `[J,H,W]` node and a constant
/// target heatmap set.
fn mse_loss(tape: &mut Tape, pred: TensorId, gt: &HeatmapSet) -> Result<TensorId, NumericsError> {
    let gt_t = Tensor::new(
        vec![gt.joints, gt.height, gt.width],
        gt.data.clone(),
    )
    .expect("heatmap shape");
    let gt_id = tape.constant(gt_t);
    let diff = tape.sub(pred, gt_id)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Composite loss: heatmap MSE for both heads plus `lambda` times the mean L1
/// distance between refined and ground-truth normalized coordinates over
/// labeled joints. Absent refinement (or with no labeled joints) the pose
/// term is a constant zero.
pub fn total_loss(
    tape: &mut Tape,
    pred_multi: TensorId,
    pred_target: TensorId,
    gt_multi: &HeatmapSet,
    gt_target: &HeatmapSet,
    refined_norm: Option<TensorId>,
    gt_pose: &KeypointSet,
    crop_w: usize,
    crop_h: usize,
    weights: LossWeights,
) -> Result<LossNodes, NumericsError> {
    let multi = mse_loss(tape, pred_multi, gt_multi)?;
    let target = mse_loss(tape, pred_target, gt_target)?;

    let n = gt_pose.len();
    let labeled = gt_pose.labeled_count();
    let pose = match refined_norm {
        Some(refined) if labeled > 0 => {
            let mut gt_norm = vec![0.0; 2 * n];
            let mut mask = vec![0.0; 2 * n];
            for (i, j) in gt_pose.joints.iter().enumerate() {
                gt_norm[i] = j.x / crop_w as f64;
                gt_norm[n + i] = j.y / crop_h as f64;
                if j.v.is_labeled() {
                    mask[i] = 1.0;
                    mask[n + i] = 1.0;
                }
            }
            let gt_id = tape.constant(Tensor::new(vec![2, n], gt_norm).expect("pose shape"));
            let mask_id = tape.constant(Tensor::new(vec![2, n], mask).expect("mask shape"));
            let diff = tape.sub(refined, gt_id)?;
            let dist = tape.abs(diff);
            let masked = tape.mul(dist, mask_id)?;
            let sum = tape.sum_all(masked);
            tape.scale(sum, 1.0 / (2 * labeled) as f64)
        }
        _ => tape.constant(Tensor::scalar(0.0)),
    };

    let heat = tape.add(multi, target)?;
    let weighted_pose = tape.scale(pose, weights.lambda_pose);
    let total = tape.add(heat, weighted_pose)?;
    Ok(LossNodes {
        multi,
        target,
        pose,
        total,
    })
}

/// One assembled training/eval example.
pub struct Sample {
    pub crop: Tensor,
    pub gt_multi: HeatmapSet,
    pub gt_target: HeatmapSet,
    /// Target keypoints in crop pixel coordinates.
    pub gt_pose: KeypointSet,
    /// Body center in feature-map coordinates.
    pub center: BodyCenter,
    /// Crop-space target bbox diagonal (for evaluation references).
    pub bbox_diagonal: f64,
}

/// Crop, encode, and locate the body center for one annotated image. With an
/// RNG the configured augmentations run first; without one the sample is
/// deterministic and the center is the crop center (the inference rule).
pub fn assemble_sample(
    img: &AnnotatedImage,
    run: &RunConfig,
    pool: &[crate::augment::InstanceCutout],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Sample, TrainError> {
    let (crop_w, crop_h) = (run.train.crop_width, run.train.crop_height);
    let augmented;
    let (source, train_mode) = match rng {
        Some(rng) if run.train.use_augment => {
            let (out, _) = augment_sample(img, pool, &run.augment, rng)?;
            augmented = out;
            (&augmented, true)
        }
        Some(_) => (img, true),
        None => (img, false),
    };

    let target = source.target();
    let t = crop_transform(&target.bbox, crop_w, crop_h);
    let crop = extract_crop(&source.image, &t, crop_w, crop_h);
    let gt_pose = transform_keypoints(&target.keypoints, &t);

    let mut gt_multi = HeatmapSet::zeros(
        gt_pose.len(),
        crop_h / HEATMAP_STRIDE,
        crop_w / HEATMAP_STRIDE,
    );
    for person in &source.persons {
        let kps = transform_keypoints(&person.keypoints, &t);
        let hm = encode_heatmaps(&kps, crop_w, crop_h, run.train.heatmap_sigma);
        gt_multi.max_with(&hm);
    }
    let gt_target = encode_heatmaps(&gt_pose, crop_w, crop_h, run.train.heatmap_sigma);

    let center = if train_mode {
        gt_pose
            .mean_of(&[Visibility::Visible, Visibility::Occluded])
            .unwrap_or((crop_w as f64 / 2.0, crop_h as f64 / 2.0))
    } else {
        (crop_w as f64 / 2.0, crop_h as f64 / 2.0)
    };
    Ok(Sample {
        crop,
        gt_multi,
        gt_target,
        gt_pose,
        center: BodyCenter {
            x: center.0 / HEATMAP_STRIDE as f64,
            y: center.1 / HEATMAP_STRIDE as f64,
        },
        bbox_diagonal: target.bbox.diagonal() * t.scale,
    })
}

/// Adaptive-moment (Adam) optimizer over named parameters.
pub struct AdamOptimizer {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamOptimizer {
    pub fn new(learning_rate: f64) -> Self {
        AdamOptimizer {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(tensor) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Per-epoch mean loss components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_multi: f64,
    pub loss_target: f64,
    pub loss_pose: f64,
    pub loss_total: f64,
}

pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<EpochLog>,
    pub model: PoseModel,
}

/// Pick the skeleton matching the dataset's joint count.
pub fn skeleton_for(run: &RunConfig, joints: usize) -> Result<SkeletonGraph, TrainError> {
    let support = if run.model.hops_within {
        HopSupport::Within
    } else {
        HopSupport::Exact
    };
    match joints {
        17 => Ok(coco17_skeleton_with(run.model.hops, support)),
        14 => Ok(crowdpose14_skeleton_with(run.model.hops, support)),
        other => Err(TrainError::UnsupportedJointCount { dataset: other }),
    }
}

/// Build the model implied by a config and a dataset's joint count.
pub fn build_model(run: &RunConfig, joints: usize) -> Result<PoseModel, TrainError> {
    let skeleton = skeleton_for(run, joints)?;
    Ok(PoseModel::new(
        ModelConfig::from_run(run, joints),
        skeleton,
    ))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rand::Rng::gen_range(&mut rng, 0..=i as u64)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Run one gradient step over a batch of samples, returning the summed loss
/// parts. Gradients are averaged over the batch in sample order.
fn batch_step(
    model: &PoseModel,
    params: &mut Params,
    opt: &mut AdamOptimizer,
    samples: &[Sample],
    weights: LossWeights,
) -> Result<(f64, f64, f64, f64), TrainError> {
    let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let scale = 1.0 / samples.len() as f64;
    let mut parts = (0.0, 0.0, 0.0, 0.0);
    for sample in samples {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &sample.crop, sample.center)?;
        let loss = total_loss(
            &mut tape,
            out.multi_hm,
            out.target_hm,
            &sample.gt_multi,
            &sample.gt_target,
            out.refined.as_ref().map(|r| r.coords_norm),
            &sample.gt_pose,
            model.cfg.crop_w,
            model.cfg.crop_h,
            weights,
        )?;
        parts.0 += tape.data(loss.multi)[0];
        parts.1 += tape.data(loss.target)[0];
        parts.2 += tape.data(loss.pose)[0];
        parts.3 += tape.data(loss.total)[0];
        tape.backward(loss.total)?;
        for (name, id) in bound.iter() {
            if let Some(g) = tape.grad(*id) {
                let acc = grad_acc
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, gv) in acc.iter_mut().zip(g) {
                    *a += gv * scale;
                }
            }
        }
    }
    opt.step(params, &grad_acc);
    Ok(parts)
}

/// Train a model from scratch on `dataset`.
pub fn train(dataset: &Dataset, run: &RunConfig, seed: u64) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let joints = dataset.samples[0].target().keypoints.len();
    let model = build_model(run, joints)?;
    let mut params = model.init_params(seed);
    let mut opt = AdamOptimizer::new(run.train.learning_rate);
    let weights = LossWeights {
        lambda_pose: run.train.lambda_pose,
    };

    let mut log = Vec::with_capacity(run.train.epochs);
    for epoch in 1..=run.train.epochs {
        let order = shuffled_indices(dataset.len(), mix_seed2(seed, epoch as u64, 0x0bdec));
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (step, batch) in order.chunks(run.train.batch_size).enumerate() {
            let samples: Vec<Sample> = batch
                .iter()
                .map(|&idx| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed2(
                        seed,
                        epoch as u64,
                        idx as u64,
                    ));
                    assemble_sample(&dataset.samples[idx], run, &dataset.pool, Some(&mut rng))
                })
                .collect::<Result<_, _>>()?;
            let parts = batch_step(&model, &mut params, &mut opt, &samples, weights)?;
            if !parts.3.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            sums.0 += parts.0;
            sums.1 += parts.1;
            sums.2 += parts.2;
            sums.3 += parts.3;
        }
        let n = dataset.len() as f64;
        log.push(EpochLog {
            epoch,
            loss_multi: sums.0 / n,
            loss_target: sums.1 / n,
            loss_pose: sums.2 / n,
            loss_total: sums.3 / n,
        });
    }

    Ok(TrainOutcome { params, log, model })
}

/// Render the per-epoch loss log as CSV.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss_multi,loss_target,loss_pose,loss_total\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.10},{:.10},{:.10},{:.10}\n",
            e.epoch, e.loss_multi, e.loss_target, e.loss_pose, e.loss_total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::{BBox, Joint, Person};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model.channels = 8;
        run.model.backbone_blocks = 2;
        run.model.gcn_hidden = 8;
        run.model.gcn_layers = 1;
        run.train.epochs = 1;
        run.train.batch_size = 4;
        // these fixtures carry no instance pool
        run.augment.paste_prob = 0.0;
        run
    }

    fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
        let mut samples = Vec::new();
        for i in 0..n {
            let scene_seed = mix_seed2(seed, i as u64, 0xd5);
            let (_, rendered) = crate::synthdata::sample_scene(scene_seed, 96).unwrap();
            samples.push(rendered.annotated);
        }
        Dataset {
            samples,
            pool: Vec::new(),
            coco: crate::coco::CocoDataset {
                images: Vec::new(),
                annotations: Vec::new(),
                categories: Vec::new(),
            },
        }
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let kps = KeypointSet {
            joints: vec![Joint {
                x: 18.0,
                y: 24.0,
                v: Visibility::Visible,
            }],
        };
        let gt = encode_heatmaps(&kps, 36, 48, 2.0);
        let mut tape = Tape::new();
        let pred = tape.constant(
            Tensor::new(vec![1, 12, 9], gt.data.clone()).unwrap(),
        );
        let refined = tape.constant(Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap());
        let loss = total_loss(
            &mut tape,
            pred,
            pred,
            &gt,
            &gt,
            Some(refined),
            &kps,
            36,
            48,
            LossWeights { lambda_pose: 1.0 },
        )
        .unwrap();
        assert_eq!(tape.data(loss.total)[0], 0.0);
    }

    #[test]
    fn lambda_zero_ignores_refined_pose() {
        let kps = KeypointSet {
            joints: vec![Joint {
                x: 18.0,
                y: 24.0,
                v: Visibility::Visible,
            }],
        };
        let gt = encode_heatmaps(&kps, 36, 48, 2.0);
        let eval = |refined_xy: (f64, f64)| {
            let mut tape = Tape::new();
            let pred = tape.constant(Tensor::zeros(vec![1, 12, 9]));
            let refined = tape.constant(
                Tensor::new(vec![2, 1], vec![refined_xy.0, refined_xy.1]).unwrap(),
            );
            let loss = total_loss(
                &mut tape,
                pred,
                pred,
                &gt,
                &gt,
                Some(refined),
                &kps,
                36,
                48,
                LossWeights { lambda_pose: 0.0 },
            )
            .unwrap();
            tape.data(loss.total)[0]
        };
        assert_eq!(eval((0.5, 0.5)), eval((99.0, -3.0)));
    }

    #[test]
    fn loss_matches_hand_summed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rnd = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect()
        };
        let j = 2;
        let (h, w) = (3, 3);
        let gt_multi = HeatmapSet {
            joints: j,
            height: h,
            width: w,
            data: rnd(&mut rng, j * h * w),
        };
        let gt_target = HeatmapSet {
            joints: j,
            height: h,
            width: w,
            data: rnd(&mut rng, j * h * w),
        };
        let pm = rnd(&mut rng, j * h * w);
        let pt = rnd(&mut rng, j * h * w);
        let refined = rnd(&mut rng, 4);
        let pose = KeypointSet {
            joints: vec![
                Joint { x: 5.0, y: 7.0, v: Visibility::Visible },
                Joint { x: 0.0, y: 0.0, v: Visibility::Unlabeled },
            ],
        };
        let lambda = 0.7;

        let mut tape = Tape::new();
        let pm_id = tape.constant(Tensor::new(vec![j, h, w], pm.clone()).unwrap());
        let pt_id = tape.constant(Tensor::new(vec![j, h, w], pt.clone()).unwrap());
        let r_id = tape.constant(Tensor::new(vec![2, 2], refined.clone()).unwrap());
        let loss = total_loss(
            &mut tape, pm_id, pt_id, &gt_multi, &gt_target, Some(r_id), &pose, 12, 16,
            LossWeights { lambda_pose: lambda },
        )
        .unwrap();

        // independent elementwise-sum oracle
        let mse = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        let l_m = mse(&pm, &gt_multi.data);
        let l_t = mse(&pt, &gt_target.data);
        // only joint 0 is labeled: columns 0 of rows x and y
        let gtn = [5.0 / 12.0, 7.0 / 16.0];
        let l_p = ((refined[0] - gtn[0]).abs() + (refined[2] - gtn[1]).abs()) / 2.0;
        let expect = l_m + l_t + lambda * l_p;
        assert!((tape.data(loss.total)[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn one_epoch_is_bitwise_reproducible() {
        let run = tiny_run();
        let ds = synthetic_dataset(8, 5);
        let a = train(&ds, &run, 33).unwrap();
        let b = train(&ds, &run, 33).unwrap();
        assert_eq!(
            a.log.last().unwrap().loss_total.to_bits(),
            b.log.last().unwrap().loss_total.to_bits()
        );
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn all_toggles_off_matches_plain_heatmap_model() {
        let mut run = tiny_run();
        run.train.use_augment = false;
        run.train.use_adam = false;
        run.train.use_gcn = false;
        let ds = synthetic_dataset(4, 6);
        let out = train(&ds, &run, 2).unwrap();
        assert!(out
            .params
            .names()
            .all(|n| n.starts_with("backbone.") || n.starts_with("head.")));
        // pose loss is identically zero without the refiner
        assert_eq!(out.log[0].loss_pose, 0.0);
    }

    #[test]
    fn empty_dataset_errors() {
        let run = tiny_run();
        let ds = Dataset {
            samples: Vec::new(),
            pool: Vec::new(),
            coco: crate::coco::CocoDataset {
                images: Vec::new(),
                annotations: Vec::new(),
                categories: Vec::new(),
            },
        };
        assert!(matches!(train(&ds, &run, 1), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn assemble_sample_centers_on_labeled_joints() {
        let mut image = image::RgbImage::new(64, 64);
        for p in image.pixels_mut() {
            *p = image::Rgb([50, 50, 50]);
        }
        let joints: Vec<Joint> = (0..17)
            .map(|i| Joint {
                x: 24.0 + (i % 3) as f64,
                y: 20.0 + (i % 5) as f64,
                v: Visibility::Visible,
            })
            .collect();
        let img = AnnotatedImage {
            image,
            persons: vec![Person {
                bbox: BBox { x: 16.0, y: 12.0, w: 20.0, h: 24.0 },
                keypoints: KeypointSet { joints },
            }],
            target_index: 0,
        };
        let run = tiny_run();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = assemble_sample(&img, &run, &[], Some(&mut rng)).unwrap();
        assert_eq!(s.crop.shape(), &[3, 48, 36]);
        // eval mode centers on the crop middle instead
        let e = assemble_sample(&img, &run, &[], None).unwrap();
        assert!((e.center.x - 36.0 / 2.0 / 4.0).abs() < 1e-12);
        assert!((e.center.y - 48.0 / 2.0 / 4.0).abs() < 1e-12);
    }
}
