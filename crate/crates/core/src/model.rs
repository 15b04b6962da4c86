//! The desk-scale pose model: a small strided CNN backbone, a multi-person
//! heatmap head on the raw features, the attention block, a target-person
//! heatmap head on the enhanced features, and the graph refinement stage fed
//! by the decoded initial pose.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{adam_forward, init_adam_params, AdamConfig, AdamParams, BodyCenter};
use crate::config::RunConfig;
use crate::gcn::{init_refiner_params, refine_pose, GcnError, Refined, RefinerConfig, RefinerParams};
use crate::heatmap::{decode_heatmaps, HeatmapSet, HEATMAP_STRIDE};
use crate::keypoints::KeypointSet;
use crate::numerics::{Bound, NumericsError, Params, Tape, Tensor, TensorId};
use crate::skeleton::SkeletonGraph;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Gcn(#[from] GcnError),
    #[error("crop has shape {got:?}, expected [3, {h}, {w}]")]
    BadCrop { got: Vec<usize>, h: usize, w: usize },
}

/// Static model shape, derived from a [`RunConfig`] and a skeleton.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub channels: usize,
    pub backbone_blocks: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub adam: AdamConfig,
    pub refiner: RefinerConfig,
    pub use_adam: bool,
    pub use_gcn: bool,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig, joints: usize) -> Self {
        let channels = cfg.model.channels;
        ModelConfig {
            joints,
            channels,
            backbone_blocks: cfg.model.backbone_blocks,
            crop_w: cfg.train.crop_width,
            crop_h: cfg.train.crop_height,
            adam: AdamConfig {
                channels,
                kernel: cfg.model.attention_kernel,
                sigmoid_gate: cfg.model.sigmoid_gate,
                residual: cfg.model.spatial_residual,
            },
            refiner: RefinerConfig {
                feature_channels: channels,
                hidden: cfg.model.gcn_hidden,
                layers: cfg.model.gcn_layers,
                hops: cfg.model.hops,
                stride: HEATMAP_STRIDE,
            },
            use_adam: cfg.train.use_adam,
            use_gcn: cfg.train.use_gcn,
        }
    }

    /// Per-block (in_channels, out_channels, stride). The first two blocks
    /// downsample to 1/4 resolution; later blocks refine at that scale.
    fn blocks(&self) -> Vec<(usize, usize, usize)> {
        let mid = (self.channels / 2).max(8);
        let mut blocks = vec![(3, mid, 2), (mid, self.channels, 2)];
        for _ in 2..self.backbone_blocks {
            blocks.push((self.channels, self.channels, 1));
        }
        blocks
    }
}

pub struct PoseModel {
    pub cfg: ModelConfig,
    pub skeleton: SkeletonGraph,
}

/// Everything one forward pass produces.
pub struct ModelOutput {
    /// Multi-person heatmap logits, `[J, H/4, W/4]`.
    pub multi_hm: TensorId,
    /// Target-person heatmap logits, `[J, H/4, W/4]`.
    pub target_hm: TensorId,
    /// The feature map the target head consumed.
    pub features: TensorId,
    /// Pose decoded from the target heatmaps (crop pixel coordinates).
    pub initial_pose: KeypointSet,
    pub initial_confidence: Vec<f64>,
    /// Present when the refinement stage is enabled.
    pub refined: Option<Refined>,
}

impl ModelOutput {
    /// The pose the model reports: refined when available, else initial.
    pub fn final_pose(&self) -> &KeypointSet {
        self.refined
            .as_ref()
            .map(|r| &r.pose)
            .unwrap_or(&self.initial_pose)
    }
}

impl PoseModel {
    pub fn new(cfg: ModelConfig, skeleton: SkeletonGraph) -> Self {
        assert_eq!(cfg.joints, skeleton.joint_count());
        assert_eq!(cfg.refiner.hops, skeleton.hop_count());
        PoseModel { cfg, skeleton }
    }

    /// Fresh parameters for this configuration. The parameter set depends on
    /// the enabled stages: a model built without attention or refinement has
    /// exactly the baseline parameters.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut params = Params::new();
        for (i, (cin, cout, _)) in self.cfg.blocks().iter().enumerate() {
            params.insert_he(
                &format!("backbone.conv{i}.weight"),
                vec![*cout, *cin, 3, 3],
                cin * 9,
                seed,
            );
            params.insert_zeros(&format!("backbone.conv{i}.bias"), vec![*cout]);
        }
        let c = self.cfg.channels;
        let j = self.cfg.joints;
        for head in ["multi", "target"] {
            params.insert_he(&format!("head.{head}.weight"), vec![j, c, 1, 1], c, seed);
            params.insert_zeros(&format!("head.{head}.bias"), vec![j]);
        }
        if self.cfg.use_adam {
            init_adam_params(&mut params, "adam.", &self.cfg.adam, seed);
        }
        if self.cfg.use_gcn {
            init_refiner_params(
                &mut params,
                "gcn.",
                &self.cfg.refiner,
                self.cfg.joints,
                seed,
            );
        }
        params
    }

    fn backbone(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId, ModelError> {
        let mut h = x;
        for (i, (_, _, stride)) in self.cfg.blocks().iter().enumerate() {
            let w = bound.id(&format!("backbone.conv{i}.weight"));
            let b = bound.id(&format!("backbone.conv{i}.bias"));
            let conv = tape.conv2d(h, w, *stride, 1)?;
            let biased = tape.add_channel(conv, b)?;
            h = tape.relu(biased);
        }
        Ok(h)
    }

    fn head(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: TensorId,
        name: &str,
    ) -> Result<TensorId, ModelError> {
        let w = bound.id(&format!("head.{name}.weight"));
        let b = bound.id(&format!("head.{name}.bias"));
        let conv = tape.conv2d(features, w, 1, 0)?;
        Ok(tape.add_channel(conv, b)?)
    }

    /// Full forward pass. `center` is the body center in feature-map
    /// coordinates (training: mean of visible/occluded ground-truth joints;
    /// inference: crop center).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        crop: &Tensor,
        center: BodyCenter,
    ) -> Result<ModelOutput, ModelError> {
        let (w, h) = (self.cfg.crop_w, self.cfg.crop_h);
        if crop.shape() != [3, h, w] {
            return Err(ModelError::BadCrop {
                got: crop.shape().to_vec(),
                h,
                w,
            });
        }
        let x = tape.constant(crop.clone());
        let fm = self.backbone(tape, bound, x)?;
        let multi_hm = self.head(tape, bound, fm, "multi")?;

        let features = if self.cfg.use_adam {
            let p = AdamParams::bind(bound, "adam.");
            adam_forward(tape, fm, center, &p, &self.cfg.adam)?
        } else {
            fm
        };
        let target_hm = self.head(tape, bound, features, "target")?;

        let hm_set = heatmaps_from_tape(tape, target_hm);
        let (initial_pose, initial_confidence) = decode_heatmaps(&hm_set);

        let refined = if self.cfg.use_gcn {
            Some(refine_pose(
                tape,
                &initial_pose,
                features,
                &RefinerParams::bind(bound, "gcn.", &self.cfg.refiner),
                &self.skeleton,
                w,
                h,
                HEATMAP_STRIDE,
            )?)
        } else {
            None
        };

        Ok(ModelOutput {
            multi_hm,
            target_hm,
            features,
            initial_pose,
            initial_confidence,
            refined,
        })
    }
}

/// View a `[J, H, W]` tape node as a heatmap set (copies the data).
pub fn heatmaps_from_tape(tape: &Tape, id: TensorId) -> HeatmapSet {
    let shape = tape.shape(id);
    HeatmapSet {
        joints: shape[0],
        height: shape[1],
        width: shape[2],
        data: tape.data(id).to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::coco17_skeleton;

    fn tiny_config(use_adam: bool, use_gcn: bool) -> ModelConfig {
        let mut run = RunConfig::default();
        run.model.channels = 8;
        run.model.gcn_hidden = 8;
        run.model.gcn_layers = 1;
        run.train.use_adam = use_adam;
        run.train.use_gcn = use_gcn;
        ModelConfig::from_run(&run, 17)
    }

    #[test]
    fn output_spatial_dims_are_quarter_crop() {
        let model = PoseModel::new(tiny_config(true, true), coco17_skeleton());
        let params = model.init_params(3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let crop = Tensor::zeros(vec![3, 48, 36]);
        let out = model
            .forward(&mut tape, &bound, &crop, BodyCenter { x: 4.0, y: 6.0 })
            .unwrap();
        assert_eq!(tape.shape(out.multi_hm), &[17, 12, 9]);
        assert_eq!(tape.shape(out.target_hm), &[17, 12, 9]);
        assert!(out.refined.is_some());
    }

    #[test]
    fn init_is_deterministic_given_seed() {
        let model = PoseModel::new(tiny_config(true, true), coco17_skeleton());
        assert_eq!(model.init_params(5), model.init_params(5));
        assert_ne!(model.init_params(5), model.init_params(6));
    }

    #[test]
    fn disabled_stages_have_no_parameters() {
        let model = PoseModel::new(tiny_config(false, false), coco17_skeleton());
        let params = model.init_params(1);
        assert!(params.names().all(|n| !n.starts_with("adam.") && !n.starts_with("gcn.")));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = PoseModel::new(tiny_config(true, true), coco17_skeleton());
        let params = model.init_params(7);
        let crop = Tensor::filled(vec![3, 48, 36], 0.25);
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = model
                .forward(&mut tape, &bound, &crop, BodyCenter { x: 4.5, y: 6.0 })
                .unwrap();
            tape.data(out.target_hm).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bad_crop_shape_errors() {
        let model = PoseModel::new(tiny_config(false, false), coco17_skeleton());
        let params = model.init_params(1);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let crop = Tensor::zeros(vec![3, 32, 32]);
        assert!(matches!(
            model.forward(&mut tape, &bound, &crop, BodyCenter { x: 0.0, y: 0.0 }),
            Err(ModelError::BadCrop { .. })
        ));
    }
}
