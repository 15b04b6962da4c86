//! Feature-guided multi-hop graph refinement: joint features are sampled from
//! the feature map at the initial pose, pushed through modulated graph
//! convolution layers over the skeleton's hop adjacency family, and decoded
//! into per-joint coordinate offsets added to the initial pose.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keypoints::KeypointSet;
use crate::numerics::{Bound, NumericsError, Params, Tape, Tensor, TensorId};
use crate::skeleton::SkeletonGraph;

#[derive(Debug, Error)]
pub enum GcnError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("layer has {modulations} modulation matrices but {hops} hop matrices were given")]
    HopMismatch { modulations: usize, hops: usize },
    #[error("pose has {pose} joints but the skeleton has {skeleton}")]
    JointCountMismatch { pose: usize, skeleton: usize },
}

/// Activation applied after the per-hop sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Tape handles of one graph layer.
#[derive(Debug, Clone)]
pub struct GcnLayerParams {
    /// Self transform, `[Dout, Din]`.
    pub w_self: TensorId,
    /// Neighbor transform, `[Dout, Din]`.
    pub w_neigh: TensorId,
    /// One elementwise `[Dout, N]` modulation per hop distance.
    pub modulation: Vec<TensorId>,
}

/// One modulated multi-hop graph convolution:
/// `M' = act(sum_k w_k * (W_self M + W_neigh M A_k))`.
pub fn gcn_layer(
    tape: &mut Tape,
    m: TensorId,
    p: &GcnLayerParams,
    hops: &[TensorId],
    act: Activation,
) -> Result<TensorId, GcnError> {
    if p.modulation.len() != hops.len() {
        return Err(GcnError::HopMismatch {
            modulations: p.modulation.len(),
            hops: hops.len(),
        });
    }
    let self_term = tape.matmul(p.w_self, m)?;
    let mut acc: Option<TensorId> = None;
    for (w_k, a_k) in p.modulation.iter().zip(hops) {
        let propagated = tape.matmul(m, *a_k)?;
        let neigh_term = tape.matmul(p.w_neigh, propagated)?;
        let t_k = tape.add(self_term, neigh_term)?;
        let modulated = tape.mul(*w_k, t_k)?;
        acc = Some(match acc {
            None => modulated,
            Some(prev) => tape.add(prev, modulated)?,
        });
    }
    let summed = acc.expect("at least one hop");
    Ok(match act {
        Activation::Relu => tape.relu(summed),
        Activation::Identity => summed,
    })
}

/// Shape configuration of the refiner.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Feature-map channels feeding the sampler.
    pub feature_channels: usize,
    /// Hidden width of the graph layers.
    pub hidden: usize,
    pub layers: usize,
    pub hops: usize,
    /// Crop-to-feature-map downscale factor.
    pub stride: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            feature_channels: 32,
            hidden: 64,
            layers: 3,
            hops: 3,
            stride: 4,
        }
    }
}

/// Tape handles of the full refiner.
#[derive(Debug, Clone)]
pub struct RefinerParams {
    pub proj_weight: TensorId,
    pub proj_bias: TensorId,
    pub layers: Vec<GcnLayerParams>,
    /// Output head `[2, D]` + `[2]`; zero-initialized so refinement starts
    /// exactly at the initial pose.
    pub head_weight: TensorId,
    pub head_bias: TensorId,
    /// Scalar gate on the sampled joint features.
    pub feature_gate: TensorId,
}

/// Register refiner parameters under `prefix` (e.g. `gcn.`) for a skeleton
/// with `joints` nodes.
pub fn init_refiner_params(
    params: &mut Params,
    prefix: &str,
    cfg: &RefinerConfig,
    joints: usize,
    seed: u64,
) {
    let d_in = cfg.feature_channels + 2;
    let d = cfg.hidden;
    params.insert_he(&format!("{prefix}proj.weight"), vec![d, d_in], d_in, seed);
    params.insert_zeros(&format!("{prefix}proj.bias"), vec![d]);
    for l in 0..cfg.layers {
        params.insert_he(
            &format!("{prefix}layer{l}.w_self"),
            vec![d, d],
            d * (1 + cfg.hops),
            seed,
        );
        params.insert_he(
            &format!("{prefix}layer{l}.w_neigh"),
            vec![d, d],
            d * (1 + cfg.hops),
            seed,
        );
        for k in 0..cfg.hops {
            params.insert(
                &format!("{prefix}layer{l}.mod{k}"),
                Tensor::filled(vec![d, joints], 1.0),
            );
        }
    }
    params.insert_zeros(&format!("{prefix}head.weight"), vec![2, d]);
    params.insert_zeros(&format!("{prefix}head.bias"), vec![2]);
    params.insert(&format!("{prefix}feature_gate"), Tensor::filled(vec![1], 1.0));
}

impl RefinerParams {
    pub fn bind(bound: &Bound, prefix: &str, cfg: &RefinerConfig) -> RefinerParams {
        let id = |n: String| bound.id(&n);
        let layers = (0..cfg.layers)
            .map(|l| GcnLayerParams {
                w_self: id(format!("{prefix}layer{l}.w_self")),
                w_neigh: id(format!("{prefix}layer{l}.w_neigh")),
                modulation: (0..cfg.hops)
                    .map(|k| id(format!("{prefix}layer{l}.mod{k}")))
                    .collect(),
            })
            .collect();
        RefinerParams {
            proj_weight: id(format!("{prefix}proj.weight")),
            proj_bias: id(format!("{prefix}proj.bias")),
            layers,
            head_weight: id(format!("{prefix}head.weight")),
            head_bias: id(format!("{prefix}head.bias")),
            feature_gate: id(format!("{prefix}feature_gate")),
        }
    }
}

/// Bind the skeleton's hop matrices as tape constants.
pub fn bind_hops(tape: &mut Tape, graph: &SkeletonGraph) -> Vec<TensorId> {
    graph
        .hop_matrices()
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect()
}

/// Assemble the node feature matrix from explicit sampling points and
/// normalized coordinate rows: gated sampled features `[C, N]` stacked on the
/// `[2, N]` coordinates.
pub fn node_features_from(
    tape: &mut Tape,
    fm: TensorId,
    sample_points: &[(f64, f64)],
    coords_norm: Tensor,
    feature_gate: TensorId,
) -> Result<TensorId, NumericsError> {
    let sampled = tape.grid_sample(fm, sample_points)?; // [N, C]
    let features = tape.transpose(sampled)?; // [C, N]
    let gated = tape.mul_scalar(features, feature_gate)?;
    let coords = tape.constant(coords_norm);
    tape.concat0(&[gated, coords])
}

/// Per-joint `C+2` feature columns for a pose in crop pixel coordinates:
/// a bilinear feature sample at the joint's feature-map location plus the
/// crop-normalized coordinates. Sampling locations are detached values.
pub fn build_node_features(
    tape: &mut Tape,
    pose: &KeypointSet,
    fm: TensorId,
    crop_w: usize,
    crop_h: usize,
    stride: usize,
    feature_gate: TensorId,
) -> Result<TensorId, NumericsError> {
    let n = pose.len();
    let points: Vec<(f64, f64)> = pose
        .joints
        .iter()
        .map(|j| (j.x / stride as f64, j.y / stride as f64))
        .collect();
    let mut coords = vec![0.0; 2 * n];
    for (i, j) in pose.joints.iter().enumerate() {
        coords[i] = j.x / crop_w as f64;
        coords[n + i] = j.y / crop_h as f64;
    }
    let coords_t = Tensor::new(vec![2, n], coords).expect("coords shape");
    node_features_from(tape, fm, &points, coords_t, feature_gate)
}

/// Output of a refinement pass.
pub struct Refined {
    /// Refined pose in crop pixel coordinates, visibility passed through.
    pub pose: KeypointSet,
    /// `[2, N]` refined normalized coordinates, on tape for the pose loss.
    pub coords_norm: TensorId,
}

/// Residual pose refinement: predict normalized-coordinate offsets from the
/// graph features and add them to the initial pose.
pub fn refine_pose(
    tape: &mut Tape,
    initial: &KeypointSet,
    fm: TensorId,
    p: &RefinerParams,
    graph: &SkeletonGraph,
    crop_w: usize,
    crop_h: usize,
    stride: usize,
) -> Result<Refined, GcnError> {
    let n = graph.joint_count();
    if initial.len() != n {
        return Err(GcnError::JointCountMismatch {
            pose: initial.len(),
            skeleton: n,
        });
    }
    let hops = bind_hops(tape, graph);

    let m0 = build_node_features(tape, initial, fm, crop_w, crop_h, stride, p.feature_gate)?;
    let projected = tape.matmul(p.proj_weight, m0)?;
    let biased = tape.add_channel(projected, p.proj_bias)?;
    let mut hidden = tape.relu(biased);
    for layer in &p.layers {
        hidden = gcn_layer(tape, hidden, layer, &hops, Activation::Relu)?;
    }
    let offsets = tape.matmul(p.head_weight, hidden)?;
    let offsets = tape.add_channel(offsets, p.head_bias)?;

    let mut init_norm = vec![0.0; 2 * n];
    for (i, j) in initial.joints.iter().enumerate() {
        init_norm[i] = j.x / crop_w as f64;
        init_norm[n + i] = j.y / crop_h as f64;
    }
    let init_const = tape.constant(Tensor::new(vec![2, n], init_norm).expect("init shape"));
    let coords_norm = tape.add(init_const, offsets)?;

    let data = tape.data(coords_norm);
    let joints = initial
        .joints
        .iter()
        .enumerate()
        .map(|(i, j)| crate::keypoints::Joint {
            x: data[i] * crop_w as f64,
            y: data[n + i] * crop_h as f64,
            v: j.v,
        })
        .collect();
    Ok(Refined {
        pose: KeypointSet { joints },
        coords_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::{Joint, Visibility};
    use crate::skeleton::{coco17_skeleton, HopSupport, SkeletonGraph};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3(hops: usize) -> SkeletonGraph {
        SkeletonGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2)],
            hops,
            HopSupport::Exact,
        )
        .unwrap()
    }

    #[test]
    fn identity_configuration_returns_input() {
        let g = path3(1);
        let mut tape = Tape::new();
        let m_t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap();
        let m = tape.constant(m_t.clone());
        let hops = bind_hops(&mut tape, &g);
        let p = GcnLayerParams {
            w_self: tape.constant(Tensor::eye(2)),
            w_neigh: tape.constant(Tensor::zeros(vec![2, 2])),
            modulation: vec![tape.constant(Tensor::filled(vec![2, 3], 1.0))],
        };
        let out = gcn_layer(&mut tape, m, &p, &hops, Activation::Identity).unwrap();
        assert_eq!(tape.data(out), m_t.data());
    }

    #[test]
    fn single_propagation_spreads_one_hot() {
        let g = path3(1);
        let mut tape = Tape::new();
        // one-hot on the middle node b
        let m = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let hops = bind_hops(&mut tape, &g);
        let p = GcnLayerParams {
            w_self: tape.constant(Tensor::zeros(vec![1, 1])),
            w_neigh: tape.constant(Tensor::eye(1)),
            modulation: vec![tape.constant(Tensor::filled(vec![1, 3], 1.0))],
        };
        let out = gcn_layer(&mut tape, m, &p, &hops, Activation::Identity).unwrap();
        let a1 = &g.hop_matrices()[0];
        // support exactly on a and c, scaled by the normalized adjacency
        assert!((tape.data(out)[0] - a1.data()[1]).abs() < 1e-15);
        assert_eq!(tape.data(out)[1], 0.0);
        assert!((tape.data(out)[2] - a1.data()[5]).abs() < 1e-15);
    }

    #[test]
    fn hop_mismatch_errors() {
        let g = path3(2);
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::zeros(vec![1, 3]));
        let hops = bind_hops(&mut tape, &g);
        let p = GcnLayerParams {
            w_self: tape.constant(Tensor::zeros(vec![1, 1])),
            w_neigh: tape.constant(Tensor::zeros(vec![1, 1])),
            modulation: vec![tape.constant(Tensor::zeros(vec![1, 3]))],
        };
        assert!(matches!(
            gcn_layer(&mut tape, m, &p, &hops, Activation::Relu),
            Err(GcnError::HopMismatch {
                modulations: 1,
                hops: 2
            })
        ));
    }

    #[test]
    fn zero_modulation_removes_input_dependence() {
        let g = path3(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![2, 3], data).unwrap());
        let hops = bind_hops(&mut tape, &g);
        let p = GcnLayerParams {
            w_self: tape.constant(Tensor::eye(2)),
            w_neigh: tape.constant(Tensor::eye(2)),
            modulation: vec![tape.constant(Tensor::zeros(vec![2, 3]))],
        };
        let out = gcn_layer(&mut tape, m, &p, &hops, Activation::Relu).unwrap();
        assert!(tape.data(out).iter().all(|v| *v == 0.0));
    }

    fn centered_pose(n: usize, crop_w: f64, crop_h: f64) -> KeypointSet {
        KeypointSet {
            joints: (0..n)
                .map(|i| Joint {
                    x: crop_w / 2.0 + i as f64,
                    y: crop_h / 2.0,
                    v: Visibility::Visible,
                })
                .collect(),
        }
    }

    #[test]
    fn node_features_constant_map_center() {
        let mut tape = Tape::new();
        let fm = tape.constant(Tensor::filled(vec![3, 12, 9], 4.0));
        let gate = tape.constant(Tensor::filled(vec![1], 1.0));
        let pose = KeypointSet {
            joints: vec![Joint {
                x: 18.0,
                y: 24.0,
                v: Visibility::Visible,
            }],
        };
        let m = build_node_features(&mut tape, &pose, fm, 36, 48, 4, gate).unwrap();
        assert_eq!(tape.shape(m), &[5, 1]);
        let d = tape.data(m);
        assert_eq!(&d[..3], &[4.0, 4.0, 4.0]);
        assert!((d[3] - 0.5).abs() < 1e-15);
        assert!((d[4] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_head_returns_initial_pose_exactly() {
        let g = coco17_skeleton();
        let cfg = RefinerConfig {
            feature_channels: 4,
            hidden: 8,
            layers: 2,
            hops: 3,
            stride: 4,
        };
        let mut params = Params::new();
        init_refiner_params(&mut params, "gcn.", &cfg, g.joint_count(), 21);

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let fm_data: Vec<f64> = (0..4 * 12 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let p = RefinerParams::bind(&bound, "gcn.", &cfg);
        let fm = tape.constant(Tensor::new(vec![4, 12, 9], fm_data).unwrap());
        let pose = centered_pose(17, 36.0, 48.0);
        let refined = refine_pose(&mut tape, &pose, fm, &p, &g, 36, 48, 4).unwrap();
        for (r, i) in refined.pose.joints.iter().zip(&pose.joints) {
            assert_eq!(r.x, i.x);
            assert_eq!(r.y, i.y);
            assert_eq!(r.v, i.v);
        }
    }

    #[test]
    fn joint_count_mismatch_errors() {
        let g = coco17_skeleton();
        let cfg = RefinerConfig {
            feature_channels: 2,
            hidden: 4,
            layers: 1,
            hops: 3,
            stride: 4,
        };
        let mut params = Params::new();
        init_refiner_params(&mut params, "gcn.", &cfg, g.joint_count(), 1);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let p = RefinerParams::bind(&bound, "gcn.", &cfg);
        let fm = tape.constant(Tensor::zeros(vec![2, 6, 6]));
        let pose = centered_pose(5, 24.0, 24.0);
        assert!(matches!(
            refine_pose(&mut tape, &pose, fm, &p, &g, 24, 24, 4),
            Err(GcnError::JointCountMismatch { pose: 5, .. })
        ));
    }
}
