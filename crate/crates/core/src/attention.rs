//! Adaptive discriminative attention: a channel gate computed from the
//! instance feature at the body center, followed by pixel self-attention that
//! redistributes feature mass across spatial positions.

use serde::{Deserialize, Serialize};

use crate::numerics::{Bound, NumericsError, Params, Tape, TensorId};

/// Static configuration of the attention block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub channels: usize,
    /// Kernel size of the Q/K/V projections; 1 keeps them per-pixel linear.
    pub kernel: usize,
    /// Squash the channel gate with a sigmoid instead of using it raw.
    pub sigmoid_gate: bool,
    /// Learnable-gain residual around the spatial attention output.
    pub residual: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            channels: 32,
            kernel: 1,
            sigmoid_gate: false,
            residual: true,
        }
    }
}

/// Tape handles of the attention parameters for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    /// Linear gate transform, `[C, C]` weight and `[C]` bias.
    pub gate_weight: TensorId,
    pub gate_bias: TensorId,
    /// Query/key/value projections, `[C, C, k, k]`.
    pub query: TensorId,
    pub key: TensorId,
    pub value: TensorId,
    /// Residual gain, `[1]`, zero-initialized.
    pub residual_gain: TensorId,
}

const NAMES: [&str; 6] = [
    "gate.weight",
    "gate.bias",
    "q.weight",
    "k.weight",
    "v.weight",
    "residual_gain",
];

/// Register the attention parameters under `prefix` (e.g. `adam.`).
pub fn init_adam_params(params: &mut Params, prefix: &str, cfg: &AdamConfig, seed: u64) {
    let c = cfg.channels;
    let k = cfg.kernel;
    // gate starts at identity: unit weight diag would couple channels, so use
    // zero weight with unit bias, which gates every channel by exactly 1
    params.insert_zeros(&format!("{prefix}gate.weight"), vec![c, c]);
    params.insert(
        &format!("{prefix}gate.bias"),
        crate::numerics::Tensor::filled(vec![c], if cfg.sigmoid_gate { 0.0 } else { 1.0 }),
    );
    for name in ["q.weight", "k.weight", "v.weight"] {
        params.insert_he(
            &format!("{prefix}{name}"),
            vec![c, c, k, k],
            c * k * k,
            seed,
        );
    }
    params.insert_zeros(&format!("{prefix}residual_gain"), vec![1]);
}

impl AdamParams {
    pub fn bind(bound: &Bound, prefix: &str) -> AdamParams {
        let id = |n: &str| bound.id(&format!("{prefix}{n}"));
        AdamParams {
            gate_weight: id(NAMES[0]),
            gate_bias: id(NAMES[1]),
            query: id(NAMES[2]),
            key: id(NAMES[3]),
            value: id(NAMES[4]),
            residual_gain: id(NAMES[5]),
        }
    }

    /// Constant identity configuration: unit gate, zero residual gain. With
    /// these values the whole block is the identity map on any input.
    pub fn identity(tape: &mut Tape, cfg: &AdamConfig) -> AdamParams {
        use crate::numerics::Tensor;
        let c = cfg.channels;
        let k = cfg.kernel;
        AdamParams {
            gate_weight: tape.constant(Tensor::zeros(vec![c, c])),
            gate_bias: tape.constant(Tensor::filled(vec![c], 1.0)),
            query: tape.constant(Tensor::zeros(vec![c, c, k, k])),
            key: tape.constant(Tensor::zeros(vec![c, c, k, k])),
            value: tape.constant(Tensor::zeros(vec![c, c, k, k])),
            residual_gain: tape.constant(Tensor::zeros(vec![1])),
        }
    }
}

/// Feature-map-space body center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyCenter {
    pub x: f64,
    pub y: f64,
}

/// Bilinear sample of the feature map at the body center: the instance
/// feature vector, shape `[C, 1]`. The sampler clamps out-of-bounds centers.
pub fn instance_feature(
    tape: &mut Tape,
    fm: TensorId,
    center: BodyCenter,
) -> Result<TensorId, NumericsError> {
    let sampled = tape.grid_sample(fm, &[(center.x, center.y)])?; // [1, C]
    tape.transpose(sampled)
}

/// Channel attention: gate each channel of `fm` by the linear transform of
/// the instance feature, broadcast over all spatial positions.
pub fn channel_attention(
    tape: &mut Tape,
    fm: TensorId,
    inst: TensorId,
    p: &AdamParams,
    cfg: &AdamConfig,
) -> Result<TensorId, NumericsError> {
    let c = tape.shape(fm)[0];
    let lx = tape.matmul(p.gate_weight, inst)?; // [C, 1]
    let flat = tape.reshape(lx, vec![c])?;
    let mut gate = tape.add(flat, p.gate_bias)?;
    if cfg.sigmoid_gate {
        gate = tape.sigmoid(gate);
    }
    tape.mul_channel(fm, gate)
}

/// Spatial self-attention. Q, K, V come from convolution projections; the
/// attention matrix is `softmax` over the key axis of `Kᵀ·Q`, so every
/// query pixel mixes the value vectors with a probability distribution over
/// source pixels. With `cfg.residual` the output is
/// `fm + residual_gain * mixed`, otherwise `mixed` alone.
pub fn spatial_attention(
    tape: &mut Tape,
    fm: TensorId,
    p: &AdamParams,
    cfg: &AdamConfig,
) -> Result<TensorId, NumericsError> {
    let shape = tape.shape(fm).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let pad = cfg.kernel / 2;

    let q = tape.conv2d(fm, p.query, 1, pad)?;
    let k = tape.conv2d(fm, p.key, 1, pad)?;
    let v = tape.conv2d(fm, p.value, 1, pad)?;
    let qf = tape.reshape(q, vec![c, n])?;
    let kf = tape.reshape(k, vec![c, n])?;
    let vf = tape.reshape(v, vec![c, n])?;

    let kt = tape.transpose(kf)?; // [N, C]
    let scores = tape.matmul(kt, qf)?; // [N, N], row = key, column = query
    let attn = tape.softmax(scores, 0)?; // each query column sums to 1
    let mixed = tape.matmul(vf, attn)?; // [C, N]
    let spatial = tape.reshape(mixed, vec![c, h, w])?;

    if cfg.residual {
        let gained = tape.mul_scalar(spatial, p.residual_gain)?;
        tape.add(fm, gained)
    } else {
        Ok(spatial)
    }
}

/// Full attention block: channel attention first (instance discrimination),
/// spatial attention second (background suppression).
pub fn adam_forward(
    tape: &mut Tape,
    fm: TensorId,
    center: BodyCenter,
    p: &AdamParams,
    cfg: &AdamConfig,
) -> Result<TensorId, NumericsError> {
    let inst = instance_feature(tape, fm, center)?;
    let gated = channel_attention(tape, fm, inst, p, cfg)?;
    spatial_attention(tape, gated, p, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_fm(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn instance_feature_constant_map() {
        let mut tape = Tape::new();
        let fm = tape.constant(Tensor::filled(vec![4, 3, 3], 7.0));
        let inst = instance_feature(&mut tape, fm, BodyCenter { x: 1.3, y: 0.7 }).unwrap();
        assert_eq!(tape.shape(inst), &[4, 1]);
        for v in tape.data(inst) {
            assert_eq!(*v, 7.0);
        }
    }

    #[test]
    fn instance_feature_lattice_point_is_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm_t = rand_fm(&mut rng, 3, 4, 4);
        let mut tape = Tape::new();
        let fm = tape.constant(fm_t.clone());
        let inst = instance_feature(&mut tape, fm, BodyCenter { x: 2.0, y: 1.0 }).unwrap();
        for c in 0..3 {
            assert_eq!(tape.data(inst)[c], fm_t.data()[c * 16 + 4 + 2]);
        }
    }

    #[test]
    fn identity_gate_keeps_feature_map() {
        let cfg = AdamConfig {
            channels: 3,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fm_t = rand_fm(&mut rng, 3, 2, 2);
        let mut tape = Tape::new();
        let fm = tape.constant(fm_t.clone());
        // identity L (weight I, bias 0) applied to an all-ones instance
        let p = AdamParams {
            gate_weight: tape.constant(Tensor::eye(3)),
            gate_bias: tape.constant(Tensor::zeros(vec![3])),
            query: tape.constant(Tensor::zeros(vec![3, 3, 1, 1])),
            key: tape.constant(Tensor::zeros(vec![3, 3, 1, 1])),
            value: tape.constant(Tensor::zeros(vec![3, 3, 1, 1])),
            residual_gain: tape.constant(Tensor::zeros(vec![1])),
        };
        let inst = tape.constant(Tensor::filled(vec![3, 1], 1.0));
        let out = channel_attention(&mut tape, fm, inst, &p, &cfg).unwrap();
        assert_eq!(tape.data(out), fm_t.data());
    }

    #[test]
    fn gate_two_zero_doubles_and_kills_channels() {
        let cfg = AdamConfig {
            channels: 2,
            ..AdamConfig::default()
        };
        let mut tape = Tape::new();
        let fm = tape.constant(
            Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let p = AdamParams {
            gate_weight: tape.constant(Tensor::zeros(vec![2, 2])),
            gate_bias: tape.constant(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap()),
            query: tape.constant(Tensor::zeros(vec![2, 2, 1, 1])),
            key: tape.constant(Tensor::zeros(vec![2, 2, 1, 1])),
            value: tape.constant(Tensor::zeros(vec![2, 2, 1, 1])),
            residual_gain: tape.constant(Tensor::zeros(vec![1])),
        };
        let inst = tape.constant(Tensor::zeros(vec![2, 1]));
        let out = channel_attention(&mut tape, fm, inst, &p, &cfg).unwrap();
        assert_eq!(tape.data(out), &[2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn single_pixel_spatial_attention_is_value_residual() {
        let cfg = AdamConfig {
            channels: 2,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fm_t = rand_fm(&mut rng, 2, 1, 1);
        let mut params = Params::new();
        init_adam_params(&mut params, "adam.", &cfg, 3);
        params.get_mut("adam.residual_gain").unwrap().data_mut()[0] = 0.5;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let p = AdamParams::bind(&bound, "adam.");
        let fm = tape.constant(fm_t.clone());
        let out = spatial_attention(&mut tape, fm, &p, &cfg).unwrap();

        // with one pixel the attention weight is exactly 1, so the update is
        // fm + gain * V where V is the value projection of fm
        let wv = params.get("adam.v.weight").unwrap().data();
        for c in 0..2 {
            let v = wv[c * 2] * fm_t.data()[0] + wv[c * 2 + 1] * fm_t.data()[1];
            let expect = fm_t.data()[c] + 0.5 * v;
            assert!((tape.data(out)[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_gain_is_identity() {
        let cfg = AdamConfig {
            channels: 3,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fm_t = rand_fm(&mut rng, 3, 3, 2);
        let mut params = Params::new();
        init_adam_params(&mut params, "adam.", &cfg, 4);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let p = AdamParams::bind(&bound, "adam.");
        let fm = tape.constant(fm_t.clone());
        let out = spatial_attention(&mut tape, fm, &p, &cfg).unwrap();
        for (a, b) in tape.data(out).iter().zip(fm_t.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn full_identity_configuration_is_identity() {
        let cfg = AdamConfig {
            channels: 4,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fm_t = rand_fm(&mut rng, 4, 3, 3);
        let mut tape = Tape::new();
        let p = AdamParams::identity(&mut tape, &cfg);
        let fm = tape.constant(fm_t.clone());
        let out = adam_forward(&mut tape, fm, BodyCenter { x: 1.0, y: 1.7 }, &p, &cfg).unwrap();
        for (a, b) in tape.data(out).iter().zip(fm_t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_attention_is_linear_in_fm() {
        let cfg = AdamConfig {
            channels: 2,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fm_t = rand_fm(&mut rng, 2, 2, 3);
        let scaled = Tensor::new(
            vec![2, 2, 3],
            fm_t.data().iter().map(|v| 2.5 * v).collect(),
        )
        .unwrap();
        let mut params = Params::new();
        init_adam_params(&mut params, "a.", &cfg, 12);
        params.insert_randn("a.gate.weight", vec![2, 2], 0.5, 13);

        let eval = |fm_t: &Tensor| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let p = AdamParams::bind(&bound, "a.");
            let fm = tape.constant(fm_t.clone());
            let inst = tape.constant(Tensor::new(vec![2, 1], vec![0.3, -0.9]).unwrap());
            let out = channel_attention(&mut tape, fm, inst, &p, &cfg).unwrap();
            tape.data(out).to_vec()
        };
        let base = eval(&fm_t);
        let double = eval(&scaled);
        for (a, b) in base.iter().zip(double) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }
}
