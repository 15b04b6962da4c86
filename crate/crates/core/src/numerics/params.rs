//! Named parameter store. Parameters live outside any tape and are bound as
//! gradient-requiring leaves at the start of each forward pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorId};
use crate::util::mix_seed;

/// Ordered map of named tensors. Iteration order is the sorted name order,
/// which fixes checkpoint layout and optimizer update order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Bind every parameter onto `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.map {
            ids.insert(name.clone(), tape.leaf(t.clone(), true));
        }
        Bound { ids }
    }

    /// Gaussian init with the given std, seeded from `(seed, name)` so the
    /// draw does not depend on insertion order.
    pub fn insert_randn(&mut self, name: &str, shape: Vec<usize>, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| gauss(&mut rng) * std).collect();
        self.insert(name, Tensor::new(shape, data).expect("randn shape"));
    }

    /// He-style init for a conv/linear weight: std = sqrt(2 / fan_in).
    pub fn insert_he(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) {
        let std = (2.0 / fan_in as f64).sqrt();
        self.insert_randn(name, shape, std, seed);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }
}

/// Box–Muller standard normal draw.
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Tape handles for a bound parameter set.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    /// Handle for `name`. Panics on unknown names: the set of parameters is a
    /// fixed property of the model config, so a miss is a programming error.
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_id(&self, name: &str) -> Option<TensorId> {
        self.ids.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_insertion_order_independent() {
        let mut a = Params::new();
        a.insert_randn("w1", vec![2, 2], 1.0, 7);
        a.insert_randn("w2", vec![3], 1.0, 7);
        let mut b = Params::new();
        b.insert_randn("w2", vec![3], 1.0, 7);
        b.insert_randn("w1", vec![2, 2], 1.0, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn bind_marks_leaves_grad_requiring() {
        let mut p = Params::new();
        p.insert("x", Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = bound.id("x");
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -6.0]);
    }
}
