//! Named parameter sets with per-parameter Adam state.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// One trainable tensor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
            trainable,
        }
    }
}

/// Adam hyperparameters. Defaults follow the standard recommendation
/// (lr 0.001, beta1 0.9, beta2 0.999, eps 1e-8, no decay).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, which keeps every pass over the set deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.params.insert(name.to_string(), Param::new(value, trainable));
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Flip the trainable flag for every parameter whose name starts with
    /// `prefix` (used to freeze one sub-network of a bundle).
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Accumulate an external gradient buffer into the stored grads.
    pub fn add_grads(&mut self, grads: &GradBuffer) {
        for (name, g) in grads.map.iter() {
            self.get_mut(name).grad.add_assign(g);
        }
    }

    /// Bias-corrected Adam update over all trainable parameters. Frozen
    /// parameters are skipped entirely: value, moments and step count stay
    /// untouched. Errors on any non-finite gradient, naming the parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            if !p.trainable {
                continue;
            }
            if !p.grad.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// SHA-256 over every parameter value's raw bytes, in name order.
    /// Bit-identical values produce identical hashes.
    pub fn value_hash(&self) -> String {
        self.value_hash_prefix("")
    }

    /// Hash restricted to parameters whose name starts with `prefix`.
    pub fn value_hash_prefix(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.params.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            for &x in p.value.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Standalone gradient accumulator, shape-matched to a [`ParamSet`].
/// Backward passes write here so that batch-parallel workers can each own a
/// buffer and the caller can reduce them in a fixed order.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    map: BTreeMap<String, Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradBuffer {
            map: params
                .iter()
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }

    /// Buffer restricted to parameters whose name starts with `prefix`.
    pub fn zeros_for_prefix(params: &ParamSet, prefix: &str) -> Self {
        GradBuffer {
            map: params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }

    pub fn acc(&mut self, name: &str, g: &Tensor) {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown gradient slot {name}"))
            .add_assign(g);
    }

    pub fn acc_scalar(&mut self, name: &str, g: f64) {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown gradient slot {name}"))
            .data_mut()[0] += g;
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.map[name]
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (name, g) in other.map.iter() {
            self.map.get_mut(name).unwrap().add_assign(g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.scale(s);
        }
    }
}

/// Glorot-uniform initialization: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[1], shape[0]),
        4 => (
            shape[1] * shape[2] * shape[3],
            shape[0] * shape[2] * shape[3],
        ),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(shape, data).expect("glorot shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64, trainable: bool) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v), trainable);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_set(1.5, true);
        p.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(p.value("w").data()[0], 1.5);
    }

    #[test]
    fn first_step_magnitude_matches_closed_form() {
        let mut p = scalar_set(0.0, true);
        p.get_mut("w").grad.data_mut()[0] = 1.0;
        let cfg = AdamConfig::default();
        p.adam_step(&cfg).unwrap();
        // bias-corrected first step: m_hat = v_hat = 1, so |delta| = lr / (1 + eps)
        let expected = cfg.lr / (1.0 + cfg.eps);
        let got = -p.value("w").data()[0];
        assert!((got - expected).abs() < 1e-15, "step {got} vs {expected}");
    }

    #[test]
    fn frozen_parameter_is_bit_identical_after_step() {
        let mut p = scalar_set(2.25, false);
        p.get_mut("w").grad.data_mut()[0] = 5.0;
        p.adam_step(&AdamConfig::default()).unwrap();
        let w = p.get("w");
        assert_eq!(w.value.data()[0].to_bits(), 2.25f64.to_bits());
        assert_eq!(w.m.data()[0], 0.0);
        assert_eq!(w.v.data()[0], 0.0);
        assert_eq!(w.step, 0);
    }

    #[test]
    fn all_frozen_set_is_noop() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), false);
        p.insert("b", Tensor::scalar(3.0), false);
        let before = p.value_hash();
        for (_, param) in p.iter_mut() {
            param.grad.fill(9.0);
        }
        p.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(p.value_hash(), before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_set(0.0, true);
        p.get_mut("w").grad.data_mut()[0] = f64::NAN;
        let err = p.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }

    #[test]
    fn grad_buffer_accumulates_and_merges() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[2]), true);
        let mut g1 = GradBuffer::zeros_like(&p);
        let mut g2 = GradBuffer::zeros_like(&p);
        g1.acc("a", &Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        g2.acc("a", &Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
        g1.merge(&g2);
        g1.scale(2.0);
        assert_eq!(g1.get("a").data(), &[3.0, 5.0]);
        p.add_grads(&g1);
        assert_eq!(p.get("a").grad.data(), &[3.0, 5.0]);
    }

    #[test]
    fn glorot_bounds() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = glorot_uniform(&[10, 20], &mut rng);
        let a = (6.0 / 30.0f64).sqrt();
        assert!(t.data().iter().all(|&v| v > -a && v < a));
    }
}
