//! Parameter registry, initialization and first-order optimizers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{Graph, Real, Tensor, Var};

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, tensor.with_requires_grad(true)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a graph leaf. Frozen bindings
    /// (`trainable == false`) never receive gradients.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                let mut leaf = Tensor::from_vec(t.shape(), t.data().to_vec()).expect("valid parameter");
                leaf = leaf.with_requires_grad(trainable);
                graph.leaf(leaf)
            })
            .collect()
    }

    /// Adds the leaf gradients of `vars` (as returned by [`bind`]) into the
    /// parameter gradients.
    ///
    /// [`bind`]: ParameterSet::bind
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(Error::Contract(format!("{} bindings for {} parameters", vars.len(), self.entries.len())));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            if let Some(g) = graph.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Sum of squares of all accumulated gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    /// Flat copy of every parameter value in order.
    pub fn flat_values(&self) -> Vec<T> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Uniform { low: f64, high: f64 },
}

pub fn init_tensor<T: Real>(shape: &[usize], scheme: Init, seed: u64) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let (low, high) = match scheme {
        Init::KaimingUniform { fan_in } => {
            if fan_in == 0 {
                return Err(Error::Contract("kaiming init needs fan_in > 0".into()));
            }
            let b = libm::sqrt(6.0 / fan_in as f64);
            (-b, b)
        }
        Init::Uniform { low, high } => (low, high),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..numel)
        .map(|_| {
            let u: f64 = rng.random();
            T::of(low + (high - low) * u)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Minimize: `p -= lr * update`.
    Descent,
    /// Maximize: the gradient is negated before the update.
    Ascent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Optimizer { kind, learning_rate, steps: 0, first_moment: Vec::new(), second_moment: Vec::new() })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::ADAM, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place.
    pub fn step(&mut self, params: &mut ParameterSet<T>, direction: Direction) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        let sign = match direction {
            Direction::Descent => T::one(),
            Direction::Ascent => -T::one(),
        };
        self.steps += 1;
        let lr = T::of(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (_, p) in params.iter_mut() {
                    let g = p.grad().expect("checked above").to_vec();
                    p.data_mut().iter_mut().zip(&g).for_each(|(w, &g)| *w -= lr * sign * g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                if self.first_moment.is_empty() {
                    self.first_moment = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
                    self.second_moment = self.first_moment.clone();
                }
                if self.first_moment.len() != params.len()
                    || self.first_moment.iter().zip(params.iter()).any(|(m, (_, p))| m.len() != p.len())
                {
                    return Err(Error::Contract("optimizer state does not match parameter set".into()));
                }
                let t = self.steps as i32;
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(epsilon));
                let bc1 = T::one() - T::of(libm::pow(beta1, t as f64));
                let bc2 = T::one() - T::of(libm::pow(beta2, t as f64));
                for (((_, p), m), v) in params.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
                    let g = p.grad().expect("checked above").to_vec();
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = sign * g;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(p: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.insert("p", Tensor::scalar(p)).unwrap();
        ps
    }

    /// Sets the gradient of `(p - 3)^2` and returns the loss.
    fn quadratic_grad(ps: &mut ParameterSet<f64>) -> f64 {
        let p = ps.get("p").unwrap().data()[0];
        ps.zero_grads();
        ps.get_mut("p").unwrap().accumulate_grad(&[2.0 * (p - 3.0)]).unwrap();
        (p - 3.0) * (p - 3.0)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = scalar_param(1.0);
        assert!(ps.insert("p", Tensor::scalar(2.0)).is_err());
        assert_eq!(ps.len(), 1);
    }

    #[test]
    fn init_examples() {
        let z: Tensor<f64> = init_tensor(&[3, 4], Init::Uniform { low: 0.0, high: 0.0 }, 5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let a: Tensor<f32> = init_tensor(&[8, 3, 3, 3], Init::KaimingUniform { fan_in: 27 }, 11).unwrap();
        let b: Tensor<f32> = init_tensor(&[8, 3, 3, 3], Init::KaimingUniform { fan_in: 27 }, 11).unwrap();
        assert_eq!(a, b);
        let c: Tensor<f32> = init_tensor(&[8, 3, 3, 3], Init::KaimingUniform { fan_in: 27 }, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kaiming_bound_and_mean() {
        let w: Tensor<f64> = init_tensor(&[100, 100], Init::KaimingUniform { fan_in: 100 }, 3).unwrap();
        let bound = (6.0f64 / 100.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        // uniform(-b, b) has standard deviation b / sqrt(3)
        let se = bound / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn sgd_single_steps() {
        for (dir, expect) in [(Direction::Descent, 0.8), (Direction::Ascent, 1.2)] {
            let mut ps = scalar_param(1.0);
            ps.get_mut("p").unwrap().accumulate_grad(&[2.0]).unwrap();
            let mut opt = Optimizer::sgd(0.1).unwrap();
            opt.step(&mut ps, dir).unwrap();
            assert!((ps.get("p").unwrap().data()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_quadratic_converges_monotonically() {
        let mut ps = scalar_param(0.0);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let loss = quadratic_grad(&mut ps);
            assert!(loss <= last);
            last = loss;
            opt.step(&mut ps, Direction::Descent).unwrap();
        }
        // error contracts by (1 - 2 lr) = 0.8 per step: 3 * 0.8^100 ~ 6e-10
        assert!((ps.get("p").unwrap().data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn adam_examples() {
        let mut ps = scalar_param(1.0);
        let mut opt = Optimizer::adam(0.001).unwrap();
        for _ in 0..5 {
            ps.zero_grads();
            ps.get_mut("p").unwrap().accumulate_grad(&[0.0]).unwrap();
            opt.step(&mut ps, Direction::Descent).unwrap();
        }
        assert_eq!(ps.get("p").unwrap().data()[0], 1.0);

        let mut ps = scalar_param(1.0);
        let mut opt = Optimizer::adam(0.001).unwrap();
        ps.get_mut("p").unwrap().accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut ps, Direction::Descent).unwrap();
        assert!((ps.get("p").unwrap().data()[0] - (1.0 - 0.001)).abs() < 1e-8);
        assert_eq!(opt.steps(), 1);

        let mut ps = scalar_param(0.0);
        let mut opt = Optimizer::adam(0.1).unwrap();
        for _ in 0..500 {
            quadratic_grad(&mut ps);
            opt.step(&mut ps, Direction::Descent).unwrap();
        }
        assert!((ps.get("p").unwrap().data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn adam_ascent_moves_uphill() {
        let mut ps = scalar_param(1.0);
        let mut opt = Optimizer::adam(0.01).unwrap();
        ps.get_mut("p").unwrap().accumulate_grad(&[2.0]).unwrap();
        opt.step(&mut ps, Direction::Ascent).unwrap();
        assert!(ps.get("p").unwrap().data()[0] > 1.0);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut ps = scalar_param(1.0);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        assert!(matches!(opt.step(&mut ps, Direction::Descent), Err(Error::Contract(_))));
        assert!(Optimizer::<f64>::sgd(0.0).is_err());
    }

    #[test]
    fn zero_grads_idempotent_and_fresh() {
        let run = |ps: &mut ParameterSet<f64>| {
            let mut g = Graph::new();
            let vars = ps.bind(&mut g, true);
            let sq = g.activation(vars[0], crate::Activation::Tanh);
            let l = g.sum(sq);
            g.backward(l).unwrap();
            ps.accumulate_grads(&g, &vars).unwrap();
        };
        let mut fresh = scalar_param(0.7);
        run(&mut fresh);
        let mut acc = scalar_param(0.7);
        run(&mut acc);
        run(&mut acc);
        acc.zero_grads();
        acc.zero_grads();
        assert_eq!(acc.get("p").unwrap().grad().unwrap(), &[0.0]);
        run(&mut acc);
        assert_eq!(acc.get("p").unwrap().grad(), fresh.get("p").unwrap().grad());
    }
}
