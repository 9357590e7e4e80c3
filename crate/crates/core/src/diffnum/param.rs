//! Named model parameters living outside any graph. A training step copies
//! parameter values into a fresh [`super::Graph`] as leaves, and the
//! optimizer writes updates back here.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Tensor};

/// One named tensor of weights. `trainable == false` marks it frozen: it
/// still participates in forward passes but never receives gradient and is
/// never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    data: Vec<f64>,
    shape: Vec<usize>,
    trainable: bool,
}

impl Param {
    pub fn new(
        name: impl Into<String>,
        data: Vec<f64>,
        shape: &[usize],
        trainable: bool,
    ) -> Result<Self, DiffError> {
        // Round-trips shape validation through Tensor.
        Tensor::new(data.clone(), shape)?;
        Ok(Self {
            name: name.into(),
            data,
            shape: shape.to_vec(),
            trainable,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        Self {
            name: name.into(),
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
            trainable,
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64, trainable: bool) -> Self {
        Self {
            name: name.into(),
            data: vec![v; shape.iter().product()],
            shape: shape.to_vec(),
            trainable,
        }
    }

    /// Gaussian init with the given std, driven by the shared model RNG.
    pub fn randn(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        Self {
            name: name.into(),
            data,
            shape: shape.to_vec(),
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Replaces the contents; length must match.
    pub fn set_data(&mut self, data: &[f64]) -> Result<(), DiffError> {
        if data.len() != self.data.len() {
            return Err(DiffError::InvalidShape {
                op: "param",
                shape: self.shape.clone(),
                msg: format!(
                    "{}: new data has {} elements, expected {}",
                    self.name,
                    data.len(),
                    self.data.len()
                ),
            });
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Copies the current values into a graph-ready tensor.
    pub fn tensor(&self) -> Result<Tensor, DiffError> {
        Ok(Tensor::new(self.data.clone(), &self.shape)?.with_requires_grad(self.trainable))
    }
}

/// Box–Muller, fed from a seeded ChaCha stream so initialization is
/// reproducible across runs and platforms.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Anything owning a flat set of named parameters.
pub trait HasParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// `(name, numel, trainable)` triples in visit order.
    fn param_summary(&self) -> Vec<(String, usize, bool)> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| v.push((p.name().to_string(), p.numel(), p.trainable())));
        v
    }

    fn total_numel(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

/// Plain list of parameters; handy for tests and small heads.
#[derive(Debug, Clone, Default)]
pub struct ParamList(pub Vec<Param>);

impl HasParams for ParamList {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for p in &self.0 {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in &mut self.0 {
            f(p);
        }
    }
}
