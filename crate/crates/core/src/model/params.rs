use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub type ParamId = usize;

/// Named parameter tensors in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Shape("parameter names and tensors differ in count".into()));
        }
        Ok(ParamStore { names, tensors })
    }

    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name.to_string(), Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn filled(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name.to_string(), Tensor::new(shape, vec![value; n]).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a borrowed leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.borrowed(t, requires_grad)).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
