use std::collections::HashMap;

use rand::Rng;

use super::tape::Shape;
use crate::{Error, Result};

/// A named parameter tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Shape,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Ordered store of named parameters. Declaration order is preserved and is
/// the order used by the checkpoint format.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Shape, data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: {} values for shape [{},{}]",
                data.len(),
                shape.rows,
                shape.cols
            )));
        }
        let grad = vec![0.0; data.len()];
        self.index.insert(name.to_string(), self.params.len());
        self.names.push(name.to_string());
        self.params.push(Param { shape, data, grad });
        Ok(())
    }

    /// Add a matrix initialized as normal(0, std) from the given rng.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: Shape,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let data = (0..shape.len())
            .map(|_| {
                // Box-Muller keeps us independent of rand_distr.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Shape) -> Result<()> {
        self.add(name, shape, vec![0.0; shape.len()])
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Parameters in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(|n| n.as_str()).zip(self.params.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.names.iter().map(|n| n.as_str()).zip(self.params.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}
