use std::collections::HashMap;

use super::{NumericsError, RngState, Tensor};

/// Trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { grad: zeros.clone(), adam_m: zeros.clone(), adam_v: zeros, value, step_count: 0 }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameters belonging to one module.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.params.push(Parameter::new(value));
        ParamId(id)
    }

    /// Gaussian-initialised parameter with the given standard deviation.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut RngState) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
        self.add(name, Tensor::new(shape, data).expect("valid init shape"))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f32) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![v; n]).expect("valid init shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Named values, in insertion order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect()
    }

    /// Overwrite every value from `named`; names and shapes must match exactly.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<(), NumericsError> {
        if named.len() != self.params.len() {
            return Err(NumericsError::Shape(format!("expected {} tensors, found {}", self.params.len(), named.len())));
        }
        for (name, t) in named {
            let id = self.id(name).ok_or_else(|| NumericsError::Shape(format!("unexpected tensor {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(NumericsError::Shape(format!("tensor {name}: expected shape {:?}, found {:?}", p.value.shape(), t.shape())));
            }
            *p = Parameter::new(t.clone());
        }
        Ok(())
    }
}
