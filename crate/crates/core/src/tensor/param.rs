use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Allocated iff the parameter currently requires gradients.
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }
}

/// Named learnable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Some(Tensor::zeros(value.shape()));
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
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

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        let p = &mut self.params[id.0];
        match (on, p.grad.is_some()) {
            (true, false) => p.grad = Some(Tensor::zeros(p.value.shape())),
            (false, true) => p.grad = None,
            _ => {}
        }
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        if let Some(g) = &mut self.params[id.0].grad {
            for (a, b) in g.data_mut().iter_mut().zip(grad) {
                *a += b;
            }
        }
    }

    /// Overwrites the value of a parameter with a same-shaped tensor.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                shapes: vec![p.value.shape().to_vec(), value.shape().to_vec()],
            });
        }
        p.value = value;
        Ok(())
    }

    /// Loads every parameter by name from `(name, tensor)` pairs.
    pub fn load_named(&mut self, entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<()> {
        let mut seen = 0usize;
        for (name, t) in entries {
            let id = self
                .lookup(&name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name}")))?;
            self.assign(id, t)?;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint holds {seen} parameters, model expects {}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }
}

/// Glorot-uniform initialisation. `fan_out` is the remaining extent of
/// `shape` after `fan_in`.
pub fn init_param(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let fan_in = fan_in.max(1);
    let fan_out = (n / fan_in).max(1);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bound_for_square_three() {
        let t = init_param(&[3, 3], 3, 7);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(t, init_param(&[3, 3], 3, 7));
        assert_ne!(t, init_param(&[3, 3], 3, 8));
    }

    #[test]
    fn glorot_mean_near_zero() {
        let t = init_param(&[100, 100], 100, 11);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn grad_buffer_tracks_flag() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        assert!(s.get(id).grad.is_some());
        s.set_requires_grad(id, false);
        assert!(s.get(id).grad.is_none());
        s.set_requires_grad(id, true);
        assert_eq!(s.get(id).grad.as_ref().unwrap().shape(), &[2]);
    }

    #[test]
    fn load_named_checks_coverage() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]));
        s.add("b", Tensor::zeros(&[1]));
        assert!(s
            .load_named(vec![("a".to_string(), Tensor::scalar(1.0))])
            .is_err());
        s.load_named(vec![
            ("a".to_string(), Tensor::vector(vec![1.0])),
            ("b".to_string(), Tensor::vector(vec![2.0])),
        ])
        .unwrap();
        assert_eq!(s.value(ParamId(1)).data(), &[2.0]);
    }
}
