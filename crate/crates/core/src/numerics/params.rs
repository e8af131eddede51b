use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::rng::RngStream;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Real> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

/// Gradients produced by one backward pass, indexed like the owning
/// [`ParamSet`]. Entries are `None` for parameters the loss never touched.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(&t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Named values in registration order, for checkpointing.
    pub fn named_values(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from named arrays; every parameter must be present
    /// with a matching shape.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut by_name: HashMap<String, Tensor<T>> = entries.into_iter().collect();
        for p in &mut self.params {
            let v = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::Consistency(format!("checkpoint lacks {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load",
                    left: p.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            p.value = v;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Consistency(format!(
                "checkpoint has unknown array {extra}"
            )));
        }
        Ok(())
    }
}

/// Fan-in-scaled uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a
/// `[fan_in, fan_out]` projection.
pub fn init_projection<T: Real>(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::c((rng.uniform() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Normal with standard deviation `std`, used for embedding tables.
pub fn init_normal<T: Real>(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_shape_follows_value() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(ps.get(id).grad.shape(), &[3, 4]);
        assert!(ps.add("w", Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn zero_grad_resets() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut g = Gradients::empty(1);
        g.grads[0] = Some(Tensor::full(&[2, 2], 1.5));
        ps.accumulate(&g);
        ps.accumulate(&g);
        assert_eq!(ps.get(id).grad.data(), &[3.0; 4]);
        ps.zero_grad();
        assert_eq!(ps.get(id).grad.sum(), 0.0);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a: Tensor<f32> = init_projection(16, 8, &mut RngStream::new(1));
        let b: Tensor<f32> = init_projection(16, 8, &mut RngStream::new(1));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| x.abs() <= 0.25));
        let e: Tensor<f64> = init_normal(&[100, 50], 0.02, &mut RngStream::new(2));
        let var = e.sq_norm() / e.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.001, "{}", var.sqrt());
    }
}
