//! Named learnable parameters and their gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, RunningStats, Tape, Tensor, Var};

/// One learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    /// Set once a backward pass has produced a gradient for this parameter.
    pub grad_set: bool,
}

/// How a parameter tensor is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Zero-mean normal scaled by fan-in: std = sqrt(2 / fan_in).
    HeNormal { fan_in: usize },
    Zero,
    One,
}

/// Blueprint of one parameter tensor (shape and init, no storage).
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Blueprint of one batch-norm running-statistics buffer.
#[derive(Clone, Debug)]
pub struct StatsSpec {
    pub name: String,
    pub channels: usize,
}

/// The full ordered parameter set of a network, plus batch-norm buffers.
#[derive(Clone, Debug)]
pub struct ParamSet<E> {
    params: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
    stats: Vec<(String, RunningStats<E>)>,
}

/// Tape handles for one bound parameter set (one forward/backward pass).
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

impl<E: Element> ParamSet<E> {
    /// Allocate and initialize parameters from their blueprints. Draws are
    /// made in blueprint order from a seeded generator, in f64, so the same
    /// seed yields the same network at every precision.
    pub fn initialize(specs: &[ParamSpec], stats: &[StatsSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut index = HashMap::with_capacity(specs.len());
        for spec in specs {
            if index.contains_key(&spec.name) {
                return Err(Error::invalid(format!(
                    "duplicate parameter name `{}`",
                    spec.name
                )));
            }
            let value = match spec.init {
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::One => Tensor::full(&spec.shape, E::one()),
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_fn(&spec.shape, |_| E::from_f64(normal.sample(&mut rng)))
                }
            };
            index.insert(spec.name.clone(), params.len());
            params.push(Parameter {
                name: spec.name.clone(),
                grad: Tensor::zeros(&spec.shape),
                grad_set: false,
                value,
            });
        }
        let stats = stats
            .iter()
            .map(|s| (s.name.clone(), RunningStats::new(s.channels)))
            .collect();
        Ok(ParamSet { params, index, stats })
    }

    /// Rebuild a set from raw parts (checkpoint loading).
    pub fn from_parts(
        params: Vec<(String, Tensor<E>)>,
        stats: Vec<(String, RunningStats<E>)>,
    ) -> Self {
        let mut index = HashMap::with_capacity(params.len());
        let params = params
            .into_iter()
            .enumerate()
            .map(|(i, (name, value))| {
                index.insert(name.clone(), i);
                Parameter {
                    name,
                    grad: Tensor::zeros(value.shape()),
                    grad_set: false,
                    value,
                }
            })
            .collect();
        ParamSet { params, index, stats }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar learnables.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn params(&self) -> &[Parameter<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<E>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<E>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<E>> {
        self.index.get(name).copied().map(move |i| &mut self.params[i])
    }

    pub fn running_stats(&self) -> &[(String, RunningStats<E>)] {
        &self.stats
    }

    pub(crate) fn stats_mut(&mut self, id: usize) -> &mut RunningStats<E> {
        &mut self.stats[id].1
    }

    pub(crate) fn stats_ref(&self, id: usize) -> &RunningStats<E> {
        &self.stats[id].1
    }

    /// Insert every parameter value into the tape as a leaf, in order.
    pub fn bind(&self, tape: &mut Tape<E>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Pull the gradients of a backward pass into the parameter accumulators.
    pub fn absorb_gradients(&mut self, grads: &Gradients<E>, bound: &Bound) -> Result<()> {
        for (param, &var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(var) {
                param.grad.add_assign(g)?;
                param.grad_set = true;
            }
        }
        Ok(())
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.grad.fill(E::zero());
            p.grad_set = false;
        }
    }

    /// Convert the whole set (values and running stats) to another precision.
    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    grad_set: false,
                })
                .collect(),
            index: self.index.clone(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        RunningStats {
                            mean: s.mean.iter().map(|&v| F::from_f64(v.as_f64())).collect(),
                            var: s.var.iter().map(|&v| F::from_f64(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, shape: &[usize]) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::HeNormal {
                fan_in: shape.iter().skip(1).product(),
            },
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_unique_names_enforced() {
        let specs = vec![spec("a.weight", &[4, 3, 3, 3]), spec("b.weight", &[2, 4])];
        let p1 = ParamSet::<f32>::initialize(&specs, &[], 7).unwrap();
        let p2 = ParamSet::<f32>::initialize(&specs, &[], 7).unwrap();
        assert_eq!(p1.params()[0].value, p2.params()[0].value);
        let p3 = ParamSet::<f32>::initialize(&specs, &[], 8).unwrap();
        assert_ne!(p1.params()[0].value, p3.params()[0].value);

        let dup = vec![spec("x", &[1]), spec("x", &[1])];
        assert!(ParamSet::<f32>::initialize(&dup, &[], 0).is_err());
    }

    #[test]
    fn same_seed_same_values_across_precisions() {
        let specs = vec![spec("w", &[3, 5])];
        let pf = ParamSet::<f32>::initialize(&specs, &[], 42).unwrap();
        let pd = ParamSet::<f64>::initialize(&specs, &[], 42).unwrap();
        for (a, b) in pf.params()[0].value.data().iter().zip(pd.params()[0].value.data()) {
            assert_eq!(*a, *b as f32);
        }
    }
}
