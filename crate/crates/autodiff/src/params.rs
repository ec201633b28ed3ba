use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor plus AdamW state.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFanIn(usize),
}

/// Ordered collection of parameters. Order is registration order and is the
/// order used by checkpoints and flattening.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![F::zero(); numel],
            Init::Constant(c) => vec![F::of(c); numel],
            Init::UniformFanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| F::of(rng.random_range(-bound..=bound))).collect()
            }
        };
        let tensor = Tensor::new(shape, values).expect("shape and values agree").with_requires_grad(true);
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            first_moment: vec![F::zero(); numel],
            second_moment: vec![F::zero(); numel],
            step: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds per-parameter gradients (as returned by [`crate::Gradients::param_grads`]).
    pub fn accumulate(&mut self, grads: &[Option<Vec<F>>], scale: F) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.tensor.accumulate_grad(g, scale);
            }
        }
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<F> {
        self.params.iter().flat_map(|p| p.tensor.values().iter().copied()).collect()
    }

    /// Gradient slots concatenated in registration order; missing gradients are zeros.
    pub fn flatten_grads(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            match p.tensor.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(F::zero(), p.tensor.numel())),
            }
        }
        out
    }

    pub fn set_flat(&mut self, values: &[F]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(AutodiffError::InvalidArgument {
                op: "set_flat",
                msg: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.values_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Same parameters converted to another element type; optimizer state is reset.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let params = self
            .params
            .iter()
            .map(|p| {
                let values: Vec<G> = p.tensor.values().iter().map(|v| G::of(v.as_f64())).collect();
                let n = values.len();
                Parameter {
                    name: p.name.clone(),
                    tensor: Tensor::new(p.tensor.shape().to_vec(), values)
                        .expect("same shape")
                        .with_requires_grad(true),
                    first_moment: vec![G::zero(); n],
                    second_moment: vec![G::zero(); n],
                    step: 0,
                }
            })
            .collect();
        ParamStore { params }
    }
}
