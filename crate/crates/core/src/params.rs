//! Named trainable parameters, their per-step registration on a tape, and
//! the adaptive-moment gradient-descent update.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, TensorId};

/// Index of a parameter within its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors. Registration order is fixed at
/// model construction, which makes checkpoints and updates deterministic.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.requires_grad = true;
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight initialized uniformly in +-1/sqrt(fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha12Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape/data"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::filled(shape, T::ONE))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Register every parameter on a fresh tape; index the result by ParamId.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            ids: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Register every parameter with gradient tracking disabled
    /// (evaluation/inference route).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            ids: self
                .tensors
                .iter()
                .map(|t| {
                    let mut frozen = t.clone();
                    frozen.requires_grad = false;
                    frozen.grad = None;
                    tape.leaf(&frozen)
                })
                .collect(),
        }
    }

    /// Accumulate this step's gradients from the tape into `grad` buffers.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        for (i, &id) in binding.ids.iter().enumerate() {
            tape.absorb_grad_into(id, &mut self.tensors[i]);
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replace the value of the parameter called `name`.
    pub fn load_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{}' in checkpoint", name)))?;
        if self.tensors[idx].shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter '{}' shape {:?} does not match checkpoint {:?}",
                name,
                self.tensors[idx].shape(),
                value.shape()
            )));
        }
        let rg = self.tensors[idx].requires_grad;
        self.tensors[idx] = value;
        self.tensors[idx].requires_grad = rg;
        Ok(())
    }
}

/// Tape ids of all parameters, for one forward/backward step.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Adam-style update with bias correction, applied in store order.
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        AdamState {
            m: store.tensors.iter().map(|t| vec![T::ZERO; t.numel()]).collect(),
            v: store.tensors.iter().map(|t| vec![T::ZERO; t.numel()]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply accumulated gradients and clear them.
    pub fn apply(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            let grad = match tensor.grad.take() {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = tensor.data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let mhat = m[j] * corr1;
                let vhat = v[j] * corr2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
