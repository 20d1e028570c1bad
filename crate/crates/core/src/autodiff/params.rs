use super::tensor::Tensor;
use crate::{Error, Real, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
}

/// Named trainable tensors and their gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Vec<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if grad.len() != e.value.len() {
            return Err(Error::shape(
                "set_grad",
                format!("{} values for parameter {} of {}", grad.len(), e.name, e.value.len()),
            ));
        }
        e.grad = Some(grad);
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let e = &mut self.entries[id.0];
        let n = e.value.len();
        let buf = e.grad.get_or_insert_with(|| vec![T::zero(); n]);
        buf.iter_mut().zip(g).for_each(|(d, s)| *d += *s);
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            let n = e.value.len();
            match &mut e.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
                None => e.grad = Some(vec![T::zero(); n]),
            }
        }
    }

    /// L2 norm over all gradient buffers present.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flatten()
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of the store in another precision, without gradients.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: None,
                })
                .collect(),
        }
    }

    /// True when both stores hold the same names, shapes and bit-identical values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.entries.iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its current gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.entries.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.entries.len()
            )));
        }
        if let Some(e) = params.entries.iter().find(|e| e.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", e.name)));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr_t = T::from_f64c(c.lr / bc1);
        let bc2_sqrt = T::from_f64c(bc2.sqrt());
        let eps = T::from_f64c(c.eps);
        for (i, e) in params.entries.iter_mut().enumerate() {
            let g = e.grad.as_ref().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                *p -= lr_t * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
