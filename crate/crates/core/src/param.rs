//! Flat parameter storage.
//!
//! All learnable tensors live in one contiguous buffer described by a
//! [`ParamLayout`]. Gradients, Adam moments and finite-difference probes
//! then operate on plain slices, and checkpoints serialize the buffer
//! verbatim.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, ArrayViewMut2, ArrayViewMut4};

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Names, shapes and offsets of every tensor in a store.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        let idx = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor '{name}'"));
        &self.specs[*idx]
    }

    pub fn try_spec(&self, name: &str) -> Option<&TensorSpec> {
        self.index.get(name).map(|i| &self.specs[*i])
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.spec(name).range()
    }

    /// Ranges of every tensor whose name starts with `prefix`.
    pub fn ranges_with_prefix(&self, prefix: &str) -> Vec<Range<usize>> {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.range())
            .collect()
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    pub fn tensor(&mut self, name: impl Into<String>, shape: &[usize]) -> &mut Self {
        let name = name.into();
        let len: usize = shape.iter().product();
        self.specs.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
        });
        self.total += len;
        self
    }

    pub fn build(self) -> Arc<ParamLayout> {
        let mut index = HashMap::with_capacity(self.specs.len());
        for (i, s) in self.specs.iter().enumerate() {
            let prev = index.insert(s.name.clone(), i);
            assert!(prev.is_none(), "duplicate tensor name '{}'", s.name);
        }
        Arc::new(ParamLayout {
            specs: self.specs,
            index,
            total: self.total,
        })
    }
}

/// A flat buffer of scalars laid out by a shared [`ParamLayout`].
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    layout: Arc<ParamLayout>,
    pub data: Vec<T>,
}

impl<T: Real> ParamStore<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![T::zero(); layout.total_len()];
        ParamStore { layout, data }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> &[T] {
        &self.data[self.layout.range(name)]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [T] {
        let r = self.layout.range(name);
        &mut self.data[r]
    }

    pub fn view1(&self, name: &str) -> ArrayView1<'_, T> {
        let spec = self.layout.spec(name);
        assert_eq!(spec.shape.len(), 1, "{name} is not rank 1");
        ArrayView1::from_shape(spec.shape[0], &self.data[spec.range()]).unwrap()
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, T> {
        let spec = self.layout.spec(name);
        assert_eq!(spec.shape.len(), 2, "{name} is not rank 2");
        ArrayView2::from_shape((spec.shape[0], spec.shape[1]), &self.data[spec.range()]).unwrap()
    }

    pub fn view4(&self, name: &str) -> ArrayView4<'_, T> {
        let spec = self.layout.spec(name);
        assert_eq!(spec.shape.len(), 4, "{name} is not rank 4");
        ArrayView4::from_shape(
            (spec.shape[0], spec.shape[1], spec.shape[2], spec.shape[3]),
            &self.data[spec.range()],
        )
        .unwrap()
    }

    pub fn view1_mut(&mut self, name: &str) -> ArrayViewMut1<'_, T> {
        let spec = self.layout.spec(name).clone();
        ArrayViewMut1::from_shape(spec.shape[0], &mut self.data[spec.range()]).unwrap()
    }

    pub fn view2_mut(&mut self, name: &str) -> ArrayViewMut2<'_, T> {
        let spec = self.layout.spec(name).clone();
        ArrayViewMut2::from_shape((spec.shape[0], spec.shape[1]), &mut self.data[spec.range()])
            .unwrap()
    }

    pub fn view4_mut(&mut self, name: &str) -> ArrayViewMut4<'_, T> {
        let spec = self.layout.spec(name).clone();
        ArrayViewMut4::from_shape(
            (spec.shape[0], spec.shape[1], spec.shape[2], spec.shape[3]),
            &mut self.data[spec.range()],
        )
        .unwrap()
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Lossless f64 copy used by checkpoints and precision casts.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn load_f64(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::format(format!(
                "store length mismatch: expected {}, got {}",
                self.data.len(),
                values.len()
            )));
        }
        for (dst, src) in self.data.iter_mut().zip(values) {
            *dst = T::from_f64(*src).ok_or_else(|| Error::numeric("non-representable value"))?;
        }
        Ok(())
    }
}

/// Adam optimizer over a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update with the given learning rate. Moments are kept in f64 so
    /// f32 models do not lose the small tail of the running averages.
    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64().unwrap();
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let upd = lr * mhat / (vhat.sqrt() + self.eps);
            let p = params[i].to_f64().unwrap() - upd;
            params[i] = T::from_f64(p).unwrap();
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        let g = g.to_f64().unwrap();
        sq += g * g;
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm).unwrap();
        for g in grads.iter_mut() {
            *g = *g * scale;
        }
    }
    norm
}
