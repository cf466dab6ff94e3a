//! Dense row-major f32 tensor with an optional gradient buffer.

use serde::{Deserialize, Serialize};

/// Dense n-dimensional array, row-major f32 storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Allocates the gradient buffer if missing and returns it.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Reinterprets the buffer under a new shape of the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0_f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Element-wise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// A named, trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            tensor,
            name: name.into(),
            trainable: true,
        }
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Central registry of model parameters. Layers hold [`ParamId`]s; forward
/// passes read through `&ParamSet`, backward passes accumulate into a
/// [`GradSet`] so that batches can run data-parallel over shared weights.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter::new(name, tensor));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Gradient buffers mirroring a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct GradSet {
    grads: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Accumulates `other` into `self`, element-wise, index order fixed.
    pub fn accumulate(&mut self, other: &GradSet) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.grads {
            g.scale(s);
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Tensor> {
        self.grads.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_checked() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic(expected = "does not match data length")]
    fn shape_mismatch_panics() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0]);
    }

    #[test]
    fn grad_lazily_allocated() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.grad().is_none());
        t.grad_mut()[1] = 2.5;
        assert_eq!(t.grad().unwrap(), &[0.0, 2.5, 0.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn paramset_rejects_duplicate_names() {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::zeros(&[2]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            ps.register("w", Tensor::zeros(&[2]));
        }));
        assert!(result.is_err());
    }

    #[test]
    fn gradset_accumulate_matches_manual_sum() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Tensor::zeros(&[2]));
        let mut a = GradSet::zeros_like(&ps);
        let mut b = GradSet::zeros_like(&ps);
        a.get_mut(id).data_mut().copy_from_slice(&[1.0, 2.0]);
        b.get_mut(id).data_mut().copy_from_slice(&[0.5, -1.0]);
        a.accumulate(&b);
        assert_eq!(a.get(id).data(), &[1.5, 1.0]);
    }
}
