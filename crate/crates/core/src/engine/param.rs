use rand::Rng;

use super::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Registry of parameters in creation order. Ids are indices into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            id,
            name: name.into(),
            value,
            grad,
        });
        id
    }

    /// He (fan-in) normal initialization for a `[out, in, kd, kh, kw]` kernel.
    pub fn add_conv_kernel<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        rng: &mut R,
    ) -> ParamId {
        let fan_in = shape.numel() / shape.batch().max(1);
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, len: usize, value: f32) -> ParamId {
        self.add(name, Tensor::full(Shape::new(len, 1, 1, 1, 1), value))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Copies all parameter values (not gradients).
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len(), "snapshot length mismatch");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(
                p.value.shape(),
                v.shape(),
                "snapshot shape mismatch for {}",
                p.name
            );
            p.value.data_mut().copy_from_slice(v.data());
        }
    }
}
