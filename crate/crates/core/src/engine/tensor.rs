use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use super::alloc;

/// Extents of a 5-axis tensor: batch, channels, depth, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub const fn new(
        batch: usize,
        channels: usize,
        depth: usize,
        height: usize,
        width: usize,
    ) -> Self {
        Shape([batch, channels, depth, height, width])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    /// Number of voxels in one channel.
    pub fn volume(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<f32>()
    }

    pub fn with_batch(self, batch: usize) -> Self {
        let mut s = self;
        s.0[0] = batch;
        s
    }

    pub fn with_channels(self, channels: usize) -> Self {
        let mut s = self;
        s.0[1] = channels;
        s
    }

    pub fn with_spatial(self, spatial: [usize; 3]) -> Self {
        let mut s = self;
        s.0[2..].copy_from_slice(&spatial);
        s
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, d, h, w] = self.0;
        write!(f, "{b}x{c}x{d}x{h}x{w}")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Dense row-major `f32` tensor. Its buffer is counted by the live-byte
/// accountant for as long as the tensor exists.
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Wraps `data`; panics if its length does not match `shape`.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "tensor data length does not match shape {shape}"
        );
        alloc::register(data.len() * 4);
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_vec(shape, vec![0.0; shape.numel()])
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self::from_vec(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(Shape::new(1, 1, 1, 1, 1), vec![value])
    }

    /// Samples `N(0, std²)` elements.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * 4
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Contiguous slice for one (batch, channel) pair.
    pub fn channel(&self, b: usize, c: usize) -> &[f32] {
        let v = self.shape.volume();
        let start = (b * self.shape.channels() + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let v = self.shape.volume();
        let start = (b * self.shape.channels() + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(
            shape.numel(),
            self.data.len(),
            "reshape to {shape} changes element count"
        );
        self.shape = shape;
        self
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Elementwise `self -= other`.
    pub fn sub_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "sub_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_vec(self.shape, data)
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f32::max)
    }

    /// Copies batch items `[start, start + len)`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Tensor {
        let per = self.shape.numel() / self.shape.batch().max(1);
        let data = self.data[start * per..(start + len) * per].to_vec();
        Tensor::from_vec(self.shape.with_batch(len), data)
    }

    /// Stacks tensors of identical per-item shape along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Tensor {
        let first = items
            .first()
            .expect("stack_batch needs at least one tensor")
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            assert_eq!(
                t.shape.with_batch(first.batch()),
                first,
                "stack_batch shape mismatch"
            );
            batch += t.shape.batch();
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(first.with_batch(batch), data)
    }

    pub fn into_vec(mut self) -> Vec<f32> {
        alloc::release(self.data.len() * 4);
        std::mem::take(&mut self.data)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::from_vec(self.shape, self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        alloc::release(self.data.len() * 4);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(
            f,
            "Tensor({}, {:?}",
            self.shape,
            &self.data[..self.data.len().min(SHOWN)]
        )?;
        if self.data.len() > SHOWN {
            write!(f, " ..")?;
        }
        write!(f, ")")
    }
}
