use crate::error::{Error, Result};

use super::Real;

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {}",
                fmt_shape(&shape)
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for {}", n, fmt_shape(&shape)),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn shape_str(&self) -> String {
        fmt_shape(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                fmt_shape(shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(N, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, "[N x C x H x W]", self.shape_str())),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, "[rows x cols]", self.shape_str())),
        }
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, fmt_shape(shape), self.shape_str()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        other.expect_shape(op, &self.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
            grad: None,
        }
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let (n, _, h, w) = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("[{n}x*x{h}x{w}]"),
                    p.shape_str(),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * h * w);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&channels) {
                let chunk = c * h * w;
                data.extend_from_slice(&p.data[b * chunk..(b + 1) * chunk]);
            }
        }
        Self::new(vec![n, total, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, channels: &[usize]) -> Result<Vec<Self>> {
        let (n, c, h, w) = self.dims4("split_channels")?;
        if channels.iter().sum::<usize>() != c {
            return Err(Error::shape(
                "split_channels",
                format!("{c} channels"),
                format!("{channels:?}"),
            ));
        }
        let mut out: Vec<Vec<T>> = channels
            .iter()
            .map(|&k| Vec::with_capacity(n * k * h * w))
            .collect();
        let mut off = 0;
        for _ in 0..n {
            for (dst, &k) in out.iter_mut().zip(channels) {
                dst.extend_from_slice(&self.data[off..off + k * h * w]);
                off += k * h * w;
            }
        }
        out.into_iter()
            .zip(channels)
            .map(|(d, &k)| Self::new(vec![n, k, h, w], d))
            .collect()
    }
}
