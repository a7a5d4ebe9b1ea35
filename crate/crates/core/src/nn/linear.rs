use rand::Rng;

use super::ops::{col_sum_acc, matmul, matmul_nt, matmul_tn_acc};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

/// Affine map over the last axis: `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Self::from_parts(
            Tensor::randn(&[input, output], std, rng),
            Tensor::zeros(&[output]),
        )
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn rows_of(&self, shape: &[usize]) -> Result<usize> {
        match shape.last() {
            Some(&last) if last == self.input_dim() => Ok(shape.iter().product::<usize>() / last),
            _ => Err(Error::Shape {
                layer: "linear",
                expected: format!("[.., {}]", self.input_dim()),
                got: shape.to_vec(),
            }),
        }
    }

    pub(crate) fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let rows = self.rows_of(input.shape())?;
        let (din, dout) = (self.input_dim(), self.output_dim());
        let mut out = matmul(input.data(), self.weight.value.data(), rows, din, dout);
        let bias = self.bias.value.data();
        for row in out.chunks_mut(dout) {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        Tensor::new(shape, out)
    }

    pub(crate) fn backward(&mut self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let rows = self.rows_of(input.shape())?;
        let (din, dout) = (self.input_dim(), self.output_dim());
        let mut out_shape = input.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        if upstream.shape() != out_shape.as_slice() {
            return Err(Error::Shape {
                layer: "linear (upstream gradient)",
                expected: format!("{out_shape:?}"),
                got: upstream.shape().to_vec(),
            });
        }
        let g = upstream.data();
        matmul_tn_acc(input.data(), g, rows, din, dout, self.weight.grad.data_mut());
        col_sum_acc(g, rows, dout, self.bias.grad.data_mut());
        let dx = matmul_nt(g, self.weight.value.data(), rows, dout, din);
        Tensor::new(input.shape().to_vec(), dx)
    }
}
