//! Self-organized operational layers.
//!
//! A generative neuron replaces the linear weight-times-input of a
//! convolution with a learned truncated Maclaurin polynomial of its input:
//!
//! ```text
//! out = b + Σ_{q=1..Q} conv(x^q, W_q)
//! ```
//!
//! Each power has its own kernel bank `W_q`; the single bias `b` is the
//! constant term. With `Q = 1` the layer is an ordinary convolution.
//!
//! The Q convolutions are evaluated as one convolution over the channel-wise
//! concatenation `[x, x², …, x^Q]` with the banks laid side by side, which is
//! the same sum with a single GEMM.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::autograd::{Tape, Var};
use crate::conv::{conv2d_output_size, conv_transpose2d_output_size};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weights: Var,
    pub bias: Var,
}

/// Bound of the uniform initialization for power `q` (1-based).
pub fn init_bound(in_channels: usize, out_channels: usize, kernel: usize, q: usize) -> f64 {
    (6.0 / ((in_channels + out_channels) * kernel * kernel) as f64).sqrt() / q as f64
}

/// Fill a `[Q, ...]` bank with `U(−bound_q, bound_q)` per power and zero the bias.
fn init_bank<T: Element>(
    weights: &mut Tensor<T>,
    bias: &mut Tensor<T>,
    fan: (usize, usize, usize),
    seed: u64,
) {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let q_count = weights.shape()[0];
    let per_q = weights.numel() / q_count;
    for (qi, bank) in weights.data_mut().chunks_mut(per_q).enumerate() {
        let bound = init_bound(fan.0, fan.1, fan.2, qi + 1);
        for w in bank {
            *w = T::from_f64_lossy(bound * (2.0 * rng.random::<f64>() - 1.0));
        }
    }
    bias.data_mut().fill(T::zero());
}

/// `[x, x², …, x^Q]` stacked along channels.
fn power_stack<T: Element>(tape: &mut Tape<T>, x: Var, q: usize) -> Result<Var> {
    let mut stacked = tape.pow(x, 1)?;
    for power in 2..=q {
        let term = tape.pow(x, power as u32)?;
        stacked = tape.concat_channels(stacked, term)?;
    }
    Ok(stacked)
}

fn check_input<T: Element>(
    tape: &Tape<T>,
    x: Var,
    in_channels: usize,
    op: &'static str,
) -> Result<()> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    if c != in_channels {
        return Err(Error::Shape {
            op,
            detail: format!("input has {c} channels, layer expects {in_channels}"),
        });
    }
    Ok(())
}

fn validate_dims(
    q: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> Result<()> {
    if q == 0 {
        return Err(Error::InvalidArgument(
            "polynomial order Q must be at least 1".into(),
        ));
    }
    if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "channels, kernel and stride must be positive".into(),
        ));
    }
    Ok(())
}

/// Operational counterpart of a strided 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationalConv2D<T: Element = f32> {
    /// `[Q, Cout, Cin, k, k]`; slice `q−1` holds the coefficient kernels of `x^q`.
    pub weights: Tensor<T>,
    /// `[Cout]`, the constant term shared by all powers.
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> OperationalConv2D<T> {
    /// A layer with zeroed parameters.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        q: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        validate_dims(q, in_channels, out_channels, kernel, stride)?;
        Ok(Self {
            weights: Tensor::zeros([q, out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros([out_channels]),
            stride,
            padding,
        })
    }

    pub fn from_params(
        weights: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[q, cout, cin, k, k2] = weights.shape() else {
            return Err(Error::shape(
                "op_conv",
                format!(
                    "weights must be [Q, Cout, Cin, k, k], got {:?}",
                    weights.shape()
                ),
            ));
        };
        if k != k2 || bias.shape() != [cout] {
            return Err(Error::shape(
                "op_conv",
                format!(
                    "weights {:?} incompatible with bias {:?}",
                    weights.shape(),
                    bias.shape()
                ),
            ));
        }
        validate_dims(q, cin, cout, k, stride)?;
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn q(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    pub fn output_size(&self, input: usize) -> Result<usize> {
        conv2d_output_size(input, self.kernel(), self.stride, self.padding)
    }

    /// Deterministic initialization: `w_q ~ U(±sqrt(6/((Cin+Cout)k²))/q)`, zero bias.
    pub fn init_params(&mut self, seed: u64) {
        let fan = (self.in_channels(), self.out_channels(), self.kernel());
        init_bank(&mut self.weights, &mut self.bias, fan, seed);
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LayerVars {
        LayerVars {
            weights: tape.leaf(self.weights.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: LayerVars, x: Var) -> Result<Var> {
        check_input(tape, x, self.in_channels(), "op_conv_forward")?;
        let (q, cout, cin, k) = (
            self.q(),
            self.out_channels(),
            self.in_channels(),
            self.kernel(),
        );
        let stacked = power_stack(tape, x, q)?;
        // [Q, Cout, Cin, k, k] -> [Cout, Q·Cin, k, k]
        let swapped = tape.swap_leading(vars.weights)?;
        let kernel = tape.reshape(swapped, &[cout, q * cin, k, k])?;
        tape.conv2d(stacked, kernel, Some(vars.bias), self.stride, self.padding)
    }

    /// Forward pass on a plain tensor without recording gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, vars, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Operational counterpart of a transposed 2-D convolution (learned upsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct TransposedOperationalConv2D<T: Element = f32> {
    /// `[Q, Cin, Cout, k, k]`, matching the transposed-convolution kernel layout per power.
    pub weights: Tensor<T>,
    /// `[Cout]`.
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<T: Element> TransposedOperationalConv2D<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        q: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        validate_dims(q, in_channels, out_channels, kernel, stride)?;
        if output_padding >= stride {
            return Err(Error::InvalidArgument(format!(
                "output_padding {output_padding} must be smaller than stride {stride}"
            )));
        }
        Ok(Self {
            weights: Tensor::zeros([q, in_channels, out_channels, kernel, kernel]),
            bias: Tensor::zeros([out_channels]),
            stride,
            padding,
            output_padding,
        })
    }

    pub fn from_params(
        weights: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let &[q, cin, cout, k, k2] = weights.shape() else {
            return Err(Error::shape(
                "op_conv_transpose",
                format!(
                    "weights must be [Q, Cin, Cout, k, k], got {:?}",
                    weights.shape()
                ),
            ));
        };
        if k != k2 || bias.shape() != [cout] {
            return Err(Error::shape(
                "op_conv_transpose",
                format!(
                    "weights {:?} incompatible with bias {:?}",
                    weights.shape(),
                    bias.shape()
                ),
            ));
        }
        let mut layer = Self::new(cin, cout, k, q, stride, padding, output_padding)?;
        layer.weights = weights;
        layer.bias = bias;
        Ok(layer)
    }

    pub fn q(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    pub fn output_size(&self, input: usize) -> Result<usize> {
        conv_transpose2d_output_size(
            input,
            self.kernel(),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }

    pub fn init_params(&mut self, seed: u64) {
        let fan = (self.in_channels(), self.out_channels(), self.kernel());
        init_bank(&mut self.weights, &mut self.bias, fan, seed);
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LayerVars {
        LayerVars {
            weights: tape.leaf(self.weights.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: LayerVars, x: Var) -> Result<Var> {
        check_input(tape, x, self.in_channels(), "op_conv_transpose_forward")?;
        let (q, cin, cout, k) = (
            self.q(),
            self.in_channels(),
            self.out_channels(),
            self.kernel(),
        );
        let stacked = power_stack(tape, x, q)?;
        // [Q, Cin, Cout, k, k] is already [Q·Cin, Cout, k, k] in memory.
        let kernel = tape.reshape(vars.weights, &[q * cin, cout, k, k])?;
        tape.conv_transpose2d(
            stacked,
            kernel,
            Some(vars.bias),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, vars, x)?;
        Ok(tape.value(y).clone())
    }
}
