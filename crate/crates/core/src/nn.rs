//! Feed-forward networks with hand-written reverse mode, and an
//! adaptive-moment optimizer.
//!
//! Parameters live in one flat vector. Layer `l` maps `widths[l]` inputs to
//! `widths[l + 1]` outputs and stores its weight matrix (row-major,
//! `in x out`) followed by its bias. Every hidden layer applies the
//! activation; the output layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Silu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Activation::Silu),
            2 => Ok(Activation::Tanh),
            t => Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        }
    }

    #[inline]
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Silu => x / (S::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Silu => {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() + x * (S::one() - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net<S> {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<S>,
}

/// Intermediate values of a batched forward pass, consumed by `backward`.
pub struct Tape<S> {
    batch: usize,
    /// `inputs[l]` is the input of layer `l` (`batch x widths[l]`).
    inputs: Vec<Vec<S>>,
    /// Pre-activation values of every hidden layer.
    pre: Vec<Vec<S>>,
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<S: Scalar> Net<S> {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer widths {widths:?}")));
        }
        let mut params = Vec::with_capacity(param_count(widths));
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(S::of(rng.random_range(-bound..bound)));
            }
        }
        Ok(Self { widths: widths.to_vec(), activation, params })
    }

    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<S>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer widths {widths:?}")));
        }
        let expected = param_count(widths);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        Ok(Self { widths: widths.to_vec(), activation, params })
    }

    /// Sets the output layer's weights and bias to zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.widths.len();
        let last = self.widths[n - 2] * self.widths[n - 1] + self.widths[n - 1];
        let len = self.params.len();
        self.params[len - last..].iter_mut().for_each(|p| *p = S::zero());
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn cast<U: Scalar>(&self) -> Net<U> {
        Net {
            widths: self.widths.clone(),
            activation: self.activation,
            params: self.params.iter().map(|p| U::of(p.to_f64_lossy())).collect(),
        }
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    fn check_batch(&self, input: &[S], batch: usize) -> Result<()> {
        let expected = batch * self.input_dim();
        if input.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: input.len() });
        }
        Ok(())
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[S]) -> Result<Vec<S>> {
        self.forward_batch(input, 1)
    }

    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, input: &[S], batch: usize) -> Result<Vec<S>> {
        self.check_batch(input, batch)?;
        let layers = self.widths.len() - 1;
        let mut x = input.to_vec();
        for (l, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let y = self.affine(&x, batch, off, fan_in, fan_out);
            x = if l + 1 < layers { y.into_iter().map(|v| self.activation.apply(v)).collect() } else { y };
        }
        Ok(x)
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward_tape(&self, input: &[S], batch: usize) -> Result<(Vec<S>, Tape<S>)> {
        self.check_batch(input, batch)?;
        let layers = self.widths.len() - 1;
        let mut tape = Tape { batch, inputs: Vec::with_capacity(layers), pre: Vec::with_capacity(layers - 1) };
        let mut x = input.to_vec();
        for (l, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let y = self.affine(&x, batch, off, fan_in, fan_out);
            tape.inputs.push(x);
            if l + 1 < layers {
                x = y.iter().map(|&v| self.activation.apply(v)).collect();
                tape.pre.push(y);
            } else {
                x = y;
            }
        }
        Ok((x, tape))
    }

    fn affine(&self, x: &[S], batch: usize, off: usize, fan_in: usize, fan_out: usize) -> Vec<S> {
        let w = &self.params[off..off + fan_in * fan_out];
        let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let mut y: Vec<S> = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            y.extend_from_slice(b);
        }
        S::gemm(
            batch,
            fan_in,
            fan_out,
            S::one(),
            x,
            fan_in as isize,
            1,
            w,
            fan_out as isize,
            1,
            S::one(),
            &mut y,
            fan_out as isize,
            1,
        );
        y
    }

    /// Reverse pass for `<output, cotangent>`: accumulates the parameter
    /// gradient into `param_grad` and returns the input gradient when asked.
    pub fn backward_tape(
        &self,
        tape: &Tape<S>,
        cotangent: &[S],
        param_grad: &mut [S],
        want_input_grad: bool,
    ) -> Result<Option<Vec<S>>> {
        let batch = tape.batch;
        let expected = batch * self.output_dim();
        if cotangent.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: cotangent.len() });
        }
        if param_grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: param_grad.len() });
        }
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut delta = cotangent.to_vec();
        for l in (0..offsets.len()).rev() {
            let (off, fan_in, fan_out) = offsets[l];
            let x = &tape.inputs[l];
            let (gw, rest) = param_grad[off..].split_at_mut(fan_in * fan_out);
            // dW += x^T delta
            S::gemm(
                fan_in,
                batch,
                fan_out,
                S::one(),
                x,
                1,
                fan_in as isize,
                &delta,
                fan_out as isize,
                1,
                S::one(),
                gw,
                fan_out as isize,
                1,
            );
            let gb = &mut rest[..fan_out];
            for row in delta.chunks_exact(fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += *d;
                }
            }
            if l == 0 && !want_input_grad {
                return Ok(None);
            }
            // dx = delta W^T
            let w = &self.params[off..off + fan_in * fan_out];
            let mut dx = vec![S::zero(); batch * fan_in];
            S::gemm(
                batch,
                fan_out,
                fan_in,
                S::one(),
                &delta,
                fan_out as isize,
                1,
                w,
                1,
                fan_out as isize,
                S::zero(),
                &mut dx,
                fan_in as isize,
                1,
            );
            if l == 0 {
                return Ok(Some(dx));
            }
            let pre = &tape.pre[l - 1];
            for (d, &z) in dx.iter_mut().zip(pre) {
                *d *= self.activation.derivative(z);
            }
            delta = dx;
        }
        unreachable!("loop returns at layer 0")
    }

    /// Exact reverse-mode gradients of `<forward(input), cotangent>` with
    /// respect to the parameters and the input.
    pub fn backward(&self, input: &[S], cotangent: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        let (_, tape) = self.forward_tape(input, 1)?;
        let mut grad = vec![S::zero(); self.params.len()];
        let dx = self.backward_tape(&tape, cotangent, &mut grad, true)?.expect("input gradient requested");
        Ok((grad, dx))
    }
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState<S> {
    pub net: Net<S>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<S>,
    second_moment: Vec<S>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(net: Net<S>, lr: f64) -> Self {
        let n = net.params.len();
        Self {
            net,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![S::zero(); n],
            second_moment: vec![S::zero(); n],
        }
    }

    pub fn moments(&self) -> (&[S], &[S]) {
        (&self.first_moment, &self.second_moment)
    }

    /// One update at the current learning rate. Non-finite gradients are
    /// rejected before any state changes.
    pub fn opt_step(&mut self, grad: &[S]) -> Result<()> {
        if grad.len() != self.net.params.len() {
            return Err(Error::DimensionMismatch { expected: self.net.params.len(), got: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let c1 = S::of(1.0 - self.beta1.powi(t));
        let c2 = S::of(1.0 - self.beta2.powi(t));
        let lr = S::of(self.lr);
        let eps = S::of(self.eps);
        let one = S::one();
        for (((p, &g), m), v) in self
            .net
            .params
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
