use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};

/// Mapping between a "large" spatial grid and the strided "small" grid of a convolution.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.small_h * self.small_w
    }

    /// Unfold patches of the large grid into a `rows × cols` matrix.
    fn im2col(&self, big: &[f64], out: &mut Vec<f64>) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let cols = self.cols();
        out.clear();
        out.resize(self.rows() * cols, 0.0);
        for c in 0..self.channels {
            let src = &big[c * self.big_h * self.big_w..(c + 1) * self.big_h * self.big_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.small_h {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.big_h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * self.big_w..(iy as usize + 1) * self.big_w];
                        let drow = &mut dst[oy * self.small_w..(oy + 1) * self.small_w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.big_w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-add columns back onto the large grid.
    fn col2im(&self, cols_data: &[f64], big: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let cols = self.cols();
        for c in 0..self.channels {
            let dst = &mut big[c * self.big_h * self.big_w..(c + 1) * self.big_h * self.big_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..self.small_h {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.big_h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.big_w..(iy as usize + 1) * self.big_w];
                        let srow = &src[oy * self.small_w..(oy + 1) * self.small_w];
                        for (ox, v) in srow.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.big_w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn init_uniform(rng: &mut impl Rng, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out × (in·k·k)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: init_uniform(rng, out_channels * fan_in, fan_in, 1.0),
            bias: vec![0.0; out_channels],
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            channels: self.in_channels,
            big_h: h,
            big_w: w,
            small_h: (h + 2 * self.pad - self.kernel) / self.stride + 1,
            small_w: (w + 2 * self.pad - self.kernel) / self.stride + 1,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn forward(&self, x: &Tensor, cols: &mut Vec<f64>) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let g = self.geometry(x.height, x.width);
        g.im2col(&x.data, cols);
        let mut y = Tensor::zeros(self.out_channels, g.small_h, g.small_w);
        let n = g.cols();
        for (co, b) in self.bias.iter().enumerate() {
            y.data[co * n..(co + 1) * n].fill(*b);
        }
        gemm(
            self.out_channels,
            g.rows(),
            n,
            &self.weight,
            false,
            cols,
            false,
            &mut y.data,
            true,
        );
        y
    }

    fn backward(
        &self,
        input_shape: (usize, usize, usize),
        cols: &[f64],
        grad_out: &Tensor,
        grads: Option<(&mut [f64], &mut [f64])>,
        want_input: bool,
    ) -> Option<Tensor> {
        let (_, h, w) = input_shape;
        let g = self.geometry(h, w);
        let n = g.cols();
        if let Some((gw, gb)) = grads {
            gemm(
                self.out_channels,
                n,
                g.rows(),
                &grad_out.data,
                false,
                cols,
                true,
                gw,
                true,
            );
            for (co, b) in gb.iter_mut().enumerate() {
                *b += grad_out.data[co * n..(co + 1) * n].iter().sum::<f64>();
            }
        }
        if !want_input {
            return None;
        }
        let mut dcols = vec![0.0; g.rows() * n];
        gemm(
            g.rows(),
            self.out_channels,
            n,
            &self.weight,
            true,
            &grad_out.data,
            false,
            &mut dcols,
            false,
        );
        let mut dx = Tensor::zeros(self.in_channels, h, w);
        g.col2im(&dcols, &mut dx.data);
        Some(dx)
    }
}

/// Transposed convolution: the adjoint of a strided convolution mapping outputs to inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `in × (out·k·k)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel / (stride * stride);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: init_uniform(rng, in_channels * out_channels * kernel * kernel, fan_in, 1.0),
            bias: vec![0.0; out_channels],
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            channels: self.out_channels,
            big_h: (h - 1) * self.stride + self.kernel - 2 * self.pad,
            big_w: (w - 1) * self.stride + self.kernel - 2 * self.pad,
            small_h: h,
            small_w: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channels");
        let g = self.geometry(x.height, x.width);
        let n = g.cols();
        let mut cols = vec![0.0; g.rows() * n];
        gemm(
            g.rows(),
            self.in_channels,
            n,
            &self.weight,
            true,
            &x.data,
            false,
            &mut cols,
            false,
        );
        let mut y = Tensor::zeros(self.out_channels, g.big_h, g.big_w);
        g.col2im(&cols, &mut y.data);
        let p = y.plane();
        for (co, b) in self.bias.iter().enumerate() {
            y.data[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += b);
        }
        y
    }

    fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        grads: Option<(&mut [f64], &mut [f64])>,
        want_input: bool,
    ) -> Option<Tensor> {
        let g = self.geometry(input.height, input.width);
        let n = g.cols();
        let mut dcols = Vec::new();
        g.im2col(&grad_out.data, &mut dcols);
        if let Some((gw, gb)) = grads {
            gemm(
                self.in_channels,
                n,
                g.rows(),
                &input.data,
                false,
                &dcols,
                true,
                gw,
                true,
            );
            let p = grad_out.plane();
            for (co, b) in gb.iter_mut().enumerate() {
                *b += grad_out.data[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        if !want_input {
            return None;
        }
        let mut dx = Tensor::zeros(self.in_channels, input.height, input.width);
        gemm(
            self.in_channels,
            g.rows(),
            n,
            &self.weight,
            false,
            &dcols,
            false,
            &mut dx.data,
            false,
        );
        Some(dx)
    }
}

/// Smooth elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Silu,
    Tanh,
    Sigmoid,
    Softplus,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Silu => v * sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
            Activation::Softplus => {
                if v > 30.0 {
                    v
                } else {
                    v.exp().ln_1p()
                }
            }
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    Act(Activation),
    /// `(C,H,W) → (C,1,1)` spatial mean.
    GlobalAvgPool,
    /// `(C,H,W) → (C·H·W,1,1)`.
    Flatten,
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weight.len() + c.bias.len(),
            Layer::ConvT(c) => c.weight.len() + c.bias.len(),
            _ => 0,
        }
    }
}

enum Cache {
    Conv {
        shape: (usize, usize, usize),
        cols: Vec<f64>,
    },
    Input(Tensor),
    Shape((usize, usize, usize)),
}

/// Recorded activations of one forward pass.
pub struct Tape {
    caches: Vec<Cache>,
}

/// Per-parameter-tensor gradients aligned with [`Sequential::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.0 {
            a.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flat_map(|a| a.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn extend(&mut self, other: Grads) {
        self.0.extend(other.0);
    }

    pub fn split_off(&mut self, at: usize) -> Grads {
        Grads(self.0.split_off(at))
    }
}

/// A feed-forward stack of layers with manual reverse-mode differentiation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        let mut scratch = Vec::new();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur, &mut scratch),
                Layer::ConvT(c) => c.forward(&cur),
                Layer::Act(a) => cur.map(|v| a.apply(v)),
                Layer::GlobalAvgPool => global_avg_pool(&cur),
                Layer::Flatten => Tensor::from_vec(cur.len(), 1, 1, cur.data),
            };
        }
        cur
    }

    pub fn forward_tape(&self, x: &Tensor) -> (Tensor, Tape) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => {
                    let mut cols = Vec::new();
                    let y = c.forward(&cur, &mut cols);
                    caches.push(Cache::Conv {
                        shape: cur.shape(),
                        cols,
                    });
                    y
                }
                Layer::ConvT(c) => {
                    let y = c.forward(&cur);
                    caches.push(Cache::Input(cur));
                    y
                }
                Layer::Act(a) => {
                    let y = cur.map(|v| a.apply(v));
                    caches.push(Cache::Input(cur));
                    y
                }
                Layer::GlobalAvgPool => {
                    let y = global_avg_pool(&cur);
                    caches.push(Cache::Shape(cur.shape()));
                    y
                }
                Layer::Flatten => {
                    caches.push(Cache::Shape(cur.shape()));
                    Tensor::from_vec(cur.len(), 1, 1, cur.data)
                }
            };
        }
        (cur, Tape { caches })
    }

    pub fn zero_grads(&self) -> Grads {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(vec![0.0; c.weight.len()]);
                    out.push(vec![0.0; c.bias.len()]);
                }
                Layer::ConvT(c) => {
                    out.push(vec![0.0; c.weight.len()]);
                    out.push(vec![0.0; c.bias.len()]);
                }
                _ => {}
            }
        }
        Grads(out)
    }

    /// Back-propagate `grad_out`; accumulates parameter gradients into `grads`
    /// when given and returns the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor, grads: Option<&mut Grads>) -> Tensor {
        self.backward_impl(tape, grad_out, grads, true)
            .expect("input gradient requested")
    }

    /// Parameter-only backward pass; skips the input gradient of the first layer.
    pub fn backward_params(&self, tape: &Tape, grad_out: &Tensor, grads: &mut Grads) {
        self.backward_impl(tape, grad_out, Some(grads), false);
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        grad_out: &Tensor,
        mut grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        let mut g = grad_out.clone();
        let mut slot = self.zero_grads_len();
        for (idx, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let want_input = need_input || idx > 0;
            let next = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv { shape, cols }) => {
                    slot -= 2;
                    let pg = grads.as_deref_mut().map(|gr| {
                        let (a, b) = gr.0.split_at_mut(slot + 1);
                        (a[slot].as_mut_slice(), b[0].as_mut_slice())
                    });
                    c.backward(*shape, cols, &g, pg, want_input)
                }
                (Layer::ConvT(c), Cache::Input(x)) => {
                    slot -= 2;
                    let pg = grads.as_deref_mut().map(|gr| {
                        let (a, b) = gr.0.split_at_mut(slot + 1);
                        (a[slot].as_mut_slice(), b[0].as_mut_slice())
                    });
                    c.backward(x, &g, pg, want_input)
                }
                (Layer::Act(a), Cache::Input(x)) => Some(x.zip_map(&g, |v, d| d * a.derivative(v))),
                (Layer::GlobalAvgPool, Cache::Shape((c, h, w))) => {
                    let n = (h * w) as f64;
                    let mut out = Tensor::zeros(*c, *h, *w);
                    for ch in 0..*c {
                        let v = g.data[ch] / n;
                        out.channel_mut(ch).fill(v);
                    }
                    Some(out)
                }
                (Layer::Flatten, Cache::Shape((c, h, w))) => {
                    Some(Tensor::from_vec(*c, *h, *w, std::mem::take(&mut g.data)))
                }
                _ => unreachable!("tape does not match network"),
            };
            match next {
                Some(t) => g = t,
                None => return None,
            }
        }
        Some(g)
    }

    fn zero_grads_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(_) | Layer::ConvT(_) => 2,
                _ => 0,
            })
            .sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::ConvT(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::ConvT(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flatten().copied().collect()
    }

    /// Overwrite parameters from a flat vector produced by [`Sequential::flat_params`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), String> {
        if flat.len() != self.param_count() {
            return Err(format!(
                "expected {} parameters, found {}",
                self.param_count(),
                flat.len()
            ));
        }
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }
}

fn global_avg_pool(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.channels, 1, 1);
    for c in 0..x.channels {
        y.data[c] = x.channel(c).iter().sum::<f64>() / x.plane() as f64;
    }
    y
}
