//! Minimal convolutional network machinery: batched 3x3 convolutions and
//! transposed convolutions via im2col + matrix multiply, nearest-neighbour
//! upsampling, elementwise activations and an Adam optimizer.
//!
//! Everything is `f64` and strictly single-threaded so that training and
//! inversion runs are bit-reproducible for a fixed seed. Tensors use the
//! `(batch, channel, height, width)` layout.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Cap on scratch im2col column elements; batches get chunked to stay under
/// this (64 MiB of f64).
const COL_BUDGET: usize = 8_000_000;

/// Elementwise nonlinearity applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, x: &mut Array4<f64>) {
        match *self {
            Activation::Linear => {}
            Activation::LeakyRelu(a) => {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v *= a;
                    }
                }
            }
            Activation::Sigmoid => {
                for v in x.iter_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
        }
    }

    /// Multiplies `grad` by the activation derivative, expressed through the
    /// activation *output* (valid for all three variants here).
    pub fn backprop(&self, output: &Array4<f64>, grad: &mut Array4<f64>) {
        match *self {
            Activation::Linear => {}
            Activation::LeakyRelu(a) => {
                for (g, &y) in grad.iter_mut().zip(output.iter()) {
                    if y <= 0.0 {
                        *g *= a;
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &y) in grad.iter_mut().zip(output.iter()) {
                    *g *= y * (1.0 - y);
                }
            }
        }
    }
}

/// Output spatial size of a 3x3 convolution with padding 1.
pub fn conv_out_dim(input: usize, stride: usize) -> usize {
    (input - 1) / stride + 1
}

/// Gathers `x[b0..b1]` into an im2col matrix of shape `(c_in*k*k, (b1-b0)*ho*wo)`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ArrayView4<f64>,
    b0: usize,
    b1: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (_, c_in, h, w) = x.dim();
    let p = ho * wo;
    let cols = (b1 - b0) * p;
    let mut col = Array2::<f64>::zeros((c_in * kernel * kernel, cols));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for b in b0..b1 {
        let xb = b * c_in * h * w;
        let cb = (b - b0) * p;
        for ci in 0..c_in {
            let xc = xb + ci * h * w;
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let row = ci * kernel * kernel + ki * kernel + kj;
                    let rbase = row * cols + cb;
                    for i in 0..ho {
                        let ii = (i * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xr = xc + ii as usize * w;
                        let crow = rbase + i * wo;
                        for j in 0..wo {
                            let jj = (j * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[crow + j] = xs[xr + jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates columns back into the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &Array2<f64>,
    gx: &mut Array4<f64>,
    b0: usize,
    b1: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (_, c_in, h, w) = gx.dim();
    let p = ho * wo;
    let cols = (b1 - b0) * p;
    let cs = col.as_slice().expect("standard layout");
    let gs = gx.as_slice_mut().expect("standard layout");
    for b in b0..b1 {
        let xb = b * c_in * h * w;
        let cb = (b - b0) * p;
        for ci in 0..c_in {
            let xc = xb + ci * h * w;
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let row = ci * kernel * kernel + ki * kernel + kj;
                    let rbase = row * cols + cb;
                    for i in 0..ho {
                        let ii = (i * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xr = xc + ii as usize * w;
                        let crow = rbase + i * wo;
                        for j in 0..wo {
                            let jj = (j * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            gs[xr + jj as usize] += cs[crow + j];
                        }
                    }
                }
            }
        }
    }
}

fn chunk_size(ck: usize, p: usize, batch: usize) -> usize {
    (COL_BUDGET / (ck * p).max(1)).clamp(1, batch.max(1))
}

/// A 3x3 convolution, padding 1, stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(c_out, c_in * 9)`
    pub w: Array2<f64>,
    /// `(c_out,)`
    pub b: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init(c_in: usize, c_out: usize, stride: usize, seed: u64) -> Self {
        let kernel = 3;
        let fan_in = (c_in * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_fn((c_out, c_in * kernel * kernel), |_| dist.sample(&mut rng));
        Self {
            w,
            b: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            stride,
            pad: 1,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out_dim(h, self.stride), conv_out_dim(w, self.stride))
    }

    pub fn forward(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let (batch, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (ho, wo) = self.out_shape(h, w);
        let p = ho * wo;
        let mut y = Array4::<f64>::zeros((batch, self.c_out, ho, wo));
        let step = chunk_size(self.c_in * 9, p, batch);
        let ys = y.as_slice_mut().expect("standard layout");
        let mut b0 = 0;
        while b0 < batch {
            let b1 = (b0 + step).min(batch);
            let col = im2col(x, b0, b1, self.kernel, self.stride, self.pad, ho, wo);
            let res = self.w.dot(&col); // (c_out, (b1-b0)*p)
            let rs = res.as_slice().expect("standard layout");
            let cols = (b1 - b0) * p;
            for b in b0..b1 {
                for o in 0..self.c_out {
                    let dst = b * self.c_out * p + o * p;
                    let src = o * cols + (b - b0) * p;
                    let bias = self.b[o];
                    for q in 0..p {
                        ys[dst + q] = rs[src + q] + bias;
                    }
                }
            }
            b0 = b1;
        }
        y
    }

    /// Full backward pass: returns `(grad_input, grad_w, grad_b)`.
    pub fn backward(
        &self,
        x: &ArrayView4<f64>,
        gy: &ArrayView4<f64>,
    ) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
        let (batch, _, _, _) = x.dim();
        let (_, c_out, ho, wo) = gy.dim();
        assert_eq!(c_out, self.c_out);
        let p = ho * wo;
        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        let mut gw = Array2::<f64>::zeros(self.w.raw_dim());
        let mut gb = Array1::<f64>::zeros(self.c_out);
        let step = chunk_size(self.c_in * 9, p, batch);
        let gys = gy.as_slice().expect("standard layout");
        let mut b0 = 0;
        while b0 < batch {
            let b1 = (b0 + step).min(batch);
            let cols = (b1 - b0) * p;
            // gather gy chunk as (c_out, cols)
            let mut gy2 = Array2::<f64>::zeros((self.c_out, cols));
            {
                let g2 = gy2.as_slice_mut().expect("standard layout");
                for b in b0..b1 {
                    for o in 0..self.c_out {
                        let src = b * self.c_out * p + o * p;
                        let dst = o * cols + (b - b0) * p;
                        g2[dst..dst + p].copy_from_slice(&gys[src..src + p]);
                    }
                }
            }
            let col = im2col(x, b0, b1, self.kernel, self.stride, self.pad, ho, wo);
            gw = gw + gy2.dot(&col.t());
            let gcol = self.w.t().dot(&gy2);
            col2im(&gcol, &mut gx, b0, b1, self.kernel, self.stride, self.pad, ho, wo);
            gb = gb + gy2.sum_axis(Axis(1));
            b0 = b1;
        }
        (gx, gw, gb)
    }

    /// Input gradient only (weights held fixed), used by the inversion attack.
    pub fn backward_input(&self, in_shape: (usize, usize, usize, usize), gy: &ArrayView4<f64>) -> Array4<f64> {
        let (batch, c_out, ho, wo) = gy.dim();
        assert_eq!(c_out, self.c_out);
        let p = ho * wo;
        let mut gx = Array4::<f64>::zeros(in_shape);
        let step = chunk_size(self.c_in * 9, p, batch);
        let gys = gy.as_slice().expect("standard layout");
        let mut b0 = 0;
        while b0 < batch {
            let b1 = (b0 + step).min(batch);
            let cols = (b1 - b0) * p;
            let mut gy2 = Array2::<f64>::zeros((self.c_out, cols));
            {
                let g2 = gy2.as_slice_mut().expect("standard layout");
                for b in b0..b1 {
                    for o in 0..self.c_out {
                        let src = b * self.c_out * p + o * p;
                        let dst = o * cols + (b - b0) * p;
                        g2[dst..dst + p].copy_from_slice(&gys[src..src + p]);
                    }
                }
            }
            let gcol = self.w.t().dot(&gy2);
            col2im(&gcol, &mut gx, b0, b1, self.kernel, self.stride, self.pad, ho, wo);
            b0 = b1;
        }
        gx
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// A 3x3 transposed convolution with stride 2 that exactly doubles the
/// spatial size (output padding 1). Stored as the kernel `v` of the adjoint
/// convolution mapping output-space back to input-space, shape
/// `(c_in, c_out * 9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub v: Array2<f64>,
    /// `(c_out,)`
    pub b: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn init(c_in: usize, c_out: usize, seed: u64) -> Self {
        let kernel = 3;
        // each output unit receives ~ c_in * k*k / stride^2 contributions
        let fan_in = (c_in * kernel * kernel) as f64 / 4.0;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("valid std");
        let v = Array2::from_shape_fn((c_in, c_out * kernel * kernel), |_| dist.sample(&mut rng));
        Self {
            v,
            b: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            stride: 2,
            pad: 1,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.stride, w * self.stride)
    }

    /// `y = adjoint_conv(x) + b`, scattering each input position into the
    /// upsampled output.
    pub fn forward(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let (batch, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "convT input channels");
        let (ho, wo) = self.out_shape(h, w);
        let p = h * w; // positions in x-space = adjoint conv output positions
        let mut y = Array4::<f64>::zeros((batch, self.c_out, ho, wo));
        let step = chunk_size(self.c_out * 9, p, batch);
        let xs = x.as_slice().expect("standard layout");
        let mut b0 = 0;
        while b0 < batch {
            let b1 = (b0 + step).min(batch);
            let cols = (b1 - b0) * p;
            let mut x2 = Array2::<f64>::zeros((self.c_in, cols));
            {
                let x2s = x2.as_slice_mut().expect("standard layout");
                for b in b0..b1 {
                    for ci in 0..self.c_in {
                        let src = b * self.c_in * p + ci * p;
                        let dst = ci * cols + (b - b0) * p;
                        x2s[dst..dst + p].copy_from_slice(&xs[src..src + p]);
                    }
                }
            }
            let gcol = self.v.t().dot(&x2); // (c_out*9, cols)
            col2im(&gcol, &mut y, b0, b1, self.kernel, self.stride, self.pad, h, w);
            b0 = b1;
        }
        for o in 0..self.c_out {
            let bias = self.b[o];
            let mut lane = y.index_axis_mut(Axis(1), o);
            lane.mapv_inplace(|v| v + bias);
        }
        y
    }

    /// Full backward pass: returns `(grad_input, grad_v, grad_b)`.
    pub fn backward(
        &self,
        x: &ArrayView4<f64>,
        gy: &ArrayView4<f64>,
    ) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
        let (batch, _, h, w) = x.dim();
        let p = h * w;
        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        let mut gv = Array2::<f64>::zeros(self.v.raw_dim());
        let mut gb = Array1::<f64>::zeros(self.c_out);
        let xs = x.as_slice().expect("standard layout");
        let gxs_len = gx.len();
        let step = chunk_size(self.c_out * 9, p, batch);
        let mut b0 = 0;
        while b0 < batch {
            let b1 = (b0 + step).min(batch);
            let cols = (b1 - b0) * p;
            // adjoint-conv forward on gy gives gx
            let col = im2col(gy, b0, b1, self.kernel, self.stride, self.pad, h, w);
            let gx2 = self.v.dot(&col); // (c_in, cols)
            {
                let g2 = gx2.as_slice().expect("standard layout");
                let gxs = gx.as_slice_mut().expect("standard layout");
                debug_assert_eq!(gxs.len(), gxs_len);
                for b in b0..b1 {
                    for ci in 0..self.c_in {
                        let dst = b * self.c_in * p + ci * p;
                        let src = ci * cols + (b - b0) * p;
                        gxs[dst..dst + p].copy_from_slice(&g2[src..src + p]);
                    }
                }
            }
            // weight grad: x (in conv-output role) times col(gy)
            let mut x2 = Array2::<f64>::zeros((self.c_in, cols));
            {
                let x2s = x2.as_slice_mut().expect("standard layout");
                for b in b0..b1 {
                    for ci in 0..self.c_in {
                        let src = b * self.c_in * p + ci * p;
                        let dst = ci * cols + (b - b0) * p;
                        x2s[dst..dst + p].copy_from_slice(&xs[src..src + p]);
                    }
                }
            }
            gv = gv + x2.dot(&col.t());
            b0 = b1;
        }
        for (o, g) in gb.iter_mut().enumerate() {
            *g = gy.index_axis(Axis(1), o).sum();
        }
        (gx, gv, gb)
    }

    pub fn param_count(&self) -> usize {
        self.v.len() + self.b.len()
    }
}

/// Nearest-neighbour upsampling by an integer factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Upsample {
    pub factor: usize,
}

impl Upsample {
    pub fn forward(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let k = self.factor;
        let (batch, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((batch, c, h * k, w * k));
        for b in 0..batch {
            for ci in 0..c {
                for i in 0..h * k {
                    for j in 0..w * k {
                        y[(b, ci, i, j)] = x[(b, ci, i / k, j / k)];
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, in_shape: (usize, usize, usize, usize), gy: &ArrayView4<f64>) -> Array4<f64> {
        let k = self.factor;
        let (batch, c, h, w) = in_shape;
        let mut gx = Array4::<f64>::zeros(in_shape);
        for b in 0..batch {
            for ci in 0..c {
                for i in 0..h * k {
                    for j in 0..w * k {
                        gx[(b, ci, i / k, j / k)] += gy[(b, ci, i, j)];
                    }
                }
            }
        }
        gx
    }
}

/// One layer of a [`Stack`]: a linear op plus its activation.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d, Activation),
    ConvT(ConvTranspose2d, Activation),
    Upsample(Upsample),
}

impl Layer {
    pub fn activation(&self) -> Activation {
        match self {
            Layer::Conv(_, a) | Layer::ConvT(_, a) => *a,
            Layer::Upsample(_) => Activation::Linear,
        }
    }

    pub fn out_shape(&self, c_h_w: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = c_h_w;
        match self {
            Layer::Conv(c, _) => {
                let (ho, wo) = c.out_shape(h, w);
                (c.c_out, ho, wo)
            }
            Layer::ConvT(c, _) => {
                let (ho, wo) = c.out_shape(h, w);
                (c.c_out, ho, wo)
            }
            Layer::Upsample(u) => (c_h_w.0, h * u.factor, w * u.factor),
        }
    }
}

/// A feed-forward chain of layers with cached activations for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

/// Post-activation outputs of every layer, `acts[0]` being the input.
pub struct StackTrace {
    pub acts: Vec<Array4<f64>>,
}

impl StackTrace {
    pub fn output(&self) -> &Array4<f64> {
        self.acts.last().expect("non-empty trace")
    }
}

/// Per-layer parameter gradients in layer order.
pub struct StackGrads {
    pub grads: Vec<Option<(Array2<f64>, Array1<f64>)>>,
    pub input_grad: Array4<f64>,
}

impl Stack {
    pub fn forward(&self, x: Array4<f64>) -> StackTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let input = acts.last().expect("input present");
            let mut out = match layer {
                Layer::Conv(c, _) => c.forward(&input.view()),
                Layer::ConvT(c, _) => c.forward(&input.view()),
                Layer::Upsample(u) => u.forward(&input.view()),
            };
            layer.activation().apply(&mut out);
            acts.push(out);
        }
        StackTrace { acts }
    }

    /// Backpropagates `grad_out`, producing parameter gradients and the
    /// gradient at the stack input.
    pub fn backward(&self, trace: &StackTrace, grad_out: Array4<f64>) -> StackGrads {
        let mut grads = vec![None; self.layers.len()];
        let mut g = grad_out;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.acts[idx + 1];
            let input = &trace.acts[idx];
            layer.activation().backprop(out, &mut g);
            g = match layer {
                Layer::Conv(c, _) => {
                    let (gx, gw, gb) = c.backward(&input.view(), &g.view());
                    grads[idx] = Some((gw, gb));
                    gx
                }
                Layer::ConvT(c, _) => {
                    let (gx, gv, gb) = c.backward(&input.view(), &g.view());
                    grads[idx] = Some((gv, gb));
                    gx
                }
                Layer::Upsample(u) => u.backward(input.raw_dim().into_pattern(), &g.view()),
            };
        }
        StackGrads {
            grads,
            input_grad: g,
        }
    }

    /// Input gradient only, weights fixed (the white-box attack path).
    pub fn backward_input(&self, trace: &StackTrace, grad_out: Array4<f64>) -> Array4<f64> {
        let mut g = grad_out;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.acts[idx + 1];
            let input = &trace.acts[idx];
            layer.activation().backprop(out, &mut g);
            g = match layer {
                Layer::Conv(c, _) => c.backward_input(input.raw_dim().into_pattern(), &g.view()),
                Layer::ConvT(c, _) => {
                    let (gx, _, _) = c.backward(&input.view(), &g.view());
                    gx
                }
                Layer::Upsample(u) => u.backward(input.raw_dim().into_pattern(), &g.view()),
            };
        }
        g
    }

    pub fn out_shape(&self, mut c_h_w: (usize, usize, usize)) -> (usize, usize, usize) {
        for layer in &self.layers {
            c_h_w = layer.out_shape(c_h_w);
        }
        c_h_w
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c, _) => c.param_count(),
                Layer::ConvT(c, _) => c.param_count(),
                Layer::Upsample(_) => 0,
            })
            .sum()
    }

    /// Flat views of all parameter tensors in layer order (weights then bias
    /// per layer), used by the optimizer and checkpoint code.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c, _) => {
                    out.push(c.w.as_slice_mut().expect("standard layout"));
                    out.push(c.b.as_slice_mut().expect("standard layout"));
                }
                Layer::ConvT(c, _) => {
                    out.push(c.v.as_slice_mut().expect("standard layout"));
                    out.push(c.b.as_slice_mut().expect("standard layout"));
                }
                Layer::Upsample(_) => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c, _) => {
                    out.push(c.w.as_slice().expect("standard layout"));
                    out.push(c.b.as_slice().expect("standard layout"));
                }
                Layer::ConvT(c, _) => {
                    out.push(c.v.as_slice().expect("standard layout"));
                    out.push(c.b.as_slice().expect("standard layout"));
                }
                Layer::Upsample(_) => {}
            }
        }
        out
    }
}

/// Flattens per-layer gradients into slices aligned with [`Stack::params`].
pub fn grad_slices(grads: &[Option<(Array2<f64>, Array1<f64>)>]) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for g in grads.iter().flatten() {
        out.push(g.0.as_slice().expect("standard layout"));
        out.push(g.1.as_slice().expect("standard layout"));
    }
    out
}

/// Adam optimizer state over a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn for_stack(lr: f64, stack: &Stack) -> Self {
        let sizes: Vec<usize> = stack.params().iter().map(|p| p.len()).collect();
        Self::new(lr, &sizes)
    }

    /// One update step. `params` and `grads` must align with the sizes given
    /// at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), m.len());
            assert_eq!(g.len(), m.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array::from_shape_fn(shape, |_| dist.sample(&mut rng))
    }

    /// Brute-force conv used as the oracle for the im2col path.
    fn conv_naive(x: &Array4<f64>, layer: &Conv2d) -> Array4<f64> {
        let (batch, c_in, h, w) = x.dim();
        let (ho, wo) = layer.out_shape(h, w);
        let mut y = Array4::<f64>::zeros((batch, layer.c_out, ho, wo));
        for b in 0..batch {
            for o in 0..layer.c_out {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = layer.b[o];
                        for ci in 0..c_in {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (i * layer.stride + ki) as isize - 1;
                                    let jj = (j * layer.stride + kj) as isize - 1;
                                    if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                                        acc += layer.w[(o, ci * 9 + ki * 3 + kj)]
                                            * x[(b, ci, ii as usize, jj as usize)];
                                    }
                                }
                            }
                        }
                        y[(b, o, i, j)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for &stride in &[1usize, 2] {
            let layer = Conv2d::init(3, 5, stride, 42);
            let x = randn4((2, 3, 8, 8), 7);
            let fast = layer.forward(&x.view());
            let slow = conv_naive(&x, &layer);
            let max = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-12, "stride {stride}: mismatch {max}");
        }
    }

    /// Checks <conv(x), u> == <x, conv^T(u)> so backward_input is the true adjoint.
    #[test]
    fn conv_backward_input_is_adjoint() {
        for &stride in &[1usize, 2] {
            let layer = Conv2d::init(4, 6, stride, 3);
            let x = randn4((2, 4, 9, 9), 11);
            let y = layer.forward(&x.view());
            let u = randn4(y.raw_dim().into_pattern(), 13);
            let mut y_nb = y.clone();
            // remove bias contribution for the bilinear check
            for o in 0..layer.c_out {
                let bias = layer.b[o];
                y_nb.index_axis_mut(Axis(1), o).mapv_inplace(|v| v - bias);
            }
            let lhs: f64 = y_nb.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            let gx = layer.backward_input(x.raw_dim().into_pattern(), &u.view());
            let rhs: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_weight_grad_matches_finite_difference() {
        let mut layer = Conv2d::init(2, 3, 2, 17);
        let x = randn4((2, 2, 6, 6), 5);
        let y = layer.forward(&x.view());
        // loss = 0.5 * sum(y^2)  =>  gy = y
        let (_, gw, gb) = layer.backward(&x.view(), &y.view());
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (1, 7), (2, 17)] {
            let orig = layer.w[(r, c)];
            layer.w[(r, c)] = orig + h;
            let lp: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
            layer.w[(r, c)] = orig - h;
            let lm: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
            layer.w[(r, c)] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - gw[(r, c)]).abs() < 1e-4 * fd.abs().max(1.0),
                "w[{r},{c}]: fd {fd} vs {q}",
                q = gw[(r, c)]
            );
        }
        let orig = layer.b[1];
        layer.b[1] = orig + h;
        let lp: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
        layer.b[1] = orig - h;
        let lm: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
        layer.b[1] = orig;
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - gb[1]).abs() < 1e-4 * fd.abs().max(1.0));
    }

    #[test]
    fn convt_doubles_spatial_size_and_is_adjoint() {
        let layer = ConvTranspose2d::init(4, 3, 23);
        let x = randn4((2, 4, 5, 5), 29);
        let y = layer.forward(&x.view());
        assert_eq!(y.dim(), (2, 3, 10, 10));
        let u = randn4((2, 3, 10, 10), 31);
        let mut y_nb = y.clone();
        for o in 0..layer.c_out {
            let bias = layer.b[o];
            y_nb.index_axis_mut(Axis(1), o).mapv_inplace(|v| v - bias);
        }
        let lhs: f64 = y_nb.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        let (gx, _, _) = layer.backward(&x.view(), &u.view());
        let rhs: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn convt_weight_grad_matches_finite_difference() {
        let mut layer = ConvTranspose2d::init(3, 2, 41);
        let x = randn4((1, 3, 4, 4), 43);
        let y = layer.forward(&x.view());
        let (_, gv, gb) = layer.backward(&x.view(), &y.view());
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (2, 11)] {
            let orig = layer.v[(r, c)];
            layer.v[(r, c)] = orig + h;
            let lp: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
            layer.v[(r, c)] = orig - h;
            let lm: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
            layer.v[(r, c)] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - gv[(r, c)]).abs() < 1e-4 * fd.abs().max(1.0),
                "v[{r},{c}]: fd {fd} vs {q}",
                q = gv[(r, c)]
            );
        }
        let orig = layer.b[0];
        layer.b[0] = orig + h;
        let lp: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
        layer.b[0] = orig - h;
        let lm: f64 = layer.forward(&x.view()).iter().map(|v| 0.5 * v * v).sum();
        layer.b[0] = orig;
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - gb[0]).abs() < 1e-4 * fd.abs().max(1.0));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let up = Upsample { factor: 4 };
        let x = randn4((1, 2, 3, 3), 51);
        let y = up.forward(&x.view());
        assert_eq!(y.dim(), (1, 2, 12, 12));
        let u = randn4((1, 2, 12, 12), 53);
        let lhs: f64 = y.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        let gx = up.backward(x.raw_dim().into_pattern(), &u.view());
        let rhs: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn stack_end_to_end_gradient_check() {
        let stack = Stack {
            layers: vec![
                Layer::Conv(Conv2d::init(1, 4, 2, 61), Activation::LeakyRelu(0.2)),
                Layer::Conv(Conv2d::init(4, 2, 1, 67), Activation::Sigmoid),
            ],
        };
        let x = randn4((1, 1, 6, 6), 71);
        let trace = stack.forward(x.clone());
        // loss = sum(out)
        let gy = Array4::<f64>::ones(trace.output().raw_dim().into_pattern());
        let grads = stack.backward(&trace, gy);
        let h = 1e-6;
        for &(bi, ci, ii, jj) in &[(0usize, 0usize, 0usize, 0usize), (0, 0, 3, 4), (0, 0, 5, 5)] {
            let mut xp = x.clone();
            xp[(bi, ci, ii, jj)] += h;
            let lp: f64 = stack.forward(xp).output().sum();
            let mut xm = x.clone();
            xm[(bi, ci, ii, jj)] -= h;
            let lm: f64 = stack.forward(xm).output().sum();
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.input_grad[(bi, ci, ii, jj)];
            assert!(
                (fd - an).abs() < 1e-5 * fd.abs().max(1e-3),
                "input grad at ({ii},{jj}): fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![5.0f64, -3.0];
        let mut opt = Adam::new(0.1, &[2]);
        for _ in 0..400 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            let mut ps = p.as_mut_slice();
            opt.step(&mut [&mut ps], &[g.as_slice()]);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }
}
