//! Batched layers with hand-written backward passes.
//!
//! Activations are stored sample-major, each sample channel-major (`c, h, w`).
//! Parameters live in one flat slice per network; each layer owns a range of
//! it laid out as weights followed by biases.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::tensor::sgemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, xs: &mut [f32]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => xs.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Sigmoid => xs.iter_mut().for_each(|x| *x = 1.0 / (1.0 + (-*x).exp())),
        }
    }

    /// Turns a gradient w.r.t. the activation output into one w.r.t. its input.
    fn backprop(self, out: &[f32], grad: &mut [f32]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad
                .iter_mut()
                .zip(out)
                .for_each(|(g, &y)| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                }),
            Activation::Sigmoid => grad
                .iter_mut()
                .zip(out)
                .for_each(|(g, &y)| *g *= y * (1.0 - y)),
        }
    }
}

/// Stride-1 convolution with "same" padding. Even kernels put the extra
/// padding row/column after the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub height: usize,
    pub width: usize,
}

impl Conv2d {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    fn pad(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }

    /// For kernel offset `(ky, kx)`: the output rows and columns whose
    /// source pixel lies inside the image, and the source offsets.
    fn valid(&self, ky: usize, kx: usize) -> (Range<usize>, Range<usize>, isize, isize) {
        let (pt, pl) = self.pad();
        let dy = ky as isize - pt as isize;
        let dx = kx as isize - pl as isize;
        let span = |n: usize, d: isize| {
            let lo = (-d).max(0) as usize;
            let hi = (n as isize - d).clamp(0, n as isize) as usize;
            lo.min(hi)..hi
        };
        (span(self.height, dy), span(self.width, dx), dy, dx)
    }

    /// Unfolds one sample into a `patch_len x pixels` matrix.
    fn im2col(&self, input: &[f32], col: &mut [f32]) {
        let (kh, kw) = self.kernel;
        let w = self.width;
        let n = self.pixels();
        for c in 0..self.in_channels {
            let plane = &input[c * n..(c + 1) * n];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kh + ky) * kw + kx) * n;
                    let dst = &mut col[row..row + n];
                    let (ys, xs, dy, dx) = self.valid(ky, kx);
                    dst[..ys.start * w].fill(0.0);
                    dst[ys.end * w..].fill(0.0);
                    for y in ys {
                        let line = &mut dst[y * w..(y + 1) * w];
                        let sy = (y as isize + dy) as usize;
                        let src = &plane[sy * w..(sy + 1) * w];
                        line[..xs.start].fill(0.0);
                        line[xs.end..].fill(0.0);
                        let s0 = (xs.start as isize + dx) as usize;
                        line[xs.clone()].copy_from_slice(&src[s0..s0 + xs.len()]);
                    }
                }
            }
        }
    }

    /// Adds a `patch_len x pixels` gradient back onto one input sample.
    fn col2im(&self, col: &[f32], grad_input: &mut [f32]) {
        let (kh, kw) = self.kernel;
        let w = self.width;
        let n = self.pixels();
        for c in 0..self.in_channels {
            let plane = &mut grad_input[c * n..(c + 1) * n];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kh + ky) * kw + kx) * n;
                    let src = &col[row..row + n];
                    let (ys, xs, dy, dx) = self.valid(ky, kx);
                    for y in ys {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (xs.start as isize + dx) as usize;
                        let dst = &mut plane[sy * w + s0..sy * w + s0 + xs.len()];
                        let g = &src[y * w + xs.start..y * w + xs.end];
                        dst.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
    }

    /// Layers with few filters or tiny patches run as shifted-plane
    /// accumulation instead of im2col + GEMM.
    fn is_direct(&self) -> bool {
        self.out_channels < 8 || self.patch_len() < 16
    }

    fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel.0 + ky) * self.kernel.1 + kx
    }

    fn direct_forward_sample(&self, params: &[f32], input: &[f32], out: &mut [f32]) {
        let (weights, bias) = params.split_at(self.weight_len());
        let (w, n) = (self.width, self.pixels());
        for (o, (plane_out, &b)) in out.chunks_exact_mut(n).zip(bias).enumerate() {
            plane_out.fill(b);
            for (c, plane_in) in input.chunks_exact(n).enumerate() {
                for ky in 0..self.kernel.0 {
                    for kx in 0..self.kernel.1 {
                        let wt = weights[self.weight_index(o, c, ky, kx)];
                        let (ys, xs, dy, dx) = self.valid(ky, kx);
                        let s0 = (xs.start as isize + dx) as usize;
                        for y in ys {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut plane_out[y * w + xs.start..y * w + xs.end];
                            let src = &plane_in[sy * w + s0..sy * w + s0 + xs.len()];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += wt * v);
                        }
                    }
                }
            }
        }
    }

    fn direct_weight_grad_sample(&self, input: &[f32], grad: &[f32], grad_weights: &mut [f32]) {
        let (w, n) = (self.width, self.pixels());
        for (o, g_plane) in grad.chunks_exact(n).enumerate() {
            for (c, plane_in) in input.chunks_exact(n).enumerate() {
                for ky in 0..self.kernel.0 {
                    for kx in 0..self.kernel.1 {
                        let (ys, xs, dy, dx) = self.valid(ky, kx);
                        let s0 = (xs.start as isize + dx) as usize;
                        let mut acc = 0.0f32;
                        for y in ys {
                            let sy = (y as isize + dy) as usize;
                            acc += dot(
                                &g_plane[y * w + xs.start..y * w + xs.end],
                                &plane_in[sy * w + s0..sy * w + s0 + xs.len()],
                            );
                        }
                        grad_weights[self.weight_index(o, c, ky, kx)] += acc;
                    }
                }
            }
        }
    }

    fn direct_input_grad_sample(&self, weights: &[f32], grad: &[f32], dx_out: &mut [f32]) {
        let (w, n) = (self.width, self.pixels());
        for (c, d_plane) in dx_out.chunks_exact_mut(n).enumerate() {
            for (o, g_plane) in grad.chunks_exact(n).enumerate() {
                for ky in 0..self.kernel.0 {
                    for kx in 0..self.kernel.1 {
                        let wt = weights[self.weight_index(o, c, ky, kx)];
                        let (ys, xs, dy, dx) = self.valid(ky, kx);
                        let s0 = (xs.start as isize + dx) as usize;
                        for y in ys {
                            let sy = (y as isize + dy) as usize;
                            let g = &g_plane[y * w + xs.start..y * w + xs.end];
                            let dst = &mut d_plane[sy * w + s0..sy * w + s0 + xs.len()];
                            dst.iter_mut().zip(g).for_each(|(d, &g)| *d += wt * g);
                        }
                    }
                }
            }
        }
    }

    fn forward_sample(&self, params: &[f32], input: &[f32], out: &mut [f32], col: &mut [f32]) {
        let (weights, bias) = params.split_at(self.weight_len());
        let n = self.pixels();
        self.im2col(input, col);
        for (o, &b) in out.chunks_exact_mut(n).zip(bias) {
            o.fill(b);
        }
        sgemm(self.out_channels, self.patch_len(), n, weights, false, col, false, 1.0, out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

/// 2x2 max-pooling with stride 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct MaxPool {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// 2x2 nearest-neighbour upsampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Upsample {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Conv(Conv2d, Activation),
    Dense(Dense, Activation),
    Pool(MaxPool),
    Upsample(Upsample),
}

impl Op {
    fn param_len(&self) -> usize {
        match self {
            Op::Conv(c, _) => c.weight_len() + c.out_channels,
            Op::Dense(d, _) => d.inputs * d.outputs + d.outputs,
            Op::Pool(_) | Op::Upsample(_) => 0,
        }
    }

    fn input_len(&self) -> usize {
        match self {
            Op::Conv(c, _) => c.in_channels * c.pixels(),
            Op::Dense(d, _) => d.inputs,
            Op::Pool(p) => p.channels * p.height * p.width,
            Op::Upsample(u) => u.channels * u.height * u.width,
        }
    }

    fn output_len(&self) -> usize {
        match self {
            Op::Conv(c, _) => c.out_channels * c.pixels(),
            Op::Dense(d, _) => d.outputs,
            Op::Pool(p) => p.channels * (p.height / 2) * (p.width / 2),
            Op::Upsample(u) => u.channels * u.height * u.width * 4,
        }
    }

    fn activation(&self) -> Activation {
        match self {
            Op::Conv(_, a) | Op::Dense(_, a) => *a,
            Op::Pool(_) | Op::Upsample(_) => Activation::Identity,
        }
    }

    /// Glorot-uniform weights, zero biases.
    fn init(&self, params: &mut [f32], rng: &mut ChaCha8Rng) {
        let (weights, fan_in, fan_out) = match self {
            Op::Conv(c, _) => {
                let area = c.kernel.0 * c.kernel.1;
                (c.weight_len(), c.in_channels * area, c.out_channels * area)
            }
            Op::Dense(d, _) => (d.inputs * d.outputs, d.inputs, d.outputs),
            Op::Pool(_) | Op::Upsample(_) => return,
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        for w in &mut params[..weights] {
            *w = rng.random_range(-limit..limit);
        }
        params[weights..].fill(0.0);
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub batch: usize,
    /// Output of every op, post-activation.
    pub outputs: Vec<Vec<f32>>,
    /// Argmax positions for pooling ops, empty for others.
    pool_argmax: Vec<Vec<u32>>,
}

impl Trace {
    pub fn last(&self) -> &[f32] {
        self.outputs.last().map_or(&[], Vec::as_slice)
    }
}

/// Straight chain of ops sharing one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Network {
    ops: Vec<Op>,
    ranges: Vec<Range<usize>>,
}

impl Network {
    pub fn new(ops: Vec<Op>) -> Self {
        let mut ranges = Vec::with_capacity(ops.len());
        let mut offset = 0;
        for (i, op) in ops.iter().enumerate() {
            if i > 0 {
                debug_assert_eq!(ops[i - 1].output_len(), op.input_len(), "op {i} input");
            }
            let len = op.param_len();
            ranges.push(offset..offset + len);
            offset += len;
        }
        Network { ops, ranges }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn num_params(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn input_len(&self) -> usize {
        self.ops.first().map_or(0, Op::input_len)
    }

    #[cfg(test)]
    pub fn output_len(&self) -> usize {
        self.ops.last().map_or(0, Op::output_len)
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut params = vec![0.0; self.num_params()];
        for (op, r) in self.ops.iter().zip(&self.ranges) {
            op.init(&mut params[r.clone()], rng);
        }
        params
    }

    pub fn forward(&self, params: &[f32], input: &[f32], batch: usize) -> Trace {
        assert_eq!(params.len(), self.num_params());
        assert_eq!(input.len(), batch * self.input_len());
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.ops.len());
        let mut pool_argmax = Vec::with_capacity(self.ops.len());
        for (i, (op, r)) in self.ops.iter().zip(&self.ranges).enumerate() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let p = &params[r.clone()];
            let mut out = vec![0.0; batch * op.output_len()];
            let mut argmax = Vec::new();
            match op {
                Op::Conv(conv, _) => conv_forward(conv, p, x, &mut out),
                Op::Dense(d, _) => dense_forward(d, p, x, &mut out, batch),
                Op::Pool(pool) => argmax = pool_forward(pool, x, &mut out),
                Op::Upsample(up) => upsample_forward(up, x, &mut out),
            }
            op.activation().apply(&mut out);
            outputs.push(out);
            pool_argmax.push(argmax);
        }
        Trace {
            batch,
            outputs,
            pool_argmax,
        }
    }

    /// Backpropagates `grad_out` through the chain, accumulating parameter
    /// gradients into `grad_params`. When `preactivation` is set, `grad_out`
    /// is taken w.r.t. the last op's input to its activation. Returns the
    /// gradient w.r.t. the network input when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f32],
        input: &[f32],
        trace: &Trace,
        mut grad: Vec<f32>,
        preactivation: bool,
        grad_params: &mut [f32],
        want_input_grad: bool,
    ) -> Option<Vec<f32>> {
        assert_eq!(grad_params.len(), self.num_params());
        let batch = trace.batch;
        for i in (0..self.ops.len()).rev() {
            let op = &self.ops[i];
            let out = &trace.outputs[i];
            if !(preactivation && i + 1 == self.ops.len()) {
                op.activation().backprop(out, &mut grad);
            }
            let x = if i == 0 { input } else { &trace.outputs[i - 1] };
            let r = self.ranges[i].clone();
            let need_dx = i > 0 || want_input_grad;
            let mut dx = if need_dx {
                vec![0.0; batch * op.input_len()]
            } else {
                Vec::new()
            };
            match op {
                Op::Conv(conv, _) => conv_backward(
                    conv,
                    &params[r.clone()],
                    x,
                    &grad,
                    &mut grad_params[r],
                    need_dx.then_some(dx.as_mut_slice()),
                ),
                Op::Dense(d, _) => dense_backward(
                    d,
                    &params[r.clone()],
                    x,
                    &grad,
                    &mut grad_params[r],
                    need_dx.then_some(dx.as_mut_slice()),
                    batch,
                ),
                Op::Pool(_) => {
                    if need_dx {
                        for (&idx, &g) in trace.pool_argmax[i].iter().zip(&grad) {
                            dx[idx as usize] += g;
                        }
                    }
                }
                Op::Upsample(up) => {
                    if need_dx {
                        upsample_backward(up, &grad, &mut dx);
                    }
                }
            }
            if !need_dx {
                return None;
            }
            grad = dx;
        }
        Some(grad)
    }
}

fn conv_forward(conv: &Conv2d, params: &[f32], x: &[f32], out: &mut [f32]) {
    let in_len = conv.in_channels * conv.pixels();
    let out_len = conv.out_channels * conv.pixels();
    let col_len = conv.patch_len() * conv.pixels();
    if conv.is_direct() {
        out.par_chunks_mut(out_len)
            .zip(x.par_chunks(in_len))
            .for_each(|(o, xi)| conv.direct_forward_sample(params, xi, o));
        return;
    }
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each_init(
            || vec![0.0f32; col_len],
            |col, (o, xi)| conv.forward_sample(params, xi, o, col),
        );
}

fn conv_backward(
    conv: &Conv2d,
    params: &[f32],
    x: &[f32],
    grad: &[f32],
    grad_params: &mut [f32],
    dx: Option<&mut [f32]>,
) {
    if conv.is_direct() {
        conv_backward_direct(conv, params, x, grad, grad_params, dx);
    } else {
        conv_backward_gemm(conv, params, x, grad, grad_params, dx);
    }
}

fn bias_grad(conv: &Conv2d, grad: &[f32], gb: &mut [f32]) {
    for gi in grad.chunks_exact(conv.out_channels * conv.pixels()) {
        for (b, row) in gb.iter_mut().zip(gi.chunks_exact(conv.pixels())) {
            *b += row.iter().sum::<f32>();
        }
    }
}

fn conv_backward_direct(
    conv: &Conv2d,
    params: &[f32],
    x: &[f32],
    grad: &[f32],
    grad_params: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let in_len = conv.in_channels * conv.pixels();
    let out_len = conv.out_channels * conv.pixels();
    let (weights, _) = params.split_at(conv.weight_len());
    let (gw, gb) = grad_params.split_at_mut(conv.weight_len());
    bias_grad(conv, grad, gb);
    for (s, (xi, gi)) in x.chunks_exact(in_len).zip(grad.chunks_exact(out_len)).enumerate() {
        conv.direct_weight_grad_sample(xi, gi, gw);
        if let Some(d) = dx.as_deref_mut() {
            conv.direct_input_grad_sample(weights, gi, &mut d[s * in_len..(s + 1) * in_len]);
        }
    }
}

fn conv_backward_gemm(
    conv: &Conv2d,
    params: &[f32],
    x: &[f32],
    grad: &[f32],
    grad_params: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let n = conv.pixels();
    let k = conv.patch_len();
    let m = conv.out_channels;
    let in_len = conv.in_channels * n;
    let (weights, _) = params.split_at(conv.weight_len());
    let (gw, gb) = grad_params.split_at_mut(conv.weight_len());
    bias_grad(conv, grad, gb);
    let mut col = vec![0.0f32; k * n];
    let mut dcol = vec![0.0f32; k * n];
    for (s, (xi, gi)) in x.chunks_exact(in_len).zip(grad.chunks_exact(m * n)).enumerate() {
        conv.im2col(xi, &mut col);
        // dW += dY . col^T
        sgemm(m, n, k, gi, false, &col, true, 1.0, gw);
        if let Some(dx) = dx.as_deref_mut() {
            // dcol = W^T . dY
            sgemm(k, m, n, weights, true, gi, false, 0.0, &mut dcol);
            conv.col2im(&dcol, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn dense_forward(d: &Dense, params: &[f32], x: &[f32], out: &mut [f32], batch: usize) {
    let (weights, bias) = params.split_at(d.inputs * d.outputs);
    for row in out.chunks_exact_mut(d.outputs) {
        row.copy_from_slice(bias);
    }
    // Y (batch x out) += X (batch x in) . W^T
    sgemm(batch, d.inputs, d.outputs, x, false, weights, true, 1.0, out);
}

fn dense_backward(
    d: &Dense,
    params: &[f32],
    x: &[f32],
    grad: &[f32],
    grad_params: &mut [f32],
    dx: Option<&mut [f32]>,
    batch: usize,
) {
    let (weights, _) = params.split_at(d.inputs * d.outputs);
    let (gw, gb) = grad_params.split_at_mut(d.inputs * d.outputs);
    // dW (out x in) += dY^T (out x batch) . X (batch x in)
    sgemm(d.outputs, batch, d.inputs, grad, true, x, false, 1.0, gw);
    for row in grad.chunks_exact(d.outputs) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    if let Some(dx) = dx {
        // dX (batch x in) = dY (batch x out) . W (out x in)
        sgemm(batch, d.outputs, d.inputs, grad, false, weights, false, 0.0, dx);
    }
}

fn pool_forward(pool: &MaxPool, x: &[f32], out: &mut [f32]) -> Vec<u32> {
    let (h, w) = (pool.height, pool.width);
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = vec![0u32; out.len()];
    for (plane, (o, a)) in out
        .chunks_exact_mut(oh * ow)
        .zip(argmax.chunks_exact_mut(oh * ow))
        .enumerate()
    {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                o[y * ow + xo] = x[best];
                a[y * ow + xo] = best as u32;
            }
        }
    }
    argmax
}

fn upsample_forward(up: &Upsample, x: &[f32], out: &mut [f32]) {
    let (h, w) = (up.height, up.width);
    for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[y * 2 * w + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
}

fn upsample_backward(up: &Upsample, grad: &[f32], dx: &mut [f32]) {
    let (h, w) = (up.height, up.width);
    for (g, d) in grad.chunks_exact(4 * h * w).zip(dx.chunks_exact_mut(h * w)) {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                d[(y / 2) * w + xo / 2] += g[y * 2 * w + xo];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_net() -> Network {
        Network::new(vec![
            Op::Conv(
                Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: (2, 2),
                    height: 4,
                    width: 6,
                },
                Activation::Relu,
            ),
            Op::Pool(MaxPool {
                channels: 3,
                height: 4,
                width: 6,
            }),
            Op::Upsample(Upsample {
                channels: 3,
                height: 2,
                width: 3,
            }),
            Op::Conv(
                Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: (3, 3),
                    height: 4,
                    width: 6,
                },
                Activation::Identity,
            ),
            Op::Dense(
                Dense {
                    inputs: 48,
                    outputs: 5,
                },
                Activation::Sigmoid,
            ),
        ])
    }

    /// Sum of squares of the output, a simple scalar to differentiate.
    fn objective(net: &Network, params: &[f32], x: &[f32], batch: usize) -> f64 {
        let t = net.forward(params, x, batch);
        t.last().iter().map(|&v| f64::from(v) * f64::from(v) * 0.5).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = tiny_net();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = net.init_params(&mut rng);
        let batch = 2;
        let x: Vec<f32> = (0..batch * net.input_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let trace = net.forward(&params, &x, batch);
        let grad_out = trace.last().to_vec();
        let mut gp = vec![0.0; net.num_params()];
        let gx = net
            .backward(&params, &x, &trace, grad_out, false, &mut gp, true)
            .unwrap();

        let h = 1e-2f32;
        let mut worst = 0.0f64;
        for idx in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[idx] += h;
            let up = objective(&net, &p, &x, batch);
            p[idx] -= 2.0 * h;
            let down = objective(&net, &p, &x, batch);
            let fd = (up - down) / (2.0 * f64::from(h));
            worst = worst.max((fd - f64::from(gp[idx])).abs());
        }
        for idx in (0..x.len()).step_by(5) {
            let mut xx = x.clone();
            xx[idx] += h;
            let up = objective(&net, &params, &xx, batch);
            xx[idx] -= 2.0 * h;
            let down = objective(&net, &params, &xx, batch);
            let fd = (up - down) / (2.0 * f64::from(h));
            worst = worst.max((fd - f64::from(gx[idx])).abs());
        }
        assert!(worst < 2e-3, "worst abs error {worst}");
    }

    #[test]
    fn same_padding_preserves_spatial_shape() {
        let conv = Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: (2, 2),
            height: 3,
            width: 3,
        };
        // identity-like kernel: top-left tap only
        let params = [1.0, 0.0, 0.0, 0.0, 0.0];
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let mut out = vec![0.0; 9];
        let mut col = vec![0.0; 4 * 9];
        conv.forward_sample(&params, &x, &mut out, &mut col);
        assert_eq!(out, x);
    }

    #[test]
    fn direct_and_gemm_convolutions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (cin, cout, kernel) in [(1, 3, (2, 2)), (3, 9, (3, 3)), (4, 16, (2, 2)), (2, 1, (3, 3))] {
            let conv = Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                height: 5,
                width: 7,
            };
            let params: Vec<f32> = (0..conv.weight_len() + cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let batch = 2;
            let x: Vec<f32> = (0..batch * cin * 35).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f32> = (0..batch * cout * 35).map(|_| rng.random_range(-1.0..1.0)).collect();

            let mut col = vec![0.0; conv.patch_len() * 35];
            let (mut a, mut b) = (vec![0.0; cout * 35], vec![0.0; cout * 35]);
            conv.forward_sample(&params, &x[..cin * 35], &mut a, &mut col);
            conv.direct_forward_sample(&params, &x[..cin * 35], &mut b);
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-5));

            let (mut gp1, mut gp2) = (vec![0.0; params.len()], vec![0.0; params.len()]);
            let (mut dx1, mut dx2) = (vec![0.0; x.len()], vec![0.0; x.len()]);
            conv_backward_gemm(&conv, &params, &x, &g, &mut gp1, Some(&mut dx1));
            conv_backward_direct(&conv, &params, &x, &g, &mut gp2, Some(&mut dx2));
            assert!(gp1.iter().zip(&gp2).all(|(p, q)| (p - q).abs() < 1e-4));
            assert!(dx1.iter().zip(&dx2).all(|(p, q)| (p - q).abs() < 1e-4));
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let pool = MaxPool {
            channels: 1,
            height: 2,
            width: 4,
        };
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let mut out = vec![0.0; 2];
        let idx = pool_forward(&pool, &x, &mut out);
        assert_eq!(out, vec![5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
        let up = Upsample {
            channels: 1,
            height: 1,
            width: 2,
        };
        let mut big = vec![0.0; 8];
        upsample_forward(&up, &out, &mut big);
        assert_eq!(big, vec![5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 9.0, 9.0]);
    }
}
