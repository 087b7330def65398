//! N-dimensional tensors, channel stacks, and the primitive operations the
//! node definitions are built from: the simplified tensor dot product,
//! stride-1 cross-correlation, bias broadcasting, and activations.
//!
//! All storage is row-major `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Extents of a tensor, one per axis. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if let Some(axis) = dims.iter().position(|&n| n == 0) {
            return dim_err(format!("extent of axis {axis} is zero in {dims:?}"));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    /// Shape with `rank` axes, every extent 1.
    pub fn ones(rank: usize) -> Self {
        Shape(vec![1; rank])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Number of entries (1 for a scalar).
    pub fn volume(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_unit(&self) -> bool {
        self.0.iter().all(|&n| n == 1)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.volume() {
            return dim_err(format!("shape {shape} needs {} entries, got {}", shape.volume(), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entry at index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.volume(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let n = shape.volume();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    /// Rank-1 tensor holding `values`.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(vec![values.len()])?, values)
    }

    /// Rank-2 tensor from equally long rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged matrix rows");
        }
        Tensor::new(Shape::new(vec![rows.len(), cols])?, rows.concat())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * c).collect() }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return dim_err(format!("shape {} vs {}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

/// `d` input channels sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Vec<Tensor>,
}

impl ChannelStack {
    pub fn new(channels: Vec<Tensor>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return dim_err("channel stack needs at least one channel");
        };
        if let Some(k) = channels.iter().position(|c| c.shape != first.shape) {
            return dim_err(format!("channel {k} has shape {}, expected {}", channels[k].shape, first.shape));
        }
        Ok(ChannelStack { channels })
    }

    /// Stack of scalar channels.
    pub fn scalars(values: &[f64]) -> Result<Self> {
        ChannelStack::new(values.iter().map(|&v| Tensor::scalar(v)).collect())
    }

    pub fn d(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_shape(&self) -> &Shape {
        &self.channels[0].shape
    }

    pub fn channels(&self) -> &[Tensor] {
        &self.channels
    }

    pub fn channel(&self, k: usize) -> &Tensor {
        &self.channels[k]
    }

    pub fn into_channels(self) -> Vec<Tensor> {
        self.channels
    }

    /// All entries, channel-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.data.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Valid,
    #[default]
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Sigmoid,
    /// Softmax over the flattened tensor. Only legal on a classification head.
    Softmax,
}

impl Activation {
    /// Derivative of an elementwise activation, expressed through its output.
    /// Not meaningful for softmax, which couples entries.
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softmax => unreachable!("softmax derivative is not elementwise"),
        }
    }
}

/// Simplified tensor dot product: `sum_k Z_k * w_k`, accumulated in ascending `k`.
pub fn tensor_dot(z: &ChannelStack, w: &[f64]) -> Result<Tensor> {
    if w.len() != z.d() {
        return dim_err(format!("{} weights for {} channels", w.len(), z.d()));
    }
    let mut acc = Tensor::zeros(z.channel_shape().clone());
    for (zk, &wk) in z.channels().iter().zip(w) {
        axpy(wk, zk.data(), acc.data_mut());
    }
    Ok(acc)
}

/// `y += a * x`
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Inner product with four interleaved partial sums.
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for j in 0..4 {
            acc[j] += a[j] * b[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Tensor of `shape` with every entry `b`.
pub fn broadcast_bias(b: f64, shape: &Shape) -> Tensor {
    Tensor::filled(shape.clone(), b)
}

pub fn apply_activation(x: &Tensor, act: Activation) -> Tensor {
    let mut out = x.clone();
    activate_in_place(out.data_mut(), act);
    out
}

pub(crate) fn activate_in_place(xs: &mut [f64], act: Activation) {
    match act {
        Activation::Identity => {}
        Activation::Relu => xs.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => xs.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Softmax => softmax_in_place(xs),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// Sliding-window geometry for stride-1 cross-correlation of one input
/// channel with one filter channel.
///
/// The input is embedded in a zero-padded grid, and outputs are computed on
/// that grid's strides, so each kernel tap is a single contiguous axpy of
/// `span` entries. Grid positions that are not outputs are discarded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Window {
    output: Vec<usize>,
    /// Volume of the padded input grid.
    grid: usize,
    /// Grid offset of every kernel tap, in tap order.
    offsets: Vec<usize>,
    /// Grid positions covering every output.
    span: usize,
    /// `(input offset, grid offset)` of each input row.
    in_rows: Vec<(usize, usize)>,
    in_row_len: usize,
    /// `(output offset, grid offset)` of each output row.
    out_rows: Vec<(usize, usize)>,
    out_row_len: usize,
}

impl Window {
    pub(crate) fn new(input: &Shape, kernel: &Shape, mode: PadMode) -> Result<Self> {
        if input.rank() != kernel.rank() {
            return dim_err(format!("kernel rank {} does not match input rank {}", kernel.rank(), input.rank()));
        }
        let mut output = Vec::with_capacity(input.rank());
        let mut pad = Vec::with_capacity(input.rank());
        let mut padded = Vec::with_capacity(input.rank());
        for (axis, (&n, &l)) in input.dims().iter().zip(kernel.dims()).enumerate() {
            match mode {
                PadMode::Valid => {
                    if l > n {
                        return dim_err(format!(
                            "kernel extent {l} exceeds input extent {n} on axis {axis} in valid mode"
                        ));
                    }
                    output.push(n - l + 1);
                    pad.push(0);
                    padded.push(n);
                }
                PadMode::Same => {
                    output.push(n);
                    pad.push((l - 1) / 2);
                    padded.push(n + l - 1);
                }
            }
        }
        // rank 0 behaves as rank 1 with a single entry
        let as_rank1 = |v: &[usize]| if v.is_empty() { vec![1] } else { v.to_vec() };
        let (ins, ker, outs, pad, padded) = (
            as_rank1(input.dims()),
            as_rank1(kernel.dims()),
            as_rank1(&output),
            if pad.is_empty() { vec![0] } else { pad },
            as_rank1(&padded),
        );
        let gs = strides(&padded);
        let at = |pos: &[usize], shift: &[usize]| {
            pos.iter().zip(shift).zip(&gs).map(|((p, s), g)| (p + s) * g).sum::<usize>()
        };

        let mut offsets = Vec::with_capacity(ker.iter().product());
        let zero = vec![0; ker.len()];
        let mut tap = zero.clone();
        loop {
            offsets.push(at(&tap, &zero));
            if !advance(&mut tap, &zero, &ker) {
                break;
            }
        }
        let last_out: Vec<usize> = outs.iter().map(|o| o - 1).collect();
        let span = at(&last_out, &zero) + 1;

        let rows = |dims: &[usize], shift: &[usize]| {
            let last = dims.len() - 1;
            let st = strides(dims);
            let mut pos = zero.clone();
            let mut out = Vec::new();
            loop {
                let own: usize = pos.iter().zip(&st).map(|(p, s)| p * s).sum();
                out.push((own, at(&pos, shift)));
                if !advance(&mut pos[..last], &zero[..last], &dims[..last]) {
                    break;
                }
            }
            out
        };
        Ok(Window {
            grid: padded.iter().product(),
            offsets,
            span,
            in_rows: rows(&ins, &pad),
            in_row_len: *ins.last().expect("rank >= 1"),
            out_rows: rows(&outs, &zero),
            out_row_len: *outs.last().expect("rank >= 1"),
            output,
        })
    }

    pub(crate) fn output_shape(&self) -> Shape {
        Shape(self.output.clone())
    }

    /// The input channel placed in the zero-padded grid.
    pub(crate) fn embed(&self, input: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.grid];
        let n = self.in_row_len;
        for &(i, p) in &self.in_rows {
            g[p..p + n].copy_from_slice(&input[i..i + n]);
        }
        g
    }

    /// An output-shaped array spread onto grid positions, zero elsewhere.
    pub(crate) fn scatter(&self, out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.span];
        let n = self.out_row_len;
        for &(o, p) in &self.out_rows {
            g[p..p + n].copy_from_slice(&out[o..o + n]);
        }
        g
    }

    pub(crate) fn grid_len(&self) -> usize {
        self.grid
    }

    pub(crate) fn span(&self) -> usize {
        self.span
    }

    /// `acc += grid (*) kernel` on grid positions; `acc` has `span` entries.
    pub(crate) fn correlate_grid(&self, grid: &[f64], kernel: &[f64], acc: &mut [f64]) {
        for (&off, &k) in self.offsets.iter().zip(kernel) {
            axpy(k, &grid[off..off + self.span], acc);
        }
    }

    /// `acc = grid (*) kernel` on grid positions; `acc` has `span` entries.
    pub(crate) fn correlate_grid_set(&self, grid: &[f64], kernel: &[f64], acc: &mut [f64]) {
        let (&k0, rest) = kernel.split_first().expect("kernel has at least one tap");
        let o0 = self.offsets[0];
        acc.iter_mut().zip(&grid[o0..o0 + self.span]).for_each(|(a, x)| *a = k0 * x);
        for (&off, &k) in self.offsets[1..].iter().zip(rest) {
            axpy(k, &grid[off..off + self.span], acc);
        }
    }

    /// `out += ` the output positions of a grid accumulator.
    pub(crate) fn gather_acc(&self, acc: &[f64], out: &mut [f64]) {
        let n = self.out_row_len;
        for &(o, p) in &self.out_rows {
            out[o..o + n].iter_mut().zip(&acc[p..p + n]).for_each(|(y, a)| *y += a);
        }
    }

    /// `out += input (*) kernel`, with the input already embedded.
    pub(crate) fn correlate_embedded(&self, grid: &[f64], kernel: &[f64], out: &mut [f64]) {
        let mut acc = vec![0.0; self.span];
        self.correlate_grid(grid, kernel, &mut acc);
        self.gather_acc(&acc, out);
    }

    /// `out += input (*) kernel`
    pub(crate) fn correlate_acc(&self, input: &[f64], kernel: &[f64], out: &mut [f64]) {
        self.correlate_embedded(&self.embed(input), kernel, out);
    }

    /// Accumulates an input-channel gradient in grid layout from a scattered
    /// output gradient.
    pub(crate) fn grad_input_grid(&self, grad_out: &[f64], kernel: &[f64], g: &mut [f64]) {
        for (&off, &k) in self.offsets.iter().zip(kernel) {
            axpy(k, grad_out, &mut g[off..off + self.span]);
        }
    }

    /// `grad_in += ` the input positions of a grid-layout gradient.
    pub(crate) fn unembed_acc(&self, g: &[f64], grad_in: &mut [f64]) {
        let n = self.in_row_len;
        for &(i, p) in &self.in_rows {
            grad_in[i..i + n].iter_mut().zip(&g[p..p + n]).for_each(|(y, a)| *y += a);
        }
    }

    /// Accumulates the input-channel gradient from a scattered output gradient.
    pub(crate) fn grad_input_scattered(&self, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
        let mut g = vec![0.0; self.grid];
        self.grad_input_grid(grad_out, kernel, &mut g);
        self.unembed_acc(&g, grad_in);
    }

    /// Accumulates the gradient with respect to the input channel.
    pub(crate) fn grad_input_acc(&self, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
        self.grad_input_scattered(&self.scatter(grad_out), kernel, grad_in);
    }

    /// Accumulates the filter gradient from an embedded input and a
    /// scattered output gradient.
    pub(crate) fn grad_kernel_gridded(&self, grid: &[f64], grad_out: &[f64], grad_k: &mut [f64]) {
        for (&off, gk) in self.offsets.iter().zip(grad_k.iter_mut()) {
            *gk += dot(grad_out, &grid[off..off + self.span]);
        }
    }

    /// Accumulates the gradient with respect to the filter channel.
    pub(crate) fn grad_kernel_acc(&self, input: &[f64], grad_out: &[f64], grad_k: &mut [f64]) {
        self.grad_kernel_gridded(&self.embed(input), &self.scatter(grad_out), grad_k);
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

/// Odometer increment of `pos` within `[lo, hi)`; false once it wraps.
fn advance(pos: &mut [usize], lo: &[usize], hi: &[usize]) -> bool {
    for a in (0..pos.len()).rev() {
        pos[a] += 1;
        if pos[a] < hi[a] {
            return true;
        }
        pos[a] = lo[a];
    }
    false
}

/// Stride-1 cross-correlation of one channel with one filter channel (no
/// kernel flip). `Same` zero-pads so the output keeps the input extents.
pub fn convolve(z: &Tensor, f: &Tensor, mode: PadMode) -> Result<Tensor> {
    let window = Window::new(z.shape(), f.shape(), mode)?;
    let mut out = Tensor::zeros(window.output_shape());
    window.correlate_acc(z.data(), f.data(), out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec()).unwrap()
    }

    /// Direct multi-index evaluation of `out[o] = sum_t in[o + t - pad] * k[t]`.
    fn naive_correlate(z: &Tensor, f: &Tensor, mode: PadMode) -> Tensor {
        let n = z.shape().dims().to_vec();
        let l = f.shape().dims().to_vec();
        let (m, pad): (Vec<usize>, Vec<isize>) = n
            .iter()
            .zip(&l)
            .map(|(&n, &l)| match mode {
                PadMode::Valid => (n - l + 1, 0),
                PadMode::Same => (n, ((l - 1) / 2) as isize),
            })
            .unzip();
        let out_shape = Shape::new(m.clone()).unwrap();
        let unravel = |mut flat: usize, dims: &[usize]| {
            let mut idx = vec![0; dims.len()];
            for a in (0..dims.len()).rev() {
                idx[a] = flat % dims[a];
                flat /= dims[a];
            }
            idx
        };
        let mut out = vec![0.0; out_shape.volume()];
        for (o_flat, slot) in out.iter_mut().enumerate() {
            let o = unravel(o_flat, &m);
            for t_flat in 0..f.shape().volume() {
                let t = unravel(t_flat, &l);
                let mut i_flat = 0usize;
                let mut inside = true;
                for a in 0..n.len() {
                    let i = o[a] as isize + t[a] as isize - pad[a];
                    if i < 0 || i >= n[a] as isize {
                        inside = false;
                        break;
                    }
                    i_flat = i_flat * n[a] + i as usize;
                }
                if inside {
                    *slot += z.data()[i_flat] * f.data()[t_flat];
                }
            }
        }
        Tensor::new(out_shape, out).unwrap()
    }

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(vec![3, 0]).is_err());
        assert_eq!(Shape::scalar().volume(), 1);
        assert_eq!(Shape::scalar().rank(), 0);
    }

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        let s = Shape::new(vec![2]).unwrap();
        assert!(matches!(Tensor::new(s.clone(), vec![1.0]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::new(s, vec![1.0, f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn stack_requires_equal_shapes() {
        assert!(ChannelStack::new(vec![]).is_err());
        assert!(ChannelStack::new(vec![v(&[1.0]), v(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn tensor_dot_examples() {
        let z = ChannelStack::scalars(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tensor_dot(&z, &[4.0, 5.0, 6.0]).unwrap().data(), &[32.0]);

        let z = ChannelStack::new(vec![v(&[1.0, 2.0]), v(&[3.0, 4.0])]).unwrap();
        assert_eq!(tensor_dot(&z, &[1.0, 0.0]).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(tensor_dot(&z, &[2.0, -1.0]).unwrap().data(), &[-1.0, 0.0]);
        assert!(matches!(tensor_dot(&z, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn convolve_examples() {
        let out = convolve(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 1.0]), PadMode::Valid).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0]);

        let z = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = 2.5;
        let f = Tensor::new(Shape::ones(2), vec![c]).unwrap();
        let out = convolve(&z, &f, PadMode::Valid).unwrap();
        assert_eq!(out.data(), &[c, 2.0 * c, 3.0 * c, 4.0 * c]);

        let one = Tensor::new(Shape::ones(2), vec![1.0]).unwrap();
        assert_eq!(convolve(&z, &one, PadMode::Same).unwrap(), z);
    }

    #[test]
    fn convolve_errors() {
        let z = v(&[1.0, 2.0]);
        let f = Tensor::matrix(&[vec![1.0]]).unwrap();
        assert!(matches!(convolve(&z, &f, PadMode::Valid), Err(Error::Dimension(_))));
        let big = v(&[1.0, 1.0, 1.0]);
        assert!(matches!(convolve(&z, &big, PadMode::Valid), Err(Error::Dimension(_))));
        // same mode pads, so an oversized kernel is fine
        assert_eq!(convolve(&z, &big, PadMode::Same).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn convolve_same_pads_asymmetrically_for_even_kernels() {
        // pad-before = (l-1)/2 = 0 for l=2, so out[i] = z[i] - z[i+1]
        let out = convolve(&v(&[1.0, 0.0]), &v(&[1.0, -1.0]), PadMode::Same).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
        let out = convolve(&v(&[0.0, 1.0]), &v(&[1.0, -1.0]), PadMode::Same).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn scalar_convolution() {
        let out = convolve(&Tensor::scalar(3.0), &Tensor::scalar(-2.0), PadMode::Valid).unwrap();
        assert_eq!(out, Tensor::scalar(-6.0));
    }

    #[test]
    fn bias_and_activation_examples() {
        let zeros = broadcast_bias(0.0, &Shape::new(vec![3, 3]).unwrap());
        assert!(zeros.data().iter().all(|&x| x == 0.0));
        assert_eq!(zeros.data().len(), 9);
        assert_eq!(broadcast_bias(2.5, &Shape::scalar()), Tensor::scalar(2.5));
        let m = broadcast_bias(-1.0, &Shape::new(vec![2, 2]).unwrap());
        assert_eq!(m.data(), &[-1.0; 4]);

        let x = v(&[-1.0, 0.0, 2.0]);
        assert_eq!(apply_activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(apply_activation(&x, Activation::Identity), x);
        assert_eq!(apply_activation(&v(&[0.0]), Activation::Sigmoid).data(), &[0.5]);
        let s = apply_activation(&x, Activation::Softmax);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn shape_and_kernel() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec((1usize..6, 1usize..4), 0..4).prop_map(|axes| axes.into_iter().unzip())
    }

    fn filled(dims: &[usize], seed: &[f64]) -> Tensor {
        let shape = Shape::new(dims.to_vec()).unwrap();
        let n = shape.volume();
        let data = (0..n).map(|i| seed[i % seed.len()] * (1.0 + i as f64 * 0.37).sin()).collect();
        Tensor::new(shape, data).unwrap()
    }

    proptest! {
        #[test]
        fn convolve_matches_naive(
            (n, l) in shape_and_kernel(),
            seed in prop::collection::vec(-2.0f64..2.0, 1..8),
            same in any::<bool>(),
        ) {
            let z = filled(&n, &seed);
            let f = filled(&l, &[0.3, -0.7, 1.1]);
            let mode = if same { PadMode::Same } else { PadMode::Valid };
            if mode == PadMode::Valid && l.iter().zip(&n).any(|(l, n)| l > n) {
                prop_assert!(convolve(&z, &f, mode).is_err());
            } else {
                let fast = convolve(&z, &f, mode).unwrap();
                let slow = naive_correlate(&z, &f, mode);
                prop_assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
            }
        }

        #[test]
        fn tensor_dot_is_linear_in_weights(
            chans in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..6),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            w_seed in -1.0f64..1.0,
        ) {
            let d = chans.len();
            let z = ChannelStack::new(chans.into_iter().map(|c| Tensor::vector(c).unwrap()).collect()).unwrap();
            let w1: Vec<f64> = (0..d).map(|k| w_seed + k as f64 * 0.1).collect();
            let w2: Vec<f64> = (0..d).map(|k| (k as f64 - w_seed).cos()).collect();
            let combo: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let lhs = tensor_dot(&z, &combo).unwrap();
            let t1 = tensor_dot(&z, &w1).unwrap();
            let t2 = tensor_dot(&z, &w2).unwrap();
            let rhs: Vec<f64> = t1.data().iter().zip(t2.data()).map(|(x, y)| a * x + b * y).collect();
            let rhs = Tensor::vector(rhs).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }

        #[test]
        fn convolve_commutes_with_scaling(
            (n, l) in shape_and_kernel(),
            c in -3.0f64..3.0,
        ) {
            let z = filled(&n, &[1.3, -0.4]);
            let f = filled(&l, &[0.9, 0.2, -0.5]);
            let base = convolve(&z, &f, PadMode::Same).unwrap().scaled(c);
            let scaled_in = convolve(&z.scaled(c), &f, PadMode::Same).unwrap();
            let scaled_k = convolve(&z, &f.scaled(c), PadMode::Same).unwrap();
            prop_assert!(base.max_abs_diff(&scaled_in).unwrap() <= 1e-12);
            prop_assert!(base.max_abs_diff(&scaled_k).unwrap() <= 1e-12);
        }

        #[test]
        fn unit_kernel_is_exact_scaling(
            n in prop::collection::vec(1usize..5, 0..4),
            c in -3.0f64..3.0,
        ) {
            let z = filled(&n, &[0.7, -1.9, 0.1]);
            let f = Tensor::new(Shape::ones(n.len()), vec![c]).unwrap();
            let out = convolve(&z, &f, PadMode::Valid).unwrap();
            prop_assert_eq!(out.max_abs_diff(&z.scaled(c)).unwrap(), 0.0);
        }
    }
}
