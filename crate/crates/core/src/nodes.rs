//! Generalized feedforward (GFFN), generalized convolutional (GCNN), and
//! projected nodes.
//!
//! Every node maps a [`ChannelStack`] of `d` equally shaped channels to a
//! single output tensor. All three kinds accumulate their pre-activation the
//! same way: start from zero, add one per-channel contribution at a time in
//! ascending channel order, then add the broadcast bias. Keeping that order
//! identical is what makes a freshly projected node (all gates 1) reproduce
//! its source node bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{activate_in_place, axpy, dot, Activation, ChannelStack, PadMode, Shape, Tensor, Window};

/// A block of scalar parameters plus its freeze flag.
///
/// Serializes only its length and flag; values travel separately in the
/// binary model payload (see [`crate::format`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ParamShell", into = "ParamShell")]
pub struct Param {
    pub values: Vec<f64>,
    pub trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamShell {
    len: usize,
    trainable: bool,
}

impl From<ParamShell> for Param {
    fn from(s: ParamShell) -> Self {
        Param { values: vec![0.0; s.len], trainable: s.trainable }
    }
}

impl From<Param> for ParamShell {
    fn from(p: Param) -> Self {
        ParamShell { len: p.values.len(), trainable: p.trainable }
    }
}

impl Param {
    pub fn trainable(values: Vec<f64>) -> Self {
        Param { values, trainable: true }
    }

    pub fn frozen(values: Vec<f64>) -> Self {
        Param { values, trainable: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Role of a parameter block, used for audits and gradient-check sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// GFFN channel weights `w`.
    Weight,
    /// GCNN filter channels `F`.
    Filter,
    Bias,
    /// Projection gates.
    Gamma,
    /// Weights held inside a projected node's sub-function.
    SubWeight,
    HeadWeight,
    HeadBias,
}

/// Node-level behaviour shared by every node kind, including synthetic
/// nodes used only as negative controls.
pub trait NodeFunction {
    /// Number of input channels.
    fn d(&self) -> usize;

    fn activation(&self) -> Activation;

    /// The node function `f'`: everything before the activation.
    fn pre_activation(&self, z: &ChannelStack) -> Result<Tensor>;

    fn forward(&self, z: &ChannelStack) -> Result<Tensor> {
        let mut pre = self.pre_activation(z)?;
        activate_in_place(pre.data_mut(), self.activation());
        Ok(pre)
    }

    /// Per-channel sub-functions and bias when the node function is separable
    /// by input, `None` otherwise.
    fn separable_parts(&self) -> Option<(Vec<SubFunction>, f64)>;
}

fn check_d(expected: usize, z: &ChannelStack) -> Result<()> {
    if z.d() != expected {
        return dim_err(format!("node expects {expected} channels, got {}", z.d()));
    }
    Ok(())
}

fn check_hidden_activation(act: Activation) -> Result<()> {
    if act == Activation::Softmax {
        return Err(Error::Config("softmax is only allowed on the classification head".into()));
    }
    Ok(())
}

fn add_bias(pre: &mut [f64], b: f64) {
    pre.iter_mut().for_each(|p| *p += b);
}

/// `sigma(Z (.)_t w + b)`: one scalar weight per input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GffnNode {
    pub weights: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl GffnNode {
    pub fn new(weights: Vec<f64>, bias: f64, activation: Activation) -> Result<Self> {
        if weights.is_empty() {
            return dim_err("a node needs at least one input channel");
        }
        check_hidden_activation(activation)?;
        Ok(GffnNode { weights: Param::trainable(weights), bias: Param::trainable(vec![bias]), activation })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights.values
    }

    pub fn b(&self) -> f64 {
        self.bias.values[0]
    }

    /// The GCNN node whose filter channels are rank-`rank` tensors with every
    /// extent 1 holding the weights.
    pub fn to_gcnn(&self, rank: usize) -> GcnnNode {
        GcnnNode {
            filter_shape: Shape::ones(rank),
            filters: self.weights.clone(),
            bias: self.bias.clone(),
            activation: self.activation,
            mode: PadMode::Valid,
        }
    }
}

impl NodeFunction for GffnNode {
    fn d(&self) -> usize {
        self.weights.len()
    }

    fn activation(&self) -> Activation {
        self.activation
    }

    fn pre_activation(&self, z: &ChannelStack) -> Result<Tensor> {
        check_d(self.d(), z)?;
        let mut pre = Tensor::zeros(z.channel_shape().clone());
        for (zk, &wk) in z.channels().iter().zip(self.weights()) {
            axpy(wk, zk.data(), pre.data_mut());
        }
        add_bias(pre.data_mut(), self.b());
        Ok(pre)
    }

    fn separable_parts(&self) -> Option<(Vec<SubFunction>, f64)> {
        let subs = self.weights().iter().map(|&w| SubFunction::scale(w)).collect();
        Some((subs, self.b()))
    }
}

/// `sigma(sum_k Z_k * F_k + b)` with one filter channel per input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnnNode {
    pub filter_shape: Shape,
    /// `d` filter channels, each `filter_shape.volume()` long, channel-major.
    pub filters: Param,
    pub bias: Param,
    pub activation: Activation,
    pub mode: PadMode,
}

impl GcnnNode {
    pub fn new(filters: Vec<Tensor>, bias: f64, activation: Activation, mode: PadMode) -> Result<Self> {
        let Some(first) = filters.first() else {
            return dim_err("a node needs at least one input channel");
        };
        let filter_shape = first.shape().clone();
        if filters.iter().any(|f| f.shape() != &filter_shape) {
            return dim_err("filter channels must share one shape");
        }
        check_hidden_activation(activation)?;
        let flat = filters.iter().flat_map(|f| f.data().iter().copied()).collect();
        Ok(GcnnNode {
            filter_shape,
            filters: Param::trainable(flat),
            bias: Param::trainable(vec![bias]),
            activation,
            mode,
        })
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let vol = self.filter_shape.volume();
        &self.filters.values[k * vol..(k + 1) * vol]
    }

    pub fn filter_tensor(&self, k: usize) -> Tensor {
        Tensor::from_parts(self.filter_shape.clone(), self.filter(k).to_vec())
    }

    pub fn b(&self) -> f64 {
        self.bias.values[0]
    }

    /// Reduces a node whose filter channels all have extent 1 on every axis to
    /// the GFFN node with `w_k = F_k`.
    pub fn to_gffn(&self) -> Result<GffnNode> {
        if !self.filter_shape.is_unit() {
            return Err(Error::NotReducible(format!("filter shape {} has an extent above 1", self.filter_shape)));
        }
        Ok(GffnNode { weights: self.filters.clone(), bias: self.bias.clone(), activation: self.activation })
    }

    pub(crate) fn window(&self, input: &Shape) -> Result<Window> {
        Window::new(input, &self.filter_shape, self.mode)
    }
}

impl NodeFunction for GcnnNode {
    fn d(&self) -> usize {
        self.filters.len() / self.filter_shape.volume()
    }

    fn activation(&self) -> Activation {
        self.activation
    }

    fn pre_activation(&self, z: &ChannelStack) -> Result<Tensor> {
        check_d(self.d(), z)?;
        let window = self.window(z.channel_shape())?;
        let mut pre = Tensor::zeros(window.output_shape());
        let mut tmp = vec![0.0; pre.data().len()];
        for (k, zk) in z.channels().iter().enumerate() {
            tmp.fill(0.0);
            window.correlate_acc(zk.data(), self.filter(k), &mut tmp);
            for (p, t) in pre.data_mut().iter_mut().zip(&tmp) {
                *p += t;
            }
        }
        add_bias(pre.data_mut(), self.b());
        Ok(pre)
    }

    fn separable_parts(&self) -> Option<(Vec<SubFunction>, f64)> {
        let subs = (0..self.d()).map(|k| SubFunction::conv(self.filter_tensor(k), self.mode)).collect();
        Some((subs, self.b()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SubKind {
    Conv { mode: PadMode },
    Scale,
}

/// A per-channel sub-function `f'_k(Z_k)`: either a convolution with one
/// filter channel or multiplication by one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubFunction {
    pub kind: SubKind,
    /// Filter shape for `Conv`; scalar shape for `Scale`.
    pub shape: Shape,
    pub weights: Param,
}

impl SubFunction {
    pub fn conv(filter: Tensor, mode: PadMode) -> Self {
        let shape = filter.shape().clone();
        SubFunction { kind: SubKind::Conv { mode }, shape, weights: Param::frozen(filter.into_data()) }
    }

    pub fn scale(w: f64) -> Self {
        SubFunction { kind: SubKind::Scale, shape: Shape::scalar(), weights: Param::frozen(vec![w]) }
    }

    pub fn is_frozen(&self) -> bool {
        !self.weights.trainable
    }

    /// Output shape for an input channel of shape `input`.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match self.kind {
            SubKind::Conv { mode } => Ok(Window::new(input, &self.shape, mode)?.output_shape()),
            SubKind::Scale => Ok(input.clone()),
        }
    }

    pub fn eval(&self, zk: &Tensor) -> Result<Tensor> {
        match self.kind {
            SubKind::Conv { mode } => {
                let window = Window::new(zk.shape(), &self.shape, mode)?;
                let mut out = Tensor::zeros(window.output_shape());
                window.correlate_acc(zk.data(), &self.weights.values, out.data_mut());
                Ok(out)
            }
            SubKind::Scale => Ok(zk.scaled(self.weights.values[0])),
        }
    }

    /// Accumulates the input gradient for upstream gradient `g` into `grad_in`.
    fn backprop_input(&self, input: &Shape, g: &[f64], grad_in: &mut [f64]) -> Result<()> {
        match self.kind {
            SubKind::Conv { mode } => {
                Window::new(input, &self.shape, mode)?.grad_input_acc(g, &self.weights.values, grad_in)
            }
            SubKind::Scale => axpy(self.weights.values[0], g, grad_in),
        }
        Ok(())
    }

    fn backprop_weights(&self, zk: &Tensor, g: &[f64], grad_w: &mut [f64]) -> Result<()> {
        match self.kind {
            SubKind::Conv { mode } => Window::new(zk.shape(), &self.shape, mode)?.grad_kernel_acc(zk.data(), g, grad_w),
            SubKind::Scale => grad_w[0] += dot(g, zk.data()),
        }
        Ok(())
    }
}

/// `sigma(sum_k gamma_k f'_k(Z_k) + b)`: frozen per-channel sub-functions
/// recombined by trainable scalar gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedNode {
    pub subs: Vec<SubFunction>,
    pub gamma: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl ProjectedNode {
    /// Freezes `subs` and attaches one gate per channel, initialized to 1.
    pub fn new(subs: Vec<SubFunction>, bias: f64, activation: Activation) -> Result<Self> {
        if subs.is_empty() {
            return dim_err("a node needs at least one input channel");
        }
        check_hidden_activation(activation)?;
        let d = subs.len();
        let subs = subs
            .into_iter()
            .map(|mut s| {
                s.weights.trainable = false;
                s
            })
            .collect();
        Ok(ProjectedNode {
            subs,
            gamma: Param::trainable(vec![1.0; d]),
            bias: Param::trainable(vec![bias]),
            activation,
        })
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma.values
    }

    pub fn b(&self) -> f64 {
        self.bias.values[0]
    }

    /// The preprocessed stack `Z^_k = f'_k(Z_k)` this node feeds to its gates.
    pub fn preprocess(&self, z: &ChannelStack) -> Result<ChannelStack> {
        check_d(self.d(), z)?;
        let outs = match self.shared_window(z.channel_shape())? {
            Some(window) => self
                .subs
                .iter()
                .zip(z.channels())
                .map(|(s, zk)| {
                    let mut out = Tensor::zeros(window.output_shape());
                    window.correlate_acc(zk.data(), &s.weights.values, out.data_mut());
                    out
                })
                .collect(),
            None => self.subs.iter().zip(z.channels()).map(|(s, zk)| s.eval(zk)).collect::<Result<Vec<_>>>()?,
        };
        ChannelStack::new(outs)
    }

    /// One window serving every sub-function, when all are convolutions of
    /// the same filter shape and mode.
    pub(crate) fn shared_window(&self, input: &Shape) -> Result<Option<Window>> {
        let first = &self.subs[0];
        let SubKind::Conv { mode } = first.kind else { return Ok(None) };
        if self.subs.iter().any(|s| s.kind != first.kind || s.shape != first.shape) {
            return Ok(None);
        }
        Window::new(input, &first.shape, mode).map(Some)
    }

    /// The GFFN node with weights `gamma` that acts on [`Self::preprocess`]'s output.
    pub fn as_gffn(&self) -> GffnNode {
        GffnNode { weights: self.gamma.clone(), bias: self.bias.clone(), activation: self.activation }
    }
}

impl NodeFunction for ProjectedNode {
    fn d(&self) -> usize {
        self.subs.len()
    }

    fn activation(&self) -> Activation {
        self.activation
    }

    fn pre_activation(&self, z: &ChannelStack) -> Result<Tensor> {
        check_d(self.d(), z)?;
        let mut pre: Option<Tensor> = None;
        for ((sub, zk), &g) in self.subs.iter().zip(z.channels()).zip(self.gammas()) {
            let tmp = sub.eval(zk)?;
            let acc = pre.get_or_insert_with(|| Tensor::zeros(tmp.shape().clone()));
            if acc.shape() != tmp.shape() {
                return dim_err("sub-function outputs disagree in shape");
            }
            axpy(g, tmp.data(), acc.data_mut());
        }
        let mut pre = pre.expect("d >= 1");
        add_bias(pre.data_mut(), self.b());
        Ok(pre)
    }

    fn separable_parts(&self) -> Option<(Vec<SubFunction>, f64)> {
        let subs = self
            .subs
            .iter()
            .zip(self.gammas())
            .map(|(s, &g)| {
                let mut s = s.clone();
                s.weights.values.iter_mut().for_each(|w| *w *= g);
                s
            })
            .collect();
        Some((subs, self.b()))
    }
}

/// Non-separable two-channel node computing `Z_1 * Z_2` elementwise plus a
/// bias. Exists to exercise the failure path of separability checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductNode {
    pub bias: f64,
    pub activation: Activation,
}

impl NodeFunction for ProductNode {
    fn d(&self) -> usize {
        2
    }

    fn activation(&self) -> Activation {
        self.activation
    }

    fn pre_activation(&self, z: &ChannelStack) -> Result<Tensor> {
        check_d(2, z)?;
        let data = z.channel(0).data().iter().zip(z.channel(1).data()).map(|(a, b)| a * b + self.bias).collect();
        Ok(Tensor::from_parts(z.channel_shape().clone(), data))
    }

    fn separable_parts(&self) -> Option<(Vec<SubFunction>, f64)> {
        None
    }
}

/// Any node that can sit in a model layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Gffn(GffnNode),
    Gcnn(GcnnNode),
    Projected(ProjectedNode),
}

/// Values a node keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NodeCache {
    pub output: Vec<f64>,
    /// Sub-function outputs of a projected node.
    pub preprocessed: Vec<Vec<f64>>,
}

/// A node layer's input embedded once in the padded grid shared by every
/// node of the layer.
#[derive(Debug, Clone)]
pub(crate) struct SharedGrid {
    pub window: Window,
    pub grids: Vec<Vec<f64>>,
}

impl SharedGrid {
    /// Builds the shared grid when every node is a convolution with the same
    /// filter shape and mode.
    pub(crate) fn for_layer(nodes: &[Node], z: &ChannelStack) -> Result<Option<SharedGrid>> {
        let Some(first) = nodes[0].conv_geometry() else { return Ok(None) };
        if nodes[1..].iter().any(|n| n.conv_geometry().as_ref() != Some(&first)) {
            return Ok(None);
        }
        let window = Window::new(z.channel_shape(), &first.0, first.1)?;
        let grids = z.channels().iter().map(|c| window.embed(c.data())).collect();
        Ok(Some(SharedGrid { window, grids }))
    }
}

impl Node {
    fn inner(&self) -> &dyn NodeFunction {
        match self {
            Node::Gffn(n) => n,
            Node::Gcnn(n) => n,
            Node::Projected(n) => n,
        }
    }

    pub fn d(&self) -> usize {
        self.inner().d()
    }

    pub fn activation(&self) -> Activation {
        self.inner().activation()
    }

    pub fn forward(&self, z: &ChannelStack) -> Result<Tensor> {
        self.inner().forward(z)
    }

    fn b_value(&self) -> f64 {
        match self {
            Node::Gffn(n) => n.b(),
            Node::Gcnn(n) => n.b(),
            Node::Projected(n) => n.b(),
        }
    }

    pub fn is_gffn_form(&self) -> bool {
        matches!(self, Node::Gffn(_) | Node::Projected(_))
    }

    /// Output shape for input channels of shape `input`.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match self {
            Node::Gffn(_) => Ok(input.clone()),
            Node::Gcnn(n) => Ok(n.window(input)?.output_shape()),
            Node::Projected(n) => {
                let first = n.subs[0].output_shape(input)?;
                for s in &n.subs[1..] {
                    if s.output_shape(input)? != first {
                        return dim_err("sub-function outputs disagree in shape");
                    }
                }
                Ok(first)
            }
        }
    }

    /// Parameter blocks in their fixed enumeration order.
    pub fn params(&self) -> Vec<(ParamKind, &Param)> {
        match self {
            Node::Gffn(n) => vec![(ParamKind::Weight, &n.weights), (ParamKind::Bias, &n.bias)],
            Node::Gcnn(n) => vec![(ParamKind::Filter, &n.filters), (ParamKind::Bias, &n.bias)],
            Node::Projected(n) => {
                let mut out: Vec<_> = n.subs.iter().map(|s| (ParamKind::SubWeight, &s.weights)).collect();
                out.push((ParamKind::Gamma, &n.gamma));
                out.push((ParamKind::Bias, &n.bias));
                out
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Node::Gffn(n) => vec![&mut n.weights, &mut n.bias],
            Node::Gcnn(n) => vec![&mut n.filters, &mut n.bias],
            Node::Projected(n) => {
                let mut out: Vec<_> = n.subs.iter_mut().map(|s| &mut s.weights).collect();
                out.push(&mut n.gamma);
                out.push(&mut n.bias);
                out
            }
        }
    }

    /// Filter shape and mode when the node is a convolution throughout.
    fn conv_geometry(&self) -> Option<(Shape, PadMode)> {
        match self {
            Node::Gffn(_) => None,
            Node::Gcnn(n) => Some((n.filter_shape.clone(), n.mode)),
            Node::Projected(n) => {
                let first = &n.subs[0];
                let SubKind::Conv { mode } = first.kind else { return None };
                n.subs
                    .iter()
                    .all(|s| s.kind == first.kind && s.shape == first.shape)
                    .then(|| (first.shape.clone(), mode))
            }
        }
    }

    /// Forward pass keeping what backward needs. With `shared`, which must
    /// come from [`SharedGrid::for_layer`] on `z`, convolutions run on the
    /// pre-embedded input.
    pub(crate) fn forward_cached(&self, z: &ChannelStack, shared: Option<&SharedGrid>) -> Result<NodeCache> {
        if let Some(sg) = shared {
            check_d(self.d(), z)?;
            let w = &sg.window;
            let vol = w.output_shape().volume();
            let mut acc = vec![0.0; w.span()];
            let (mut pre, preprocessed) = match self {
                Node::Gcnn(n) => {
                    let mut total = vec![0.0; w.span()];
                    w.correlate_grid_set(&sg.grids[0], n.filter(0), &mut total);
                    for (k, grid) in sg.grids.iter().enumerate().skip(1) {
                        w.correlate_grid_set(grid, n.filter(k), &mut acc);
                        total.iter_mut().zip(&acc).for_each(|(t, a)| *t += a);
                    }
                    let mut pre = vec![0.0; vol];
                    w.gather_acc(&total, &mut pre);
                    (pre, Vec::new())
                }
                Node::Projected(n) => {
                    let mut pre = vec![0.0; vol];
                    let mut pp = Vec::with_capacity(n.d());
                    for ((sub, grid), &g) in n.subs.iter().zip(&sg.grids).zip(n.gammas()) {
                        w.correlate_grid_set(grid, &sub.weights.values, &mut acc);
                        let mut zhat = vec![0.0; vol];
                        w.gather_acc(&acc, &mut zhat);
                        axpy(g, &zhat, &mut pre);
                        pp.push(zhat);
                    }
                    (pre, pp)
                }
                Node::Gffn(_) => unreachable!("shared grids are built for convolutions only"),
            };
            add_bias(&mut pre, self.b_value());
            activate_in_place(&mut pre, self.activation());
            return Ok(NodeCache { output: pre, preprocessed });
        }
        let (mut pre, preprocessed) = match self {
            Node::Projected(n) => {
                let zhat = n.preprocess(z)?;
                let mut pre = vec![0.0; zhat.channel_shape().volume()];
                for (zk, &g) in zhat.channels().iter().zip(n.gammas()) {
                    axpy(g, zk.data(), &mut pre);
                }
                add_bias(&mut pre, n.b());
                let pp = zhat.into_channels().into_iter().map(Tensor::into_data).collect();
                (pre, pp)
            }
            other => (other.inner().pre_activation(z)?.into_data(), Vec::new()),
        };
        activate_in_place(&mut pre, self.activation());
        Ok(NodeCache { output: pre, preprocessed })
    }

    /// Backpropagates `upstream` (gradient w.r.t. this node's output).
    ///
    /// Parameter gradients are added into `grads`, one slot per block in
    /// [`Self::params`] order; `None` slots (frozen blocks) are skipped. When
    /// `grad_in` is given, the input gradient is added into it per channel,
    /// in grid layout when `shared` is given and in input layout otherwise.
    pub(crate) fn backward(
        &self,
        z: &ChannelStack,
        cache: &NodeCache,
        upstream: &[f64],
        grads: &mut [Option<Vec<f64>>],
        grad_in: Option<&mut [Vec<f64>]>,
        shared: Option<&SharedGrid>,
    ) -> Result<()> {
        let act = self.activation();
        let gpre: Vec<f64> =
            upstream.iter().zip(&cache.output).map(|(g, &y)| g * act.derivative_from_output(y)).collect();
        let bias_grad: f64 = gpre.iter().sum();
        match self {
            Node::Gffn(n) => {
                if let Some(gw) = &mut grads[0] {
                    for (k, zk) in z.channels().iter().enumerate() {
                        gw[k] += dot(&gpre, zk.data());
                    }
                }
                if let Some(gb) = &mut grads[1] {
                    gb[0] += bias_grad;
                }
                if let Some(gi) = grad_in {
                    for (k, gik) in gi.iter_mut().enumerate() {
                        axpy(n.weights()[k], &gpre, gik);
                    }
                }
            }
            Node::Gcnn(n) => {
                let vol = n.filter_shape.volume();
                if let Some(gb) = &mut grads[1] {
                    gb[0] += bias_grad;
                }
                if let Some(sg) = shared {
                    let window = &sg.window;
                    let gs = window.scatter(&gpre);
                    if let Some(gf) = &mut grads[0] {
                        for (k, grid) in sg.grids.iter().enumerate() {
                            window.grad_kernel_gridded(grid, &gs, &mut gf[k * vol..(k + 1) * vol]);
                        }
                    }
                    if let Some(gi) = grad_in {
                        for (k, gik) in gi.iter_mut().enumerate() {
                            window.grad_input_grid(&gs, n.filter(k), gik);
                        }
                    }
                    return Ok(());
                }
                let window = n.window(z.channel_shape())?;
                let gs = window.scatter(&gpre);
                if let Some(gf) = &mut grads[0] {
                    for (k, zk) in z.channels().iter().enumerate() {
                        window.grad_kernel_gridded(&window.embed(zk.data()), &gs, &mut gf[k * vol..(k + 1) * vol]);
                    }
                }
                if let Some(gi) = grad_in {
                    for (k, gik) in gi.iter_mut().enumerate() {
                        window.grad_input_scattered(&gs, n.filter(k), gik);
                    }
                }
            }
            Node::Projected(n) => {
                let d = n.d();
                if let Some(gg) = &mut grads[d] {
                    for (k, zhat) in cache.preprocessed.iter().enumerate() {
                        gg[k] += dot(&gpre, zhat);
                    }
                }
                if let Some(gb) = &mut grads[d + 1] {
                    gb[0] += bias_grad;
                }
                let needs_scaled = grad_in.is_some() || grads[..d].iter().any(Option::is_some);
                if let (Some(sg), true) = (shared, needs_scaled) {
                    let window = &sg.window;
                    let gs = window.scatter(&gpre);
                    let mut grad_in = grad_in;
                    for (k, (sub, grid)) in n.subs.iter().zip(&sg.grids).enumerate() {
                        let g = n.gammas()[k];
                        if let Some(gw) = &mut grads[k] {
                            let mut tmp = vec![0.0; gw.len()];
                            window.grad_kernel_gridded(grid, &gs, &mut tmp);
                            axpy(g, &tmp, gw);
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let kernel: Vec<f64> = sub.weights.values.iter().map(|w| g * w).collect();
                            window.grad_input_grid(&gs, &kernel, &mut gi[k]);
                        }
                    }
                    return Ok(());
                }
                let own = if needs_scaled { n.shared_window(z.channel_shape())? } else { None };
                if let Some(window) = own {
                    let gs = window.scatter(&gpre);
                    let mut grad_in = grad_in;
                    for (k, (sub, zk)) in n.subs.iter().zip(z.channels()).enumerate() {
                        let g = n.gammas()[k];
                        if let Some(gw) = &mut grads[k] {
                            let mut tmp = vec![0.0; gw.len()];
                            window.grad_kernel_gridded(&window.embed(zk.data()), &gs, &mut tmp);
                            axpy(g, &tmp, gw);
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let kernel: Vec<f64> = sub.weights.values.iter().map(|w| g * w).collect();
                            window.grad_input_scattered(&gs, &kernel, &mut gi[k]);
                        }
                    }
                } else if needs_scaled {
                    let mut grad_in = grad_in;
                    let mut scaled = vec![0.0; gpre.len()];
                    for (k, (sub, zk)) in n.subs.iter().zip(z.channels()).enumerate() {
                        let g = n.gammas()[k];
                        scaled.iter_mut().zip(&gpre).for_each(|(s, p)| *s = g * p);
                        if let Some(gw) = &mut grads[k] {
                            sub.backprop_weights(zk, &scaled, gw)?;
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            sub.backprop_input(zk.shape(), &scaled, &mut gi[k])?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
