//! Sequential models `M = f_L o ... o f_1` built from node layers and a few
//! structural layers, ending in a softmax classification head.
//!
//! Parameters are enumerated in a fixed order (layer by layer, node by node,
//! then block order within each node); that order defines the flattened
//! parameter vector, the model file payload, and [`ParamId`] addressing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nodes::{GcnnNode, GffnNode, Node, NodeCache, Param, ParamKind, SharedGrid};
use crate::tensor::{softmax_in_place, Activation, ChannelStack, PadMode, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLayer {
    pub nodes: Vec<Node>,
    /// Every node sees the identical input stack. Projected layers are
    /// inhomogeneous: each node works on its own preprocessed stack.
    pub homogeneous: bool,
}

/// Fully connected softmax classifier over the flattened input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    pub inputs: usize,
    pub classes: usize,
    /// Row-major `classes x inputs`.
    pub weights: Param,
    pub bias: Param,
}

impl DenseHead {
    pub fn new(inputs: usize, classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes < 2 || inputs == 0 {
            return Err(Error::Config(format!("head needs >= 2 classes and >= 1 input, got {classes}x{inputs}")));
        }
        if weights.len() != inputs * classes || bias.len() != classes {
            return dim_err("head parameter lengths do not match classes x inputs");
        }
        Ok(DenseHead { inputs, classes, weights: Param::trainable(weights), bias: Param::trainable(bias) })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let limit = (6.0 / (inputs + classes) as f64).sqrt();
        let w = (0..inputs * classes).map(|_| rng.gen_range(-limit..limit)).collect();
        DenseHead::new(inputs, classes, w, vec![0.0; classes])
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let w = &self.weights.values;
        (0..self.classes)
            .map(|c| {
                let row = &w[c * self.inputs..(c + 1) * self.inputs];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias.values[c]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum Layer {
    Nodes(NodeLayer),
    GlobalAvgPool,
    Dropout { rate: f64 },
    Flatten,
    Head(DenseHead),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Nodes(l) if l.nodes.iter().any(|n| matches!(n, Node::Projected(_))) => "projected",
            Layer::Nodes(l) if l.nodes.iter().any(|n| matches!(n, Node::Gcnn(_))) => "gcnn",
            Layer::Nodes(_) => "gffn",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten => "flatten",
            Layer::Head(_) => "head",
        }
    }

    pub fn params(&self) -> Vec<(Option<usize>, ParamKind, &Param)> {
        match self {
            Layer::Nodes(l) => l
                .nodes
                .iter()
                .enumerate()
                .flat_map(|(j, n)| n.params().into_iter().map(move |(k, p)| (Some(j), k, p)))
                .collect(),
            Layer::Head(h) => vec![(None, ParamKind::HeadWeight, &h.weights), (None, ParamKind::HeadBias, &h.bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Nodes(l) => l.nodes.iter_mut().flat_map(|n| n.params_mut()).collect(),
            Layer::Head(h) => vec![&mut h.weights, &mut h.bias],
            _ => Vec::new(),
        }
    }
}

/// Whether a forward pass is for training (dropout active) or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// `step` selects the dropout masks; the same step reproduces them.
    Train {
        step: u64,
    },
}

/// Address of one scalar in the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub block: usize,
    pub index: usize,
}

/// Description of one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockInfo {
    pub layer: usize,
    pub node: Option<usize>,
    pub kind: ParamKind,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    input_channels: usize,
    input_shape: Shape,
    layers: Vec<Layer>,
    seed: u64,
}

/// Per-layer values recorded during a forward pass.
#[derive(Debug)]
pub(crate) enum LayerCache {
    Nodes(Vec<NodeCache>, Option<SharedGrid>),
    Pool,
    Dropout(Option<Vec<f64>>),
    Flatten,
    Head(Vec<f64>),
}

#[derive(Debug)]
pub(crate) struct Trace {
    /// Input stack of every layer.
    pub inputs: Vec<ChannelStack>,
    pub caches: Vec<LayerCache>,
}

impl Trace {
    pub fn probabilities(&self) -> &[f64] {
        match self.caches.last() {
            Some(LayerCache::Head(p)) => p,
            _ => unreachable!("validated models end in a head"),
        }
    }
}

/// splitmix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for one random stream identified by `parts`.
pub fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| mix(acc ^ mix(p)))
}

impl Model {
    pub fn new(input_channels: usize, input_shape: Shape, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let model = Model { input_channels, input_shape, layers, seed };
        model.validate()?;
        Ok(model)
    }

    /// Checks that adjacent layers compose and every parameter block has the
    /// length its layer implies.
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return dim_err("model needs at least one input channel");
        }
        let mut d = self.input_channels;
        let mut shape = self.input_shape.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |msg: String| Error::Dimension(format!("layer {i}: {msg}"));
            match layer {
                Layer::Nodes(l) => {
                    if l.nodes.len() < 2 {
                        return Err(Error::Config(format!(
                            "layer {i}: a node layer needs at least two nodes, got {}",
                            l.nodes.len()
                        )));
                    }
                    let mut out: Option<Shape> = None;
                    for (j, node) in l.nodes.iter().enumerate() {
                        check_node_params(node).map_err(|e| at(format!("node {j}: {e}")))?;
                        if node.d() != d {
                            return Err(at(format!("node {j} expects {} channels, input has {d}", node.d())));
                        }
                        let s = node.output_shape(&shape).map_err(|e| at(format!("node {j}: {e}")))?;
                        match &out {
                            None => out = Some(s),
                            Some(o) if *o != s => return Err(at("nodes disagree on output shape".into())),
                            _ => {}
                        }
                    }
                    d = l.nodes.len();
                    shape = out.expect("at least two nodes");
                }
                Layer::GlobalAvgPool => shape = Shape::scalar(),
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::Config(format!("layer {i}: dropout rate {rate} outside [0, 1)")));
                    }
                }
                Layer::Flatten => {
                    d *= shape.volume();
                    shape = Shape::scalar();
                }
                Layer::Head(h) => {
                    if i + 1 != n {
                        return Err(Error::Config(format!("layer {i}: the head must be the last layer")));
                    }
                    if h.inputs != d * shape.volume() {
                        return Err(at(format!("head expects {} inputs, gets {}", h.inputs, d * shape.volume())));
                    }
                    if h.weights.len() != h.inputs * h.classes || h.bias.len() != h.classes || h.classes < 2 {
                        return Err(at("head parameter lengths are inconsistent".into()));
                    }
                }
            }
        }
        if !matches!(self.layers.last(), Some(Layer::Head(_))) {
            return Err(Error::Config("model must end in a dense head".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head(&self) -> &DenseHead {
        match self.layers.last() {
            Some(Layer::Head(h)) => h,
            _ => unreachable!("validated models end in a head"),
        }
    }

    pub fn classes(&self) -> usize {
        self.head().classes
    }

    /// Replaces the head with a freshly initialized one for `classes` outputs.
    pub fn with_new_head(mut self, classes: usize, seed: u64) -> Result<Self> {
        let inputs = self.head().inputs;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x4ead]));
        let head = DenseHead::glorot(inputs, classes, &mut rng)?;
        *self.layers.last_mut().expect("head") = Layer::Head(head);
        Ok(self)
    }

    /// Every parameter block with its location, in enumeration order.
    pub fn blocks(&self) -> Vec<BlockInfo> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params().into_iter().map(move |(node, kind, p)| BlockInfo {
                    layer: i,
                    node,
                    kind,
                    len: p.len(),
                    trainable: p.trainable,
                })
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params().into_iter().map(|(_, _, p)| p)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    /// Flattened parameter vector.
    pub fn theta(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    /// Per-block freeze flags (true = trainable).
    pub fn trainable_flags(&self) -> Vec<bool> {
        self.params().iter().map(|p| p.trainable).collect()
    }

    pub fn param(&self, id: ParamId) -> Option<f64> {
        self.params().get(id.block)?.values.get(id.index).copied()
    }

    pub fn set_param(&mut self, id: ParamId, value: f64) -> Result<()> {
        let mut params = self.params_mut();
        let slot = params
            .get_mut(id.block)
            .and_then(|p| p.values.get_mut(id.index))
            .ok_or_else(|| Error::Dimension(format!("no parameter {id:?}")))?;
        *slot = value;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params_mut().into_iter().for_each(|p| p.trainable = trainable);
    }

    fn check_input(&self, x: &ChannelStack) -> Result<()> {
        if x.d() != self.input_channels || x.channel_shape() != &self.input_shape {
            return dim_err(format!(
                "model expects {} channels of shape {}, got {} of shape {}",
                self.input_channels,
                self.input_shape,
                x.d(),
                x.channel_shape()
            ));
        }
        Ok(())
    }

    /// Class probabilities for every sample. Dropout is active only in
    /// [`Mode::Train`], with masks keyed by the step and the sample index.
    pub fn forward(&self, batch: &[ChannelStack], mode: Mode) -> Result<Vec<Vec<f64>>> {
        batch.par_iter().enumerate().map(|(s, x)| Ok(self.trace(x, mode, s as u64)?.probabilities().to_vec())).collect()
    }

    pub(crate) fn trace(&self, x: &ChannelStack, mode: Mode, sample: u64) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match layer {
                Layer::Nodes(l) => {
                    let shared = SharedGrid::for_layer(&l.nodes, &cur)?;
                    let node_caches =
                        l.nodes.iter().map(|n| n.forward_cached(&cur, shared.as_ref())).collect::<Result<Vec<_>>>()?;
                    let shape = l.nodes[0].output_shape(cur.channel_shape())?;
                    let chans =
                        node_caches.iter().map(|c| Tensor::from_parts(shape.clone(), c.output.clone())).collect();
                    (ChannelStack::new(chans)?, LayerCache::Nodes(node_caches, shared))
                }
                Layer::GlobalAvgPool => {
                    let means: Vec<f64> =
                        cur.channels().iter().map(|c| c.data().iter().sum::<f64>() / c.data().len() as f64).collect();
                    (ChannelStack::scalars(&means)?, LayerCache::Pool)
                }
                Layer::Dropout { rate } => match mode {
                    Mode::Train { step } if *rate > 0.0 => {
                        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[self.seed, step, sample, i as u64]));
                        let keep = 1.0 - rate;
                        let flat = cur.flatten();
                        let mask: Vec<f64> =
                            flat.iter().map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                        let dropped: Vec<f64> = flat.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        (restack(&dropped, cur.d(), cur.channel_shape()), LayerCache::Dropout(Some(mask)))
                    }
                    _ => (cur.clone(), LayerCache::Dropout(None)),
                },
                Layer::Flatten => (ChannelStack::scalars(&cur.flatten())?, LayerCache::Flatten),
                Layer::Head(h) => {
                    let mut p = h.logits(&cur.flatten());
                    softmax_in_place(&mut p);
                    (cur.clone(), LayerCache::Head(p))
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
            caches.push(cache);
        }
        Ok(Trace { inputs, caches })
    }

    /// Index of the first layer holding a trainable parameter.
    pub(crate) fn first_trainable_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.params().iter().any(|(_, _, p)| p.trainable))
    }

    /// Index of the first block of every layer.
    pub(crate) fn layer_block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.params().len();
        }
        offsets
    }

    /// Backpropagates `grad_logits` through a recorded trace, adding parameter
    /// gradients into `grads` (one slot per block; `None` for frozen blocks).
    pub(crate) fn backprop(&self, trace: &Trace, grad_logits: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let Some(stop) = self.first_trainable_layer() else {
            return Ok(());
        };
        let offsets = self.layer_block_offsets();
        let mut upstream: Vec<Vec<f64>> = Vec::new();
        for i in (stop..self.layers.len()).rev() {
            let input = &trace.inputs[i];
            let need_input_grad = i > stop;
            let blocks = &mut grads[offsets[i]..];
            upstream = match (&self.layers[i], &trace.caches[i]) {
                (Layer::Head(h), LayerCache::Head(_)) => {
                    let x = input.flatten();
                    if let Some(gw) = &mut blocks[0] {
                        for (c, &g) in grad_logits.iter().enumerate() {
                            crate::tensor::axpy(g, &x, &mut gw[c * h.inputs..(c + 1) * h.inputs]);
                        }
                    }
                    if let Some(gb) = &mut blocks[1] {
                        gb.iter_mut().zip(grad_logits).for_each(|(b, g)| *b += g);
                    }
                    if !need_input_grad {
                        break;
                    }
                    let mut gx = vec![0.0; h.inputs];
                    for (c, &g) in grad_logits.iter().enumerate() {
                        crate::tensor::axpy(g, &h.weights.values[c * h.inputs..(c + 1) * h.inputs], &mut gx);
                    }
                    unflatten(&gx, input)
                }
                (Layer::Flatten, _) => unflatten(&upstream.concat(), input),
                (Layer::Dropout { .. }, LayerCache::Dropout(mask)) => match mask {
                    Some(m) => {
                        unflatten(&upstream.concat().iter().zip(m).map(|(g, m)| g * m).collect::<Vec<_>>(), input)
                    }
                    None => upstream,
                },
                (Layer::GlobalAvgPool, _) => {
                    let vol = input.channel_shape().volume();
                    upstream.iter().map(|g| vec![g[0] / vol as f64; vol]).collect()
                }
                (Layer::Nodes(l), LayerCache::Nodes(node_caches, shared)) => {
                    let vol = input.channel_shape().volume();
                    let len = shared.as_ref().map_or(vol, |sg| sg.window.grid_len());
                    let mut grad_in = if need_input_grad { Some(vec![vec![0.0; len]; input.d()]) } else { None };
                    let mut at = 0;
                    for (j, (node, cache)) in l.nodes.iter().zip(node_caches).enumerate() {
                        let nb = node.params().len();
                        node.backward(
                            input,
                            cache,
                            &upstream[j],
                            &mut blocks[at..at + nb],
                            grad_in.as_deref_mut(),
                            shared.as_ref(),
                        )?;
                        at += nb;
                    }
                    match (grad_in, shared) {
                        (Some(g), Some(sg)) => g
                            .iter()
                            .map(|gk| {
                                let mut out = vec![0.0; vol];
                                sg.window.unembed_acc(gk, &mut out);
                                out
                            })
                            .collect(),
                        (Some(g), None) => g,
                        (None, _) => break,
                    }
                }
                _ => unreachable!("trace layout matches the model"),
            };
        }
        Ok(())
    }
}

fn restack(flat: &[f64], d: usize, shape: &Shape) -> ChannelStack {
    let vol = shape.volume();
    let chans = (0..d).map(|k| Tensor::from_parts(shape.clone(), flat[k * vol..(k + 1) * vol].to_vec())).collect();
    ChannelStack::new(chans).expect("d >= 1")
}

fn unflatten(flat: &[f64], like: &ChannelStack) -> Vec<Vec<f64>> {
    let vol = like.channel_shape().volume();
    (0..like.d()).map(|k| flat[k * vol..(k + 1) * vol].to_vec()).collect()
}

fn check_node_params(node: &Node) -> Result<()> {
    let ok = match node {
        Node::Gffn(n) => !n.weights.is_empty() && n.bias.len() == 1,
        Node::Gcnn(n) => {
            let vol = n.filter_shape.volume();
            !n.filters.is_empty() && n.filters.len() % vol == 0 && n.bias.len() == 1
        }
        Node::Projected(n) => {
            !n.subs.is_empty()
                && n.gamma.len() == n.subs.len()
                && n.bias.len() == 1
                && n.subs.iter().all(|s| s.weights.len() == s.shape.volume())
        }
    };
    if !ok {
        return dim_err("parameter block lengths are inconsistent");
    }
    if node.activation() == Activation::Softmax {
        return Err(Error::Config("softmax is only allowed on the head".into()));
    }
    Ok(())
}

/// Declarative architecture, as read from an architecture JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        nodes: usize,
        kernel: Vec<usize>,
        #[serde(default)]
        mode: PadMode,
        #[serde(default)]
        activation: Activation,
    },
    Gffn {
        nodes: usize,
        #[serde(default)]
        activation: Activation,
    },
    GlobalAvgPool,
    Dropout {
        rate: f64,
    },
    Flatten,
    Head {
        classes: usize,
    },
}

impl ArchSpec {
    /// The desk-scale backbone used by the transfer experiments:
    /// two 3x3 conv layers, pooling, dropout 0.5, and a softmax head.
    pub fn desk_scale(input_channels: usize, side: usize, classes: usize, seed: u64) -> Self {
        ArchSpec {
            input_channels,
            input_shape: vec![side, side],
            layers: vec![
                LayerSpec::Conv { nodes: 8, kernel: vec![3, 3], mode: PadMode::Same, activation: Activation::Relu },
                LayerSpec::Conv { nodes: 16, kernel: vec![3, 3], mode: PadMode::Same, activation: Activation::Relu },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Head { classes },
            ],
            seed,
        }
    }
}

/// Builds and initializes a model: He-normal for node weights, Glorot-uniform
/// for the head, zero biases. Deterministic in `spec.seed`.
pub fn build_backbone(spec: &ArchSpec) -> Result<Model> {
    let input_shape = Shape::new(spec.input_shape.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut d = spec.input_channels;
    let mut shape = input_shape.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let layer = match ls {
            LayerSpec::Conv { nodes, kernel, mode, activation } => {
                let kshape = Shape::new(kernel.clone()).map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                if kshape.rank() != shape.rank() {
                    return Err(Error::Config(format!(
                        "layer {i}: kernel rank {} does not match input rank {}",
                        kshape.rank(),
                        shape.rank()
                    )));
                }
                let he = he_normal(d * kshape.volume())?;
                let nodes = (0..*nodes)
                    .map(|_| {
                        let filters = (0..d)
                            .map(|_| {
                                let data = (0..kshape.volume()).map(|_| he.sample(&mut rng)).collect();
                                Tensor::from_parts(kshape.clone(), data)
                            })
                            .collect();
                        GcnnNode::new(filters, 0.0, *activation, *mode).map(Node::Gcnn)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                Layer::Nodes(NodeLayer { nodes, homogeneous: true })
            }
            LayerSpec::Gffn { nodes, activation } => {
                let he = he_normal(d)?;
                let nodes = (0..*nodes)
                    .map(|_| {
                        let w = (0..d).map(|_| he.sample(&mut rng)).collect();
                        GffnNode::new(w, 0.0, *activation).map(Node::Gffn)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                Layer::Nodes(NodeLayer { nodes, homogeneous: true })
            }
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Dropout { rate } => Layer::Dropout { rate: *rate },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Head { classes } => Layer::Head(DenseHead::glorot(d * shape.volume(), *classes, &mut rng)?),
        };
        // track shapes so the head knows its fan-in
        match &layer {
            Layer::Nodes(l) => {
                shape = l.nodes[0].output_shape(&shape).map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                d = l.nodes.len();
            }
            Layer::GlobalAvgPool => shape = Shape::scalar(),
            Layer::Flatten => {
                d *= shape.volume();
                shape = Shape::scalar();
            }
            _ => {}
        }
        layers.push(layer);
    }
    Model::new(spec.input_channels, input_shape, layers, spec.seed).map_err(|e| match e {
        Error::Dimension(m) => Error::Config(m),
        other => other,
    })
}

fn he_normal(fan_in: usize) -> Result<Normal<f64>> {
    Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))
}
