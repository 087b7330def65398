//! Seeded numerical certificates for the node-level identities, with a
//! machine-readable report.
//!
//! Every check draws random instances from a fixed menu, evaluates the
//! library against an independent oracle (a naive multi-index convolution,
//! an explicit gate sum, a finite-difference loss), and records the largest
//! deviation it saw. Negative controls run the same checks on inputs that
//! must fail, so a check that passes vacuously shows up in the report.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, fd_gradient, GradientTape, LossKind};
use crate::error::{Error, Result};
use crate::model::{build_backbone, stream_seed, ArchSpec, Layer, LayerSpec, Mode, Model, ParamId};
use crate::nodes::{GcnnNode, GffnNode, Node, NodeFunction, ParamKind, ProductNode};
use crate::projection::{project_model, project_node};
use crate::tensor::{convolve, Activation, ChannelStack, PadMode, Shape, Tensor};

pub const ALGEBRAIC_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-15;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_EPS: f64 = 1e-6;
/// Denominator floor of the relative gradient error, so gradients whose
/// magnitude is at the level of the difference quotient's rounding noise
/// are compared absolutely.
pub const FD_REL_FLOOR: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 200;
pub const DEFAULT_FD_PARAMS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl ReportRow {
    fn new(name: &str, instances: usize, max_deviation: f64, tolerance: f64) -> Self {
        ReportRow {
            name: name.into(),
            instances,
            max_deviation,
            tolerance,
            pass: max_deviation <= tolerance,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    /// Marks the row failed unless `ok`, recording `why`.
    fn require(mut self, ok: bool, why: &str) -> Self {
        if !ok {
            self.pass = false;
            self.detail = if self.detail.is_empty() { why.into() } else { format!("{}; {why}", self.detail) };
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distributions {
    pub weights: String,
    pub inputs: String,
    pub ranks: String,
    pub extents: String,
    pub channels: String,
    pub activations: String,
}

impl Default for Distributions {
    fn default() -> Self {
        Distributions {
            weights: "uniform(-1, 1)".into(),
            inputs: "uniform(-2, 2)".into(),
            ranks: "0..=3".into(),
            extents: "input 1..=4, kernel 1..=3".into(),
            channels: "1..=8".into(),
            activations: "identity, relu, sigmoid".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    /// Every row must pass.
    pub checks: Vec<ReportRow>,
    /// Negative controls; every row must fail.
    pub controls: Vec<ReportRow>,
    pub overall_pass: bool,
    pub distributions: Distributions,
}

impl VerificationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn require_instances(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("a check needs at least one instance".into()));
    }
    Ok(())
}

fn rng_for(seed: u64, check: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(&[seed, check]))
}

fn weight(rng: &mut impl Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

fn rand_shape(rng: &mut impl Rng, rank: usize, max_extent: usize) -> Shape {
    Shape::new((0..rank).map(|_| rng.gen_range(1..=max_extent)).collect()).expect("extents >= 1")
}

fn rand_tensor(rng: &mut impl Rng, shape: &Shape, half_width: f64) -> Tensor {
    let data = (0..shape.volume()).map(|_| rng.gen_range(-half_width..half_width)).collect();
    Tensor::new(shape.clone(), data).expect("finite values")
}

fn rand_stack(rng: &mut impl Rng, d: usize, shape: &Shape) -> ChannelStack {
    ChannelStack::new((0..d).map(|_| rand_tensor(rng, shape, 2.0)).collect()).expect("d >= 1")
}

fn rand_activation(rng: &mut impl Rng) -> Activation {
    *[Activation::Identity, Activation::Relu, Activation::Sigmoid].choose(rng).expect("non-empty")
}

fn rand_mode(rng: &mut impl Rng) -> PadMode {
    if rng.gen_bool(0.5) {
        PadMode::Valid
    } else {
        PadMode::Same
    }
}

/// Input shape and kernel shape of one rank, with the kernel fitting the
/// input in valid mode.
fn rand_conv_shapes(rng: &mut impl Rng, rank: usize) -> (Shape, Shape) {
    let input = rand_shape(rng, rank, 4);
    let kernel = Shape::new(input.dims().iter().map(|&n| rng.gen_range(1..=n.min(3))).collect()).expect("extents >= 1");
    (input, kernel)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::MAX;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn odometer(pos: &mut [usize], dims: &[usize]) -> bool {
    for a in (0..pos.len()).rev() {
        pos[a] += 1;
        if pos[a] < dims[a] {
            return true;
        }
        pos[a] = 0;
    }
    false
}

/// Cross-correlation straight from the definition: every output multi-index
/// sums every in-range kernel tap.
pub fn naive_convolve(z: &Tensor, f: &Tensor, mode: PadMode) -> Tensor {
    let (zd, fd) = (z.shape().dims(), f.shape().dims());
    let pad: Vec<isize> = fd.iter().map(|&l| if mode == PadMode::Same { ((l - 1) / 2) as isize } else { 0 }).collect();
    let out_dims: Vec<usize> =
        zd.iter().zip(fd).map(|(&n, &l)| if mode == PadMode::Same { n } else { n + 1 - l }).collect();
    let flat = |idx: &[usize], dims: &[usize]| idx.iter().zip(dims).fold(0, |acc, (i, n)| acc * n + i);
    let mut out = vec![0.0; out_dims.iter().product()];
    let mut o = vec![0; out_dims.len()];
    loop {
        let mut acc = 0.0;
        let mut t = vec![0; fd.len()];
        loop {
            let src: Option<Vec<usize>> = o
                .iter()
                .zip(&t)
                .zip(&pad)
                .zip(zd)
                .map(|(((&oi, &ti), &p), &n)| {
                    let i = oi as isize + ti as isize - p;
                    (0..n as isize).contains(&i).then_some(i as usize)
                })
                .collect();
            if let Some(src) = src {
                acc += z.data()[flat(&src, zd)] * f.data()[flat(&t, fd)];
            }
            if !odometer(&mut t, fd) {
                break;
            }
        }
        out[flat(&o, &out_dims)] = acc;
        if !odometer(&mut o, &out_dims) {
            break;
        }
    }
    Tensor::new(Shape::new(out_dims).expect("extents >= 1"), out).expect("finite values")
}

fn activate(v: f64, act: Activation) -> f64 {
    match act {
        Activation::Identity => v,
        Activation::Relu => v.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Activation::Softmax => unreachable!("hidden nodes never use softmax"),
    }
}

/// Every GCNN node whose filter channels have extent 1 agrees with its GFFN
/// image, the GFFN-to-GCNN map agrees the other way, both round trips return
/// the exact parameters, and a 2-tap node is exhibited that no GFFN node can
/// reproduce.
pub fn check_gcnn_gffn_bijection(n: usize, seed: u64) -> Result<ReportRow> {
    require_instances(n)?;
    let mut rng = rng_for(seed, 1);
    let (mut dev, mut round_trip) = (0.0f64, 0.0f64);
    for i in 0..n {
        let rank = i % 4;
        let d = rng.gen_range(1..=8);
        let shape = rand_shape(&mut rng, rank, 4);
        let act = rand_activation(&mut rng);
        let filters = (0..d).map(|_| rand_tensor(&mut rng, &Shape::ones(rank), 1.0)).collect();
        let gcnn = GcnnNode::new(filters, weight(&mut rng), act, rand_mode(&mut rng))?;
        let z = rand_stack(&mut rng, d, &shape);
        let gffn = gcnn.to_gffn()?;
        dev = dev.max(gcnn.forward(&z)?.max_abs_diff(&gffn.forward(&z)?)?);

        let back = gffn.to_gcnn(rank);
        round_trip =
            round_trip.max(max_abs_diff(&back.filters.values, &gcnn.filters.values)).max((back.b() - gcnn.b()).abs());
        let w: Vec<f64> = (0..d).map(|_| weight(&mut rng)).collect();
        let g = GffnNode::new(w, weight(&mut rng), act)?;
        let lifted = g.to_gcnn(rank);
        dev = dev.max(lifted.forward(&z)?.max_abs_diff(&g.forward(&z)?)?);
        let again = lifted.to_gffn()?;
        round_trip = round_trip.max(max_abs_diff(again.weights(), g.weights())).max((again.b() - g.b()).abs());
    }
    let witness = strictness_witness()?;
    Ok(ReportRow::new("gffn_gcnn_bijection", n, dev, ALGEBRAIC_TOL)
        .with_detail(format!("round-trip max |delta| {round_trip:e}; {witness}"))
        .require(round_trip == 0.0, "parameter round trip not exact")
        .require(!witness.is_empty(), "no strictness witness"))
}

/// A single-channel GCNN node with filter `[1, -1]` (same mode) maps
/// `Z_a = [1, 0]` to `[1, 0]` and `Z_b = [0, 1]` to `[-1, 1]`. The inputs hold
/// the same values, yet the value 0 goes to 0 in one and to -1 in the other.
/// A GFFN node on one channel applies `v -> sigma(w v + b)` entrywise, so it
/// sends equal entries to equal outputs and matches neither pair. Returns a
/// description of the witness, or an empty string if it does not hold.
fn strictness_witness() -> Result<String> {
    let node = GcnnNode::new(vec![Tensor::vector(vec![1.0, -1.0])?], 0.0, Activation::Identity, PadMode::Same)?;
    let za = Tensor::vector(vec![1.0, 0.0])?;
    let zb = Tensor::vector(vec![0.0, 1.0])?;
    let ya = node.forward(&ChannelStack::new(vec![za.clone()])?)?;
    let yb = node.forward(&ChannelStack::new(vec![zb.clone()])?)?;
    let sums_equal = za.data().iter().sum::<f64>() == zb.data().iter().sum::<f64>();
    for (p, (&xa, &oa)) in za.data().iter().zip(ya.data()).enumerate() {
        for (q, (&xb, &ob)) in zb.data().iter().zip(yb.data()).enumerate() {
            if sums_equal && xa == xb && oa != ob {
                return Ok(format!(
                    "strictness witness: filter [1,-1] sends Z_a[{p}]={xa} to {oa} but Z_b[{q}]={xb} to {ob}, \
                     which no entrywise GFFN map can do"
                ));
            }
        }
    }
    Ok(String::new())
}

/// A random GCNN node and its projection with random gates and bias.
fn rand_projected(rng: &mut ChaCha8Rng) -> Result<(Node, ChannelStack)> {
    let rank = rng.gen_range(1..=3);
    let d = rng.gen_range(1..=6);
    let (input, kernel) = rand_conv_shapes(rng, rank);
    let filters = (0..d).map(|_| rand_tensor(rng, &kernel, 1.0)).collect();
    let gcnn = GcnnNode::new(filters, weight(rng), rand_activation(rng), rand_mode(rng))?;
    let mut node = project_node(&Node::Gcnn(gcnn))?;
    if let Node::Projected(p) = &mut node {
        p.gamma.values.iter_mut().for_each(|g| *g = rng.gen_range(-1.0..1.0));
        p.bias.values[0] = weight(rng);
    }
    Ok((node, rand_stack(rng, d, &input)))
}

/// Projected nodes evaluated by the library agree with the explicit two-stage
/// evaluation: `Z^_k` by naive convolution with the frozen filter, then
/// `sigma(sum_k gamma_k Z^_k + b)`. Two projected nodes with different filters
/// in one layer receive different `Z^` stacks, and equal filters give equal
/// stacks.
pub fn check_projected_as_gffn(n: usize, seed: u64) -> Result<ReportRow> {
    require_instances(n)?;
    let mut rng = rng_for(seed, 2);
    let mut dev = 0.0f64;
    let mut distinct = true;
    for _ in 0..n {
        let (node, z) = rand_projected(&mut rng)?;
        let Node::Projected(p) = &node else { unreachable!("projection of a GCNN node") };
        let zhat: Vec<Tensor> = p
            .subs
            .iter()
            .zip(z.channels())
            .map(|(s, zk)| match s.kind {
                crate::nodes::SubKind::Conv { mode } => {
                    naive_convolve(zk, &Tensor::new(s.shape.clone(), s.weights.values.clone()).expect("finite"), mode)
                }
                crate::nodes::SubKind::Scale => zk.scaled(s.weights.values[0]),
            })
            .collect();
        let mut explicit = vec![p.b(); zhat[0].data().len()];
        for (zk, &g) in zhat.iter().zip(p.gammas()) {
            explicit.iter_mut().zip(zk.data()).for_each(|(e, v)| *e += g * v);
        }
        explicit.iter_mut().for_each(|e| *e = activate(*e, p.activation));
        dev = dev.max(max_abs_diff(node.forward(&z)?.data(), &explicit));
        // the library's own two-stage path must agree as well
        let two_stage = p.as_gffn().forward(&p.preprocess(&z)?)?;
        dev = dev.max(max_abs_diff(node.forward(&z)?.data(), two_stage.data()));

        // a sibling node with different filters sees a different Z^
        let mut sibling = p.clone();
        sibling.subs.iter_mut().for_each(|s| s.weights.values.iter_mut().for_each(|w| *w = -*w + 0.5));
        let (a, b) = (p.preprocess(&z)?, sibling.preprocess(&z)?);
        distinct &= a.flatten() != b.flatten();
        distinct &= p.clone().preprocess(&z)?.flatten() == a.flatten();
    }
    Ok(ReportRow::new("projected_is_gffn_on_preprocessed", n, dev, ALGEBRAIC_TOL)
        .require(distinct, "nodes with different filters received identical preprocessed stacks"))
}

/// Zero-masking deviation of one node on one input:
/// `f'(Z)` against `sum_k f'(M_k Z) - (d - 1) f'(0)`, where `M_k` zeroes every
/// channel but `k`. Zero exactly when `f'` is separable by input.
pub fn zero_masking_deviation(node: &dyn NodeFunction, z: &ChannelStack) -> Result<f64> {
    let d = z.d();
    let zero = ChannelStack::new(z.channels().iter().map(|c| Tensor::zeros(c.shape().clone())).collect())?;
    let f0 = node.pre_activation(&zero)?;
    let mut rhs: Vec<f64> = f0.data().iter().map(|v| -(d as f64 - 1.0) * v).collect();
    for k in 0..d {
        let masked = ChannelStack::new(
            z.channels()
                .iter()
                .enumerate()
                .map(|(j, c)| if j == k { c.clone() } else { Tensor::zeros(c.shape().clone()) })
                .collect(),
        )?;
        let fk = node.pre_activation(&masked)?;
        rhs.iter_mut().zip(fk.data()).for_each(|(r, v)| *r += v);
    }
    Ok(max_abs_diff(node.pre_activation(z)?.data(), &rhs))
}

/// Runs the zero-masking test over `(node, input)` pairs and, for nodes that
/// report sub-functions, checks `f'(Z) = sum_k f'_k(Z_k) + b`.
pub fn separability_row(name: &str, cases: &[(&dyn NodeFunction, ChannelStack)]) -> Result<ReportRow> {
    let mut dev = 0.0f64;
    for (node, z) in cases {
        dev = dev.max(zero_masking_deviation(*node, z)?);
        if let Some((subs, b)) = node.separable_parts() {
            let pre = node.pre_activation(z)?;
            let mut sum = vec![b; pre.data().len()];
            for (s, zk) in subs.iter().zip(z.channels()) {
                let out = s.eval(zk)?;
                sum.iter_mut().zip(out.data()).for_each(|(a, v)| *a += v);
            }
            dev = dev.max(max_abs_diff(pre.data(), &sum));
        }
    }
    Ok(ReportRow::new(name, cases.len(), dev, ALGEBRAIC_TOL))
}

/// GCNN node functions are separable by input.
pub fn check_separability(n: usize, seed: u64) -> Result<ReportRow> {
    require_instances(n)?;
    let mut rng = rng_for(seed, 3);
    let mut nodes = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let rank = rng.gen_range(0..=3);
        // the first instance covers the single-channel case
        let d = if i == 0 { 1 } else { rng.gen_range(1..=8) };
        let (input, kernel) = rand_conv_shapes(&mut rng, rank);
        let filters = (0..d).map(|_| rand_tensor(&mut rng, &kernel, 1.0)).collect();
        nodes.push(GcnnNode::new(filters, weight(&mut rng), rand_activation(&mut rng), rand_mode(&mut rng))?);
        inputs.push(rand_stack(&mut rng, d, &input));
    }
    let cases: Vec<(&dyn NodeFunction, ChannelStack)> =
        nodes.iter().zip(inputs).map(|(n, z)| (n as &dyn NodeFunction, z)).collect();
    separability_row("gcnn_separable_by_input", &cases)
}

/// Negative control: the product node `Z_1 * Z_2 + b` must fail.
pub fn control_non_separable(n: usize, seed: u64) -> Result<ReportRow> {
    require_instances(n)?;
    let mut rng = rng_for(seed, 4);
    let node = ProductNode { bias: 0.25, activation: Activation::Identity };
    let cases: Vec<(&dyn NodeFunction, ChannelStack)> = (0..n)
        .map(|_| {
            let rank = rng.gen_range(0..=3);
            let shape = rand_shape(&mut rng, rank, 4);
            (&node as &dyn NodeFunction, rand_stack(&mut rng, 2, &shape))
        })
        .collect();
    separability_row("control_product_node_separability", &cases)
}

/// A gate can sit before or after a convolution, or inside the filter:
/// `g (Z * F) = (g Z) * F = Z * (g F)`.
pub fn check_gamma_placement(n: usize, seed: u64) -> Result<ReportRow> {
    require_instances(n)?;
    let mut rng = rng_for(seed, 5);
    let mut dev = 0.0f64;
    let mut edge_cases = true;
    for i in 0..n {
        let g = match i {
            0 => 0.0,
            1 => 1.0,
            _ => weight(&mut rng),
        };
        let rank = rng.gen_range(0..=3);
        let (input, kernel) = rand_conv_shapes(&mut rng, rank);
        let z = rand_tensor(&mut rng, &input, 2.0);
        let f = rand_tensor(&mut rng, &kernel, 1.0);
        let mode = rand_mode(&mut rng);
        let after = convolve(&z, &f, mode)?.scaled(g);
        let before = convolve(&z.scaled(g), &f, mode)?;
        let inside = convolve(&z, &f.scaled(g), mode)?;
        dev = dev.max(after.max_abs_diff(&before)?).max(after.max_abs_diff(&inside)?);
        if g == 0.0 {
            edge_cases &= before.data().iter().chain(after.data()).all(|&v| v == 0.0);
        }
        if g == 1.0 {
            let plain = convolve(&z, &f, mode)?;
            edge_cases &= before == plain && after == plain;
        }
    }
    Ok(ReportRow::new("gamma_placement_commutes", n, dev, ALGEBRAIC_TOL)
        .require(edge_cases, "gate 0 or gate 1 edge case failed"))
}

/// The two-conv backbone used by the projection checks.
pub fn two_conv_backbone(seed: u64) -> Result<Model> {
    build_backbone(&ArchSpec {
        input_channels: 3,
        input_shape: vec![8, 8],
        layers: vec![
            LayerSpec::Conv { nodes: 6, kernel: vec![3, 3], mode: PadMode::Same, activation: Activation::Relu },
            LayerSpec::Conv { nodes: 8, kernel: vec![3, 3], mode: PadMode::Same, activation: Activation::Relu },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Head { classes: 5 },
        ],
        seed,
    })
}

/// Random batch of `n` inputs for `model`.
pub fn random_batch(model: &Model, n: usize, rng: &mut impl Rng) -> Vec<ChannelStack> {
    (0..n).map(|_| rand_stack(rng, model.input_channels(), model.input_shape())).collect()
}

/// A freshly projected backbone computes the same function on a fixed batch
/// of 64 inputs.
pub fn check_projection_identity(seed: u64) -> Result<ReportRow> {
    let model = two_conv_backbone(stream_seed(&[seed, 6]))?;
    let batch = random_batch(&model, 64, &mut rng_for(seed, 6));
    let before = model.forward(&batch, Mode::Eval)?;
    let after = project_model(model).forward(&batch, Mode::Eval)?;
    let dev = before.iter().zip(&after).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
    Ok(ReportRow::new("projection_preserves_first_forward", 64, dev, IDENTITY_TOL))
}

/// Projecting twice equals projecting once, structure and values.
pub fn check_projection_idempotent(seed: u64) -> Result<ReportRow> {
    let once = project_model(two_conv_backbone(stream_seed(&[seed, 7]))?);
    let twice = project_model(once.clone());
    let dev = max_abs_diff(&once.theta(), &twice.theta());
    Ok(ReportRow::new("projection_idempotent", 1, dev, 0.0).require(once == twice, "structure changed"))
}

/// Model used by the gradient suite: GCNN, projected, and GFFN layers, pooling,
/// dropout, and a head. Smooth activations avoid kinks at the probe points.
pub fn gradient_model(seed: u64) -> Result<Model> {
    let spec = ArchSpec {
        input_channels: 2,
        input_shape: vec![6, 6],
        layers: vec![
            LayerSpec::Conv { nodes: 6, kernel: vec![3, 3], mode: PadMode::Same, activation: Activation::Sigmoid },
            LayerSpec::Conv { nodes: 8, kernel: vec![3, 3], mode: PadMode::Valid, activation: Activation::Sigmoid },
            LayerSpec::Gffn { nodes: 4, activation: Activation::Identity },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Head { classes: 5 },
        ],
        seed,
    };
    let mut model = build_backbone(&spec)?;
    let mut rng = rng_for(seed, 8);
    if let Layer::Nodes(l) = &mut model.layers_mut()[1] {
        for node in &mut l.nodes {
            *node = project_node(node)?;
        }
        l.homogeneous = false;
    }
    // move gates and biases off their initial values so every block is generic
    for p in model.params_mut() {
        if p.len() <= 8 {
            p.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    model.set_all_trainable(true);
    Ok(model)
}

/// Relative error with the denominator floored at [`FD_REL_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Samples `count` distinct scalars, at least 25 of each parameter kind when
/// available, then uniformly from the rest.
fn sample_params(model: &Model, count: usize, rng: &mut impl Rng) -> Vec<(ParamId, ParamKind)> {
    let blocks = model.blocks();
    let all: Vec<(ParamId, ParamKind)> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, info)| (0..info.len).map(move |i| (ParamId { block: b, index: i }, info.kind)))
        .collect();
    let kinds: BTreeSet<_> = all.iter().map(|(_, k)| format!("{k:?}")).collect();
    let mut picked = BTreeSet::new();
    for kind in &kinds {
        let mut of_kind: Vec<usize> = (0..all.len()).filter(|&i| &format!("{:?}", all[i].1) == kind).collect();
        of_kind.shuffle(rng);
        picked.extend(of_kind.into_iter().take(25));
    }
    let mut rest: Vec<usize> = (0..all.len()).filter(|i| !picked.contains(i)).collect();
    rest.shuffle(rng);
    let need = count.saturating_sub(picked.len());
    picked.extend(rest.into_iter().take(need));
    picked.into_iter().map(|i| all[i]).collect()
}

#[allow(clippy::too_many_arguments)]
fn gradient_row(
    name: &str,
    model: &Model,
    tape: &GradientTape,
    batch: &[ChannelStack],
    labels: &[usize],
    loss: LossKind,
    mode: Mode,
    ids: &[(ParamId, ParamKind)],
) -> Result<ReportRow> {
    let mut worst = 0.0f64;
    let mut kinds = BTreeSet::new();
    for &(id, kind) in ids {
        let a = tape.grad(id).ok_or_else(|| Error::Numeric(format!("no analytic gradient for {id:?}")))?;
        let f = fd_gradient(model, batch, labels, loss, mode, id, FD_EPS)?;
        worst = worst.max(relative_error(a, f));
        kinds.insert(format!("{kind:?}"));
    }
    Ok(ReportRow::new(name, ids.len(), worst, FD_REL_TOL)
        .with_detail(format!("eps {FD_EPS:e}, kinds {}", kinds.into_iter().collect::<Vec<_>>().join(","))))
}

struct GradientSetup {
    model: Model,
    batch: Vec<ChannelStack>,
    labels: Vec<usize>,
    mode: Mode,
    ids: Vec<(ParamId, ParamKind)>,
}

fn gradient_setup(count: usize, seed: u64) -> Result<GradientSetup> {
    require_instances(count)?;
    let model = gradient_model(stream_seed(&[seed, 9]))?;
    let mut rng = rng_for(seed, 9);
    let batch = random_batch(&model, 3, &mut rng);
    let labels = (0..batch.len()).map(|_| rng.gen_range(0..model.classes())).collect();
    let ids = sample_params(&model, count, &mut rng);
    Ok(GradientSetup { model, batch, labels, mode: Mode::Train { step: 11 }, ids })
}

/// Analytic gradients against central differences for sampled parameters
/// of every kind, under cross-entropy with dropout active on a fixed mask.
pub fn check_gradients(count: usize, seed: u64) -> Result<ReportRow> {
    let s = gradient_setup(count, seed)?;
    let tape = backward(&s.model, &s.batch, &s.labels, LossKind::CrossEntropy, s.mode)?;
    gradient_row(
        "gradients_match_finite_differences",
        &s.model,
        &tape,
        &s.batch,
        &s.labels,
        LossKind::CrossEntropy,
        s.mode,
        &s.ids,
    )
}

/// Negative control: the same comparison with every gate gradient scaled by
/// 1.001 must fail.
pub fn control_corrupted_gradient(count: usize, seed: u64) -> Result<ReportRow> {
    let s = gradient_setup(count, seed)?;
    let mut tape = backward(&s.model, &s.batch, &s.labels, LossKind::CrossEntropy, s.mode)?;
    for (info, g) in s.model.blocks().iter().zip(tape.grads.iter_mut()) {
        if info.kind == ParamKind::Gamma {
            g.iter_mut().flatten().for_each(|v| *v *= 1.001);
        }
    }
    let gates: Vec<_> = s.ids.into_iter().filter(|(_, k)| *k == ParamKind::Gamma).collect();
    gradient_row(
        "control_corrupted_gate_gradient",
        &s.model,
        &tape,
        &s.batch,
        &s.labels,
        LossKind::CrossEntropy,
        s.mode,
        &gates,
    )
}

/// Runs every check and control with default sizes.
pub fn run_full_suite(seed: u64) -> Result<VerificationReport> {
    let n = DEFAULT_INSTANCES;
    let checks = vec![
        check_gcnn_gffn_bijection(n, seed)?,
        check_projected_as_gffn(n, seed)?,
        check_separability(n, seed)?,
        check_gamma_placement(n, seed)?,
        check_projection_identity(seed)?,
        check_projection_idempotent(seed)?,
        check_gradients(DEFAULT_FD_PARAMS, seed)?,
    ];
    let controls = vec![control_non_separable(n, seed)?, control_corrupted_gradient(DEFAULT_FD_PARAMS, seed)?];
    let overall_pass = checks.iter().all(|r| r.pass) && controls.iter().all(|r| !r.pass);
    Ok(VerificationReport { seed, checks, controls, overall_pass, distributions: Distributions::default() })
}
