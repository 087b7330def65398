mod common;

use common::*;
use projnet::model::Mode;
use projnet::nodes::{GcnnNode, GffnNode, Node, NodeFunction, ProductNode};
use projnet::projection::{apply_regime, count_params, project_function, project_model, project_node, Regime};
use projnet::tensor::{broadcast_bias, convolve, tensor_dot, PadMode, Shape, Tensor};
use projnet::verify::zero_masking_deviation;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-12;

proptest! {
    #![proptest_config(proptest_config(64))]

    #[test]
    fn convolve_is_linear_in_input(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let mut r = rng(seed);
        let s = shape(&mut r);
        let k = kernel_for(&mut r, &s);
        let m = mode(&mut r);
        let (z1, z2, f) = (tensor(&mut r, &s), tensor(&mut r, &s), tensor(&mut r, &k));
        let mixed: Vec<f64> = z1.data().iter().zip(z2.data()).map(|(x, y)| a * x + b * y).collect();
        let lhs = convolve(&Tensor::new(s.clone(), mixed).unwrap(), &f, m).unwrap();
        let (c1, c2) = (convolve(&z1, &f, m).unwrap(), convolve(&z2, &f, m).unwrap());
        let rhs: Vec<f64> = c1.data().iter().zip(c2.data()).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) <= TOL);
    }

    #[test]
    fn convolve_is_linear_in_kernel(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let mut r = rng(seed);
        let s = shape(&mut r);
        let k = kernel_for(&mut r, &s);
        let m = mode(&mut r);
        let (z, f1, f2) = (tensor(&mut r, &s), tensor(&mut r, &k), tensor(&mut r, &k));
        let mixed: Vec<f64> = f1.data().iter().zip(f2.data()).map(|(x, y)| a * x + b * y).collect();
        let lhs = convolve(&z, &Tensor::new(k.clone(), mixed).unwrap(), m).unwrap();
        let (c1, c2) = (convolve(&z, &f1, m).unwrap(), convolve(&z, &f2, m).unwrap());
        let rhs: Vec<f64> = c1.data().iter().zip(c2.data()).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) <= TOL);
    }

    #[test]
    fn broadcast_bias_is_constant_with_requested_shape(seed in any::<u64>(), b in -10.0..10.0f64) {
        let s = shape(&mut rng(seed));
        let t = broadcast_bias(b, &s);
        prop_assert_eq!(t.shape(), &s);
        prop_assert!(t.data().iter().all(|&v| v == b));
    }

    #[test]
    fn unit_filter_gcnn_agrees_with_its_gffn_image(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..=8);
        let s = shape(&mut r);
        let node = gcnn(&mut r, d, &Shape::ones(s.rank()));
        let gffn = node.to_gffn().unwrap();
        let z = stack(&mut r, d, &s);
        let dev = node.forward(&z).unwrap().max_abs_diff(&gffn.forward(&z).unwrap()).unwrap();
        prop_assert!(dev <= TOL);
        prop_assert_eq!(gffn.to_gcnn(s.rank()).to_gffn().unwrap(), gffn);
    }

    #[test]
    fn gffn_lifts_to_gcnn_and_back_exactly(seed in any::<u64>(), rank in 0usize..=3) {
        let mut r = rng(seed);
        let d = r.gen_range(1..=8);
        let gffn = GffnNode::new(uniform(&mut r, d), r.gen_range(-1.0..1.0), hidden_activation(&mut r)).unwrap();
        let lifted = gffn.to_gcnn(rank);
        prop_assert_eq!(lifted.to_gffn().unwrap(), gffn);
    }

    #[test]
    fn projected_node_is_gffn_on_preprocessed_stack(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..=4);
        let s = shape(&mut r);
        let k = kernel_for(&mut r, &s);
        let mut p = project_function(&gcnn(&mut r, d, &k)).unwrap();
        p.gamma.values = uniform(&mut r, d);
        let z = stack(&mut r, d, &s);
        let direct = p.forward(&z).unwrap();
        let staged = p.as_gffn().forward(&p.preprocess(&z).unwrap()).unwrap();
        prop_assert!(direct.max_abs_diff(&staged).unwrap() <= TOL);
    }

    #[test]
    fn gcnn_node_functions_are_separable(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..=5);
        let s = shape(&mut r);
        let k = kernel_for(&mut r, &s);
        let node = gcnn(&mut r, d, &k);
        let z = stack(&mut r, d, &s);
        prop_assert!(zero_masking_deviation(&node, &z).unwrap() <= TOL);
    }

    #[test]
    fn gate_commutes_with_convolution(seed in any::<u64>(), gamma in -3.0..3.0f64) {
        let mut r = rng(seed);
        let s = shape(&mut r);
        let k = kernel_for(&mut r, &s);
        let m = mode(&mut r);
        let (z, f) = (tensor(&mut r, &s), tensor(&mut r, &k));
        let after = convolve(&z, &f, m).unwrap().scaled(gamma);
        let before = convolve(&z.scaled(gamma), &f, m).unwrap();
        let inside = convolve(&z, &f.scaled(gamma), m).unwrap();
        prop_assert!(after.max_abs_diff(&before).unwrap() <= TOL);
        prop_assert!(after.max_abs_diff(&inside).unwrap() <= TOL);
    }

    #[test]
    fn fresh_projection_is_bit_identical_node_by_node(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..=4);
        let s = shape(&mut r);
        let k = kernel_for(&mut r, &s);
        let node = Node::Gcnn(gcnn(&mut r, d, &k));
        let z = stack(&mut r, d, &s);
        let projected = project_node(&node).unwrap();
        prop_assert_eq!(node.forward(&z).unwrap(), projected.forward(&z).unwrap());
    }

    #[test]
    fn projection_preserves_model_function(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = random_model(&mut r);
        let x = batch(&mut r, &model, 4);
        let before = model.forward(&x, Mode::Eval).unwrap();
        let after = project_model(model).forward(&x, Mode::Eval).unwrap();
        for (a, b) in before.iter().zip(&after) {
            prop_assert!(max_abs_diff(a, b) <= 1e-15);
        }
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>()) {
        let model = random_model(&mut rng(seed));
        let once = project_model(model);
        prop_assert_eq!(project_model(once.clone()), once);
    }

    #[test]
    fn projected_conv_node_trains_gates_and_bias_only(seed in any::<u64>()) {
        let model = apply_regime(random_model(&mut rng(seed)), Regime::Projection);
        for layer in model.layers() {
            if let projnet::model::Layer::Nodes(l) = layer {
                for node in &l.nodes {
                    if let Node::Projected(_) = node {
                        let trainable: usize =
                            node.params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum();
                        prop_assert_eq!(trainable, node.d() + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn audit_total_is_conserved_and_regimes_are_ordered(seed in any::<u64>()) {
        let model = random_model(&mut rng(seed));
        let has_wide_kernel = model.layers().iter().any(|l| match l {
            projnet::model::Layer::Nodes(n) => n.nodes.iter().any(|node| match node {
                Node::Gcnn(g) => g.filter_shape.volume() > 1,
                _ => false,
            }),
            _ => false,
        });
        let projected = project_model(model.clone());
        let lr = count_params(&apply_regime(projected.clone(), Regime::Lr));
        let proj = count_params(&apply_regime(projected.clone(), Regime::Projection));
        let ft = count_params(&apply_regime(projected, Regime::Ft));
        prop_assert_eq!(lr.total(), proj.total());
        prop_assert_eq!(proj.total(), ft.total());
        prop_assert!(lr.trainable < proj.trainable);
        prop_assert!(proj.trainable <= ft.trainable);
        if has_wide_kernel {
            prop_assert!(proj.trainable < ft.trainable);
        }
        let unprojected_ft = count_params(&apply_regime(model.clone(), Regime::Ft));
        let unprojected_lr = count_params(&apply_regime(model, Regime::Lr));
        prop_assert_eq!(unprojected_ft.total(), unprojected_lr.total());
    }

    #[test]
    fn tensor_dot_is_linear_in_weights(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let mut r = rng(seed);
        let d = r.gen_range(1..=6);
        let s = shape(&mut r);
        let z = stack(&mut r, d, &s);
        let (w1, w2) = (uniform(&mut r, d), uniform(&mut r, d));
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let lhs = tensor_dot(&z, &mixed).unwrap();
        let (t1, t2) = (tensor_dot(&z, &w1).unwrap(), tensor_dot(&z, &w2).unwrap());
        let rhs: Vec<f64> = t1.data().iter().zip(t2.data()).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) <= TOL);
    }
}

#[test]
fn product_node_is_not_separable() {
    let node = ProductNode { bias: 0.0, activation: projnet::tensor::Activation::Identity };
    let z = projnet::tensor::ChannelStack::scalars(&[2.0, 3.0]).unwrap();
    assert!(zero_masking_deviation(&node, &z).unwrap() > 1.0);
    assert!(matches!(project_function(&node), Err(projnet::Error::Projection(_))));
}

#[test]
fn wide_kernel_gcnn_is_not_reducible() {
    let f = Tensor::vector(vec![1.0, -1.0]).unwrap();
    let node = GcnnNode::new(vec![f], 0.0, projnet::tensor::Activation::Identity, PadMode::Same).unwrap();
    assert!(matches!(node.to_gffn(), Err(projnet::Error::NotReducible(_))));
}
