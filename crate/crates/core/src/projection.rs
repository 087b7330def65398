//! Model projection: freeze each separable node's per-channel
//! sub-functions, attach one trainable gate per (node, input channel)
//! initialized to 1, and keep the bias trainable.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::nodes::{Node, NodeFunction, ProjectedNode};

/// Projects any separable node function.
pub fn project_function(node: &dyn NodeFunction) -> Result<ProjectedNode> {
    let (subs, bias) =
        node.separable_parts().ok_or_else(|| Error::Projection("node function is not separable by input".into()))?;
    ProjectedNode::new(subs, bias, node.activation())
}

/// Projects a GCNN node. Nodes already in GFFN form (plain GFFN nodes and
/// projected nodes) are returned unchanged.
pub fn project_node(node: &Node) -> Result<Node> {
    match node {
        Node::Gcnn(n) => Ok(Node::Projected(project_function(n)?)),
        Node::Gffn(_) | Node::Projected(_) => Ok(node.clone()),
    }
}

/// Replaces every non-GFFN node with its projection. Structural layers and
/// the head are untouched; the head stays trainable. Layers that gained
/// projected nodes are marked inhomogeneous. Idempotent.
pub fn project_model(mut model: Model) -> Model {
    for layer in model.layers_mut() {
        if let Layer::Nodes(l) = layer {
            let mut changed = false;
            for node in &mut l.nodes {
                if let Node::Gcnn(n) = node {
                    // GCNN nodes are always separable
                    *node = Node::Projected(project_function(n).expect("GCNN node functions are separable"));
                    changed = true;
                }
            }
            if changed {
                l.homogeneous = false;
            }
        }
    }
    model
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Backbone frozen (biases included); only the head trains.
    Lr,
    /// Every parameter trains, including gates and sub-functions of
    /// projected nodes.
    Ft,
    /// Sub-functions frozen; gates, all biases, remaining GFFN weights, and
    /// the head train. Projects the model first if needed.
    Projection,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Lr => "lr",
            Regime::Ft => "ft",
            Regime::Projection => "projection",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Regime::Lr),
            "ft" => Ok(Regime::Ft),
            "projection" | "proj" => Ok(Regime::Projection),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

/// Sets freeze flags for `regime`, projecting first for the projection regime.
pub fn apply_regime(model: Model, regime: Regime) -> Model {
    let mut model = match regime {
        Regime::Projection => project_model(model),
        _ => model,
    };
    for layer in model.layers_mut() {
        match (regime, layer) {
            (_, Layer::Head(h)) => {
                h.weights.trainable = true;
                h.bias.trainable = true;
            }
            (Regime::Lr, l) => l.params_mut().into_iter().for_each(|p| p.trainable = false),
            (Regime::Ft, l) => l.params_mut().into_iter().for_each(|p| p.trainable = true),
            (Regime::Projection, Layer::Nodes(l)) => {
                for node in &mut l.nodes {
                    match node {
                        Node::Projected(n) => {
                            n.subs.iter_mut().for_each(|s| s.weights.trainable = false);
                            n.gamma.trainable = true;
                            n.bias.trainable = true;
                        }
                        other => other.params_mut().into_iter().for_each(|p| p.trainable = true),
                    }
                }
            }
            (Regime::Projection, _) => {}
        }
    }
    model
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub layer: usize,
    pub nodes: usize,
    pub trainable: usize,
    pub frozen: usize,
}

/// Exact trainable/frozen parameter counts per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub rows: Vec<AuditRow>,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamAudit {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    /// CSV with columns `layer,nodes,trainable,frozen`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl std::fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>5} {:>6} {:>10} {:>10}", "layer", "nodes", "trainable", "frozen")?;
        for r in &self.rows {
            writeln!(f, "{:>5} {:>6} {:>10} {:>10}", r.layer, r.nodes, r.trainable, r.frozen)?;
        }
        write!(f, "{:>5} {:>6} {:>10} {:>10}", "total", "", self.trainable, self.frozen)
    }
}

pub fn count_params(model: &Model) -> ParamAudit {
    let rows: Vec<AuditRow> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let nodes = match layer {
                Layer::Nodes(l) => l.nodes.len(),
                Layer::Head(h) => h.classes,
                _ => 0,
            };
            let (mut trainable, mut frozen) = (0, 0);
            for (_, _, p) in layer.params() {
                if p.trainable {
                    trainable += p.len();
                } else {
                    frozen += p.len();
                }
            }
            AuditRow { layer: i, nodes, trainable, frozen }
        })
        .collect();
    let trainable = rows.iter().map(|r| r.trainable).sum();
    let frozen = rows.iter().map(|r| r.frozen).sum();
    ParamAudit { rows, trainable, frozen }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_backbone, ArchSpec, LayerSpec, Mode};
    use crate::nodes::{GcnnNode, GffnNode, ProductNode};
    use crate::tensor::{Activation, ChannelStack, PadMode, Shape, Tensor};

    fn conv_layer_model(d_in: usize, d_out: usize) -> Model {
        build_backbone(&ArchSpec {
            input_channels: d_in,
            input_shape: vec![4, 4],
            layers: vec![
                LayerSpec::Conv { nodes: d_out, kernel: vec![3, 3], mode: PadMode::Same, activation: Activation::Relu },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Head { classes: 2 },
            ],
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn gcnn_projects_to_frozen_subs_with_unit_gates() {
        let f = |v: [f64; 3]| Tensor::vector(v.to_vec()).unwrap();
        let gcnn =
            GcnnNode::new(vec![f([1.0, 2.0, 3.0]), f([0.5, -1.0, 0.0])], 0.3, Activation::Relu, PadMode::Same).unwrap();
        let Node::Projected(p) = project_node(&Node::Gcnn(gcnn)).unwrap() else { panic!() };
        assert_eq!(p.subs.len(), 2);
        assert!(p.subs.iter().all(|s| s.is_frozen()));
        assert_eq!(p.gammas(), &[1.0, 1.0]);
        assert!(p.gamma.trainable && p.bias.trainable);
        assert_eq!(p.b(), 0.3);
    }

    #[test]
    fn gffn_form_nodes_pass_through() {
        let n = Node::Gffn(GffnNode::new(vec![1.0, 2.0], 0.0, Activation::Relu).unwrap());
        assert_eq!(project_node(&n).unwrap(), n);
    }

    #[test]
    fn non_separable_node_cannot_be_projected() {
        let node = ProductNode { bias: 0.0, activation: Activation::Relu };
        assert!(matches!(project_function(&node), Err(Error::Projection(_))));
    }

    #[test]
    fn conv_layer_param_counts() {
        let m = apply_regime(conv_layer_model(32, 64), Regime::Ft);
        assert_eq!(count_params(&m).rows[0].trainable, 64 * 32 * 9 + 64);
        assert_eq!(count_params(&m).rows[0].trainable, 18_496);

        let p = apply_regime(m, Regime::Projection);
        let row = &count_params(&p).rows[0];
        assert_eq!(row.trainable, 64 * 32 + 64);
        assert_eq!(row.trainable, 2_112);
        assert_eq!(row.frozen, 18_432);
    }

    #[test]
    fn lr_trains_only_the_head() {
        let m = apply_regime(conv_layer_model(3, 4), Regime::Lr);
        let audit = count_params(&m);
        let head = m.head();
        assert_eq!(audit.trainable, head.weights.len() + head.bias.len());
    }

    #[test]
    fn audit_total_is_regime_invariant_up_to_gates() {
        let base = conv_layer_model(3, 4);
        let ft = count_params(&apply_regime(base.clone(), Regime::Ft));
        let lr = count_params(&apply_regime(base.clone(), Regime::Lr));
        assert_eq!(ft.total(), lr.total());
        let projected = project_model(base);
        let a = count_params(&apply_regime(projected.clone(), Regime::Ft));
        let b = count_params(&apply_regime(projected.clone(), Regime::Lr));
        let c = count_params(&apply_regime(projected, Regime::Projection));
        assert_eq!(a.total(), b.total());
        assert_eq!(b.total(), c.total());
    }

    #[test]
    fn projection_is_idempotent_and_function_preserving() {
        let m = conv_layer_model(2, 3);
        let once = project_model(m.clone());
        let twice = project_model(once.clone());
        assert_eq!(once, twice);
        let x = ChannelStack::new(
            (0..2)
                .map(|k| {
                    Tensor::new(Shape::new(vec![4, 4]).unwrap(), (0..16).map(|i| ((i * 7 + k) as f64).sin()).collect())
                        .unwrap()
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(m.forward(std::slice::from_ref(&x), Mode::Eval).unwrap(), once.forward(&[x], Mode::Eval).unwrap());
        let Layer::Nodes(l) = &once.layers()[0] else { panic!() };
        assert!(!l.homogeneous);
    }

    #[test]
    fn audit_serializes() {
        let audit = count_params(&conv_layer_model(2, 2));
        let csv = audit.to_csv_string().unwrap();
        assert!(csv.starts_with("layer,nodes,trainable,frozen\n"));
        let back: ParamAudit = serde_json::from_str(&audit.to_json().unwrap()).unwrap();
        assert_eq!(back, audit);
    }
}
