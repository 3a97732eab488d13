//! CNN graphs: topology, fp32 parameters, reference inference, quantized
//! inference and the on-disk containers.

mod container;
mod infer;
mod quantized;
mod report;

use serde::{Deserialize, Serialize};

use crate::datapath::Activation;
use crate::error::{Error, Result};

pub use container::{load_model, load_qmodel, read_model, read_qmodel, save_model, save_qmodel, write_model, write_qmodel};
pub use container::{load_tensors, read_tensors, save_tensors, write_tensors};
pub(crate) use container::write_atomic;
pub use infer::{infer_fp32, Activations};
pub(crate) use infer::eval_node;
pub use quantized::{infer_quantized, normalized_reference, QuantizedInference};
pub use report::{relative_l2_pct, ErrorReport, LayerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Dense CHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(c, y, x)]
    }
}

/// Where a node reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Input,
    Layer(usize),
}

impl Source {
    /// Index into a "tensor list" where slot 0 is the network input.
    pub fn tensor_index(self) -> usize {
        match self {
            Source::Input => 0,
            Source::Layer(i) => i + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    ResidualAdd,
    Concat,
    BatchNorm {
        channels: usize,
        eps: f32,
    },
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::FullyConnected { .. } => "fc",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool { .. } => "avgpool",
            Op::Relu => "relu",
            Op::ResidualAdd => "residual_add",
            Op::Concat => "concat",
            Op::BatchNorm { .. } => "batchnorm",
        }
    }

    /// Conv and fc: the layers that own weights and run on the PE array.
    pub fn is_parametric(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::FullyConnected { .. })
    }

    /// Weight and bias element counts for parametric layers.
    pub fn param_lens(&self) -> Option<(usize, usize)> {
        match *self {
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((out_channels * in_channels * kernel * kernel, out_channels)),
            Op::FullyConnected {
                inputs, outputs, ..
            } => Some((inputs * outputs, outputs)),
            _ => None,
        }
    }

    /// Output shape for the given operand shapes.
    pub fn output_shape(&self, ins: &[Shape]) -> Result<Shape> {
        let node = Node {
            name: self.kind_name().to_string(),
            op: *self,
            inputs: Vec::new(),
        };
        infer_shape(&node, ins)
    }

    pub fn activation(&self) -> Activation {
        match *self {
            Op::Conv2d { activation, .. } | Op::FullyConnected { activation, .. } => activation,
            _ => Activation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<Source>,
}

/// Layer DAG without parameters. Nodes are stored in topological order and
/// may only read from the network input or earlier nodes; the last node is
/// the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub input_shape: Shape,
    pub nodes: Vec<Node>,
}

impl Topology {
    pub fn new(input_shape: Shape) -> Self {
        Topology {
            input_shape,
            nodes: Vec::new(),
        }
    }

    /// Validates wiring and returns every node's output shape.
    pub fn output_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        if self.input_shape.is_empty() {
            return Err(Error::Graph("empty input shape".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let mut ins = Vec::with_capacity(node.inputs.len());
            for src in &node.inputs {
                ins.push(match *src {
                    Source::Input => self.input_shape,
                    Source::Layer(j) if j < i => shapes[j],
                    Source::Layer(j) => {
                        return Err(Error::Graph(format!(
                            "node {:?} reads node {j}, which is not earlier in the graph",
                            node.name
                        )))
                    }
                });
            }
            shapes.push(infer_shape(node, &ins)?);
        }
        Ok(shapes)
    }

    pub fn shape_of(&self, shapes: &[Shape], src: Source) -> Shape {
        match src {
            Source::Input => self.input_shape,
            Source::Layer(i) => shapes[i],
        }
    }

    /// For each tensor slot (0 = input, i+1 = node i), the nodes reading it.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len() + 1];
        for (i, n) in self.nodes.iter().enumerate() {
            for s in &n.inputs {
                out[s.tensor_index()].push(i);
            }
        }
        out
    }

    pub fn output_index(&self) -> Option<usize> {
        self.nodes.len().checked_sub(1)
    }
}

fn infer_shape(node: &Node, ins: &[Shape]) -> Result<Shape> {
    let err = |msg: String| Err(Error::Shape(format!("node {:?}: {msg}", node.name)));
    let single = || -> Result<Shape> {
        match ins {
            [s] => Ok(*s),
            _ => Err(Error::Shape(format!(
                "node {:?} takes exactly one input, got {}",
                node.name,
                ins.len()
            ))),
        }
    };
    match node.op {
        Op::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            ..
        } => {
            let s = single()?;
            if s.c != in_channels {
                return err(format!("expects {in_channels} channels, input has {}", s.c));
            }
            if kernel == 0 || stride == 0 || out_channels == 0 {
                return err("zero kernel, stride or channel count".into());
            }
            if s.h + 2 * pad < kernel || s.w + 2 * pad < kernel {
                return err(format!("kernel {kernel} larger than padded input {s}"));
            }
            Ok(Shape::new(
                out_channels,
                (s.h + 2 * pad - kernel) / stride + 1,
                (s.w + 2 * pad - kernel) / stride + 1,
            ))
        }
        Op::FullyConnected {
            inputs, outputs, ..
        } => {
            let s = single()?;
            if s.len() != inputs || outputs == 0 {
                return err(format!("expects {inputs} inputs, got {}", s.len()));
            }
            Ok(Shape::new(outputs, 1, 1))
        }
        Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
            let s = single()?;
            if kernel == 0 || stride == 0 || s.h < kernel || s.w < kernel {
                return err(format!("pool {kernel}/{stride} does not fit input {s}"));
            }
            Ok(Shape::new(
                s.c,
                (s.h - kernel) / stride + 1,
                (s.w - kernel) / stride + 1,
            ))
        }
        Op::Relu => single(),
        Op::BatchNorm { channels, .. } => {
            let s = single()?;
            if s.c != channels {
                return err(format!("expects {channels} channels, input has {}", s.c));
            }
            Ok(s)
        }
        Op::ResidualAdd => match ins {
            [a, b] if a == b => Ok(*a),
            [a, b] => err(format!("operand shapes differ: {a} vs {b}")),
            _ => err(format!("takes two inputs, got {}", ins.len())),
        },
        Op::Concat => {
            let first = ins
                .first()
                .copied()
                .ok_or_else(|| Error::Shape(format!("node {:?}: concat of nothing", node.name)))?;
            let mut c = 0;
            for s in ins {
                if (s.h, s.w) != (first.h, first.w) {
                    return err(format!("spatial sizes differ: {first} vs {s}"));
                }
                c += s.c;
            }
            Ok(Shape::new(c, first.h, first.w))
        }
    }
}

/// fp32 parameters of one node.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum FloatParams {
    #[default]
    None,
    /// Conv weights are `[oc][ic][ky][kx]`, fc weights `[out][in]`.
    Affine { weights: Vec<f32>, bias: Vec<f32> },
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
}

impl FloatParams {
    pub fn affine(&self) -> Option<(&[f32], &[f32])> {
        match self {
            FloatParams::Affine { weights, bias } => Some((weights, bias)),
            _ => None,
        }
    }
}

/// A topology with fp32 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub topology: Topology,
    pub params: Vec<FloatParams>,
}

impl NetworkGraph {
    pub fn new(input_shape: Shape) -> Self {
        NetworkGraph {
            topology: Topology::new(input_shape),
            params: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> Shape {
        self.topology.input_shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.topology.nodes
    }

    pub fn len(&self) -> usize {
        self.topology.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topology.nodes.is_empty()
    }

    /// Appends a node and returns its source handle.
    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<Source>, params: FloatParams) -> Source {
        self.topology.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
        });
        self.params.push(params);
        Source::Layer(self.topology.nodes.len() - 1)
    }

    /// Checks wiring, shapes and parameter sizes; returns output shapes.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        if self.params.len() != self.topology.nodes.len() {
            return Err(Error::Graph(format!(
                "{} parameter sets for {} nodes",
                self.params.len(),
                self.topology.nodes.len()
            )));
        }
        let shapes = self.topology.output_shapes()?;
        for (node, p) in self.topology.nodes.iter().zip(&self.params) {
            let ok = match (&node.op, p) {
                (op, FloatParams::Affine { weights, bias }) if op.is_parametric() => {
                    op.param_lens() == Some((weights.len(), bias.len()))
                }
                (Op::BatchNorm { channels, .. }, FloatParams::BatchNorm { gamma, beta, mean, var }) => {
                    [gamma, beta, mean, var].iter().all(|v| v.len() == *channels)
                }
                (op, FloatParams::None) => {
                    !op.is_parametric() && !matches!(op, Op::BatchNorm { .. })
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Graph(format!(
                    "parameters of node {:?} do not match its {} op",
                    node.name,
                    node.op.kind_name()
                )));
            }
        }
        Ok(shapes)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.nodes().iter().any(|n| matches!(n.op, Op::BatchNorm { .. }))
    }

    /// Folds every batch-norm node into the conv feeding it and removes it.
    ///
    /// The conv must feed only the batch norm and must not carry a fused
    /// activation, otherwise the fold would change other consumers.
    pub fn fold_batch_norms(&self) -> Result<NetworkGraph> {
        self.validate()?;
        let consumers = self.topology.consumers();
        let mut params = self.params.clone();
        // remap[i] = where readers of node i should read from after folding
        let mut remap: Vec<Source> = (0..self.len()).map(Source::Layer).collect();
        let mut drop = vec![false; self.len()];
        for (i, node) in self.nodes().iter().enumerate() {
            let Op::BatchNorm { eps, .. } = node.op else {
                continue;
            };
            let Some(Source::Layer(conv)) = node.inputs.first().copied() else {
                return Err(Error::Graph(format!(
                    "batch norm {:?} must follow a conv",
                    node.name
                )));
            };
            let conv_op = self.nodes()[conv].op;
            let Op::Conv2d {
                in_channels,
                kernel,
                activation: Activation::None,
                ..
            } = conv_op
            else {
                return Err(Error::Graph(format!(
                    "batch norm {:?} must follow a conv without fused activation",
                    node.name
                )));
            };
            if consumers[conv + 1].len() != 1 {
                return Err(Error::Graph(format!(
                    "conv {:?} feeds more than its batch norm",
                    self.nodes()[conv].name
                )));
            }
            let FloatParams::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } = &self.params[i]
            else {
                unreachable!("validated above")
            };
            let FloatParams::Affine { weights, bias } = &mut params[conv] else {
                unreachable!("validated above")
            };
            let per_oc = in_channels * kernel * kernel;
            for oc in 0..gamma.len() {
                let scale = gamma[oc] as f64 / (var[oc] as f64 + eps as f64).sqrt();
                for w in &mut weights[oc * per_oc..(oc + 1) * per_oc] {
                    *w = (*w as f64 * scale) as f32;
                }
                bias[oc] = ((bias[oc] as f64 - mean[oc] as f64) * scale + beta[oc] as f64) as f32;
            }
            remap[i] = remap[conv];
            drop[i] = true;
        }

        let mut out = NetworkGraph::new(self.input_shape());
        let mut new_index = vec![usize::MAX; self.len()];
        for (i, node) in self.nodes().iter().enumerate() {
            if drop[i] {
                continue;
            }
            let inputs = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => Source::Input,
                    Source::Layer(j) => match remap[j] {
                        Source::Layer(k) => Source::Layer(new_index[k]),
                        Source::Input => Source::Input,
                    },
                })
                .collect();
            out.push(node.name.clone(), node.op, inputs, params[i].clone());
            new_index[i] = out.len() - 1;
        }
        out.validate()?;
        Ok(out)
    }

    /// Multiply-accumulate count of the conv and fc layers.
    pub fn mac_count(&self) -> Result<u64> {
        let shapes = self.topology.output_shapes()?;
        Ok(self
            .nodes()
            .iter()
            .zip(&shapes)
            .map(|(n, s)| match n.op {
                Op::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => (s.len() * in_channels * kernel * kernel) as u64,
                Op::FullyConnected { inputs, outputs, .. } => (inputs * outputs) as u64,
                _ => 0,
            })
            .sum())
    }
}
