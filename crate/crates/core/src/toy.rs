//! Seeded synthetic networks and inputs for studies and tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datapath::Activation;
use crate::netgraph::{FloatParams, NetworkGraph, Op, Shape, Source, Tensor};

pub use rand::SeedableRng;

/// Deterministic RNG used by everything in this module.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f32> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

pub fn gaussian_tensor(rng: &mut impl Rng, shape: Shape, std: f64) -> Tensor {
    Tensor {
        shape,
        data: gaussian(rng, shape.len(), std),
    }
}

pub fn gaussian_tensors(rng: &mut impl Rng, shape: Shape, std: f64, count: usize) -> Vec<Tensor> {
    (0..count).map(|_| gaussian_tensor(rng, shape, std)).collect()
}

/// He-initialized conv parameters with small Gaussian biases.
pub fn conv_params(rng: &mut impl Rng, ic: usize, oc: usize, k: usize) -> FloatParams {
    let fan_in = (ic * k * k) as f64;
    FloatParams::Affine {
        weights: gaussian(rng, oc * ic * k * k, (2.0 / fan_in).sqrt()),
        bias: gaussian(rng, oc, 0.1),
    }
}

pub fn conv(ic: usize, oc: usize, kernel: usize, stride: usize, pad: usize, activation: Activation) -> Op {
    Op::Conv2d {
        in_channels: ic,
        out_channels: oc,
        kernel,
        stride,
        pad,
        activation,
    }
}

pub fn push_conv(
    net: &mut NetworkGraph,
    rng: &mut impl Rng,
    name: &str,
    input: Source,
    ic: usize,
    oc: usize,
    k: usize,
    activation: Activation,
) -> Source {
    let op = conv(ic, oc, k, 1, k / 2, activation);
    let p = conv_params(rng, ic, oc, k);
    net.push(name, op, vec![input], p)
}

/// A single `k x k` conv over `ic x size x size` with Gaussian weights.
pub fn conv_layer(seed: u64, ic: usize, oc: usize, k: usize, size: usize) -> NetworkGraph {
    let mut r = rng(seed);
    let mut net = NetworkGraph::new(Shape::new(ic, size, size));
    push_conv(&mut net, &mut r, "conv", Source::Input, ic, oc, k, Activation::None);
    net
}

/// Small random DAG of four to six nodes with one residual add and one
/// concat: conv stem, a residual block, an optional 1x1 side conv, the
/// concat, and at most one tail (relu, pooling, conv or fc).
pub fn random_network(seed: u64) -> NetworkGraph {
    let mut r = rng(seed);
    let ic = r.gen_range(1..=4);
    let size = r.gen_range(6..=10);
    let c = r.gen_range(2..=8);
    let mut net = NetworkGraph::new(Shape::new(ic, size, size));

    let a = if r.gen_bool(0.5) { Activation::Relu } else { Activation::None };
    let stem = push_conv(&mut net, &mut r, "stem", Source::Input, ic, c, 3, a);
    let k = if r.gen_bool(0.5) { 1 } else { 3 };
    let branch = push_conv(&mut net, &mut r, "branch", stem, c, c, k, Activation::None);
    let res = net.push("add", Op::ResidualAdd, vec![stem, branch], FloatParams::None);
    let (other, c2) = if r.gen_bool(0.5) {
        let c2 = r.gen_range(1..=6);
        (push_conv(&mut net, &mut r, "side", res, c, c2, 1, Activation::Relu), c2)
    } else {
        (stem, c)
    };
    let last = net.push("cat", Op::Concat, vec![res, other], FloatParams::None);
    let shape = Shape::new(c + c2, size, size);
    match r.gen_range(0..6) {
        0 => {
            net.push("relu", Op::Relu, vec![last], FloatParams::None);
        }
        1 => {
            net.push("pool", Op::MaxPool { kernel: 2, stride: 2 }, vec![last], FloatParams::None);
        }
        2 => {
            net.push("pool", Op::AvgPool { kernel: 2, stride: 2 }, vec![last], FloatParams::None);
        }
        3 => {
            let oc = r.gen_range(2..=6);
            push_conv(&mut net, &mut r, "head", last, shape.c, oc, 3, Activation::None);
        }
        4 => {
            let outs = r.gen_range(2..=10);
            net.push(
                "fc",
                Op::FullyConnected {
                    inputs: shape.len(),
                    outputs: outs,
                    activation: Activation::None,
                },
                vec![last],
                FloatParams::Affine {
                    weights: gaussian(&mut r, outs * shape.len(), (1.0 / shape.len() as f64).sqrt()),
                    bias: gaussian(&mut r, outs, 0.1),
                },
            );
        }
        _ => {}
    }
    net
}

/// Plain chain of 3x3 convs (ReLU), widths as given, no pooling.
pub fn vgg_like(seed: u64, input: Shape, widths: &[usize]) -> NetworkGraph {
    let mut r = rng(seed);
    let mut net = NetworkGraph::new(input);
    let mut src = Source::Input;
    let mut ic = input.c;
    for (i, &oc) in widths.iter().enumerate() {
        src = push_conv(&mut net, &mut r, &format!("conv{}", i + 1), src, ic, oc, 3, Activation::Relu);
        ic = oc;
    }
    net
}

/// The five AlexNet conv layers (ungrouped) with zero weights: layer
/// geometry only, for the performance model.
pub fn alexnet_convs() -> NetworkGraph {
    let mut net = NetworkGraph::new(Shape::new(3, 227, 227));
    let layers: [(&str, usize, usize, usize, usize, usize, bool); 5] = [
        ("conv1", 3, 96, 11, 4, 0, true),
        ("conv2", 96, 256, 5, 1, 2, true),
        ("conv3", 256, 384, 3, 1, 1, false),
        ("conv4", 384, 384, 3, 1, 1, false),
        ("conv5", 384, 256, 3, 1, 1, false),
    ];
    let mut src = Source::Input;
    for (name, ic, oc, k, stride, pad, pool) in layers {
        let p = FloatParams::Affine {
            weights: vec![0.0; oc * ic * k * k],
            bias: vec![0.0; oc],
        };
        src = net.push(name, conv(ic, oc, k, stride, pad, Activation::Relu), vec![src], p);
        if pool {
            src = net.push(
                format!("pool{}", &name[4..]),
                Op::MaxPool { kernel: 3, stride: 2 },
                vec![src],
                FloatParams::None,
            );
        }
    }
    net
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_networks_validate() {
        for seed in 0..50 {
            let net = random_network(seed);
            net.validate().unwrap();
            let ops: Vec<_> = net.nodes().iter().map(|n| n.op.kind_name()).collect();
            assert!(ops.contains(&"residual_add") && ops.contains(&"concat"));
            assert!((2..=6).contains(&ops.len()));
        }
    }

    #[test]
    fn alexnet_shapes() {
        let shapes = alexnet_convs().validate().unwrap();
        assert_eq!(shapes[0], Shape::new(96, 55, 55));
        assert_eq!(*shapes.last().unwrap(), Shape::new(256, 13, 13));
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        assert_eq!(random_network(7), random_network(7));
    }
}
