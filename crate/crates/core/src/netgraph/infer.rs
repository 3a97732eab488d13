use super::{FloatParams, NetworkGraph, Op, Shape, Source, Tensor};
use crate::datapath::Activation;
use crate::error::{Error, Result};

/// Per-node outputs of one forward pass, plus the input that produced them.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: Tensor,
    pub layers: Vec<Tensor>,
}

impl Activations {
    pub fn get(&self, src: Source) -> &Tensor {
        match src {
            Source::Input => &self.input,
            Source::Layer(i) => &self.layers[i],
        }
    }

    /// Tensor slot `i` with slot 0 the input.
    pub fn slot(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.layers[i - 1]
        }
    }

    pub fn output(&self) -> &Tensor {
        self.layers.last().unwrap_or(&self.input)
    }
}

/// fp32 forward pass. Dot products accumulate in f64 and round once to f32.
pub fn infer_fp32(net: &NetworkGraph, input: &Tensor) -> Result<Activations> {
    let shapes = net.validate()?;
    if input.shape != net.input_shape() {
        return Err(Error::Shape(format!(
            "input is {}, network expects {}",
            input.shape,
            net.input_shape()
        )));
    }
    let mut layers: Vec<Tensor> = Vec::with_capacity(net.len());
    for (i, node) in net.nodes().iter().enumerate() {
        let get = |s: Source| match s {
            Source::Input => input,
            Source::Layer(j) => &layers[j],
        };
        let ins: Vec<&Tensor> = node.inputs.iter().map(|&s| get(s)).collect();
        let out = eval_node(node.op, &net.params[i], &ins, shapes[i]);
        layers.push(out);
    }
    Ok(Activations {
        input: input.clone(),
        layers,
    })
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::None => v,
    }
}

pub(crate) fn eval_node(op: Op, params: &FloatParams, ins: &[&Tensor], out_shape: Shape) -> Tensor {
    let mut out = Tensor::zeros(out_shape);
    match op {
        Op::Conv2d {
            in_channels,
            kernel,
            stride,
            pad,
            activation,
            ..
        } => {
            let (w, b) = params.affine().expect("validated conv params");
            let x = ins[0];
            let s = x.shape;
            for oc in 0..out_shape.c {
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let mut acc = b[oc] as f64;
                        for ic in 0..in_channels {
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= s.w as isize {
                                        continue;
                                    }
                                    let wi = ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                    acc += w[wi] as f64 * x.at(ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                        out.data[out_shape.index(oc, oy, ox)] = act(activation, acc) as f32;
                    }
                }
            }
        }
        Op::FullyConnected {
            inputs,
            activation,
            ..
        } => {
            let (w, b) = params.affine().expect("validated fc params");
            let x = &ins[0].data;
            for (o, slot) in out.data.iter_mut().enumerate() {
                let row = &w[o * inputs..(o + 1) * inputs];
                let acc: f64 = row
                    .iter()
                    .zip(x)
                    .map(|(&w, &x)| w as f64 * x as f64)
                    .sum::<f64>()
                    + b[o] as f64;
                *slot = act(activation, acc) as f32;
            }
        }
        Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
            let x = ins[0];
            let is_max = matches!(op, Op::MaxPool { .. });
            for c in 0..out_shape.c {
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let window = (0..kernel).flat_map(|ky| {
                            (0..kernel).map(move |kx| (oy * stride + ky, ox * stride + kx))
                        });
                        let v = if is_max {
                            window.map(|(y, xx)| x.at(c, y, xx)).fold(f32::NEG_INFINITY, f32::max)
                        } else {
                            let sum: f64 = window.map(|(y, xx)| x.at(c, y, xx) as f64).sum();
                            (sum / (kernel * kernel) as f64) as f32
                        };
                        out.data[out_shape.index(c, oy, ox)] = v;
                    }
                }
            }
        }
        Op::Relu => {
            for (o, &v) in out.data.iter_mut().zip(&ins[0].data) {
                *o = v.max(0.0);
            }
        }
        Op::ResidualAdd => {
            for ((o, &a), &b) in out.data.iter_mut().zip(&ins[0].data).zip(&ins[1].data) {
                *o = a + b;
            }
        }
        Op::Concat => {
            let mut off = 0;
            for t in ins {
                out.data[off..off + t.data.len()].copy_from_slice(&t.data);
                off += t.data.len();
            }
        }
        Op::BatchNorm { eps, .. } => {
            let FloatParams::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } = params
            else {
                unreachable!("validated batch norm params")
            };
            let plane = out_shape.h * out_shape.w;
            for c in 0..out_shape.c {
                let scale = gamma[c] as f64 / (var[c] as f64 + eps as f64).sqrt();
                for i in c * plane..(c + 1) * plane {
                    out.data[i] = ((ins[0].data[i] as f64 - mean[c] as f64) * scale + beta[c] as f64) as f32;
                }
            }
        }
    }
    out
}
