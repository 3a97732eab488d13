use super::report::{ErrorReport, LayerError};
use super::{infer_fp32, NetworkGraph, Source, Tensor};
use crate::datapath::{execute_layer_quantized, ExecOptions};
use crate::error::{Error, Result};
use crate::quantizer::{QuantizedNetwork, QuantizedTensor};

/// Per-layer results of one emulated forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedInference {
    pub input: QuantizedTensor,
    pub layers: Vec<QuantizedTensor>,
    /// Products clipped by the truncation window, per layer.
    pub saturated_products: Vec<u64>,
    pub overflow: Vec<bool>,
    pub report: Option<ErrorReport>,
}

impl QuantizedInference {
    pub fn output(&self) -> &QuantizedTensor {
        self.layers.last().unwrap_or(&self.input)
    }
}

/// Runs every layer on the emulated datapath. With a `reference` fp32 model
/// (the unmerged original), each layer output is compared with the reference
/// output divided by that tensor's normalization divisor.
pub fn infer_quantized(
    qnet: &QuantizedNetwork,
    input: &Tensor,
    opts: &ExecOptions,
    reference: Option<&NetworkGraph>,
) -> Result<QuantizedInference> {
    qnet.validate()?;
    let xq = qnet.quantize_input(input)?;
    let mut layers: Vec<QuantizedTensor> = Vec::with_capacity(qnet.layers.len());
    let mut saturated_products = Vec::with_capacity(qnet.layers.len());
    let mut overflow = Vec::with_capacity(qnet.layers.len());
    for (i, node) in qnet.topology.nodes.iter().enumerate() {
        let ins: Vec<&QuantizedTensor> = node
            .inputs
            .iter()
            .map(|s| match *s {
                Source::Input => &xq,
                Source::Layer(j) => &layers[j],
            })
            .collect();
        let exec = execute_layer_quantized(node.op, &ins, qnet.layers[i].as_ref(), opts)?;
        saturated_products.push(exec.saturated_products);
        overflow.push(exec.overflow);
        layers.push(exec.output);
    }

    let report = match reference {
        Some(net) => Some(error_report(qnet, &layers, net, input)?),
        None => None,
    };
    Ok(QuantizedInference {
        input: xq,
        layers,
        saturated_products,
        overflow,
        report,
    })
}

/// fp32 outputs of `net` divided by the normalization divisors of `qnet`.
pub fn normalized_reference(qnet: &QuantizedNetwork, net: &NetworkGraph, input: &Tensor) -> Result<Vec<Vec<f64>>> {
    let net = if net.has_batch_norm() {
        net.fold_batch_norms()?
    } else {
        net.clone()
    };
    let same = net.len() == qnet.topology.nodes.len()
        && net
            .nodes()
            .iter()
            .zip(&qnet.topology.nodes)
            .all(|(a, b)| a.op == b.op && a.inputs == b.inputs);
    if !same {
        return Err(Error::Graph("reference model topology differs from the quantized model".into()));
    }
    let acts = infer_fp32(&net, input)?;
    Ok(acts
        .layers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let d = qnet.divisors[i + 1];
            t.data.iter().map(|&v| v as f64 / d).collect()
        })
        .collect())
}

fn error_report(qnet: &QuantizedNetwork, layers: &[QuantizedTensor], net: &NetworkGraph, input: &Tensor) -> Result<ErrorReport> {
    let reference = normalized_reference(qnet, net, input)?;
    let errors = qnet
        .topology
        .nodes
        .iter()
        .zip(layers)
        .zip(&reference)
        .map(|((node, got), r)| LayerError::measure(&node.name, node.op.kind_name(), got, r))
        .collect();
    let sizes: Vec<usize> = layers.iter().map(|l| l.codes.len()).collect();
    Ok(ErrorReport::from_layers(errors, &sizes))
}
