//! Post-training quantization: normalize every layer output by its second
//! moment, fold the normalization into the weights, then quantize weights and
//! activations to FP8 with power-of-two scales found by MSE search.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapath::{unit_exp, Activation};
use crate::error::{Error, Result};
use crate::minifloat::{pow2, Code8, Fp8Format};
use crate::netgraph::{infer_fp32, Activations, FloatParams, NetworkGraph, Op, Shape, Tensor, Topology};

/// Candidate scale exponents searched by [`search_scale`]: `-10..10`.
pub const SCALE_SEARCH_RANGE: std::ops::Range<i32> = -10..10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// Divide by `sqrt(E(O^2))`.
    #[default]
    SecondMoment,
    /// Divide by the standard deviation. The mean is recorded but not
    /// subtracted, see [`normalization_divisors`].
    MeanStd,
}

impl fmt::Display for StatsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatsMode::SecondMoment => "second_moment",
            StatsMode::MeanStd => "mean_std",
        })
    }
}

impl FromStr for StatsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second_moment" => Ok(StatsMode::SecondMoment),
            "mean_std" => Ok(StatsMode::MeanStd),
            _ => Err(Error::Unsupported(format!("stats mode {s:?}"))),
        }
    }
}

/// Statistics of one tensor over the calibration batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LayerStats {
    pub second_moment: f64,
    pub mean: f64,
    pub std: f64,
    /// Elements seen: `C*H*W` per image times images.
    pub count: usize,
}

impl LayerStats {
    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for t in tensors {
            for &v in &t.data {
                let v = v as f64;
                sum += v;
                sq += v * v;
            }
            n += t.data.len();
        }
        Self::from_sums(sum, sq, n)
    }

    fn from_sums(sum: f64, sq: f64, n: usize) -> Self {
        if n == 0 {
            return LayerStats::default();
        }
        let mean = sum / n as f64;
        let second_moment = sq / n as f64;
        LayerStats {
            second_moment,
            mean,
            std: (second_moment - mean * mean).max(0.0).sqrt(),
            count: n,
        }
    }

    /// Count-weighted combination, as if all elements were one tensor.
    pub fn pooled<'a>(stats: impl IntoIterator<Item = &'a LayerStats>) -> Self {
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0);
        for s in stats {
            sum += s.mean * s.count as f64;
            sq += s.second_moment * s.count as f64;
            n += s.count;
        }
        Self::from_sums(sum, sq, n)
    }

    pub fn divisor(&self, mode: StatsMode) -> f64 {
        match mode {
            StatsMode::SecondMoment => self.second_moment.sqrt(),
            StatsMode::MeanStd => self.std,
        }
    }
}

/// Statistics of every tensor slot: slot 0 is the network input, slot
/// `i + 1` the output of node `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkStats {
    pub mode: StatsMode,
    pub images: usize,
    pub tensors: Vec<LayerStats>,
}

impl NetworkStats {
    pub fn layer(&self, i: usize) -> &LayerStats {
        &self.tensors[i + 1]
    }

    /// Stats that make every divisor 1.
    pub fn identity(net: &NetworkGraph) -> Self {
        let one = LayerStats {
            second_moment: 1.0,
            mean: 0.0,
            std: 1.0,
            count: 1,
        };
        NetworkStats {
            mode: StatsMode::SecondMoment,
            images: 1,
            tensors: vec![one; net.len() + 1],
        }
    }
}

/// `(1/N) sum x^2`.
pub fn second_moment(values: &[f32]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    Ok(values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / values.len() as f64)
}

/// Runs the fp32 network over the first `batch` calibration images and pools
/// per-tensor statistics across them.
pub fn collect_stats(net: &NetworkGraph, calib: &[Tensor], mode: StatsMode, batch: usize) -> Result<NetworkStats> {
    let runs = calibration_runs(net, calib, batch)?;
    let slots = net.len() + 1;
    let tensors = (0..slots)
        .map(|i| LayerStats::from_tensors(runs.iter().map(|a| a.slot(i))))
        .collect();
    Ok(NetworkStats {
        mode,
        images: runs.len(),
        tensors,
    })
}

fn calibration_runs(net: &NetworkGraph, calib: &[Tensor], batch: usize) -> Result<Vec<Activations>> {
    if calib.is_empty() || batch == 0 {
        return Err(Error::Unsupported("empty calibration set".into()));
    }
    if calib.len() < batch {
        return Err(Error::Unsupported(format!(
            "calibration batch of {batch} requested, only {} images supplied",
            calib.len()
        )));
    }
    calib[..batch].par_iter().map(|x| infer_fp32(net, x)).collect()
}

/// Groups tensor slots that must share one normalization divisor: ReLU and
/// pooling preserve their input's divisor, residual adds and concats force
/// all operands and the result onto one divisor.
pub fn scale_classes(topology: &Topology) -> Vec<usize> {
    let n = topology.nodes.len() + 1;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, node) in topology.nodes.iter().enumerate() {
        let out = i + 1;
        let linked = match node.op {
            Op::Relu | Op::MaxPool { .. } | Op::AvgPool { .. } | Op::ResidualAdd | Op::Concat => true,
            Op::Conv2d { .. } | Op::FullyConnected { .. } | Op::BatchNorm { .. } => false,
        };
        if linked {
            for s in &node.inputs {
                let (a, b) = (find(&mut parent, s.tensor_index()), find(&mut parent, out));
                parent[a] = b;
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Per-slot divisors `d` such that the merged network computes `O / d` for
/// every tensor.
///
/// The network input keeps `d = 1`. Within a class, the divisor comes from the
/// pooled statistics of the join outputs if the class has a residual add or
/// concat, otherwise from the conv/fc output that starts the class.
pub fn normalization_divisors(net: &NetworkGraph, stats: &NetworkStats) -> Result<Vec<f64>> {
    if net.has_batch_norm() {
        return Err(Error::Graph("fold batch norms before normalizing".into()));
    }
    let slots = net.len() + 1;
    if stats.tensors.len() != slots {
        return Err(Error::Graph(format!(
            "stats cover {} tensors, network has {slots}",
            stats.tensors.len()
        )));
    }
    let class = scale_classes(&net.topology);
    let mut divisors = vec![f64::NAN; slots];
    for root in 0..slots {
        let members: Vec<usize> = (0..slots).filter(|&i| class[i] == root).collect();
        if members.is_empty() {
            continue;
        }
        let d = if members.contains(&0) {
            1.0
        } else {
            let joins: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| matches!(net.nodes()[i - 1].op, Op::ResidualAdd | Op::Concat))
                .collect();
            let anchors = if joins.is_empty() {
                members
                    .iter()
                    .copied()
                    .filter(|&i| net.nodes()[i - 1].op.is_parametric())
                    .collect()
            } else {
                joins
            };
            let pooled = LayerStats::pooled(anchors.iter().map(|&i| &stats.tensors[i]));
            let d = pooled.divisor(stats.mode);
            if !(d > 0.0 && d.is_finite()) {
                let layer = anchors
                    .first()
                    .map(|&i| net.nodes()[i - 1].name.clone())
                    .unwrap_or_default();
                return Err(Error::DegenerateLayer {
                    layer,
                    what: match stats.mode {
                        StatsMode::SecondMoment => "second moment",
                        StatsMode::MeanStd => "standard deviation",
                    },
                });
            }
            d
        };
        for m in members {
            divisors[m] = d;
        }
    }
    Ok(divisors)
}

/// Folds per-slot divisors into conv/fc parameters: `W * d_in / d_out` and
/// `b / d_out`.
pub fn merge_with_divisors(net: &NetworkGraph, divisors: &[f64]) -> Result<NetworkGraph> {
    net.validate()?;
    let mut merged = net.clone();
    for (i, node) in net.nodes().iter().enumerate() {
        if !node.op.is_parametric() {
            continue;
        }
        let d_in = divisors[node.inputs[0].tensor_index()];
        let d_out = divisors[i + 1];
        if let FloatParams::Affine { weights, bias } = &mut merged.params[i] {
            let ws = d_in / d_out;
            for w in weights.iter_mut() {
                *w = (*w as f64 * ws) as f32;
            }
            for b in bias.iter_mut() {
                *b = (*b as f64 / d_out) as f32;
            }
        }
    }
    Ok(merged)
}

pub fn merge_normalization(net: &NetworkGraph, stats: &NetworkStats) -> Result<NetworkGraph> {
    merge_with_divisors(net, &normalization_divisors(net, stats)?)
}

/// Mean squared error of quantizing `values` at scale exponent `h`.
pub fn scale_mse(values: &[f32], fmt: Fp8Format, h: i32) -> f64 {
    let up = pow2(h);
    let down = pow2(-h);
    let table = fmt.decode_table();
    let sum: f64 = values
        .iter()
        .map(|&v| {
            let x = v as f64;
            let c = fmt.encode(x * up).expect("finite tensor values");
            let e = x - table[c.0 as usize] * down;
            e * e
        })
        .sum();
    sum / values.len() as f64
}

/// MSE-optimal power-of-two scale exponent over [`SCALE_SEARCH_RANGE`].
///
/// Ties go to the exponent closest to zero (then the smaller one), so data
/// that is already exactly representable keeps `h_s = 0`.
pub fn search_scale(values: &[f32], fmt: Fp8Format) -> Result<i32> {
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(*v as f64));
    }
    if values.iter().all(|&v| v == 0.0) {
        return Ok(0);
    }
    let mses: Vec<(i32, f64)> = SCALE_SEARCH_RANGE
        .into_par_iter()
        .map(|h| (h, scale_mse(values, fmt, h)))
        .collect();
    let best = mses
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.abs().cmp(&b.0.abs())).then(a.0.cmp(&b.0)))
        .expect("non-empty search range");
    Ok(best.0)
}

/// 16-bit two's-complement fixed-point biases sharing one binary point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedBias {
    pub values: Vec<i16>,
    pub frac_bits: i32,
}

impl QuantizedBias {
    pub fn dequantize(&self) -> Vec<f64> {
        let s = pow2(-self.frac_bits);
        self.values.iter().map(|&v| v as f64 * s).collect()
    }
}

/// Round to nearest (ties even) at `2^-frac_bits`, saturating to `±(2^15 - 1)`.
pub fn quantize_bias(values: &[f32], frac_bits: i32) -> QuantizedBias {
    let s = pow2(frac_bits);
    let lim = i16::MAX as f64;
    QuantizedBias {
        values: values
            .iter()
            .map(|&v| (v as f64 * s).round_ties_even().clamp(-lim, lim) as i16)
            .collect(),
        frac_bits,
    }
}

/// Finest binary point at or below `max_frac_bits` that holds every value
/// without saturating.
pub fn bias_frac_bits(values: &[f32], max_frac_bits: i32) -> i32 {
    let max = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if max == 0.0 {
        return max_frac_bits;
    }
    let mut fb = max_frac_bits;
    while fb > -64 && (max * pow2(fb)).round_ties_even() > i16::MAX as f64 {
        fb -= 1;
    }
    fb
}

/// FP8 codes with one power-of-two scale: value = `decode(code) * 2^-h_s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedTensor {
    pub codes: Vec<Code8>,
    pub shape: Shape,
    pub format: Fp8Format,
    pub h_s: i32,
}

impl QuantizedTensor {
    pub fn quantize(t: &Tensor, format: Fp8Format, h_s: i32) -> Result<Self> {
        let codes = t
            .data
            .iter()
            .map(|&v| format.quantize_value(v as f64, h_s))
            .collect::<Result<_>>()?;
        Ok(QuantizedTensor {
            codes,
            shape: t.shape,
            format,
            h_s,
        })
    }

    pub fn zeros(shape: Shape, format: Fp8Format, h_s: i32) -> Self {
        QuantizedTensor {
            codes: vec![Code8::ZERO; shape.len()],
            shape,
            format,
            h_s,
        }
    }

    /// Exact dequantized values.
    pub fn values(&self) -> Vec<f64> {
        let table = self.format.decode_table();
        let s = pow2(-self.h_s);
        self.codes.iter().map(|c| table[c.0 as usize] * s).collect()
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.values().into_iter().map(|v| v as f32).collect(),
        }
    }
}

/// Quantized parameters of one conv/fc layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLayer {
    pub h_w: i32,
    pub weights: Vec<Code8>,
    pub bias: QuantizedBias,
    /// Binary point of 16-bit partial sums spilled to the output buffer:
    /// one stored unit weighs `2^spill_exp` in the normalized domain.
    pub spill_exp: i32,
}

/// A merged, quantized network ready for the emulated datapath.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub format: Fp8Format,
    /// Activation scale exponent shared by every tensor in the network.
    pub h_act: i32,
    pub topology: Topology,
    /// `Some` exactly for conv/fc nodes.
    pub layers: Vec<Option<QuantizedLayer>>,
    /// Normalization divisor of every tensor slot (slot 0 = input).
    pub divisors: Vec<f64>,
}

impl QuantizedNetwork {
    pub fn quantize_input(&self, input: &Tensor) -> Result<QuantizedTensor> {
        if input.shape != self.topology.input_shape {
            return Err(Error::Shape(format!(
                "input is {}, network expects {}",
                input.shape, self.topology.input_shape
            )));
        }
        QuantizedTensor::quantize(input, self.format, self.h_act)
    }

    /// Activation scale of every tensor slot. All equal by construction.
    pub fn activation_scales(&self) -> Vec<i32> {
        vec![self.h_act; self.topology.nodes.len() + 1]
    }

    pub fn validate(&self) -> Result<Vec<Shape>> {
        let shapes = self.topology.output_shapes()?;
        if self.layers.len() != self.topology.nodes.len() || self.divisors.len() != self.layers.len() + 1 {
            return Err(Error::Graph("quantized layer table does not match topology".into()));
        }
        for (node, q) in self.topology.nodes.iter().zip(&self.layers) {
            match (node.op.param_lens(), q) {
                (Some((w, b)), Some(q)) if q.weights.len() == w && q.bias.values.len() == b => {}
                (None, None) if !matches!(node.op, Op::BatchNorm { .. }) => {}
                _ => {
                    return Err(Error::Graph(format!(
                        "quantized parameters of node {:?} do not match its op",
                        node.name
                    )))
                }
            }
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantReport {
    pub name: String,
    pub kind: String,
    pub divisor: f64,
    pub h_w: Option<i32>,
    pub weight_mse: Option<f64>,
    pub bias_frac_bits: Option<i32>,
    pub activation_h_s: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationReport {
    pub format: Fp8Format,
    pub stats_mode: StatsMode,
    pub calibration_images: usize,
    pub h_act: i32,
    pub activation_mse: f64,
    pub layers: Vec<LayerQuantReport>,
}

/// The full flow: merge normalization, search a weight scale per layer and
/// one activation scale for the whole network, quantize biases, and pick the
/// partial-sum spill point of every layer.
///
/// `calib` must be the images `stats` was collected from (the first
/// `stats.images` are used).
pub fn quantize_network(
    net: &NetworkGraph,
    stats: &NetworkStats,
    calib: &[Tensor],
    fmt: Fp8Format,
) -> Result<(QuantizedNetwork, QuantizationReport)> {
    let divisors = normalization_divisors(net, stats)?;
    let merged = merge_with_divisors(net, &divisors)?;
    let runs = calibration_runs(&merged, calib, stats.images)?;

    let pooled: Vec<f32> = runs
        .iter()
        .flat_map(|a| std::iter::once(&a.input).chain(&a.layers))
        .flat_map(|t| t.data.iter().copied())
        .collect();
    let h_act = search_scale(&pooled, fmt)?;
    let activation_mse = scale_mse(&pooled, fmt, h_act);

    let acc_frac_bits = -unit_exp(fmt);
    let mut layers = Vec::with_capacity(net.len());
    let mut report_layers = Vec::with_capacity(net.len());
    for (i, node) in merged.nodes().iter().enumerate() {
        let mut entry = LayerQuantReport {
            name: node.name.clone(),
            kind: node.op.kind_name().to_string(),
            divisor: divisors[i + 1],
            h_w: None,
            weight_mse: None,
            bias_frac_bits: None,
            activation_h_s: h_act,
        };
        let q = match merged.params[i].affine() {
            Some((w, b)) => {
                let h_w = search_scale(w, fmt)?;
                let weights = w
                    .iter()
                    .map(|&v| fmt.quantize_value(v as f64, h_w))
                    .collect::<Result<_>>()?;
                let frac_bits = bias_frac_bits(b, acc_frac_bits);
                let peak = peak_dot_product(&merged, i, &runs);
                entry.h_w = Some(h_w);
                entry.weight_mse = Some(scale_mse(w, fmt, h_w));
                entry.bias_frac_bits = Some(frac_bits);
                Some(QuantizedLayer {
                    h_w,
                    weights,
                    bias: quantize_bias(b, frac_bits),
                    spill_exp: spill_exp_for(peak),
                })
            }
            None => None,
        };
        layers.push(q);
        report_layers.push(entry);
    }

    let qnet = QuantizedNetwork {
        format: fmt,
        h_act,
        topology: merged.topology.clone(),
        layers,
        divisors: divisors.clone(),
    };
    let report = QuantizationReport {
        format: fmt,
        stats_mode: stats.mode,
        calibration_images: stats.images,
        h_act,
        activation_mse,
        layers: report_layers,
    };
    Ok((qnet, report))
}

/// Largest `|W . x|` (no bias, no activation) of node `i` over the runs.
fn peak_dot_product(merged: &NetworkGraph, i: usize, runs: &[Activations]) -> f64 {
    let node = &merged.nodes()[i];
    let op = match node.op {
        Op::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            ..
        } => Op::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            activation: Activation::None,
        },
        Op::FullyConnected { inputs, outputs, .. } => Op::FullyConnected {
            inputs,
            outputs,
            activation: Activation::None,
        },
        other => other,
    };
    let (w, b) = merged.params[i].affine().expect("parametric node");
    let params = FloatParams::Affine {
        weights: w.to_vec(),
        bias: vec![0.0; b.len()],
    };
    runs.iter()
        .map(|a| {
            let x = a.get(node.inputs[0]);
            let out = crate::netgraph::eval_node(op, &params, &[x], a.layers[i].shape);
            out.data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
        })
        .fold(0.0, f64::max)
}

/// Binary point for 16-bit spills with 2x headroom over `peak`.
fn spill_exp_for(peak: f64) -> i32 {
    if peak <= 0.0 || !peak.is_finite() {
        return -15;
    }
    (2.0 * peak).log2().ceil() as i32 - 15
}
