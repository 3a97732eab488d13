//! Little-endian binary containers.
//!
//! fp32 model:
//!
//! ```text
//! "PHNX" u16:version u32:c u32:h u32:w
//! "TOPO" u32:len  u32:nodes  { u32:record_len record }*
//! "BLOB" u32:len  { u8:kind arrays }*
//! ```
//!
//! Quantized model:
//!
//! ```text
//! "PHNQ" u16:version u8:len format-string i32:h_act
//! "TOPO" ...  "QLAY" u32:len {..}*  "NORM" u32:len u32:n f64*
//! ```
//!
//! Tensor files (calibration sets, inputs): `"PHNI" u16:version u32:count
//! u32:c u32:h u32:w f32*`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{FloatParams, NetworkGraph, Node, Op, Shape, Source, Tensor, Topology};
use crate::datapath::Activation;
use crate::error::{Error, Result};
use crate::minifloat::{Code8, Fp8Format};
use crate::quantizer::{QuantizedBias, QuantizedLayer, QuantizedNetwork};

const MODEL_MAGIC: &[u8; 4] = b"PHNX";
const QMODEL_MAGIC: &[u8; 4] = b"PHNQ";
const TENSOR_MAGIC: &[u8; 4] = b"PHNI";
const VERSION: u16 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("container lengths fit in u32"));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn f32s(&mut self, v: &[f32]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn shape(&mut self, s: Shape) {
        self.len(s.c);
        self.len(s.h);
        self.len(s.w);
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.bytes(tag);
        self.len(body.0.len());
        self.bytes(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Reader { buf, pos: 0, section }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.section, self.pos, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "unexpected end of data: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    /// A length that must be payable from the remaining bytes.
    fn count(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            self.pos -= 4;
            return Err(self.err(format!("length {n} exceeds the remaining data")));
        }
        Ok(n)
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.count(4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
    fn shape(&mut self) -> Result<Shape> {
        Ok(Shape::new(self.usize()?, self.usize()?, self.usize()?))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            self.pos -= 4;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let v = self.u16()?;
        if v != VERSION {
            self.pos -= 2;
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// Reads a tagged section and returns a reader over its body; offsets in
    /// errors stay absolute.
    fn section(&mut self, tag: &[u8; 4], name: &'static str) -> Result<Reader<'a>> {
        if self.buf.len() == self.pos {
            return Err(Error::parse(name, self.pos, "missing section"));
        }
        let got = self.take(4).map_err(|_| Error::parse(name, self.pos, "missing section"))?;
        if got != tag {
            return Err(Error::parse(
                name,
                self.pos - 4,
                format!("expected section tag {:?}, found {:?}", String::from_utf8_lossy(tag), String::from_utf8_lossy(got)),
            ));
        }
        let len = self.usize().map_err(|_| Error::parse(name, self.pos, "truncated section header"))?;
        let start = self.pos;
        if self.buf.len() - start < len {
            return Err(Error::parse(
                name,
                start,
                format!("section declares {len} bytes, only {} present", self.buf.len() - start),
            ));
        }
        self.pos += len;
        Ok(Reader {
            buf: &self.buf[..start + len],
            pos: start,
            section: name,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_activation(w: &mut Writer, a: Activation) {
    w.u8(match a {
        Activation::None => 0,
        Activation::Relu => 1,
    });
}

fn read_activation(r: &mut Reader) -> Result<Activation> {
    match r.u8()? {
        0 => Ok(Activation::None),
        1 => Ok(Activation::Relu),
        v => {
            r.pos -= 1;
            Err(r.err(format!("unknown activation tag {v}")))
        }
    }
}

fn write_topology(out: &mut Writer, t: &Topology) {
    let mut body = Writer::default();
    body.len(t.nodes.len());
    for node in &t.nodes {
        let mut rec = Writer::default();
        rec.len(node.name.len());
        rec.bytes(node.name.as_bytes());
        match node.op {
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                activation,
            } => {
                rec.u8(0);
                for v in [in_channels, out_channels, kernel, stride, pad] {
                    rec.len(v);
                }
                write_activation(&mut rec, activation);
            }
            Op::FullyConnected {
                inputs,
                outputs,
                activation,
            } => {
                rec.u8(1);
                rec.len(inputs);
                rec.len(outputs);
                write_activation(&mut rec, activation);
            }
            Op::MaxPool { kernel, stride } => {
                rec.u8(2);
                rec.len(kernel);
                rec.len(stride);
            }
            Op::AvgPool { kernel, stride } => {
                rec.u8(3);
                rec.len(kernel);
                rec.len(stride);
            }
            Op::Relu => rec.u8(4),
            Op::ResidualAdd => rec.u8(5),
            Op::Concat => rec.u8(6),
            Op::BatchNorm { channels, eps } => {
                rec.u8(7);
                rec.len(channels);
                rec.bytes(&eps.to_le_bytes());
            }
        }
        rec.len(node.inputs.len());
        for s in &node.inputs {
            rec.len(s.tensor_index());
        }
        body.len(rec.0.len());
        body.bytes(&rec.0);
    }
    out.section(b"TOPO", body);
}

fn read_topology(r: &mut Reader, input_shape: Shape) -> Result<Topology> {
    let mut s = r.section(b"TOPO", "topology")?;
    let n = s.count(4)?;
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let len = s.count(1)?;
        let end = s.pos + len;
        let name_len = s.count(1)?;
        let name_at = s.pos;
        let name = String::from_utf8(s.take(name_len)?.to_vec())
            .map_err(|_| Error::parse("topology", name_at, "node name is not UTF-8"))?;
        let tag_at = s.pos;
        let op = match s.u8()? {
            0 => Op::Conv2d {
                in_channels: s.usize()?,
                out_channels: s.usize()?,
                kernel: s.usize()?,
                stride: s.usize()?,
                pad: s.usize()?,
                activation: read_activation(&mut s)?,
            },
            1 => Op::FullyConnected {
                inputs: s.usize()?,
                outputs: s.usize()?,
                activation: read_activation(&mut s)?,
            },
            2 => Op::MaxPool {
                kernel: s.usize()?,
                stride: s.usize()?,
            },
            3 => Op::AvgPool {
                kernel: s.usize()?,
                stride: s.usize()?,
            },
            4 => Op::Relu,
            5 => Op::ResidualAdd,
            6 => Op::Concat,
            7 => Op::BatchNorm {
                channels: s.usize()?,
                eps: f32::from_le_bytes(s.array()?),
            },
            t => return Err(Error::parse("topology", tag_at, format!("unknown op tag {t}"))),
        };
        let k = s.count(4)?;
        let mut inputs = Vec::with_capacity(k);
        for _ in 0..k {
            let at = s.pos;
            inputs.push(match s.usize()? {
                0 => Source::Input,
                j if j <= i => Source::Layer(j - 1),
                j => return Err(Error::parse("topology", at, format!("node {i} reads undefined tensor {j}"))),
            });
        }
        if s.pos != end {
            return Err(Error::parse("topology", s.pos, format!("record {i} length mismatch")));
        }
        nodes.push(Node { name, op, inputs });
    }
    s.finish()?;
    let t = Topology { input_shape, nodes };
    t.output_shapes()?;
    Ok(t)
}

/// Encodes an fp32 model.
pub fn write_model(net: &NetworkGraph) -> Result<Vec<u8>> {
    net.validate()?;
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u16(VERSION);
    w.shape(net.input_shape());
    write_topology(&mut w, &net.topology);
    let mut blob = Writer::default();
    for p in &net.params {
        match p {
            FloatParams::None => blob.u8(0),
            FloatParams::Affine { weights, bias } => {
                blob.u8(1);
                blob.f32s(weights);
                blob.f32s(bias);
            }
            FloatParams::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } => {
                blob.u8(2);
                for v in [gamma, beta, mean, var] {
                    blob.f32s(v);
                }
            }
        }
    }
    w.section(b"BLOB", blob);
    Ok(w.0)
}

/// Decodes an fp32 model exactly as stored (batch norms are kept).
pub fn read_model(bytes: &[u8]) -> Result<NetworkGraph> {
    let mut r = Reader::new(bytes, "header");
    r.magic(MODEL_MAGIC)?;
    let input_shape = r.shape()?;
    let topology = read_topology(&mut r, input_shape)?;
    let mut b = r.section(b"BLOB", "weights")?;
    let mut params = Vec::with_capacity(topology.nodes.len());
    for _ in &topology.nodes {
        let at = b.pos;
        params.push(match b.u8()? {
            0 => FloatParams::None,
            1 => FloatParams::Affine {
                weights: b.f32s()?,
                bias: b.f32s()?,
            },
            2 => FloatParams::BatchNorm {
                gamma: b.f32s()?,
                beta: b.f32s()?,
                mean: b.f32s()?,
                var: b.f32s()?,
            },
            k => return Err(Error::parse("weights", at, format!("unknown parameter kind {k}"))),
        });
    }
    b.finish()?;
    r.finish()?;
    let net = NetworkGraph { topology, params };
    net.validate()?;
    Ok(net)
}

pub fn write_qmodel(q: &QuantizedNetwork) -> Result<Vec<u8>> {
    q.validate()?;
    let mut w = Writer::default();
    w.bytes(QMODEL_MAGIC);
    w.u16(VERSION);
    let f = q.format.to_string();
    w.u8(f.len() as u8);
    w.bytes(f.as_bytes());
    w.i32(q.h_act);
    w.shape(q.topology.input_shape);
    write_topology(&mut w, &q.topology);
    let mut body = Writer::default();
    for layer in &q.layers {
        match layer {
            None => body.u8(0),
            Some(l) => {
                body.u8(1);
                body.i32(l.h_w);
                body.i32(l.spill_exp);
                body.len(l.weights.len());
                body.bytes(&l.weights.iter().map(|c| c.0).collect::<Vec<_>>());
                body.i32(l.bias.frac_bits);
                body.len(l.bias.values.len());
                for v in &l.bias.values {
                    body.bytes(&v.to_le_bytes());
                }
            }
        }
    }
    w.section(b"QLAY", body);
    let mut norm = Writer::default();
    norm.len(q.divisors.len());
    for d in &q.divisors {
        norm.bytes(&d.to_le_bytes());
    }
    w.section(b"NORM", norm);
    Ok(w.0)
}

pub fn read_qmodel(bytes: &[u8]) -> Result<QuantizedNetwork> {
    let mut r = Reader::new(bytes, "header");
    r.magic(QMODEL_MAGIC)?;
    let n = r.u8()? as usize;
    let at = r.pos;
    let fs = std::str::from_utf8(r.take(n)?).map_err(|_| Error::parse("header", at, "format string is not UTF-8"))?;
    let format: Fp8Format = fs
        .parse()
        .map_err(|_| Error::parse("header", at, format!("invalid format string {fs:?}")))?;
    let h_act = r.i32()?;
    let input_shape = r.shape()?;
    let topology = read_topology(&mut r, input_shape)?;
    let mut s = r.section(b"QLAY", "layers")?;
    let mut layers = Vec::with_capacity(topology.nodes.len());
    for _ in &topology.nodes {
        let at = s.pos;
        layers.push(match s.u8()? {
            0 => None,
            1 => {
                let h_w = s.i32()?;
                let spill_exp = s.i32()?;
                let nw = s.count(1)?;
                let weights = s.take(nw)?.iter().map(|&b| Code8(b)).collect();
                let frac_bits = s.i32()?;
                let nb = s.count(2)?;
                let values = s
                    .take(nb * 2)?
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect();
                Some(QuantizedLayer {
                    h_w,
                    weights,
                    bias: QuantizedBias { values, frac_bits },
                    spill_exp,
                })
            }
            k => return Err(Error::parse("layers", at, format!("unknown layer flag {k}"))),
        });
    }
    s.finish()?;
    let mut nsec = r.section(b"NORM", "normalization")?;
    let nd = nsec.count(8)?;
    let divisors = (0..nd)
        .map(|_| nsec.array().map(f64::from_le_bytes))
        .collect::<Result<_>>()?;
    nsec.finish()?;
    r.finish()?;
    let q = QuantizedNetwork {
        format,
        h_act,
        topology,
        layers,
        divisors,
    };
    q.validate()?;
    Ok(q)
}

pub fn write_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let shape = tensors.first().map_or(Shape::new(0, 0, 0), |t| t.shape);
    if let Some(t) = tensors.iter().find(|t| t.shape != shape) {
        return Err(Error::Shape(format!("tensor file mixes shapes {shape} and {}", t.shape)));
    }
    let mut w = Writer::default();
    w.bytes(TENSOR_MAGIC);
    w.u16(VERSION);
    w.len(tensors.len());
    w.shape(shape);
    for t in tensors {
        for x in &t.data {
            w.bytes(&x.to_le_bytes());
        }
    }
    Ok(w.0)
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(bytes, "header");
    r.magic(TENSOR_MAGIC)?;
    let n = r.usize()?;
    let shape = r.shape()?;
    r.section = "tensor data";
    let need = n.checked_mul(shape.len()).and_then(|v| v.checked_mul(4));
    if need != Some(bytes.len() - r.pos) {
        return Err(r.err(format!(
            "{n} tensors of shape {shape} need {} bytes, found {}",
            need.map_or("too many".to_string(), |v| v.to_string()),
            bytes.len() - r.pos
        )));
    }
    (0..n)
        .map(|_| {
            let data = r
                .take(shape.len() * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            Tensor::new(shape, data)
        })
        .collect()
}

/// Writes via a temporary file in the target directory, then renames, so
/// readers never observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads an fp32 model and folds its batch norms into the preceding convs.
pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let net = read_model(&fs::read(path)?)?;
    if net.has_batch_norm() {
        net.fold_batch_norms()
    } else {
        Ok(net)
    }
}

pub fn save_model(path: impl AsRef<Path>, net: &NetworkGraph) -> Result<()> {
    write_atomic(path.as_ref(), &write_model(net)?)
}

pub fn load_qmodel(path: impl AsRef<Path>) -> Result<QuantizedNetwork> {
    read_qmodel(&fs::read(path)?)
}

pub fn save_qmodel(path: impl AsRef<Path>, q: &QuantizedNetwork) -> Result<()> {
    write_atomic(path.as_ref(), &write_qmodel(q)?)
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    read_tensors(&fs::read(path)?)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    write_atomic(path.as_ref(), &write_tensors(tensors)?)
}
