//! Cycle model of the PE array, its three on-chip buffers and the DMA engine.
//!
//! A layer is cut into tiles (output channels x output pixels x input
//! channels) whose working sets fit half of each buffer, so the other half
//! can be filled while the tile computes. [`compile_schedule`] emits the
//! block-level instruction stream; [`simulate_network`] times exactly that
//! stream, so the report and the schedule always agree.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{Op, Shape, Source, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfConfig {
    /// Multipliers per PE.
    pub nm: usize,
    /// PEs per group; they share weights and work on different pixels.
    pub ng: usize,
    /// PE groups; they share activations and work on different channels.
    pub np: usize,
    pub ifmb_bytes: usize,
    pub ofmb_bytes: usize,
    pub wb_bytes: usize,
    pub dma_bytes_per_cycle: f64,
    pub clock_hz: f64,
}

impl Default for PerfConfig {
    fn default() -> Self {
        PerfConfig {
            nm: 32,
            ng: 4,
            np: 16,
            ifmb_bytes: 64 * 1024,
            ofmb_bytes: 64 * 1024,
            wb_bytes: 32 * 1024,
            dma_bytes_per_cycle: 64.0,
            clock_hz: 1e9,
        }
    }
}

pub const PRESETS: [&str; 2] = ["default", "eyeriss-iso"];

impl PerfConfig {
    /// `"default"` or `"eyeriss-iso"` (768 multipliers as `Np = 6`, 51.5 KB
    /// weight buffer).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(PerfConfig::default()),
            "eyeriss-iso" => Ok(PerfConfig {
                np: 6,
                wb_bytes: 51 * 1024 + 512,
                ..PerfConfig::default()
            }),
            _ => Err(Error::Unsupported(format!(
                "unknown preset {name:?} (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.nm, self.ng, self.np, self.ifmb_bytes, self.ofmb_bytes, self.wb_bytes];
        if sizes.contains(&0) || !(self.dma_bytes_per_cycle > 0.0) || !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::Unsupported(format!("non-positive performance parameter in {self:?}")));
        }
        Ok(())
    }

    pub fn macs_per_cycle(&self) -> usize {
        self.nm * self.ng * self.np
    }

    pub fn ifmb_width_bits(&self) -> usize {
        self.ng * self.nm * 8
    }

    pub fn wb_width_bits(&self) -> usize {
        self.np * self.nm * 8
    }

    pub fn ofmb_width_bits(&self) -> usize {
        self.np * self.ng * 16
    }
}

/// `Nm * Ng * Np * clock`, in MAC/s.
pub fn peak_throughput(cfg: &PerfConfig) -> f64 {
    cfg.macs_per_cycle() as f64 * cfg.clock_hz
}

/// Geometry of a conv or fc layer as the array sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub ic: usize,
    pub oc: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input: Shape,
    pub output: Shape,
    /// First layer: the `IC * K * K` receptive field is flattened into the
    /// channel dimension.
    pub flattened: bool,
}

impl LayerGeometry {
    pub fn conv(ic: usize, oc: usize, kernel: usize, stride: usize, input: Shape, output: Shape) -> Self {
        LayerGeometry {
            ic,
            oc,
            kernel,
            stride,
            input,
            output,
            flattened: false,
        }
    }

    pub fn pixels(&self) -> usize {
        self.output.h * self.output.w
    }

    pub fn macs(&self) -> u64 {
        (self.oc * self.pixels() * self.ic * self.kernel * self.kernel) as u64
    }

    /// Channel depth and kernel taps per pixel as scheduled.
    fn channel_geometry(&self) -> (usize, usize) {
        if self.flattened {
            (self.ic * self.kernel * self.kernel, 1)
        } else {
            (self.ic, self.kernel * self.kernel)
        }
    }

    /// `ceil(OC/Np) * ceil(OH*OW/Ng) * ceil(IC/Nm) * K^2`, flattened first
    /// layers using `ceil(IC*K^2/Nm)` instead.
    pub fn compute_cycles(&self, cfg: &PerfConfig) -> u64 {
        let (ch, taps) = self.channel_geometry();
        (self.oc.div_ceil(cfg.np) * self.pixels().div_ceil(cfg.ng) * ch.div_ceil(cfg.nm) * taps) as u64
    }

    fn weight_bytes(&self, oc: usize, ch: usize) -> usize {
        let (_, taps) = self.channel_geometry();
        oc * ch * taps
    }

    fn ifm_bytes(&self) -> usize {
        self.input.len()
    }

    /// Input bytes needed for output pixels `[p0, p1)` and `ch` of the
    /// scheduled channels.
    fn ifm_tile_bytes(&self, p0: usize, p1: usize, ch: usize) -> usize {
        let ow = self.output.w.max(1);
        let (r0, r1) = (p0 / ow, (p1 - 1) / ow);
        let rows = ((r1 - r0) * self.stride + self.kernel).min(self.input.h);
        let per_channel = rows * self.input.w;
        let (total_ch, _) = self.channel_geometry();
        (per_channel * self.input.c * ch).div_ceil(total_ch)
    }
}

/// Extracts array geometry for a node, `None` for layers the array does not run.
pub fn layer_geometry(topology: &Topology, shapes: &[Shape], i: usize) -> Option<LayerGeometry> {
    let node = &topology.nodes[i];
    let input = topology.shape_of(shapes, node.inputs[0]);
    let output = shapes[i];
    match node.op {
        Op::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            ..
        } => Some(LayerGeometry {
            flattened: node.inputs[0] == Source::Input,
            ..LayerGeometry::conv(in_channels, out_channels, kernel, stride, input, output)
        }),
        Op::FullyConnected { inputs, outputs, .. } => Some(LayerGeometry::conv(
            inputs,
            outputs,
            1,
            1,
            Shape::new(inputs, 1, 1),
            Shape::new(outputs, 1, 1),
        )),
        _ => None,
    }
}

/// Tile extents; every extent but the last in each dimension is a multiple
/// of the matching array dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub oc: usize,
    pub pixels: usize,
    pub channels: usize,
    /// The smallest tile still overflows a buffer half: DMA cannot overlap.
    pub serialized: bool,
    /// The whole input feature map stays resident in the IFMB.
    pub ifm_resident: bool,
}

fn round_down_multiple(v: usize, m: usize) -> usize {
    (v / m * m).max(m)
}

fn halve(v: usize, m: usize) -> usize {
    round_down_multiple(v.div_ceil(2), m)
}

pub fn choose_tiling(g: &LayerGeometry, cfg: &PerfConfig) -> Tiling {
    let (ch_total, _) = g.channel_geometry();
    let (wb, ifmb, ofmb) = (cfg.wb_bytes / 2, cfg.ifmb_bytes / 2, cfg.ofmb_bytes / 2);
    let ifm_resident = g.ifm_bytes() <= ifmb;
    let mut oc = g.oc;
    let mut px = g.pixels();
    let mut ch = ch_total;
    let w_fits = |oc, ch| g.weight_bytes(oc, ch) <= wb;
    let i_fits = |px: usize, ch| ifm_resident || g.ifm_tile_bytes(0, px.min(g.pixels()), ch) <= ifmb;
    let o_fits = |oc: usize, px: usize| oc * px * 2 <= ofmb;
    loop {
        let (w, i, o) = (w_fits(oc, ch), i_fits(px, ch), o_fits(oc, px));
        if w && i && o {
            break;
        }
        let before = (oc, px, ch);
        if !w {
            if oc > cfg.np {
                oc = halve(oc, cfg.np);
            } else if ch > cfg.nm {
                ch = halve(ch, cfg.nm);
            }
        } else if !o {
            if px > cfg.ng {
                px = halve(px, cfg.ng);
            } else if oc > cfg.np {
                oc = halve(oc, cfg.np);
            }
        } else if !i {
            if px > cfg.ng {
                px = halve(px, cfg.ng);
            } else if ch > cfg.nm {
                ch = halve(ch, cfg.nm);
            }
        }
        if (oc, px, ch) == before {
            return Tiling {
                oc,
                pixels: px,
                channels: ch,
                serialized: true,
                ifm_resident,
            };
        }
    }
    Tiling {
        oc,
        pixels: px,
        channels: ch,
        serialized: false,
        ifm_resident,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrKind {
    LoadIfm,
    LoadW,
    ComputeTile,
    StoreOfm,
}

/// One block-level instruction. `oc`, `px` and `ch` are the first output
/// channel, output pixel and input channel of the tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instr {
    pub kind: InstrKind,
    pub layer: usize,
    pub oc: usize,
    pub px: usize,
    pub ch: usize,
    /// Bytes moved, or zero for compute.
    pub bytes: u64,
    /// Array cycles, or zero for transfers.
    pub cycles: u64,
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            InstrKind::LoadIfm => "load_ifm",
            InstrKind::LoadW => "load_w",
            InstrKind::ComputeTile => "compute_tile",
            InstrKind::StoreOfm => "store_ofm",
        };
        write!(
            f,
            "{kind} layer={} oc={} px={} ch={} bytes={} cycles={}",
            self.layer, self.oc, self.px, self.ch, self.bytes, self.cycles
        )
    }
}

fn layer_schedule(layer: usize, g: &LayerGeometry, t: &Tiling, cfg: &PerfConfig, out: &mut Vec<Instr>) {
    let (ch_total, taps) = g.channel_geometry();
    let pixels = g.pixels();
    let single_ch_block = t.channels >= ch_total;
    let instr = |kind, oc, px, ch, bytes: usize, cycles: u64| Instr {
        kind,
        layer,
        oc,
        px,
        ch,
        bytes: bytes as u64,
        cycles,
    };
    if t.ifm_resident {
        out.push(instr(InstrKind::LoadIfm, 0, 0, 0, g.ifm_bytes(), 0));
    }
    for oc0 in (0..g.oc).step_by(t.oc) {
        let ocn = t.oc.min(g.oc - oc0);
        if single_ch_block {
            out.push(instr(InstrKind::LoadW, oc0, 0, 0, g.weight_bytes(ocn, ch_total), 0));
        }
        for p0 in (0..pixels).step_by(t.pixels) {
            let p1 = (p0 + t.pixels).min(pixels);
            for c0 in (0..ch_total).step_by(t.channels) {
                let chn = t.channels.min(ch_total - c0);
                if !t.ifm_resident {
                    out.push(instr(InstrKind::LoadIfm, oc0, p0, c0, g.ifm_tile_bytes(p0, p1, chn), 0));
                }
                if !single_ch_block {
                    out.push(instr(InstrKind::LoadW, oc0, p0, c0, g.weight_bytes(ocn, chn), 0));
                }
                let cycles = ocn.div_ceil(cfg.np) * (p1 - p0).div_ceil(cfg.ng) * chn.div_ceil(cfg.nm) * taps;
                out.push(instr(InstrKind::ComputeTile, oc0, p0, c0, 0, cycles as u64));
            }
            out.push(instr(InstrKind::StoreOfm, oc0, p0, 0, ocn * (p1 - p0), 0));
        }
    }
}

/// Block-level instruction stream for every conv/fc layer, in execution
/// order: output-channel blocks, then pixel blocks, then channel blocks.
pub fn compile_schedule(topology: &Topology, cfg: &PerfConfig) -> Result<Vec<Instr>> {
    cfg.validate()?;
    let shapes = topology.output_shapes()?;
    let mut out = Vec::new();
    for i in 0..topology.nodes.len() {
        if let Some(g) = layer_geometry(topology, &shapes, i) {
            layer_schedule(i, &g, &choose_tiling(&g, cfg), cfg, &mut out);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPerf {
    pub name: String,
    pub kind: String,
    pub compute_cycles: u64,
    pub dma_cycles: u64,
    pub stall_cycles: u64,
    pub total_cycles: u64,
    pub utilization_pct: f64,
    pub macs: u64,
    pub bytes_in: u64,
    pub bytes_w: u64,
    pub bytes_out: u64,
    pub tiles: usize,
    pub tiling: Option<Tiling>,
    /// Bytes per cycle that would make every tile compute-bound.
    pub min_bandwidth: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPerf {
    pub config: PerfConfig,
    pub peak_throughput: f64,
    pub layers: Vec<LayerPerf>,
    pub compute_cycles: u64,
    pub dma_cycles: u64,
    pub stall_cycles: u64,
    pub total_cycles: u64,
    pub macs: u64,
    pub utilization_pct: f64,
    pub latency_s: f64,
    pub min_bandwidth: f64,
}

fn dma_cycles(bytes: u64, cfg: &PerfConfig) -> u64 {
    if cfg.dma_bytes_per_cycle.is_infinite() {
        0
    } else {
        (bytes as f64 / cfg.dma_bytes_per_cycle).ceil() as u64
    }
}

/// Times a schedule. Transfers issued before a compute instruction overlap
/// with it (ping-pong) unless the tiling is serialized. Returns compute, DMA
/// and stall cycles, the tile count and the bandwidth that would hide all
/// transfers.
fn time_layer(instrs: &[Instr], serialized: bool, cfg: &PerfConfig) -> (u64, u64, u64, usize, f64) {
    let (mut compute, mut dma, mut stall, mut tiles) = (0u64, 0u64, 0u64, 0usize);
    let mut min_bw = 0.0f64;
    let mut pending = 0u64;
    let mut tile = |pending: u64, c: u64, compute: &mut u64, stall: &mut u64| {
        let d = dma_cycles(pending, cfg);
        *compute += c;
        *stall += if serialized { d } else { d.saturating_sub(c) };
        if c > 0 {
            min_bw = min_bw.max(pending as f64 / c as f64);
        }
    };
    for ins in instrs {
        if ins.kind == InstrKind::ComputeTile {
            tiles += 1;
            tile(pending, ins.cycles, &mut compute, &mut stall);
            pending = 0;
        } else {
            pending += ins.bytes;
            dma += dma_cycles(ins.bytes, cfg);
        }
    }
    // The final store has no later tile to hide behind.
    tile(pending, 0, &mut compute, &mut stall);
    (compute, dma, stall, tiles, min_bw)
}

pub fn layer_cycles(g: &LayerGeometry, cfg: &PerfConfig) -> Result<LayerPerf> {
    cfg.validate()?;
    let t = choose_tiling(g, cfg);
    let mut instrs = Vec::new();
    layer_schedule(0, g, &t, cfg, &mut instrs);
    Ok(layer_perf("layer", "conv2d", g, t, &instrs, cfg))
}

fn layer_perf(name: &str, kind: &str, g: &LayerGeometry, t: Tiling, instrs: &[Instr], cfg: &PerfConfig) -> LayerPerf {
    let (compute, dma, stall, tiles, min_bw) = time_layer(instrs, t.serialized, cfg);
    let bytes = |k| instrs.iter().filter(|i| i.kind == k).map(|i| i.bytes).sum::<u64>();
    let macs = g.macs();
    LayerPerf {
        name: name.to_string(),
        kind: kind.to_string(),
        compute_cycles: compute,
        dma_cycles: dma,
        stall_cycles: stall,
        total_cycles: compute + stall,
        utilization_pct: if compute == 0 {
            0.0
        } else {
            100.0 * macs as f64 / (compute as f64 * cfg.macs_per_cycle() as f64)
        },
        macs,
        bytes_in: bytes(InstrKind::LoadIfm),
        bytes_w: bytes(InstrKind::LoadW),
        bytes_out: bytes(InstrKind::StoreOfm),
        tiles,
        tiling: Some(t),
        min_bandwidth: min_bw,
        warning: t.serialized.then(|| "working set exceeds half a buffer; DMA not hidden".to_string()),
    }
}

/// Per-layer and total cycle report for a network.
pub fn simulate_network(topology: &Topology, cfg: &PerfConfig) -> Result<NetworkPerf> {
    let schedule = compile_schedule(topology, cfg)?;
    let shapes = topology.output_shapes()?;
    let mut layers = Vec::with_capacity(topology.nodes.len());
    for (i, node) in topology.nodes.iter().enumerate() {
        let kind = node.op.kind_name();
        match layer_geometry(topology, &shapes, i) {
            Some(g) => {
                let t = choose_tiling(&g, cfg);
                let instrs: Vec<Instr> = schedule.iter().filter(|x| x.layer == i).cloned().collect();
                layers.push(layer_perf(&node.name, kind, &g, t, &instrs, cfg));
            }
            None => layers.push(LayerPerf {
                name: node.name.clone(),
                kind: kind.to_string(),
                compute_cycles: 0,
                dma_cycles: 0,
                stall_cycles: 0,
                total_cycles: 0,
                utilization_pct: 0.0,
                macs: 0,
                bytes_in: 0,
                bytes_w: 0,
                bytes_out: 0,
                tiles: 0,
                tiling: None,
                min_bandwidth: 0.0,
                warning: Some(format!("{kind} is not modeled on the PE array; counted as zero cycles")),
            }),
        }
    }
    let sum = |f: fn(&LayerPerf) -> u64| layers.iter().map(f).sum::<u64>();
    let compute = sum(|l| l.compute_cycles);
    let total = sum(|l| l.total_cycles);
    let macs = sum(|l| l.macs);
    Ok(NetworkPerf {
        config: *cfg,
        peak_throughput: peak_throughput(cfg),
        compute_cycles: compute,
        dma_cycles: sum(|l| l.dma_cycles),
        stall_cycles: sum(|l| l.stall_cycles),
        total_cycles: total,
        macs,
        utilization_pct: if compute == 0 {
            0.0
        } else {
            100.0 * macs as f64 / (compute as f64 * cfg.macs_per_cycle() as f64)
        },
        latency_s: total as f64 / cfg.clock_hz,
        min_bandwidth: layers.iter().map(|l| l.min_bandwidth).fold(0.0, f64::max),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub np: usize,
    pub compute_cycles: u64,
    pub total_cycles: u64,
    pub utilization_pct: f64,
    pub min_bandwidth: f64,
    pub speedup: f64,
}

/// Parses `Np=1..128x2`: start, inclusive end, multiplicative step.
pub fn parse_np_sweep(sweep: &str) -> Result<Vec<usize>> {
    let bad = || Error::Unsupported(format!("sweep {sweep:?}: expected Np=<start>..<end>x<factor>"));
    let range = sweep.strip_prefix("Np=").ok_or_else(bad)?;
    let (a, rest) = range.split_once("..").ok_or_else(bad)?;
    let (b, k) = rest.split_once('x').ok_or_else(bad)?;
    let (a, b, k): (usize, usize, usize) = (
        a.parse().map_err(|_| bad())?,
        b.parse().map_err(|_| bad())?,
        k.parse().map_err(|_| bad())?,
    );
    if a == 0 || k < 2 || b < a {
        return Err(bad());
    }
    let mut v = Vec::new();
    let mut x = a;
    while x <= b {
        v.push(x);
        x *= k;
    }
    Ok(v)
}

pub fn sweep_np(topology: &Topology, base: &PerfConfig, nps: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows: Vec<SweepRow> = Vec::with_capacity(nps.len());
    for &np in nps {
        let r = simulate_network(topology, &PerfConfig { np, ..*base })?;
        let first = rows.first().map_or(r.total_cycles, |f| f.total_cycles);
        rows.push(SweepRow {
            np,
            compute_cycles: r.compute_cycles,
            total_cycles: r.total_cycles,
            utilization_pct: r.utilization_pct,
            min_bandwidth: r.min_bandwidth,
            speedup: first as f64 / r.total_cycles.max(1) as f64,
        });
    }
    Ok(rows)
}

/// Per-layer CSV: name, cycles, utilization and bytes per stream.
pub fn write_layer_csv<W: Write>(perf: &NetworkPerf, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "name",
        "compute_cycles",
        "dma_cycles",
        "total_cycles",
        "utilization",
        "bytes_in",
        "bytes_w",
        "bytes_out",
    ])?;
    for l in &perf.layers {
        out.write_record([
            l.name.clone(),
            l.compute_cycles.to_string(),
            l.dma_cycles.to_string(),
            l.total_cycles.to_string(),
            format!("{:.4}", l.utilization_pct),
            l.bytes_in.to_string(),
            l.bytes_w.to_string(),
            l.bytes_out.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// One instruction per line.
pub fn schedule_text(schedule: &[Instr]) -> String {
    schedule.iter().map(|i| format!("{i}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(ic: usize, oc: usize, k: usize, oh: usize) -> LayerGeometry {
        LayerGeometry::conv(ic, oc, k, 1, Shape::new(ic, oh + k - 1, oh + k - 1), Shape::new(oc, oh, oh))
    }

    #[test]
    fn peak() {
        assert_eq!(peak_throughput(&PerfConfig::default()), 2.048e12);
        let c = PerfConfig {
            np: 8,
            ..PerfConfig::default()
        };
        assert_eq!(peak_throughput(&c), 1.024e12);
        let c = PerfConfig {
            clock_hz: 5e8,
            ..PerfConfig::default()
        };
        assert_eq!(peak_throughput(&c), 1.024e12);
    }

    #[test]
    fn compute_formula() {
        let cfg = PerfConfig::default();
        assert_eq!(geom(32, 16, 1, 4).compute_cycles(&cfg), 4);
        let mut first = geom(3, 16, 3, 4);
        assert_eq!(first.compute_cycles(&cfg), 4 * 9);
        first.flattened = true;
        assert_eq!(first.compute_cycles(&cfg), 4);
    }

    #[test]
    fn infinite_bandwidth_hides_dma() {
        let cfg = PerfConfig {
            dma_bytes_per_cycle: f64::INFINITY,
            ..PerfConfig::default()
        };
        let g = geom(256, 256, 3, 28);
        let p = layer_cycles(&g, &cfg).unwrap();
        assert_eq!(p.total_cycles, p.compute_cycles);
        assert_eq!(p.compute_cycles, g.compute_cycles(&cfg));
    }

    #[test]
    fn tiles_sum_to_formula() {
        let cfg = PerfConfig::default();
        for g in [geom(256, 256, 3, 28), geom(512, 512, 3, 14), geom(64, 96, 5, 27), geom(3, 64, 3, 224)] {
            let p = layer_cycles(&g, &cfg).unwrap();
            assert_eq!(p.compute_cycles, g.compute_cycles(&cfg), "{g:?}");
            assert!(p.utilization_pct <= 100.0);
        }
    }

    #[test]
    fn presets() {
        assert_eq!(PerfConfig::preset("eyeriss-iso").unwrap().np, 6);
        assert!(PerfConfig::preset("tpu").is_err());
    }

    #[test]
    fn sweep_parse() {
        assert_eq!(parse_np_sweep("Np=1..128x2").unwrap(), vec![1, 2, 4, 8, 16, 32, 64, 128]);
        assert!(parse_np_sweep("Nm=1..4x2").is_err());
        assert!(parse_np_sweep("Np=4..1x2").is_err());
    }

    #[test]
    fn single_tile_layer_has_four_records() {
        let mut t = Topology::new(Shape::new(32, 4, 4));
        t.nodes.push(crate::netgraph::Node {
            name: "c".into(),
            op: Op::Conv2d {
                in_channels: 32,
                out_channels: 16,
                kernel: 1,
                stride: 1,
                pad: 0,
                activation: crate::datapath::Activation::None,
            },
            inputs: vec![Source::Input],
        });
        let s = compile_schedule(&t, &PerfConfig::default()).unwrap();
        let kinds: Vec<_> = s.iter().map(|i| i.kind).collect();
        assert_eq!(
            kinds,
            vec![InstrKind::LoadIfm, InstrKind::LoadW, InstrKind::ComputeTile, InstrKind::StoreOfm]
        );
        assert!(compile_schedule(&Topology::new(Shape::new(1, 1, 1)), &PerfConfig::default())
            .unwrap()
            .is_empty());
    }
}
