//! Reference and tiled executors, plus per-tile VM footprint accounting.
//!
//! A tiled layer is a nest of three inter-tile loops over output channels,
//! rows and columns. Each iteration is one atomic unit: fetch the input halo
//! and weight block, run the MAC loop, write one complete output tile. Units
//! never carry partial sums, so the unit index triple is the whole progress
//! state.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{requantize, LayerSpec, NetworkSpec, QTensor, Shape, WeightTensor};

/// Bytes per stored element.
pub const ELEM_BYTES: u64 = 2;
/// Bytes of VM reserved for staging a progress snapshot.
pub const SNAPSHOT_STAGING_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    Cout,
    H,
    W,
}

/// Nesting of the inter-tile loops, outermost first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoopOrder {
    #[serde(rename = "COUT_H_W")]
    CoutHW,
    #[serde(rename = "COUT_W_H")]
    CoutWH,
    #[serde(rename = "H_COUT_W")]
    HCoutW,
    #[serde(rename = "H_W_COUT")]
    HWCout,
    #[serde(rename = "W_COUT_H")]
    WCoutH,
    #[serde(rename = "W_H_COUT")]
    WHCout,
}

impl LoopOrder {
    pub const ALL: [LoopOrder; 6] = [
        LoopOrder::CoutHW,
        LoopOrder::CoutWH,
        LoopOrder::HCoutW,
        LoopOrder::HWCout,
        LoopOrder::WCoutH,
        LoopOrder::WHCout,
    ];

    pub fn dims(self) -> [Dim; 3] {
        use Dim::*;
        match self {
            LoopOrder::CoutHW => [Cout, H, W],
            LoopOrder::CoutWH => [Cout, W, H],
            LoopOrder::HCoutW => [H, Cout, W],
            LoopOrder::HWCout => [H, W, Cout],
            LoopOrder::WCoutH => [W, Cout, H],
            LoopOrder::WHCout => [W, H, Cout],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LoopOrder::CoutHW => "COUT_H_W",
            LoopOrder::CoutWH => "COUT_W_H",
            LoopOrder::HCoutW => "H_COUT_W",
            LoopOrder::HWCout => "H_W_COUT",
            LoopOrder::WCoutH => "W_COUT_H",
            LoopOrder::WHCout => "W_H_COUT",
        }
    }
}

impl fmt::Display for LoopOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub t_cout: usize,
    pub t_h: usize,
    pub t_w: usize,
    pub loop_order: LoopOrder,
}

impl TileConfig {
    pub const fn new(t_cout: usize, t_h: usize, t_w: usize, loop_order: LoopOrder) -> Self {
        Self {
            t_cout,
            t_h,
            t_w,
            loop_order,
        }
    }

    /// Tile must fit inside the layer's output (edge tiles are clamped).
    pub fn check(&self, out: Shape) -> std::result::Result<(), String> {
        if self.t_cout == 0 || self.t_h == 0 || self.t_w == 0 {
            return Err("tile dims must be >= 1".into());
        }
        if self.t_cout > out.c || self.t_h > out.h || self.t_w > out.w {
            return Err(format!(
                "tile {}x{}x{} exceeds output {}",
                self.t_cout, self.t_h, self.t_w, out
            ));
        }
        Ok(())
    }

    /// Number of inter-tile iterations over an output of shape `out`.
    pub fn unit_count(&self, out: Shape) -> usize {
        out.c.div_ceil(self.t_cout) * out.h.div_ceil(self.t_h) * out.w.div_ceil(self.t_w)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionDesign {
    pub tiles: Vec<TileConfig>,
    /// Tiles preserved together (hyper-tile size S).
    pub batch_size: usize,
}

impl ExecutionDesign {
    /// Checks list length, S and every tile against the network's shapes.
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Design("batch size S must be >= 1".into()));
        }
        if self.tiles.len() != net.layers.len() {
            return Err(Error::Design(format!(
                "{} tile configs for {} layers",
                self.tiles.len(),
                net.layers.len()
            )));
        }
        let shapes = net.shapes()?;
        for (i, tile) in self.tiles.iter().enumerate() {
            tile.check(shapes[i + 1])
                .map_err(|m| Error::Design(format!("layer {i}: {m}")))?;
        }
        Ok(())
    }

    /// Every layer tiled as a single unit.
    pub fn untiled(net: &NetworkSpec, batch_size: usize) -> Result<Self> {
        let shapes = net.shapes()?;
        Ok(Self {
            tiles: shapes[1..]
                .iter()
                .map(|s| TileConfig::new(s.c, s.h, s.w, LoopOrder::CoutHW))
                .collect(),
            batch_size,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VMFootprint {
    pub input_bytes: u64,
    pub weight_bytes: u64,
    pub output_batch_bytes: u64,
    pub scratch_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnitKind {
    Conv,
    Pool,
}

/// Unit-level view of one layer: FC is a 1x1 conv over `(n_in, 1, 1)` and
/// pooling is depthwise, so a pool unit only reads its own channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitGeometry {
    kind: UnitKind,
    c_in: usize,
    k: usize,
    s: usize,
    p: usize,
}

/// Work and traffic of one atomic unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitStat {
    pub macs: u64,
    pub input_bytes: u64,
    pub weight_bytes: u64,
    /// `input_bytes + weight_bytes`, read from NVM.
    pub fetched_bytes: u64,
    pub output_bytes: u64,
}

impl UnitGeometry {
    pub fn of(layer: &LayerSpec) -> Self {
        match *layer {
            LayerSpec::Conv2D {
                c_in,
                kernel,
                stride,
                padding,
                ..
            } => Self {
                kind: UnitKind::Conv,
                c_in,
                k: kernel,
                s: stride,
                p: padding,
            },
            LayerSpec::FullyConnected { n_in, .. } => Self {
                kind: UnitKind::Conv,
                c_in: n_in,
                k: 1,
                s: 1,
                p: 0,
            },
            LayerSpec::MaxPool2D { window, stride } => Self {
                kind: UnitKind::Pool,
                c_in: 0,
                k: window,
                s: stride,
                p: 0,
            },
        }
    }

    fn halo(&self, t_h: usize, t_w: usize) -> (usize, usize) {
        (self.s * (t_h - 1) + self.k, self.s * (t_w - 1) + self.k)
    }

    /// Stats for a (possibly clamped) tile of `tc x th x tw` outputs.
    pub fn unit_stat(&self, tc: usize, th: usize, tw: usize) -> UnitStat {
        let (hh, hw) = self.halo(th, tw);
        let (in_ch, macs, weight_elems) = match self.kind {
            UnitKind::Conv => {
                let per_out = self.k * self.k * self.c_in;
                (self.c_in, tc * th * tw * per_out, tc * per_out)
            }
            UnitKind::Pool => (tc, 0, 0),
        };
        let input_bytes = (hh * hw * in_ch) as u64 * ELEM_BYTES;
        let weight_bytes = weight_elems as u64 * ELEM_BYTES;
        UnitStat {
            macs: macs as u64,
            input_bytes,
            weight_bytes,
            fetched_bytes: input_bytes + weight_bytes,
            output_bytes: (tc * th * tw) as u64 * ELEM_BYTES,
        }
    }
}

/// VM needed to run one unit of `layer` with `tile` while buffering `s` outputs.
pub fn tile_footprint(layer: &LayerSpec, tile: &TileConfig, s: usize) -> VMFootprint {
    let stat = UnitGeometry::of(layer).unit_stat(tile.t_cout, tile.t_h, tile.t_w);
    let output_batch_bytes = s as u64 * stat.output_bytes;
    let scratch_bytes = SNAPSHOT_STAGING_BYTES;
    VMFootprint {
        input_bytes: stat.input_bytes,
        weight_bytes: stat.weight_bytes,
        output_batch_bytes,
        scratch_bytes,
        total_bytes: stat.input_bytes + stat.weight_bytes + output_batch_bytes + scratch_bytes,
    }
}

/// One inter-tile iteration: its index triple `(cout, h, w)` and the output
/// ranges it produces (clamped at the edges).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitBlock {
    pub index: [usize; 3],
    pub co: Range<usize>,
    pub oy: Range<usize>,
    pub ox: Range<usize>,
}

impl UnitBlock {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.co.len(), self.oy.len(), self.ox.len())
    }
}

/// All units of a layer in the tile's loop order.
pub fn unit_blocks(out: Shape, tile: &TileConfig) -> Vec<UnitBlock> {
    let extent = |d: Dim| match d {
        Dim::Cout => (out.c, tile.t_cout),
        Dim::H => (out.h, tile.t_h),
        Dim::W => (out.w, tile.t_w),
    };
    let order = tile.loop_order.dims();
    let counts = order.map(|d| {
        let (n, t) = extent(d);
        n.div_ceil(t)
    });
    let mut blocks = Vec::with_capacity(counts.iter().product());
    for a in 0..counts[0] {
        for b in 0..counts[1] {
            for c in 0..counts[2] {
                let mut index = [0usize; 3];
                for (d, i) in order.iter().zip([a, b, c]) {
                    let slot = match d {
                        Dim::Cout => 0,
                        Dim::H => 1,
                        Dim::W => 2,
                    };
                    index[slot] = i;
                }
                let span = |i: usize, (n, t): (usize, usize)| i * t..((i + 1) * t).min(n);
                blocks.push(UnitBlock {
                    index,
                    co: span(index[0], extent(Dim::Cout)),
                    oy: span(index[1], extent(Dim::H)),
                    ox: span(index[2], extent(Dim::W)),
                });
            }
        }
    }
    blocks
}

/// Computes one output tile from `input` (the whole input tensor of the
/// layer, flattened for FC). Returns values row-major over `(co, oy, ox)`.
///
/// The input halo is first staged into a zero-padded local buffer, mirroring
/// the fetch into VM, then the MAC loop runs over that buffer only.
pub fn compute_unit(
    layer: &LayerSpec,
    weights: Option<&WeightTensor>,
    input: &[i16],
    in_shape: Shape,
    block: &UnitBlock,
    relu: bool,
) -> Vec<i16> {
    let g = UnitGeometry::of(layer);
    let in_shape = match layer {
        LayerSpec::FullyConnected { n_in, .. } => Shape::new(*n_in, 1, 1),
        _ => in_shape,
    };
    let (th, tw) = (block.oy.len(), block.ox.len());
    let (hh, hw) = g.halo(th, tw);
    let channels: Vec<usize> = match g.kind {
        UnitKind::Conv => (0..g.c_in).collect(),
        UnitKind::Pool => block.co.clone().collect(),
    };

    // fetch: halo rows/cols relative to the padded origin of the tile
    let y0 = (block.oy.start * g.s) as isize - g.p as isize;
    let x0 = (block.ox.start * g.s) as isize - g.p as isize;
    let mut halo = vec![0i16; channels.len() * hh * hw];
    for (lc, &c) in channels.iter().enumerate() {
        for ly in 0..hh {
            let y = y0 + ly as isize;
            if y < 0 || y >= in_shape.h as isize {
                continue;
            }
            let row = &input[in_shape.index(c, y as usize, 0)..][..in_shape.w];
            for lx in 0..hw {
                let x = x0 + lx as isize;
                if x >= 0 && (x as usize) < in_shape.w {
                    halo[(lc * hh + ly) * hw + lx] = row[x as usize];
                }
            }
        }
    }

    let mut out = Vec::with_capacity(block.co.len() * th * tw);
    match g.kind {
        UnitKind::Conv => {
            let w = weights.expect("conv/fc layer without weights");
            for co in block.co.clone() {
                let wrow = w.row(co);
                let bias = w.bias.as_ref().map_or(0, |b| b[co] as i64);
                for ly in 0..th {
                    for lx in 0..tw {
                        let mut acc = bias;
                        let mut wi = 0;
                        for lc in 0..g.c_in {
                            for ky in 0..g.k {
                                let base = (lc * hh + ly * g.s + ky) * hw + lx * g.s;
                                for kx in 0..g.k {
                                    acc += wrow[wi] as i64 * halo[base + kx] as i64;
                                    wi += 1;
                                }
                            }
                        }
                        let v = requantize(acc, w.frac_bits);
                        out.push(if relu { v.max(0) } else { v });
                    }
                }
            }
        }
        UnitKind::Pool => {
            for lc in 0..block.co.len() {
                for ly in 0..th {
                    for lx in 0..tw {
                        let mut m = i16::MIN;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                m = m.max(halo[(lc * hh + ly * g.s + ky) * hw + lx * g.s + kx]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
    }
    out
}

/// Writes a tile produced by [`compute_unit`] into a full output buffer.
pub fn scatter_unit(out: &mut [i16], out_shape: Shape, block: &UnitBlock, values: &[i16]) {
    let mut it = values.iter();
    for co in block.co.clone() {
        for oy in block.oy.clone() {
            for ox in block.ox.clone() {
                out[out_shape.index(co, oy, ox)] = *it.next().unwrap();
            }
        }
    }
}

/// Whether layer `i` applies ReLU: conv/fc layers except the last one.
pub fn applies_relu(net: &NetworkSpec, i: usize) -> bool {
    net.layers[i].has_weights() && i + 1 < net.layers.len()
}

fn check_input(net: &NetworkSpec, input: &QTensor) -> Result<()> {
    net.validate()?;
    input.check()?;
    if input.shape != net.input_shape {
        return Err(Error::Input(format!(
            "input shape {} does not match network input {}",
            input.shape, net.input_shape
        )));
    }
    if input.frac_bits != net.act_frac_bits {
        return Err(Error::Input(format!(
            "input frac_bits {} does not match network act_frac_bits {}",
            input.frac_bits, net.act_frac_bits
        )));
    }
    Ok(())
}

/// Plain nested-loop inference.
pub fn run_reference(net: &NetworkSpec, input: &QTensor) -> Result<QTensor> {
    check_input(net, input)?;
    let mut cur = input.data.clone();
    let mut shape = input.shape;
    for (i, layer) in net.layers.iter().enumerate() {
        let relu = applies_relu(net, i);
        let (next, next_shape) = match *layer {
            LayerSpec::Conv2D {
                c_out,
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = net.weights[i].as_ref().unwrap();
                reference_conv(&cur, shape, w, c_out, kernel, stride, padding, relu)
            }
            LayerSpec::FullyConnected { n_in, n_out } => {
                let w = net.weights[i].as_ref().unwrap();
                let mut out = Vec::with_capacity(n_out);
                for o in 0..n_out {
                    let mut acc = w.bias.as_ref().map_or(0, |b| b[o] as i64);
                    for (j, &x) in cur.iter().enumerate().take(n_in) {
                        acc += w.data[o * n_in + j] as i64 * x as i64;
                    }
                    let v = requantize(acc, w.frac_bits);
                    out.push(if relu { v.max(0) } else { v });
                }
                (out, Shape::new(n_out, 1, 1))
            }
            LayerSpec::MaxPool2D { window, stride } => {
                let oh = (shape.h - window) / stride + 1;
                let ow = (shape.w - window) / stride + 1;
                let mut out = Vec::with_capacity(shape.c * oh * ow);
                for c in 0..shape.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = i16::MIN;
                            for ky in 0..window {
                                for kx in 0..window {
                                    m = m.max(
                                        cur[shape.index(c, oy * stride + ky, ox * stride + kx)],
                                    );
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                (out, Shape::new(shape.c, oh, ow))
            }
        };
        cur = next;
        shape = next_shape;
    }
    QTensor::new(shape, net.act_frac_bits, cur)
}

#[allow(clippy::too_many_arguments)]
fn reference_conv(
    x: &[i16],
    shape: Shape,
    w: &WeightTensor,
    c_out: usize,
    k: usize,
    s: usize,
    p: usize,
    relu: bool,
) -> (Vec<i16>, Shape) {
    let oh = (shape.h + 2 * p - k) / s + 1;
    let ow = (shape.w + 2 * p - k) / s + 1;
    let mut out = Vec::with_capacity(c_out * oh * ow);
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = w.bias.as_ref().map_or(0, |b| b[co] as i64);
                for ci in 0..shape.c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= shape.h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix as usize >= shape.w {
                                continue;
                            }
                            acc += w.at(co, ci, ky, kx) as i64
                                * x[shape.index(ci, iy as usize, ix as usize)] as i64;
                        }
                    }
                }
                let v = requantize(acc, w.frac_bits);
                out.push(if relu { v.max(0) } else { v });
            }
        }
    }
    (out, Shape::new(c_out, oh, ow))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerTileStats {
    pub units: usize,
    pub per_unit: Vec<UnitStat>,
    pub total_macs: u64,
    pub total_fetched_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileStats {
    pub layers: Vec<LayerTileStats>,
}

impl TileStats {
    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.units).sum()
    }
}

/// Tile-by-tile inference following `design`; bit-identical to
/// [`run_reference`] for every valid design.
pub fn run_tiled(
    net: &NetworkSpec,
    input: &QTensor,
    design: &ExecutionDesign,
) -> Result<(QTensor, TileStats)> {
    check_input(net, input)?;
    design.check(net)?;
    let shapes = net.shapes()?;
    let mut cur = input.data.clone();
    let mut stats = TileStats::default();
    for (i, layer) in net.layers.iter().enumerate() {
        let (in_shape, out_shape) = (shapes[i], shapes[i + 1]);
        let geom = UnitGeometry::of(layer);
        let relu = applies_relu(net, i);
        let mut out = vec![0i16; out_shape.numel()];
        let mut ls = LayerTileStats::default();
        for block in unit_blocks(out_shape, &design.tiles[i]) {
            let values = compute_unit(layer, net.weights[i].as_ref(), &cur, in_shape, &block, relu);
            scatter_unit(&mut out, out_shape, &block, &values);
            let (tc, th, tw) = block.dims();
            let st = geom.unit_stat(tc, th, tw);
            ls.total_macs += st.macs;
            ls.total_fetched_bytes += st.fetched_bytes;
            ls.per_unit.push(st);
        }
        ls.units = ls.per_unit.len();
        stats.layers.push(ls);
        cur = out;
    }
    Ok((
        QTensor::new(*shapes.last().unwrap(), net.act_frac_bits, cur)?,
        stats,
    ))
}
