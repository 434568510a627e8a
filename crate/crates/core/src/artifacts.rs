//! Weight header emission, per-layer CSV export and JSON persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::ExecutionDesign;
use crate::intermittent::{CostParams, FaultTrace, PowerParams};
use crate::model::{LayerSpec, NetworkSpec, WeightTensor};
use crate::scheduler::TaskSet;

const VALUES_PER_LINE: usize = 16;

fn layer_kind(layer: &LayerSpec) -> &'static str {
    match layer {
        LayerSpec::Conv2D { .. } => "LAYER_CONV",
        LayerSpec::MaxPool2D { .. } => "LAYER_POOL",
        LayerSpec::FullyConnected { .. } => "LAYER_FC",
    }
}

fn push_array<T: std::fmt::Display>(out: &mut String, ty: &str, name: &str, values: &[T]) {
    let body: Vec<String> = values.iter().map(ToString::to_string).collect();
    if body.len() <= VALUES_PER_LINE {
        let _ = writeln!(
            out,
            "static const {ty} {name}[{}] = {{{}}};",
            body.len(),
            body.join(", ")
        );
        return;
    }
    let _ = writeln!(out, "static const {ty} {name}[{}] = {{", body.len());
    for chunk in body.chunks(VALUES_PER_LINE) {
        let _ = writeln!(out, "    {},", chunk.join(", "));
    }
    out.push_str("};\n");
}

/// C header with network structure macros, the execution design and one
/// `int16_t` array per weighted layer. Output is a pure function of its inputs.
pub fn dump_header(net: &NetworkSpec, design: &ExecutionDesign) -> Result<String> {
    net.validate()?;
    design.check(net)?;
    let shapes = net.shapes()?;
    let mut h = String::new();
    h.push_str("#ifndef HYPERTILE_NET_H\n#define HYPERTILE_NET_H\n\n#include <stdint.h>\n\n");
    h.push_str("#define LAYER_CONV 0\n#define LAYER_POOL 1\n#define LAYER_FC 2\n\n");
    for (i, o) in crate::exec::LoopOrder::ALL.iter().enumerate() {
        let _ = writeln!(h, "#define LOOP_{} {i}", o.name());
    }
    h.push('\n');
    let inp = net.input_shape;
    let _ = writeln!(h, "#define NET_NUM_LAYERS {}", net.layers.len());
    let _ = writeln!(h, "#define NET_INPUT_C {}", inp.c);
    let _ = writeln!(h, "#define NET_INPUT_H {}", inp.h);
    let _ = writeln!(h, "#define NET_INPUT_W {}", inp.w);
    let _ = writeln!(h, "#define NET_ACT_FRAC_BITS {}", net.act_frac_bits);
    let _ = writeln!(h, "#define NET_OUTPUT_CLASSES {}", net.output_classes);
    let _ = writeln!(h, "#define NET_BATCH_S {}", design.batch_size);

    for (i, layer) in net.layers.iter().enumerate() {
        let (ins, outs) = (shapes[i], shapes[i + 1]);
        let (k, s, p) = match *layer {
            LayerSpec::Conv2D {
                kernel,
                stride,
                padding,
                ..
            } => (kernel, stride, padding),
            LayerSpec::MaxPool2D { window, stride } => (window, stride, 0),
            LayerSpec::FullyConnected { .. } => (1, 1, 0),
        };
        let frac = net.weights[i]
            .as_ref()
            .map_or(net.act_frac_bits, |w| w.frac_bits);
        let tile = &design.tiles[i];
        let _ = writeln!(h, "\n/* layer {i}: {} */", layer.name());
        let macros: [(&str, String); 17] = [
            ("KIND", layer_kind(layer).to_string()),
            ("C_IN", ins.c.to_string()),
            ("IN_H", ins.h.to_string()),
            ("IN_W", ins.w.to_string()),
            ("C_OUT", outs.c.to_string()),
            ("OUT_H", outs.h.to_string()),
            ("OUT_W", outs.w.to_string()),
            ("K", k.to_string()),
            ("S", s.to_string()),
            ("P", p.to_string()),
            ("FRAC_BITS", frac.to_string()),
            (
                "HAS_BIAS",
                u8::from(net.weights[i].as_ref().is_some_and(|w| w.bias.is_some())).to_string(),
            ),
            ("TILE_COUT", tile.t_cout.to_string()),
            ("TILE_H", tile.t_h.to_string()),
            ("TILE_W", tile.t_w.to_string()),
            ("LOOP_ORDER", format!("LOOP_{}", tile.loop_order.name())),
            (
                "N_WEIGHTS",
                net.weights[i].as_ref().map_or(0, |w| w.numel()).to_string(),
            ),
        ];
        for (name, v) in macros {
            let _ = writeln!(h, "#define L{i}_{name} {v}");
        }
        if let Some(w) = &net.weights[i] {
            push_array(&mut h, "int16_t", &format!("l{i}_w"), &w.data);
            if let Some(b) = &w.bias {
                push_array(&mut h, "int32_t", &format!("l{i}_b"), b);
            }
        }
    }
    h.push_str("\n#endif /* HYPERTILE_NET_H */\n");
    Ok(h)
}

/// Weights of every weighted layer, keyed by layer index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CsvWeightSet {
    pub layers: BTreeMap<usize, WeightTensor>,
}

impl CsvWeightSet {
    pub fn from_network(net: &NetworkSpec) -> Self {
        Self {
            layers: net
                .weights
                .iter()
                .enumerate()
                .filter_map(|(i, w)| w.clone().map(|w| (i, w)))
                .collect(),
        }
    }

    /// Replaces the weights of `net` with this set; layer indices and
    /// dimensions must line up.
    pub fn apply(&self, net: &NetworkSpec) -> Result<NetworkSpec> {
        let mut out = net.clone();
        for slot in out.weights.iter_mut() {
            *slot = None;
        }
        for (&i, w) in &self.layers {
            if i >= out.weights.len() {
                return Err(Error::Param(format!(
                    "weights for layer {i}, network has {}",
                    net.layers.len()
                )));
            }
            out.weights[i] = Some(w.clone());
        }
        out.validate()?;
        Ok(out)
    }
}

pub fn csv_file_name(layer: usize) -> String {
    format!("layer_{layer:03}.csv")
}

/// Text of one layer file.
pub fn weights_to_csv(w: &WeightTensor) -> String {
    let mut s = format!(
        "# shape: {},{},{},{},{}\n",
        w.c_out, w.c_in, w.kh, w.kw, w.frac_bits
    );
    if let Some(b) = &w.bias {
        let cells: Vec<String> = b.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "# bias: {}", cells.join(","));
    }
    for co in 0..w.c_out {
        let cells: Vec<String> = w.row(co).iter().map(ToString::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes `layer_NNN.csv` for every weighted layer.
pub fn dump_csv(net: &NetworkSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    net.validate()?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, w) in net.weights.iter().enumerate() {
        if let Some(w) = w {
            let path = dir.join(csv_file_name(i));
            fs::write(&path, weights_to_csv(w))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn parse_cells<T: std::str::FromStr>(text: &str, file: &Path, line: usize) -> Result<Vec<T>> {
    text.split(',')
        .enumerate()
        .map(|(col, c)| {
            c.trim().parse::<T>().map_err(|_| Error::Parse {
                file: file.to_path_buf(),
                line,
                message: format!("column {}: `{}` is not a valid integer", col + 1, c.trim()),
            })
        })
        .collect()
}

/// Parses one layer file; `file` is only used in error messages.
pub fn weights_from_csv(text: &str, file: &Path) -> Result<WeightTensor> {
    let err = |line: usize, message: String| Error::Parse {
        file: file.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let dims = first
        .strip_prefix("# shape:")
        .ok_or_else(|| err(n, "expected `# shape: c_out,c_in,kh,kw,frac_bits`".into()))?;
    let dims: Vec<usize> = parse_cells(dims, file, n)?;
    if dims.len() != 5 {
        return Err(err(
            n,
            format!("shape line has {} fields, expected 5", dims.len()),
        ));
    }
    let (c_out, c_in, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
    if dims[..4].contains(&0) {
        return Err(err(n, "shape dimensions must be >= 1".into()));
    }
    let frac_bits = u8::try_from(dims[4])
        .ok()
        .filter(|&f| f <= crate::model::MAX_FRAC_BITS)
        .ok_or_else(|| err(n, format!("frac_bits {} out of range", dims[4])))?;

    let row_len = c_in * kh * kw;
    let mut bias = None;
    let mut data = Vec::with_capacity(c_out * row_len);
    let mut rows = 0usize;
    let mut last_line = n;
    for (n, line) in lines {
        last_line = n;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(b) = line.strip_prefix("# bias:") {
            if bias.is_some() || rows > 0 {
                return Err(err(
                    n,
                    "bias line must directly follow the shape line".into(),
                ));
            }
            let b: Vec<i32> = parse_cells(b, file, n)?;
            if b.len() != c_out {
                return Err(err(
                    n,
                    format!("bias has {} values, expected {c_out}", b.len()),
                ));
            }
            bias = Some(b);
            continue;
        }
        let cells: Vec<i16> = parse_cells(line, file, n)?;
        if cells.len() != row_len {
            return Err(err(
                n,
                format!("row has {} values, expected {row_len}", cells.len()),
            ));
        }
        rows += 1;
        if rows > c_out {
            return Err(err(n, format!("more than {c_out} rows")));
        }
        data.extend(cells);
    }
    if rows != c_out {
        return Err(err(
            last_line,
            format!("{rows} rows, shape line declares c_out = {c_out}"),
        ));
    }
    Ok(WeightTensor {
        c_out,
        c_in,
        kh,
        kw,
        frac_bits,
        data,
        bias,
    })
}

/// Reads every `layer_NNN.csv` in `dir`.
pub fn load_csv(dir: &Path) -> Result<CsvWeightSet> {
    let mut set = CsvWeightSet::default();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(idx) = name
            .strip_prefix("layer_")
            .and_then(|r| r.strip_suffix(".csv"))
            .and_then(|d| d.parse::<usize>().ok())
        else {
            continue;
        };
        let text = fs::read_to_string(&path)?;
        set.layers.insert(idx, weights_from_csv(&text, &path)?);
    }
    if set.layers.is_empty() {
        return Err(Error::Csv {
            message: format!("no layer files in {}", dir.display()),
        });
    }
    Ok(set)
}

/// Post-parse checks for JSON documents.
pub trait Validate {
    fn validate_doc(&self) -> Result<()> {
        Ok(())
    }
}

impl Validate for NetworkSpec {
    fn validate_doc(&self) -> Result<()> {
        self.validate()
    }
}

impl Validate for ExecutionDesign {
    fn validate_doc(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Design("batch size S must be >= 1".into()));
        }
        if self
            .tiles
            .iter()
            .any(|t| t.t_cout == 0 || t.t_h == 0 || t.t_w == 0)
        {
            return Err(Error::Design("tile sizes must be >= 1".into()));
        }
        Ok(())
    }
}

impl Validate for PowerParams {
    fn validate_doc(&self) -> Result<()> {
        self.check()
    }
}

impl Validate for CostParams {
    fn validate_doc(&self) -> Result<()> {
        self.check()
    }
}

impl Validate for FaultTrace {
    fn validate_doc(&self) -> Result<()> {
        self.check()
    }
}

impl Validate for TaskSet {
    fn validate_doc(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id) {
                return Err(Error::Param(format!("duplicate task id {}", t.id)));
            }
            if t.period == 0 || t.deadline == 0 || t.deadline > t.period {
                return Err(Error::Param(format!(
                    "task {}: need T > 0 and 0 < D <= T",
                    t.id
                )));
            }
            t.network.validate()?;
            t.design.check(&t.network)?;
        }
        if self.ticks_per_energy == 0 {
            return Err(Error::Param("ticks_per_energy must be >= 1".into()));
        }
        Ok(())
    }
}

impl Validate for crate::scheduler::TaskSpec {}
impl Validate for crate::exec::TileStats {}
impl Validate for crate::intermittent::SimResult {}
impl Validate for crate::perfmodel::PerfEstimate {}
impl Validate for crate::explorer::SearchResult {}
impl Validate for crate::explorer::SearchSpace {
    fn validate_doc(&self) -> Result<()> {
        self.check()
    }
}
impl Validate for crate::explorer::DesignCaps {
    fn validate_doc(&self) -> Result<()> {
        self.check()
    }
}
impl Validate for crate::explorer::RewardParams {
    fn validate_doc(&self) -> Result<()> {
        self.check()
    }
}
impl Validate for crate::explorer::EvolveParams {}
impl Validate for crate::explorer::BestDesign {}
impl Validate for crate::scheduler::SchedVerdict {}
impl Validate for crate::scheduler::ScheduleTrace {}
impl Validate for crate::model::QTensor {
    fn validate_doc(&self) -> Result<()> {
        self.check()
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: ".".into(),
        message: e.to_string(),
    })?;
    s.push('\n');
    Ok(s)
}

/// Parses and validates; schema errors name the offending JSON path.
pub fn from_json<T: DeserializeOwned + Validate>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    value.validate_doc()?;
    Ok(value)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned + Validate>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    from_json(&text).map_err(|e| match e {
        Error::Json { path: p, message } => Error::Json {
            path: p,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}
