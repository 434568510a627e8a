//! Network IR, Q-format fixed-point helpers and tensor containers.
//!
//! Every value is an `i16` in Q-format: the real value is `stored * 2^-frac_bits`.
//! Convolutions accumulate in `i64`, so summation order never changes a result.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_FRAC_BITS: u8 = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.c, self.h, self.w)
    }
}

/// Activation tensor, row-major `(c, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTensor {
    pub shape: Shape,
    pub frac_bits: u8,
    pub data: Vec<i16>,
}

impl QTensor {
    pub fn new(shape: Shape, frac_bits: u8, data: Vec<i16>) -> Result<Self> {
        let t = Self {
            shape,
            frac_bits,
            data,
        };
        t.check()?;
        Ok(t)
    }

    pub fn zeros(shape: Shape, frac_bits: u8) -> Self {
        Self {
            shape,
            frac_bits,
            data: vec![0; shape.numel()],
        }
    }

    pub fn check(&self) -> Result<()> {
        check_frac(self.frac_bits)?;
        if self.data.len() != self.shape.numel() {
            return Err(Error::Shape(format!(
                "tensor of shape {} needs {} elements, has {}",
                self.shape,
                self.shape.numel(),
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> i16 {
        self.data[self.shape.index(c, y, x)]
    }

    /// Index of the largest element; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn to_f64(&self) -> Vec<f64> {
        dequantize(&self.data, self.frac_bits)
    }
}

/// Conv / FC weights, stored uniformly as `(c_out, c_in, kh, kw)`.
///
/// FC layers use `kh = kw = 1`. Biases, when present, are already at the
/// accumulator scale `frac_bits + activation frac_bits`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightTensor {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub frac_bits: u8,
    pub data: Vec<i16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<i32>>,
}

impl WeightTensor {
    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize, frac_bits: u8) -> Self {
        Self {
            c_out,
            c_in,
            kh,
            kw,
            frac_bits,
            data: vec![0; c_out * c_in * kh * kw],
            bias: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    pub fn index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx
    }

    pub fn at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> i16 {
        self.data[self.index(co, ci, ky, kx)]
    }

    /// Weights of one output channel, `c_in * kh * kw` values.
    pub fn row(&self, co: usize) -> &[i16] {
        let n = self.c_in * self.kh * self.kw;
        &self.data[co * n..(co + 1) * n]
    }

    pub fn param_count(&self) -> usize {
        self.numel() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2D {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2D {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        n_in: usize,
        n_out: usize,
    },
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2D {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    pub fn pool(window: usize, stride: usize) -> Self {
        LayerSpec::MaxPool2D { window, stride }
    }

    pub fn fc(n_in: usize, n_out: usize) -> Self {
        LayerSpec::FullyConnected { n_in, n_out }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "conv",
            LayerSpec::MaxPool2D { .. } => "pool",
            LayerSpec::FullyConnected { .. } => "fc",
        }
    }

    pub fn has_weights(&self) -> bool {
        !matches!(self, LayerSpec::MaxPool2D { .. })
    }

    /// Expected weight dims `(c_out, c_in, kh, kw)`, if the layer has weights.
    pub fn weight_dims(&self) -> Option<(usize, usize, usize, usize)> {
        match *self {
            LayerSpec::Conv2D {
                c_in,
                c_out,
                kernel,
                ..
            } => Some((c_out, c_in, kernel, kernel)),
            LayerSpec::FullyConnected { n_in, n_out } => Some((n_out, n_in, 1, 1)),
            LayerSpec::MaxPool2D { .. } => None,
        }
    }

    fn check_params(&self) -> std::result::Result<(), String> {
        match *self {
            LayerSpec::Conv2D {
                c_in,
                c_out,
                kernel,
                stride,
                ..
            } => {
                if c_in == 0 || c_out == 0 {
                    return Err("conv channels must be >= 1".into());
                }
                if kernel == 0 || stride == 0 {
                    return Err("conv kernel and stride must be >= 1".into());
                }
                if kernel % 2 == 0 {
                    return Err(format!("conv kernel {kernel} must be odd"));
                }
            }
            LayerSpec::MaxPool2D { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err("pool window and stride must be >= 1".into());
                }
            }
            LayerSpec::FullyConnected { n_in, n_out } => {
                if n_in == 0 || n_out == 0 {
                    return Err("fc sizes must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

/// Output shape of `layer` applied to an input of shape `input`.
///
/// FC layers flatten their input, so only the element count must match.
pub fn conv_output_shape(layer: &LayerSpec, input: Shape) -> Result<Shape> {
    match *layer {
        LayerSpec::Conv2D {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        } => {
            if input.c != c_in {
                return Err(Error::Shape(format!(
                    "conv expects {c_in} input channels, got {}",
                    input.c
                )));
            }
            let (h, w) = window_out(input, kernel, stride, padding)?;
            Ok(Shape::new(c_out, h, w))
        }
        LayerSpec::MaxPool2D { window, stride } => {
            let (h, w) = window_out(input, window, stride, 0)?;
            Ok(Shape::new(input.c, h, w))
        }
        LayerSpec::FullyConnected { n_in, n_out } => {
            if input.numel() != n_in {
                return Err(Error::Shape(format!(
                    "fc expects {n_in} inputs, got {} from {input}",
                    input.numel()
                )));
            }
            Ok(Shape::new(n_out, 1, 1))
        }
    }
}

fn window_out(input: Shape, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(Error::Shape("kernel and stride must be >= 1".into()));
    }
    if input.h + 2 * p < k || input.w + 2 * p < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {input} (padding {p})"
        )));
    }
    Ok(((input.h + 2 * p - k) / s + 1, (input.w + 2 * p - k) / s + 1))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Violation {
    pub layer: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Shape,
    /// Q-format of every activation tensor, including the input.
    pub act_frac_bits: u8,
    pub layers: Vec<LayerSpec>,
    /// One entry per layer; `None` for pooling layers.
    pub weights: Vec<Option<WeightTensor>>,
    pub output_classes: usize,
}

impl NetworkSpec {
    /// Input shape of every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape;
        shapes.push(cur);
        for (i, layer) in self.layers.iter().enumerate() {
            cur = conv_output_shape(layer, cur)
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shapes()?.last().unwrap())
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_network(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Network(v))
        }
    }
}

/// Collects every invariant violation; an empty list means the network is valid.
pub fn validate_network(net: &NetworkSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |layer: Option<usize>, message: String| out.push(Violation { layer, message });

    if net.layers.is_empty() {
        push(None, "no layers".into());
    }
    if net.input_shape.numel() == 0 {
        push(None, format!("input shape {} is empty", net.input_shape));
    }
    if net.act_frac_bits > MAX_FRAC_BITS {
        push(None, format!("act_frac_bits {} > 15", net.act_frac_bits));
    }
    if net.weights.len() != net.layers.len() {
        push(
            None,
            format!(
                "{} weight entries for {} layers",
                net.weights.len(),
                net.layers.len()
            ),
        );
    }

    let mut cur = Some(net.input_shape);
    for (i, layer) in net.layers.iter().enumerate() {
        if let Err(m) = layer.check_params() {
            push(Some(i), m);
        }
        if let Some(shape) = cur {
            cur = match conv_output_shape(layer, shape) {
                Ok(s) => Some(s),
                Err(e) => {
                    push(Some(i), e.to_string());
                    None
                }
            };
        }
        match (layer.weight_dims(), net.weights.get(i)) {
            (Some(dims), Some(Some(w))) => {
                if (w.c_out, w.c_in, w.kh, w.kw) != dims {
                    push(
                        Some(i),
                        format!(
                            "weight dims ({},{},{},{}) do not match layer ({},{},{},{})",
                            w.c_out, w.c_in, w.kh, w.kw, dims.0, dims.1, dims.2, dims.3
                        ),
                    );
                }
                if w.data.len() != w.numel() {
                    push(
                        Some(i),
                        format!(
                            "weight data has {} elements, expected {}",
                            w.data.len(),
                            w.numel()
                        ),
                    );
                }
                if w.frac_bits > MAX_FRAC_BITS {
                    push(Some(i), format!("weight frac_bits {} > 15", w.frac_bits));
                }
                if let Some(b) = &w.bias {
                    if b.len() != w.c_out {
                        push(
                            Some(i),
                            format!("bias has {} entries, expected {}", b.len(), w.c_out),
                        );
                    }
                }
            }
            (Some(_), Some(None)) => push(Some(i), "missing weights".into()),
            (None, Some(Some(_))) => push(Some(i), "pooling layer must not carry weights".into()),
            _ => {}
        }
    }
    if let Some(shape) = cur {
        if !net.layers.is_empty() && shape.numel() != net.output_classes {
            push(
                None,
                format!(
                    "final output {shape} has {} elements, output_classes is {}",
                    shape.numel(),
                    net.output_classes
                ),
            );
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

fn counts(per_layer: Vec<u64>) -> OpCounts {
    let total = per_layer.iter().sum();
    OpCounts { per_layer, total }
}

/// MACs per layer: conv `h_out*w_out*c_out*k*k*c_in`, fc `n_in*n_out`, pool 0.
pub fn count_macs(net: &NetworkSpec) -> Result<OpCounts> {
    net.validate()?;
    let shapes = net.shapes()?;
    let per = net
        .layers
        .iter()
        .zip(&shapes[1..])
        .map(|(layer, out)| match *layer {
            LayerSpec::Conv2D { c_in, kernel, .. } => {
                (out.h * out.w * out.c * kernel * kernel * c_in) as u64
            }
            LayerSpec::FullyConnected { n_in, n_out } => (n_in * n_out) as u64,
            LayerSpec::MaxPool2D { .. } => 0,
        })
        .collect();
    Ok(counts(per))
}

/// Weight plus bias element counts per layer.
pub fn count_params(net: &NetworkSpec) -> Result<OpCounts> {
    net.validate()?;
    let per = net
        .weights
        .iter()
        .map(|w| w.as_ref().map_or(0, |w| w.param_count() as u64))
        .collect();
    Ok(counts(per))
}

fn check_frac(frac_bits: u8) -> Result<()> {
    if frac_bits > MAX_FRAC_BITS {
        return Err(Error::Param(format!(
            "frac_bits {frac_bits} outside [0, {MAX_FRAC_BITS}]"
        )));
    }
    Ok(())
}

pub fn quantize_value(x: f64, frac_bits: u8) -> Result<i16> {
    check_frac(frac_bits)?;
    Ok(saturate((x * (1u32 << frac_bits) as f64).round()))
}

/// `clamp(round_half_away_from_zero(x * 2^frac_bits), i16::MIN, i16::MAX)`.
pub fn quantize(xs: &[f64], frac_bits: u8) -> Result<Vec<i16>> {
    check_frac(frac_bits)?;
    let scale = (1u32 << frac_bits) as f64;
    Ok(xs.iter().map(|x| saturate((x * scale).round())).collect())
}

pub fn dequantize(xs: &[i16], frac_bits: u8) -> Vec<f64> {
    let scale = 1.0 / (1u64 << frac_bits.min(63)) as f64;
    xs.iter().map(|&v| v as f64 * scale).collect()
}

fn saturate(v: f64) -> i16 {
    // NaN maps to 0 via the `as` cast after clamping.
    v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Divide an accumulator by `2^shift` rounding half away from zero, then
/// saturate to `i16`.
pub fn requantize(acc: i64, shift: u8) -> i16 {
    let v = if shift == 0 {
        acc
    } else {
        let half = 1i64 << (shift - 1);
        if acc >= 0 {
            (acc + half) >> shift
        } else {
            -((-acc + half) >> shift)
        }
    };
    v.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}
