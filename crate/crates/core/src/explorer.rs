//! Execution-design search and evolutionary architecture search.
//!
//! Candidate networks are carved out of a maximal supernet (kernel centre
//! crop, L1-ranked channel selection, trailing-conv depth drop), paired with
//! the lowest-latency feasible execution design, scored by an accuracy
//! evaluator and ranked by a reward that trades accuracy against latency.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ExecutionDesign, LoopOrder, TileConfig};
use crate::intermittent::{CostParams, PowerParams};
use crate::model::{count_params, LayerSpec, NetworkSpec, Shape, WeightTensor};
use crate::perfmodel::{feasible, predict, PerfEstimate};
use crate::rng::SplitMix64;

/// Upper bound on the number of designs `best_design` will scan.
pub const MAX_DESIGN_SPACE: u64 = 50_000_000;

/// Candidate values for each design knob.
///
/// With `shared_tiles`, one tile template is applied to every layer (each
/// dimension clamped to the layer's output); otherwise every layer picks its
/// own tile independently and the space is the full cross product.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignCaps {
    pub t_cout: Vec<usize>,
    pub t_h: Vec<usize>,
    pub t_w: Vec<usize>,
    pub loop_orders: Vec<LoopOrder>,
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub shared_tiles: bool,
}

impl Default for DesignCaps {
    fn default() -> Self {
        Self::up_to(8, 16)
    }
}

impl DesignCaps {
    /// Tiles `1..=max_tile` in every dimension, all loop orders, S in `1..=max_s`.
    pub fn up_to(max_tile: usize, max_s: usize) -> Self {
        Self {
            t_cout: (1..=max_tile).collect(),
            t_h: (1..=max_tile).collect(),
            t_w: (1..=max_tile).collect(),
            loop_orders: LoopOrder::ALL.to_vec(),
            batch_sizes: (1..=max_s).collect(),
            shared_tiles: false,
        }
    }

    /// Shared-template space used by the architecture search.
    pub fn nas_default() -> Self {
        Self {
            t_cout: vec![1, 2, 4, 8, 16],
            t_h: vec![1, 2, 4, 8],
            t_w: vec![1, 2, 4, 8],
            loop_orders: LoopOrder::ALL.to_vec(),
            batch_sizes: vec![1, 2, 4, 8, 16],
            shared_tiles: true,
        }
    }

    pub fn check(&self) -> Result<()> {
        let lists: [(&str, &Vec<usize>); 4] = [
            ("t_cout", &self.t_cout),
            ("t_h", &self.t_h),
            ("t_w", &self.t_w),
            ("batch_sizes", &self.batch_sizes),
        ];
        for (name, l) in lists {
            if l.contains(&0) {
                return Err(Error::Param(format!("{name} values must be >= 1")));
            }
        }
        Ok(())
    }

    fn normalized(&self) -> Self {
        let sorted = |v: &Vec<usize>| {
            let mut v = v.clone();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut orders = self.loop_orders.clone();
        orders.sort_unstable();
        orders.dedup();
        Self {
            t_cout: sorted(&self.t_cout),
            t_h: sorted(&self.t_h),
            t_w: sorted(&self.t_w),
            loop_orders: orders,
            batch_sizes: sorted(&self.batch_sizes),
            shared_tiles: self.shared_tiles,
        }
    }
}

/// Indexable, lexicographically ordered set of execution designs.
///
/// Index order: batch size (most significant), then layer 0's tile, layer 1's
/// tile, ...; each tile ordered by `(t_cout, t_h, t_w, loop order)`.
#[derive(Clone, Debug)]
pub struct DesignSpace {
    batch_sizes: Vec<usize>,
    /// Per-layer tile options, or a single list of templates when shared.
    options: Vec<Vec<TileConfig>>,
    outputs: Vec<Shape>,
    shared: bool,
    per_batch: u64,
    len: u64,
}

fn tile_options(caps: &DesignCaps, limit: Option<Shape>) -> Vec<TileConfig> {
    let ok = |v: usize, max: Option<usize>| max.is_none_or(|m| v <= m);
    let mut out = Vec::new();
    for &tc in caps.t_cout.iter().filter(|&&v| ok(v, limit.map(|s| s.c))) {
        for &th in caps.t_h.iter().filter(|&&v| ok(v, limit.map(|s| s.h))) {
            for &tw in caps.t_w.iter().filter(|&&v| ok(v, limit.map(|s| s.w))) {
                for &o in &caps.loop_orders {
                    out.push(TileConfig::new(tc, th, tw, o));
                }
            }
        }
    }
    out
}

impl DesignSpace {
    pub fn new(net: &NetworkSpec, caps: &DesignCaps) -> Result<Self> {
        net.validate()?;
        caps.check()?;
        let caps = caps.normalized();
        let outputs = net.shapes()?[1..].to_vec();
        let options: Vec<Vec<TileConfig>> = if caps.shared_tiles {
            vec![tile_options(&caps, None)]
        } else {
            outputs
                .iter()
                .map(|&s| tile_options(&caps, Some(s)))
                .collect()
        };
        let per_batch = options
            .iter()
            .try_fold(1u64, |acc, o| acc.checked_mul(o.len() as u64))
            .ok_or_else(|| Error::Param("design space size overflows u64".into()))?;
        let len = per_batch
            .checked_mul(caps.batch_sizes.len() as u64)
            .ok_or_else(|| Error::Param("design space size overflows u64".into()))?;
        Ok(Self {
            batch_sizes: caps.batch_sizes,
            options,
            outputs,
            shared: caps.shared_tiles,
            per_batch,
            len,
        })
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, index: u64) -> ExecutionDesign {
        assert!(index < self.len, "design index out of range");
        let batch_size = self.batch_sizes[(index / self.per_batch) as usize];
        let mut rem = index % self.per_batch;
        let tiles = if self.shared {
            let t = self.options[0][rem as usize];
            self.outputs
                .iter()
                .map(|o| {
                    TileConfig::new(
                        t.t_cout.min(o.c),
                        t.t_h.min(o.h),
                        t.t_w.min(o.w),
                        t.loop_order,
                    )
                })
                .collect()
        } else {
            let mut tiles = vec![self.options[0][0]; self.options.len()];
            for (l, opts) in self.options.iter().enumerate().rev() {
                let n = opts.len() as u64;
                tiles[l] = opts[(rem % n) as usize];
                rem /= n;
            }
            tiles
        };
        ExecutionDesign { tiles, batch_size }
    }

    pub fn iter(&self) -> impl Iterator<Item = ExecutionDesign> + '_ {
        (0..self.len).map(|i| self.get(i))
    }
}

/// Every design within `caps`, in lexicographic order.
pub fn enumerate_designs(
    net: &NetworkSpec,
    caps: &DesignCaps,
) -> Result<impl Iterator<Item = ExecutionDesign>> {
    let space = DesignSpace::new(net, caps)?;
    Ok((0..space.len()).map(move |i| space.get(i)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestDesign {
    pub design: ExecutionDesign,
    pub estimate: PerfEstimate,
    /// Position in the design space enumeration.
    pub index: u64,
}

/// Lowest predicted latency among feasible designs meeting `latency_requirement`;
/// ties go to the earlier design (smaller S first). `None` when nothing qualifies.
pub fn best_design(
    net: &NetworkSpec,
    power: &PowerParams,
    costs: &CostParams,
    latency_requirement: u64,
    caps: &DesignCaps,
) -> Result<Option<BestDesign>> {
    let space = DesignSpace::new(net, caps)?;
    if space.len() > MAX_DESIGN_SPACE {
        return Err(Error::Param(format!(
            "design space has {} designs (limit {MAX_DESIGN_SPACE}); narrow the caps or use shared tiles",
            space.len()
        )));
    }
    let eval = |i: u64| -> Option<(u64, u64)> {
        let d = space.get(i);
        feasible(net, &d, power, costs).ok()?;
        let est = predict(net, &d, power, costs).ok()?;
        (est.latency_ticks <= latency_requirement).then_some((est.latency_ticks, i))
    };
    #[cfg(feature = "parallel")]
    let best = {
        use rayon::prelude::*;
        (0..space.len()).into_par_iter().filter_map(eval).min()
    };
    #[cfg(not(feature = "parallel"))]
    let best = (0..space.len()).filter_map(eval).min();

    Ok(best.map(|(_, index)| {
        let design = space.get(index);
        let estimate = predict(net, &design, power, costs).expect("re-predict of feasible design");
        BestDesign {
            design,
            estimate,
            index,
        }
    }))
}

// ---------------------------------------------------------------------------
// architectures

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
}

/// Conv stages, each followed by a 2x2 stride-2 max-pool, then an FC head.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub stages: Vec<StageConfig>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub stage_counts: Vec<usize>,
    pub depths: Vec<usize>,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub input_shape: Shape,
    pub output_classes: usize,
    pub act_frac_bits: u8,
    pub weight_frac_bits: u8,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            stage_counts: vec![2, 3, 4],
            depths: vec![1, 2],
            channels: vec![4, 8, 12, 16],
            kernels: vec![1, 3, 5],
            input_shape: Shape::new(3, 16, 16),
            output_classes: 10,
            act_frac_bits: 8,
            weight_frac_bits: 8,
        }
    }
}

impl SearchSpace {
    pub fn check(&self) -> Result<()> {
        let lists = [
            ("stage_counts", &self.stage_counts),
            ("depths", &self.depths),
            ("channels", &self.channels),
            ("kernels", &self.kernels),
        ];
        for (name, l) in lists {
            if l.is_empty() || l.contains(&0) {
                return Err(Error::Param(format!("{name} must be non-empty and >= 1")));
            }
            if l.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Param(format!("{name} must be strictly increasing")));
            }
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Param(format!("kernel {k} must be odd")));
        }
        let max_stages = *self.stage_counts.last().unwrap();
        if self.input_shape.h >> max_stages == 0 || self.input_shape.w >> max_stages == 0 {
            return Err(Error::Param(format!(
                "input {} too small for {max_stages} pooling stages",
                self.input_shape
            )));
        }
        if self.output_classes == 0 || self.input_shape.c == 0 {
            return Err(Error::Param("empty input or output".into()));
        }
        if self.act_frac_bits > 15 || self.weight_frac_bits > 15 {
            return Err(Error::Param("frac bits must be <= 15".into()));
        }
        Ok(())
    }

    fn per_stage(&self) -> u64 {
        (self.depths.len() * self.channels.len() * self.kernels.len()) as u64
    }

    pub fn arch_count(&self) -> u64 {
        let p = self.per_stage();
        self.stage_counts.iter().map(|&n| p.pow(n as u32)).sum()
    }

    /// Architecture at position `index` (stage count, then stages with the
    /// first stage most significant; within a stage depth, channels, kernel).
    pub fn arch_at(&self, mut index: u64) -> ArchConfig {
        let p = self.per_stage();
        for &n in &self.stage_counts {
            let block = p.pow(n as u32);
            if index < block {
                let mut stages = vec![
                    StageConfig {
                        depth: 0,
                        channels: 0,
                        kernel: 0
                    };
                    n
                ];
                for s in (0..n).rev() {
                    let mut digit = (index % p) as usize;
                    index /= p;
                    let k = digit % self.kernels.len();
                    digit /= self.kernels.len();
                    let c = digit % self.channels.len();
                    let d = digit / self.channels.len();
                    stages[s] = StageConfig {
                        depth: self.depths[d],
                        channels: self.channels[c],
                        kernel: self.kernels[k],
                    };
                }
                return ArchConfig { stages };
            }
            index -= block;
        }
        panic!("architecture index out of range");
    }

    pub fn index_of(&self, arch: &ArchConfig) -> Option<u64> {
        let p = self.per_stage();
        let mut offset = 0u64;
        for &n in &self.stage_counts {
            if n == arch.stages.len() {
                let mut idx = 0u64;
                for st in &arch.stages {
                    let d = self.depths.iter().position(|&v| v == st.depth)?;
                    let c = self.channels.iter().position(|&v| v == st.channels)?;
                    let k = self.kernels.iter().position(|&v| v == st.kernel)?;
                    let digit = (d * self.channels.len() + c) * self.kernels.len() + k;
                    idx = idx * p + digit as u64;
                }
                return Some(offset + idx);
            }
            offset += p.pow(n as u32);
        }
        None
    }

    /// Largest architecture with `stage_count` stages.
    pub fn maximal(&self, stage_count: usize) -> ArchConfig {
        ArchConfig {
            stages: vec![
                StageConfig {
                    depth: *self.depths.last().unwrap(),
                    channels: *self.channels.last().unwrap(),
                    kernel: *self.kernels.last().unwrap(),
                };
                stage_count
            ],
        }
    }

    fn random_stage(&self, rng: &mut SplitMix64) -> StageConfig {
        StageConfig {
            depth: *rng.pick(&self.depths),
            channels: *rng.pick(&self.channels),
            kernel: *rng.pick(&self.kernels),
        }
    }

    pub fn random_arch(&self, rng: &mut SplitMix64) -> ArchConfig {
        let n = *rng.pick(&self.stage_counts);
        ArchConfig {
            stages: (0..n).map(|_| self.random_stage(rng)).collect(),
        }
    }
}

/// Network skeleton for `arch` with zero weights.
pub fn arch_network(space: &SearchSpace, arch: &ArchConfig) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut weights = Vec::new();
    let mut c = space.input_shape.c;
    let (mut h, mut w) = (space.input_shape.h, space.input_shape.w);
    for st in &arch.stages {
        for _ in 0..st.depth {
            layers.push(LayerSpec::conv(c, st.channels, st.kernel, 1, st.kernel / 2));
            weights.push(Some(WeightTensor::zeros(
                st.channels,
                c,
                st.kernel,
                st.kernel,
                space.weight_frac_bits,
            )));
            c = st.channels;
        }
        layers.push(LayerSpec::pool(2, 2));
        weights.push(None);
        h /= 2;
        w /= 2;
    }
    let n_in = c * h * w;
    layers.push(LayerSpec::fc(n_in, space.output_classes));
    weights.push(Some(WeightTensor::zeros(
        space.output_classes,
        n_in,
        1,
        1,
        space.weight_frac_bits,
    )));
    let net = NetworkSpec {
        input_shape: space.input_shape,
        act_frac_bits: space.act_frac_bits,
        layers,
        weights,
        output_classes: space.output_classes,
    };
    net.validate()?;
    Ok(net)
}

/// Maximal network for `stage_count` stages with seeded uniform weights
/// scaled by fan-in.
pub fn build_supernet(space: &SearchSpace, stage_count: usize, seed: u64) -> Result<NetworkSpec> {
    space.check()?;
    let mut net = arch_network(space, &space.maximal(stage_count))?;
    let mut rng = SplitMix64::new(seed);
    for w in net.weights.iter_mut().flatten() {
        let fan_in = (w.c_in * w.kh * w.kw) as f64;
        let amp = ((1u32 << w.frac_bits) as f64 * (3.0 / fan_in).sqrt()).max(1.0) as u64;
        for v in w.data.iter_mut() {
            *v = (rng.range_inclusive(0, 2 * amp) as i64 - amp as i64) as i16;
        }
    }
    Ok(net)
}

struct StageLayout {
    convs: Vec<usize>,
    pool: usize,
}

fn parse_stages(net: &NetworkSpec) -> Result<(Vec<StageLayout>, usize)> {
    let mut stages = Vec::new();
    let mut convs = Vec::new();
    let bad = || Error::Param("supernet must be [conv+ pool]+ fc".into());
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv2D { .. } => convs.push(i),
            LayerSpec::MaxPool2D { .. } => {
                if convs.is_empty() {
                    return Err(bad());
                }
                stages.push(StageLayout {
                    convs: std::mem::take(&mut convs),
                    pool: i,
                });
            }
            LayerSpec::FullyConnected { .. } => {
                if i + 1 != net.layers.len() || !convs.is_empty() || stages.is_empty() {
                    return Err(bad());
                }
                return Ok((stages, i));
            }
        }
    }
    Err(bad())
}

/// Output channels of `w` ordered by descending L1 norm (lower index wins ties).
pub fn rank_channels(w: &WeightTensor) -> Vec<usize> {
    let norms: Vec<u64> = (0..w.c_out)
        .map(|co| w.row(co).iter().map(|&v| (v as i64).unsigned_abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..w.c_out).collect();
    order.sort_by(|&a, &b| norms[b].cmp(&norms[a]).then(a.cmp(&b)));
    order
}

/// Child network of `supernet` shaped like `arch`: centre-cropped kernels,
/// the top-L1 output channels (in their original order) with input channels
/// sliced to match, and trailing convs of each stage dropped.
pub fn extract_subnet(supernet: &NetworkSpec, arch: &ArchConfig) -> Result<NetworkSpec> {
    supernet.validate()?;
    let (stages, fc_idx) = parse_stages(supernet)?;
    if arch.stages.len() != stages.len() {
        return Err(Error::Param(format!(
            "architecture has {} stages, supernet has {}",
            arch.stages.len(),
            stages.len()
        )));
    }
    let shapes = supernet.shapes()?;

    let mut layers = Vec::new();
    let mut weights = Vec::new();
    let mut kept_in: Vec<usize> = (0..supernet.input_shape.c).collect();

    for (s, (layout, st)) in stages.iter().zip(&arch.stages).enumerate() {
        if st.depth == 0 || st.depth > layout.convs.len() {
            return Err(Error::Param(format!(
                "stage {s}: depth {} outside 1..={}",
                st.depth,
                layout.convs.len()
            )));
        }
        for &li in &layout.convs[..st.depth] {
            let LayerSpec::Conv2D {
                c_out,
                kernel,
                stride,
                padding,
                ..
            } = supernet.layers[li]
            else {
                unreachable!()
            };
            if st.channels == 0 || st.channels > c_out {
                return Err(Error::Param(format!(
                    "stage {s}: {} channels outside 1..={c_out}",
                    st.channels
                )));
            }
            if st.kernel == 0 || st.kernel > kernel || st.kernel % 2 == 0 {
                return Err(Error::Param(format!(
                    "stage {s}: kernel {} not an odd size <= {kernel}",
                    st.kernel
                )));
            }
            let off = (kernel - st.kernel) / 2;
            if padding < off {
                return Err(Error::Param(format!(
                    "stage {s}: supernet padding {padding} too small to crop kernel {kernel} to {}",
                    st.kernel
                )));
            }
            let sw = supernet.weights[li].as_ref().unwrap();
            let mut kept: Vec<usize> = rank_channels(sw).into_iter().take(st.channels).collect();
            kept.sort_unstable();
            let k = st.kernel;
            let mut data = Vec::with_capacity(kept.len() * kept_in.len() * k * k);
            for &co in &kept {
                for &ci in &kept_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            data.push(sw.at(co, ci, ky + off, kx + off));
                        }
                    }
                }
            }
            layers.push(LayerSpec::conv(
                kept_in.len(),
                kept.len(),
                k,
                stride,
                padding - off,
            ));
            weights.push(Some(WeightTensor {
                c_out: kept.len(),
                c_in: kept_in.len(),
                kh: k,
                kw: k,
                frac_bits: sw.frac_bits,
                data,
                bias: sw
                    .bias
                    .as_ref()
                    .map(|b| kept.iter().map(|&c| b[c]).collect()),
            }));
            kept_in = kept;
        }
        layers.push(supernet.layers[layout.pool]);
        weights.push(None);
    }

    // FC head: keep all outputs, slice flattened inputs by kept channel
    let feat = shapes[fc_idx];
    let sw = supernet.weights[fc_idx].as_ref().unwrap();
    let plane = feat.h * feat.w;
    let n_in = kept_in.len() * plane;
    let mut data = Vec::with_capacity(sw.c_out * n_in);
    for o in 0..sw.c_out {
        let row = sw.row(o);
        for &c in &kept_in {
            data.extend_from_slice(&row[c * plane..(c + 1) * plane]);
        }
    }
    layers.push(LayerSpec::fc(n_in, sw.c_out));
    weights.push(Some(WeightTensor {
        c_out: sw.c_out,
        c_in: n_in,
        kh: 1,
        kw: 1,
        frac_bits: sw.frac_bits,
        data,
        bias: sw.bias.clone(),
    }));

    let net = NetworkSpec {
        input_shape: supernet.input_shape,
        act_frac_bits: supernet.act_frac_bits,
        layers,
        weights,
        output_classes: supernet.output_classes,
    };
    net.validate()?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// scoring

/// Stand-in for training: maps a network to an accuracy in `[0, 1]`.
pub trait AccuracyEvaluator: Sync {
    fn accuracy(&self, net: &NetworkSpec) -> f64;
}

/// Placeholder accuracy: `min(cap, base + slope * log2(1 + params / 1000))`.
/// Deterministic and monotone in parameter count; it says nothing about
/// real accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateAccuracy {
    pub base: f64,
    pub slope: f64,
    pub cap: f64,
}

impl Default for SurrogateAccuracy {
    fn default() -> Self {
        Self {
            base: 0.30,
            slope: 0.08,
            cap: 0.95,
        }
    }
}

impl SurrogateAccuracy {
    pub fn from_params(&self, total_params: u64) -> f64 {
        (self.base + self.slope * (1.0 + total_params as f64 / 1000.0).log2()).min(self.cap)
    }
}

impl AccuracyEvaluator for SurrogateAccuracy {
    fn accuracy(&self, net: &NetworkSpec) -> f64 {
        let params = count_params(net).map(|c| c.total).unwrap_or(0);
        self.from_params(params)
    }
}

pub fn surrogate_accuracy(net: &NetworkSpec) -> f64 {
    SurrogateAccuracy::default().accuracy(net)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    pub ema_decay: f64,
    pub latency_requirement: u64,
    /// `-1` penalises latency (default); `+1` is the literal reading that
    /// adds `latency / L_req`.
    pub latency_sign: i8,
}

impl RewardParams {
    pub fn new(latency_requirement: u64) -> Self {
        Self {
            ema_decay: 0.9,
            latency_requirement,
            latency_sign: -1,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Param("ema_decay must be in (0, 1)".into()));
        }
        if self.latency_requirement == 0 {
            return Err(Error::Param("latency_requirement must be > 0".into()));
        }
        if self.latency_sign != 1 && self.latency_sign != -1 {
            return Err(Error::Param("latency_sign must be +1 or -1".into()));
        }
        Ok(())
    }

    fn latency_term(&self, latency: u64) -> f64 {
        self.latency_sign as f64 * latency as f64 / self.latency_requirement as f64
    }
}

/// `acc - ema + sign * latency / L_req`.
pub fn reward(accuracy: f64, ema: f64, latency: u64, params: &RewardParams) -> f64 {
    accuracy - ema + params.latency_term(latency)
}

/// Exponential moving average of feasible children's accuracies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaTracker {
    pub ema: Option<f64>,
}

impl EmaTracker {
    pub fn update(&mut self, accuracy: f64, decay: f64) {
        self.ema = Some(match self.ema {
            None => accuracy,
            Some(e) => decay * e + (1.0 - decay) * accuracy,
        });
    }
}

// ---------------------------------------------------------------------------
// evolutionary search

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveParams {
    pub seed: u64,
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub tournament: usize,
    pub elitism: usize,
}

impl Default for EvolveParams {
    fn default() -> Self {
        Self {
            seed: 0,
            population: 16,
            generations: 8,
            mutation_rate: 0.1,
            tournament: 3,
            elitism: 2,
        }
    }
}

/// An evaluated architecture as seen by a controller.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub arch: ArchConfig,
    pub index: u64,
    /// `acc + sign * latency / L_req`, or `-inf` when infeasible. Within one
    /// generation this orders candidates exactly like the reward.
    pub fitness: f64,
}

/// Proposes the next generation of architectures.
pub trait ArchController {
    /// `pool` is empty for the first generation; `visited` holds every
    /// architecture index evaluated so far.
    fn propose(
        &mut self,
        space: &SearchSpace,
        pool: &[Scored],
        visited: &BTreeSet<u64>,
    ) -> Vec<ArchConfig>;
}

/// Tournament selection plus per-gene mutation. Children that repeat an
/// already evaluated architecture are moved to the next unvisited index so a
/// search of `population * generations >= |space|` covers the space.
pub struct EvolutionaryController {
    rng: SplitMix64,
    population: usize,
    mutation_rate: f64,
    tournament: usize,
}

impl EvolutionaryController {
    pub fn new(params: &EvolveParams, rng: SplitMix64) -> Self {
        Self {
            rng,
            population: params.population,
            mutation_rate: params.mutation_rate,
            tournament: params.tournament,
        }
    }

    fn mutate(&mut self, space: &SearchSpace, parent: &ArchConfig) -> ArchConfig {
        let mut stages = parent.stages.clone();
        if self.rng.chance(self.mutation_rate) {
            let n = *self.rng.pick(&space.stage_counts);
            stages.truncate(n);
            while stages.len() < n {
                stages.push(space.random_stage(&mut self.rng));
            }
        }
        for st in stages.iter_mut() {
            if self.rng.chance(self.mutation_rate) {
                st.depth = *self.rng.pick(&space.depths);
            }
            if self.rng.chance(self.mutation_rate) {
                st.channels = *self.rng.pick(&space.channels);
            }
            if self.rng.chance(self.mutation_rate) {
                st.kernel = *self.rng.pick(&space.kernels);
            }
        }
        ArchConfig { stages }
    }

    fn select<'p>(&mut self, pool: &'p [Scored]) -> &'p Scored {
        let mut best = self.rng.below(pool.len() as u64) as usize;
        for _ in 1..self.tournament {
            let i = self.rng.below(pool.len() as u64) as usize;
            if pool[i].fitness > pool[best].fitness
                || (pool[i].fitness == pool[best].fitness && i < best)
            {
                best = i;
            }
        }
        &pool[best]
    }
}

impl ArchController for EvolutionaryController {
    fn propose(
        &mut self,
        space: &SearchSpace,
        pool: &[Scored],
        visited: &BTreeSet<u64>,
    ) -> Vec<ArchConfig> {
        let total = space.arch_count();
        let mut taken: BTreeSet<u64> = BTreeSet::new();
        let mut out = Vec::with_capacity(self.population);
        for _ in 0..self.population {
            let arch = if pool.is_empty() {
                space.random_arch(&mut self.rng)
            } else {
                let parent = self.select(pool).arch.clone();
                self.mutate(space, &parent)
            };
            let mut idx = space.index_of(&arch).expect("architecture outside space");
            let seen = |i: &u64| visited.contains(i) || taken.contains(i);
            if seen(&idx) {
                if let Some(free) = (1..total).map(|k| (idx + k) % total).find(|i| !seen(i)) {
                    idx = free;
                }
            }
            taken.insert(idx);
            out.push(space.arch_at(idx));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub arch: ArchConfig,
    pub arch_index: u64,
    pub feasible: bool,
    pub accuracy: Option<f64>,
    pub latency_ticks: Option<u64>,
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub generation: usize,
    /// EMA every reward in this generation was measured against.
    pub ema: Option<f64>,
    pub candidates: Vec<CandidateRecord>,
    pub best_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solution {
    pub arch: ArchConfig,
    pub network: NetworkSpec,
    pub design: ExecutionDesign,
    pub estimate: PerfEstimate,
    pub accuracy: f64,
    /// Reward against the final EMA.
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchResult {
    pub best: Option<Solution>,
    pub final_ema: Option<f64>,
    pub evaluated: u64,
    pub history: Vec<GenerationRecord>,
}

#[derive(Clone, Debug)]
struct Evaluation {
    best: Option<BestDesign>,
    accuracy: Option<f64>,
}

/// Everything `evolve` needs besides the controller.
pub struct SearchSetup<'a> {
    pub space: &'a SearchSpace,
    pub power: &'a PowerParams,
    pub costs: &'a CostParams,
    pub reward: &'a RewardParams,
    pub caps: &'a DesignCaps,
    pub evaluator: &'a dyn AccuracyEvaluator,
}

/// Evolutionary search with the default controller, seeded from `params.seed`.
pub fn evolve(setup: &SearchSetup<'_>, params: &EvolveParams) -> Result<SearchResult> {
    if params.generations == 0 || params.population == 0 || params.tournament == 0 {
        return Err(Error::Param(
            "generations, population and tournament must be >= 1".into(),
        ));
    }
    let mut master = SplitMix64::new(params.seed);
    let supernet_seed = master.next_u64();
    let mut controller = EvolutionaryController::new(params, master.fork());
    search(setup, params, supernet_seed, &mut controller)
}

/// Generic search loop: propose, evaluate (in parallel when enabled), score.
pub fn search(
    setup: &SearchSetup<'_>,
    params: &EvolveParams,
    supernet_seed: u64,
    controller: &mut dyn ArchController,
) -> Result<SearchResult> {
    let space = setup.space;
    space.check()?;
    setup.reward.check()?;
    setup.caps.check()?;

    let supernets: HashMap<usize, NetworkSpec> = space
        .stage_counts
        .iter()
        .map(|&n| Ok((n, build_supernet(space, n, supernet_seed ^ n as u64)?)))
        .collect::<Result<_>>()?;

    let evaluate = |arch: &ArchConfig| -> Result<Evaluation> {
        let net = extract_subnet(&supernets[&arch.stages.len()], arch)?;
        let best = best_design(
            &net,
            setup.power,
            setup.costs,
            setup.reward.latency_requirement,
            setup.caps,
        )?;
        let accuracy = best.as_ref().map(|_| setup.evaluator.accuracy(&net));
        Ok(Evaluation { best, accuracy })
    };

    let mut cache: HashMap<u64, Evaluation> = HashMap::new();
    let mut visited: BTreeSet<u64> = BTreeSet::new();
    let mut ema = EmaTracker::default();
    let mut history = Vec::new();
    let mut all: Vec<Scored> = Vec::new();
    let mut pool: Vec<Scored> = Vec::new();

    for generation in 0..params.generations {
        let proposals = controller.propose(space, &pool, &visited);
        let indices: Vec<u64> = proposals
            .iter()
            .map(|a| {
                space
                    .index_of(a)
                    .ok_or_else(|| Error::Param("proposal outside space".into()))
            })
            .collect::<Result<_>>()?;

        let mut fresh: Vec<(u64, &ArchConfig)> = Vec::new();
        for (i, a) in indices.iter().zip(&proposals) {
            if !cache.contains_key(i) && !fresh.iter().any(|(j, _)| j == i) {
                fresh.push((*i, a));
            }
        }
        #[cfg(feature = "parallel")]
        let results: Vec<Result<Evaluation>> = {
            use rayon::prelude::*;
            fresh.par_iter().map(|(_, a)| evaluate(a)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<Evaluation>> = fresh.iter().map(|(_, a)| evaluate(a)).collect();
        for ((i, _), r) in fresh.iter().zip(results) {
            cache.insert(*i, r?);
            visited.insert(*i);
        }

        let gen_ema = ema
            .ema
            .or_else(|| indices.iter().find_map(|i| cache[i].accuracy));
        let mut candidates = Vec::new();
        let mut scored = Vec::new();
        for (arch, &idx) in proposals.iter().zip(&indices) {
            let ev = &cache[&idx];
            let (latency, fitness, rew) = match (&ev.best, ev.accuracy) {
                (Some(b), Some(acc)) => {
                    let lat = b.estimate.latency_ticks;
                    let fit = acc + setup.reward.latency_term(lat);
                    (
                        Some(lat),
                        fit,
                        Some(reward(acc, gen_ema.unwrap(), lat, setup.reward)),
                    )
                }
                _ => (None, f64::NEG_INFINITY, None),
            };
            candidates.push(CandidateRecord {
                arch: arch.clone(),
                arch_index: idx,
                feasible: ev.best.is_some(),
                accuracy: ev.accuracy,
                latency_ticks: latency,
                reward: rew,
            });
            scored.push(Scored {
                arch: arch.clone(),
                index: idx,
                fitness,
            });
        }
        for c in &candidates {
            if let Some(acc) = c.accuracy {
                ema.update(acc, setup.reward.ema_decay);
            }
        }
        let best_reward = candidates
            .iter()
            .filter_map(|c| c.reward)
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
        history.push(GenerationRecord {
            generation,
            ema: gen_ema,
            candidates,
            best_reward,
        });

        all.extend(scored.iter().cloned());
        let elites = top_k(&all, params.elitism);
        pool = scored;
        for e in elites {
            if !pool.iter().any(|p| p.index == e.index) {
                pool.push(e);
            }
        }
    }

    let winner = top_k(&all, 1)
        .into_iter()
        .next()
        .filter(|s| s.fitness.is_finite());
    let best = match winner {
        None => None,
        Some(w) => {
            let ev = &cache[&w.index];
            let b = ev.best.clone().unwrap();
            let acc = ev.accuracy.unwrap();
            let network = extract_subnet(&supernets[&w.arch.stages.len()], &w.arch)?;
            Some(Solution {
                arch: w.arch,
                network,
                design: b.design,
                estimate: b.estimate,
                accuracy: acc,
                reward: reward(
                    acc,
                    ema.ema.unwrap_or(acc),
                    b.estimate.latency_ticks,
                    setup.reward,
                ),
            })
        }
    };
    Ok(SearchResult {
        best,
        final_ema: ema.ema,
        evaluated: cache.len() as u64,
        history,
    })
}

/// Highest-fitness entries, earliest first among equals.
fn top_k(items: &[Scored], k: usize) -> Vec<Scored> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .fitness
            .partial_cmp(&items[a].fitness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out: Vec<Scored> = Vec::new();
    for i in order {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|o| o.index == items[i].index) {
            out.push(items[i].clone());
        }
    }
    out
}
