//! Seeded generators for networks, designs and platforms, plus the small
//! worked example used throughout the docs and fixtures.

use crate::exec::{tile_footprint, ExecutionDesign, LoopOrder, TileConfig};
use crate::intermittent::{CostParams, PowerParams};
use crate::model::{LayerSpec, NetworkSpec, QTensor, Shape, WeightTensor};
use crate::perfmodel::{preservation_cost, unit_cost};
use crate::rng::SplitMix64;
use crate::scheduler::{task_wcet, Supply, TaskSet, TaskSpec};

/// One 1x1 conv with unit weight on a 1x2x2 input: four 5-eu units.
pub fn worked_example() -> (NetworkSpec, ExecutionDesign, PowerParams, CostParams) {
    let mut w = WeightTensor::zeros(1, 1, 1, 1, 8);
    w.data[0] = 256;
    let net = NetworkSpec {
        input_shape: Shape::new(1, 2, 2),
        act_frac_bits: 8,
        layers: vec![LayerSpec::conv(1, 1, 1, 1, 0)],
        weights: vec![Some(w)],
        output_classes: 4,
    };
    let design = ExecutionDesign {
        tiles: vec![TileConfig::new(1, 1, 1, LoopOrder::CoutHW)],
        batch_size: 4,
    };
    let power = PowerParams {
        e_budget: 60,
        t_recharge: 100,
        t_boot: 0,
    };
    (net, design, power, CostParams::default())
}

/// Input for the worked example: 1.0, 2.0, -1.5, 0.25.
pub fn worked_input() -> QTensor {
    QTensor::new(Shape::new(1, 2, 2), 8, vec![256, 512, -384, 64]).unwrap()
}

/// Knobs for [`random_network`].
#[derive(Clone, Copy, Debug)]
pub struct NetGen {
    pub max_layers: usize,
    /// Bound on channels and spatial extent.
    pub max_dim: usize,
    pub allow_bias: bool,
}

impl Default for NetGen {
    fn default() -> Self {
        Self {
            max_layers: 4,
            max_dim: 16,
            allow_bias: true,
        }
    }
}

fn random_weights(
    rng: &mut SplitMix64,
    c_out: usize,
    c_in: usize,
    k: usize,
    act_frac: u8,
    bias: bool,
) -> WeightTensor {
    let frac = rng.range_inclusive(4, 8) as u8;
    let mut w = WeightTensor::zeros(c_out, c_in, k, k, frac);
    let amp = 1u64 << (frac - 1);
    for v in w.data.iter_mut() {
        *v = (rng.range_inclusive(0, 2 * amp) as i64 - amp as i64) as i16;
    }
    if bias && rng.chance(0.5) {
        let bamp = 1u64 << (frac + act_frac);
        w.bias = Some(
            (0..c_out)
                .map(|_| (rng.range_inclusive(0, 2 * bamp) as i64 - bamp as i64) as i32)
                .collect(),
        );
    }
    w
}

/// Random valid chain of conv / pool / fc layers.
pub fn random_network(rng: &mut SplitMix64, gen: &NetGen) -> NetworkSpec {
    let d = gen.max_dim.max(2) as u64;
    let act_frac = rng.range_inclusive(4, 8) as u8;
    let input = Shape::new(
        rng.range_inclusive(1, 4.min(d)) as usize,
        rng.range_inclusive(2, d) as usize,
        rng.range_inclusive(2, d) as usize,
    );
    let n = rng.range_inclusive(1, gen.max_layers.max(1) as u64) as usize;
    let mut cur = input;
    let mut layers = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        let last = i + 1 == n;
        let roll = rng.below(10);
        if last && roll < 3 {
            let n_out = rng.range_inclusive(1, 10) as usize;
            layers.push(LayerSpec::fc(cur.numel(), n_out));
            weights.push(Some(random_weights(
                rng,
                n_out,
                cur.numel(),
                1,
                act_frac,
                gen.allow_bias,
            )));
            cur = Shape::new(n_out, 1, 1);
            break;
        }
        if roll < 3 && cur.h >= 2 && cur.w >= 2 {
            let window = rng.range_inclusive(2, 3.min(cur.h.min(cur.w)) as u64) as usize;
            let stride = rng.range_inclusive(1, 2) as usize;
            layers.push(LayerSpec::pool(window, stride));
            weights.push(None);
            cur = Shape::new(
                cur.c,
                (cur.h - window) / stride + 1,
                (cur.w - window) / stride + 1,
            );
            continue;
        }
        let k = *rng.pick(&[1usize, 3, 5]);
        let mut padding = rng.range_inclusive(0, (k / 2) as u64) as usize;
        if k > cur.h + 2 * padding || k > cur.w + 2 * padding {
            padding = k / 2;
        }
        let stride = rng.range_inclusive(1, 2) as usize;
        let c_out = rng.range_inclusive(1, 8.min(d)) as usize;
        layers.push(LayerSpec::conv(cur.c, c_out, k, stride, padding));
        let LayerSpec::Conv2D {
            c_out,
            kernel,
            stride,
            padding,
            ..
        } = *layers.last().unwrap()
        else {
            unreachable!()
        };
        weights.push(Some(random_weights(
            rng,
            c_out,
            cur.c,
            kernel,
            act_frac,
            gen.allow_bias,
        )));
        cur = Shape::new(
            c_out,
            (cur.h + 2 * padding - kernel) / stride + 1,
            (cur.w + 2 * padding - kernel) / stride + 1,
        );
    }
    let net = NetworkSpec {
        input_shape: input,
        act_frac_bits: act_frac,
        layers,
        weights,
        output_classes: cur.numel(),
    };
    debug_assert!(net.validate().is_ok(), "{:?}", net.validate());
    net
}

/// Uniform random input in roughly `[-1, 1]` at the network's Q-format.
pub fn random_input(rng: &mut SplitMix64, net: &NetworkSpec) -> QTensor {
    let amp = 1u64 << net.act_frac_bits;
    let data = (0..net.input_shape.numel())
        .map(|_| (rng.range_inclusive(0, 2 * amp) as i64 - amp as i64) as i16)
        .collect();
    QTensor::new(net.input_shape, net.act_frac_bits, data).unwrap()
}

/// Random tile per layer (each dimension in `1..=extent`) and S in `1..=max_s`.
pub fn random_design(rng: &mut SplitMix64, net: &NetworkSpec, max_s: usize) -> ExecutionDesign {
    let shapes = net.shapes().expect("valid network");
    let tiles = shapes[1..]
        .iter()
        .map(|o| {
            TileConfig::new(
                rng.range_inclusive(1, o.c as u64) as usize,
                rng.range_inclusive(1, o.h as u64) as usize,
                rng.range_inclusive(1, o.w as u64) as usize,
                *rng.pick(&LoopOrder::ALL),
            )
        })
        .collect();
    ExecutionDesign {
        tiles,
        batch_size: rng.range_inclusive(1, max_s.max(1) as u64) as usize,
    }
}

/// Random cost coefficients in `0..=3` (time coefficients at least 1).
pub fn random_costs(rng: &mut SplitMix64) -> CostParams {
    CostParams {
        e_mac: rng.range_inclusive(0, 3),
        t_mac: rng.range_inclusive(1, 3),
        e_nvm_rd: rng.range_inclusive(1, 3),
        t_nvm_rd: rng.range_inclusive(1, 3),
        e_nvm_wr: rng.range_inclusive(1, 3),
        t_nvm_wr: rng.range_inclusive(1, 3),
        vm_capacity: 2048,
    }
}

/// Smallest budget for which every layer of `design` is energy-feasible.
pub fn min_feasible_budget(net: &NetworkSpec, design: &ExecutionDesign, costs: &CostParams) -> u64 {
    net.layers
        .iter()
        .zip(&design.tiles)
        .map(|(l, t)| {
            costs.recovery_energy() + unit_cost(l, t, costs).0 + preservation_cost(l, t, 1, costs).0
        })
        .max()
        .unwrap_or(0)
}

/// Largest VM footprint over the layers of `design`.
pub fn peak_footprint(net: &NetworkSpec, design: &ExecutionDesign) -> u64 {
    net.layers
        .iter()
        .zip(&design.tiles)
        .map(|(l, t)| tile_footprint(l, t, design.batch_size).total_bytes)
        .max()
        .unwrap_or(0)
}

/// Power and VM sized so `design` is feasible, with the budget between one
/// and four times the minimum.
pub fn feasible_platform(
    rng: &mut SplitMix64,
    net: &NetworkSpec,
    design: &ExecutionDesign,
    mut costs: CostParams,
) -> (PowerParams, CostParams) {
    let min = min_feasible_budget(net, design, &costs);
    costs.vm_capacity = costs.vm_capacity.max(peak_footprint(net, design));
    let power = PowerParams {
        e_budget: min + rng.range_inclusive(0, 3 * min),
        t_recharge: rng.range_inclusive(0, 200),
        t_boot: rng.range_inclusive(0, 5),
    };
    (power, costs)
}

/// A feasible simulation setup.
#[derive(Clone, Debug)]
pub struct Instance {
    pub net: NetworkSpec,
    pub design: ExecutionDesign,
    pub power: PowerParams,
    pub costs: CostParams,
    pub input: QTensor,
}

/// Random network, design, costs, a platform that makes the design
/// feasible, and an input.
pub fn random_instance(rng: &mut SplitMix64, gen: &NetGen, max_s: usize) -> Instance {
    let net = random_network(rng, gen);
    let design = random_design(rng, &net, max_s);
    let costs = random_costs(rng);
    let (power, costs) = feasible_platform(rng, &net, &design, costs);
    let input = random_input(rng, &net);
    Instance {
        net,
        design,
        power,
        costs,
        input,
    }
}

/// Random set of 2..=4 periodic tasks on one platform. Periods are small
/// multiples of a common base sized for a utilisation between 5% and 100% of
/// the supply rate; deadlines fall in `[T/2, T]`. Costs are the unit
/// defaults unless `random_coefficients` is set.
pub fn random_taskset(
    rng: &mut SplitMix64,
    random_coefficients: bool,
) -> (TaskSet, PowerParams, CostParams) {
    loop {
        let n = rng.range_inclusive(2, 4) as usize;
        let mut costs = if random_coefficients {
            random_costs(rng)
        } else {
            CostParams::default()
        };
        let gen = NetGen {
            max_layers: 3,
            max_dim: 8,
            allow_bias: true,
        };
        let mut min_budget = 0;
        let mut tasks = Vec::with_capacity(n);
        for id in 0..n {
            let network = random_network(rng, &gen);
            let design = random_design(rng, &network, 4);
            min_budget = min_budget.max(min_feasible_budget(&network, &design, &costs));
            costs.vm_capacity = costs.vm_capacity.max(peak_footprint(&network, &design));
            tasks.push(TaskSpec {
                id: id as u32,
                network,
                design,
                period: 1,
                deadline: 1,
                offset: 0,
            });
        }
        let power = PowerParams {
            e_budget: min_budget + rng.range_inclusive(0, 2 * min_budget),
            t_recharge: rng.range_inclusive(0, 200),
            t_boot: rng.range_inclusive(0, 5),
        };
        let Ok(supply) = Supply::new(&power, &costs, 1) else {
            continue;
        };
        let multiples: Vec<u64> = (0..n).map(|_| *rng.pick(&[1u64, 2, 3, 4, 6])).collect();
        let util =
            rng.range_inclusive(5, 100) as f64 / 100.0 * supply.theta as f64 / supply.period as f64;
        let demand: f64 = tasks
            .iter()
            .zip(&multiples)
            .map(|(t, &m)| {
                task_wcet(t, &power, &costs).expect("feasible by construction") as f64 / m as f64
            })
            .sum();
        let base = ((demand / util).ceil() as u64).max(1);
        for (t, m) in tasks.iter_mut().zip(multiples) {
            t.period = base * m;
            t.deadline = t.period - rng.range_inclusive(0, t.period / 2);
            t.offset = if rng.chance(0.3) {
                rng.below(t.period)
            } else {
                0
            };
        }
        return (TaskSet::new(tasks), power, costs);
    }
}
