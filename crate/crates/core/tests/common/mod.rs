#![allow(dead_code)]

use hypertile::exec::{unit_blocks, ExecutionDesign, UnitGeometry};
use hypertile::intermittent::{CostParams, PowerParams};
use hypertile::model::{LayerSpec, NetworkSpec, QTensor};

/// Round-half-away-from-zero division by `2^sh` via truncating division.
fn round_div(a: i128, sh: u8) -> i128 {
    let d = 1i128 << sh;
    let q = a / d;
    let r = (a % d).abs();
    if 2 * r >= d {
        q + a.signum()
    } else {
        q
    }
}

fn sat(v: i128) -> i16 {
    v.clamp(i16::MIN as i128, i16::MAX as i128) as i16
}

/// Naive whole-network inference written independently of the crate.
pub fn naive_infer(net: &NetworkSpec, input: &QTensor) -> Vec<i16> {
    let (mut c, mut h, mut w) = (input.shape.c, input.shape.h, input.shape.w);
    let mut x: Vec<i16> = input.data.clone();
    let n = net.layers.len();
    for (i, layer) in net.layers.iter().enumerate() {
        let relu = net.weights[i].is_some() && i + 1 < n;
        let get = |x: &Vec<i16>, ci: usize, y: isize, xx: isize| -> i128 {
            if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                0
            } else {
                x[ci * h * w + y as usize * w + xx as usize] as i128
            }
        };
        match *layer {
            LayerSpec::Conv2D {
                c_out,
                kernel: k,
                stride: s,
                padding: p,
                ..
            } => {
                let wt = net.weights[i].as_ref().unwrap();
                let oh = (h + 2 * p - k) / s + 1;
                let ow = (w + 2 * p - k) / s + 1;
                let mut y = vec![0i16; c_out * oh * ow];
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc: i128 = wt.bias.as_ref().map_or(0, |b| b[co] as i128);
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = wt.data[((co * c + ci) * k + ky) * k + kx] as i128;
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        acc += wv * get(&x, ci, iy, ix);
                                    }
                                }
                            }
                            let mut v = sat(round_div(acc, wt.frac_bits));
                            if relu && v < 0 {
                                v = 0;
                            }
                            y[(co * oh + oy) * ow + ox] = v;
                        }
                    }
                }
                x = y;
                (c, h, w) = (c_out, oh, ow);
            }
            LayerSpec::MaxPool2D { window, stride } => {
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut y = Vec::new();
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let m = (0..window)
                                .flat_map(|ky| (0..window).map(move |kx| (ky, kx)))
                                .map(|(ky, kx)| {
                                    get(
                                        &x,
                                        ci,
                                        (oy * stride + ky) as isize,
                                        (ox * stride + kx) as isize,
                                    )
                                })
                                .max()
                                .unwrap();
                            y.push(m as i16);
                        }
                    }
                }
                x = y;
                (h, w) = (oh, ow);
            }
            LayerSpec::FullyConnected { n_in, n_out } => {
                let wt = net.weights[i].as_ref().unwrap();
                let y = (0..n_out)
                    .map(|o| {
                        let acc: i128 = wt.bias.as_ref().map_or(0, |b| b[o] as i128)
                            + (0..n_in)
                                .map(|j| wt.data[o * n_in + j] as i128 * x[j] as i128)
                                .sum::<i128>();
                        let v = sat(round_div(acc, wt.frac_bits));
                        if relu {
                            v.max(0)
                        } else {
                            v
                        }
                    })
                    .collect();
                x = y;
                (c, h, w) = (n_out, 1, 1);
            }
        }
    }
    x
}

#[derive(Debug, PartialEq, Eq)]
pub struct StepTrace {
    pub latency: u64,
    pub cycles: u64,
    pub per_cycle_energy: Vec<u64>,
    pub preservations: u64,
    pub active_ticks: u64,
}

struct UnitCost {
    e: u64,
    t: u64,
    out: u64,
}

/// Fault-free stepper that advances the clock one tick at a time. Only uses
/// the per-unit byte and MAC counts from the crate; the packing rule is
/// restated here from scratch.
pub fn step_fault_free(
    net: &NetworkSpec,
    design: &ExecutionDesign,
    power: &PowerParams,
    costs: &CostParams,
) -> StepTrace {
    let shapes = net.shapes().unwrap();
    let layers: Vec<Vec<UnitCost>> = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let g = UnitGeometry::of(l);
            unit_blocks(shapes[i + 1], &design.tiles[i])
                .iter()
                .map(|b| {
                    let (a, bb, cc) = b.dims();
                    let st = g.unit_stat(a, bb, cc);
                    UnitCost {
                        e: costs.e_nvm_rd * st.fetched_bytes + costs.e_mac * st.macs,
                        t: costs.t_nvm_rd * st.fetched_bytes + costs.t_mac * st.macs,
                        out: st.output_bytes,
                    }
                })
                .collect()
        })
        .collect();

    let mut clock = 0u64;
    let tick = |n: u64, clock: &mut u64| {
        for _ in 0..n {
            *clock += 1;
        }
    };
    let mut tr = StepTrace {
        latency: 0,
        cycles: 0,
        per_cycle_energy: vec![],
        preservations: 0,
        active_ticks: 0,
    };
    let mut energy = 0u64;
    let boot = |tr: &mut StepTrace, energy: &mut u64, clock: &mut u64| {
        if tr.cycles > 0 {
            tick(power.t_recharge, clock);
        }
        tr.cycles += 1;
        tr.per_cycle_energy.push(0);
        *energy = power.e_budget;
        tick(power.t_boot, clock);
        tick(16 * costs.t_nvm_rd, clock);
        *energy -= 16 * costs.e_nvm_rd;
        *tr.per_cycle_energy.last_mut().unwrap() += 16 * costs.e_nvm_rd;
    };
    boot(&mut tr, &mut energy, &mut clock);
    for units in &layers {
        let mut pend_n = 0usize;
        let mut pend_bytes = 0u64;
        let mut idx = 0usize;
        while idx < units.len() {
            let u = &units[idx];
            let need = u.e + costs.e_nvm_wr * (pend_bytes + u.out + 16);
            if energy < need {
                if pend_n > 0 {
                    let b = pend_bytes + 16;
                    let t = costs.t_nvm_wr * b;
                    for _ in 0..t {
                        clock += 1;
                    }
                    tr.active_ticks += t;
                    energy -= costs.e_nvm_wr * b;
                    *tr.per_cycle_energy.last_mut().unwrap() += costs.e_nvm_wr * b;
                    tr.preservations += 1;
                    pend_n = 0;
                    pend_bytes = 0;
                }
                boot(&mut tr, &mut energy, &mut clock);
                continue;
            }
            for _ in 0..u.t {
                clock += 1;
            }
            tr.active_ticks += u.t;
            energy -= u.e;
            *tr.per_cycle_energy.last_mut().unwrap() += u.e;
            pend_n += 1;
            pend_bytes += u.out;
            idx += 1;
            if pend_n == design.batch_size || idx == units.len() {
                let b = pend_bytes + 16;
                let t = costs.t_nvm_wr * b;
                for _ in 0..t {
                    clock += 1;
                }
                tr.active_ticks += t;
                energy -= costs.e_nvm_wr * b;
                *tr.per_cycle_energy.last_mut().unwrap() += costs.e_nvm_wr * b;
                tr.preservations += 1;
                pend_n = 0;
                pend_bytes = 0;
            }
        }
    }
    tr.latency = clock;
    tr
}
