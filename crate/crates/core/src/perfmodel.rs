//! Per-cycle energy and end-to-end latency prediction.
//!
//! [`predict`] replays the simulator's packing rule over unit costs alone,
//! so for a feasible design it reproduces the fault-free simulation exactly
//! without computing any tensor values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Infeasibility, Result};
use crate::exec::{tile_footprint, unit_blocks, ExecutionDesign, TileConfig, UnitGeometry};
use crate::intermittent::{CostParams, PowerParams, SNAPSHOT_BYTES};
use crate::model::{LayerSpec, NetworkSpec};

const SNAP: u64 = SNAPSHOT_BYTES as u64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfEstimate {
    pub latency_ticks: u64,
    pub cycles: u64,
    pub max_cycle_energy: u64,
    /// Ticks spent on units and preservations.
    pub active_ticks: u64,
    pub preservations: u64,
    pub preservation_energy_total: u64,
    pub fetch_energy_total: u64,
    pub compute_energy_total: u64,
    pub recovery_energy_total: u64,
    pub vm_peak_bytes: u64,
}

/// Energy and time of one full (unclamped) unit of `layer`.
pub fn unit_cost(layer: &LayerSpec, tile: &TileConfig, costs: &CostParams) -> (u64, u64) {
    let st = UnitGeometry::of(layer).unit_stat(tile.t_cout, tile.t_h, tile.t_w);
    (
        costs.e_nvm_rd * st.fetched_bytes + costs.e_mac * st.macs,
        costs.t_nvm_rd * st.fetched_bytes + costs.t_mac * st.macs,
    )
}

/// One atomic unit as the energy model sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitOp {
    pub energy: u64,
    pub ticks: u64,
    pub output_bytes: u64,
}

/// Units of every layer in execution order. With `worst_case`, edge tiles are
/// charged as full tiles.
pub fn unit_ops(
    net: &NetworkSpec,
    design: &ExecutionDesign,
    costs: &CostParams,
    worst_case: bool,
) -> Result<Vec<Vec<UnitOp>>> {
    net.validate()?;
    design.check(net)?;
    let shapes = net.shapes()?;
    Ok(net
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let tile = &design.tiles[i];
            let geom = UnitGeometry::of(layer);
            unit_blocks(shapes[i + 1], tile)
                .iter()
                .map(|b| {
                    let (tc, th, tw) = if worst_case {
                        (tile.t_cout, tile.t_h, tile.t_w)
                    } else {
                        b.dims()
                    };
                    let st = geom.unit_stat(tc, th, tw);
                    UnitOp {
                        energy: costs.e_nvm_rd * st.fetched_bytes + costs.e_mac * st.macs,
                        ticks: costs.t_nvm_rd * st.fetched_bytes + costs.t_mac * st.macs,
                        output_bytes: st.output_bytes,
                    }
                })
                .collect()
        })
        .collect())
}

/// Cost of writing `s` full tile outputs plus one snapshot.
pub fn preservation_cost(
    layer: &LayerSpec,
    tile: &TileConfig,
    s: usize,
    costs: &CostParams,
) -> (u64, u64) {
    let out = UnitGeometry::of(layer)
        .unit_stat(tile.t_cout, tile.t_h, tile.t_w)
        .output_bytes;
    let bytes = s as u64 * out + SNAP;
    (costs.e_nvm_wr * bytes, costs.t_nvm_wr * bytes)
}

/// Checks every layer: recovery + one worst-case unit + its preservation must
/// fit the energy budget, and the tile footprint must fit VM.
pub fn feasible(
    net: &NetworkSpec,
    design: &ExecutionDesign,
    power: &PowerParams,
    costs: &CostParams,
) -> std::result::Result<(), Infeasibility> {
    if let Err(e) = net.validate().and_then(|_| design.check(net)) {
        return Err(Infeasibility::Design {
            layer: None,
            reason: e.to_string(),
        });
    }
    let recovery = costs.recovery_energy();
    for (i, (layer, tile)) in net.layers.iter().zip(&design.tiles).enumerate() {
        let (e_unit, _) = unit_cost(layer, tile, costs);
        let (e_pres, _) = preservation_cost(layer, tile, 1, costs);
        let needed = recovery + e_unit + e_pres;
        if needed > power.e_budget {
            return Err(Infeasibility::Energy {
                layer: i,
                needed,
                budget: power.e_budget,
            });
        }
        let fp = tile_footprint(layer, tile, design.batch_size);
        if fp.total_bytes > costs.vm_capacity {
            return Err(Infeasibility::Vm {
                layer: i,
                needed: fp.total_bytes,
                capacity: costs.vm_capacity,
            });
        }
    }
    Ok(())
}

/// Fault-free latency and energy prediction.
pub fn predict(
    net: &NetworkSpec,
    design: &ExecutionDesign,
    power: &PowerParams,
    costs: &CostParams,
) -> Result<PerfEstimate> {
    replay(net, design, power, costs, false)
}

/// Replays the proactive-preservation packing. With `worst_case`, every unit
/// is charged as a full unclamped tile.
pub fn replay(
    net: &NetworkSpec,
    design: &ExecutionDesign,
    power: &PowerParams,
    costs: &CostParams,
    worst_case: bool,
) -> Result<PerfEstimate> {
    feasible(net, design, power, costs).map_err(Error::Infeasible)?;
    let shapes = net.shapes()?;
    let s = design.batch_size;

    let mut est = PerfEstimate {
        vm_peak_bytes: net
            .layers
            .iter()
            .zip(&design.tiles)
            .map(|(l, t)| tile_footprint(l, t, s).total_bytes)
            .max()
            .unwrap_or(0),
        ..Default::default()
    };

    // state of the current power cycle
    let mut remaining = 0u64;
    let mut spent = 0u64;
    let mut fresh = true;
    let start_cycle = |est: &mut PerfEstimate, remaining: &mut u64, spent: &mut u64| {
        if est.cycles > 0 {
            est.max_cycle_energy = est.max_cycle_energy.max(*spent);
            est.latency_ticks += power.t_recharge;
        }
        est.cycles += 1;
        est.latency_ticks += power.t_boot + costs.recovery_time();
        est.recovery_energy_total += costs.recovery_energy();
        *spent = costs.recovery_energy();
        *remaining = power.e_budget - costs.recovery_energy();
    };
    start_cycle(&mut est, &mut remaining, &mut spent);

    for (i, layer) in net.layers.iter().enumerate() {
        let tile = &design.tiles[i];
        let geom = UnitGeometry::of(layer);
        let blocks = unit_blocks(shapes[i + 1], tile);
        let n = blocks.len();
        let mut batch_units = 0usize;
        let mut batch_bytes = 0u64;

        let commit = |est: &mut PerfEstimate,
                      units: &mut usize,
                      bytes: &mut u64,
                      remaining: &mut u64,
                      spent: &mut u64| {
            let b = *bytes + SNAP;
            let e = costs.e_nvm_wr * b;
            *remaining -= e;
            *spent += e;
            est.preservation_energy_total += e;
            est.latency_ticks += costs.t_nvm_wr * b;
            est.active_ticks += costs.t_nvm_wr * b;
            est.preservations += 1;
            *units = 0;
            *bytes = 0;
        };

        for (u, block) in blocks.iter().enumerate() {
            let (tc, th, tw) = if worst_case {
                (tile.t_cout, tile.t_h, tile.t_w)
            } else {
                block.dims()
            };
            let st = geom.unit_stat(tc, th, tw);
            let e_fetch = costs.e_nvm_rd * st.fetched_bytes;
            let e_mac = costs.e_mac * st.macs;
            let need = e_fetch + e_mac + costs.e_nvm_wr * (batch_bytes + st.output_bytes + SNAP);
            if remaining < need {
                if fresh {
                    return Err(Error::Infeasible(Infeasibility::Energy {
                        layer: i,
                        needed: need + costs.recovery_energy(),
                        budget: power.e_budget,
                    }));
                }
                if batch_units > 0 {
                    commit(
                        &mut est,
                        &mut batch_units,
                        &mut batch_bytes,
                        &mut remaining,
                        &mut spent,
                    );
                }
                start_cycle(&mut est, &mut remaining, &mut spent);
            }
            let t = costs.t_nvm_rd * st.fetched_bytes + costs.t_mac * st.macs;
            remaining -= e_fetch + e_mac;
            spent += e_fetch + e_mac;
            est.fetch_energy_total += e_fetch;
            est.compute_energy_total += e_mac;
            est.latency_ticks += t;
            est.active_ticks += t;
            fresh = false;
            batch_units += 1;
            batch_bytes += st.output_bytes;
            if batch_units == s || u + 1 == n {
                commit(
                    &mut est,
                    &mut batch_units,
                    &mut batch_bytes,
                    &mut remaining,
                    &mut spent,
                );
            }
        }
    }
    est.max_cycle_energy = est.max_cycle_energy.max(spent);
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::LoopOrder;
    use crate::model::{Shape, WeightTensor};

    fn k1_layer() -> LayerSpec {
        LayerSpec::conv(1, 1, 1, 1, 0)
    }

    fn unit_tile() -> TileConfig {
        TileConfig::new(1, 1, 1, LoopOrder::CoutHW)
    }

    #[test]
    fn unit_cost_examples() {
        let costs = CostParams::default();
        assert_eq!(unit_cost(&k1_layer(), &unit_tile(), &costs), (5, 5));
        let zero = CostParams {
            e_mac: 0,
            t_mac: 0,
            e_nvm_rd: 0,
            t_nvm_rd: 0,
            e_nvm_wr: 0,
            t_nvm_wr: 0,
            vm_capacity: 1,
        };
        assert_eq!(unit_cost(&k1_layer(), &unit_tile(), &zero), (0, 0));
        let double_mac = CostParams { e_mac: 2, ..costs };
        assert_eq!(unit_cost(&k1_layer(), &unit_tile(), &double_mac), (6, 5));
    }

    #[test]
    fn preservation_cost_examples() {
        let costs = CostParams::default();
        assert_eq!(
            preservation_cost(&k1_layer(), &unit_tile(), 4, &costs),
            (24, 24)
        );
        assert_eq!(
            preservation_cost(&k1_layer(), &unit_tile(), 1, &costs).0,
            16 + 2
        );
        // amortized snapshot cost per output strictly decreasing in S
        let per = |s: usize| 16.0 * costs.e_nvm_wr as f64 / s as f64;
        assert!((1..16).all(|s| per(s + 1) < per(s)));
    }

    #[test]
    fn vm_infeasible_when_batch_too_large() {
        let net = NetworkSpec {
            input_shape: Shape::new(1, 2, 2),
            act_frac_bits: 8,
            layers: vec![k1_layer()],
            weights: vec![Some(WeightTensor::zeros(1, 1, 1, 1, 8))],
            output_classes: 4,
        };
        let design = ExecutionDesign {
            tiles: vec![unit_tile()],
            batch_size: 2000,
        };
        let power = PowerParams {
            e_budget: 1_000_000,
            t_recharge: 0,
            t_boot: 0,
        };
        assert!(matches!(
            feasible(&net, &design, &power, &CostParams::default()),
            Err(Infeasibility::Vm { layer: 0, .. })
        ));
    }
}
