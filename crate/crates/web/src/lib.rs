//! Browser demo bindings. Every export takes and returns JSON strings; the
//! plain `*_json` functions do the work and are what the native tests call.

use hypertile::exec::{run_reference, ExecutionDesign};
use hypertile::intermittent::{
    make_fault_trace, simulate_with, CostParams, FaultTrace, PowerParams, SimEvent, SimOptions,
};
use hypertile::model::{NetworkSpec, QTensor};
use hypertile::perfmodel::{feasible, predict};
use hypertile::rng::SplitMix64;
use hypertile::scheduler::{dbf, edf_test, task_timing, Supply, TaskSpec};
use hypertile::synth::{random_instance, worked_example, worked_input, NetGen};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub net: NetworkSpec,
    pub design: ExecutionDesign,
    pub power: PowerParams,
    pub costs: CostParams,
    pub input: QTensor,
}

fn parse(demo: &str) -> Result<Demo, String> {
    serde_json::from_str(demo).map_err(|e| format!("bad demo config: {e}"))
}

fn to_string<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Seed 0 is the one-layer worked example; anything else a small random net.
pub fn demo_json(seed: u64) -> String {
    let demo = if seed == 0 {
        let (net, design, power, costs) = worked_example();
        Demo {
            net,
            design,
            power,
            costs,
            input: worked_input(),
        }
    } else {
        let gen = NetGen {
            max_layers: 3,
            max_dim: 8,
            allow_bias: true,
        };
        let i = random_instance(&mut SplitMix64::new(seed), &gen, 8);
        Demo {
            net: i.net,
            design: i.design,
            power: i.power,
            costs: i.costs,
            input: i.input,
        }
    };
    serde_json::to_string_pretty(&demo).unwrap()
}

#[derive(Serialize)]
struct Span {
    kind: &'static str,
    start: u64,
    end: u64,
    cycle: u64,
}

#[derive(Serialize)]
struct Timeline {
    latency_ticks: u64,
    cycles: u64,
    e_budget: u64,
    per_cycle_energy: Vec<u64>,
    spans: Vec<Span>,
    faults: Vec<u64>,
    preservations: u64,
    lost_units: u64,
    output_matches_reference: bool,
}

/// Runs the demo under intermittent power and flattens the event log into
/// labelled spans (`boot`, `unit`, `preserve`, `off`). `fault_mean == 0`
/// means no faults.
pub fn timeline_json(demo: &str, fault_seed: u64, fault_mean: u64) -> Result<String, String> {
    let d = parse(demo)?;
    let clean = predict(&d.net, &d.design, &d.power, &d.costs).map_err(|e| e.to_string())?;
    let faults = if fault_mean == 0 {
        FaultTrace::none()
    } else {
        make_fault_trace(fault_seed, fault_mean, clean.latency_ticks * 4)
            .map_err(|e| e.to_string())?
    };
    let opts = SimOptions {
        record_events: true,
        keep_image: false,
    };
    let r = simulate_with(
        &d.net, &d.input, &d.design, &d.power, &d.costs, &faults, opts,
    )
    .map_err(|e| e.to_string())?;
    let reference = run_reference(&d.net, &d.input).map_err(|e| e.to_string())?;

    let mut spans = Vec::new();
    let mut cycle = 0;
    let mut cycle_start = 0;
    let mut down_at: Option<u64> = None;
    let mut hit = Vec::new();
    for ev in &r.events {
        match *ev {
            SimEvent::CycleStart { tick, cycle: c } => {
                if let Some(t) = down_at.take() {
                    spans.push(Span {
                        kind: "off",
                        start: t,
                        end: tick,
                        cycle,
                    });
                }
                cycle = c;
                cycle_start = tick;
            }
            // boot and snapshot read
            SimEvent::Recovered { tick, .. } => spans.push(Span {
                kind: "boot",
                start: cycle_start,
                end: tick,
                cycle,
            }),
            SimEvent::Unit { start, end, .. } => spans.push(Span {
                kind: "unit",
                start,
                end,
                cycle,
            }),
            SimEvent::Preserved { start, end, .. } => spans.push(Span {
                kind: "preserve",
                start,
                end,
                cycle,
            }),
            SimEvent::PowerDown { tick, .. } => down_at = Some(tick),
            SimEvent::Fault { tick, .. } => {
                hit.push(tick);
                down_at = Some(tick);
            }
            SimEvent::Completed { .. } => {}
        }
    }
    to_string(&Timeline {
        latency_ticks: r.latency_ticks,
        cycles: r.cycles,
        e_budget: d.power.e_budget,
        per_cycle_energy: r.per_cycle_energy.clone(),
        spans,
        faults: hit,
        preservations: r.preservations,
        lost_units: r.lost_units,
        output_matches_reference: r.output == reference,
    })
}

#[derive(Serialize)]
struct BatchPoint {
    s: usize,
    latency_ticks: Option<u64>,
    cycles: Option<u64>,
    preservations: Option<u64>,
    infeasible: Option<String>,
}

/// Predicted latency of the demo's tiles for every S in `1..=max_s`.
pub fn batch_sweep_json(demo: &str, max_s: usize) -> Result<String, String> {
    let d = parse(demo)?;
    let points: Vec<BatchPoint> = (1..=max_s.max(1))
        .map(|s| {
            let design = ExecutionDesign {
                batch_size: s,
                ..d.design.clone()
            };
            match feasible(&d.net, &design, &d.power, &d.costs) {
                Err(inf) => BatchPoint {
                    s,
                    latency_ticks: None,
                    cycles: None,
                    preservations: None,
                    infeasible: Some(inf.to_string()),
                },
                Ok(()) => {
                    let est = predict(&d.net, &design, &d.power, &d.costs)
                        .expect("feasible design predicts");
                    BatchPoint {
                        s,
                        latency_ticks: Some(est.latency_ticks),
                        cycles: Some(est.cycles),
                        preservations: Some(est.preservations),
                        infeasible: None,
                    }
                }
            }
        })
        .collect();
    to_string(&points)
}

#[derive(Serialize)]
struct Curves {
    wcet: u64,
    theta: u64,
    supply_period: u64,
    schedulable: bool,
    delta: Vec<u64>,
    sbf: Vec<u64>,
    dbf: Vec<u64>,
}

/// sbf and dbf for the demo net as a single periodic task, sampled at
/// `points` evenly spaced windows up to `horizon`.
pub fn supply_demand_json(
    demo: &str,
    period: u64,
    deadline: u64,
    horizon: u64,
    points: usize,
) -> Result<String, String> {
    let d = parse(demo)?;
    let task = TaskSpec {
        id: 0,
        network: d.net,
        design: d.design,
        period,
        deadline,
        offset: 0,
    };
    if period == 0 || deadline == 0 || deadline > period {
        return Err("need 0 < deadline <= period".into());
    }
    let timing = task_timing(&task, &d.power, &d.costs).map_err(|e| e.to_string())?;
    let supply = Supply::new(&d.power, &d.costs, 1).map_err(|e| e.to_string())?;
    let verdict = edf_test(&[timing], &supply).map_err(|e| e.to_string())?;
    let n = points.clamp(2, 2000) as u64;
    let delta: Vec<u64> = (0..n).map(|i| horizon * i / (n - 1)).collect();
    to_string(&Curves {
        wcet: timing.wcet,
        theta: supply.theta,
        supply_period: supply.period,
        schedulable: verdict.schedulable,
        sbf: delta.iter().map(|&t| supply.sbf(t)).collect(),
        dbf: delta.iter().map(|&t| dbf(&[timing], t)).collect(),
        delta,
    })
}

#[wasm_bindgen]
pub fn demo(seed: u32) -> String {
    demo_json(seed as u64)
}

#[wasm_bindgen]
pub fn simulate_timeline(demo: &str, fault_seed: u32, fault_mean: u32) -> Result<String, JsError> {
    timeline_json(demo, fault_seed as u64, fault_mean as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn batch_sweep(demo: &str, max_s: u32) -> Result<String, JsError> {
    batch_sweep_json(demo, max_s as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn supply_demand(
    demo: &str,
    period: u32,
    deadline: u32,
    horizon: u32,
    points: u32,
) -> Result<String, JsError> {
    supply_demand_json(
        demo,
        period as u64,
        deadline as u64,
        horizon as u64,
        points as usize,
    )
    .map_err(|e| JsError::new(&e))
}
