use hypertile_web::{batch_sweep_json, demo_json, supply_demand_json, timeline_json, Demo};
use serde_json::Value;

fn v(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn worked_timeline() {
    let t = v(&timeline_json(&demo_json(0), 0, 0).unwrap());
    assert_eq!(t["latency_ticks"], 60);
    assert_eq!(t["cycles"], 1);
    assert_eq!(t["output_matches_reference"], true);
    let spans = t["spans"].as_array().unwrap();
    let kinds: Vec<&str> = spans.iter().map(|s| s["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["boot", "unit", "unit", "unit", "unit", "preserve"]);
    assert_eq!(
        (&spans[0]["start"], &spans[0]["end"]),
        (&Value::from(0), &Value::from(16))
    );
    assert_eq!(
        (&spans[5]["start"], &spans[5]["end"]),
        (&Value::from(36), &Value::from(60))
    );
}

#[test]
fn timeline_with_faults_is_contiguous() {
    for seed in 1..20 {
        let demo = demo_json(seed);
        let t = v(&timeline_json(&demo, seed, 40).unwrap());
        assert_eq!(t["output_matches_reference"], true);
        let spans = t["spans"].as_array().unwrap();
        for w in spans.windows(2) {
            assert!(w[0]["end"].as_u64() <= w[1]["start"].as_u64());
        }
        let budget = t["e_budget"].as_u64().unwrap();
        assert!(t["per_cycle_energy"]
            .as_array()
            .unwrap()
            .iter()
            .all(|e| e.as_u64().unwrap() <= budget));
    }
}

#[test]
fn batch_sweep_matches_worked_example() {
    let pts = v(&batch_sweep_json(&demo_json(0), 6).unwrap());
    let pts = pts.as_array().unwrap();
    assert_eq!(pts.len(), 6);
    assert_eq!(pts[3]["s"], 4);
    assert_eq!(pts[3]["latency_ticks"], 60);
    // S = 1 commits every unit
    assert_eq!(pts[0]["preservations"], 4);
}

#[test]
fn infeasible_points_are_labelled() {
    let mut d: Demo = serde_json::from_str(&demo_json(0)).unwrap();
    d.costs.vm_capacity = 24;
    let pts = v(&batch_sweep_json(&serde_json::to_string(&d).unwrap(), 16).unwrap());
    let last = &pts.as_array().unwrap()[15];
    assert!(last["latency_ticks"].is_null());
    assert!(last["infeasible"].as_str().unwrap().contains("VM"));
}

#[test]
fn supply_demand_curves() {
    let c = v(&supply_demand_json(&demo_json(0), 1600, 1600, 3200, 33).unwrap());
    assert_eq!(c["wcet"], 44);
    assert_eq!(c["theta"], 44);
    assert_eq!(c["supply_period"], 160);
    assert_eq!(c["schedulable"], true);
    let delta = c["delta"].as_array().unwrap();
    assert_eq!(delta.len(), 33);
    assert_eq!(delta[32], 3200);
    let dbf: Vec<u64> = c["dbf"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect();
    assert_eq!((dbf[15], dbf[16], dbf[32]), (0, 44, 88));
    assert!(supply_demand_json(&demo_json(0), 10, 20, 100, 5).is_err());
}

#[test]
fn bad_config_is_an_error() {
    assert!(timeline_json("{}", 0, 0)
        .unwrap_err()
        .contains("bad demo config"));
}
