use hypertile::intermittent::CostParams;
use hypertile::rng::SplitMix64;
use hypertile::scheduler::{
    blocking, dbf, default_horizon, edf_test, sbf, schedulable_edf, simulate_schedule,
    simulate_supply_model, task_timing, task_wcet, Supply, TaskSet, TaskSpec, TaskTiming,
};
use hypertile::synth::{random_taskset, worked_example};
use proptest::prelude::*;

fn worked_task(id: u32, period: u64, deadline: u64) -> TaskSpec {
    let (network, design, ..) = worked_example();
    TaskSpec {
        id,
        network,
        design,
        period,
        deadline,
        offset: 0,
    }
}

#[test]
fn worked_example_wcet() {
    let (_, _, power, costs) = worked_example();
    assert_eq!(
        task_wcet(&worked_task(0, 100, 100), &power, &costs).unwrap(),
        44
    );

    let slow = CostParams {
        t_mac: 2,
        t_nvm_rd: 2,
        t_nvm_wr: 2,
        ..costs
    };
    assert_eq!(
        task_wcet(&worked_task(0, 100, 100), &power, &slow).unwrap(),
        88
    );
}

#[test]
fn worked_example_supply() {
    let (_, _, power, costs) = worked_example();
    let s = Supply::new(&power, &costs, 1).unwrap();
    // Θ = 60 - 16, Π = 44 + 16 + 100
    assert_eq!((s.theta, s.period, s.lead), (44, 160, 16));
    let blackout = 2 * (160 - 44);
    assert_eq!(sbf(&power, &costs, blackout).unwrap(), 0);
    assert_eq!(sbf(&power, &costs, blackout + 160).unwrap(), 44);
    assert_eq!(sbf(&power, &costs, blackout + 30).unwrap(), 30);
}

#[test]
fn worked_example_task_never_misses() {
    let (_, _, power, costs) = worked_example();
    let pi = Supply::new(&power, &costs, 1).unwrap().period;
    let ts = TaskSet::new(vec![worked_task(0, 10 * pi, 10 * pi)]);
    let v = schedulable_edf(&ts, &power, &costs).unwrap();
    assert!(v.schedulable);
    assert_eq!(v.wcet, vec![44]);
    let tr = simulate_schedule(&ts, &power, &costs, Some(50 * pi)).unwrap();
    assert!(tr.misses.is_empty());
    assert_eq!(tr.jobs.len(), 5);
    for j in &tr.jobs {
        assert_eq!(j.active_ticks, 44);
        // every job after the first starts on an empty buffer and reboots
        assert_eq!(
            j.finish,
            Some(j.release + if j.job == 0 { 60 } else { 160 })
        );
    }
}

#[test]
fn empty_taskset() {
    let (_, _, power, costs) = worked_example();
    let ts = TaskSet::new(vec![]);
    assert!(schedulable_edf(&ts, &power, &costs).unwrap().schedulable);
    let tr = simulate_schedule(&ts, &power, &costs, Some(1000)).unwrap();
    assert!(tr.jobs.is_empty() && tr.segments.is_empty() && tr.misses.is_empty());
}

#[test]
fn overloaded_set_misses() {
    let (_, _, power, costs) = worked_example();
    // Σ C/T = 3 * 44 / 300 > Θ/Π = 44 / 160
    let ts = TaskSet::new((0..3).map(|i| worked_task(i, 300, 300)).collect());
    assert!(!schedulable_edf(&ts, &power, &costs).unwrap().schedulable);
    let tr = simulate_schedule(&ts, &power, &costs, None).unwrap();
    assert!(!tr.misses.is_empty());
}

#[test]
fn dbf_two_task_hand_sum() {
    let t = |id, c, p, d| TaskTiming {
        id,
        wcet: c,
        work: c,
        period: p,
        deadline: d,
        offset: 0,
    };
    let ts = [t(0, 7, 20, 12), t(1, 5, 30, 30)];
    // Δ = 60 (lcm): task 0 deadlines 12, 32, 52 -> 21; task 1 at 30, 60 -> 10
    assert_eq!(dbf(&ts, 60), 31);
    assert_eq!(dbf(&ts, 11), 0);
    assert_eq!(blocking(&ts, 11), 7);
    assert_eq!(blocking(&ts, 12), 5);
    assert_eq!(blocking(&ts, 30), 0);
}

#[test]
fn c_above_supply_at_deadline_fails_at_d() {
    let (_, _, power, costs) = worked_example();
    let s = Supply::new(&power, &costs, 1).unwrap();
    let d = 2 * (s.period - s.theta) + 40;
    let v = edf_test(
        &[TaskTiming {
            id: 0,
            wcet: 41,
            work: 41,
            period: 10_000,
            deadline: d,
            offset: 0,
        }],
        &s,
    )
    .unwrap();
    assert!(!v.schedulable);
    let w = serde_json::to_value(&v.witness).unwrap();
    assert_eq!(w["kind"], "test_point");
    assert_eq!(w["delta"], d);
}

/// Two back-to-back worked-example jobs on a 90-unit buffer: the second
/// starts with 30 units left, commits two outputs early and pays one extra
/// snapshot write.
#[test]
fn mid_cycle_start_can_exceed_wcet() {
    let (_, _, mut power, costs) = worked_example();
    power.e_budget = 90;
    let ts = TaskSet::new(vec![
        worked_task(0, 10_000, 10_000),
        worked_task(1, 10_000, 10_000),
    ]);
    let tr = simulate_schedule(&ts, &power, &costs, Some(10_000)).unwrap();
    let active: Vec<(u64, u64)> = tr
        .jobs
        .iter()
        .map(|j| (j.active_ticks, j.power_downs))
        .collect();
    assert_eq!(active, vec![(44, 0), (60, 1)]);
    assert_eq!(task_wcet(&ts.tasks[1], &power, &costs).unwrap(), 44);
}

#[test]
fn job_overrun_is_one_snapshot_per_power_down() {
    for coeffs in [false, true] {
        let mut rng = SplitMix64::new(if coeffs { 81 } else { 80 });
        for case in 0..300 {
            let (ts, power, costs) = random_taskset(&mut rng, coeffs);
            let tr = simulate_schedule(&ts, &power, &costs, None).unwrap();
            let wcet: Vec<u64> = ts
                .tasks
                .iter()
                .map(|t| task_wcet(t, &power, &costs).unwrap())
                .collect();
            for j in &tr.jobs {
                let bound = wcet[j.task as usize] + 16 * costs.t_nvm_wr * j.power_downs;
                assert!(j.active_ticks <= bound, "case {case}: {j:?} > {bound}");
            }
        }
    }
}

#[test]
fn processor_segments_respect_power_cycles() {
    let mut rng = SplitMix64::new(82);
    for _ in 0..100 {
        let (ts, power, costs) = random_taskset(&mut rng, false);
        let tr = simulate_schedule(&ts, &power, &costs, None).unwrap();
        for w in tr.segments.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        for j in &tr.jobs {
            let busy: u64 = tr
                .segments
                .iter()
                .filter(|s| s.task == j.task && s.job == j.job)
                .map(|s| s.end - s.start)
                .sum();
            assert_eq!(busy, j.active_ticks);
        }
        let released = tr.jobs.iter().filter(|j| j.finish.is_some()).count();
        assert!(released > 0);
    }
}

#[test]
fn verdict_is_sound_on_processor_simulation() {
    for (seed, coeffs) in [(83u64, false), (84, true)] {
        let mut rng = SplitMix64::new(seed);
        let mut schedulable = 0;
        for case in 0..300 {
            let (ts, power, costs) = random_taskset(&mut rng, coeffs);
            let v = schedulable_edf(&ts, &power, &costs).unwrap();
            if !v.schedulable {
                continue;
            }
            schedulable += 1;
            let tr = simulate_schedule(&ts, &power, &costs, None).unwrap();
            assert!(tr.misses.is_empty(), "case {case}: {:?}", tr.misses);
        }
        assert!(schedulable > 100, "{schedulable}");
    }
}

#[test]
fn verdict_is_sound_on_supply_model() {
    let mut rng = SplitMix64::new(85);
    for case in 0..500 {
        let (ts, power, costs) = random_taskset(&mut rng, true);
        let v = schedulable_edf(&ts, &power, &costs).unwrap();
        let timings: Vec<TaskTiming> = ts
            .tasks
            .iter()
            .map(|t| task_timing(t, &power, &costs).unwrap())
            .collect();
        let tr = simulate_supply_model(&timings, &v.supply, default_horizon(&timings).unwrap());
        if v.schedulable {
            assert!(tr.misses.is_empty(), "case {case}");
        }
        for j in &tr.jobs {
            assert!(j.active_ticks <= timings.iter().find(|t| t.id == j.task).unwrap().wcet);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sbf_and_dbf_are_monotone(seed in any::<u64>(), d in 0u64..5000) {
        let mut rng = SplitMix64::new(seed);
        let (ts, power, costs) = random_taskset(&mut rng, true);
        let timings: Vec<TaskTiming> = ts.tasks.iter().map(|t| task_timing(t, &power, &costs).unwrap()).collect();
        let s = Supply::new(&power, &costs, 1).unwrap();
        for delta in [d, d * 7, d * 31] {
            prop_assert!(s.sbf(delta + 1) >= s.sbf(delta));
            prop_assert!(dbf(&timings, delta + 1) >= dbf(&timings, delta));
            prop_assert!(s.sbf(delta) <= delta);
        }
    }

    #[test]
    fn task_json_round_trips(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let (ts, ..) = random_taskset(&mut rng, false);
        let text = serde_json::to_string(&ts).unwrap();
        let back: TaskSet = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, ts);
    }
}

#[test]
fn doubling_time_coefficients_doubles_wcet() {
    let mut rng = SplitMix64::new(86);
    for _ in 0..100 {
        let (ts, power, costs) = random_taskset(&mut rng, true);
        let slow = CostParams {
            t_mac: 2 * costs.t_mac,
            t_nvm_rd: 2 * costs.t_nvm_rd,
            t_nvm_wr: 2 * costs.t_nvm_wr,
            ..costs
        };
        for t in &ts.tasks {
            assert_eq!(
                task_wcet(t, &power, &slow).unwrap(),
                2 * task_wcet(t, &power, &costs).unwrap()
            );
        }
    }
}

#[test]
fn infeasible_task_is_an_error() {
    let (_, _, mut power, costs) = worked_example();
    power.e_budget = 30;
    let err = task_wcet(&worked_task(0, 100, 100), &power, &costs).unwrap_err();
    assert!(matches!(err, hypertile::Error::Infeasible(_)), "{err}");
}

#[derive(serde::Deserialize)]
struct Fixture {
    taskset: TaskSet,
    power: hypertile::intermittent::PowerParams,
    costs: CostParams,
}

/// A set the analysis accepts but the processor misses: the job never
/// exceeds its WCET, yet the energy left at each voluntary power-down is too
/// small for the next unit, so each cycle delivers fewer than Θ active ticks.
#[test]
fn packing_waste_can_defeat_the_supply_bound() {
    let f: Fixture = serde_json::from_str(include_str!("fixtures/sched_unsound.json")).unwrap();
    let v = schedulable_edf(&f.taskset, &f.power, &f.costs).unwrap();
    assert!(v.schedulable);
    let tr = simulate_schedule(&f.taskset, &f.power, &f.costs, None).unwrap();
    assert!(!tr.misses.is_empty());
    let late = tr
        .jobs
        .iter()
        .find(|j| tr.misses.iter().any(|m| m.task == j.task && m.job == j.job))
        .unwrap();
    let wcet = v.wcet[late.task as usize];
    let supply = v.supply;
    assert!(late.active_ticks <= wcet);
    // on-time actually delivered per cycle falls short of theta
    let per_cycle = tr.segments.iter().map(|s| s.end - s.start).max().unwrap();
    assert!(per_cycle < supply.theta);
}
