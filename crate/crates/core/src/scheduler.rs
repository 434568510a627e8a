//! Real-time analysis of periodic inference tasks sharing one intermittent
//! processor.
//!
//! The supply is a periodic resource: every `Π` ticks the device boots,
//! recovers its snapshot and then offers `Θ` ticks of active time before the
//! buffer runs dry. Jobs run non-preemptively under EDF. The analysis checks
//! `dbf(Δ) + B(Δ) <= sbf(Δ)` over a finite set of test points.
//!
//! [`simulate_schedule`] runs the task set on the unit-level intermittent
//! processor and reports deadline misses; [`simulate_supply_model`] runs it
//! on the idealised periodic supply the analysis assumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecutionDesign;
use crate::intermittent::{CostParams, PowerParams, SNAPSHOT_BYTES};
use crate::model::NetworkSpec;
use crate::perfmodel::{feasible, predict, replay, unit_ops, UnitOp};

/// Upper bound on the number of EDF test points.
pub const MAX_TEST_POINTS: u64 = 20_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: u32,
    pub network: NetworkSpec,
    pub design: ExecutionDesign,
    pub period: u64,
    pub deadline: u64,
    #[serde(default)]
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSet {
    pub tasks: Vec<TaskSpec>,
    /// Ticks of on-time per energy unit in the supply model.
    #[serde(default = "one")]
    pub ticks_per_energy: u64,
}

fn one() -> u64 {
    1
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskSpec>) -> Self {
        Self {
            tasks,
            ticks_per_energy: 1,
        }
    }
}

/// Timing view of a task: what the analysis and simulator actually use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTiming {
    pub id: u32,
    /// Worst-case active ticks per job.
    pub wcet: u64,
    /// Active ticks a job actually consumes in the simulator.
    pub work: u64,
    pub period: u64,
    pub deadline: u64,
    pub offset: u64,
}

impl TaskTiming {
    pub fn check(&self) -> Result<()> {
        if self.period == 0 || self.deadline == 0 || self.deadline > self.period {
            return Err(Error::Param(format!(
                "task {}: need T > 0 and 0 < D <= T (T={}, D={})",
                self.id, self.period, self.deadline
            )));
        }
        if self.work > self.wcet {
            return Err(Error::Param(format!(
                "task {}: work {} exceeds wcet {}",
                self.id, self.work, self.wcet
            )));
        }
        Ok(())
    }
}

/// Periodic resource: `theta` active ticks every `period` ticks, starting
/// `lead` ticks into each period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Supply {
    pub theta: u64,
    pub period: u64,
    pub lead: u64,
}

impl Supply {
    pub fn new(power: &PowerParams, costs: &CostParams, ticks_per_energy: u64) -> Result<Self> {
        let snap = SNAPSHOT_BYTES as u64;
        let on = power
            .e_budget
            .checked_sub(snap * costs.e_nvm_rd)
            .and_then(|e| e.checked_mul(ticks_per_energy))
            .unwrap_or(0);
        if on <= power.t_boot {
            return Err(Error::Supply(format!(
                "budget {} cannot sustain boot and recovery",
                power.e_budget
            )));
        }
        let theta = on - power.t_boot;
        let lead = power.t_boot + snap * costs.t_nvm_rd;
        Ok(Self {
            theta,
            period: theta + lead + power.t_recharge,
            lead,
        })
    }

    /// Minimum active ticks in any window of length `delta`.
    pub fn sbf(&self, delta: u64) -> u64 {
        let blackout = 2 * (self.period - self.theta);
        if delta < blackout {
            return 0;
        }
        let x = delta - blackout;
        (x / self.period) * self.theta + (x % self.period).min(self.theta)
    }

    fn is_on(&self, t: u64) -> bool {
        let phase = t % self.period;
        phase >= self.lead && phase < self.lead + self.theta
    }

    /// First tick `>= t` at which the supply is on.
    fn next_on(&self, t: u64) -> u64 {
        if self.is_on(t) {
            return t;
        }
        let base = t - t % self.period;
        let start = base + self.lead;
        if t < start {
            start
        } else {
            start + self.period
        }
    }

    /// End of the on-window containing `t` (supply must be on at `t`).
    fn window_end(&self, t: u64) -> u64 {
        t - t % self.period + self.lead + self.theta
    }
}

/// Supply-bound function with unit ticks per energy.
pub fn sbf(power: &PowerParams, costs: &CostParams, delta: u64) -> Result<u64> {
    Ok(Supply::new(power, costs, 1)?.sbf(delta))
}

/// Demand-bound function: `Σ max(0, ⌊(Δ − D)/T⌋ + 1) · C`.
pub fn dbf(tasks: &[TaskTiming], delta: u64) -> u64 {
    tasks
        .iter()
        .filter(|t| delta >= t.deadline)
        .map(|t| ((delta - t.deadline) / t.period + 1) * t.wcet)
        .sum()
}

/// Largest WCET among tasks with `D > delta`.
pub fn blocking(tasks: &[TaskTiming], delta: u64) -> u64 {
    tasks
        .iter()
        .filter(|t| t.deadline > delta)
        .map(|t| t.wcet)
        .max()
        .unwrap_or(0)
}

/// Active ticks of one job: units plus preservations, with every unit
/// charged as a full tile.
pub fn task_wcet(task: &TaskSpec, power: &PowerParams, costs: &CostParams) -> Result<u64> {
    let worst = replay(&task.network, &task.design, power, costs, true)?;
    let exact = predict(&task.network, &task.design, power, costs)?;
    Ok(worst.active_ticks.max(exact.active_ticks))
}

pub fn task_timing(task: &TaskSpec, power: &PowerParams, costs: &CostParams) -> Result<TaskTiming> {
    let exact = predict(&task.network, &task.design, power, costs)?;
    let wcet = task_wcet(task, power, costs)?;
    let t = TaskTiming {
        id: task.id,
        wcet,
        work: exact.active_ticks,
        period: task.period,
        deadline: task.deadline,
        offset: task.offset,
    };
    t.check()?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Witness {
    /// First test point where demand plus blocking exceeds supply.
    TestPoint {
        delta: u64,
        demand: u64,
        blocking: u64,
        supply: u64,
    },
    /// Long-run demand rate exceeds the supply rate.
    Utilization { demand_num: u128, supply_num: u128 },
    /// Every test point passed; `checked` points up to `bound`.
    AllPassed { checked: u64, bound: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedVerdict {
    pub schedulable: bool,
    pub witness: Witness,
    pub wcet: Vec<u64>,
    pub supply: Supply,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common multiple of all periods; `None` on overflow.
pub fn hyperperiod(tasks: &[TaskTiming]) -> Option<u64> {
    tasks
        .iter()
        .try_fold(1u64, |l, t| (l / gcd(l, t.period)).checked_mul(t.period))
}

/// Non-preemptive EDF test on precomputed timings.
pub fn edf_test(tasks: &[TaskTiming], supply: &Supply) -> Result<SchedVerdict> {
    for t in tasks {
        t.check()?;
    }
    let wcet = tasks.iter().map(|t| t.wcet).collect();
    let verdict = |schedulable, witness| SchedVerdict {
        schedulable,
        witness,
        wcet,
        supply: *supply,
    };
    if tasks.is_empty() {
        return Ok(verdict(
            true,
            Witness::AllPassed {
                checked: 0,
                bound: 0,
            },
        ));
    }
    let h = hyperperiod(tasks).ok_or_else(|| Error::Param("hyperperiod overflows u64".into()))?;

    // Σ C/T > Θ/Π, compared exactly over the hyperperiod
    let demand_num: u128 = tasks
        .iter()
        .map(|t| t.wcet as u128 * (h / t.period) as u128 * supply.period as u128)
        .sum();
    let supply_num = supply.theta as u128 * h as u128;
    if demand_num > supply_num {
        return Ok(verdict(
            false,
            Witness::Utilization {
                demand_num,
                supply_num,
            },
        ));
    }

    let max_d = tasks.iter().map(|t| t.deadline).max().unwrap();
    let bound = h.saturating_add(max_d);
    let n_points: u64 = tasks
        .iter()
        .map(|t| (bound - t.deadline.min(bound)) / t.period + 1)
        .fold(0u64, |a, b| a.saturating_add(b));
    if n_points > MAX_TEST_POINTS {
        return Err(Error::Param(format!(
            "{n_points} test points exceed the limit of {MAX_TEST_POINTS}"
        )));
    }
    let mut points: Vec<u64> = Vec::with_capacity(n_points as usize);
    for t in tasks {
        let mut d = t.deadline;
        while d <= bound {
            points.push(d);
            d += t.period;
        }
    }
    points.sort_unstable();
    points.dedup();
    for &delta in &points {
        let demand = dbf(tasks, delta);
        let b = blocking(tasks, delta);
        let s = supply.sbf(delta);
        if demand + b > s {
            return Ok(verdict(
                false,
                Witness::TestPoint {
                    delta,
                    demand,
                    blocking: b,
                    supply: s,
                },
            ));
        }
    }
    Ok(verdict(
        true,
        Witness::AllPassed {
            checked: points.len() as u64,
            bound,
        },
    ))
}

/// Non-preemptive EDF schedulability of `taskset` on the intermittent supply.
pub fn schedulable_edf(
    taskset: &TaskSet,
    power: &PowerParams,
    costs: &CostParams,
) -> Result<SchedVerdict> {
    let supply = Supply::new(power, costs, taskset.ticks_per_energy)?;
    let timings = taskset
        .tasks
        .iter()
        .map(|t| task_timing(t, power, costs))
        .collect::<Result<Vec<_>>>()?;
    edf_test(&timings, &supply)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub task: u32,
    pub job: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRecord {
    pub task: u32,
    pub job: u64,
    pub release: u64,
    pub deadline: u64,
    pub finish: Option<u64>,
    pub active_ticks: u64,
    /// Voluntary power-downs while this job was running (processor
    /// simulation only).
    #[serde(default)]
    pub power_downs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Miss {
    pub task: u32,
    pub job: u64,
    pub deadline: u64,
    /// Completion tick, or `None` if still unfinished at the horizon.
    pub finish: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleTrace {
    pub horizon: u64,
    /// Power-on intervals (processor simulation only).
    #[serde(default)]
    pub cycles: u64,
    pub segments: Vec<Segment>,
    pub jobs: Vec<JobRecord>,
    pub misses: Vec<Miss>,
}

struct Pending {
    slot: usize,
    remaining: u64,
}

/// Tick-exact non-preemptive EDF on the periodic supply. Jobs are released
/// in `[0, horizon)`; misses are reported for deadlines `<= horizon`.
pub fn simulate_supply_model(tasks: &[TaskTiming], supply: &Supply, horizon: u64) -> ScheduleTrace {
    let mut trace = ScheduleTrace {
        horizon,
        ..Default::default()
    };
    if tasks.is_empty() {
        return trace;
    }
    let mut next_release: Vec<(u64, u64)> = tasks.iter().map(|t| (t.offset, 0)).collect();
    let mut ready: Vec<usize> = Vec::new();
    let mut running: Option<Pending> = None;
    let mut t = 0u64;

    let release_until = |now: u64,
                         next_release: &mut Vec<(u64, u64)>,
                         ready: &mut Vec<usize>,
                         jobs: &mut Vec<JobRecord>| {
        for (i, task) in tasks.iter().enumerate() {
            while next_release[i].0 <= now && next_release[i].0 < horizon {
                let (r, k) = next_release[i];
                ready.push(jobs.len());
                jobs.push(JobRecord {
                    task: task.id,
                    job: k,
                    release: r,
                    deadline: r + task.deadline,
                    finish: None,
                    active_ticks: 0,
                    power_downs: 0,
                });
                next_release[i] = (r + task.period, k + 1);
            }
        }
    };

    while t < horizon {
        release_until(t, &mut next_release, &mut ready, &mut trace.jobs);
        if !supply.is_on(t) {
            t = supply.next_on(t).min(horizon);
            continue;
        }
        if running.is_none() {
            // EDF, ties to lower task id then earlier release
            let pick = ready
                .iter()
                .enumerate()
                .min_by_key(|(_, &j)| {
                    let r = &trace.jobs[j];
                    (r.deadline, r.task, r.release)
                })
                .map(|(pos, _)| pos);
            match pick {
                Some(pos) => {
                    let slot = ready.swap_remove(pos);
                    let task = tasks
                        .iter()
                        .find(|x| x.id == trace.jobs[slot].task)
                        .unwrap();
                    running = Some(Pending {
                        slot,
                        remaining: task.work,
                    });
                }
                None => {
                    let next = next_release
                        .iter()
                        .map(|r| r.0)
                        .min()
                        .unwrap_or(horizon)
                        .min(horizon);
                    t = next.max(t + 1);
                    continue;
                }
            }
        }
        let job = running.as_mut().unwrap();
        let end = supply.window_end(t).min(horizon).min(t + job.remaining);
        let rec = &mut trace.jobs[job.slot];
        if end > t {
            match trace.segments.last_mut() {
                Some(s) if s.task == rec.task && s.job == rec.job && s.end == t => s.end = end,
                _ => trace.segments.push(Segment {
                    task: rec.task,
                    job: rec.job,
                    start: t,
                    end,
                }),
            }
        }
        rec.active_ticks += end - t;
        job.remaining -= end - t;
        t = end;
        if job.remaining == 0 {
            rec.finish = Some(t);
            running = None;
        }
    }

    trace.misses = collect_misses(&trace.jobs, horizon);
    trace
}

/// Default horizon: hyperperiod plus the largest offset and deadline.
pub fn default_horizon(tasks: &[TaskTiming]) -> Option<u64> {
    let h = hyperperiod(tasks)?;
    let off = tasks.iter().map(|t| t.offset).max().unwrap_or(0);
    let d = tasks.iter().map(|t| t.deadline).max().unwrap_or(0);
    h.checked_add(off)?.checked_add(d)
}

/// Simulates `taskset` on the intermittent processor over `horizon` ticks
/// (default: [`default_horizon`]).
///
/// The device boots at tick 0 with a full buffer. Each power cycle boots,
/// reads the snapshot, then runs units of the current job under the
/// proactive-preservation rule: when the next unit plus the pending batch
/// and a snapshot no longer fit, the batch is committed and the device
/// powers down for `t_recharge`. Jobs run to completion (non-preemptive
/// EDF, ties to the lower task id, then the earlier release); a job that
/// finishes mid-cycle hands the remaining energy to the next one. With no
/// ready job the device idles without drawing energy. Jobs are released in
/// `[0, horizon)` and misses are reported for deadlines `<= horizon`.
pub fn simulate_schedule(
    taskset: &TaskSet,
    power: &PowerParams,
    costs: &CostParams,
    horizon: Option<u64>,
) -> Result<ScheduleTrace> {
    let timings = taskset
        .tasks
        .iter()
        .map(|t| task_timing(t, power, costs))
        .collect::<Result<Vec<_>>>()?;
    let horizon = match horizon {
        Some(h) => h,
        None => default_horizon(&timings)
            .ok_or_else(|| Error::Param("hyperperiod overflows u64".into()))?,
    };
    let plans = taskset
        .tasks
        .iter()
        .map(|t| {
            feasible(&t.network, &t.design, power, costs).map_err(Error::Infeasible)?;
            Ok(JobPlan {
                layers: unit_ops(&t.network, &t.design, costs, false)?,
                batch: t.design.batch_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Processor::new(&timings, &plans, power, costs, horizon).run())
}

struct JobPlan {
    layers: Vec<Vec<UnitOp>>,
    batch: usize,
}

struct Running {
    slot: usize,
    task: usize,
    layer: usize,
    unit: usize,
    pend_units: usize,
    pend_bytes: u64,
}

struct Processor<'a> {
    tasks: &'a [TaskTiming],
    plans: &'a [JobPlan],
    power: &'a PowerParams,
    costs: &'a CostParams,
    horizon: u64,
    t: u64,
    energy: u64,
    next_release: Vec<(u64, u64)>,
    ready: Vec<usize>,
    trace: ScheduleTrace,
}

impl<'a> Processor<'a> {
    fn new(
        tasks: &'a [TaskTiming],
        plans: &'a [JobPlan],
        power: &'a PowerParams,
        costs: &'a CostParams,
        horizon: u64,
    ) -> Self {
        Self {
            tasks,
            plans,
            power,
            costs,
            horizon,
            t: 0,
            energy: 0,
            next_release: tasks.iter().map(|t| (t.offset, 0)).collect(),
            ready: Vec::new(),
            trace: ScheduleTrace {
                horizon,
                ..Default::default()
            },
        }
    }

    fn release(&mut self) {
        for (i, task) in self.tasks.iter().enumerate() {
            while self.next_release[i].0 <= self.t && self.next_release[i].0 < self.horizon {
                let (r, k) = self.next_release[i];
                self.ready.push(self.trace.jobs.len());
                self.trace.jobs.push(JobRecord {
                    task: task.id,
                    job: k,
                    release: r,
                    deadline: r + task.deadline,
                    finish: None,
                    active_ticks: 0,
                    power_downs: 0,
                });
                self.next_release[i] = (r + task.period, k + 1);
            }
        }
    }

    fn boot(&mut self) {
        self.trace.cycles += 1;
        self.t += self.power.t_boot + self.costs.recovery_time();
        self.energy = self.power.e_budget - self.costs.recovery_energy();
    }

    fn active(&mut self, slot: usize, ticks: u64) {
        let rec = &mut self.trace.jobs[slot];
        let (start, end) = (self.t, self.t + ticks);
        rec.active_ticks += ticks;
        if ticks > 0 {
            match self.trace.segments.last_mut() {
                Some(s) if s.task == rec.task && s.job == rec.job && s.end == start => s.end = end,
                _ => self.trace.segments.push(Segment {
                    task: rec.task,
                    job: rec.job,
                    start,
                    end,
                }),
            }
        }
        self.t = end;
    }

    fn commit(&mut self, run: &mut Running) {
        let bytes = run.pend_bytes + SNAPSHOT_BYTES as u64;
        self.energy -= self.costs.e_nvm_wr * bytes;
        self.active(run.slot, self.costs.t_nvm_wr * bytes);
        run.pend_units = 0;
        run.pend_bytes = 0;
    }

    fn pick(&mut self) -> Option<usize> {
        let jobs = &self.trace.jobs;
        let pos = self
            .ready
            .iter()
            .enumerate()
            .min_by_key(|(_, &j)| (jobs[j].deadline, jobs[j].task, jobs[j].release))
            .map(|(pos, _)| pos)?;
        Some(self.ready.swap_remove(pos))
    }

    fn run(mut self) -> ScheduleTrace {
        if self.tasks.is_empty() {
            return self.trace;
        }
        self.boot();
        let mut running: Option<Running> = None;
        let mut fresh_cycle = true;
        while self.t < self.horizon {
            self.release();
            let mut run = match running.take() {
                Some(r) => r,
                None => match self.pick() {
                    Some(slot) => {
                        let task = self
                            .tasks
                            .iter()
                            .position(|x| x.id == self.trace.jobs[slot].task)
                            .unwrap();
                        Running {
                            slot,
                            task,
                            layer: 0,
                            unit: 0,
                            pend_units: 0,
                            pend_bytes: 0,
                        }
                    }
                    None => {
                        let next = self.next_release.iter().map(|r| r.0).min().unwrap();
                        if next >= self.horizon {
                            break;
                        }
                        self.t = next;
                        continue;
                    }
                },
            };
            let plan = &self.plans[run.task];
            let layer = &plan.layers[run.layer];
            let op = layer[run.unit];
            let need = op.energy
                + self.costs.e_nvm_wr * (run.pend_bytes + op.output_bytes + SNAPSHOT_BYTES as u64);
            if self.energy < need {
                assert!(!fresh_cycle, "feasible unit does not fit a fresh cycle");
                if run.pend_units > 0 {
                    self.commit(&mut run);
                }
                self.trace.jobs[run.slot].power_downs += 1;
                self.t += self.power.t_recharge;
                self.boot();
                fresh_cycle = true;
                running = Some(run);
                continue;
            }
            fresh_cycle = false;
            self.energy -= op.energy;
            self.active(run.slot, op.ticks);
            run.pend_units += 1;
            run.pend_bytes += op.output_bytes;
            run.unit += 1;
            let layer_done = run.unit == layer.len();
            if run.pend_units == plan.batch || layer_done {
                self.commit(&mut run);
            }
            if layer_done {
                run.layer += 1;
                run.unit = 0;
            }
            if run.layer == plan.layers.len() {
                self.trace.jobs[run.slot].finish = Some(self.t);
            } else {
                running = Some(run);
            }
        }
        self.trace.misses = collect_misses(&self.trace.jobs, self.horizon);
        self.trace
    }
}

fn collect_misses(jobs: &[JobRecord], horizon: u64) -> Vec<Miss> {
    jobs.iter()
        .filter(|r| match r.finish {
            Some(f) => f > r.deadline,
            None => r.deadline <= horizon,
        })
        .map(|r| Miss {
            task: r.task,
            job: r.job,
            deadline: r.deadline,
            finish: r.finish,
        })
        .collect()
}
