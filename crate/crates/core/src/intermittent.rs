//! Discrete-event execution of a tiled network across power cycles.
//!
//! Each power cycle boots, reads the valid progress snapshot, then runs units
//! while the remaining energy covers the next unit plus preserving everything
//! buffered so far. Buffered outputs are preserved every `S` units, at the end
//! of each layer, and before a voluntary power-down. Preservation writes the
//! output bytes first and then a 16-byte snapshot into the older of two NVM
//! slots; an abrupt fault part-way through leaves a torn slot that recovery
//! ignores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{
    applies_relu, compute_unit, unit_blocks, ExecutionDesign, UnitBlock, UnitGeometry, UnitStat,
};
use crate::model::{NetworkSpec, QTensor, Shape};
use crate::perfmodel;
use crate::rng::SplitMix64;

pub const SNAPSHOT_BYTES: usize = 16;
pub const SNAPSHOT_MAGIC: u16 = 0x4E49;

/// Order in which snapshot bytes reach NVM. The version goes last, high byte
/// before low byte. A slot is only rewritten two versions later, so the low
/// byte always changes and a torn slot either keeps its old version or fails
/// the checksum.
pub const SNAPSHOT_WRITE_ORDER: [usize; SNAPSHOT_BYTES] =
    [0, 1, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 3, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerParams {
    /// Energy units available per power cycle.
    pub e_budget: u64,
    /// Ticks to refill the buffer after each power-down.
    pub t_recharge: u64,
    /// Fixed ticks of power-up overhead.
    pub t_boot: u64,
}

impl PowerParams {
    pub fn check(&self) -> Result<()> {
        if self.e_budget == 0 {
            return Err(Error::Param("e_budget must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub e_mac: u64,
    pub t_mac: u64,
    pub e_nvm_rd: u64,
    pub t_nvm_rd: u64,
    pub e_nvm_wr: u64,
    pub t_nvm_wr: u64,
    /// Volatile memory in bytes.
    pub vm_capacity: u64,
}

impl Default for CostParams {
    /// Unit coefficients and 2 KB of SRAM.
    fn default() -> Self {
        Self {
            e_mac: 1,
            t_mac: 1,
            e_nvm_rd: 1,
            t_nvm_rd: 1,
            e_nvm_wr: 1,
            t_nvm_wr: 1,
            vm_capacity: 2048,
        }
    }
}

impl CostParams {
    pub fn check(&self) -> Result<()> {
        if self.vm_capacity == 0 {
            return Err(Error::Param("vm_capacity must be > 0".into()));
        }
        Ok(())
    }

    pub fn recovery_energy(&self) -> u64 {
        self.e_nvm_rd * SNAPSHOT_BYTES as u64
    }

    pub fn recovery_time(&self) -> u64 {
        self.t_nvm_rd * SNAPSHOT_BYTES as u64
    }
}

/// Progress indicator: where execution resumes after the last commit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub version: u16,
    pub layer_idx: u16,
    /// Inter-tile indices `(cout, h, w)` of the next unit to run.
    pub indices: [u16; 3],
    /// Units of `layer_idx` already committed.
    pub committed_units: u16,
}

/// Decoded contents of one snapshot slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    /// Never written (version field zero).
    Blank,
    Valid(Snapshot),
    /// Non-zero version but bad magic or checksum.
    Corrupt {
        version: u16,
    },
}

fn checksum(bytes: &[u8]) -> u16 {
    bytes
        .iter()
        .fold(0u16, |acc, &b| acc.wrapping_add(b as u16))
}

impl Snapshot {
    /// Little-endian layout: magic, version, layer, i0, i1, i2, committed, checksum.
    pub fn encode(&self) -> [u8; SNAPSHOT_BYTES] {
        let mut out = [0u8; SNAPSHOT_BYTES];
        let fields = [
            SNAPSHOT_MAGIC,
            self.version,
            self.layer_idx,
            self.indices[0],
            self.indices[1],
            self.indices[2],
            self.committed_units,
        ];
        for (i, f) in fields.iter().enumerate() {
            out[2 * i..2 * i + 2].copy_from_slice(&f.to_le_bytes());
        }
        let sum = checksum(&out[..14]);
        out[14..].copy_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; SNAPSHOT_BYTES]) -> SlotState {
        let field = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]);
        let version = field(1);
        if version == 0 {
            return SlotState::Blank;
        }
        if field(0) != SNAPSHOT_MAGIC || field(7) != checksum(&bytes[..14]) {
            return SlotState::Corrupt { version };
        }
        SlotState::Valid(Snapshot {
            version,
            layer_idx: field(2),
            indices: [field(3), field(4), field(5)],
            committed_units: field(6),
        })
    }

    /// Slot a snapshot with this version is written to (alternating A/B).
    pub fn slot(&self) -> usize {
        (self.version as usize + 1) % 2
    }
}

/// Returns the resume point stored in the two slots: the valid slot with the
/// larger version, or the zero snapshot on a fresh device.
pub fn recover(slots: &[[u8; SNAPSHOT_BYTES]; 2]) -> Result<Snapshot> {
    let states = [Snapshot::decode(&slots[0]), Snapshot::decode(&slots[1])];
    match states {
        [SlotState::Valid(a), SlotState::Valid(b)] => Ok(if b.version > a.version { b } else { a }),
        [SlotState::Valid(s), _] | [_, SlotState::Valid(s)] => Ok(s),
        [SlotState::Blank, SlotState::Blank] => Ok(Snapshot::default()),
        [a, b] => Err(Error::Unrecoverable(format!(
            "no valid snapshot slot (A: {a:?}, B: {b:?})"
        ))),
    }
}

/// Non-volatile state: snapshot slots plus each layer's committed outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NvmImage {
    pub slots: [[u8; SNAPSHOT_BYTES]; 2],
    pub activations: Vec<Vec<i16>>,
}

impl NvmImage {
    pub fn fresh(layer_outputs: &[Shape]) -> Self {
        Self {
            slots: [[0; SNAPSHOT_BYTES]; 2],
            activations: layer_outputs.iter().map(|s| vec![0; s.numel()]).collect(),
        }
    }

    pub fn recover(&self) -> Result<Snapshot> {
        recover(&self.slots)
    }

    /// Raw image: slot A, slot B, then every layer's output buffer as
    /// little-endian `i16`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.slots[0]);
        out.extend_from_slice(&self.slots[1]);
        for a in &self.activations {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn write_output_byte(&mut self, layer: usize, elem: usize, byte: usize, value: i16) {
        let cell = &mut self.activations[layer][elem];
        let mut bytes = cell.to_le_bytes();
        bytes[byte] = value.to_le_bytes()[byte];
        *cell = i16::from_le_bytes(bytes);
    }
}

/// Absolute ticks at which power is cut.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultTrace {
    pub ticks: Vec<u64>,
}

impl FaultTrace {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn check(&self) -> Result<()> {
        if self.ticks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param(
                "fault ticks must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded fault trace with geometric gaps of mean `mean_interval` ticks,
/// truncated before `horizon`.
///
/// Each tick after the previous fault fails with probability
/// `1/mean_interval`, decided by comparing a SplitMix64 draw against
/// `u64::MAX / mean_interval`.
pub fn make_fault_trace(seed: u64, mean_interval: u64, horizon: u64) -> Result<FaultTrace> {
    if mean_interval == 0 {
        return Err(Error::Param("mean fault interval must be > 0".into()));
    }
    let threshold = u64::MAX / mean_interval;
    let mut rng = SplitMix64::new(seed);
    let mut ticks = Vec::new();
    let mut t = 0u64;
    'outer: loop {
        loop {
            t += 1;
            if t >= horizon {
                break 'outer;
            }
            if rng.next_u64() <= threshold {
                break;
            }
        }
        ticks.push(t);
    }
    Ok(FaultTrace { ticks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Boot,
    Recovery,
    Unit,
    Preservation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimEvent {
    CycleStart {
        tick: u64,
        cycle: u64,
    },
    Recovered {
        tick: u64,
        snapshot: Snapshot,
    },
    Unit {
        start: u64,
        end: u64,
        layer: usize,
        unit: usize,
        energy: u64,
    },
    Preserved {
        start: u64,
        end: u64,
        snapshot: Snapshot,
        units: usize,
        energy: u64,
    },
    PowerDown {
        tick: u64,
        remaining_energy: u64,
    },
    Fault {
        tick: u64,
        phase: Phase,
        lost_units: u64,
    },
    Completed {
        tick: u64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    pub record_events: bool,
    /// Keep the final NVM image in [`SimResult::nvm`].
    pub keep_image: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimResult {
    pub output: QTensor,
    pub latency_ticks: u64,
    /// Power-on intervals, including ones cut short by faults.
    pub cycles: u64,
    pub per_cycle_energy: Vec<u64>,
    pub preservations: u64,
    pub recoveries: u64,
    pub lost_units: u64,
    /// Faults that landed while the device was on.
    pub abrupt_faults: u64,
    /// Ticks spent running units and preservations, interrupted ones included.
    pub active_ticks: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<SimEvent>,
    #[serde(skip)]
    pub nvm: Option<NvmImage>,
}

impl SimResult {
    pub fn max_cycle_energy(&self) -> u64 {
        self.per_cycle_energy.iter().copied().max().unwrap_or(0)
    }
}

struct LayerPlan {
    blocks: Vec<UnitBlock>,
    stats: Vec<UnitStat>,
    in_shape: Shape,
    out_shape: Shape,
    relu: bool,
}

struct Pending {
    unit: usize,
    values: Vec<i16>,
}

enum Outcome {
    Done,
    Faulted { elapsed: u64 },
}

struct Machine<'a> {
    net: &'a NetworkSpec,
    input: &'a QTensor,
    plans: Vec<LayerPlan>,
    batch: usize,
    power: PowerParams,
    costs: CostParams,
    faults: &'a [u64],
    next_fault: usize,
    record: bool,
    keep_image: bool,

    nvm: NvmImage,
    time: u64,
    energy: u64,
    res: SimResult,
}

impl Machine<'_> {
    /// Runs an operation of `duration` ticks costing `energy` eu, unless a
    /// fault lands inside it. Interrupted operations pay energy pro rata.
    fn op(&mut self, duration: u64, energy: u64, active: bool) -> Outcome {
        while self.next_fault < self.faults.len() && self.faults[self.next_fault] < self.time {
            self.next_fault += 1;
        }
        if let Some(&f) = self.faults.get(self.next_fault) {
            if f < self.time + duration {
                self.next_fault += 1;
                let elapsed = f - self.time;
                let used = (energy as u128 * elapsed as u128 / duration as u128) as u64;
                self.consume(used);
                self.time = f;
                if active {
                    self.res.active_ticks += elapsed;
                }
                self.res.abrupt_faults += 1;
                return Outcome::Faulted { elapsed };
            }
        }
        self.time += duration;
        self.consume(energy);
        if active {
            self.res.active_ticks += duration;
        }
        Outcome::Done
    }

    fn consume(&mut self, e: u64) {
        debug_assert!(e <= self.energy, "energy overdraw");
        self.energy -= e;
        *self.res.per_cycle_energy.last_mut().unwrap() += e;
    }

    fn event(&mut self, ev: SimEvent) {
        if self.record {
            self.res.events.push(ev);
        }
    }

    fn fault(&mut self, phase: Phase, lost: u64) {
        self.res.lost_units += lost;
        let tick = self.time;
        self.event(SimEvent::Fault {
            tick,
            phase,
            lost_units: lost,
        });
    }

    fn unit_input(&self, layer: usize) -> &[i16] {
        if layer == 0 {
            &self.input.data
        } else {
            &self.nvm.activations[layer - 1]
        }
    }

    /// Snapshot describing the position after committing `n` more units.
    fn next_snapshot(&self, base: Snapshot, layer: usize, committed: usize) -> Snapshot {
        let plan = &self.plans[layer];
        let (layer_idx, committed, indices) = if committed == plan.blocks.len() {
            (layer + 1, 0, [0; 3])
        } else {
            (layer, committed, plan.blocks[committed].index)
        };
        Snapshot {
            version: base.version + 1,
            layer_idx: layer_idx as u16,
            indices: indices.map(|i| i as u16),
            committed_units: committed as u16,
        }
    }

    /// Writes `pending` and a new snapshot. Returns the committed snapshot, or
    /// `None` if a fault tore the write.
    fn preserve(
        &mut self,
        cur: Snapshot,
        layer: usize,
        pending: &[Pending],
    ) -> Result<Option<Snapshot>> {
        if cur.version == u16::MAX {
            return Err(Error::Param("snapshot version space exhausted".into()));
        }
        let committed = cur.committed_units as usize + pending.len();
        let snap = self.next_snapshot(cur, layer, committed);
        let plan = &self.plans[layer];

        // (element index, value) for every buffered output, in write order
        let mut elems = Vec::new();
        for p in pending {
            let block = &plan.blocks[p.unit];
            let mut vals = p.values.iter();
            for co in block.co.clone() {
                for oy in block.oy.clone() {
                    for ox in block.ox.clone() {
                        elems.push((plan.out_shape.index(co, oy, ox), *vals.next().unwrap()));
                    }
                }
            }
        }
        let out_bytes = elems.len() * 2;
        let total = (out_bytes + SNAPSHOT_BYTES) as u64;
        let energy = self.costs.e_nvm_wr * total;
        let start = self.time;
        let written = match self.op(self.costs.t_nvm_wr * total, energy, true) {
            Outcome::Done => total as usize,
            Outcome::Faulted { elapsed } => (elapsed / self.costs.t_nvm_wr) as usize,
        };

        for b in 0..written.min(out_bytes) {
            let (elem, value) = elems[b / 2];
            self.nvm.write_output_byte(layer, elem, b % 2, value);
        }
        let encoded = snap.encode();
        let slot = snap.slot();
        for &pos in SNAPSHOT_WRITE_ORDER
            .iter()
            .take(written.saturating_sub(out_bytes))
        {
            self.nvm.slots[slot][pos] = encoded[pos];
        }
        if written < total as usize {
            return Ok(None);
        }
        self.res.preservations += 1;
        let end = self.time;
        self.event(SimEvent::Preserved {
            start,
            end,
            snapshot: snap,
            units: pending.len(),
            energy,
        });
        Ok(Some(snap))
    }

    fn run(mut self) -> Result<SimResult> {
        let n_layers = self.plans.len();
        loop {
            if self.res.cycles > 0 {
                self.time += self.power.t_recharge;
            }
            self.res.cycles += 1;
            self.res.per_cycle_energy.push(0);
            self.energy = self.power.e_budget;
            let (tick, cycle) = (self.time, self.res.cycles);
            self.event(SimEvent::CycleStart { tick, cycle });

            if let Outcome::Faulted { .. } = self.op(self.power.t_boot, 0, false) {
                self.fault(Phase::Boot, 0);
                continue;
            }
            if let Outcome::Faulted { .. } = self.op(
                self.costs.recovery_time(),
                self.costs.recovery_energy(),
                false,
            ) {
                self.fault(Phase::Recovery, 0);
                continue;
            }
            self.res.recoveries += 1;
            let mut snap = self.nvm.recover()?;
            let tick = self.time;
            self.event(SimEvent::Recovered {
                tick,
                snapshot: snap,
            });

            let mut pending: Vec<Pending> = Vec::new();
            let mut pending_bytes = 0u64;
            let mut ran_any = false;
            loop {
                let layer = snap.layer_idx as usize;
                if layer == n_layers {
                    let tick = self.time;
                    self.event(SimEvent::Completed { tick });
                    let out_shape = self.plans[n_layers - 1].out_shape;
                    let data = self.nvm.activations[n_layers - 1].clone();
                    self.res.output = QTensor::new(out_shape, self.net.act_frac_bits, data)?;
                    if self.keep_image {
                        self.res.nvm = Some(self.nvm.clone());
                    }
                    self.res.latency_ticks = self.time;
                    return Ok(self.res);
                }
                let unit = snap.committed_units as usize + pending.len();
                let st = self.plans[layer].stats[unit];
                let e_unit = self.costs.e_nvm_rd * st.fetched_bytes + self.costs.e_mac * st.macs;
                let t_unit = self.costs.t_nvm_rd * st.fetched_bytes + self.costs.t_mac * st.macs;
                let need = e_unit
                    + self.costs.e_nvm_wr
                        * (pending_bytes + st.output_bytes + SNAPSHOT_BYTES as u64);
                if self.energy < need {
                    if !pending.is_empty() {
                        match self.preserve(snap, layer, &pending)? {
                            Some(_) => {}
                            None => {
                                self.fault(Phase::Preservation, pending.len() as u64);
                                break;
                            }
                        }
                    } else if !ran_any {
                        return Err(Error::Infeasible(crate::Infeasibility::Energy {
                            layer,
                            needed: need + self.costs.recovery_energy(),
                            budget: self.power.e_budget,
                        }));
                    }
                    let (tick, remaining_energy) = (self.time, self.energy);
                    self.event(SimEvent::PowerDown {
                        tick,
                        remaining_energy,
                    });
                    break;
                }

                let start = self.time;
                if let Outcome::Faulted { .. } = self.op(t_unit, e_unit, true) {
                    self.fault(Phase::Unit, pending.len() as u64 + 1);
                    break;
                }
                ran_any = true;
                let plan = &self.plans[layer];
                let values = compute_unit(
                    &self.net.layers[layer],
                    self.net.weights[layer].as_ref(),
                    self.unit_input(layer),
                    plan.in_shape,
                    &plan.blocks[unit],
                    plan.relu,
                );
                let end = self.time;
                self.event(SimEvent::Unit {
                    start,
                    end,
                    layer,
                    unit,
                    energy: e_unit,
                });
                pending.push(Pending { unit, values });
                pending_bytes += st.output_bytes;

                if pending.len() == self.batch || unit + 1 == self.plans[layer].blocks.len() {
                    match self.preserve(snap, layer, &pending)? {
                        Some(s) => {
                            snap = s;
                            pending.clear();
                            pending_bytes = 0;
                        }
                        None => {
                            self.fault(Phase::Preservation, pending.len() as u64);
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// Runs `net` on `input` under intermittent power; see the module docs for
/// the event rules.
pub fn simulate(
    net: &NetworkSpec,
    input: &QTensor,
    design: &ExecutionDesign,
    power: &PowerParams,
    costs: &CostParams,
    faults: &FaultTrace,
) -> Result<SimResult> {
    simulate_with(
        net,
        input,
        design,
        power,
        costs,
        faults,
        SimOptions::default(),
    )
}

pub fn simulate_with(
    net: &NetworkSpec,
    input: &QTensor,
    design: &ExecutionDesign,
    power: &PowerParams,
    costs: &CostParams,
    faults: &FaultTrace,
    options: SimOptions,
) -> Result<SimResult> {
    net.validate()?;
    design.check(net)?;
    power.check()?;
    costs.check()?;
    faults.check()?;
    input.check()?;
    if input.shape != net.input_shape || input.frac_bits != net.act_frac_bits {
        return Err(Error::Input(format!(
            "input {} q{} does not match network input {} q{}",
            input.shape, input.frac_bits, net.input_shape, net.act_frac_bits
        )));
    }
    perfmodel::feasible(net, design, power, costs).map_err(Error::Infeasible)?;

    let shapes = net.shapes()?;
    let plans: Vec<LayerPlan> = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let geom = UnitGeometry::of(layer);
            let blocks = unit_blocks(shapes[i + 1], &design.tiles[i]);
            let stats = blocks
                .iter()
                .map(|b| {
                    let (tc, th, tw) = b.dims();
                    geom.unit_stat(tc, th, tw)
                })
                .collect();
            LayerPlan {
                blocks,
                stats,
                in_shape: shapes[i],
                out_shape: shapes[i + 1],
                relu: applies_relu(net, i),
            }
        })
        .collect();
    if net.layers.len() >= u16::MAX as usize
        || plans.iter().any(|p| p.blocks.len() >= u16::MAX as usize)
    {
        return Err(Error::Param(
            "too many units for 16-bit progress indicators".into(),
        ));
    }

    let machine = Machine {
        net,
        input,
        batch: design.batch_size,
        power: *power,
        costs: *costs,
        faults: &faults.ticks,
        next_fault: 0,
        record: options.record_events,
        keep_image: options.keep_image,
        nvm: NvmImage::fresh(&shapes[1..]),
        plans,
        time: 0,
        energy: 0,
        res: SimResult {
            output: QTensor::zeros(Shape::new(0, 0, 0), net.act_frac_bits),
            latency_ticks: 0,
            cycles: 0,
            per_cycle_energy: Vec::new(),
            preservations: 0,
            recoveries: 0,
            lost_units: 0,
            abrupt_faults: 0,
            active_ticks: 0,
            events: Vec::new(),
            nvm: None,
        },
    };
    machine.run()
}
