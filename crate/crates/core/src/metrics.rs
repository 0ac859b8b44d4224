//! Throughput, overhead, payload and the energy model.
//!
//! Energy is `cpu_seconds * tdp_watts + payload_bits * joules_per_bit`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codec::CodecSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub tdp_watts: f64,
    pub joules_per_bit: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            tdp_watts: 15.0,
            joules_per_bit: 10e-12,
        }
    }
}

impl EnergyParams {
    pub fn new(tdp_watts: f64, joules_per_bit: f64) -> Option<Self> {
        let ok = tdp_watts.is_finite() && tdp_watts > 0.0 && joules_per_bit.is_finite() && joules_per_bit >= 0.0;
        ok.then_some(EnergyParams {
            tdp_watts,
            joules_per_bit,
        })
    }
}

pub fn energy_estimate(cpu_seconds: f64, payload_bits: u64, p: &EnergyParams) -> f64 {
    cpu_seconds * p.tdp_watts + payload_bits as f64 * p.joules_per_bit
}

/// Cycles per second; zero for an empty window.
pub fn throughput(cycles: u64, window_seconds: f64) -> f64 {
    if window_seconds > 0.0 {
        cycles as f64 / window_seconds
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsgClass {
    Architecture,
    Weights,
    Data,
}

impl MsgClass {
    pub const ALL: [MsgClass; 3] = [MsgClass::Architecture, MsgClass::Weights, MsgClass::Data];

    pub fn label(self) -> &'static str {
        match self {
            MsgClass::Architecture => "architecture",
            MsgClass::Weights => "weights",
            MsgClass::Data => "data",
        }
    }
}

impl fmt::Display for MsgClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Running sum of formatting-time samples. Durations add as integer
/// nanoseconds, so the total is exactly the sum of the samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverheadMeter {
    total: Duration,
    samples: u64,
}

impl OverheadMeter {
    pub fn record(&mut self, d: Duration) {
        self.total += d;
        self.samples += 1;
    }

    pub fn total(&self) -> Duration {
        self.total
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassTotals {
    pub payload_bytes: u64,
    pub overhead: Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeTotals {
    pub index: usize,
    pub layers: usize,
    pub cycles: u64,
    pub compute: Duration,
    pub overhead: Duration,
    /// All bytes this node wrote downstream, its Shutdown frame included.
    pub sent_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub cycles_completed: u64,
    pub window_seconds: f64,
    pub throughput: f64,
    pub classes: BTreeMap<MsgClass, ClassTotals>,
    pub nodes: Vec<NodeTotals>,
}

impl MetricsReport {
    pub fn overhead_seconds(&self) -> f64 {
        self.classes
            .values()
            .map(|c| c.overhead)
            .sum::<Duration>()
            .as_secs_f64()
    }

    pub fn payload_bytes(&self, class: MsgClass) -> u64 {
        self.classes.get(&class).map_or(0, |c| c.payload_bytes)
    }

    pub fn total_payload_bytes(&self) -> u64 {
        self.classes.values().map(|c| c.payload_bytes).sum()
    }

    /// Formatting energy plus transmission energy for one message class.
    pub fn class_energy(&self, class: MsgClass, p: &EnergyParams) -> f64 {
        let c = self.classes.get(&class).copied().unwrap_or_default();
        energy_estimate(c.overhead.as_secs_f64(), c.payload_bytes * 8, p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeEnergy {
    pub index: usize,
    pub cycles: u64,
    pub compute_j: f64,
    pub overhead_j: f64,
    pub network_j: f64,
}

impl NodeEnergy {
    pub fn total(&self) -> f64 {
        self.compute_j + self.overhead_j + self.network_j
    }

    /// Energy per completed inference cycle; zero if the node saw none.
    pub fn per_cycle(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.total() / self.cycles as f64
        }
    }

    pub fn compute_per_cycle(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.compute_j / self.cycles as f64
        }
    }
}

/// One entry per compute node: that node's CPU time (inference and
/// formatting) times TDP plus its transmitted bits times the per-bit cost.
pub fn per_node_energy(report: &MetricsReport, p: &EnergyParams) -> Vec<NodeEnergy> {
    report
        .nodes
        .iter()
        .map(|n| NodeEnergy {
            index: n.index,
            cycles: n.cycles,
            compute_j: energy_estimate(n.compute.as_secs_f64(), 0, p),
            overhead_j: energy_estimate(n.overhead.as_secs_f64(), 0, p),
            network_j: energy_estimate(0.0, n.sent_bytes * 8, p),
        })
        .collect()
}

/// One row of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub model: String,
    pub nodes: usize,
    pub serialization: String,
    pub compression: String,
    pub msg_class: MsgClass,
    pub energy_j: f64,
    pub overhead_s: f64,
    pub payload_mb: f64,
    pub throughput_cps: f64,
}

pub const CSV_HEADER: &str =
    "model,nodes,serialization,compression,msg_class,energy_j,overhead_s,payload_mb,throughput_cps";

/// The codec each message class was sent with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCodecs {
    pub architecture: CodecSpec,
    pub weights: CodecSpec,
    pub data: CodecSpec,
}

impl ClassCodecs {
    /// `codec` for weights and data; text architecture with the same compression.
    pub fn uniform(codec: CodecSpec) -> Self {
        ClassCodecs {
            architecture: CodecSpec::TEXT.with_compression(codec.compression),
            weights: codec,
            data: codec,
        }
    }

    pub fn get(&self, class: MsgClass) -> CodecSpec {
        match class {
            MsgClass::Architecture => self.architecture,
            MsgClass::Weights => self.weights,
            MsgClass::Data => self.data,
        }
    }
}

impl CsvRow {
    /// Rows for every message class in `report`.
    pub fn from_report(model: &str, codecs: &ClassCodecs, report: &MetricsReport, p: &EnergyParams) -> Vec<CsvRow> {
        MsgClass::ALL
            .iter()
            .map(|&class| {
                let c = report.classes.get(&class).copied().unwrap_or_default();
                let codec = codecs.get(class);
                CsvRow {
                    model: model.to_string(),
                    nodes: report.nodes.len(),
                    serialization: codec.serialization_label(),
                    compression: codec.compression_label().to_string(),
                    msg_class: class,
                    energy_j: report.class_energy(class, p),
                    overhead_s: c.overhead.as_secs_f64(),
                    payload_mb: c.payload_bytes as f64 / 1e6,
                    throughput_cps: report.throughput,
                }
            })
            .collect()
    }
}

pub fn write_csv<W: Write>(w: W, rows: &[CsvRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<CsvRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}
