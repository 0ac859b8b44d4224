use std::path::Path;

use serde::{Deserialize, Serialize};

use super::link::LinkShape;
use super::synth::ModelSpec;
use super::BenchError;
use crate::codec::CodecSpec;
use crate::metrics::EnergyParams;
use crate::wire::DEFAULT_CHUNK_BYTES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One `defer compute` child process per node.
    #[default]
    Process,
    /// Nodes run as threads of the harness.
    InProcess,
}

/// A benchmark plan, normally read from TOML:
///
/// ```toml
/// seed = 7
/// node_counts = [1, 4]
/// codecs = ["bin32", "bin32+lz"]
/// window_seconds = 5.0
/// delay_per_layer_ms = 10.0
///
/// [model]
/// type = "chain"
/// input = 64
/// sizes = [64, 64, 64, 64, 64, 64, 64, 64]
///
/// [link]
/// latency_ms = 0.0
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlan {
    pub model: ModelSpec,
    #[serde(default = "default_node_counts")]
    pub node_counts: Vec<usize>,
    /// One configuration per entry, applied to weights and data; architecture
    /// messages are always text and take the entry's compression.
    #[serde(default = "default_codecs", with = "codec_strings")]
    pub codecs: Vec<CodecSpec>,
    #[serde(default)]
    pub link: LinkShape,
    /// Length of the throughput measurement; 0 derives throughput from the
    /// fixed-input payload pass instead.
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    /// Inputs sent in the payload pass, whose byte counts go to the CSV.
    #[serde(default = "default_payload_inputs")]
    pub payload_inputs: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Synthetic compute time per layer, standing in for heavier kernels.
    #[serde(default)]
    pub delay_per_layer_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default = "default_chunk")]
    pub chunk_bytes: usize,
    /// Maximum inputs in flight.
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    #[serde(default)]
    pub energy: EnergyParams,
}

fn default_node_counts() -> Vec<usize> {
    vec![1, 4, 6, 8]
}

fn default_codecs() -> Vec<CodecSpec> {
    ["text", "text+lz", "bin32", "bin32+lz"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect()
}

fn default_window() -> f64 {
    10.0
}

fn default_payload_inputs() -> u64 {
    8
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK_BYTES
}

fn default_in_flight() -> usize {
    crate::dispatcher::DEFAULT_WINDOW
}

mod codec_strings {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::codec::CodecSpec;

    pub fn serialize<S: Serializer>(v: &[CodecSpec], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|c| c.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CodecSpec>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

impl BenchPlan {
    pub fn new(model: ModelSpec) -> Self {
        BenchPlan {
            model,
            node_counts: default_node_counts(),
            codecs: default_codecs(),
            link: LinkShape::default(),
            window_seconds: default_window(),
            payload_inputs: default_payload_inputs(),
            seed: 0,
            mode: Mode::default(),
            delay_per_layer_ms: 0.0,
            jitter_ms: 0.0,
            chunk_bytes: default_chunk(),
            in_flight: default_in_flight(),
            energy: EnergyParams::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let plan: BenchPlan = toml::from_str(text).map_err(|e| BenchError::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| BenchError::Plan(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Plan(m.to_string()));
        if self.node_counts.is_empty() || self.node_counts.contains(&0) {
            return bad("node_counts must be non-empty and every count ≥ 1");
        }
        if self.codecs.is_empty() {
            return bad("codecs must be non-empty");
        }
        if !(self.window_seconds >= 0.0 && self.window_seconds.is_finite()) {
            return bad("window_seconds must be ≥ 0");
        }
        if self.payload_inputs == 0 {
            return bad("payload_inputs must be ≥ 1");
        }
        if self.delay_per_layer_ms < 0.0 || self.jitter_ms < 0.0 || self.link.latency_ms < 0.0 {
            return bad("delays must be ≥ 0");
        }
        if self.in_flight == 0 {
            return bad("in_flight must be ≥ 1");
        }
        if crate::wire::ChunkConfig::new(self.chunk_bytes).is_err() {
            return bad("chunk_bytes below the protocol minimum");
        }
        if EnergyParams::new(self.energy.tdp_watts, self.energy.joules_per_bit).is_none() {
            return bad("energy parameters out of range");
        }
        Ok(())
    }
}
