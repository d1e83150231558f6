//! Analytical inference cost: FLOPs, parameters, DRAM traffic, energy and a
//! roofline latency for a configurable accelerator.
//!
//! Only conv and fc layers cost anything; ReLU and pooling are assumed fused
//! into the producing layer. FLOPs are `2 * MACs`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicNetwork, LayerKind, LayerSpec, NetworkSpec};
use crate::nn::conv_output_extent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwConfig {
    pub word_bits: u32,
    pub dram_bandwidth_bytes_per_s: f64,
    pub clock_hz: f64,
    pub bus_bits: u32,
    pub macs_per_cycle: u64,
    pub e_mac_pj: f64,
    pub e_buf_pj_per_word: f64,
    pub e_dram_pj_per_word: f64,
    /// Skip MACs and weight fetches for masked weights.
    pub zero_skipping: bool,
    /// Multiplier on DRAM traffic standing in for imperfect on-chip reuse.
    pub reuse_factor: f64,
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            word_bits: 16,
            dram_bandwidth_bytes_per_s: 19.2e9,
            clock_hz: 300e6,
            bus_bits: 512,
            macs_per_cycle: 1024,
            e_mac_pj: 1.0,
            e_buf_pj_per_word: 3.0,
            e_dram_pj_per_word: 160.0,
            zero_skipping: false,
            reuse_factor: 1.0,
        }
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_bits", self.word_bits as f64),
            ("dram_bandwidth_bytes_per_s", self.dram_bandwidth_bytes_per_s),
            ("clock_hz", self.clock_hz),
            ("bus_bits", self.bus_bits as f64),
            ("macs_per_cycle", self.macs_per_cycle as f64),
            ("e_mac_pj", self.e_mac_pj),
            ("e_buf_pj_per_word", self.e_buf_pj_per_word),
            ("e_dram_pj_per_word", self.e_dram_pj_per_word),
            ("reuse_factor", self.reuse_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.word_bits.is_multiple_of(8) || !self.bus_bits.is_multiple_of(8) {
            return Err(Error::Config("word_bits and bus_bits must be whole bytes".into()));
        }
        Ok(())
    }

    fn bytes_per_cycle(&self) -> f64 {
        self.dram_bandwidth_bytes_per_s / self.clock_hz
    }
}

/// A structure to be costed: the layer list plus, optionally, the number of
/// unmasked weights per layer (only consulted with zero skipping).
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub spec: NetworkSpec,
    pub active_weights: Vec<Option<u64>>,
}

impl Architecture {
    pub fn dense(spec: NetworkSpec) -> Self {
        let active_weights = vec![None; spec.layers.len()];
        Self { spec, active_weights }
    }

    pub fn of(net: &DynamicNetwork) -> Self {
        Self {
            spec: net.spec(),
            active_weights: net
                .layers()
                .iter()
                .map(|n| n.mask().map(|m| m.active_count() as u64))
                .collect(),
        }
    }
}

/// MAC/parameter/activation counts of one conv or fc layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCount {
    pub macs: u64,
    pub flops: u64,
    pub weights: u64,
    pub params: u64,
    pub input_words: u64,
    pub output_words: u64,
}

/// Counts for one layer given its per-sample input shape; also returns the
/// output shape. ReLU/pool/flatten layers yield all-zero counts.
pub fn layer_costs(layer: &LayerSpec, in_shape: &[usize]) -> Result<(LayerCount, Vec<usize>)> {
    let words = |s: &[usize]| s.iter().product::<usize>() as u64;
    match *layer {
        LayerSpec::Conv {
            out,
            kernel,
            stride,
            padding,
        } => {
            let [i, h, w] = in_shape[..] else {
                return Err(Error::geometry(format!("conv input {in_shape:?} is not 3D")));
            };
            let ho = conv_output_extent(h, kernel, stride, padding)?;
            let wo = conv_output_extent(w, kernel, stride, padding)?;
            let weights = (out * i * kernel * kernel) as u64;
            let macs = (out * ho * wo) as u64 * (i * kernel * kernel) as u64;
            let out_shape = vec![out, ho, wo];
            Ok((
                LayerCount {
                    macs,
                    flops: 2 * macs,
                    weights,
                    params: weights + out as u64,
                    input_words: words(in_shape),
                    output_words: words(&out_shape),
                },
                out_shape,
            ))
        }
        LayerSpec::Fc { out } => {
            let [i] = in_shape[..] else {
                return Err(Error::geometry(format!("fc input {in_shape:?} is not flat")));
            };
            let macs = (out * i) as u64;
            Ok((
                LayerCount {
                    macs,
                    flops: 2 * macs,
                    weights: macs,
                    params: macs + out as u64,
                    input_words: i as u64,
                    output_words: out as u64,
                },
                vec![out],
            ))
        }
        LayerSpec::Relu => Ok((LayerCount::default(), in_shape.to_vec())),
        LayerSpec::Maxpool => match in_shape[..] {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok((LayerCount::default(), vec![c, h / 2, w / 2])),
            _ => Err(Error::geometry(format!("cannot 2x2-pool {in_shape:?}"))),
        },
        LayerSpec::Flatten => Ok((LayerCount::default(), vec![in_shape.iter().product()])),
    }
}

fn walk(arch: &Architecture) -> Result<Vec<(usize, LayerKind, LayerCount, f64)>> {
    let (c, h, w) = arch.spec.input;
    let mut shape = vec![c, h, w];
    let mut rows = Vec::new();
    for (idx, layer) in arch.spec.layers.iter().enumerate() {
        let (count, next) = layer_costs(layer, &shape).map_err(|e| Error::geometry(format!("layer {idx}: {e}")))?;
        if matches!(layer, LayerSpec::Conv { .. } | LayerSpec::Fc { .. }) {
            let active = arch
                .active_weights
                .get(idx)
                .copied()
                .flatten()
                .map_or(1.0, |a| (a as f64 / count.weights as f64).min(1.0));
            rows.push((idx, layer.kind(), count, active));
        }
        shape = next;
    }
    Ok(rows)
}

/// Total FLOPs and parameters over the physically present layers.
/// With `zero_skipping`, masked weights and their MACs are left out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub flops: u64,
    pub params: u64,
}

pub fn model_costs(arch: &Architecture, zero_skipping: bool) -> Result<ModelCost> {
    let mut total = ModelCost { flops: 0, params: 0 };
    for (_, _, count, active) in walk(arch)? {
        let (macs, weights) = skip(count, active, zero_skipping);
        total.flops += 2 * macs;
        total.params += weights + (count.params - count.weights);
    }
    Ok(total)
}

fn skip(count: LayerCount, active: f64, zero_skipping: bool) -> (u64, u64) {
    if zero_skipping {
        (
            (count.macs as f64 * active).round() as u64,
            (count.weights as f64 * active).round() as u64,
        )
    } else {
        (count.macs, count.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Costs {
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    pub weight_words: u64,
    pub activation_words: u64,
    pub dram_bytes: u64,
    pub buffer_accesses: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub energy_pj: f64,
    pub latency_s: f64,
}

impl Costs {
    fn add(&mut self, o: &Costs) {
        self.macs += o.macs;
        self.flops += o.flops;
        self.params += o.params;
        self.weight_words += o.weight_words;
        self.activation_words += o.activation_words;
        self.dram_bytes += o.dram_bytes;
        self.buffer_accesses += o.buffer_accesses;
        self.compute_cycles += o.compute_cycles;
        self.memory_cycles += o.memory_cycles;
        self.energy_pj += o.energy_pj;
        self.latency_s += o.latency_s;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: LayerKind,
    #[serde(flatten)]
    pub costs: Costs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total: Costs,
}

/// Per-layer first-order traffic, energy and latency.
///
/// DRAM traffic moves every weight and every input/output activation once
/// (times `reuse_factor`), rounded up to whole bus transfers. A layer's
/// latency is the larger of its compute and memory cycle counts.
pub fn traffic_latency_energy(arch: &Architecture, hw: &HwConfig) -> Result<CostReport> {
    hw.validate()?;
    let word_bytes = (hw.word_bits / 8) as f64;
    let bus_bytes = (hw.bus_bits / 8) as f64;
    let mut layers = Vec::new();
    let mut total = Costs::default();
    for (layer, kind, count, active) in walk(arch)? {
        let (macs, weight_words) = skip(count, active, hw.zero_skipping);
        let activation_words = count.input_words + count.output_words;
        let raw_bytes = (weight_words + activation_words) as f64 * word_bytes * hw.reuse_factor;
        let dram_bytes = ((raw_bytes / bus_bytes).ceil() * bus_bytes) as u64;
        let compute_cycles = macs.div_ceil(hw.macs_per_cycle);
        let memory_cycles = (dram_bytes as f64 / hw.bytes_per_cycle()).ceil() as u64;
        let buffer_accesses = 3 * macs;
        let dram_words = dram_bytes as f64 / word_bytes;
        let costs = Costs {
            macs,
            flops: 2 * macs,
            params: weight_words + (count.params - count.weights),
            weight_words,
            activation_words,
            dram_bytes,
            buffer_accesses,
            compute_cycles,
            memory_cycles,
            energy_pj: macs as f64 * hw.e_mac_pj
                + buffer_accesses as f64 * hw.e_buf_pj_per_word
                + dram_words * hw.e_dram_pj_per_word,
            latency_s: compute_cycles.max(memory_cycles) as f64 / hw.clock_hz,
        };
        total.add(&costs);
        layers.push(LayerCost { layer, kind, costs });
    }
    Ok(CostReport { layers, total })
}

/// Relative change of each headline metric against the baseline, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub flops: f64,
    pub params: f64,
    pub dram_bytes: f64,
    pub buffer_accesses: f64,
    pub energy_pj: f64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub name: String,
    pub report: CostReport,
    pub delta_pct: Deltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub entries: Vec<ComparisonEntry>,
}

/// `(candidate - baseline) / baseline * 100`, and 0 when both are zero.
pub fn delta_pct(baseline: f64, candidate: f64) -> f64 {
    if baseline == candidate {
        0.0
    } else {
        (candidate - baseline) / baseline * 100.0
    }
}

/// Costs every model and its deltas against the first one.
pub fn compare(models: &[(String, Architecture)], hw: &HwConfig) -> Result<Comparison> {
    if models.len() < 2 {
        return Err(Error::InvalidInput("compare needs at least two models".into()));
    }
    let reports = models
        .iter()
        .map(|(_, a)| traffic_latency_energy(a, hw))
        .collect::<Result<Vec<_>>>()?;
    let base = reports[0].total;
    let entries = models
        .iter()
        .zip(reports)
        .map(|((name, _), report)| {
            let t = report.total;
            ComparisonEntry {
                name: name.clone(),
                delta_pct: Deltas {
                    flops: delta_pct(base.flops as f64, t.flops as f64),
                    params: delta_pct(base.params as f64, t.params as f64),
                    dram_bytes: delta_pct(base.dram_bytes as f64, t.dram_bytes as f64),
                    buffer_accesses: delta_pct(base.buffer_accesses as f64, t.buffer_accesses as f64),
                    energy_pj: delta_pct(base.energy_pj, t.energy_pj),
                    latency_s: delta_pct(base.latency_s, t.latency_s),
                },
                report,
            }
        })
        .collect();
    Ok(Comparison {
        baseline: models[0].0.clone(),
        entries,
    })
}
