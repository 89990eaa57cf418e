//! Prices for the things the simulator counts: silicon area under
//! peripheral sharing, expert crossbar passes, DRAM traffic, digital
//! attention work, and the derived throughput/efficiency metrics.

use crate::cache::AttentionWork;
use crate::config::{AttentionCostCoeffs, HardwareConfig, ModelConfig};
use serde::Serialize;
use std::ops::AddAssign;

/// Area split of the whole expert array at a given sharing degree.
/// Crossbar area is irreducible; each group of `group_size` experts keeps
/// one set of peripherals, so peripheral area divides by the group size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AreaBreakdown {
    pub num_crossbars: usize,
    pub crossbar_mm2: f64,
    pub peripheral_mm2: f64,
    pub total_mm2: f64,
}

pub fn area(hw: &HardwareConfig, model: &ModelConfig, group_size: usize) -> AreaBreakdown {
    let n = (model.num_experts * model.crossbars_per_expert) as f64;
    let f = hw.crossbar_area_fraction;
    let a = hw.core_area_mm2;
    let crossbar_mm2 = n * f * a;
    let peripheral_mm2 = n / group_size as f64 * (1.0 - f) * a;
    AreaBreakdown {
        num_crossbars: model.num_experts * model.crossbars_per_expert,
        crossbar_mm2,
        peripheral_mm2,
        total_mm2: crossbar_mm2 + peripheral_mm2,
    }
}

/// Cost of pushing one token through one expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PassCost {
    pub latency_ns: f64,
    pub energy_nj: f64,
    /// Multiply-accumulates counted as two ops each, over the three expert
    /// matrices at the capacity-implied intermediate width.
    pub ops: u64,
}

pub fn expert_pass(hw: &HardwareConfig, model: &ModelConfig) -> PassCost {
    PassCost {
        latency_ns: hw.expert_pass_stages as f64 * hw.core_latency_ns,
        energy_nj: model.crossbars_per_expert as f64 * hw.activation_energy_nj(),
        ops: 2 * 3 * (model.d_model * model.d_ff_expert(hw)) as u64,
    }
}

/// One latency/energy pair; components add independently.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostComponent {
    pub latency_ns: f64,
    pub energy_nj: f64,
}

impl AddAssign for CostComponent {
    fn add_assign(&mut self, rhs: CostComponent) {
        self.latency_ns += rhs.latency_ns;
        self.energy_nj += rhs.energy_nj;
    }
}

/// DRAM traffic always costs energy; it costs latency only when the run
/// charges transfers on the critical path (otherwise they overlap compute).
/// `count` is the number of distinct transfers paying the fixed setup cost.
pub fn dram_transfer(
    hw: &HardwareConfig,
    bytes: u64,
    count: u64,
    blocking: bool,
) -> CostComponent {
    CostComponent {
        latency_ns: if blocking {
            bytes as f64 * hw.dram_latency_per_byte_ns + count as f64 * hw.dram_fixed_latency_ns
        } else {
            0.0
        },
        energy_nj: bytes as f64 * hw.dram_energy_per_byte_nj,
    }
}

pub fn attention(coeffs: &AttentionCostCoeffs, work: AttentionWork) -> CostComponent {
    CostComponent {
        latency_ns: work.pairs as f64 * coeffs.per_token_pair_ns
            + work.tokens as f64 * coeffs.per_token_ns,
        energy_nj: work.pairs as f64 * coeffs.per_token_pair_nj
            + work.tokens as f64 * coeffs.per_token_nj,
    }
}

/// Cost of a stage (prefill, one decode step, or a whole run), split by
/// where the time and energy go.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageCost {
    pub moe_compute: CostComponent,
    pub data_transfer: CostComponent,
    #[serde(rename = "attention_digital")]
    pub attention: CostComponent,
    pub cache_traffic: CostComponent,
    pub expert_passes: u64,
    pub ops: u64,
}

impl StageCost {
    pub fn latency_ns(&self) -> f64 {
        self.moe_compute.latency_ns
            + self.data_transfer.latency_ns
            + self.attention.latency_ns
            + self.cache_traffic.latency_ns
    }

    pub fn energy_nj(&self) -> f64 {
        self.moe_compute.energy_nj
            + self.data_transfer.energy_nj
            + self.attention.energy_nj
            + self.cache_traffic.energy_nj
    }

    pub fn accumulate(&mut self, other: &StageCost) {
        self.moe_compute += other.moe_compute;
        self.data_transfer += other.data_transfer;
        self.attention += other.attention;
        self.cache_traffic += other.cache_traffic;
        self.expert_passes += other.expert_passes;
        self.ops += other.ops;
    }

    /// Every component scales linearly with identical stacked layers.
    pub fn scaled(&self, layers: usize) -> StageCost {
        let s = layers as f64;
        let scale = |c: CostComponent| CostComponent {
            latency_ns: c.latency_ns * s,
            energy_nj: c.energy_nj * s,
        };
        StageCost {
            moe_compute: scale(self.moe_compute),
            data_transfer: scale(self.data_transfer),
            attention: scale(self.attention),
            cache_traffic: scale(self.cache_traffic),
            expert_passes: self.expert_passes * layers as u64,
            ops: self.ops * layers as u64,
        }
    }
}

/// Throughput and efficiency figures derived from run totals. All ratios
/// are zero when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedMetrics {
    pub gops: f64,
    pub watts: f64,
    pub gops_per_watt: f64,
    pub gops_per_mm2: f64,
    /// Compute density: GOPS per watt per square millimetre.
    pub density: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 { 0.0 } else { num / den }
}

pub fn derived_metrics(ops: u64, latency_ns: f64, energy_nj: f64, area_mm2: f64) -> DerivedMetrics {
    // ops / ns = Gop/s; nJ / ns = W; ops / nJ = Gop/J.
    let gops = ratio(ops as f64, latency_ns);
    let watts = ratio(energy_nj, latency_ns);
    let gops_per_watt = ratio(ops as f64, energy_nj);
    DerivedMetrics {
        gops,
        watts,
        gops_per_watt,
        gops_per_mm2: ratio(gops, area_mm2),
        density: ratio(gops_per_watt, area_mm2),
    }
}
