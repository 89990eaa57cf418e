//! Experiment configuration: hardware constants, model shape, run controls.
//!
//! Configs load from a single TOML file with three sections (`[hardware]`,
//! `[model]`, `[experiment]`). Every key has a default, so an empty file is
//! a valid config; unknown keys are rejected. `Configs::dump` emits a file
//! that reloads to an identical value.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Environment variable consulted for the config path when no flag is given.
pub const CONFIG_PATH_ENV: &str = "MOEPIM_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config ({rule}): {detail}")]
    Invalid { rule: &'static str, detail: String },
}

fn invalid(rule: &'static str, detail: String) -> ConfigError {
    ConfigError::Invalid { rule, detail }
}

/// Unit the `core_power` value is expressed in. The printed source for the
/// number is ambiguous, so the interpretation is carried explicitly and
/// echoed into every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorePowerUnit {
    /// `core_power` is the energy of one crossbar activation, in nanojoules.
    NanojoulesPerActivation,
    /// `core_power` is average power in nanowatts; energy per activation is
    /// derived as power * core_latency.
    Nanowatts,
}

impl fmt::Display for CorePowerUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorePowerUnit::NanojoulesPerActivation => write!(f, "nanojoules-per-activation"),
            CorePowerUnit::Nanowatts => write!(f, "nanowatts"),
        }
    }
}

/// Physical constants of the PIM substrate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub crossbar_rows: usize,
    pub crossbar_cols: usize,
    /// Input/output precision of one crossbar pass, in bits.
    pub io_bits: u32,
    /// Latency of one crossbar core activation.
    pub core_latency_ns: f64,
    /// Per-activation cost figure; see `core_power_unit`.
    pub core_power: f64,
    pub core_power_unit: CorePowerUnit,
    /// Area of one core (crossbar plus its private share of peripherals).
    pub core_area_mm2: f64,
    /// Fraction of core area that is the crossbar itself; the remainder is
    /// peripheral circuitry and shrinks with peripheral sharing.
    pub crossbar_area_fraction: f64,
    pub dram_latency_per_byte_ns: f64,
    pub dram_energy_per_byte_nj: f64,
    /// Fixed setup latency charged per counted transfer when transfers block.
    pub dram_fixed_latency_ns: f64,
    /// Pipeline stages a token passes through inside one expert.
    pub expert_pass_stages: usize,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            crossbar_rows: 256,
            crossbar_cols: 256,
            io_bits: 8,
            core_latency_ns: 130.0,
            core_power: 0.096,
            core_power_unit: CorePowerUnit::NanojoulesPerActivation,
            core_area_mm2: 0.635,
            crossbar_area_fraction: 0.40,
            dram_latency_per_byte_ns: 0.01,
            dram_energy_per_byte_nj: 0.001,
            dram_fixed_latency_ns: 50.0,
            expert_pass_stages: 2,
        }
    }
}

impl HardwareConfig {
    /// Energy of one crossbar activation in nanojoules, under the declared
    /// unit interpretation. nW * ns = 1e-18 J = 1e-9 nJ.
    pub fn activation_energy_nj(&self) -> f64 {
        match self.core_power_unit {
            CorePowerUnit::NanojoulesPerActivation => self.core_power,
            CorePowerUnit::Nanowatts => self.core_power * self.core_latency_ns * 1e-9,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.crossbar_rows == 0 || self.crossbar_cols == 0 {
            return Err(invalid(
                "crossbar-dims-positive",
                format!("{}x{}", self.crossbar_rows, self.crossbar_cols),
            ));
        }
        if self.io_bits == 0 {
            return Err(invalid("io-bits-positive", self.io_bits.to_string()));
        }
        for (name, v) in [
            ("core_latency_ns", self.core_latency_ns),
            ("core_power", self.core_power),
            ("core_area_mm2", self.core_area_mm2),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(invalid("core-figures-positive", format!("{name} = {v}")));
            }
        }
        if !(self.crossbar_area_fraction > 0.0 && self.crossbar_area_fraction < 1.0) {
            return Err(invalid(
                "area-fraction-open-interval",
                format!("crossbar_area_fraction = {}", self.crossbar_area_fraction),
            ));
        }
        for (name, v) in [
            ("dram_latency_per_byte_ns", self.dram_latency_per_byte_ns),
            ("dram_energy_per_byte_nj", self.dram_energy_per_byte_nj),
            ("dram_fixed_latency_ns", self.dram_fixed_latency_ns),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(invalid("dram-figures-nonnegative", format!("{name} = {v}")));
            }
        }
        if self.expert_pass_stages == 0 {
            return Err(invalid("pass-stages-positive", "expert_pass_stages = 0".into()));
        }
        Ok(())
    }
}

/// How tokens and experts pick each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Each token selects its top-k experts.
    TokenChoice,
    /// Each expert selects its top-k tokens.
    ExpertChoice,
}

/// Shape of the MoE layer being simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Hidden (activation) width of the model.
    pub d_model: usize,
    pub crossbars_per_expert: usize,
    pub bytes_per_score: u64,
    pub bytes_per_activation: u64,
    /// Identical layers; scales every cost component linearly.
    pub num_layers: usize,
    pub routing_mode: RoutingMode,
    /// KV bytes appended per token per layer. Unset means 2 * d_model *
    /// bytes_per_activation (one K row and one V row).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_token_kv_bytes: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_experts: 16,
            top_k: 4,
            d_model: 4096,
            crossbars_per_expert: 96,
            bytes_per_score: 2,
            bytes_per_activation: 2,
            num_layers: 1,
            routing_mode: RoutingMode::ExpertChoice,
            per_token_kv_bytes: None,
        }
    }
}

impl ModelConfig {
    pub fn per_token_kv_bytes(&self) -> u64 {
        self.per_token_kv_bytes
            .unwrap_or(2 * self.d_model as u64 * self.bytes_per_activation)
    }

    /// Expert FFN intermediate width implied by crossbar capacity: the three
    /// expert matrices (up, gate, down) hold 3 * d_model * d_ff cells and
    /// must fit in crossbars_per_expert arrays of rows * cols cells.
    pub fn d_ff_expert(&self, hw: &HardwareConfig) -> usize {
        let capacity = self.crossbars_per_expert * hw.crossbar_rows * hw.crossbar_cols;
        capacity / (3 * self.d_model)
    }

    fn validate(&self, hw: &HardwareConfig) -> Result<(), ConfigError> {
        if self.num_experts == 0 {
            return Err(invalid("experts-positive", "num_experts = 0".into()));
        }
        if self.top_k == 0 {
            return Err(invalid("top-k-range", "top_k = 0".into()));
        }
        // Token choice picks k of the experts; expert choice picks k of the
        // tokens, bounded per call, so only token choice caps k here.
        if self.routing_mode == RoutingMode::TokenChoice && self.top_k > self.num_experts {
            return Err(invalid(
                "top-k-range",
                format!("top_k = {} with num_experts = {}", self.top_k, self.num_experts),
            ));
        }
        if self.d_model == 0 {
            return Err(invalid("d-model-positive", "d_model = 0".into()));
        }
        if self.crossbars_per_expert == 0 {
            return Err(invalid("crossbars-per-expert-positive", "crossbars_per_expert = 0".into()));
        }
        if self.bytes_per_score == 0 || self.bytes_per_activation == 0 {
            return Err(invalid(
                "byte-widths-positive",
                format!(
                    "bytes_per_score = {}, bytes_per_activation = {}",
                    self.bytes_per_score, self.bytes_per_activation
                ),
            ));
        }
        if self.num_layers == 0 {
            return Err(invalid("layers-positive", "num_layers = 0".into()));
        }
        if self.d_ff_expert(hw) == 0 {
            return Err(invalid(
                "expert-capacity",
                format!(
                    "crossbars_per_expert = {} holds fewer than 3 * d_model = {} cells per \
                     intermediate column",
                    self.crossbars_per_expert,
                    3 * self.d_model
                ),
            ));
        }
        Ok(())
    }
}

/// Which expert-to-group assignment to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingStrategy {
    /// No peripheral sharing; every expert stands alone (group_size 1).
    None,
    /// Seeded uniform-random partition.
    Uniform,
    /// Sort experts by profiled load and fold ranks across groups.
    WorkloadSorted,
}

/// Which prefill schedule builder to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleStrategy {
    /// One broadcast window per token; groups idle inside each window.
    TokenWise,
    /// Back-to-back jobs per group, no idles.
    Compact,
    /// Compact plus idle insertion to line up same-token runs.
    Rescheduled,
}

/// Per-token attention cost coefficients for the digital attention unit.
/// Pair terms scale with attended (query, key) pairs; token terms scale with
/// tokens passed through projections. Pair work is latency-parallel in the
/// unit, so the default pair latency coefficient is zero while pair energy
/// is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionCostCoeffs {
    pub per_token_pair_ns: f64,
    pub per_token_pair_nj: f64,
    pub per_token_ns: f64,
    pub per_token_nj: f64,
}

impl Default for AttentionCostCoeffs {
    fn default() -> Self {
        AttentionCostCoeffs {
            per_token_pair_ns: 0.0,
            per_token_pair_nj: 4.0,
            per_token_ns: 40.0,
            per_token_nj: 50.0,
        }
    }
}

impl AttentionCostCoeffs {
    fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("per_token_pair_ns", self.per_token_pair_ns),
            ("per_token_pair_nj", self.per_token_pair_nj),
            ("per_token_ns", self.per_token_ns),
            ("per_token_nj", self.per_token_nj),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(invalid("attention-coeffs-nonnegative", format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Run controls: stage lengths, grouping/scheduling choices, cache flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prompt_len: usize,
    pub gen_len: usize,
    /// Experts sharing one peripheral set; must divide num_experts.
    pub group_size: usize,
    pub grouping_strategy: GroupingStrategy,
    pub schedule_strategy: ScheduleStrategy,
    pub kv_cache_enabled: bool,
    pub go_cache_enabled: bool,
    /// Sub-flag of the gate-output cache: keep final expert outputs resident
    /// (false models the score-cache-only variant).
    pub output_cache_enabled: bool,
    /// Charge transfer latency instead of hiding it under compute.
    pub blocking_transfers: bool,
    pub rng_seed: u64,
    pub attention: AttentionCostCoeffs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            prompt_len: 32,
            gen_len: 8,
            group_size: 2,
            grouping_strategy: GroupingStrategy::WorkloadSorted,
            schedule_strategy: ScheduleStrategy::Rescheduled,
            kv_cache_enabled: true,
            go_cache_enabled: true,
            output_cache_enabled: true,
            blocking_transfers: false,
            rng_seed: 42,
            attention: AttentionCostCoeffs::default(),
        }
    }
}

impl ExperimentConfig {
    fn validate(&self, model: &ModelConfig) -> Result<(), ConfigError> {
        if self.prompt_len == 0 {
            return Err(invalid("prompt-positive", "prompt_len = 0".into()));
        }
        if self.group_size == 0 || !model.num_experts.is_multiple_of(self.group_size) {
            return Err(invalid(
                "group-size-divides-experts",
                format!(
                    "group_size = {} does not divide num_experts = {}",
                    self.group_size, model.num_experts
                ),
            ));
        }
        let none = self.grouping_strategy == GroupingStrategy::None;
        if none != (self.group_size == 1) {
            return Err(invalid(
                "grouping-none-iff-size-one",
                format!(
                    "grouping_strategy = {:?} with group_size = {}",
                    self.grouping_strategy, self.group_size
                ),
            ));
        }
        self.attention.validate()
    }
}

/// The full configuration bundle, one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Configs {
    pub hardware: HardwareConfig,
    pub model: ModelConfig,
    pub experiment: ExperimentConfig,
}

impl Configs {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Parse and validate. Empty input yields the defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let configs: Configs =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        configs.validate()?;
        Ok(configs)
    }

    /// Serialize every field; the output reloads to an identical value.
    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hardware.validate()?;
        self.model.validate(&self.hardware)?;
        self.experiment.validate(&self.model)
    }

    /// True when the gate-output cache flag has no effect (token-choice
    /// decode only ever routes the newly generated token). The run proceeds
    /// but the report flags the no-op.
    pub fn go_cache_is_noop(&self) -> bool {
        self.experiment.go_cache_enabled && self.model.routing_mode == RoutingMode::TokenChoice
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_platform() {
        let c = Configs::default();
        assert_eq!(c.hardware.crossbar_rows, 256);
        assert_eq!(c.hardware.crossbar_cols, 256);
        assert_eq!(c.hardware.io_bits, 8);
        assert_eq!(c.hardware.core_latency_ns, 130.0);
        assert_eq!(c.hardware.core_power, 0.096);
        assert_eq!(c.hardware.core_area_mm2, 0.635);
        assert_eq!(c.hardware.crossbar_area_fraction, 0.40);
        assert_eq!(c.hardware.expert_pass_stages, 2);
        assert_eq!(c.model.num_experts, 16);
        assert_eq!(c.model.top_k, 4);
        assert_eq!(c.model.d_model, 4096);
        assert_eq!(c.model.crossbars_per_expert, 96);
        assert_eq!(c.model.num_layers, 1);
        assert_eq!(c.experiment.prompt_len, 32);
        assert_eq!(c.experiment.gen_len, 8);
        assert_eq!(c.experiment.group_size, 2);
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let c = Configs::from_toml("").unwrap();
        assert_eq!(c, Configs::default());
    }

    #[test]
    fn dump_then_reload_is_identity() {
        let mut c = Configs::default();
        c.experiment.gen_len = 64;
        c.model.per_token_kv_bytes = Some(1024);
        c.hardware.core_power_unit = CorePowerUnit::Nanowatts;
        let reloaded = Configs::from_toml(&c.dump()).unwrap();
        assert_eq!(c, reloaded);
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let c = Configs::from_toml("[experiment]\ngen_len = 16\n").unwrap();
        assert_eq!(c.experiment.gen_len, 16);
        assert_eq!(c.experiment.prompt_len, 32);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = Configs::from_toml("[hardware]\nwarp_factor = 9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warp_factor"), "message should name the key: {msg}");
    }

    #[test]
    fn group_size_must_divide_experts() {
        let err = Configs::from_toml("[experiment]\ngroup_size = 3\n").unwrap_err();
        match err {
            ConfigError::Invalid { rule, detail } => {
                assert_eq!(rule, "group-size-divides-experts");
                assert!(detail.contains('3') && detail.contains("16"), "{detail}");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn grouping_none_requires_size_one() {
        let err =
            Configs::from_toml("[experiment]\ngrouping_strategy = \"none\"\n").unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid { rule: "grouping-none-iff-size-one", .. }
        ));
        // and the converse
        let err = Configs::from_toml(
            "[experiment]\ngroup_size = 1\ngrouping_strategy = \"uniform\"\n",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid { rule: "grouping-none-iff-size-one", .. }
        ));
        Configs::from_toml("[experiment]\ngroup_size = 1\ngrouping_strategy = \"none\"\n")
            .unwrap();
    }

    #[test]
    fn top_k_cap_applies_to_token_choice_only() {
        let err = Configs::from_toml("[model]\ntop_k = 17\nrouting_mode = \"token-choice\"\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { rule: "top-k-range", .. }));
        // expert choice draws k from the token axis; 17 > 16 experts is fine
        Configs::from_toml("[model]\ntop_k = 17\n").unwrap();
        let err = Configs::from_toml("[model]\ntop_k = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { rule: "top-k-range", .. }));
    }

    #[test]
    fn area_fraction_must_be_inside_unit_interval() {
        for bad in ["0.0", "1.0", "1.5"] {
            let toml = format!("[hardware]\ncrossbar_area_fraction = {bad}\n");
            let err = Configs::from_toml(&toml).unwrap_err();
            assert!(
                matches!(err, ConfigError::Invalid { rule: "area-fraction-open-interval", .. }),
                "fraction {bad} should be rejected"
            );
        }
    }

    #[test]
    fn kv_bytes_default_derives_from_model_dims() {
        let m = ModelConfig::default();
        assert_eq!(m.per_token_kv_bytes(), 2 * 4096 * 2);
        let m = ModelConfig { per_token_kv_bytes: Some(100), ..ModelConfig::default() };
        assert_eq!(m.per_token_kv_bytes(), 100);
    }

    #[test]
    fn d_ff_expert_from_crossbar_capacity() {
        let c = Configs::default();
        // 96 arrays * 256 * 256 cells / (3 matrices * 4096 rows) = 512
        assert_eq!(c.model.d_ff_expert(&c.hardware), 512);
    }

    #[test]
    fn core_power_unit_interpretations() {
        let mut hw = HardwareConfig::default();
        assert_eq!(hw.activation_energy_nj(), 0.096);
        hw.core_power_unit = CorePowerUnit::Nanowatts;
        // 0.096 nW over 130 ns: 0.096e-9 W * 130e-9 s = 1.248e-17 J
        let e = hw.activation_energy_nj();
        assert!((e - 1.248e-8).abs() < 1e-20, "{e}");
    }

    #[test]
    fn token_choice_with_go_cache_is_flagged_not_rejected() {
        let c = Configs::from_toml("[model]\nrouting_mode = \"token-choice\"\n").unwrap();
        assert!(c.go_cache_is_noop());
        assert!(!Configs::default().go_cache_is_noop());
    }
}
