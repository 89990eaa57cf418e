//! Experiment orchestration: one `run` takes configs plus a gate-score
//! trace through prefill (route, group, schedule, price) and gen_len decode
//! steps (route the new token, settle the caches, price the step), and a
//! `sweep` expands labeled config variants over a shared trace.
//!
//! Decode latency model: a decode step that touches only the newly
//! generated token costs one expert-pass latency regardless of fan-out
//! (the admitting experts hold disjoint crossbars, and peripheral sharing
//! only serializes concurrent jobs of different tokens), plus the digital
//! attention time. Fan-out still costs energy per executed pass. A step
//! that recomputes history (expert-choice without the gate-output cache)
//! serializes each group's full job list. The gate itself is digital and
//! tiny next to an expert pass; its compute is not priced, only the score
//! traffic the gate-output cache moves.
//!
//! The trace supplies gate logits for decode positions as well, so routing
//! decisions are identical across cache settings and only costs differ.
//! `num_layers` scales every priced figure linearly at the point of
//! accounting; routing decisions are shared across the identical layers.

use crate::cache::{bypassed_work, CacheError, GoCacheState, KvCacheState};
use crate::config::{
    Configs, GroupingStrategy, RoutingMode, ScheduleStrategy,
};
use crate::costmodel::{
    self, area, attention, dram_transfer, expert_pass, AreaBreakdown, DerivedMetrics, PassCost,
    StageCost,
};
use crate::grouping::{profile_loads, ExpertGrouping, GroupingError};
use crate::routing::{
    route_expert_choice, route_token_choice, ChoiceMatrix, GateScoreState, RoutingError,
};
use crate::scheduling::{
    reschedule_insert_idle, schedule_compact, schedule_token_wise, GroupSchedule, ScheduleError,
};
use crate::trace::Trace;
use serde::Serialize;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("trace has {have} tokens but prompt_len + gen_len = {needed}")]
    TraceTooShort { needed: usize, have: usize },
    #[error("config expects {config} experts, trace has {trace}")]
    ExpertCountMismatch { config: usize, trace: usize },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("unknown sweep axis {0:?}")]
    UnknownAxis(String),
    #[error("axis {0} has no values")]
    EmptyAxis(&'static str),
}

/// Prefill outcome in numbers; the full slot grid is reproducible via
/// [`prefill_parts`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefillSummary {
    pub schedule_strategy: ScheduleStrategy,
    pub makespan: usize,
    pub transfers: usize,
    pub jobs: usize,
}

/// Everything one decode step did and what it cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeStepRecord {
    pub step: usize,
    /// Trace row the step consumed.
    pub token: usize,
    /// Experts that ran the new token.
    pub selected_experts: Vec<usize>,
    /// Expert passes executed (per layer stack, i.e. scaled by num_layers).
    pub expert_passes: u64,
    /// Gate-output cache slots whose occupant was dropped this step.
    pub evictions: usize,
    pub go_score_bytes: u64,
    pub go_output_bytes: u64,
    pub kv_bytes: u64,
    /// Work a recompute would have done that the gate-output cache skipped.
    pub bypassed_expert_passes: u64,
    pub bypassed_gate_tokens: u64,
    pub cost: StageCost,
}

/// Cost totals of one run. Breakdowns sum to the totals exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub latency_ns: f64,
    pub energy_nj: f64,
    pub prefill: StageCost,
    pub decode: StageCost,
    pub area: AreaBreakdown,
    pub expert_passes: u64,
    pub ops_executed: u64,
    pub metrics: DerivedMetrics,
    /// Unit interpretation the energy figures were derived under.
    pub core_power_unit: String,
    /// True when the gate-output cache flag is set but token-choice decode
    /// gives it nothing to do.
    pub go_cache_noop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub configs: Configs,
    pub grouping: ExpertGrouping,
    pub prefill: PrefillSummary,
    pub decode_steps: Vec<DecodeStepRecord>,
    pub report: CostReport,
}

impl RunResult {
    /// Stable, human-readable JSON; byte-identical across identical runs.
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run result serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub runs: Vec<RunResult>,
}

impl SweepResult {
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep result serializes")
    }

    pub fn find(&self, label: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.label.as_deref() == Some(label))
    }
}

fn validate_inputs(configs: &Configs, trace: &Trace) -> Result<(), EngineError> {
    configs.validate()?;
    if trace.experts() != configs.model.num_experts {
        return Err(EngineError::ExpertCountMismatch {
            config: configs.model.num_experts,
            trace: trace.experts(),
        });
    }
    let needed = configs.experiment.prompt_len + configs.experiment.gen_len;
    if trace.tokens() < needed {
        return Err(EngineError::TraceTooShort { needed, have: trace.tokens() });
    }
    Ok(())
}

/// Route, group and schedule the prompt. Exposed so callers can render the
/// slot grid of the exact schedule a run priced.
pub fn prefill_parts(
    configs: &Configs,
    trace: &Trace,
) -> Result<(ChoiceMatrix, ExpertGrouping, GroupSchedule), EngineError> {
    validate_inputs(configs, trace)?;
    let exp = &configs.experiment;
    let model = &configs.model;
    let block = trace.block(0, exp.prompt_len);
    let choices = match model.routing_mode {
        RoutingMode::TokenChoice => route_token_choice(&block, model.top_k)?,
        RoutingMode::ExpertChoice => route_expert_choice(&block, model.top_k)?,
    };
    let grouping = match exp.grouping_strategy {
        GroupingStrategy::None => ExpertGrouping::singletons(model.num_experts),
        GroupingStrategy::Uniform => {
            ExpertGrouping::uniform(model.num_experts, exp.group_size, exp.rng_seed)?
        }
        GroupingStrategy::WorkloadSorted => {
            let loads = profile_loads(&block, model.routing_mode, model.top_k)?;
            ExpertGrouping::workload_sorted(&loads, exp.group_size)?
        }
    };
    let schedule = match exp.schedule_strategy {
        ScheduleStrategy::TokenWise => schedule_token_wise(&choices, &grouping)?,
        ScheduleStrategy::Compact => schedule_compact(&choices, &grouping)?,
        ScheduleStrategy::Rescheduled => reschedule_insert_idle(&choices, &grouping)?,
    };
    Ok((choices, grouping, schedule))
}

/// Price a prefill schedule: makespan times the pass latency, pass energy
/// per job, one activation-vector broadcast per counted transfer.
pub fn prefill_schedule_cost(
    configs: &Configs,
    schedule: &GroupSchedule,
    pass: &PassCost,
) -> StageCost {
    let hw = &configs.hardware;
    let model = &configs.model;
    let jobs = schedule.job_count() as u64;
    let transfer_bytes =
        schedule.transfers() as u64 * model.d_model as u64 * model.bytes_per_activation;
    let mut cost = StageCost::default();
    cost.moe_compute.latency_ns = schedule.makespan() as f64 * pass.latency_ns;
    cost.moe_compute.energy_nj = jobs as f64 * pass.energy_nj;
    cost.expert_passes = jobs;
    cost.ops = jobs * pass.ops;
    cost.data_transfer = dram_transfer(
        hw,
        transfer_bytes,
        schedule.transfers() as u64,
        configs.experiment.blocking_transfers,
    );
    cost
}

/// Execute one full experiment deterministically.
pub fn run(configs: &Configs, trace: &Trace) -> Result<RunResult, EngineError> {
    let (_choices, grouping, schedule) = prefill_parts(configs, trace)?;
    let hw = &configs.hardware;
    let model = &configs.model;
    let exp = &configs.experiment;
    let layers = model.num_layers;
    let pass = expert_pass(hw, model);
    let blocking = exp.blocking_transfers;
    let go_active = exp.go_cache_enabled && model.routing_mode == RoutingMode::ExpertChoice;

    // Prefill: schedule cost plus one causal attention pass and the initial
    // cache population writes.
    let mut prefill_cost = prefill_schedule_cost(configs, &schedule, &pass);
    let attn_work =
        KvCacheState::prefill_work(exp.prompt_len, model.per_token_kv_bytes(), exp.kv_cache_enabled);
    prefill_cost.attention = attention(&exp.attention, attn_work);

    let mut kv = KvCacheState::after_prefill(
        exp.prompt_len,
        model.per_token_kv_bytes(),
        exp.kv_cache_enabled,
    );
    // The experiment's prompt_len governs staging; the trace's own prompt
    // marker is metadata for trace tooling only.
    let prompt = trace.block(0, exp.prompt_len);
    let mut go = if go_active {
        Some(GoCacheState::after_prefill(
            &prompt,
            model.top_k,
            model.bytes_per_score,
            model.d_model as u64 * model.bytes_per_activation,
            exp.output_cache_enabled,
        )?)
    } else {
        None
    };
    let mut population_bytes = attn_work.kv_write_bytes;
    let mut population_streams: u64 = u64::from(attn_work.kv_write_bytes > 0);
    if let Some(go) = &go {
        population_bytes += go.score_bytes() + go.output_bytes();
        population_streams += 1 + u64::from(go.output_bytes() > 0);
    }
    prefill_cost.cache_traffic = dram_transfer(hw, population_bytes, population_streams, blocking);
    let prefill_cost = prefill_cost.scaled(layers);

    // Decode: the trace's next gen_len rows stand in for the generated
    // tokens' gate logits.
    let mut shadow = if go_active {
        None
    } else if model.routing_mode == RoutingMode::ExpertChoice {
        Some(GateScoreState::from_block(&prompt, model.top_k)?)
    } else {
        None
    };
    let mut decode_steps = Vec::with_capacity(exp.gen_len);
    let mut decode_total = StageCost::default();
    for step in 0..exp.gen_len {
        let token = exp.prompt_len + step;
        let retained = token + 1;
        let mut cost = StageCost::default();
        let mut selected_experts: Vec<usize>;
        let mut evictions = 0;
        let mut go_score_bytes = 0;
        let mut go_output_bytes = 0;
        let full_passes = (model.num_experts * model.top_k.min(retained)) as u64;
        let mut bypassed_passes = 0;
        let mut bypassed_gate = 0;

        match (model.routing_mode, &mut go) {
            (RoutingMode::TokenChoice, _) => {
                let row = trace.block(token, retained);
                let picks = route_token_choice(&row, model.top_k)?;
                selected_experts = picks.experts_of(0);
                let passes = selected_experts.len() as u64;
                cost.moe_compute.latency_ns = pass.latency_ns;
                cost.moe_compute.energy_nj = passes as f64 * pass.energy_nj;
                cost.expert_passes = passes;
                cost.ops = passes * pass.ops;
                cost.data_transfer = dram_transfer(
                    hw,
                    model.d_model as u64 * model.bytes_per_activation,
                    1,
                    blocking,
                );
            }
            (RoutingMode::ExpertChoice, Some(go)) => {
                let rec = go.step(trace.row(token), token)?;
                selected_experts = rec.selected_by.clone();
                evictions = rec.evictions;
                go_score_bytes = rec.score_bytes;
                go_output_bytes = rec.output_bytes;
                let passes = if exp.output_cache_enabled {
                    // Only the admitting experts run the new token; every
                    // other resident output is reused from the cache.
                    selected_experts.len() as u64
                } else {
                    // Score-only variant: top-k sets are maintained
                    // incrementally but outputs are recomputed in full.
                    full_passes
                };
                if exp.output_cache_enabled {
                    cost.moe_compute.latency_ns = pass.latency_ns;
                    cost.data_transfer = dram_transfer(
                        hw,
                        model.d_model as u64 * model.bytes_per_activation,
                        1,
                        blocking,
                    );
                } else {
                    cost.moe_compute.latency_ns =
                        (exp.group_size * model.top_k.min(retained)) as f64 * pass.latency_ns;
                    let resident = resident_tokens_go(go, model.num_experts);
                    cost.data_transfer = dram_transfer(
                        hw,
                        resident as u64 * model.d_model as u64 * model.bytes_per_activation,
                        resident as u64,
                        blocking,
                    );
                }
                cost.moe_compute.energy_nj = passes as f64 * pass.energy_nj;
                cost.expert_passes = passes;
                cost.ops = passes * pass.ops;
                bypassed_passes = full_passes - passes;
                bypassed_gate = bypassed_work(
                    model.routing_mode,
                    model.num_experts,
                    model.top_k,
                    retained,
                    selected_experts.len(),
                )
                .gate_tokens_avoided;
                let traffic = dram_transfer(hw, rec.read_bytes + rec.write_bytes, 2, blocking);
                cost.cache_traffic += traffic;
            }
            (RoutingMode::ExpertChoice, None) => {
                // No gate-output cache: rerun the gate over every retained
                // token and recompute each expert's full selected set.
                let block = trace.block(0, retained);
                let picks = route_expert_choice(&block, model.top_k)?;
                selected_experts = picks.experts_of(token);
                let shadow_state = shadow.as_mut().expect("shadow state tracks uncached decode");
                shadow_state.topk_update(trace.row(token), token)?;
                debug_assert_eq!(
                    (0..model.num_experts)
                        .map(|e| shadow_state.tokens_of(e))
                        .collect::<Vec<_>>(),
                    (0..model.num_experts).map(|e| picks.tokens_of(e)).collect::<Vec<_>>(),
                    "incremental and batch routing disagree"
                );
                let passes = picks.selected_pairs() as u64;
                debug_assert_eq!(passes, full_passes);
                cost.moe_compute.latency_ns =
                    (exp.group_size * model.top_k.min(retained)) as f64 * pass.latency_ns;
                cost.moe_compute.energy_nj = passes as f64 * pass.energy_nj;
                cost.expert_passes = passes;
                cost.ops = passes * pass.ops;
                let distinct: BTreeSet<usize> = (0..model.num_experts)
                    .flat_map(|e| picks.tokens_of(e))
                    .collect();
                cost.data_transfer = dram_transfer(
                    hw,
                    distinct.len() as u64 * model.d_model as u64 * model.bytes_per_activation,
                    distinct.len() as u64,
                    blocking,
                );
            }
        }
        selected_experts.sort_unstable();

        let attn_work = kv.step();
        cost.attention = attention(&exp.attention, attn_work);
        cost.cache_traffic += dram_transfer(
            hw,
            attn_work.kv_read_bytes + attn_work.kv_write_bytes,
            u64::from(attn_work.kv_read_bytes > 0) + u64::from(attn_work.kv_write_bytes > 0),
            blocking,
        );

        let cost = cost.scaled(layers);
        decode_total.accumulate(&cost);
        decode_steps.push(DecodeStepRecord {
            step,
            token,
            expert_passes: cost.expert_passes,
            selected_experts,
            evictions,
            go_score_bytes,
            go_output_bytes,
            kv_bytes: kv.kv_bytes(),
            bypassed_expert_passes: bypassed_passes,
            bypassed_gate_tokens: bypassed_gate,
            cost,
        });
    }

    let area = area(hw, model, exp.group_size);
    let latency_ns = prefill_cost.latency_ns() + decode_total.latency_ns();
    let energy_nj = prefill_cost.energy_nj() + decode_total.energy_nj();
    let ops_executed = prefill_cost.ops + decode_total.ops;
    let report = CostReport {
        latency_ns,
        energy_nj,
        metrics: costmodel::derived_metrics(ops_executed, latency_ns, energy_nj, area.total_mm2),
        expert_passes: prefill_cost.expert_passes + decode_total.expert_passes,
        ops_executed,
        prefill: prefill_cost,
        decode: decode_total,
        area,
        core_power_unit: hw.core_power_unit.to_string(),
        go_cache_noop: configs.go_cache_is_noop(),
    };
    Ok(RunResult {
        label: None,
        configs: configs.clone(),
        grouping,
        prefill: PrefillSummary {
            schedule_strategy: exp.schedule_strategy,
            makespan: schedule.makespan(),
            transfers: schedule.transfers(),
            jobs: schedule.job_count(),
        },
        decode_steps,
        report,
    })
}

/// Distinct tokens resident in any expert's top-k set.
fn resident_tokens_go(go: &GoCacheState, num_experts: usize) -> usize {
    let distinct: BTreeSet<usize> = (0..num_experts).flat_map(|e| go.tokens_of(e)).collect();
    distinct.len()
}

/// One sweep axis: a config field and the values to try.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    GroupSize(Vec<usize>),
    Grouping(Vec<GroupingStrategy>),
    Schedule(Vec<ScheduleStrategy>),
    GenLen(Vec<usize>),
    KvCache(Vec<bool>),
    GoCache(Vec<bool>),
    Seed(Vec<u64>),
}

impl SweepAxis {
    fn name(&self) -> &'static str {
        match self {
            SweepAxis::GroupSize(_) => "group_size",
            SweepAxis::Grouping(_) => "grouping",
            SweepAxis::Schedule(_) => "schedule",
            SweepAxis::GenLen(_) => "gen_len",
            SweepAxis::KvCache(_) => "kv_cache",
            SweepAxis::GoCache(_) => "go_cache",
            SweepAxis::Seed(_) => "seed",
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::GroupSize(v) => v.len(),
            SweepAxis::Grouping(v) => v.len(),
            SweepAxis::Schedule(v) => v.len(),
            SweepAxis::GenLen(v) => v.len(),
            SweepAxis::KvCache(v) => v.len(),
            SweepAxis::GoCache(v) => v.len(),
            SweepAxis::Seed(v) => v.len(),
        }
    }

    /// Apply value `i` to the config and return the label fragment.
    fn apply(&self, i: usize, configs: &mut Configs) -> String {
        match self {
            SweepAxis::GroupSize(v) => {
                configs.experiment.group_size = v[i];
                // keep the none-iff-size-one pairing coherent
                if v[i] == 1 {
                    configs.experiment.grouping_strategy = GroupingStrategy::None;
                } else if configs.experiment.grouping_strategy == GroupingStrategy::None {
                    configs.experiment.grouping_strategy = GroupingStrategy::WorkloadSorted;
                }
                format!("group_size={}", v[i])
            }
            SweepAxis::Grouping(v) => {
                configs.experiment.grouping_strategy = v[i];
                if v[i] == GroupingStrategy::None {
                    configs.experiment.group_size = 1;
                }
                format!("grouping={}", grouping_tag(v[i]))
            }
            SweepAxis::Schedule(v) => {
                configs.experiment.schedule_strategy = v[i];
                format!("schedule={}", schedule_tag(v[i]))
            }
            SweepAxis::GenLen(v) => {
                configs.experiment.gen_len = v[i];
                format!("gen_len={}", v[i])
            }
            SweepAxis::KvCache(v) => {
                configs.experiment.kv_cache_enabled = v[i];
                format!("kv_cache={}", v[i])
            }
            SweepAxis::GoCache(v) => {
                configs.experiment.go_cache_enabled = v[i];
                configs.experiment.output_cache_enabled = v[i];
                format!("go_cache={}", v[i])
            }
            SweepAxis::Seed(v) => {
                configs.experiment.rng_seed = v[i];
                format!("seed={}", v[i])
            }
        }
    }
}

fn grouping_tag(g: GroupingStrategy) -> &'static str {
    match g {
        GroupingStrategy::None => "none",
        GroupingStrategy::Uniform => "uniform",
        GroupingStrategy::WorkloadSorted => "workload-sorted",
    }
}

fn schedule_tag(s: ScheduleStrategy) -> &'static str {
    match s {
        ScheduleStrategy::TokenWise => "token-wise",
        ScheduleStrategy::Compact => "compact",
        ScheduleStrategy::Rescheduled => "rescheduled",
    }
}

/// Cartesian product of the axes over the base config, each item labeled by
/// its axis settings joined with `/`. Empty axes yield the base alone.
pub fn expand_axes(
    base: &Configs,
    axes: &[SweepAxis],
) -> Result<Vec<(String, Configs)>, EngineError> {
    for axis in axes {
        if axis.len() == 0 {
            return Err(EngineError::EmptyAxis(axis.name()));
        }
    }
    let mut items = vec![(String::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(items.len() * axis.len());
        for (label, configs) in &items {
            for i in 0..axis.len() {
                let mut c = configs.clone();
                let fragment = axis.apply(i, &mut c);
                let combined = if label.is_empty() {
                    fragment
                } else {
                    format!("{label}/{fragment}")
                };
                next.push((combined, c));
            }
        }
        items = next;
    }
    if axes.is_empty() {
        items[0].0 = "base".to_string();
    }
    Ok(items)
}

/// The canonical nine-way strategy comparison: a no-sharing, token-wise,
/// cache-free baseline `B`, then {Uniform, Sorted} x {2, 4} x {Compact,
/// Ours(rescheduled)} with caches as configured in the base.
pub fn strategy_grid(base: &Configs) -> Vec<(String, Configs)> {
    let mut items = Vec::with_capacity(9);
    let mut b = base.clone();
    b.experiment.group_size = 1;
    b.experiment.grouping_strategy = GroupingStrategy::None;
    b.experiment.schedule_strategy = ScheduleStrategy::TokenWise;
    b.experiment.kv_cache_enabled = false;
    b.experiment.go_cache_enabled = false;
    b.experiment.output_cache_enabled = false;
    items.push(("B".to_string(), b));
    for size in [2usize, 4] {
        for (gtag, grouping) in
            [("U", GroupingStrategy::Uniform), ("S", GroupingStrategy::WorkloadSorted)]
        {
            for (stag, schedule) in
                [("C", ScheduleStrategy::Compact), ("O", ScheduleStrategy::Rescheduled)]
            {
                let mut c = base.clone();
                c.experiment.group_size = size;
                c.experiment.grouping_strategy = grouping;
                c.experiment.schedule_strategy = schedule;
                items.push((format!("{gtag}{size}{stag}"), c));
            }
        }
    }
    items
}

/// Run every labeled config against the same trace, sequentially, results
/// in input order. Items are independent; callers may parallelize by
/// calling [`run`] per item and reassembling in order.
pub fn sweep(items: &[(String, Configs)], trace: &Trace) -> Result<SweepResult, EngineError> {
    let mut runs = Vec::with_capacity(items.len());
    for (label, configs) in items {
        let mut result = run(configs, trace)?;
        result.label = Some(label.clone());
        runs.push(result);
    }
    Ok(SweepResult { runs })
}
