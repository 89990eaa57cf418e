//! Decode-stage caches and their accounting.
//!
//! The gate-output (GO) cache keeps, in off-chip DRAM, the full score
//! history (one score row per token) plus each expert's running top-k and,
//! optionally, the weighted expert outputs of those top-k tokens. With it,
//! an expert-choice decode step touches only the newly generated token:
//! scores append, at most one cached output slot per expert is replaced
//! (the evicted slot is dropped, never written back), and everything else
//! is reused. Without it, every step would re-run the gate over all
//! retained tokens and recompute every expert's full top-k set.
//!
//! The KV cache trades attention recompute (quadratic in retained length)
//! for DRAM traffic (linear per step).

use crate::config::RoutingMode;
use crate::routing::{GateScoreState, RoutingError};
use crate::trace::ScoreBlock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("decode step for token {token} inside the prompt region (prompt_len {prompt_len})")]
    StepDuringPrefill { token: usize, prompt_len: usize },
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

/// Traffic and outcome of one GO-cache decode step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoStepRecord {
    /// Experts that admitted the new token into their top-k.
    pub selected_by: Vec<usize>,
    /// Output slots whose previous occupant was dropped.
    pub evictions: usize,
    pub read_bytes: u64,
    pub write_bytes: u64,
    /// Score-cache size after the step.
    pub score_bytes: u64,
    /// Output-cache size (constant while enabled).
    pub output_bytes: u64,
}

/// Gate-output cache: score history, running top-k sets, resident outputs.
#[derive(Debug, Clone)]
pub struct GoCacheState {
    scores: GateScoreState,
    prompt_len: usize,
    tokens_seen: usize,
    bytes_per_score: u64,
    output_bytes_per_slot: u64,
    output_cached: bool,
    /// Token occupying each expert's output slots; mirrors the score sets.
    output_slots: Vec<Vec<usize>>,
}

impl GoCacheState {
    /// Seed the cache from the prompt: stream the prompt rows through the
    /// incremental update (equivalent to batch expert choice), store all
    /// prompt scores, and populate the output slots.
    pub fn after_prefill(
        prompt: &ScoreBlock<'_>,
        k: usize,
        bytes_per_score: u64,
        output_bytes_per_slot: u64,
        output_cached: bool,
    ) -> Result<Self, CacheError> {
        let scores = GateScoreState::from_block(prompt, k)?;
        let output_slots = (0..prompt.experts()).map(|e| scores.tokens_of(e)).collect();
        Ok(GoCacheState {
            scores,
            prompt_len: prompt.tokens(),
            tokens_seen: prompt.tokens(),
            bytes_per_score,
            output_bytes_per_slot,
            output_cached,
            output_slots,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.scores.experts()
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    /// Full score history: one row per token seen.
    pub fn score_bytes(&self) -> u64 {
        self.tokens_seen as u64 * self.num_experts() as u64 * self.bytes_per_score
    }

    /// Resident outputs: k slots per expert, constant while enabled.
    pub fn output_bytes(&self) -> u64 {
        if self.output_cached {
            self.scores.k() as u64 * self.num_experts() as u64 * self.output_bytes_per_slot
        } else {
            0
        }
    }

    pub fn tokens_of(&self, expert: usize) -> Vec<usize> {
        self.scores.tokens_of(expert)
    }

    /// Output slots mirror the score sets exactly.
    pub fn is_coherent(&self) -> bool {
        (0..self.num_experts()).all(|e| {
            let mut slots = self.output_slots[e].clone();
            slots.sort_unstable();
            slots == self.scores.tokens_of(e)
        })
    }

    /// Admit one generated token. Reads the consulted top-k score sets,
    /// appends the token's score row, and replaces at most one output slot
    /// per admitting expert.
    pub fn step(&mut self, scores: &[f64], token: usize) -> Result<GoStepRecord, CacheError> {
        if token < self.prompt_len {
            return Err(CacheError::StepDuringPrefill { token, prompt_len: self.prompt_len });
        }
        let consulted: u64 = (0..self.num_experts())
            .map(|e| self.scores.tokens_of(e).len() as u64)
            .sum();
        let read_bytes = consulted * self.bytes_per_score;

        let admissions = self.scores.topk_update(scores, token)?;
        self.tokens_seen += 1;

        let mut write_bytes = self.num_experts() as u64 * self.bytes_per_score;
        let mut evictions = 0;
        let mut selected_by = Vec::with_capacity(admissions.len());
        for adm in &admissions {
            selected_by.push(adm.expert);
            let slots = &mut self.output_slots[adm.expert];
            if let Some(gone) = adm.evicted {
                let idx = slots.iter().position(|&t| t == gone).expect("evicted slot present");
                slots.remove(idx);
                evictions += 1;
            }
            slots.push(token);
            if self.output_cached {
                write_bytes += self.output_bytes_per_slot;
            }
        }
        debug_assert!(self.is_coherent());
        Ok(GoStepRecord {
            selected_by,
            evictions,
            read_bytes,
            write_bytes,
            score_bytes: self.score_bytes(),
            output_bytes: self.output_bytes(),
        })
    }
}

/// Attention work of one step (or of the prefill), in counts and KV bytes;
/// the cost model prices it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionWork {
    /// Attended (query, key) pairs.
    pub pairs: u64,
    /// Tokens pushed through the projections.
    pub tokens: u64,
    pub kv_read_bytes: u64,
    pub kv_write_bytes: u64,
}

/// KV cache: retained-token count and the bytes it implies.
#[derive(Debug, Clone)]
pub struct KvCacheState {
    tokens_seen: usize,
    per_token_bytes: u64,
    enabled: bool,
}

impl KvCacheState {
    pub fn after_prefill(prompt_len: usize, per_token_bytes: u64, enabled: bool) -> Self {
        KvCacheState { tokens_seen: prompt_len, per_token_bytes, enabled }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn kv_bytes(&self) -> u64 {
        if self.enabled {
            self.tokens_seen as u64 * self.per_token_bytes
        } else {
            0
        }
    }

    /// Attention work of the prefill itself: one causal pass over the
    /// prompt, plus the initial KV write-out when the cache is on.
    pub fn prefill_work(prompt_len: usize, per_token_bytes: u64, enabled: bool) -> AttentionWork {
        let p = prompt_len as u64;
        AttentionWork {
            pairs: p * (p + 1) / 2,
            tokens: p,
            kv_read_bytes: 0,
            kv_write_bytes: if enabled { p * per_token_bytes } else { 0 },
        }
    }

    /// Attention work of one decode step. With the cache, only the new token
    /// runs (it attends the whole retained context) and the history is read
    /// from DRAM; without it, attention recomputes every retained token.
    pub fn step(&mut self) -> AttentionWork {
        let retained_after = self.tokens_seen as u64 + 1;
        let work = if self.enabled {
            AttentionWork {
                pairs: retained_after,
                tokens: 1,
                kv_read_bytes: self.kv_bytes(),
                kv_write_bytes: self.per_token_bytes,
            }
        } else {
            AttentionWork {
                pairs: retained_after * (retained_after + 1) / 2,
                tokens: retained_after,
                kv_read_bytes: 0,
                kv_write_bytes: 0,
            }
        };
        self.tokens_seen += 1;
        work
    }
}

/// What the GO cache saves at one expert-choice decode step, relative to
/// recomputing: the gate reruns over every retained token and every expert
/// reprocesses its full top-k set, versus one gate row and only the experts
/// that admitted the new token. Token-choice decode needs only the new
/// token with or without the cache, so there the delta is a flagged no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BypassDelta {
    pub applicable: bool,
    pub expert_passes_avoided: u64,
    pub gate_tokens_avoided: u64,
}

pub fn bypassed_work(
    mode: RoutingMode,
    num_experts: usize,
    k: usize,
    retained_tokens: usize,
    selected_count: usize,
) -> BypassDelta {
    match mode {
        RoutingMode::TokenChoice => {
            BypassDelta { applicable: false, expert_passes_avoided: 0, gate_tokens_avoided: 0 }
        }
        RoutingMode::ExpertChoice => {
            let full = num_experts as u64 * k.min(retained_tokens) as u64;
            BypassDelta {
                applicable: true,
                expert_passes_avoided: full - selected_count as u64,
                gate_tokens_avoided: retained_tokens as u64 - 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Trace;

    fn default_go(trace: &Trace) -> GoCacheState {
        GoCacheState::after_prefill(&trace.prompt_block(), 4, 2, 4096 * 2, true).unwrap()
    }

    #[test]
    fn score_cache_grows_exactly_one_row_per_token() {
        let trace = Trace::generate(48, 16, 32, 0.0, 11).unwrap();
        let mut go = default_go(&trace);
        assert_eq!(go.score_bytes(), 32 * 16 * 2);
        let mut prev = go.score_bytes();
        for t in 32..40 {
            let rec = go.step(trace.row(t), t).unwrap();
            // 16 experts * 2 bytes = 32 bytes of new score data
            assert_eq!(rec.score_bytes - prev, 32);
            prev = rec.score_bytes;
        }
    }

    #[test]
    fn output_cache_is_a_fixed_half_megabyte() {
        let trace = Trace::generate(48, 16, 32, 0.0, 11).unwrap();
        let mut go = default_go(&trace);
        assert_eq!(go.output_bytes(), 524_288); // 4 * 16 * 4096 * 2 = 512 KB
        for t in 32..48 {
            let rec = go.step(trace.row(t), t).unwrap();
            assert_eq!(rec.output_bytes, 524_288);
        }
    }

    #[test]
    fn output_slots_change_at_most_once_per_expert_per_step() {
        let trace = Trace::generate(64, 8, 16, 1.0, 3).unwrap();
        let mut go = GoCacheState::after_prefill(&trace.prompt_block(), 3, 2, 64, true).unwrap();
        let mut before: Vec<Vec<usize>> = (0..8).map(|e| go.tokens_of(e)).collect();
        for t in 16..64 {
            go.step(trace.row(t), t).unwrap();
            for (e, prior) in before.iter_mut().enumerate() {
                let after = go.tokens_of(e);
                let kept = after.iter().filter(|tok| prior.contains(tok)).count();
                assert!(after.len() - kept <= 1, "expert {e} changed more than one slot");
                *prior = after;
            }
            assert!(go.is_coherent());
        }
    }

    #[test]
    fn step_traffic_counts_reads_appends_and_replacements_only() {
        let trace = Trace::generate(40, 16, 32, 0.0, 7).unwrap();
        let mut go = default_go(&trace);
        let rec = go.step(trace.row(32), 32).unwrap();
        // every set was full at k=4: consulted 16*4 scores
        assert_eq!(rec.read_bytes, 16 * 4 * 2);
        // one score row plus one output slot per admitting expert; the
        // evicted slots are dropped, not written back
        assert_eq!(rec.write_bytes, 16 * 2 + rec.selected_by.len() as u64 * 4096 * 2);
        assert_eq!(rec.evictions, rec.selected_by.len());
    }

    #[test]
    fn score_only_variant_reports_zero_output_bytes() {
        let trace = Trace::generate(40, 16, 32, 0.0, 7).unwrap();
        let mut go =
            GoCacheState::after_prefill(&trace.prompt_block(), 4, 2, 4096 * 2, false).unwrap();
        assert_eq!(go.output_bytes(), 0);
        let rec = go.step(trace.row(32), 32).unwrap();
        assert_eq!(rec.output_bytes, 0);
        assert_eq!(rec.write_bytes, 16 * 2, "no output writes when outputs are not cached");
    }

    #[test]
    fn stepping_inside_the_prompt_is_a_contract_violation() {
        let trace = Trace::generate(40, 16, 32, 0.0, 7).unwrap();
        let mut go = default_go(&trace);
        assert!(matches!(
            go.step(trace.row(10), 10),
            Err(CacheError::StepDuringPrefill { token: 10, prompt_len: 32 })
        ));
    }

    #[test]
    fn bypass_delta_matches_the_recompute_bill() {
        // first generated token: 33 retained, 3 admitting experts
        let d = bypassed_work(RoutingMode::ExpertChoice, 16, 4, 33, 3);
        assert!(d.applicable);
        assert_eq!(d.expert_passes_avoided, 64 - 3);
        assert_eq!(d.gate_tokens_avoided, 32);
        let d = bypassed_work(RoutingMode::TokenChoice, 16, 4, 33, 4);
        assert!(!d.applicable);
        assert_eq!(d.expert_passes_avoided, 0);
    }

    #[test]
    fn kv_bytes_track_retained_tokens() {
        let mut kv = KvCacheState::after_prefill(32, 16384, true);
        assert_eq!(kv.kv_bytes(), 32 * 16384);
        let w = kv.step();
        assert_eq!(w.kv_read_bytes, 32 * 16384);
        assert_eq!(w.kv_write_bytes, 16384);
        assert_eq!(kv.kv_bytes(), 33 * 16384);
        let disabled = KvCacheState::after_prefill(32, 16384, false);
        assert_eq!(disabled.kv_bytes(), 0);
    }

    #[test]
    fn cached_attention_is_affine_uncached_is_quadratic_in_step() {
        let steps = 12;
        let series = |enabled: bool| -> Vec<u64> {
            let mut kv = KvCacheState::after_prefill(8, 100, enabled);
            (0..steps).map(|_| kv.step().pairs).collect()
        };
        let cached = series(true);
        // first differences constant: affine in step index
        for w in cached.windows(2) {
            assert_eq!(w[1] - w[0], 1);
        }
        let uncached = series(false);
        // second differences constant and positive: quadratic term present
        let d1: Vec<i64> = uncached.windows(2).map(|w| w[1] as i64 - w[0] as i64).collect();
        let d2: Vec<i64> = d1.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(d2.iter().all(|&x| x == 1), "{d2:?}");
    }

    #[test]
    fn prefill_work_is_one_causal_pass() {
        let w = KvCacheState::prefill_work(32, 16384, true);
        assert_eq!(w.pairs, 32 * 33 / 2);
        assert_eq!(w.tokens, 32);
        assert_eq!(w.kv_write_bytes, 32 * 16384);
        assert_eq!(KvCacheState::prefill_work(32, 16384, false).kv_write_bytes, 0);
    }
}
