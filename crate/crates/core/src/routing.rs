//! Gate routing: who computes what.
//!
//! Two batch modes over a score block, plus an incremental per-token update
//! that maintains each expert's running top-k without reprocessing history.
//!
//! Tie handling is fixed so the incremental and batch paths agree exactly,
//! not just on tie-free inputs: an incoming score equal to an expert's
//! current minimum displaces it, so the batch expert-choice ranking breaks
//! score ties toward the higher token index. Token-choice breaks expert
//! ties toward the lower expert index.

use crate::config::RoutingMode;
use crate::trace::ScoreBlock;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("top-k of {k} exceeds {experts} experts")]
    KOutOfRange { k: usize, experts: usize },
    #[error("top-k must be positive")]
    KZero,
    #[error("empty score block")]
    EmptyBlock,
    #[error("score row has {got} entries, state tracks {expected} experts")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("token {token} was already inserted")]
    DuplicateToken { token: usize },
}

/// Which (token, expert) pairs compute, and with what gate weight.
///
/// Weights are zero exactly where a pair is unselected. Token-choice rows
/// and expert-choice columns each sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceMatrix {
    tokens: usize,
    experts: usize,
    mode: RoutingMode,
    selected: Vec<bool>,
    weights: Vec<f64>,
}

impl ChoiceMatrix {
    fn blank(tokens: usize, experts: usize, mode: RoutingMode) -> Self {
        ChoiceMatrix {
            tokens,
            experts,
            mode,
            selected: vec![false; tokens * experts],
            weights: vec![0.0; tokens * experts],
        }
    }

    /// Matrix with an explicit selection pattern and uniform gate weights
    /// over each token's (or, in expert-choice, each expert's) selections.
    /// For hand-built workloads; the routing entry points compute softmax
    /// weights instead.
    pub fn from_selected(
        tokens: usize,
        experts: usize,
        mode: RoutingMode,
        pairs: &[(usize, usize)],
    ) -> Self {
        let mut out = ChoiceMatrix::blank(tokens, experts, mode);
        for &(t, e) in pairs {
            assert!(t < tokens && e < experts, "pair ({t}, {e}) out of range");
            out.selected[t * experts + e] = true;
        }
        match mode {
            RoutingMode::TokenChoice => {
                for t in 0..tokens {
                    let n = out.experts_of(t).len();
                    for e in 0..experts {
                        if out.selected[t * experts + e] {
                            out.weights[t * experts + e] = 1.0 / n as f64;
                        }
                    }
                }
            }
            RoutingMode::ExpertChoice => {
                for e in 0..experts {
                    let n = out.tokens_of(e).len();
                    for t in 0..tokens {
                        if out.selected[t * experts + e] {
                            out.weights[t * experts + e] = 1.0 / n as f64;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn mode(&self) -> RoutingMode {
        self.mode
    }

    pub fn is_selected(&self, token: usize, expert: usize) -> bool {
        self.selected[token * self.experts + expert]
    }

    pub fn weight(&self, token: usize, expert: usize) -> f64 {
        self.weights[token * self.experts + expert]
    }

    /// Experts computing the given token, ascending.
    pub fn experts_of(&self, token: usize) -> Vec<usize> {
        (0..self.experts).filter(|&e| self.is_selected(token, e)).collect()
    }

    /// Tokens computed by the given expert, ascending.
    pub fn tokens_of(&self, expert: usize) -> Vec<usize> {
        (0..self.tokens).filter(|&t| self.is_selected(t, expert)).collect()
    }

    /// Per-expert selection counts (the workload profile).
    pub fn expert_loads(&self) -> Vec<usize> {
        (0..self.experts).map(|e| self.tokens_of(e).len()).collect()
    }

    pub fn selected_pairs(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Softmax over the `selected` positions of `scores`, written into `out` at
/// the same positions. Max subtraction keeps exponents in range; adding a
/// constant to every score leaves the result unchanged.
fn softmax_into(scores: &[f64], selected: &[usize], out: &mut [f64]) {
    let max = selected.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &i in selected {
        denom += (scores[i] - max).exp();
    }
    for &i in selected {
        out[i] = (scores[i] - max).exp() / denom;
    }
}

/// Each token keeps its k best experts (ties to the lower expert index) and
/// weights them by softmax over the surviving scores.
pub fn route_token_choice(block: &ScoreBlock<'_>, k: usize) -> Result<ChoiceMatrix, RoutingError> {
    let (tokens, experts) = (block.tokens(), block.experts());
    if tokens == 0 {
        return Err(RoutingError::EmptyBlock);
    }
    if k == 0 {
        return Err(RoutingError::KZero);
    }
    if k > experts {
        return Err(RoutingError::KOutOfRange { k, experts });
    }
    let mut out = ChoiceMatrix::blank(tokens, experts, RoutingMode::TokenChoice);
    for t in 0..tokens {
        let row = block.row(t);
        let mut order: Vec<usize> = (0..experts).collect();
        order.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k);
        let mut weights = vec![0.0; experts];
        softmax_into(row, &order, &mut weights);
        for &e in &order {
            out.selected[t * experts + e] = true;
            out.weights[t * experts + e] = weights[e];
        }
    }
    Ok(out)
}

/// Each expert keeps its k best tokens (score ties to the higher token
/// index, matching the incremental update) and weights them by softmax over
/// its own selected set. With fewer than k tokens, every expert takes all.
pub fn route_expert_choice(block: &ScoreBlock<'_>, k: usize) -> Result<ChoiceMatrix, RoutingError> {
    let (tokens, experts) = (block.tokens(), block.experts());
    if tokens == 0 {
        return Err(RoutingError::EmptyBlock);
    }
    if k == 0 {
        return Err(RoutingError::KZero);
    }
    // k counts tokens per expert here, so it may exceed the expert count;
    // short blocks just hand every token to every expert.
    let take = k.min(tokens);
    let mut out = ChoiceMatrix::blank(tokens, experts, RoutingMode::ExpertChoice);
    for e in 0..experts {
        let col: Vec<f64> = (0..tokens).map(|t| block.score(t, e)).collect();
        let mut order: Vec<usize> = (0..tokens).collect();
        order.sort_unstable_by(|&a, &b| col[b].total_cmp(&col[a]).then(b.cmp(&a)));
        order.truncate(take);
        let mut weights = vec![0.0; tokens];
        softmax_into(&col, &order, &mut weights);
        for &t in &order {
            out.selected[t * experts + e] = true;
            out.weights[t * experts + e] = weights[t];
        }
    }
    Ok(out)
}

/// One stored (score, token) pair in an expert's running top-k.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEntry {
    pub score: f64,
    pub token: usize,
}

/// Per-expert running top-k score sets, fed one token at a time.
#[derive(Debug, Clone)]
pub struct GateScoreState {
    k: usize,
    entries: Vec<Vec<ScoreEntry>>,
    seen: HashSet<usize>,
}

/// What one incremental step did for one expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Admission {
    pub expert: usize,
    /// Token displaced from the running set, if it was already full.
    pub evicted: Option<usize>,
}

impl GateScoreState {
    pub fn new(experts: usize, k: usize) -> Result<Self, RoutingError> {
        if k == 0 {
            return Err(RoutingError::KZero);
        }
        Ok(GateScoreState { k, entries: vec![Vec::with_capacity(k); experts], seen: HashSet::new() })
    }

    /// Build state by streaming a block through `topk_update` with token ids
    /// `0..block.tokens()`; equals the batch expert-choice selection.
    pub fn from_block(block: &ScoreBlock<'_>, k: usize) -> Result<Self, RoutingError> {
        let mut state = GateScoreState::new(block.experts(), k)?;
        for t in 0..block.tokens() {
            state.topk_update(block.row(t), t)?;
        }
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn experts(&self) -> usize {
        self.entries.len()
    }

    pub fn tokens_seen(&self) -> usize {
        self.seen.len()
    }

    /// Admit `token` into each expert's running set where its score makes
    /// the cut. While a set is below k entries every token is admitted; once
    /// full, a score at least equal to the set minimum displaces that
    /// minimum (oldest token first among equal minima).
    pub fn topk_update(
        &mut self,
        scores: &[f64],
        token: usize,
    ) -> Result<Vec<Admission>, RoutingError> {
        if scores.len() != self.entries.len() {
            return Err(RoutingError::ShapeMismatch {
                expected: self.entries.len(),
                got: scores.len(),
            });
        }
        if !self.seen.insert(token) {
            return Err(RoutingError::DuplicateToken { token });
        }
        let mut admissions = Vec::new();
        for (expert, set) in self.entries.iter_mut().enumerate() {
            let score = scores[expert];
            if set.len() < self.k {
                set.push(ScoreEntry { score, token });
                admissions.push(Admission { expert, evicted: None });
                continue;
            }
            let (min_idx, min_entry) = set
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.score.total_cmp(&b.score).then(a.token.cmp(&b.token)))
                .map(|(i, e)| (i, *e))
                .expect("running set is non-empty once k > 0");
            if score >= min_entry.score {
                set[min_idx] = ScoreEntry { score, token };
                admissions.push(Admission { expert, evicted: Some(min_entry.token) });
            }
        }
        Ok(admissions)
    }

    /// Tokens in the expert's running set, ascending.
    pub fn tokens_of(&self, expert: usize) -> Vec<usize> {
        let mut tokens: Vec<usize> = self.entries[expert].iter().map(|e| e.token).collect();
        tokens.sort_unstable();
        tokens
    }

    /// All running sets as (score, token) pairs sorted by token, for
    /// comparisons against the batch path.
    pub fn sets(&self) -> Vec<Vec<(f64, usize)>> {
        self.entries
            .iter()
            .map(|set| {
                let mut v: Vec<(f64, usize)> = set.iter().map(|e| (e.score, e.token)).collect();
                v.sort_by_key(|&(_, token)| token);
                v
            })
            .collect()
    }
}

/// Validate gate weights and count the weighted accumulations the combine
/// stage performs: one per selected (token, expert) pair.
pub fn combine_outputs(choices: &ChoiceMatrix) -> Result<u64, RoutingError> {
    const TOL: f64 = 1e-9;
    // rows/columns with no selections carry no weight and are skipped
    match choices.mode {
        RoutingMode::TokenChoice => {
            for t in 0..choices.tokens {
                let sum: f64 = (0..choices.experts).map(|e| choices.weight(t, e)).sum();
                debug_assert!(
                    sum == 0.0 || (sum - 1.0).abs() < TOL,
                    "token {t} weights sum to {sum}"
                );
            }
        }
        RoutingMode::ExpertChoice => {
            for e in 0..choices.experts {
                let sum: f64 = (0..choices.tokens).map(|t| choices.weight(t, e)).sum();
                debug_assert!(
                    sum == 0.0 || (sum - 1.0).abs() < TOL,
                    "expert {e} weights sum to {sum}"
                );
            }
        }
    }
    for i in 0..choices.selected.len() {
        if choices.selected[i] != (choices.weights[i] > 0.0) {
            debug_assert!(false, "selection/weight mismatch at flat index {i}");
        }
    }
    Ok(choices.selected_pairs() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Trace;
    use proptest::prelude::*;

    fn block_of(rows: &[&[f64]]) -> (Vec<f64>, usize, usize) {
        let tokens = rows.len();
        let experts = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(r);
        }
        (data, tokens, experts)
    }

    #[test]
    fn token_choice_masks_then_softmaxes() {
        let (data, t, e) = block_of(&[&[1.0, 2.0, 3.0]]);
        let block = ScoreBlock::new(&data, t, e);
        let c = route_token_choice(&block, 2).unwrap();
        assert!(!c.is_selected(0, 0));
        assert_eq!(c.weight(0, 0), 0.0);
        // logistic(1) and logistic(-1): softmax of (2, 3) at gap 1
        assert!((c.weight(0, 1) - 0.2689414213699951).abs() < 1e-12);
        assert!((c.weight(0, 2) - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn token_choice_extreme_scores_stay_finite() {
        let (data, t, e) = block_of(&[&[5.0, -1.0, -3.0]]);
        let block = ScoreBlock::new(&data, t, e);
        let c = route_token_choice(&block, 2).unwrap();
        // softmax of (5, -1): logistic(6) and its complement
        assert!((c.weight(0, 0) - 0.9975273768433653).abs() < 1e-12);
        assert!((c.weight(0, 1) - 0.0024726231566347).abs() < 1e-12);
    }

    #[test]
    fn token_choice_expert_ties_go_to_lower_index() {
        let (data, t, e) = block_of(&[&[2.0, 2.0, 0.0]]);
        let block = ScoreBlock::new(&data, t, e);
        let c = route_token_choice(&block, 1).unwrap();
        assert!(c.is_selected(0, 0));
        assert!(!c.is_selected(0, 1));
        assert_eq!(c.weight(0, 0), 1.0);
    }

    #[test]
    fn expert_choice_picks_column_top_k() {
        let (data, t, e) = block_of(&[&[0.1, 0.0], &[0.9, 0.0], &[0.5, 0.0]]);
        let block = ScoreBlock::new(&data, t, e);
        let c = route_expert_choice(&block, 1).unwrap();
        assert_eq!(c.tokens_of(0), vec![1]);
    }

    #[test]
    fn expert_choice_with_few_tokens_takes_all() {
        let (data, t, e) = block_of(&[&[0.3, 0.1], &[0.2, 0.9]]);
        let block = ScoreBlock::new(&data, t, e);
        let c = route_expert_choice(&block, 4).unwrap();
        for expert in 0..2 {
            assert_eq!(c.tokens_of(expert), vec![0, 1]);
            let sum: f64 = (0..2).map(|tok| c.weight(tok, expert)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    /// Independent per-column sort oracle for expert choice.
    fn expert_choice_oracle(data: &[f64], tokens: usize, experts: usize, k: usize) -> Vec<Vec<usize>> {
        let take = k.min(tokens);
        (0..experts)
            .map(|e| {
                let mut idx: Vec<usize> = (0..tokens).collect();
                idx.sort_by(|&a, &b| {
                    data[b * experts + e]
                        .total_cmp(&data[a * experts + e])
                        .then(b.cmp(&a))
                });
                let mut sel: Vec<usize> = idx.into_iter().take(take).collect();
                sel.sort_unstable();
                sel
            })
            .collect()
    }

    #[test]
    fn expert_choice_matches_sort_oracle() {
        let trace = Trace::generate(6, 4, 6, 0.0, 99).unwrap();
        let block = trace.block(0, 6);
        let c = route_expert_choice(&block, 2).unwrap();
        let data: Vec<f64> = (0..6).flat_map(|t| block.row(t).to_vec()).collect();
        let oracle = expert_choice_oracle(&data, 6, 4, 2);
        for (e, expected) in oracle.iter().enumerate() {
            assert_eq!(c.tokens_of(e), *expected, "expert {e}");
            assert_eq!(c.tokens_of(e).len(), 2);
        }
    }

    #[test]
    fn topk_update_displaces_the_minimum() {
        let mut state = GateScoreState::new(1, 2).unwrap();
        state.topk_update(&[0.9], 0).unwrap();
        state.topk_update(&[0.3], 1).unwrap();
        let adm = state.topk_update(&[0.5], 2).unwrap();
        assert_eq!(adm, vec![Admission { expert: 0, evicted: Some(1) }]);
        assert_eq!(state.tokens_of(0), vec![0, 2]);
    }

    #[test]
    fn topk_update_warm_up_admits_everything() {
        let mut state = GateScoreState::new(2, 3).unwrap();
        for t in 0..3 {
            let adm = state.topk_update(&[t as f64, -(t as f64)], t).unwrap();
            assert_eq!(adm.len(), 2, "token {t} should enter both experts");
            assert!(adm.iter().all(|a| a.evicted.is_none()));
        }
    }

    #[test]
    fn topk_update_equal_score_evicts_oldest_minimum() {
        let mut state = GateScoreState::new(1, 1).unwrap();
        state.topk_update(&[0.5], 0).unwrap();
        let adm = state.topk_update(&[0.5], 1).unwrap();
        assert_eq!(adm, vec![Admission { expert: 0, evicted: Some(0) }]);
        assert_eq!(state.tokens_of(0), vec![1]);
    }

    #[test]
    fn topk_update_rejects_duplicate_tokens() {
        let mut state = GateScoreState::new(2, 1).unwrap();
        state.topk_update(&[0.1, 0.2], 7).unwrap();
        assert!(matches!(
            state.topk_update(&[0.3, 0.4], 7),
            Err(RoutingError::DuplicateToken { token: 7 })
        ));
    }

    #[test]
    fn incremental_equals_batch_including_ties() {
        // deliberate score ties across tokens
        let (data, t, e) = block_of(&[&[0.5, 1.0], &[0.5, 1.0], &[0.5, 0.0], &[0.2, 1.0]]);
        let block = ScoreBlock::new(&data, t, e);
        let batch = route_expert_choice(&block, 2).unwrap();
        let state = GateScoreState::from_block(&block, 2).unwrap();
        for expert in 0..e {
            assert_eq!(state.tokens_of(expert), batch.tokens_of(expert), "expert {expert}");
        }
    }

    #[test]
    fn combine_counts_selected_pairs() {
        let trace = Trace::generate(32, 16, 32, 0.0, 5).unwrap();
        let c = route_expert_choice(&trace.block(0, 32), 4).unwrap();
        // balanced expert choice: 16 experts times 4 tokens each
        assert_eq!(combine_outputs(&c).unwrap(), 64);
    }

    #[test]
    fn k_bounds_are_enforced() {
        let (data, t, e) = block_of(&[&[1.0, 2.0]]);
        let block = ScoreBlock::new(&data, t, e);
        assert!(matches!(
            route_token_choice(&block, 3),
            Err(RoutingError::KOutOfRange { k: 3, experts: 2 })
        ));
        assert!(matches!(route_token_choice(&block, 0), Err(RoutingError::KZero)));
        assert!(matches!(route_expert_choice(&block, 0), Err(RoutingError::KZero)));
        // expert choice counts tokens, not experts: large k is legal
        assert!(route_expert_choice(&block, 3).is_ok());
        assert!(GateScoreState::new(2, 3).is_ok());
        assert!(GateScoreState::new(2, 0).is_err());
    }

    proptest! {
        #[test]
        fn token_choice_rows_select_k_and_normalize(
            tokens in 1usize..12, experts in 1usize..10, seed in 0u64..500
        ) {
            let k = 1 + (seed as usize) % experts;
            let trace = Trace::generate(tokens, experts, tokens, 0.0, seed).unwrap();
            let c = route_token_choice(&trace.block(0, tokens), k).unwrap();
            for t in 0..tokens {
                prop_assert_eq!(c.experts_of(t).len(), k);
                let sum: f64 = (0..experts).map(|e| c.weight(t, e)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                for e in 0..experts {
                    prop_assert_eq!(c.is_selected(t, e), c.weight(t, e) > 0.0);
                }
            }
        }

        #[test]
        fn expert_choice_columns_select_min_k_tokens(
            tokens in 1usize..12, experts in 1usize..10, seed in 0u64..500
        ) {
            let k = 1 + (seed as usize) % experts;
            let trace = Trace::generate(tokens, experts, tokens, 1.0, seed).unwrap();
            let c = route_expert_choice(&trace.block(0, tokens), k).unwrap();
            for e in 0..experts {
                prop_assert_eq!(c.tokens_of(e).len(), k.min(tokens));
                let sum: f64 = (0..tokens).map(|t| c.weight(t, e)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn token_choice_weights_ignore_additive_shift(
            experts in 2usize..10, seed in 0u64..500, shift in -50.0f64..50.0
        ) {
            let k = 1 + (seed as usize) % experts;
            let trace = Trace::generate(1, experts, 1, 0.0, seed).unwrap();
            let shifted: Vec<f64> = trace.row(0).iter().map(|v| v + shift).collect();
            let a = route_token_choice(&trace.block(0, 1), k).unwrap();
            let b = route_token_choice(&ScoreBlock::new(&shifted, 1, experts), k).unwrap();
            for e in 0..experts {
                prop_assert_eq!(a.is_selected(0, e), b.is_selected(0, e));
                prop_assert!((a.weight(0, e) - b.weight(0, e)).abs() < 1e-9);
            }
        }

        #[test]
        fn incremental_matches_batch_on_random_blocks(
            tokens in 1usize..24, experts in 1usize..12, seed in 0u64..500
        ) {
            let k = 1 + (seed as usize) % experts;
            let trace = Trace::generate(tokens, experts, tokens, 0.5, seed).unwrap();
            let block = trace.block(0, tokens);
            let batch = route_expert_choice(&block, k).unwrap();
            let state = GateScoreState::from_block(&block, k).unwrap();
            for e in 0..experts {
                prop_assert_eq!(state.tokens_of(e), batch.tokens_of(e));
            }
        }
    }
}
