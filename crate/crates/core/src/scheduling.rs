//! Prefill schedules: laying out (token, expert) jobs on peripheral-sharing
//! groups.
//!
//! A group executes one job per slot (its experts time-share one peripheral
//! set), groups run in parallel, and a token's activations must be fetched
//! whenever some group starts one of its runs. Runs of the same token that
//! start in the same slot in several groups share a single broadcast, so
//! the transfer count is the number of distinct (slot, token) run starts.
//!
//! Three builders:
//! - token-wise: one window per token, every group waits for the slowest;
//! - compact: back-to-back jobs per group, shortest possible makespan;
//! - rescheduled: compact plus idle slots inserted into non-bottleneck
//!   groups so that same-token runs line up with the bottleneck group and
//!   broadcasts merge. Idles only ever consume a group's slack, so the
//!   compact makespan is preserved, and an insertion is kept only if the
//!   total transfer count does not get worse.

use crate::grouping::ExpertGrouping;
use crate::routing::ChoiceMatrix;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("choice matrix covers {choices} experts, grouping covers {grouping}")]
    ExpertMismatch { choices: usize, grouping: usize },
}

/// One slot of one group's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Idle,
    Job { token: usize, expert: usize },
}

impl Slot {
    pub fn token(&self) -> Option<usize> {
        match self {
            Slot::Idle => None,
            Slot::Job { token, .. } => Some(*token),
        }
    }
}

/// Per-group slot timelines plus the two headline numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSchedule {
    slots: Vec<Vec<Slot>>,
    makespan: usize,
    transfers: usize,
}

impl GroupSchedule {
    pub fn num_groups(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self, group: usize) -> &[Slot] {
        &self.slots[group]
    }

    /// Longest group timeline, in slots.
    pub fn makespan(&self) -> usize {
        self.makespan
    }

    /// Distinct (slot, token) run starts; same-token runs starting together
    /// in several groups count once.
    pub fn transfers(&self) -> usize {
        self.transfers
    }

    /// Total executed jobs across groups.
    pub fn job_count(&self) -> usize {
        self.slots
            .iter()
            .map(|s| s.iter().filter(|slot| matches!(slot, Slot::Job { .. })).count())
            .sum()
    }

    /// All jobs as (token, expert) pairs, sorted; for conservation checks.
    pub fn jobs_multiset(&self) -> Vec<(usize, usize)> {
        let mut jobs: Vec<(usize, usize)> = self
            .slots
            .iter()
            .flatten()
            .filter_map(|s| match s {
                Slot::Job { token, expert } => Some((*token, *expert)),
                Slot::Idle => None,
            })
            .collect();
        jobs.sort_unstable();
        jobs
    }

    /// Debug rendering: one row per group, one column per slot.
    pub fn to_text_grid(&self) -> String {
        let cell = |s: &Slot| match s {
            Slot::Idle => "--".to_string(),
            Slot::Job { token, expert } => format!("t{token}.e{expert}"),
        };
        let width = self
            .slots
            .iter()
            .flatten()
            .map(|s| cell(s).len())
            .max()
            .unwrap_or(2);
        let mut out = String::new();
        for (g, row) in self.slots.iter().enumerate() {
            out.push_str(&format!("G{g} |"));
            for s in row {
                out.push_str(&format!(" {:width$}", cell(s)));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-group per-token job counts with cumulative sums and the slot deficit
/// of each group behind the bottleneck group after each token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadTable {
    /// load[group][token]: jobs the group owes that token.
    pub load: Vec<Vec<u64>>,
    /// csum[group][token]: jobs through that token, inclusive.
    pub csum: Vec<Vec<u64>>,
    /// res[group][token]: bottleneck csum minus group csum, clamped at zero
    /// where a group runs ahead of the bottleneck.
    pub res: Vec<Vec<u64>>,
    /// Group with the most total jobs, ties to the lowest index.
    pub max_id: usize,
}

impl LoadTable {
    pub fn build(
        choices: &ChoiceMatrix,
        grouping: &ExpertGrouping,
    ) -> Result<LoadTable, ScheduleError> {
        let jobs = grouped_jobs(choices, grouping)?;
        let tokens = choices.tokens();
        let groups = grouping.num_groups();
        let load: Vec<Vec<u64>> = (0..groups)
            .map(|g| (0..tokens).map(|t| jobs[g][t].len() as u64).collect())
            .collect();
        let csum: Vec<Vec<u64>> = load
            .iter()
            .map(|row| {
                row.iter()
                    .scan(0u64, |acc, &v| {
                        *acc += v;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        let totals: Vec<u64> = csum.iter().map(|row| row.last().copied().unwrap_or(0)).collect();
        let max_id = totals
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let res: Vec<Vec<u64>> = (0..groups)
            .map(|g| {
                (0..tokens)
                    .map(|t| csum[max_id][t].saturating_sub(csum[g][t]))
                    .collect()
            })
            .collect();
        Ok(LoadTable { load, csum, res, max_id })
    }
}

/// jobs[group][token] = experts of that group selecting that token, ascending.
fn grouped_jobs(
    choices: &ChoiceMatrix,
    grouping: &ExpertGrouping,
) -> Result<Vec<Vec<Vec<usize>>>, ScheduleError> {
    if choices.experts() != grouping.num_experts() {
        return Err(ScheduleError::ExpertMismatch {
            choices: choices.experts(),
            grouping: grouping.num_experts(),
        });
    }
    let tokens = choices.tokens();
    let jobs = (0..grouping.num_groups())
        .map(|g| {
            (0..tokens)
                .map(|t| {
                    grouping
                        .members(g)
                        .iter()
                        .copied()
                        .filter(|&e| choices.is_selected(t, e))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(jobs)
}

/// Run starts of one timeline: (slot, token) for every first slot of a
/// maximal same-token run.
fn run_starts(slots: &[Slot]) -> Vec<(usize, usize)> {
    let mut starts = Vec::new();
    for (s, slot) in slots.iter().enumerate() {
        if let Slot::Job { token, .. } = slot {
            let continues = s > 0 && slots[s - 1].token() == Some(*token);
            if !continues {
                starts.push((s, *token));
            }
        }
    }
    starts
}

fn count_transfers_in(slots: &[Vec<Slot>]) -> usize {
    let mut distinct: BTreeSet<(usize, usize)> = BTreeSet::new();
    for row in slots {
        for start in run_starts(row) {
            distinct.insert(start);
        }
    }
    distinct.len()
}

/// Recount a schedule's broadcasts from its slots.
pub fn count_transfers(schedule: &GroupSchedule) -> usize {
    count_transfers_in(&schedule.slots)
}

fn finish(slots: Vec<Vec<Slot>>) -> GroupSchedule {
    let makespan = slots.iter().map(|s| s.len()).max().unwrap_or(0);
    let transfers = count_transfers_in(&slots);
    GroupSchedule { slots, makespan, transfers }
}

/// One broadcast window per token: every group runs its jobs for that token
/// back to back from the window start, then idles until the slowest group
/// finishes. Tokens nobody selected get no window.
pub fn schedule_token_wise(
    choices: &ChoiceMatrix,
    grouping: &ExpertGrouping,
) -> Result<GroupSchedule, ScheduleError> {
    let jobs = grouped_jobs(choices, grouping)?;
    let groups = grouping.num_groups();
    let mut slots: Vec<Vec<Slot>> = vec![Vec::new(); groups];
    for t in 0..choices.tokens() {
        let window = jobs.iter().map(|group| group[t].len()).max().unwrap_or(0);
        if window == 0 {
            continue;
        }
        for g in 0..groups {
            for &expert in &jobs[g][t] {
                slots[g].push(Slot::Job { token: t, expert });
            }
            for _ in jobs[g][t].len()..window {
                slots[g].push(Slot::Idle);
            }
        }
    }
    Ok(finish(slots))
}

/// Back-to-back jobs per group in token order; no idles anywhere.
pub fn schedule_compact(
    choices: &ChoiceMatrix,
    grouping: &ExpertGrouping,
) -> Result<GroupSchedule, ScheduleError> {
    let jobs = grouped_jobs(choices, grouping)?;
    let slots = jobs
        .iter()
        .map(|per_token| {
            per_token
                .iter()
                .enumerate()
                .flat_map(|(t, experts)| {
                    experts.iter().map(move |&expert| Slot::Job { token: t, expert })
                })
                .collect()
        })
        .collect();
    Ok(finish(slots))
}

/// Count of (slot, token) run starts a timeline shares with a reference
/// timeline: the broadcasts the two groups would merge.
fn shared_starts(timeline: &[Slot], reference: &[(usize, usize)]) -> usize {
    let starts = run_starts(timeline);
    starts.iter().filter(|s| reference.contains(s)).count()
}

/// Compact schedule with idle slots inserted into non-bottleneck groups so
/// same-token runs line up with the bottleneck group's timeline.
///
/// Per group, deficits are scanned in token order; each positive deficit,
/// capped by the group's remaining slack, is offered as an idle block before
/// each later run in turn, and lands where it lines up the most run starts
/// with the bottleneck (ties to the earliest position). Insertions that do
/// not strictly improve alignment, or that would worsen the schedule-wide
/// transfer count, are skipped. The bottleneck group is never touched, so
/// the makespan always equals the compact makespan.
pub fn reschedule_insert_idle(
    choices: &ChoiceMatrix,
    grouping: &ExpertGrouping,
) -> Result<GroupSchedule, ScheduleError> {
    let compact = schedule_compact(choices, grouping)?;
    let table = LoadTable::build(choices, grouping)?;
    let l_star = compact.makespan;
    let tokens = choices.tokens();
    let mut slots = compact.slots;
    let bottleneck_starts = run_starts(&slots[table.max_id]);

    for g in 0..slots.len() {
        if g == table.max_id {
            continue;
        }
        let mut slack = (l_star - slots[g].len()) as u64;
        let mut res: Vec<u64> = table.res[g].clone();
        for t in 0..tokens {
            if res[t] == 0 {
                continue;
            }
            if slack == 0 {
                break;
            }
            let amount = res[t].min(slack) as usize;

            // Candidate insertion points: starts of runs of tokens after t.
            let candidates: Vec<usize> = run_starts(&slots[g])
                .into_iter()
                .filter(|&(_, tok)| tok > t)
                .map(|(slot, _)| slot)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let current = shared_starts(&slots[g], &bottleneck_starts);
            let mut best: Option<(usize, usize)> = None; // (shared, position)
            for &pos in &candidates {
                let mut tentative = slots[g].clone();
                tentative.splice(pos..pos, std::iter::repeat_n(Slot::Idle, amount));
                let shared = shared_starts(&tentative, &bottleneck_starts);
                let better = match best {
                    None => shared > current,
                    Some((bs, _)) => shared > bs,
                };
                if better {
                    best = Some((shared, pos));
                }
            }
            if let Some((_, pos)) = best {
                let mut tentative = slots[g].clone();
                tentative.splice(pos..pos, std::iter::repeat_n(Slot::Idle, amount));
                let before = count_transfers_in(&slots);
                let saved = std::mem::replace(&mut slots[g], tentative);
                if count_transfers_in(&slots) > before {
                    slots[g] = saved;
                } else {
                    slack -= amount as u64;
                    for r in res[t..].iter_mut() {
                        *r = r.saturating_sub(amount as u64);
                    }
                }
            }
        }
        debug_assert!(slots[g].len() <= l_star, "idle insertion overran the makespan");
    }
    let out = finish(slots);
    debug_assert_eq!(out.makespan, l_star);
    Ok(out)
}
