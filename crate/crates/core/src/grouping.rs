//! Partitioning experts into peripheral-sharing groups.
//!
//! Experts in one group time-share a single set of peripheral circuits, so
//! a group's prefill work serializes. Grouping is either a seeded uniform
//! random partition or load-aware: sort experts by profiled load and deal
//! ranks across groups in a folded (boustrophedon) order, which for
//! group_size 2 pairs the heaviest expert with the lightest and provably
//! minimizes the maximum pair load.

use crate::config::RoutingMode;
use crate::routing::{self, RoutingError};
use crate::trace::ScoreBlock;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("group_size {group_size} does not divide {experts} experts")]
    SizeDoesNotDivide { group_size: usize, experts: usize },
    #[error("load vector is empty")]
    EmptyLoads,
    #[error("groups must be equally sized and partition 0..experts exactly")]
    NotAPartition,
    #[error("routing failed while profiling loads: {0}")]
    Profile(#[from] RoutingError),
}

/// A partition of experts into equally sized groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpertGrouping {
    group_size: usize,
    /// Members ascending within each group.
    groups: Vec<Vec<usize>>,
    /// Inverse map: expert -> group index.
    group_of: Vec<usize>,
}

impl ExpertGrouping {
    fn from_groups(group_size: usize, mut groups: Vec<Vec<usize>>) -> Self {
        let experts: usize = groups.iter().map(|g| g.len()).sum();
        let mut group_of = vec![usize::MAX; experts];
        for (i, g) in groups.iter_mut().enumerate() {
            g.sort_unstable();
            for &e in g.iter() {
                group_of[e] = i;
            }
        }
        ExpertGrouping { group_size, groups, group_of }
    }

    /// Every expert alone: no peripheral sharing at all.
    pub fn singletons(experts: usize) -> Self {
        Self::from_groups(1, (0..experts).map(|e| vec![e]).collect())
    }

    /// An explicit, caller-chosen partition. Groups must be nonempty, equal
    /// in size, and cover every expert index exactly once.
    pub fn from_members(groups: Vec<Vec<usize>>) -> Result<Self, GroupingError> {
        let group_size = groups.first().map(|g| g.len()).unwrap_or(0);
        if group_size == 0 || groups.iter().any(|g| g.len() != group_size) {
            return Err(GroupingError::NotAPartition);
        }
        let experts = group_size * groups.len();
        let mut seen = vec![false; experts];
        for &e in groups.iter().flatten() {
            if e >= experts || seen[e] {
                return Err(GroupingError::NotAPartition);
            }
            seen[e] = true;
        }
        Ok(Self::from_groups(group_size, groups))
    }

    /// Seeded uniform random partition into groups of `group_size`.
    pub fn uniform(experts: usize, group_size: usize, seed: u64) -> Result<Self, GroupingError> {
        check_divides(group_size, experts)?;
        let mut order: Vec<usize> = (0..experts).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let groups = order.chunks(group_size).map(|c| c.to_vec()).collect();
        Ok(Self::from_groups(group_size, groups))
    }

    /// Load-aware partition: experts sorted by load descending (ties to the
    /// lower expert index), then rank r goes to group r % m on even passes
    /// and to group m-1 - r % m on odd passes (m = experts / group_size).
    pub fn workload_sorted(loads: &[f64], group_size: usize) -> Result<Self, GroupingError> {
        let experts = loads.len();
        if experts == 0 {
            return Err(GroupingError::EmptyLoads);
        }
        check_divides(group_size, experts)?;
        let mut order: Vec<usize> = (0..experts).collect();
        order.sort_by(|&a, &b| loads[b].total_cmp(&loads[a]).then(a.cmp(&b)));
        let m = experts / group_size;
        let mut groups = vec![Vec::with_capacity(group_size); m];
        for (rank, &expert) in order.iter().enumerate() {
            let pass = rank / m;
            let rem = rank % m;
            let g = if pass.is_multiple_of(2) { rem } else { m - 1 - rem };
            groups[g].push(expert);
        }
        Ok(Self::from_groups(group_size, groups))
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_experts(&self) -> usize {
        self.group_of.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.groups[group]
    }

    pub fn group_of(&self, expert: usize) -> usize {
        self.group_of[expert]
    }

    /// Sum of per-expert loads within each group.
    pub fn group_loads(&self, loads: &[f64]) -> Vec<f64> {
        self.groups.iter().map(|g| g.iter().map(|&e| loads[e]).sum()).collect()
    }
}

fn check_divides(group_size: usize, experts: usize) -> Result<(), GroupingError> {
    if group_size == 0 || !experts.is_multiple_of(group_size) {
        return Err(GroupingError::SizeDoesNotDivide { group_size, experts });
    }
    Ok(())
}

/// Per-expert selection counts over a prompt block under the given routing
/// mode; the workload profile that drives load-aware grouping.
pub fn profile_loads(
    block: &ScoreBlock<'_>,
    mode: RoutingMode,
    k: usize,
) -> Result<Vec<f64>, GroupingError> {
    let choices = match mode {
        RoutingMode::TokenChoice => routing::route_token_choice(block, k)?,
        RoutingMode::ExpertChoice => routing::route_expert_choice(block, k)?,
    };
    Ok(choices.expert_loads().into_iter().map(|c| c as f64).collect())
}
