// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions on individual weight matrices and searches over them.

mod intervention;
mod search;

pub use intervention::{
    apply_intervention, apply_plan, apply_plan_cached, intervened_matrix, magnitude_prune,
    target_rank, FactorCache, InterventionPlan, InterventionSpec, Method,
};
pub use search::{
    greedy_compose_search, search_greedy, search_single_step, single_step_search, CandidateRecord,
    DatasetScorer, Objective, PlanScorer, SearchConfig, SearchOutcome, SearchResult,
    DEFAULT_RHO_GRID,
};
