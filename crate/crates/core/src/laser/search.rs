// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-step and greedy searches over `(tau, layer, rho)` grids.
//!
//! Candidates are scored in parallel and collected in enumeration order;
//! the selection pass that follows is sequential, so results do not depend
//! on the thread count.

use serde::{Deserialize, Serialize};

use crate::error::{LaserError, Result};
use crate::eval::{
    score_samples, Aggregates, DatasetSplit, EvalConfig, EvalReport, QASample, ReportMetadata,
};
use crate::laser::intervention::{
    apply_plan_cached, FactorCache, InterventionPlan, InterventionSpec, Method,
};
use crate::parallel::*;
use crate::transformer::{MatrixType, Slot, TransformerModel};

pub const DEFAULT_RHO_GRID: [f64; 7] = [0.9, 0.8, 0.6, 0.2, 0.1, 0.05, 0.01];

/// Quantity maximized on the validation split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Accuracy,
    /// Negated mean answer loss.
    NegLoss,
}

impl Objective {
    pub fn of(self, aggregates: &Aggregates) -> f64 {
        match self {
            Objective::Accuracy => aggregates.accuracy,
            Objective::NegLoss => -aggregates.mean_loss,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = LaserError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "accuracy" | "acc" => Ok(Objective::Accuracy),
            "neg_loss" | "loss" => Ok(Objective::NegLoss),
            other => Err(LaserError::invalid(format!(
                "unknown objective {other:?} (expected accuracy or neg_loss)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(default = "default_grid")]
    pub rho_grid: Vec<f64>,
    #[serde(default = "default_taus")]
    pub tau_set: Vec<MatrixType>,
    /// Layers to consider; `None` means all of them.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub method: Method,
}

fn default_grid() -> Vec<f64> {
    DEFAULT_RHO_GRID.to_vec()
}

fn default_taus() -> Vec<MatrixType> {
    vec![MatrixType::Uin, MatrixType::Uout]
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rho_grid: default_grid(),
            tau_set: default_taus(),
            layers: None,
            objective: Objective::default(),
            method: Method::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.rho_grid.is_empty() {
            return Err(LaserError::invalid("rho grid is empty"));
        }
        for &rho in &self.rho_grid {
            if !(0.0..1.0).contains(&rho) {
                return Err(LaserError::invalid(format!(
                    "grid value {rho} is outside [0, 1)"
                )));
            }
        }
        if self.rho_ascending().len() != self.rho_grid.len() {
            return Err(LaserError::invalid("rho grid contains duplicates"));
        }
        if self.tau_set.is_empty() {
            return Err(LaserError::invalid("tau set is empty"));
        }
        if self.taus().len() != self.tau_set.len() {
            return Err(LaserError::invalid("tau set contains duplicates"));
        }
        let layers = self.layer_order(num_layers);
        if layers.is_empty() {
            return Err(LaserError::invalid("no layers selected"));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= num_layers) {
            return Err(LaserError::invalid(format!(
                "layer {bad} out of range for a {num_layers}-layer model"
            )));
        }
        Ok(())
    }

    /// Selected layers, largest first.
    pub fn layer_order(&self, num_layers: usize) -> Vec<usize> {
        let mut layers = self
            .layers
            .clone()
            .unwrap_or_else(|| (0..num_layers).collect());
        layers.sort_unstable_by(|a, b| b.cmp(a));
        layers.dedup();
        layers
    }

    /// Grid values, smallest first.
    pub fn rho_ascending(&self) -> Vec<f64> {
        let mut grid = self.rho_grid.clone();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }

    /// Matrix types in declaration order.
    pub fn taus(&self) -> Vec<MatrixType> {
        let mut taus = self.tau_set.clone();
        taus.sort();
        taus.dedup();
        taus
    }

    /// Every grid point, ordered by the tie-break preference: larger layer,
    /// then smaller rho, then matrix type order.
    pub fn candidates(&self, num_layers: usize) -> Vec<InterventionSpec> {
        let mut out = Vec::new();
        for layer in self.layer_order(num_layers) {
            for rho in self.rho_ascending() {
                for tau in self.taus() {
                    out.push(InterventionSpec::new(tau, layer, rho).with_method(self.method));
                }
            }
        }
        out
    }

    fn slots(&self, num_layers: usize) -> Vec<Slot> {
        self.layer_order(num_layers)
            .into_iter()
            .flat_map(|l| self.taus().into_iter().map(move |t| Slot::new(t, l)))
            .collect()
    }
}

/// Scores a model view produced by applying `plan`. Higher is better.
pub trait PlanScorer: Sync {
    fn score(&self, model: &TransformerModel, plan: &InterventionPlan) -> Result<f64>;
}

/// Scores by evaluating a fixed sample set.
pub struct DatasetScorer<'a> {
    pub samples: &'a [QASample],
    pub eval: EvalConfig,
    pub objective: Objective,
}

impl PlanScorer for DatasetScorer<'_> {
    fn score(&self, model: &TransformerModel, _plan: &InterventionPlan) -> Result<f64> {
        let records = score_samples(model, self.samples, &self.eval)?;
        Ok(self
            .objective
            .of(&Aggregates::from_records(&records, &self.eval)?))
    }
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub plan: InterventionPlan,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub plan: InterventionPlan,
    pub baseline_objective: f64,
    pub best_objective: f64,
    /// Every scored candidate, baseline first, in evaluation order.
    pub candidates: Vec<CandidateRecord>,
}

/// Scores the baseline and every single grid point; returns the best, with
/// ties resolved towards the baseline and then the enumeration order of
/// [`SearchConfig::candidates`].
pub fn search_single_step<S: PlanScorer>(
    model: &TransformerModel,
    cfg: &SearchConfig,
    scorer: &S,
) -> Result<SearchResult> {
    let num_layers = model.config().num_layers;
    cfg.validate(num_layers)?;
    let cache = FactorCache::build(model, &cfg.slots(num_layers), cfg.method)?;
    let mut plans = vec![InterventionPlan::empty()];
    plans.extend(
        cfg.candidates(num_layers)
            .into_iter()
            .map(|s| InterventionPlan { steps: vec![s] }),
    );
    let objectives = plans
        .par_iter()
        .map(|plan| {
            let view = apply_plan_cached(model, plan, Some(&cache))?;
            scorer.score(&view, plan)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &obj) in objectives.iter().enumerate() {
        if obj > objectives[best] {
            best = i;
        }
    }
    log::info!(
        "single-step search: {} candidates, best {} ({:.6})",
        plans.len(),
        plans[best].to_json(),
        objectives[best]
    );
    Ok(SearchResult {
        plan: plans[best].clone(),
        baseline_objective: objectives[0],
        best_objective: objectives[best],
        candidates: plans
            .into_iter()
            .zip(&objectives)
            .enumerate()
            .map(|(i, (plan, &objective))| CandidateRecord {
                plan,
                objective,
                accepted: i == best,
            })
            .collect(),
    })
}

/// Builds a plan layer by layer, from the last layer to the first. For each
/// `(layer, tau)` the grid values are tried smallest first and the first one
/// that strictly improves on the current objective is kept.
pub fn search_greedy<S: PlanScorer>(
    model: &TransformerModel,
    cfg: &SearchConfig,
    scorer: &S,
) -> Result<SearchResult> {
    let num_layers = model.config().num_layers;
    cfg.validate(num_layers)?;
    let cache = FactorCache::build(model, &cfg.slots(num_layers), cfg.method)?;
    let baseline = scorer.score(model, &InterventionPlan::empty())?;
    let mut plan = InterventionPlan::empty();
    let mut best = baseline;
    let mut log = vec![CandidateRecord {
        plan: plan.clone(),
        objective: baseline,
        accepted: true,
    }];
    let grid = cfg.rho_ascending();
    for layer in cfg.layer_order(num_layers) {
        for tau in cfg.taus() {
            let trials = grid
                .iter()
                .map(|&rho| {
                    plan.with_step(InterventionSpec::new(tau, layer, rho).with_method(cfg.method))
                })
                .collect::<Result<Vec<_>>>()?;
            let objectives = trials
                .par_iter()
                .map(|p| scorer.score(&apply_plan_cached(model, p, Some(&cache))?, p))
                .collect::<Result<Vec<f64>>>()?;
            let pick = objectives.iter().position(|&o| o > best);
            for (i, (p, &objective)) in trials.iter().zip(&objectives).enumerate() {
                log.push(CandidateRecord {
                    plan: p.clone(),
                    objective,
                    accepted: Some(i) == pick,
                });
            }
            if let Some(i) = pick {
                log::info!(
                    "greedy: accepted {} ({:.6} > {:.6})",
                    trials[i].steps.last().unwrap(),
                    objectives[i],
                    best
                );
                best = objectives[i];
                plan = trials[i].clone();
            }
        }
    }
    Ok(SearchResult {
        plan,
        baseline_objective: baseline,
        best_objective: best,
        candidates: log,
    })
}

/// A search together with full reports for its plan on both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub strategy: String,
    pub search: SearchConfig,
    pub result: SearchResult,
    pub baseline_validation: EvalReport,
    pub baseline_test: EvalReport,
    pub validation: EvalReport,
    pub test: EvalReport,
}

fn report(
    model: &TransformerModel,
    plan: &InterventionPlan,
    samples: &[QASample],
    eval: &EvalConfig,
    split: (&str, u64),
    model_hash: &str,
) -> Result<EvalReport> {
    let view = crate::laser::apply_plan(model, plan)?;
    let records = score_samples(&view, samples, eval)?;
    Ok(EvalReport {
        metadata: ReportMetadata {
            plan: plan.clone(),
            model_hash: model_hash.to_owned(),
            eval: *eval,
            split: Some(split.0.to_owned()),
            split_seed: Some(split.1),
            config_hash: None,
            seed: None,
        },
        aggregates: Aggregates::from_records(&records, eval)?,
        samples: records,
    })
}

fn run(
    strategy: &str,
    model: &TransformerModel,
    data: &DatasetSplit,
    cfg: &SearchConfig,
    eval: &EvalConfig,
) -> Result<SearchOutcome> {
    let scorer = DatasetScorer {
        samples: &data.validation,
        eval: *eval,
        objective: cfg.objective,
    };
    let result = match strategy {
        "single_step" => search_single_step(model, cfg, &scorer)?,
        _ => search_greedy(model, cfg, &scorer)?,
    };
    let hash = model.baseline().content_hash();
    let empty = InterventionPlan::empty();
    let val = ("validation", data.seed);
    let test = ("test", data.seed);
    Ok(SearchOutcome {
        strategy: strategy.to_owned(),
        search: cfg.clone(),
        baseline_validation: report(model, &empty, &data.validation, eval, val, &hash)?,
        baseline_test: report(model, &empty, &data.test, eval, test, &hash)?,
        validation: report(model, &result.plan, &data.validation, eval, val, &hash)?,
        test: report(model, &result.plan, &data.test, eval, test, &hash)?,
        result,
    })
}

/// Single-step search on the validation split, reported on both splits.
pub fn single_step_search(
    model: &TransformerModel,
    data: &DatasetSplit,
    cfg: &SearchConfig,
    eval: &EvalConfig,
) -> Result<SearchOutcome> {
    run("single_step", model, data, cfg, eval)
}

/// Greedy composition on the validation split, reported on both splits.
pub fn greedy_compose_search(
    model: &TransformerModel,
    data: &DatasetSplit,
    cfg: &SearchConfig,
    eval: &EvalConfig,
) -> Result<SearchOutcome> {
    run("greedy", model, data, cfg, eval)
}
