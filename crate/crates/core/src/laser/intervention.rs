// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LaserError, Result};
use crate::parallel::*;
use crate::tensor::{high_order_from, low_rank_from, svd, Matrix, SvdFactorization};
use crate::transformer::{MatrixType, Slot, TransformerModel};

/// Slack added before flooring `rho · n` so that products such as
/// `0.29 · 100 = 28.999999999999996` land on the intended integer.
const FLOOR_SLACK: f64 = 1e-9;

/// How the selected matrix is replaced.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Keep the `⌊ρ·min(m,n)⌋` largest singular components.
    #[default]
    SvdTruncate,
    /// Drop the `⌊ρ·min(m,n)⌋` largest singular components, keep the rest.
    HighOrderKeep,
    /// Zero the smallest-magnitude `1 − ρ` fraction of entries.
    MagnitudePrune,
    /// Replace the matrix with zeros.
    RemoveLayer,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SvdTruncate => "svd_truncate",
            Method::HighOrderKeep => "high_order_keep",
            Method::MagnitudePrune => "magnitude_prune",
            Method::RemoveLayer => "remove_layer",
        }
    }

    fn uses_svd(self) -> bool {
        matches!(self, Method::SvdTruncate | Method::HighOrderKeep)
    }
}

impl std::str::FromStr for Method {
    type Err = LaserError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "svd_truncate" | "svd" => Ok(Method::SvdTruncate),
            "high_order_keep" => Ok(Method::HighOrderKeep),
            "magnitude_prune" => Ok(Method::MagnitudePrune),
            "remove_layer" => Ok(Method::RemoveLayer),
            other => Err(LaserError::invalid(format!(
                "unknown intervention method {other:?}"
            ))),
        }
    }
}

/// One `(tau, layer, rho)` intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub tau: MatrixType,
    pub layer: usize,
    pub rho: f64,
    #[serde(default)]
    pub method: Method,
}

impl InterventionSpec {
    pub fn new(tau: MatrixType, layer: usize, rho: f64) -> Self {
        Self {
            tau,
            layer,
            rho,
            method: Method::SvdTruncate,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn slot(&self) -> Slot {
        Slot::new(self.tau, self.layer)
    }

    /// Parses the bracketed triple notation `[U_in, 27, 0.01]`.
    pub fn parse_triple(text: &str) -> Result<Self> {
        let inner = text
            .trim()
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(|| {
                LaserError::invalid(format!("expected [tau, layer, rho], got {text:?}"))
            })?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(LaserError::invalid(format!(
                "expected three fields in {text:?}, found {}",
                parts.len()
            )));
        }
        let tau = parts[0].parse()?;
        let layer = parts[1]
            .parse()
            .map_err(|e| LaserError::invalid(format!("bad layer {:?}: {e}", parts[1])))?;
        let rho = parts[2]
            .parse()
            .map_err(|e| LaserError::invalid(format!("bad rho {:?}: {e}", parts[2])))?;
        Ok(Self::new(tau, layer, rho))
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.layer >= num_layers {
            return Err(LaserError::invalid(format!(
                "layer {} out of range for a {num_layers}-layer model",
                self.layer
            )));
        }
        check_rho(self.rho)
    }
}

impl fmt::Display for InterventionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.tau, self.layer, self.rho)?;
        if self.method != Method::SvdTruncate {
            write!(f, " ({})", self.method.as_str())?;
        }
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(LaserError::invalid(format!(
            "rho = {rho} must lie in [0, 1)"
        )));
    }
    Ok(())
}

/// `⌊rho · min(m, n)⌋`.
pub fn target_rank(shape: (usize, usize), rho: f64) -> Result<usize> {
    check_rho(rho)?;
    let max_rank = shape.0.min(shape.1);
    let r = (rho * max_rank as f64 + FLOOR_SLACK).floor() as usize;
    // rho < 1 keeps the true floor below max_rank; the slack must not cross it.
    Ok(r.min(max_rank.saturating_sub(1)))
}

/// Zeros the `⌊fraction · m · n⌋` entries of smallest magnitude; ties go to
/// the earlier row-major position.
pub fn magnitude_prune(w: &Matrix, fraction: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(LaserError::invalid(format!(
            "prune fraction {fraction} must lie in [0, 1]"
        )));
    }
    let total = w.rows() * w.cols();
    let count = ((fraction * total as f64 + FLOOR_SLACK).floor() as usize).min(total);
    let values = w.as_slice();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut data = values.to_vec();
    for &i in &order[..count] {
        data[i] = 0.0;
    }
    Ok(Matrix::new(w.rows(), w.cols(), data).expect("pruning keeps entries finite"))
}

/// The replacement for `w` under `spec`. `factors`, when given, must be the
/// SVD of `w`.
pub fn intervened_matrix(
    w: &Matrix,
    spec: &InterventionSpec,
    factors: Option<&SvdFactorization>,
) -> Result<Matrix> {
    check_rho(spec.rho)?;
    let r = target_rank(w.shape(), spec.rho)?;
    match spec.method {
        Method::SvdTruncate | Method::HighOrderKeep => {
            if spec.method == Method::SvdTruncate && r == 0 {
                return Ok(Matrix::zeros(w.rows(), w.cols()));
            }
            let owned;
            let f = match factors {
                Some(f) => f,
                None => {
                    owned = svd(w)?;
                    &owned
                }
            };
            match spec.method {
                Method::SvdTruncate => low_rank_from(f, r),
                _ => high_order_from(f, r),
            }
        }
        Method::MagnitudePrune => magnitude_prune(w, 1.0 - spec.rho),
        Method::RemoveLayer => Ok(Matrix::zeros(w.rows(), w.cols())),
    }
}

/// A new model view with `spec` applied to its current `(tau, layer)` matrix.
pub fn apply_intervention(
    model: &TransformerModel,
    spec: &InterventionSpec,
) -> Result<TransformerModel> {
    apply_with_cache(model, spec, None)
}

fn apply_with_cache(
    model: &TransformerModel,
    spec: &InterventionSpec,
    cache: Option<&FactorCache>,
) -> Result<TransformerModel> {
    spec.validate(model.config().num_layers)?;
    let slot = spec.slot();
    let w = model.weight(slot)?;
    // Cached factors describe baseline weights only.
    let factors = cache
        .filter(|_| !model.overrides().contains_key(&slot))
        .and_then(|c| c.get(slot));
    let replacement = intervened_matrix(w, spec, factors)?;
    model.with_override(slot, replacement)
}

/// An ordered set of interventions on distinct slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InterventionPlan {
    pub steps: Vec<InterventionSpec>,
}

impl InterventionPlan {
    pub fn new(steps: Vec<InterventionSpec>) -> Result<Self> {
        let plan = Self { steps };
        plan.check_distinct()?;
        Ok(plan)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    fn check_distinct(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.steps {
            if !seen.insert(s.slot()) {
                return Err(LaserError::invalid(format!(
                    "plan touches {}/{} more than once",
                    s.tau, s.layer
                )));
            }
        }
        Ok(())
    }

    /// A copy with `spec` appended.
    pub fn with_step(&self, spec: InterventionSpec) -> Result<Self> {
        let mut steps = self.steps.clone();
        steps.push(spec);
        Self::new(steps)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.check_distinct()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plans serialize")
    }
}

/// Folds [`apply_intervention`] over the plan's steps.
pub fn apply_plan(model: &TransformerModel, plan: &InterventionPlan) -> Result<TransformerModel> {
    apply_plan_cached(model, plan, None)
}

pub fn apply_plan_cached(
    model: &TransformerModel,
    plan: &InterventionPlan,
    cache: Option<&FactorCache>,
) -> Result<TransformerModel> {
    plan.check_distinct()?;
    let mut current = model.clone();
    for spec in &plan.steps {
        current = apply_with_cache(&current, spec, cache)?;
    }
    Ok(current)
}

/// SVDs of baseline matrices, computed once and shared by every candidate
/// that touches the same slot.
#[derive(Debug, Clone, Default)]
pub struct FactorCache {
    factors: BTreeMap<Slot, Arc<SvdFactorization>>,
}

impl FactorCache {
    /// Factorizes the baseline matrix of every slot in `slots` (in parallel)
    /// for the methods that need it.
    pub fn build(model: &TransformerModel, slots: &[Slot], method: Method) -> Result<Self> {
        if !method.uses_svd() {
            return Ok(Self::default());
        }
        let unique: Vec<Slot> = slots
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let factors: Vec<(Slot, Arc<SvdFactorization>)> = unique
            .par_iter()
            .map(|&slot| Ok((slot, Arc::new(svd(model.baseline_weight(slot)?)?))))
            .collect::<Result<_>>()?;
        Ok(Self {
            factors: factors.into_iter().collect(),
        })
    }

    pub fn get(&self, slot: Slot) -> Option<&SvdFactorization> {
        self.factors.get(&slot).map(Arc::as_ref)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}
