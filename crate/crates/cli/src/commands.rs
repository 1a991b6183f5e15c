// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use laser_core::analysis::{
    corpus_cooccurrence, corpus_tokens, default_bin_edges, flip_sets, frequency_binned_boost,
    higher_order_study, layer_sweep, load_corpus, monotonicity_audit, most_frequent_tokens,
    DEFAULT_FRACTIONS, DEFAULT_GENERIC_TOKENS,
};
use laser_core::container::{load_model, LtcFile};
use laser_core::eval::{evaluate, load_dataset, split, EvalReport, QASample};
use laser_core::laser::{
    apply_plan, greedy_compose_search, single_step_search, InterventionPlan, InterventionSpec,
    SearchOutcome,
};
use laser_core::tensor::{effective_rank, numerical_rank, spectral_norm};
use laser_core::transformer::{sliding_window_perplexity, Slot, TokenId, TransformerModel};
use serde_json::json;

use crate::config::RunConfig;
use crate::output::{Outputs, RunInfo};

#[derive(Debug, Clone, Default, Args)]
pub struct PlanArgs {
    /// JSON plan file: `[{"tau": "u_in", "layer": 1, "rho": 0.01}, ...]`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// One intervention as `[tau, layer, rho]`; repeatable.
    #[arg(long = "spec")]
    pub specs: Vec<String>,
}

impl PlanArgs {
    fn load(&self) -> Result<InterventionPlan> {
        let mut steps = Vec::new();
        if let Some(path) = &self.plan {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading plan {}", path.display()))?;
            steps = InterventionPlan::from_json(&text)
                .with_context(|| format!("parsing plan {}", path.display()))?
                .steps;
        }
        for s in &self.specs {
            steps.push(InterventionSpec::parse_triple(s)?);
        }
        Ok(InterventionPlan::new(steps)?)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct AnalyzeArgs {
    /// Report of the unmodified model.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Report of the intervened model; its plan drives the model-based studies.
    #[arg(long)]
    pub intervened: PathBuf,
    /// Frequency bin edges.
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<u64>>,
    /// Fractions of top components removed in the higher-order study.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Size of the generic-token list.
    #[arg(long)]
    pub generic_tokens: Option<usize>,
    /// Also run a full layer sweep over the search grid.
    #[arg(long)]
    pub sweep: bool,
}

fn outputs(
    cfg: &RunConfig,
    command: &'static str,
    extra: serde_json::Value,
    model_hash: Option<String>,
) -> Result<Outputs> {
    Outputs::new(
        cfg.out()?,
        RunInfo {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(&extra)?,
            model_hash,
            seed: cfg.seed(),
        },
    )
}

fn load(cfg: &RunConfig) -> Result<TransformerModel> {
    let path = cfg.model()?;
    let model = load_model(path).with_context(|| format!("loading {}", path.display()))?;
    log::info!(
        "loaded {} ({} layers, d = {})",
        path.display(),
        model.config().num_layers,
        model.config().hidden_dim
    );
    Ok(model)
}

fn samples(cfg: &RunConfig) -> Result<Vec<QASample>> {
    let path = cfg.dataset()?;
    let samples = load_dataset(path, cfg.template())?;
    log::info!("{} samples from {}", samples.len(), path.display());
    Ok(samples)
}

pub fn apply(cfg: &RunConfig, plan_args: &PlanArgs) -> Result<()> {
    let plan = plan_args.load()?;
    let source = LtcFile::read(cfg.model()?)?;
    let model = source.to_model()?;
    let model_hash = model.content_hash();
    let out = outputs(
        cfg,
        "apply",
        json!({ "plan": plan }),
        Some(model_hash.clone()),
    )?;
    log::info!("applying {} intervention(s)", plan.len());
    let view = apply_plan(&model, &plan)?;

    let mut ltc = LtcFile::from_model(&view, source.fidelity);
    ltc.metadata = source.metadata.clone();
    ltc.metadata
        .insert("plan".into(), serde_json::to_value(&plan)?);
    ltc.metadata
        .insert("source_model_hash".into(), model_hash.into());
    ltc.metadata
        .insert("config_hash".into(), out.run.config_hash.clone().into());
    ltc.metadata.insert("seed".into(), cfg.seed().into());
    out.bytes("model.ltc", &ltc.encode()?)?;

    if cfg.dataset.is_none() {
        return Ok(());
    }
    let data = samples(cfg)?;
    let eval = cfg.eval()?;
    let corpus = match cfg.corpus()? {
        Some(path) => Some(corpus_tokens(&load_corpus(path)?)),
        None => None,
    };
    let stride = cfg
        .perplexity_stride
        .unwrap_or((model.config().max_context / 2).max(1));
    for (stem, m, p) in [
        ("baseline_report", &model, InterventionPlan::empty()),
        ("report", &view, plan.clone()),
    ] {
        let mut report = evaluate(m, &data, &eval)?;
        report.metadata.plan = p;
        if let Some(tokens) = &corpus {
            report.aggregates.perplexity = Some(sliding_window_perplexity(m, tokens, stride)?);
        }
        log::info!(
            "{stem}: accuracy {:.4}, mean loss {:.4}",
            report.aggregates.accuracy,
            report.aggregates.mean_loss
        );
        out.report(stem, &mut report)?;
    }
    Ok(())
}

fn search_common(cfg: &RunConfig, strategy: &'static str) -> Result<()> {
    let model = load(cfg)?;
    let data = samples(cfg)?;
    let parts = split(&data, cfg.seed())?;
    log::info!(
        "split seed {}: {} validation / {} test",
        parts.seed,
        parts.validation.len(),
        parts.test.len()
    );
    let search = cfg.search();
    let eval = cfg.eval()?;
    let out = outputs(
        cfg,
        strategy,
        json!({ "strategy": strategy }),
        Some(model.content_hash()),
    )?;
    let mut outcome: SearchOutcome = match strategy {
        "search" => single_step_search(&model, &parts, &search, &eval)?,
        _ => greedy_compose_search(&model, &parts, &search, &eval)?,
    };
    for c in &outcome.result.candidates {
        log::info!(
            "candidate {} objective {:.6}{}",
            c.plan.to_json(),
            c.objective,
            if c.accepted { " (accepted)" } else { "" }
        );
    }
    let r = &outcome.result;
    log::info!(
        "winner {} validation {:.6} (baseline {:.6}); test accuracy {:.4} (baseline {:.4})",
        r.plan.to_json(),
        r.best_objective,
        r.baseline_objective,
        outcome.test.aggregates.accuracy,
        outcome.baseline_test.aggregates.accuracy
    );
    out.bytes("plan.json", format!("{}\n", r.plan.to_json()).as_bytes())?;
    out.json(
        "search.json",
        &json!({
            "strategy": outcome.strategy,
            "search": outcome.search,
            "eval": eval,
            "split_seed": parts.seed,
            "result": outcome.result,
        }),
    )?;
    out.report("validation_report", &mut outcome.validation)?;
    out.report("test_report", &mut outcome.test)?;
    out.report(
        "baseline_validation_report",
        &mut outcome.baseline_validation,
    )?;
    out.report("baseline_test_report", &mut outcome.baseline_test)?;
    Ok(())
}

pub fn search(cfg: &RunConfig) -> Result<()> {
    search_common(cfg, "search")
}

pub fn compose(cfg: &RunConfig) -> Result<()> {
    search_common(cfg, "compose")
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
}

pub fn analyze(cfg: &RunConfig, args: &AnalyzeArgs) -> Result<()> {
    let baseline = read_report(&args.baseline)?;
    let intervened = read_report(&args.intervened)?;
    let plan = intervened.metadata.plan.clone();
    let extra = json!({
        "plan": plan,
        "bins": args.bins,
        "fractions": args.fractions,
        "generic_tokens": args.generic_tokens,
        "sweep": args.sweep,
    });
    let out = outputs(
        cfg,
        "analyze",
        extra,
        Some(baseline.metadata.model_hash.clone()),
    )?;

    let flips = flip_sets(&baseline, &intervened)?;
    log::info!(
        "flip sets: {} corrected, {} broken, {} kept, {} never correct",
        flips.answer_corrected.len(),
        flips.answer_broken.len(),
        flips.originally_correct.len(),
        flips.never_correct.len()
    );
    out.json("flip_sets.json", &flips)?;

    // samples covered by the reports, in dataset order
    let ids: BTreeSet<&str> = baseline.samples.iter().map(|s| s.id.as_str()).collect();
    let data: Option<Vec<QASample>> = match cfg.dataset {
        Some(_) => Some(
            samples(cfg)?
                .into_iter()
                .filter(|s| ids.contains(s.id.as_str()))
                .collect(),
        ),
        None => None,
    };
    let docs = match cfg.corpus()? {
        Some(p) => Some(load_corpus(p)?),
        None => None,
    };

    let frequencies: Option<BTreeMap<String, u64>> = match (&data, &docs) {
        (Some(d), Some(docs)) => {
            let co = corpus_cooccurrence(docs, d);
            out.json("cooccurrence.json", &co)?;
            (co.skipped.is_empty()).then_some(co.counts)
        }
        (Some(d), None) => d
            .iter()
            .map(|s| s.frequency.map(|f| (s.id.clone(), f)))
            .collect(),
        _ => None,
    };
    match frequencies {
        Some(freq) if freq.len() == ids.len() => {
            let edges = match &args.bins {
                Some(b) => b.clone(),
                None => default_bin_edges(freq.values().copied().max().unwrap_or(0)),
            };
            let bins = frequency_binned_boost(&baseline, &intervened, &freq, &edges)?;
            out.json("frequency_bins.json", &bins)?;
            out.csv("frequency_bins.csv", &bins.to_csv())?;
        }
        _ => log::warn!("frequencies unavailable for some samples; skipping frequency binning"),
    }

    let (Some(data), Some(_)) = (&data, &cfg.model) else {
        log::warn!("no --model/--dataset; skipping model-based studies");
        return Ok(());
    };
    let model = load(cfg)?;
    if model.content_hash() != baseline.metadata.model_hash {
        log::warn!("model hash differs from the one recorded in the baseline report");
    }
    let eval = intervened.metadata.eval;

    if let Some(first) = plan.steps.first() {
        let slot = first.slot();
        let mut grid = cfg.search().rho_ascending();
        grid.reverse();
        let family: Vec<InterventionSpec> = grid
            .into_iter()
            .map(|rho| InterventionSpec::new(slot.tau, slot.layer, rho).with_method(first.method))
            .collect();
        let audit = monotonicity_audit(&model, data, &family, &eval)?;
        log::info!(
            "monotonicity audit on {}/{}: {} violation(s)",
            slot.tau,
            slot.layer,
            audit.violations
        );
        out.json("monotonicity.json", &audit)?;

        let corrected: Vec<QASample> = data
            .iter()
            .filter(|s| flips.answer_corrected.contains(&s.id))
            .cloned()
            .collect();
        if corrected.is_empty() {
            log::warn!("no answer-corrected samples; skipping higher-order study");
        } else {
            let tokens: Vec<TokenId> = match &docs {
                Some(d) => corpus_tokens(d),
                None => data.iter().flat_map(|s| s.prompt_ids()).collect(),
            };
            let generic = most_frequent_tokens(
                &tokens,
                args.generic_tokens.unwrap_or(DEFAULT_GENERIC_TOKENS),
            );
            let fractions = args
                .fractions
                .clone()
                .unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
            let study = higher_order_study(
                &model,
                &corrected,
                Slot::new(slot.tau, slot.layer),
                &fractions,
                &generic,
            )?;
            out.json("higher_order.json", &study)?;
            out.csv("higher_order.csv", &study.to_csv())?;
        }
    } else {
        log::warn!(
            "intervened report has an empty plan; skipping monotonicity and higher-order studies"
        );
    }

    if args.sweep {
        let sweep = layer_sweep(&model, data, &cfg.search(), &eval)?;
        out.json("sweep.json", &sweep)?;
        out.csv("sweep.csv", &sweep.to_csv())?;
    }
    Ok(())
}

pub fn effective_rank_table(model: &TransformerModel) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "tau",
        "layer",
        "rows",
        "cols",
        "effective_rank",
        "numerical_rank",
        "spectral_norm",
    ])?;
    for slot in model.slots() {
        let m = model.weight(slot)?;
        let er = match effective_rank(m) {
            Ok(v) => v.to_string(),
            Err(_) => String::new(),
        };
        w.write_record([
            slot.tau.to_string(),
            slot.layer.to_string(),
            m.rows().to_string(),
            m.cols().to_string(),
            er,
            numerical_rank(m)?.to_string(),
            spectral_norm(m)?.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn effective_rank_cmd(cfg: &RunConfig) -> Result<()> {
    let model = load(cfg)?;
    let out = outputs(
        cfg,
        "effective-rank",
        serde_json::Value::Null,
        Some(model.content_hash()),
    )?;
    out.csv("effective_rank.csv", &effective_rank_table(&model)?)
}
