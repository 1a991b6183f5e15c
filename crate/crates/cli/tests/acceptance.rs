// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//!     cargo test --release -p laser-cli --test acceptance

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use laser_core::analysis::{
    corpus_cooccurrence, count_violations, flip_sets, higher_order_study, monotonicity_audit,
};
use laser_core::container::{load_model, Fidelity, LtcFile};
use laser_core::eval::{
    classification_accuracy, generation_matches, load_dataset, split, Aggregates, Content,
    EvalConfig, EvalReport, Metric, SampleRecord, Template,
};
use laser_core::laser::{
    apply_plan, greedy_compose_search, search_greedy, DatasetScorer, InterventionPlan,
    InterventionSpec, Objective, SearchConfig, DEFAULT_RHO_GRID,
};
use laser_core::parallel::with_threads;
use laser_core::tensor::{
    effective_rank, high_order_from, low_rank_from, numerical_rank, svd, Matrix,
};
use laser_core::transformer::{
    argmax_token, forward, sliding_window_perplexity, ByteTokenizer, MatrixType, Slot,
    TransformerModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use support::{
    exhaustive_greedy, fixture, naive_log_probs, orthonormality_error, perplexity_oracle,
    random_ids_dataset, singular_values_oracle, small_config, spectral_norm_oracle,
};

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn toy() -> Result<TransformerModel, String> {
    ok(load_model(&fixture("model.ltc")))
}

fn svd_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut elapsed = Duration::ZERO;
    let (mut worst_rec, mut worst_orth, mut worst_ey) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..200 {
        let (m, n) = if i == 0 {
            (256, 512)
        } else {
            let (a, b) = (rng.gen_range(1..=256), rng.gen_range(1..=512));
            if rng.gen_bool(0.5) {
                (a, b)
            } else {
                (b, a)
            }
        };
        let w = Matrix::random(m, n, 10_000 + i);
        let start = Instant::now();
        let f = ok(svd(&w))?;
        elapsed += start.elapsed();

        worst_rec = worst_rec.max(ok(f.reconstruct().relative_frobenius_error(&w))?);
        worst_orth = worst_orth
            .max(orthonormality_error(&f.u))
            .max(orthonormality_error(&f.v));
        let sigma = singular_values_oracle(&w);
        let k = sigma.len();
        let mut ranks = vec![0, k / 4, k / 2, 3 * k / 4, k.saturating_sub(1)];
        ranks.dedup();
        for r in ranks {
            let residual = ok(w.sub(&ok(low_rank_from(&f, r))?))?;
            let err = (spectral_norm_oracle(&residual) - sigma[r]).abs();
            worst_ey = worst_ey.max(err);
        }
    }
    ensure!(worst_rec <= 1e-5, "reconstruction error {worst_rec:e}");
    ensure!(worst_orth <= 1e-6, "orthonormality error {worst_orth:e}");
    ensure!(worst_ey <= 1e-6, "Eckart-Young error {worst_ey:e}");
    ensure!(elapsed < Duration::from_secs(60), "SVD time {elapsed:?}");
    Ok(format!(
        "200 matrices, rec {worst_rec:.1e}, orth {worst_orth:.1e}, spectral {worst_ey:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn complement_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (m, n) = (rng.gen_range(1..=96), rng.gen_range(1..=96));
        let w = Matrix::random(m, n, 500 + i);
        let f = ok(svd(&w))?;
        let r = rng.gen_range(0..=w.min_dim());
        let sum = ok(ok(low_rank_from(&f, r))?.add(&ok(high_order_from(&f, r))?))?;
        worst = worst.max(ok(sum.relative_frobenius_error(&w))?);
    }
    ensure!(worst <= 1e-8, "relative error {worst:e}");
    Ok(format!("100 matrices, worst {worst:.1e}"))
}

fn effective_rank_cases() -> Check {
    for n in 1..=16 {
        let e = ok(effective_rank(&Matrix::identity(n)))?;
        ensure!((e - n as f64).abs() <= 1e-9, "identity_{n} -> {e}");
    }
    let rank_one = Matrix::outer(&[1.0, -2.0, 0.5], &[3.0, 1.0, 4.0, 1.0]);
    let e1 = ok(effective_rank(&rank_one))?;
    ensure!((e1 - 1.0).abs() <= 1e-9, "rank-1 -> {e1}");
    let e = ok(effective_rank(&Matrix::from_diagonal(&[2.0, 1.0, 1.0])))?;
    ensure!((e - 2.828427).abs() <= 1e-6, "diag(2,1,1) -> {e}");
    Ok(format!(
        "identity 1..16, rank-1 {e1:.12}, diag(2,1,1) {e:.6}"
    ))
}

fn forward_oracle() -> Check {
    let model = toy()?;
    ensure!(model.config().num_layers == 2, "toy model is not 2-layer");
    let t = model.config().max_context;
    let v = model.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut worst, mut worst_norm) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let len = rng.gen_range(1..=t);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
        let ours = ok(forward(&model, &tokens))?;
        for (i, row) in naive_log_probs(&model, &tokens).iter().enumerate() {
            let total: f64 = ours.row(i).iter().map(|lp| lp.exp()).sum();
            worst_norm = worst_norm.max((total - 1.0).abs());
            for (j, x) in row.iter().enumerate() {
                worst = worst.max((ours[(i, j)] - x).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:e}");
    ensure!(worst_norm <= 1e-6, "softmax rows off by {worst_norm:e}");

    let tokens: Vec<u32> = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
    let base = ok(forward(&model, &tokens))?;
    for cut in [1, t / 3, t / 2, t - 1] {
        let mut other = tokens.clone();
        for x in &mut other[cut..] {
            *x = (*x + 1) % v as u32;
        }
        let out = ok(forward(&model, &other))?;
        ensure!(
            (0..cut).all(|i| out.row(i) == base.row(i)),
            "prefix changed after cut {cut}"
        );
    }

    let zero = ok(TransformerModel::zeros(model.config().clone()))?;
    let target: Vec<u32> = tokens[1..].to_vec();
    let lps = ok(laser_core::transformer::target_log_probs(
        &zero,
        &tokens[..1],
        &target,
    ))?;
    let worst_zero = lps
        .iter()
        .map(|lp| (-lp - (v as f64).ln()).abs())
        .fold(0.0, f64::max);
    ensure!(
        worst_zero <= 1e-9,
        "zero model loss off ln V by {worst_zero:e}"
    );
    Ok(format!(
        "20 prompts, max dev {worst:.1e}, norm {worst_norm:.1e}, zero-model {worst_zero:.1e}"
    ))
}

fn corpus_ids(n: usize) -> Result<Vec<u32>, String> {
    let docs = ok(laser_core::analysis::load_corpus(&fixture("corpus.jsonl")))?;
    let ids = laser_core::analysis::corpus_tokens(&docs);
    ensure!(ids.len() >= n, "corpus too short");
    Ok(ids[..n].to_vec())
}

fn perplexity() -> Check {
    let model = toy()?;
    let t = model.config().max_context;
    let single = corpus_ids(t)?;
    let lp = naive_log_probs(&model, &single);
    let nll: f64 = (1..t).map(|i| -lp[i - 1][single[i] as usize]).sum();
    let expected = (nll / (t - 1) as f64).exp();
    let mut worst_single = 0.0f64;
    for stride in [1, t / 2, t] {
        let got = ok(sliding_window_perplexity(&model, &single, stride))?;
        worst_single = worst_single.max((got - expected).abs());
    }
    ensure!(
        worst_single <= 1e-9,
        "single window off by {worst_single:e}"
    );

    let corpus = corpus_ids(2 * t)?;
    let mut worst = 0.0f64;
    for stride in [1, 7, t / 4, t / 2, t - 1, t] {
        let got = ok(sliding_window_perplexity(&model, &corpus, stride))?;
        worst = worst.max((got - perplexity_oracle(&model, &corpus, stride)).abs());
    }
    ensure!(worst <= 1e-9, "strided perplexity off by {worst:e}");
    Ok(format!(
        "single {worst_single:.1e}, strided ({} tokens) {worst:.1e}",
        2 * t
    ))
}

fn intervention_suite() -> Check {
    let model = toy()?;
    let slots: Vec<Slot> = model.slots().collect();
    let mut worst_idem = 0.0f64;
    for &slot in &slots {
        let w = ok(model.weight(slot))?.clone();
        for &rho in &DEFAULT_RHO_GRID {
            let plan = ok(InterventionPlan::new(vec![InterventionSpec::new(
                slot.tau, slot.layer, rho,
            )]))?;
            let once = ok(apply_plan(&model, &plan))?;
            let reduced = ok(once.weight(slot))?;
            let bound = (rho * w.min_dim() as f64).floor() as usize;
            let rank = ok(numerical_rank(reduced))?;
            ensure!(rank <= bound, "{slot:?} rho {rho}: rank {rank} > {bound}");
            let twice = ok(apply_plan(&once, &plan))?;
            let drift = ok(ok(twice.weight(slot))?.relative_frobenius_error(reduced))?;
            worst_idem = worst_idem.max(drift);
        }
        let plan = ok(InterventionPlan::new(vec![InterventionSpec::new(
            slot.tau, slot.layer, 0.0,
        )]))?;
        let zeroed = ok(apply_plan(&model, &plan))?;
        ensure!(
            ok(zeroed.weight(slot))?.max_abs() == 0.0,
            "{slot:?} rho 0 not zero"
        );
    }
    ensure!(worst_idem <= 1e-6, "idempotence drift {worst_idem:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut chosen = slots.clone();
        chosen.retain(|_| rng.gen_bool(0.5));
        let steps: Vec<_> = chosen
            .iter()
            .map(|s| InterventionSpec::new(s.tau, s.layer, DEFAULT_RHO_GRID[rng.gen_range(0..7)]))
            .collect();
        let mut shuffled = steps.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let bytes = |steps: Vec<InterventionSpec>| -> Result<Vec<u8>, String> {
            let view = ok(apply_plan(&model, &ok(InterventionPlan::new(steps))?))?;
            ok(LtcFile::from_model(&view, Fidelity::Full).encode())
        };
        ensure!(
            bytes(steps)? == bytes(shuffled)?,
            "permuted plan changed the weights"
        );
    }
    Ok(format!(
        "{} slots x {} rho, idempotence {worst_idem:.1e}, 5 permutations",
        slots.len(),
        DEFAULT_RHO_GRID.len()
    ))
}

fn full_grid(objective: Objective) -> SearchConfig {
    SearchConfig {
        rho_grid: DEFAULT_RHO_GRID.to_vec(),
        tau_set: MatrixType::ALL.to_vec(),
        layers: None,
        objective,
        method: Default::default(),
    }
}

fn search_suite() -> Check {
    let eval = EvalConfig::new(Metric::Generation { max_tokens: 1 });
    for seed in 0..10u64 {
        let model = ok(TransformerModel::random(small_config(2, 12, 8), 300 + seed))?;
        let data = ok(split(&random_ids_dataset(seed, 25, 12), seed))?;
        let objective = if seed % 2 == 0 {
            Objective::Accuracy
        } else {
            Objective::NegLoss
        };
        let out = ok(greedy_compose_search(
            &model,
            &data,
            &full_grid(objective),
            &eval,
        ))?;
        ensure!(
            out.result.best_objective >= out.result.baseline_objective,
            "seed {seed}: winner below baseline"
        );
    }

    let model = ok(TransformerModel::random(small_config(2, 12, 8), 1))?;
    let samples = random_ids_dataset(51, 16, 12);
    let cfg = full_grid(Objective::NegLoss);
    let scorer = DatasetScorer {
        samples: &samples,
        eval,
        objective: cfg.objective,
    };
    let greedy = ok(search_greedy(&model, &cfg, &scorer))?;
    let (plan, best) = exhaustive_greedy(&model, &cfg, &samples, &eval);
    ensure!(
        greedy.plan == plan && greedy.best_objective == best,
        "greedy disagrees with enumeration"
    );

    let data = ok(split(&random_ids_dataset(77, 30, 12), 3))?;
    let runs: Vec<String> = [1, 4, 8]
        .into_iter()
        .map(|n| {
            with_threads(n, || {
                greedy_compose_search(&model, &data, &cfg, &eval)
                    .map(|o| serde_json::to_string(&o).unwrap())
                    .unwrap_or_default()
            })
        })
        .collect();
    ensure!(
        !runs[0].is_empty() && runs.iter().all(|r| r == &runs[0]),
        "thread count changed the outcome"
    );

    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_laser"))
        .current_dir(repo_root())
        .args([
            "-q",
            "compose",
            "--model",
            "fixtures/toy/model.ltc",
            "--dataset",
            "fixtures/toy/facts.jsonl",
            "--out",
        ])
        .arg(out.path())
        .status()
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure!(status.success(), "compose exited with {status}");
    ensure!(took < Duration::from_secs(300), "compose took {took:?}");
    ensure!(
        out.path().join("plan.json").exists(),
        "compose wrote no plan"
    );
    Ok(format!(
        "dominance 10/10, greedy plan of {} steps matches enumeration, 1/4/8 threads agree, compose {:.1}s",
        plan.len(),
        took.as_secs_f64()
    ))
}

fn record(id: &str, correct: bool) -> SampleRecord {
    serde_json::from_value(serde_json::json!({"id": id, "correct": correct, "loss": 0.5})).unwrap()
}

fn report_of(flags: &[bool]) -> EvalReport {
    let samples: Vec<_> = flags
        .iter()
        .enumerate()
        .map(|(i, &c)| record(&format!("q{i:03}"), c))
        .collect();
    let eval = EvalConfig::default();
    EvalReport {
        metadata: serde_json::from_value(
            serde_json::json!({"plan": [], "model_hash": "", "eval": eval}),
        )
        .unwrap(),
        aggregates: Aggregates::from_records(&samples, &eval).unwrap(),
        samples,
    }
}

fn metrics_suite() -> Check {
    let text = |s: &str| Content::Text(s.into());
    let gen = |s: &str| ByteTokenizer.encode(s);
    for (answer, generated, expected) in [
        ("Paris", " paris, of course", true),
        ("  PARIS\n", "Paris", true),
        ("New York", "it is new york.", true),
        ("Paris", "Pari s", false),
        ("Rome", "", false),
    ] {
        ensure!(
            generation_matches(&text(answer), &gen(generated)) == expected,
            "generation match {answer:?} in {generated:?}"
        );
    }

    let zero = ok(TransformerModel::zeros(small_config(1, 9, 6)))?;
    let out = ok(classification_accuracy(
        &zero,
        &[4],
        &[vec![1], vec![2]],
        1,
        false,
    ))?;
    ensure!(!out.correct && out.predicted == 0, "tie counted as correct");

    let s = ok(split(&random_ids_dataset(0, 13, 5), 11))?;
    ensure!(
        (s.validation.len(), s.test.len()) == (3, 10),
        "split 13 -> {}/{}",
        s.validation.len(),
        s.test.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let flags: Vec<bool> = (0..rng.gen_range(1..300))
            .map(|_| rng.gen_bool(0.37))
            .collect();
        let agg = report_of(&flags).aggregates;
        let mean = flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64;
        worst = worst.max((agg.accuracy - mean).abs());
    }
    ensure!(worst <= 1e-12, "aggregate off by {worst:e}");
    Ok("5 normalization cases, tie -> incorrect, split 13 -> 3/10, aggregate = mean".into())
}

fn analysis_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.gen_range(1..80);
        let before: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let after: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let f = ok(flip_sets(&report_of(&before), &report_of(&after)))?;
        let sets = [
            &f.originally_correct,
            &f.answer_corrected,
            &f.answer_broken,
            &f.never_correct,
        ];
        ensure!(
            sets.iter().map(|s| s.len()).sum::<usize>() == n,
            "flip sets do not cover the ids"
        );
        for i in 0..n {
            let id = format!("q{i:03}");
            ensure!(
                sets.iter().filter(|s| s.contains(&id)).count() == 1,
                "{id} not in exactly one set"
            );
        }
        let expected = before
            .iter()
            .zip(&after)
            .filter(|(b, a)| !**b && **a)
            .count();
        ensure!(
            f.answer_corrected.len() == expected,
            "answer_corrected miscounted"
        );
    }

    let model = toy()?;
    let samples = ok(load_dataset(fixture("facts.jsonl"), Template::Raw))?;
    let subset = &samples[..30];
    let study = ok(higher_order_study(
        &model,
        subset,
        Slot::new(MatrixType::Uin, 1),
        &[0.0],
        &[],
    ))?;
    for (s, rec) in subset.iter().zip(&study.points[0].samples) {
        let out = ok(forward(&model, &s.prompt_ids()))?;
        ensure!(
            rec.predicted == argmax_token(out.row(out.rows() - 1)),
            "fraction 0 prediction differs for {}",
            s.id
        );
    }

    let docs = ok(laser_core::analysis::load_corpus(&fixture("corpus.jsonl")))?;
    let mut previous = corpus_cooccurrence(&[], &samples).counts;
    for k in [docs.len() / 4, docs.len() / 2, docs.len()] {
        let counts = corpus_cooccurrence(&docs[..k], &samples).counts;
        ensure!(
            counts.iter().all(|(id, c)| *c >= previous[id]),
            "co-occurrence shrank at {k} documents"
        );
        previous = counts;
    }

    let planted = ok(load_dataset(
        fixture("monotonicity/planted.jsonl"),
        Template::Raw,
    ))?;
    let family: Vec<InterventionSpec> = ok(serde_json::from_str(&ok(std::fs::read_to_string(
        fixture("monotonicity/family.json"),
    ))?))?;
    let audit = ok(monotonicity_audit(
        &model,
        &planted,
        &family,
        &EvalConfig::default(),
    ))?;
    ensure!(
        audit.violations == 1,
        "planted fixture gave {} violations",
        audit.violations
    );
    ensure!(
        count_violations(&[true, false, true, false]) == 2,
        "violation counter"
    );
    Ok(
        "100 flip partitions, fraction-0 predictions, co-occurrence growth, planted violations = 1"
            .into(),
    )
}

fn golden() -> Check {
    let root = repo_root();
    let golden = root.join("fixtures/toy/golden");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path();
    let laser = |args: &[&str]| -> Result<(), String> {
        let status = Command::new(env!("CARGO_BIN_EXE_laser"))
            .current_dir(&root)
            .arg("-q")
            .args(args)
            .status()
            .map_err(|e| e.to_string())?;
        ensure!(status.success(), "laser {} exited with {status}", args[0]);
        Ok(())
    };
    let apply_dir = out.join("apply");
    let analyze_dir = out.join("analyze");
    let p = |p: &Path| p.to_str().unwrap().to_owned();
    laser(&[
        "apply",
        "--model",
        "fixtures/toy/model.ltc",
        "--dataset",
        "fixtures/toy/facts.jsonl",
        "--plan",
        "fixtures/toy/golden/plan.json",
        "--corpus",
        "fixtures/toy/corpus.jsonl",
        "--out",
        &p(&apply_dir),
    ])?;
    let ltc = ok(std::fs::read(apply_dir.join("model.ltc")))?;
    std::fs::write(
        apply_dir.join("model.ltc.sha256"),
        format!("{}\n", hex::encode(Sha256::digest(&ltc))),
    )
    .map_err(|e| e.to_string())?;
    std::fs::remove_file(apply_dir.join("model.ltc")).map_err(|e| e.to_string())?;
    laser(&[
        "analyze",
        "--model",
        "fixtures/toy/model.ltc",
        "--dataset",
        "fixtures/toy/facts.jsonl",
        "--corpus",
        "fixtures/toy/corpus.jsonl",
        "--baseline",
        &p(&apply_dir.join("baseline_report.json")),
        "--intervened",
        &p(&apply_dir.join("report.json")),
        "--out",
        &p(&analyze_dir),
    ])?;

    let mut compared = 0;
    for sub in ["apply", "analyze"] {
        let mut expected: Vec<_> = ok(std::fs::read_dir(golden.join(sub)))?
            .map(|e| e.unwrap().file_name())
            .collect();
        expected.sort();
        let mut produced: Vec<_> = ok(std::fs::read_dir(out.join(sub)))?
            .map(|e| e.unwrap().file_name())
            .collect();
        produced.sort();
        ensure!(
            expected == produced,
            "{sub}: file sets differ: {produced:?}"
        );
        for name in expected {
            let a = ok(std::fs::read(golden.join(sub).join(&name)))?;
            let b = ok(std::fs::read(out.join(sub).join(&name)))?;
            ensure!(
                a == b,
                "{sub}/{} differs from golden",
                name.to_string_lossy()
            );
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical"))
}

fn main() {
    let checks: [(&str, CheckFn); 10] = [
        ("svd", svd_suite),
        ("complement-identity", complement_identity),
        ("effective-rank", effective_rank_cases),
        ("forward-oracle", forward_oracle),
        ("perplexity", perplexity),
        ("interventions", intervention_suite),
        ("search", search_suite),
        ("metrics", metrics_suite),
        ("analysis", analysis_suite),
        ("golden", golden),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
