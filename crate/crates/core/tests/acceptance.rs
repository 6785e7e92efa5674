//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Set `DIALOGRE_DIR` to a directory holding the DialogRE V2-EN
//! `train.json`, `dev.json` and `test.json` to include the dataset check.
//! `cargo test --test acceptance -- 1 3` runs only criteria 1 and 3.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use common::*;
use drex::corpus::{load_dialogre, mask_span, DialogueSpan, PairExample, RelationSchema, TokenSpan};
use drex::encoder::Precision;
use drex::experiment::{load_data, prepare, run, run_ablation_suite, BaselineKind, Command, RunConfig};
use drex::heads::*;
use drex::metrics::*;
use drex::models::{RelationModel, SpanModel};
use drex::synthetic::{generate, SyntheticConfig};
use drex::system::*;
use drex::train::{evaluate_drex, evaluate_ranker, train_drex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

const FIXTURES: usize = 100;

fn formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 8];

    for _ in 0..FIXTURES {
        // relation probabilities and loss
        let (k, h, b) = (rng.gen_range(1..12), rng.gen_range(2..16), rng.gen_range(1..4));
        let weight = random_vec(&mut rng, k * h, 1.5);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| random_vec(&mut rng, h, 1.5)).collect();
        let w_rows: Vec<Vec<f64>> = weight.chunks(h).map(<[f64]>::to_vec).collect();
        let probs = classify(&tensor(rows.concat(), &[b, h]), &tensor(weight, &[k, h])).unwrap();
        let labels: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.gen_bool(0.3) as u8 as f64).collect()).collect();
        let losses = relation_loss(&probs, &tensor(labels.concat(), &[b, k])).unwrap().to_vec1::<f64>().unwrap();
        let probs = probs.to_vec2::<f64>().unwrap();
        for i in 0..b {
            let want = classify_oracle(&rows[i], &w_rows);
            for (g, w) in probs[i].iter().zip(&want) {
                worst[0] = worst[0].max((g - w).abs());
            }
            worst[1] = worst[1].max((losses[i] - relation_loss_oracle(&want, &labels[i])).abs());
        }

        // span distributions and span loss
        let (l, h) = (rng.gen_range(3..24), rng.gen_range(2..12));
        let hidden = random_vec(&mut rng, l * h, 1.0);
        let (s, e) = (random_vec(&mut rng, h, 1.0), random_vec(&mut rng, h, 1.0));
        let batch = span_distributions(&tensor(hidden.clone(), &[1, l, h]), &[l], &tensor(s.clone(), &[h]), &tensor(e.clone(), &[h])).unwrap();
        let dist = batch.distribution(0).unwrap();
        let dots = |v: &[f64]| -> Vec<f64> { hidden.chunks(h).map(|t| t.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
        let (ps, pe) = (softmax_oracle(&dots(&s)), softmax_oracle(&dots(&e)));
        for i in 0..l {
            worst[2] = worst[2].max((dist.start_probs[i] - ps[i]).abs()).max((dist.end_probs[i] - pe[i]).abs());
        }
        let prefix = rng.gen_range(1..l);
        let d = l - prefix;
        let (a, z) = (prefix + rng.gen_range(0..d), prefix + rng.gen_range(0..d));
        let gold = (a.min(z), a.max(z));
        let loss = span_loss(&batch, &[TokenSpan::new(gold.0, gold.1)], &[Region { prefix_len: prefix, dialogue_len: d }])
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        worst[3] = worst[3].max((loss - span_loss_oracle(&ps, &pe, prefix, d, gold)).abs());

        // policy-gradient loss
        let n = rng.gen_range(1..6);
        let ls: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0..5.0)).collect();
        let le: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0..5.0)).collect();
        let bundles: Vec<RewardBundle> = (0..n)
            .map(|_| RewardBundle { rerank_reward: rng.gen_range(-2.0..2.0), loo_reward: rng.gen_range(-2.0..2.0) })
            .collect();
        let totals: Vec<f64> = bundles.iter().map(RewardBundle::total).collect();
        let pg = policy_gradient_loss(&tensor(ls.clone(), &[n]), &tensor(le.clone(), &[n]), &totals).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..n {
            let want = -(ls[i] + le[i]) * (bundles[i].rerank_reward + bundles[i].loo_reward);
            worst[4] = worst[4].max((pg[i] - want).abs()).max((policy_gradient_loss_value(ls[i], le[i], &bundles[i]) - want).abs());
        }

        // MRR
        let (probs, golds) = random_ranking_fixture(rng.gen(), rng.gen_range(1..40), rng.gen_range(1..40));
        let preds: Vec<RankedPrediction> = probs.iter().zip(&golds).map(|(p, g)| RankedPrediction::from_probs("p", p, 0.5, g)).collect();
        let rankings: Vec<Vec<usize>> = probs.iter().map(|p| ranking_oracle(p)).collect();
        worst[5] = worst[5].max((mrr(&preds).unwrap() - mrr_oracle(&rankings, &golds)).abs());
    }

    // rewards and the LOO metric on real (untrained, f64) models
    let fx = small_fixture(Precision::F64, 40, 77);
    let system = DrexSystem::from_baselines(fitted_rater(&fx, 5, 30), fx.explainer(6), small_drex_config()).unwrap();
    let builder = system.input_builder().clone();
    let mask = system.mask_id();
    let pairs: Vec<&PairExample> = fx.train.refs();
    let mut loo_changed = 0;
    for f in 0..FIXTURES {
        let pair = pairs[f % pairs.len()];
        let d = pair.base.dialogue_len;
        let start = rng.gen_range(0..d);
        let span = DialogueSpan { start, end: (start + rng.gen_range(0..3)).min(d - 1) };
        let text = pair.span_text(span).unwrap();
        let rr_input = pair.reranker_input(&builder, Some(text)).unwrap();
        let p_r = &system.ranker.predict(&[&pair.base]).unwrap()[0].probs;
        let p_rr = &system.reranker.predict(&[&rr_input]).unwrap()[0].probs;
        let want_rr = relation_loss_oracle(p_r, &pair.targets) - relation_loss_oracle(p_rr, &pair.targets);
        let t = pair.targets.as_slice();
        let got_rr = rerank_reward(
            relation_losses(&system.ranker, &[&pair.base], &[t]).unwrap()[0],
            relation_losses(&system.reranker, &[&rr_input], &[t]).unwrap()[0],
        );
        worst[6] = worst[6].max((got_rr - want_rr).abs());

        let mut masked = pair.base.clone();
        for i in span.start..=span.end {
            masked.token_ids[masked.prefix_len + i] = mask;
        }
        let p_m = &system.ranker.predict(&[&masked]).unwrap()[0].probs;
        let want_loo = relation_loss_oracle(p_m, &pair.targets) - relation_loss_oracle(p_r, &pair.targets);
        worst[6] = worst[6].max((system.loo_reward(pair, Some(span)).unwrap() - want_loo).abs());

        let explainer = RandomSpanExplainer { seed: f as u64, width: 1 + f % 4 };
        let requests: Vec<(&PairExample, usize)> = pairs.iter().flat_map(|p| p.gold.iter().map(move |&c| (*p, c))).collect();
        let spans = explainer.explain(&requests).unwrap();
        let mut cursor = 0;
        let per_pair: Vec<Vec<DialogueSpan>> = pairs
            .iter()
            .map(|p| {
                let own = spans[cursor..cursor + p.gold.len()].iter().flatten().copied().collect();
                cursor += p.gold.len();
                own
            })
            .collect();
        let got = loo_metric(&system.ranker, &explainer, &pairs, 0.5).unwrap().loo;
        let want = loo_oracle(&system.ranker, &pairs, &per_pair, 0.5, mask);
        if want != 1.0 {
            loo_changed += 1;
        }
        worst[7] = worst[7].max((got - want).abs());
    }

    let names = ["classifier", "relation loss", "span softmax", "span loss", "pg loss", "MRR", "rewards", "LOO"];
    let limits = [1e-8, 1e-8, 1e-8, 1e-8, 1e-10, 1e-10, 1e-8, 1e-8];
    let ok = worst.iter().zip(&limits).all(|(w, l)| w <= l) && loo_changed > 0;
    let detail = names
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, format!("{FIXTURES} fixtures each; max abs err: {detail}; {loo_changed} LOO fixtures differ from 1"))
}

fn gradient_checks_criterion() -> Outcome {
    let results = gradient_checks(4);
    let ok = results.iter().all(|(_, e)| *e < 1e-4);
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(ok, format!("max relative error: {detail}"))
}

fn structural_invariants() -> Outcome {
    structural_run(100, 90)?;

    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..1000 {
        let n = rng.gen_range(2..30);
        let dist = SpanDistribution {
            start_probs: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            end_probs: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let prefix = rng.gen_range(0..n);
        let max_len = rng.gen_range(1..8);
        for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
            if let Some(s) = decode_explanation(&dist, prefix, max_len, mode, &mut rng).span {
                if s.start < prefix || s.end < s.start || s.end >= n || s.width() > max_len {
                    return Err(format!("decoded span {s:?} with prefix {prefix} of {n}"));
                }
            }
        }
    }

    let fx = small_fixture(Precision::F32, 20, 92);
    let mask = drex::tokenizer::Tokenizer::special_ids(&fx.tokenizer).mask;
    for pair in &fx.train.pairs {
        let input = &pair.base;
        if mask_span(input, None, mask).unwrap() != *input {
            return Err("masking without a span changed the input".into());
        }
        let a = input.prefix_len + rng.gen_range(0..input.dialogue_len);
        let b = input.prefix_len + rng.gen_range(0..input.dialogue_len);
        let span = TokenSpan::new(a.min(b), a.max(b));
        let masked = mask_span(input, Some(span), mask).unwrap();
        for i in 0..input.len() {
            let inside = (span.start..=span.end).contains(&i);
            if (inside && masked.token_ids[i] != mask) || (!inside && masked.token_ids[i] != input.token_ids[i]) {
                return Err(format!("mask coverage broken at {i} for {span:?}"));
            }
        }
    }

    for _ in 0..200 {
        let k = rng.gen_range(1..40);
        let r: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let n = rng.gen_range(1..8);
        if ensemble_mean(&r, &vec![r.clone(); n]) != r {
            return Err("ensemble with RR identical to R differs from R".into());
        }
    }
    Ok("R bit-identical over 100 steps; 2000 decodes; 20 masks; 200 ensembles".into())
}

fn dataset_fidelity() -> Option<Outcome> {
    let dir = PathBuf::from(std::env::var_os("DIALOGRE_DIR")?);
    let schema = RelationSchema::dialogre();
    let mut triples = Vec::new();
    let mut triggers = Vec::new();
    for split in ["train", "dev", "test"] {
        match load_dialogre(dir.join(format!("{split}.json")), split, &schema) {
            Ok(s) => {
                triples.push(s.report.triples);
                triggers.push(s.report.triggers);
            }
            Err(e) => return Some(Err(format!("cannot load {split}: {e}"))),
        }
    }
    let total: usize = triples.iter().sum();
    let ok = triples == [6290, 1992, 1921] && triggers == [2446, 830, 780] && total == 10203;
    Some(check(
        ok,
        format!(
            "triples {triples:?}, triggers {triggers:?}, coverage {}/{total} = {:.1}%",
            triggers[0],
            100.0 * triggers[0] as f64 / total as f64
        ),
    ))
}

struct Workspace {
    data: PathBuf,
    ranker: PathBuf,
    explainer: PathBuf,
    root: PathBuf,
}

fn base_config(ws: &Workspace) -> RunConfig {
    let mut cfg = RunConfig {
        data_dir: Some(ws.data.clone()),
        baseline_learning_rate: Some(1e-3),
        ..Default::default()
    };
    cfg.drex.top_k = 3;
    cfg.drex.learning_rate = 3e-4;
    cfg.drex.batch_size = 30;
    cfg.drex.max_epochs_baseline = 8;
    cfg.drex.max_epochs_drex = 3;
    cfg
}

fn train_baselines(ws: &Workspace, seeds: &[u64]) -> Result<(), String> {
    for (kind, out) in [(BaselineKind::Rank, &ws.ranker), (BaselineKind::Explain, &ws.explainer)] {
        let cfg = RunConfig {
            command: Command::TrainBaseline,
            baseline: Some(kind),
            seeds: seeds.to_vec(),
            output_dir: out.clone(),
            ..base_config(ws)
        };
        run(&cfg).map_err(|e| format!("baseline training failed: {e}"))?;
    }
    Ok(())
}

fn synthetic_end_to_end(ws: &Workspace) -> Outcome {
    train_baselines(ws, &[0])?;
    let cfg = base_config(ws);
    let data = load_data(&ws.data).map_err(|e| e.to_string())?;
    let ranker = RelationModel::load(ws.ranker.join("seed-0")).map_err(|e| e.to_string())?;
    let explainer = SpanModel::load(ws.explainer.join("seed-0")).map_err(|e| e.to_string())?;
    let prepared = prepare(&data, &ranker.input_builder(), "test").map_err(|e| e.to_string())?;
    let test = prepared.eval.refs();
    let r = evaluate_ranker(&ranker, &test, 0.5).map_err(|e| e.to_string())?;
    let system = DrexSystem::from_baselines(ranker, explainer, cfg.drex.clone()).map_err(|e| e.to_string())?;
    train_drex(&system, &prepared.train.refs(), &prepared.dev.refs(), cfg.drex.max_epochs_drex, 0).map_err(|e| e.to_string())?;
    let d = evaluate_drex(&system, &test).map_err(|e| e.to_string())?;

    let requests: Vec<(&PairExample, usize)> = test
        .iter()
        .flat_map(|p| p.gold.iter().filter(|&&c| p.aligned_trigger(c).is_some()).map(move |&c| (*p, c)))
        .collect();
    let spans = greedy_explanations(&system.explainer, system.schema(), &requests, cfg.drex.max_span_len).map_err(|e| e.to_string())?;
    let hits = requests
        .iter()
        .zip(&spans)
        .filter(|((p, c), s)| s.is_some_and(|s| s.overlaps(&p.aligned_trigger(*c).unwrap())))
        .count();
    let overlap = hits as f64 / requests.len() as f64;

    let model = ModelExplainer { model: &system.explainer, schema: system.schema(), max_span_len: cfg.drex.max_span_len };
    let loo = loo_metric(&system.ranker, &model, &test, 0.5).map_err(|e| e.to_string())?.loo;
    let random = loo_metric(&system.ranker, &RandomSpanExplainer { seed: 0, width: 2 }, &test, 0.5).map_err(|e| e.to_string())?.loo;

    let (rf1, rmrr, df1, dmrr) = (r.f1.unwrap(), r.mrr.unwrap(), d.f1.unwrap(), d.mrr.unwrap());
    let parts = [
        (rf1 >= 0.90, format!("(a) R F1 {rf1:.3} >= 0.90")),
        (dmrr >= rmrr && df1 >= rf1 - 0.01, format!("(b) D-REX MRR {dmrr:.3} vs {rmrr:.3}, F1 {df1:.3} vs {rf1:.3}")),
        (overlap >= 0.60, format!("(c) trigger overlap {hits}/{} = {overlap:.3} >= 0.60", requests.len())),
        (loo < 1.0 && loo < random, format!("(d) LOO {loo:.3} < 1 and < random-span {random:.3}")),
    ];
    let detail = parts.iter().map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "MISSED " })).collect::<Vec<_>>().join("; ");
    check(parts.iter().all(|(ok, _)| *ok), detail)
}

fn ablation_direction(ws: &Workspace) -> Outcome {
    train_baselines(ws, &[1, 2])?;
    let mut cfg = RunConfig {
        command: Command::Ablate,
        seeds: vec![0, 1, 2],
        ranker: Some(ws.ranker.clone()),
        explainer: Some(ws.explainer.clone()),
        output_dir: ws.root.join("ablation"),
        ..base_config(ws)
    };
    cfg.drex.max_epochs_drex = 2;
    let report = run_ablation_suite(&cfg).map_err(|e| e.to_string())?;
    let loo = |name: &str| report.rows.iter().find(|(n, _)| n == name).and_then(|(_, r)| r.mean.loo).unwrap();
    let (full, no_loo) = (loo("D-REX"), loo("- LOO reward"));
    println!("{}", report.table.trim_end());
    check(no_loo >= full, format!("LOO without the LOO reward {no_loo:.3} >= full D-REX {full:.3} (3 seeds)"))
}

fn report(n: usize, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let within = elapsed <= budget;
    let (ok, detail) = match outcome {
        Ok(d) => (within, d),
        Err(d) => (false, d),
    };
    println!(
        "[{}] criterion {n}: {title}: {detail} ({:.1}s, budget {}s{})",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if within { "" } else { ", over budget" }
    );
    ok
}

/// Criterion numbers given as arguments restrict the run; none runs all.
fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let ws = Workspace {
        data: root.join("data"),
        ranker: root.join("ranker"),
        explainer: root.join("explainer"),
        root: root.clone(),
    };
    let mins = |m: u64| Duration::from_secs(60 * m);
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut ok = true;
    if wanted(1) {
        ok &= report(1, "formula oracles", mins(1), formula_oracles);
    }
    if wanted(2) {
        ok &= report(2, "gradient checks", mins(2), gradient_checks_criterion);
    }
    if wanted(3) {
        ok &= report(3, "structural invariants", mins(2), structural_invariants);
    }
    if wanted(4) {
        let start = Instant::now();
        match dataset_fidelity() {
            Some(outcome) => ok &= report(4, "dataset fidelity", mins(1), || outcome),
            None => println!(
                "[SKIP] criterion 4: dataset fidelity: DIALOGRE_DIR not set, DialogRE V2-EN unavailable ({:.1}s)",
                start.elapsed().as_secs_f64()
            ),
        }
    }
    if wanted(5) || wanted(6) {
        generate(&SyntheticConfig::default()).unwrap().write(&ws.data, &SyntheticConfig::default()).unwrap();
    }
    if wanted(5) {
        ok &= report(5, "synthetic end-to-end", mins(15), || synthetic_end_to_end(&ws));
    }
    if wanted(6) {
        if !wanted(5) {
            ok &= train_baselines(&ws, &[0]).is_ok();
        }
        ok &= report(6, "ablation direction", mins(45), || ablation_direction(&ws));
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
