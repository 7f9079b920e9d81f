use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use kctutor_core::bank::{bank_to_jsonl, sample_exam_set, truncate_histories, QuestionBank};
use kctutor_core::engine::{fit_em, histories_to_jsonl, EmConfig};
use kctutor_core::generator::{PromptStyle, QuestionSource, TemplateSource};
use kctutor_core::simulator::{
    run_cohort, selection_rank_report, Collaborators, Policy, SimulationConfig, SimulationReport,
};
use kctutor_core::synth::{self, SynthConfig};
use kctutor_core::verifier::{alignment_scores, corpus_to_jsonl, identify_kc, train_verifier, VerifierTrainConfig};
use kctutor_core::{KcId, KcTree};
use kctutor_remote::{Endpoint, RemoteClient, RemoteSource};
use kctutor_service::{router, AppState, Catalog, ServiceConfig};

use crate::failure::{Classify, Failure};
use crate::run::Run;
use crate::{
    FitArgs, GeneratorArgs, GeneratorKind, IdentifyArgs, RankArgs, ScoreArgs, ServeArgs, SimulateArgs, SynthArgs,
    TrainArgs, EXIT_NOT_CONVERGED,
};

pub fn synth(a: &SynthArgs) -> Result<u8, Failure> {
    if a.branching.is_empty() || a.branching.contains(&0) {
        return Err(Failure::usage("--branching needs positive counts"));
    }
    let cfg = SynthConfig {
        branching: a.branching.clone(),
        students: a.students,
        records_per_student: a.records,
        questions_per_kc: a.questions_per_kc,
        seed: a.seed,
        ..Default::default()
    };
    let mut run = Run::new("synth", a);
    run.seed("seed", a.seed);
    let data = synth::generate(&cfg);
    let corpus = synth::template_corpus(&data.tree, &data.templates, a.corpus_per_kc, a.seed.wrapping_add(1));
    let bank = QuestionBank::new(data.questions.clone(), &data.tree).data()?;
    run.write(&a.out.join("tree.jsonl"), &data.tree.to_jsonl())?;
    run.write(&a.out.join("params.json"), &data.params.to_json())?;
    run.write(&a.out.join("histories.jsonl"), &histories_to_jsonl(&data.histories))?;
    run.write(&a.out.join("questions.jsonl"), &bank_to_jsonl(&bank))?;
    run.write(&a.out.join("corpus.jsonl"), &corpus_to_jsonl(&corpus))?;
    let templates = serde_json::to_string_pretty(&data.templates).expect("templates serialize");
    run.write(&a.out.join("templates.json"), &templates)?;
    run.finish(&a.out)?;
    println!(
        "wrote {} concepts ({} leaves), {} students, {} questions to {}",
        data.tree.len(),
        data.tree.leaf_count(),
        data.histories.len(),
        bank.len(),
        a.out.display()
    );
    Ok(0)
}

pub fn fit(a: &FitArgs) -> Result<u8, Failure> {
    let mut run = Run::new("fit", a);
    run.seed("seed", a.seed);
    let tree = run.tree(&a.tree)?;
    let histories = run.histories(&a.histories, &tree)?;
    let cfg = EmConfig {
        max_iters: a.max_iters,
        ll_tolerance: a.tolerance,
        min_prob: a.min_prob,
        max_prob: a.max_prob,
        seed: a.seed,
    };
    cfg.validate().usage()?;
    let fit = fit_em(&tree, &histories, &cfg).data()?;
    run.write(&a.out.join("params.json"), &fit.params.to_json())?;
    let trace = serde_json::json!({
        "log_likelihood": fit.trace,
        "iterations": fit.iterations,
        "converged": fit.converged,
    });
    run.write(&a.out.join("trace.json"), &serde_json::to_string_pretty(&trace).expect("trace serializes"))?;
    run.finish(&a.out)?;
    let last = fit.trace.last().copied().unwrap_or(f64::NAN);
    if fit.converged {
        println!("converged after {} iterations, log-likelihood {last:.6}", fit.iterations);
        Ok(0)
    } else {
        eprintln!("warning: stopped at --max-iters {} without converging, log-likelihood {last:.6}", a.max_iters);
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn prompt_style(g: &GeneratorArgs) -> PromptStyle {
    PromptStyle { language: g.language.clone(), audience: g.audience.clone(), audience_one: g.audience_one.clone() }
}

/// The configured question source, if any.
fn question_source(g: &GeneratorArgs, run: &mut Run) -> Result<Option<Arc<dyn QuestionSource>>, Failure> {
    match g.generator {
        None => Ok(None),
        Some(GeneratorKind::Template) => {
            let path = g.templates.as_ref().ok_or_else(|| Failure::usage("--generator template needs --templates"))?;
            Ok(Some(Arc::new(TemplateSource { library: run.templates(path)? })))
        }
        Some(GeneratorKind::Remote) => {
            let url = g.endpoint.as_ref().ok_or_else(|| Failure::usage("--generator remote needs --endpoint"))?;
            if !(g.timeout_secs > 0.0) {
                return Err(Failure::usage("--timeout-secs must be positive"));
            }
            let endpoint = Endpoint::new(url.clone(), Duration::from_secs_f64(g.timeout_secs)).with_env_auth();
            let client = RemoteClient::new(endpoint, g.max_in_flight).usage()?;
            Ok(Some(Arc::new(RemoteSource { client, style: prompt_style(g) })))
        }
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<u8, Failure> {
    let mut run = Run::new("simulate", a);
    run.seed("seed", a.seed);
    run.seed("exam_seed", a.seed);
    let policies: Vec<Policy> = if a.rounds == 0 {
        vec![Policy::Initial]
    } else {
        let mut p = a.policy.clone();
        p.dedup();
        p
    };
    if policies.is_empty() {
        return Err(Failure::usage("--policy must name at least one policy"));
    }
    if a.exam_size == 0 {
        return Err(Failure::usage("--exam-size must be positive"));
    }
    let needs_generator = policies.iter().any(|p| p.needs_generator());
    if needs_generator && a.generator.generator.is_none() {
        return Err(Failure::usage("generator policies need --generator template or --generator remote"));
    }
    if needs_generator && a.verifier.is_none() {
        return Err(Failure::usage("generator policies need --verifier"));
    }
    let tree = run.tree(&a.tree)?;
    let params = run.params(&a.params, &tree)?;
    let histories = run.histories(&a.histories, &tree)?;
    let bank = run.bank(&a.bank, &tree)?;
    let source = if needs_generator { question_source(&a.generator, &mut run)? } else { None };
    let model = match (&a.verifier, needs_generator) {
        (Some(p), true) => Some(run.model(p)?),
        _ => None,
    };
    let truncated = truncate_histories(&histories, &a.cut_points).usage()?;
    if truncated.is_empty() {
        return Err(Failure { kind: crate::failure::Kind::Data, error: anyhow!("no history reaches the first cut point") });
    }
    let exam = sample_exam_set(&bank, &tree, a.exam_size, a.seed).data()?;
    let collab = Collaborators { source: source.as_deref(), verifier: model.as_ref() };
    let mut reports = Vec::new();
    for policy in policies {
        let cfg = SimulationConfig {
            rounds: a.rounds,
            exam_size: a.exam_size,
            policy,
            seed: a.seed,
            update_difficulty: a.update_difficulty,
        };
        tracing::info!(%policy, histories = truncated.len(), "simulating");
        reports.push(run_cohort(&params, &tree, &truncated, &cfg, &exam, collab).runtime()?);
    }
    let report = SimulationReport::merge(reports).expect("at least one policy");
    run.write(&a.out.join("report.json"), &report.to_json())?;
    run.write(&a.out.join("report.csv"), &report.to_csv().runtime()?)?;
    run.write(&a.out.join("exam.json"), &serde_json::to_string_pretty(&exam).expect("exam serializes"))?;
    run.finish(&a.out)?;
    for (policy, agg) in &report.aggregate {
        println!("{policy}\tmean {:.4}\tstd {:.4}\tn {}", agg.mean, agg.std, agg.count);
    }
    Ok(0)
}

pub fn verifier_train(a: &TrainArgs) -> Result<u8, Failure> {
    let mut run = Run::new("verifier train", a);
    run.seed("seed", a.seed);
    let tree = run.tree(&a.tree)?;
    let corpus = run.corpus(&a.corpus)?;
    let cfg = VerifierTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        tau: a.tau,
        seed: a.seed,
        hard_negatives_per_pair: a.hard_negatives,
    };
    cfg.validate().usage()?;
    let trained = train_verifier(&corpus, &tree, &cfg).data()?;
    run.write(&a.out.join("model.json"), &trained.model.to_json())?;
    let trace = serde_json::to_string_pretty(&trained.loss_trace).expect("trace serializes");
    run.write(&a.out.join("loss_trace.json"), &trace)?;
    run.finish(&a.out)?;
    let first = trained.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = trained.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!("trained on {} pairs, loss {first:.4} -> {last:.4}", corpus.len());
    Ok(0)
}

fn candidates(tree: &KcTree, given: &[String]) -> Result<Vec<KcId>, Failure> {
    if given.is_empty() {
        return Ok(tree.leaves());
    }
    given
        .iter()
        .map(|k| {
            if tree.contains(k) {
                Ok(KcId::new(k.clone()))
            } else {
                Err(Failure::usage(format!("unknown candidate concept {k:?}")))
            }
        })
        .collect()
}

pub fn verifier_score(a: &ScoreArgs) -> Result<u8, Failure> {
    let mut run = Run::new("verifier score", a);
    let tree = run.tree(&a.tree)?;
    let model = run.model(&a.model)?;
    let cands = candidates(&tree, &a.candidates)?;
    if let Some(k) = &a.kc {
        if !cands.iter().any(|c| c.as_str() == k) {
            return Err(Failure::usage(format!("--kc {k:?} is not among the candidates")));
        }
    }
    let rows = alignment_scores(&model, &tree, &a.question, &cands).usage()?;
    let mut out = std::io::stdout().lock();
    for r in rows.iter().filter(|r| a.kc.as_deref().map_or(true, |k| r.kc.as_str() == k)) {
        writeln!(out, "{}", serde_json::to_string(r).expect("row serializes")).runtime()?;
    }
    Ok(0)
}

pub fn verifier_identify(a: &IdentifyArgs) -> Result<u8, Failure> {
    let mut run = Run::new("verifier identify", a);
    let tree = run.tree(&a.tree)?;
    let model = run.model(&a.model)?;
    let cands = candidates(&tree, &a.candidates)?;
    let mut questions = a.question.clone();
    if let Some(p) = &a.input {
        let text = run.read(p)?;
        questions.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    if questions.is_empty() {
        return Err(Failure::usage("give --question or --input"));
    }
    let mut out = std::io::stdout().lock();
    for q in &questions {
        let kc = identify_kc(&model, &tree, q, &cands).data()?;
        writeln!(out, "{kc}").runtime()?;
    }
    Ok(0)
}

pub fn analyze_rank(a: &RankArgs) -> Result<u8, Failure> {
    let mut run = Run::new("analyze-rank", a);
    let tree = run.tree(&a.tree)?;
    let params = run.params(&a.params, &tree)?;
    let histories = run.histories(&a.histories, &tree)?;
    let truncated = truncate_histories(&histories, &a.cut_points).usage()?;
    let records = selection_rank_report(&params, &tree, &truncated).runtime()?;
    let body: String =
        records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect();
    run.write(&a.out.join("rank_report.jsonl"), &body)?;
    run.finish(&a.out)?;
    println!("{} selections over {} leaves", records.len(), tree.leaf_count());
    Ok(0)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "default".into())
}

pub fn serve(a: &ServeArgs, jobs: Option<usize>) -> Result<u8, Failure> {
    let mut run = Run::new("serve", a);
    let tree = run.tree(&a.tree)?;
    let params = run.params(&a.params, &tree)?;
    let source = question_source(&a.generator, &mut run)?;
    let tree_id = a.tree_id.clone().unwrap_or_else(|| file_stem(&a.tree));
    let params_id = a.params_id.clone().unwrap_or_else(|| file_stem(&a.params));
    let mut catalog = Catalog::default();
    catalog.add_tree(tree_id.clone(), tree);
    catalog.add_params(params_id.clone(), &tree_id, params).data()?;
    let config = ServiceConfig { cors_origins: a.cors_origin.clone(), event_log: a.event_log.clone() };
    let app = AppState::new(catalog, source, &config).data()?;

    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = jobs {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().context("starting runtime").runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))
            .runtime()?;
        let addr = listener.local_addr().context("reading bound address").runtime()?;
        println!("listening on http://{addr} (tree {tree_id:?}, params {params_id:?})");
        let _ = std::io::stdout().flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        kctutor_service::serve(listener, router(app, &config), shutdown).await.context("serving").runtime()
    })?;
    Ok(0)
}
