//! Subcommand bodies. Each registers its inputs, writes its outputs into
//! the output directory and finishes with a run manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use kbound::dataset::{build_dataset_with, export, load_internal, DatasetOptions};
use kbound::eval::{
    apply_threshold, awareness_eval, build_split, compute_report, confidence_histogram, format_table,
    prompt_baseline, raw_outcomes, uncertainty_baseline, AwarenessReport, BaselineContext, Demonstration,
    EvalMode, EvalOutcome, PromptBaselineMode, SplitSpec, StanceReader, VerbTraining,
};
use kbound::io::{read_jsonl, write_json, write_jsonl};
use kbound::partition::{partition as split_by_confidence, resolve_thresholds, InputChecksum, PartitionedSet};
use kbound::probe::{probe_dataset, CacheStore, ProbeResult, QuestionRecord};
use kbound::synthetic::{SyntheticWorld, WorldConfig};
use kbound::toy_trainer::{train, Checkpoint, FeatureExtractor, ToyModel};
use serde::Serialize;
use serde_json::json;

use crate::backend::{Backend, EndpointSpec};
use crate::config::Settings;
use crate::manifest::{RunManifest, RunRecorder};

fn questions_from(path: &Path) -> anyhow::Result<Vec<QuestionRecord>> {
    let q: Vec<QuestionRecord> = read_jsonl(path)?;
    QuestionRecord::validate_all(&q)?;
    Ok(q)
}

fn probe_from(path: &Path) -> anyhow::Result<Vec<ProbeResult>> {
    let results: Vec<ProbeResult> = read_jsonl(path)?;
    for r in &results {
        r.verify()?;
    }
    Ok(results)
}

pub fn probe(s: &Settings, questions: &Path, name: &str) -> anyhow::Result<()> {
    let mut rec = RunRecorder::start("probe", s);
    rec.input(questions)?;
    let qs = questions_from(questions)?;
    let backend = Backend::connect(&s.endpoint)?;
    let templates = s.template_set()?;
    let cache_path = s.cache_path();
    let cache = CacheStore::open(&cache_path)?;
    let run = probe_dataset(&s.endpoint, backend.endpoint.as_ref(), &qs, &templates.direct, &cache)?;

    let out = s.out_dir.join(format!("{name}.jsonl"));
    write_jsonl(&out, &run.results)?;
    rec.output(&out);
    let failures = s.out_dir.join(format!("{name}.failures.jsonl"));
    write_jsonl(&failures, &run.failures)?;
    rec.output(&failures);
    println!(
        "probed {} questions: {} results, {} failures, {} cache hits",
        qs.len(),
        run.results.len(),
        run.failures.len(),
        run.cache_hits
    );
    rec.finish(
        name,
        json!({
            "model": backend.endpoint.model(),
            "results": run.results.len(),
            "failures": run.failures.len(),
            "cache_hits": run.cache_hits,
            // Generation ends at the first of these strings; our choice, not
            // the endpoint's.
            "stop_rule": { "stop": &s.endpoint.stop, "max_new_tokens": s.endpoint.max_new_tokens },
            // Shared across runs and appended to, so not a checksummed output.
            "cache": cache_path,
        }),
    )?;
    Ok(())
}

pub fn partition(s: &Settings, probe: &Path) -> anyhow::Result<()> {
    let mut rec = RunRecorder::start("partition", s);
    rec.input(probe)?;
    let results = probe_from(probe)?;
    let spec = resolve_thresholds(&results, &s.partition.spec())?;
    let parts = split_by_confidence(&results, &spec)?;
    let (data, manifest) = parts.save(&s.out_dir, &[probe])?;
    rec.output(&data);
    rec.output(&manifest);
    let counts = parts.counts();
    println!(
        "delta_unk {:.6} delta_k {:.6} ({}): {} unknown, {} known, {} excluded",
        spec.delta_unk, spec.delta_k, spec.signal_kind, counts.unk, counts.k, counts.excluded
    );
    rec.finish(
        "partition",
        json!({ "delta_unk": spec.delta_unk, "delta_k": spec.delta_k, "thresholds": spec, "counts": counts }),
    )?;
    Ok(())
}

/// The partition manifest that sits next to a `partition.jsonl`.
fn partition_manifest_for(data: &Path) -> PathBuf {
    data.with_file_name("partition.manifest.json")
}

pub fn build_dataset(s: &Settings, partition_path: &Path) -> anyhow::Result<()> {
    let mut rec = RunRecorder::start("build-dataset", s);
    let manifest_path = partition_manifest_for(partition_path);
    rec.input(partition_path)?;
    rec.input(&manifest_path)?;
    let parts = PartitionedSet::load(partition_path, &manifest_path)?;
    parts.verify()?;
    let templates = s.template_set()?;
    let groups = build_dataset_with(
        &parts,
        &templates,
        DatasetOptions {
            seed: s.seed,
            balance: s.dataset.balance,
        },
    )?;
    let sources = [partition_path, manifest_path.as_path()]
        .iter()
        .map(|p| {
            Ok(InputChecksum {
                path: p.display().to_string(),
                sha256: kbound::io::file_sha256(p)?,
            })
        })
        .collect::<kbound::Result<Vec<_>>>()?;
    let (data, manifest) = export(&groups, s.dataset.format, &s.out_dir, sources)?;
    rec.output(&data);
    rec.output(&manifest);
    println!("{} groups written to {}", groups.len(), data.display());
    rec.finish(
        "build-dataset",
        json!({ "groups": groups.len(), "format": s.dataset.format, "balance": s.dataset.balance }),
    )?;
    Ok(())
}

pub fn toy_train(s: &Settings, dataset: &Path) -> anyhow::Result<()> {
    let mut rec = RunRecorder::start("toy-train", s);
    rec.input(dataset)?;
    let groups = load_internal(dataset)?;
    let backend = Backend::connect(&s.endpoint)?;
    let world = backend.world()?;
    let start = ToyModel::new(world.vocabulary()?, world.feature_dim(), s.seed, s.toy.init_scale)?;
    let encoded = start.encode_groups(world.as_ref(), &groups)?;
    let (model, log) = train(&start, &encoded, &s.toy.train)?;

    let log_path = s.out_dir.join("train_log.jsonl");
    std::fs::write(&log_path, log.to_jsonl()?).with_context(|| format!("writing {}", log_path.display()))?;
    rec.output(&log_path);
    let ckpt_path = s.out_dir.join("checkpoint.json");
    Checkpoint::new(&model, Some(s.toy.train)).save(&ckpt_path)?;
    rec.output(&ckpt_path);

    let first = log.records.first().context("training ran zero steps")?;
    let last = log.records.last().context("training ran zero steps")?;
    println!(
        "trained {} steps on {} groups: total loss {:.6} -> {:.6} (l_con {:.6})",
        log.records.len(),
        groups.len(),
        first.total,
        last.total,
        last.l_con
    );
    rec.finish(
        "toy-train",
        json!({
            "groups": groups.len(),
            "parameters": model.dimension(),
            "first": first,
            "last": last,
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct EvalFile<'a> {
    mode: EvalMode,
    model: &'a str,
    report: kbound::eval::RoundedReport,
    exact: &'a AwarenessReport,
    split_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parse_failure_rate: Option<f64>,
}

/// Labeled training material for the modes that need it.
struct Training {
    questions: Vec<QuestionRecord>,
    results: Vec<ProbeResult>,
    split: SplitSpec,
}

pub fn eval(
    s: &Settings,
    mode: EvalMode,
    questions: &Path,
    probe: &Path,
    training: Option<(&Path, &Path)>,
) -> anyhow::Result<()> {
    let stem = format!("eval-{mode}");
    let mut rec = RunRecorder::start("eval", s);
    rec.input(questions)?;
    rec.input(probe)?;
    let qs = questions_from(questions)?;
    let greedy = probe_from(probe)?;
    let lexicon = s.eval.lexicon();
    let split = build_split(&greedy, &qs, &lexicon)?;
    let split_path = s.out_dir.join(format!("{stem}.split.json"));
    write_json(&split_path, &split)?;
    rec.output(&split_path);

    let training = match training {
        Some((tq, tp)) => {
            rec.input(tq)?;
            rec.input(tp)?;
            let questions = questions_from(tq)?;
            let results = probe_from(tp)?;
            let split = build_split(&results, &questions, &lexicon)?;
            Some(Training {
                questions,
                results,
                split,
            })
        }
        None => None,
    };
    if matches!(mode, EvalMode::IcIdk | EvalMode::Verb) && training.is_none() {
        bail!("eval --mode {mode} needs --train-questions and --train-probe");
    }

    let mut threshold = None;
    let mut parse_failure_rate = None;
    let mut responses_json: Option<Vec<serde_json::Value>> = None;
    let (report, outcomes, model): (AwarenessReport, Vec<EvalOutcome>, String) = if mode == EvalMode::Raw {
        let outcomes = raw_outcomes(&greedy, &qs, &split, &lexicon)?;
        let model = split.reference_model_id.clone();
        (compute_report(&outcomes, &split)?, outcomes, model)
    } else {
        let backend = Backend::connect(&s.endpoint)?;
        let templates = s.template_set()?;
        let reader = StanceReader::new(&templates, lexicon.clone());
        let demonstrations = training
            .as_ref()
            .map(|t| Demonstration::from_labeled(&t.results, &t.split))
            .unwrap_or_default();
        let ctx = BaselineContext {
            cfg: &s.endpoint,
            endpoint: backend.endpoint.as_ref(),
            prompts: &s.eval.baselines,
            lexicon: &lexicon,
            reader: &reader,
            demonstrations: &demonstrations,
            verb_training: training.as_ref().map(|t| VerbTraining {
                questions: &t.questions,
                results: &t.results,
                split: &t.split,
            }),
            seed: s.seed,
        };
        if let Some(ckpt) = &backend.checkpoint {
            rec.input(ckpt)?;
        }
        let model = backend.endpoint.model().to_owned();
        let baseline = match mode {
            EvalMode::Prior => Some(PromptBaselineMode::Prior),
            EvalMode::Posterior => Some(PromptBaselineMode::Posterior),
            EvalMode::IcIdk => Some(PromptBaselineMode::IcIdk),
            EvalMode::Verb => Some(PromptBaselineMode::Verb),
            EvalMode::Coke | EvalMode::Raw => None,
        };
        match baseline {
            Some(b) => {
                let run = prompt_baseline(&ctx, b, &qs, &greedy, &split)?;
                threshold = run.threshold;
                parse_failure_rate = run.parse_failure_rate;
                responses_json = Some(
                    qs.iter()
                        .zip(&run.responses)
                        .map(|(q, r)| json!({ "question_id": q.id, "response": r }))
                        .collect(),
                );
                (run.report, run.outcomes, model)
            }
            None => {
                let run = awareness_eval(&ctx, &templates, &qs, &greedy, &split)?;
                responses_json = Some(run.responses.iter().map(|r| json!(r)).collect());
                (run.report, run.outcomes, model)
            }
        }
    };

    let outcomes_path = s.out_dir.join(format!("{stem}.outcomes.jsonl"));
    write_jsonl(&outcomes_path, &outcomes)?;
    rec.output(&outcomes_path);
    if let Some(r) = &responses_json {
        let p = s.out_dir.join(format!("{stem}.responses.jsonl"));
        write_jsonl(&p, r)?;
        rec.output(&p);
    }
    let report_path = s.out_dir.join(format!("{stem}.report.json"));
    write_json(
        &report_path,
        &EvalFile {
            mode,
            model: &model,
            report: report.rounded(),
            exact: &report,
            split_sha256: kbound::io::sha256_hex(&serde_json::to_vec(&split)?),
            threshold,
            parse_failure_rate,
        },
    )?;
    rec.output(&report_path);
    print!("{}", format_table(&[(mode.to_string(), &report)]));
    rec.finish(&stem, json!({ "mode": mode, "report": report.rounded(), "model": model }))?;
    Ok(())
}

pub fn threshold_search(
    s: &Settings,
    questions: &Path,
    probe: &Path,
    apply: Option<(&Path, &Path)>,
) -> anyhow::Result<()> {
    let mut rec = RunRecorder::start("threshold-search", s);
    rec.input(questions)?;
    rec.input(probe)?;
    let qs = questions_from(questions)?;
    let results = probe_from(probe)?;
    let lexicon = s.eval.lexicon();
    let labeled = build_split(&results, &qs, &lexicon)?;
    let kind = s.partition.signal;
    let fitted = uncertainty_baseline(&results, kind, &labeled, &qs, &lexicon)?;
    let mut rows = vec![(format!("{kind} (fit)"), fitted.report.clone())];
    let mut details = json!({ "signal": kind, "threshold": fitted.threshold, "fit": fitted.report.rounded() });

    if let Some((aq, ap)) = apply {
        rec.input(aq)?;
        rec.input(ap)?;
        let qs2 = questions_from(aq)?;
        let res2 = probe_from(ap)?;
        let split2 = build_split(&res2, &qs2, &lexicon)?;
        let outcomes = apply_threshold(&res2, kind, fitted.threshold, &qs2, &split2, &lexicon)?;
        let report = compute_report(&outcomes, &split2)?;
        let p = s.out_dir.join(format!("threshold-{kind}.outcomes.jsonl"));
        write_jsonl(&p, &outcomes)?;
        rec.output(&p);
        details["applied"] = json!(report.rounded());
        rows.push((format!("{kind} (applied)"), report));
    }
    let out = s.out_dir.join(format!("threshold-{kind}.json"));
    write_json(&out, &details)?;
    rec.output(&out);
    println!("threshold {:.6}", fitted.threshold);
    let refs: Vec<(String, &AwarenessReport)> = rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    print!("{}", format_table(&refs));
    rec.finish(&format!("threshold-{kind}"), details)?;
    Ok(())
}

pub fn histogram(s: &Settings, questions: &Path, probe: &Path) -> anyhow::Result<()> {
    let mut rec = RunRecorder::start("histogram", s);
    rec.input(questions)?;
    rec.input(probe)?;
    let qs = questions_from(questions)?;
    let results = probe_from(probe)?;
    let split = build_split(&results, &qs, &s.eval.lexicon())?;
    let h = confidence_histogram(&results, &split, s.partition.signal, s.eval.bins)?;
    let csv = s.out_dir.join("histogram.csv");
    std::fs::write(&csv, h.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    rec.output(&csv);
    let js = s.out_dir.join("histogram.json");
    write_json(&js, &h)?;
    rec.output(&js);
    let below = h.incorrect_share_below(0.4);
    print!("{}", h.to_csv());
    if let Some(share) = below {
        println!("incorrect share below 0.4: {:.1}%", 100.0 * share);
    }
    rec.finish("histogram", json!({ "signal": h.signal, "incorrect_share_below_0.4": below }))?;
    Ok(())
}

pub fn synth(s: &Settings, questions: usize, held_out: usize) -> anyhow::Result<()> {
    if held_out >= questions {
        return Err(kbound::Error::Config(vec![format!(
            "held_out ({held_out}) must be smaller than questions ({questions})"
        )])
        .into());
    }
    let mut rec = RunRecorder::start("synth", s);
    let config = WorldConfig {
        seed: s.seed,
        questions,
        ..WorldConfig::default()
    };
    let world = SyntheticWorld::generate(config)?;
    let records = world.records();
    let (train_q, held_q) = records.split_at(questions - held_out);
    for (name, set) in [("questions.jsonl", &records[..]), ("train.jsonl", train_q), ("heldout.jsonl", held_q)] {
        let p = s.out_dir.join(name);
        write_jsonl(&p, set)?;
        rec.output(&p);
    }
    let url = EndpointSpec::url(&config);
    println!("endpoint for this world: {url}");
    rec.finish("synth", json!({ "endpoint": url, "world": config }))?;
    Ok(())
}

pub fn verify(manifest: &Path) -> anyhow::Result<()> {
    let m = RunManifest::load(manifest)?;
    let problems = m.mismatches();
    if !problems.is_empty() {
        bail!("{} file(s) changed since the run:\n  {}", problems.len(), problems.join("\n  "));
    }
    println!(
        "{}: {} inputs and {} outputs match",
        manifest.display(),
        m.inputs.len(),
        m.outputs.len()
    );
    Ok(())
}
