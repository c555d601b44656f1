use std::collections::BTreeMap;
use std::path::PathBuf;

use gazekit::dataset::{load_manifest, load_manifest_with, synth_generate, write_corpus, Corpus, Provenance, ScreenGeometry, SynthConfig};
use gazekit::eval::{
    center_baseline_error, loso_cv, loso_session_cv, partition_experiments, size_study, suggested_sizes, sweep, write_errors_csv, write_folds_csv,
    CvOutcome, Experiment, ExperimentSpec, PipelineConfig, SweepTable,
};
use gazekit::features::Descriptor;
use gazekit::pipeline::{prepare_cached, write_features, ExclusionReason, PreparedSet};
use gazekit::regress::{load_model, save_model, train_on, ForestParams, RegressorKind, RegressorParams};
use gazekit::tracking::{bilateral_filter, track};
use gazekit::{GazeError, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::args::*;
use crate::rundir::{read_manifest, RunDir, RunManifest};
use crate::svg;

pub const DATASET_ENV: &str = "RICETABLETGAZE_ROOT";
pub const CACHE_ENV: &str = "GAZEKIT_CACHE";

/// Mean error (cm) of the RF row on the real dataset, best first.
pub const REFERENCE_RF_ROW: [(Descriptor, f64); 5] = [
    (Descriptor::Mhog, 3.17),
    (Descriptor::Hog, 3.29),
    (Descriptor::Log, 4.76),
    (Descriptor::Lbp, 4.99),
    (Descriptor::Intensity, 7.20),
];
pub const REFERENCE_TOLERANCE_CM: f64 = 0.5;

fn fingerprint_of(config: &Value, corpus: Option<&str>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("json value serializes"));
    h.update(corpus.unwrap_or("").as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn manifest(command: &str, config: Value, corpus: Option<String>, seed: u64, inputs: Vec<String>, summary: Value) -> RunManifest {
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_fingerprint: fingerprint_of(&config, corpus.as_deref()),
        config,
        corpus_fingerprint: corpus,
        seed,
        inputs,
        outputs: Vec::new(),
        summary,
    }
}

/// Resolves `--corpus` to a manifest path, or `None` for the in-memory generator.
fn manifest_path(spec: &str) -> Result<Option<PathBuf>> {
    let path = match spec {
        "synth" => return Ok(None),
        "ricetabletgaze" => {
            let root = std::env::var_os(DATASET_ENV).ok_or_else(|| {
                GazeError::Domain(format!(
                    "--corpus ricetabletgaze needs {DATASET_ENV} pointing at the prepared dataset (a directory with manifest.csv)"
                ))
            })?;
            PathBuf::from(root)
        }
        other => PathBuf::from(other),
    };
    Ok(Some(if path.is_dir() { path.join("manifest.csv") } else { path }))
}

pub fn load_corpus(args: &CorpusArgs, seed: u64) -> Result<Corpus> {
    match manifest_path(&args.corpus)? {
        None => synth_generate(SynthConfig {
            n_subjects: args.subjects,
            sessions_per_subject: args.sessions,
            seed,
            ..SynthConfig::default()
        }),
        Some(path) => match &args.annotations {
            Some(a) => load_manifest_with(&path, Some(a), ScreenGeometry::default()),
            None => load_manifest(&path),
        },
    }
}

fn prepare(corpus: &Corpus, descriptors: &[Descriptor]) -> Result<Vec<PreparedSet>> {
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    prepare_cached(corpus, descriptors, cache.as_deref())
}

fn exclusion_summary(set: &PreparedSet) -> Value {
    json!({
        "usable_frames": set.samples.len(),
        "blink_frames": set.count(ExclusionReason::Blink),
        "no_eye_frames": set.count(ExclusionReason::NoEyes),
        "excluded_subjects": set.excluded_subjects(),
    })
}

fn regressor_params(m: &ModelArgs) -> RegressorParams {
    RegressorParams {
        kind: m.regressor,
        k: m.k,
        forest: ForestParams {
            n_trees: m.trees,
            ..ForestParams::default()
        },
    }
}

fn input_list(args: &CorpusArgs) -> Vec<String> {
    let mut v = vec![args.corpus.clone()];
    if let Some(a) = &args.annotations {
        v.push(a.display().to_string());
    }
    v
}

pub fn synth(a: &SynthArgs) -> Result<PathBuf> {
    let config = SynthConfig {
        n_subjects: a.subjects,
        sessions_per_subject: a.sessions,
        frames_per_point: a.frames_per_point,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(config.clone())?;
    let mut out = RunDir::create(&a.out)?;
    write_corpus(&corpus, out.root())?;
    out.file("manifest.csv");
    out.file("annotations.csv");
    out.file("frames");
    // relative frame paths make the staged copy fingerprint like the final one
    let written = load_manifest(&out.root().join("manifest.csv"))?.fingerprint();
    let summary = json!({
        "records": corpus.len(),
        "subjects": corpus.subjects().len(),
        "corpus_fingerprint": written,
    });
    out.finish(manifest("synth", serde_json::to_value(&config)?, Some(written), a.seed, vec![], summary))
}

pub fn ingest(a: &IngestArgs) -> Result<PathBuf> {
    let corpus = load_corpus(&a.corpus, a.seed)?;
    let mut sessions: BTreeMap<String, usize> = BTreeMap::new();
    let mut postures: BTreeMap<String, usize> = BTreeMap::new();
    let mut unannotated = 0;
    for (i, r) in corpus.records.iter().enumerate() {
        *sessions.entry(r.session_id.clone()).or_default() += 1;
        *postures.entry(r.posture.to_string()).or_default() += 1;
        if corpus.provenance == Provenance::Real && corpus.candidates(i)?.is_empty() {
            unannotated += 1;
        }
    }
    let fp = corpus.fingerprint();
    let summary = json!({
        "records": corpus.len(),
        "subjects": corpus.subjects(),
        "sessions": sessions.len(),
        "frames_per_posture": postures,
        "frames_without_candidates": unannotated,
        "corpus_fingerprint": fp,
    });
    let mut out = RunDir::create(&a.out)?;
    out.write_json("summary.json", &summary)?;
    out.finish(manifest("ingest", json!({ "corpus": a.corpus.corpus }), Some(fp), a.seed, input_list(&a.corpus), summary))
}

pub fn extract(a: &ExtractArgs) -> Result<PathBuf> {
    let corpus = load_corpus(&a.corpus, a.seed)?;
    let set = prepare(&corpus, &[a.feature])?.remove(0);
    let mut out = RunDir::create(&a.out)?;
    write_features(&set, &out.file("features.gzkfeat"))?;
    let mut summary = exclusion_summary(&set);
    summary["descriptor"] = json!(a.feature);
    summary["dim"] = json!(set.dim());
    out.write_json("summary.json", &summary)?;
    let config = json!({ "corpus": a.corpus.corpus, "feature": a.feature });
    out.finish(manifest("extract", config, Some(set.corpus_fingerprint.clone()), a.seed, input_list(&a.corpus), summary))
}

pub fn train(a: &TrainArgs) -> Result<PathBuf> {
    let corpus = load_corpus(&a.corpus, a.seed)?;
    let set = prepare(&corpus, &[a.model.feature])?.remove(0);
    let params = regressor_params(&a.model);
    let model = train_on(&set, &params, a.model.augmented, a.seed)?;
    let mut out = RunDir::create(&a.out)?;
    save_model(&model, &out.file("model.gzkm"))?;
    let mut summary = exclusion_summary(&set);
    summary["training_samples"] = json!(model.fingerprint.samples);
    summary["regressor_input_dim"] = json!(model.regressor_x.dim());
    out.write_json("summary.json", &summary)?;
    let config = json!({
        "corpus": a.corpus.corpus,
        "feature": a.model.feature,
        "regressor": params,
        "augmented": a.model.augmented,
    });
    out.finish(manifest("train", config, Some(set.corpus_fingerprint.clone()), a.seed, input_list(&a.corpus), summary))
}

fn cv_summary(outcome: &CvOutcome, baseline: f64) -> Value {
    let r = &outcome.report;
    json!({
        "mean_error_cm": r.mean_error_cm,
        "std_error_cm": r.std_error_cm,
        "mae_x_cm": r.mae_x_cm,
        "mae_y_cm": r.mae_y_cm,
        "sample_count": r.sample_count,
        "folds": outcome.folds.len(),
        "angular": r.angular,
        "center_baseline_cm": baseline,
        "improvement_vs_center": 1.0 - r.mean_error_cm / baseline,
        "fingerprint": r.fingerprint,
    })
}

fn write_cv(out: &mut RunDir, outcome: &CvOutcome) -> Result<()> {
    out.write_json("report.json", &outcome.report)?;
    write_folds_csv(outcome, &out.file("folds.csv"))?;
    write_errors_csv(&outcome.errors(), &outcome.report.fingerprint, &out.file("errors.csv"))
}

#[derive(Serialize)]
struct ReferenceCheck {
    mhog_rf_cm: f64,
    reference_cm: f64,
    within_tolerance: bool,
    rf_row_order: Vec<Descriptor>,
    rf_row_order_preserved: bool,
}

fn reference_check(table: &SweepTable) -> Option<ReferenceCheck> {
    let mhog = table.get(Descriptor::Mhog, RegressorKind::Rf)?.mean_error_cm;
    let mut row: Vec<(Descriptor, f64)> = Descriptor::ALL
        .iter()
        .filter_map(|&d| table.get(d, RegressorKind::Rf).map(|c| (d, c.mean_error_cm)))
        .collect();
    row.sort_by(|a, b| a.1.total_cmp(&b.1));
    let order: Vec<Descriptor> = row.iter().map(|r| r.0).collect();
    let want: Vec<Descriptor> = REFERENCE_RF_ROW.iter().map(|r| r.0).collect();
    Some(ReferenceCheck {
        mhog_rf_cm: mhog,
        reference_cm: REFERENCE_RF_ROW[0].1,
        within_tolerance: (mhog - REFERENCE_RF_ROW[0].1).abs() <= REFERENCE_TOLERANCE_CM,
        rf_row_order_preserved: order == want,
        rf_row_order: order,
    })
}

pub fn eval(a: &EvalArgs) -> Result<PathBuf> {
    let corpus = load_corpus(&a.corpus, a.seed)?;
    let baseline = center_baseline_error(&corpus.geometry);
    let mut cfg = PipelineConfig::new(a.model.feature, regressor_params(&a.model), a.seed);
    cfg.augmented = a.model.augmented;
    cfg.clamp = a.clamp;
    let mut config = serde_json::to_value(&cfg)?;
    config["corpus"] = json!(a.corpus.corpus);
    config["protocol"] = json!(format!("{:?}", a.protocol).to_lowercase());
    let mut out = RunDir::create(&a.out)?;
    let fp = corpus.fingerprint();

    let summary = match a.protocol {
        Protocol::Loso | Protocol::Session => {
            let set = prepare(&corpus, &[cfg.descriptor])?.remove(0);
            let outcome = if a.protocol == Protocol::Loso { loso_cv(&set, &cfg)? } else { loso_session_cv(&set, &cfg)? };
            write_cv(&mut out, &outcome)?;
            let mut s = cv_summary(&outcome, baseline);
            s["exclusions"] = exclusion_summary(&set);
            s
        }
        Protocol::Sweep => {
            let sets = prepare(&corpus, &Descriptor::ALL)?;
            let table = sweep(&sets, &RegressorKind::ALL, &cfg)?;
            let run_fp = cfg.fingerprint(&fp);
            table.write_csv(&out.file("sweep.csv"), &run_fp)?;
            out.write_json("sweep.json", &table)?;
            let categories: Vec<String> = table.descriptors().iter().map(|d| d.to_string()).collect();
            let series: Vec<(String, Vec<Option<f64>>)> = table
                .regressors()
                .iter()
                .map(|&r| (r.to_string(), table.descriptors().iter().map(|&d| table.get(d, r).map(|c| c.mean_error_cm)).collect()))
                .collect();
            out.write_text("sweep.svg", &svg::bar_chart("Mean error by descriptor and regressor", &categories, &series, "mean error (cm)", &run_fp))?;
            let best = table.best().expect("sweep has cells");
            let mut s = json!({
                "best": { "descriptor": best.descriptor, "regressor": best.regressor, "mean_error_cm": best.mean_error_cm },
                "cells": table.cells.iter().map(|c| json!({"descriptor": c.descriptor, "regressor": c.regressor, "mean_error_cm": c.mean_error_cm})).collect::<Vec<_>>(),
                "center_baseline_cm": baseline,
                "fingerprint": run_fp,
            });
            if a.corpus.corpus == "ricetabletgaze" {
                s["reference_check"] = serde_json::to_value(reference_check(&table))?;
            }
            s
        }
        Protocol::Size => {
            let set = prepare(&corpus, &[cfg.descriptor])?.remove(0);
            let sizes = a.sizes.clone().unwrap_or_else(|| suggested_sizes(set.subjects().len()));
            let curve = size_study(&set, &sizes, a.repeats, &cfg)?;
            curve.write_csv(&out.file("size.csv"))?;
            out.write_json("size.json", &curve)?;
            let xs: Vec<f64> = curve.points.iter().map(|p| p.k as f64).collect();
            let ys: Vec<f64> = curve.points.iter().map(|p| p.mean_error_cm).collect();
            out.write_text("size.svg", &svg::line_chart("Mean error by number of subjects", &xs, &ys, "subjects in group", "mean error (cm)", &curve.fingerprint))?;
            json!({ "spearman_rho": curve.spearman_rho, "points": curve.points, "fingerprint": curve.fingerprint })
        }
        Protocol::Partition => {
            let factor = a.factor.ok_or_else(|| GazeError::Domain("--protocol partition needs --factor glasses|race|posture".into()))?;
            let set = prepare(&corpus, &[cfg.descriptor])?.remove(0);
            let spec = ExperimentSpec {
                repeats: a.repeats,
                ..ExperimentSpec::new(factor, a.seed)
            };
            let report = partition_experiments(&set, &spec, &cfg)?;
            report.write_csv(&out.file("partition.csv"))?;
            out.write_json("partition.json", &report)?;
            let groups: Vec<String> = report.group_subjects.iter().map(|g| g.0.clone()).collect();
            let series: Vec<(String, Vec<Option<f64>>)> = [Experiment::E1, Experiment::E2, Experiment::E3]
                .iter()
                .map(|&e| (format!("{e:?}"), groups.iter().map(|g| report.get(e, g).map(|r| r.mean_error_cm)).collect()))
                .collect();
            out.write_text(
                "partition.svg",
                &svg::bar_chart(&format!("Mean error by {factor} group"), &groups, &series, "mean error (cm)", &report.fingerprint),
            )?;
            json!({ "factor": factor, "results": report.results, "skipped": report.skipped, "fingerprint": report.fingerprint })
        }
    };
    out.write_json("summary.json", &summary)?;
    out.finish(manifest("eval", config, Some(fp), a.seed, input_list(&a.corpus), summary))
}

pub fn track_cmd(a: &TrackArgs) -> Result<PathBuf> {
    let corpus = load_corpus(&a.corpus, a.seed)?;
    let model = load_model(&a.model)?;
    let subject = match &a.subject {
        Some(s) => s.clone(),
        None => corpus.subjects().into_iter().next().expect("corpus is non-empty"),
    };
    let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.records[i].subject_id == subject).collect();
    if idx.is_empty() {
        return Err(GazeError::Domain(format!("no records for subject {subject}")));
    }
    let session = a.session.clone().unwrap_or_else(|| corpus.records[idx[0]].session_id.clone());
    idx.retain(|&i| corpus.records[i].session_id == session);
    if idx.is_empty() {
        return Err(GazeError::Domain(format!("no records for session {session} of subject {subject}")));
    }
    idx.sort_by(|&x, &y| corpus.records[x].timestamp_s.total_cmp(&corpus.records[y].timestamp_s).then(x.cmp(&y)));
    let mut frames = Vec::with_capacity(idx.len());
    let mut candidates = Vec::with_capacity(idx.len());
    for &i in &idx {
        let (f, c) = corpus.load(i)?;
        frames.push(f);
        candidates.push(c);
    }
    let mut raw = track(&frames, &candidates, &model)?;
    if a.clamp {
        for p in raw.points.iter_mut() {
            p.raw = p.raw.map(|g| g.clamped(&corpus.geometry));
        }
    }
    let filtered = bilateral_filter(&raw, a.sigma_t, a.sigma_r)?;
    let truth: Vec<_> = idx.iter().map(|&i| gazekit::dataset::grid_to_screen(corpus.records[i].grid, &corpus.geometry)).collect::<Result<_>>()?;
    let score = |pick: fn(&gazekit::tracking::TrackPoint) -> Option<gazekit::dataset::GazePoint>| {
        let errs: Vec<f64> = filtered.points.iter().zip(&truth).filter_map(|(p, &t)| pick(p).map(|g| gazekit::eval::euclid_error(g, t))).collect();
        if errs.is_empty() {
            None
        } else {
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
    };
    let status = |s| filtered.points.iter().filter(|p| p.status == s).count();
    let summary = json!({
        "subject": subject,
        "session": session,
        "frames": filtered.points.len(),
        "estimates": filtered.estimates(),
        "blink_frames": status(gazekit::tracking::FrameStatus::Blink),
        "no_eye_frames": status(gazekit::tracking::FrameStatus::NoEyes),
        "raw_mean_error_cm": score(|p| p.raw),
        "filtered_mean_error_cm": score(|p| p.filtered),
        "warnings": filtered.warnings,
    });
    let mut out = RunDir::create(&a.out)?;
    filtered.write_csv(&out.file("track.csv"))?;
    out.write_text("track.svg", &filtered.to_svg(&corpus.geometry))?;
    out.write_json("summary.json", &summary)?;
    let config = json!({
        "corpus": a.corpus.corpus,
        "model": a.model.display().to_string(),
        "model_fingerprint": model.fingerprint,
        "subject": subject,
        "session": session,
        "sigma_t": a.sigma_t,
        "sigma_r": a.sigma_r,
        "clamp": a.clamp,
    });
    let mut inputs = input_list(&a.corpus);
    inputs.push(a.model.display().to_string());
    out.finish(manifest("track", config, Some(corpus.fingerprint()), a.seed, inputs, summary))
}

pub fn report(a: &ReportArgs) -> Result<PathBuf> {
    let runs: Vec<(PathBuf, RunManifest)> = a.runs.iter().map(|d| read_manifest(d).map(|m| (d.clone(), m))).collect::<Result<_>>()?;
    let (_, first) = &runs[0];
    for (dir, m) in &runs[1..] {
        if m.corpus_fingerprint != first.corpus_fingerprint || m.seed != first.seed {
            return Err(GazeError::Fingerprint(format!(
                "{} was run on corpus {:?} with seed {}, but {} used corpus {:?} with seed {}",
                dir.display(),
                m.corpus_fingerprint,
                m.seed,
                runs[0].0.display(),
                first.corpus_fingerprint,
                first.seed
            )));
        }
    }
    let mut out = RunDir::create(&a.out)?;
    let mut w = csv::Writer::from_path(out.file("merged.csv"))?;
    w.write_record(["run", "command", "protocol", "config_fingerprint", "mean_error_cm"])?;
    for (dir, m) in &runs {
        w.write_record([
            dir.display().to_string(),
            m.command.clone(),
            m.config.get("protocol").and_then(Value::as_str).unwrap_or("").to_string(),
            m.config_fingerprint.clone(),
            m.summary.get("mean_error_cm").and_then(Value::as_f64).map_or(String::new(), |v| format!("{v:.4}")),
        ])?;
    }
    w.flush().map_err(|e| GazeError::Io { path: a.out.clone(), source: e })?;
    drop(w);
    let merged = json!({
        "corpus_fingerprint": first.corpus_fingerprint,
        "seed": first.seed,
        "runs": runs.iter().map(|(d, m)| json!({
            "run": d.display().to_string(),
            "command": m.command,
            "config_fingerprint": m.config_fingerprint,
            "summary": m.summary,
        })).collect::<Vec<_>>(),
    });
    out.write_json("merged.json", &merged)?;
    let config = json!({ "runs": a.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>() });
    let summary = json!({ "runs": runs.len() });
    out.finish(manifest("report", config, first.corpus_fingerprint.clone(), first.seed, a.runs.iter().map(|p| p.display().to_string()).collect(), summary))
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Track(a) => track_cmd(a),
        Command::Report(a) => report(a),
    }
}

