//! Error metrics and cross-validation protocols. Errors are aggregated over
//! images; per-subject means are kept for diagnosis.

mod partition;
mod study;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{GazePoint, ScreenGeometry};
use crate::error::{GazeError, Result};
use crate::features::Descriptor;
use crate::pipeline::{PreparedSample, PreparedSet};
use crate::regress::{fit_gaze, RegressorParams, TrainingFingerprint};
use crate::seed;

pub use partition::{partition_experiments, Experiment, ExperimentSpec, Factor, GroupResult, PartitionReport};
pub use study::{size_study, spearman, suggested_sizes, sweep, SizeCurve, SizePoint, SweepCell, SweepTable};

/// Viewing distances used for the angular error band.
pub const VIEW_DISTANCES_CM: [f64; 3] = [30.0, 40.0, 50.0];

pub fn euclid_error(pred: GazePoint, truth: GazePoint) -> f64 {
    (pred.x_cm - truth.x_cm).hypot(pred.y_cm - truth.y_cm)
}

/// Visual angle in degrees subtended by `e_cm` at distance `d_cm`.
pub fn angular_error(e_cm: f64, d_cm: f64) -> Result<f64> {
    if !(d_cm > 0.0) {
        return Err(GazeError::domain(format!("viewing distance must be positive, got {d_cm}")));
    }
    Ok((e_cm / d_cm).atan().to_degrees())
}

/// Mean error of always predicting the screen center, over the grid points.
pub fn center_baseline_error(geom: &ScreenGeometry) -> f64 {
    let c = geom.center();
    let pts: Vec<f64> = geom
        .grid()
        .map(|g| euclid_error(crate::dataset::grid_to_screen(g, geom).expect("grid points are valid"), c))
        .collect();
    pts.iter().sum::<f64>() / pts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub descriptor: Descriptor,
    pub regressor: RegressorParams,
    pub augmented: bool,
    /// Clamp predictions to the screen before scoring.
    pub clamp: bool,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(descriptor: Descriptor, regressor: RegressorParams, seed: u64) -> Self {
        Self {
            descriptor,
            regressor,
            augmented: false,
            clamp: false,
            seed,
        }
    }

    /// Hash of this configuration together with a corpus fingerprint.
    pub fn fingerprint(&self, corpus: &str) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(corpus.as_bytes());
        crate::dataset::hex16(&h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub record: usize,
    pub subject_id: String,
    pub session_id: String,
    pub truth: GazePoint,
    pub predicted: GazePoint,
    pub error_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub sample_count: usize,
    pub mean_error_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularBand {
    pub distance_cm: f64,
    pub mean_error_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mean_error_cm: f64,
    pub std_error_cm: f64,
    pub mae_x_cm: f64,
    pub mae_y_cm: f64,
    pub sample_count: usize,
    pub per_subject: Vec<SubjectSummary>,
    pub angular: Vec<AngularBand>,
    pub fingerprint: String,
}

impl ErrorReport {
    /// Aggregates per-image errors; they are sorted by record first so the
    /// result does not depend on fold order.
    pub fn from_errors(errors: &[SampleError], fingerprint: &str) -> Result<Self> {
        if errors.is_empty() {
            return Err(GazeError::domain("no test samples to score"));
        }
        let mut sorted: Vec<&SampleError> = errors.iter().collect();
        sorted.sort_by_key(|e| e.record);
        let n = sorted.len() as f64;
        let mean = sorted.iter().map(|e| e.error_cm).sum::<f64>() / n;
        let var = sorted.iter().map(|e| (e.error_cm - mean).powi(2)).sum::<f64>() / n;
        let mae_x = sorted.iter().map(|e| (e.predicted.x_cm - e.truth.x_cm).abs()).sum::<f64>() / n;
        let mae_y = sorted.iter().map(|e| (e.predicted.y_cm - e.truth.y_cm).abs()).sum::<f64>() / n;
        let mut by_subject: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for e in &sorted {
            let entry = by_subject.entry(&e.subject_id).or_default();
            entry.0 += 1;
            entry.1 += e.error_cm;
        }
        Ok(Self {
            mean_error_cm: mean,
            std_error_cm: var.sqrt(),
            mae_x_cm: mae_x,
            mae_y_cm: mae_y,
            sample_count: sorted.len(),
            per_subject: by_subject
                .into_iter()
                .map(|(s, (k, sum))| SubjectSummary {
                    subject_id: s.to_string(),
                    sample_count: k,
                    mean_error_cm: sum / k as f64,
                })
                .collect(),
            angular: VIEW_DISTANCES_CM
                .iter()
                .map(|&d| AngularBand {
                    distance_cm: d,
                    mean_error_deg: sorted.iter().map(|e| angular_error(e.error_cm, d).expect("positive distance")).sum::<f64>() / n,
                })
                .collect(),
            fingerprint: fingerprint.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Held-out subject, or `subject/session`.
    pub fold: String,
    pub train_count: usize,
    pub test_count: usize,
    pub mean_error_cm: f64,
    #[serde(skip)]
    pub errors: Vec<SampleError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub report: ErrorReport,
    pub folds: Vec<FoldResult>,
}

impl CvOutcome {
    pub fn errors(&self) -> Vec<SampleError> {
        let mut all: Vec<SampleError> = self.folds.iter().flat_map(|f| f.errors.iter().cloned()).collect();
        all.sort_by_key(|e| e.record);
        all
    }
}

/// Trains on `train`, scores `test`.
fn run_fold(set: &PreparedSet, train: &[&PreparedSample], test: &[&PreparedSample], cfg: &PipelineConfig, fold: String, fold_seed: u64) -> Result<FoldResult> {
    let fingerprint = TrainingFingerprint {
        corpus: set.corpus_fingerprint.clone(),
        seed: fold_seed,
        samples: train.len(),
    };
    let model = fit_gaze(train, set.geometry.class_count(), set.descriptor, &cfg.regressor, cfg.augmented, fingerprint)
        .map_err(|e| annotate(e, &fold))?;
    let errors = test
        .iter()
        .map(|s| {
            let mut p = model.predict_sample(s)?;
            if cfg.clamp {
                p = p.clamped(&set.geometry);
            }
            let r = set.record(s);
            Ok(SampleError {
                record: s.record,
                subject_id: r.subject_id.clone(),
                session_id: r.session_id.clone(),
                truth: s.truth,
                predicted: p,
                error_cm: euclid_error(p, s.truth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = errors.iter().map(|e| e.error_cm).sum::<f64>() / errors.len().max(1) as f64;
    Ok(FoldResult {
        fold,
        train_count: train.len(),
        test_count: test.len(),
        mean_error_cm: mean,
        errors,
    })
}

fn annotate(e: GazeError, fold: &str) -> GazeError {
    match e {
        GazeError::Domain(m) => GazeError::Domain(format!("fold {fold}: {m}")),
        GazeError::Numerical(m) => GazeError::Numerical(format!("fold {fold}: {m}")),
        other => other,
    }
}

fn check_descriptor(set: &PreparedSet, cfg: &PipelineConfig) -> Result<()> {
    if set.descriptor != cfg.descriptor {
        return Err(GazeError::domain(format!(
            "prepared features are {} but the configuration asks for {}",
            set.descriptor, cfg.descriptor
        )));
    }
    Ok(())
}

/// Leave-one-subject-out over the samples at `pool` (indices into
/// `set.samples`). Each fold's seed depends only on the held-out subject.
pub fn loso_pool(set: &PreparedSet, pool: &[usize], cfg: &PipelineConfig) -> Result<CvOutcome> {
    check_descriptor(set, cfg)?;
    let mut subjects: Vec<&str> = Vec::new();
    for &i in pool {
        let s = set.subject_of(&set.samples[i]);
        if !subjects.contains(&s) {
            subjects.push(s);
        }
    }
    if subjects.len() < 2 {
        return Err(GazeError::domain(format!("leave-one-subject-out needs 2 subjects, found {}", subjects.len())));
    }
    let folds = subjects
        .par_iter()
        .map(|&held| {
            let (test, train): (Vec<&PreparedSample>, Vec<&PreparedSample>) =
                pool.iter().map(|&i| &set.samples[i]).partition(|s| set.subject_of(s) == held);
            run_fold(set, &train, &test, cfg, held.to_string(), seed::derive_str(cfg.seed, "loso", held))
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<SampleError> = folds.iter().flat_map(|f| f.errors.iter().cloned()).collect();
    Ok(CvOutcome {
        report: ErrorReport::from_errors(&errors, &cfg.fingerprint(&set.corpus_fingerprint))?,
        folds,
    })
}

/// Person-independent evaluation over every usable sample.
pub fn loso_cv(set: &PreparedSet, cfg: &PipelineConfig) -> Result<CvOutcome> {
    let all: Vec<usize> = (0..set.samples.len()).collect();
    loso_pool(set, &all, cfg)
}

/// LOSO restricted to the given subjects.
pub fn loso_subjects(set: &PreparedSet, subjects: &[String], cfg: &PipelineConfig) -> Result<CvOutcome> {
    let pool: Vec<usize> = (0..set.samples.len())
        .filter(|&i| subjects.iter().any(|s| s == set.subject_of(&set.samples[i])))
        .collect();
    loso_pool(set, &pool, cfg)
}

/// Person-dependent evaluation: per subject, leave one session out.
/// Subjects with a single session are skipped with a warning.
pub fn loso_session_cv(set: &PreparedSet, cfg: &PipelineConfig) -> Result<CvOutcome> {
    check_descriptor(set, cfg)?;
    let mut tasks: Vec<(String, String)> = Vec::new();
    for subject in set.subjects() {
        let mut sessions: Vec<String> = Vec::new();
        for s in &set.samples {
            let r = set.record(s);
            if r.subject_id == subject && !sessions.contains(&r.session_id) {
                sessions.push(r.session_id.clone());
            }
        }
        if sessions.len() < 2 {
            log::warn!("subject {subject}: {} session(s); skipped in leave-one-session-out", sessions.len());
            continue;
        }
        tasks.extend(sessions.into_iter().map(|sess| (subject.clone(), sess)));
    }
    if tasks.is_empty() {
        return Err(GazeError::domain("no subject has 2 or more sessions"));
    }
    let folds = tasks
        .par_iter()
        .map(|(subject, session)| {
            let mine = set.samples.iter().filter(|s| &set.record(s).subject_id == subject);
            let (test, train): (Vec<&PreparedSample>, Vec<&PreparedSample>) = mine.partition(|s| &set.record(s).session_id == session);
            let name = format!("{subject}/{session}");
            let fold_seed = seed::derive_str(cfg.seed, "session", &name);
            run_fold(set, &train, &test, cfg, name, fold_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<SampleError> = folds.iter().flat_map(|f| f.errors.iter().cloned()).collect();
    Ok(CvOutcome {
        report: ErrorReport::from_errors(&errors, &cfg.fingerprint(&set.corpus_fingerprint))?,
        folds,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| GazeError::io(path, e))
}

/// One row per fold: `fold,train_count,test_count,mean_error_cm,fingerprint`.
pub fn write_folds_csv(outcome: &CvOutcome, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "train_count", "test_count", "mean_error_cm", "fingerprint"])?;
    for f in &outcome.folds {
        w.write_record([
            f.fold.clone(),
            f.train_count.to_string(),
            f.test_count.to_string(),
            format!("{:.6}", f.mean_error_cm),
            outcome.report.fingerprint.clone(),
        ])?;
    }
    w.flush().map_err(|e| GazeError::io(path, e))
}

/// One row per test image.
pub fn write_errors_csv(errors: &[SampleError], fingerprint: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record", "subject_id", "session_id", "truth_x_cm", "truth_y_cm", "pred_x_cm", "pred_y_cm", "error_cm", "fingerprint"])?;
    for e in errors {
        w.write_record([
            e.record.to_string(),
            e.subject_id.clone(),
            e.session_id.clone(),
            format!("{:.4}", e.truth.x_cm),
            format!("{:.4}", e.truth.y_cm),
            format!("{:.6}", e.predicted.x_cm),
            format!("{:.6}", e.predicted.y_cm),
            format!("{:.6}", e.error_cm),
            fingerprint.to_string(),
        ])?;
    }
    w.flush().map_err(|e| GazeError::io(path, e))
}
