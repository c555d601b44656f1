//! Three-experiment design for a subject factor: separate training per group
//! (E1), pooled LOSO split by group (E2), and a mixed pool drawing equally
//! from every group (E3).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{loso_cv, loso_pool, PipelineConfig, SampleError};
use crate::dataset::{Posture, Race, SampleRecord};
use crate::error::{GazeError, Result};
use crate::pipeline::PreparedSet;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Glasses,
    Race,
    Posture,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Glasses, Factor::Race, Factor::Posture];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Glasses => "glasses",
            Factor::Race => "race",
            Factor::Posture => "posture",
        }
    }

    /// Group names in reporting order.
    pub fn groups(self) -> Vec<&'static str> {
        match self {
            Factor::Glasses => vec!["no-glasses", "glasses"],
            Factor::Race => Race::ALL.iter().map(|r| r.as_str()).collect(),
            Factor::Posture => Posture::ALL.iter().map(|p| p.as_str()).collect(),
        }
    }

    /// Posture varies per session; the other factors per subject.
    pub fn group_of(self, r: &SampleRecord) -> &'static str {
        match self {
            Factor::Glasses if r.glasses => "glasses",
            Factor::Glasses => "no-glasses",
            Factor::Race => r.race.as_str(),
            Factor::Posture => r.posture.as_str(),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| GazeError::domain(format!("unknown factor '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Experiment {
    E1,
    E2,
    E3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub factor: Factor,
    pub repeats: usize,
    /// Seeds the subject subsampling; fold seeds come from the pipeline
    /// configuration.
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(factor: Factor, seed: u64) -> Self {
        Self { factor, repeats: 5, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub experiment: Experiment,
    pub group: String,
    /// Subjects per run contributing test data for this group.
    pub subjects: usize,
    pub run_errors_cm: Vec<f64>,
    pub mean_error_cm: f64,
    /// Test images over all runs.
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub factor: Factor,
    /// Subjects with usable data in each group.
    pub group_subjects: Vec<(String, usize)>,
    /// Group size after equalization.
    pub equalized_size: usize,
    pub results: Vec<GroupResult>,
    /// Pooled LOSO mean error that E2 regroups.
    pub e2_overall_cm: f64,
    pub skipped: Vec<String>,
    pub fingerprint: String,
}

impl PartitionReport {
    pub fn get(&self, experiment: Experiment, group: &str) -> Option<&GroupResult> {
        self.results.iter().find(|r| r.experiment == experiment && r.group == group)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["factor", "experiment", "group", "subjects", "runs", "mean_error_cm", "sample_count", "fingerprint"])?;
        for r in &self.results {
            w.write_record([
                self.factor.to_string(),
                format!("{:?}", r.experiment),
                r.group.clone(),
                r.subjects.to_string(),
                r.run_errors_cm.len().to_string(),
                format!("{:.4}", r.mean_error_cm),
                r.sample_count.to_string(),
                self.fingerprint.clone(),
            ])?;
        }
        w.flush().map_err(|e| GazeError::io(path, e))
    }
}

struct Group {
    name: &'static str,
    subjects: Vec<String>,
    /// Sample indices belonging to the group.
    samples: Vec<usize>,
}

fn groups(set: &PreparedSet, factor: Factor) -> Vec<Group> {
    factor
        .groups()
        .into_iter()
        .filter_map(|name| {
            let samples: Vec<usize> = (0..set.samples.len()).filter(|&i| factor.group_of(set.record(&set.samples[i])) == name).collect();
            if samples.is_empty() {
                return None;
            }
            let mut subjects: Vec<String> = Vec::new();
            for &i in &samples {
                let s = set.subject_of(&set.samples[i]);
                if !subjects.iter().any(|x| x == s) {
                    subjects.push(s.to_string());
                }
            }
            Some(Group { name, subjects, samples })
        })
        .collect()
}

fn pick(subjects: &[String], k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<String> {
    let mut idx = sample(rng, subjects.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| subjects[i].clone()).collect()
}

fn group_errors<'a>(errors: &'a [SampleError], set: &PreparedSet, factor: Factor) -> BTreeMap<&'static str, Vec<&'a SampleError>> {
    let mut out: BTreeMap<&'static str, Vec<&SampleError>> = BTreeMap::new();
    for e in errors {
        out.entry(factor.group_of(&set.records[e.record])).or_default().push(e);
    }
    out
}

fn mean(errors: &[&SampleError]) -> f64 {
    errors.iter().map(|e| e.error_cm).sum::<f64>() / errors.len() as f64
}

pub fn partition_experiments(set: &PreparedSet, spec: &ExperimentSpec, cfg: &PipelineConfig) -> Result<PartitionReport> {
    if spec.repeats == 0 {
        return Err(GazeError::domain("partition experiments need at least one repeat"));
    }
    let factor = spec.factor;
    let all = groups(set, factor);
    let mut skipped = Vec::new();
    let valid: Vec<&Group> = all
        .iter()
        .filter(|g| {
            let ok = g.subjects.len() >= 2;
            if !ok {
                let msg = format!("group {} has {} subject(s); E1/E3 skipped", g.name, g.subjects.len());
                log::warn!("{msg}");
                skipped.push(msg);
            }
            ok
        })
        .collect();
    let n = valid.iter().map(|g| g.subjects.len()).min().unwrap_or(0);
    let mut results = Vec::new();

    // E1: each group on its own, larger groups subsampled to n subjects
    for g in &valid {
        let runs = if g.subjects.len() == n { 1 } else { spec.repeats };
        let mut errs = Vec::new();
        let mut count = 0;
        for r in 0..runs {
            let chosen = if runs == 1 {
                g.subjects.clone()
            } else {
                pick(&g.subjects, n, &mut seed::rng(spec.seed, &format!("e1-{factor}-{}", g.name), r as u64))
            };
            let pool: Vec<usize> = g.samples.iter().copied().filter(|&i| chosen.iter().any(|s| s == set.subject_of(&set.samples[i]))).collect();
            let out = loso_pool(set, &pool, cfg)?;
            count += out.report.sample_count;
            errs.push(out.report.mean_error_cm);
        }
        results.push(GroupResult {
            experiment: Experiment::E1,
            group: g.name.to_string(),
            subjects: n,
            mean_error_cm: errs.iter().sum::<f64>() / errs.len() as f64,
            run_errors_cm: errs,
            sample_count: count,
        });
    }

    // E2: pooled LOSO, errors split by group
    let pooled = loso_cv(set, cfg)?;
    let pooled_errors = pooled.errors();
    let by_group = group_errors(&pooled_errors, set, factor);
    for g in &all {
        if let Some(errs) = by_group.get(g.name) {
            let m = mean(errs);
            results.push(GroupResult {
                experiment: Experiment::E2,
                group: g.name.to_string(),
                subjects: g.subjects.len(),
                run_errors_cm: vec![m],
                mean_error_cm: m,
                sample_count: errs.len(),
            });
        }
    }

    // E3: one mixed pool with n / G subjects from each group
    if valid.len() >= 2 {
        let per = (n / valid.len()).max(1);
        let mut runs: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for r in 0..spec.repeats {
            let mut rng = seed::rng(spec.seed, &format!("e3-{factor}"), r as u64);
            let mut taken: Vec<String> = Vec::new();
            let mut pool = Vec::new();
            for g in &valid {
                let fresh: Vec<String> = g.subjects.iter().filter(|s| !taken.contains(s)).cloned().collect();
                let source = if fresh.len() >= per { &fresh } else { &g.subjects };
                let chosen = pick(source, per, &mut rng);
                pool.extend(g.samples.iter().copied().filter(|&i| chosen.iter().any(|s| s == set.subject_of(&set.samples[i]))));
                taken.extend(chosen);
            }
            pool.sort_unstable();
            pool.dedup();
            let out = loso_pool(set, &pool, cfg)?;
            let errors = out.errors();
            for (name, errs) in group_errors(&errors, set, factor) {
                let entry = runs.entry(name).or_default();
                entry.0.push(mean(&errs));
                entry.1 += errs.len();
            }
        }
        for g in &valid {
            if let Some((errs, count)) = runs.remove(g.name) {
                results.push(GroupResult {
                    experiment: Experiment::E3,
                    group: g.name.to_string(),
                    subjects: per,
                    mean_error_cm: errs.iter().sum::<f64>() / errs.len() as f64,
                    run_errors_cm: errs,
                    sample_count: count,
                });
            }
        }
    } else {
        skipped.push("fewer than 2 groups with 2+ subjects; E3 skipped".into());
    }

    Ok(PartitionReport {
        factor,
        group_subjects: all.iter().map(|g| (g.name.to_string(), g.subjects.len())).collect(),
        equalized_size: n,
        results,
        e2_overall_cm: pooled.report.mean_error_cm,
        skipped,
        fingerprint: cfg.fingerprint(&set.corpus_fingerprint),
    })
}
