//! Confusion counts of reported violations against human labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{read_jsonl, MpRecord, MPS, VIOLATIONS};
use crate::error::{Error, Result};
use crate::oracle::Violation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Object,
    Case,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Self::Object),
            "case" => Ok(Self::Case),
            _ => Err(Error::Config(format!("unknown metrics level {s:?} (object or case)"))),
        }
    }
}

/// One labels-file line. Without `object` the label is for the whole MP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub mp_id: String,
    #[serde(default)]
    pub object: Option<String>,
    pub violation: bool,
}

pub fn load_labels(path: &Path) -> Result<Vec<Label>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, truth: bool, reported: bool) {
        match (truth, reported) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Undefined ratios (zero denominators) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    #[serde(flatten)]
    pub counts: Confusion,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(level: Level, c: Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Self {
            level,
            counts: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let c = self.counts;
        write!(
            f,
            "{:?}-level: tp={} fn={} fp={} tn={} accuracy={} precision={} recall={} f1={}",
            self.level,
            c.tp,
            c.fn_,
            c.fp,
            c.tn,
            show(self.accuracy),
            show(self.precision),
            show(self.recall),
            show(self.f1)
        )
    }
}

/// Scores labels against reported violations. Object-level units are the
/// labelled `(mp, object)` pairs; case-level units are labelled MPs, true
/// when the MP has a true case label or any true object label.
pub fn score_labels(
    known_mps: &BTreeSet<String>,
    violations: &[Violation],
    labels: &[Label],
    level: Level,
) -> Result<MetricsReport> {
    let unknown: BTreeSet<String> = labels
        .iter()
        .filter(|l| !known_mps.contains(&l.mp_id))
        .map(|l| l.mp_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownMpIds(unknown.into_iter().collect()));
    }
    let reported_objects: BTreeSet<(String, String)> = violations
        .iter()
        .map(|v| (v.mp_id.clone(), v.object.to_lowercase()))
        .collect();
    let reported_cases: BTreeSet<&str> = violations.iter().map(|v| v.mp_id.as_str()).collect();

    let mut c = Confusion::default();
    match level {
        Level::Object => {
            for l in labels {
                if let Some(object) = &l.object {
                    let reported = reported_objects.contains(&(l.mp_id.clone(), object.to_lowercase()));
                    c.add(l.violation, reported);
                }
            }
        }
        Level::Case => {
            let mut truth: BTreeMap<&str, bool> = BTreeMap::new();
            for l in labels {
                *truth.entry(&l.mp_id).or_insert(false) |= l.violation;
            }
            for (mp, t) in truth {
                c.add(t, reported_cases.contains(mp));
            }
        }
    }
    Ok(MetricsReport::from_counts(level, c))
}

/// Metrics for a run directory.
pub fn compute_metrics(run_dir: &Path, labels: &[Label], level: Level) -> Result<MetricsReport> {
    let mps_path = run_dir.join(MPS);
    if !mps_path.exists() {
        return Err(Error::MissingArtifacts(vec![mps_path.display().to_string()]));
    }
    let known: BTreeSet<String> = read_jsonl::<MpRecord>(&mps_path)?
        .into_iter()
        .map(|m| m.mp_id)
        .collect();
    let violations: Vec<Violation> = read_jsonl(&run_dir.join(VIOLATIONS))?;
    score_labels(&known, &violations, labels, level)
}
