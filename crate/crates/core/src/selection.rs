//! Scoring candidate follow-ups and greedily picking the ones to caption.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::LocalizationMap;
use crate::caption::NounPhrase;
use crate::error::{Error, Result};
use crate::imagery::BitMask;
use crate::transforms::TransformSpec;

pub const DEFAULT_T_DOWN: f64 = 0.2;
pub const DEFAULT_T_UP: f64 = 0.9;
pub const DEFAULT_FOLLOWUPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fate {
    Retain,
    Ambiguous,
    Disappear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FateThresholds {
    pub t_down: f64,
    pub t_up: f64,
}

impl Default for FateThresholds {
    fn default() -> Self {
        Self {
            t_down: DEFAULT_T_DOWN,
            t_up: DEFAULT_T_UP,
        }
    }
}

impl FateThresholds {
    pub fn new(t_down: f64, t_up: f64) -> Result<Self> {
        if !(0.0 <= t_down && t_down < t_up && t_up <= 1.0) {
            return Err(Error::Config(format!(
                "fate thresholds need 0 <= t_down < t_up <= 1, got t_down={t_down}, t_up={t_up}"
            )));
        }
        Ok(Self { t_down, t_up })
    }

    pub fn classify(&self, ratio: f64) -> Fate {
        if ratio >= self.t_up {
            Fate::Retain
        } else if ratio <= self.t_down {
            Fate::Disappear
        } else {
            Fate::Ambiguous
        }
    }
}

/// Share of the object's mask that survives the transformation.
pub fn retain_ratio(m_loc: &BitMask, m_tran: &BitMask) -> Result<f64> {
    let total = m_loc.count();
    if total == 0 {
        return Err(Error::InvalidInput("retain ratio of an empty location mask".into()));
    }
    Ok(m_loc.intersection_count(m_tran)? as f64 / total as f64)
}

pub fn classify_fate(ratio: f64, t_down: f64, t_up: f64) -> Result<Fate> {
    Ok(FateThresholds::new(t_down, t_up)?.classify(ratio))
}

pub fn ambiguity_score(n_disappear: usize, n_ambiguous: usize) -> i64 {
    n_disappear as i64 - n_ambiguous as i64
}

/// Jaccard distance of two masks.
pub fn mask_difference(a: &BitMask, b: &BitMask) -> Result<f64> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Err(Error::InvalidInput("difference of two empty masks".into()));
    }
    Ok(1.0 - a.intersection_count(b)? as f64 / union as f64)
}

/// Smallest difference between `candidate` and any selected mask.
pub fn diversity_score(candidate: &BitMask, selected: &[&BitMask]) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::InvalidInput("diversity needs at least one selected follow-up".into()));
    }
    let mut best = f64::INFINITY;
    for s in selected {
        best = best.min(mask_difference(candidate, s)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFate {
    /// Position in the source caption's object list.
    pub index: usize,
    pub object: NounPhrase,
    pub ratio: f64,
    pub fate: Fate,
}

/// A candidate transformation with the fate of every located object.
#[derive(Debug, Clone)]
pub struct CandidateAssessment {
    pub spec: TransformSpec,
    pub m_tran: BitMask,
    pub fates: Vec<ObjectFate>,
    pub n_retain: usize,
    pub n_ambiguous: usize,
    pub n_disappear: usize,
    pub score_ambiguity: i64,
}

impl CandidateAssessment {
    pub fn new(
        spec: TransformSpec,
        m_tran: BitMask,
        map: &LocalizationMap,
        thresholds: FateThresholds,
    ) -> Result<Self> {
        let mut fates = Vec::with_capacity(map.located.len());
        for l in &map.located {
            let ratio = retain_ratio(&l.mask, &m_tran)?;
            fates.push(ObjectFate {
                index: l.index,
                object: l.object.clone(),
                ratio,
                fate: thresholds.classify(ratio),
            });
        }
        let count = |f: Fate| fates.iter().filter(|o| o.fate == f).count();
        let (n_retain, n_ambiguous, n_disappear) =
            (count(Fate::Retain), count(Fate::Ambiguous), count(Fate::Disappear));
        Ok(Self {
            spec,
            m_tran,
            fates,
            n_retain,
            n_ambiguous,
            n_disappear,
            score_ambiguity: ambiguity_score(n_disappear, n_ambiguous),
        })
    }

    /// At least one object with a definite fate.
    pub fn is_valid(&self) -> bool {
        self.n_retain + self.n_disappear > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Full,
    NoAmbiguity,
    NoDiversity,
    Random,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 4] = [Self::Full, Self::NoAmbiguity, Self::NoDiversity, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAmbiguity => "no_ambiguity",
            Self::NoDiversity => "no_diversity",
            Self::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown selection mode {s:?}")))
    }
}

/// Scores of one remaining candidate in one greedy round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundScore {
    pub candidate: usize,
    pub ambiguity: f64,
    pub diversity: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRound {
    pub picked: usize,
    pub scores: Vec<RoundScore>,
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Index of the largest value; the earliest wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn greedy(
    candidates: &[CandidateAssessment],
    k: usize,
    use_ambiguity: bool,
    use_diversity: bool,
    first: Option<usize>,
) -> Result<(Vec<usize>, Vec<SelectionRound>)> {
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    let mut picked: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    while picked.len() < k && !remaining.is_empty() {
        let raw_amb: Vec<f64> = remaining
            .iter()
            .map(|&i| candidates[i].score_ambiguity as f64)
            .collect();
        let (choice, scores) = if picked.is_empty() {
            let at = match first {
                Some(f) => remaining.iter().position(|&i| i == f).expect("first pick in pool"),
                None => argmax(&raw_amb),
            };
            let scores = remaining
                .iter()
                .zip(&raw_amb)
                .map(|(&candidate, &a)| RoundScore {
                    candidate,
                    ambiguity: a,
                    diversity: None,
                    total: a,
                })
                .collect();
            (at, scores)
        } else {
            let selected: Vec<&BitMask> = picked.iter().map(|&i| &candidates[i].m_tran).collect();
            let raw_div: Vec<f64> = remaining
                .iter()
                .map(|&i| diversity_score(&candidates[i].m_tran, &selected))
                .collect::<Result<_>>()?;
            let amb = if use_ambiguity { min_max(&raw_amb) } else { vec![0.0; raw_amb.len()] };
            let div = if use_diversity { min_max(&raw_div) } else { vec![0.0; raw_div.len()] };
            let totals: Vec<f64> = amb.iter().zip(&div).map(|(a, d)| a + d).collect();
            let scores = remaining
                .iter()
                .enumerate()
                .map(|(j, &candidate)| RoundScore {
                    candidate,
                    ambiguity: amb[j],
                    diversity: Some(div[j]),
                    total: totals[j],
                })
                .collect();
            (argmax(&totals), scores)
        };
        let chosen = remaining.remove(choice);
        picked.push(chosen);
        trace.push(SelectionRound {
            picked: chosen,
            scores,
        });
    }
    Ok((picked, trace))
}

/// Greedy pick of up to `k` candidates: the first maximises the ambiguity
/// score, each later one the sum of min-max normalised ambiguity and
/// diversity over the candidates still in the pool. Returns indices into
/// `candidates` in pick order, plus the per-round scores.
pub fn select_followups_traced(
    candidates: &[CandidateAssessment],
    k: usize,
) -> Result<(Vec<usize>, Vec<SelectionRound>)> {
    check_pool(candidates, k)?;
    greedy(candidates, k, true, true, None)
}

pub fn select_followups(candidates: &[CandidateAssessment], k: usize) -> Result<Vec<usize>> {
    Ok(select_followups_traced(candidates, k)?.0)
}

fn check_pool(candidates: &[CandidateAssessment], k: usize) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to select from".into()));
    }
    if k == 0 {
        return Err(Error::Config("number of follow-ups must be at least 1".into()));
    }
    Ok(())
}

/// Selection with one of the scoring ingredients switched off. Without the
/// ambiguity score the first pick is random and later picks follow
/// diversity alone; without diversity every pick follows ambiguity alone;
/// `Random` samples `k` candidates uniformly.
pub fn select_with_mode(
    candidates: &[CandidateAssessment],
    k: usize,
    mode: SelectionMode,
    seed: u64,
) -> Result<Vec<usize>> {
    check_pool(candidates, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SelectionMode::Full => select_followups(candidates, k),
        SelectionMode::NoAmbiguity => {
            let first = rng.random_range(0..candidates.len());
            Ok(greedy(candidates, k, false, true, Some(first))?.0)
        }
        SelectionMode::NoDiversity => {
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by_key(|&i| (std::cmp::Reverse(candidates[i].score_ambiguity), i));
            order.truncate(k);
            Ok(order)
        }
        SelectionMode::Random => Ok(index::sample(&mut rng, candidates.len(), k.min(candidates.len())).into_vec()),
    }
}
