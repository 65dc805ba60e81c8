//! Output relations between a source caption and a follow-up caption.
//!
//! Rule 1: an object that survives the transformation must still be
//! described. Rule 2: an object that is gone must not be. Rule 3: when
//! nothing was cut, both captions must name the same objects.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alignment::LocalizationMap;
use crate::caption::{contains_object, extract_objects, Caption, NounPhrase, SemanticMatcher};
use crate::error::Result;
use crate::imagery::BitMask;
use crate::selection::{CandidateAssessment, Fate, FateThresholds, ObjectFate};
use crate::transforms::TransformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Guess at the kind of captioning error behind a violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorHint {
    #[serde(rename = "Type1.1")]
    Type1_1,
    #[serde(rename = "Type1.2")]
    Type1_2,
    #[serde(rename = "Type2.1")]
    Type2_1,
    #[serde(rename = "Type2.2")]
    Type2_2,
    Type3,
    Unknown,
}

impl ErrorHint {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Type1_1 => "Type1.1",
            Self::Type1_2 => "Type1.2",
            Self::Type2_1 => "Type2.1",
            Self::Type2_2 => "Type2.2",
            Self::Type3 => "Type3",
            Self::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for ErrorHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The caption that is at fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Followup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub mp_id: String,
    pub rule: Rule,
    pub object: String,
    pub side: Side,
    pub hint: ErrorHint,
}

/// A source/follow-up pair with everything needed to check the rules.
#[derive(Debug, Clone, PartialEq)]
pub struct MetamorphicPair {
    pub id: String,
    pub spec: TransformSpec,
    pub source_caption: Caption,
    pub followup_caption: Caption,
    pub source_objects: Vec<NounPhrase>,
    pub followup_objects: Vec<NounPhrase>,
    pub fates: Vec<ObjectFate>,
    pub unlocated: Vec<NounPhrase>,
    pub violations: Vec<Violation>,
}

impl MetamorphicPair {
    pub fn with_fate(&self, fate: Fate) -> impl Iterator<Item = &ObjectFate> {
        self.fates.iter().filter(move |f| f.fate == fate)
    }

    /// Located objects with a definite fate.
    pub fn valid_objects(&self) -> usize {
        self.fates.iter().filter(|f| f.fate != Fate::Ambiguous).count()
    }

    pub fn is_valid(&self) -> bool {
        self.valid_objects() > 0
    }

    fn violation(&self, rule: Rule, object: &NounPhrase, side: Side, hint: ErrorHint) -> Violation {
        Violation {
            mp_id: self.id.clone(),
            rule,
            object: object.surface.clone(),
            side,
            hint,
        }
    }

    /// Follow-up objects naming nothing in the source caption.
    pub fn novel_followup_objects(&self, m: &SemanticMatcher) -> Vec<&NounPhrase> {
        self.followup_objects
            .iter()
            .filter(|o| !contains_object(&self.source_objects, o, m))
            .collect()
    }
}

/// Retained objects missing from the follow-up caption.
pub fn check_rule1(mp: &MetamorphicPair, m: &SemanticMatcher) -> Vec<Violation> {
    mp.with_fate(Fate::Retain)
        .filter(|f| !contains_object(&mp.followup_objects, &f.object, m))
        .map(|f| mp.violation(Rule::R1, &f.object, Side::Followup, ErrorHint::Type2_2))
        .collect()
}

/// Vanished objects still described in the follow-up caption.
pub fn check_rule2(mp: &MetamorphicPair, m: &SemanticMatcher) -> Vec<Violation> {
    mp.with_fate(Fate::Disappear)
        .filter(|f| contains_object(&mp.followup_objects, &f.object, m))
        .map(|f| mp.violation(Rule::R2, &f.object, Side::Followup, ErrorHint::Type3))
        .collect()
}

/// True when every source object was located and retained.
pub fn rule3_applies(mp: &MetamorphicPair) -> bool {
    mp.unlocated.is_empty() && mp.fates.iter().all(|f| f.fate == Fate::Retain)
}

/// Objects on either side with no counterpart on the other, when the pair
/// is content-equivalent. Multiplicity is ignored.
pub fn check_rule3(mp: &MetamorphicPair, m: &SemanticMatcher) -> Vec<Violation> {
    if !rule3_applies(mp) {
        return Vec::new();
    }
    let missing_in_followup = mp
        .source_objects
        .iter()
        .filter(|o| !contains_object(&mp.followup_objects, o, m))
        .map(|o| mp.violation(Rule::R3, o, Side::Followup, ErrorHint::Unknown));
    let missing_in_source = mp
        .followup_objects
        .iter()
        .filter(|o| !contains_object(&mp.source_objects, o, m))
        .map(|o| mp.violation(Rule::R3, o, Side::Source, ErrorHint::Type2_1));
    dedup(missing_in_followup.chain(missing_in_source).collect())
}

fn dedup(mut vs: Vec<Violation>) -> Vec<Violation> {
    let mut seen = std::collections::HashSet::new();
    vs.retain(|v| seen.insert((v.rule, v.object.to_lowercase(), v.side)));
    vs
}

/// Runs the three rules on a pair and settles the hints. A Rule 1 object
/// is relabelled as a misclassification when the follow-up caption names
/// some object the source caption lacks; each such novel object explains
/// one Rule 1 violation and is then no longer reported under Rule 3.
pub fn check_rules(mp: &MetamorphicPair, m: &SemanticMatcher) -> Vec<Violation> {
    let mut r1 = dedup(check_rule1(mp, m));
    let r2 = dedup(check_rule2(mp, m));
    let r3 = check_rule3(mp, m);

    let mut novel: Vec<String> = Vec::new();
    for o in mp.novel_followup_objects(m) {
        if !novel.iter().any(|n| n.eq_ignore_ascii_case(&o.surface)) {
            novel.push(o.surface.clone());
        }
    }
    let mut paired = Vec::new();
    for (v, partner) in r1.iter_mut().zip(novel.iter()) {
        v.hint = ErrorHint::Type1_2;
        paired.push(partner.to_lowercase());
    }
    let flagged: Vec<String> = r1.iter().map(|v| v.object.to_lowercase()).collect();
    let r3 = r3.into_iter().filter(|v| {
        let key = v.object.to_lowercase();
        match v.side {
            Side::Followup => !flagged.contains(&key),
            Side::Source => !paired.contains(&key),
        }
    });
    r1.into_iter().chain(r2).chain(r3).collect()
}

/// Builds the pair for one selected follow-up and checks it.
pub fn assess_mp(
    id: impl Into<String>,
    candidate: &CandidateAssessment,
    source_caption: &Caption,
    followup_caption: &Caption,
    map: &LocalizationMap,
    m: &SemanticMatcher,
) -> MetamorphicPair {
    let mut mp = MetamorphicPair {
        id: id.into(),
        spec: candidate.spec.clone(),
        source_caption: source_caption.clone(),
        followup_caption: followup_caption.clone(),
        source_objects: extract_objects(source_caption),
        followup_objects: extract_objects(followup_caption),
        fates: candidate.fates.clone(),
        unlocated: map.unlocated.iter().map(|(_, o)| o.clone()).collect(),
        violations: Vec::new(),
    };
    mp.violations = check_rules(&mp, m);
    mp
}

/// Like [`assess_mp`], computing the fates from a retained-pixel mask.
pub fn assess_with_mask(
    id: impl Into<String>,
    spec: TransformSpec,
    m_tran: BitMask,
    source_caption: &Caption,
    followup_caption: &Caption,
    map: &LocalizationMap,
    thresholds: FateThresholds,
    m: &SemanticMatcher,
) -> Result<MetamorphicPair> {
    let candidate = CandidateAssessment::new(spec, m_tran, map, thresholds)?;
    Ok(assess_mp(id, &candidate, source_caption, followup_caption, map, m))
}
